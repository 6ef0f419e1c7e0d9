//! LO-RANSAC with weighted minimal-sample drawing and adaptive termination.
//!
//! Randomness: one `ChaCha8Rng` seeded from `RansacParams::seed`. Each draw
//! consumes `SAMPLE_SIZE` weighted indices (redrawing on repeats); the stream
//! is consumed strictly in iteration order.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{
    kabsch, refine_pose_reprojection, solve_p3p, Correspondence2D3D, Correspondence3D3D, RansacParams,
    RobustError,
};
use crate::geometry::{CameraIntrinsics, RigidTransform};

/// A model-fitting problem for [`run_lo_ransac`].
#[allow(clippy::len_without_is_empty)]
pub trait RansacProblem {
    type Model: Clone;
    const SAMPLE_SIZE: usize;
    /// Smallest consensus set accepted as a result.
    const MIN_INLIERS: usize;

    fn len(&self) -> usize;
    fn weight(&self, index: usize) -> f64;
    /// Near-degenerate minimal samples are redrawn without spending an iteration.
    fn is_degenerate(&self, sample: &[usize]) -> bool;
    fn fit_minimal(&self, sample: &[usize]) -> Vec<Self::Model>;
    /// Residual of one datum (pixels or millimeters); infinite when undefined.
    fn residual(&self, model: &Self::Model, index: usize) -> f64;
    /// Local optimization on a consensus set.
    fn fit_consensus(&self, model: &Self::Model, inliers: &[usize]) -> Option<Self::Model>;
    /// Whether the whole data set is too degenerate to attempt sampling.
    fn check_data(&self) -> Result<(), RobustError> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Hypothesis<M> {
    pub model: M,
    pub inlier_count: usize,
    /// Sum of squared residuals clipped at the threshold.
    pub cost: f64,
    pub iteration: usize,
}

impl<M> Hypothesis<M> {
    /// More inliers, then lower cost, then earlier iteration.
    fn beats(&self, other: &Hypothesis<M>) -> bool {
        if self.inlier_count != other.inlier_count {
            return self.inlier_count > other.inlier_count;
        }
        if self.cost != other.cost {
            return self.cost < other.cost;
        }
        self.iteration < other.iteration
    }
}

#[derive(Debug, Clone)]
pub struct RansacOutcome<M> {
    pub model: M,
    pub inliers: Vec<bool>,
    pub inlier_count: usize,
    /// Minimal-sample iterations spent (degenerate redraws excluded).
    pub iterations: usize,
    pub local_optimizations: usize,
    /// Best distinct minimal-sample hypotheses, best first.
    pub top_hypotheses: Vec<Hypothesis<M>>,
}

impl<M> RansacOutcome<M> {
    pub fn inlier_indices(&self) -> Vec<usize> {
        self.inliers.iter().enumerate().filter(|(_, b)| **b).map(|(i, _)| i).collect()
    }
}

/// Iterations needed to draw one all-inlier sample with probability `confidence`.
pub fn required_iterations(confidence: f64, inlier_ratio: f64, sample_size: usize) -> usize {
    let w = inlier_ratio.clamp(0.0, 1.0).powi(sample_size as i32);
    if w >= 1.0 {
        return 1;
    }
    if w <= 0.0 {
        return usize::MAX;
    }
    let n = ((1.0 - confidence).ln() / (1.0 - w).ln()).ceil();
    if n.is_finite() && n >= 1.0 {
        n.min(usize::MAX as f64 / 2.0) as usize
    } else {
        1
    }
}

fn evaluate<P: RansacProblem>(problem: &P, model: &P::Model, threshold: f64) -> (usize, f64, Vec<usize>) {
    let mut cost = 0.0;
    let mut inliers = Vec::new();
    let t2 = threshold * threshold;
    for i in 0..problem.len() {
        let r = problem.residual(model, i);
        if r <= threshold {
            inliers.push(i);
            cost += r * r;
        } else {
            cost += t2;
        }
    }
    (inliers.len(), cost, inliers)
}

/// Runs LO-RANSAC, keeping up to `keep_top` best hypotheses.
pub fn run_lo_ransac<P: RansacProblem>(
    problem: &P,
    params: &RansacParams,
    keep_top: usize,
) -> Result<RansacOutcome<P::Model>, RobustError> {
    params.validate()?;
    let n = problem.len();
    let s = P::SAMPLE_SIZE;
    if n < P::MIN_INLIERS.max(s) {
        return Err(RobustError::NotEnoughInliers { found: n, required: P::MIN_INLIERS.max(s) });
    }
    problem.check_data()?;
    let weights: Vec<f64> = (0..n).map(|i| problem.weight(i)).collect();
    if weights.iter().filter(|w| **w > 0.0).count() < s {
        return Err(RobustError::Degenerate("fewer positively weighted data than the sample size".into()));
    }
    let dist = WeightedIndex::new(&weights)
        .map_err(|e| RobustError::InvalidParams(format!("correspondence weights: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);

    let mut best: Option<(Hypothesis<P::Model>, Vec<usize>)> = None;
    let mut top: Vec<Hypothesis<P::Model>> = Vec::new();
    let mut required = params.max_iterations;
    let mut iterations = 0;
    let mut draws = 0usize;
    let max_draws = params.max_iterations.saturating_mul(20).saturating_add(1000);
    let mut local_optimizations = 0;
    let mut sample = Vec::with_capacity(s);

    while iterations < required.min(params.max_iterations) && draws < max_draws {
        draws += 1;
        sample.clear();
        let mut tries = 0;
        while sample.len() < s && tries < 100 * s {
            tries += 1;
            let i = dist.sample(&mut rng);
            if !sample.contains(&i) {
                sample.push(i);
            }
        }
        if sample.len() < s || problem.is_degenerate(&sample) {
            continue;
        }
        iterations += 1;
        for model in problem.fit_minimal(&sample) {
            let (count, cost, inliers) = evaluate(problem, &model, params.inlier_threshold);
            let hyp = Hypothesis { model, inlier_count: count, cost, iteration: iterations };
            if keep_top > 0 {
                let pos = top.partition_point(|h| !hyp.beats(h));
                if pos < keep_top {
                    top.insert(pos, hyp.clone());
                    top.truncate(keep_top);
                }
            }
            let improves = best.as_ref().is_none_or(|(b, _)| hyp.beats(b));
            if !improves {
                continue;
            }
            let mut current = (hyp, inliers);
            // Local optimization: refit on the consensus set, keep only non-worsening rounds.
            for _ in 0..params.local_opt_rounds {
                if current.1.len() < P::SAMPLE_SIZE {
                    break;
                }
                local_optimizations += 1;
                let Some(refit) = problem.fit_consensus(&current.0.model, &current.1) else { break };
                let (c2, cost2, in2) = evaluate(problem, &refit, params.inlier_threshold);
                let candidate = Hypothesis { model: refit, inlier_count: c2, cost: cost2, iteration: current.0.iteration };
                if c2 >= current.0.inlier_count && (c2 > current.0.inlier_count || cost2 < current.0.cost) {
                    current = (candidate, in2);
                } else {
                    break;
                }
            }
            required = required_iterations(params.confidence, current.0.inlier_count as f64 / n as f64, s);
            best = Some(current);
        }
    }

    let Some((best, inlier_idx)) = best else {
        return Err(if iterations == 0 {
            RobustError::Degenerate("every minimal sample was degenerate".into())
        } else {
            RobustError::NotEnoughInliers { found: 0, required: P::MIN_INLIERS }
        });
    };
    if best.inlier_count < P::MIN_INLIERS {
        return Err(RobustError::NotEnoughInliers { found: best.inlier_count, required: P::MIN_INLIERS });
    }
    let mut mask = vec![false; n];
    for i in inlier_idx {
        mask[i] = true;
    }
    Ok(RansacOutcome {
        model: best.model,
        inlier_count: best.inlier_count,
        inliers: mask,
        iterations,
        local_optimizations,
        top_hypotheses: top,
    })
}

fn triangle_area(a: &nalgebra::Vector3<f64>, b: &nalgebra::Vector3<f64>, c: &nalgebra::Vector3<f64>) -> f64 {
    0.5 * (b - a).cross(&(c - a)).norm()
}

fn extent<'a>(points: impl Iterator<Item = &'a nalgebra::Vector3<f64>>) -> f64 {
    let mut lo = nalgebra::Vector3::repeat(f64::INFINITY);
    let mut hi = nalgebra::Vector3::repeat(f64::NEG_INFINITY);
    for p in points {
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    if lo.x.is_finite() {
        (hi - lo).norm()
    } else {
        0.0
    }
}

/// Relative area below which a triple counts as collinear.
const COLLINEAR_AREA: f64 = 1e-6;

/// PnP with P3P minimal samples; the model maps object points into the camera frame.
pub struct PnpProblem<'a> {
    pub corr: &'a [Correspondence2D3D],
    pub intrinsics: &'a CameraIntrinsics,
    model_scale: f64,
    pixel_scale: f64,
}

impl<'a> PnpProblem<'a> {
    pub fn new(corr: &'a [Correspondence2D3D], intrinsics: &'a CameraIntrinsics) -> Self {
        let model_scale = extent(corr.iter().map(|c| &c.model_point));
        let pixels: Vec<_> = corr.iter().map(|c| nalgebra::Vector3::new(c.pixel.x, c.pixel.y, 0.0)).collect();
        let pixel_scale = extent(pixels.iter());
        Self { corr, intrinsics, model_scale, pixel_scale }
    }
}

impl RansacProblem for PnpProblem<'_> {
    type Model = RigidTransform;
    const SAMPLE_SIZE: usize = 3;
    const MIN_INLIERS: usize = 4;

    fn len(&self) -> usize {
        self.corr.len()
    }

    fn weight(&self, index: usize) -> f64 {
        self.corr[index].weight
    }

    fn is_degenerate(&self, s: &[usize]) -> bool {
        let (a, b, c) = (&self.corr[s[0]], &self.corr[s[1]], &self.corr[s[2]]);
        let model_area = triangle_area(&a.model_point, &b.model_point, &c.model_point);
        let pa = nalgebra::Vector3::new(a.pixel.x, a.pixel.y, 0.0);
        let pb = nalgebra::Vector3::new(b.pixel.x, b.pixel.y, 0.0);
        let pc = nalgebra::Vector3::new(c.pixel.x, c.pixel.y, 0.0);
        let pixel_area = triangle_area(&pa, &pb, &pc);
        model_area <= COLLINEAR_AREA * self.model_scale * self.model_scale
            || pixel_area <= COLLINEAR_AREA * self.pixel_scale * self.pixel_scale
    }

    fn fit_minimal(&self, s: &[usize]) -> Vec<RigidTransform> {
        solve_p3p(&[self.corr[s[0]], self.corr[s[1]], self.corr[s[2]]], self.intrinsics).unwrap_or_default()
    }

    fn residual(&self, model: &RigidTransform, index: usize) -> f64 {
        let c = &self.corr[index];
        self.intrinsics
            .project(&model.apply(&c.model_point))
            .map(|p| (p - c.pixel).norm())
            .unwrap_or(f64::INFINITY)
    }

    fn fit_consensus(&self, model: &RigidTransform, inliers: &[usize]) -> Option<RigidTransform> {
        let subset: Vec<_> = inliers.iter().map(|&i| self.corr[i]).collect();
        refine_pose_reprojection(model, &subset, self.intrinsics).ok().map(|r| r.pose)
    }

    fn check_data(&self) -> Result<(), RobustError> {
        if self.model_scale <= 0.0 || self.pixel_scale <= 0.0 {
            return Err(RobustError::Degenerate("all correspondences coincide".into()));
        }
        Ok(())
    }
}

/// Rigid 3D-3D registration with Kabsch minimal samples; the model maps model points to world.
pub struct KabschProblem<'a> {
    pub corr: &'a [Correspondence3D3D],
    scale: f64,
}

impl<'a> KabschProblem<'a> {
    pub fn new(corr: &'a [Correspondence3D3D]) -> Self {
        let scale = extent(corr.iter().map(|c| &c.model_point)).max(extent(corr.iter().map(|c| &c.world_point)));
        Self { corr, scale }
    }
}

impl RansacProblem for KabschProblem<'_> {
    type Model = RigidTransform;
    const SAMPLE_SIZE: usize = 3;
    const MIN_INLIERS: usize = 3;

    fn len(&self) -> usize {
        self.corr.len()
    }

    fn weight(&self, index: usize) -> f64 {
        self.corr[index].weight
    }

    fn is_degenerate(&self, s: &[usize]) -> bool {
        let (a, b, c) = (&self.corr[s[0]], &self.corr[s[1]], &self.corr[s[2]]);
        let lim = COLLINEAR_AREA * self.scale * self.scale;
        triangle_area(&a.model_point, &b.model_point, &c.model_point) <= lim
            || triangle_area(&a.world_point, &b.world_point, &c.world_point) <= lim
    }

    fn fit_minimal(&self, s: &[usize]) -> Vec<RigidTransform> {
        let subset = [self.corr[s[0]], self.corr[s[1]], self.corr[s[2]]];
        kabsch(&subset).map(|t| vec![t]).unwrap_or_default()
    }

    fn residual(&self, model: &RigidTransform, index: usize) -> f64 {
        let c = &self.corr[index];
        (model.apply(&c.model_point) - c.world_point).norm()
    }

    fn fit_consensus(&self, _model: &RigidTransform, inliers: &[usize]) -> Option<RigidTransform> {
        let subset: Vec<_> = inliers.iter().map(|&i| self.corr[i]).collect();
        kabsch(&subset).ok()
    }

    fn check_data(&self) -> Result<(), RobustError> {
        if self.scale <= 0.0 {
            return Err(RobustError::Degenerate("all points coincide".into()));
        }
        Ok(())
    }
}

/// RANSAC-PnP: weighted P3P sampling, inliers within `inlier_threshold` px,
/// LO step = reprojection refinement on the consensus set.
pub fn ransac_pnp(
    corr: &[Correspondence2D3D],
    intr: &CameraIntrinsics,
    params: &RansacParams,
) -> Result<RansacOutcome<RigidTransform>, RobustError> {
    run_lo_ransac(&PnpProblem::new(corr, intr), params, 0)
}

/// RANSAC + Kabsch: inliers within `inlier_threshold` mm, LO step = weighted Kabsch on inliers.
pub fn ransac_kabsch(
    corr: &[Correspondence3D3D],
    params: &RansacParams,
) -> Result<RansacOutcome<RigidTransform>, RobustError> {
    run_lo_ransac(&KabschProblem::new(corr), params, 0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{compose, invert};
    use nalgebra::{Vector2, Vector3};
    use rand::Rng;
    use rand_distr::Normal;

    fn intr() -> CameraIntrinsics {
        CameraIntrinsics::pinhole(800.0, 800.0, 640.0, 480.0, 1280, 960)
    }

    fn truth() -> RigidTransform {
        RigidTransform::from_axis_angle(Vector3::new(0.4, -0.3, 0.2), Vector3::new(20.0, -10.0, 800.0))
    }

    fn pnp_scene(seed: u64, inliers: usize, outliers: usize, sigma: f64) -> (Vec<Correspondence2D3D>, Vec<bool>) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut corr = Vec::new();
        let mut is_inlier = Vec::new();
        for _ in 0..inliers {
            let m = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let mut p = intr().project(&truth().apply(&m)).unwrap();
            if sigma > 0.0 {
                p += Vector2::new(noise.sample(&mut rng), noise.sample(&mut rng));
            }
            corr.push(Correspondence2D3D::new(p, m));
            is_inlier.push(true);
        }
        for _ in 0..outliers {
            let m = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let p = Vector2::new(rng.random_range(0.0..1280.0), rng.random_range(0.0..960.0));
            corr.push(Correspondence2D3D::new(p, m));
            is_inlier.push(false);
        }
        (corr, is_inlier)
    }

    #[test]
    fn pnp_noiseless_exact() {
        let (corr, _) = pnp_scene(1, 100, 0, 0.0);
        let out = ransac_pnp(&corr, &intr(), &RansacParams::default()).unwrap();
        assert!(compose(&out.model, &invert(&truth())).rotation_angle() < 1e-6);
        assert!((out.model.translation() - truth().translation()).norm() < 1e-6);
        assert!(out.inliers.iter().all(|b| *b));
    }

    #[test]
    fn pnp_with_outliers() {
        for seed in 0..5 {
            let (corr, is_inlier) = pnp_scene(seed, 70, 30, 0.5);
            let out = ransac_pnp(&corr, &intr(), &RansacParams::default().with_seed(seed)).unwrap();
            assert!((out.model.translation() - truth().translation()).norm() < 2.0);
            let flagged = out.inliers.iter().filter(|b| **b).count();
            let true_pos = out.inliers.iter().zip(&is_inlier).filter(|(a, b)| **a && **b).count();
            assert!(true_pos as f64 / flagged as f64 >= 0.95);
        }
    }

    #[test]
    fn pnp_too_few() {
        let (corr, _) = pnp_scene(2, 3, 0, 0.0);
        assert!(matches!(
            ransac_pnp(&corr, &intr(), &RansacParams::default()),
            Err(RobustError::NotEnoughInliers { .. })
        ));
    }

    #[test]
    fn deterministic_given_seed() {
        let (corr, _) = pnp_scene(3, 60, 40, 1.0);
        let p = RansacParams::default().with_seed(42);
        let a = ransac_pnp(&corr, &intr(), &p).unwrap();
        let b = ransac_pnp(&corr, &intr(), &p).unwrap();
        assert_eq!(a.inliers, b.inliers);
        assert_eq!(a.model, b.model);
        assert_eq!(a.iterations, b.iterations);
    }

    #[test]
    fn adaptive_termination_bound() {
        let (corr, _) = pnp_scene(4, 80, 20, 0.5);
        let p = RansacParams::default().with_seed(9);
        let out = ransac_pnp(&corr, &intr(), &p).unwrap();
        let w = out.inlier_count as f64 / corr.len() as f64;
        let bound = required_iterations(p.confidence, w, 3) + p.local_opt_rounds;
        assert!(out.iterations <= bound, "{} > {}", out.iterations, bound);
    }

    #[test]
    fn required_iterations_formula() {
        assert_eq!(required_iterations(0.999, 1.0, 3), 1);
        // log(0.001) / log(1 - 0.125) = 51.7
        assert_eq!(required_iterations(0.999, 0.5, 3), 52);
    }

    fn kabsch_scene(seed: u64, n_in: usize, n_out: usize, sigma: f64) -> Vec<Correspondence3D3D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let noise = Normal::new(0.0, sigma.max(1e-300)).unwrap();
        let mut out = Vec::new();
        for _ in 0..n_in {
            let m = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let mut w = truth().apply(&m);
            if sigma > 0.0 {
                w += Vector3::new(noise.sample(&mut rng), noise.sample(&mut rng), noise.sample(&mut rng));
            }
            out.push(Correspondence3D3D::new(w, m));
        }
        let center = *truth().translation();
        for _ in 0..n_out {
            let m = Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            let w = center + Vector3::new(rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0), rng.random_range(-100.0..100.0));
            out.push(Correspondence3D3D::new(w, m));
        }
        out
    }

    #[test]
    fn kabsch_ransac_cases() {
        let corr = kabsch_scene(1, 50, 0, 0.0);
        let out = ransac_kabsch(&corr, &RansacParams::with_threshold(1.0)).unwrap();
        assert!(compose(&out.model, &invert(&truth())).rotation_angle() < 1e-9);
        assert!((out.model.translation() - truth().translation()).norm() < 1e-9);

        for seed in 0..5 {
            let corr = kabsch_scene(seed, 60, 40, 1.0);
            let out = ransac_kabsch(&corr, &RansacParams::with_threshold(5.0).with_seed(seed)).unwrap();
            assert!(compose(&out.model, &invert(&truth())).rotation_angle().to_degrees() < 1.0);
        }

        let p = Vector3::new(1.0, 1.0, 1.0);
        let same = vec![Correspondence3D3D::new(p, p); 10];
        assert!(matches!(ransac_kabsch(&same, &RansacParams::default()), Err(RobustError::Degenerate(_))));
    }

    #[test]
    fn local_optimization_never_loses_inliers() {
        struct Recording<'a> {
            inner: KabschProblem<'a>,
            log: std::cell::RefCell<Vec<(usize, usize)>>,
        }
        impl RansacProblem for Recording<'_> {
            type Model = RigidTransform;
            const SAMPLE_SIZE: usize = 3;
            const MIN_INLIERS: usize = 3;
            fn len(&self) -> usize { self.inner.len() }
            fn weight(&self, i: usize) -> f64 { self.inner.weight(i) }
            fn is_degenerate(&self, s: &[usize]) -> bool { self.inner.is_degenerate(s) }
            fn fit_minimal(&self, s: &[usize]) -> Vec<RigidTransform> { self.inner.fit_minimal(s) }
            fn residual(&self, m: &RigidTransform, i: usize) -> f64 { self.inner.residual(m, i) }
            fn fit_consensus(&self, m: &RigidTransform, inl: &[usize]) -> Option<RigidTransform> {
                let out = self.inner.fit_consensus(m, inl)?;
                let after = (0..self.len()).filter(|&i| self.residual(&out, i) <= 5.0).count();
                self.log.borrow_mut().push((inl.len(), after));
                Some(out)
            }
        }
        let corr = kabsch_scene(8, 60, 40, 2.0);
        let problem = Recording { inner: KabschProblem::new(&corr), log: Default::default() };
        let out = run_lo_ransac(&problem, &RansacParams::with_threshold(5.0), 0).unwrap();
        assert!(out.local_optimizations > 0);
        // Rounds that lose inliers are discarded, so the result keeps at least the
        // consensus size seen before each accepted round.
        let max_before = problem.log.borrow().iter().map(|(b, _)| *b).max().unwrap();
        assert!(out.inlier_count >= max_before);
    }
}
