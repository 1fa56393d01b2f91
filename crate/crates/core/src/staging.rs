//! Multi-stage alignment over a long horizon.
//!
//! * Pontryagin staging fits an independent matrix to each window of two
//!   observed orbits.
//! * Bellman staging generates the second orbit per stage from `y_0 = A x_0`,
//!   solves the coupled first-order conditions, and adopts whichever of the new
//!   matrix and the previous stage's matrix aligns the current stage better.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{orbit, StepMap, Trajectory};
use crate::similarity::{
    closed_form_align, closed_form_align_bounded, decoupled_gradient, mean_sq_misfit, similarity_degree,
    CoupledStage, SimilarityMatrix, DEFAULT_BOUND,
};

/// Splits `N = stage_len * num_stages` steps into consecutive windows sharing boundary states.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StagePlan {
    pub stage_len: usize,
    pub num_stages: usize,
}

impl StagePlan {
    pub fn new(stage_len: usize, num_stages: usize) -> Result<Self> {
        if stage_len == 0 || num_stages == 0 {
            return Err(Error::Invalid("stage plan needs positive stage length and count".into()));
        }
        Ok(StagePlan {
            stage_len,
            num_stages,
        })
    }

    pub fn total_steps(&self) -> usize {
        self.stage_len * self.num_stages
    }

    /// Index of the first state of stage `m`.
    pub fn start(&self, m: usize) -> usize {
        m * self.stage_len
    }

    fn check_covers(&self, steps: usize) -> Result<()> {
        if steps < self.total_steps() {
            return Err(Error::Invalid(format!(
                "orbit has {steps} steps but the plan needs {}",
                self.total_steps()
            )));
        }
        Ok(())
    }
}

/// Knobs of the coupled Newton solver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    /// Target Frobenius norm of the residual.
    pub tol: f64,
    pub max_iter: usize,
    /// Entry bound of the admissible box.
    pub bound: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tol: 1e-10,
            max_iter: 200,
            bound: DEFAULT_BOUND,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveDiagnostics {
    pub residual_norm: f64,
    pub cost: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Iterations that fell back to gradient descent.
    pub descent_steps: usize,
}

/// Which matrix a Bellman stage adopted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Adopted {
    Candidate,
    Previous,
}

/// The two candidates a Bellman stage chose between.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub candidate_rho: f64,
    pub previous_rho: Option<f64>,
    pub adopted: Adopted,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageReport {
    pub index: usize,
    #[serde(rename = "A")]
    pub a: SimilarityMatrix,
    pub rho: f64,
    pub omega: f64,
    pub residual_norm: f64,
    pub iterations: usize,
    pub converged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<[f64; 2]>,
    /// Projected norm of the embedding-parameter residual.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda_residual: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub selection: Option<Selection>,
}

/// Something with a residual that is half the gradient of a scalar cost in the entries of `A`.
pub(crate) trait Objective: Sync {
    fn eval(&self, a: &SimilarityMatrix) -> Result<(f64, DMatrix<f64>)>;

    /// Positive semidefinite model of the cost's curvature, when a cheap one exists.
    fn gauss_newton(&self, _a: &SimilarityMatrix) -> Result<Option<DMatrix<f64>>> {
        Ok(None)
    }
}

impl Objective for CoupledStage<'_> {
    fn eval(&self, a: &SimilarityMatrix) -> Result<(f64, DMatrix<f64>)> {
        let e = self.evaluate(a)?;
        Ok((e.cost, e.residual))
    }

    fn gauss_newton(&self, a: &SimilarityMatrix) -> Result<Option<DMatrix<f64>>> {
        CoupledStage::gauss_newton(self, a).map(Some)
    }
}

fn perturbed(a: &SimilarityMatrix, p: usize, delta: f64) -> Result<SimilarityMatrix> {
    let mut e = a.entries().clone();
    let (n, idx) = (e.nrows(), p);
    e[(idx / n, idx % n)] += delta;
    SimilarityMatrix::projected(e, a.bound())
}

fn flatten(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows();
    DVector::from_fn(n * n, |p, _| m[(p / n, p % n)])
}

fn unflatten(v: &DVector<f64>, n: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, n, |i, j| v[i * n + j])
}

/// Central-difference Jacobian of the residual with respect to the entries of `A` (row-major).
fn newton_matrix<O: Objective + ?Sized>(obj: &O, a: &SimilarityMatrix) -> Result<DMatrix<f64>> {
    let n = a.dim();
    let q = n * n;
    let mut h = DMatrix::zeros(q, q);
    for p in 0..q {
        let entry = a.entries()[(p / n, p % n)];
        let step = 1e-6 * entry.abs().max(1.0);
        let (_, rp) = obj.eval(&perturbed(a, p, step)?)?;
        let (_, rm) = obj.eval(&perturbed(a, p, -step)?)?;
        h.set_column(p, &(flatten(&(rp - rm)) / (2.0 * step)));
    }
    Ok(h)
}

const MAX_BACKTRACKS: usize = 30;

/// Relative cost change treated as roundoff: misfits are small differences of
/// large terms, so the cost carries relative noise well above machine epsilon.
pub(crate) const COST_SLACK: f64 = 1e-8;

struct Iterate {
    a: SimilarityMatrix,
    cost: f64,
    res: DMatrix<f64>,
    norm: f64,
}

/// Levenberg–Marquardt search along `(M + μ I) δ = -R`. Returns the accepted
/// iterate and updates `mu`.
fn damped_step<O: Objective + ?Sized>(
    obj: &O,
    cur: &Iterate,
    curvature: &DMatrix<f64>,
    mu: &mut Option<f64>,
    bound: f64,
) -> Result<Option<Iterate>> {
    let n = cur.a.dim();
    let q = n * n;
    let rhs = -flatten(&cur.res);
    let scale = curvature.amax().max(f64::MIN_POSITIVE);
    let mut damping = mu.unwrap_or(1e-10 * scale);
    let mut found = None;
    for _ in 0..MAX_BACKTRACKS {
        let shifted = curvature + DMatrix::<f64>::identity(q, q) * damping;
        if let Some(step) = shifted.cholesky().map(|c| c.solve(&rhs)) {
            let a = SimilarityMatrix::projected(cur.a.entries() + unflatten(&step, n), bound)?;
            if let Ok((cost, res)) = obj.eval(&a) {
                let norm = res.norm();
                let better = cost < cur.cost || (cost <= cur.cost * (1.0 + COST_SLACK) && norm < cur.norm);
                if cost.is_finite() && better {
                    found = Some(Iterate { a, cost, res, norm });
                    damping /= 3.0;
                    break;
                }
            }
        }
        damping = (damping * 4.0).max(1e-14 * scale);
    }
    *mu = Some(damping.max(1e-16 * scale));
    Ok(found)
}

/// Damped Newton on the residual `R = ½∇J`.
///
/// Steps come from `(M + μ I) δ = -R` with `μ` adapted Levenberg–Marquardt style.
/// `M` is the Gauss–Newton matrix when the objective has one, and the
/// symmetrized finite-difference Newton matrix otherwise or when the
/// Gauss–Newton step stalls. A step is accepted when it lowers the cost (or
/// keeps it within roundoff and lowers `‖R‖`). When neither helps, one gradient-descent step
/// with backtracking is tried. Iterates stay in the box.
pub(crate) fn newton_solve<O: Objective + ?Sized>(
    obj: &O,
    a_init: SimilarityMatrix,
    opts: &SolverOptions,
) -> Result<(SimilarityMatrix, SolveDiagnostics)> {
    let a = SimilarityMatrix::projected(a_init.into_entries(), opts.bound)?;
    let (cost, res) = obj.eval(&a)?;
    let norm = res.norm();
    let mut cur = Iterate { a, cost, res, norm };
    let mut descent_steps = 0;
    let mut iterations = 0;
    let (mut mu_gn, mut mu_newton) = (None, None);

    while cur.norm > opts.tol && iterations < opts.max_iter {
        iterations += 1;

        let mut next = None;
        if let Some(gn) = obj.gauss_newton(&cur.a)? {
            next = damped_step(obj, &cur, &gn, &mut mu_gn, opts.bound)?;
        }
        let mut hessian = None;
        if next.is_none() {
            let raw = newton_matrix(obj, &cur.a)?;
            let h = (&raw + raw.transpose()) * 0.5;
            next = damped_step(obj, &cur, &h, &mut mu_newton, opts.bound)?;
            hessian = Some(h);
        }
        if next.is_none() {
            let h = hessian.expect("set above");
            let mut alpha = 1.0 / h.norm().max(f64::MIN_POSITIVE);
            for _ in 0..MAX_BACKTRACKS {
                let a = SimilarityMatrix::projected(cur.a.entries() - &cur.res * alpha, opts.bound)?;
                if let Ok((cost, res)) = obj.eval(&a) {
                    if cost.is_finite() && cost < cur.cost {
                        let norm = res.norm();
                        next = Some(Iterate { a, cost, res, norm });
                        descent_steps += 1;
                        break;
                    }
                }
                alpha *= 0.5;
            }
        }

        match next {
            Some(it) => cur = it,
            None => break,
        }
    }

    Ok((
        cur.a,
        SolveDiagnostics {
            residual_norm: cur.norm,
            cost: cur.cost,
            iterations,
            converged: cur.norm <= opts.tol,
            descent_steps,
        },
    ))
}

/// Solves the coupled first-order conditions over one stage starting at `x0`.
pub fn solve_coupled(
    x0: &DVector<f64>,
    x_map: &dyn StepMap,
    y_map: &dyn StepMap,
    stage_len: usize,
    a_init: SimilarityMatrix,
    opts: &SolverOptions,
) -> Result<(SimilarityMatrix, SolveDiagnostics)> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("solver tolerance must be positive".into()));
    }
    let stage = CoupledStage::new(x0, x_map, y_map, stage_len)?;
    newton_solve(&stage, a_init, opts)
}

/// Starting matrix for a coupled stage: the decoupled fit against the second
/// system run from the same initial state, or the identity when that fit is
/// singular or sends the coupled orbit out of the admissible region.
pub fn default_init(xs: &[DVector<f64>], y_map: &dyn StepMap, bound: f64) -> SimilarityMatrix {
    let n = xs[0].len();
    let steps = xs.len() - 1;
    orbit(y_map, &xs[0], steps)
        .ok()
        .and_then(|ys| closed_form_align_bounded(xs, &ys, 0.0, bound).ok())
        .filter(|a| orbit(y_map, &a.apply(&xs[0]), steps).is_ok())
        .unwrap_or_else(|| {
            SimilarityMatrix::projected(DMatrix::identity(n, n), bound).expect("identity fits any bound ≥ 1")
        })
}

/// Per-window closed-form fits of two observed orbits.
pub fn pontryagin_align(x: &Trajectory, y: &Trajectory, plan: &StagePlan, tau: f64) -> Result<Vec<StageReport>> {
    if x.dim() != y.dim() {
        return Err(Error::DimensionMismatch {
            expected: x.dim(),
            found: y.dim(),
        });
    }
    plan.check_covers(x.steps())?;
    plan.check_covers(y.steps())?;
    (0..plan.num_stages)
        .into_par_iter()
        .map(|m| {
            let xs = x.window(plan.start(m), plan.stage_len);
            let ys = y.window(plan.start(m), plan.stage_len);
            let a = closed_form_align(xs, ys, tau)?;
            let omega = mean_sq_misfit(&a, xs, ys)?;
            let grad = decoupled_gradient(&a, xs, ys, tau)?;
            Ok(StageReport {
                index: m,
                rho: similarity_degree(omega)?,
                omega,
                residual_norm: 0.5 * grad.norm(),
                iterations: 0,
                converged: true,
                a,
                lambda: None,
                lambda_residual: None,
                selection: None,
            })
        })
        .collect()
}

/// Result of a Bellman run.
#[derive(Debug, Clone)]
pub struct BellmanRun {
    pub reports: Vec<StageReport>,
    /// Whole-horizon matrix used for stages not yet replaced.
    pub baseline: SimilarityMatrix,
    pub baseline_diagnostics: SolveDiagnostics,
    /// `cumulative[m]` is the global ρ with the first `m` stages adopted.
    pub cumulative: Vec<f64>,
    /// The first orbit over the whole horizon.
    pub x: Vec<DVector<f64>>,
}

/// Whole-horizon matrix `A₀`: the coupled solve over the plan's full horizon,
/// with one continuous second orbit from `A₀ x_0`.
pub fn solve_baseline(
    xs: &[DVector<f64>],
    y_map: &dyn StepMap,
    plan: &StagePlan,
    opts: &SolverOptions,
) -> Result<(SimilarityMatrix, SolveDiagnostics)> {
    plan.check_covers(xs.len().saturating_sub(1))?;
    let horizon = xs[..=plan.total_steps()].to_vec();
    let init = default_init(&horizon, y_map, opts.bound);
    let stage = CoupledStage::from_states(horizon, y_map)?;
    newton_solve(&stage, init, opts)
}

/// Stage misfit sum `Σ_{k=1}^{L} ‖A x_k - y_k‖²` with `y_0 = A x_0` on the window starting at `start`.
fn stage_tail_sum(
    a: &SimilarityMatrix,
    xs: &[DVector<f64>],
    y_map: &dyn StepMap,
    start: usize,
    len: usize,
) -> Result<f64> {
    let window = &xs[start..=start + len];
    let ys = orbit(y_map, &a.apply(&window[0]), len)?;
    Ok(mean_sq_misfit(a, window, &ys)? * len as f64)
}

/// Global ρ over the plan's horizon using `adopted[s]` for `s < m` and `baseline` elsewhere.
pub fn cumulative_similarity(
    adopted: &[SimilarityMatrix],
    baseline: &SimilarityMatrix,
    xs: &[DVector<f64>],
    y_map: &dyn StepMap,
    plan: &StagePlan,
    m: usize,
) -> Result<f64> {
    if m > plan.num_stages || m > adopted.len() {
        return Err(Error::Invalid(format!("cannot adopt {m} stages")));
    }
    plan.check_covers(xs.len().saturating_sub(1))?;
    let mut total = 0.0;
    for s in 0..plan.num_stages {
        let a = if s < m { &adopted[s] } else { baseline };
        total += segment_sum(stage_tail_sum(a, xs, y_map, plan.start(s), plan.stage_len))?;
    }
    similarity_degree(total / plan.total_steps() as f64)
}

/// The whole curve `m = 0..=num_stages`, computed from per-stage sums.
pub fn cumulative_curve(
    adopted: &[SimilarityMatrix],
    baseline: &SimilarityMatrix,
    xs: &[DVector<f64>],
    y_map: &dyn StepMap,
    plan: &StagePlan,
) -> Result<Vec<f64>> {
    plan.check_covers(xs.len().saturating_sub(1))?;
    if adopted.len() < plan.num_stages {
        return Err(Error::Invalid("one adopted matrix per stage is required".into()));
    }
    let sums = |pick: &(dyn Fn(usize) -> SimilarityMatrix + Sync)| -> Result<Vec<f64>> {
        (0..plan.num_stages)
            .into_par_iter()
            .map(|s| segment_sum(stage_tail_sum(&pick(s), xs, y_map, plan.start(s), plan.stage_len)))
            .collect()
    };
    let base = sums(&|_| baseline.clone())?;
    let mine = sums(&|s| adopted[s].clone())?;
    curve_from_sums(&base, &mine, plan.total_steps())
}

/// Prefix swaps of per-stage misfit sums: entry `m` uses `adopted` on the first `m` stages.
/// Summed in stage order, matching `cumulative_similarity`.
pub(crate) fn curve_from_sums(baseline: &[f64], adopted: &[f64], steps: usize) -> Result<Vec<f64>> {
    (0..=baseline.len())
        .map(|m| {
            let total: f64 = adopted[..m].iter().chain(&baseline[m..]).sum();
            similarity_degree(total / steps as f64)
        })
        .collect()
}

/// Misfit sum of one segment; a segment whose second orbit leaves the admissible
/// region counts as an infinite misfit.
pub(crate) fn segment_sum(result: Result<f64>) -> Result<f64> {
    match result {
        Err(Error::Overflow { .. }) => Ok(f64::INFINITY),
        other => other,
    }
}

/// Bellman staging of the coupled problem over `plan` from `x0`.
pub fn bellman_dp(
    x_map: &dyn StepMap,
    y_map: &dyn StepMap,
    x0: &DVector<f64>,
    plan: &StagePlan,
    opts: &SolverOptions,
) -> Result<BellmanRun> {
    if !(opts.tol > 0.0) {
        return Err(Error::Invalid("solver tolerance must be positive".into()));
    }
    let xs = orbit(x_map, x0, plan.total_steps())?;
    let mut reports: Vec<StageReport> = Vec::with_capacity(plan.num_stages);
    for m in 0..plan.num_stages {
        let window = xs[plan.start(m)..=plan.start(m) + plan.stage_len].to_vec();
        let init = default_init(&window, y_map, opts.bound);
        let stage = CoupledStage::from_states(window, y_map)?;
        let (candidate, diag) = newton_solve(&stage, init, opts)?;
        let cand_omega = stage.omega(&candidate)?;
        let cand_rho = similarity_degree(cand_omega)?;

        let previous = match reports.last() {
            Some(prev) => {
                let omega = stage.omega(&prev.a)?;
                Some((prev.a.clone(), omega, similarity_degree(omega)?))
            }
            None => None,
        };
        let previous_rho = previous.as_ref().map(|p| p.2);
        let (a, omega, rho, adopted) = match previous {
            Some((pa, po, pr)) if pr > cand_rho => (pa, po, pr, Adopted::Previous),
            _ => (candidate, cand_omega, cand_rho, Adopted::Candidate),
        };
        reports.push(StageReport {
            index: m,
            a,
            rho,
            omega,
            residual_norm: diag.residual_norm,
            iterations: diag.iterations,
            converged: diag.converged,
            lambda: None,
            lambda_residual: None,
            selection: Some(Selection {
                candidate_rho: cand_rho,
                previous_rho,
                adopted,
            }),
        });
    }

    let (baseline, baseline_diagnostics) = solve_baseline(&xs, y_map, plan, opts)?;
    let adopted: Vec<_> = reports.iter().map(|r| r.a.clone()).collect();
    let cumulative = cumulative_curve(&adopted, &baseline, &xs, y_map, plan)?;
    Ok(BellmanRun {
        reports,
        baseline,
        baseline_diagnostics,
        cumulative,
        x: xs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::integrator::{simulate, Rk4Map, DEFAULT_DT};
    use crate::similarity::tests::Scalar;
    use crate::systems::{make_system, NO_OVERRIDES};
    use approx::assert_relative_eq;

    fn x0() -> DVector<f64> {
        DVector::from_vec(vec![0.1, 0.1, 0.1])
    }

    #[test]
    fn plan_rejects_zero_and_short_trajectories() {
        assert!(StagePlan::new(0, 3).is_err());
        assert!(StagePlan::new(3, 0).is_err());
        let plan = StagePlan::new(10, 4).unwrap();
        assert_eq!(plan.total_steps(), 40);
        assert_eq!(plan.start(3), 30);
        assert!(plan.check_covers(39).is_err());
        assert!(plan.check_covers(40).is_ok());
    }

    #[test]
    fn scalar_solve_reaches_the_hand_root() {
        let xm = Scalar { linear: 2.0, quadratic: 0.0 };
        let ym = Scalar { linear: 1.0, quadratic: 1.0 };
        let init = SimilarityMatrix::new(DMatrix::from_element(1, 1, 0.9), 1e4).unwrap();
        let (a, d) = solve_coupled(&DVector::from_element(1, 1.0), &xm, &ym, 1, init, &SolverOptions::default()).unwrap();
        assert!(d.converged, "{d:?}");
        assert!((a.entries()[(0, 0)] - 1.0).abs() < 1e-10);
    }

    #[test]
    fn self_alignment_converges_at_once() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let map = Rk4Map::new(&lorenz, DEFAULT_DT, None).unwrap();
        let (a, d) = solve_coupled(&x0(), &map, &map, 10, SimilarityMatrix::identity(3), &SolverOptions::default()).unwrap();
        assert!(d.converged);
        assert_eq!(d.iterations, 0);
        assert_eq!(a.entries(), &DMatrix::identity(3, 3));
    }

    #[test]
    fn solver_rejects_non_positive_tolerance() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let map = Rk4Map::new(&lorenz, DEFAULT_DT, None).unwrap();
        let opts = SolverOptions { tol: 0.0, ..Default::default() };
        assert!(solve_coupled(&x0(), &map, &map, 5, SimilarityMatrix::identity(3), &opts).is_err());
    }

    #[test]
    fn iterates_respect_the_box() {
        let xm = Scalar { linear: 2.0, quadratic: 0.0 };
        let ym = Scalar { linear: 1.0, quadratic: 1.0 };
        let opts = SolverOptions { bound: 0.8, ..Default::default() };
        let init = SimilarityMatrix::new(DMatrix::from_element(1, 1, 0.7), 0.8).unwrap();
        let (a, d) = solve_coupled(&DVector::from_element(1, 1.0), &xm, &ym, 1, init, &opts).unwrap();
        assert!(a.entries()[(0, 0)].abs() <= 0.8);
        assert_eq!(a.bound(), 0.8);
        assert!(d.cost.is_finite());
    }

    #[test]
    fn pontryagin_on_equal_orbits_is_identity() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let x = simulate(&lorenz, &x0(), 200, DEFAULT_DT, None).unwrap();
        let plan = StagePlan::new(10, 20).unwrap();
        for r in pontryagin_align(&x, &x, &plan, 0.0).unwrap() {
            assert_relative_eq!(r.a.entries(), &DMatrix::identity(3, 3), epsilon = 1e-9);
            assert_relative_eq!(r.rho, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn single_stage_pontryagin_is_the_closed_form() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let chua = make_system("chua", NO_OVERRIDES).unwrap();
        let x = simulate(&lorenz, &x0(), 300, DEFAULT_DT, None).unwrap();
        let y = simulate(&chua, &x0(), 300, DEFAULT_DT, None).unwrap();
        let whole = closed_form_align(&x.states, &y.states, 1e-4).unwrap();
        let staged = pontryagin_align(&x, &y, &StagePlan::new(300, 1).unwrap(), 1e-4).unwrap();
        assert_eq!(staged.len(), 1);
        assert_relative_eq!(staged[0].a.entries(), whole.entries(), epsilon = 1e-12);
    }

    #[test]
    fn pontryagin_checks_shapes() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let x = simulate(&lorenz, &x0(), 50, DEFAULT_DT, None).unwrap();
        assert!(pontryagin_align(&x, &x, &StagePlan::new(10, 6).unwrap(), 0.0).is_err());
    }

    #[test]
    fn bellman_on_one_system_adopts_identity_everywhere() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let map = Rk4Map::new(&lorenz, DEFAULT_DT, None).unwrap();
        let plan = StagePlan::new(10, 12).unwrap();
        let run = bellman_dp(&map, &map, &x0(), &plan, &SolverOptions::default()).unwrap();
        for r in &run.reports {
            assert_relative_eq!(r.a.entries(), &DMatrix::identity(3, 3), epsilon = 1e-9);
            assert_relative_eq!(r.rho, 1.0, epsilon = 1e-12);
        }
        assert_eq!(run.cumulative.len(), 13);
        for c in &run.cumulative {
            assert_relative_eq!(*c, 1.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn bellman_selection_and_curve_endpoints() {
        let lorenz = make_system("lorenz", NO_OVERRIDES).unwrap();
        let chen = make_system("chen", NO_OVERRIDES).unwrap();
        let xm = Rk4Map::new(&lorenz, DEFAULT_DT, None).unwrap();
        let ym = Rk4Map::new(&chen, DEFAULT_DT, None).unwrap();
        let plan = StagePlan::new(10, 8).unwrap();
        let opts = SolverOptions::default();
        let run = bellman_dp(&xm, &ym, &x0(), &plan, &opts).unwrap();

        for r in &run.reports {
            let sel = r.selection.as_ref().unwrap();
            let best = sel.previous_rho.map_or(sel.candidate_rho, |p| p.max(sel.candidate_rho));
            assert_eq!(r.rho, best);
            assert!(r.a.entries().amax() <= opts.bound);
            assert_relative_eq!(r.rho, similarity_degree(r.omega).unwrap());
        }
        assert!(run.reports[0].selection.as_ref().unwrap().previous_rho.is_none());

        let adopted: Vec<_> = run.reports.iter().map(|r| r.a.clone()).collect();
        let first = cumulative_similarity(&adopted, &run.baseline, &run.x, &ym, &plan, 0).unwrap();
        let last = cumulative_similarity(&adopted, &run.baseline, &run.x, &ym, &plan, 8).unwrap();
        assert_relative_eq!(first, run.cumulative[0], epsilon = 1e-12);
        assert_relative_eq!(last, run.cumulative[8], epsilon = 1e-12);
        assert!(cumulative_similarity(&adopted, &run.baseline, &run.x, &ym, &plan, 9).is_err());
    }

    #[test]
    fn default_init_falls_back_to_identity() {
        let zero = make_system("lorenz", NO_OVERRIDES).unwrap();
        let map = Rk4Map::new(&zero, DEFAULT_DT, None).unwrap();
        // A single repeated state has a rank-one Gram matrix.
        let xs = vec![DVector::from_vec(vec![1.0, 0.0, 0.0]); 4];
        assert_eq!(default_init(&xs, &map, 1e4).entries(), &DMatrix::identity(3, 3));
    }
}
