//! Joint search over a similarity matrix and the embedding parameters of hybrid systems.
//!
//! The first orbit comes from `H1(λ1)` started at `x0`, the second from
//! `H2(λ2)` started at `A x0`. A side that is not a hybrid ignores its
//! parameter; its residual component is zero.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{orbit, orbit_with_sensitivity, Rk4Map, SensitivityMode};
use crate::similarity::{mean_sq_misfit, similarity_degree, CoupledStage, SimilarityMatrix};
use crate::staging::{
    curve_from_sums, default_init, segment_sum, COST_SLACK, newton_solve, Adopted, Selection, SolveDiagnostics, SolverOptions, StagePlan, StageReport,
};
use crate::systems::{lorenz_chua_hybrid, make_system, SystemSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HomotopyAlignment {
    #[serde(rename = "A")]
    pub a: SimilarityMatrix,
    pub lambda: [f64; 2],
    pub kkt_a_norm: f64,
    pub kkt_lambda_norm: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointOptions {
    /// Inner solver for `A`; its `tol` is also the tolerance on the λ residual.
    pub solver: SolverOptions,
    pub max_outer: usize,
    pub lambda_lo: [f64; 2],
    pub lambda_hi: [f64; 2],
    /// Forces `λ1 = λ2` when both sides are hybrids.
    pub tie: bool,
}

impl Default for JointOptions {
    fn default() -> Self {
        JointOptions {
            solver: SolverOptions::default(),
            max_outer: 100,
            lambda_lo: [0.0, 0.0],
            lambda_hi: [1.0, 1.0],
            tie: false,
        }
    }
}

pub const DEFAULT_LAMBDA: [f64; 2] = [0.5, 0.5];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct JointDiagnostics {
    pub outer_iterations: usize,
    pub inner_iterations: usize,
    pub cost: f64,
    pub converged: bool,
}

/// Outer-iteration budget of the whole-horizon reference solve. Over a long
/// chaotic horizon it rarely converges, and each outer step re-solves `A`.
const BASELINE_MAX_OUTER: usize = 20;

const LAMBDA_STEP: f64 = 0.1;
const LAMBDA_SHRINK: f64 = 0.5;
const LAMBDA_BACKTRACKS: usize = 30;

/// One stage of the joint problem.
pub struct JointStage<'a> {
    pub x0: DVector<f64>,
    pub h1: &'a SystemSpec,
    pub h2: &'a SystemSpec,
    pub stage_len: usize,
    pub dt: f64,
}

fn lambda_for(system: &SystemSpec, value: f64) -> Option<f64> {
    system.is_hybrid().then_some(value)
}

fn check_lambda(lambda: [f64; 2]) -> Result<()> {
    match lambda.iter().find(|l| !(0.0..=1.0).contains(*l)) {
        Some(&l) => Err(Error::LambdaOutOfBounds(l)),
        None => Ok(()),
    }
}

impl<'a> JointStage<'a> {
    pub fn new(x0: DVector<f64>, h1: &'a SystemSpec, h2: &'a SystemSpec, stage_len: usize, dt: f64) -> Result<Self> {
        if stage_len == 0 {
            return Err(Error::Invalid("stage length must be at least 1".into()));
        }
        if h1.dim() != h2.dim() {
            return Err(Error::DimensionMismatch {
                expected: h1.dim(),
                found: h2.dim(),
            });
        }
        if x0.len() != h1.dim() {
            return Err(Error::DimensionMismatch {
                expected: h1.dim(),
                found: x0.len(),
            });
        }
        Ok(JointStage {
            x0,
            h1,
            h2,
            stage_len,
            dt,
        })
    }

    pub fn x_map(&self, lambda: [f64; 2]) -> Result<Rk4Map<'a>> {
        Rk4Map::new(self.h1, self.dt, lambda_for(self.h1, lambda[0]))
    }

    pub fn y_map(&self, lambda: [f64; 2]) -> Result<Rk4Map<'a>> {
        Rk4Map::new(self.h2, self.dt, lambda_for(self.h2, lambda[1]))
    }

    pub fn xs(&self, lambda: [f64; 2]) -> Result<Vec<DVector<f64>>> {
        orbit(&self.x_map(lambda)?, &self.x0, self.stage_len)
    }

    /// `Σ_{k=0}^{L} ‖A x_k - y_k‖²`.
    pub fn cost(&self, a: &SimilarityMatrix, lambda: [f64; 2]) -> Result<f64> {
        let y_map = self.y_map(lambda)?;
        CoupledStage::from_states(self.xs(lambda)?, &y_map)?.cost(a)
    }

    pub fn omega(&self, a: &SimilarityMatrix, lambda: [f64; 2]) -> Result<f64> {
        let y_map = self.y_map(lambda)?;
        CoupledStage::from_states(self.xs(lambda)?, &y_map)?.omega(a)
    }

    /// Residual in `A` (half the cost gradient) and the per-component λ residual
    /// `(Σ_k r_kᵀ A ∂x_k/∂λ1, -Σ_k r_kᵀ ∂y_k/∂λ2)` with `r_k = A x_k - y_k`.
    pub fn kkt(&self, a: &SimilarityMatrix, lambda: [f64; 2]) -> Result<(DMatrix<f64>, [f64; 2], f64)> {
        check_lambda(lambda)?;
        let x_map = self.x_map(lambda)?;
        let y_map = self.y_map(lambda)?;
        let (xs, dx) = orbit_with_sensitivity(&x_map, &self.x0, self.stage_len, &SensitivityMode::LambdaForced)?;
        let am = a.entries();
        let (ys, dy) = orbit_with_sensitivity(&y_map, &(am * &self.x0), self.stage_len, &SensitivityMode::LambdaForced)?;
        let eval = CoupledStage::from_states(xs.clone(), &y_map)?.evaluate(a)?;
        let mut res = [0.0; 2];
        for k in 0..xs.len() {
            let r = am * &xs[k] - &ys[k];
            res[0] += r.dot(&(am * dx[k].column(0)));
            res[1] -= r.dot(&dy[k].column(0));
        }
        Ok((eval.residual, res, eval.cost))
    }
}

/// KKT residual of a candidate over one stage starting at `x0`.
pub fn kkt_residual(
    candidate: &HomotopyAlignment,
    x0: &DVector<f64>,
    h1: &SystemSpec,
    h2: &SystemSpec,
    stage_len: usize,
    dt: f64,
) -> Result<(DMatrix<f64>, [f64; 2])> {
    let stage = JointStage::new(x0.clone(), h1, h2, stage_len, dt)?;
    let (ra, rl, _) = stage.kkt(&candidate.a, candidate.lambda)?;
    Ok((ra, rl))
}

struct LambdaBox {
    lo: [f64; 2],
    hi: [f64; 2],
    free: [bool; 2],
    tie: bool,
}

impl LambdaBox {
    fn new(stage: &JointStage, opts: &JointOptions) -> Result<Self> {
        check_lambda(opts.lambda_lo)?;
        check_lambda(opts.lambda_hi)?;
        if (0..2).any(|i| opts.lambda_lo[i] > opts.lambda_hi[i]) {
            return Err(Error::Invalid("lambda lower bound exceeds upper bound".into()));
        }
        let hybrid = [stage.h1.is_hybrid(), stage.h2.is_hybrid()];
        let free = [0, 1].map(|i| hybrid[i] && opts.lambda_lo[i] < opts.lambda_hi[i]);
        Ok(LambdaBox {
            lo: opts.lambda_lo,
            hi: opts.lambda_hi,
            free,
            tie: opts.tie && hybrid[0] && hybrid[1],
        })
    }

    fn project(&self, mut l: [f64; 2]) -> [f64; 2] {
        if self.tie {
            let lo = self.lo[0].max(self.lo[1]);
            let hi = self.hi[0].min(self.hi[1]).max(lo);
            let v = l[0].clamp(lo, hi);
            return [v, v];
        }
        for i in 0..2 {
            l[i] = l[i].clamp(self.lo[i], self.hi[i]);
        }
        l
    }

    /// Gradient direction actually available to λ (tied components move together).
    fn effective(&self, g: [f64; 2]) -> [f64; 2] {
        if self.tie {
            let s = g[0] + g[1];
            return [s, s];
        }
        [0, 1].map(|i| if self.free[i] { g[i] } else { 0.0 })
    }

    /// `‖λ - P(λ - g)‖`: zero exactly at a box KKT point.
    fn projected_norm(&self, l: [f64; 2], g: [f64; 2]) -> f64 {
        let g = self.effective(g);
        let p = self.project([l[0] - g[0], l[1] - g[1]]);
        let d = [l[0] - p[0], l[1] - p[1]];
        if self.tie {
            d[0].abs()
        } else {
            d[0].hypot(d[1])
        }
    }
}

/// Alternates a coupled solve for `A` at fixed λ with a projected descent step on λ.
///
/// The λ step is `-α g` with a Barzilai–Borwein `α` after the first step (0.1
/// before), halved until the stage cost with `A` re-solved at the trial λ
/// drops, or holds within roundoff while the KKT residuals shrink. Stops when
/// both residuals fall below tolerance, or when no λ step lowers the cost.
pub fn solve_joint(
    stage: &JointStage,
    a_init: SimilarityMatrix,
    lambda_init: [f64; 2],
    opts: &JointOptions,
) -> Result<(HomotopyAlignment, JointDiagnostics)> {
    if !(opts.solver.tol > 0.0) {
        return Err(Error::Invalid("solver tolerance must be positive".into()));
    }
    check_lambda(lambda_init)?;
    let bx = LambdaBox::new(stage, opts)?;
    let solve_at = |lambda: [f64; 2], a: SimilarityMatrix| -> Result<(SimilarityMatrix, SolveDiagnostics)> {
        let y_map = stage.y_map(lambda)?;
        let coupled = CoupledStage::from_states(stage.xs(lambda)?, &y_map)?;
        newton_solve(&coupled, a, &opts.solver)
    };

    let mut lambda = bx.project(lambda_init);
    let (mut a, diag) = solve_at(lambda, a_init)?;
    let mut cost = diag.cost;
    let mut inner_iterations = diag.iterations;
    let mut outer_iterations = 0;
    let mut previous: Option<([f64; 2], [f64; 2])> = None;

    loop {
        outer_iterations += 1;
        let (ra, g, _) = stage.kkt(&a, lambda)?;
        let kkt_a_norm = ra.norm();
        let kkt_lambda_norm = bx.projected_norm(lambda, g);
        let tol = opts.solver.tol;
        let converged = kkt_a_norm <= tol && kkt_lambda_norm <= tol;
        if converged || outer_iterations >= opts.max_outer {
            return Ok((
                HomotopyAlignment {
                    a,
                    lambda,
                    kkt_a_norm,
                    kkt_lambda_norm,
                },
                JointDiagnostics {
                    outer_iterations,
                    inner_iterations,
                    cost,
                    converged,
                },
            ));
        }

        let dir = bx.effective(g);
        let mut alpha = LAMBDA_STEP;
        if let Some((pl, pg)) = previous {
            let pg = bx.effective(pg);
            let s = [lambda[0] - pl[0], lambda[1] - pl[1]];
            let y = [dir[0] - pg[0], dir[1] - pg[1]];
            let sy = s[0] * y[0] + s[1] * y[1];
            if sy > 0.0 {
                alpha = ((s[0] * s[0] + s[1] * s[1]) / sy).clamp(1e-12, 1e6);
            }
        }
        let mut next = None;
        for _ in 0..LAMBDA_BACKTRACKS {
            let trial = bx.project([lambda[0] - alpha * dir[0], lambda[1] - alpha * dir[1]]);
            if trial != lambda {
                if let Ok((at, d)) = solve_at(trial, a.clone()) {
                    inner_iterations += d.iterations;
                    let flat = d.cost <= cost * (1.0 + COST_SLACK)
                        && stage.kkt(&at, trial).is_ok_and(|(r, gt, _)| {
                            r.norm().max(bx.projected_norm(trial, gt)) < kkt_a_norm.max(kkt_lambda_norm)
                        });
                    if d.cost.is_finite() && (d.cost < cost || flat) {
                        next = Some((trial, at, d.cost));
                        break;
                    }
                }
            }
            alpha *= LAMBDA_SHRINK;
        }
        match next {
            Some((trial, at, c)) => {
                previous = Some((lambda, g));
                (lambda, a, cost) = (trial, at, c);
            }
            None => {
                // No descent left in λ: report the point as it stands.
                return Ok((
                    HomotopyAlignment {
                        a,
                        lambda,
                        kkt_a_norm,
                        kkt_lambda_norm,
                    },
                    JointDiagnostics {
                        outer_iterations,
                        inner_iterations,
                        cost,
                        converged: false,
                    },
                ));
            }
        }
    }
}

/// Staged joint alignment of a hybrid orbit.
#[derive(Debug, Clone)]
pub struct HomotopyRun {
    pub reports: Vec<StageReport>,
    pub baseline: HomotopyAlignment,
    pub baseline_diagnostics: JointDiagnostics,
    pub cumulative: Vec<f64>,
    /// Reference first orbit at the initial λ, `N + 1` states; stage boundaries come from it.
    pub x: Vec<DVector<f64>>,
    /// Second orbit per stage (`y_0 = A x_0` at each boundary), `N + 1` states.
    pub actual: Vec<DVector<f64>>,
    /// `A x_k` with each stage's adopted matrix and λ, `N + 1` states.
    pub simulated: Vec<DVector<f64>>,
}

/// Runs `solve_joint` stage by stage. The first orbit is simulated once at
/// `lambda_init` and split into stages; each stage re-simulates its window from
/// that orbit's boundary state under the stage's own λ. λ is warm-started from
/// the previous adoption, and the previous `(A, λ)` is kept when it aligns the
/// current stage better.
pub fn homotopy_dp(
    h1: &SystemSpec,
    h2: &SystemSpec,
    x0: &DVector<f64>,
    plan: &StagePlan,
    dt: f64,
    lambda_init: [f64; 2],
    opts: &JointOptions,
) -> Result<HomotopyRun> {
    check_lambda(lambda_init)?;
    let whole = JointStage::new(x0.clone(), h1, h2, plan.total_steps(), dt)?;
    let x = whole.xs(lambda_init)?;
    let mut reports: Vec<StageReport> = Vec::with_capacity(plan.num_stages);
    let mut adopted_pairs: Vec<(SimilarityMatrix, [f64; 2])> = Vec::with_capacity(plan.num_stages);
    let mut actual = Vec::with_capacity(plan.total_steps() + 1);
    let mut simulated = Vec::with_capacity(plan.total_steps() + 1);
    let stage_at = |m: usize| JointStage::new(x[plan.start(m)].clone(), h1, h2, plan.stage_len, dt);

    for m in 0..plan.num_stages {
        let stage = stage_at(m)?;
        let lambda0 = adopted_pairs.last().map_or(lambda_init, |p| p.1);
        let a0 = default_init(&stage.xs(lambda0)?, &stage.y_map(lambda0)?, opts.solver.bound);
        let (cand, diag) = solve_joint(&stage, a0, lambda0, opts)?;
        let cand_omega = stage.omega(&cand.a, cand.lambda)?;
        let cand_rho = similarity_degree(cand_omega)?;

        let previous = match adopted_pairs.last() {
            Some((pa, pl)) => {
                let omega = stage.omega(pa, *pl).unwrap_or(f64::INFINITY);
                Some((pa.clone(), *pl, omega, similarity_degree(omega)?))
            }
            None => None,
        };
        let previous_rho = previous.as_ref().map(|p| p.3);
        let (a, lambda, omega, rho, adopted) = match previous {
            Some((pa, pl, po, pr)) if pr > cand_rho => (pa, pl, po, pr, Adopted::Previous),
            _ => (cand.a.clone(), cand.lambda, cand_omega, cand_rho, Adopted::Candidate),
        };

        let xs = stage.xs(lambda)?;
        let ys = orbit(&stage.y_map(lambda)?, &a.apply(&xs[0]), plan.stage_len)?;
        for k in usize::from(m > 0)..=plan.stage_len {
            actual.push(ys[k].clone());
            simulated.push(a.apply(&xs[k]));
        }

        reports.push(StageReport {
            index: m,
            a: a.clone(),
            rho,
            omega,
            residual_norm: cand.kkt_a_norm,
            iterations: diag.inner_iterations,
            converged: diag.converged,
            lambda: Some(lambda),
            lambda_residual: Some(cand.kkt_lambda_norm),
            selection: Some(Selection {
                candidate_rho: cand_rho,
                previous_rho,
                adopted,
            }),
        });
        adopted_pairs.push((a, lambda));
    }

    let a0 = default_init(&whole.xs(lambda_init)?, &whole.y_map(lambda_init)?, opts.solver.bound);
    let baseline_opts = JointOptions {
        max_outer: opts.max_outer.min(BASELINE_MAX_OUTER),
        ..*opts
    };
    let (baseline, baseline_diagnostics) = solve_joint(&whole, a0, lambda_init, &baseline_opts)?;

    let stage_sum = |s: usize, a: &SimilarityMatrix, lambda: [f64; 2]| -> Result<f64> {
        segment_sum((|| {
            let stage = stage_at(s)?;
            let xs = stage.xs(lambda)?;
            let ys = orbit(&stage.y_map(lambda)?, &a.apply(&xs[0]), plan.stage_len)?;
            Ok(mean_sq_misfit(a, &xs, &ys)? * plan.stage_len as f64)
        })())
    };
    let base = (0..plan.num_stages)
        .map(|s| stage_sum(s, &baseline.a, baseline.lambda))
        .collect::<Result<Vec<_>>>()?;
    let mine = (0..plan.num_stages)
        .map(|s| stage_sum(s, &adopted_pairs[s].0, adopted_pairs[s].1))
        .collect::<Result<Vec<_>>>()?;
    let cumulative = curve_from_sums(&base, &mine, plan.total_steps())?;

    Ok(HomotopyRun {
        reports,
        baseline,
        baseline_diagnostics,
        cumulative,
        x,
        actual,
        simulated,
    })
}

/// Hybrid Lorenz–Chua against the controlled Lü system with control `u`, from
/// `(0.1, 0.1, 0.1)` with the default step.
pub fn example45_pipeline(u: f64, plan: &StagePlan, opts: &JointOptions) -> Result<HomotopyRun> {
    let hybrid = lorenz_chua_hybrid();
    let lu = make_system("lu", [("u", u)])?;
    let x0 = DVector::from_element(3, 0.1);
    homotopy_dp(&hybrid, &lu, &x0, plan, crate::integrator::DEFAULT_DT, DEFAULT_LAMBDA, opts)
}
