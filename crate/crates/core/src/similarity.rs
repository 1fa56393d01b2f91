//! Alignment costs, their optimality residuals, and the similarity degree.
//!
//! Two orbit sequences `{x_k}` and `{y_k}` are compared through a matrix `A`
//! with cost `Σ_k ‖A x_k - y_k‖² + τ ‖A‖²` (squared entries for the penalty).
//! In the *decoupled* setting both orbits are observed and the minimizer has a
//! closed form. In the *coupled* setting the second orbit is generated from
//! `y_0 = A x_0`, so every `y_k` depends on `A` through the step tangents of
//! the second system.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::integrator::{orbit, orbit_with_sensitivity, SensitivityMode, StepMap};

/// Entry bound `M` of the admissible box `|a_ij| ≤ M` unless configured otherwise.
pub const DEFAULT_BOUND: f64 = 1e4;

/// The matrix `A` together with the box it lives in.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRecord", into = "MatrixRecord")]
pub struct SimilarityMatrix {
    entries: DMatrix<f64>,
    bound: f64,
}

/// JSON form: row-major `"A"`, `"bound"`, optional `"lambda"`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatrixRecord {
    #[serde(rename = "A")]
    pub a: Vec<Vec<f64>>,
    pub bound: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lambda: Option<Vec<f64>>,
}

impl From<SimilarityMatrix> for MatrixRecord {
    fn from(m: SimilarityMatrix) -> Self {
        MatrixRecord {
            a: m.rows(),
            bound: m.bound,
            lambda: None,
        }
    }
}

impl TryFrom<MatrixRecord> for SimilarityMatrix {
    type Error = Error;

    fn try_from(rec: MatrixRecord) -> Result<Self> {
        let n = rec.a.len();
        if rec.a.iter().any(|row| row.len() != n) {
            return Err(Error::Invalid("similarity matrix must be square".into()));
        }
        let flat: Vec<f64> = rec.a.into_iter().flatten().collect();
        SimilarityMatrix::new(DMatrix::from_row_slice(n, n, &flat), rec.bound)
    }
}

impl SimilarityMatrix {
    /// Fails if any entry is non-finite or outside `[-bound, bound]`.
    pub fn new(entries: DMatrix<f64>, bound: f64) -> Result<Self> {
        if !(bound > 0.0) {
            return Err(Error::Invalid(format!("entry bound must be positive, got {bound}")));
        }
        if !entries.is_square() {
            return Err(Error::Invalid("similarity matrix must be square".into()));
        }
        if let Some(bad) = entries.iter().find(|a| !a.is_finite() || a.abs() > bound) {
            return Err(Error::Invalid(format!("entry {bad} violates the bound {bound}")));
        }
        Ok(SimilarityMatrix { entries, bound })
    }

    /// Projects `entries` onto the box. Non-finite entries are rejected.
    pub fn projected(entries: DMatrix<f64>, bound: f64) -> Result<Self> {
        let clamped = entries.map(|a| a.clamp(-bound, bound));
        Self::new(clamped, bound)
    }

    pub fn identity(n: usize) -> Self {
        SimilarityMatrix {
            entries: DMatrix::identity(n, n),
            bound: DEFAULT_BOUND,
        }
    }

    pub fn with_bound(mut self, bound: f64) -> Result<Self> {
        self = Self::new(self.entries, bound)?;
        Ok(self)
    }

    pub fn entries(&self) -> &DMatrix<f64> {
        &self.entries
    }

    pub fn into_entries(self) -> DMatrix<f64> {
        self.entries
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    /// Row-major nested rows.
    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.entries
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }

    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        &self.entries * x
    }
}

fn check_pair(a: &DMatrix<f64>, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<()> {
    if xs.len() != ys.len() {
        return Err(Error::LengthMismatch {
            left: xs.len(),
            right: ys.len(),
        });
    }
    let n = a.nrows();
    for s in xs.iter().chain(ys) {
        if s.len() != n {
            return Err(Error::DimensionMismatch {
                expected: n,
                found: s.len(),
            });
        }
    }
    Ok(())
}

/// `Σ_{k=0}^{N} ‖A x_k - y_k‖² + τ Σ a_ij²`.
pub fn cost(a: &SimilarityMatrix, xs: &[DVector<f64>], ys: &[DVector<f64>], tau: f64) -> Result<f64> {
    let a = a.entries();
    check_pair(a, xs, ys)?;
    let fit: f64 = xs
        .iter()
        .zip(ys)
        .map(|(x, y)| (a * x - y).norm_squared())
        .sum();
    Ok(fit + tau * a.norm_squared())
}

/// `ω = (1/N) Σ_{k=1}^{N} ‖A x_k - y_k‖²`; the initial pair is excluded.
pub fn mean_sq_misfit(a: &SimilarityMatrix, xs: &[DVector<f64>], ys: &[DVector<f64>]) -> Result<f64> {
    let a = a.entries();
    check_pair(a, xs, ys)?;
    if xs.len() < 2 {
        return Err(Error::Invalid("misfit needs at least one step".into()));
    }
    let sum: f64 = xs[1..]
        .iter()
        .zip(&ys[1..])
        .map(|(x, y)| (a * x - y).norm_squared())
        .sum();
    Ok(sum / (xs.len() - 1) as f64)
}

/// `ρ(ω) = ln(1 + ω) / ω`, with `ρ(0) = 1`.
pub fn similarity_degree(omega: f64) -> Result<f64> {
    if omega.is_nan() || omega < 0.0 {
        return Err(Error::NegativeMisfit(omega));
    }
    if omega == 0.0 {
        Ok(1.0)
    } else if omega.is_infinite() {
        Ok(0.0)
    } else {
        Ok(omega.ln_1p() / omega)
    }
}

/// Inverse of the Gram condition estimate above which a fit is treated as rank deficient.
const RANK_TOLERANCE: f64 = 1e-14;

/// Minimizer of the penalized cost with `{y_k}` held fixed:
/// `A = (Σ y_k x_kᵀ) (Σ x_k x_kᵀ + τ I)⁻¹`, projected onto the default box.
pub fn closed_form_align(xs: &[DVector<f64>], ys: &[DVector<f64>], tau: f64) -> Result<SimilarityMatrix> {
    closed_form_align_bounded(xs, ys, tau, DEFAULT_BOUND)
}

pub fn closed_form_align_bounded(
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    tau: f64,
    bound: f64,
) -> Result<SimilarityMatrix> {
    if tau < 0.0 {
        return Err(Error::Invalid(format!("tau must be non-negative, got {tau}")));
    }
    let n = xs.first().map(|x| x.len()).ok_or_else(|| Error::Invalid("no samples".into()))?;
    check_pair(&DMatrix::zeros(n, n), xs, ys)?;

    // Least squares on the stacked rows [x_kᵀ; √τ I] Aᵀ = [y_kᵀ; 0], solved by QR
    // rather than through the Gram matrix.
    let rows = xs.len() + n;
    let mut design = DMatrix::<f64>::zeros(rows, n);
    let mut target = DMatrix::<f64>::zeros(rows, n);
    for (k, (x, y)) in xs.iter().zip(ys).enumerate() {
        design.set_row(k, &x.transpose());
        target.set_row(k, &y.transpose());
    }
    for i in 0..n {
        design[(xs.len() + i, i)] = tau.sqrt();
    }
    let qr = design.qr();
    let r = qr.r();
    let diag = r.diagonal().abs();
    let (lo, hi) = (diag.min(), diag.max());
    if !(hi > 0.0) || (lo / hi).powi(2) < RANK_TOLERANCE {
        return Err(Error::RankDeficient);
    }
    let at = r
        .solve_upper_triangular(&(qr.q().transpose() * target))
        .ok_or(Error::RankDeficient)?;
    SimilarityMatrix::projected(at.transpose(), bound)
}

/// `∇J = 2 Σ (A x_k - y_k) x_kᵀ + 2 τ A`.
pub fn decoupled_gradient(
    a: &SimilarityMatrix,
    xs: &[DVector<f64>],
    ys: &[DVector<f64>],
    tau: f64,
) -> Result<DMatrix<f64>> {
    let a = a.entries();
    check_pair(a, xs, ys)?;
    let mut grad = a * (2.0 * tau);
    for (x, y) in xs.iter().zip(ys) {
        let r = a * x - y;
        grad.ger(2.0, &r, x, 1.0);
    }
    Ok(grad)
}

/// One stage of the coupled problem: a fixed first orbit and a map generating the second.
pub struct CoupledStage<'a> {
    xs: Vec<DVector<f64>>,
    y_map: &'a dyn StepMap,
}

/// Everything the coupled solver needs at one `A`.
#[derive(Debug, Clone)]
pub struct CoupledEval {
    /// `Σ_{k=0}^{L} ‖A x_k - y_k‖²`
    pub cost: f64,
    /// Mean squared misfit over `k = 1..=L`.
    pub omega: f64,
    /// First-order residual, equal to half the gradient of `cost`.
    pub residual: DMatrix<f64>,
    pub ys: Vec<DVector<f64>>,
}

impl<'a> CoupledStage<'a> {
    /// Simulates the first orbit for `stage_len` steps from `x0`.
    pub fn new(x0: &DVector<f64>, x_map: &dyn StepMap, y_map: &'a dyn StepMap, stage_len: usize) -> Result<Self> {
        if stage_len == 0 {
            return Err(Error::Invalid("stage length must be at least 1".into()));
        }
        if x_map.dim() != y_map.dim() {
            return Err(Error::DimensionMismatch {
                expected: x_map.dim(),
                found: y_map.dim(),
            });
        }
        Ok(CoupledStage {
            xs: orbit(x_map, x0, stage_len)?,
            y_map,
        })
    }

    /// Uses an already simulated first orbit.
    pub fn from_states(xs: Vec<DVector<f64>>, y_map: &'a dyn StepMap) -> Result<Self> {
        if xs.len() < 2 {
            return Err(Error::Invalid("stage length must be at least 1".into()));
        }
        Ok(CoupledStage { xs, y_map })
    }

    pub fn xs(&self) -> &[DVector<f64>] {
        &self.xs
    }

    pub fn stage_len(&self) -> usize {
        self.xs.len() - 1
    }

    /// Second orbit generated from `y_0 = A x_0`.
    pub fn ys(&self, a: &SimilarityMatrix) -> Result<Vec<DVector<f64>>> {
        orbit(self.y_map, &a.apply(&self.xs[0]), self.stage_len())
    }

    pub fn cost(&self, a: &SimilarityMatrix) -> Result<f64> {
        let ys = self.ys(a)?;
        cost(a, &self.xs, &ys, 0.0)
    }

    pub fn omega(&self, a: &SimilarityMatrix) -> Result<f64> {
        let ys = self.ys(a)?;
        mean_sq_misfit(a, &self.xs, &ys)
    }

    pub fn rho(&self, a: &SimilarityMatrix) -> Result<f64> {
        similarity_degree(self.omega(a)?)
    }

    /// Cost, misfit and residual
    /// `R = Σ_k (A x_k - y_k) x_kᵀ - (Σ_k S_kᵀ (A x_k - y_k)) x_0ᵀ`,
    /// where `S_k = ∂y_k/∂y_0` is the product of step Jacobians of the second map.
    pub fn evaluate(&self, a: &SimilarityMatrix) -> Result<CoupledEval> {
        let am = a.entries();
        let n = am.nrows();
        let x0 = &self.xs[0];
        let (ys, sens) = orbit_with_sensitivity(
            self.y_map,
            &(am * x0),
            self.stage_len(),
            &SensitivityMode::StateSeeded(DMatrix::identity(n, n)),
        )?;
        let mut residual = DMatrix::zeros(n, n);
        let mut pulled = DVector::zeros(n);
        let mut cost = 0.0;
        let mut tail = 0.0;
        for (k, ((x, y), s)) in self.xs.iter().zip(&ys).zip(&sens).enumerate() {
            let r = am * x - y;
            residual.ger(1.0, &r, x, 1.0);
            pulled.gemv_tr(1.0, s, &r, 1.0);
            let sq = r.norm_squared();
            cost += sq;
            if k > 0 {
                tail += sq;
            }
        }
        residual.ger(-1.0, &pulled, x0, 1.0);
        Ok(CoupledEval {
            cost,
            omega: tail / self.stage_len() as f64,
            residual,
            ys,
        })
    }

    /// Gauss–Newton matrix `Σ_k J_kᵀ J_k` of the misfits `A x_k - y_k` with respect
    /// to the row-major entries of `A`.
    pub fn gauss_newton(&self, a: &SimilarityMatrix) -> Result<DMatrix<f64>> {
        let am = a.entries();
        let n = am.nrows();
        let x0 = &self.xs[0];
        let (_, sens) = orbit_with_sensitivity(
            self.y_map,
            &(am * x0),
            self.stage_len(),
            &SensitivityMode::StateSeeded(DMatrix::identity(n, n)),
        )?;
        let mut g = DMatrix::zeros(n * n, n * n);
        let mut jac = DMatrix::zeros(n, n * n);
        for (x, s) in self.xs.iter().zip(&sens) {
            for i in 0..n {
                for j in 0..n {
                    let mut col = s.column(i) * (-x0[j]);
                    col[i] += x[j];
                    jac.set_column(i * n + j, &col);
                }
            }
            g.gemm_tr(1.0, &jac, &jac, 1.0);
        }
        Ok(g)
    }

    pub fn residual(&self, a: &SimilarityMatrix) -> Result<DMatrix<f64>> {
        Ok(self.evaluate(a)?.residual)
    }
}

/// First-order optimality residual of the coupled cost over one stage starting at `x0`.
pub fn coupled_residual(
    a: &SimilarityMatrix,
    x0: &DVector<f64>,
    x_map: &dyn StepMap,
    y_map: &dyn StepMap,
    stage_len: usize,
) -> Result<DMatrix<f64>> {
    CoupledStage::new(x0, x_map, y_map, stage_len)?.residual(a)
}
