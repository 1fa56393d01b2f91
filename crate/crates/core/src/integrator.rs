//! Fixed-step RK4 discretization and forward sensitivity propagation.
//!
//! The discrete map of a system is one classical RK4 step of size `dt`.
//! Step tangents are obtained by differentiating the four RK4 stages
//! analytically, so products over long stages carry no finite-difference noise.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::systems::SystemSpec;

/// Default integration step.
pub const DEFAULT_DT: f64 = 0.01;

/// Any component above this magnitude aborts a simulation.
pub const OVERFLOW_LIMIT: f64 = 1e6;

/// Derivatives of one step `Φ` of a discrete map.
#[derive(Debug, Clone, PartialEq)]
pub struct StepTangent {
    /// `∂Φ/∂state`
    pub jac: DMatrix<f64>,
    /// `∂Φ/∂λ`, present for hybrids.
    pub lam: Option<DVector<f64>>,
}

/// A discrete dynamical system `s ↦ Φ(s)` with a known tangent.
pub trait StepMap: Sync {
    fn dim(&self) -> usize;

    fn step(&self, state: &DVector<f64>) -> DVector<f64>;

    /// Next state together with the tangent of the step taken at `state`.
    fn step_tangent(&self, state: &DVector<f64>) -> (DVector<f64>, StepTangent);
}

/// One RK4 step of a [`SystemSpec`] at a fixed embedding parameter.
#[derive(Debug, Clone, Copy)]
pub struct Rk4Map<'a> {
    system: &'a SystemSpec,
    dt: f64,
    lambda: Option<f64>,
    lam: f64,
}

impl<'a> Rk4Map<'a> {
    pub fn new(system: &'a SystemSpec, dt: f64, lambda: Option<f64>) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::Invalid(format!("time step must be positive, got {dt}")));
        }
        let lam = system.resolve_lambda(lambda)?;
        Ok(Rk4Map {
            system,
            dt,
            lambda,
            lam,
        })
    }

    pub fn system(&self) -> &'a SystemSpec {
        self.system
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn lambda(&self) -> Option<f64> {
        self.lambda
    }

    fn advance(&self, s: &DVector<f64>, with_tangent: bool) -> (DVector<f64>, Option<StepTangent>) {
        let h = self.dt;
        let sys = self.system;
        let lam = self.lam;

        let k1 = sys.eval_field(s, lam);
        let s2 = s + &k1 * (0.5 * h);
        let k2 = sys.eval_field(&s2, lam);
        let s3 = s + &k2 * (0.5 * h);
        let k3 = sys.eval_field(&s3, lam);
        let s4 = s + &k3 * h;
        let k4 = sys.eval_field(&s4, lam);
        let next = s + (&k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);

        if !with_tangent {
            return (next, None);
        }

        let n = s.len();
        let eye = DMatrix::<f64>::identity(n, n);
        let j1 = sys.eval_jacobian(s, lam);
        let j2 = sys.eval_jacobian(&s2, lam);
        let j3 = sys.eval_jacobian(&s3, lam);
        let j4 = sys.eval_jacobian(&s4, lam);

        let d1 = j1;
        let d2 = &j2 * (&eye + &d1 * (0.5 * h));
        let d3 = &j3 * (&eye + &d2 * (0.5 * h));
        let d4 = &j4 * (&eye + &d3 * h);
        let jac = &eye + (&d1 + &d2 * 2.0 + &d3 * 2.0 + &d4) * (h / 6.0);

        let lam_part = match (
            sys.lambda_partial(s),
            sys.lambda_partial(&s2),
            sys.lambda_partial(&s3),
            sys.lambda_partial(&s4),
        ) {
            (Some(p1), Some(p2), Some(p3), Some(p4)) => {
                let l1 = p1;
                let l2 = &j2 * (&l1 * (0.5 * h)) + p2;
                let l3 = &j3 * (&l2 * (0.5 * h)) + p3;
                let l4 = &j4 * (&l3 * h) + p4;
                Some((&l1 + &l2 * 2.0 + &l3 * 2.0 + &l4) * (h / 6.0))
            }
            _ => None,
        };

        (next, Some(StepTangent { jac, lam: lam_part }))
    }
}

impl StepMap for Rk4Map<'_> {
    fn dim(&self) -> usize {
        self.system.dim()
    }

    fn step(&self, state: &DVector<f64>) -> DVector<f64> {
        self.advance(state, false).0
    }

    fn step_tangent(&self, state: &DVector<f64>) -> (DVector<f64>, StepTangent) {
        let (next, tangent) = self.advance(state, true);
        (next, tangent.expect("tangent requested"))
    }
}

/// Ordered states `x_0 ..= x_N` of a discrete orbit.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub states: Vec<DVector<f64>>,
    pub dt: f64,
    pub system_name: String,
    pub lambda: Option<f64>,
}

impl Trajectory {
    /// Number of steps `N` (one less than the number of states).
    pub fn steps(&self) -> usize {
        self.states.len().saturating_sub(1)
    }

    pub fn dim(&self) -> usize {
        self.states.first().map_or(0, |s| s.len())
    }

    /// Recomputes every step and reports the first index whose successor disagrees.
    pub fn verify(&self, system: &SystemSpec) -> Result<Option<usize>> {
        let map = Rk4Map::new(system, self.dt, self.lambda)?;
        Ok(self
            .states
            .windows(2)
            .position(|w| map.step(&w[0]) != w[1]))
    }

    /// States `start ..= start + len`.
    pub fn window(&self, start: usize, len: usize) -> &[DVector<f64>] {
        &self.states[start..=start + len]
    }
}

fn check_state(state: &DVector<f64>, step: usize) -> Result<()> {
    if state.iter().all(|c| c.is_finite() && c.abs() <= OVERFLOW_LIMIT) {
        Ok(())
    } else {
        Err(Error::Overflow { step })
    }
}

fn check_start<M: StepMap + ?Sized>(map: &M, x0: &DVector<f64>) -> Result<()> {
    if x0.len() != map.dim() {
        return Err(Error::DimensionMismatch {
            expected: map.dim(),
            found: x0.len(),
        });
    }
    check_state(x0, 0)
}

/// One RK4 step of `system`.
pub fn rk4_step(
    system: &SystemSpec,
    state: &DVector<f64>,
    dt: f64,
    lambda: Option<f64>,
) -> Result<DVector<f64>> {
    let map = Rk4Map::new(system, dt, lambda)?;
    check_start(&map, state)?;
    let next = map.step(state);
    check_state(&next, 1)?;
    Ok(next)
}

/// Iterates `map` `n` times from `x0`.
pub fn orbit<M: StepMap + ?Sized>(map: &M, x0: &DVector<f64>, n: usize) -> Result<Vec<DVector<f64>>> {
    check_start(map, x0)?;
    let mut states = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    for k in 0..n {
        let next = map.step(&states[k]);
        check_state(&next, k + 1)?;
        states.push(next);
    }
    Ok(states)
}

pub fn simulate(
    system: &SystemSpec,
    x0: &DVector<f64>,
    n: usize,
    dt: f64,
    lambda: Option<f64>,
) -> Result<Trajectory> {
    let map = Rk4Map::new(system, dt, lambda)?;
    Ok(Trajectory {
        states: orbit(&map, x0, n)?,
        dt,
        system_name: system.name().to_string(),
        lambda,
    })
}

/// Exact derivatives of one RK4 step at `state`.
pub fn step_tangent(
    system: &SystemSpec,
    state: &DVector<f64>,
    dt: f64,
    lambda: Option<f64>,
) -> Result<StepTangent> {
    let map = Rk4Map::new(system, dt, lambda)?;
    check_start(&map, state)?;
    let (next, tangent) = map.step_tangent(state);
    check_state(&next, 1)?;
    Ok(tangent)
}

/// How a sensitivity recursion is driven.
#[derive(Debug, Clone, PartialEq)]
pub enum SensitivityMode {
    /// `S_0 = seed`, `S_{k+1} = J_k S_k`.
    StateSeeded(DMatrix<f64>),
    /// `s_0 = 0`, `s_{k+1} = J_k s_k + ∂Φ/∂λ`. Non-hybrid maps contribute no forcing.
    LambdaForced,
}

fn initial_sensitivity(dim: usize, mode: &SensitivityMode) -> Result<DMatrix<f64>> {
    match mode {
        SensitivityMode::StateSeeded(seed) => {
            if seed.nrows() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: seed.nrows(),
                });
            }
            Ok(seed.clone())
        }
        SensitivityMode::LambdaForced => Ok(DMatrix::zeros(dim, 1)),
    }
}

fn advance_sensitivity(sens: &DMatrix<f64>, tangent: &StepTangent, mode: &SensitivityMode) -> DMatrix<f64> {
    let mut next = &tangent.jac * sens;
    if let (SensitivityMode::LambdaForced, Some(lam)) = (mode, &tangent.lam) {
        next.column_mut(0).axpy(1.0, lam, 1.0);
    }
    next
}

fn check_sensitivity(sens: &DMatrix<f64>, step: usize) -> Result<()> {
    if sens.iter().all(|c| c.is_finite()) {
        Ok(())
    } else {
        Err(Error::Overflow { step })
    }
}

/// Sensitivities along given `states` (which must be an orbit of `map`).
pub fn propagate_along<M: StepMap + ?Sized>(
    map: &M,
    states: &[DVector<f64>],
    mode: &SensitivityMode,
) -> Result<Vec<DMatrix<f64>>> {
    let Some(first) = states.first() else {
        return Ok(Vec::new());
    };
    let mut out = Vec::with_capacity(states.len());
    out.push(initial_sensitivity(first.len(), mode)?);
    for (k, state) in states[..states.len() - 1].iter().enumerate() {
        let (_, tangent) = map.step_tangent(state);
        let next = advance_sensitivity(&out[k], &tangent, mode);
        check_sensitivity(&next, k + 1)?;
        out.push(next);
    }
    Ok(out)
}

/// Sensitivities of a simulated trajectory of `system`.
pub fn propagate_sensitivity(
    system: &SystemSpec,
    trajectory: &Trajectory,
    mode: &SensitivityMode,
) -> Result<Vec<DMatrix<f64>>> {
    let map = Rk4Map::new(system, trajectory.dt, trajectory.lambda)?;
    propagate_along(&map, &trajectory.states, mode)
}

/// Orbit and its sensitivities in a single pass.
pub fn orbit_with_sensitivity<M: StepMap + ?Sized>(
    map: &M,
    x0: &DVector<f64>,
    n: usize,
    mode: &SensitivityMode,
) -> Result<(Vec<DVector<f64>>, Vec<DMatrix<f64>>)> {
    check_start(map, x0)?;
    let mut states = Vec::with_capacity(n + 1);
    let mut sens = Vec::with_capacity(n + 1);
    states.push(x0.clone());
    sens.push(initial_sensitivity(x0.len(), mode)?);
    for k in 0..n {
        let (next, tangent) = map.step_tangent(&states[k]);
        check_state(&next, k + 1)?;
        let s = advance_sensitivity(&sens[k], &tangent, mode);
        check_sensitivity(&s, k + 1)?;
        states.push(next);
        sens.push(s);
    }
    Ok((states, sens))
}
