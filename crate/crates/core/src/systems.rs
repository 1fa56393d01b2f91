//! Catalog of the continuous-time chaotic systems used for orbit alignment.
//!
//! Every system carries its parameters by name, an analytic state Jacobian,
//! and, when it is a homotopy hybrid `H(s, λ) = (1 - λ) f(s) + λ g(s)`, the
//! partial derivative `∂H/∂λ = g(s) - f(s)`.
//!
//! Chua's circuit is implemented as `ẋ = α (y - x - f(x))`, i.e. with the
//! minus sign in front of the piecewise-linear resistor term. Part of the
//! literature writes `+ f(x)`; the sign here is deliberate.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};

/// The five catalog systems.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Catalog {
    Lorenz,
    Chua,
    Rossler,
    Chen,
    Lu,
}

impl Catalog {
    pub const ALL: [Catalog; 5] = [
        Catalog::Lorenz,
        Catalog::Chua,
        Catalog::Rossler,
        Catalog::Chen,
        Catalog::Lu,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Catalog::Lorenz => "lorenz",
            Catalog::Chua => "chua",
            Catalog::Rossler => "rossler",
            Catalog::Chen => "chen",
            Catalog::Lu => "lu",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        match name.to_ascii_lowercase().as_str() {
            "lorenz" => Ok(Catalog::Lorenz),
            "chua" => Ok(Catalog::Chua),
            "rossler" | "rössler" => Ok(Catalog::Rossler),
            "chen" => Ok(Catalog::Chen),
            "lu" | "lü" => Ok(Catalog::Lu),
            _ => Err(Error::UnknownSystem(name.to_string())),
        }
    }

    /// Default parameters, in declaration order.
    pub fn defaults(self) -> &'static [(&'static str, f64)] {
        match self {
            Catalog::Lorenz => &[("sigma", 10.0), ("b", 8.0 / 3.0), ("r", 28.0)],
            Catalog::Chua => &[("alpha", 10.0), ("beta", 15.0), ("m0", -1.2), ("m1", -0.6)],
            Catalog::Rossler => &[("a", 0.2), ("b", 0.2), ("c", 5.7)],
            Catalog::Chen => &[("a", 40.0), ("b", 3.0), ("c", 28.0)],
            Catalog::Lu => &[("a", 36.0), ("b", 3.0), ("c", 20.0), ("u", 0.0)],
        }
    }
}

impl fmt::Display for Catalog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Lorenz { sigma: f64, b: f64, r: f64 },
    Chua { alpha: f64, beta: f64, m0: f64, m1: f64 },
    Rossler { a: f64, b: f64, c: f64 },
    Chen { a: f64, b: f64, c: f64 },
    Lu { a: f64, b: f64, c: f64, u: f64 },
    Linear(DMatrix<f64>),
    Hybrid { from: Arc<SystemSpec>, to: Arc<SystemSpec> },
}

/// An autonomous vector field with its analytic Jacobian.
///
/// Immutable once built; cloning is cheap for hybrids (constituents are shared).
#[derive(Debug, Clone, PartialEq)]
pub struct SystemSpec {
    name: String,
    dim: usize,
    params: BTreeMap<String, f64>,
    kind: Kind,
}

/// Chua's piecewise-linear resistor characteristic
/// `m1 x + (m0 - m1) (|x + 1| - |x - 1|) / 2`.
pub fn chua_nonlinearity(x: f64, m0: f64, m1: f64) -> f64 {
    m1 * x + 0.5 * (m0 - m1) * ((x + 1.0).abs() - (x - 1.0).abs())
}

// Closed interval |x| <= 1 takes the inner slope.
fn chua_slope(x: f64, m0: f64, m1: f64) -> f64 {
    if x.abs() <= 1.0 {
        m0
    } else {
        m1
    }
}

/// Builds a catalog system with its default parameters, replacing any given in `overrides`.
pub fn make_system<I, K>(name: &str, overrides: I) -> Result<SystemSpec>
where
    I: IntoIterator<Item = (K, f64)>,
    K: AsRef<str>,
{
    let catalog = Catalog::parse(name)?;
    let mut params: BTreeMap<String, f64> = catalog
        .defaults()
        .iter()
        .map(|(k, v)| (k.to_string(), *v))
        .collect();
    for (key, value) in overrides {
        let key = key.as_ref();
        match params.get_mut(key) {
            Some(slot) => *slot = value,
            None => {
                return Err(Error::UnknownParameter {
                    system: catalog.name().to_string(),
                    key: key.to_string(),
                })
            }
        }
    }
    let p = |k: &str| params[k];
    let kind = match catalog {
        Catalog::Lorenz => Kind::Lorenz {
            sigma: p("sigma"),
            b: p("b"),
            r: p("r"),
        },
        Catalog::Chua => Kind::Chua {
            alpha: p("alpha"),
            beta: p("beta"),
            m0: p("m0"),
            m1: p("m1"),
        },
        Catalog::Rossler => Kind::Rossler {
            a: p("a"),
            b: p("b"),
            c: p("c"),
        },
        Catalog::Chen => Kind::Chen {
            a: p("a"),
            b: p("b"),
            c: p("c"),
        },
        Catalog::Lu => Kind::Lu {
            a: p("a"),
            b: p("b"),
            c: p("c"),
            u: p("u"),
        },
    };
    Ok(SystemSpec {
        name: catalog.name().to_string(),
        dim: 3,
        params,
        kind,
    })
}

/// Homotopy `(1 - λ) from + λ to`. λ = 0 is `from`, λ = 1 is `to`.
pub fn make_hybrid(from: SystemSpec, to: SystemSpec) -> Result<SystemSpec> {
    if from.dim != to.dim {
        return Err(Error::DimensionMismatch {
            expected: from.dim,
            found: to.dim,
        });
    }
    let mut params = BTreeMap::new();
    for (prefix, sys) in [("from", &from), ("to", &to)] {
        for (k, v) in &sys.params {
            params.insert(format!("{prefix}.{}.{k}", sys.name), *v);
        }
    }
    Ok(SystemSpec {
        name: format!("hybrid({},{})", from.name, to.name),
        dim: from.dim,
        params,
        kind: Kind::Hybrid {
            from: Arc::new(from),
            to: Arc::new(to),
        },
    })
}

/// The hybrid Lorenz–Chua system, with the embedding parameter weighting the Lorenz part.
pub fn lorenz_chua_hybrid() -> SystemSpec {
    let lorenz = make_system("lorenz", NO_OVERRIDES).expect("catalog");
    let chua = make_system("chua", NO_OVERRIDES).expect("catalog");
    make_hybrid(chua, lorenz).expect("equal dimensions")
}

/// Convenience for `make_system(name, NO_OVERRIDES)`.
pub const NO_OVERRIDES: [(&str, f64); 0] = [];

impl SystemSpec {
    /// Linear field `ẋ = M x`. Mostly useful as a test fixture.
    pub fn linear(name: impl Into<String>, matrix: DMatrix<f64>) -> Result<Self> {
        if !matrix.is_square() || matrix.nrows() == 0 {
            return Err(Error::Invalid("linear system needs a non-empty square matrix".into()));
        }
        Ok(SystemSpec {
            name: name.into(),
            dim: matrix.nrows(),
            params: BTreeMap::new(),
            kind: Kind::Linear(matrix),
        })
    }

    /// `ẋ = 0` in `dim` dimensions.
    pub fn zero(dim: usize) -> Result<Self> {
        Self::linear("zero", DMatrix::zeros(dim, dim))
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn params(&self) -> &BTreeMap<String, f64> {
        &self.params
    }

    pub fn is_hybrid(&self) -> bool {
        matches!(self.kind, Kind::Hybrid { .. })
    }

    /// Constituents `(from, to)` of a hybrid.
    pub fn constituents(&self) -> Option<(&SystemSpec, &SystemSpec)> {
        match &self.kind {
            Kind::Hybrid { from, to } => Some((from, to)),
            _ => None,
        }
    }

    /// Resolves the embedding parameter: required for hybrids, rejected otherwise.
    pub fn resolve_lambda(&self, lambda: Option<f64>) -> Result<f64> {
        match (self.is_hybrid(), lambda) {
            (true, Some(l)) if l.is_finite() => Ok(l),
            (true, Some(l)) => Err(Error::LambdaOutOfBounds(l)),
            (true, None) => Err(Error::MissingLambda(self.name.clone())),
            (false, None) => Ok(0.0),
            (false, Some(_)) => Err(Error::UnexpectedLambda(self.name.clone())),
        }
    }

    fn check_dim(&self, state: &DVector<f64>) -> Result<()> {
        if state.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                found: state.len(),
            });
        }
        Ok(())
    }

    pub fn field(&self, state: &DVector<f64>, lambda: Option<f64>) -> Result<DVector<f64>> {
        let lam = self.resolve_lambda(lambda)?;
        self.check_dim(state)?;
        Ok(self.eval_field(state, lam))
    }

    pub fn jacobian(&self, state: &DVector<f64>, lambda: Option<f64>) -> Result<DMatrix<f64>> {
        let lam = self.resolve_lambda(lambda)?;
        self.check_dim(state)?;
        Ok(self.eval_jacobian(state, lam))
    }

    /// `∂H/∂λ = to(s) - from(s)` for hybrids, `None` otherwise.
    pub fn lambda_partial(&self, state: &DVector<f64>) -> Option<DVector<f64>> {
        match &self.kind {
            Kind::Hybrid { from, to } => Some(to.eval_field(state, 0.0) - from.eval_field(state, 0.0)),
            _ => None,
        }
    }

    /// Unchecked field evaluation; `lam` is ignored unless the system is a hybrid.
    pub(crate) fn eval_field(&self, s: &DVector<f64>, lam: f64) -> DVector<f64> {
        match &self.kind {
            Kind::Lorenz { sigma, b, r } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DVector::from_vec(vec![
                    -sigma * x + sigma * y,
                    -x * z + r * x - y,
                    x * y - b * z,
                ])
            }
            Kind::Chua { alpha, beta, m0, m1 } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DVector::from_vec(vec![
                    alpha * (y - x - chua_nonlinearity(x, *m0, *m1)),
                    x - y + z,
                    -beta * y,
                ])
            }
            Kind::Rossler { a, b, c } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DVector::from_vec(vec![-y - z, x + a * y, b + z * (x - c)])
            }
            Kind::Chen { a, b, c } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DVector::from_vec(vec![
                    a * (y - x),
                    (c - a) * x - x * z + c * y,
                    x * y - b * z,
                ])
            }
            Kind::Lu { a, b, c, u } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DVector::from_vec(vec![a * (y - x), -x * z + c * y + u, x * y - b * z])
            }
            Kind::Linear(m) => m * s,
            // Endpoints return the constituent exactly, signed zeros included.
            Kind::Hybrid { from, .. } if lam == 0.0 => from.eval_field(s, 0.0),
            Kind::Hybrid { to, .. } if lam == 1.0 => to.eval_field(s, 0.0),
            Kind::Hybrid { from, to } => {
                from.eval_field(s, 0.0) * (1.0 - lam) + to.eval_field(s, 0.0) * lam
            }
        }
    }

    pub(crate) fn eval_jacobian(&self, s: &DVector<f64>, lam: f64) -> DMatrix<f64> {
        match &self.kind {
            Kind::Lorenz { sigma, b, r } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[-sigma, *sigma, 0.0, r - z, -1.0, -x, y, x, -b],
                )
            }
            Kind::Chua { alpha, beta, m0, m1 } => {
                let slope = chua_slope(s[0], *m0, *m1);
                DMatrix::from_row_slice(
                    3,
                    3,
                    &[
                        alpha * (-1.0 - slope),
                        *alpha,
                        0.0,
                        1.0,
                        -1.0,
                        1.0,
                        0.0,
                        -beta,
                        0.0,
                    ],
                )
            }
            Kind::Rossler { a, c, .. } => {
                let (x, z) = (s[0], s[2]);
                DMatrix::from_row_slice(3, 3, &[0.0, -1.0, -1.0, 1.0, *a, 0.0, z, 0.0, x - c])
            }
            Kind::Chen { a, b, c } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DMatrix::from_row_slice(3, 3, &[-a, *a, 0.0, c - a - z, *c, -x, y, x, -b])
            }
            Kind::Lu { a, b, c, .. } => {
                let (x, y, z) = (s[0], s[1], s[2]);
                DMatrix::from_row_slice(3, 3, &[-a, *a, 0.0, -z, *c, -x, y, x, -b])
            }
            Kind::Linear(m) => m.clone(),
            Kind::Hybrid { from, .. } if lam == 0.0 => from.eval_jacobian(s, 0.0),
            Kind::Hybrid { to, .. } if lam == 1.0 => to.eval_jacobian(s, 0.0),
            Kind::Hybrid { from, to } => {
                from.eval_jacobian(s, 0.0) * (1.0 - lam) + to.eval_jacobian(s, 0.0) * lam
            }
        }
    }
}
