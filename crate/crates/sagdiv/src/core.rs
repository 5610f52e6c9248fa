//! Fundamental domain types shared by every estimator: matched samples,
//! the sup-norm ball that the descent iterates are projected onto, and the
//! pointwise loss contracts (quadratic and logistic binary cross entropy).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Matched samples of covariates `x` (n x d_x), instruments `z` (n x d_z)
/// and outcomes `y` (n). Outcomes are real for continuous responses and
/// {0, 1} for binary responses.
#[derive(Debug, Clone)]
pub struct Dataset {
    x: Array2<f64>,
    z: Array2<f64>,
    y: Array1<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, z: Array2<f64>, y: Array1<f64>) -> Result<Self> {
        let n = x.nrows();
        if n == 0 {
            return Err(Error::InvalidInput("dataset must have at least one row".into()));
        }
        if z.nrows() != n || y.len() != n {
            return Err(Error::InvalidInput(format!(
                "row counts differ: x has {}, z has {}, y has {}",
                n,
                z.nrows(),
                y.len()
            )));
        }
        if x.ncols() == 0 || z.ncols() == 0 {
            return Err(Error::InvalidInput("x and z must each have at least one column".into()));
        }
        if x.iter().chain(z.iter()).chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("dataset contains non-finite entries".into()));
        }
        Ok(Self { x, z, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        false // construction requires n >= 1
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn z(&self) -> ArrayView2<'_, f64> {
        self.z.view()
    }

    pub fn y(&self) -> ArrayView1<'_, f64> {
        self.y.view()
    }

    /// Dataset restricted to the given row indices.
    pub fn subset(&self, rows: &[usize]) -> Self {
        let x = Array2::from_shape_fn((rows.len(), self.x.ncols()), |(i, j)| self.x[[rows[i], j]]);
        let z = Array2::from_shape_fn((rows.len(), self.z.ncols()), |(i, j)| self.z[[rows[i], j]]);
        let y = Array1::from_shape_fn(rows.len(), |i| self.y[rows[i]]);
        Self { x, z, y }
    }
}

/// The search set: the ball of functions with sup norm at most `bound`.
/// Its projection is pointwise clipping, and its diameter is `2 * bound`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SearchSetSpec {
    bound: f64,
}

impl Default for SearchSetSpec {
    fn default() -> Self {
        Self { bound: 10.0 }
    }
}

impl SearchSetSpec {
    pub fn new(bound: f64) -> Result<Self> {
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidInput(format!("search-set bound must be positive, got {bound}")));
        }
        Ok(Self { bound })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn diameter(&self) -> f64 {
        2.0 * self.bound
    }
}

/// Clip every entry of `values` into `[-bound, bound]`.
///
/// This is the explicit form of the orthogonal projection onto the sup-norm
/// ball; it is idempotent and 1-Lipschitz componentwise.
pub fn project_linf(values: &[f64], bound: f64) -> Result<Vec<f64>> {
    if !(bound > 0.0 && bound.is_finite()) {
        return Err(Error::InvalidInput(format!("projection bound must be positive, got {bound}")));
    }
    if let Some(bad) = values.iter().find(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("cannot project non-finite value {bad}")));
    }
    Ok(values.iter().map(|&v| v.clamp(-bound, bound)).collect())
}

fn sigmoid(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// log(1 + exp(u)) without overflow for large |u|.
fn softplus(u: f64) -> f64 {
    u.max(0.0) + (-u.abs()).exp().ln_1p()
}

/// Pointwise loss with its derivative in the second argument.
///
/// `Quadratic` is `(y - y')^2 / 2`. `LogisticBce` composes binary cross
/// entropy with the logistic link of scale `beta`, i.e.
/// `bce(y, sigmoid(y'/beta))`, evaluated in log-sum-exp form so that
/// |y'/beta| up to several hundred stays finite.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum LossSpec {
    Quadratic,
    LogisticBce { beta: f64 },
}

impl LossSpec {
    pub fn logistic_bce(beta: f64) -> Result<Self> {
        if !(beta > 0.0 && beta.is_finite()) {
            return Err(Error::InvalidInput(format!("logistic scale must be positive, got {beta}")));
        }
        Ok(LossSpec::LogisticBce { beta })
    }

    /// Lipschitz constant of the derivative in both arguments jointly.
    /// For the logistic loss this is a conservative bound, max(1/beta, 1/(4 beta^2)).
    pub fn lipschitz(&self) -> f64 {
        match self {
            LossSpec::Quadratic => 1.0,
            LossSpec::LogisticBce { beta } => (1.0 / beta).max(1.0 / (4.0 * beta * beta)),
        }
    }

    /// |derivative at (0, 0)|.
    pub fn offset_c0(&self) -> f64 {
        match self {
            LossSpec::Quadratic => 0.0,
            LossSpec::LogisticBce { beta } => 1.0 / (2.0 * beta),
        }
    }

    fn check_first_arg(&self, y: f64) -> Result<()> {
        if !y.is_finite() {
            return Err(Error::InvalidInput(format!("loss target must be finite, got {y}")));
        }
        if let LossSpec::LogisticBce { .. } = self {
            if !(0.0..=1.0).contains(&y) {
                return Err(Error::InvalidInput(format!(
                    "logistic BCE target must lie in [0, 1], got {y}"
                )));
            }
        }
        Ok(())
    }

    /// Loss value at (target `y`, prediction `y_pred`).
    pub fn value(&self, y: f64, y_pred: f64) -> Result<f64> {
        self.check_first_arg(y)?;
        match self {
            LossSpec::Quadratic => Ok(0.5 * (y - y_pred) * (y - y_pred)),
            LossSpec::LogisticBce { beta } => {
                let t = y_pred / beta;
                Ok(softplus(t) - y * t)
            }
        }
    }

    /// Derivative of the loss with respect to its second argument.
    pub fn deriv2(&self, y: f64, y_pred: f64) -> Result<f64> {
        self.check_first_arg(y)?;
        match self {
            LossSpec::Quadratic => Ok(y_pred - y),
            LossSpec::LogisticBce { beta } => Ok((sigmoid(y_pred / beta) - y) / beta),
        }
    }

    /// The link applied to a latent prediction: logistic CDF of scale beta
    /// for the BCE loss, identity for the quadratic loss.
    pub fn link(&self, v: f64) -> f64 {
        match self {
            LossSpec::Quadratic => v,
            LossSpec::LogisticBce { beta } => sigmoid(v / beta),
        }
    }
}

/// Learning-rate schedule for the descent loop.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LearningRateSchedule {
    /// Constant rate 1/sqrt(M) over M iterations.
    InverseSqrtM,
    Custom(Vec<f64>),
}

impl Default for LearningRateSchedule {
    fn default() -> Self {
        LearningRateSchedule::InverseSqrtM
    }
}

impl LearningRateSchedule {
    /// Materialize rates for `iterations` steps.
    pub fn rates(&self, iterations: usize) -> Result<Vec<f64>> {
        if iterations == 0 {
            return Err(Error::InvalidInput("schedule needs at least one iteration".into()));
        }
        match self {
            LearningRateSchedule::InverseSqrtM => {
                let alpha = 1.0 / (iterations as f64).sqrt();
                Ok(vec![alpha; iterations])
            }
            LearningRateSchedule::Custom(values) => {
                if values.len() < iterations {
                    return Err(Error::InvalidInput(format!(
                        "custom schedule has {} rates but {} iterations were requested",
                        values.len(),
                        iterations
                    )));
                }
                if values.iter().take(iterations).any(|&a| !(a > 0.0 && a.is_finite())) {
                    return Err(Error::InvalidInput("learning rates must be positive".into()));
                }
                Ok(values[..iterations].to_vec())
            }
        }
    }
}

/// Anything that can be evaluated at covariate points, row by row.
pub trait StructuralModel: Sync {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64;

    fn eval(&self, xs: ArrayView2<'_, f64>) -> Array1<f64> {
        Array1::from_shape_fn(xs.nrows(), |i| self.eval_point(xs.row(i)))
    }
}

/// Wrap a closure as a structural model (used for true functions and oracles).
pub struct FnModel<F: Fn(ArrayView1<'_, f64>) -> f64 + Sync>(pub F);

impl<F: Fn(ArrayView1<'_, f64>) -> f64 + Sync> StructuralModel for FnModel<F> {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        (self.0)(x)
    }
}

/// The zero function; the descent's initial guess and a benchmark baseline.
pub struct ZeroModel;

impl StructuralModel for ZeroModel {
    fn eval_point(&self, _x: ArrayView1<'_, f64>) -> f64 {
        0.0
    }
}
