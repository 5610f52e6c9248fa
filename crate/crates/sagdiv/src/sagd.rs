//! The functional stochastic approximate gradient descent loop.
//!
//! Starting from the zero function, each step consumes one instrument draw
//! `z_m` and moves against the approximate gradient
//! `ratio(. , z_m) * d2_loss(r(z_m), E[h_{m-1}](z_m))`, then projects back
//! onto the sup-norm ball by pointwise clipping. The returned estimate is
//! the average of the iterates after a warm-up prefix is discarded.
//!
//! Because the projection clips pointwise, no fixed finite basis represents
//! the iterates exactly; the fitted model therefore stores the step chain
//! (anchor instruments and scalar step sizes) and replays it at any query
//! point in O(M) kernel evaluations. A value cache at the estimator-training
//! covariates lets the conditional-expectation operator be applied in O(n)
//! per step during fitting, and the replay reproduces that cache exactly.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::core::{LearningRateSchedule, LossSpec, SearchSetSpec, StructuralModel};
use crate::error::{Error, Result};
use crate::estimators::{CmeOperatorModel, ConditionalMeanModel, DensityRatioModel};
use crate::rng;

/// Abort threshold for a single scalar gradient.
const GRADIENT_GUARD: f64 = 1e6;

/// Configuration of the descent loop.
#[derive(Debug, Clone)]
pub struct SagdConfig {
    /// Number of gradient steps M.
    pub iterations: usize,
    /// Warm-up iterates discarded from the average (default 100).
    pub warmup: usize,
    pub schedule: LearningRateSchedule,
    pub search_set: SearchSetSpec,
    pub loss: LossSpec,
}

impl SagdConfig {
    pub fn new(iterations: usize, loss: LossSpec) -> Self {
        Self {
            iterations,
            warmup: 100,
            schedule: LearningRateSchedule::default(),
            search_set: SearchSetSpec::default(),
            loss,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.iterations == 0 || self.warmup >= self.iterations {
            return Err(Error::InvalidInput(format!(
                "need 0 <= warmup < iterations, got warmup={}, iterations={}",
                self.warmup, self.iterations
            )));
        }
        Ok(())
    }
}

/// The three preliminary estimators the loop consumes.
pub struct PreliminaryEstimators {
    pub ratio: DensityRatioModel,
    pub cond_mean: ConditionalMeanModel,
    pub operator: CmeOperatorModel,
}

/// A fitted descent estimate: the step chain plus everything needed to
/// replay it at arbitrary covariate points.
pub struct SagdModel {
    anchors: Array2<f64>,     // M x d_z instrument draws
    gradients: Vec<f64>,      // scalar gradients g_m
    rates: Vec<f64>,          // learning rates alpha_m
    scaled_steps: Vec<f64>,   // alpha_m * g_m, the replay chain
    bound: f64,               // clip bound A
    warmup: usize,            // discarded prefix K
    ratio: DensityRatioModel,
    train_x: Array2<f64>,     // estimator-training covariates
    cached_average: Array1<f64>, // averaged iterate values at train_x
    anchor_feats: Array2<f64>, // M x b weighted z-features, rebuilt on load
}

impl SagdModel {
    /// Assemble a model from its stored parts, recomputing the per-anchor
    /// kernel features. Used by the fitting loop and by persistence.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        anchors: Array2<f64>,
        gradients: Vec<f64>,
        rates: Vec<f64>,
        bound: f64,
        warmup: usize,
        ratio: DensityRatioModel,
        train_x: Array2<f64>,
        cached_average: Array1<f64>,
    ) -> Result<Self> {
        let m = anchors.nrows();
        if m == 0 || gradients.len() != m || rates.len() != m {
            return Err(Error::InvalidInput(format!(
                "chain lengths disagree: {} anchors, {} gradients, {} rates",
                m,
                gradients.len(),
                rates.len()
            )));
        }
        if warmup >= m {
            return Err(Error::InvalidInput(format!("warmup {warmup} must be below {m} steps")));
        }
        if !(bound > 0.0 && bound.is_finite()) {
            return Err(Error::InvalidInput(format!("clip bound must be positive, got {bound}")));
        }
        let scaled_steps: Vec<f64> = rates.iter().zip(gradients.iter()).map(|(a, g)| a * g).collect();
        let mut anchor_feats = Array2::zeros((m, ratio.basis_size()));
        for i in 0..m {
            let feats = ratio.z_features_weighted(anchors.row(i))?;
            anchor_feats.row_mut(i).assign(&feats);
        }
        Ok(Self {
            anchors,
            gradients,
            rates,
            scaled_steps,
            bound,
            warmup,
            ratio,
            train_x,
            cached_average,
            anchor_feats,
        })
    }

    pub fn bound(&self) -> f64 {
        self.bound
    }

    pub fn warmup(&self) -> usize {
        self.warmup
    }

    pub fn n_steps(&self) -> usize {
        self.anchors.nrows()
    }

    pub fn anchors(&self) -> ArrayView2<'_, f64> {
        self.anchors.view()
    }

    pub fn gradients(&self) -> &[f64] {
        &self.gradients
    }

    pub fn rates(&self) -> &[f64] {
        &self.rates
    }

    pub fn ratio_model(&self) -> &DensityRatioModel {
        &self.ratio
    }

    pub fn train_x(&self) -> ArrayView2<'_, f64> {
        self.train_x.view()
    }

    /// Final averaged iterate values at the estimator-training covariates.
    pub fn cached_average(&self) -> ArrayView1<'_, f64> {
        self.cached_average.view()
    }

    /// Replay the clip chain at one query point given its x-side features.
    fn replay(&self, x_feats: ArrayView1<'_, f64>) -> f64 {
        let m = self.n_steps();
        let mut h = 0.0;
        let mut acc = 0.0;
        for step in 0..m {
            let ratio = self.ratio.combine(x_feats, self.anchor_feats.row(step));
            h = (h - self.scaled_steps[step] * ratio).clamp(-self.bound, self.bound);
            if step >= self.warmup {
                acc += h;
            }
        }
        acc / (m - self.warmup) as f64
    }
}

impl StructuralModel for SagdModel {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        let feats = self.ratio.x_features(x).expect("finite covariate point");
        self.replay(feats.view())
    }

    /// Batch evaluation; queries replay the chain independently in parallel.
    fn eval(&self, xs: ArrayView2<'_, f64>) -> Array1<f64> {
        let feats = self.ratio.x_features_batch(xs).expect("finite covariate points");
        let values: Vec<f64> =
            (0..xs.nrows()).into_par_iter().map(|i| self.replay(feats.row(i))).collect();
        Array1::from_vec(values)
    }
}

/// Run the descent loop.
///
/// `z_stream` holds one instrument draw per row and must be independent of
/// the data behind `estimators`. When the conditional mean is the raw-Y
/// marker, `y_stream` must supply the outcome paired with each draw.
pub fn fit_sagdiv(
    estimators: &PreliminaryEstimators,
    z_stream: ArrayView2<'_, f64>,
    y_stream: Option<ArrayView1<'_, f64>>,
    config: &SagdConfig,
) -> Result<SagdModel> {
    config.validate()?;
    let m_steps = config.iterations;
    if z_stream.nrows() != m_steps {
        return Err(Error::InvalidInput(format!(
            "stream has {} rows but {} iterations were requested",
            z_stream.nrows(),
            m_steps
        )));
    }
    let rates = config.schedule.rates(m_steps)?;
    let bound = config.search_set.bound();

    // conditional-mean targets per step
    let mut r_values: Array1<f64> = match &estimators.cond_mean {
        ConditionalMeanModel::Kernel(model) => model.predict(z_stream)?,
        ConditionalMeanModel::RawY => y_stream
            .ok_or_else(|| {
                Error::InvalidInput("raw-Y mode needs outcomes paired with the stream".into())
            })?
            .to_owned(),
    };
    if let LossSpec::LogisticBce { .. } = config.loss {
        // the loss treats its first argument as a probability
        r_values.mapv_inplace(|r| r.clamp(0.0, 1.0));
    }

    let train_x = estimators.operator.x_train().to_owned();
    let n = train_x.nrows();
    if estimators.operator.n_train() != n {
        return Err(Error::InvalidInput("operator and covariate cache disagree".into()));
    }
    // x-side kernel features of the cached covariates, fixed across steps
    let x_feats = estimators.ratio.x_features_batch(train_x.view())?;

    let mut values = Array1::<f64>::zeros(n);
    let mut average = Array1::<f64>::zeros(n);
    let mut gradients = Vec::with_capacity(m_steps);

    for step in 0..m_steps {
        let z = z_stream.row(step);
        let projected = estimators.operator.apply(values.view(), z)?;
        if !projected.is_finite() {
            return Err(Error::Divergence {
                step: step + 1,
                message: format!("operator value {projected} is not finite"),
            });
        }
        let g = config.loss.deriv2(r_values[step], projected)?;
        if !g.is_finite() || g.abs() > GRADIENT_GUARD {
            return Err(Error::Divergence {
                step: step + 1,
                message: format!("scalar gradient {g} exceeds the guard {GRADIENT_GUARD:e}"),
            });
        }
        gradients.push(g);

        let scaled = rates[step] * g;
        let z_feats = estimators.ratio.z_features_weighted(z)?;
        for i in 0..n {
            let ratio = estimators.ratio.combine(x_feats.row(i), z_feats.view());
            values[i] = (values[i] - scaled * ratio).clamp(-bound, bound);
        }
        if step >= config.warmup {
            average += &values;
        }
    }
    average /= (m_steps - config.warmup) as f64;

    SagdModel::from_parts(
        z_stream.to_owned(),
        gradients,
        rates,
        bound,
        config.warmup,
        estimators.ratio.clone(),
        train_x,
        average,
    )
}

/// A Monte-Carlo estimate of the projected risk.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RiskEstimate {
    pub value: f64,
    pub std_error: f64,
    pub n_outer: usize,
}

/// Ground-truth handles a synthetic scenario exposes for risk evaluation.
pub trait ScenarioOracle: Sync {
    /// Draw one instrument from the scenario's marginal.
    fn sample_z(&self, rng: &mut ChaCha8Rng) -> Array1<f64>;

    /// The true conditional mean of the outcome given `z` (analytic or
    /// quadrature-based).
    fn true_r(&self, z: ArrayView1<'_, f64>) -> Result<f64>;

    /// Draw one covariate vector from the conditional law of X given `z`.
    fn sample_x_given_z(&self, z: ArrayView1<'_, f64>, rng: &mut ChaCha8Rng) -> Array1<f64>;
}

/// Nested Monte-Carlo estimate of the projected risk of `h`.
///
/// Draws `n_outer` instruments; for each, the conditional projection of `h`
/// is estimated by averaging `h` over `n_inner` conditional covariate draws,
/// and the loss compares it against the oracle's true conditional mean. The
/// reported standard error is over the outer loop. Deterministic per seed;
/// outer draws run in parallel on per-draw substreams.
pub fn mc_projected_risk(
    h: &dyn StructuralModel,
    oracle: &dyn ScenarioOracle,
    loss: &LossSpec,
    n_outer: usize,
    n_inner: usize,
    seed: u64,
) -> Result<RiskEstimate> {
    if n_outer < 2 || n_inner == 0 {
        return Err(Error::InvalidInput("risk estimation needs n_outer >= 2 and n_inner >= 1".into()));
    }
    let losses: Vec<f64> = (0..n_outer)
        .into_par_iter()
        .map(|i| -> Result<f64> {
            let mut r = rng::indexed_substream(seed, "risk-outer", i);
            let z = oracle.sample_z(&mut r);
            let r_true = oracle.true_r(z.view())?;
            let first = oracle.sample_x_given_z(z.view(), &mut r);
            let mut draws = Array2::zeros((n_inner, first.len()));
            draws.row_mut(0).assign(&first);
            for j in 1..n_inner {
                draws.row_mut(j).assign(&oracle.sample_x_given_z(z.view(), &mut r));
            }
            let projected = h.eval(draws.view()).mean_axis(Axis(0)).unwrap().into_scalar();
            loss.value(r_true, projected)
        })
        .collect::<Result<Vec<f64>>>()?;

    let mean = losses.iter().sum::<f64>() / n_outer as f64;
    let var = losses.iter().map(|l| (l - mean) * (l - mean)).sum::<f64>() / (n_outer - 1) as f64;
    Ok(RiskEstimate { value: mean, std_error: (var / n_outer as f64).sqrt(), n_outer })
}
