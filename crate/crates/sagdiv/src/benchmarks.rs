//! Synthetic benchmark scenarios, their ground-truth oracles, and the
//! repetition harness that fits every method on an equal sample budget.
//!
//! ## Continuous design
//!
//! `Z = (Z1, Z2) ~ Unif([-3, 3]^2)`, confounder `e ~ N(0, 1)`,
//! `g, d ~ N(0, 0.1)`, `X = Z1 + e + g`, `Y = h(X) + e + d` for one of four
//! structural functions: step, absolute value, linear, sine.
//!
//! ## Binary design
//!
//! `Z ~ Unif([-3, 3]^2)`, `eta ~ Logistic(0, beta)`, `g ~ N(0, 0.1)`,
//! `X = Z1 + eta + g`, `Y = 1{ E[h(X) | Z] + eta > 0 }`. Only the linear and
//! sine responses are supported because the conditional mean must be
//! available in closed form: `E[X | Z = z] = z1` and
//! `E[sin X | Z = z] = beta pi e^{-0.05} / sinh(beta pi) * sin(z1)`.
//!
//! ## Sample budgets
//!
//! One `(X, Z, Y)` triple counts as three random-variable samples and one
//! instrument draw as one. Every method in a report consumes the same total:
//! the descent methods split it between estimator triples and the instrument
//! stream, the baselines take it all as triples.

use std::collections::BTreeMap;
use std::time::Instant;

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::baselines::{KivModel, NaiveKrrModel, TslsModel};
use crate::core::{Dataset, LossSpec, SearchSetSpec, StructuralModel};
use crate::error::{Error, Result};
use crate::estimators::{
    CmeOperatorModel, ConditionalMeanModel, DensityRatioModel, DEFAULT_BASIS, DEFAULT_RATIO_CAP,
};
use crate::linalg::sym_eigen;
use crate::rng;
use crate::sagd::{fit_sagdiv, PreliminaryEstimators, SagdConfig, SagdModel, ScenarioOracle};

const INSTRUMENT_HALF_WIDTH: f64 = 3.0;
const CONFOUNDER_VAR: f64 = 1.0;
const SMALL_NOISE_VAR: f64 = 0.1;
/// Variance of X around Z1 in the continuous design: Var(e) + Var(g).
const CONDITIONAL_X_VAR: f64 = CONFOUNDER_VAR + SMALL_NOISE_VAR;

// ---------------------------------------------------------------------------
// Gaussian quadrature
// ---------------------------------------------------------------------------

/// Nodes and weights from the symmetric tridiagonal Jacobi matrix
/// (Golub-Welsch). `weight_total` is the integral of the weight function.
fn golub_welsch(diag: &[f64], offdiag: &[f64], weight_total: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n = diag.len();
    let mut j = Array2::zeros((n, n));
    for i in 0..n {
        j[[i, i]] = diag[i];
    }
    for i in 0..n - 1 {
        j[[i, i + 1]] = offdiag[i];
        j[[i + 1, i]] = offdiag[i];
    }
    let (values, vectors) = sym_eigen(j.view())?;
    let mut pairs: Vec<(f64, f64)> =
        (0..n).map(|i| (values[i], weight_total * vectors[[0, i]] * vectors[[0, i]])).collect();
    pairs.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
    Ok(pairs.into_iter().unzip())
}

/// Gauss-Hermite rule for the weight `exp(-t^2)`.
pub fn gauss_hermite(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let diag = vec![0.0; order];
    let offdiag: Vec<f64> = (1..order).map(|k| (k as f64 / 2.0).sqrt()).collect();
    golub_welsch(&diag, &offdiag, std::f64::consts::PI.sqrt())
}

/// Gauss-Legendre rule on [-1, 1].
pub fn gauss_legendre(order: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let diag = vec![0.0; order];
    let offdiag: Vec<f64> =
        (1..order).map(|k| k as f64 / (4.0 * (k * k) as f64 - 1.0).sqrt()).collect();
    golub_welsch(&diag, &offdiag, 2.0)
}

/// `E[f(mu + s W)]` for `W ~ N(0, 1)` by Gauss-Hermite quadrature.
pub fn gauss_hermite_mean(f: impl Fn(f64) -> f64, mu: f64, sigma: f64, order: usize) -> Result<f64> {
    let (nodes, weights) = gauss_hermite(order)?;
    let scale = std::f64::consts::SQRT_2 * sigma;
    let norm = std::f64::consts::PI.sqrt();
    Ok(nodes.iter().zip(weights.iter()).map(|(&t, &w)| w / norm * f(mu + scale * t)).sum())
}

/// `E[f(mu + W)]` for `W ~ N(0, sigma^2)` where `f` may have a kink at zero.
///
/// The Gaussian integral is split at the kink and each side is integrated
/// with panelled Gauss-Legendre rules, which keeps the integrand smooth on
/// every panel and reaches quadrature error near machine precision even for
/// the discontinuous step response.
pub fn kink_split_gaussian_mean(f: impl Fn(f64) -> f64, mu: f64, sigma: f64) -> Result<f64> {
    let (nodes, weights) = gauss_legendre(32)?;
    let density = |w: f64| (-w * w / (2.0 * sigma * sigma)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    let reach = 12.0 * sigma;
    let kink_w = (-mu).clamp(-reach, reach);
    let mut boundaries = vec![-reach, kink_w, reach];
    boundaries.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let mut total = 0.0;
    for pair in boundaries.windows(2) {
        let (lo, hi) = (pair[0], pair[1]);
        if hi - lo <= 0.0 {
            continue;
        }
        // panels no wider than one standard deviation
        let panels = ((hi - lo) / sigma).ceil() as usize;
        let width = (hi - lo) / panels as f64;
        for p in 0..panels {
            let a = lo + p as f64 * width;
            let b = a + width;
            let half = 0.5 * (b - a);
            let mid = 0.5 * (a + b);
            total += half
                * nodes
                    .iter()
                    .zip(weights.iter())
                    .map(|(&t, &w)| {
                        let point = mid + half * t;
                        w * f(mu + point) * density(point)
                    })
                    .sum::<f64>();
        }
    }
    Ok(total)
}

// ---------------------------------------------------------------------------
// Scenario definitions
// ---------------------------------------------------------------------------

/// Outcome family of a scenario.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Continuous,
    Binary,
}

/// The four structural functions of the continuous design.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Response {
    Step,
    Abs,
    Linear,
    Sin,
}

impl Response {
    pub fn truth(&self, x: f64) -> f64 {
        match self {
            Response::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Response::Abs => x.abs(),
            Response::Linear => x,
            Response::Sin => x.sin(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Response::Step => "step",
            Response::Abs => "abs",
            Response::Linear => "linear",
            Response::Sin => "sin",
        }
    }

    fn has_kink(&self) -> bool {
        matches!(self, Response::Step | Response::Abs)
    }
}

/// A benchmark scenario: outcome family, structural function, sample sizes,
/// and the seed that fans out into every random block.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub outcome: Outcome,
    pub response: Response,
    /// Estimator triples N.
    pub n_estimator: usize,
    /// Instrument stream length M.
    pub n_stream: usize,
    pub n_test: usize,
    /// Scale of the logistic noise in the binary design.
    pub binary_scale: f64,
    pub seed: u64,
}

impl ScenarioSpec {
    /// Continuous scenario at an explicit total sample budget, split as
    /// N triples + M = 2N instrument draws (so budget = 5N).
    pub fn continuous(response: Response, total_budget: usize, seed: u64) -> Self {
        let n = total_budget / 5;
        Self {
            outcome: Outcome::Continuous,
            response,
            n_estimator: n,
            n_stream: 2 * n,
            n_test: 1000,
            binary_scale: 0.1f64.sqrt(),
            seed,
        }
    }

    /// Binary scenario at an explicit total sample budget.
    pub fn binary(response: Response, total_budget: usize, seed: u64) -> Self {
        Self { outcome: Outcome::Binary, ..Self::continuous(response, total_budget, seed) }
    }

    /// Total random-variable samples the descent methods consume:
    /// 3 per estimator triple plus 1 per instrument draw.
    pub fn total_budget(&self) -> usize {
        3 * self.n_estimator + self.n_stream
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_estimator < 10 || self.n_stream == 0 || self.n_test == 0 {
            return Err(Error::InvalidInput(format!(
                "scenario sizes too small: N={}, M={}, test={}",
                self.n_estimator, self.n_stream, self.n_test
            )));
        }
        if !(self.binary_scale > 0.0 && self.binary_scale.is_finite()) {
            return Err(Error::InvalidInput("binary scale must be positive".into()));
        }
        if self.outcome == Outcome::Binary && !matches!(self.response, Response::Linear | Response::Sin)
        {
            return Err(Error::UnsupportedScenario(format!(
                "binary outcomes need an analytic conditional mean; response '{}' has none",
                self.response.name()
            )));
        }
        Ok(())
    }

    /// Loss matching the outcome family.
    pub fn loss(&self) -> LossSpec {
        match self.outcome {
            Outcome::Continuous => LossSpec::Quadratic,
            Outcome::Binary => LossSpec::LogisticBce { beta: self.binary_scale },
        }
    }

    pub fn label(&self) -> String {
        match self.outcome {
            Outcome::Continuous => format!("continuous-{}", self.response.name()),
            Outcome::Binary => format!("binary-{}", self.response.name()),
        }
    }
}

/// Coefficient of `sin(z1)` in `E[sin X | Z = z]` for the binary design.
pub fn binary_sin_coefficient(beta: f64) -> f64 {
    let bp = beta * std::f64::consts::PI;
    bp * (-SMALL_NOISE_VAR / 2.0).exp() / bp.sinh()
}

/// True conditional mean `E[h(X) | Z1 = z1]` for the continuous design:
/// analytic for the linear and sine responses, kink-split quadrature for
/// step and absolute value.
pub fn conditional_mean_continuous(response: Response, z1: f64) -> Result<f64> {
    let sigma = CONDITIONAL_X_VAR.sqrt();
    match response {
        Response::Linear => Ok(z1),
        Response::Sin => Ok(z1.sin() * (-CONDITIONAL_X_VAR / 2.0).exp()),
        Response::Step | Response::Abs => {
            kink_split_gaussian_mean(|x| response.truth(x), z1, sigma)
        }
    }
}

/// Quadrature route for the same conditional mean, available for every
/// response; used to cross-check the analytic forms.
pub fn conditional_mean_quadrature(response: Response, z1: f64) -> Result<f64> {
    let sigma = CONDITIONAL_X_VAR.sqrt();
    if response.has_kink() {
        kink_split_gaussian_mean(|x| response.truth(x), z1, sigma)
    } else {
        gauss_hermite_mean(|x| response.truth(x), z1, sigma, 64)
    }
}

/// True conditional mean for the binary design (before the link).
pub fn binary_latent_mean(response: Response, beta: f64, z1: f64) -> Result<f64> {
    match response {
        Response::Linear => Ok(z1),
        Response::Sin => Ok(binary_sin_coefficient(beta) * z1.sin()),
        _ => Err(Error::UnsupportedScenario(format!(
            "binary design has no analytic conditional mean for '{}'",
            response.name()
        ))),
    }
}

fn sample_uniform_z(rng: &mut ChaCha8Rng) -> (f64, f64) {
    (
        rng.gen_range(-INSTRUMENT_HALF_WIDTH..INSTRUMENT_HALF_WIDTH),
        rng.gen_range(-INSTRUMENT_HALF_WIDTH..INSTRUMENT_HALF_WIDTH),
    )
}

fn sample_logistic(scale: f64, rng: &mut ChaCha8Rng) -> f64 {
    let mut u: f64 = rng.r#gen();
    while u <= 0.0 || u >= 1.0 {
        u = rng.r#gen();
    }
    scale * (u / (1.0 - u)).ln()
}

fn logistic_cdf(v: f64, scale: f64) -> f64 {
    let t = v / scale;
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// One continuous-design draw with all latent noise exposed.
#[derive(Debug, Clone, Copy)]
pub(crate) struct ContinuousDraw {
    pub z1: f64,
    pub z2: f64,
    pub eps: f64,
    pub gamma: f64,
    pub x: f64,
    pub y: f64,
}

pub(crate) fn draw_continuous(response: Response, rng: &mut ChaCha8Rng) -> ContinuousDraw {
    let (z1, z2) = sample_uniform_z(rng);
    let eps: f64 = StandardNormal.sample(rng);
    let gamma = SMALL_NOISE_VAR.sqrt() * { let v: f64 = StandardNormal.sample(rng); v };
    let delta = SMALL_NOISE_VAR.sqrt() * { let v: f64 = StandardNormal.sample(rng); v };
    let x = z1 + eps + gamma;
    let y = response.truth(x) + eps + delta;
    ContinuousDraw { z1, z2, eps, gamma, x, y }
}

pub(crate) fn draw_binary(
    response: Response,
    beta: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(f64, f64, f64, f64)> {
    let (z1, z2) = sample_uniform_z(rng);
    let eta = sample_logistic(beta, rng);
    let gamma = SMALL_NOISE_VAR.sqrt() * { let v: f64 = StandardNormal.sample(rng); v };
    let x = z1 + eta + gamma;
    let latent = binary_latent_mean(response, beta, z1)?;
    let y = if latent + eta > 0.0 { 1.0 } else { 0.0 };
    Ok((z1, z2, x, y))
}

// ---------------------------------------------------------------------------
// Oracles and generated data
// ---------------------------------------------------------------------------

/// Ground-truth handles for one scenario; implements the risk oracle.
#[derive(Debug, Clone, Copy)]
pub struct BenchOracle {
    outcome: Outcome,
    response: Response,
    beta: f64,
}

impl BenchOracle {
    pub fn new(spec: &ScenarioSpec) -> Self {
        Self { outcome: spec.outcome, response: spec.response, beta: spec.binary_scale }
    }
}

impl ScenarioOracle for BenchOracle {
    fn sample_z(&self, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let (z1, z2) = sample_uniform_z(rng);
        ndarray::array![z1, z2]
    }

    fn true_r(&self, z: ArrayView1<'_, f64>) -> Result<f64> {
        match self.outcome {
            Outcome::Continuous => conditional_mean_continuous(self.response, z[0]),
            Outcome::Binary => {
                let latent = binary_latent_mean(self.response, self.beta, z[0])?;
                Ok(logistic_cdf(latent, self.beta))
            }
        }
    }

    fn sample_x_given_z(&self, z: ArrayView1<'_, f64>, rng: &mut ChaCha8Rng) -> Array1<f64> {
        let noise = match self.outcome {
            Outcome::Continuous => {
                let eps: f64 = StandardNormal.sample(rng);
                let gamma = SMALL_NOISE_VAR.sqrt() * { let v: f64 = StandardNormal.sample(rng); v };
                eps + gamma
            }
            Outcome::Binary => {
                let eta = sample_logistic(self.beta, rng);
                let gamma = SMALL_NOISE_VAR.sqrt() * { let v: f64 = StandardNormal.sample(rng); v };
                eta + gamma
            }
        };
        ndarray::array![z[0] + noise]
    }
}

/// Everything a repetition fits on: a triple pool whose prefix is the
/// estimator block, the instrument stream with paired outcomes, the shared
/// test set, and the scenario oracle.
pub struct GeneratedData {
    /// Triple pool; the baselines consume all of it, the descent methods
    /// only the first `n_estimator` rows.
    pub pool: Dataset,
    pub n_estimator: usize,
    pub stream_z: Array2<f64>,
    /// Outcomes paired with the stream draws (consumed by raw-Y mode only).
    pub stream_y: Array1<f64>,
    pub test_x: Array2<f64>,
    pub test_truth: Array1<f64>,
    pub oracle: BenchOracle,
}

impl GeneratedData {
    /// First `n_estimator` rows of the pool, the block behind the
    /// preliminary estimators.
    pub fn estimator_data(&self) -> Dataset {
        self.pool.subset(&(0..self.n_estimator).collect::<Vec<_>>())
    }
}

fn triples_from(
    spec: &ScenarioSpec,
    count: usize,
    rng: &mut ChaCha8Rng,
) -> Result<(Array2<f64>, Array2<f64>, Array1<f64>)> {
    let mut x = Array2::zeros((count, 1));
    let mut z = Array2::zeros((count, 2));
    let mut y = Array1::zeros(count);
    for i in 0..count {
        match spec.outcome {
            Outcome::Continuous => {
                let d = draw_continuous(spec.response, rng);
                x[[i, 0]] = d.x;
                z[[i, 0]] = d.z1;
                z[[i, 1]] = d.z2;
                y[i] = d.y;
            }
            Outcome::Binary => {
                let (z1, z2, xv, yv) = draw_binary(spec.response, spec.binary_scale, rng)?;
                x[[i, 0]] = xv;
                z[[i, 0]] = z1;
                z[[i, 1]] = z2;
                y[i] = yv;
            }
        }
    }
    Ok((x, z, y))
}

/// Generate every block of a scenario from disjoint substreams of its seed.
pub fn generate(spec: &ScenarioSpec) -> Result<GeneratedData> {
    spec.validate()?;
    // pool sized so that 3 * pool = 3N + M, the descent methods' budget
    let pool_size = spec.n_estimator + spec.n_stream / 3;

    let mut pool_rng = rng::substream(spec.seed, "dgp/pool");
    let (px, pz, py) = triples_from(spec, pool_size, &mut pool_rng)?;
    let pool = Dataset::new(px, pz, py)?;

    let mut stream_rng = rng::substream(spec.seed, "dgp/stream");
    let (_, sz, sy) = triples_from(spec, spec.n_stream, &mut stream_rng)?;

    let mut test_rng = rng::substream(spec.seed, "dgp/test");
    let (tx, _, _) = triples_from(spec, spec.n_test, &mut test_rng)?;
    let test_truth = Array1::from_shape_fn(spec.n_test, |i| spec.response.truth(tx[[i, 0]]));

    Ok(GeneratedData {
        pool,
        n_estimator: spec.n_estimator,
        stream_z: sz,
        stream_y: sy,
        test_x: tx,
        test_truth,
        oracle: BenchOracle::new(spec),
    })
}

/// Continuous-design generation.
pub fn gen_continuous(spec: &ScenarioSpec) -> Result<GeneratedData> {
    if spec.outcome != Outcome::Continuous {
        return Err(Error::InvalidInput("spec is not a continuous scenario".into()));
    }
    generate(spec)
}

/// Binary-design generation; only the linear and sine responses are valid.
pub fn gen_binary(spec: &ScenarioSpec) -> Result<GeneratedData> {
    if spec.outcome != Outcome::Binary {
        return Err(Error::InvalidInput("spec is not a binary scenario".into()));
    }
    generate(spec)
}

/// Mean squared error of `h` against true structural values, raw and log10.
#[derive(Debug, Clone, Copy, Serialize, Deserialize, PartialEq)]
pub struct MseResult {
    pub mse: f64,
    pub log10_mse: f64,
}

pub fn mse_vs_truth(
    h: &dyn StructuralModel,
    test_x: ArrayView2<'_, f64>,
    truth: ArrayView1<'_, f64>,
) -> Result<MseResult> {
    if test_x.nrows() != truth.len() {
        return Err(Error::InvalidInput(format!(
            "{} test points but {} true values",
            test_x.nrows(),
            truth.len()
        )));
    }
    let preds = h.eval(test_x);
    let mse = preds.iter().zip(truth.iter()).map(|(&p, &t)| (p - t) * (p - t)).sum::<f64>()
        / truth.len() as f64;
    Ok(MseResult { mse, log10_mse: mse.log10() })
}

// ---------------------------------------------------------------------------
// Methods
// ---------------------------------------------------------------------------

/// Estimators the harness can run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "sagdiv-kernel")]
    SagdivKernel,
    #[serde(rename = "sagdiv-rawy")]
    SagdivRawY,
    #[serde(rename = "kiv")]
    Kiv,
    #[serde(rename = "2sls")]
    Tsls,
    #[serde(rename = "naive-krr")]
    NaiveKrr,
}

impl Method {
    pub fn tag(&self) -> &'static str {
        match self {
            Method::SagdivKernel => "sagdiv-kernel",
            Method::SagdivRawY => "sagdiv-rawy",
            Method::Kiv => "kiv",
            Method::Tsls => "2sls",
            Method::NaiveKrr => "naive-krr",
        }
    }

    pub fn parse(tag: &str) -> Result<Self> {
        match tag {
            "sagdiv-kernel" => Ok(Method::SagdivKernel),
            "sagdiv-rawy" => Ok(Method::SagdivRawY),
            "kiv" => Ok(Method::Kiv),
            "2sls" => Ok(Method::Tsls),
            "naive-krr" => Ok(Method::NaiveKrr),
            other => Err(Error::Schema(format!("unknown method '{other}'"))),
        }
    }
}

/// Per-method hyperparameter overrides; `None` keeps the defaults.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct MethodOverrides {
    /// Clip bound A of the search set.
    pub bound: Option<f64>,
    /// Warm-up iterates discarded from the average.
    pub warmup: Option<usize>,
    /// Hard cap on density-ratio evaluations.
    pub ratio_cap: Option<f64>,
    /// Number of uLSIF basis centers.
    pub basis: Option<usize>,
}

/// A method plus its overrides, as listed in a run configuration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct MethodSpec {
    pub method: Method,
    #[serde(default)]
    pub overrides: MethodOverrides,
}

impl MethodSpec {
    pub fn new(method: Method) -> Self {
        Self { method, overrides: MethodOverrides::default() }
    }
}

/// The training blocks a fit consumes.
pub struct TrainingBlocks {
    pub estimator_data: Dataset,
    pub stream_z: Array2<f64>,
    pub stream_y: Array1<f64>,
    /// Full triple pool for methods that train on triples alone.
    pub pool: Dataset,
}

/// Any fitted method, evaluable at covariate points.
pub enum FittedMethod {
    Sagd(SagdModel),
    Kiv(KivModel),
    Tsls(TslsModel),
    Naive(NaiveKrrModel),
}

impl StructuralModel for FittedMethod {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        match self {
            FittedMethod::Sagd(m) => m.eval_point(x),
            FittedMethod::Kiv(m) => m.eval_point(x),
            FittedMethod::Tsls(m) => m.eval_point(x),
            FittedMethod::Naive(m) => m.eval_point(x),
        }
    }

    fn eval(&self, xs: ArrayView2<'_, f64>) -> Array1<f64> {
        match self {
            FittedMethod::Sagd(m) => m.eval(xs),
            FittedMethod::Kiv(m) => m.eval(xs),
            FittedMethod::Tsls(m) => m.eval(xs),
            FittedMethod::Naive(m) => m.eval(xs),
        }
    }
}

/// Fit the preliminary estimators and run the descent loop.
fn fit_sagd_variant(
    raw_y: bool,
    overrides: &MethodOverrides,
    estimator_data: &Dataset,
    stream_z: ArrayView2<'_, f64>,
    stream_y: Option<ArrayView1<'_, f64>>,
    loss: LossSpec,
    seed: u64,
) -> Result<SagdModel> {
    let n = estimator_data.len();
    let basis = overrides.basis.unwrap_or(DEFAULT_BASIS).min(n);
    let cap = overrides.ratio_cap.unwrap_or(DEFAULT_RATIO_CAP);
    let (ratio, _) = DensityRatioModel::fit_selected(estimator_data, basis, cap, seed)?;
    let cond_mean = if raw_y {
        ConditionalMeanModel::raw_y()
    } else {
        ConditionalMeanModel::fit(estimator_data, seed)?.0
    };
    let (operator, _) = CmeOperatorModel::fit_selected(estimator_data, seed)?;
    let estimators = PreliminaryEstimators { ratio, cond_mean, operator };

    let m = stream_z.nrows();
    let default_warmup = if m >= 200 { 100 } else { m / 10 };
    let mut config = SagdConfig::new(m, loss);
    config.warmup = overrides.warmup.unwrap_or(default_warmup);
    if let Some(bound) = overrides.bound {
        config.search_set = SearchSetSpec::new(bound)?;
    }
    fit_sagdiv(&estimators, stream_z, stream_y, &config)
}

/// Fit `method` on the given blocks.
pub fn fit_method(
    method: Method,
    overrides: &MethodOverrides,
    blocks: &TrainingBlocks,
    loss: LossSpec,
    seed: u64,
) -> Result<FittedMethod> {
    match method {
        Method::SagdivKernel => Ok(FittedMethod::Sagd(fit_sagd_variant(
            false,
            overrides,
            &blocks.estimator_data,
            blocks.stream_z.view(),
            None,
            loss,
            seed,
        )?)),
        Method::SagdivRawY => Ok(FittedMethod::Sagd(fit_sagd_variant(
            true,
            overrides,
            &blocks.estimator_data,
            blocks.stream_z.view(),
            Some(blocks.stream_y.view()),
            loss,
            seed,
        )?)),
        Method::Kiv => Ok(FittedMethod::Kiv(KivModel::fit(&blocks.pool, seed)?)),
        Method::Tsls => Ok(FittedMethod::Tsls(TslsModel::fit(&blocks.pool)?)),
        Method::NaiveKrr => Ok(FittedMethod::Naive(NaiveKrrModel::fit(&blocks.pool, seed)?)),
    }
}

/// Derive the blocks a method consumes from one repetition's data, keeping
/// the total sample count equal across methods.
///
/// The raw-Y variant reads both coordinates of each stream draw, so its
/// split is re-derived from the same total with triples counted as three
/// samples and stream pairs as two.
fn blocks_for_method(method: Method, data: &GeneratedData) -> TrainingBlocks {
    let total = 3 * data.n_estimator + data.stream_z.nrows();
    match method {
        Method::SagdivRawY => {
            let mut n = (total / 7).min(data.n_estimator);
            while n > 10 && (total - 3 * n) % 2 != 0 {
                n -= 1;
            }
            let m = ((total - 3 * n) / 2).min(data.stream_z.nrows());
            let rows: Vec<usize> = (0..n).collect();
            TrainingBlocks {
                estimator_data: data.pool.subset(&rows),
                stream_z: data.stream_z.slice(ndarray::s![..m, ..]).to_owned(),
                stream_y: data.stream_y.slice(ndarray::s![..m]).to_owned(),
                pool: data.pool.clone(),
            }
        }
        _ => TrainingBlocks {
            estimator_data: data.estimator_data(),
            stream_z: data.stream_z.clone(),
            stream_y: data.stream_y.clone(),
            pool: data.pool.clone(),
        },
    }
}

/// Random-variable samples `method` consumes from blocks derived as above.
pub fn budget_for_method(method: Method, data: &GeneratedData) -> usize {
    let blocks = blocks_for_method(method, data);
    match method {
        Method::SagdivKernel => 3 * blocks.estimator_data.len() + blocks.stream_z.nrows(),
        Method::SagdivRawY => 3 * blocks.estimator_data.len() + 2 * blocks.stream_z.nrows(),
        Method::Kiv | Method::Tsls | Method::NaiveKrr => 3 * blocks.pool.len(),
    }
}

// ---------------------------------------------------------------------------
// The repetition harness
// ---------------------------------------------------------------------------

/// One (repetition, method) cell of a run.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CellResult {
    pub method: Method,
    pub repetition: usize,
    pub seed: u64,
    pub mse: Option<MseResult>,
    pub fit_seconds: f64,
    pub error: Option<String>,
}

/// Median and quartiles of the successful cells of one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodSummary {
    pub method: Method,
    pub n_ok: usize,
    pub n_failed: usize,
    pub median_mse: f64,
    pub q1_mse: f64,
    pub q3_mse: f64,
    pub median_log10_mse: f64,
}

/// Fitted curves on a fixed grid, for plot emission.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CurveData {
    pub method: Method,
    pub grid: Vec<f64>,
    pub values: Vec<f64>,
}

/// Results of running one scenario over repeated data realizations.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunReport {
    pub scenario: ScenarioSpec,
    pub repetitions: usize,
    pub master_seed: u64,
    pub cells: Vec<CellResult>,
    pub summaries: Vec<MethodSummary>,
    /// Random-variable samples per method per repetition.
    pub budget_audit: BTreeMap<String, usize>,
    /// Curves from the first repetition on a 200-point grid over [-4, 4].
    pub curves: Vec<CurveData>,
}

impl RunReport {
    pub fn summary_for(&self, method: Method) -> Option<&MethodSummary> {
        self.summaries.iter().find(|s| s.method == method)
    }

    pub fn mses_for(&self, method: Method) -> Vec<f64> {
        let mut v: Vec<f64> = self
            .cells
            .iter()
            .filter(|c| c.method == method)
            .filter_map(|c| c.mse.map(|m| m.mse))
            .collect();
        v.sort_by(|a, b| a.partial_cmp(b).unwrap());
        v
    }
}

/// Linear-interpolation quantile of an ascending slice.
fn quantile(sorted: &[f64], q: f64) -> f64 {
    if sorted.is_empty() {
        return f64::NAN;
    }
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    if lo == hi {
        sorted[lo]
    } else {
        sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
    }
}

/// Grid used for curve emission.
pub fn curve_grid() -> Vec<f64> {
    (0..200).map(|i| -4.0 + 8.0 * i as f64 / 199.0).collect()
}

/// Run every method over `repetitions` fresh data realizations.
///
/// Repetition r draws its scenario seed from the substream `rep/r` of the
/// master seed, so repetitions can execute in parallel and the report is
/// identical whatever the thread count. A failing fit records its error in
/// the cell and the run continues.
pub fn run_scenario(
    spec: &ScenarioSpec,
    methods: &[MethodSpec],
    repetitions: usize,
    master_seed: u64,
) -> Result<RunReport> {
    if repetitions == 0 {
        return Err(Error::InvalidInput("need at least one repetition".into()));
    }
    if methods.is_empty() {
        return Err(Error::InvalidInput("need at least one method".into()));
    }
    spec.validate()?;

    struct RepOutcome {
        cells: Vec<CellResult>,
        curves: Vec<CurveData>,
        budgets: BTreeMap<String, usize>,
    }

    let loss = spec.loss();
    let outcomes: Vec<RepOutcome> = (0..repetitions)
        .into_par_iter()
        .map(|rep| -> Result<RepOutcome> {
            let rep_seed = rng::derive_u64(master_seed, &format!("rep/{rep}"));
            let rep_spec = ScenarioSpec { seed: rep_seed, ..*spec };
            let data = generate(&rep_spec)?;
            let mut cells = Vec::with_capacity(methods.len());
            let mut curves = Vec::new();
            let mut budgets = BTreeMap::new();
            for mspec in methods {
                let blocks = blocks_for_method(mspec.method, &data);
                budgets.insert(
                    mspec.method.tag().to_string(),
                    budget_for_method(mspec.method, &data),
                );
                let started = Instant::now();
                let fitted = fit_method(mspec.method, &mspec.overrides, &blocks, loss, rep_seed);
                let fit_seconds = started.elapsed().as_secs_f64();
                match fitted {
                    Ok(model) => {
                        let mse = mse_vs_truth(&model, data.test_x.view(), data.test_truth.view())?;
                        if rep == 0 {
                            let grid = curve_grid();
                            let gx = Array2::from_shape_fn((grid.len(), 1), |(i, _)| grid[i]);
                            curves.push(CurveData {
                                method: mspec.method,
                                grid: grid.clone(),
                                values: model.eval(gx.view()).to_vec(),
                            });
                        }
                        cells.push(CellResult {
                            method: mspec.method,
                            repetition: rep,
                            seed: rep_seed,
                            mse: Some(mse),
                            fit_seconds,
                            error: None,
                        });
                    }
                    Err(err) => cells.push(CellResult {
                        method: mspec.method,
                        repetition: rep,
                        seed: rep_seed,
                        mse: None,
                        fit_seconds,
                        error: Some(err.to_string()),
                    }),
                }
            }
            Ok(RepOutcome { cells, curves, budgets })
        })
        .collect::<Result<Vec<_>>>()?;

    let mut cells = Vec::new();
    let mut curves = Vec::new();
    let mut budget_audit = BTreeMap::new();
    for (rep, outcome) in outcomes.into_iter().enumerate() {
        if rep == 0 {
            curves = outcome.curves;
            budget_audit = outcome.budgets;
        }
        cells.extend(outcome.cells);
    }

    let mut summaries = Vec::new();
    for mspec in methods {
        let mses: Vec<f64> = cells
            .iter()
            .filter(|c| c.method == mspec.method)
            .filter_map(|c| c.mse.map(|m| m.mse))
            .collect();
        let mut sorted = mses.clone();
        sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let n_failed = repetitions - sorted.len();
        summaries.push(MethodSummary {
            method: mspec.method,
            n_ok: sorted.len(),
            n_failed,
            median_mse: quantile(&sorted, 0.5),
            q1_mse: quantile(&sorted, 0.25),
            q3_mse: quantile(&sorted, 0.75),
            median_log10_mse: if sorted.is_empty() { f64::NAN } else { quantile(&sorted, 0.5).log10() },
        });
    }

    Ok(RunReport {
        scenario: *spec,
        repetitions,
        master_seed,
        cells,
        summaries,
        budget_audit,
        curves,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use statrs::distribution::{ContinuousCDF, Normal};

    #[test]
    fn gauss_hermite_integrates_polynomials() {
        // E[W^2] = 1, E[W^4] = 3 for W ~ N(0,1)
        let m2 = gauss_hermite_mean(|x| x * x, 0.0, 1.0, 64).unwrap();
        let m4 = gauss_hermite_mean(|x| x * x * x * x, 0.0, 1.0, 64).unwrap();
        assert!((m2 - 1.0).abs() < 1e-12);
        assert!((m4 - 3.0).abs() < 1e-11);
    }

    #[test]
    fn gauss_legendre_integrates_exactly() {
        let (nodes, weights) = gauss_legendre(16).unwrap();
        let integral: f64 =
            nodes.iter().zip(weights.iter()).map(|(&x, &w)| w * (x * x * x * x)).sum();
        assert!((integral - 0.4).abs() < 1e-13); // int x^4 over [-1,1] = 2/5
    }

    #[test]
    fn step_oracle_matches_the_normal_cdf() {
        let sigma = CONDITIONAL_X_VAR.sqrt();
        let normal = Normal::new(0.0, sigma).unwrap();
        for z1 in [-2.5, -1.0, -0.1, 0.0, 0.4, 1.7, 2.9] {
            let got = conditional_mean_continuous(Response::Step, z1).unwrap();
            // P(z1 + W > 0) = Phi(z1 / sigma)
            let expected = normal.cdf(z1);
            assert!((got - expected).abs() < 1e-9, "z1={z1}: {got} vs {expected}");
        }
    }

    #[test]
    fn abs_oracle_matches_the_folded_normal_mean() {
        let sigma = CONDITIONAL_X_VAR.sqrt();
        let normal = Normal::new(0.0, 1.0).unwrap();
        for z1 in [-2.0, -0.5, 0.0, 0.3, 1.2, 2.8] {
            let got = conditional_mean_continuous(Response::Abs, z1).unwrap();
            // E|mu + W| = sigma sqrt(2/pi) exp(-mu^2/(2 s^2)) + mu (1 - 2 Phi(-mu/s))
            let expected = sigma
                * (2.0 / std::f64::consts::PI).sqrt()
                * (-z1 * z1 / (2.0 * sigma * sigma)).exp()
                + z1 * (1.0 - 2.0 * normal.cdf(-z1 / sigma));
            assert!((got - expected).abs() < 1e-9, "z1={z1}: {got} vs {expected}");
        }
    }

    #[test]
    fn quadrature_route_agrees_with_analytic_forms() {
        for z1 in [-2.3, -0.7, 0.0, 0.5, 1.9] {
            for response in [Response::Linear, Response::Sin] {
                let analytic = conditional_mean_continuous(response, z1).unwrap();
                let numeric = conditional_mean_quadrature(response, z1).unwrap();
                assert!(
                    (analytic - numeric).abs() < 1e-6,
                    "{}: analytic {analytic} vs quadrature {numeric}",
                    response.name()
                );
            }
        }
    }

    #[test]
    fn kinked_oracles_match_monte_carlo() {
        let sigma = CONDITIONAL_X_VAR.sqrt();
        let mut r = rng::substream(31, "quadrature-mc");
        for _ in 0..20 {
            let z1: f64 = r.gen_range(-3.0..3.0);
            for response in [Response::Step, Response::Abs] {
                let oracle = conditional_mean_continuous(response, z1).unwrap();
                let n = 200_000;
                let mut sum = 0.0;
                let mut sumsq = 0.0;
                for _ in 0..n {
                    let w: f64 = StandardNormal.sample(&mut r);
                    let v = response.truth(z1 + sigma * w);
                    sum += v;
                    sumsq += v * v;
                }
                let mean = sum / n as f64;
                let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
                assert!(
                    (oracle - mean).abs() <= 3.0 * se + 1e-9,
                    "{} at z1={z1}: oracle {oracle} vs mc {mean} (se {se})",
                    response.name()
                );
            }
        }
    }

    #[test]
    fn continuous_moments_match_the_design() {
        let n = 100_000;
        let mut r = rng::substream(32, "moment-check");
        let mut eps_sum = 0.0;
        let mut eps_sq = 0.0;
        let mut gamma_sq = 0.0;
        let mut gamma_sum = 0.0;
        let mut draws = Vec::with_capacity(n);
        for _ in 0..n {
            let d = draw_continuous(Response::Linear, &mut r);
            eps_sum += d.eps;
            eps_sq += d.eps * d.eps;
            gamma_sum += d.gamma;
            gamma_sq += d.gamma * d.gamma;
            draws.push(d);
        }
        let nf = n as f64;
        let eps_mean = eps_sum / nf;
        let eps_var = eps_sq / nf - eps_mean * eps_mean;
        let gamma_mean = gamma_sum / nf;
        let gamma_var = gamma_sq / nf - gamma_mean * gamma_mean;
        assert!(eps_mean.abs() <= 0.02, "mean eps {eps_mean}");
        assert!((0.96..=1.04).contains(&eps_var), "var eps {eps_var}");
        assert!((0.094..=0.106).contains(&gamma_var), "var gamma {gamma_var}");

        let corr = |a: &dyn Fn(&ContinuousDraw) -> f64, b: &dyn Fn(&ContinuousDraw) -> f64| {
            let (ma, mb) = (
                draws.iter().map(|d| a(d)).sum::<f64>() / nf,
                draws.iter().map(|d| b(d)).sum::<f64>() / nf,
            );
            let cov = draws.iter().map(|d| (a(d) - ma) * (b(d) - mb)).sum::<f64>() / nf;
            let va = draws.iter().map(|d| (a(d) - ma) * (a(d) - ma)).sum::<f64>() / nf;
            let vb = draws.iter().map(|d| (b(d) - mb) * (b(d) - mb)).sum::<f64>() / nf;
            cov / (va * vb).sqrt()
        };
        // Var(Z1)=3, Var(X)=4.1: corr(X, Z1) = sqrt(3/4.1) ~ 0.855
        assert!(corr(&|d| d.x, &|d| d.z1) > 0.8);
        // Cov(X, eps) = 1: corr ~ 1/sqrt(4.1) ~ 0.494
        assert!(corr(&|d| d.x, &|d| d.eps) > 0.4);
    }

    #[test]
    fn binary_sin_coefficient_matches_characteristic_functions() {
        let beta = 0.1f64.sqrt();
        let coeff = binary_sin_coefficient(beta);
        // independent route: E[sin(z1 + eta + gamma)] at z1 = pi/2 equals
        // cos(eta + gamma) averaged, i.e. the product of the logistic and
        // Gaussian characteristic functions at t = 1
        let mut r = rng::substream(33, "binary-sin-mc");
        let n = 400_000;
        let z1 = std::f64::consts::FRAC_PI_2;
        let mut sum = 0.0;
        let mut sumsq = 0.0;
        for _ in 0..n {
            let eta = sample_logistic(beta, &mut r);
            let gamma = SMALL_NOISE_VAR.sqrt() * { let v: f64 = StandardNormal.sample(&mut r); v };
            let v = (z1 + eta + gamma).sin();
            sum += v;
            sumsq += v * v;
        }
        let mean = sum / n as f64;
        let se = ((sumsq / n as f64 - mean * mean) / n as f64).sqrt();
        let expected = coeff * z1.sin();
        assert!((expected - mean).abs() <= 3.0 * se, "{expected} vs {mean} (se {se})");
    }

    #[test]
    fn binary_outcome_is_balanced_at_the_origin() {
        let beta = 0.1f64.sqrt();
        let mut r = rng::substream(34, "binary-balance");
        let n = 100_000;
        let mut ones = 0usize;
        for _ in 0..n {
            // conditional draw at z1 = 0: latent mean is 0 for the linear response
            let eta = sample_logistic(beta, &mut r);
            if eta > 0.0 {
                ones += 1;
            }
        }
        let freq = ones as f64 / n as f64;
        assert!((freq - 0.5).abs() < 0.01, "P(Y=1 | z1=0) = {freq}");
    }

    #[test]
    fn binary_r_is_a_probability() {
        let spec = ScenarioSpec::binary(Response::Sin, 1500, 5);
        let oracle = BenchOracle::new(&spec);
        let mut r = rng::substream(35, "binary-r-range");
        for _ in 0..200 {
            let z = oracle.sample_z(&mut r);
            let p = oracle.true_r(z.view()).unwrap();
            assert!((0.0..1.0).contains(&p) && p > 0.0, "r(z) = {p} outside (0,1)");
        }
    }

    #[test]
    fn generation_is_deterministic_and_blocks_are_disjoint_streams() {
        let spec = ScenarioSpec::continuous(Response::Sin, 1500, 11);
        let a = generate(&spec).unwrap();
        let b = generate(&spec).unwrap();
        assert_eq!(a.pool.y().to_vec(), b.pool.y().to_vec());
        assert_eq!(a.stream_z.row(0).to_vec(), b.stream_z.row(0).to_vec());
        assert_eq!(a.test_x[[0, 0]], b.test_x[[0, 0]]);
        // pool and stream come from different substreams
        assert_ne!(a.pool.z()[[0, 0]], a.stream_z[[0, 0]]);
    }

    #[test]
    fn binary_rejects_kinked_responses() {
        let spec = ScenarioSpec::binary(Response::Abs, 1500, 1);
        assert!(matches!(generate(&spec), Err(Error::UnsupportedScenario(_))));
    }

    #[test]
    fn mse_of_the_truth_is_zero_and_offsets_square() {
        let spec = ScenarioSpec::continuous(Response::Sin, 1500, 3);
        let data = generate(&spec).unwrap();
        let truth = crate::core::FnModel(|x: ArrayView1<'_, f64>| x[0].sin());
        let exact = mse_vs_truth(&truth, data.test_x.view(), data.test_truth.view()).unwrap();
        assert_eq!(exact.mse, 0.0);
        let offset = crate::core::FnModel(|x: ArrayView1<'_, f64>| x[0].sin() + 0.1);
        let shifted = mse_vs_truth(&offset, data.test_x.view(), data.test_truth.view()).unwrap();
        assert!((shifted.mse - 0.01).abs() < 1e-12);
    }

    #[test]
    fn zero_function_mse_matches_second_moment_on_linear() {
        let spec = ScenarioSpec::continuous(Response::Linear, 3000, 7);
        let data = generate(&spec).unwrap();
        let zero = crate::core::ZeroModel;
        let got = mse_vs_truth(&zero, data.test_x.view(), data.test_truth.view()).unwrap();
        // E[X^2] = Var(Z1) + Var(e) + Var(g) = 4.1, within Monte-Carlo error
        // of a 1000-point test set (sd of X^2 is about 5.8, so 3 se ~ 0.55)
        assert!((got.mse - 4.1).abs() < 0.6, "zero-function mse {}", got.mse);
    }

    #[test]
    fn mse_rejects_length_mismatch() {
        let zero = crate::core::ZeroModel;
        let xs = Array2::zeros((3, 1));
        let truth = Array1::zeros(4);
        assert!(mse_vs_truth(&zero, xs.view(), truth.view()).is_err());
    }

    #[test]
    fn budgets_are_equal_across_methods_at_preset_sizes() {
        for budget in [3000usize, 1500] {
            let spec = ScenarioSpec::continuous(Response::Linear, budget, 1);
            let data = generate(&spec).unwrap();
            let reference = budget_for_method(Method::SagdivKernel, &data);
            assert_eq!(reference, budget);
            for method in [Method::SagdivRawY, Method::Kiv, Method::Tsls, Method::NaiveKrr] {
                assert_eq!(
                    budget_for_method(method, &data),
                    reference,
                    "budget mismatch for {}",
                    method.tag()
                );
            }
        }
    }

    #[test]
    fn tiny_run_produces_one_cell_per_method_and_is_deterministic() {
        let spec = ScenarioSpec {
            outcome: Outcome::Continuous,
            response: Response::Linear,
            n_estimator: 60,
            n_stream: 120,
            n_test: 50,
            binary_scale: 0.1f64.sqrt(),
            seed: 0,
        };
        let methods = [MethodSpec::new(Method::NaiveKrr)];
        let report = run_scenario(&spec, &methods, 1, 99).unwrap();
        assert_eq!(report.cells.len(), 1);
        assert!(report.cells[0].mse.is_some());
        let again = run_scenario(&spec, &methods, 1, 99).unwrap();
        assert_eq!(
            report.cells[0].mse.unwrap().mse,
            again.cells[0].mse.unwrap().mse
        );
        assert_eq!(report.curves.len(), 1);
        assert_eq!(report.curves[0].grid.len(), 200);
    }

    #[test]
    fn failures_are_recorded_per_cell_without_aborting() {
        // 2SLS cannot run with duplicated instrument columns, but the run
        // must still produce cells for every method
        let spec = ScenarioSpec {
            outcome: Outcome::Continuous,
            response: Response::Linear,
            n_estimator: 10,
            n_stream: 21,
            n_test: 20,
            binary_scale: 0.1f64.sqrt(),
            seed: 0,
        };
        // the 17-row pool breaks KIV's minimum size but is fine for naive-krr
        let methods = [MethodSpec::new(Method::Kiv), MethodSpec::new(Method::NaiveKrr)];
        let report = run_scenario(&spec, &methods, 1, 1).unwrap();
        let kiv_cell = report.cells.iter().find(|c| c.method == Method::Kiv).unwrap();
        assert!(kiv_cell.error.is_some());
        let naive_cell = report.cells.iter().find(|c| c.method == Method::NaiveKrr).unwrap();
        assert!(naive_cell.error.is_none());
    }

    #[test]
    fn quantiles_interpolate() {
        let v = [1.0, 2.0, 3.0, 4.0];
        assert_eq!(quantile(&v, 0.5), 2.5);
        assert_eq!(quantile(&v, 0.0), 1.0);
        assert_eq!(quantile(&v, 1.0), 4.0);
    }
}
