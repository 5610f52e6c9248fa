//! Reference estimators for the benchmark tables: classical two-stage least
//! squares, a re-implementation of two-stage kernel instrumental-variable
//! regression from its closed forms, and a deliberately confounded kernel
//! ridge of the outcome on the covariates that ignores the instrument.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::core::{Dataset, StructuralModel};
use crate::error::{Error, Result};
use crate::estimators::CmeOperatorModel;
use crate::kernel::{
    fit_ridge_cv, gram, median_heuristic, refine_reg_search, KernelSpec, RefineOffset, RidgeModel,
    Standardizer, DEFAULT_REG_GRID, GRAM_JITTER,
};
use crate::linalg::SpdFactor;

fn with_intercept(data: ArrayView2<'_, f64>) -> Array2<f64> {
    let mut out = Array2::ones((data.nrows(), data.ncols() + 1));
    for i in 0..data.nrows() {
        for j in 0..data.ncols() {
            out[[i, j + 1]] = data[[i, j]];
        }
    }
    out
}

/// Ordinary least squares via the normal equations; rank deficiency shows up
/// as a failed factorization.
fn ols(design: ArrayView2<'_, f64>, targets: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    let gram = design.t().dot(&design);
    let rhs = design.t().dot(&targets);
    let factor = SpdFactor::new(gram.view()).map_err(|_| {
        Error::DegenerateData("design matrix is rank deficient in least squares".into())
    })?;
    factor.solve_mat(rhs.view())
}

/// Classical two-stage least squares with intercepts in both stages.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TslsModel {
    /// (d_z + 1) x d_x coefficients mapping [1, z] to fitted covariates.
    first_stage: Array2<f64>,
    /// (d_x + 1) coefficients on [1, x].
    second_stage: Array1<f64>,
}

impl TslsModel {
    pub fn fit(data: &Dataset) -> Result<Self> {
        let n = data.len();
        let (d_x, d_z) = (data.x().ncols(), data.z().ncols());
        if n <= d_z + 1 || n <= d_x + 1 {
            return Err(Error::InvalidInput(format!(
                "two-stage least squares needs n > d_z + 1 and n > d_x + 1, got n={n}"
            )));
        }
        let z_design = with_intercept(data.z());
        let first_stage = ols(z_design.view(), data.x())?;
        let x_hat = z_design.dot(&first_stage);
        let x_design = with_intercept(x_hat.view());
        let y_col = data.y().insert_axis(ndarray::Axis(1));
        let second = ols(x_design.view(), y_col)?;
        Ok(Self { first_stage, second_stage: second.column(0).to_owned() })
    }

    pub fn intercept(&self) -> f64 {
        self.second_stage[0]
    }

    pub fn slopes(&self) -> ArrayView1<'_, f64> {
        self.second_stage.slice(ndarray::s![1..])
    }

    pub fn first_stage(&self) -> ArrayView2<'_, f64> {
        self.first_stage.view()
    }

    pub fn predict(&self, xs: ArrayView2<'_, f64>) -> Array1<f64> {
        with_intercept(xs).dot(&self.second_stage)
    }
}

impl StructuralModel for TslsModel {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        let mut v = self.second_stage[0];
        for (j, xi) in x.iter().enumerate() {
            v += self.second_stage[j + 1] * xi;
        }
        v
    }
}

/// Two-stage kernel instrumental-variable regression.
///
/// Stage 1 fits the conditional-expectation operator on the first half of
/// the sample; stage 2 solves the embedded ridge system
/// `(W W' + m xi K_xx) a = W y2` with `W = K_xx Gamma` on the second half,
/// where `Gamma` holds the stage-1 weights at the stage-2 instruments. The
/// stage-2 regularizer is chosen by the iterative search, scored on the
/// stage-1 half's observed pairs. Prediction is the kernel expansion
/// `sum_i a_i k_x(x_i, x)` over the stage-1 covariates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KivModel {
    std_x: Standardizer,
    x1_std: Array2<f64>,
    kernel_x: KernelSpec,
    alpha: Array1<f64>,
    stage1_lambda: f64,
    xi: f64,
}

impl KivModel {
    pub fn fit(data: &Dataset, seed: u64) -> Result<Self> {
        Self::fit_with(data, seed, None, None)
    }

    /// Fit with optional fixed regularizers (used by tests and overrides);
    /// `None` selects them by the iterative search.
    pub fn fit_with(
        data: &Dataset,
        seed: u64,
        stage1_lambda: Option<f64>,
        xi: Option<f64>,
    ) -> Result<Self> {
        let n_total = data.len();
        if n_total < 20 {
            return Err(Error::InvalidInput("KIV needs at least 20 rows".into()));
        }
        let half = n_total / 2;
        let stage1 = data.subset(&(0..half).collect::<Vec<_>>());
        let stage2 = data.subset(&(half..n_total).collect::<Vec<_>>());

        let (operator, lambda) = match stage1_lambda {
            Some(l) => (CmeOperatorModel::fit(&stage1, l)?, l),
            None => CmeOperatorModel::fit_selected(&stage1, seed)?,
        };

        let std_x = Standardizer::fit(stage1.x());
        let x1_std = std_x.transform(stage1.x())?;
        let kernel_x = KernelSpec::new(median_heuristic(x1_std.view())?)?;
        let kxx = gram(&kernel_x, x1_std.view(), x1_std.view())?;

        let gamma = operator.weights_matrix(stage2.z())?; // n1 x m
        let w = kxx.dot(&gamma); // n1 x m
        let wwt = w.dot(&w.t()); // n1 x n1
        let wy = w.dot(&stage2.y());
        let m = stage2.len() as f64;

        let solve_alpha = |xi_val: f64| -> Result<Array1<f64>> {
            let n1 = wwt.nrows();
            let mut a = &wwt + &(xi_val * m * &kxx);
            // jitter scaled with the ridge term so rounding noise in the
            // amplified Gram matrix cannot produce a negative pivot
            let jitter = GRAM_JITTER * (1.0 + xi_val * m);
            for i in 0..n1 {
                a[[i, i]] += jitter;
            }
            SpdFactor::new(a.view())?.solve_vec(wy.view())
        };

        let xi = match xi {
            Some(x) => x,
            None => refine_reg_search(
                |xi_val| {
                    let alpha = solve_alpha(xi_val)?;
                    // causal validation on the stage-1 half: predictions at
                    // x1 are K_xx alpha
                    let preds = kxx.dot(&alpha);
                    Ok(preds
                        .iter()
                        .zip(stage1.y().iter())
                        .map(|(&p, &y)| (p - y) * (p - y))
                        .sum::<f64>()
                        / half as f64)
                },
                &DEFAULT_REG_GRID,
                RefineOffset::TenthOfPick,
                3,
            )?,
        };
        let alpha = solve_alpha(xi)?;
        Ok(Self { std_x, x1_std, kernel_x, alpha, stage1_lambda: lambda, xi })
    }

    pub fn stage1_lambda(&self) -> f64 {
        self.stage1_lambda
    }

    pub fn xi(&self) -> f64 {
        self.xi
    }

    pub fn input_dim(&self) -> usize {
        self.x1_std.ncols()
    }

    pub fn predict(&self, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let q = self.std_x.transform(xs)?;
        let kq = gram(&self.kernel_x, q.view(), self.x1_std.view())?;
        Ok(kq.dot(&self.alpha))
    }
}

impl StructuralModel for KivModel {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.predict(x.insert_axis(ndarray::Axis(0))).expect("finite covariate point")[0]
    }
}

/// Kernel ridge of `y` on `x` that ignores the instrument entirely; its
/// confounding bias is the control the instrumented methods are judged
/// against.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct NaiveKrrModel {
    inner: RidgeModel,
}

impl NaiveKrrModel {
    pub fn fit(data: &Dataset, seed: u64) -> Result<Self> {
        if data.len() < 10 {
            return Err(Error::InvalidInput("naive kernel ridge needs at least 10 rows".into()));
        }
        let (inner, _) = fit_ridge_cv(data.x(), data.y(), 2, seed)?;
        Ok(Self { inner })
    }

    pub fn lambda(&self) -> f64 {
        self.inner.lambda()
    }

    pub fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    pub fn predict(&self, xs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        self.inner.predict(xs)
    }
}

impl StructuralModel for NaiveKrrModel {
    fn eval_point(&self, x: ArrayView1<'_, f64>) -> f64 {
        self.inner.predict(x.insert_axis(ndarray::Axis(0))).expect("finite covariate point")[0]
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn linear_sample(n: usize, seed: u64, noisy: bool) -> Dataset {
        let mut r = rng::substream(seed, "baseline-test-dgp");
        let mut x = Array2::zeros((n, 1));
        let mut z = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let z1: f64 = r.gen_range(-3.0..3.0);
            let z2: f64 = r.gen_range(-3.0..3.0);
            let (e, g, d) = if noisy {
                let e: f64 = StandardNormal.sample(&mut r);
                let g = 0.1f64.sqrt() * { let v: f64 = StandardNormal.sample(&mut r); v };
                let d = 0.1f64.sqrt() * { let v: f64 = StandardNormal.sample(&mut r); v };
                (e, g, d)
            } else {
                (0.0, 0.0, 0.0)
            };
            let xv = z1 + e + g;
            z[[i, 0]] = z1;
            z[[i, 1]] = z2;
            x[[i, 0]] = xv;
            y[i] = xv + e + d;
        }
        Dataset::new(x, z, y).unwrap()
    }

    #[test]
    fn tsls_is_exact_on_noiseless_linear_data() {
        let mut r = rng::substream(1, "tsls-exact");
        let n = 200;
        let z: Array2<f64> = Array2::from_shape_fn((n, 1), |_| r.gen_range(-3.0..3.0));
        let x = z.clone();
        let y = Array1::from_shape_fn(n, |i| 2.0 * x[[i, 0]]);
        let data = Dataset::new(x, z, y).unwrap();
        let model = TslsModel::fit(&data).unwrap();
        assert!((model.slopes()[0] - 2.0).abs() < 1e-8);
        assert!(model.intercept().abs() < 1e-8);
    }

    #[test]
    fn tsls_stages_satisfy_residual_orthogonality() {
        let data = linear_sample(500, 2, true);
        let model = TslsModel::fit(&data).unwrap();
        let z_design = with_intercept(data.z());
        let x_hat = z_design.dot(&model.first_stage());
        // first-stage residuals are orthogonal to the instrument design
        let resid = &data.x().to_owned() - &x_hat;
        let cross = z_design.t().dot(&resid);
        for v in cross.iter() {
            assert!(v.abs() / 500.0 < 1e-8, "orthogonality violated: {v}");
        }
    }

    #[test]
    fn tsls_recovers_the_structural_slope_under_confounding() {
        let data = linear_sample(3000, 3, true);
        let model = TslsModel::fit(&data).unwrap();
        let slope = model.slopes()[0];
        assert!((0.85..=1.15).contains(&slope), "slope {slope} far from 1");
        assert!(model.intercept().abs() < 0.15);
    }

    #[test]
    fn tsls_rejects_rank_deficient_instruments() {
        let mut r = rng::substream(4, "tsls-rank");
        let n = 50;
        let z1: Array1<f64> = Array1::from_shape_fn(n, |_| r.gen_range(-1.0..1.0));
        let z = Array2::from_shape_fn((n, 2), |(i, _)| z1[i]); // duplicated column
        let x = Array2::from_shape_fn((n, 1), |(i, _)| z1[i]);
        let y = Array1::zeros(n);
        let data = Dataset::new(x, z, y).unwrap();
        assert!(matches!(TslsModel::fit(&data), Err(Error::DegenerateData(_))));
    }

    #[test]
    fn kiv_shrinks_to_zero_for_huge_regularizers() {
        let data = linear_sample(200, 5, true);
        let model = KivModel::fit_with(&data, 0, Some(1e6), Some(1e6)).unwrap();
        let queries = Array2::from_shape_fn((20, 1), |(i, _)| -3.0 + 0.3 * i as f64);
        let preds = model.predict(queries.view()).unwrap();
        assert!(preds.iter().all(|&p| p.abs() < 1e-3), "predictions should shrink to zero");
    }

    #[test]
    fn kiv_is_deterministic() {
        let data = linear_sample(200, 6, true);
        let a = KivModel::fit(&data, 9).unwrap();
        let b = KivModel::fit(&data, 9).unwrap();
        assert_eq!(a.alpha.to_vec(), b.alpha.to_vec());
        assert_eq!(a.xi(), b.xi());
    }

    #[test]
    fn kiv_tracks_the_linear_structural_function() {
        let data = linear_sample(600, 7, true);
        let model = KivModel::fit(&data, 0).unwrap();
        let queries = Array2::from_shape_fn((30, 1), |(i, _)| -2.0 + 4.0 * i as f64 / 29.0);
        let preds = model.predict(queries.view()).unwrap();
        let mse = queries
            .column(0)
            .iter()
            .zip(preds.iter())
            .map(|(&x, &p)| (x - p) * (x - p))
            .sum::<f64>()
            / 30.0;
        assert!(mse < 0.35, "KIV mse {mse} too large on the linear design");
    }

    #[test]
    fn naive_krr_is_nearly_oracle_without_confounding() {
        // x independent of the noise: plain regression is consistent
        let mut r = rng::substream(8, "naive-clean");
        let n = 500;
        let x: Array2<f64> = Array2::from_shape_fn((n, 1), |_| r.gen_range(-3.0..3.0));
        let z = x.clone();
        let y = Array1::from_shape_fn(n, |i| {
            let noise: f64 = StandardNormal.sample(&mut r);
            x[[i, 0]] + 0.1 * noise
        });
        let data = Dataset::new(x, z, y).unwrap();
        let model = NaiveKrrModel::fit(&data, 3).unwrap();
        let queries = Array2::from_shape_fn((30, 1), |(i, _)| -2.0 + 4.0 * i as f64 / 29.0);
        let preds = model.predict(queries.view()).unwrap();
        let mse = queries
            .column(0)
            .iter()
            .zip(preds.iter())
            .map(|(&x, &p)| (x - p) * (x - p))
            .sum::<f64>()
            / 30.0;
        assert!(mse < 0.05, "unconfounded naive mse {mse} should be near zero");
    }

    #[test]
    fn naive_krr_inherits_confounding_bias() {
        let data = linear_sample(800, 9, true);
        let model = NaiveKrrModel::fit(&data, 3).unwrap();
        // evaluate on fresh draws from the covariate marginal, where the
        // conditional noise mean is far from zero in the tails
        let test = linear_sample(500, 99, true);
        let preds = model.predict(test.x()).unwrap();
        let mse = test
            .x()
            .column(0)
            .iter()
            .zip(preds.iter())
            .map(|(&x, &p)| (x - p) * (x - p))
            .sum::<f64>()
            / 500.0;
        assert!(mse > 0.05, "confounded naive mse {mse} should be visibly biased");
    }

    #[test]
    fn tsls_eval_point_matches_predict() {
        let data = linear_sample(100, 10, true);
        let model = TslsModel::fit(&data).unwrap();
        let x = array![0.7];
        let batch = model.predict(x.view().insert_axis(ndarray::Axis(0)));
        assert!((model.eval_point(x.view()) - batch[0]).abs() < 1e-14);
    }
}
