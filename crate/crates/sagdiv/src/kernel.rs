//! Gaussian-kernel machinery: Gram matrices, median-heuristic lengthscales,
//! closed-form kernel ridge regression, deterministic cross-validation, and
//! the iterative regularization-parameter search used throughout the crate.
//!
//! Inputs are standardized (per-column mean zero, unit variance) before any
//! kernel evaluation; the statistics are stored on the fitted model so that
//! predictions see the same coordinates. The median heuristic is computed on
//! the standardized inputs.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::SpdFactor;
use crate::rng;

/// Jitter added to Gram diagonals before factorization.
pub const GRAM_JITTER: f64 = 1e-10;

/// Gaussian kernel `k(u, v) = exp(-||u - v||^2 / (2 * lengthscale^2))`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    lengthscale: f64,
}

impl KernelSpec {
    pub fn new(lengthscale: f64) -> Result<Self> {
        if !(lengthscale > 0.0 && lengthscale.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "lengthscale must be positive and finite, got {lengthscale}"
            )));
        }
        Ok(Self { lengthscale })
    }

    pub fn lengthscale(&self) -> f64 {
        self.lengthscale
    }

    pub fn eval(&self, u: ArrayView1<'_, f64>, v: ArrayView1<'_, f64>) -> f64 {
        let mut sq = 0.0;
        for (a, b) in u.iter().zip(v.iter()) {
            let d = a - b;
            sq += d * d;
        }
        (-sq / (2.0 * self.lengthscale * self.lengthscale)).exp()
    }
}

/// Per-column standardization statistics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Standardizer {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl Standardizer {
    pub fn fit(data: ArrayView2<'_, f64>) -> Self {
        let n = data.nrows() as f64;
        let mean: Vec<f64> = data.mean_axis(Axis(0)).unwrap().to_vec();
        let std: Vec<f64> = (0..data.ncols())
            .map(|j| {
                let var = data.column(j).iter().map(|v| (v - mean[j]).powi(2)).sum::<f64>() / n;
                let s = var.sqrt();
                if s > 0.0 { s } else { 1.0 } // constant columns pass through unscaled
            })
            .collect();
        Self { mean, std }
    }

    pub fn transform(&self, data: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        if data.ncols() != self.mean.len() {
            return Err(Error::InvalidInput(format!(
                "expected {} columns, got {}",
                self.mean.len(),
                data.ncols()
            )));
        }
        Ok(Array2::from_shape_fn((data.nrows(), data.ncols()), |(i, j)| {
            (data[[i, j]] - self.mean[j]) / self.std[j]
        }))
    }
}

/// Median of pairwise Euclidean distances.
///
/// For more than 2000 rows a fixed-seed subsample of 2000 rows is used.
/// Fails if all points coincide.
pub fn median_heuristic(points: ArrayView2<'_, f64>) -> Result<f64> {
    let n = points.nrows();
    if n < 2 {
        return Err(Error::InvalidInput("median heuristic needs at least 2 rows".into()));
    }
    let cap = 2000;
    let rows: Vec<usize> = if n > cap {
        let mut r = rng::substream(0, "median-heuristic-subsample");
        let mut idx = sample(&mut r, n, cap).into_vec();
        idx.sort_unstable();
        idx
    } else {
        (0..n).collect()
    };
    let m = rows.len();
    let mut dists = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in (i + 1)..m {
            let mut sq = 0.0;
            for c in 0..points.ncols() {
                let d = points[[rows[i], c]] - points[[rows[j], c]];
                sq += d * d;
            }
            dists.push(sq.sqrt());
        }
    }
    dists.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_of = |d: &[f64]| {
        let k = d.len();
        if k % 2 == 1 { d[k / 2] } else { 0.5 * (d[k / 2 - 1] + d[k / 2]) }
    };
    let mut median = median_of(&dists);
    if median <= 0.0 {
        // heavily tied data (e.g. discrete inputs): fall back to the median
        // of the strictly positive distances so the result stays positive
        let first_positive = dists.partition_point(|&d| d <= 0.0);
        if first_positive == dists.len() {
            return Err(Error::DegenerateData("all points identical; median distance is zero".into()));
        }
        median = median_of(&dists[first_positive..]);
    }
    Ok(median)
}

/// Gram matrix between the rows of `a` and the rows of `b`.
pub fn gram(spec: &KernelSpec, a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
    if a.ncols() != b.ncols() {
        return Err(Error::InvalidInput(format!(
            "column mismatch: {} vs {}",
            a.ncols(),
            b.ncols()
        )));
    }
    Ok(Array2::from_shape_fn((a.nrows(), b.nrows()), |(i, j)| spec.eval(a.row(i), b.row(j))))
}

/// Dual coefficients of kernel ridge regression: solves `(K + m*lambda*I) c = y`
/// with a small diagonal jitter.
pub fn fit_ridge_gram(k: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, lambda: f64) -> Result<Array1<f64>> {
    let m = k.nrows();
    if k.ncols() != m || y.len() != m {
        return Err(Error::InvalidInput("Gram matrix and targets must agree".into()));
    }
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::InvalidInput(format!("ridge lambda must be positive, got {lambda}")));
    }
    let mut a = k.to_owned();
    let ridge = m as f64 * lambda + GRAM_JITTER;
    for i in 0..m {
        a[[i, i]] += ridge;
    }
    SpdFactor::new(a.view())?.solve_vec(y)
}

/// Fitted kernel ridge regression from standardized inputs to targets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RidgeModel {
    standardizer: Standardizer,
    inputs_std: Array2<f64>,
    coeffs: Array1<f64>,
    kernel: KernelSpec,
    lambda: f64,
}

impl RidgeModel {
    /// Fit with a median-heuristic lengthscale.
    pub fn fit(inputs: ArrayView2<'_, f64>, y: ArrayView1<'_, f64>, lambda: f64) -> Result<Self> {
        let standardizer = Standardizer::fit(inputs);
        let inputs_std = standardizer.transform(inputs)?;
        let kernel = KernelSpec::new(median_heuristic(inputs_std.view())?)?;
        Self::fit_standardized(standardizer, inputs_std, y, kernel, lambda)
    }

    /// Fit with an explicit kernel spec (lengthscale in standardized coordinates).
    pub fn fit_with_kernel(
        inputs: ArrayView2<'_, f64>,
        y: ArrayView1<'_, f64>,
        kernel: KernelSpec,
        lambda: f64,
    ) -> Result<Self> {
        let standardizer = Standardizer::fit(inputs);
        let inputs_std = standardizer.transform(inputs)?;
        Self::fit_standardized(standardizer, inputs_std, y, kernel, lambda)
    }

    fn fit_standardized(
        standardizer: Standardizer,
        inputs_std: Array2<f64>,
        y: ArrayView1<'_, f64>,
        kernel: KernelSpec,
        lambda: f64,
    ) -> Result<Self> {
        let k = gram(&kernel, inputs_std.view(), inputs_std.view())?;
        let coeffs = fit_ridge_gram(k.view(), y, lambda)?;
        Ok(Self { standardizer, inputs_std, coeffs, kernel, lambda })
    }

    pub fn predict(&self, queries: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        let q = self.standardizer.transform(queries)?;
        let kq = gram(&self.kernel, q.view(), self.inputs_std.view())?;
        Ok(kq.dot(&self.coeffs))
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn kernel(&self) -> &KernelSpec {
        &self.kernel
    }

    pub fn coeffs(&self) -> ArrayView1<'_, f64> {
        self.coeffs.view()
    }

    pub fn n_train(&self) -> usize {
        self.inputs_std.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs_std.ncols()
    }
}

/// Deterministic fold assignment for cross-validation.
#[derive(Debug, Clone)]
pub struct FoldPlan {
    folds: Vec<Vec<usize>>,
}

impl FoldPlan {
    pub fn new(n: usize, k: usize, seed: u64) -> Result<Self> {
        if k < 2 || n < k {
            return Err(Error::InvalidInput(format!("need at least 2 folds and n >= k, got n={n}, k={k}")));
        }
        let mut r = rng::substream(seed, "cv-folds");
        let order = sample(&mut r, n, n).into_vec();
        let mut folds = vec![Vec::new(); k];
        for (pos, row) in order.into_iter().enumerate() {
            folds[pos % k].push(row);
        }
        Ok(Self { folds })
    }

    pub fn n_folds(&self) -> usize {
        self.folds.len()
    }

    /// (train rows, held-out rows) for fold `f`.
    pub fn split(&self, f: usize) -> (Vec<usize>, Vec<usize>) {
        let test = self.folds[f].clone();
        let train: Vec<usize> =
            self.folds.iter().enumerate().filter(|(i, _)| *i != f).flat_map(|(_, v)| v.iter().copied()).collect();
        (train, test)
    }
}

/// Pick the candidate with the smallest mean held-out score.
///
/// `score` receives `(candidate, train rows, held-out rows)` and returns the
/// held-out squared error for that fold. Ties break to the lowest index.
pub fn cross_validate<F>(plan: &FoldPlan, candidates: &[f64], mut score: F) -> Result<f64>
where
    F: FnMut(f64, &[usize], &[usize]) -> Result<f64>,
{
    if candidates.is_empty() {
        return Err(Error::InvalidInput("cross-validation needs at least one candidate".into()));
    }
    let mut best: Option<(f64, f64)> = None;
    for &cand in candidates {
        let mut total = 0.0;
        for f in 0..plan.n_folds() {
            let (train, test) = plan.split(f);
            total += score(cand, &train, &test)?;
        }
        let mean = total / plan.n_folds() as f64;
        if best.map_or(true, |(_, b)| mean < b) {
            best = Some((cand, mean));
        }
    }
    Ok(best.unwrap().0)
}

/// How the first refinement offset is chosen in [`refine_reg_search`].
#[derive(Debug, Clone, Copy)]
pub enum RefineOffset {
    Fixed(f64),
    /// One tenth of the first selected candidate.
    TenthOfPick,
}

/// Iterative regularization-parameter search.
///
/// Each round selects the argmin of `objective` over the current candidate
/// list (ties to the lowest index, non-finite objectives skipped), rebuilds
/// the candidates as `best + k * eps` for `k` in `-5..=5` dropping
/// non-positive values, and divides `eps` by 10. After `iterations` rounds
/// the last selected value is returned.
pub fn refine_reg_search<F>(
    mut objective: F,
    initial: &[f64],
    offset: RefineOffset,
    iterations: usize,
) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    if iterations == 0 {
        return Err(Error::InvalidInput("search needs at least one iteration".into()));
    }
    if initial.is_empty() || initial.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
        return Err(Error::InvalidInput("initial candidates must be positive and finite".into()));
    }
    if let RefineOffset::Fixed(e) = offset {
        if !(e > 0.0 && e.is_finite()) {
            return Err(Error::InvalidInput(format!("offset must be positive, got {e}")));
        }
    }

    let mut candidates: Vec<f64> = initial.to_vec();
    let mut best = f64::NAN;
    let mut eps = match offset {
        RefineOffset::Fixed(e) => e,
        RefineOffset::TenthOfPick => f64::NAN, // set after the first selection
    };
    for round in 0..iterations {
        let mut selected: Option<(f64, f64)> = None;
        for &cand in candidates.iter().filter(|&&c| c > 0.0) {
            let value = objective(cand)?;
            if !value.is_finite() {
                continue;
            }
            if selected.map_or(true, |(_, v)| value < v) {
                selected = Some((cand, value));
            }
        }
        best = selected
            .ok_or_else(|| {
                Error::SearchFailure(format!("no candidate had a finite objective in round {}", round + 1))
            })?
            .0;
        if eps.is_nan() {
            eps = best / 10.0;
        }
        candidates = (-5..=5).map(|k| best + k as f64 * eps).collect();
        eps /= 10.0;
    }
    Ok(best)
}

/// Default grid for the iterative search when nothing better is known.
pub const DEFAULT_REG_GRID: [f64; 4] = [1e-1, 1e-3, 1e-5, 1e-7];

/// Run [`refine_reg_search`] with the default grid, the pick-relative offset,
/// and three rounds.
pub fn default_reg_search<F>(objective: F) -> Result<f64>
where
    F: FnMut(f64) -> Result<f64>,
{
    refine_reg_search(objective, &DEFAULT_REG_GRID, RefineOffset::TenthOfPick, 3)
}

/// Kernel ridge with lambda chosen by the iterative search over a k-fold
/// cross-validation objective, refit on all rows with the winner.
pub fn fit_ridge_cv(
    inputs: ArrayView2<'_, f64>,
    targets: ArrayView1<'_, f64>,
    folds: usize,
    seed: u64,
) -> Result<(RidgeModel, f64)> {
    let n = inputs.nrows();
    if n < 10 {
        return Err(Error::InvalidInput("cross-validated ridge needs at least 10 rows".into()));
    }
    let plan = FoldPlan::new(n, folds, seed)?;
    let take = |rows: &[usize]| -> (Array2<f64>, Array1<f64>) {
        (
            Array2::from_shape_fn((rows.len(), inputs.ncols()), |(i, j)| inputs[[rows[i], j]]),
            Array1::from_shape_fn(rows.len(), |i| targets[rows[i]]),
        )
    };
    let lambda = default_reg_search(|l| {
        let mut total = 0.0;
        for f in 0..plan.n_folds() {
            let (train, test) = plan.split(f);
            let (tr_x, tr_y) = take(&train);
            let (te_x, te_y) = take(&test);
            let model = RidgeModel::fit(tr_x.view(), tr_y.view(), l)?;
            let preds = model.predict(te_x.view())?;
            total += te_y
                .iter()
                .zip(preds.iter())
                .map(|(&t, &p)| (t - p) * (t - p))
                .sum::<f64>()
                / test.len() as f64;
        }
        Ok(total / plan.n_folds() as f64)
    })?;
    Ok((RidgeModel::fit(inputs, targets, lambda)?, lambda))
}
