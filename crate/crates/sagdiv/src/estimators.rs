//! The three preliminary estimators consumed by the descent loop:
//!
//! * [`DensityRatioModel`] — the joint-over-marginals density ratio of
//!   `(X, Z)`, fitted by unconstrained least-squares importance fitting
//!   (uLSIF) over a product of Gaussian kernels, with evaluations capped to
//!   keep the ratio uniformly bounded;
//! * [`ConditionalMeanModel`] — the regression of `Y` on `Z`, a kernel ridge
//!   with cross-validated regularization, or a raw-outcome marker for the
//!   ablation that substitutes the observed `y` for the fitted mean;
//! * [`CmeOperatorModel`] — the conditional-expectation operator
//!   `h -> E[h(X) | Z = z]` via kernel mean embeddings, i.e. a ridge system
//!   on the instrument Gram matrix whose solution weights average `h` over
//!   the training covariates.
//!
//! Numerator samples for uLSIF are the observed pairs; denominator samples
//! for the product of marginals are built by re-pairing each covariate row
//! with an instrument row from a fixed-seed permutation without fixed points.
//! All fits are deterministic given (data, seed, config).

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::core::{Dataset, StructuralModel};
use crate::error::{Error, Result};
use crate::kernel::{
    fit_ridge_cv, gram, median_heuristic, refine_reg_search, KernelSpec, RefineOffset, RidgeModel,
    Standardizer, DEFAULT_REG_GRID, GRAM_JITTER,
};
use crate::linalg::SpdFactor;
use crate::rng;

/// Default number of uLSIF basis centers.
pub const DEFAULT_BASIS: usize = 200;

/// Default hard cap on density-ratio evaluations.
pub const DEFAULT_RATIO_CAP: f64 = 25.0;

fn take_rows(data: ArrayView2<'_, f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), data.ncols()), |(i, j)| data[[rows[i], j]])
}

/// Fixed-seed permutation of `0..n` without fixed points.
fn derangement(n: usize, seed: u64) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut r = rng::substream(seed, "ulsif-derangement");
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut r);
    // repair fixed points by swapping with the cyclic neighbour
    for i in 0..n {
        if perm[i] == i {
            let j = (i + 1) % n;
            perm.swap(i, j);
        }
    }
    perm
}

/// uLSIF density-ratio model over a product kernel on the x- and z-blocks.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DensityRatioModel {
    std_x: Standardizer,
    std_z: Standardizer,
    centers_x: Array2<f64>, // standardized coordinates
    centers_z: Array2<f64>,
    kernel_x: KernelSpec,
    kernel_z: KernelSpec,
    weights: Array1<f64>, // nonnegative
    cap: f64,
}

/// Product-kernel design matrix: row i holds `k_x(x_i, c_j) * k_z(z_i, c_j)`
/// over centers j.
fn product_features(
    kernel_x: &KernelSpec,
    kernel_z: &KernelSpec,
    x_std: ArrayView2<'_, f64>,
    z_std: ArrayView2<'_, f64>,
    centers_x: ArrayView2<'_, f64>,
    centers_z: ArrayView2<'_, f64>,
) -> Result<Array2<f64>> {
    let kx = gram(kernel_x, x_std, centers_x)?;
    let kz = gram(kernel_z, z_std, centers_z)?;
    Ok(&kx * &kz)
}

/// Solve the uLSIF normal equations `(H + lambda I) w = h` and clamp the
/// weights at zero.
fn ulsif_weights(h_mat: &Array2<f64>, h_vec: &Array1<f64>, lambda: f64) -> Result<Array1<f64>> {
    let b = h_vec.len();
    let mut a = h_mat.clone();
    for i in 0..b {
        a[[i, i]] += lambda + GRAM_JITTER;
    }
    let raw = SpdFactor::new(a.view())?.solve_vec(h_vec.view())?;
    Ok(raw.mapv(|w| w.max(0.0)))
}

impl DensityRatioModel {
    /// Fit with an explicit ridge parameter.
    ///
    /// Numerator samples are the observed pairs; denominator samples pair
    /// `x_i` with `z_{perm(i)}` for a fixed-seed permutation without fixed
    /// points. Basis centers are `basis` numerator pairs chosen by
    /// fixed-seed subsampling.
    pub fn fit(data: &Dataset, lambda: f64, basis: usize, cap: f64, seed: u64) -> Result<Self> {
        let n = data.len();
        if basis == 0 || basis > n {
            return Err(Error::InvalidInput(format!(
                "basis size must satisfy 1 <= b <= n, got b={basis}, n={n}"
            )));
        }
        if n < 2 {
            return Err(Error::InvalidInput("density-ratio fit needs at least 2 rows".into()));
        }
        if !(cap > 0.0 && cap.is_finite()) {
            return Err(Error::InvalidInput(format!("ratio cap must be positive, got {cap}")));
        }
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }

        let parts = UlsifParts::prepare(data, basis, seed)?;
        let weights = ulsif_weights(&parts.h_mat, &parts.h_vec, lambda)?;
        Ok(Self {
            std_x: parts.std_x,
            std_z: parts.std_z,
            centers_x: parts.centers_x,
            centers_z: parts.centers_z,
            kernel_x: parts.kernel_x,
            kernel_z: parts.kernel_z,
            weights,
            cap,
        })
    }

    /// Fit with the ridge parameter selected by the iterative search on a
    /// held-out uLSIF objective (fixed-seed 80/20 split of the samples).
    pub fn fit_selected(data: &Dataset, basis: usize, cap: f64, seed: u64) -> Result<(Self, f64)> {
        let n = data.len();
        if n < 10 {
            return Err(Error::InvalidInput("lambda selection needs at least 10 rows".into()));
        }
        let basis = basis.min(n * 4 / 5);
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut r = rng::substream(seed, "ulsif-val-split");
            order.shuffle(&mut r);
        }
        let n_train = (n * 4) / 5;
        let train = data.subset(&order[..n_train]);
        let val_rows = &order[n_train..];
        let parts = UlsifParts::prepare(&train, basis, seed)?;

        // validation-side design matrices in the training model's coordinates
        let vx = parts.std_x.transform(take_rows(data.x(), val_rows).view())?;
        let vz = parts.std_z.transform(take_rows(data.z(), val_rows).view())?;
        let perm = derangement(val_rows.len(), seed.wrapping_add(1));
        let vz_shuffled = take_rows(vz.view(), &perm);
        let phi_nu = product_features(
            &parts.kernel_x,
            &parts.kernel_z,
            vx.view(),
            vz.view(),
            parts.centers_x.view(),
            parts.centers_z.view(),
        )?;
        let phi_de = product_features(
            &parts.kernel_x,
            &parts.kernel_z,
            vx.view(),
            vz_shuffled.view(),
            parts.centers_x.view(),
            parts.centers_z.view(),
        )?;
        let m = val_rows.len() as f64;
        let h_mat_val = phi_de.t().dot(&phi_de) / m;
        let h_vec_val = phi_nu.t().dot(&Array1::from_elem(val_rows.len(), 1.0 / m));

        let lambda = refine_reg_search(
            |l| {
                let w = ulsif_weights(&parts.h_mat, &parts.h_vec, l)?;
                // held-out estimate of 1/2 * int ratio^2 dPxPz - int ratio dPxz
                Ok(0.5 * w.dot(&h_mat_val.dot(&w)) - w.dot(&h_vec_val))
            },
            &DEFAULT_REG_GRID,
            RefineOffset::TenthOfPick,
            3,
        )?;
        let model = Self::fit(data, lambda, basis.min(n), cap, seed)?;
        Ok((model, lambda))
    }

    pub fn cap(&self) -> f64 {
        self.cap
    }

    pub fn basis_size(&self) -> usize {
        self.weights.len()
    }

    pub fn weights(&self) -> ArrayView1<'_, f64> {
        self.weights.view()
    }

    #[cfg(test)]
    pub(crate) fn set_weights(&mut self, weights: Array1<f64>) {
        assert_eq!(weights.len(), self.weights.len());
        self.weights = weights;
    }

    /// Kernel features of a covariate point against the x-side centers.
    pub fn x_features(&self, x: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let xs = self.std_x.transform(x.insert_axis(ndarray::Axis(0)))?;
        Ok(Array1::from_shape_fn(self.centers_x.nrows(), |j| {
            self.kernel_x.eval(xs.row(0), self.centers_x.row(j))
        }))
    }

    /// Kernel features of many covariate points (rows) against the x-side centers.
    pub fn x_features_batch(&self, xs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let std = self.std_x.transform(xs)?;
        gram(&self.kernel_x, std.view(), self.centers_x.view())
    }

    /// Weighted kernel features of an instrument point: `w_j * k_z(z, c_j)`.
    pub fn z_features_weighted(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        let zs = self.std_z.transform(z.insert_axis(ndarray::Axis(0)))?;
        Ok(Array1::from_shape_fn(self.centers_z.nrows(), |j| {
            self.weights[j] * self.kernel_z.eval(zs.row(0), self.centers_z.row(j))
        }))
    }

    /// Combine precomputed features into a capped ratio value.
    ///
    /// Single arithmetic path for every ratio evaluation in the crate, so
    /// the descent loop and the replay of a fitted model agree bitwise.
    pub fn combine(&self, x_feat: ArrayView1<'_, f64>, z_feat_weighted: ArrayView1<'_, f64>) -> f64 {
        let mut acc = 0.0;
        for (a, b) in x_feat.iter().zip(z_feat_weighted.iter()) {
            acc += a * b;
        }
        acc.clamp(0.0, self.cap)
    }

    /// Capped ratio evaluation at a single `(x, z)` pair.
    pub fn eval(&self, x: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<f64> {
        if x.iter().chain(z.iter()).any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("ratio evaluation needs finite inputs".into()));
        }
        let xf = self.x_features(x)?;
        let zf = self.z_features_weighted(z)?;
        Ok(self.combine(xf.view(), zf.view()))
    }
}

/// Intermediate uLSIF design quantities shared by the plain and
/// lambda-selecting fits.
struct UlsifParts {
    std_x: Standardizer,
    std_z: Standardizer,
    centers_x: Array2<f64>,
    centers_z: Array2<f64>,
    kernel_x: KernelSpec,
    kernel_z: KernelSpec,
    h_mat: Array2<f64>,
    h_vec: Array1<f64>,
}

impl UlsifParts {
    fn prepare(data: &Dataset, basis: usize, seed: u64) -> Result<Self> {
        let n = data.len();
        let std_x = Standardizer::fit(data.x());
        let std_z = Standardizer::fit(data.z());
        let x_std = std_x.transform(data.x())?;
        let z_std = std_z.transform(data.z())?;

        let kernel_x = KernelSpec::new(median_heuristic(x_std.view())?)?;
        let kernel_z = KernelSpec::new(median_heuristic(z_std.view())?)?;

        let center_rows: Vec<usize> = if basis == n {
            (0..n).collect()
        } else {
            let mut r = rng::substream(seed, "ulsif-centers");
            let mut idx = rand::seq::index::sample(&mut r, n, basis).into_vec();
            idx.sort_unstable();
            idx
        };
        let centers_x = take_rows(x_std.view(), &center_rows);
        let centers_z = take_rows(z_std.view(), &center_rows);

        let perm = derangement(n, seed);
        let z_shuffled = take_rows(z_std.view(), &perm);

        let phi_nu = product_features(
            &kernel_x,
            &kernel_z,
            x_std.view(),
            z_std.view(),
            centers_x.view(),
            centers_z.view(),
        )?;
        let phi_de = product_features(
            &kernel_x,
            &kernel_z,
            x_std.view(),
            z_shuffled.view(),
            centers_x.view(),
            centers_z.view(),
        )?;
        let nf = n as f64;
        let h_mat = phi_de.t().dot(&phi_de) / nf;
        let h_vec = phi_nu.t().dot(&Array1::from_elem(n, 1.0 / nf));
        Ok(Self { std_x, std_z, centers_x, centers_z, kernel_x, kernel_z, h_mat, h_vec })
    }
}

/// The conditional mean of `Y` given `Z`: a fitted kernel ridge, or the
/// raw-outcome marker for the ablation that uses `y_m` directly.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub enum ConditionalMeanModel {
    Kernel(RidgeModel),
    RawY,
}

impl ConditionalMeanModel {
    /// Kernel ridge of `y` on `z` with lambda chosen by the iterative search
    /// over a 2-fold cross-validation objective.
    pub fn fit(data: &Dataset, seed: u64) -> Result<(Self, f64)> {
        let (model, lambda) = fit_ridge_cv(data.z(), data.y(), 2, seed)?;
        Ok((ConditionalMeanModel::Kernel(model), lambda))
    }

    /// The ablation marker; no fitting happens.
    pub fn raw_y() -> Self {
        ConditionalMeanModel::RawY
    }

    pub fn is_raw(&self) -> bool {
        matches!(self, ConditionalMeanModel::RawY)
    }

    /// Predicted conditional mean at instrument points. Fails for the raw-Y
    /// marker, which is only meaningful inside the descent loop where a
    /// paired outcome exists.
    pub fn predict(&self, zs: ArrayView2<'_, f64>) -> Result<Array1<f64>> {
        match self {
            ConditionalMeanModel::Kernel(model) => model.predict(zs),
            ConditionalMeanModel::RawY => Err(Error::InvalidInput(
                "raw-Y conditional mean has no standalone predictions".into(),
            )),
        }
    }
}

/// Conditional-expectation operator `h -> E[h(X) | Z = z]` represented by
/// ridge weights over the training covariates:
/// `gamma(z) = (K_zz + n lambda I)^{-1} k_z(z)` and
/// `E[h](z) ~= sum_i gamma_i(z) h(x_i)`.
pub struct CmeOperatorModel {
    x_train: Array2<f64>,
    z_train_std: Array2<f64>,
    std_z: Standardizer,
    kernel_z: KernelSpec,
    lambda: f64,
    factor: SpdFactor,
}

impl CmeOperatorModel {
    /// Fit with an explicit ridge parameter.
    pub fn fit(data: &Dataset, lambda: f64) -> Result<Self> {
        if !(lambda > 0.0 && lambda.is_finite()) {
            return Err(Error::InvalidInput(format!("lambda must be positive, got {lambda}")));
        }
        let n = data.len();
        let std_z = Standardizer::fit(data.z());
        let z_train_std = std_z.transform(data.z())?;
        let kernel_z = KernelSpec::new(median_heuristic(z_train_std.view())?)?;
        let mut k = gram(&kernel_z, z_train_std.view(), z_train_std.view())?;
        let ridge = n as f64 * lambda + GRAM_JITTER;
        for i in 0..n {
            k[[i, i]] += ridge;
        }
        let factor = SpdFactor::new(k.view())?;
        Ok(Self { x_train: data.x().to_owned(), z_train_std, std_z, kernel_z, lambda, factor })
    }

    /// Fit with lambda selected by the iterative search on the held-out
    /// embedding loss of the first-stage regression, computed on a
    /// fixed-seed 80/20 split, then refit on all rows.
    pub fn fit_selected(data: &Dataset, seed: u64) -> Result<(Self, f64)> {
        let n = data.len();
        if n < 10 {
            return Err(Error::InvalidInput("operator fit needs at least 10 rows".into()));
        }
        let mut order: Vec<usize> = (0..n).collect();
        {
            use rand::seq::SliceRandom;
            let mut r = rng::substream(seed, "cme-val-split");
            order.shuffle(&mut r);
        }
        let n_train = (n * 4) / 5;
        let (train_rows, val_rows) = order.split_at(n_train);
        let train = data.subset(train_rows);
        let val = data.subset(val_rows);

        let lambda = refine_reg_search(
            |l| {
                let model = Self::fit(&train, l)?;
                model.embedding_loss(&val)
            },
            &DEFAULT_REG_GRID,
            RefineOffset::TenthOfPick,
            3,
        )?;
        Ok((Self::fit(data, lambda)?, lambda))
    }

    /// Held-out first-stage loss: the squared embedding error
    /// `k_x(x, x) - 2 gamma(z)' k_x(X, x) + gamma(z)' K_xx gamma(z)`
    /// averaged over held-out pairs, with the x-side kernel fixed by the
    /// median heuristic on the training covariates.
    pub fn embedding_loss(&self, held_out: &Dataset) -> Result<f64> {
        let std_x = Standardizer::fit(self.x_train.view());
        let x_std = std_x.transform(self.x_train.view())?;
        let kernel_x = KernelSpec::new(median_heuristic(x_std.view())?)?;
        let kxx = gram(&kernel_x, x_std.view(), x_std.view())?;
        let vx = std_x.transform(held_out.x())?;
        let gammas = self.weights_matrix(held_out.z())?; // n x m
        let kx_val = gram(&kernel_x, x_std.view(), vx.view())?; // n x m
        let mut total = 0.0;
        for j in 0..held_out.len() {
            let g = gammas.column(j);
            let cross = g.dot(&kx_val.column(j));
            let quad = g.dot(&kxx.dot(&g));
            total += 1.0 - 2.0 * cross + quad; // k_x(x, x) = 1 for the Gaussian kernel
        }
        Ok(total / held_out.len() as f64)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn n_train(&self) -> usize {
        self.x_train.nrows()
    }

    /// Training covariates whose function values the operator averages.
    pub fn x_train(&self) -> ArrayView2<'_, f64> {
        self.x_train.view()
    }

    /// Ridge weights `gamma(z)` for one instrument point.
    pub fn weights(&self, z: ArrayView1<'_, f64>) -> Result<Array1<f64>> {
        if z.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("operator weights need finite inputs".into()));
        }
        let zs = self.std_z.transform(z.insert_axis(ndarray::Axis(0)))?;
        let kvec = Array1::from_shape_fn(self.z_train_std.nrows(), |i| {
            self.kernel_z.eval(zs.row(0), self.z_train_std.row(i))
        });
        self.factor.solve_vec(kvec.view())
    }

    /// Ridge weights for a batch of instrument points, one column per point.
    pub fn weights_matrix(&self, zs: ArrayView2<'_, f64>) -> Result<Array2<f64>> {
        let z_std = self.std_z.transform(zs)?;
        let kmat = gram(&self.kernel_z, self.z_train_std.view(), z_std.view())?;
        self.factor.solve_mat(kmat.view())
    }

    /// Apply the operator to function values at the training covariates.
    pub fn apply(&self, values: ArrayView1<'_, f64>, z: ArrayView1<'_, f64>) -> Result<f64> {
        if values.len() != self.n_train() {
            return Err(Error::InvalidInput(format!(
                "value vector length {} does not match {} training covariates",
                values.len(),
                self.n_train()
            )));
        }
        Ok(self.weights(z)?.dot(&values))
    }

    /// Apply the operator to a structural model by evaluating it at the
    /// training covariates first.
    pub fn apply_model(&self, h: &dyn StructuralModel, z: ArrayView1<'_, f64>) -> Result<f64> {
        let values = h.eval(self.x_train.view());
        self.apply(values.view(), z)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::Rng;
    use rand_distr::{Distribution, StandardNormal};

    /// Small linear-design sample: z ~ U(-3,3)^2, confounder e ~ N(0,1),
    /// x = z1 + e + g, y = x + e + d.
    fn linear_sample(n: usize, seed: u64) -> Dataset {
        let mut r = rng::substream(seed, "estimator-test-dgp");
        let mut x = Array2::zeros((n, 1));
        let mut z = Array2::zeros((n, 2));
        let mut y = Array1::zeros(n);
        for i in 0..n {
            let z1: f64 = r.gen_range(-3.0..3.0);
            let z2: f64 = r.gen_range(-3.0..3.0);
            let e: f64 = StandardNormal.sample(&mut r);
            let g = 0.1f64.sqrt() * { let v: f64 = StandardNormal.sample(&mut r); v };
            let d = 0.1f64.sqrt() * { let v: f64 = StandardNormal.sample(&mut r); v };
            let xv = z1 + e + g;
            z[[i, 0]] = z1;
            z[[i, 1]] = z2;
            x[[i, 0]] = xv;
            y[i] = xv + e + d;
        }
        Dataset::new(x, z, y).unwrap()
    }

    fn independent_sample(n: usize, seed: u64) -> Dataset {
        let mut r = rng::substream(seed, "independent-dgp");
        let x = Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut r));
        let z = Array2::from_shape_fn((n, 1), |_| StandardNormal.sample(&mut r));
        let y = Array1::zeros(n);
        Dataset::new(x, z, y).unwrap()
    }

    #[test]
    fn derangement_has_no_fixed_points() {
        for n in [2usize, 3, 10, 101] {
            let p = derangement(n, 5);
            let mut sorted = p.clone();
            sorted.sort_unstable();
            assert_eq!(sorted, (0..n).collect::<Vec<_>>());
            assert!(p.iter().enumerate().all(|(i, &j)| i != j), "fixed point at n={n}");
        }
    }

    #[test]
    fn ulsif_recovers_unit_ratio_under_independence() {
        let data = independent_sample(2000, 1);
        let (model, _) = DensityRatioModel::fit_selected(&data, 200, 25.0, 7).unwrap();
        // held-out product-of-marginals samples
        let held = independent_sample(500, 2);
        let mut mean = 0.0;
        for i in 0..held.len() {
            mean += model.eval(held.x().row(i), held.z().row(i)).unwrap();
        }
        mean /= held.len() as f64;
        assert!((0.85..=1.15).contains(&mean), "mean ratio {mean} outside [0.85, 1.15]");
    }

    #[test]
    fn ulsif_separates_matched_pairs_under_perfect_dependence() {
        let mut r = rng::substream(3, "binary-dep");
        let n = 400;
        let x = Array2::from_shape_fn((n, 1), |_| if r.r#gen::<bool>() { 1.0 } else { 0.0 });
        let z = x.clone();
        let data = Dataset::new(x, z, Array1::zeros(n)).unwrap();
        let model = DensityRatioModel::fit(&data, 1e-3, 100, 25.0, 7).unwrap();
        // true ratio is 2 on matched pairs, 0 on mismatched pairs
        for (xv, zv) in [(0.0, 0.0), (1.0, 1.0)] {
            let matched = model.eval(array![xv].view(), array![zv].view()).unwrap();
            let mismatched = model.eval(array![xv].view(), array![1.0 - zv].view()).unwrap();
            assert!(matched > mismatched, "matched {matched} vs mismatched {mismatched}");
        }
    }

    #[test]
    fn ratio_evaluations_respect_the_cap() {
        let data = linear_sample(300, 4);
        let cap = 1.2;
        let model = DensityRatioModel::fit(&data, 1e-6, 150, cap, 7).unwrap();
        let mut r = rng::substream(5, "cap-queries");
        for _ in 0..200 {
            let x = array![r.gen_range(-4.0..4.0)];
            let z = array![r.gen_range(-3.0..3.0), r.gen_range(-3.0..3.0)];
            let v = model.eval(x.view(), z.view()).unwrap();
            assert!((0.0..=cap).contains(&v));
        }
    }

    #[test]
    fn ratio_eval_matches_scalar_loop() {
        let data = linear_sample(120, 6);
        let model = DensityRatioModel::fit(&data, 1e-4, 60, 25.0, 7).unwrap();
        let x = array![0.7];
        let z = array![-1.3, 0.4];
        let xf = model.x_features(x.view()).unwrap();
        let zfw = model.z_features_weighted(z.view()).unwrap();
        let mut direct = 0.0;
        for j in 0..model.basis_size() {
            direct += xf[j] * zfw[j];
        }
        let direct = direct.clamp(0.0, model.cap());
        assert!((model.eval(x.view(), z.view()).unwrap() - direct).abs() <= 1e-12);
    }

    #[test]
    fn zero_weights_give_zero_ratio() {
        let data = linear_sample(50, 8);
        let mut model = DensityRatioModel::fit(&data, 1e-3, 20, 25.0, 7).unwrap();
        model.weights = Array1::zeros(model.basis_size());
        assert_eq!(model.eval(array![0.1].view(), array![0.2, 0.3].view()).unwrap(), 0.0);
    }

    #[test]
    fn ulsif_fit_is_deterministic() {
        let data = linear_sample(200, 9);
        let a = DensityRatioModel::fit(&data, 1e-3, 80, 25.0, 7).unwrap();
        let b = DensityRatioModel::fit(&data, 1e-3, 80, 25.0, 7).unwrap();
        assert_eq!(a.weights.to_vec(), b.weights.to_vec());
    }

    #[test]
    fn conditional_mean_recovers_a_constant() {
        let mut r = rng::substream(10, "const-y");
        let n = 120;
        let z: Array2<f64> = Array2::from_shape_fn((n, 2), |_| r.gen_range(-3.0..3.0));
        let y = Array1::from_elem(n, 2.5);
        let x = Array2::from_elem((n, 1), 1.0);
        let data = Dataset::new(x, z, y).unwrap();
        let (model, _) = ConditionalMeanModel::fit(&data, 3).unwrap();
        let held: Array2<f64> = Array2::from_shape_fn((50, 2), |_| r.gen_range(-2.5..2.5));
        let preds = model.predict(held.view()).unwrap();
        for p in preds.iter() {
            assert!((p - 2.5).abs() < 1e-3, "prediction {p} should be close to 2.5");
        }
    }

    #[test]
    fn raw_y_marker_echoes_without_fitting() {
        let model = ConditionalMeanModel::raw_y();
        assert!(model.is_raw());
        assert!(model.predict(Array2::zeros((2, 2)).view()).is_err());
    }

    #[test]
    fn conditional_mean_tracks_linear_truth() {
        let data = linear_sample(500, 11);
        let (model, _) = ConditionalMeanModel::fit(&data, 3).unwrap();
        let held = linear_sample(300, 12);
        let preds = model.predict(held.z()).unwrap();
        let rmse = (held
            .z()
            .column(0)
            .iter()
            .zip(preds.iter())
            .map(|(&z1, &p)| (z1 - p) * (z1 - p))
            .sum::<f64>()
            / 300.0)
            .sqrt();
        assert!(rmse <= 0.25, "held-out RMSE {rmse} too large");
    }

    #[test]
    fn cme_weights_sum_to_about_one_at_small_lambda() {
        let data = linear_sample(400, 13);
        let model = CmeOperatorModel::fit(&data, 1e-6).unwrap();
        let ones = Array1::from_elem(400, 1.0);
        let mut r = rng::substream(14, "cme-partition");
        for _ in 0..20 {
            let z = array![r.gen_range(-2.0..2.0), r.gen_range(-2.0..2.0)];
            let v = model.apply(ones.view(), z.view()).unwrap();
            assert!((v - 1.0).abs() < 0.1, "sum of weights {v} far from 1");
        }
    }

    #[test]
    fn cme_application_is_linear_in_values() {
        let data = linear_sample(150, 15);
        let model = CmeOperatorModel::fit(&data, 1e-4).unwrap();
        let mut r = rng::substream(16, "cme-linearity");
        let h: Array1<f64> = Array1::from_shape_fn(150, |_| r.gen_range(-1.0..1.0));
        let g: Array1<f64> = Array1::from_shape_fn(150, |_| r.gen_range(-1.0..1.0));
        let z = array![0.3, -0.8];
        let combo = model.apply((2.0 * &h + &g).view(), z.view()).unwrap();
        let parts =
            2.0 * model.apply(h.view(), z.view()).unwrap() + model.apply(g.view(), z.view()).unwrap();
        assert!((combo - parts).abs() <= 1e-10);
    }

    #[test]
    fn cme_apply_matches_dense_solve() {
        let data = linear_sample(80, 17);
        let lambda = 1e-3;
        let model = CmeOperatorModel::fit(&data, lambda).unwrap();
        let z = array![0.5, 0.5];
        // independent path: rebuild the system and solve densely
        let std_z = Standardizer::fit(data.z());
        let z_std = std_z.transform(data.z()).unwrap();
        let kernel = KernelSpec::new(median_heuristic(z_std.view()).unwrap()).unwrap();
        let mut k = gram(&kernel, z_std.view(), z_std.view()).unwrap();
        for i in 0..80 {
            k[[i, i]] += 80.0 * lambda + GRAM_JITTER;
        }
        let q = std_z.transform(z.view().insert_axis(ndarray::Axis(0))).unwrap();
        let kvec = Array1::from_shape_fn(80, |i| kernel.eval(q.row(0), z_std.row(i)));
        let gamma = crate::linalg::spd_solve(k.view(), kvec.view()).unwrap();
        let mut r = rng::substream(18, "cme-values");
        let values: Array1<f64> = Array1::from_shape_fn(80, |_| r.gen_range(-2.0..2.0));
        let direct = gamma.dot(&values);
        assert!((model.apply(values.view(), z.view()).unwrap() - direct).abs() <= 1e-10);
    }

    #[test]
    fn cme_one_hot_recovers_single_weight() {
        let data = linear_sample(60, 19);
        let model = CmeOperatorModel::fit(&data, 1e-3).unwrap();
        let z = array![1.0, -1.0];
        let gamma = model.weights(z.view()).unwrap();
        let mut one_hot = Array1::zeros(60);
        one_hot[17] = 1.0;
        assert!((model.apply(one_hot.view(), z.view()).unwrap() - gamma[17]).abs() < 1e-12);
        let zeros = Array1::zeros(60);
        assert_eq!(model.apply(zeros.view(), z.view()).unwrap(), 0.0);
    }

    #[test]
    fn cme_tracks_conditional_mean_of_x() {
        let data = linear_sample(600, 20);
        let (model, _) = CmeOperatorModel::fit_selected(&data, 21).unwrap();
        // identity function: E[X | Z = z] = z1
        let values = Array1::from_shape_fn(600, |i| data.x()[[i, 0]]);
        let mut r = rng::substream(22, "cme-truth");
        let mut sq = 0.0;
        let m = 100;
        for _ in 0..m {
            let z = array![r.gen_range(-2.5..2.5), r.gen_range(-2.5..2.5)];
            let pred = model.apply(values.view(), z.view()).unwrap();
            sq += (pred - z[0]) * (pred - z[0]);
        }
        let rmse = (sq / m as f64).sqrt();
        assert!(rmse <= 0.25, "operator RMSE {rmse} too large");
    }

    #[test]
    fn cme_apply_rejects_wrong_length() {
        let data = linear_sample(30, 23);
        let model = CmeOperatorModel::fit(&data, 1e-3).unwrap();
        let values = Array1::zeros(29);
        assert!(model.apply(values.view(), array![0.0, 0.0].view()).is_err());
    }
}
