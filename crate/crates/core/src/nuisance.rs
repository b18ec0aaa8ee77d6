//! Cross-validated lasso learners for conditional means (linear) and
//! propensities (logistic).
//!
//! Both learners standardize features, fit a descending regularization path
//! by coordinate descent with warm starts, choose the penalty by K-fold
//! cross-validation and refit on all rows. Training rows are put into a
//! canonical order keyed by a seeded hash of their content, so fits do not
//! depend on the order in which rows are presented.

use serde::{Deserialize, Serialize};

use crate::contrast::{EstimationConfig, LambdaGrid};
use crate::data::FeatureMatrix;
use crate::error::NuisanceError;

/// Predicted probabilities are clamped to `[PROB_FLOOR, 1 - PROB_FLOOR]`.
pub const PROB_FLOOR: f64 = 1e-12;
pub const MAX_SWEEPS: usize = 10_000;
const IRLS_WEIGHT_FLOOR: f64 = 1e-5;
const MAX_IRLS: usize = 100;
const PATH_MIN_STEPS: usize = 5;
const PATH_MAX_FIT: f64 = 0.999;
const PATH_MIN_GAIN: f64 = 1e-5;
const CV_PATIENCE: usize = 10;

/// Settings shared by both learners.
#[derive(Debug, Clone, PartialEq)]
pub struct LassoSettings {
    pub grid: LambdaGrid,
    pub cv_folds: usize,
    pub seed: u64,
    /// Relative objective decrease per sweep below which a fit is converged.
    pub tolerance: f64,
    /// Largest weighted squared coefficient change, relative to the null
    /// deviance per row, at which a logistic fit is converged.
    pub logistic_tolerance: f64,
}

impl LassoSettings {
    pub fn from_config(cfg: &EstimationConfig) -> Self {
        Self {
            grid: cfg.lambda_grid.clone(),
            cv_folds: cfg.cv_folds_nuisance,
            seed: cfg.seed,
            tolerance: 1e-8,
            logistic_tolerance: 1e-7,
        }
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

impl Default for LassoSettings {
    fn default() -> Self {
        Self::from_config(&EstimationConfig::default())
    }
}

/// Column centering and scaling used at fit time. A scale of zero marks a
/// constant column, which never receives a coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LambdaPath {
    pub grid: Vec<f64>,
    /// Cross-validated mean squared error (linear) or mean deviance (logistic).
    pub cv_loss: Vec<f64>,
    pub selected: usize,
}

/// Affine predictor; coefficients are on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub standardization: Standardization,
    pub path: Option<LambdaPath>,
    /// Set when the targets were constant and an intercept-only model was returned.
    pub degenerate_target: bool,
}

/// Logit-link predictor; coefficients are on the original feature scale.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogisticModel {
    pub intercept: f64,
    pub coefficients: Vec<f64>,
    pub lambda: f64,
    pub standardization: Standardization,
    pub path: Option<LambdaPath>,
    /// Set when the labels contained one class only.
    pub single_class: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Model {
    Linear(LinearModel),
    Logistic(LogisticModel),
}

impl LinearModel {
    pub fn constant(value: f64, p: usize) -> Self {
        Self {
            intercept: value,
            coefficients: vec![0.0; p],
            lambda: f64::INFINITY,
            standardization: Standardization { means: vec![0.0; p], scales: vec![0.0; p] },
            path: None,
            degenerate_target: true,
        }
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, NuisanceError> {
        check_width(self.coefficients.len(), features)?;
        Ok(affine(self.intercept, &self.coefficients, features))
    }
}

impl LogisticModel {
    pub fn constant(probability: f64, p: usize) -> Self {
        let q = probability.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        Self {
            intercept: (q / (1.0 - q)).ln(),
            coefficients: vec![0.0; p],
            lambda: f64::INFINITY,
            standardization: Standardization { means: vec![0.0; p], scales: vec![0.0; p] },
            path: None,
            single_class: true,
        }
    }

    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, NuisanceError> {
        check_width(self.coefficients.len(), features)?;
        let mut eta = affine(self.intercept, &self.coefficients, features);
        for e in &mut eta {
            *e = sigmoid(*e).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
        }
        Ok(eta)
    }
}

impl Model {
    pub fn predict(&self, features: &FeatureMatrix) -> Result<Vec<f64>, NuisanceError> {
        match self {
            Model::Linear(m) => m.predict(features),
            Model::Logistic(m) => m.predict(features),
        }
    }
}

/// Free-function form of [`Model::predict`].
pub fn predict(model: &Model, features: &FeatureMatrix) -> Result<Vec<f64>, NuisanceError> {
    model.predict(features)
}

fn check_width(expected: usize, features: &FeatureMatrix) -> Result<(), NuisanceError> {
    if features.n_cols() == expected {
        Ok(())
    } else {
        Err(NuisanceError::WidthMismatch { expected, got: features.n_cols() })
    }
}

fn affine(intercept: f64, coefs: &[f64], features: &FeatureMatrix) -> Vec<f64> {
    let mut out = vec![intercept; features.n_rows()];
    for (j, &b) in coefs.iter().enumerate() {
        if b != 0.0 {
            for (o, x) in out.iter_mut().zip(features.col(j)) {
                *o += b * x;
            }
        }
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn soft_threshold(z: f64, lambda: f64) -> f64 {
    if z > lambda {
        z - lambda
    } else if z < -lambda {
        z + lambda
    } else {
        0.0
    }
}

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seeded content hash of each row (features plus target).
fn row_hashes(features: &FeatureMatrix, target: &[f64], seed: u64) -> Vec<u64> {
    let start = mix64(seed);
    let mut h: Vec<u64> = target.iter().map(|t| mix64(start ^ t.to_bits())).collect();
    for j in 0..features.n_cols() {
        for (hi, x) in h.iter_mut().zip(features.col(j)) {
            *hi = mix64(*hi ^ x.to_bits());
        }
    }
    h
}

/// Row indices in canonical (hash) order.
fn canonical_order(features: &FeatureMatrix, target: &[f64], seed: u64) -> Vec<usize> {
    let h = row_hashes(features, target, seed);
    let mut idx: Vec<usize> = (0..h.len()).collect();
    idx.sort_by_key(|&i| (h[i], i));
    idx
}

fn check_finite(features: &FeatureMatrix, target: &[f64]) -> Result<(), NuisanceError> {
    let ok = target.iter().all(|v| v.is_finite())
        && (0..features.n_cols()).all(|j| features.col(j).iter().all(|v| v.is_finite()));
    if ok {
        Ok(())
    } else {
        Err(NuisanceError::NonFiniteInput)
    }
}

fn lambda_grid(grid: &LambdaGrid, lambda_max: f64) -> Vec<f64> {
    match grid {
        LambdaGrid::Fixed(g) => {
            let mut g = g.clone();
            g.sort_by(|a, b| b.total_cmp(a));
            g.dedup();
            g
        }
        LambdaGrid::Auto { points, min_ratio } => {
            if *points == 1 {
                return vec![lambda_max];
            }
            let k = (*points - 1) as f64;
            (0..*points)
                .map(|i| lambda_max * min_ratio.powf(i as f64 / k))
                .collect()
        }
    }
}

/// Index of the smallest loss; ties resolve to the larger penalty (earlier index).
fn argmin_first(loss: &[f64]) -> usize {
    let mut best = 0;
    for (k, &l) in loss.iter().enumerate() {
        if l < loss[best] {
            best = k;
        }
    }
    best
}

// ---------------------------------------------------------------------------
// Linear lasso
// ---------------------------------------------------------------------------

/// Weighted raw moments of shifted data; `sxx` is a full symmetric p×p block.
#[derive(Clone)]
struct Moments {
    p: usize,
    w: f64,
    sx: Vec<f64>,
    sy: f64,
    sxx: Vec<f64>,
    sxy: Vec<f64>,
    syy: f64,
}

impl Moments {
    fn zeros(p: usize) -> Self {
        Self { p, w: 0.0, sx: vec![0.0; p], sy: 0.0, sxx: vec![0.0; p * p], sxy: vec![0.0; p], syy: 0.0 }
    }

    /// Accumulates the upper triangle only; call [`Moments::symmetrize`] afterwards.
    fn add_row(&mut self, x: &[f64], y: f64, w: f64) {
        let p = self.p;
        self.w += w;
        self.sy += w * y;
        self.syy += w * y * y;
        for j in 0..p {
            let wx = w * x[j];
            self.sx[j] += wx;
            self.sxy[j] += wx * y;
            let row = &mut self.sxx[j * p + j..j * p + p];
            for (s, xk) in row.iter_mut().zip(&x[j..]) {
                *s += wx * xk;
            }
        }
    }

    fn symmetrize(&mut self) {
        let p = self.p;
        for j in 0..p {
            for k in 0..j {
                self.sxx[j * p + k] = self.sxx[k * p + j];
            }
        }
    }

    fn minus(&self, other: &Moments) -> Moments {
        let sub = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x - y).collect::<Vec<_>>();
        Moments {
            p: self.p,
            w: self.w - other.w,
            sx: sub(&self.sx, &other.sx),
            sy: self.sy - other.sy,
            sxx: sub(&self.sxx, &other.sxx),
            sxy: sub(&self.sxy, &other.sxy),
            syy: self.syy - other.syy,
        }
    }

    /// Weighted sum of squared errors of `a + coef·x` on these rows.
    fn sse(&self, a: f64, coef: &[f64], nz: &[usize]) -> f64 {
        let p = self.p;
        let mut s = self.syy - 2.0 * a * self.sy + a * a * self.w;
        for &j in nz {
            let cj = coef[j];
            s += 2.0 * cj * (a * self.sx[j] - self.sxy[j]);
            let row = &self.sxx[j * p..j * p + p];
            let mut q = 0.0;
            for &k in nz {
                q += row[k] * coef[k];
            }
            s += cj * q;
        }
        s.max(0.0)
    }
}

/// Standardized least-squares problem in covariance form.
struct GramProblem {
    p: usize,
    mx: Vec<f64>,
    my: f64,
    scales: Vec<f64>,
    cols: Vec<usize>,
    gram: Vec<f64>,
    c: Vec<f64>,
    var_y: f64,
}

impl GramProblem {
    fn from_moments(m: &Moments) -> Self {
        let p = m.p;
        let w = m.w;
        let mx: Vec<f64> = m.sx.iter().map(|s| s / w).collect();
        let my = m.sy / w;
        let mut scales = vec![0.0; p];
        let mut cols = Vec::with_capacity(p);
        for j in 0..p {
            let raw = m.sxx[j * p + j] / w;
            let var = raw - mx[j] * mx[j];
            if var > 1e-10 * raw.max(f64::MIN_POSITIVE) && var > 0.0 {
                scales[j] = var.sqrt();
                cols.push(j);
            }
        }
        let mut gram = vec![0.0; p * p];
        let mut c = vec![0.0; p];
        for &j in &cols {
            c[j] = (m.sxy[j] / w - mx[j] * my) / scales[j];
            for &k in &cols {
                gram[j * p + k] = (m.sxx[j * p + k] / w - mx[j] * mx[k]) / (scales[j] * scales[k]);
            }
        }
        let var_y = (m.syy / w - my * my).max(0.0);
        Self { p, mx, my, scales, cols, gram, c, var_y }
    }

    fn lambda_max(&self) -> f64 {
        self.cols.iter().map(|&j| self.c[j].abs()).fold(0.0, f64::max)
    }

    /// Runs coordinate descent at one penalty from the warm start in `beta`;
    /// `grad` holds c - Gβ and is kept in sync.
    fn solve(&self, lambda: f64, beta: &mut [f64], grad: &mut [f64], tol: f64) -> Result<(), NuisanceError> {
        let p = self.p;
        let scale = (0.5 * self.var_y).max(f64::MIN_POSITIVE);
        for _ in 0..MAX_SWEEPS {
            let mut decrease = 0.0;
            for &j in &self.cols {
                let gjj = self.gram[j * p + j];
                let b = beta[j];
                let z = grad[j] + gjj * b;
                let nb = soft_threshold(z, lambda) / gjj;
                if nb != b {
                    let delta = nb - b;
                    let step = (0.5 * gjj * b * b - z * b + lambda * b.abs())
                        - (0.5 * gjj * nb * nb - z * nb + lambda * nb.abs());
                    debug_assert!(step >= -1e-12 * (1.0 + z.abs() * (b.abs() + nb.abs())), "objective increased");
                    decrease += step;
                    beta[j] = nb;
                    let row = &self.gram[j * p..j * p + p];
                    for &k in &self.cols {
                        grad[k] -= row[k] * delta;
                    }
                }
            }
            if decrease <= tol * scale {
                return Ok(());
            }
        }
        Err(NuisanceError::DidNotConverge(MAX_SWEEPS))
    }

    /// Fraction of variance explained by the standardized coefficients.
    fn r_squared(&self, beta: &[f64], grad: &[f64]) -> f64 {
        if self.var_y <= 0.0 {
            return 0.0;
        }
        let mut mse = self.var_y;
        for &j in &self.cols {
            mse -= beta[j] * (self.c[j] + grad[j]);
        }
        1.0 - mse / self.var_y
    }

    /// Coefficients on the (shifted) original scale and the matching intercept.
    fn unscale(&self, beta: &[f64]) -> (f64, Vec<f64>, Vec<usize>) {
        let mut coef = vec![0.0; self.p];
        let mut nz = Vec::new();
        let mut a = self.my;
        for &j in &self.cols {
            if beta[j] != 0.0 {
                coef[j] = beta[j] / self.scales[j];
                a -= coef[j] * self.mx[j];
                nz.push(j);
            }
        }
        (a, coef, nz)
    }

    fn runner(&self, tol: f64) -> LinearPath<'_> {
        LinearPath { problem: self, beta: vec![0.0; self.p], grad: self.c.clone(), prev_rsq: 0.0, tol }
    }
}

/// Warm-started walk down a penalty path.
struct LinearPath<'a> {
    problem: &'a GramProblem,
    beta: Vec<f64>,
    grad: Vec<f64>,
    prev_rsq: f64,
    tol: f64,
}

impl LinearPath<'_> {
    /// Solves at the k-th penalty; returns true when the fit has saturated
    /// and the path should end here.
    fn step(&mut self, k: usize, lambda: f64) -> Result<bool, NuisanceError> {
        self.problem.solve(lambda, &mut self.beta, &mut self.grad, self.tol)?;
        let rsq = self.problem.r_squared(&self.beta, &self.grad);
        let stop = rsq > PATH_MAX_FIT || (k >= PATH_MIN_STEPS && rsq - self.prev_rsq < PATH_MIN_GAIN * rsq);
        self.prev_rsq = rsq;
        Ok(stop)
    }
}

/// Walks all fold paths together and returns the summed held-out loss per
/// penalty. The walk ends when any fold saturates or the loss has not
/// improved for `CV_PATIENCE` consecutive penalties.
fn lockstep_cv<F>(grid: &[f64], folds: usize, mut step: F) -> Result<Vec<f64>, NuisanceError>
where
    F: FnMut(usize, usize, f64) -> Result<(f64, bool), NuisanceError>,
{
    let mut loss: Vec<f64> = Vec::with_capacity(grid.len());
    let mut best = 0;
    for (k, &lambda) in grid.iter().enumerate() {
        let mut total = 0.0;
        let mut stop = false;
        for f in 0..folds {
            let (l, s) = step(f, k, lambda)?;
            total += l;
            stop |= s;
        }
        loss.push(total);
        if total < loss[best] {
            best = k;
        }
        if stop || k >= best + CV_PATIENCE {
            break;
        }
    }
    Ok(loss)
}

struct LinearData {
    p: usize,
    shift_x: Vec<f64>,
    shift_y: f64,
    /// Row-major shifted features, canonical order.
    x: Vec<f64>,
    y: Vec<f64>,
    w: Vec<f64>,
}

impl LinearData {
    fn new(features: &FeatureMatrix, targets: &[f64], weights: Option<&[f64]>, seed: u64) -> Self {
        let p = features.n_cols();
        let order: Vec<usize> = canonical_order(features, targets, seed)
            .into_iter()
            .filter(|&i| weights.is_none_or(|w| w[i] > 0.0))
            .collect();
        let wt = |i: usize| weights.map_or(1.0, |w| w[i]);
        let wsum: f64 = order.iter().map(|&i| wt(i)).sum();
        let shift_x: Vec<f64> = (0..p)
            .map(|j| {
                let col = features.col(j);
                order.iter().map(|&i| wt(i) * col[i]).sum::<f64>() / wsum
            })
            .collect();
        let shift_y = order.iter().map(|&i| wt(i) * targets[i]).sum::<f64>() / wsum;
        let mut x = vec![0.0; order.len() * p];
        for j in 0..p {
            let col = features.col(j);
            for (r, &i) in order.iter().enumerate() {
                x[r * p + j] = col[i] - shift_x[j];
            }
        }
        let y = order.iter().map(|&i| targets[i] - shift_y).collect();
        let w = order.iter().map(|&i| wt(i)).collect();
        Self { p, shift_x, shift_y, x, y, w }
    }

    fn n(&self) -> usize {
        self.y.len()
    }

    fn moments_by_fold(&self, k: usize) -> (Moments, Vec<Moments>) {
        let mut folds = vec![Moments::zeros(self.p); k];
        for r in 0..self.n() {
            folds[r % k].add_row(&self.x[r * self.p..(r + 1) * self.p], self.y[r], self.w[r]);
        }
        let mut total = Moments::zeros(self.p);
        for f in &mut folds {
            f.symmetrize();
        }
        for f in &folds {
            total = Moments {
                p: self.p,
                w: total.w + f.w,
                sx: total.sx.iter().zip(&f.sx).map(|(a, b)| a + b).collect(),
                sy: total.sy + f.sy,
                sxx: total.sxx.iter().zip(&f.sxx).map(|(a, b)| a + b).collect(),
                sxy: total.sxy.iter().zip(&f.sxy).map(|(a, b)| a + b).collect(),
                syy: total.syy + f.syy,
            };
        }
        (total, folds)
    }

    fn moments(&self) -> Moments {
        let mut m = Moments::zeros(self.p);
        for r in 0..self.n() {
            m.add_row(&self.x[r * self.p..(r + 1) * self.p], self.y[r], self.w[r]);
        }
        m.symmetrize();
        m
    }

    fn finish(&self, problem: &GramProblem, beta: &[f64], lambda: f64, path: Option<LambdaPath>) -> LinearModel {
        let (a, coef, _) = problem.unscale(beta);
        let intercept = a + self.shift_y - coef.iter().zip(&self.shift_x).map(|(c, s)| c * s).sum::<f64>();
        LinearModel {
            intercept,
            coefficients: coef,
            lambda,
            standardization: Standardization {
                means: problem.mx.iter().zip(&self.shift_x).map(|(m, s)| m + s).collect(),
                scales: problem.scales.clone(),
            },
            path,
            degenerate_target: false,
        }
    }
}

fn constant_targets(targets: &[f64], weights: Option<&[f64]>) -> Option<f64> {
    let mut live = targets.iter().enumerate().filter(|(i, _)| weights.is_none_or(|w| w[*i] > 0.0));
    let (_, first) = live.next()?;
    live.all(|(_, v)| v == first).then_some(*first)
}

/// Cross-validated linear lasso with the configuration's grid and folds.
pub fn fit_lasso_linear(
    features: &FeatureMatrix,
    targets: &[f64],
    cfg: &EstimationConfig,
) -> Result<LinearModel, NuisanceError> {
    fit_lasso_linear_weighted(features, targets, None, &LassoSettings::from_config(cfg))
}

/// Cross-validated linear lasso with optional nonnegative observation
/// weights (rows with zero weight are ignored).
pub fn fit_lasso_linear_weighted(
    features: &FeatureMatrix,
    targets: &[f64],
    weights: Option<&[f64]>,
    settings: &LassoSettings,
) -> Result<LinearModel, NuisanceError> {
    assert_eq!(features.n_rows(), targets.len());
    check_finite(features, targets)?;
    let p = features.n_cols();
    let live = weights.map_or(targets.len(), |w| w.iter().filter(|v| **v > 0.0).count());
    if live < settings.cv_folds.max(2) {
        return Err(NuisanceError::TooFewRows { needed: settings.cv_folds.max(2), got: live });
    }
    if let Some(v) = constant_targets(targets, weights) {
        return Ok(LinearModel::constant(v, p));
    }
    let data = LinearData::new(features, targets, weights, settings.seed);
    let k = settings.cv_folds;
    let (total, folds) = data.moments_by_fold(k);
    let full = GramProblem::from_moments(&total);
    let lambda_max = full.lambda_max();
    if lambda_max == 0.0 {
        return Ok(data.finish(&full, &vec![0.0; p], 0.0, None));
    }
    let grid = lambda_grid(&settings.grid, lambda_max);

    let held_w: f64 = folds.iter().map(|f| f.w).sum();
    let problems: Vec<GramProblem> = folds.iter().map(|f| GramProblem::from_moments(&total.minus(f))).collect();
    let mut runners: Vec<LinearPath<'_>> = problems.iter().map(|p| p.runner(settings.tolerance)).collect();
    let sse = lockstep_cv(&grid, k, |f, kk, lambda| {
        let stop = runners[f].step(kk, lambda)?;
        let (a, coef, nz) = problems[f].unscale(&runners[f].beta);
        Ok((folds[f].sse(a, &coef, &nz), stop))
    })?;
    let cv_loss: Vec<f64> = sse.iter().map(|s| s / held_w).collect();
    let selected = argmin_first(&cv_loss);

    let mut runner = full.runner(settings.tolerance);
    for (kk, &lambda) in grid[..=selected].iter().enumerate() {
        runner.step(kk, lambda)?;
    }
    let path = LambdaPath { grid: grid[..cv_loss.len()].to_vec(), cv_loss, selected };
    Ok(data.finish(&full, &runner.beta, grid[selected], Some(path)))
}

/// Linear lasso at a single penalty (standardized-feature scale), solved to
/// tight tolerance. `lambda = 0` gives least squares.
pub fn fit_linear_at_lambda(
    features: &FeatureMatrix,
    targets: &[f64],
    weights: Option<&[f64]>,
    lambda: f64,
) -> Result<LinearModel, NuisanceError> {
    assert_eq!(features.n_rows(), targets.len());
    check_finite(features, targets)?;
    let p = features.n_cols();
    if let Some(v) = constant_targets(targets, weights) {
        return Ok(LinearModel::constant(v, p));
    }
    let data = LinearData::new(features, targets, weights, 0);
    let problem = GramProblem::from_moments(&data.moments());
    let mut beta = vec![0.0; p];
    let mut grad = problem.c.clone();
    problem.solve(lambda, &mut beta, &mut grad, 1e-26)?;
    Ok(data.finish(&problem, &beta, lambda, None))
}

// ---------------------------------------------------------------------------
// Logistic lasso
// ---------------------------------------------------------------------------

/// Standardized column-major design for one logistic fit.
struct LogitData {
    n: usize,
    p: usize,
    means: Vec<f64>,
    scales: Vec<f64>,
    cols: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
}

impl LogitData {
    fn new(features: &FeatureMatrix, labels: &[f64], rows: &[usize]) -> Self {
        let n = rows.len();
        let p = features.n_cols();
        let mut means = vec![0.0; p];
        let mut scales = vec![0.0; p];
        let mut cols = Vec::with_capacity(p);
        let mut x = vec![0.0; n * p];
        for j in 0..p {
            let src = features.col(j);
            let dst = &mut x[j * n..(j + 1) * n];
            for (d, &i) in dst.iter_mut().zip(rows) {
                *d = src[i];
            }
            let mean = dst.iter().sum::<f64>() / n as f64;
            let var = dst.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let raw = dst.iter().map(|v| v * v).sum::<f64>() / n as f64;
            means[j] = mean;
            if var > 1e-10 * raw.max(f64::MIN_POSITIVE) && var > 0.0 {
                let s = var.sqrt();
                scales[j] = s;
                cols.push(j);
                for v in dst.iter_mut() {
                    *v = (*v - mean) / s;
                }
            } else {
                dst.iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let y = rows.iter().map(|&i| labels[i]).collect();
        Self { n, p, means, scales, cols, x, y }
    }

    fn col(&self, j: usize) -> &[f64] {
        &self.x[j * self.n..(j + 1) * self.n]
    }

    fn share(&self) -> f64 {
        self.y.iter().sum::<f64>() / self.n as f64
    }

    fn deviance(&self, eta: &[f64]) -> f64 {
        eta.iter().zip(&self.y).map(|(e, y)| binomial_deviance(*y, *e)).sum()
    }

    /// Gradient x_j'(y - p)/n for every column.
    fn score_gradient(&self, eta: &[f64], out: &mut [f64]) {
        let resid: Vec<f64> = eta.iter().zip(&self.y).map(|(e, y)| y - sigmoid(*e)).collect();
        let n = self.n as f64;
        for &j in &self.cols {
            out[j] = dot(self.col(j), &resid) / n;
        }
    }

    /// Coefficients on the original scale.
    fn unscale(&self, b0: f64, beta: &[f64]) -> (f64, Vec<f64>) {
        let mut coef = vec![0.0; self.p];
        let mut a = b0;
        for &j in &self.cols {
            if beta[j] != 0.0 {
                coef[j] = beta[j] / self.scales[j];
                a -= coef[j] * self.means[j];
            }
        }
        (a, coef)
    }
}

#[inline]
fn binomial_deviance(y: f64, eta: f64) -> f64 {
    let q = sigmoid(eta).clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    -2.0 * (y * q.ln() + (1.0 - y) * (1.0 - q).ln())
}

fn logit(q: f64) -> f64 {
    let q = q.clamp(PROB_FLOOR, 1.0 - PROB_FLOOR);
    (q / (1.0 - q)).ln()
}

struct LogitPathState {
    b0: f64,
    beta: Vec<f64>,
    eta: Vec<f64>,
    grad: Vec<f64>,
    ever_active: Vec<bool>,
}

impl LogitData {
    fn start(&self) -> LogitPathState {
        let b0 = logit(self.share());
        let eta = vec![b0; self.n];
        let mut grad = vec![0.0; self.p];
        self.score_gradient(&eta, &mut grad);
        LogitPathState { b0, beta: vec![0.0; self.p], eta, grad, ever_active: vec![false; self.p] }
    }

    fn lambda_max(&self) -> f64 {
        let st = self.start();
        self.cols.iter().map(|&j| st.grad[j].abs()).fold(0.0, f64::max)
    }

    /// Penalized IRLS with coordinate descent over `set` at one penalty.
    fn irls(&self, st: &mut LogitPathState, set: &[usize], lambda: f64, thr: f64) -> Result<(), NuisanceError> {
        let n = self.n as f64;
        let mut w = vec![0.0; self.n];
        let mut r = vec![0.0; self.n];
        let mut z = vec![0.0; self.n];
        let mut v = vec![0.0; self.p];
        let mut sweeps = 0usize;
        for _ in 0..MAX_IRLS {
            for i in 0..self.n {
                let q = sigmoid(st.eta[i]);
                let wi = (q * (1.0 - q)).max(IRLS_WEIGHT_FLOOR);
                w[i] = wi;
                r[i] = (self.y[i] - q) / wi;
                z[i] = st.eta[i] + r[i];
            }
            let wsum: f64 = w.iter().sum();
            for &j in set {
                let x = self.col(j);
                v[j] = dot3(x, x, &w) / n;
            }
            let b0_start = st.b0;
            let beta_start: Vec<f64> = set.iter().map(|&j| st.beta[j]).collect();
            // Full sweeps over the working set alternate with sweeps over its
            // nonzero coordinates until a full sweep changes nothing.
            let mut active: Vec<usize> = Vec::with_capacity(set.len());
            let mut full = true;
            loop {
                sweeps += 1;
                if sweeps > MAX_SWEEPS {
                    return Err(NuisanceError::DidNotConverge(MAX_SWEEPS));
                }
                let mut max_change = 0.0f64;
                let d0 = dot(&w, &r) / wsum;
                if d0 != 0.0 {
                    st.b0 += d0;
                    r.iter_mut().for_each(|ri| *ri -= d0);
                    max_change = max_change.max(wsum / n * d0 * d0);
                }
                let coords: &[usize] = if full { set } else { &active };
                for &j in coords {
                    let x = self.col(j);
                    let g = dot3(x, &w, &r) / n;
                    let b = st.beta[j];
                    let zj = g + v[j] * b;
                    let nb = soft_threshold(zj, lambda) / v[j];
                    if nb != b {
                        let delta = nb - b;
                        debug_assert!(
                            (0.5 * v[j] * nb * nb - zj * nb + lambda * nb.abs())
                                <= (0.5 * v[j] * b * b - zj * b + lambda * b.abs()) + 1e-12 * (1.0 + zj.abs()),
                            "penalized least-squares objective increased"
                        );
                        st.beta[j] = nb;
                        for (ri, xi) in r.iter_mut().zip(x) {
                            *ri -= xi * delta;
                        }
                        max_change = max_change.max(v[j] * delta * delta);
                    }
                }
                let converged = max_change < thr;
                if full {
                    if converged {
                        break;
                    }
                    active.clear();
                    active.extend(set.iter().copied().filter(|&j| st.beta[j] != 0.0));
                    full = false;
                } else if converged {
                    full = true;
                }
            }
            for ((e, zi), ri) in st.eta.iter_mut().zip(&z).zip(&r) {
                *e = zi - ri;
            }
            let mut outer = wsum / n * (st.b0 - b0_start).powi(2);
            for (&j, b) in set.iter().zip(&beta_start) {
                outer = outer.max(v[j] * (st.beta[j] - b).powi(2));
            }
            if outer < thr {
                return Ok(());
            }
        }
        Ok(())
    }

    /// Solves at one penalty with strong-rule screening and KKT checks.
    fn solve_at(&self, st: &mut LogitPathState, lambda: f64, lambda_prev: f64, thr: f64) -> Result<(), NuisanceError> {
        let cut = 2.0 * lambda - lambda_prev;
        let mut in_set = vec![false; self.p];
        for &j in &self.cols {
            in_set[j] = st.ever_active[j] || st.grad[j].abs() >= cut;
        }
        loop {
            let set: Vec<usize> = self.cols.iter().copied().filter(|&j| in_set[j]).collect();
            self.irls(st, &set, lambda, thr)?;
            self.score_gradient(&st.eta, &mut st.grad);
            let mut violated = false;
            for &j in &self.cols {
                if !in_set[j] && st.grad[j].abs() > lambda * (1.0 + 1e-9) {
                    in_set[j] = true;
                    violated = true;
                }
            }
            if !violated {
                break;
            }
        }
        for &j in &self.cols {
            if st.beta[j] != 0.0 {
                st.ever_active[j] = true;
            }
        }
        Ok(())
    }

    fn runner(&self, tol: f64) -> LogitPath<'_> {
        let st = self.start();
        let null_dev = self.deviance(&st.eta);
        let thr = tol * (null_dev / self.n as f64).max(f64::MIN_POSITIVE);
        LogitPath { data: self, st, null_dev, thr, prev_ratio: 0.0, lambda_prev: None }
    }
}

/// Warm-started walk down a logistic penalty path.
struct LogitPath<'a> {
    data: &'a LogitData,
    st: LogitPathState,
    null_dev: f64,
    thr: f64,
    prev_ratio: f64,
    lambda_prev: Option<f64>,
}

impl LogitPath<'_> {
    /// Solves at the k-th penalty; returns true when the deviance explained
    /// has saturated and the path should end here.
    fn step(&mut self, k: usize, lambda: f64) -> Result<bool, NuisanceError> {
        let prev = self.lambda_prev.unwrap_or(lambda).max(lambda);
        self.data.solve_at(&mut self.st, lambda, prev, self.thr)?;
        self.lambda_prev = Some(lambda);
        if self.null_dev <= 0.0 {
            return Ok(false);
        }
        let ratio = 1.0 - self.data.deviance(&self.st.eta) / self.null_dev;
        let stop = ratio > PATH_MAX_FIT || (k >= PATH_MIN_STEPS && ratio - self.prev_ratio < PATH_MIN_GAIN * ratio);
        self.prev_ratio = ratio;
        Ok(stop)
    }
}

/// Dot product with four independent accumulators.
fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Sum of elementwise triple products, accumulated like [`dot`].
fn dot3(a: &[f64], b: &[f64], c: &[f64]) -> f64 {
    debug_assert!(a.len() == b.len() && b.len() == c.len());
    let mut acc = [0.0f64; 4];
    let (ca, cb, cc) = (a.chunks_exact(4), b.chunks_exact(4), c.chunks_exact(4));
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).zip(cc.remainder()).map(|((x, y), z)| x * y * z).sum();
    for ((x, y), z) in ca.zip(cb).zip(cc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l] * z[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn check_labels(labels: &[f64]) -> Result<(), NuisanceError> {
    if labels.iter().all(|&y| y == 0.0 || y == 1.0) {
        Ok(())
    } else {
        Err(NuisanceError::NonFiniteInput)
    }
}

/// Cross-validated logistic lasso (deviance criterion) with the
/// configuration's grid and folds. Labels must be 0/1.
pub fn fit_lasso_logistic(
    features: &FeatureMatrix,
    labels: &[f64],
    cfg: &EstimationConfig,
) -> Result<LogisticModel, NuisanceError> {
    fit_lasso_logistic_with(features, labels, &LassoSettings::from_config(cfg))
}

pub fn fit_lasso_logistic_with(
    features: &FeatureMatrix,
    labels: &[f64],
    settings: &LassoSettings,
) -> Result<LogisticModel, NuisanceError> {
    assert_eq!(features.n_rows(), labels.len());
    check_finite(features, labels)?;
    check_labels(labels)?;
    let n = labels.len();
    let p = features.n_cols();
    if n < settings.cv_folds.max(2) {
        return Err(NuisanceError::TooFewRows { needed: settings.cv_folds.max(2), got: n });
    }
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        return Ok(LogisticModel::constant(positives as f64 / n as f64, p));
    }
    let order = canonical_order(features, labels, settings.seed);
    let k = settings.cv_folds;
    let mut fold_of = vec![0usize; n];
    let mut counters = [0usize; 2];
    for &i in &order {
        let c = labels[i] as usize;
        fold_of[i] = counters[c] % k;
        counters[c] += 1;
    }
    let full = LogitData::new(features, labels, &order);
    let lambda_max = full.lambda_max();
    if lambda_max == 0.0 {
        let (a, coef) = full.unscale(logit(full.share()), &vec![0.0; p]);
        return Ok(logistic_model(&full, a, coef, 0.0, None));
    }
    let grid = lambda_grid(&settings.grid, lambda_max);

    enum FoldFit<'a> {
        Constant(f64),
        Path { data: &'a LogitData, runner: LogitPath<'a>, test_x: FeatureMatrix, test_y: Vec<f64> },
    }
    let train_sets: Vec<LogitData> = (0..k)
        .map(|f| {
            let rows: Vec<usize> = order.iter().copied().filter(|&i| fold_of[i] != f).collect();
            LogitData::new(features, labels, &rows)
        })
        .collect();
    let mut fits: Vec<FoldFit<'_>> = train_sets
        .iter()
        .enumerate()
        .map(|(f, train)| {
            let test_rows: Vec<usize> = order.iter().copied().filter(|&i| fold_of[i] == f).collect();
            let test_y: Vec<f64> = test_rows.iter().map(|&i| labels[i]).collect();
            let share = train.share();
            if share == 0.0 || share == 1.0 {
                let eta = logit(share);
                FoldFit::Constant(test_y.iter().map(|&y| binomial_deviance(y, eta)).sum())
            } else {
                FoldFit::Path {
                    data: train,
                    runner: train.runner(settings.logistic_tolerance),
                    test_x: features.select_rows(&test_rows),
                    test_y,
                }
            }
        })
        .collect();
    let dev = lockstep_cv(&grid, k, |f, kk, lambda| match &mut fits[f] {
        FoldFit::Constant(d) => Ok((*d, false)),
        FoldFit::Path { data, runner, test_x, test_y } => {
            let stop = runner.step(kk, lambda)?;
            let (a, coef) = data.unscale(runner.st.b0, &runner.st.beta);
            let eta = affine(a, &coef, test_x);
            Ok((eta.iter().zip(test_y.iter()).map(|(e, y)| binomial_deviance(*y, *e)).sum(), stop))
        }
    })?;
    let cv_loss: Vec<f64> = dev.iter().map(|d| d / n as f64).collect();
    let selected = argmin_first(&cv_loss);

    let mut runner = full.runner(settings.logistic_tolerance);
    for (kk, &lambda) in grid[..=selected].iter().enumerate() {
        runner.step(kk, lambda)?;
    }
    let (a, coef) = full.unscale(runner.st.b0, &runner.st.beta);
    let path = LambdaPath { grid: grid[..cv_loss.len()].to_vec(), cv_loss, selected };
    Ok(logistic_model(&full, a, coef, grid[selected], Some(path)))
}

fn logistic_model(data: &LogitData, intercept: f64, coefficients: Vec<f64>, lambda: f64, path: Option<LambdaPath>) -> LogisticModel {
    LogisticModel {
        intercept,
        coefficients,
        lambda,
        standardization: Standardization { means: data.means.clone(), scales: data.scales.clone() },
        path,
        single_class: false,
    }
}

/// Logistic lasso at a single penalty (standardized-feature scale).
pub fn fit_logistic_at_lambda(features: &FeatureMatrix, labels: &[f64], lambda: f64) -> Result<LogisticModel, NuisanceError> {
    assert_eq!(features.n_rows(), labels.len());
    check_finite(features, labels)?;
    check_labels(labels)?;
    let n = labels.len();
    let p = features.n_cols();
    let positives = labels.iter().filter(|&&y| y == 1.0).count();
    if positives == 0 || positives == n {
        return Ok(LogisticModel::constant(positives as f64 / n as f64, p));
    }
    let rows: Vec<usize> = (0..n).collect();
    let data = LogitData::new(features, labels, &rows);
    let mut st = data.start();
    let null_dev = data.deviance(&st.eta);
    let thr = 1e-14 * (null_dev / n as f64);
    data.solve_at(&mut st, lambda, lambda, thr)?;
    let (a, coef) = data.unscale(st.b0, &st.beta);
    Ok(logistic_model(&data, a, coef, lambda, None))
}
