//! Per-area point prediction (composite, synthetic and their fixed-effects
//! counterparts), MSE estimation and prediction intervals.

use nalgebra::{DMatrix, DVector};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::fit::{AsymptoticCovariance, FittedModel};
use crate::model::{gamma, AreaSample, SampleData};
use crate::{Result, SaeError};

/// Which quantity an MSE estimate refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    /// The finite-population area mean.
    SmallAreaMean,
    /// The conditional linear predictor (the model mean given the area
    /// effect).
    ConditionalLinearPredictor,
}

/// EBLUP of the area random effect:
/// `gamma_i (ybar_s - u' xi - xbar_s' beta2)`.
pub fn eblup_alpha(area: &AreaSample, fit: &FittedModel) -> f64 {
    let gam = gamma(area.n_i(), fit.params.sigma2_alpha, fit.params.sigma2_e);
    let resid = area.ybar_s() - area.zbar_s().dot(&fit.params.beta());
    gam * resid
}

/// Synthetic mean over the non-sampled units: `u' xi + xbar_rest' beta2 +
/// alpha_hat`.
fn synthetic_rest(area: &AreaSample, fit: &FittedModel) -> Result<f64> {
    let rest = area.xbar_w_rest()?;
    let mut v = area
        .u
        .iter()
        .zip(fit.params.xi.iter())
        .map(|(&u, &x)| u * x)
        .sum::<f64>();
    v += rest
        .iter()
        .zip(fit.params.beta2.iter())
        .map(|(&x, &b)| x * b)
        .sum::<f64>();
    Ok(v + eblup_alpha(area, fit))
}

/// Composite predictor of the area mean: sample mean for the sampled part,
/// synthetic model prediction for the rest.
pub fn predict_sam(area: &AreaSample, fit: &FittedModel) -> Result<f64> {
    let k = area.k;
    if k == 0.0 {
        // Fully enumerated area: the sample mean is the population mean.
        return Ok(area.ybar_s());
    }
    Ok((1.0 - k) * area.ybar_s() + k * synthetic_rest(area, fit)?)
}

/// Fully synthetic predictor of the conditional linear predictor:
/// `u' xi + xbar_pop' beta2 + alpha_hat`.
pub fn predict_clp(area: &AreaSample, fit: &FittedModel) -> Result<f64> {
    if area.xbar_w_pop.is_none() && area.xbar_w_samp.len() > 0 {
        return Err(SaeError::MissingPopulationMeans(area.area_id.clone()));
    }
    Ok(clp_with_row(area, fit, &area.zbar_pop_or_samp()))
}

/// Clp evaluated with an explicit mean design row (used for the sample-mean
/// fallback).
fn clp_with_row(area: &AreaSample, fit: &FittedModel, zbar: &DVector<f64>) -> f64 {
    zbar.dot(&fit.params.beta()) + eblup_alpha(area, fit)
}

/// Composite predictor using the sample covariate means in place of the
/// unknown non-sample means.
pub fn predict_sam_star(area: &AreaSample, fit: &FittedModel) -> f64 {
    let k = area.k;
    let synth = area.zbar_s().dot(&fit.params.beta()) + eblup_alpha(area, fit);
    (1.0 - k) * area.ybar_s() + k * synth
}

/// The simple asymptotic MSE estimator: `k_i sigma2_e / n_i` for the area
/// mean, `sigma2_e / n_i` for the conditional linear predictor.
pub fn mse_lw(area: &AreaSample, fit: &FittedModel, target: Target) -> f64 {
    let n_i = area.n_i() as f64;
    match target {
        Target::SmallAreaMean => area.k * fit.params.sigma2_e / n_i,
        Target::ConditionalLinearPredictor => fit.params.sigma2_e / n_i,
    }
}

/// Second-order MSE estimator for the conditional linear predictor,
/// `g1 + g2 + 2 g3`:
/// - `g1 = sigma2_alpha sigma2_e / (sigma2_e + n_i sigma2_alpha)` (shrinkage
///   variance);
/// - `g2 = d' (sum_j X_j' V_j^{-1} X_j)^{-1} d` with
///   `d = zbar_i - gamma_i zbar_{i(s)}` (coefficient estimation);
/// - `g3` the variance-component correction driven by the plug-in variances
///   of the two variance estimators.
pub fn mse_pr(area: &AreaSample, fit: &FittedModel, cov: &AsymptoticCovariance) -> f64 {
    let sa2 = fit.params.sigma2_alpha;
    let se2 = fit.params.sigma2_e;
    let n_i = area.n_i() as f64;
    let gam = gamma(area.n_i(), sa2, se2);

    let g1 = if sa2 == 0.0 {
        0.0
    } else {
        sa2 * se2 / (se2 + n_i * sa2)
    };

    let d = area.zbar_pop_or_samp() - area.zbar_s() * gam;
    let g2 = d.dot(&(&fit.beta_cov * &d));

    let g3 = if sa2 == 0.0 {
        0.0
    } else {
        let (var_a, var_e, cov_ae) = cov.variance_component_cov(fit.p_b);
        let denom = sa2 + se2 / n_i;
        (se2 * se2 * var_a + sa2 * sa2 * var_e - 2.0 * sa2 * se2 * cov_ae)
            / (n_i * n_i * denom * denom * denom)
    };

    g1 + g2 + 2.0 * g3
}

/// Standard normal quantile `Phi^{-1}(1 - epsilon/2)`.
pub fn normal_quantile(epsilon: f64) -> Result<f64> {
    if !(epsilon > 0.0 && epsilon < 1.0) {
        return Err(SaeError::InvalidValue(format!(
            "epsilon must lie in (0,1), got {epsilon}"
        )));
    }
    let std_normal = Normal::new(0.0, 1.0).expect("standard normal");
    Ok(std_normal.inverse_cdf(1.0 - epsilon / 2.0))
}

/// Two-sided asymptotic prediction interval `point -+ z sqrt(mse)`.
pub fn prediction_interval(point: f64, mse: f64, epsilon: f64) -> Result<(f64, f64)> {
    if mse < 0.0 {
        return Err(SaeError::InvalidValue(format!("negative mse {mse}")));
    }
    let z = normal_quantile(epsilon)?;
    let half = z * mse.sqrt();
    Ok((point - half, point + half))
}

/// Per-area point estimates, MSE estimates and interval endpoints.
#[derive(Debug, Clone)]
pub struct AreaPrediction {
    pub area_id: String,
    pub big_n: u64,
    pub n_i: usize,
    pub alpha_hat: f64,
    pub sam: f64,
    pub clp: f64,
    pub sam_star: f64,
    /// Area-mean target.
    pub mse_lw: f64,
    pub mse_pr: f64,
    pub interval_sam_lw: (f64, f64),
    pub interval_clp_lw: (f64, f64),
    pub interval_clp_pr: (f64, f64),
}

/// Full prediction pipeline for one area. With `sam_star_only` the sample
/// covariate means substitute for unknown population means everywhere.
pub fn predict_area(
    area: &AreaSample,
    fit: &FittedModel,
    cov: &AsymptoticCovariance,
    epsilon: f64,
    sam_star_only: bool,
) -> Result<AreaPrediction> {
    let alpha_hat = eblup_alpha(area, fit);
    let sam_star = predict_sam_star(area, fit);
    let (sam, clp) = if sam_star_only && area.xbar_w_pop.is_none() {
        (sam_star, clp_with_row(area, fit, &area.zbar_s()))
    } else {
        (predict_sam(area, fit)?, predict_clp(area, fit)?)
    };
    let mse_mean = mse_lw(area, fit, Target::SmallAreaMean);
    let pr = mse_pr(area, fit, cov);
    Ok(AreaPrediction {
        area_id: area.area_id.clone(),
        big_n: area.big_n,
        n_i: area.n_i(),
        alpha_hat,
        sam,
        clp,
        sam_star,
        mse_lw: mse_mean,
        mse_pr: pr,
        interval_sam_lw: prediction_interval(sam, mse_mean, epsilon)?,
        interval_clp_lw: prediction_interval(clp, mse_mean, epsilon)?,
        interval_clp_pr: prediction_interval(clp, pr, epsilon)?,
    })
}

/// Predictions for every area of a sample.
pub fn predict_all(
    sample: &SampleData,
    fit: &FittedModel,
    cov: &AsymptoticCovariance,
    epsilon: f64,
    sam_star_only: bool,
) -> Result<Vec<AreaPrediction>> {
    sample
        .areas
        .iter()
        .map(|a| predict_area(a, fit, cov, epsilon, sam_star_only))
        .collect()
}

/// Least squares fit of the fixed-area-effects regression: intercept, within
/// covariates, and sum-to-zero area contrasts.
///
/// Between-area covariates are structurally collinear with the area
/// indicators; any dependent column is dropped deterministically (contrasts
/// and within covariates are preferred over between-area columns) and the
/// dropped names are recorded.
#[derive(Debug, Clone)]
pub struct FixedEffectsFit {
    /// Coefficients for the kept columns, reduced (g-1 contrast)
    /// parameterization.
    pub coefs: DVector<f64>,
    /// Names of the kept columns, in design order.
    pub colnames: Vec<String>,
    /// Names of dropped (collinear) columns.
    pub dropped: Vec<String>,
    /// `sigma2_e (Z'Z)^{-1}` over the kept columns.
    pub cov: DMatrix<f64>,
    pub sigma2_e: f64,
    /// Area ids in design order; the first `g - 1` own a contrast column.
    pub area_ids: Vec<String>,
    /// Number of kept non-contrast columns (they precede the contrasts).
    pub p_base: usize,
}

impl FixedEffectsFit {
    pub fn g(&self) -> usize {
        self.area_ids.len()
    }

    /// Fixed area effect for area index `i` (sum-to-zero coding).
    pub fn alpha(&self, i: usize) -> f64 {
        let g = self.g();
        let kept_contrasts = self.coefs.len() - self.p_base;
        if i + 1 < g && i < kept_contrasts {
            self.coefs[self.p_base + i]
        } else if i + 1 == g {
            -(0..kept_contrasts).map(|k| self.coefs[self.p_base + k]).sum::<f64>()
        } else {
            0.0
        }
    }

    /// Design row over the kept columns for area index `i` with the given
    /// within covariate values.
    fn design_row(&self, i: usize, x_w: &[f64]) -> DVector<f64> {
        let g = self.g();
        let mut z = DVector::zeros(self.coefs.len());
        for (col, name) in self.colnames[..self.p_base].iter().enumerate() {
            if name == "intercept" {
                z[col] = 1.0;
            }
        }
        // Kept base columns beyond the intercept are the within covariates,
        // in order.
        let mut xi = 0;
        for (col, name) in self.colnames[..self.p_base].iter().enumerate() {
            if name != "intercept" {
                z[col] = x_w[xi];
                xi += 1;
            }
        }
        let kept_contrasts = self.coefs.len() - self.p_base;
        if i + 1 < g {
            if i < kept_contrasts {
                z[self.p_base + i] = 1.0;
            }
        } else {
            for k in 0..kept_contrasts {
                z[self.p_base + k] = -1.0;
            }
        }
        z
    }
}

/// Fit the fixed-area-effects model by constrained least squares
/// (sum-to-zero area effects via g-1 contrast columns).
pub fn fit_fixed_effects(sample: &SampleData) -> Result<FixedEffectsFit> {
    let g = sample.g();
    let n = sample.n_total();
    let p_b = sample.p_b;
    let p_w = sample.p_w;
    // Full column set: intercept, between covariates, within covariates,
    // then g-1 sum-to-zero contrasts.
    let p_full = 1 + p_b + p_w + (g - 1);
    let mut names: Vec<String> = sample.colnames.clone();
    for area in sample.areas.iter().take(g - 1) {
        names.push(format!("area_{}_ctr", area.area_id));
    }

    let mut z = DMatrix::zeros(n, p_full);
    let mut y = DVector::zeros(n);
    let mut row = 0;
    for (i, area) in sample.areas.iter().enumerate() {
        for unit in &area.units {
            for (c, &u) in area.u.iter().enumerate() {
                z[(row, c)] = u;
            }
            for (c, &x) in unit.x_w.iter().enumerate() {
                z[(row, 1 + p_b + c)] = x;
            }
            if i + 1 < g {
                z[(row, 1 + p_b + p_w + i)] = 1.0;
            } else {
                for k in 0..(g - 1) {
                    z[(row, 1 + p_b + p_w + k)] = -1.0;
                }
            }
            y[row] = unit.y;
            row += 1;
        }
    }

    // Deterministic column selection: prefer the intercept, the within
    // covariates and the contrasts; between-area covariates come last so the
    // structural collinearity lands on them.
    let mut preference: Vec<usize> = Vec::with_capacity(p_full);
    preference.push(0);
    preference.extend((1 + p_b)..(1 + p_b + p_w));
    preference.extend((1 + p_b + p_w)..p_full);
    preference.extend(1..(1 + p_b));

    let gram = z.transpose() * &z;
    let scale = gram.diagonal().iter().cloned().fold(0.0f64, f64::max).max(1.0);
    let mut kept: Vec<usize> = Vec::new();
    let mut dropped: Vec<String> = Vec::new();
    for &j in &preference {
        let mut trial = kept.clone();
        trial.push(j);
        trial.sort_unstable();
        let sub = gram
            .select_rows(trial.as_slice())
            .select_columns(trial.as_slice());
        let ok = sub
            .cholesky()
            .map(|c| {
                c.l_dirty()
                    .diagonal()
                    .iter()
                    .all(|&d| d * d > 1e-10 * scale)
            })
            .unwrap_or(false);
        if ok {
            kept.push(j);
        } else {
            dropped.push(names[j].clone());
        }
    }
    kept.sort_unstable();
    let rank = kept.len();
    if n <= rank {
        return Err(SaeError::InvalidValue(format!(
            "need more observations ({n}) than design rank ({rank})"
        )));
    }
    // Keep contrasts contiguous at the end: verify no contrast was dropped
    // out of order (contrast columns are linearly independent of each other
    // and of the intercept/within block, so none should drop).
    let p_base = kept.iter().filter(|&&j| j < 1 + p_b + p_w).count();

    let zk = z.select_columns(kept.as_slice());
    let gram_k = zk.transpose() * &zk;
    let kept_names: Vec<String> = kept.iter().map(|&j| names[j].clone()).collect();
    let chol = gram_k
        .clone()
        .cholesky()
        .ok_or_else(|| SaeError::RankDeficient {
            columns: kept_names.clone(),
        })?;
    let coefs = chol.solve(&(zk.transpose() * &y));
    let resid = &y - &zk * &coefs;
    let rss = resid.dot(&resid);
    let sigma2_e = rss / (n - rank) as f64;
    let cov = chol.inverse() * sigma2_e;

    Ok(FixedEffectsFit {
        coefs,
        colnames: kept_names,
        dropped,
        cov,
        sigma2_e,
        area_ids: sample.areas.iter().map(|a| a.area_id.clone()).collect(),
        p_base,
    })
}

/// Which fixed-effects estimator to use.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FixedKind {
    Composite,
    Synthetic,
}

/// Point and interval for one fixed-effects prediction.
#[derive(Debug, Clone)]
pub struct FixedPrediction {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Fixed-effects prediction of the area mean.
///
/// Composite: `(1-k) ybar_s + k zbar_rest' chi` with half-width
/// `z k sqrt(sigma2_e/(N-n) + zbar_rest' V zbar_rest)`;
/// synthetic: `zbar_pop' chi` with half-width `z sqrt(zbar_pop' V zbar_pop)`.
pub fn predict_fixed(
    area: &AreaSample,
    area_index: usize,
    ffit: &FixedEffectsFit,
    kind: FixedKind,
    epsilon: f64,
) -> Result<FixedPrediction> {
    let z = normal_quantile(epsilon)?;
    match kind {
        FixedKind::Composite => {
            let k = area.k;
            if k == 0.0 {
                let point = area.ybar_s();
                return Ok(FixedPrediction {
                    point,
                    lower: point,
                    upper: point,
                });
            }
            let rest = area.xbar_w_rest()?;
            let row = ffit.design_row(area_index, &rest);
            let point = (1.0 - k) * area.ybar_s() + k * row.dot(&ffit.coefs);
            let quad = row.dot(&(&ffit.cov * &row));
            let m = (area.big_n - area.n_i() as u64) as f64;
            let half = z * k * (ffit.sigma2_e / m + quad).sqrt();
            Ok(FixedPrediction {
                point,
                lower: point - half,
                upper: point + half,
            })
        }
        FixedKind::Synthetic => {
            let xw = area.xbar_w_pop.as_ref().unwrap_or(&area.xbar_w_samp);
            let row = ffit.design_row(area_index, xw);
            let point = row.dot(&ffit.coefs);
            let quad = row.dot(&(&ffit.cov * &row));
            let half = z * quad.sqrt();
            Ok(FixedPrediction {
                point,
                lower: point - half,
                upper: point + half,
            })
        }
    }
}
