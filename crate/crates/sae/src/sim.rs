//! Reproducible Monte Carlo evaluation of the predictors: population
//! generation, simple random sampling without replacement, and the
//! model-based / design-based replication protocols with coverage metrics.
//!
//! Determinism contract: replication `r` owns the ChaCha stream `r + 1` of
//! the master seed (stream 0 is reserved for the frozen design), and the
//! aggregation walks replications in index order, so reports are identical
//! for any worker count.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::fit::{asymptotic_covariance, fit_reml, MomentSource};
use crate::model::{AreaPopulation, PopulationFrame, Unit};
use crate::predict::{
    fit_fixed_effects, normal_quantile, predict_all, predict_fixed, FixedKind,
};
use crate::{Result, SaeError};

/// Distribution family of the random effects / unit errors.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum EffectDist {
    #[default]
    Normal,
    Mixture,
}

/// How the area population sizes are chosen.
#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AreaSizes {
    /// First area 40 units, the rest integer parts of Uniform(40, 400),
    /// drawn once per setting and then frozen.
    #[default]
    Random,
    /// Explicit list, one entry per area.
    Explicit(Vec<u64>),
}

/// Threshold sampling rule mapping area size to sample size, with an
/// optional explicit table taking precedence.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SamplingRule {
    /// Sample size for areas below `small_limit`.
    pub floor: u64,
    /// Areas with `small_limit <= N < half_limit` get `N / 2`.
    pub small_limit: u64,
    /// Areas with `N >= half_limit` get `N / 4`.
    pub half_limit: u64,
    /// Explicit `(N, n)` pairs; when non-empty, every area size must match
    /// an entry exactly.
    #[serde(default)]
    pub explicit: Vec<(u64, u64)>,
}

impl Default for SamplingRule {
    fn default() -> Self {
        Self {
            floor: 25,
            small_limit: 50,
            half_limit: 100,
            explicit: Vec::new(),
        }
    }
}

impl SamplingRule {
    /// Sample size for an area of size `big_n`.
    pub fn n_for(&self, big_n: u64) -> Result<u64> {
        if !self.explicit.is_empty() {
            return self
                .explicit
                .iter()
                .find(|(n, _)| *n == big_n)
                .map(|&(_, s)| s)
                .ok_or(SaeError::SamplingRuleGap(big_n));
        }
        let n = if big_n < self.small_limit {
            self.floor.min(big_n)
        } else if big_n < self.half_limit {
            big_n / 2
        } else {
            big_n / 4
        };
        if n == 0 || n > big_n {
            return Err(SaeError::SamplingRuleGap(big_n));
        }
        Ok(n)
    }
}

/// Which replication protocol to run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SimMode {
    /// A fresh population (new random effects and errors) per replication.
    #[default]
    ModelBased,
    /// One frozen population; only the sample is redrawn.
    DesignBased,
    /// Frozen population, fixed-area-effects estimators.
    DesignBasedFixedEffects,
}

fn default_beta() -> Vec<f64> {
    vec![5.0, 7.0, 3.0]
}
fn default_reps() -> usize {
    1000
}
fn default_epsilon() -> f64 {
    0.05
}
fn default_seed() -> u64 {
    1
}

/// Full specification of a simulation setting.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimConfig {
    pub g: usize,
    #[serde(default)]
    pub area_sizes: AreaSizes,
    /// `[beta0, beta1 (contextual mean), beta2 (centered within)]`.
    #[serde(default = "default_beta")]
    pub beta: Vec<f64>,
    pub sigma2_alpha: f64,
    pub sigma2_e: f64,
    #[serde(default)]
    pub dist_alpha: EffectDist,
    #[serde(default)]
    pub dist_e: EffectDist,
    #[serde(default)]
    pub sampling_rule: SamplingRule,
    #[serde(default = "default_reps")]
    pub replications: usize,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default)]
    pub mode: SimMode,
    /// Redraw the covariates each replication instead of freezing them with
    /// the design.
    #[serde(default)]
    pub redraw_covariates: bool,
}

impl SimConfig {
    fn validate(&self) -> Result<()> {
        if self.g < 2 {
            return Err(SaeError::Config(format!("g must be >= 2, got {}", self.g)));
        }
        if self.beta.len() != 3 {
            return Err(SaeError::Config(format!(
                "beta must have 3 entries, got {}",
                self.beta.len()
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon < 1.0) {
            return Err(SaeError::Config(format!(
                "epsilon must lie in (0,1), got {}",
                self.epsilon
            )));
        }
        if self.replications == 0 {
            return Err(SaeError::Config("replications must be positive".into()));
        }
        if let AreaSizes::Explicit(sizes) = &self.area_sizes {
            if sizes.len() != self.g {
                return Err(SaeError::Config(format!(
                    "{} explicit sizes for g = {}",
                    sizes.len(),
                    self.g
                )));
            }
        }
        Ok(())
    }
}

/// Mean of the second mixture component forced by the zero-mean constraint
/// `0.3 * 0.5 + 0.7 * mu = 0`.
pub const MIXTURE_MU: f64 = -3.0 / 14.0;

/// Smallest admissible target variance of the mixture.
pub fn mixture_variance_bound() -> f64 {
    0.375 + 0.7 * MIXTURE_MU * MIXTURE_MU
}

/// Draw `n` i.i.d. values from the zero-mean mixture
/// `0.3 N(0.5, 1) + 0.7 N(mu, s^2)` calibrated to the target variance.
pub fn mixture_sample<R: Rng + ?Sized>(
    rng: &mut R,
    target_variance: f64,
    n: usize,
) -> Result<Vec<f64>> {
    let bound = mixture_variance_bound();
    if target_variance <= bound {
        return Err(SaeError::MixtureVarianceTooSmall {
            sigma2: target_variance,
            bound,
        });
    }
    let s2 = (target_variance - 0.375 - 0.7 * MIXTURE_MU * MIXTURE_MU) / 0.7;
    let comp1 = Normal::new(0.5, 1.0).expect("first mixture component");
    let comp2 = Normal::new(MIXTURE_MU, s2.sqrt()).expect("second mixture component");
    Ok((0..n)
        .map(|_| {
            if rng.gen::<f64>() < 0.3 {
                comp1.sample(rng)
            } else {
                comp2.sample(rng)
            }
        })
        .collect())
}

fn draw_effects<R: Rng + ?Sized>(
    rng: &mut R,
    dist: EffectDist,
    variance: f64,
    n: usize,
) -> Result<Vec<f64>> {
    match dist {
        EffectDist::Normal => {
            if variance == 0.0 {
                return Ok(vec![0.0; n]);
            }
            let nd = Normal::new(0.0, variance.sqrt())
                .map_err(|e| SaeError::InvalidValue(e.to_string()))?;
            Ok((0..n).map(|_| nd.sample(rng)).collect())
        }
        EffectDist::Mixture => mixture_sample(rng, variance, n),
    }
}

/// Frozen per-setting design: area sizes and raw covariate values.
#[derive(Debug, Clone)]
pub struct DesignDraw {
    pub sizes: Vec<u64>,
    /// Raw covariate values per area, `x = 3 + 2 u_i + 4 v_ij`.
    pub x: Vec<Vec<f64>>,
}

/// Draw the frozen area sizes (stream 0 of the master seed).
pub fn draw_sizes<R: Rng + ?Sized>(config: &SimConfig, rng: &mut R) -> Result<Vec<u64>> {
    match &config.area_sizes {
        AreaSizes::Explicit(sizes) => Ok(sizes.clone()),
        AreaSizes::Random => {
            let mut sizes = Vec::with_capacity(config.g);
            sizes.push(40);
            for _ in 1..config.g {
                sizes.push(rng.gen_range(40.0..400.0) as u64);
            }
            Ok(sizes)
        }
    }
}

/// Draw the covariate values `x = 3 + 2 u_i + 4 v_ij` for the given sizes.
pub fn draw_covariates<R: Rng + ?Sized>(sizes: &[u64], rng: &mut R) -> Vec<Vec<f64>> {
    let nd = Normal::new(0.0, 1.0).expect("standard normal");
    sizes
        .iter()
        .map(|&big_n| {
            let u: f64 = nd.sample(rng);
            (0..big_n)
                .map(|_| 3.0 + 2.0 * u + 4.0 * nd.sample(rng))
                .collect()
        })
        .collect()
}

/// Realized per-area truths of one generated population.
#[derive(Debug, Clone)]
pub struct AreaTruth {
    /// Finite-population mean of the response.
    pub ybar: f64,
    /// Conditional linear predictor `beta0 + beta1 xbar_i + alpha_i`.
    pub eta: f64,
    pub alpha: f64,
}

/// Generate one population from a design draw: fresh random effects and
/// errors, responses from the linear model with the centered-within plus
/// contextual-mean design.
pub fn generate_population<R: Rng + ?Sized>(
    design: &DesignDraw,
    config: &SimConfig,
    rng: &mut R,
) -> Result<(PopulationFrame, Vec<AreaTruth>)> {
    let g = design.sizes.len();
    let alphas = draw_effects(rng, config.dist_alpha, config.sigma2_alpha, g)?;
    let b0 = config.beta[0];
    let b1 = config.beta[1];
    let b2 = config.beta[2];

    let mut areas = Vec::with_capacity(g);
    let mut truths = Vec::with_capacity(g);
    for (i, xs) in design.x.iter().enumerate() {
        let big_n = xs.len();
        let xbar = xs.iter().sum::<f64>() / big_n as f64;
        let errors = draw_effects(rng, config.dist_e, config.sigma2_e, big_n)?;
        let alpha = alphas[i];
        let eta = b0 + b1 * xbar + alpha;
        let mut ysum = 0.0;
        let units: Vec<Unit> = xs
            .iter()
            .zip(&errors)
            .map(|(&x, &e)| {
                let xc = x - xbar;
                let y = b0 + b1 * xbar + b2 * xc + alpha + e;
                ysum += y;
                Unit {
                    x_w: vec![xc],
                    y: Some(y),
                }
            })
            .collect();
        truths.push(AreaTruth {
            ybar: ysum / big_n as f64,
            eta,
            alpha,
        });
        areas.push(AreaPopulation {
            area_id: format!("{}", i + 1),
            u: vec![1.0, xbar],
            units,
        });
    }
    let frame = PopulationFrame::new(
        areas,
        vec!["intercept".into(), "x_avg".into(), "x_cent".into()],
    )?;
    Ok((frame, truths))
}

/// Per-area SRSWOR index sets under the sampling rule.
pub fn srswor<R: Rng + ?Sized>(
    sizes: &[u64],
    rule: &SamplingRule,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    sizes
        .iter()
        .map(|&big_n| {
            let n = rule.n_for(big_n)? as usize;
            if n == big_n as usize {
                return Ok((0..n).collect());
            }
            let mut idx = rand::seq::index::sample(rng, big_n as usize, n).into_vec();
            idx.sort_unstable();
            Ok(idx)
        })
        .collect()
}

/// One method's outcome in one replication.
#[derive(Debug, Clone)]
struct MethodRep {
    est: f64,
    /// Square root of the MSE estimate (interval half-width divided by z).
    root_mse: f64,
    covered: bool,
    covered_eta: Option<bool>,
}

/// One replication: per-area truth and per-method outcomes.
#[derive(Debug, Clone)]
struct RepOutcome {
    /// `per_area[i][m]` aligned with the report's method list.
    per_area: Vec<(f64, Vec<MethodRep>)>,
}

/// Aggregated metrics of one method in one area.
#[derive(Debug, Clone, Serialize)]
pub struct MethodMetrics {
    /// Empirical coverage of the interval.
    pub cvge: f64,
    /// Mean of the root-MSE estimates.
    pub alen: f64,
    /// Root mean squared estimation error against the truth.
    pub rmse_s: f64,
    /// `|alen - rmse_s| / rmse_s`.
    pub rlen: f64,
    /// `mean(est - truth) / mean(|truth|)`.
    pub rel_bias: f64,
    /// Monte Carlo standard error of the coverage estimate.
    pub mc_se_coverage: f64,
    /// Coverage against the conditional linear predictor, when defined.
    pub cvge_eta: Option<f64>,
}

/// Aggregated per-area results.
#[derive(Debug, Clone, Serialize)]
pub struct AreaReport {
    pub area_id: String,
    pub big_n: u64,
    pub n_i: u64,
    /// Population-fit standardized EBLUP (design-based modes only).
    pub std_eblup: Option<f64>,
    pub methods: Vec<MethodMetrics>,
}

/// Full simulation report.
#[derive(Debug, Clone, Serialize)]
pub struct SimReport {
    pub mode: SimMode,
    pub method_names: Vec<String>,
    pub areas: Vec<AreaReport>,
    pub replications: usize,
    pub failures: usize,
}

/// Run the configured protocol.
pub fn run(config: &SimConfig) -> Result<SimReport> {
    config.validate()?;
    match config.mode {
        SimMode::ModelBased => run_model_based(config),
        SimMode::DesignBased => run_design_based(config),
        SimMode::DesignBasedFixedEffects => run_design_based_fixed(config),
    }
}

fn rep_rng(seed: u64, rep: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(rep as u64 + 1);
    rng
}

fn frozen_rng(seed: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0);
    rng
}

/// Interval membership with a rounding-noise guard: degenerate (zero-noise)
/// configurations produce zero-width intervals whose centers differ from the
/// truth only at machine precision, and must still count as covered. The
/// slack is invisible at realistic interval widths.
fn covers(lo: f64, hi: f64, truth: f64) -> bool {
    let tol = 1e-9 * (1.0 + truth.abs());
    lo - tol <= truth && truth <= hi + tol
}

/// Mixed-model per-replication pipeline: REML fit, Sam/Clp points, LW/PR
/// MSEs, three intervals (Sam-LW, Clp-LW, Clp-PR).
fn mixed_rep(
    frame: &PopulationFrame,
    truths: &[AreaTruth],
    indices: &[Vec<usize>],
    epsilon: f64,
) -> Result<RepOutcome> {
    let sample = frame.sample(indices)?;
    let fit = fit_reml(&sample)?;
    let cov = asymptotic_covariance(&fit, &sample, MomentSource::NormalTheory)?;
    let preds = predict_all(&sample, &fit, &cov, epsilon, false)?;
    let per_area = preds
        .iter()
        .zip(truths)
        .map(|(p, t)| {
            let inside = |(lo, hi): (f64, f64), truth: f64| covers(lo, hi, truth);
            let methods = vec![
                MethodRep {
                    est: p.sam,
                    root_mse: p.mse_lw.sqrt(),
                    covered: inside(p.interval_sam_lw, t.ybar),
                    covered_eta: None,
                },
                MethodRep {
                    est: p.clp,
                    root_mse: p.mse_lw.sqrt(),
                    covered: inside(p.interval_clp_lw, t.ybar),
                    covered_eta: Some(inside(p.interval_clp_lw, t.eta)),
                },
                MethodRep {
                    est: p.clp,
                    root_mse: p.mse_pr.sqrt(),
                    covered: inside(p.interval_clp_pr, t.ybar),
                    covered_eta: Some(inside(p.interval_clp_pr, t.eta)),
                },
            ];
            (t.ybar, methods)
        })
        .collect();
    Ok(RepOutcome { per_area })
}

/// Model-based protocol: a fresh population per replication.
pub fn run_model_based(config: &SimConfig) -> Result<SimReport> {
    let mut rng0 = frozen_rng(config.seed);
    let sizes = draw_sizes(config, &mut rng0)?;
    let frozen_x = draw_covariates(&sizes, &mut rng0);
    // Fail early on rule gaps.
    for &big_n in &sizes {
        config.sampling_rule.n_for(big_n)?;
    }

    let outcomes: Vec<Result<RepOutcome>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = rep_rng(config.seed, r);
            let design = if config.redraw_covariates {
                DesignDraw {
                    sizes: sizes.clone(),
                    x: draw_covariates(&sizes, &mut rng),
                }
            } else {
                DesignDraw {
                    sizes: sizes.clone(),
                    x: frozen_x.clone(),
                }
            };
            let (frame, truths) = generate_population(&design, config, &mut rng)?;
            let indices = srswor(&sizes, &config.sampling_rule, &mut rng)?;
            mixed_rep(&frame, &truths, &indices, config.epsilon)
        })
        .collect();

    let names = vec!["sam_lw".into(), "clp_lw".into(), "clp_pr".into()];
    aggregate(config, SimMode::ModelBased, &sizes, None, names, outcomes)
}

/// Frozen population for the design-based modes, with truths and the
/// population-fit standardized EBLUPs.
fn frozen_population(
    config: &SimConfig,
) -> Result<(PopulationFrame, Vec<AreaTruth>, Vec<u64>, Vec<f64>)> {
    let mut rng0 = frozen_rng(config.seed);
    let sizes = draw_sizes(config, &mut rng0)?;
    let design = DesignDraw {
        sizes: sizes.clone(),
        x: draw_covariates(&sizes, &mut rng0),
    };
    let (frame, truths) = generate_population(&design, config, &mut rng0)?;
    let std_eblups = population_std_eblups(&frame)?;
    Ok((frame, truths, sizes, std_eblups))
}

/// Standardized EBLUPs `alpha_hat_i / sigma_alpha_hat` from a REML fit on
/// the whole population.
pub fn population_std_eblups(frame: &PopulationFrame) -> Result<Vec<f64>> {
    let full = frame.as_full_sample()?;
    let fit = fit_reml(&full)?;
    let sd = fit.params.sigma2_alpha.sqrt();
    Ok(full
        .areas
        .iter()
        .map(|a| {
            let alpha = crate::predict::eblup_alpha(a, &fit);
            if sd > 0.0 {
                alpha / sd
            } else {
                0.0
            }
        })
        .collect())
}

/// Design-based protocol on a population generated once and frozen.
pub fn run_design_based(config: &SimConfig) -> Result<SimReport> {
    let (frame, truths, sizes, std_eblups) = frozen_population(config)?;
    run_design_based_on(config, &frame, &truths, &sizes, Some(std_eblups))
}

/// Design-based protocol on an externally supplied population (truths are
/// the realized area means).
pub fn run_design_based_frame(config: &SimConfig, frame: &PopulationFrame) -> Result<SimReport> {
    let truths: Vec<AreaTruth> = frame
        .areas
        .iter()
        .map(|a| {
            let ybar = a.ybar().ok_or_else(|| {
                SaeError::InvalidValue(format!(
                    "area {}: population responses incomplete",
                    a.area_id
                ))
            })?;
            Ok(AreaTruth {
                ybar,
                eta: ybar,
                alpha: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let sizes: Vec<u64> = frame.areas.iter().map(|a| a.n_units()).collect();
    let std_eblups = population_std_eblups(frame)?;
    run_design_based_on(config, frame, &truths, &sizes, Some(std_eblups))
}

fn run_design_based_on(
    config: &SimConfig,
    frame: &PopulationFrame,
    truths: &[AreaTruth],
    sizes: &[u64],
    std_eblups: Option<Vec<f64>>,
) -> Result<SimReport> {
    for &big_n in sizes {
        config.sampling_rule.n_for(big_n)?;
    }
    let outcomes: Vec<Result<RepOutcome>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = rep_rng(config.seed, r);
            let indices = srswor(sizes, &config.sampling_rule, &mut rng)?;
            mixed_rep(frame, truths, &indices, config.epsilon)
        })
        .collect();
    let names = vec!["sam_lw".into(), "clp_lw".into(), "clp_pr".into()];
    aggregate(
        config,
        SimMode::DesignBased,
        sizes,
        std_eblups,
        names,
        outcomes,
    )
}

/// Design-based protocol with the fixed-area-effects estimators (composite
/// and synthetic).
pub fn run_design_based_fixed(config: &SimConfig) -> Result<SimReport> {
    let (frame, truths, sizes, std_eblups) = frozen_population(config)?;
    run_design_based_fixed_on(config, &frame, &truths, &sizes, Some(std_eblups))
}

/// Fixed-effects design-based protocol on an external population.
pub fn run_design_based_fixed_frame(
    config: &SimConfig,
    frame: &PopulationFrame,
) -> Result<SimReport> {
    let truths: Vec<AreaTruth> = frame
        .areas
        .iter()
        .map(|a| {
            let ybar = a.ybar().ok_or_else(|| {
                SaeError::InvalidValue(format!(
                    "area {}: population responses incomplete",
                    a.area_id
                ))
            })?;
            Ok(AreaTruth {
                ybar,
                eta: ybar,
                alpha: 0.0,
            })
        })
        .collect::<Result<_>>()?;
    let sizes: Vec<u64> = frame.areas.iter().map(|a| a.n_units()).collect();
    let std_eblups = population_std_eblups(frame)?;
    run_design_based_fixed_on(config, frame, &truths, &sizes, Some(std_eblups))
}

fn run_design_based_fixed_on(
    config: &SimConfig,
    frame: &PopulationFrame,
    truths: &[AreaTruth],
    sizes: &[u64],
    std_eblups: Option<Vec<f64>>,
) -> Result<SimReport> {
    for &big_n in sizes {
        config.sampling_rule.n_for(big_n)?;
    }
    let z = normal_quantile(config.epsilon)?;
    let outcomes: Vec<Result<RepOutcome>> = (0..config.replications)
        .into_par_iter()
        .map(|r| {
            let mut rng = rep_rng(config.seed, r);
            let indices = srswor(sizes, &config.sampling_rule, &mut rng)?;
            let sample = frame.sample(&indices)?;
            let ffit = fit_fixed_effects(&sample)?;
            let per_area = sample
                .areas
                .iter()
                .enumerate()
                .zip(truths)
                .map(|((i, area), t)| {
                    let com = predict_fixed(area, i, &ffit, FixedKind::Composite, config.epsilon)?;
                    let syn = predict_fixed(area, i, &ffit, FixedKind::Synthetic, config.epsilon)?;
                    let methods = vec![
                        MethodRep {
                            est: com.point,
                            root_mse: (com.upper - com.point) / z,
                            covered: covers(com.lower, com.upper, t.ybar),
                            covered_eta: None,
                        },
                        MethodRep {
                            est: syn.point,
                            root_mse: (syn.upper - syn.point) / z,
                            covered: covers(syn.lower, syn.upper, t.ybar),
                            covered_eta: None,
                        },
                    ];
                    Ok((t.ybar, methods))
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(RepOutcome { per_area })
        })
        .collect();
    let names = vec!["com_fixed".into(), "syn_fixed".into()];
    aggregate(
        config,
        SimMode::DesignBasedFixedEffects,
        sizes,
        std_eblups,
        names,
        outcomes,
    )
}

/// Reduce replication outcomes into the per-area report. Failed
/// replications are excluded and counted.
fn aggregate(
    config: &SimConfig,
    mode: SimMode,
    sizes: &[u64],
    std_eblups: Option<Vec<f64>>,
    method_names: Vec<String>,
    outcomes: Vec<Result<RepOutcome>>,
) -> Result<SimReport> {
    let g = sizes.len();
    let m = method_names.len();
    let mut failures = 0usize;
    let mut count = 0usize;
    let mut covered = vec![vec![0usize; m]; g];
    let mut covered_eta = vec![vec![0usize; m]; g];
    let mut has_eta = vec![vec![false; m]; g];
    let mut sum_root = vec![vec![0.0f64; m]; g];
    let mut sum_sq_err = vec![vec![0.0f64; m]; g];
    let mut sum_err = vec![vec![0.0f64; m]; g];
    let mut sum_abs_truth = vec![0.0f64; g];

    // Walk replications in index order so the reduction is independent of
    // the parallel schedule.
    for outcome in outcomes {
        match outcome {
            Err(_) => failures += 1,
            Ok(rep) => {
                count += 1;
                for (i, (truth, methods)) in rep.per_area.iter().enumerate() {
                    sum_abs_truth[i] += truth.abs();
                    for (j, mr) in methods.iter().enumerate() {
                        if mr.covered {
                            covered[i][j] += 1;
                        }
                        if let Some(c) = mr.covered_eta {
                            has_eta[i][j] = true;
                            if c {
                                covered_eta[i][j] += 1;
                            }
                        }
                        sum_root[i][j] += mr.root_mse;
                        let err = mr.est - truth;
                        sum_sq_err[i][j] += err * err;
                        sum_err[i][j] += err;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(SaeError::InvalidValue(
            "all replications failed to fit".into(),
        ));
    }

    let rule = &config.sampling_rule;
    let areas = (0..g)
        .map(|i| {
            let n_i = rule.n_for(sizes[i])?;
            let mean_abs_truth = sum_abs_truth[i] / count as f64;
            let methods = (0..m)
                .map(|j| {
                    let cvge = covered[i][j] as f64 / count as f64;
                    let alen = sum_root[i][j] / count as f64;
                    let rmse_s = (sum_sq_err[i][j] / count as f64).sqrt();
                    let rlen = if rmse_s > 0.0 {
                        (alen - rmse_s).abs() / rmse_s
                    } else {
                        0.0
                    };
                    let rel_bias = if mean_abs_truth > 0.0 {
                        (sum_err[i][j] / count as f64) / mean_abs_truth
                    } else {
                        0.0
                    };
                    MethodMetrics {
                        cvge,
                        alen,
                        rmse_s,
                        rlen,
                        rel_bias,
                        mc_se_coverage: (cvge * (1.0 - cvge) / count as f64).sqrt(),
                        cvge_eta: has_eta[i][j]
                            .then(|| covered_eta[i][j] as f64 / count as f64),
                    }
                })
                .collect();
            Ok(AreaReport {
                area_id: format!("{}", i + 1),
                big_n: sizes[i],
                n_i,
                std_eblup: std_eblups.as_ref().map(|v| v[i]),
                methods,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SimReport {
        mode,
        method_names,
        areas,
        replications: count,
        failures,
    })
}
