//! Domain types and design construction shared by fitting, prediction and
//! simulation: finite-population frames, per-area samples, model parameters
//! and the per-area sufficient statistics that drive the Woodbury-form GLS.

use nalgebra::{DMatrix, DVector};

use crate::{Result, SaeError};

/// One unit record of a finite population: within-area covariates and an
/// optional response (absent for prediction-only frames).
#[derive(Debug, Clone)]
pub struct Unit {
    pub x_w: Vec<f64>,
    pub y: Option<f64>,
}

/// All units of one area, together with the area-level design row.
///
/// `u` has length `p_b + 1` with a leading 1 for the intercept and is constant
/// within the area by construction, so it is stored once.
#[derive(Debug, Clone)]
pub struct AreaPopulation {
    pub area_id: String,
    pub u: Vec<f64>,
    pub units: Vec<Unit>,
}

impl AreaPopulation {
    /// Population size of the area.
    pub fn n_units(&self) -> u64 {
        self.units.len() as u64
    }

    /// Population mean of the within-area covariates.
    pub fn xbar_w(&self) -> Vec<f64> {
        let p_w = self.units.first().map_or(0, |u| u.x_w.len());
        let mut m = vec![0.0; p_w];
        for unit in &self.units {
            for (acc, &v) in m.iter_mut().zip(&unit.x_w) {
                *acc += v;
            }
        }
        let n = self.units.len() as f64;
        for acc in &mut m {
            *acc /= n;
        }
        m
    }

    /// Population mean of the response; `None` if any response is missing.
    pub fn ybar(&self) -> Option<f64> {
        let mut s = 0.0;
        for unit in &self.units {
            s += unit.y?;
        }
        Some(s / self.units.len() as f64)
    }
}

/// A finite population partitioned into areas, with consistent covariate
/// dimensions across the whole frame.
#[derive(Debug, Clone)]
pub struct PopulationFrame {
    pub areas: Vec<AreaPopulation>,
    pub p_b: usize,
    pub p_w: usize,
    /// Column names of the full design row `[u, x_w]`.
    pub colnames: Vec<String>,
}

impl PopulationFrame {
    pub fn new(areas: Vec<AreaPopulation>, colnames: Vec<String>) -> Result<Self> {
        let first = areas
            .first()
            .ok_or_else(|| SaeError::InvalidValue("population frame has no areas".into()))?;
        let p_b = first.u.len().saturating_sub(1);
        let p_w = first.units.first().map_or(0, |u| u.x_w.len());
        for area in &areas {
            if area.units.is_empty() {
                return Err(SaeError::EmptyArea(area.area_id.clone()));
            }
            if area.u.len() != p_b + 1 {
                return Err(SaeError::DimensionMismatch(format!(
                    "area {}: u has length {}, expected {}",
                    area.area_id,
                    area.u.len(),
                    p_b + 1
                )));
            }
            if (area.u[0] - 1.0).abs() > 0.0 {
                return Err(SaeError::InvalidValue(format!(
                    "area {}: leading entry of u must be 1 (intercept)",
                    area.area_id
                )));
            }
            for unit in &area.units {
                if unit.x_w.len() != p_w {
                    return Err(SaeError::DimensionMismatch(format!(
                        "area {}: within covariate vector has length {}, expected {}",
                        area.area_id,
                        unit.x_w.len(),
                        p_w
                    )));
                }
            }
        }
        if colnames.len() != p_b + 1 + p_w {
            return Err(SaeError::DimensionMismatch(format!(
                "{} column names for {} design columns",
                colnames.len(),
                p_b + 1 + p_w
            )));
        }
        Ok(Self {
            areas,
            p_b,
            p_w,
            colnames,
        })
    }

    pub fn n_areas(&self) -> usize {
        self.areas.len()
    }

    pub fn n_total(&self) -> u64 {
        self.areas.iter().map(|a| a.n_units()).sum()
    }

    /// Extract the sample defined by per-area index sets. Population
    /// within-area means are carried over from the frame.
    pub fn sample(&self, indices: &[Vec<usize>]) -> Result<SampleData> {
        if indices.len() != self.areas.len() {
            return Err(SaeError::DimensionMismatch(format!(
                "{} index sets for {} areas",
                indices.len(),
                self.areas.len()
            )));
        }
        let mut areas = Vec::with_capacity(self.areas.len());
        for (area, idx) in self.areas.iter().zip(indices) {
            if idx.is_empty() {
                return Err(SaeError::EmptyArea(area.area_id.clone()));
            }
            let units: Vec<SampledUnit> = idx
                .iter()
                .map(|&j| {
                    let unit = &area.units[j];
                    let y = unit.y.ok_or_else(|| {
                        SaeError::InvalidValue(format!(
                            "area {}: sampled unit {} has no response",
                            area.area_id, j
                        ))
                    })?;
                    Ok(SampledUnit {
                        x_w: unit.x_w.clone(),
                        y,
                    })
                })
                .collect::<Result<_>>()?;
            areas.push(AreaSample::new(
                area.area_id.clone(),
                area.n_units(),
                area.u.clone(),
                units,
                Some(area.xbar_w()),
            )?);
        }
        SampleData::new(areas, self.colnames.clone())
    }

    /// The whole population viewed as a sample (every unit selected).
    pub fn as_full_sample(&self) -> Result<SampleData> {
        let indices: Vec<Vec<usize>> = self
            .areas
            .iter()
            .map(|a| (0..a.units.len()).collect())
            .collect();
        self.sample(&indices)
    }
}

/// One sampled unit: within-area covariates and observed response.
#[derive(Debug, Clone)]
pub struct SampledUnit {
    pub x_w: Vec<f64>,
    pub y: f64,
}

/// The observed part of one area plus the known population quantities needed
/// for prediction.
#[derive(Debug, Clone)]
pub struct AreaSample {
    pub area_id: String,
    /// Population size N_i.
    pub big_n: u64,
    pub u: Vec<f64>,
    pub units: Vec<SampledUnit>,
    /// Population mean of the within covariates; `None` when the frame is
    /// unavailable (the sample-mean predictor then substitutes).
    pub xbar_w_pop: Option<Vec<f64>>,
    /// Sample mean of the within covariates.
    pub xbar_w_samp: Vec<f64>,
    /// Non-sampled fraction (N_i - n_i) / N_i.
    pub k: f64,
    /// Sampling fraction n_i / N_i.
    pub f: f64,
}

impl AreaSample {
    pub fn new(
        area_id: String,
        big_n: u64,
        u: Vec<f64>,
        units: Vec<SampledUnit>,
        xbar_w_pop: Option<Vec<f64>>,
    ) -> Result<Self> {
        let n_i = units.len() as u64;
        if n_i == 0 {
            return Err(SaeError::EmptyArea(area_id));
        }
        if n_i > big_n {
            return Err(SaeError::InvalidValue(format!(
                "area {area_id}: sample size {n_i} exceeds population size {big_n}"
            )));
        }
        let p_w = units[0].x_w.len();
        if let Some(pop) = &xbar_w_pop {
            if pop.len() != p_w {
                return Err(SaeError::DimensionMismatch(format!(
                    "area {area_id}: population mean has length {}, expected {p_w}",
                    pop.len()
                )));
            }
        }
        let mut xbar_w_samp = vec![0.0; p_w];
        for unit in &units {
            for (acc, &v) in xbar_w_samp.iter_mut().zip(&unit.x_w) {
                *acc += v;
            }
        }
        for acc in &mut xbar_w_samp {
            *acc /= n_i as f64;
        }
        // k and f computed once, in floating point, from the exact counts.
        let k = (big_n - n_i) as f64 / big_n as f64;
        let f = n_i as f64 / big_n as f64;
        Ok(Self {
            area_id,
            big_n,
            u,
            units,
            xbar_w_pop,
            xbar_w_samp,
            k,
            f,
        })
    }

    pub fn n_i(&self) -> usize {
        self.units.len()
    }

    pub fn ybar_s(&self) -> f64 {
        self.units.iter().map(|u| u.y).sum::<f64>() / self.units.len() as f64
    }

    /// Mean of the within covariates over the non-sampled units,
    /// reconstructed from the population and sample means.
    pub fn xbar_w_rest(&self) -> Result<Vec<f64>> {
        let pop = self
            .xbar_w_pop
            .as_ref()
            .ok_or_else(|| SaeError::MissingPopulationMeans(self.area_id.clone()))?;
        let n_i = self.n_i() as f64;
        let big_n = self.big_n as f64;
        if self.n_i() as u64 == self.big_n {
            // Fully enumerated area: no non-sampled units. The rest-mean is
            // never used in that case (k = 0); return the population mean.
            return Ok(pop.clone());
        }
        Ok(pop
            .iter()
            .zip(&self.xbar_w_samp)
            .map(|(&p, &s)| (big_n * p - n_i * s) / (big_n - n_i))
            .collect())
    }

    /// Sample-mean design row `[u, xbar_w_samp]`.
    pub fn zbar_s(&self) -> DVector<f64> {
        let mut z = Vec::with_capacity(self.u.len() + self.xbar_w_samp.len());
        z.extend_from_slice(&self.u);
        z.extend_from_slice(&self.xbar_w_samp);
        DVector::from_vec(z)
    }

    /// Population-mean design row `[u, xbar_w_pop]`, falling back to the
    /// sample means when the population means are unavailable.
    pub fn zbar_pop_or_samp(&self) -> DVector<f64> {
        let xw = self.xbar_w_pop.as_ref().unwrap_or(&self.xbar_w_samp);
        let mut z = Vec::with_capacity(self.u.len() + xw.len());
        z.extend_from_slice(&self.u);
        z.extend_from_slice(xw);
        DVector::from_vec(z)
    }
}

/// The observed sample across all areas.
#[derive(Debug, Clone)]
pub struct SampleData {
    pub areas: Vec<AreaSample>,
    pub p_b: usize,
    pub p_w: usize,
    pub colnames: Vec<String>,
}

impl SampleData {
    pub fn new(areas: Vec<AreaSample>, colnames: Vec<String>) -> Result<Self> {
        let first = areas
            .first()
            .ok_or_else(|| SaeError::InvalidValue("sample has no areas".into()))?;
        let p_b = first.u.len().saturating_sub(1);
        let p_w = first.units[0].x_w.len();
        for area in &areas {
            if area.u.len() != p_b + 1 {
                return Err(SaeError::DimensionMismatch(format!(
                    "area {}: u has length {}, expected {}",
                    area.area_id,
                    area.u.len(),
                    p_b + 1
                )));
            }
            for unit in &area.units {
                if unit.x_w.len() != p_w {
                    return Err(SaeError::DimensionMismatch(format!(
                        "area {}: within covariate vector has length {}, expected {p_w}",
                        area.area_id,
                        unit.x_w.len()
                    )));
                }
            }
        }
        if colnames.len() != p_b + 1 + p_w {
            return Err(SaeError::DimensionMismatch(format!(
                "{} column names for {} design columns",
                colnames.len(),
                p_b + 1 + p_w
            )));
        }
        Ok(Self {
            areas,
            p_b,
            p_w,
            colnames,
        })
    }

    /// Number of design columns `p_b + 1 + p_w`.
    pub fn p(&self) -> usize {
        self.p_b + 1 + self.p_w
    }

    pub fn g(&self) -> usize {
        self.areas.len()
    }

    pub fn n_total(&self) -> usize {
        self.areas.iter().map(|a| a.n_i()).sum()
    }
}

/// Parameters of the nested error regression model.
#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Intercept and between-area coefficients, length `p_b + 1`.
    pub xi: DVector<f64>,
    /// Within-area coefficients, length `p_w`.
    pub beta2: DVector<f64>,
    /// Between-area variance, >= 0 (0 is a flagged boundary value).
    pub sigma2_alpha: f64,
    /// Within-area variance, > 0.
    pub sigma2_e: f64,
}

impl ModelParams {
    /// Full coefficient vector `[xi, beta2]`.
    pub fn beta(&self) -> DVector<f64> {
        let mut v = Vec::with_capacity(self.xi.len() + self.beta2.len());
        v.extend(self.xi.iter().copied());
        v.extend(self.beta2.iter().copied());
        DVector::from_vec(v)
    }
}

/// Shrinkage factor `n_i sigma_alpha^2 / (sigma_e^2 + n_i sigma_alpha^2)`.
///
/// Monotone increasing in both `n_i` and `sigma2_alpha`; zero exactly when
/// `sigma2_alpha` is zero.
pub fn gamma(n_i: usize, sigma2_alpha: f64, sigma2_e: f64) -> f64 {
    debug_assert!(n_i >= 1);
    debug_assert!(sigma2_e >= 0.0);
    debug_assert!(sigma2_alpha >= 0.0);
    let t = n_i as f64 * sigma2_alpha;
    if sigma2_e + t == 0.0 {
        // Degenerate boundary fit (both variances zero): no shrinkage weight.
        return 0.0;
    }
    t / (sigma2_e + t)
}

/// Per-area one-pass reduction: sample means plus centered cross-products of
/// the full design row `z = [u, x_w]` and the response.
#[derive(Debug, Clone)]
pub struct AreaSuffStats {
    pub area_id: String,
    pub n_i: usize,
    pub big_n: u64,
    pub ybar_s: f64,
    /// Mean design row `[u, xbar_w_samp]`.
    pub zbar: DVector<f64>,
    /// `sum_j (z_j - zbar)(z_j - zbar)^T` (nonzero only in the within block).
    pub w_zz: DMatrix<f64>,
    /// `sum_j (z_j - zbar)(y_j - ybar)`.
    pub w_zy: DVector<f64>,
    /// `sum_j (y_j - ybar)^2`.
    pub w_yy: f64,
}

impl AreaSuffStats {
    pub fn gamma(&self, sigma2_alpha: f64, sigma2_e: f64) -> f64 {
        gamma(self.n_i, sigma2_alpha, sigma2_e)
    }
}

/// Compute the per-area sufficient statistics for the whole sample.
pub fn sufficient_stats(sample: &SampleData) -> Vec<AreaSuffStats> {
    let p = sample.p();
    sample
        .areas
        .iter()
        .map(|area| {
            let n_i = area.n_i();
            let ybar = area.ybar_s();
            let zbar = area.zbar_s();
            let mut w_zz = DMatrix::zeros(p, p);
            let mut w_zy = DVector::zeros(p);
            let mut w_yy = 0.0;
            let p_u = area.u.len();
            let mut dz = DVector::zeros(p);
            for unit in &area.units {
                // u is constant within the area, so the centered u-part is 0.
                for r in 0..p_u {
                    dz[r] = 0.0;
                }
                for (r, &x) in unit.x_w.iter().enumerate() {
                    dz[p_u + r] = x - zbar[p_u + r];
                }
                let dy = unit.y - ybar;
                for r in p_u..p {
                    for c in p_u..p {
                        w_zz[(r, c)] += dz[r] * dz[c];
                    }
                    w_zy[r] += dz[r] * dy;
                }
                w_yy += dy * dy;
            }
            AreaSuffStats {
                area_id: area.area_id.clone(),
                n_i,
                big_n: area.big_n,
                ybar_s: ybar,
                zbar,
                w_zz,
                w_zy,
                w_yy,
            }
        })
        .collect()
}

/// A raw unit record before design construction.
#[derive(Debug, Clone)]
pub struct RawRow {
    pub area_id: String,
    pub y: Option<f64>,
    pub x: Vec<f64>,
}

/// Options for [`build_design`].
#[derive(Debug, Clone, Copy, Default)]
pub struct DesignOptions {
    /// Replace each within covariate by its deviation from the population
    /// area mean.
    pub center_within: bool,
    /// Append the population area means of the covariates to the between-area
    /// design row as contextual effects.
    pub add_contextual_means: bool,
}

/// Build a population frame from raw unit records, optionally centering the
/// covariates about their population area means and appending those means as
/// contextual (between-area) effects.
pub fn build_design(
    rows: &[RawRow],
    covariate_names: &[String],
    opts: DesignOptions,
) -> Result<PopulationFrame> {
    if rows.is_empty() {
        return Err(SaeError::InvalidValue("no input rows".into()));
    }
    let p_raw = rows[0].x.len();
    if covariate_names.len() != p_raw {
        return Err(SaeError::DimensionMismatch(format!(
            "{} covariate names for {} covariates",
            covariate_names.len(),
            p_raw
        )));
    }
    // Group rows by area, preserving first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&RawRow>> =
        std::collections::HashMap::new();
    for row in rows {
        if row.x.len() != p_raw {
            return Err(SaeError::DimensionMismatch(format!(
                "area {}: record has {} covariates, expected {p_raw}",
                row.area_id,
                row.x.len()
            )));
        }
        groups
            .entry(row.area_id.clone())
            .or_insert_with(|| {
                order.push(row.area_id.clone());
                Vec::new()
            })
            .push(row);
    }

    let mut areas = Vec::with_capacity(order.len());
    for id in &order {
        let rows = &groups[id];
        let n = rows.len() as f64;
        let mut means = vec![0.0; p_raw];
        for row in rows.iter() {
            for (acc, &v) in means.iter_mut().zip(&row.x) {
                *acc += v;
            }
        }
        for acc in &mut means {
            *acc /= n;
        }
        let mut u = vec![1.0];
        if opts.add_contextual_means {
            u.extend_from_slice(&means);
        }
        let units = rows
            .iter()
            .map(|row| {
                let x_w = if opts.center_within {
                    row.x.iter().zip(&means).map(|(&x, &m)| x - m).collect()
                } else {
                    row.x.clone()
                };
                Unit { x_w, y: row.y }
            })
            .collect();
        areas.push(AreaPopulation {
            area_id: id.clone(),
            u,
            units,
        });
    }

    let mut colnames = vec!["intercept".to_string()];
    if opts.add_contextual_means {
        colnames.extend(covariate_names.iter().map(|n| format!("{n}_avg")));
    }
    if opts.center_within {
        colnames.extend(covariate_names.iter().map(|n| format!("{n}_cent")));
    } else {
        colnames.extend(covariate_names.iter().cloned());
    }
    PopulationFrame::new(areas, colnames)
}
