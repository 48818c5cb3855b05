//! CSV ingestion and emission, configuration files, and run manifests.
//!
//! Unit-level CSV: `area,y,<covariates...>[,sampled]`. Area-means CSV:
//! `area,N_i,<covariate means...>`. Report and prediction CSVs are rendered
//! with 6 significant digits, with an optional full-precision "raw" variant.

use std::io::Read as _;
use std::path::Path;

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::fit::{AsymptoticCovariance, FittedModel};
use crate::model::{
    build_design, AreaSample, DesignOptions, PopulationFrame, RawRow, SampleData, SampledUnit,
};
use crate::predict::AreaPrediction;
use crate::sim::{SimConfig, SimReport};
use crate::{Result, SaeError};

/// Parsed unit-level CSV.
#[derive(Debug, Clone)]
pub struct UnitCsv {
    pub rows: Vec<RawRow>,
    pub covariate_names: Vec<String>,
    /// Per-row inclusion flags when a `sampled` column is present.
    pub sampled: Option<Vec<bool>>,
}

fn csv_err(line: u64, message: impl Into<String>) -> SaeError {
    SaeError::Csv {
        line,
        message: message.into(),
    }
}

fn parse_f64(field: &str, line: u64, col: &str) -> Result<f64> {
    field
        .trim()
        .parse::<f64>()
        .map_err(|_| csv_err(line, format!("column {col}: not a number: {field:?}")))
}

/// Read a unit-level CSV (`area,y,<covariates...>[,sampled]`). An empty `y`
/// field yields a missing response.
pub fn read_unit_csv(path: &Path) -> Result<UnitCsv> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(0, e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.len() < 2 || headers[0] != "area" || headers[1] != "y" {
        return Err(csv_err(
            1,
            format!("expected header starting with `area,y`, got {headers:?}"),
        ));
    }
    let sampled_col = headers.iter().position(|h| h == "sampled");
    let cov_cols: Vec<usize> = (2..headers.len())
        .filter(|c| Some(*c) != sampled_col)
        .collect();
    let covariate_names: Vec<String> = cov_cols.iter().map(|&c| headers[c].clone()).collect();

    let mut rows = Vec::new();
    let mut sampled = sampled_col.map(|_| Vec::new());
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(csv_err(
                line,
                format!("{} fields, expected {}", record.len(), headers.len()),
            ));
        }
        let area_id = record[0].to_string();
        if area_id.is_empty() {
            return Err(csv_err(line, "empty area id"));
        }
        let y = if record[1].is_empty() {
            None
        } else {
            Some(parse_f64(&record[1], line, "y")?)
        };
        let x = cov_cols
            .iter()
            .map(|&c| parse_f64(&record[c], line, &headers[c]))
            .collect::<Result<Vec<f64>>>()?;
        if let (Some(col), Some(flags)) = (sampled_col, sampled.as_mut()) {
            let field = record[col].trim();
            let flag = match field {
                "1" | "true" | "TRUE" | "yes" => true,
                "0" | "false" | "FALSE" | "no" => false,
                other => {
                    return Err(csv_err(
                        line,
                        format!("column sampled: expected 0/1, got {other:?}"),
                    ))
                }
            };
            flags.push(flag);
        }
        rows.push(RawRow { area_id, y, x });
    }
    if rows.is_empty() {
        return Err(csv_err(0, "no data rows"));
    }
    Ok(UnitCsv {
        rows,
        covariate_names,
        sampled,
    })
}

/// Parsed area-means CSV (`area,N_i,<covariate means...>`).
#[derive(Debug, Clone)]
pub struct AreaMeans {
    pub colnames: Vec<String>,
    /// `(area id, N_i, covariate means)` per area.
    pub entries: Vec<(String, u64, Vec<f64>)>,
}

impl AreaMeans {
    pub fn lookup(&self, area_id: &str) -> Option<&(String, u64, Vec<f64>)> {
        self.entries.iter().find(|(id, _, _)| id == area_id)
    }
}

/// Read an area-means CSV.
pub fn read_area_means_csv(path: &Path) -> Result<AreaMeans> {
    let mut reader = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| csv_err(0, e.to_string()))?;
    let headers: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(0, e.to_string()))?
        .iter()
        .map(|h| h.to_string())
        .collect();
    if headers.len() < 2 || headers[0] != "area" || headers[1] != "N_i" {
        return Err(csv_err(
            1,
            format!("expected header starting with `area,N_i`, got {headers:?}"),
        ));
    }
    let colnames: Vec<String> = headers[2..].to_vec();
    let mut entries = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_err(e.position().map_or(0, |p| p.line()), e.to_string()))?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != headers.len() {
            return Err(csv_err(
                line,
                format!("{} fields, expected {}", record.len(), headers.len()),
            ));
        }
        let area_id = record[0].to_string();
        let big_n = record[1]
            .trim()
            .parse::<u64>()
            .map_err(|_| csv_err(line, format!("column N_i: not a count: {:?}", &record[1])))?;
        if big_n == 0 {
            return Err(csv_err(line, "N_i must be positive"));
        }
        let means = (2..record.len())
            .map(|c| parse_f64(&record[c], line, &headers[c]))
            .collect::<Result<Vec<f64>>>()?;
        entries.push((area_id, big_n, means));
    }
    if entries.is_empty() {
        return Err(csv_err(0, "no data rows"));
    }
    Ok(AreaMeans { colnames, entries })
}

/// Build a population frame from a unit CSV covering the whole population
/// (design options applied), plus the sample index sets from the `sampled`
/// flags when present.
pub fn frame_from_unit_csv(
    unit: &UnitCsv,
    opts: DesignOptions,
) -> Result<(PopulationFrame, Option<Vec<Vec<usize>>>)> {
    let frame = build_design(&unit.rows, &unit.covariate_names, opts)?;
    let indices = match &unit.sampled {
        None => None,
        Some(flags) => {
            // The frame groups rows by area in first-appearance order; walk
            // the raw rows again to map flags onto per-area indices.
            let mut per_area: Vec<Vec<usize>> = vec![Vec::new(); frame.areas.len()];
            let mut counters: std::collections::HashMap<&str, usize> =
                std::collections::HashMap::new();
            let area_pos: std::collections::HashMap<&str, usize> = frame
                .areas
                .iter()
                .enumerate()
                .map(|(i, a)| (a.area_id.as_str(), i))
                .collect();
            for (row, &flag) in unit.rows.iter().zip(flags) {
                let pos = area_pos[row.area_id.as_str()];
                let within = counters.entry(row.area_id.as_str()).or_insert(0);
                if flag {
                    per_area[pos].push(*within);
                }
                *within += 1;
            }
            Some(per_area)
        }
    };
    Ok((frame, indices))
}

/// Build sample data from sample-only unit rows plus (optionally) an
/// area-means CSV supplying the population sizes and covariate means.
///
/// With `center_within`, covariates are centered about the population means
/// from the CSV (falling back to sample means when absent), so the centered
/// population means are zero; with `add_contextual_means`, those means join
/// the between-area design row.
pub fn sample_from_parts(
    unit: &UnitCsv,
    means: Option<&AreaMeans>,
    opts: DesignOptions,
) -> Result<SampleData> {
    let rows: Vec<&RawRow> = match &unit.sampled {
        None => unit.rows.iter().collect(),
        Some(flags) => unit
            .rows
            .iter()
            .zip(flags)
            .filter(|(_, &f)| f)
            .map(|(r, _)| r)
            .collect(),
    };
    if rows.is_empty() {
        return Err(SaeError::InvalidValue("no sampled rows".into()));
    }
    let p_raw = unit.covariate_names.len();
    if let Some(m) = means {
        if m.colnames.len() != p_raw {
            return Err(SaeError::DimensionMismatch(format!(
                "area-means file has {} covariate columns, expected {p_raw}",
                m.colnames.len()
            )));
        }
    }

    // Group by area in first-appearance order.
    let mut order: Vec<String> = Vec::new();
    let mut groups: std::collections::HashMap<String, Vec<&RawRow>> =
        std::collections::HashMap::new();
    for row in rows {
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
        let group = &groups[id];
        let n_i = group.len() as u64;
        let entry = means.map(|m| {
            m.lookup(id)
                .ok_or_else(|| SaeError::InvalidValue(format!("area {id} missing from area-means file")))
        });
        let entry = match entry {
            Some(r) => Some(r?),
            None => None,
        };
        let big_n = entry.map_or(n_i, |(_, n, _)| *n);
        let samp_means: Vec<f64> = {
            let mut m = vec![0.0; p_raw];
            for row in group.iter() {
                for (acc, &v) in m.iter_mut().zip(&row.x) {
                    *acc += v;
                }
            }
            for acc in &mut m {
                *acc /= n_i as f64;
            }
            m
        };
        let center: Vec<f64> = entry
            .map(|(_, _, m)| m.clone())
            .unwrap_or_else(|| samp_means.clone());

        let mut u = vec![1.0];
        if opts.add_contextual_means {
            u.extend_from_slice(&center);
        }
        let units: Vec<SampledUnit> = group
            .iter()
            .map(|row| {
                let y = row.y.ok_or_else(|| {
                    SaeError::InvalidValue(format!("area {id}: sampled unit has no response"))
                })?;
                let x_w = if opts.center_within {
                    row.x.iter().zip(&center).map(|(&x, &c)| x - c).collect()
                } else {
                    row.x.clone()
                };
                Ok(SampledUnit { x_w, y })
            })
            .collect::<Result<_>>()?;
        let xbar_w_pop = match (entry, opts.center_within) {
            (Some(_), true) => Some(vec![0.0; p_raw]),
            (Some((_, _, m)), false) => Some(m.clone()),
            (None, _) => None,
        };
        areas.push(AreaSample::new(id.clone(), big_n, u, units, xbar_w_pop)?);
    }

    let mut colnames = vec!["intercept".to_string()];
    if opts.add_contextual_means {
        colnames.extend(unit.covariate_names.iter().map(|n| format!("{n}_avg")));
    }
    if opts.center_within {
        colnames.extend(unit.covariate_names.iter().map(|n| format!("{n}_cent")));
    } else {
        colnames.extend(unit.covariate_names.iter().cloned());
    }
    SampleData::new(areas, colnames)
}

/// Render with `digits` significant digits.
pub fn fmt_sig(x: f64, digits: usize) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x}");
    }
    let mag = x.abs().log10().floor() as i32;
    let decimals = (digits as i32 - 1 - mag).max(0) as usize;
    format!("{:.*}", decimals, x)
}

/// Render with full precision (17 significant digits round-trips f64).
pub fn fmt_raw(x: f64) -> String {
    format!("{:.16e}", x)
}

type Fmt = fn(f64) -> String;

fn fmt6(x: f64) -> String {
    fmt_sig(x, 6)
}

/// Write the prediction CSV
/// (`area,N_i,n_i,alpha_hat,sam,clp,sam_star,mse_lw,mse_pr,lo_sam_lw,...`).
pub fn write_predictions(path: &Path, preds: &[AreaPrediction], raw: bool) -> Result<()> {
    let f: Fmt = if raw { fmt_raw } else { fmt6 };
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(0, e.to_string()))?;
    w.write_record([
        "area", "N_i", "n_i", "alpha_hat", "sam", "clp", "sam_star", "mse_lw", "mse_pr",
        "lo_sam_lw", "hi_sam_lw", "lo_clp_lw", "hi_clp_lw", "lo_clp_pr", "hi_clp_pr",
    ])
    .map_err(|e| csv_err(0, e.to_string()))?;
    for p in preds {
        w.write_record([
            p.area_id.clone(),
            p.big_n.to_string(),
            p.n_i.to_string(),
            f(p.alpha_hat),
            f(p.sam),
            f(p.clp),
            f(p.sam_star),
            f(p.mse_lw),
            f(p.mse_pr),
            f(p.interval_sam_lw.0),
            f(p.interval_sam_lw.1),
            f(p.interval_clp_lw.0),
            f(p.interval_clp_lw.1),
            f(p.interval_clp_pr.0),
            f(p.interval_clp_pr.1),
        ])
        .map_err(|e| csv_err(0, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Write the simulation report CSV
/// (`area,N_i,n_i,std_eblup,cvge_<m>,rlen_<m>,...` per method). The raw
/// variant appends `alen`, `rmse_s`, `rel_bias`, `mc_se` and (when defined)
/// `cvge_eta` columns per method.
pub fn write_report(path: &Path, report: &SimReport, raw: bool) -> Result<()> {
    let f: Fmt = if raw { fmt_raw } else { fmt6 };
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(0, e.to_string()))?;
    let mut header = vec![
        "area".to_string(),
        "N_i".to_string(),
        "n_i".to_string(),
        "std_eblup".to_string(),
    ];
    for m in &report.method_names {
        header.push(format!("cvge_{m}"));
        header.push(format!("rlen_{m}"));
    }
    if raw {
        for m in &report.method_names {
            header.push(format!("alen_{m}"));
            header.push(format!("rmse_s_{m}"));
            header.push(format!("rel_bias_{m}"));
            header.push(format!("mc_se_{m}"));
            header.push(format!("cvge_eta_{m}"));
        }
    }
    w.write_record(&header).map_err(|e| csv_err(0, e.to_string()))?;
    for area in &report.areas {
        let mut rec = vec![
            area.area_id.clone(),
            area.big_n.to_string(),
            area.n_i.to_string(),
            area.std_eblup.map_or("NA".to_string(), f),
        ];
        for mm in &area.methods {
            rec.push(f(mm.cvge));
            rec.push(f(mm.rlen));
        }
        if raw {
            for mm in &area.methods {
                rec.push(f(mm.alen));
                rec.push(f(mm.rmse_s));
                rec.push(f(mm.rel_bias));
                rec.push(f(mm.mc_se_coverage));
                rec.push(mm.cvge_eta.map_or("NA".to_string(), f));
            }
        }
        w.write_record(&rec).map_err(|e| csv_err(0, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Flat key-value fit summary block.
pub fn fit_summary_text(
    fit: &FittedModel,
    cov: &AsymptoticCovariance,
    colnames: &[String],
) -> String {
    let mut out = String::new();
    let se = cov.standard_errors();
    out.push_str(&format!("method = {}\n", fit.method));
    out.push_str(&format!("converged = {}\n", fit.converged));
    out.push_str(&format!("boundary_alpha = {}\n", fit.boundary_alpha));
    out.push_str(&format!("loglik = {}\n", fmt_sig(fit.loglik, 10)));
    out.push_str(&format!("n = {}\n", fit.n));
    out.push_str(&format!("g = {}\n", fit.g));
    let beta = fit.params.beta();
    let p_b = fit.p_b;
    for (i, name) in colnames.iter().enumerate() {
        // Standard-error vector order: [xi, sigma2_alpha, beta2, sigma2_e].
        let se_idx = if i <= p_b { i } else { i + 1 };
        out.push_str(&format!(
            "coef_{name} = {} (se {})\n",
            fmt_sig(beta[i], 10),
            fmt_sig(se[se_idx], 6)
        ));
    }
    out.push_str(&format!(
        "sigma2_alpha = {} (se {})\n",
        fmt_sig(fit.params.sigma2_alpha, 10),
        fmt_sig(se[p_b + 1], 6)
    ));
    out.push_str(&format!(
        "sigma2_e = {} (se {})\n",
        fmt_sig(fit.params.sigma2_e, 10),
        fmt_sig(se[se.len() - 1], 6)
    ));
    out
}

/// Read a TOML simulation configuration.
pub fn read_sim_config(path: &Path) -> Result<SimConfig> {
    let text = std::fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| SaeError::Config(e.to_string()))
}

/// SHA-256 digest of a file, lowercase hex.
pub fn sha256_file(path: &Path) -> Result<String> {
    let mut file = std::fs::File::open(path)?;
    let mut hasher = Sha256::new();
    let mut buf = [0u8; 65536];
    loop {
        let n = file.read(&mut buf)?;
        if n == 0 {
            break;
        }
        hasher.update(&buf[..n]);
    }
    Ok(format!("{:x}", hasher.finalize()))
}

/// Provenance record emitted alongside every output file.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    pub config_path: Option<String>,
    pub seed: Option<u64>,
    pub version: String,
    pub inputs: Vec<FileDigest>,
    pub started: String,
    pub finished: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct FileDigest {
    pub path: String,
    pub sha256: String,
}

impl RunManifest {
    pub fn new(command: &str, config_path: Option<&Path>, seed: Option<u64>) -> Self {
        Self {
            command: command.to_string(),
            config_path: config_path.map(|p| p.display().to_string()),
            seed,
            version: env!("CARGO_PKG_VERSION").to_string(),
            inputs: Vec::new(),
            started: chrono::Utc::now().to_rfc3339(),
            finished: String::new(),
        }
    }

    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        self.inputs.push(FileDigest {
            path: path.display().to_string(),
            sha256: sha256_file(path)?,
        });
        Ok(())
    }

    pub fn write(&mut self, path: &Path) -> Result<()> {
        self.finished = chrono::Utc::now().to_rfc3339();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| SaeError::Config(e.to_string()))?;
        std::fs::write(path, text + "\n")?;
        Ok(())
    }
}
