//! Command-line front end: fitting, prediction and simulation orchestration.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};

use sae::fit::{asymptotic_covariance, fit, FitMethod, MomentSource};
use sae::io;
use sae::model::DesignOptions;
use sae::predict::{
    fit_fixed_effects, normal_quantile, predict_all, predict_fixed, FixedKind,
};
use sae::sim::{self, AreaSizes, EffectDist, SamplingRule, SimConfig, SimMode};

#[derive(Parser)]
#[command(
    name = "sae",
    version,
    about = "Small area estimation under the nested error regression model"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Fit the mixed model to a sample CSV and write a parameter summary.
    Fit(FitArgs),
    /// Compute per-area predictions, MSE estimates and intervals.
    Predict(PredictArgs),
    /// Run a Monte Carlo evaluation and write the coverage report.
    Simulate(SimulateArgs),
}

#[derive(Args)]
struct CommonIo {
    /// Output directory (default: env SAE_OUT_DIR, then the current
    /// directory).
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

impl CommonIo {
    fn resolve(&self) -> anyhow::Result<PathBuf> {
        let dir = self
            .out_dir
            .clone()
            .or_else(|| std::env::var_os("SAE_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("."));
        std::fs::create_dir_all(&dir)
            .with_context(|| format!("creating output directory {}", dir.display()))?;
        Ok(dir)
    }
}

#[derive(Args)]
struct DesignArgs {
    /// Center within-area covariates about their population area means.
    #[arg(long)]
    center: bool,
    /// Append population area means of the covariates as contextual
    /// (between-area) effects.
    #[arg(long)]
    contextual: bool,
}

impl DesignArgs {
    fn options(&self) -> DesignOptions {
        DesignOptions {
            center_within: self.center,
            add_contextual_means: self.contextual,
        }
    }
}

#[derive(Args)]
struct FitArgs {
    /// Sample CSV (`area,y,<covariates...>[,sampled]`).
    sample_csv: PathBuf,
    /// Estimation criterion.
    #[arg(long, default_value = "reml", value_parser = parse_method)]
    method: FitMethod,
    /// Area-means CSV (`area,N_i,<covariate means...>`).
    #[arg(long)]
    area_means: Option<PathBuf>,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    io: CommonIo,
}

#[derive(Args)]
struct PredictArgs {
    /// Sample CSV (`area,y,<covariates...>[,sampled]`).
    sample_csv: PathBuf,
    /// Area-means CSV supplying N_i and population covariate means.
    #[arg(long)]
    area_means: Option<PathBuf>,
    #[arg(long, default_value = "reml", value_parser = parse_method)]
    method: FitMethod,
    /// Interval level: 100(1-epsilon)% intervals.
    #[arg(long, default_value_t = 0.05)]
    epsilon: f64,
    /// Substitute sample covariate means when population means are missing.
    #[arg(long)]
    sam_star: bool,
    /// Use the fixed-area-effects estimators instead of the mixed model.
    #[arg(long)]
    fixed_effects: bool,
    #[command(flatten)]
    design: DesignArgs,
    #[command(flatten)]
    io: CommonIo,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Built-in setting: table1, table2, table3, table4 or milk-protocol.
    #[arg(long)]
    preset: Option<String>,
    /// Population CSV for design-based runs on external data.
    #[arg(long)]
    population: Option<PathBuf>,
    /// Override the replication count.
    #[arg(long)]
    replications: Option<usize>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the interval level.
    #[arg(long)]
    epsilon: Option<f64>,
    /// Worker threads (default: all cores).
    #[arg(long)]
    workers: Option<usize>,
    #[command(flatten)]
    io: CommonIo,
}

fn parse_method(s: &str) -> Result<FitMethod, String> {
    match s {
        "ml" => Ok(FitMethod::Ml),
        "reml" => Ok(FitMethod::Reml),
        other => Err(format!("unknown method {other:?} (expected ml or reml)")),
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Fit(args) => cmd_fit(args),
        Command::Predict(args) => cmd_predict(args),
        Command::Simulate(args) => cmd_simulate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err:#}");
        std::process::exit(1);
    }
}

fn load_sample(
    sample_csv: &Path,
    area_means: Option<&Path>,
    opts: DesignOptions,
) -> anyhow::Result<sae::model::SampleData> {
    let unit = io::read_unit_csv(sample_csv)?;
    let means = area_means.map(io::read_area_means_csv).transpose()?;
    Ok(io::sample_from_parts(&unit, means.as_ref(), opts)?)
}

fn cmd_fit(args: FitArgs) -> anyhow::Result<()> {
    let out_dir = args.io.resolve()?;
    let mut manifest = io::RunManifest::new("fit", None, None);
    manifest.add_input(&args.sample_csv)?;
    if let Some(m) = &args.area_means {
        manifest.add_input(m)?;
    }

    let sample = load_sample(
        &args.sample_csv,
        args.area_means.as_deref(),
        args.design.options(),
    )?;
    let fitted = fit(&sample, args.method)?;
    let cov = asymptotic_covariance(&fitted, &sample, MomentSource::NormalTheory)?;
    let summary = io::fit_summary_text(&fitted, &cov, &sample.colnames);
    let path = out_dir.join("fit_summary.txt");
    std::fs::write(&path, &summary)?;
    manifest.write(&out_dir.join("fit_manifest.json"))?;
    print!("{summary}");
    Ok(())
}

fn cmd_predict(args: PredictArgs) -> anyhow::Result<()> {
    let out_dir = args.io.resolve()?;
    let mut manifest = io::RunManifest::new("predict", None, None);
    manifest.add_input(&args.sample_csv)?;
    if let Some(m) = &args.area_means {
        manifest.add_input(m)?;
    }

    let sample = load_sample(
        &args.sample_csv,
        args.area_means.as_deref(),
        args.design.options(),
    )?;

    if args.fixed_effects {
        let ffit = fit_fixed_effects(&sample)?;
        if !ffit.dropped.is_empty() {
            eprintln!(
                "note: dropped collinear columns: {}",
                ffit.dropped.join(", ")
            );
        }
        let z = normal_quantile(args.epsilon)?;
        let _ = z;
        let mut w = csv::Writer::from_path(out_dir.join("predictions.csv"))?;
        w.write_record([
            "area", "N_i", "n_i", "com", "lo_com", "hi_com", "syn", "lo_syn", "hi_syn",
        ])?;
        for (i, area) in sample.areas.iter().enumerate() {
            let com = predict_fixed(area, i, &ffit, FixedKind::Composite, args.epsilon)?;
            let syn = predict_fixed(area, i, &ffit, FixedKind::Synthetic, args.epsilon)?;
            w.write_record([
                area.area_id.clone(),
                area.big_n.to_string(),
                area.n_i().to_string(),
                io::fmt_sig(com.point, 6),
                io::fmt_sig(com.lower, 6),
                io::fmt_sig(com.upper, 6),
                io::fmt_sig(syn.point, 6),
                io::fmt_sig(syn.lower, 6),
                io::fmt_sig(syn.upper, 6),
            ])?;
        }
        w.flush()?;
        manifest.write(&out_dir.join("predict_manifest.json"))?;
        return Ok(());
    }

    let fitted = fit(&sample, args.method)?;
    let cov = asymptotic_covariance(&fitted, &sample, MomentSource::NormalTheory)?;
    let preds = predict_all(&sample, &fitted, &cov, args.epsilon, args.sam_star)?;
    io::write_predictions(&out_dir.join("predictions.csv"), &preds, false)?;
    io::write_predictions(&out_dir.join("predictions_raw.csv"), &preds, true)?;
    manifest.write(&out_dir.join("predict_manifest.json"))?;
    Ok(())
}

/// Built-in simulation settings.
fn preset_config(name: &str) -> anyhow::Result<SimConfig> {
    let base = SimConfig {
        g: 15,
        area_sizes: AreaSizes::Random,
        beta: vec![5.0, 7.0, 3.0],
        sigma2_alpha: 4.0,
        sigma2_e: 100.0,
        dist_alpha: EffectDist::Normal,
        dist_e: EffectDist::Normal,
        sampling_rule: SamplingRule::default(),
        replications: 1000,
        epsilon: 0.05,
        seed: 1,
        mode: SimMode::ModelBased,
        redraw_covariates: false,
    };
    Ok(match name {
        // Model-based, normal effects and errors.
        "table1" => base,
        // Model-based, mixture area effects with a large between variance.
        "table2" => SimConfig {
            sigma2_alpha: 64.0,
            dist_alpha: EffectDist::Mixture,
            ..base
        },
        // Design-based on one frozen generated population.
        "table3" => SimConfig {
            g: 30,
            mode: SimMode::DesignBased,
            ..base
        },
        // As table3 but with the fixed-area-effects estimators.
        "table4" => SimConfig {
            g: 30,
            mode: SimMode::DesignBasedFixedEffects,
            ..base
        },
        // Design-based protocol for an external pseudo-population
        // (supply --population); small-area floor 20.
        "milk-protocol" => SimConfig {
            mode: SimMode::DesignBased,
            sampling_rule: SamplingRule {
                floor: 20,
                ..SamplingRule::default()
            },
            ..base
        },
        other => bail!("unknown preset {other:?}"),
    })
}

fn cmd_simulate(args: SimulateArgs) -> anyhow::Result<()> {
    let out_dir = args.io.resolve()?;
    if let Some(workers) = args.workers {
        rayon::ThreadPoolBuilder::new()
            .num_threads(workers)
            .build_global()
            .context("configuring worker pool")?;
    }

    let mut config = match (&args.config, &args.preset) {
        (Some(path), None) => io::read_sim_config(path)?,
        (None, Some(name)) => preset_config(name)?,
        (Some(path), Some(name)) => {
            // Preset supplies defaults; the config file overrides them field
            // by field is not supported — be explicit.
            bail!(
                "pass either --config {} or --preset {}, not both",
                path.display(),
                name
            );
        }
        (None, None) => bail!("simulate needs --config or --preset"),
    };
    if let Some(r) = args.replications {
        config.replications = r;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    if let Some(e) = args.epsilon {
        config.epsilon = e;
    }

    let mut manifest = io::RunManifest::new("simulate", args.config.as_deref(), Some(config.seed));
    if let Some(path) = &args.config {
        manifest.add_input(path)?;
    }

    let report = match &args.population {
        None => sim::run(&config)?,
        Some(path) => {
            manifest.add_input(path)?;
            let unit = io::read_unit_csv(path)?;
            let (frame, _) = io::frame_from_unit_csv(
                &unit,
                DesignOptions {
                    center_within: true,
                    add_contextual_means: true,
                },
            )?;
            config.g = frame.areas.len();
            match config.mode {
                SimMode::DesignBasedFixedEffects => {
                    sim::run_design_based_fixed_frame(&config, &frame)?
                }
                _ => sim::run_design_based_frame(&config, &frame)?,
            }
        }
    };

    io::write_report(&out_dir.join("report.csv"), &report, false)?;
    io::write_report(&out_dir.join("report_raw.csv"), &report, true)?;
    manifest.write(&out_dir.join("simulate_manifest.json"))?;
    if report.failures > 0 {
        eprintln!(
            "note: {} of {} replications failed to fit and were excluded",
            report.failures,
            report.failures + report.replications
        );
    }
    println!(
        "wrote {} ({} areas, {} replications)",
        out_dir.join("report.csv").display(),
        report.areas.len(),
        report.replications
    );
    Ok(())
}
