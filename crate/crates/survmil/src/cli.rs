//! Command-line interface.
//!
//! Subcommands: `synth` (generate a cohort), `train`, `cv`, `eval`, and `km`
//! (export Kaplan-Meier curves as CSV plus a self-contained SVG). Exit codes
//! are stable: 0 success, 1 runtime failure, 2 usage error. Every run prints
//! the fully resolved configuration so an experiment is reproducible from
//! its log.

use crate::config::{PipelineConfig, KEY_DOCS};
use crate::dataio::{read_manifest, SyntheticSpec};
use crate::error::{Error, Result};
use crate::metrics::KmCurve;
use crate::trainer::{
    cross_validate, evaluate, load_checkpoint, save_checkpoint, train, CohortMetrics,
};
use clap::error::ErrorKind;
use clap::{Parser, Subcommand};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

#[derive(Debug, Parser)]
#[command(
    name = "survmil",
    version,
    about = "Survival prediction over bags of patch features",
    after_help = config_help()
)]
struct Cli {
    #[command(subcommand)]
    action: Action,
    /// Config file of key=value lines (see the key list below).
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key; repeatable, wins over the file.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Shorthand for --set jobs=N (parallel cv folds).
    #[arg(long, global = true)]
    jobs: Option<usize>,
    /// Output directory for cohorts, checkpoints, logs, and plots.
    #[arg(long, global = true, default_value = "survmil_out", value_name = "DIR")]
    out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Action {
    /// Generate a synthetic cohort with known risk structure.
    Synth,
    /// Train on the manifest and write a checkpoint.
    Train,
    /// K-fold cross-validation with per-fold and aggregate TDC.
    Cv,
    /// Evaluate a checkpoint on a manifest.
    Eval,
    /// Export Kaplan-Meier curves (CSV + SVG) for the median risk split.
    Km,
}

fn config_help() -> String {
    let mut out = String::from("Config keys (defaults shown):\n");
    for (key, default, doc) in KEY_DOCS {
        let shown = if default.is_empty() { "<unset>" } else { default };
        let _ = writeln!(out, "  {key:<18} {shown:<8} {doc}");
    }
    out
}

/// A fully resolved invocation.
#[derive(Debug)]
pub struct Command {
    pub action: Action,
    pub config: PipelineConfig,
    pub out_dir: PathBuf,
}

/// Outcome of argument parsing: either a runnable command or an immediate
/// exit (help/usage) with a message and code.
pub enum Parsed {
    Run(Box<Command>),
    Exit { message: String, code: i32 },
}

/// Parses argv into a validated command. Resolution order: defaults, then
/// the config file, then each --set, then the --seed/--jobs shorthands.
pub fn parse_args<I, S>(argv: I) -> Parsed
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 2,
            };
            return Parsed::Exit {
                message: e.render().to_string(),
                code,
            };
        }
    };
    let mut config = if let Some(path) = &cli.config {
        match PipelineConfig::from_file(path) {
            Ok(c) => c,
            Err(e) => {
                return Parsed::Exit {
                    message: format!("error: {e}"),
                    code: 2,
                }
            }
        }
    } else {
        PipelineConfig::default()
    };
    for assignment in &cli.set {
        let apply = assignment
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {assignment:?}")))
            .and_then(|(k, v)| config.set(k.trim(), v));
        if let Err(e) = apply {
            return Parsed::Exit {
                message: format!("error: {e}"),
                code: 2,
            };
        }
    }
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(jobs) = cli.jobs {
        config.jobs = jobs;
    }
    if let Err(e) = config.validate() {
        return Parsed::Exit {
            message: format!("error: {e}"),
            code: 2,
        };
    }
    Parsed::Run(Box::new(Command {
        action: cli.action,
        config,
        out_dir: cli.out_dir,
    }))
}

/// Entry point behind `main`; returns the process exit code.
pub fn main_entry() -> i32 {
    let parsed = parse_args(std::env::args_os());
    let command = match parsed {
        Parsed::Run(c) => c,
        Parsed::Exit { message, code } => {
            if code == 0 {
                println!("{message}");
            } else {
                eprintln!("{message}");
            }
            return code;
        }
    };
    match run(&command) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            1
        }
    }
}

fn ensure_out_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))
}

fn write_file(path: &Path, contents: &str) -> Result<()> {
    std::fs::write(path, contents).map_err(|e| Error::io(path.display().to_string(), e))
}

fn print_resolved(config: &PipelineConfig) {
    println!("resolved config:");
    for line in config.to_canonical_text().lines() {
        println!("  {line}");
    }
}

fn manifest_path(config: &PipelineConfig) -> Result<PathBuf> {
    if config.manifest.is_empty() {
        return Err(Error::Config(
            "no manifest configured; pass --set manifest=PATH".into(),
        ));
    }
    Ok(PathBuf::from(&config.manifest))
}

fn checkpoint_path(config: &PipelineConfig, out_dir: &Path) -> PathBuf {
    if config.checkpoint.is_empty() {
        out_dir.join("model.smck")
    } else {
        PathBuf::from(&config.checkpoint)
    }
}

/// Dispatches a parsed command.
pub fn run(command: &Command) -> Result<()> {
    let config = &command.config;
    let out_dir = &command.out_dir;
    ensure_out_dir(out_dir)?;
    print_resolved(config);
    write_file(&out_dir.join("resolved_config.txt"), &config.to_canonical_text())?;

    match command.action {
        Action::Synth => {
            let spec = SyntheticSpec {
                n_slides: config.synth_slides,
                patches_min: config.synth_patches_min,
                patches_max: config.synth_patches_max,
                d: config.synth_dim,
                phenotypes: config.synth_phenotypes,
                alphas: config.synth_alphas.clone(),
                betas: config.synth_betas.clone(),
                censoring: config.synth_censoring,
                seed: config.seed,
            };
            let cohort_dir = out_dir.join("cohort");
            let manifest = crate::dataio::generate_synthetic_cohort(&spec, &cohort_dir)?;
            println!(
                "wrote {} slides to {}",
                manifest.entries.len(),
                cohort_dir.join("manifest.csv").display()
            );
        }
        Action::Train => {
            let manifest = read_manifest(&manifest_path(config)?)?;
            let log_path = out_dir.join("train_log.jsonl");
            let mut log = std::fs::File::create(&log_path)
                .map_err(|e| Error::io(log_path.display().to_string(), e))?;
            let trained = train(config, &manifest, Some(&mut log))?;
            let ck = checkpoint_path(config, out_dir);
            save_checkpoint(&ck, &trained)?;
            let last = trained.epoch_logs.last().expect("at least one epoch");
            println!(
                "trained {} epochs on {} slides, final mean loss {:.6}",
                trained.epoch_logs.len(),
                manifest.entries.len(),
                last.mean_loss
            );
            println!("checkpoint written to {}", ck.display());
        }
        Action::Cv => {
            let manifest = read_manifest(&manifest_path(config)?)?;
            let outcome = cross_validate(config, &manifest)?;
            let report = outcome.report();
            print!("{report}");
            write_file(&out_dir.join("cv_report.txt"), &report)?;
            for fold in &outcome.folds {
                // retrain checkpoints are not kept per fold; persist the
                // per-fold metric reports instead
                write_file(
                    &out_dir.join(format!("fold{}_metrics.txt", fold.fold)),
                    &fold.metrics.report(),
                )?;
            }
        }
        Action::Eval => {
            let (model, _ck, _rng) = load_checkpoint(&checkpoint_path(config, out_dir))?;
            let manifest = read_manifest(&manifest_path(config)?)?;
            let metrics = evaluate(&model, &manifest)?;
            let report = metrics.report();
            print!("{report}");
            write_file(&out_dir.join("eval_metrics.txt"), &report)?;
        }
        Action::Km => {
            let (model, _ck, _rng) = load_checkpoint(&checkpoint_path(config, out_dir))?;
            let manifest = read_manifest(&manifest_path(config)?)?;
            let metrics = evaluate(&model, &manifest)?;
            write_km_artifacts(&metrics, out_dir)?;
            match &metrics.logrank {
                Some(lr) => println!("logrank p {:.6}", lr.p_value),
                None => println!("logrank undefined"),
            }
            println!("curves written to {}", out_dir.display());
        }
    }
    Ok(())
}

// ---- SVG emission -------------------------------------------------------

const SVG_W: f64 = 800.0;
const SVG_H: f64 = 600.0;
const MARGIN_L: f64 = 70.0;
const MARGIN_R: f64 = 30.0;
const MARGIN_T: f64 = 40.0;
const MARGIN_B: f64 = 60.0;

/// Self-contained Kaplan-Meier plot: two step curves over a shared time
/// axis, ticks at event times, and the log-rank p-value.
pub fn km_svg(high: &KmCurve, low: &KmCurve, p_value: Option<f64>) -> String {
    let t_max = high
        .times
        .iter()
        .chain(low.times.iter())
        .fold(1.0f64, |a, &b| a.max(b))
        * 1.05;
    let plot_w = SVG_W - MARGIN_L - MARGIN_R;
    let plot_h = SVG_H - MARGIN_T - MARGIN_B;
    let x = |t: f64| MARGIN_L + (t / t_max) * plot_w;
    let y = |s: f64| MARGIN_T + (1.0 - s) * plot_h;

    let step_path = |km: &KmCurve| -> String {
        let mut d = format!("M {:.2} {:.2}", x(0.0), y(1.0));
        let mut s = 1.0;
        for (&t, &sv) in km.times.iter().zip(&km.survival) {
            let _ = write!(d, " L {:.2} {:.2}", x(t), y(s));
            let _ = write!(d, " L {:.2} {:.2}", x(t), y(sv));
            s = sv;
        }
        let _ = write!(d, " L {:.2} {:.2}", x(t_max), y(s));
        d
    };

    // axis ticks at pooled event times, thinned to at most 12
    let mut ticks: Vec<f64> = high.times.iter().chain(low.times.iter()).copied().collect();
    ticks.sort_by(|a, b| a.partial_cmp(b).expect("finite times"));
    ticks.dedup();
    let stride = ticks.len().div_ceil(12).max(1);
    let ticks: Vec<f64> = ticks.into_iter().step_by(stride).collect();

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" viewBox="0 0 {SVG_W} {SVG_H}">"#
    );
    let _ = writeln!(
        svg,
        r#"<rect width="{SVG_W}" height="{SVG_H}" fill="white"/>"#
    );
    // axes
    let _ = writeln!(
        svg,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        MARGIN_L,
        y(0.0),
        x(t_max),
        y(0.0)
    );
    let _ = writeln!(
        svg,
        r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
        MARGIN_L,
        y(0.0),
        MARGIN_L,
        y(1.0)
    );
    for s in [0.0, 0.25, 0.5, 0.75, 1.0] {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="12" text-anchor="end">{s:.2}</text>"#,
            MARGIN_L - 8.0,
            y(s) + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
            MARGIN_L - 4.0,
            y(s),
            MARGIN_L,
            y(s)
        );
    }
    for &t in &ticks {
        let _ = writeln!(
            svg,
            r#"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="black"/>"#,
            x(t),
            y(0.0),
            x(t),
            y(0.0) + 4.0
        );
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="11" text-anchor="middle">{t:.1}</text>"#,
            x(t),
            y(0.0) + 18.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{:.2}" y="{:.2}" font-size="13" text-anchor="middle">time (months)</text>"#,
        MARGIN_L + plot_w / 2.0,
        SVG_H - 14.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{:.2}" font-size="13" transform="rotate(-90 16 {:.2})" text-anchor="middle">survival</text>"#,
        MARGIN_T + plot_h / 2.0,
        MARGIN_T + plot_h / 2.0
    );
    // curves
    let _ = writeln!(
        svg,
        r##"<path d="{}" fill="none" stroke="#d62728" stroke-width="2"/>"##,
        step_path(high)
    );
    let _ = writeln!(
        svg,
        r##"<path d="{}" fill="none" stroke="#1f77b4" stroke-width="2"/>"##,
        step_path(low)
    );
    // legend and p-value
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="13" fill="#d62728">high risk (n={})</text>"##,
        x(t_max) - 150.0,
        MARGIN_T + 16.0,
        high.at_risk.first().copied().unwrap_or(0)
    );
    let _ = writeln!(
        svg,
        r##"<text x="{:.2}" y="{:.2}" font-size="13" fill="#1f77b4">low risk (n={})</text>"##,
        x(t_max) - 150.0,
        MARGIN_T + 34.0,
        low.at_risk.first().copied().unwrap_or(0)
    );
    if let Some(p) = p_value {
        let _ = writeln!(
            svg,
            r#"<text x="{:.2}" y="{:.2}" font-size="13">log-rank p = {p:.4}</text>"#,
            x(t_max) - 150.0,
            MARGIN_T + 52.0
        );
    }
    svg.push_str("</svg>\n");
    svg
}

/// Writes the evaluation artifacts the `km` action produces; exposed for the
/// test suites.
pub fn write_km_artifacts(metrics: &CohortMetrics, out_dir: &Path) -> Result<()> {
    ensure_out_dir(out_dir)?;
    let (high, low) = match (&metrics.km_high, &metrics.km_low) {
        (Some(h), Some(l)) => (h, l),
        _ => return Err(Error::Insufficient("km needs both risk groups".into())),
    };
    write_file(&out_dir.join("km_high.csv"), &high.to_csv())?;
    write_file(&out_dir.join("km_low.csv"), &low.to_csv())?;
    let p = metrics.logrank.as_ref().map(|lr| lr.p_value);
    write_file(&out_dir.join("km.svg"), &km_svg(high, low, p))
}
