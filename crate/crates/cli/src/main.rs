use std::fmt::Write as _;
use std::fs;
use std::io::BufWriter;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use xsmoe_core::data::synth::{synthesize, write_world, SynthConfig, SynthPaths};
use xsmoe_core::data::{load_interactions, read_cache, FeatureCache};
use xsmoe_core::model::checkpoint;
use xsmoe_core::numerics::ChaCha8Rng;
use xsmoe_core::stream::{parse_report, write_report, ParsedReport, StreamObserver, StreamRunner, WindowReport};
use xsmoe_core::{Error, Modality, RunConfig, XsmoeModel};

#[derive(Parser)]
#[command(name = "xsmoe", version, about = "Streaming multimodal recommendation with expandable side experts")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic interaction stream, two feature caches, and ground truth.
    Synth(SynthArgs),
    /// Run the streaming protocol and write JSON-lines reports.
    Run(RunArgs),
    /// Summarize report files as a text table plus CSV.
    Report(ReportArgs),
    /// Check that feature caches are well-formed.
    ValidateCache(ValidateArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    #[arg(long, default_value_t = 2000)]
    users: usize,
    #[arg(long, default_value_t = 500)]
    items: usize,
    #[arg(long, default_value_t = 6)]
    windows: usize,
    #[arg(long, default_value_t = 0.5)]
    drift: f64,
    #[arg(long, default_value_t = 2000)]
    interactions_per_window: usize,
    #[arg(long, default_value_t = 32)]
    dim: usize,
    /// Feature layers per item (side layers + 1).
    #[arg(long, default_value_t = 3)]
    depth: usize,
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct RunArgs {
    /// Flat `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any config key, e.g. `--set tau=0.2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[arg(long)]
    variant: Option<String>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long)]
    interactions: Option<PathBuf>,
    #[arg(long)]
    visual_cache: Option<PathBuf>,
    #[arg(long)]
    textual_cache: Option<PathBuf>,
    #[arg(long)]
    output_dir: Option<PathBuf>,
    #[arg(long)]
    chunks: Option<usize>,
    #[arg(long)]
    eval_threads: Option<usize>,
    /// Comma-separated pruning thresholds; writes one report per value.
    #[arg(long, value_delimiter = ',')]
    tau_sweep: Vec<f64>,
    /// Skip per-window checkpoints.
    #[arg(long)]
    no_checkpoints: bool,
}

#[derive(Args)]
struct ReportArgs {
    #[arg(required = true)]
    reports: Vec<PathBuf>,
    /// CSV of metrics per run and window, for plotting.
    #[arg(long)]
    csv: Option<PathBuf>,
}

#[derive(Args)]
struct ValidateArgs {
    #[arg(required = true)]
    caches: Vec<PathBuf>,
    /// Required layer count per item.
    #[arg(long)]
    depth: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Run(a) => cmd_run(a),
        Command::Report(a) => cmd_report(a),
        Command::ValidateCache(a) => cmd_validate(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let code = e.downcast_ref::<Error>().map_or(1, Error::exit_code);
            ExitCode::from(code as u8)
        }
    }
}

fn cmd_synth(a: SynthArgs) -> Result<()> {
    let cfg = SynthConfig {
        seed: a.seed,
        users: a.users,
        items: a.items,
        windows: a.windows,
        drift: a.drift,
        interactions_per_window: a.interactions_per_window,
        dim: a.dim,
        depth: a.depth,
        ..SynthConfig::default()
    };
    cfg.validate()?;
    let paths = SynthPaths::in_dir(&a.out);
    if !a.force {
        if let Some(p) = paths.all().into_iter().find(|p| p.exists()) {
            return Err(Error::Config(format!("{} exists; pass --force to overwrite", p.display())).into());
        }
    }
    let world = synthesize(&cfg)?;
    write_world(&a.out, &world)?;
    let meta = serde_json::to_string_pretty(&cfg)?;
    fs::write(a.out.join("synth.json"), meta + "\n")?;
    println!(
        "wrote {} interactions over {} windows for {} users and {} items to {}",
        world.interactions.len(),
        cfg.windows,
        cfg.users,
        cfg.items,
        a.out.display()
    );
    Ok(())
}

fn resolve_config(a: &RunArgs) -> Result<RunConfig> {
    let mut cfg = match &a.config {
        Some(p) => RunConfig::load(p).with_context(|| format!("reading {}", p.display()))?,
        None => RunConfig::default(),
    };
    cfg.apply_env(std::env::vars())?;
    let flags: [(&str, Option<String>); 9] = [
        ("variant", a.variant.clone()),
        ("seed", a.seed.map(|v| v.to_string())),
        ("tau", a.tau.map(|v| v.to_string())),
        ("interactions", a.interactions.as_ref().map(|p| p.display().to_string())),
        ("visual_cache", a.visual_cache.as_ref().map(|p| p.display().to_string())),
        ("textual_cache", a.textual_cache.as_ref().map(|p| p.display().to_string())),
        ("output_dir", a.output_dir.as_ref().map(|p| p.display().to_string())),
        ("chunks", a.chunks.map(|v| v.to_string())),
        ("eval_threads", a.eval_threads.map(|v| v.to_string())),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            cfg.set(k, &v)?;
        }
    }
    for kv in &a.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    cfg.validate_paths()?;
    for t in &a.tau_sweep {
        if !(0.0..=1.0).contains(t) {
            return Err(Error::Config(format!("tau {t} outside [0, 1]")).into());
        }
    }
    Ok(cfg)
}

/// Writes a checkpoint after every window.
struct Checkpointer {
    dir: Option<PathBuf>,
    tag: String,
}

impl StreamObserver for Checkpointer {
    fn after_window(&mut self, report: &WindowReport, model: &XsmoeModel, rng: &ChaCha8Rng) -> xsmoe_core::Result<()> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("checkpoint{}_w{}.xsmo", self.tag, report.window));
            checkpoint::save(&path, model, Some(rng))?;
        }
        Ok(())
    }
}

fn load_cache_for(cfg: &RunConfig, m: Modality) -> Result<Option<FeatureCache>> {
    if !cfg.variant.uses(m) {
        return Ok(None);
    }
    let path = match m {
        Modality::Visual => cfg.visual_cache.as_ref(),
        Modality::Textual => cfg.textual_cache.as_ref(),
    };
    match path {
        Some(p) => Ok(Some(read_cache(p).with_context(|| format!("reading {}", p.display()))?)),
        None => Ok(None),
    }
}

fn tau_tag(tau: f64) -> String {
    format!("_tau{tau}")
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let cfg = resolve_config(&a)?;
    let out_dir = cfg.output_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    fs::create_dir_all(&out_dir)?;
    let interactions_path = cfg.interactions.clone().expect("checked by validate_paths");
    let interactions = load_interactions(&interactions_path)?;
    let visual = load_cache_for(&cfg, Modality::Visual)?;
    let textual = load_cache_for(&cfg, Modality::Textual)?;
    let data = xsmoe_core::StreamDataset::new(interactions, cfg.chunks, visual.as_ref(), textual.as_ref())?;

    let taus: Vec<Option<f64>> = if a.tau_sweep.is_empty() {
        vec![None]
    } else {
        a.tau_sweep.iter().copied().map(Some).collect()
    };
    for tau in taus {
        let mut run_cfg = cfg.clone();
        let tag = match tau {
            Some(t) => {
                run_cfg.tau = t;
                tau_tag(t)
            }
            None => String::new(),
        };
        fs::write(out_dir.join(format!("config{tag}.kv")), run_cfg.to_kv_string())?;
        let mut observer = Checkpointer {
            dir: (!a.no_checkpoints).then(|| out_dir.clone()),
            tag: tag.clone(),
        };
        let mut runner = StreamRunner::new(&data, &run_cfg)?;
        let outcome = match runner.run(&mut observer) {
            Ok(o) => o,
            Err(e) => {
                if let (Error::Numerical(_), Some(good)) = (&e, runner.last_good()) {
                    let path = out_dir.join(format!("checkpoint{tag}_last_good.xsmo"));
                    checkpoint::save(&path, good, Some(runner.rng()))?;
                    eprintln!("saved last good epoch to {}", path.display());
                }
                return Err(e.into());
            }
        };
        let report_path = out_dir.join(format!("report{tag}.jsonl"));
        write_report(BufWriter::new(fs::File::create(&report_path)?), &outcome.reports, &outcome.avg)?;
        println!(
            "{}: variant {} tau {} avg HR@10 {:.4} NDCG@10 {:.4}",
            report_path.display(),
            run_cfg.variant,
            run_cfg.tau,
            outcome.avg.hr_at_10,
            outcome.avg.ndcg_at_10
        );
    }
    Ok(())
}

fn read_report(path: &Path) -> Result<ParsedReport> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_report(&text).map_err(|e| Error::Data(format!("{}: report schema error: {e}", path.display())).into())
}

fn render_table(names: &[String], runs: &[ParsedReport]) -> String {
    let mut windows: Vec<usize> = runs.iter().flat_map(|r| r.windows.iter().map(|w| w.test_chunk)).collect();
    windows.sort_unstable();
    windows.dedup();
    let width = names.iter().map(String::len).max().unwrap_or(0).max(15);
    let mut out = String::new();
    let _ = write!(out, "{:<6}", "test");
    for n in names {
        let _ = write!(out, " | {n:>width$}");
    }
    out.push('\n');
    let _ = write!(out, "{:<6}", "");
    for _ in names {
        let _ = write!(out, " | {:>width$}", "HR@10  NDCG@10");
    }
    out.push('\n');
    let cell = |hr: f64, ndcg: f64| format!("{hr:.4}  {ndcg:.4}");
    for w in &windows {
        let _ = write!(out, "{:<6}", format!("D{w}"));
        for r in runs {
            let text = r
                .windows
                .iter()
                .find(|x| x.test_chunk == *w)
                .map_or_else(|| "-".to_string(), |x| cell(x.hr_at_10, x.ndcg_at_10));
            let _ = write!(out, " | {text:>width$}");
        }
        out.push('\n');
    }
    let _ = write!(out, "{:<6}", "AVG");
    for r in runs {
        let _ = write!(out, " | {:>width$}", cell(r.avg.hr_at_10, r.avg.ndcg_at_10));
    }
    out.push('\n');
    out
}

fn cmd_report(a: ReportArgs) -> Result<()> {
    let runs = a.reports.iter().map(|p| read_report(p)).collect::<Result<Vec<_>>>()?;
    let names: Vec<String> = a
        .reports
        .iter()
        .zip(&runs)
        .map(|(p, r)| {
            let stem = p.file_stem().map_or_else(String::new, |s| s.to_string_lossy().into_owned());
            format!("{stem} ({} tau={})", r.avg.variant, r.avg.tau)
        })
        .collect();
    print!("{}", render_table(&names, &runs));
    if let Some(csv_path) = a.csv {
        let mut csv = String::from("run,variant,seed,tau,window,hr_at_10,ndcg_at_10,total_params,trainable_params\n");
        for (name, r) in a.reports.iter().zip(&runs) {
            let name = name.display().to_string().replace(',', "_");
            for w in &r.windows {
                let _ = writeln!(
                    csv,
                    "{name},{},{},{},{},{},{},{},{}",
                    r.avg.variant, r.avg.seed, r.avg.tau, w.test_chunk, w.hr_at_10, w.ndcg_at_10, w.total_params, w.trainable_params
                );
            }
            let _ = writeln!(
                csv,
                "{name},{},{},{},avg,{},{},{},{}",
                r.avg.variant, r.avg.seed, r.avg.tau, r.avg.hr_at_10, r.avg.ndcg_at_10, r.avg.total_params, r.avg.trainable_params
            );
        }
        fs::write(&csv_path, csv)?;
        println!("wrote {}", csv_path.display());
    }
    Ok(())
}

fn cmd_validate(a: ValidateArgs) -> Result<()> {
    let mut failed = Vec::new();
    for path in &a.caches {
        match read_cache(path) {
            Ok(c) => {
                let mut problems = Vec::new();
                if a.depth.is_some_and(|d| d != c.depth) {
                    problems.push(format!("depth {} != {}", c.depth, a.depth.unwrap_or_default()));
                }
                if a.dim.is_some_and(|d| d != c.dim) {
                    problems.push(format!("dim {} != {}", c.dim, a.dim.unwrap_or_default()));
                }
                if problems.is_empty() {
                    println!(
                        "{}: ok ({} cache, {} items, {} layers x {} dims, {} bytes)",
                        path.display(),
                        c.modality,
                        c.len(),
                        c.depth,
                        c.dim,
                        c.byte_len()
                    );
                } else {
                    println!("{}: {}", path.display(), problems.join(", "));
                    failed.push(path.display().to_string());
                }
            }
            Err(e) => {
                println!("{}: {e}", path.display());
                failed.push(path.display().to_string());
            }
        }
    }
    if !failed.is_empty() {
        return Err(Error::Data(format!("invalid caches: {}", failed.join(", "))).into());
    }
    Ok(())
}
