use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use layerprobe_core::analysis::{
    check_backend, cmd_bench, cmd_eval, cmd_heatmap, cmd_sweep, cmd_train, timing_csv,
    ExperimentConfig,
};
use layerprobe_core::dataset::parse_protocol;
use layerprobe_core::features::load_utterances;
use layerprobe_core::metrics::mean;
use layerprobe_core::trainer::RunStatus;

const CACHE_ENV: &str = "LAYERPROBE_CACHE_DIR";

#[derive(Parser)]
#[command(
    name = "layerprobe",
    version,
    about = "Layer-wise contribution analysis for audio deepfake detection"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train every seed and write run directories.
    Train(Common),
    /// Score a protocol with trained runs and print the EER.
    Eval {
        #[command(flatten)]
        common: Common,
        /// Protocol to score instead of the configured eval split.
        #[arg(long)]
        protocol: Option<PathBuf>,
    },
    /// Train and evaluate each layer count and back-end, then time eval.
    Sweep(Common),
    /// Export normalized layer weights of trained runs as CSV.
    Heatmap(Common),
    /// Time eval per utterance for each layer count.
    Bench(Common),
}

#[derive(Args)]
struct Common {
    #[arg(long)]
    config: PathBuf,
    /// Comma-separated encoder layer counts.
    #[arg(long, value_delimiter = ',')]
    layers: Option<Vec<usize>>,
    /// Comma-separated back-end names.
    #[arg(long, value_delimiter = ',')]
    backend: Option<Vec<String>>,
    #[arg(long, value_delimiter = ',')]
    seeds: Option<Vec<u64>>,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Divide each heatmap row by its maximum.
    #[arg(long)]
    row_max: bool,
}

impl Common {
    fn load(&self) -> Result<ExperimentConfig> {
        let mut cfg = ExperimentConfig::from_file(&self.config)?;
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
        }
        if let Some(seeds) = &self.seeds {
            cfg.train.seeds = seeds.clone();
        }
        if let Some(backend) = self.backend.as_ref().and_then(|b| b.first()) {
            cfg.backend = backend.clone();
        }
        if let Some(dir) = std::env::var_os(CACHE_ENV) {
            cfg.cache_dir = Some(PathBuf::from(dir));
            cfg.train.cache_features = true;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn layers(&self, cfg: &ExperimentConfig, num_layers: usize) -> Vec<usize> {
        self.layers
            .clone()
            .unwrap_or_else(|| vec![cfg.train.layers_for(num_layers)])
    }

    fn backends(&self, cfg: &ExperimentConfig) -> Result<Vec<String>> {
        let list = self
            .backend
            .clone()
            .unwrap_or_else(|| vec![cfg.backend.clone()]);
        for b in &list {
            check_backend(b)?;
        }
        Ok(list)
    }
}

fn status_text(status: &RunStatus) -> String {
    match status {
        RunStatus::Completed => "completed".into(),
        RunStatus::Diverged { epoch, reason } => format!("diverged at epoch {epoch} ({reason})"),
    }
}

fn train(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let model = cfg.load_encoder()?;
    let splits = cfg.load_splits()?;
    for x in common.layers(&cfg, model.num_layers()) {
        let results = cmd_train(&cfg, &model, &splits, x)?;
        for r in &results {
            let eval = r.eval_eer.map_or("-".to_string(), |e| format!("{e:.6}"));
            println!(
                "layers {x} seed {} dev_eer {:.6} eval_eer {eval} {} {}",
                r.seed,
                r.dev_eer,
                status_text(&r.status),
                r.run_dir.display()
            );
        }
        let evals: Vec<f64> = results.iter().filter_map(|r| r.eval_eer).collect();
        if !evals.is_empty() {
            println!(
                "layers {x} mean_eval_eer {:.6}",
                mean(evals.iter().copied())
            );
        }
        if results.iter().any(|r| r.status != RunStatus::Completed) {
            bail!("at least one seed diverged");
        }
    }
    Ok(())
}

fn eval(common: &Common, protocol: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let model = cfg.load_encoder()?;
    let (utterances, scores_name) = match protocol {
        Some(p) => {
            let root = cfg
                .audio_root
                .clone()
                .unwrap_or_else(|| p.parent().unwrap_or(Path::new(".")).to_path_buf());
            let stem = p
                .file_stem()
                .map_or("protocol".into(), |s| s.to_string_lossy().into_owned());
            (
                load_utterances(&parse_protocol(p, root)?)?,
                format!("scores_{stem}.txt"),
            )
        }
        None => {
            let eval = cfg
                .load_splits()?
                .eval
                .context("no eval split configured; pass --protocol")?;
            (eval, "eval_scores.txt".to_string())
        }
    };
    for x in common.layers(&cfg, model.num_layers()) {
        let results = cmd_eval(&cfg, &model, &utterances, x, &scores_name)?;
        for r in &results {
            println!(
                "layers {x} seed {} eer {:.6} {}",
                r.seed,
                r.eer,
                r.scores_path.display()
            );
        }
        println!(
            "layers {x} mean_eer {:.6}",
            mean(results.iter().map(|r| r.eer))
        );
    }
    Ok(())
}

fn sweep(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let model = cfg.load_encoder()?;
    let splits = cfg.load_splits()?;
    let layers = common.layers(&cfg, model.num_layers());
    let report = cmd_sweep(&cfg, &model, &splits, &layers, &common.backends(&cfg)?)?;
    print!("{}", report.cells_csv());
    print!("{}", report.timing_csv());
    Ok(())
}

fn heatmap(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let model = cfg.load_encoder()?;
    for backend in common.backends(&cfg)? {
        for x in common.layers(&cfg, model.num_layers()) {
            let suffix = if common.row_max { "_rowmax" } else { "" };
            let path = cfg
                .out_dir
                .join(format!("heatmap_{backend}_{x}layers{suffix}.csv"));
            let table = cmd_heatmap(&cfg.out_dir, &backend, x, common.row_max, &path)?;
            print!("{}", table.to_csv()?);
            println!("wrote {}", path.display());
        }
    }
    Ok(())
}

fn bench(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let model = cfg.load_encoder()?;
    let splits = cfg.load_splits()?;
    let utterances = splits.eval.unwrap_or(splits.dev);
    let layers = common.layers(&cfg, model.num_layers());
    let rows = cmd_bench(&cfg, &model, &utterances, &layers)?;
    let dir = cfg.out_dir.join(&cfg.dataset);
    std::fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    let path = dir.join("bench.csv");
    let text = timing_csv(&rows);
    std::fs::write(&path, &text).with_context(|| format!("writing {}", path.display()))?;
    print!("{text}");
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Train(c) => train(c),
        Command::Eval { common, protocol } => eval(common, protocol.as_deref()),
        Command::Sweep(c) => sweep(c),
        Command::Heatmap(c) => heatmap(c),
        Command::Bench(c) => bench(c),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
