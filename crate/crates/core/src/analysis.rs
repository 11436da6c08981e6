//! Experiment orchestration behind the `layerprobe` commands: config files,
//! the on-disk run layout, heatmaps, truncation sweeps and timing.
//!
//! Runs live under `<out>/<dataset>/<backend>/<X>layers/seed<k>/`, each
//! holding `params.lpc` (`agg.raw` plus `backend.*` tensors), `train.log`,
//! `dev_scores.txt` and, when an eval split exists, `eval_scores.txt`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Deserialize;

use crate::aggregation::{softmax_normalize, LayerWeightVector};
use crate::audio::DEFAULT_WINDOW;
use crate::backend::{Backend, BackendParams};
use crate::dataset::parse_protocol;
use crate::encoder::{EncoderConfig, EncoderModel};
use crate::error::{Error, Result};
use crate::features::{load_utterances, FeatureCache, FeatureExtractor, Utterance};
use crate::metrics::{
    compute_eer, mean, read_scores, write_eer_report, write_scores, EerReportRow, ScoreSet,
};
use crate::model_io::{read_container, write_container, TensorData};
use crate::synthetic::{generate_corpus, SynthSpec};
use crate::trainer::{
    evaluate, ffn_factory, train_with_extractor, RunStatus, TrainConfig, TrainRun,
};

pub const BACKENDS: [&str; 1] = ["ffn"];
pub const PARAMS_FILE: &str = "params.lpc";
pub const AGG_RAW: &str = "agg.raw";
/// Repetitions behind every timing figure; the median is reported.
pub const TIMING_REPS: usize = 5;

/// Flat experiment description: data, encoder, output location and every
/// [`TrainConfig`] key at the top level. Relative paths are resolved
/// against the config file's directory.
#[derive(Clone, Debug, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub dataset: String,
    pub backend: String,
    pub out_dir: PathBuf,
    /// Encoder container. Without one, a seeded random toy encoder is built.
    pub encoder: Option<PathBuf>,
    pub toy_layers: usize,
    pub toy_hidden_dim: usize,
    pub toy_seed: u64,
    /// Protocol files. Without them a synthetic corpus is generated.
    pub train_protocol: Option<PathBuf>,
    pub dev_protocol: Option<PathBuf>,
    pub eval_protocol: Option<PathBuf>,
    /// Audio directory for the protocols; defaults to each protocol's directory.
    pub audio_root: Option<PathBuf>,
    pub synthetic_train_per_class: usize,
    pub synthetic_dev_per_class: usize,
    pub synthetic_eval_per_class: usize,
    pub synthetic_seed: u64,
    pub synthetic_duration_samples: usize,
    pub cache_dir: Option<PathBuf>,
    #[serde(flatten)]
    pub train: TrainConfig,
    #[serde(flatten)]
    unknown: BTreeMap<String, toml::Value>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            dataset: "synthetic".into(),
            backend: "ffn".into(),
            out_dir: PathBuf::from("runs"),
            encoder: None,
            toy_layers: 4,
            toy_hidden_dim: 16,
            toy_seed: 0,
            train_protocol: None,
            dev_protocol: None,
            eval_protocol: None,
            audio_root: None,
            synthetic_train_per_class: 100,
            synthetic_dev_per_class: 20,
            synthetic_eval_per_class: 40,
            synthetic_seed: 1,
            synthetic_duration_samples: DEFAULT_WINDOW,
            cache_dir: None,
            train: TrainConfig::default(),
            unknown: BTreeMap::new(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let base = path.parent().unwrap_or(Path::new("."));
        Self::from_toml(&text, base)
    }

    /// Parses and validates; every problem is reported at once.
    pub fn from_toml(text: &str, base_dir: &Path) -> Result<Self> {
        let mut cfg: Self = toml::from_str(text).map_err(|e| Error::Config(vec![e.to_string()]))?;
        for p in std::iter::once(&mut cfg.out_dir)
            .chain(cfg.encoder.as_mut())
            .chain(cfg.train_protocol.as_mut())
            .chain(cfg.dev_protocol.as_mut())
            .chain(cfg.eval_protocol.as_mut())
            .chain(cfg.audio_root.as_mut())
            .chain(cfg.cache_dir.as_mut())
        {
            if p.is_relative() {
                *p = base_dir.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not need the encoder loaded.
    pub fn validate(&self) -> Result<()> {
        let mut errors: Vec<String> = self
            .unknown
            .keys()
            .map(|k| format!("unknown key `{k}`"))
            .collect();
        if let Err(e) = check_backend(&self.backend) {
            errors.push(e.to_string());
        }
        if self.dataset.is_empty() || self.dataset.contains(['/', '\\']) {
            errors.push(format!(
                "dataset tag {:?} must be a non-empty path component",
                self.dataset
            ));
        }
        let protocols = [&self.train_protocol, &self.dev_protocol];
        if protocols.iter().any(|p| p.is_some()) && protocols.iter().any(|p| p.is_none()) {
            errors.push("train_protocol and dev_protocol must be given together".into());
        }
        if self.train_protocol.is_none() {
            for (name, n) in [
                ("synthetic_train_per_class", self.synthetic_train_per_class),
                ("synthetic_dev_per_class", self.synthetic_dev_per_class),
            ] {
                if n == 0 {
                    errors.push(format!("{name} must be positive"));
                }
            }
        }
        if self.encoder.is_none() {
            if self.toy_layers == 0 {
                errors.push("toy_layers must be positive".into());
            }
            if let Err(Error::Config(e)) =
                EncoderConfig::toy(self.toy_layers.max(1), self.toy_hidden_dim).validate()
            {
                errors.extend(e);
            }
        }
        if let Err(Error::Config(e)) = self.train.validate(None) {
            errors.extend(e);
        }
        if errors.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(errors))
        }
    }

    pub fn load_encoder(&self) -> Result<EncoderModel<f32>> {
        let model = match &self.encoder {
            Some(path) => EncoderModel::from_container(&read_container(path)?)?,
            None => EncoderModel::random(
                EncoderConfig::toy(self.toy_layers, self.toy_hidden_dim),
                self.toy_seed,
            )?,
        };
        self.train.validate(Some(model.num_layers()))?;
        Ok(model)
    }

    /// Train, dev and (optional) eval utterances. A synthetic corpus is
    /// written under `<out>/<dataset>/corpus/` when no protocols are set.
    pub fn load_splits(&self) -> Result<Splits> {
        let load = |protocol: &Path| -> Result<Vec<Utterance>> {
            let root = match &self.audio_root {
                Some(r) => r.clone(),
                None => protocol.parent().unwrap_or(Path::new(".")).to_path_buf(),
            };
            load_utterances(&parse_protocol(protocol, root)?)
        };
        if let (Some(train), Some(dev)) = (&self.train_protocol, &self.dev_protocol) {
            return Ok(Splits {
                train: load(train)?,
                dev: load(dev)?,
                eval: self.eval_protocol.as_deref().map(load).transpose()?,
            });
        }
        let corpus = self.out_dir.join(&self.dataset).join("corpus");
        let make = |name: &str, n: usize, offset: u64| -> Result<Vec<Utterance>> {
            let spec = SynthSpec {
                id_prefix: format!("{}_{name}", self.dataset),
                duration_samples: self.synthetic_duration_samples,
                ..SynthSpec::new(n, self.synthetic_seed + offset)
            };
            load(&generate_corpus(&spec, corpus.join(name))?)
        };
        Ok(Splits {
            train: make("train", self.synthetic_train_per_class, 0)?,
            dev: make("dev", self.synthetic_dev_per_class, 1)?,
            eval: match (&self.eval_protocol, self.synthetic_eval_per_class) {
                (Some(p), _) => Some(load(p)?),
                (None, 0) => None,
                (None, n) => Some(make("eval", n, 2)?),
            },
        })
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir
            .clone()
            .unwrap_or_else(|| self.out_dir.join("cache"))
    }

    /// Directory of one layer setting, holding every seed.
    pub fn cell_dir(&self, layers: usize) -> PathBuf {
        self.out_dir
            .join(&self.dataset)
            .join(&self.backend)
            .join(format!("{layers}layers"))
    }

    pub fn run_dir(&self, layers: usize, seed: u64) -> PathBuf {
        self.cell_dir(layers).join(format!("seed{seed}"))
    }
}

pub fn check_backend(name: &str) -> Result<()> {
    if BACKENDS.contains(&name) {
        Ok(())
    } else {
        Err(Error::Validation(format!(
            "unknown back-end {name:?}; available: {}",
            BACKENDS.join(", ")
        )))
    }
}

pub struct Splits {
    pub train: Vec<Utterance>,
    pub dev: Vec<Utterance>,
    pub eval: Option<Vec<Utterance>>,
}

/// Outcome of one trained seed.
#[derive(Clone, Debug, PartialEq)]
pub struct SeedResult {
    pub seed: u64,
    pub run_dir: PathBuf,
    pub dev_eer: f64,
    pub eval_eer: Option<f64>,
    pub status: RunStatus,
}

fn extractor_for<'m>(
    cfg: &ExperimentConfig,
    model: &'m EncoderModel<f32>,
    layers: usize,
) -> Result<FeatureExtractor<'m, f32>> {
    let extractor = FeatureExtractor::new(model, layers)?;
    Ok(if cfg.train.cache_features {
        extractor.with_disk_cache(FeatureCache::new(cfg.cache_dir(), model.checksum())?)
    } else {
        extractor
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Writes a score file and returns the EER of what was written, so the
/// reported number is reproducible from the file alone.
fn write_scores_eer(scores: &ScoreSet<f32>, path: &Path) -> Result<f64> {
    write_scores(scores, path)?;
    Ok(compute_eer(&read_scores::<f64>(path)?)?.eer)
}

fn save_run(
    cfg: &ExperimentConfig,
    layers: usize,
    run: &TrainRun<f32, BackendParams<f32>>,
    dir: &Path,
) -> Result<()> {
    let mut tensors = run.backend.to_tensors();
    tensors.insert(
        AGG_RAW.into(),
        TensorData::vector(run.layer_weights.raw().to_vec()),
    );
    let status = match &run.status {
        RunStatus::Completed => "completed".to_string(),
        RunStatus::Diverged { epoch, .. } => format!("diverged@{epoch}"),
    };
    let metadata = BTreeMap::from([
        ("dataset".to_string(), cfg.dataset.clone()),
        ("backend".to_string(), cfg.backend.clone()),
        ("layers".to_string(), layers.to_string()),
        ("seed".to_string(), run.seed.to_string()),
        ("encoder_checksum".to_string(), run.encoder_checksum.clone()),
        ("best_epoch".to_string(), run.best_epoch.to_string()),
        ("stopped_early".to_string(), run.stopped_early.to_string()),
        ("status".to_string(), status),
    ]);
    write_container(&tensors, &metadata, dir.join(PARAMS_FILE))?;
    write_text(&dir.join("train.log"), &run.log_text())
}

/// Trains every configured seed at `X = layers` and writes the run directories.
pub fn cmd_train(
    cfg: &ExperimentConfig,
    model: &EncoderModel<f32>,
    splits: &Splits,
    layers: usize,
) -> Result<Vec<SeedResult>> {
    let train_cfg = TrainConfig {
        truncate_layers: Some(layers),
        ..cfg.train.clone()
    };
    train_cfg.validate(Some(model.num_layers()))?;
    let extractor = extractor_for(cfg, model, layers)?;
    let runs = train_with_extractor(
        &train_cfg,
        &extractor,
        &splits.train,
        &splits.dev,
        ffn_factory::<f32>(&train_cfg),
    )?;
    let mut results = Vec::with_capacity(runs.len());
    let mut report = Vec::new();
    for run in &runs {
        let dir = cfg.run_dir(layers, run.seed);
        create_dir(&dir)?;
        save_run(cfg, layers, run, &dir)?;
        let bs = train_cfg.batch_size;
        let (dev_scores, _) = evaluate(
            &extractor,
            &run.backend,
            &run.layer_weights,
            &splits.dev,
            train_cfg.crop_len,
            bs,
        )?;
        let dev_eer = write_scores_eer(&dev_scores, &dir.join("dev_scores.txt"))?;
        let eval_eer = match &splits.eval {
            Some(eval) => {
                let (scores, _) = evaluate(
                    &extractor,
                    &run.backend,
                    &run.layer_weights,
                    eval,
                    train_cfg.crop_len,
                    bs,
                )?;
                let eer = write_scores_eer(&scores, &dir.join("eval_scores.txt"))?;
                report.push(EerReportRow {
                    dataset: cfg.dataset.clone(),
                    seed: run.seed,
                    layers,
                    backend: cfg.backend.clone(),
                    eer,
                });
                Some(eer)
            }
            None => None,
        };
        results.push(SeedResult {
            seed: run.seed,
            run_dir: dir,
            dev_eer,
            eval_eer,
            status: run.status.clone(),
        });
    }
    if !report.is_empty() {
        write_eer_report(&report, cfg.cell_dir(layers).join("eer.csv"))?;
    }
    Ok(results)
}

/// Trained parameters of one run directory.
pub struct RunArtifacts {
    pub layers: usize,
    pub seed: u64,
    pub encoder_checksum: String,
    pub backend: BackendParams<f32>,
    pub layer_weights: LayerWeightVector<f32>,
}

pub fn load_run(dir: &Path) -> Result<RunArtifacts> {
    let path = dir.join(PARAMS_FILE);
    if !path.exists() {
        return Err(Error::MissingArtifact(path));
    }
    let container = read_container(&path)?;
    let raw = container
        .tensors
        .get(AGG_RAW)
        .ok_or_else(|| Error::Validation(format!("{}: missing {AGG_RAW}", path.display())))?;
    let layers = container.meta_usize("layers")?;
    if raw.numel() != layers {
        return Err(Error::Validation(format!(
            "{}: {AGG_RAW} has {} entries but metadata says {layers} layers",
            path.display(),
            raw.numel()
        )));
    }
    Ok(RunArtifacts {
        layers,
        seed: container.meta("seed")?.parse().map_err(|_| {
            Error::Validation(format!(
                "{}: seed metadata is not an integer",
                path.display()
            ))
        })?,
        encoder_checksum: container.meta("encoder_checksum")?.to_string(),
        backend: BackendParams::from_tensors(&container.tensors)?,
        layer_weights: LayerWeightVector::from_raw(raw.data.clone())?,
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalResult {
    pub seed: u64,
    pub scores_path: PathBuf,
    pub eer: f64,
}

/// Scores `utterances` with the stored artifacts of every configured seed.
/// Scores go to `<run>/<scores_name>`.
pub fn cmd_eval(
    cfg: &ExperimentConfig,
    model: &EncoderModel<f32>,
    utterances: &[Utterance],
    layers: usize,
    scores_name: &str,
) -> Result<Vec<EvalResult>> {
    let extractor = extractor_for(cfg, model, layers)?;
    let mut out = Vec::new();
    for &seed in &cfg.train.seeds {
        let dir = cfg.run_dir(layers, seed);
        let run = load_run(&dir)?;
        if run.layers != layers {
            return Err(Error::Validation(format!(
                "{} was trained with X={} but X={layers} was requested",
                dir.display(),
                run.layers
            )));
        }
        if run.encoder_checksum != model.checksum() {
            return Err(Error::Validation(format!(
                "{} was trained with a different encoder (checksum {})",
                dir.display(),
                run.encoder_checksum
            )));
        }
        let (scores, _) = evaluate(
            &extractor,
            &run.backend,
            &run.layer_weights,
            utterances,
            cfg.train.crop_len,
            cfg.train.batch_size,
        )?;
        let scores_path = dir.join(scores_name);
        let eer = write_scores_eer(&scores, &scores_path)?;
        out.push(EvalResult {
            seed,
            scores_path,
            eer,
        });
    }
    Ok(out)
}

/// Normalized layer weights per dataset plus their average.
#[derive(Clone, Debug, PartialEq)]
pub struct HeatmapTable {
    pub layers: usize,
    pub rows: Vec<(String, Vec<f64>)>,
    pub average_row: Vec<f64>,
}

impl HeatmapTable {
    /// `runs` maps each dataset tag to its seeds' raw weights. Each seed is
    /// softmax-normalized, seeds are averaged per dataset, and the average
    /// row is the mean of the dataset rows.
    pub fn from_raw(runs: &BTreeMap<String, Vec<Vec<f64>>>) -> Result<Self> {
        let mut layers = None;
        let mut rows = Vec::with_capacity(runs.len());
        for (dataset, seeds) in runs {
            if seeds.is_empty() {
                return Err(Error::Validation(format!("dataset {dataset} has no runs")));
            }
            let normalized = seeds
                .iter()
                .map(|raw| softmax_normalize(raw))
                .collect::<Result<Vec<_>>>()?;
            for n in &normalized {
                if *layers.get_or_insert(n.len()) != n.len() {
                    return Err(Error::Validation(format!(
                        "inconsistent layer count: {dataset} has a run with {} layers, others have {}",
                        n.len(),
                        layers.unwrap()
                    )));
                }
            }
            rows.push((dataset.clone(), column_mean(&normalized)));
        }
        let layers = layers.ok_or_else(|| Error::Validation("no runs for the heatmap".into()))?;
        let dataset_rows: Vec<Vec<f64>> = rows.iter().map(|(_, r)| r.clone()).collect();
        Ok(Self {
            layers,
            average_row: column_mean(&dataset_rows),
            rows,
        })
    }

    /// Divides every row by its maximum, for display contrast. Rows no
    /// longer sum to one afterwards.
    pub fn row_max_scaled(&self) -> Self {
        let scale = |r: &[f64]| {
            let max = r.iter().copied().fold(f64::MIN, f64::max);
            r.iter().map(|v| v / max).collect::<Vec<_>>()
        };
        Self {
            layers: self.layers,
            rows: self
                .rows
                .iter()
                .map(|(d, r)| (d.clone(), scale(r)))
                .collect(),
            average_row: scale(&self.average_row),
        }
    }

    /// `dataset,layer_1,...,layer_X`, dataset rows then `AVERAGE`.
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["dataset".to_string()];
        header.extend((1..=self.layers).map(|l| format!("layer_{l}")));
        let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
        w.write_record(&header).map_err(csv_err)?;
        let rows = self
            .rows
            .iter()
            .map(|(d, r)| (d.as_str(), r))
            .chain(std::iter::once(("AVERAGE", &self.average_row)));
        for (dataset, row) in rows {
            let mut rec = vec![dataset.to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err)?;
        }
        let bytes = w
            .into_inner()
            .map_err(|e| Error::Validation(format!("csv: {e}")))?;
        Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
    }
}

fn column_mean(rows: &[Vec<f64>]) -> Vec<f64> {
    let width = rows.first().map_or(0, Vec::len);
    (0..width)
        .map(|j| mean(rows.iter().map(|r| r[j])))
        .collect()
}

/// Raw weights of every `seed*` run at `<out>/<dataset>/<backend>/<X>layers/`,
/// grouped by dataset.
pub fn collect_heatmap_runs(
    out_dir: &Path,
    backend: &str,
    layers: usize,
) -> Result<BTreeMap<String, Vec<Vec<f64>>>> {
    let mut runs = BTreeMap::new();
    for dataset_dir in sorted_dirs(out_dir)? {
        let cell = dataset_dir.join(backend).join(format!("{layers}layers"));
        if !cell.is_dir() {
            continue;
        }
        let mut seeds = Vec::new();
        for run_dir in sorted_dirs(&cell)? {
            let is_seed = run_dir
                .file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n.starts_with("seed"));
            if !is_seed {
                continue;
            }
            let run = load_run(&run_dir)?;
            seeds.push(run.layer_weights.raw().iter().map(|&v| v as f64).collect());
        }
        if !seeds.is_empty() {
            let name = dataset_dir
                .file_name()
                .unwrap()
                .to_string_lossy()
                .into_owned();
            runs.insert(name, seeds);
        }
    }
    Ok(runs)
}

fn sorted_dirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.is_dir() {
            out.push(path);
        }
    }
    out.sort();
    Ok(out)
}

/// Builds the heatmap for `<out>` and writes it to `csv_path`.
pub fn cmd_heatmap(
    out_dir: &Path,
    backend: &str,
    layers: usize,
    row_max: bool,
    csv_path: &Path,
) -> Result<HeatmapTable> {
    let runs = collect_heatmap_runs(out_dir, backend, layers)?;
    if runs.is_empty() {
        return Err(Error::Validation(format!(
            "no runs found under {} for back-end {backend} with {layers} layers",
            out_dir.display()
        )));
    }
    let table = HeatmapTable::from_raw(&runs)?;
    let table = if row_max {
        table.row_max_scaled()
    } else {
        table
    };
    write_text(csv_path, &table.to_csv()?)?;
    Ok(table)
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepCell {
    pub backend: String,
    pub layers: usize,
    pub dataset: String,
    pub mean_eer: f64,
    pub per_seed_eer: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TimingRow {
    pub layers: usize,
    /// Median over [`TIMING_REPS`] passes.
    pub mean_wall_time_per_utt: f64,
    /// Transformer-block forwards in one pass.
    pub encoder_layer_invocations: u64,
    pub utterances: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SweepReport {
    pub cells: Vec<SweepCell>,
    pub timing: Vec<TimingRow>,
}

impl SweepReport {
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("backend,layers,dataset,mean_eer,per_seed_eer\n");
        for c in &self.cells {
            let seeds: Vec<String> = c.per_seed_eer.iter().map(|e| format!("{e:.6}")).collect();
            out.push_str(&format!(
                "{},{},{},{:.6},{}\n",
                c.backend,
                c.layers,
                c.dataset,
                c.mean_eer,
                seeds.join(";")
            ));
        }
        out
    }

    pub fn timing_csv(&self) -> String {
        timing_csv(&self.timing)
    }
}

pub fn timing_csv(rows: &[TimingRow]) -> String {
    let mut out =
        String::from("layers,mean_wall_time_per_utt_s,encoder_layer_invocations,utterances\n");
    for t in rows {
        out.push_str(&format!(
            "{},{:.9},{},{}\n",
            t.layers, t.mean_wall_time_per_utt, t.encoder_layer_invocations, t.utterances
        ));
    }
    out
}

/// Median per-utterance wall time of scoring `utterances` end to end with
/// the encoder truncated to `layers`, recomputing features on every pass.
/// Fails if a pass runs other than `layers` blocks per utterance.
pub fn time_eval(
    model: &EncoderModel<f32>,
    backend: &BackendParams<f32>,
    layers: usize,
    utterances: &[Utterance],
    crop_len: usize,
    batch_size: usize,
) -> Result<TimingRow> {
    if utterances.is_empty() {
        return Err(Error::Validation(
            "timing needs at least one utterance".into(),
        ));
    }
    let weights = LayerWeightVector::ones(layers)?;
    let mut per_utt = Vec::with_capacity(TIMING_REPS);
    let mut invocations = 0;
    for _ in 0..TIMING_REPS {
        let extractor = FeatureExtractor::new(model, layers)?.without_memo();
        model.reset_counters();
        let start = Instant::now();
        evaluate(
            &extractor, backend, &weights, utterances, crop_len, batch_size,
        )?;
        per_utt.push(start.elapsed().as_secs_f64() / utterances.len() as f64);
        invocations = model.layer_invocations();
        let expected = (layers * utterances.len()) as u64;
        if invocations != expected {
            return Err(Error::Validation(format!(
                "{invocations} encoder layer invocations for {} utterances at X={layers}, expected {expected}",
                utterances.len()
            )));
        }
    }
    per_utt.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(TimingRow {
        layers,
        mean_wall_time_per_utt: per_utt[TIMING_REPS / 2],
        encoder_layer_invocations: invocations,
        utterances: utterances.len(),
    })
}

fn check_layers(model: &EncoderModel<f32>, layers: &[usize]) -> Result<()> {
    for &x in layers {
        if x == 0 || x > model.num_layers() {
            return Err(Error::LayerRange {
                requested: x,
                available: model.num_layers(),
            });
        }
    }
    Ok(())
}

/// Timing only, with a freshly initialized back-end: eval cost does not
/// depend on trained values.
pub fn cmd_bench(
    cfg: &ExperimentConfig,
    model: &EncoderModel<f32>,
    utterances: &[Utterance],
    layers: &[usize],
) -> Result<Vec<TimingRow>> {
    check_layers(model, layers)?;
    let seed = cfg.train.seeds.first().copied().unwrap_or(0);
    let backend = ffn_factory::<f32>(&cfg.train)(
        model.config().hidden_dim,
        &mut ChaCha8Rng::seed_from_u64(seed),
    );
    layers
        .iter()
        .map(|&x| {
            time_eval(
                model,
                &backend,
                x,
                utterances,
                cfg.train.crop_len,
                cfg.train.batch_size,
            )
        })
        .collect()
}

/// Fresh training per `(backend, X)` and seed, eval-split EER, and timing.
pub fn cmd_sweep(
    cfg: &ExperimentConfig,
    model: &EncoderModel<f32>,
    splits: &Splits,
    layers: &[usize],
    backends: &[String],
) -> Result<SweepReport> {
    check_layers(model, layers)?;
    let eval = splits
        .eval
        .as_ref()
        .ok_or_else(|| Error::Validation("a sweep needs an eval split".into()))?;
    let mut report = SweepReport::default();
    for backend in backends {
        check_backend(backend)?;
        let cell_cfg = ExperimentConfig {
            backend: backend.clone(),
            ..cfg.clone()
        };
        for &x in layers {
            let results = cmd_train(&cell_cfg, model, splits, x)?;
            let per_seed_eer: Vec<f64> = results
                .iter()
                .map(|r| r.eval_eer.expect("eval split present"))
                .collect();
            report.cells.push(SweepCell {
                backend: backend.clone(),
                layers: x,
                dataset: cfg.dataset.clone(),
                mean_eer: mean(per_seed_eer.iter().copied()),
                per_seed_eer,
            });
        }
    }
    report.timing = cmd_bench(cfg, model, eval, layers)?;
    let dir = cfg.out_dir.join(&cfg.dataset);
    create_dir(&dir)?;
    write_text(&dir.join("sweep.csv"), &report.cells_csv())?;
    write_text(&dir.join("timing.csv"), &report.timing_csv())?;
    Ok(report)
}
