//! Command implementations behind the `aei` binary.
//!
//! A data directory holds `annotations.tsv` and one `features/<id>.aeif`
//! file per video. Every command is a plain function so it can be driven
//! from tests as well as from the binary.

// `!(x > 0.0)` also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

mod config;

use std::collections::BTreeMap;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use aei::dataio::{
    read_annotations, read_features, read_proposals, synth_dataset, write_annotations, write_features, write_proposals,
    DataError, SnippetFeatures, VideoRecord,
};
use aei::eval::{ar_at_an, auc, evaluate, EvalReport};
use aei::nn::NnError;
use aei::pipeline::{infer_all, train, training_examples, Model, PipelineError, StepLog};
use aei::postproc::Proposal;
use aei::pvr::PvrConfig;

pub use config::{AblateConfig, AblationFlags, RunConfig};

pub const ANNOTATIONS_FILE: &str = "annotations.tsv";
pub const FEATURES_DIR: &str = "features";

/// Failures, grouped by exit code.
#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("usage: {0}")]
    Usage(String),
    #[error("config: {0}")]
    Config(String),
    #[error("data: {0}")]
    Data(String),
    #[error("{0}")]
    Runtime(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            Self::Usage(_) | Self::Config(_) => 1,
            Self::Data(_) => 2,
            Self::Runtime(_) => 3,
        }
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        Self::Data(e.to_string())
    }
}

impl From<PipelineError> for CliError {
    fn from(e: PipelineError) -> Self {
        match e {
            PipelineError::Data(d) => d.into(),
            PipelineError::Mismatch(m) => Self::Data(m),
            PipelineError::Nn(NnError::ShapeMismatch { .. }) => Self::Data(e.to_string()),
            PipelineError::Nn(n) => Self::Runtime(n.to_string()),
        }
    }
}

impl From<aei::eval::EvalError> for CliError {
    fn from(e: aei::eval::EvalError) -> Self {
        match e {
            aei::eval::EvalError::InvalidConfig(m) => Self::Config(m),
            other => Self::Data(other.to_string()),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::Runtime(format!("{}: {e}", path.display())))
}

/// Annotations and features of a data directory, features ordered by id.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub records: Vec<VideoRecord>,
    pub features: Vec<SnippetFeatures>,
}

impl Dataset {
    pub fn load(dir: &Path) -> Result<Self, CliError> {
        let records = read_annotations(dir.join(ANNOTATIONS_FILE))?;
        let feat_dir = dir.join(FEATURES_DIR);
        let entries = fs::read_dir(&feat_dir).map_err(|e| CliError::Data(format!("{}: {e}", feat_dir.display())))?;
        let mut paths: Vec<PathBuf> = entries
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "aeif"))
            .collect();
        paths.sort();
        let features = paths.iter().map(read_features).collect::<Result<Vec<_>, _>>()?;
        if features.is_empty() {
            return Err(CliError::Data(format!(
                "{}: no .aeif feature files",
                feat_dir.display()
            )));
        }
        let first = &features[0];
        for f in &features {
            if f.env_dim != first.env_dim
                || (f.total_actors() > 0 && first.total_actors() > 0 && f.actor_dim != first.actor_dim)
            {
                return Err(CliError::Data(format!(
                    "{}: feature dims ({}, {}) differ from {} ({}, {})",
                    f.video_id, f.env_dim, f.actor_dim, first.video_id, first.env_dim, first.actor_dim
                )));
            }
            if !records.iter().any(|r| r.video_id == f.video_id) {
                return Err(CliError::Data(format!(
                    "{}: features without an annotation entry",
                    f.video_id
                )));
            }
        }
        let mut features = features;
        features.sort_by(|a, b| a.video_id.cmp(&b.video_id));
        Ok(Self { records, features })
    }

    /// `(environment, actor)` dimensions; the actor width comes from any
    /// video that has actors.
    pub fn dims(&self) -> (usize, usize) {
        let env = self.features[0].env_dim;
        let actor = self
            .features
            .iter()
            .find(|f| f.total_actors() > 0)
            .map_or(self.features[0].actor_dim, |f| f.actor_dim);
        (env, actor)
    }

    /// Records restricted to the videos that have features.
    pub fn featured_records(&self) -> Vec<VideoRecord> {
        self.features
            .iter()
            .filter_map(|f| self.records.iter().find(|r| r.video_id == f.video_id).cloned())
            .collect()
    }

    /// Splits off the last `fraction` of videos (by id) for validation.
    pub fn split(&self, fraction: f64) -> Result<(Dataset, Dataset), CliError> {
        let n = self.features.len();
        let n_val = ((n as f64 * fraction).round() as usize).clamp(1, n.saturating_sub(1));
        if n < 2 {
            return Err(CliError::Data("need at least two videos to split".into()));
        }
        let (train, val) = self.features.split_at(n - n_val);
        let part = |f: &[SnippetFeatures]| Dataset {
            records: f
                .iter()
                .filter_map(|x| self.records.iter().find(|r| r.video_id == x.video_id).cloned())
                .collect(),
            features: f.to_vec(),
        };
        Ok((part(train), part(val)))
    }
}

pub fn cmd_synth(cfg: &RunConfig, out_dir: &Path) -> Result<usize, CliError> {
    let (records, features) = synth_dataset(&cfg.synth).map_err(|e| CliError::Config(e.to_string()))?;
    let feat_dir = out_dir.join(FEATURES_DIR);
    fs::create_dir_all(&feat_dir).map_err(|e| CliError::Runtime(format!("{}: {e}", feat_dir.display())))?;
    write_annotations(out_dir.join(ANNOTATIONS_FILE), &records).map_err(|e| CliError::Runtime(e.to_string()))?;
    for f in &features {
        write_features(feat_dir.join(format!("{}.aeif", f.video_id)), f)
            .map_err(|e| CliError::Runtime(e.to_string()))?;
    }
    log::info!("wrote {} videos to {}", records.len(), out_dir.display());
    Ok(records.len())
}

fn build_model(cfg: &RunConfig, pvr: &PvrConfig, dims: (usize, usize), seed: u64) -> Result<Model, CliError> {
    Model::new(pvr, &cfg.bmm, dims.0, dims.1, seed).map_err(|e| CliError::Config(e.to_string()))
}

fn train_model(
    cfg: &RunConfig,
    pvr: &PvrConfig,
    data: &Dataset,
    seed: u64,
    on_step: impl FnMut(&StepLog),
) -> Result<Model, CliError> {
    let mut model = build_model(cfg, pvr, data.dims(), seed)?;
    let examples = training_examples(&data.records, &data.features, &cfg.labels)?;
    train(&mut model, &examples, &cfg.train, on_step)?;
    Ok(model)
}

fn csv_value(v: Option<f64>) -> String {
    v.map_or_else(String::new, |v| format!("{v}"))
}

/// Trains on every video of `data_dir`, appends per-step losses to
/// `log_path` and writes the checkpoint.
pub fn cmd_train(cfg: &RunConfig, data_dir: &Path, checkpoint: &Path, log_path: &Path) -> Result<(), CliError> {
    let data = Dataset::load(data_dir)?;
    let pvr = cfg.effective_pvr()?;
    let is_new = fs::metadata(log_path).map(|m| m.len() == 0).unwrap_or(true);
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(log_path)
        .map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let mut io_result = Ok(());
    if is_new {
        io_result = writeln!(log, "step,video_id,total,start,end,actionness");
    }
    let model = train_model(cfg, &pvr, &data, cfg.seed, |s| {
        if io_result.is_ok() {
            io_result = writeln!(
                log,
                "{},{},{},{},{},{}",
                s.step,
                s.video_id,
                s.loss.total,
                csv_value(s.loss.start),
                csv_value(s.loss.end),
                csv_value(s.loss.actionness)
            );
        }
    })?;
    io_result.map_err(|e| CliError::Runtime(format!("{}: {e}", log_path.display())))?;
    let mut bytes = Vec::new();
    model
        .store
        .write_checkpoint(&mut bytes)
        .map_err(|e| CliError::Runtime(e.to_string()))?;
    write_file(checkpoint, &bytes)
}

fn load_model(cfg: &RunConfig, checkpoint: &Path, dims: (usize, usize)) -> Result<Model, CliError> {
    let bytes =
        fs::read(checkpoint).map_err(|e| CliError::Runtime(format!("checkpoint {}: {e}", checkpoint.display())))?;
    let mut model = build_model(cfg, &cfg.effective_pvr()?, dims, cfg.seed)?;
    model.store.load_checkpoint(bytes.as_slice()).map_err(|e| {
        CliError::Data(format!(
            "checkpoint {} does not fit the model: {e}",
            checkpoint.display()
        ))
    })?;
    Ok(model)
}

/// Writes proposals for every video of `data_dir`; returns their count.
pub fn cmd_infer(cfg: &RunConfig, checkpoint: &Path, data_dir: &Path, out: &Path) -> Result<usize, CliError> {
    if !checkpoint.exists() {
        return Err(CliError::Runtime(format!(
            "checkpoint {} not found",
            checkpoint.display()
        )));
    }
    let data = Dataset::load(data_dir)?;
    let model = load_model(cfg, checkpoint, data.dims())?;
    let proposals = infer_all(&model, &data.records, &data.features, &cfg.postproc)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| CliError::Runtime(format!("{}: {e}", dir.display())))?;
    }
    write_proposals(out, &proposals).map_err(|e| CliError::Runtime(e.to_string()))?;
    Ok(proposals.len())
}

/// Reads a `video_id<TAB>label` file.
pub fn read_video_labels(path: &Path) -> Result<BTreeMap<String, String>, CliError> {
    let text = fs::read_to_string(path).map_err(|e| CliError::Data(format!("{}: {e}", path.display())))?;
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim_end();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, label) = line
            .split_once('\t')
            .ok_or_else(|| CliError::Data(format!("{}:{}: expected video_id<TAB>label", path.display(), n + 1)))?;
        out.insert(id.to_string(), label.to_string());
    }
    Ok(out)
}

fn report_text(report: &EvalReport, cfg: &RunConfig) -> String {
    let mut s = report.to_text();
    s.push_str("# resolved config\n");
    for line in cfg.to_toml().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    s
}

/// Path of the AR-vs-AN CSV written next to a report.
pub fn curve_path(report: &Path) -> PathBuf {
    report.with_extension("ar_curve.csv")
}

/// Evaluates a proposal file against annotations and writes the report and
/// the AR curve. Unlabeled proposals take their video's label from
/// `video_labels` when given.
pub fn cmd_eval(
    cfg: &RunConfig,
    proposals: &Path,
    annotations: &Path,
    out: &Path,
    video_labels: Option<&Path>,
) -> Result<EvalReport, CliError> {
    let records = read_annotations(annotations)?;
    let grouped = read_proposals(proposals)?;
    let labels = video_labels.map(read_video_labels).transpose()?;
    let mut flat: Vec<Proposal> = grouped.into_values().flatten().collect();
    if let Some(labels) = &labels {
        for p in flat.iter_mut().filter(|p| p.label.is_none()) {
            p.label = labels.get(&p.video_id).cloned();
        }
    }
    let report = evaluate(&flat, &records, &cfg.eval)?;
    write_file(out, report_text(&report, cfg).as_bytes())?;
    write_file(&curve_path(out), report.curve_csv().as_bytes())?;
    Ok(report)
}

/// One configuration of the ablation study.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub name: &'static str,
    /// Validation AR@`an` for each seed.
    pub per_seed: Vec<f64>,
    pub best: f64,
    pub best_auc: f64,
}

/// The compared configurations: all spectators, then each reduction.
pub fn ablation_variants() -> Vec<(&'static str, AblationFlags)> {
    let f = AblationFlags::default;
    vec![
        ("full", f()),
        (
            "environment-only",
            AblationFlags {
                environment_only: true,
                ..f()
            },
        ),
        (
            "actors-only",
            AblationFlags {
                actors_only: true,
                ..f()
            },
        ),
        (
            "no-interaction",
            AblationFlags {
                no_interaction: true,
                ..f()
            },
        ),
        (
            "no-selection",
            AblationFlags {
                no_selection: true,
                ..f()
            },
        ),
        ("no-fusion", AblationFlags { no_fusion: true, ..f() }),
    ]
}

/// Trains every ablation variant on the training split and scores it on
/// the validation split; writes a comparison table.
pub fn cmd_ablate(cfg: &RunConfig, data_dir: &Path, out: &Path) -> Result<Vec<AblationRow>, CliError> {
    let data = Dataset::load(data_dir)?;
    let (train_split, val_split) = data.split(cfg.ablate.validation_fraction)?;
    let an = cfg.ablate.an;
    let mut rows = Vec::new();
    for (name, flags) in ablation_variants() {
        let pvr = flags.apply(&cfg.pvr)?;
        let mut per_seed = Vec::new();
        let mut best = (f64::NEG_INFINITY, 0.0);
        for seed in cfg.seed..cfg.seed + cfg.ablate.num_seeds {
            let model = train_model(cfg, &pvr, &train_split, seed, |_| {})?;
            let props = infer_all(&model, &val_split.records, &val_split.features, &cfg.postproc)?;
            let val_records = val_split.featured_records();
            let ar = ar_at_an(&props, &val_records, an, &cfg.eval.tiou_grid, cfg.eval.capping)?;
            if ar > best.0 {
                let area = auc(
                    &props,
                    &val_records,
                    cfg.eval.max_an,
                    &cfg.eval.tiou_grid,
                    cfg.eval.capping,
                )?;
                best = (ar, area);
            }
            log::info!("ablation {name} seed {seed}: AR@{an} = {ar:.4}");
            per_seed.push(ar);
        }
        rows.push(AblationRow {
            name,
            per_seed,
            best: best.0,
            best_auc: best.1,
        });
    }
    let mut s = format!(
        "# ablation: train {} videos, validate {} videos\n# config\tbest_AR@{an}\tbest_AUC\tper_seed_AR@{an}\n",
        train_split.features.len(),
        val_split.features.len()
    );
    for r in &rows {
        let seeds: Vec<String> = r.per_seed.iter().map(|v| format!("{v:.6}")).collect();
        s.push_str(&format!(
            "{}\t{:.6}\t{:.6}\t{}\n",
            r.name,
            r.best,
            r.best_auc,
            seeds.join(",")
        ));
    }
    s.push_str("# resolved config\n");
    for line in cfg.to_toml().lines() {
        s.push_str("# ");
        s.push_str(line);
        s.push('\n');
    }
    write_file(out, s.as_bytes())?;
    Ok(rows)
}
