//! The six verbs. Each writes its artifacts plus a run manifest into the
//! output directory.

use std::path::{Path, PathBuf};
use std::time::Instant;

use dvc_core::checkpoint::{load_model, load_state, save_model, save_state};
use dvc_core::clustering::{assign_labels, hard_counts, soft_assign};
use dvc_core::data::{load_idx, load_image_folder, synth_blobs};
use dvc_core::metrics::MetricsReport;
use dvc_core::model::{build_model, ArchitectureSpec};
use dvc_core::train::{
    embed_all, init_centroids, joint_train_observed, pretrain_observed, write_loss_csv, LossRecord, TargetUpdate,
    TrainObserver,
};
use dvc_core::{Dataset, DvcError, TrainState, Vae};
use log::{info, warn};
use serde::Serialize;

use crate::artifacts::{self, ensure_dir, write_json};
use crate::config::{DataConfig, RunConfig};
use crate::{CliError, CliResult};

/// Models are trained in single precision.
pub type Model = Vae<f32>;

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Dataset> {
    let data = match &cfg.data {
        DataConfig::Idx { images, labels } => load_idx(images, labels.as_deref())?,
        DataConfig::Folder {
            root,
            height,
            width,
            grayscale,
        } => {
            let loaded = load_image_folder(root, *height, *width, *grayscale)?;
            for (path, reason) in &loaded.skipped {
                warn!("skipped {}: {reason}", path.display());
            }
            loaded.dataset
        }
        DataConfig::Synth {
            k,
            per_cluster,
            dim,
            separation,
            noise_sigma,
            seed,
        } => synth_blobs(*k, *per_cluster, *dim, *separation, *noise_sigma, *seed)?,
    };
    let data = match cfg.limit {
        Some(n) => data.head(n),
        None => data,
    };
    if data.is_empty() {
        return Err(CliError::Usage("dataset is empty".into()));
    }
    info!("dataset {}: {} samples of shape {}", data.name, data.len(), data.shape);
    Ok(data)
}

#[derive(Serialize)]
struct DatasetInfo {
    name: String,
    n: usize,
    shape: String,
    labeled: bool,
}

impl DatasetInfo {
    fn of(data: &Dataset) -> Self {
        Self {
            name: data.name.clone(),
            n: data.len(),
            shape: data.shape.to_string(),
            labeled: data.labels.is_some(),
        }
    }
}

/// Self-describing record of a run, written on success and on failure.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'a str,
    status: &'a str,
    error: Option<String>,
    version: &'a str,
    config: &'a RunConfig,
    dataset: Option<DatasetInfo>,
    architecture: Option<ArchitectureSpec>,
    iterations: usize,
    wall_seconds: f64,
    artifacts: Vec<&'a str>,
}

struct Run<'a> {
    command: &'a str,
    cfg: &'a RunConfig,
    start: Instant,
}

impl<'a> Run<'a> {
    fn start(command: &'a str, cfg: &'a RunConfig) -> CliResult<Self> {
        ensure_dir(&cfg.output_dir)?;
        Ok(Self {
            command,
            cfg,
            start: Instant::now(),
        })
    }

    fn path(&self, name: &str) -> PathBuf {
        self.cfg.output_dir.join(name)
    }

    fn finish(
        &self,
        result: Result<(), &CliError>,
        data: Option<&Dataset>,
        architecture: Option<ArchitectureSpec>,
        iterations: usize,
        artifacts: Vec<&str>,
    ) -> CliResult<()> {
        let manifest = RunManifest {
            command: self.command,
            status: if result.is_ok() { "ok" } else { "failed" },
            error: result.err().map(ToString::to_string),
            version: env!("CARGO_PKG_VERSION"),
            config: self.cfg,
            dataset: data.map(DatasetInfo::of),
            architecture,
            iterations,
            wall_seconds: self.start.elapsed().as_secs_f64(),
            artifacts,
        };
        write_json(&self.path(artifacts::MANIFEST), &manifest)
    }
}

fn write_history(path: &Path, records: &[LossRecord]) -> CliResult<()> {
    let file = std::fs::File::create(path).map_err(|e| DvcError::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    write_loss_csv(std::io::BufWriter::new(file), records)?;
    Ok(())
}

/// Collects records, checkpoints at target updates and dumps the model on
/// numeric failure.
struct RunObserver {
    dir: PathBuf,
    seed: u64,
    records: Vec<LossRecord>,
    checkpoint_updates: bool,
}

impl TrainObserver<f32> for RunObserver {
    fn on_record(&mut self, record: &LossRecord) {
        self.records.push(*record);
    }

    fn on_target_update(&mut self, state: &TrainState<f32>, update: &TargetUpdate) -> dvc_core::Result<()> {
        if !update.reseeded.is_empty() {
            warn!(
                "iteration {}: re-seeded empty clusters {:?}",
                update.iteration, update.reseeded
            );
        }
        if self.checkpoint_updates {
            save_state(state, self.seed, &self.dir.join(artifacts::STATE))?;
        }
        Ok(())
    }

    fn on_failure(&mut self, params: &Model, error: &DvcError) {
        let path = self.dir.join(artifacts::FAILURE_DUMP);
        match save_model(params, self.seed, &path) {
            Ok(_) => warn!("{error}; model dumped to {}", path.display()),
            Err(e) => warn!("{error}; could not dump model: {e}"),
        }
    }
}

/// Trains the autoencoder alone and saves it.
pub fn pretrain(cfg: &RunConfig) -> CliResult<PathBuf> {
    let run = Run::start("pretrain", cfg)?;
    let data = load_dataset(cfg)?;
    let spec = cfg.arch.spec(data.shape);
    let mut model: Model = build_model(&spec, cfg.seed)?;
    info!("{} parameters", model.parameter_count());
    let mut obs = RunObserver {
        dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        records: Vec::new(),
        checkpoint_updates: false,
    };
    let result = pretrain_observed(&mut model, &data, &cfg.schedule, &mut obs).map_err(CliError::from);
    write_history(&run.path(artifacts::PRETRAIN_LOSS), &obs.records)?;
    let iterations = obs.records.len();
    if let Err(e) = &result {
        run.finish(
            Err(e),
            Some(&data),
            Some(spec),
            iterations,
            vec![artifacts::PRETRAIN_LOSS],
        )?;
        return Err(result.unwrap_err());
    }
    let ckpt = run.path(artifacts::PRETRAINED);
    save_model(&model, cfg.seed, &ckpt)?;
    run.finish(
        Ok(()),
        Some(&data),
        Some(spec),
        iterations,
        vec![artifacts::PRETRAINED, artifacts::PRETRAIN_LOSS],
    )?;
    Ok(ckpt)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ConvergenceSummary {
    pub converged: bool,
    pub iterations: usize,
    pub target_updates: usize,
    pub final_label_change: Option<f64>,
    pub delta: f64,
    pub k: usize,
    pub cluster_sizes: Vec<usize>,
}

/// Centroid initialization plus joint training, starting from a pretrained
/// model or resuming from a saved state.
pub fn cluster(cfg: &RunConfig, checkpoint: &Path, resume: Option<&Path>) -> CliResult<ConvergenceSummary> {
    let run = Run::start("cluster", cfg)?;
    let data = load_dataset(cfg)?;
    if cfg.k > data.len() {
        return Err(CliError::Usage(format!(
            "cluster.k = {} exceeds the dataset size {}",
            cfg.k,
            data.len()
        )));
    }
    let spec = cfg.arch.spec(data.shape);
    let (model, _) = load_model::<f32>(checkpoint)?;
    if model.spec().fingerprint() != spec.fingerprint() {
        return Err(DvcError::Integrity(format!(
            "checkpoint architecture {:?} does not match the configured {:?}",
            model.spec(),
            spec
        ))
        .into());
    }
    let state = match resume {
        Some(path) => {
            let (state, _) = load_state::<f32>(path)?;
            if state.params.spec() != &spec || state.centroids.k() != cfg.k {
                return Err(DvcError::Integrity("resume state does not match the configuration".into()).into());
            }
            info!("resuming at iteration {}", state.iteration);
            state
        }
        None => {
            let (centroids, labels) = init_centroids(&model, &data, cfg.k, cfg.seed, cfg.schedule.kmeans_restarts)?;
            TrainState::new(model, centroids, labels)
        }
    };
    let mut obs = RunObserver {
        dir: cfg.output_dir.clone(),
        seed: cfg.seed,
        records: state.loss_history.clone(),
        checkpoint_updates: true,
    };
    let state = match joint_train_observed(state, &data, &cfg.schedule, &mut obs) {
        Ok(s) => s,
        Err(e) => {
            let e = CliError::from(e);
            write_history(&run.path(artifacts::LOSS), &obs.records)?;
            run.finish(
                Err(&e),
                Some(&data),
                Some(spec),
                obs.records.len(),
                vec![artifacts::LOSS],
            )?;
            return Err(e);
        }
    };
    save_state(&state, cfg.seed, &run.path(artifacts::FINAL))?;
    artifacts::write_labels(&run.path(artifacts::LABELS), &state.last_labels)?;
    write_history(&run.path(artifacts::LOSS), &state.loss_history)?;
    let summary = ConvergenceSummary {
        converged: state.converged,
        iterations: state.iteration,
        target_updates: state.target_updates,
        final_label_change: state.last_label_change(),
        delta: cfg.schedule.delta,
        k: cfg.k,
        cluster_sizes: hard_counts(&state.last_labels, cfg.k),
    };
    write_json(&run.path(artifacts::CONVERGENCE), &summary)?;
    let mut written = vec![
        artifacts::FINAL,
        artifacts::STATE,
        artifacts::LABELS,
        artifacts::LOSS,
        artifacts::CONVERGENCE,
    ];
    if let Some(truth) = &data.labels {
        let report = MetricsReport::evaluate(truth, &state.last_labels)?;
        info!("ACC {:.4} NMI {:.4} ARI {:.4}", report.acc, report.nmi, report.ari);
        write_json(&run.path(artifacts::METRICS), &report)?;
        written.push(artifacts::METRICS);
    }
    run.finish(
        Ok(()),
        Some(&data),
        Some(state.params.spec().clone()),
        state.iteration,
        written,
    )?;
    Ok(summary)
}

/// Scores a labels CSV against the dataset's ground truth.
pub fn evaluate(cfg: &RunConfig, labels_csv: &Path) -> CliResult<MetricsReport> {
    let run = Run::start("evaluate", cfg)?;
    let data = load_dataset(cfg)?;
    let truth = data
        .labels
        .as_ref()
        .ok_or_else(|| CliError::Usage("dataset has no ground-truth labels".into()))?;
    let predicted = artifacts::read_labels(labels_csv, data.len())?;
    let report = MetricsReport::evaluate(truth, &predicted)?;
    write_json(&run.path(artifacts::METRICS), &report)?;
    run.finish(Ok(()), Some(&data), None, 0, vec![artifacts::METRICS])?;
    Ok(report)
}

/// Noise-free embeddings with their cluster under the saved centroids.
pub fn embed(cfg: &RunConfig, checkpoint: &Path) -> CliResult<PathBuf> {
    let run = Run::start("embed", cfg)?;
    let data = load_dataset(cfg)?;
    let (state, _) = load_state::<f32>(checkpoint)?;
    let z = embed_all(&state.params, &data)?;
    let q = soft_assign(z.view(), &state.centroids, cfg.schedule.alpha)?;
    let clusters = assign_labels(&q);
    let out = run.path(artifacts::EMBEDDINGS);
    artifacts::write_embeddings(&out, z.view(), &clusters)?;
    run.finish(
        Ok(()),
        Some(&data),
        Some(state.params.spec().clone()),
        0,
        vec![artifacts::EMBEDDINGS],
    )?;
    Ok(out)
}

/// Loads the model from either kind of checkpoint.
fn load_any_model(path: &Path) -> CliResult<Model> {
    match load_state::<f32>(path) {
        Ok((state, _)) => Ok(state.params),
        Err(DvcError::Integrity(_)) => Ok(load_model::<f32>(path)?.0),
        Err(e) => Err(e.into()),
    }
}

/// Decodes `n` prior samples into a PNG grid.
pub fn generate(cfg: &RunConfig, checkpoint: &Path, n: usize) -> CliResult<PathBuf> {
    if n == 0 {
        return Err(CliError::Usage("--n must be positive".into()));
    }
    let run = Run::start("generate", cfg)?;
    let model = load_any_model(checkpoint)?;
    let samples = model.sample_images(n, cfg.seed)?;
    let out = run.path(artifacts::SAMPLES);
    let (rows, cols) = artifacts::write_grid(&out, &samples)?;
    info!("wrote {n} samples as a {rows}x{cols} grid");
    run.finish(Ok(()), None, Some(model.spec().clone()), 0, vec![artifacts::SAMPLES])?;
    Ok(out)
}

#[derive(Debug, Serialize)]
struct ReportRow {
    run: String,
    dataset: String,
    variant: String,
    acc: f64,
    nmi: f64,
    ari: f64,
    iterations: String,
    wall_seconds: String,
}

fn report_row(name: String, dir: &Path) -> Option<ReportRow> {
    let metrics_path = dir.join(artifacts::METRICS);
    let text = std::fs::read_to_string(&metrics_path).ok()?;
    let metrics: MetricsReport = match serde_json::from_str(&text) {
        Ok(m) => m,
        Err(e) => {
            warn!("skipping {}: malformed metrics ({e})", metrics_path.display());
            return None;
        }
    };
    let manifest: serde_json::Value = std::fs::read_to_string(dir.join(artifacts::MANIFEST))
        .ok()
        .and_then(|t| serde_json::from_str(&t).ok())
        .unwrap_or_default();
    let text_of = |v: &serde_json::Value| match v {
        serde_json::Value::Null => String::new(),
        serde_json::Value::String(s) => s.clone(),
        other => other.to_string(),
    };
    Some(ReportRow {
        run: manifest["config"]["run_name"].as_str().map_or(name, str::to_string),
        dataset: text_of(&manifest["dataset"]["name"]),
        variant: text_of(&manifest["architecture"]["variant"]),
        acc: metrics.acc,
        nmi: metrics.nmi,
        ari: metrics.ari,
        iterations: text_of(&manifest["iterations"]),
        wall_seconds: text_of(&manifest["wall_seconds"]),
    })
}

/// Aggregates every run directory under `run_dir` (and `run_dir` itself)
/// that holds a metrics report into one CSV, sorted by run name.
pub fn report(run_dir: &Path, out: &Path) -> CliResult<(PathBuf, usize)> {
    let entries = std::fs::read_dir(run_dir)
        .map_err(|e| CliError::Usage(format!("cannot read run directory {}: {e}", run_dir.display())))?;
    let mut dirs: Vec<PathBuf> = entries
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.push(run_dir.to_path_buf());
    let mut rows: Vec<ReportRow> = dirs
        .into_iter()
        .filter_map(|d| {
            let name = d
                .canonicalize()
                .unwrap_or_else(|_| d.clone())
                .file_name()
                .map_or_else(|| d.display().to_string(), |n| n.to_string_lossy().into_owned());
            report_row(name, &d)
        })
        .collect();
    if rows.is_empty() {
        return Err(CliError::Usage(format!(
            "no metrics reports under {}",
            run_dir.display()
        )));
    }
    rows.sort_by(|a, b| a.run.cmp(&b.run));
    ensure_dir(
        out.parent()
            .filter(|p| !p.as_os_str().is_empty())
            .unwrap_or(Path::new(".")),
    )?;
    let fail = |e: csv::Error| DvcError::Format {
        path: out.to_path_buf(),
        reason: e.to_string(),
    };
    let mut w = csv::Writer::from_path(out).map_err(fail)?;
    for row in &rows {
        w.serialize(row).map_err(fail)?;
    }
    w.flush().map_err(|e| DvcError::Io {
        path: out.to_path_buf(),
        source: e,
    })?;
    Ok((out.to_path_buf(), rows.len()))
}
