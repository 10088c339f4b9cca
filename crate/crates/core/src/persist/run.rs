//! End-to-end commands: training runs with metrics and checkpoints,
//! evaluation, inference, inspection and dataset export.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use acnet_numeric::Tensor;

use super::checkpoint::{load_checkpoint, save_checkpoint, CheckpointMeta, Progress};
use super::config::{serialize_config, RunConfig};
use super::heatmap::{grad_cam, write_pgm, Site};
use crate::data::{Dataset, NormStats, Sample};
use crate::error::{AcnetError, Result};
use crate::eval::{evaluate, predict_image, prepare_sample, top_k, EvalReport};
use crate::io::{encode_pnm, read_image, write_bytes};
use crate::train::{fit_two_stage, EpochRecord, TrainData, TrainObserver};
use crate::tree::{internal_count, leaves, nodes, NodeId, Prediction, TreeModel};

pub const METRICS_FILE: &str = "metrics.jsonl";
pub const CONFIG_FILE: &str = "config.txt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";

/// `stage<n>.ckpt`, written when stage `n` (1-based) ends.
pub fn stage_checkpoint_name(stage: usize) -> String {
    format!("stage{stage}.ckpt")
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| AcnetError::io(dir, e))
}

struct RunObserver<'a> {
    metrics: BufWriter<File>,
    metrics_path: PathBuf,
    config: &'a RunConfig,
    stats: &'a NormStats,
    out: &'a Path,
    best: Option<f64>,
}

impl RunObserver<'_> {
    fn save(&self, model: &TreeModel, progress: Progress, name: &str) -> Result<()> {
        let meta = CheckpointMeta {
            progress,
            stats: self.stats.clone(),
        };
        save_checkpoint(model, self.config, &meta, &self.out.join(name))
    }
}

impl TrainObserver<crate::backbone::DeskBackbone> for RunObserver<'_> {
    fn epoch_end(&mut self, record: &EpochRecord, model: &TreeModel) -> Result<()> {
        writeln!(self.metrics, "{}", record.to_json_line())
            .and_then(|_| self.metrics.flush())
            .map_err(|e| AcnetError::io(&self.metrics_path, e))?;
        if self.best.is_none_or(|b| record.val_top1 > b) {
            self.best = Some(record.val_top1);
            let epochs = self.config.plan.stages[record.stage - 1].epochs;
            let progress = if record.epoch == epochs {
                Progress { stages_completed: record.stage, epochs_into_stage: 0 }
            } else {
                Progress { stages_completed: record.stage - 1, epochs_into_stage: record.epoch }
            };
            self.save(model, progress, BEST_CHECKPOINT)?;
        }
        Ok(())
    }

    fn stage_end(&mut self, stage: usize, model: &TreeModel) -> Result<()> {
        let progress = Progress { stages_completed: stage, epochs_into_stage: 0 };
        self.save(model, progress, &stage_checkpoint_name(stage))
    }
}

/// Records kept from an earlier run's metrics file: those of completed stages.
fn kept_records(path: &Path, stages_completed: usize) -> Result<Vec<EpochRecord>> {
    if !path.exists() {
        return Ok(Vec::new());
    }
    let file = File::open(path).map_err(|e| AcnetError::io(path, e))?;
    let mut kept = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| AcnetError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let r: EpochRecord = serde_json::from_str(&line).map_err(|e| AcnetError::Parse {
            line: i + 1,
            message: format!("{}: {e}", path.display()),
        })?;
        if r.stage <= stages_completed {
            kept.push(r);
        }
    }
    Ok(kept)
}

/// Runs the configured two-stage training into `out`: `config.txt`,
/// `metrics.jsonl` (one record per epoch), `stage<n>.ckpt` at each stage end
/// and `best.ckpt` at the best validation epoch so far.
///
/// With `resume`, the model, statistics and progress come from a
/// stage-boundary checkpoint of the same architecture; completed stages are
/// skipped and their metric records carried over, so the outputs match an
/// uninterrupted run.
pub fn run_training(config: &RunConfig, out: &Path, resume: Option<&Path>) -> Result<Vec<EpochRecord>> {
    config.validate()?;
    create_dir(out)?;
    let (train, test) = config.load_data()?;
    if train.num_classes != config.tree.num_classes {
        return Err(AcnetError::Config(format!(
            "the data has {} classes but tree.num_classes = {}",
            train.num_classes, config.tree.num_classes
        )));
    }
    let (mut model, stats, start) = match resume {
        None => (config.build_model()?, train.compute_stats()?, 0),
        Some(path) => {
            let (model, saved, meta) = load_checkpoint(path)?;
            if saved.tree != config.tree || saved.backbone.spec != config.backbone.spec {
                return Err(AcnetError::Config(format!(
                    "{} holds a different architecture than the configuration",
                    path.display()
                )));
            }
            if !meta.progress.at_stage_boundary() {
                return Err(AcnetError::Config(format!(
                    "{} was written mid-stage; resume from a stage checkpoint",
                    path.display()
                )));
            }
            (model, meta.stats, meta.progress.stages_completed)
        }
    };
    write_bytes(&out.join(CONFIG_FILE), serialize_config(config).as_bytes())?;

    let metrics_path = out.join(METRICS_FILE);
    let kept = if resume.is_some() { kept_records(&metrics_path, start)? } else { Vec::new() };
    let mut file = BufWriter::new(File::create(&metrics_path).map_err(|e| AcnetError::io(&metrics_path, e))?);
    for r in &kept {
        writeln!(file, "{}", r.to_json_line()).map_err(|e| AcnetError::io(&metrics_path, e))?;
    }
    let mut observer = RunObserver {
        metrics: file,
        metrics_path: metrics_path.clone(),
        config,
        stats: &stats,
        out,
        best: kept.iter().map(|r| r.val_top1).reduce(f64::max),
    };
    let data = TrainData {
        train: &train,
        test: &test,
        policy: config.augment,
        stats: &stats,
    };
    let new = fit_two_stage(&mut model, data, &config.plan, start, &mut observer)?;
    Ok(kept.into_iter().chain(new).collect())
}

/// Evaluates a checkpoint on `data` (a directory of class folders) or, by
/// default, on the test split of its own configuration.
pub fn eval_checkpoint(ckpt: &Path, data: Option<&Path>) -> Result<EvalReport> {
    let (mut model, config, meta) = load_checkpoint(ckpt)?;
    let dataset = match data {
        Some(dir) => crate::data::load_dataset(dir)?,
        None => config.load_data()?.1,
    };
    evaluate(&mut model, &dataset, &config.augment, &meta.stats)
}

/// `(class, confidence)` pairs ranked by the final distribution.
pub fn infer_image(ckpt: &Path, image: &Path, k: usize) -> Result<Vec<(usize, f64)>> {
    let (mut model, config, meta) = load_checkpoint(ckpt)?;
    let img = read_image(image)?;
    let pred = predict_image(&mut model, &img, &config.augment, &meta.stats)?;
    Ok(top_k(&pred, k))
}

/// Routing and leaf outputs for one image, plus the heatmaps written.
#[derive(Clone, Debug)]
pub struct InspectReport {
    pub prediction: Prediction,
    pub predicted: usize,
    pub files: Vec<PathBuf>,
}

impl InspectReport {
    /// Plain-text rendering: one line per routing gate, per leaf and for the
    /// final distribution.
    pub fn to_text(&self) -> String {
        let p = &self.prediction;
        let h = p.height;
        let fmt = |t: &Tensor| t.data().iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(" ");
        let mut s = String::new();
        let _ = writeln!(s, "height {h}");
        let _ = writeln!(s, "predicted {}", self.predicted);
        let _ = writeln!(s, "combined {}", fmt(&p.combined));
        for node in nodes(h).take(internal_count(h)) {
            let _ = writeln!(
                s,
                "gate {node} left {:.6} r {:.6}",
                p.gates[node.flat()].item(),
                p.path_probs[node.flat()].item()
            );
        }
        for (i, node) in leaves(h).enumerate() {
            let _ = writeln!(
                s,
                "leaf {} node {node} r {:.6} dist {}",
                i + 1,
                p.path_probs[node.flat()].item(),
                fmt(&p.leaf_probs[i])
            );
        }
        let _ = writeln!(s, "leaf_r_sum {:.9}", p.leaf_path_probs().iter().map(|t| t.item()).sum::<f64>());
        s
    }
}

fn prepared(image: &Tensor, config: &RunConfig, stats: &NormStats) -> Result<Tensor> {
    let sample = Sample {
        image: image.clone(),
        label: 0,
        id: String::new(),
        glyph: None,
    };
    Ok(prepare_sample::<rand_chacha::ChaCha8Rng>(&sample, &config.augment, stats, None)?.image)
}

/// Writes `report.txt` and one Grad-CAM PGM for the predicted class per
/// routing node (`node_<level>_<index>.pgm`) and per leaf (`leaf_<i>.pgm`).
pub fn inspect_image(model: &mut TreeModel, config: &RunConfig, stats: &NormStats, image: &Tensor, out: &Path) -> Result<InspectReport> {
    create_dir(out)?;
    let x = prepared(image, config, stats)?;
    let prediction = model.predict(&Tensor::stack(std::slice::from_ref(&x))?)?;
    let predicted = prediction.predicted()[0];
    let h = config.tree.height;
    let mut files = Vec::new();
    let mut sites: Vec<(Site, String)> = nodes(h)
        .take(internal_count(h))
        .map(|n: NodeId| (Site::Node(n), format!("node_{}_{}.pgm", n.level, n.index)))
        .collect();
    sites.extend((1..=config.tree.leaf_count()).map(|i| (Site::Leaf(i), format!("leaf_{i}.pgm"))));
    for (site, name) in sites {
        let map = grad_cam(model, &x, predicted, site)?;
        let path = out.join(name);
        write_pgm(&map, &path)?;
        files.push(path);
    }
    let report = InspectReport {
        prediction,
        predicted,
        files,
    };
    let path = out.join("report.txt");
    write_bytes(&path, report.to_text().as_bytes())?;
    let mut report = report;
    report.files.push(path);
    Ok(report)
}

/// `inspect_image` for a checkpoint and an image file.
pub fn inspect_checkpoint(ckpt: &Path, image: &Path, out: &Path) -> Result<InspectReport> {
    let (mut model, config, meta) = load_checkpoint(ckpt)?;
    let img = read_image(image)?;
    inspect_image(&mut model, &config, &meta.stats, &img, out)
}

/// Writes `<dir>/<class>/<index>.ppm` for every sample (8-bit, so pixel
/// values are quantized to multiples of 1/255).
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    for (label, name) in dataset.class_names.iter().enumerate() {
        create_dir(&dir.join(name))?;
        for (i, s) in dataset.samples.iter().filter(|s| s.label == label).enumerate() {
            write_bytes(&dir.join(name).join(format!("{i:04}.ppm")), &encode_pnm(&s.image)?)?;
        }
    }
    Ok(())
}

/// Writes a synthetic data set as `train/` and `test/` class folders plus
/// `boxes.csv` with every glyph's bounding box.
pub fn export_synthetic(spec: &crate::data::SyntheticSpec, out: &Path) -> Result<()> {
    let (train, test) = crate::data::generate_synthetic(spec)?;
    let mut csv = String::from("split,class,index,top,left,bottom,right\n");
    for (split, ds) in [("train", &train), ("test", &test)] {
        write_dataset(ds, &out.join(split))?;
        for (label, name) in ds.class_names.iter().enumerate() {
            for (i, s) in ds.samples.iter().filter(|s| s.label == label).enumerate() {
                if let Some(b) = s.glyph {
                    let _ = writeln!(csv, "{split},{name},{i:04},{},{},{},{}", b.top, b.left, b.bottom, b.right);
                }
            }
        }
    }
    write_bytes(&out.join("boxes.csv"), csv.as_bytes())
}
