//! Line-based `key = value` run configuration.
//!
//! Keys are dotted (`tree.height`, `plan.stage2.milestones`); lists are
//! comma separated; `#` starts a comment line. Absent keys take the desk
//! defaults, `plan.preset` picks the base plan before stage overrides apply.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::backbone::{build_desk_backbone, BlockSpec, DeskBackboneSpec};
use crate::data::{generate_synthetic, load_dataset, AugmentPolicy, Dataset, Split, SyntheticSpec};
use crate::error::{AcnetError, Result};
use crate::train::{StageConfig, TrainPlan};
use crate::tree::{build_tree, EdgeMode, Pooling, TreeConfig, TreeModel};

/// The tree is seeded this far from the run seed so its weights never share
/// a stream with the backbone's.
pub const TREE_SEED_OFFSET: u64 = 1000;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub spec: DeskBackboneSpec,
    /// Checkpoint whose `backbone.*` tensors replace the random weights.
    pub weights: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSpec),
    /// Directory holding `train/` and `test/`, each with one folder per class.
    Directory(PathBuf),
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub tree: TreeConfig,
    pub backbone: BackboneConfig,
    /// `plan.seed` always equals `seed`.
    pub plan: TrainPlan,
    pub data: DataSource,
    pub augment: AugmentPolicy,
    pub seed: u64,
    pub output: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            tree: TreeConfig::default(),
            backbone: BackboneConfig {
                spec: DeskBackboneSpec::default(),
                weights: None,
            },
            plan: TrainPlan::desk(0),
            data: DataSource::Synthetic(SyntheticSpec::new(4, 50, 32, 0)),
            augment: AugmentPolicy::DESK,
            seed: 0,
            output: PathBuf::from("runs/acnet"),
        }
    }
}

const STAGE_FIELDS: [&str; 7] = [
    "freeze_backbone",
    "epochs",
    "batch_size",
    "initial_lr",
    "lr_divisor",
    "milestones",
    "weight_decay",
];

const KEYS: [&str; 28] = [
    "seed",
    "output",
    "tree.height",
    "tree.channels",
    "tree.dilations",
    "tree.edge_mode",
    "tree.routing_pool",
    "tree.gc_block",
    "tree.attention",
    "tree.aspp",
    "tree.num_classes",
    "backbone.input_channels",
    "backbone.side",
    "backbone.widths",
    "backbone.downsample",
    "backbone.weights",
    "plan.preset",
    "plan.momentum",
    "data.source",
    "data.root",
    "data.classes",
    "data.train_per_class",
    "data.test_per_class",
    "data.side",
    "data.seed",
    "augment.resize_shorter",
    "augment.crop",
    "augment.hflip_prob",
];

fn is_known(key: &str) -> bool {
    if KEYS.contains(&key) {
        return true;
    }
    // plan.stage<N>.<field>; N is checked against the preset later.
    key.strip_prefix("plan.stage")
        .and_then(|rest| rest.split_once('.'))
        .is_some_and(|(n, field)| n.parse::<usize>().is_ok_and(|n| n >= 1) && STAGE_FIELDS.contains(&field))
}

struct Entries {
    map: BTreeMap<String, (usize, String)>,
}

impl Entries {
    fn raw(&self, key: &str) -> Option<(usize, &str)> {
        self.map.get(key).map(|(l, v)| (*l, v.as_str()))
    }

    fn get<T>(&self, key: &str, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<Option<T>> {
        match self.raw(key) {
            None => Ok(None),
            Some((line, v)) => parse(v)
                .map(Some)
                .map_err(|m| AcnetError::Parse { line, message: format!("{key}: {m}") }),
        }
    }

    fn or<T>(&self, key: &str, default: T, parse: impl Fn(&str) -> std::result::Result<T, String>) -> Result<T> {
        Ok(self.get(key, parse)?.unwrap_or(default))
    }
}

fn num<T: std::str::FromStr>(v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("cannot parse {v:?}"))
}

fn boolean(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" | "on" | "yes" => Ok(true),
        "false" | "off" | "no" => Ok(false),
        _ => Err(format!("expected true or false, got {v:?}")),
    }
}

fn list<T: std::str::FromStr>(v: &str) -> std::result::Result<Vec<T>, String> {
    if v.is_empty() {
        return Ok(Vec::new());
    }
    v.split(',').map(|s| num(s.trim())).collect()
}

fn edge_mode(v: &str) -> std::result::Result<EdgeMode, String> {
    match v {
        "asymmetric" => Ok(EdgeMode::Asymmetric),
        "symmetric" => Ok(EdgeMode::Symmetric),
        _ => Err(format!("expected asymmetric or symmetric, got {v:?}")),
    }
}

fn pooling(v: &str) -> std::result::Result<Pooling, String> {
    match v {
        "gap" => Ok(Pooling::Gap),
        "gmp" => Ok(Pooling::Gmp),
        _ => Err(format!("expected gap or gmp, got {v:?}")),
    }
}

fn join<T: std::fmt::Display>(items: &[T]) -> String {
    items.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

/// Parses configuration text; see the module docs for the format.
pub fn parse_config(text: &str) -> Result<RunConfig> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let t = raw.split_once('#').map_or(raw, |(before, _)| before).trim();
        if t.is_empty() {
            continue;
        }
        let (k, v) = t.split_once('=').ok_or_else(|| AcnetError::Parse {
            line,
            message: format!("expected `key = value`, got {t:?}"),
        })?;
        let (k, v) = (k.trim(), v.trim());
        if !is_known(k) {
            return Err(AcnetError::Parse {
                line,
                message: format!("unknown key `{k}`"),
            });
        }
        if let Some((first, _)) = map.insert(k.to_string(), (line, v.to_string())) {
            return Err(AcnetError::Parse {
                line,
                message: format!("key `{k}` already set on line {first}"),
            });
        }
    }
    let e = Entries { map };
    let d = RunConfig::default();

    let seed = e.or("seed", d.seed, num)?;
    let output = e.or("output", d.output, |v| Ok(PathBuf::from(v)))?;

    let data = match e.or("data.source", "synthetic".to_string(), |v| Ok(v.to_string()))?.as_str() {
        "synthetic" => {
            let classes = e.or("data.classes", 4, num)?;
            let train = e.or("data.train_per_class", 50, num)?;
            let mut spec = SyntheticSpec::new(classes, train, 32, 0);
            spec.test_per_class = e.or("data.test_per_class", spec.test_per_class, num)?;
            spec.side = e.or("data.side", spec.side, num)?;
            spec.seed = e.or("data.seed", spec.seed, num)?;
            DataSource::Synthetic(spec)
        }
        "directory" => {
            let root = e.get("data.root", |v| Ok(PathBuf::from(v)))?.ok_or_else(|| AcnetError::Parse {
                line: e.raw("data.source").map_or(0, |(l, _)| l),
                message: "data.source = directory needs data.root".into(),
            })?;
            DataSource::Directory(root)
        }
        other => {
            return Err(AcnetError::Parse {
                line: e.raw("data.source").map_or(0, |(l, _)| l),
                message: format!("data.source: expected synthetic or directory, got {other:?}"),
            })
        }
    };

    let height = e.or("tree.height", d.tree.height, num)?;
    let default_classes = match &data {
        DataSource::Synthetic(s) => s.classes,
        DataSource::Directory(_) => d.tree.num_classes,
    };
    let num_classes = e.or("tree.num_classes", default_classes, num)?;
    let base = TreeConfig::desk(height, num_classes);
    let tree = TreeConfig {
        height,
        channels: e.or("tree.channels", base.channels, list)?,
        dilations: e.or("tree.dilations", base.dilations, list)?,
        edge_mode: e.or("tree.edge_mode", base.edge_mode, edge_mode)?,
        routing_pool: e.or("tree.routing_pool", base.routing_pool, pooling)?,
        gc_block: e.or("tree.gc_block", base.gc_block, boolean)?,
        attention: e.or("tree.attention", base.attention, boolean)?,
        aspp: e.or("tree.aspp", base.aspp, boolean)?,
        num_classes,
    };

    let bd = &d.backbone.spec;
    let widths: Vec<usize> = e.or("backbone.widths", bd.blocks.iter().map(|b| b.width).collect(), list)?;
    let downsample: Vec<bool> = e.or("backbone.downsample", bd.blocks.iter().map(|b| b.downsample).collect(), |v| {
        v.split(',').map(|s| boolean(s.trim())).collect()
    })?;
    if widths.len() != downsample.len() {
        return Err(AcnetError::Parse {
            line: e.raw("backbone.downsample").or(e.raw("backbone.widths")).map_or(0, |(l, _)| l),
            message: format!("{} backbone widths but {} downsample flags", widths.len(), downsample.len()),
        });
    }
    let backbone = BackboneConfig {
        spec: DeskBackboneSpec {
            input_channels: e.or("backbone.input_channels", bd.input_channels, num)?,
            side: e.or("backbone.side", bd.side, num)?,
            blocks: widths
                .into_iter()
                .zip(downsample)
                .map(|(width, downsample)| BlockSpec { width, downsample })
                .collect(),
        },
        weights: e.get("backbone.weights", |v| Ok(PathBuf::from(v)))?,
    };

    let mut plan = match e.or("plan.preset", "desk".to_string(), |v| Ok(v.to_string()))?.as_str() {
        "desk" => TrainPlan::desk(seed),
        "full" => TrainPlan::full(seed),
        other => {
            return Err(AcnetError::Parse {
                line: e.raw("plan.preset").map_or(0, |(l, _)| l),
                message: format!("plan.preset: expected desk or full, got {other:?}"),
            })
        }
    };
    plan.momentum = e.or("plan.momentum", plan.momentum, num)?;
    for (key, (line, _)) in &e.map {
        if let Some(n) = key.strip_prefix("plan.stage").and_then(|r| r.split_once('.')).map(|(n, _)| n) {
            let n: usize = n.parse().unwrap();
            if n > plan.stages.len() {
                return Err(AcnetError::Parse {
                    line: *line,
                    message: format!("unknown key `{key}`: the plan has {} stages", plan.stages.len()),
                });
            }
        }
    }
    for (i, stage) in plan.stages.iter_mut().enumerate() {
        let k = |f: &str| format!("plan.stage{}.{f}", i + 1);
        let s = stage.clone();
        *stage = StageConfig {
            freeze_backbone: e.or(&k("freeze_backbone"), s.freeze_backbone, boolean)?,
            epochs: e.or(&k("epochs"), s.epochs, num)?,
            batch_size: e.or(&k("batch_size"), s.batch_size, num)?,
            initial_lr: e.or(&k("initial_lr"), s.initial_lr, num)?,
            lr_divisor: e.or(&k("lr_divisor"), s.lr_divisor, num)?,
            milestones: e.or(&k("milestones"), s.milestones, list)?,
            weight_decay: e.or(&k("weight_decay"), s.weight_decay, num)?,
        };
    }

    let augment = AugmentPolicy {
        resize_shorter: e.or("augment.resize_shorter", d.augment.resize_shorter, num)?,
        crop: e.or("augment.crop", d.augment.crop, num)?,
        hflip_prob: e.or("augment.hflip_prob", d.augment.hflip_prob, num)?,
    };

    Ok(RunConfig {
        tree,
        backbone,
        plan,
        data,
        augment,
        seed,
        output,
    })
}

/// Writes every field explicitly, so the text does not depend on defaults.
pub fn serialize_config(c: &RunConfig) -> String {
    let mut s = String::new();
    let mut kv = |k: &str, v: String| {
        let _ = writeln!(s, "{k} = {v}");
    };
    kv("seed", c.seed.to_string());
    kv("output", c.output.display().to_string());
    let t = &c.tree;
    kv("tree.height", t.height.to_string());
    kv("tree.channels", join(&t.channels));
    kv("tree.dilations", join(&t.dilations));
    kv("tree.edge_mode", t.edge_mode.as_str().into());
    kv("tree.routing_pool", t.routing_pool.as_str().into());
    kv("tree.gc_block", t.gc_block.to_string());
    kv("tree.attention", t.attention.to_string());
    kv("tree.aspp", t.aspp.to_string());
    kv("tree.num_classes", t.num_classes.to_string());
    let b = &c.backbone.spec;
    kv("backbone.input_channels", b.input_channels.to_string());
    kv("backbone.side", b.side.to_string());
    kv("backbone.widths", join(&b.blocks.iter().map(|x| x.width).collect::<Vec<_>>()));
    kv("backbone.downsample", join(&b.blocks.iter().map(|x| x.downsample).collect::<Vec<_>>()));
    if let Some(w) = &c.backbone.weights {
        kv("backbone.weights", w.display().to_string());
    }
    // Both presets have two stages; a longer plan cannot be expressed.
    kv("plan.preset", "desk".into());
    kv("plan.momentum", c.plan.momentum.to_string());
    for (i, st) in c.plan.stages.iter().enumerate() {
        let k = |f: &str| format!("plan.stage{}.{f}", i + 1);
        kv(&k("freeze_backbone"), st.freeze_backbone.to_string());
        kv(&k("epochs"), st.epochs.to_string());
        kv(&k("batch_size"), st.batch_size.to_string());
        kv(&k("initial_lr"), st.initial_lr.to_string());
        kv(&k("lr_divisor"), st.lr_divisor.to_string());
        kv(&k("milestones"), join(&st.milestones));
        kv(&k("weight_decay"), st.weight_decay.to_string());
    }
    match &c.data {
        DataSource::Synthetic(d) => {
            kv("data.source", "synthetic".into());
            kv("data.classes", d.classes.to_string());
            kv("data.train_per_class", d.train_per_class.to_string());
            kv("data.test_per_class", d.test_per_class.to_string());
            kv("data.side", d.side.to_string());
            kv("data.seed", d.seed.to_string());
        }
        DataSource::Directory(root) => {
            kv("data.source", "directory".into());
            kv("data.root", root.display().to_string());
        }
    }
    kv("augment.resize_shorter", c.augment.resize_shorter.to_string());
    kv("augment.crop", c.augment.crop.to_string());
    kv("augment.hflip_prob", c.augment.hflip_prob.to_string());
    s
}

impl RunConfig {
    pub fn validate(&self) -> Result<()> {
        self.tree.validate()?;
        let (width, _, _) = self.backbone.spec.output_shape()?;
        if self.tree.channels.first() != Some(&width) {
            return Err(AcnetError::Config(format!(
                "tree.channels starts at {:?} but the backbone outputs {width} channels",
                self.tree.channels.first()
            )));
        }
        self.plan.validate()?;
        self.augment.validate()?;
        if self.plan.stages.len() != 2 {
            return Err(AcnetError::Config("run configurations hold exactly two stages".into()));
        }
        if self.augment.crop != self.backbone.spec.side {
            return Err(AcnetError::Config(format!(
                "crop {} does not match the backbone input side {}",
                self.augment.crop, self.backbone.spec.side
            )));
        }
        Ok(())
    }

    /// Overrides the run seed (model initialization and training streams);
    /// the data seed is left alone.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.plan.seed = seed;
    }

    /// Randomly initialized model described by the configuration.
    pub fn build_architecture(&self) -> Result<TreeModel> {
        self.validate()?;
        let backbone = build_desk_backbone(&self.backbone.spec, self.seed)?;
        build_tree(&self.tree, backbone, self.seed.wrapping_add(TREE_SEED_OFFSET))
    }

    /// The architecture with `backbone.weights` applied, if configured.
    pub fn build_model(&self) -> Result<TreeModel> {
        let mut model = self.build_architecture()?;
        if let Some(path) = &self.backbone.weights {
            super::checkpoint::load_backbone_weights(&mut model, path)?;
        }
        Ok(model)
    }

    /// `(train, test)` splits.
    pub fn load_data(&self) -> Result<(Dataset, Dataset)> {
        match &self.data {
            DataSource::Synthetic(spec) => generate_synthetic(spec),
            DataSource::Directory(root) => {
                let train = load_dataset(&root.join("train"))?;
                let mut test = load_dataset(&root.join("test"))?;
                test.split = Split::Test;
                if train.class_names != test.class_names {
                    return Err(AcnetError::Data(format!(
                        "{}: train and test class directories differ",
                        root.display()
                    )));
                }
                Ok((train, test))
            }
        }
    }
}

pub fn read_config(path: &Path) -> Result<RunConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| AcnetError::io(path, e))?;
    parse_config(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_text_gives_defaults() {
        assert_eq!(parse_config("").unwrap(), RunConfig::default());
    }

    #[test]
    fn height_drives_default_widths() {
        let c = parse_config("tree.height = 2\n").unwrap();
        assert_eq!(c.tree.channels, vec![32, 16]);
    }

    #[test]
    fn unknown_and_malformed_lines_report_line_numbers() {
        match parse_config("seed = 1\ntree.colour = red\n") {
            Err(AcnetError::Parse { line: 2, message }) => assert!(message.contains("tree.colour")),
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_config("\n\nnot a pair\n"), Err(AcnetError::Parse { line: 3, .. })));
        assert!(matches!(parse_config("plan.stage3.epochs = 1\n"), Err(AcnetError::Parse { line: 1, .. })));
    }
}
