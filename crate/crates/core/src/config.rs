//! Run configuration: a flat `key=value` file with `#` comments.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::bev::GridSpec;
use crate::dense::{DEFAULT_NEG_WEIGHT, DEFAULT_NMS_THRESHOLD};
use crate::error::{Error, Result};
use crate::matcher::Indicator;
use crate::model::{EdgeFeature, HeadKind, Interaction, ModelConfig};
use crate::scene::SceneConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DistillMode {
    None,
    Set,
    Feature,
    Pseudo,
    /// Set-to-set distillation from a teacher of the student's own architecture.
    SelfDistill,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DataConfig {
    pub scene: SceneConfig,
    pub train_scenes: usize,
    pub eval_scenes: usize,
    /// Density transform applied to this model's inputs (train and eval).
    pub densify: usize,
    pub keep: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch: usize,
    pub lr_start: f64,
    pub lr_peak: f64,
    pub lr_end: f64,
    pub weight_decay: f64,
    pub indicator: Indicator,
    pub neg_weight: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalConfig {
    pub top_k: usize,
    pub dense_top_k: usize,
    pub nms_threshold: f64,
    pub score_floor: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DistillConfig {
    pub mode: DistillMode,
    pub teacher: Option<PathBuf>,
    pub alpha: f64,
    pub beta: f64,
    pub mask_empty: bool,
    /// Density transform applied to the teacher's inputs.
    pub teacher_densify: usize,
    pub teacher_keep: f64,
    pub pseudo_fraction: f64,
    pub pseudo_threshold: f64,
    pub init_from_teacher: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub model: ModelConfig,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub distill: DistillConfig,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            model: ModelConfig::default(),
            data: DataConfig {
                scene: SceneConfig::default(),
                train_scenes: 500,
                eval_scenes: 100,
                densify: 1,
                keep: 1.0,
            },
            train: TrainConfig {
                epochs: 10,
                batch: 4,
                lr_start: 1e-4,
                lr_peak: 1e-3,
                lr_end: 1e-8,
                weight_decay: 1e-2,
                indicator: Indicator::Detr,
                neg_weight: DEFAULT_NEG_WEIGHT,
            },
            eval: EvalConfig {
                top_k: 32,
                dense_top_k: 100,
                nms_threshold: DEFAULT_NMS_THRESHOLD,
                score_floor: 0.1,
            },
            distill: DistillConfig {
                mode: DistillMode::None,
                teacher: None,
                alpha: 1.0,
                beta: 1.0,
                mask_empty: false,
                teacher_densify: 1,
                teacher_keep: 1.0,
                pseudo_fraction: 0.5,
                pseudo_threshold: 0.5,
                init_from_teacher: false,
            },
            out: None,
        }
    }
}

/// Every recognized key with a one-line description, for the CLI help.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "model initialization and batch order seed"),
    ("data.seed", "dataset seed; scene i uses data.seed XOR i"),
    ("data.train_scenes", "number of training scenes"),
    ("data.eval_scenes", "number of evaluation scenes"),
    ("data.extent", "half side of the square scene in meters"),
    ("data.min_objects", "minimum objects per scene"),
    ("data.max_objects", "maximum objects per scene"),
    ("data.min_points", "minimum surface points per object"),
    ("data.max_points", "maximum surface points per object"),
    ("data.clutter", "ground clutter points per scene"),
    ("data.max_speed", "maximum object speed in m/s"),
    ("data.densify", "point density factor for this model's inputs"),
    ("data.keep", "fraction of points kept for this model's inputs"),
    ("model.head", "set | dense"),
    ("model.queries", "number of object queries"),
    ("model.query_dim", "query embedding width"),
    ("model.layers", "number of refinement layers"),
    ("model.neighbors", "k of the kNN graph (self included)"),
    ("model.offsets", "sampling points per query"),
    ("model.interaction", "dgcnn | self-attention"),
    ("model.edge_feature", "difference | concat"),
    ("model.edge_convs", "interaction blocks per layer"),
    ("model.attention_heads", "heads of the self-attention alternative"),
    ("model.head_hidden", "hidden width of the prediction heads"),
    ("model.pillar_hidden", "hidden width of the pillar PointNet"),
    ("model.pillar_channels", "pillar feature channels"),
    ("model.backbone", "comma-separated conv block widths"),
    ("model.cell_size", "pillar cell size in meters"),
    ("train.epochs", "training epochs"),
    ("train.batch", "scenes per optimizer step"),
    ("train.lr_start", "learning rate at step 0"),
    ("train.lr_peak", "learning rate at 40% of the steps"),
    ("train.lr_end", "learning rate at the last step"),
    ("train.weight_decay", "decoupled AdamW weight decay"),
    ("train.indicator", "detr | literal no-object indicator handling"),
    ("train.neg_weight", "weight of no-object pixels in the dense loss"),
    ("eval.top_k", "detections kept per scene for the set head"),
    ("eval.dense_top_k", "detections kept per scene for the dense head"),
    ("eval.nms_threshold", "IoU above which NMS suppresses"),
    ("eval.score_floor", "minimum score for dense detections"),
    ("distill.mode", "none | set | feature | pseudo | self"),
    ("distill.teacher", "teacher checkpoint path"),
    ("distill.alpha", "weight of the supervised loss"),
    ("distill.beta", "weight of the distillation loss"),
    ("distill.mask_empty", "drop the box term for no-object teacher slots"),
    ("distill.teacher_densify", "point density factor for the teacher's inputs"),
    ("distill.teacher_keep", "fraction of points kept for the teacher's inputs"),
    ("distill.pseudo_fraction", "fraction of scenes labeled by the teacher"),
    ("distill.pseudo_threshold", "no-object probability below which teacher detections are kept"),
    ("distill.init_from_teacher", "start the student from the teacher weights"),
    ("out", "output directory"),
];

fn parse<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::Config(format!("invalid value `{v}` for `{key}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
    }
}

impl RunConfig {
    /// Applies one `key=value` override.
    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        let v = v.trim();
        let s = &mut self.data.scene;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.seed" => s.seed = parse(key, v)?,
            "data.train_scenes" => self.data.train_scenes = parse(key, v)?,
            "data.eval_scenes" => self.data.eval_scenes = parse(key, v)?,
            "data.extent" => s.extent = parse(key, v)?,
            "data.min_objects" => s.objects.0 = parse(key, v)?,
            "data.max_objects" => s.objects.1 = parse(key, v)?,
            "data.min_points" => s.points_per_object.0 = parse(key, v)?,
            "data.max_points" => s.points_per_object.1 = parse(key, v)?,
            "data.clutter" => s.clutter_points = parse(key, v)?,
            "data.max_speed" => s.speed.1 = parse(key, v)?,
            "data.densify" => self.data.densify = parse(key, v)?,
            "data.keep" => self.data.keep = parse(key, v)?,
            "model.head" => {
                self.model.head = match v {
                    "set" => HeadKind::Set,
                    "dense" => HeadKind::Dense,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "model.queries" => self.model.queries = parse(key, v)?,
            "model.query_dim" => self.model.query_dim = parse(key, v)?,
            "model.layers" => self.model.layers = parse(key, v)?,
            "model.neighbors" => self.model.neighbors = parse(key, v)?,
            "model.offsets" => self.model.offsets = parse(key, v)?,
            "model.interaction" => {
                self.model.interaction = match v {
                    "dgcnn" => Interaction::Dgcnn,
                    "self-attention" => Interaction::SelfAttention,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "model.edge_feature" => {
                self.model.edge_feature = match v {
                    "difference" => EdgeFeature::Difference,
                    "concat" => EdgeFeature::Concat,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "model.edge_convs" => self.model.edge_convs = parse(key, v)?,
            "model.attention_heads" => self.model.attention_heads = parse(key, v)?,
            "model.head_hidden" => self.model.head_hidden = parse(key, v)?,
            "model.pillar_hidden" => self.model.pillar_hidden = parse(key, v)?,
            "model.pillar_channels" => self.model.pillar_channels = parse(key, v)?,
            "model.backbone" => {
                self.model.backbone = v
                    .split(',')
                    .map(|c| parse::<usize>(key, c.trim()))
                    .collect::<Result<_>>()?
            }
            "model.cell_size" => self.model.grid.cell = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.batch" => self.train.batch = parse(key, v)?,
            "train.lr_start" => self.train.lr_start = parse(key, v)?,
            "train.lr_peak" => self.train.lr_peak = parse(key, v)?,
            "train.lr_end" => self.train.lr_end = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.indicator" => {
                self.train.indicator = match v {
                    "detr" => Indicator::Detr,
                    "literal" => Indicator::Literal,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "train.neg_weight" => self.train.neg_weight = parse(key, v)?,
            "eval.top_k" => self.eval.top_k = parse(key, v)?,
            "eval.dense_top_k" => self.eval.dense_top_k = parse(key, v)?,
            "eval.nms_threshold" => self.eval.nms_threshold = parse(key, v)?,
            "eval.score_floor" => self.eval.score_floor = parse(key, v)?,
            "distill.mode" => {
                self.distill.mode = match v {
                    "none" => DistillMode::None,
                    "set" => DistillMode::Set,
                    "feature" => DistillMode::Feature,
                    "pseudo" => DistillMode::Pseudo,
                    "self" => DistillMode::SelfDistill,
                    _ => return Err(Error::Config(format!("invalid value `{v}` for `{key}`"))),
                }
            }
            "distill.teacher" => self.distill.teacher = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "distill.alpha" => self.distill.alpha = parse(key, v)?,
            "distill.beta" => self.distill.beta = parse(key, v)?,
            "distill.mask_empty" => self.distill.mask_empty = parse_bool(key, v)?,
            "distill.teacher_densify" => self.distill.teacher_densify = parse(key, v)?,
            "distill.teacher_keep" => self.distill.teacher_keep = parse(key, v)?,
            "distill.pseudo_fraction" => self.distill.pseudo_fraction = parse(key, v)?,
            "distill.pseudo_threshold" => self.distill.pseudo_threshold = parse(key, v)?,
            "distill.init_from_teacher" => self.distill.init_from_teacher = parse_bool(key, v)?,
            "out" => self.out = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        self.sync_grid();
        Ok(())
    }

    fn sync_grid(&mut self) {
        self.model.grid = GridSpec::centered(self.data.scene.extent, self.model.grid.cell);
        self.model.num_classes = self.data.scene.num_classes();
    }

    /// Applies every `key=value` line of `text` on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (no, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key=value`, found `{line}`", no + 1)))?;
            self.set(k.trim(), v)
                .map_err(|e| Error::Config(format!("line {}: {e}", no + 1)))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.data.scene.validate()?;
        self.model.validate()?;
        let bad = |m: &str| Err(Error::Config(m.to_string()));
        if self.train.batch == 0 {
            return bad("train.batch must be positive");
        }
        let rates = [self.train.lr_start, self.train.lr_peak, self.train.lr_end];
        let all_zero = rates.iter().all(|r| *r == 0.0);
        if !all_zero && rates.iter().any(|r| !(*r > 0.0)) {
            return bad("learning rates must all be positive (or all zero)");
        }
        if self.data.densify == 0 || self.distill.teacher_densify == 0 {
            return bad("densify factors must be at least 1");
        }
        for k in [self.data.keep, self.distill.teacher_keep] {
            if !(k > 0.0 && k <= 1.0) {
                return bad("keep fractions must lie in (0, 1]");
            }
        }
        if self.eval.top_k == 0 || self.eval.dense_top_k == 0 {
            return bad("top-k values must be positive");
        }
        Ok(())
    }

    /// Canonical dump of every key, sorted, parseable by [`from_text`](Self::from_text).
    pub fn echo(&self) -> String {
        let m = &self.model;
        let s = &self.data.scene;
        let name = |h: HeadKind| if h == HeadKind::Set { "set" } else { "dense" };
        let mut kv: BTreeMap<&str, String> = BTreeMap::new();
        kv.insert("seed", self.seed.to_string());
        kv.insert("data.seed", s.seed.to_string());
        kv.insert("data.train_scenes", self.data.train_scenes.to_string());
        kv.insert("data.eval_scenes", self.data.eval_scenes.to_string());
        kv.insert("data.extent", s.extent.to_string());
        kv.insert("data.min_objects", s.objects.0.to_string());
        kv.insert("data.max_objects", s.objects.1.to_string());
        kv.insert("data.min_points", s.points_per_object.0.to_string());
        kv.insert("data.max_points", s.points_per_object.1.to_string());
        kv.insert("data.clutter", s.clutter_points.to_string());
        kv.insert("data.max_speed", s.speed.1.to_string());
        kv.insert("data.densify", self.data.densify.to_string());
        kv.insert("data.keep", self.data.keep.to_string());
        kv.insert("model.head", name(m.head).into());
        kv.insert("model.queries", m.queries.to_string());
        kv.insert("model.query_dim", m.query_dim.to_string());
        kv.insert("model.layers", m.layers.to_string());
        kv.insert("model.neighbors", m.neighbors.to_string());
        kv.insert("model.offsets", m.offsets.to_string());
        kv.insert(
            "model.interaction",
            match m.interaction {
                Interaction::Dgcnn => "dgcnn",
                Interaction::SelfAttention => "self-attention",
            }
            .into(),
        );
        kv.insert(
            "model.edge_feature",
            match m.edge_feature {
                EdgeFeature::Difference => "difference",
                EdgeFeature::Concat => "concat",
            }
            .into(),
        );
        kv.insert("model.edge_convs", m.edge_convs.to_string());
        kv.insert("model.attention_heads", m.attention_heads.to_string());
        kv.insert("model.head_hidden", m.head_hidden.to_string());
        kv.insert("model.pillar_hidden", m.pillar_hidden.to_string());
        kv.insert("model.pillar_channels", m.pillar_channels.to_string());
        kv.insert(
            "model.backbone",
            m.backbone.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(","),
        );
        kv.insert("model.cell_size", m.grid.cell.to_string());
        kv.insert("train.epochs", self.train.epochs.to_string());
        kv.insert("train.batch", self.train.batch.to_string());
        kv.insert("train.lr_start", self.train.lr_start.to_string());
        kv.insert("train.lr_peak", self.train.lr_peak.to_string());
        kv.insert("train.lr_end", self.train.lr_end.to_string());
        kv.insert("train.weight_decay", self.train.weight_decay.to_string());
        kv.insert(
            "train.indicator",
            match self.train.indicator {
                Indicator::Detr => "detr",
                Indicator::Literal => "literal",
            }
            .into(),
        );
        kv.insert("train.neg_weight", self.train.neg_weight.to_string());
        kv.insert("eval.top_k", self.eval.top_k.to_string());
        kv.insert("eval.dense_top_k", self.eval.dense_top_k.to_string());
        kv.insert("eval.nms_threshold", self.eval.nms_threshold.to_string());
        kv.insert("eval.score_floor", self.eval.score_floor.to_string());
        let d = &self.distill;
        kv.insert(
            "distill.mode",
            match d.mode {
                DistillMode::None => "none",
                DistillMode::Set => "set",
                DistillMode::Feature => "feature",
                DistillMode::Pseudo => "pseudo",
                DistillMode::SelfDistill => "self",
            }
            .into(),
        );
        kv.insert(
            "distill.teacher",
            d.teacher.as_ref().map(|p| p.display().to_string()).unwrap_or_default(),
        );
        kv.insert("distill.alpha", d.alpha.to_string());
        kv.insert("distill.beta", d.beta.to_string());
        kv.insert("distill.mask_empty", d.mask_empty.to_string());
        kv.insert("distill.teacher_densify", d.teacher_densify.to_string());
        kv.insert("distill.teacher_keep", d.teacher_keep.to_string());
        kv.insert("distill.pseudo_fraction", d.pseudo_fraction.to_string());
        kv.insert("distill.pseudo_threshold", d.pseudo_threshold.to_string());
        kv.insert("distill.init_from_teacher", d.init_from_teacher.to_string());
        let mut out = String::new();
        for (k, v) in kv {
            let _ = writeln!(out, "{k}={v}");
        }
        out
    }
}
