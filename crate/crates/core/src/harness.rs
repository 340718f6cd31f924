//! Training, distillation, evaluation and ablation runs, and their reports.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use odgcnn_autodiff::{checkpoint, cyclic_lr, AdamW, Bound, ParamRegistry, Tape, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use crate::config::{DistillMode, EvalConfig, RunConfig};
use crate::dense::{assign_overlap, dense_loss, nms, top_k};
use crate::error::{Error, Result};
use crate::geometry::{detections_from_rows, Detection, LabeledBox};
use crate::matcher::{combined_loss, distillation, pad_targets, supervised_loss, SetValues};
use crate::metrics::{evaluate, MetricsReport};
use crate::model::{check_compatible, forward, init_params, Forward, HeadKind, ModelConfig};
use crate::nn::{init_linear, linear};
use crate::scene::{densify, sample_dataset, save_scene, sparsify, Scene, EVAL_INDEX_OFFSET};

const DENSIFY_SALT: u64 = 0x6a09_e667_f3bc_c908;
const SPARSIFY_SALT: u64 = 0xbb67_ae85_84ca_a73b;
const SHUFFLE_SALT: u64 = 0x3c6e_f372_fe94_f82b;

/// Raw train and eval scenes for a config.
pub fn datasets(cfg: &RunConfig) -> Result<(Vec<Scene>, Vec<Scene>)> {
    let s = &cfg.data.scene;
    Ok((
        sample_dataset(s, 0, cfg.data.train_scenes)?,
        sample_dataset(s, EVAL_INDEX_OFFSET, cfg.data.eval_scenes)?,
    ))
}

/// The input a model sees for scene `index`: densified, then sparsified.
/// The sub-seeds depend only on the dataset seed and index, so two models
/// with the same factors see the same points.
pub fn scene_view(cfg: &RunConfig, scene: &Scene, index: u64, factor: usize, keep: f64) -> Result<Scene> {
    let base = cfg.data.scene.seed ^ index;
    let dense = densify(scene, factor, cfg.data.scene.extent, base ^ DENSIFY_SALT)?;
    sparsify(&dense, keep, base ^ SPARSIFY_SALT)
}

fn views(cfg: &RunConfig, scenes: &[Scene], first: u64, factor: usize, keep: f64) -> Result<Vec<Scene>> {
    scenes
        .iter()
        .enumerate()
        .map(|(i, s)| scene_view(cfg, s, first + i as u64, factor, keep))
        .collect()
}

/// Every detection the model emits for one cloud, before any filtering.
pub fn predict_raw(reg: &ParamRegistry, cfg: &ModelConfig, scene: &Scene) -> Result<Vec<Detection>> {
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let f = forward(&tape, &p, cfg, &scene.cloud)?;
    Ok(detections_from_rows(
        &tape.to_vec(f.probs),
        &tape.to_vec(f.boxes),
        cfg.num_classes + 1,
    ))
}

/// Inference post-processing. Set head: top-k, then NMS if asked. Dense
/// head: score floor, NMS if asked, then top-k.
pub fn postprocess(raw: &[Detection], head: HeadKind, eval: &EvalConfig, with_nms: bool) -> Vec<Detection> {
    match head {
        HeadKind::Set => {
            let kept = top_k(raw, eval.top_k);
            if with_nms {
                nms(&kept, eval.nms_threshold, 0.0)
            } else {
                kept
            }
        }
        HeadKind::Dense => {
            let floored: Vec<Detection> = raw.iter().filter(|d| d.score() >= eval.score_floor).cloned().collect();
            let kept = if with_nms {
                nms(&floored, eval.nms_threshold, eval.score_floor)
            } else {
                floored
            };
            top_k(&kept, eval.dense_top_k)
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalOutcome {
    pub no_nms: MetricsReport,
    pub nms: MetricsReport,
}

impl EvalOutcome {
    pub fn delta_map(&self) -> f64 {
        self.nms.map - self.no_nms.map
    }
}

/// Scores a model on already-transformed eval scenes, with and without NMS.
pub fn evaluate_model(reg: &ParamRegistry, cfg: &RunConfig, scenes: &[Scene]) -> Result<EvalOutcome> {
    let mut off = Vec::with_capacity(scenes.len());
    let mut on = Vec::with_capacity(scenes.len());
    for s in scenes {
        let raw = predict_raw(reg, &cfg.model, s)?;
        off.push(postprocess(&raw, cfg.model.head, &cfg.eval, false));
        on.push(postprocess(&raw, cfg.model.head, &cfg.eval, true));
    }
    let targets: Vec<Vec<LabeledBox>> = scenes.iter().map(|s| s.boxes.clone()).collect();
    let names: Vec<String> = cfg.data.scene.classes.iter().map(|c| c.name.clone()).collect();
    Ok(EvalOutcome {
        no_nms: evaluate(&off, &targets, &names),
        nms: evaluate(&on, &targets, &names),
    })
}

/// Content hash of a checkpoint: SHA-256 over `blob <len>\0` and the bytes.
pub fn content_hash(bytes: &[u8]) -> String {
    let mut h = Sha256::new();
    h.update(format!("blob {}\0", bytes.len()).as_bytes());
    h.update(bytes);
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunReport {
    pub eval: EvalOutcome,
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub wall_clock: f64,
    pub config_echo: String,
    pub checkpoint_hash: String,
    pub params: usize,
}

impl RunReport {
    /// `report.txt`: no-NMS metrics first, then NMS metrics, then run facts.
    /// Wall-clock time is kept out so the file is reproducible.
    pub fn to_text(&self) -> String {
        let mut s = self.eval.no_nms.to_kv("");
        s.push_str(&self.eval.nms.to_kv("nms."));
        let _ = writeln!(s, "delta_map={:.6}", self.eval.delta_map());
        for (i, l) in self.loss_curve.iter().enumerate() {
            let _ = writeln!(s, "loss.epoch{}={l:.6}", i + 1);
        }
        let _ = writeln!(s, "params={}", self.params);
        let _ = writeln!(s, "checkpoint=sha256:{}", self.checkpoint_hash);
        s
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("variant,class,threshold,ap\n");
        s.push_str(&self.eval.no_nms.csv_rows("no_nms"));
        s.push_str(&self.eval.nms.csv_rows("nms"));
        s
    }

    /// Writes `config.echo`, `report.txt`, `report.csv`, `timing.txt` and
    /// `model.odgc1` into `dir`.
    pub fn write(&self, dir: &Path, reg: &ParamRegistry) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("config.echo"), &self.config_echo)?;
        std::fs::write(dir.join("report.txt"), self.to_text())?;
        std::fs::write(dir.join("report.csv"), self.to_csv())?;
        std::fs::write(dir.join("timing.txt"), format!("wall_clock_s={:.3}\n", self.wall_clock))?;
        checkpoint::save(reg, dir.join("model.odgc1"))?;
        Ok(())
    }
}

/// Per-step record of a training run.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    /// Mean total loss per optimizer step.
    pub step_loss: Vec<f64>,
    /// Mean distillation term per optimizer step (empty without a teacher).
    pub step_distill: Vec<f64>,
}

/// Result of a train, distill or eval run.
pub struct RunOutput {
    pub params: ParamRegistry,
    pub report: RunReport,
    pub log: TrainLog,
}

impl RunOutput {
    pub fn write(&self, dir: &Path) -> Result<()> {
        self.report.write(dir, &self.params)
    }
}

fn learning_rate(cfg: &RunConfig, step: usize, total: usize) -> Result<f64> {
    let t = &cfg.train;
    if t.lr_start == 0.0 && t.lr_peak == 0.0 && t.lr_end == 0.0 {
        return Ok(0.0);
    }
    Ok(cyclic_lr(step, total, t.lr_start, t.lr_peak, t.lr_end)?)
}

/// Supervised loss of one forward pass against ground truth.
fn supervised(tape: &Tape, cfg: &RunConfig, f: &Forward, targets: &[LabeledBox]) -> Result<Var> {
    let m = &cfg.model;
    match m.head {
        HeadKind::Set => {
            let mut t = targets.to_vec();
            t.truncate(m.queries);
            let rows = pad_targets(&t, m.num_classes, m.queries)?;
            Ok(supervised_loss(tape, &rows, f.probs, f.boxes, cfg.train.indicator)?.0)
        }
        HeadKind::Dense => {
            let a = assign_overlap(targets, &f.fd_spec);
            dense_loss(tape, f.probs, f.boxes, &a, targets, cfg.train.neg_weight)
        }
    }
}

/// What the frozen teacher provides for each training scene.
enum Guidance {
    None,
    Set(Vec<SetValues>),
    Feature { maps: Vec<Tensor>, project: bool },
    Pseudo(Vec<Option<Vec<LabeledBox>>>),
}

pub struct Teacher {
    pub config: RunConfig,
    pub params: ParamRegistry,
}

/// Loads the teacher checkpoint named by `distill.teacher`. Its
/// architecture comes from the `config.echo` beside it when present,
/// otherwise from the student's config.
pub fn load_teacher(cfg: &RunConfig) -> Result<Teacher> {
    let path = cfg
        .distill
        .teacher
        .as_ref()
        .ok_or_else(|| Error::Config("distill.teacher is required for distillation".into()))?;
    if !path.exists() {
        return Err(Error::Config(format!("teacher checkpoint {} does not exist", path.display())));
    }
    let params = checkpoint::load(path)?;
    let echo = path.parent().map(|d| d.join("config.echo")).filter(|p| p.exists());
    let config = match echo {
        Some(p) => RunConfig::load(&p)?,
        None => cfg.clone(),
    };
    check_compatible(&config.model, &params)?;
    Ok(Teacher { config, params })
}

fn selects_pseudo(index: usize, fraction: f64) -> bool {
    ((index + 1) as f64 * fraction).floor() > (index as f64 * fraction).floor()
}

fn build_guidance(cfg: &RunConfig, teacher: &Teacher, raw: &[Scene], student_first: &Scene) -> Result<Guidance> {
    let d = &cfg.distill;
    let tm = &teacher.config.model;
    let inputs = views(cfg, raw, 0, d.teacher_densify, d.teacher_keep)?;
    match d.mode {
        DistillMode::None => Ok(Guidance::None),
        DistillMode::Set | DistillMode::SelfDistill => {
            if d.mode == DistillMode::SelfDistill && *tm != cfg.model {
                return Err(Error::Config(
                    "self-distillation needs a teacher with the student's architecture".into(),
                ));
            }
            if tm.head != HeadKind::Set || cfg.model.head != HeadKind::Set {
                return Err(Error::Config("set distillation needs set heads on teacher and student".into()));
            }
            if tm.queries != cfg.model.queries || tm.num_classes != cfg.model.num_classes {
                return Err(Error::Config(format!(
                    "teacher predicts {} slots over {} classes, student {} over {}",
                    tm.queries, tm.num_classes, cfg.model.queries, cfg.model.num_classes
                )));
            }
            let mut out = Vec::with_capacity(inputs.len());
            for s in &inputs {
                let tape = Tape::new();
                let p = teacher.params.bind_frozen(&tape);
                let f = forward(&tape, &p, tm, &s.cloud)?;
                out.push(SetValues::from_tape(&tape, f.probs, f.boxes));
            }
            Ok(Guidance::Set(out))
        }
        DistillMode::Feature => {
            let student_shape = {
                let tape = Tape::new();
                let reg = init_params(&cfg.model, 0)?;
                let p = reg.bind_frozen(&tape);
                tape.shape(forward(&tape, &p, &cfg.model, &student_first.cloud)?.fd)
            };
            let mut maps = Vec::with_capacity(inputs.len());
            for s in &inputs {
                let tape = Tape::new();
                let p = teacher.params.bind_frozen(&tape);
                let f = forward(&tape, &p, tm, &s.cloud)?;
                let t = tape.tensor(f.fd);
                if t.shape()[..2] != student_shape[..2] {
                    return Err(Error::Config(format!(
                        "feature distillation needs matching feature maps: teacher {:?}, student {:?}",
                        t.shape(),
                        student_shape
                    )));
                }
                maps.push(t);
            }
            let project = maps.first().map_or(false, |t| t.shape()[2] != student_shape[2]);
            Ok(Guidance::Feature { maps, project })
        }
        DistillMode::Pseudo => {
            let mut out = Vec::with_capacity(inputs.len());
            for (i, s) in inputs.iter().enumerate() {
                if !selects_pseudo(i, d.pseudo_fraction) {
                    out.push(None);
                    continue;
                }
                let raw_dets = predict_raw(&teacher.params, tm, s)?;
                let kept = postprocess(&raw_dets, tm.head, &cfg.eval, false);
                let labels: Vec<LabeledBox> = kept
                    .iter()
                    .filter(|det| det.empty_prob() < d.pseudo_threshold)
                    .map(|det| LabeledBox {
                        bbox: det.bbox,
                        class: det.label(),
                    })
                    .collect();
                out.push(Some(labels));
            }
            Ok(Guidance::Pseudo(out))
        }
    }
}

/// Trains per `cfg`: plain supervised training when `distill.mode` is
/// `none`, distillation from a frozen teacher otherwise. Ends with an
/// evaluation on the held-out scenes.
pub fn fit(cfg: &RunConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let (train_raw, eval_raw) = datasets(cfg)?;
    let train = views(cfg, &train_raw, 0, cfg.data.densify, cfg.data.keep)?;
    let eval_scenes = views(cfg, &eval_raw, EVAL_INDEX_OFFSET, cfg.data.densify, cfg.data.keep)?;

    let teacher = match cfg.distill.mode {
        DistillMode::None => None,
        _ => Some(load_teacher(cfg)?),
    };
    let guidance = match (&teacher, train.first()) {
        (Some(t), Some(first)) => build_guidance(cfg, t, &train_raw, first)?,
        _ => Guidance::None,
    };

    let mut reg = match &teacher {
        Some(t) if cfg.distill.init_from_teacher => {
            check_compatible(&cfg.model, &t.params)?;
            t.params.clone()
        }
        _ => init_params(&cfg.model, cfg.seed)?,
    };
    let mut aux = ParamRegistry::new();
    if let Guidance::Feature { maps, project: true } = &guidance {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT);
        init_linear(&mut aux, "proj", cfg.model.feature_channels(), maps[0].shape()[2], 1.0, &mut rng);
    }

    let log = train_loop(cfg, &mut reg, &mut aux, &train, &guidance)?;
    let eval = evaluate_model(&reg, cfg, &eval_scenes)?;
    let bytes = checkpoint::encode(&reg);
    let report = RunReport {
        eval,
        loss_curve: log.epoch_loss.clone(),
        wall_clock: start.elapsed().as_secs_f64(),
        config_echo: cfg.echo(),
        checkpoint_hash: content_hash(&bytes),
        params: reg.numel(),
    };
    Ok(RunOutput {
        params: reg,
        report,
        log,
    })
}

fn train_loop(
    cfg: &RunConfig,
    reg: &mut ParamRegistry,
    aux: &mut ParamRegistry,
    scenes: &[Scene],
    guidance: &Guidance,
) -> Result<TrainLog> {
    let n = scenes.len();
    let batch = cfg.train.batch;
    let steps_per_epoch = n.div_ceil(batch);
    let total = cfg.train.epochs * steps_per_epoch;
    let mut adam = AdamW::new(cfg.train.weight_decay);
    let mut aux_adam = AdamW::new(0.0);
    let mut log = TrainLog::default();
    let mut step = 0;
    for epoch in 0..cfg.train.epochs {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ SHUFFLE_SALT.wrapping_mul(epoch as u64 + 1));
        order.shuffle(&mut rng);
        let mut epoch_sum = 0.0;
        for chunk in order.chunks(batch) {
            let lr = learning_rate(cfg, step, total)?;
            let scale = 1.0 / chunk.len() as f64;
            let (mut loss_sum, mut distill_sum) = (0.0, 0.0);
            for &i in chunk {
                let tape = Tape::new();
                let p = reg.bind(&tape);
                let q = aux.bind(&tape);
                let (loss, distill) = scene_loss(&tape, cfg, &p, &q, &scenes[i], i, guidance)?;
                let value = tape.scalar(loss);
                if !value.is_finite() {
                    return Err(Error::NonFiniteLoss { loss: value, step, lr });
                }
                loss_sum += value;
                distill_sum += distill.map_or(0.0, |d| tape.scalar(d));
                let grads = tape.backward(loss)?;
                reg.accumulate(&p, &grads, scale)?;
                aux.accumulate(&q, &grads, scale)?;
            }
            adam.step(reg, lr)?;
            if !aux.is_empty() {
                aux_adam.step(aux, lr)?;
            }
            log.step_loss.push(loss_sum * scale);
            if !matches!(guidance, Guidance::None) {
                log.step_distill.push(distill_sum * scale);
            }
            epoch_sum += loss_sum;
            step += 1;
        }
        log.epoch_loss.push(if n == 0 { 0.0 } else { epoch_sum / n as f64 });
    }
    Ok(log)
}

/// Total loss for one scene and, when distilling, the distillation term.
fn scene_loss(
    tape: &Tape,
    cfg: &RunConfig,
    p: &Bound,
    aux: &Bound,
    scene: &Scene,
    index: usize,
    guidance: &Guidance,
) -> Result<(Var, Option<Var>)> {
    let f = forward(tape, p, &cfg.model, &scene.cloud)?;
    let d = &cfg.distill;
    match guidance {
        Guidance::None => Ok((supervised(tape, cfg, &f, &scene.boxes)?, None)),
        Guidance::Pseudo(labels) => {
            let targets = labels[index].as_deref().unwrap_or(&scene.boxes);
            let sup = supervised(tape, cfg, &f, targets)?;
            let zero = tape.constant(vec![1], vec![0.0])?;
            Ok((sup, Some(zero)))
        }
        Guidance::Set(teacher) => {
            let sup = supervised(tape, cfg, &f, &scene.boxes)?;
            let (dist, _) = distillation(tape, &teacher[index], f.probs, f.boxes, d.mask_empty)?;
            Ok((combined_loss(tape, sup, dist, d.alpha, d.beta)?, Some(dist)))
        }
        Guidance::Feature { maps, project } => {
            let sup = supervised(tape, cfg, &f, &scene.boxes)?;
            let t = &maps[index];
            let (h, w, c) = (t.shape()[0], t.shape()[1], t.shape()[2]);
            let mut x = tape.reshape(f.fd, &[h * w, cfg.model.feature_channels()])?;
            if *project {
                x = linear(tape, aux, "proj", x)?;
            }
            let target = tape.constant(vec![h * w, c], t.data().to_vec())?;
            let diff = tape.sub(x, target)?;
            let sq = tape.sum_all(tape.mul(diff, diff)?);
            let dist = tape.scale(sq, 1.0 / (h * w) as f64);
            Ok((combined_loss(tape, sup, dist, d.alpha, d.beta)?, Some(dist)))
        }
    }
}

/// Evaluates a saved checkpoint against the eval split of `cfg`.
pub fn evaluate_checkpoint(cfg: &RunConfig, path: &Path) -> Result<RunOutput> {
    cfg.validate()?;
    let start = Instant::now();
    let bytes = std::fs::read(path)
        .map_err(|e| Error::Config(format!("cannot read checkpoint {}: {e}", path.display())))?;
    let reg = checkpoint::decode(&bytes)?;
    check_compatible(&cfg.model, &reg)?;
    let eval_raw = sample_dataset(&cfg.data.scene, EVAL_INDEX_OFFSET, cfg.data.eval_scenes)?;
    let eval_scenes = views(cfg, &eval_raw, EVAL_INDEX_OFFSET, cfg.data.densify, cfg.data.keep)?;
    let eval = evaluate_model(&reg, cfg, &eval_scenes)?;
    let report = RunReport {
        eval,
        loss_curve: Vec::new(),
        wall_clock: start.elapsed().as_secs_f64(),
        config_echo: cfg.echo(),
        checkpoint_hash: content_hash(&bytes),
        params: reg.numel(),
    };
    Ok(RunOutput {
        params: reg,
        report,
        log: TrainLog::default(),
    })
}

/// Writes the train and eval scenes of `cfg` as SCENE v1 files.
pub fn generate_data(cfg: &RunConfig, out: &Path) -> Result<usize> {
    cfg.validate()?;
    let (train, eval) = datasets(cfg)?;
    for (name, set) in [("train", &train), ("eval", &eval)] {
        let dir = out.join(name);
        std::fs::create_dir_all(&dir)?;
        for (i, s) in set.iter().enumerate() {
            save_scene(s, dir.join(format!("scene_{i:05}.txt")))?;
        }
    }
    std::fs::write(out.join("config.echo"), cfg.echo())?;
    Ok(train.len() + eval.len())
}

/// One ablation axis and its values.
#[derive(Clone, Debug, PartialEq)]
pub struct Sweep {
    pub key: String,
    pub values: Vec<String>,
}

impl Sweep {
    /// Parses `neighbors=1,4,16`, `layers=1,2` or `interaction=dgcnn,self-attention`.
    pub fn parse(spec: &str) -> Result<Self> {
        let (key, list) = spec
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("sweep `{spec}` is not `axis=v1,v2,...`")))?;
        let key = key.trim();
        if !matches!(key, "neighbors" | "layers" | "interaction") {
            return Err(Error::Config(format!(
                "unknown sweep axis `{key}`; expected neighbors, layers or interaction"
            )));
        }
        let values: Vec<String> = list
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if values.is_empty() {
            return Err(Error::Config(format!("sweep `{key}` has no values")));
        }
        Ok(Self {
            key: key.to_string(),
            values,
        })
    }

    pub fn apply(&self, cfg: &RunConfig, value: &str) -> Result<RunConfig> {
        let mut c = cfg.clone();
        c.set(&format!("model.{}", self.key), value)?;
        c.validate()?;
        Ok(c)
    }
}

/// One row of an ablation table.
#[derive(Clone, Debug, PartialEq)]
pub struct AblationRow {
    pub value: String,
    pub report: RunReport,
}

/// Trains one model per sweep value with the shared seed. When `out` is
/// given each run is written to `out/<axis>-<value>`.
pub fn ablate(cfg: &RunConfig, sweep: &Sweep, out: Option<&Path>) -> Result<Vec<AblationRow>> {
    let configs: Vec<RunConfig> = sweep
        .values
        .iter()
        .map(|v| sweep.apply(cfg, v))
        .collect::<Result<_>>()?;
    let mut rows = Vec::with_capacity(configs.len());
    for (value, c) in sweep.values.iter().zip(&configs) {
        let run = fit(c)?;
        if let Some(dir) = out {
            run.write(&dir.join(format!("{}-{}", sweep.key, value)))?;
        }
        rows.push(AblationRow {
            value: value.clone(),
            report: run.report,
        });
    }
    Ok(rows)
}

/// `axis,nds,map,nds_nms,map_nms,params` with one row per value.
pub fn ablation_csv(sweep: &Sweep, rows: &[AblationRow]) -> String {
    let mut s = format!("{},nds,map,nds_nms,map_nms,params\n", sweep.key);
    for r in rows {
        let e = &r.report.eval;
        let _ = writeln!(
            s,
            "{},{:.6},{:.6},{:.6},{:.6},{}",
            r.value, e.no_nms.nds, e.no_nms.map, e.nms.nds, e.nms.map, r.report.params
        );
    }
    s
}

/// Output directory: the flag, else `out` from the config, else `fallback`.
pub fn resolve_out(flag: Option<PathBuf>, cfg: &RunConfig, fallback: &str) -> PathBuf {
    flag.or_else(|| cfg.out.clone()).unwrap_or_else(|| PathBuf::from(fallback))
}
