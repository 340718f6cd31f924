//! Synthetic LiDAR-like scenes: labeled boxes with surface points and ground
//! clutter, density control, and the `SCENE v1` text format.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::geometry::{rotated_iou_bev, Box9, LabeledBox};

/// Surface noise standard deviation in meters.
pub const SURFACE_SIGMA: f64 = 0.02;
/// Noise is truncated at this many standard deviations.
pub const NOISE_TRUNCATION: f64 = 3.0;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;
const MAX_PAIR_IOU: f64 = 0.05;
const SIZE_JITTER: f64 = 0.1;

#[derive(Clone, Debug, PartialEq)]
pub struct ClassPrior {
    pub name: String,
    /// Mean `(w, l, h)` in meters.
    pub size: [f64; 3],
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneConfig {
    /// Half side of the square scene; the scene spans `[-extent, extent]²`.
    pub extent: f64,
    pub classes: Vec<ClassPrior>,
    pub objects: (usize, usize),
    pub points_per_object: (usize, usize),
    pub clutter_points: usize,
    pub speed: (f64, f64),
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        let prior = |name: &str, size| ClassPrior {
            name: name.to_string(),
            size,
        };
        Self {
            extent: 16.0,
            classes: vec![
                prior("car", [1.9, 4.5, 1.6]),
                prior("pedestrian", [0.7, 0.7, 1.7]),
                prior("barrier", [0.5, 2.5, 1.0]),
            ],
            objects: (2, 8),
            points_per_object: (40, 120),
            clutter_points: 300,
            speed: (0.0, 5.0),
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn num_classes(&self) -> usize {
        self.classes.len()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("scene config: {m}")));
        if !(self.extent > 0.0 && self.extent.is_finite()) {
            return bad("extent must be positive");
        }
        if self.classes.is_empty() {
            return bad("at least one class prior is required");
        }
        if self.classes.iter().any(|c| c.size.iter().any(|s| !(*s > 0.0))) {
            return bad("class priors must be positive");
        }
        if self.objects.0 > self.objects.1 || self.points_per_object.0 > self.points_per_object.1 {
            return bad("count ranges need min <= max");
        }
        if !(0.0 <= self.speed.0 && self.speed.0 <= self.speed.1) {
            return bad("speed range needs 0 <= min <= max");
        }
        Ok(())
    }

    /// One-line summary used in generation errors.
    pub fn echo(&self) -> String {
        format!(
            "extent={} classes={} objects={}..{} points_per_object={}..{} clutter={} speed={}..{}",
            self.extent,
            self.classes.len(),
            self.objects.0,
            self.objects.1,
            self.points_per_object.0,
            self.points_per_object.1,
            self.clutter_points,
            self.speed.0,
            self.speed.1
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct PointCloud {
    pub points: Vec<[f64; 3]>,
    pub intensity: Vec<f64>,
}

impl PointCloud {
    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    fn push(&mut self, p: [f64; 3], intensity: f64) {
        self.points.push(p.map(quantize));
        self.intensity.push(quantize(intensity));
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Scene {
    pub cloud: PointCloud,
    pub boxes: Vec<LabeledBox>,
}

/// Rounds to the 9 significant digits used by the file format, so that a
/// generated scene equals its reloaded copy.
fn quantize(x: f64) -> f64 {
    format_real(x).parse().expect("formatted real parses")
}

fn format_real(x: f64) -> String {
    format!("{x:.8e}")
}

fn truncated_noise(rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> f64 {
    loop {
        let n = normal.sample(rng);
        if n.abs() <= NOISE_TRUNCATION * SURFACE_SIGMA {
            return n;
        }
    }
}

/// One point uniformly on the side faces or top of `b`, with truncated
/// Gaussian noise, in world coordinates.
fn surface_point(b: &Box9, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> [f64; 3] {
    let [w, l, h] = b.size;
    let areas = [w * h, w * h, l * h, l * h, w * l];
    let total: f64 = areas.iter().sum();
    let mut pick = rng.gen_range(0.0..total);
    let mut face = areas.len() - 1;
    for (i, a) in areas.iter().enumerate() {
        if pick < *a {
            face = i;
            break;
        }
        pick -= a;
    }
    let s: f64 = rng.gen_range(-0.5..0.5);
    let t: f64 = rng.gen_range(-0.5..0.5);
    let local = match face {
        0 => [l / 2.0, s * w, t * h],
        1 => [-l / 2.0, s * w, t * h],
        2 => [s * l, w / 2.0, t * h],
        3 => [s * l, -w / 2.0, t * h],
        _ => [s * l, t * w, h / 2.0],
    };
    let noisy = local.map(|c| c + truncated_noise(rng, normal));
    b.to_world(noisy)
}

fn place_box(config: &SceneConfig, class: usize, rng: &mut ChaCha8Rng) -> Box9 {
    let prior = config.classes[class].size;
    let size = prior.map(|s| s * rng.gen_range(1.0 - SIZE_JITTER..1.0 + SIZE_JITTER));
    let reach = 0.5 * (size[0] * size[0] + size[1] * size[1]).sqrt();
    let lim = (config.extent - reach).max(0.0);
    let (cx, cy) = if lim > 0.0 {
        (rng.gen_range(-lim..lim), rng.gen_range(-lim..lim))
    } else {
        (0.0, 0.0)
    };
    let yaw = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = if config.speed.1 > config.speed.0 {
        rng.gen_range(config.speed.0..config.speed.1)
    } else {
        config.speed.0
    };
    let heading = rng.gen_range(0.0..std::f64::consts::TAU);
    let b = Box9 {
        center: [cx, cy, size[2] / 2.0],
        size,
        yaw,
        velocity: [speed * heading.cos(), speed * heading.sin()],
    };
    Box9 {
        center: b.center.map(quantize),
        size: b.size.map(quantize),
        yaw: quantize(b.yaw),
        velocity: b.velocity.map(quantize),
    }
}

fn clutter_point(extent: f64, rng: &mut ChaCha8Rng, normal: &Normal<f64>) -> [f64; 3] {
    [
        rng.gen_range(-extent..extent),
        rng.gen_range(-extent..extent),
        truncated_noise(rng, normal),
    ]
}

/// Samples one scene. Also returns, per point, the index of the box whose
/// surface produced it (`None` for clutter).
pub fn sample_scene_with_owners(config: &SceneConfig, seed: u64) -> Result<(Scene, Vec<Option<usize>>)> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, SURFACE_SIGMA).expect("positive sigma");
    let count = rng.gen_range(config.objects.0..=config.objects.1);
    let mut boxes: Vec<LabeledBox> = Vec::with_capacity(count);
    let mut attempts = 0;
    while boxes.len() < count {
        attempts += 1;
        if attempts > MAX_PLACEMENT_ATTEMPTS {
            return Err(Error::SceneGen(format!(
                "could not place {count} non-overlapping boxes within {MAX_PLACEMENT_ATTEMPTS} attempts ({})",
                config.echo()
            )));
        }
        let class = rng.gen_range(0..config.num_classes());
        let bbox = place_box(config, class, &mut rng);
        let clear = boxes
            .iter()
            .all(|o| rotated_iou_bev(&o.bbox.bev(), &bbox.bev()) < MAX_PAIR_IOU);
        if clear {
            boxes.push(LabeledBox { bbox, class });
        }
    }

    let mut cloud = PointCloud::default();
    let mut owners = Vec::new();
    for (k, b) in boxes.iter().enumerate() {
        let n = rng.gen_range(config.points_per_object.0..=config.points_per_object.1);
        for _ in 0..n {
            let p = surface_point(&b.bbox, &mut rng, &normal);
            cloud.push(p, rng.gen_range(0.0..1.0));
            owners.push(Some(k));
        }
    }
    for _ in 0..config.clutter_points {
        let p = clutter_point(config.extent, &mut rng, &normal);
        cloud.push(p, rng.gen_range(0.0..1.0));
        owners.push(None);
    }
    Ok((Scene { cloud, boxes }, owners))
}

pub fn sample_scene(config: &SceneConfig, seed: u64) -> Result<Scene> {
    sample_scene_with_owners(config, seed).map(|(s, _)| s)
}

/// Index offset separating evaluation scenes from training scenes.
pub const EVAL_INDEX_OFFSET: u64 = 1 << 32;

/// Scenes `first..first + count`, each seeded with `config.seed ^ index`.
pub fn sample_dataset(config: &SceneConfig, first: u64, count: usize) -> Result<Vec<Scene>> {
    (0..count as u64)
        .map(|i| sample_scene(config, config.seed ^ (first + i)))
        .collect()
}

/// Whether `p` lies on the noisy surface shell region of `b`.
pub fn near_box(b: &Box9, p: [f64; 3]) -> bool {
    let m = NOISE_TRUNCATION * SURFACE_SIGMA + 1e-6;
    let q = b.to_local(p);
    q[0].abs() <= b.size[1] / 2.0 + m && q[1].abs() <= b.size[0] / 2.0 + m && q[2].abs() <= b.size[2] / 2.0 + m
}

/// Adds `factor - 1` freshly sampled points for every existing point, drawn
/// from the same source: the surface of the box it lies on, or ground
/// clutter. Boxes are unchanged.
pub fn densify(scene: &Scene, factor: usize, extent: f64, seed: u64) -> Result<Scene> {
    if factor == 0 {
        return Err(Error::Config("densify factor must be at least 1".into()));
    }
    let mut out = scene.clone();
    if factor == 1 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, SURFACE_SIGMA).expect("positive sigma");
    for &p in &scene.cloud.points {
        let owner = scene.boxes.iter().position(|b| near_box(&b.bbox, p));
        for _ in 1..factor {
            let q = match owner {
                Some(k) => surface_point(&scene.boxes[k].bbox, &mut rng, &normal),
                None => clutter_point(extent, &mut rng, &normal),
            };
            out.cloud.push(q, rng.gen_range(0.0..1.0));
        }
    }
    Ok(out)
}

/// Keeps exactly `round(n * keep_fraction)` points chosen uniformly at
/// random, in their original order.
pub fn sparsify(scene: &Scene, keep_fraction: f64, seed: u64) -> Result<Scene> {
    if !(keep_fraction > 0.0 && keep_fraction <= 1.0) {
        return Err(Error::Config(format!("keep fraction {keep_fraction} outside (0, 1]")));
    }
    let n = scene.cloud.len();
    let keep = ((n as f64) * keep_fraction).round() as usize;
    if keep == n {
        return Ok(scene.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut idx = index::sample(&mut rng, n, keep).into_vec();
    idx.sort_unstable();
    let cloud = PointCloud {
        points: idx.iter().map(|&i| scene.cloud.points[i]).collect(),
        intensity: idx.iter().map(|&i| scene.cloud.intensity[i]).collect(),
    };
    Ok(Scene {
        cloud,
        boxes: scene.boxes.clone(),
    })
}

pub fn scene_to_string(scene: &Scene) -> String {
    let mut s = String::from("SCENE v1\n");
    let _ = writeln!(s, "P {}", scene.cloud.len());
    for (p, i) in scene.cloud.points.iter().zip(&scene.cloud.intensity) {
        let _ = writeln!(s, "{} {} {} {}", format_real(p[0]), format_real(p[1]), format_real(p[2]), format_real(*i));
    }
    let _ = writeln!(s, "B {}", scene.boxes.len());
    for b in &scene.boxes {
        let x = &b.bbox;
        let reals = [
            x.center[0],
            x.center[1],
            x.center[2],
            x.size[0],
            x.size[1],
            x.size[2],
            x.yaw,
            x.velocity[0],
            x.velocity[1],
        ];
        let fields: Vec<String> = reals.iter().map(|v| format_real(*v)).collect();
        let _ = writeln!(s, "{} {}", fields.join(" "), b.class);
    }
    s
}

fn format_err(line: usize, reason: impl Into<String>) -> Error {
    Error::SceneFormat {
        line,
        reason: reason.into(),
    }
}

fn parse_reals(line_no: usize, fields: &[&str]) -> Result<Vec<f64>> {
    fields
        .iter()
        .map(|f| {
            let v: f64 = f
                .parse()
                .map_err(|_| format_err(line_no, format!("`{f}` is not a real number")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(format_err(line_no, format!("non-finite value `{f}`")))
            }
        })
        .collect()
}

fn parse_count(line_no: usize, line: Option<&str>, tag: &str) -> Result<usize> {
    let line = line.ok_or_else(|| format_err(line_no, format!("missing `{tag} <count>` header")))?;
    let mut parts = line.split_whitespace();
    if parts.next() != Some(tag) {
        return Err(format_err(line_no, format!("expected `{tag} <count>`, found `{line}`")));
    }
    let n = parts
        .next()
        .and_then(|c| c.parse().ok())
        .ok_or_else(|| format_err(line_no, format!("bad `{tag}` count")))?;
    if parts.next().is_some() {
        return Err(format_err(line_no, format!("trailing fields after `{tag}` count")));
    }
    Ok(n)
}

pub fn scene_from_str(text: &str) -> Result<Scene> {
    let mut lines = text.lines();
    let mut no = 1;
    if lines.next() != Some("SCENE v1") {
        return Err(format_err(no, "expected `SCENE v1` header"));
    }
    no += 1;
    let n = parse_count(no, lines.next(), "P")?;
    let mut cloud = PointCloud::default();
    for _ in 0..n {
        no += 1;
        let line = lines.next().ok_or_else(|| format_err(no, "unexpected end of file in point block"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 4 {
            return Err(format_err(no, format!("point line needs 4 fields, found {}", fields.len())));
        }
        let v = parse_reals(no, &fields)?;
        cloud.points.push([v[0], v[1], v[2]]);
        cloud.intensity.push(v[3]);
    }
    no += 1;
    let m = parse_count(no, lines.next(), "B")?;
    let mut boxes = Vec::with_capacity(m);
    for _ in 0..m {
        no += 1;
        let line = lines.next().ok_or_else(|| format_err(no, "unexpected end of file in box block"))?;
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 10 {
            return Err(format_err(no, format!("box line needs 10 fields, found {}", fields.len())));
        }
        let v = parse_reals(no, &fields[..9])?;
        let class: usize = fields[9]
            .parse()
            .map_err(|_| format_err(no, format!("bad class id `{}`", fields[9])))?;
        if v[3..6].iter().any(|s| *s <= 0.0) {
            return Err(format_err(no, "box sizes must be positive"));
        }
        boxes.push(LabeledBox {
            bbox: Box9 {
                center: [v[0], v[1], v[2]],
                size: [v[3], v[4], v[5]],
                yaw: v[6],
                velocity: [v[7], v[8]],
            },
            class,
        });
    }
    if let Some(extra) = lines.next() {
        if !extra.trim().is_empty() || lines.any(|l| !l.trim().is_empty()) {
            return Err(format_err(no + 1, "trailing content after box block"));
        }
    }
    Ok(Scene { cloud, boxes })
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<()> {
    std::fs::write(path, scene_to_string(scene))?;
    Ok(())
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene> {
    scene_from_str(&std::fs::read_to_string(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clutter_only_scene() {
        let cfg = SceneConfig {
            objects: (0, 0),
            ..SceneConfig::default()
        };
        let s = sample_scene(&cfg, 3).unwrap();
        assert!(s.boxes.is_empty());
        assert_eq!(s.cloud.len(), cfg.clutter_points);
    }

    #[test]
    fn sparsify_exact_count() {
        let cloud = PointCloud {
            points: (0..2000).map(|i| [i as f64, 0.0, 0.0]).collect(),
            intensity: vec![0.5; 2000],
        };
        let s = Scene {
            cloud,
            boxes: vec![],
        };
        assert_eq!(sparsify(&s, 0.25, 1).unwrap().cloud.len(), 500);
        assert_eq!(sparsify(&s, 1.0, 1).unwrap(), s);
        assert!(sparsify(&s, 0.0, 1).is_err());
    }

    #[test]
    fn impossible_placement_is_reported() {
        let cfg = SceneConfig {
            extent: 1.0,
            objects: (8, 8),
            ..SceneConfig::default()
        };
        let err = match sample_scene(&cfg, 0) {
            Err(e) => e.to_string(),
            Ok(s) => panic!("placed {} boxes", s.boxes.len()),
        };
        assert!(err.contains("1000 attempts") && err.contains("extent=1"), "{err}");
    }
}
