//! Object DGCNN set-prediction head on top of the BEV featurizer, plus the
//! per-pixel dense head used as the baseline.

use std::cmp::Ordering;

use odgcnn_autodiff::{Bound, ParamRegistry, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{featurize, init_featurizer, GridSpec};
use crate::error::{Error, Result};
use crate::geometry::BOX_CODE;
use crate::nn::{init_linear, init_mlp2, linear, mlp2};
use crate::scene::PointCloud;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Interaction {
    Dgcnn,
    SelfAttention,
}

/// Second half of the EdgeConv input: `f_j - f_i` or plain `f_j`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EdgeFeature {
    Difference,
    Concat,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadKind {
    Set,
    Dense,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub num_classes: usize,
    pub grid: GridSpec,
    pub pillar_hidden: usize,
    pub pillar_channels: usize,
    pub backbone: Vec<usize>,
    pub head: HeadKind,
    pub queries: usize,
    pub query_dim: usize,
    pub layers: usize,
    pub neighbors: usize,
    pub offsets: usize,
    pub interaction: Interaction,
    pub edge_feature: EdgeFeature,
    pub edge_convs: usize,
    pub attention_heads: usize,
    pub head_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 3,
            grid: GridSpec::centered(16.0, 0.5),
            pillar_hidden: 8,
            pillar_channels: 8,
            backbone: vec![16, 32, 32],
            head: HeadKind::Set,
            queries: 32,
            query_dim: 64,
            layers: 2,
            neighbors: 16,
            offsets: 4,
            interaction: Interaction::Dgcnn,
            edge_feature: EdgeFeature::Difference,
            edge_convs: 2,
            attention_heads: 4,
            head_hidden: 64,
        }
    }
}

impl ModelConfig {
    /// Channels of `F^d`.
    pub fn feature_channels(&self) -> usize {
        self.backbone.last().copied().unwrap_or(self.pillar_channels)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        self.grid.validate()?;
        if self.num_classes == 0 || self.pillar_channels == 0 || self.pillar_hidden == 0 {
            return bad("classes and pillar widths must be positive".into());
        }
        if self.backbone.len() < 2 {
            return bad("the backbone needs at least two blocks (the second is strided)".into());
        }
        if self.head == HeadKind::Set {
            if self.queries == 0 || self.query_dim == 0 || self.offsets == 0 || self.edge_convs == 0 {
                return bad("queries, query_dim, offsets and edge_convs must be positive".into());
            }
            if self.neighbors == 0 || self.neighbors > self.queries {
                return bad(format!("neighbors {} outside 1..={}", self.neighbors, self.queries));
            }
            if self.interaction == Interaction::SelfAttention && self.query_dim % self.attention_heads.max(1) != 0 {
                return bad(format!(
                    "query_dim {} not divisible by {} heads",
                    self.query_dim, self.attention_heads
                ));
            }
        }
        Ok(())
    }
}

fn edge_prefix(layer: usize, e: usize) -> String {
    format!("dgcnn.layer{layer}.edge{e}")
}

fn attn_prefix(layer: usize, e: usize) -> String {
    format!("dgcnn.layer{layer}.attn{e}")
}

/// Fresh parameters for `cfg`, fully determined by `seed`.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamRegistry> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reg = ParamRegistry::new();
    init_featurizer(&mut reg, cfg.pillar_hidden, cfg.pillar_channels, &cfg.backbone, &mut rng);
    let cd = cfg.feature_channels();
    let c1 = cfg.num_classes + 1;
    match cfg.head {
        HeadKind::Dense => {
            init_mlp2(&mut reg, "dense.cls", [cd, cfg.head_hidden, c1], &mut rng);
            init_mlp2(&mut reg, "dense.box", [cd, cfg.head_hidden, BOX_CODE], &mut rng);
        }
        HeadKind::Set => {
            let (m, q) = (cfg.queries, cfg.query_dim);
            let b = 3f64.sqrt();
            let q0: Vec<f64> = (0..m * q).map(|_| rng.gen_range(-b..b)).collect();
            reg.insert("dgcnn.query0", Tensor::new(vec![m, q], q0)?);
            for l in 0..cfg.layers {
                let pre = format!("dgcnn.layer{l}");
                init_linear(&mut reg, &format!("{pre}.ref"), q, 2, 1.0, &mut rng);
                init_linear(&mut reg, &format!("{pre}.nbr"), q, 2 * cfg.offsets, 0.05, &mut rng);
                // Offsets start on a 1 m ring around the reference point.
                let ring: Vec<f64> = (0..cfg.offsets)
                    .flat_map(|k| {
                        let a = std::f64::consts::TAU * k as f64 / cfg.offsets as f64 + std::f64::consts::FRAC_PI_4;
                        [a.cos(), a.sin()]
                    })
                    .collect();
                reg.get_mut(&format!("{pre}.nbr.b"))?.data_mut().copy_from_slice(&ring);
                init_linear(&mut reg, &format!("{pre}.att"), q, cfg.offsets, 0.1, &mut rng);
                let mut din = cd;
                for e in 0..cfg.edge_convs {
                    match cfg.interaction {
                        Interaction::Dgcnn => init_mlp2(&mut reg, &edge_prefix(l, e), [2 * din, q, q], &mut rng),
                        Interaction::SelfAttention => {
                            let ap = attn_prefix(l, e);
                            for part in ["q", "k", "v"] {
                                init_linear(&mut reg, &format!("{ap}.{part}"), din, q, 1.0, &mut rng);
                            }
                            init_linear(&mut reg, &format!("{ap}.o"), q, q, 0.5, &mut rng);
                        }
                    }
                    din = q;
                }
            }
            init_mlp2(&mut reg, "head.cls", [q, cfg.head_hidden, c1], &mut rng);
            init_mlp2(&mut reg, "head.box", [q, cfg.head_hidden, BOX_CODE], &mut rng);
        }
    }
    Ok(reg)
}

/// Per-layer query decoding: reference points `[M, 2]` (meters), sampling
/// offsets `[M, 2K]` (meters, `(dx, dy)` pairs) and attention logits `[M, K]`.
#[derive(Clone, Copy, Debug)]
pub struct QueryDecode {
    pub reference: Var,
    pub offsets: Var,
    pub logits: Var,
}

pub fn decode_query(tape: &Tape, p: &Bound, layer: usize, q: Var, spec: &GridSpec) -> Result<QueryDecode> {
    let pre = format!("dgcnn.layer{layer}");
    let unit = tape.sigmoid(linear(tape, p, &format!("{pre}.ref"), q)?);
    let (sx, sy) = spec.span();
    let scale = tape.constant(vec![2, 2], vec![sx, 0.0, 0.0, sy])?;
    let origin = tape.constant(vec![2], vec![spec.x_min, spec.y_min])?;
    let reference = tape.add_bias(tape.matmul(unit, scale)?, origin)?;
    let offsets = linear(tape, p, &format!("{pre}.nbr"), q)?;
    let logits = linear(tape, p, &format!("{pre}.att"), q)?;
    Ok(QueryDecode {
        reference,
        offsets,
        logits,
    })
}

/// Softmax over each query's `K` logits, then the weighted sum of its `K`
/// sampled feature rows (`sampled` is `[M * K, C]`).
pub fn aggregate(tape: &Tape, sampled: Var, logits: Var) -> Result<Var> {
    let shape = tape.shape(logits);
    let (m, k) = (shape[0], shape[1]);
    let w = tape.reshape(tape.softmax_lastaxis(logits)?, &[m * k])?;
    Ok(tape.sum_row_groups(tape.scale_rows(sampled, w)?, k)?)
}

/// Samples `F^d` at every `p_i + δ_ik` and aggregates per query.
pub fn sample_and_aggregate(tape: &Tape, fd: Var, spec: &GridSpec, dec: &QueryDecode) -> Result<Var> {
    let shape = tape.shape(dec.logits);
    let (m, k) = (shape[0], shape[1]);
    let rep: Vec<usize> = (0..m).flat_map(|i| std::iter::repeat(i).take(k)).collect();
    let centers = tape.gather_rows(dec.reference, &rep)?;
    let deltas = tape.reshape(dec.offsets, &[m * k, 2])?;
    let points = tape.add(centers, deltas)?;
    let sampled = tape.bilinear_sample(fd, points, spec.frame())?;
    aggregate(tape, sampled, dec.logits)
}

/// For each vertex, `k` neighbor indices: itself first, then the others by
/// ascending Euclidean distance, lower index first on ties.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct KnnGraph {
    pub neighbors: Vec<Vec<usize>>,
}

impl KnnGraph {
    pub fn k(&self) -> usize {
        self.neighbors.first().map_or(0, Vec::len)
    }
}

/// `features` is row-major `[M, dim]`.
pub fn knn_graph(features: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
    let m = if dim == 0 { 0 } else { features.len() / dim };
    if k == 0 || k > m {
        return Err(Error::Shape(format!("knn_graph: k={k} outside 1..={m}")));
    }
    let row = |i: usize| &features[i * dim..(i + 1) * dim];
    let neighbors = (0..m)
        .map(|i| {
            let mut others: Vec<(f64, usize)> = (0..m)
                .filter(|&j| j != i)
                .map(|j| {
                    let d: f64 = row(i).iter().zip(row(j)).map(|(a, b)| (a - b) * (a - b)).sum();
                    (d, j)
                })
                .collect();
            others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            std::iter::once(i)
                .chain(others.into_iter().take(k - 1).map(|(_, j)| j))
                .collect()
        })
        .collect();
    Ok(KnnGraph { neighbors })
}

/// EdgeConv: per edge `(i, j)` a two-layer MLP on `concat(f_i, f_j - f_i)`
/// (or `concat(f_i, f_j)`), then a channel-wise max over `i`'s edges.
///
/// The first linear layer is split so it runs per vertex rather than per
/// edge: `concat(a, b)·W = a·W_top + b·W_bottom`.
pub fn edge_conv(tape: &Tape, p: &Bound, prefix: &str, x: Var, graph: &KnnGraph, mode: EdgeFeature) -> Result<Var> {
    let d = tape.shape(x)[1];
    let w1 = p.var(&format!("{prefix}.0.w"))?;
    let b1 = p.var(&format!("{prefix}.0.b"))?;
    let top = tape.gather_rows(w1, &(0..d).collect::<Vec<_>>())?;
    let bottom = tape.gather_rows(w1, &(d..2 * d).collect::<Vec<_>>())?;
    let center_w = match mode {
        EdgeFeature::Difference => tape.sub(top, bottom)?,
        EdgeFeature::Concat => top,
    };
    let a = tape.matmul(x, center_w)?;
    let b = tape.matmul(x, bottom)?;
    let k = graph.k();
    let centers: Vec<usize> = (0..graph.neighbors.len())
        .flat_map(|i| std::iter::repeat(i).take(k))
        .collect();
    let nbrs: Vec<usize> = graph.neighbors.concat();
    let pre = tape.add(tape.gather_rows(a, &centers)?, tape.gather_rows(b, &nbrs)?)?;
    let h = tape.relu(tape.add_bias(pre, b1)?);
    let e = linear(tape, p, &format!("{prefix}.1"), h)?;
    let offsets: Vec<usize> = (0..=graph.neighbors.len()).map(|i| i * k).collect();
    Ok(tape.segment_max_rows(e, &offsets)?)
}

/// Multi-head softmax self-attention over all queries with an output
/// projection.
pub fn self_attention_alt(tape: &Tape, p: &Bound, prefix: &str, x: Var, heads: usize) -> Result<Var> {
    let q = linear(tape, p, &format!("{prefix}.q"), x)?;
    let k = linear(tape, p, &format!("{prefix}.k"), x)?;
    let v = linear(tape, p, &format!("{prefix}.v"), x)?;
    let dim = tape.shape(q)[1];
    if heads == 0 || dim % heads != 0 {
        return Err(Error::Shape(format!("attention dim {dim} not divisible by {heads} heads")));
    }
    let dh = dim / heads;
    let mut out: Option<Var> = None;
    for h in 0..heads {
        let qh = tape.slice_cols(q, h * dh, dh)?;
        let kh = tape.slice_cols(k, h * dh, dh)?;
        let vh = tape.slice_cols(v, h * dh, dh)?;
        let scores = tape.scale(tape.matmul(qh, tape.transpose(kh)?)?, 1.0 / (dh as f64).sqrt());
        let att = tape.softmax_lastaxis(scores)?;
        let oh = tape.matmul(att, vh)?;
        out = Some(match out {
            None => oh,
            Some(prev) => tape.concat_lastaxis(prev, oh)?,
        });
    }
    linear(tape, p, &format!("{prefix}.o"), out.expect("at least one head"))
}

/// Where a forward pass gets its kNN graphs: built from the current
/// features and recorded, or replayed from an earlier pass. Replaying holds
/// the discrete graph choice fixed, e.g. for finite-difference checks.
#[derive(Clone, Debug, Default)]
pub struct GraphSource {
    graphs: Vec<KnnGraph>,
    replay: bool,
    next: usize,
}

impl GraphSource {
    pub fn record() -> Self {
        Self::default()
    }

    pub fn replay(graphs: Vec<KnnGraph>) -> Self {
        Self {
            graphs,
            replay: true,
            next: 0,
        }
    }

    /// Graphs in layer, then block order.
    pub fn into_graphs(self) -> Vec<KnnGraph> {
        self.graphs
    }

    fn graph(&mut self, features: &[f64], dim: usize, k: usize) -> Result<KnnGraph> {
        if !self.replay {
            let g = knn_graph(features, dim, k)?;
            self.graphs.push(g.clone());
            return Ok(g);
        }
        let g = self
            .graphs
            .get(self.next)
            .cloned()
            .ok_or_else(|| Error::Shape(format!("no recorded graph #{}", self.next)))?;
        self.next += 1;
        Ok(g)
    }
}

/// One refinement layer: decode, sample, aggregate, interact, residual.
pub fn layer_forward(
    tape: &Tape,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    q: Var,
    fd: Var,
    spec: &GridSpec,
) -> Result<(Var, QueryDecode)> {
    layer_forward_with(tape, p, cfg, layer, q, fd, spec, &mut GraphSource::record())
}

#[allow(clippy::too_many_arguments)]
pub fn layer_forward_with(
    tape: &Tape,
    p: &Bound,
    cfg: &ModelConfig,
    layer: usize,
    q: Var,
    fd: Var,
    spec: &GridSpec,
    graphs: &mut GraphSource,
) -> Result<(Var, QueryDecode)> {
    let dec = decode_query(tape, p, layer, q, spec)?;
    let mut x = sample_and_aggregate(tape, fd, spec, &dec)?;
    for e in 0..cfg.edge_convs {
        if e > 0 {
            x = tape.relu(x);
        }
        x = match cfg.interaction {
            Interaction::Dgcnn => {
                let d = tape.shape(x)[1];
                let graph = graphs.graph(&tape.value(x), d, cfg.neighbors)?;
                edge_conv(tape, p, &edge_prefix(layer, e), x, &graph, cfg.edge_feature)?
            }
            Interaction::SelfAttention => self_attention_alt(tape, p, &attn_prefix(layer, e), x, cfg.attention_heads)?,
        };
    }
    Ok((tape.add(q, x)?, dec))
}

/// Class probabilities `[N, C + 1]` and box codes `[N, BOX_CODE]` whose
/// first two entries are offset by `anchors` `[N, 2]`.
pub fn predict_heads(tape: &Tape, p: &Bound, prefix: &str, x: Var, anchors: Var) -> Result<(Var, Var)> {
    let probs = tape.softmax_lastaxis(mlp2(tape, p, &format!("{prefix}.cls"), x)?)?;
    let raw = mlp2(tape, p, &format!("{prefix}.box"), x)?;
    let n = tape.shape(raw)[0];
    let pad = tape.constant(vec![n, BOX_CODE - 2], vec![0.0; n * (BOX_CODE - 2)])?;
    let shift = tape.concat_lastaxis(anchors, pad)?;
    Ok((probs, tape.add(raw, shift)?))
}

/// Tape nodes of one forward pass.
#[derive(Clone, Debug)]
pub struct Forward {
    pub probs: Var,
    pub boxes: Var,
    pub fd: Var,
    pub fd_spec: GridSpec,
}

/// Centers of every `F^d` cell, row-major `[H * W, 2]`.
pub fn cell_centers(spec: &GridSpec) -> Vec<f64> {
    let mut out = Vec::with_capacity(spec.cells() * 2);
    for r in 0..spec.height {
        for c in 0..spec.width {
            let (x, y) = spec.cell_center(c, r);
            out.extend_from_slice(&[x, y]);
        }
    }
    out
}

pub fn forward(tape: &Tape, p: &Bound, cfg: &ModelConfig, cloud: &PointCloud) -> Result<Forward> {
    forward_with(tape, p, cfg, cloud, &mut GraphSource::record())
}

pub fn forward_with(
    tape: &Tape,
    p: &Bound,
    cfg: &ModelConfig,
    cloud: &PointCloud,
    graphs: &mut GraphSource,
) -> Result<Forward> {
    let (fd, fd_spec) = featurize(tape, p, cloud, &cfg.grid, cfg.pillar_channels, cfg.backbone.len())?;
    let (probs, boxes) = match cfg.head {
        HeadKind::Set => {
            let mut q = p.var("dgcnn.query0")?;
            let mut last = None;
            for l in 0..cfg.layers {
                let (next, dec) = layer_forward_with(tape, p, cfg, l, q, fd, &fd_spec, graphs)?;
                q = next;
                last = Some(dec);
            }
            let anchors = match last {
                Some(dec) => dec.reference,
                None => {
                    let c = fd_spec.cell_center(fd_spec.width / 2, fd_spec.height / 2);
                    let m = cfg.queries;
                    tape.constant(vec![m, 2], [c.0, c.1].repeat(m))?
                }
            };
            predict_heads(tape, p, "head", q, anchors)?
        }
        HeadKind::Dense => {
            let n = fd_spec.cells();
            let x = tape.reshape(fd, &[n, cfg.feature_channels()])?;
            let anchors = tape.constant(vec![n, 2], cell_centers(&fd_spec))?;
            predict_heads(tape, p, "dense", x, anchors)?
        }
    };
    Ok(Forward {
        probs,
        boxes,
        fd,
        fd_spec,
    })
}

/// Compares a registry against the shapes `cfg` expects; names the first
/// missing, extra or mis-shaped tensor.
pub fn check_compatible(cfg: &ModelConfig, reg: &ParamRegistry) -> Result<()> {
    let want = init_params(cfg, 0)?;
    let mut a = want.iter();
    let mut b = reg.iter();
    loop {
        match (a.next(), b.next()) {
            (None, None) => return Ok(()),
            (Some((n, t)), Some((m, u))) => match n.cmp(m) {
                Ordering::Equal if t.shape() == u.shape() => continue,
                Ordering::Equal => {
                    return Err(Error::CheckpointMismatch(format!(
                        "tensor `{n}` has shape {:?}, config expects {:?}",
                        u.shape(),
                        t.shape()
                    )))
                }
                Ordering::Less => {
                    return Err(Error::CheckpointMismatch(format!("tensor `{n}` missing from checkpoint")))
                }
                Ordering::Greater => {
                    return Err(Error::CheckpointMismatch(format!("unexpected tensor `{m}` in checkpoint")))
                }
            },
            (Some((n, _)), None) => {
                return Err(Error::CheckpointMismatch(format!("tensor `{n}` missing from checkpoint")))
            }
            (None, Some((m, _))) => {
                return Err(Error::CheckpointMismatch(format!("unexpected tensor `{m}` in checkpoint")))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn knn_example() {
        let g = knn_graph(&[0.0, 0.1, 5.0], 1, 2).unwrap();
        assert_eq!(g.neighbors[0], vec![0, 1]);
        assert_eq!(g.neighbors[2], vec![2, 1]);
        assert!(knn_graph(&[0.0, 1.0], 1, 3).is_err());
        assert!(knn_graph(&[0.0, 1.0], 1, 0).is_err());
    }

    #[test]
    fn default_config_builds() {
        let reg = init_params(&ModelConfig::default(), 1).unwrap();
        assert!(reg.contains("dgcnn.layer1.edge1.1.w"));
        check_compatible(&ModelConfig::default(), &reg).unwrap();
        let other = ModelConfig {
            layers: 1,
            ..ModelConfig::default()
        };
        let err = check_compatible(&other, &reg).unwrap_err().to_string();
        assert!(err.contains("dgcnn.layer1"), "{err}");
    }
}
