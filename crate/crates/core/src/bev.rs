//! Point cloud to BEV feature map: pillarization, per-pillar PointNet,
//! scatter to a dense grid, and a small convolutional backbone.

use std::collections::BTreeMap;

use odgcnn_autodiff::{Bound, ConvGeometry, ParamRegistry, SampleFrame, Tape, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{init_linear, linear};
use crate::scene::PointCloud;

/// Per-point input channels: intensity, normalized `x y z`, offsets of `x y`
/// to the pillar center (in cells) and of `z` to the pillar's mean height.
pub const POINT_CHANNELS: usize = 7;
/// Height used to normalize `z`.
pub const HEIGHT_SCALE: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GridSpec {
    pub x_min: f64,
    pub y_min: f64,
    pub cell: f64,
    pub width: usize,
    pub height: usize,
}

impl GridSpec {
    /// Square grid centered on the origin covering `[-extent, extent]²`.
    pub fn centered(extent: f64, cell: f64) -> Self {
        let n = (2.0 * extent / cell).round() as usize;
        Self {
            x_min: -extent,
            y_min: -extent,
            cell,
            width: n,
            height: n,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Config(format!("invalid grid {self:?}")));
        }
        Ok(())
    }

    pub fn cells(&self) -> usize {
        self.width * self.height
    }

    pub fn span(&self) -> (f64, f64) {
        (self.width as f64 * self.cell, self.height as f64 * self.cell)
    }

    pub fn frame(&self) -> SampleFrame {
        SampleFrame {
            origin_x: self.x_min,
            origin_y: self.y_min,
            cell: self.cell,
        }
    }

    /// `(column, row)` of the half-open cell containing `(x, y)`.
    pub fn locate(&self, x: f64, y: f64) -> Option<(usize, usize)> {
        let cx = ((x - self.x_min) / self.cell).floor();
        let cy = ((y - self.y_min) / self.cell).floor();
        if cx >= 0.0 && cy >= 0.0 && (cx as usize) < self.width && (cy as usize) < self.height {
            Some((cx as usize, cy as usize))
        } else {
            None
        }
    }

    pub fn cell_center(&self, col: usize, row: usize) -> (f64, f64) {
        (
            self.x_min + (col as f64 + 0.5) * self.cell,
            self.y_min + (row as f64 + 0.5) * self.cell,
        )
    }

    /// Grid after a stride-2 downsample.
    pub fn downsampled(&self) -> Result<Self> {
        if self.width % 2 != 0 || self.height % 2 != 0 {
            return Err(Error::Shape(format!(
                "stride-2 downsample needs even grid dims, got {}x{}",
                self.height, self.width
            )));
        }
        Ok(Self {
            cell: self.cell * 2.0,
            width: self.width / 2,
            height: self.height / 2,
            ..*self
        })
    }
}

/// Dense `H × W × C` feature map with its geometry.
#[derive(Clone, Debug, PartialEq)]
pub struct BevGrid {
    pub spec: GridSpec,
    pub data: Tensor,
}

impl BevGrid {
    pub fn channels(&self) -> usize {
        self.data.cols()
    }

    pub fn at(&self, row: usize, col: usize) -> &[f64] {
        let c = self.channels();
        let start = (row * self.spec.width + col) * c;
        &self.data.data()[start..start + c]
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Pillars {
    /// Linear cell index `row * W + col` to point indices, in point order.
    pub cells: BTreeMap<usize, Vec<usize>>,
    pub dropped: usize,
}

pub fn pillarize(cloud: &PointCloud, spec: &GridSpec) -> Pillars {
    let mut out = Pillars::default();
    for (i, p) in cloud.points.iter().enumerate() {
        match spec.locate(p[0], p[1]) {
            Some((c, r)) => out.cells.entry(r * spec.width + c).or_default().push(i),
            None => out.dropped += 1,
        }
    }
    out
}

/// Stacked per-point inputs for every non-empty pillar.
#[derive(Clone, Debug)]
pub struct PillarBatch {
    /// `[points, POINT_CHANNELS]`, grouped by pillar.
    pub features: Vec<f64>,
    /// Segment boundaries into the point rows, one segment per pillar.
    pub offsets: Vec<usize>,
    /// Linear cell index of each pillar.
    pub positions: Vec<usize>,
}

pub fn point_features(cloud: &PointCloud, pillars: &Pillars, spec: &GridSpec) -> PillarBatch {
    let (sx, sy) = spec.span();
    let mut features = Vec::new();
    let mut offsets = vec![0];
    let mut positions = Vec::with_capacity(pillars.cells.len());
    for (&cell, idx) in &pillars.cells {
        let (cx, cy) = spec.cell_center(cell % spec.width, cell / spec.width);
        // Summed in sorted order so the mean does not depend on point order.
        let mut zs: Vec<f64> = idx.iter().map(|&i| cloud.points[i][2]).collect();
        zs.sort_by(f64::total_cmp);
        let mean_z = zs.iter().sum::<f64>() / zs.len() as f64;
        for &i in idx {
            let [x, y, z] = cloud.points[i];
            features.extend_from_slice(&[
                cloud.intensity[i],
                2.0 * (x - spec.x_min) / sx - 1.0,
                2.0 * (y - spec.y_min) / sy - 1.0,
                z / HEIGHT_SCALE,
                (x - cx) / spec.cell,
                (y - cy) / spec.cell,
                z - mean_z,
            ]);
        }
        offsets.push(offsets.last().unwrap() + idx.len());
        positions.push(cell);
    }
    PillarBatch {
        features,
        offsets,
        positions,
    }
}

/// Shared two-layer per-point MLP followed by a channel-wise max per pillar.
/// `x` is `[points, in]`; returns `[pillars, out]`.
pub fn pointnet(tape: &Tape, p: &Bound, x: Var, offsets: &[usize]) -> Result<Var> {
    let h = tape.relu(linear(tape, p, "bev.pn.0", x)?);
    let h = tape.relu(linear(tape, p, "bev.pn.1", h)?);
    Ok(tape.segment_max_rows(h, offsets)?)
}

/// PointNet feature of a single pillar, evaluated on a private tape.
pub fn pointnet_pillar(points: &[Vec<f64>], params: &ParamRegistry) -> Result<Vec<f64>> {
    let w = params.get("bev.pn.0.w")?;
    let d = w.shape()[0];
    if points.is_empty() {
        return Err(Error::Shape("pointnet_pillar needs at least one point".into()));
    }
    if let Some(bad) = points.iter().find(|p| p.len() != d) {
        return Err(Error::Shape(format!(
            "point feature has {} channels, the network expects {d}",
            bad.len()
        )));
    }
    let tape = Tape::new();
    let bound = params.bind_frozen(&tape);
    let x = tape.constant(vec![points.len(), d], points.concat())?;
    let out = pointnet(&tape, &bound, x, &[0, points.len()])?;
    Ok(tape.to_vec(out))
}

/// Scatters `[pillars, C]` rows into an `[H, W, C]` map; empty cells are zero.
pub fn scatter_to_grid(tape: &Tape, features: Var, positions: &[usize], spec: &GridSpec) -> Result<Var> {
    let c = *tape.shape(features).last().expect("rank >= 1");
    let flat = tape.scatter_rows(features, positions, spec.cells())?;
    Ok(tape.reshape(flat, &[spec.height, spec.width, c])?)
}

const STRIDED_BLOCK: usize = 1;

pub fn init_featurizer(
    reg: &mut ParamRegistry,
    pillar_hidden: usize,
    pillar_channels: usize,
    backbone: &[usize],
    rng: &mut ChaCha8Rng,
) {
    init_linear(reg, "bev.pn.0", POINT_CHANNELS, pillar_hidden, 1.0, rng);
    init_linear(reg, "bev.pn.1", pillar_hidden, pillar_channels, 1.0, rng);
    let mut cin = pillar_channels;
    for (i, &cout) in backbone.iter().enumerate() {
        init_linear(reg, &format!("bev.conv{i}"), 9 * cin, cout, 1.0, rng);
        cin = cout;
    }
}

/// 3×3 convolution + ReLU blocks; the second block has stride 2.
pub fn conv_backbone(tape: &Tape, p: &Bound, grid: Var, spec: &GridSpec, blocks: usize) -> Result<(Var, GridSpec)> {
    let mut x = grid;
    let mut out_spec = *spec;
    for i in 0..blocks {
        let stride = if i == STRIDED_BLOCK { 2 } else { 1 };
        if stride == 2 {
            out_spec = out_spec.downsampled()?;
        }
        let geom = ConvGeometry {
            kernel: 3,
            stride,
            padding: 1,
        };
        let w = p.var(&format!("bev.conv{i}.w"))?;
        let b = p.var(&format!("bev.conv{i}.b"))?;
        x = tape.relu(tape.conv2d(x, w, b, geom)?);
    }
    Ok((x, out_spec))
}

/// Full featurizer: returns `F^d` as a tape node and its grid.
pub fn featurize(
    tape: &Tape,
    p: &Bound,
    cloud: &PointCloud,
    spec: &GridSpec,
    pillar_channels: usize,
    blocks: usize,
) -> Result<(Var, GridSpec)> {
    let pillars = pillarize(cloud, spec);
    let grid = if pillars.cells.is_empty() {
        tape.constant(vec![spec.height, spec.width, pillar_channels], vec![0.0; spec.cells() * pillar_channels])?
    } else {
        let batch = point_features(cloud, &pillars, spec);
        let rows = batch.offsets.last().copied().unwrap_or(0);
        let x = tape.constant(vec![rows, POINT_CHANNELS], batch.features)?;
        let pf = pointnet(tape, p, x, &batch.offsets)?;
        scatter_to_grid(tape, pf, &batch.positions, spec)?
    };
    conv_backbone(tape, p, grid, spec, blocks)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn boundary_convention() {
        let spec = GridSpec::centered(16.0, 0.5);
        assert_eq!(spec.locate(-16.0, -16.0), Some((0, 0)));
        assert_eq!(spec.locate(-16.001, 0.0), None);
        assert_eq!(spec.locate(16.0, 0.0), None);
        assert_eq!(spec.locate(15.999, 15.999), Some((63, 63)));
    }

    #[test]
    fn odd_grid_rejected() {
        let spec = GridSpec {
            x_min: 0.0,
            y_min: 0.0,
            cell: 1.0,
            width: 5,
            height: 4,
        };
        assert!(spec.downsampled().is_err());
    }
}
