//! Boxes, their regression encoding, and rotated BEV overlap.

use std::cmp::Ordering;
use std::f64::consts::PI;

use rand::Rng;

/// Width of the regression encoding: `x y z ln(w) ln(l) ln(h) sinθ cosθ vx vy`.
pub const BOX_CODE: usize = 10;

/// Areas below this are treated as degenerate.
const MIN_AREA: f64 = 1e-12;

/// A 3D box with heading and BEV velocity. `size` is `(w, l, h)`; the length
/// axis points along `yaw`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Box9 {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub yaw: f64,
    pub velocity: [f64; 2],
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabeledBox {
    pub bbox: Box9,
    pub class: usize,
}

impl Box9 {
    pub fn encode(&self) -> [f64; BOX_CODE] {
        let [x, y, z] = self.center;
        let [w, l, h] = self.size;
        let [vx, vy] = self.velocity;
        [
            x,
            y,
            z,
            w.ln(),
            l.ln(),
            h.ln(),
            self.yaw.sin(),
            self.yaw.cos(),
            vx,
            vy,
        ]
    }

    /// Inverse of [`encode`](Self::encode) for raw regression outputs:
    /// sizes through `exp`, yaw through `atan2(sin, cos)` with `atan2(0, 0)`
    /// defined as 0.
    pub fn decode(code: &[f64]) -> Self {
        assert_eq!(code.len(), BOX_CODE);
        Self {
            center: [code[0], code[1], code[2]],
            size: [code[3].exp(), code[4].exp(), code[5].exp()],
            yaw: decode_yaw(code[6], code[7]),
            velocity: [code[8], code[9]],
        }
    }

    pub fn bev(&self) -> RotatedBoxBev {
        RotatedBoxBev {
            center: [self.center[0], self.center[1]],
            width: self.size[0],
            length: self.size[1],
            yaw: self.yaw,
        }
    }

    pub fn volume(&self) -> f64 {
        self.size.iter().product()
    }

    /// Point expressed in the box frame (length axis first, then width, then height).
    pub fn to_local(&self, p: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        [c * dx + s * dy, -s * dx + c * dy, p[2] - self.center[2]]
    }

    pub fn to_world(&self, local: [f64; 3]) -> [f64; 3] {
        let (s, c) = self.yaw.sin_cos();
        [
            self.center[0] + c * local[0] - s * local[1],
            self.center[1] + s * local[0] + c * local[1],
            self.center[2] + local[2],
        ]
    }
}

/// `atan2(sin, cos)` in `(-π, π]`, with the undefined `(0, 0)` case mapped to 0.
pub fn decode_yaw(sin: f64, cos: f64) -> f64 {
    if sin == 0.0 && cos == 0.0 {
        return 0.0;
    }
    let a = sin.atan2(cos);
    if a <= -PI {
        a + 2.0 * PI
    } else {
        a
    }
}

/// Smallest absolute difference between two headings, in `[0, π]`.
pub fn yaw_distance(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(2.0 * PI);
    d.min(2.0 * PI - d)
}

/// BEV footprint of a box.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RotatedBoxBev {
    pub center: [f64; 2],
    pub width: f64,
    pub length: f64,
    pub yaw: f64,
}

impl RotatedBoxBev {
    pub fn area(&self) -> f64 {
        self.width * self.length
    }

    /// Corners in counter-clockwise order.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [[hl, hw], [-hl, hw], [-hl, -hw], [hl, -hw]];
        local.map(|[u, v]| [self.center[0] + c * u - s * v, self.center[1] + s * u + c * v])
    }

    pub fn contains(&self, p: [f64; 2]) -> bool {
        let (s, c) = self.yaw.sin_cos();
        let dx = p[0] - self.center[0];
        let dy = p[1] - self.center[1];
        let u = c * dx + s * dy;
        let v = -s * dx + c * dy;
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }

    fn key_cmp(&self, other: &Self) -> Ordering {
        self.center[0]
            .total_cmp(&other.center[0])
            .then(self.center[1].total_cmp(&other.center[1]))
            .then(self.width.total_cmp(&other.width))
            .then(self.length.total_cmp(&other.length))
            .then(self.yaw.total_cmp(&other.yaw))
    }
}

fn shoelace(poly: &[[f64; 2]]) -> f64 {
    let n = poly.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    0.5 * acc.abs()
}

fn cross(a: [f64; 2], b: [f64; 2], p: [f64; 2]) -> f64 {
    (b[0] - a[0]) * (p[1] - a[1]) - (b[1] - a[1]) * (p[0] - a[0])
}

/// Sutherland–Hodgman clip of `subject` against the convex CCW polygon `clip`.
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out = subject.to_vec();
    for i in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in != prev_in {
                let dp = cross(a, b, prev);
                let dc = cross(a, b, cur);
                let t = dp / (dp - dc);
                out.push([prev[0] + t * (cur[0] - prev[0]), prev[1] + t * (cur[1] - prev[1])]);
            }
            if cur_in {
                out.push(cur);
            }
        }
    }
    out
}

/// Exact intersection area of two rotated rectangles.
pub fn intersection_area(a: &RotatedBoxBev, b: &RotatedBoxBev) -> f64 {
    // Fixed operand order keeps the result bit-identical under swapping.
    let (first, second) = if a.key_cmp(b) == Ordering::Greater {
        (b, a)
    } else {
        (a, b)
    };
    shoelace(&clip_convex(&first.corners(), &second.corners()))
}

/// Intersection over union of two BEV footprints. Degenerate boxes give 0.
pub fn rotated_iou_bev(a: &RotatedBoxBev, b: &RotatedBoxBev) -> f64 {
    let (area_a, area_b) = (a.area(), b.area());
    if !(area_a > MIN_AREA && area_b > MIN_AREA) {
        return 0.0;
    }
    let inter = intersection_area(a, b);
    let union = area_a + area_b - inter;
    if union <= MIN_AREA {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Monte-Carlo IoU estimate by uniform sampling over the joint bounding
/// rectangle. Test oracle for [`rotated_iou_bev`].
pub fn monte_carlo_iou(a: &RotatedBoxBev, b: &RotatedBoxBev, samples: usize, rng: &mut impl Rng) -> f64 {
    let pts: Vec<[f64; 2]> = a.corners().into_iter().chain(b.corners()).collect();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in &pts {
        for d in 0..2 {
            lo[d] = lo[d].min(p[d]);
            hi[d] = hi[d].max(p[d]);
        }
    }
    let (mut in_a, mut in_b, mut both) = (0usize, 0usize, 0usize);
    for _ in 0..samples {
        let p = [rng.gen_range(lo[0]..hi[0]), rng.gen_range(lo[1]..hi[1])];
        let (ia, ib) = (a.contains(p), b.contains(p));
        in_a += ia as usize;
        in_b += ib as usize;
        both += (ia && ib) as usize;
    }
    let union = in_a + in_b - both;
    if union == 0 {
        0.0
    } else {
        both as f64 / union as f64
    }
}

/// IoU of two boxes after aligning their centers and headings.
pub fn aligned_iou_3d(a: &Box9, b: &Box9) -> f64 {
    let inter: f64 = a.size.iter().zip(&b.size).map(|(x, y)| x.min(*y)).product();
    let union = a.volume() + b.volume() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// One predicted object: class probabilities over `C + 1` entries (the last
/// is no-object) and a decoded box.
#[derive(Clone, Debug, PartialEq)]
pub struct Detection {
    pub probs: Vec<f64>,
    pub bbox: Box9,
}

impl Detection {
    /// Highest probability among the real classes.
    pub fn score(&self) -> f64 {
        self.probs[..self.probs.len() - 1].iter().copied().fold(0.0, f64::max)
    }

    /// Real class with the highest probability, lowest index on ties.
    pub fn label(&self) -> usize {
        let real = &self.probs[..self.probs.len() - 1];
        let mut best = 0;
        for (i, p) in real.iter().enumerate() {
            if *p > real[best] {
                best = i;
            }
        }
        best
    }

    pub fn empty_prob(&self) -> f64 {
        *self.probs.last().expect("at least one class")
    }
}

/// Splits row-major `[N, C + 1]` probabilities and `[N, BOX_CODE]` codes into
/// detections.
pub fn detections_from_rows(probs: &[f64], codes: &[f64], classes_with_empty: usize) -> Vec<Detection> {
    probs
        .chunks(classes_with_empty)
        .zip(codes.chunks(BOX_CODE))
        .map(|(p, c)| Detection {
            probs: p.to_vec(),
            bbox: Box9::decode(c),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(x: f64, y: f64, side: f64, yaw: f64) -> RotatedBoxBev {
        RotatedBoxBev {
            center: [x, y],
            width: side,
            length: side,
            yaw,
        }
    }

    #[test]
    fn identical_boxes() {
        let a = RotatedBoxBev {
            center: [1.0, -2.0],
            width: 1.9,
            length: 4.5,
            yaw: 0.7,
        };
        assert!((rotated_iou_bev(&a, &a) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn offset_unit_squares() {
        let iou = rotated_iou_bev(&square(0.0, 0.0, 1.0, 0.0), &square(0.5, 0.0, 1.0, 0.0));
        assert!((iou - 1.0 / 3.0).abs() < 1e-12, "{iou}");
    }

    #[test]
    fn rotated_square_inside_square() {
        // A unit square rotated 45° inside a 2x2 square: inter = 1, union = 4.
        let iou = rotated_iou_bev(&square(0.0, 0.0, 2.0, 0.0), &square(0.0, 0.0, 1.0, PI / 4.0));
        assert!((iou - 0.25).abs() < 1e-12, "{iou}");
    }

    #[test]
    fn disjoint_and_degenerate() {
        assert_eq!(rotated_iou_bev(&square(0.0, 0.0, 1.0, 0.3), &square(5.0, 0.0, 1.0, 1.0)), 0.0);
        assert_eq!(rotated_iou_bev(&square(0.0, 0.0, 0.0, 0.0), &square(0.0, 0.0, 1.0, 0.0)), 0.0);
    }

    #[test]
    fn encode_decode_round_trip() {
        let b = Box9 {
            center: [1.0, 2.0, 0.8],
            size: [1.9, 4.5, 1.6],
            yaw: -2.5,
            velocity: [0.3, -4.0],
        };
        let back = Box9::decode(&b.encode());
        for (x, y) in b.size.iter().zip(&back.size) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!((back.yaw - b.yaw).abs() < 1e-12);
    }

    #[test]
    fn yaw_conventions() {
        assert_eq!(decode_yaw(0.0, 0.0), 0.0);
        assert_eq!(decode_yaw(0.0, -1.0), PI);
        assert!((yaw_distance(0.0, 1.5 * PI) - PI / 2.0).abs() < 1e-12);
        assert!((yaw_distance(3.0, -3.0) - (2.0 * PI - 6.0)).abs() < 1e-12);
    }

    #[test]
    fn local_world_inverse() {
        let b = Box9 {
            center: [3.0, -1.0, 0.5],
            size: [1.0, 2.0, 1.0],
            yaw: 1.1,
            velocity: [0.0; 2],
        };
        let p = [0.3, 2.2, -0.4];
        let q = b.to_world(b.to_local(p));
        for d in 0..3 {
            assert!((p[d] - q[d]).abs() < 1e-12);
        }
    }
}
