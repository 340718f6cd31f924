use odgcnn::bev::GridSpec;
use odgcnn::geometry::{decode_yaw, Box9};
use odgcnn::matcher::{pad_targets, supervised_loss, Indicator};
use odgcnn::model::{
    aggregate, decode_query, edge_conv, forward, init_params, knn_graph, layer_forward, predict_heads,
    self_attention_alt, EdgeFeature, Interaction, ModelConfig,
};
use odgcnn::scene::{sample_scene, SceneConfig};
use odgcnn_autodiff::{AdamW, ParamRegistry, SampleFrame, Tape, Tensor};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(n: usize, rng: &mut impl Rng) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()
}

fn zero_tensors(reg: &mut ParamRegistry, pattern: &str) {
    let names: Vec<String> = reg.names().filter(|n| n.contains(pattern)).map(String::from).collect();
    for n in names {
        let shape = reg.get(&n).unwrap().shape().to_vec();
        reg.insert(n, Tensor::zeros(&shape));
    }
}

#[test]
fn zero_decoders_point_at_the_center() {
    let cfg = ModelConfig::default();
    let mut reg = init_params(&cfg, 1).unwrap();
    zero_tensors(&mut reg, "layer0.ref");
    zero_tensors(&mut reg, "layer0.nbr");
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let q = p.var("dgcnn.query0").unwrap();
    let d = decode_query(&tape, &p, 0, q, &cfg.grid).unwrap();
    assert!(tape.to_vec(d.reference).iter().all(|v| v.abs() < 1e-12));
    assert!(tape.to_vec(d.offsets).iter().all(|v| *v == 0.0));
    assert_eq!(tape.shape(d.offsets), vec![32, 8]);
    assert_eq!(tape.shape(d.logits), vec![32, 4]);
}

#[test]
fn bilinear_sampling_examples() {
    let spec = GridSpec::centered(1.0, 0.5);
    let frame: SampleFrame = spec.frame();
    let tape = Tape::new();
    let values: Vec<f64> = (0..16).map(|i| i as f64).collect();
    let g = tape.constant(vec![4, 4, 1], values).unwrap();
    let (cx, cy) = spec.cell_center(2, 1);
    let (mx, _) = spec.cell_center(1, 1);
    let pts = tape.constant(vec![3, 2], vec![cx, cy, (mx + cx) / 2.0, cy, 100.0, -100.0]).unwrap();
    let out = tape.to_vec(tape.bilinear_sample(g, pts, frame).unwrap());
    assert_eq!(out[0], 6.0);
    // Between cells (1, 1) and (2, 1): values 5 and 6.
    assert!((out[1] - 5.5).abs() < 1e-12);
    // Far outside: the nearest corner cell (row 0, last column).
    assert_eq!(out[2], 3.0);

    let g = tape.constant(vec![1, 2, 1], vec![0.0, 1.0]).unwrap();
    let f = SampleFrame {
        origin_x: 0.0,
        origin_y: 0.0,
        cell: 1.0,
    };
    let mid = tape.constant(vec![1, 2], vec![1.0, 0.5]).unwrap();
    assert!((tape.to_vec(tape.bilinear_sample(g, mid, f).unwrap())[0] - 0.5).abs() < 1e-12);
}

#[test]
fn aggregation_examples() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let tape = Tape::new();
    let feats = rand_vec(4 * 3, &mut rng);
    let s = tape.constant(vec![4, 3], feats.clone()).unwrap();
    let eq = tape.constant(vec![1, 4], vec![0.3; 4]).unwrap();
    let mean = tape.to_vec(aggregate(&tape, s, eq).unwrap());
    for c in 0..3 {
        let m = (0..4).map(|k| feats[k * 3 + c]).sum::<f64>() / 4.0;
        assert!((mean[c] - m).abs() < 1e-12);
    }
    let spike = tape.constant(vec![1, 4], vec![0.0, 1000.0, 0.0, 0.0]).unwrap();
    let one = tape.to_vec(aggregate(&tape, s, spike).unwrap());
    for c in 0..3 {
        assert!((one[c] - feats[3 + c]).abs() < 1e-9);
    }
    for _ in 0..100 {
        let feats = rand_vec(4 * 5, &mut rng);
        let s = tape.constant(vec![4, 5], feats.clone()).unwrap();
        let l = tape.constant(vec![1, 4], rand_vec(4, &mut rng).iter().map(|v| v * 5.0).collect()).unwrap();
        let out = tape.to_vec(aggregate(&tape, s, l).unwrap());
        for c in 0..5 {
            let col: Vec<f64> = (0..4).map(|k| feats[k * 5 + c]).collect();
            let lo = col.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = col.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            assert!(out[c] >= lo - 1e-12 && out[c] <= hi + 1e-12);
        }
    }
}

#[test]
fn knn_boundary_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let f = rand_vec(6 * 3, &mut rng);
    let g1 = knn_graph(&f, 3, 1).unwrap();
    assert!(g1.neighbors.iter().enumerate().all(|(i, n)| *n == vec![i]));
    let all = knn_graph(&f, 3, 6).unwrap();
    for (i, n) in all.neighbors.iter().enumerate() {
        let mut s = n.clone();
        s.sort();
        assert_eq!(s, (0..6).collect::<Vec<_>>());
        assert_eq!(n[0], i);
    }
    assert!(knn_graph(&f, 3, 7).is_err());
}

fn edge_registry(d: usize, h: usize, seed: u64) -> ParamRegistry {
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    odgcnn::nn::init_mlp2(&mut reg, "e", [2 * d, h, h], &mut rng);
    let b = rand_vec(h, &mut rng);
    reg.insert("e.0.b", Tensor::new(vec![h], b).unwrap());
    reg
}

#[test]
fn edge_conv_self_only_graph() {
    let (m, d, h) = (5, 4, 6);
    let reg = edge_registry(d, h, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_vec(m * d, &mut rng);
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let xv = tape.constant(vec![m, d], x.clone()).unwrap();
    let g = knn_graph(&x, d, 1).unwrap();
    let out = tape.to_vec(edge_conv(&tape, &p, "e", xv, &g, EdgeFeature::Difference).unwrap());
    let padded: Vec<f64> = x.chunks(d).flat_map(|r| r.iter().copied().chain(std::iter::repeat(0.0).take(d))).collect();
    let z = tape.constant(vec![m, 2 * d], padded).unwrap();
    let want = tape.to_vec(odgcnn::nn::mlp2(&tape, &p, "e", z).unwrap());
    for (a, b) in out.iter().zip(&want) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn edge_conv_is_permutation_equivariant() {
    let (m, d, h, k) = (10, 4, 6, 4);
    for mode in [EdgeFeature::Difference, EdgeFeature::Concat] {
        let reg = edge_registry(d, h, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..10 {
            let x = rand_vec(m * d, &mut rng);
            let mut perm: Vec<usize> = (0..m).collect();
            perm.shuffle(&mut rng);
            let xp: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
            let run = |x: &[f64]| {
                let tape = Tape::new();
                let p = reg.bind_frozen(&tape);
                let v = tape.constant(vec![m, d], x.to_vec()).unwrap();
                tape.to_vec(edge_conv(&tape, &p, "e", v, &knn_graph(x, d, k).unwrap(), mode).unwrap())
            };
            let (a, b) = (run(&x), run(&xp));
            for (r, &i) in perm.iter().enumerate() {
                for c in 0..h {
                    assert!((b[r * h + c] - a[i * h + c]).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn duplicated_queries_get_identical_outputs() {
    let (m, d, h) = (6, 4, 5);
    let reg = edge_registry(d, h, 8);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut x = rand_vec(m * d, &mut rng);
    let row: Vec<f64> = x[..d].to_vec();
    x[3 * d..4 * d].copy_from_slice(&row);
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let v = tape.constant(vec![m, d], x.clone()).unwrap();
    let out = tape.to_vec(edge_conv(&tape, &p, "e", v, &knn_graph(&x, d, 3).unwrap(), EdgeFeature::Difference).unwrap());
    assert_eq!(&out[..h], &out[3 * h..4 * h]);
}

fn attention_registry(d: usize, seed: u64) -> ParamRegistry {
    let mut reg = ParamRegistry::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for part in ["q", "k", "v", "o"] {
        odgcnn::nn::init_linear(&mut reg, &format!("a.{part}"), d, d, 1.0, &mut rng);
    }
    let eye: Vec<f64> = (0..d * d).map(|i| if i / d == i % d { 1.0 } else { 0.0 }).collect();
    reg.insert("a.o.w", Tensor::new(vec![d, d], eye).unwrap());
    reg
}

#[test]
fn attention_examples() {
    let d = 8;
    let mut reg = attention_registry(d, 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x1 = rand_vec(d, &mut rng);
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let v1 = tape.constant(vec![1, d], x1).unwrap();
    let out = tape.to_vec(self_attention_alt(&tape, &p, "a", v1, 2).unwrap());
    let val = tape.to_vec(odgcnn::nn::linear(&tape, &p, "a.v", v1).unwrap());
    for (a, b) in out.iter().zip(&val) {
        assert!((a - b).abs() < 1e-12);
    }

    zero_tensors(&mut reg, "a.q");
    zero_tensors(&mut reg, "a.k");
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let x = tape.constant(vec![5, d], rand_vec(5 * d, &mut rng)).unwrap();
    let out = tape.to_vec(self_attention_alt(&tape, &p, "a", x, 4).unwrap());
    let vals = tape.to_vec(odgcnn::nn::linear(&tape, &p, "a.v", x).unwrap());
    for c in 0..d {
        let mean = (0..5).map(|r| vals[r * d + c]).sum::<f64>() / 5.0;
        for r in 0..5 {
            assert!((out[r * d + c] - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (m, d) = (7, 8);
    let reg = attention_registry(d, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let x = rand_vec(m * d, &mut rng);
    let mut perm: Vec<usize> = (0..m).collect();
    perm.shuffle(&mut rng);
    let xp: Vec<f64> = perm.iter().flat_map(|&i| x[i * d..(i + 1) * d].to_vec()).collect();
    let run = |x: &[f64]| {
        let tape = Tape::new();
        let p = reg.bind_frozen(&tape);
        let v = tape.constant(vec![m, d], x.to_vec()).unwrap();
        tape.to_vec(self_attention_alt(&tape, &p, "a", v, 4).unwrap())
    };
    let (a, b) = (run(&x), run(&xp));
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..d {
            assert!((b[r * d + c] - a[i * d + c]).abs() < 1e-12);
        }
    }
}

fn fd_grid(cfg: &ModelConfig, seed: u64) -> (Vec<f64>, GridSpec, usize) {
    let spec = cfg.grid.downsampled().unwrap();
    let c = cfg.feature_channels();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (rand_vec(spec.cells() * c, &mut rng), spec, c)
}

#[test]
fn layer_preserves_count_and_residual() {
    let cfg = ModelConfig::default();
    let mut reg = init_params(&cfg, 14).unwrap();
    let (fd, spec, c) = fd_grid(&cfg, 15);
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let f = tape.constant(vec![spec.height, spec.width, c], fd.clone()).unwrap();
    let q = p.var("dgcnn.query0").unwrap();
    let (next, _) = layer_forward(&tape, &p, &cfg, 0, q, f, &spec).unwrap();
    assert_eq!(tape.shape(next), vec![cfg.queries, cfg.query_dim]);

    zero_tensors(&mut reg, "layer0.edge");
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let f = tape.constant(vec![spec.height, spec.width, c], fd).unwrap();
    let q = p.var("dgcnn.query0").unwrap();
    let (next, _) = layer_forward(&tape, &p, &cfg, 0, q, f, &spec).unwrap();
    assert_eq!(tape.to_vec(next), reg.get("dgcnn.query0").unwrap().data());
}

#[test]
fn layer_gradient_is_local_to_sampled_cells() {
    let cfg = ModelConfig::default();
    let reg = init_params(&cfg, 16).unwrap();
    let (fd, spec, c) = fd_grid(&cfg, 17);
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let f = tape.leaf(&Tensor::new(vec![spec.height, spec.width, c], fd).unwrap().with_grad());
    let q = p.var("dgcnn.query0").unwrap();
    let (next, dec) = layer_forward(&tape, &p, &cfg, 0, q, f, &spec).unwrap();
    let g = tape.backward(tape.sum_all(next)).unwrap().get_or_zero(f);

    let refs = tape.to_vec(dec.reference);
    let offs = tape.to_vec(dec.offsets);
    let k = cfg.offsets;
    let mut samples = Vec::new();
    for i in 0..cfg.queries {
        for j in 0..k {
            samples.push((refs[2 * i] + offs[i * 2 * k + 2 * j], refs[2 * i + 1] + offs[i * 2 * k + 2 * j + 1]));
        }
    }
    let (mut near, mut far_nonzero) = (0usize, 0usize);
    for r in 0..spec.height {
        for col in 0..spec.width {
            let (x, y) = spec.cell_center(col, r);
            let norm: f64 = g[(r * spec.width + col) * c..(r * spec.width + col + 1) * c].iter().map(|v| v.abs()).sum();
            let close = samples
                .iter()
                .any(|(sx, sy)| (sx.clamp(spec.x_min, -spec.x_min) - x).abs() < spec.cell * 1.01 && (sy.clamp(spec.y_min, -spec.y_min) - y).abs() < spec.cell * 1.01);
            if close {
                near += (norm > 0.0) as usize;
            } else if norm != 0.0 {
                far_nonzero += 1;
            }
        }
    }
    assert!(near > 0);
    assert_eq!(far_nonzero, 0);
}

#[test]
fn zero_box_head_decodes_to_anchor_boxes() {
    let cfg = ModelConfig::default();
    let mut reg = init_params(&cfg, 18).unwrap();
    zero_tensors(&mut reg, "head.box");
    let scene = sample_scene(&SceneConfig::default(), 19).unwrap();
    let tape = Tape::new();
    let p = reg.bind_frozen(&tape);
    let out = forward(&tape, &p, &cfg, &scene.cloud).unwrap();
    let probs = tape.to_vec(out.probs);
    for row in probs.chunks(cfg.num_classes + 1) {
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    }
    let codes = tape.to_vec(out.boxes);
    for code in codes.chunks(10) {
        let b = Box9::decode(code);
        assert_eq!(b.center[2], 0.0);
        assert_eq!(b.size, [1.0; 3]);
        assert_eq!(b.yaw, 0.0);
    }

    let tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(20);
    let reg = init_params(&cfg, 21).unwrap();
    let p = reg.bind_frozen(&tape);
    let x = tape.constant(vec![50, cfg.query_dim], rand_vec(50 * cfg.query_dim, &mut rng)).unwrap();
    let anchors = tape.constant(vec![50, 2], vec![0.0; 100]).unwrap();
    let (_, boxes) = predict_heads(&tape, &p, "head", x, anchors).unwrap();
    for code in tape.to_vec(boxes).chunks(10) {
        let yaw = decode_yaw(code[6], code[7]);
        assert!(yaw > -std::f64::consts::PI && yaw <= std::f64::consts::PI);
    }
}

#[test]
fn permuting_queries_permutes_detections() {
    let cfg = ModelConfig::default();
    let reg = init_params(&cfg, 22).unwrap();
    let scene = sample_scene(&SceneConfig::default(), 23).unwrap();
    let mut perm: Vec<usize> = (0..cfg.queries).collect();
    perm.shuffle(&mut ChaCha8Rng::seed_from_u64(24));
    let q0 = reg.get("dgcnn.query0").unwrap();
    let rows: Vec<f64> = perm.iter().flat_map(|&i| q0.row(i).to_vec()).collect();
    let mut permuted = reg.clone();
    permuted.insert("dgcnn.query0", Tensor::new(q0.shape().to_vec(), rows).unwrap());
    let run = |r: &ParamRegistry| {
        let tape = Tape::new();
        let p = r.bind_frozen(&tape);
        let f = forward(&tape, &p, &cfg, &scene.cloud).unwrap();
        (tape.to_vec(f.probs), tape.to_vec(f.boxes))
    };
    let (pa, ba) = run(&reg);
    let (pb, bb) = run(&permuted);
    let c1 = cfg.num_classes + 1;
    for (r, &i) in perm.iter().enumerate() {
        for c in 0..c1 {
            assert!((pb[r * c1 + c] - pa[i * c1 + c]).abs() < 1e-12);
        }
        for c in 0..10 {
            assert!((bb[r * 10 + c] - ba[i * 10 + c]).abs() < 1e-9);
        }
    }
}

#[test]
fn default_graph_has_sixteen_edges() {
    let mut rng = ChaCha8Rng::seed_from_u64(25);
    let g = knn_graph(&rand_vec(32 * 64, &mut rng), 64, 16).unwrap();
    assert!(g.neighbors.iter().all(|n| n.len() == 16));
}

fn one_step(cfg: &ModelConfig, seed: u64) {
    let mut reg = init_params(cfg, seed).unwrap();
    let scene = sample_scene(&SceneConfig::default(), seed).unwrap();
    let tape = Tape::new();
    let p = reg.bind(&tape);
    let f = forward(&tape, &p, cfg, &scene.cloud).unwrap();
    let t = pad_targets(&scene.boxes, cfg.num_classes, cfg.queries).unwrap();
    let (loss, _) = supervised_loss(&tape, &t, f.probs, f.boxes, Indicator::Detr).unwrap();
    assert!(tape.scalar(loss).is_finite());
    let g = tape.backward(loss).unwrap();
    reg.accumulate(&p, &g, 1.0).unwrap();
    AdamW::new(0.01).step(&mut reg, 1e-3).unwrap();
}

#[test]
fn neighbor_and_depth_sweeps_train() {
    for k in [1, 4, 8, 16, 32] {
        one_step(&ModelConfig { neighbors: k, ..ModelConfig::default() }, k as u64);
    }
    for layers in 1..=6 {
        one_step(&ModelConfig { layers, ..ModelConfig::default() }, layers as u64);
    }
    one_step(
        &ModelConfig {
            interaction: Interaction::SelfAttention,
            ..ModelConfig::default()
        },
        7,
    );
}
