use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::cloud::{Point, PointCloud, POINT_FEATURES};
use crate::kdtree::squared_distance;
use crate::projection::{assign, GridSpec};
use crate::tensor::{grad_check, Tape, Tensor, BN_EPSILON};

fn random_cloud(seed: u64, n: usize) -> PointCloud {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    PointCloud::new(
        (0..n)
            .map(|_| {
                let mut c = || rng.gen_range(-2.5f32..2.5);
                let (x, y, z) = (c(), c(), c());
                Point::new(x, y, z, rng.gen_range(0.0..1.0))
            })
            .collect(),
    )
}

fn test_config(f: usize, l: usize, c: usize) -> ModelConfig {
    let mut cfg = ModelConfig::small(f, l, c, 3.0, 0.75);
    cfg.neighbors = 4;
    cfg.views[3] = GridSpec::Spherical {
        height: 8,
        width: 16,
        fov_up: 60.0,
        fov_down: -60.0,
        closest: false,
    };
    cfg
}

fn randomize_buffers(p: &mut ModelParams<f64>, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let names: Vec<String> = p.specs().iter().filter(|s| !s.trainable).map(|s| s.name.clone()).collect();
    for name in names {
        let is_var = name.ends_with(".var");
        for v in p.get_mut(&name).unwrap().data_mut() {
            *v = if is_var { rng.gen_range(0.5..2.0) } else { rng.gen_range(-0.5..0.5) };
        }
    }
}

fn zero_backbone(p: &mut ModelParams<f64>) {
    let names: Vec<String> = p
        .specs()
        .iter()
        .filter(|s| s.name.starts_with("layer") && (s.name.ends_with(".w") || s.name.ends_with(".b")))
        .map(|s| s.name.clone())
        .collect();
    for name in names {
        p.get_mut(&name).unwrap().data_mut().fill(0.0);
    }
}

fn trainable_inputs(p: &ModelParams<f64>) -> Vec<Tensor<f64>> {
    p.trainable().into_iter().cloned().collect()
}

// ------------------------------------------------------------ embedding

/// Straight-loop embedding in eval mode over brute-force neighbors.
fn embed_oracle(cloud: &PointCloud, p: &ModelParams<f64>, cfg: &ModelConfig) -> (Vec<f64>, Vec<f64>) {
    let n = cloud.len();
    let (k, f, h) = (cfg.neighbors, cfg.features, NEIGHBOR_HIDDEN);
    let g = |name: &str| p.get(name).unwrap().data().to_vec();
    let feats: Vec<[f64; 5]> = cloud.points().iter().map(|pt| pt.features().map(f64::from)).collect();
    let mut out = vec![0.0; f * n];
    let mut pooled = vec![0.0; f * n];
    let (stem_w, stem_b) = (g("embed.stem.w"), g("embed.stem.b"));
    let (bn_g, bn_b, bn_m, bn_v) = (
        g("embed.nbr_bn.gamma"),
        g("embed.nbr_bn.beta"),
        g("embed.nbr_bn.mean"),
        g("embed.nbr_bn.var"),
    );
    let (w1, b1, w2, b2) = (g("embed.nbr_conv1.w"), g("embed.nbr_conv1.b"), g("embed.nbr_conv2.w"), g("embed.nbr_conv2.b"));
    let (fw, fb) = (g("embed.fuse.w"), g("embed.fuse.b"));
    for q in 0..n {
        let mut order: Vec<usize> = (0..n).collect();
        let pq = cloud.points()[q].xyz();
        order.sort_by(|&a, &b| {
            let da = squared_distance(pq, cloud.points()[a].xyz());
            let db = squared_distance(pq, cloud.points()[b].xyz());
            da.total_cmp(&db).then(a.cmp(&b))
        });
        let mut best = vec![f64::NEG_INFINITY; f];
        for &nb in &order[..k] {
            let x: Vec<f64> = (0..5)
                .map(|c| (feats[nb][c] - bn_m[c]) / (bn_v[c] + BN_EPSILON).sqrt() * bn_g[c] + bn_b[c])
                .collect();
            let hid: Vec<f64> = (0..h)
                .map(|o| (b1[o] + (0..5).map(|i| w1[o * 5 + i] * x[i]).sum::<f64>()).max(0.0))
                .collect();
            for o in 0..f {
                let v = b2[o] + (0..h).map(|i| w2[o * h + i] * hid[i]).sum::<f64>();
                best[o] = best[o].max(v);
            }
        }
        let stem: Vec<f64> = (0..f)
            .map(|o| stem_b[o] + (0..5).map(|i| stem_w[o * 5 + i] * feats[q][i]).sum::<f64>())
            .collect();
        for o in 0..f {
            let mut v = fb[o];
            for i in 0..f {
                v += fw[o * 2 * f + i] * stem[i] + fw[o * 2 * f + f + i] * best[i];
            }
            out[o * n + q] = v;
            pooled[o * n + q] = best[o];
        }
    }
    (out, pooled)
}

#[test]
fn embedding_matches_brute_force_loop_oracle() {
    let cloud = random_cloud(1, 100);
    let mut cfg = test_config(8, 1, 3);
    cfg.neighbors = 6;
    let mut p = ModelParams::<f64>::init(&cfg, 11).unwrap();
    randomize_buffers(&mut p, 12);
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let tape = Tape::no_grad();
    let e = embed(&tape, &p.bind(&tape), &prepared, Mode::Eval, &mut Vec::new()).unwrap();
    let (out, pooled) = embed_oracle(&cloud, &p, &cfg);
    for (a, b) in e.features.data().iter().zip(&out) {
        assert!((a - b).abs() < 1e-10, "{a} vs {b}");
    }
    for (a, b) in e.neighbor_embedding.data().iter().zip(&pooled) {
        assert!((a - b).abs() < 1e-10);
    }
}

#[test]
fn single_neighbor_is_the_point_itself() {
    let cloud = random_cloud(2, 30);
    let mut cfg = test_config(8, 1, 3);
    cfg.neighbors = 1;
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    for q in 0..30 {
        assert_eq!(prepared.neighbors(q), &[q as u32]);
    }
    let p = ModelParams::<f64>::init(&cfg, 3).unwrap();
    let (_, pooled) = embed_oracle(&cloud, &p, &cfg);
    let tape = Tape::no_grad();
    let e = embed(&tape, &p.bind(&tape), &prepared, Mode::Eval, &mut Vec::new()).unwrap();
    for (a, b) in e.neighbor_embedding.data().iter().zip(&pooled) {
        assert!((a - b).abs() < 1e-12);
    }
}

#[test]
fn neighbor_order_does_not_change_pooled_embedding() {
    let cloud = random_cloud(3, 60);
    let cfg = test_config(8, 1, 3);
    let a = PreparedCloud::new(&cloud, &cfg).unwrap();
    let k = cfg.neighbors;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut shuffled = Vec::with_capacity(60 * k);
    for q in 0..60 {
        let mut slots = a.neighbors(q).to_vec();
        for i in (1..k).rev() {
            slots.swap(i, rng.gen_range(0..=i));
        }
        shuffled.extend(slots);
    }
    let b = PreparedCloud::with_neighbors(&cloud, shuffled, &cfg).unwrap();
    let p = ModelParams::<f32>::init(&cfg, 4).unwrap();
    let run = |c: &PreparedCloud| {
        let tape = Tape::no_grad();
        embed(&tape, &p.bind(&tape), c, Mode::Eval, &mut Vec::new())
            .unwrap()
            .neighbor_embedding
            .data()
            .to_vec()
    };
    assert_eq!(run(&a), run(&b));
}

#[test]
fn too_many_neighbors_is_an_error() {
    let mut cfg = test_config(8, 1, 3);
    cfg.neighbors = 11;
    assert!(matches!(
        PreparedCloud::new(&random_cloud(4, 10), &cfg),
        Err(crate::Error::InvalidK { k: 11, n: 10 })
    ));
}

// ------------------------------------------------------------ mixing blocks

fn planar_cells(cloud: &PointCloud, cfg: &ModelConfig) -> (Arc<crate::projection::CellAssignment>, (usize, usize)) {
    let spec = &cfg.views[0];
    (Arc::new(assign(cloud, spec).unwrap()), spec.dims())
}

#[test]
fn zero_weights_make_mixing_blocks_identity() {
    let cloud = random_cloud(5, 50);
    let cfg = test_config(8, 1, 3);
    let mut p = ModelParams::<f64>::init(&cfg, 5).unwrap();
    zero_backbone(&mut p);
    let (cells, dims) = planar_cells(&cloud, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = Tensor::from_fn(&[8, 50], |_| rng.gen_range(-3.0..3.0));
    for mode in [Mode::Train, Mode::Eval] {
        let tape = Tape::new();
        let b = p.bind(&tape);
        let xv = tape.constant(x.clone());
        let s = spatial_mix(&tape, &b, 0, &xv, &cells, dims, 1, mode, &mut Vec::new()).unwrap();
        assert_eq!(s.value(), &x);
        let c = channel_mix(&tape, &b, 0, &xv, mode, &mut Vec::new()).unwrap();
        assert_eq!(c.value(), &x);
    }
}

#[test]
fn channel_mix_on_one_point_is_a_plain_mlp() {
    let cfg = test_config(8, 1, 3);
    let mut p = ModelParams::<f64>::init(&cfg, 6).unwrap();
    randomize_buffers(&mut p, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let x: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let tape = Tape::no_grad();
    let y = channel_mix(
        &tape,
        &p.bind(&tape),
        0,
        &tape.constant(Tensor::new(&[8, 1], x.clone()).unwrap()),
        Mode::Eval,
        &mut Vec::new(),
    )
    .unwrap();
    let g = |n: &str| p.get(&format!("layer0.channel.{n}")).unwrap().data().to_vec();
    let bn: Vec<f64> = (0..8)
        .map(|c| (x[c] - g("bn.mean")[c]) / (g("bn.var")[c] + BN_EPSILON).sqrt() * g("bn.gamma")[c] + g("bn.beta")[c])
        .collect();
    for o in 0..8 {
        let h = (g("conv.b")[o] + (0..8).map(|i| g("conv.w")[o * 8 + i] * bn[i]).sum::<f64>()).max(0.0);
        let expect = x[o] + g("dw.w")[o] * h + g("dw.b")[o];
        assert!((y.data()[o] - expect).abs() < 1e-12);
    }
}

#[test]
fn spatial_mix_gradient() {
    let cloud = random_cloud(7, 30);
    let cfg = test_config(8, 1, 3);
    let p = ModelParams::<f64>::init(&cfg, 7).unwrap();
    let (cells, dims) = planar_cells(&cloud, &cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::from_fn(&[8, 30], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[8, 30], |_| rng.gen_range(-1.0..1.0));
    let mut inputs = vec![x];
    inputs.extend(trainable_inputs(&p));
    let r = grad_check(
        |t, v| {
            let b = p.bind_vars(&v[1..])?;
            let y = spatial_mix(t, &b, 0, &v[0], &cells, dims, 1, Mode::Train, &mut Vec::new())?;
            t.dot(&y, &w)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

#[test]
fn channel_mix_gradient() {
    let cfg = test_config(8, 1, 3);
    let p = ModelParams::<f64>::init(&cfg, 8).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let x = Tensor::from_fn(&[8, 20], |_| rng.gen_range(-1.0..1.0));
    let w = Tensor::from_fn(&[8, 20], |_| rng.gen_range(-1.0..1.0));
    let mut inputs = vec![x];
    inputs.extend(trainable_inputs(&p));
    let r = grad_check(
        |t, v| {
            let b = p.bind_vars(&v[1..])?;
            let y = channel_mix(t, &b, 0, &v[0], Mode::Train, &mut Vec::new())?;
            t.dot(&y, &w)
        },
        &inputs,
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

fn permute(cloud: &PointCloud, seed: u64) -> (PointCloud, Vec<usize>) {
    let mut perm: Vec<usize> = (0..cloud.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in (1..perm.len()).rev() {
        perm.swap(i, rng.gen_range(0..=i));
    }
    (cloud.select(&perm), perm)
}

#[test]
fn spatial_mix_is_permutation_equivariant() {
    let cloud = random_cloud(9, 80);
    let cfg = test_config(8, 1, 3);
    let p = ModelParams::<f64>::init(&cfg, 9).unwrap();
    let (pc, perm) = permute(&cloud, 9);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = Tensor::from_fn(&[8, 80], |_| rng.gen_range(-1.0..1.0));
    let xp = Tensor::from_fn(&[8, 80], |i| x.data()[(i / 80) * 80 + perm[i % 80]]);
    let run = |c: &PointCloud, x: &Tensor<f64>| {
        let (cells, dims) = planar_cells(c, &cfg);
        let tape = Tape::no_grad();
        spatial_mix(&tape, &p.bind(&tape), 0, &tape.constant(x.clone()), &cells, dims, 1, Mode::Train, &mut Vec::new())
            .unwrap()
            .value()
            .clone()
    };
    let y = run(&cloud, &x);
    let yp = run(&pc, &xp);
    for ch in 0..8 {
        for (i, &src) in perm.iter().enumerate() {
            assert!((yp.data()[ch * 80 + i] - y.data()[ch * 80 + src]).abs() < 1e-12);
        }
    }
}

// ------------------------------------------------------------ full model

#[test]
fn full_model_gradient() {
    let cloud = random_cloud(10, 25);
    let cfg = test_config(8, 2, 3);
    let p = ModelParams::<f64>::init(&cfg, 10).unwrap();
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let targets: Vec<crate::Label> = (0..25).map(|i| (i % 3) as crate::Label).collect();
    let r = grad_check(
        |t, v| {
            let b = p.bind_vars(v)?;
            let out = forward(t, &b, &prepared, &cfg, Mode::Train)?;
            t.softmax_cross_entropy(&out.logits, &targets)
        },
        &trainable_inputs(&p),
        1e-5,
    )
    .unwrap();
    assert!(r.max_rel_error < 1e-4, "{}", r.max_rel_error);
}

#[test]
fn zero_backbone_collapses_to_head_of_embedding() {
    let cloud = random_cloud(11, 40);
    let (f, c) = (8, 3);
    let cfg = test_config(f, 1, c);
    let mut p = ModelParams::<f64>::init(&cfg, 11).unwrap();
    zero_backbone(&mut p);
    // head selects the first C channels
    let head = p.get_mut("head.w").unwrap();
    head.data_mut().fill(0.0);
    for i in 0..c {
        head.data_mut()[i * f + i] = 1.0;
    }
    p.get_mut("head.b").unwrap().data_mut().fill(0.0);
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let logits = predict(&p, &prepared, &cfg).unwrap();
    let tape = Tape::no_grad();
    let e = embed(&tape, &p.bind(&tape), &prepared, Mode::Eval, &mut Vec::new()).unwrap();
    for cls in 0..c {
        for q in 0..40 {
            let expect = e.features.data()[cls * 40 + q] + e.neighbor_embedding.data()[cls * 40 + q];
            assert_eq!(logits.data()[cls * 40 + q], expect);
        }
    }
}

#[test]
fn every_backbone_layer_is_identity_at_zero_weights() {
    let cloud = random_cloud(12, 60);
    let cfg = test_config(8, 4, 3);
    let mut p = ModelParams::<f64>::init(&cfg, 12).unwrap();
    zero_backbone(&mut p);
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let tape = Tape::no_grad();
    let b = p.bind(&tape);
    let e = embed(&tape, &b, &prepared, Mode::Eval, &mut Vec::new()).unwrap();
    let mut x = e.features.clone();
    for layer in 0..4 {
        let view = cfg.cycle[layer % 4];
        let cells = prepared.assignment(view).unwrap();
        let dims = cfg.views[view].dims();
        let s = spatial_mix(&tape, &b, layer, &x, cells, dims, 1, Mode::Eval, &mut Vec::new()).unwrap();
        assert_eq!(s.value(), x.value());
        let c = channel_mix(&tape, &b, layer, &s, Mode::Eval, &mut Vec::new()).unwrap();
        assert_eq!(c.value(), x.value());
        x = c;
    }
}

#[test]
fn head_skip_is_live() {
    let cloud = random_cloud(13, 50);
    let mut cfg = test_config(8, 2, 3);
    let p = ModelParams::<f64>::init(&cfg, 13).unwrap();
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let with = predict(&p, &prepared, &cfg).unwrap();
    cfg.head_skip = false;
    let without = predict(&p, &prepared, &cfg).unwrap();
    assert!(with.max_abs_diff(&without) > 1e-6);
}

#[test]
fn forward_is_permutation_equivariant() {
    let cloud = random_cloud(14, 200);
    let cfg = test_config(8, 4, 3);
    let mut p = ModelParams::<f64>::init(&cfg, 14).unwrap();
    randomize_buffers(&mut p, 14);
    let (pc, perm) = permute(&cloud, 14);
    let a = predict(&p, &PreparedCloud::new(&cloud, &cfg).unwrap(), &cfg).unwrap();
    let b = predict(&p, &PreparedCloud::new(&pc, &cfg).unwrap(), &cfg).unwrap();
    for cls in 0..3 {
        for (i, &src) in perm.iter().enumerate() {
            assert!((b.data()[cls * 200 + i] - a.data()[cls * 200 + src]).abs() < 1e-10);
        }
    }
    let la = argmax_labels(&a);
    let lb = argmax_labels(&b);
    assert!(perm.iter().enumerate().all(|(i, &src)| lb[i] == la[src]));
}

#[test]
fn train_mode_reports_every_batchnorm() {
    let cloud = random_cloud(15, 40);
    let cfg = test_config(8, 2, 3);
    let mut p = ModelParams::<f64>::init(&cfg, 15).unwrap();
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let tape = Tape::new();
    let out = forward(&tape, &p.bind(&tape), &prepared, &cfg, Mode::Train).unwrap();
    assert_eq!(out.bn_updates.len(), 1 + 2 * 2);
    let before = p.get("embed.nbr_bn.mean").unwrap().clone();
    p.apply_bn_updates(&out.bn_updates, 0.99).unwrap();
    let after = p.get("embed.nbr_bn.mean").unwrap();
    let batch = &out.bn_updates[0].stats.mean;
    for i in 0..POINT_FEATURES {
        let expect = 0.99 * before.data()[i] + 0.01 * batch.data()[i];
        assert!((after.data()[i] - expect).abs() < 1e-15);
    }
}

#[test]
fn segment_labels_every_input_point() {
    let mut cloud = random_cloud(16, 300);
    cloud.points_mut()[0] = Point::new(100.0, 0.0, 0.0, 0.0);
    let mut cfg = test_config(8, 2, 3);
    cfg.voxel_size = 0.3;
    let p = ModelParams::<f32>::init(&cfg, 16).unwrap();
    let s = segment(&p, &cfg, &cloud).unwrap();
    assert_eq!(s.labels.len(), 300);
    assert_eq!(s.labels[0], crate::IGNORE);
    assert!(s.labels[1..].iter().all(|&l| l < 3));
    assert!(s.kept_points < 299);
    assert_eq!(segment(&p, &cfg, &cloud).unwrap().labels, s.labels);
}

#[test]
fn published_configuration_audits() {
    for layers in [48, 12] {
        let mut cfg = ModelConfig::default();
        cfg.layers = layers;
        let p = ModelParams::<f32>::init(&cfg, 0).unwrap();
        p.audit(&cfg).unwrap();
        assert_eq!(p.get("layer0.spatial.dw1.w").unwrap().shape(), &[256, 3, 3]);
        assert_eq!(cfg.views[0].dims(), (250, 250));
    }
}

#[test]
fn prepared_cloud_needs_matching_k() {
    let cloud = random_cloud(17, 30);
    let cfg = test_config(8, 1, 3);
    let prepared = PreparedCloud::new(&cloud, &cfg).unwrap();
    let mut other = cfg.clone();
    other.neighbors = 5;
    let p = ModelParams::<f64>::init(&other, 0).unwrap();
    assert!(predict(&p, &prepared, &other).is_err());
}
