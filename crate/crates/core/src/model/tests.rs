use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::tensor::{softplus, Tensor};

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn randomize(store: &mut ParamStore<f64>, prefix: &str, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let ids: Vec<ParamId> = store.ids().collect();
    for id in ids {
        let p = store.get_mut(id);
        if p.name.starts_with(prefix) {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
}

fn images(seed: u64, n: usize, c: usize, side: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rand_tensor(&mut rng, &[n, c, side, side])
}

fn geo(seed: u64, n: usize, side: usize) -> Tensor<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(&[n, 2, side, side], |i| {
        if (i / (side * side)).is_multiple_of(2) {
            rng.random_range(-1.0..1.0)
        } else if rng.random_bool(0.05) {
            1.0
        } else {
            0.0
        }
    })
}

fn batch(n_opt: usize, n_sar: usize, seed: u64) -> ModelInput<f64> {
    ModelInput {
        opt: (n_opt > 0).then(|| images(seed, n_opt, 3, 64)),
        sar: (n_sar > 0).then(|| images(seed + 1, n_sar, 3, 64)),
        sar_geo: (n_sar > 0).then(|| geo(seed + 2, n_sar, 64)),
        pairing: Pairing::SelfPaired,
    }
}

#[test]
fn stage_shapes_follow_config() {
    let (net, store) = GeoMamba::new::<f64>(ModelConfig::default(), 1).unwrap();
    let mut f = Fwd::new(&store, true);
    let out = net.forward(&mut f, &batch(2, 2, 3)).unwrap();
    let shapes: Vec<Vec<usize>> = out.stages.iter().map(|&v| f.g.shape(v).to_vec()).collect();
    assert_eq!(
        shapes,
        vec![
            vec![4, 16, 16, 16],
            vec![4, 32, 8, 8],
            vec![4, 64, 4, 4],
            vec![4, 128, 2, 2]
        ]
    );
    assert_eq!(f.g.shape(out.embedding), [4, 1024]);
    assert_eq!(f.g.shape(out.logits), [4, 8]);
    assert_eq!(f.g.shape(out.ds.opt_shallow.unwrap()), [2, 1, 16, 16]);
    assert_eq!(f.g.shape(out.ds.sar_deep.unwrap()), [2, 1, 2, 2]);
}

#[test]
fn embedding_is_1024_at_any_resolution() {
    for side in [32, 96] {
        let cfg = ModelConfig {
            image_size: side,
            ..ModelConfig::default()
        };
        let (net, store) = GeoMamba::new::<f64>(cfg, 2).unwrap();
        let e = net.embed(&store, images(1, 1, 3, side), Modality::Opt, None).unwrap();
        assert_eq!(e.shape(), [1, 1024]);
    }
}

#[test]
fn config_validation() {
    let mut cfg = ModelConfig::default();
    cfg.stages[0].stride = 2;
    assert!(matches!(GeoMamba::new::<f64>(cfg, 0), Err(ModelError::Config(_))));
    let mut cfg = ModelConfig::default();
    cfg.stages[3].gfi = true;
    assert!(GeoMamba::new::<f64>(cfg, 0).is_err());
    let cfg = ModelConfig {
        ds_kernel: 2,
        ..ModelConfig::default()
    };
    assert!(GeoMamba::new::<f64>(cfg, 0).is_err());
    let cfg = ModelConfig {
        image_size: 48,
        ..ModelConfig::default()
    };
    assert!(GeoMamba::new::<f64>(cfg, 0).is_err());
}

#[test]
fn wrong_input_shape_is_rejected() {
    let (net, store) = GeoMamba::new::<f64>(ModelConfig::default(), 1).unwrap();
    let err = net.embed(&store, images(1, 1, 1, 64), Modality::Opt, None).unwrap_err();
    assert!(matches!(err, ModelError::Input(_)));
    let err = net.embed(&store, images(1, 1, 3, 32), Modality::Opt, None).unwrap_err();
    assert!(matches!(err, ModelError::Input(_)));
    // SAR with injection on needs the geometric input.
    let err = net.embed(&store, images(1, 1, 3, 64), Modality::Sar, None).unwrap_err();
    assert!(matches!(err, ModelError::Input(_)));
}

#[test]
fn zero_input_gives_zero_stem_activations() {
    let (net, store) = GeoMamba::new::<f64>(ModelConfig::default(), 4).unwrap();
    for m in [Modality::Opt, Modality::Sar] {
        let mut f = Fwd::new(&store, false);
        let x = f.g.constant(Tensor::zeros(&[1, 3, 64, 64]));
        let y = net.stem_conv(&mut f, x, m).unwrap();
        assert!(f.g.data(y).iter().all(|&v| v == 0.0));
    }
}

#[test]
fn eval_forward_is_deterministic_and_batch_independent() {
    let (net, mut store) = GeoMamba::new::<f64>(ModelConfig::default(), 5).unwrap();
    randomize(&mut store, "gfi", 9);
    for b in store.buffers_mut() {
        b.mean.iter_mut().for_each(|m| *m = 0.05);
        b.var.iter_mut().for_each(|v| *v = 1.3);
    }
    let imgs = images(7, 3, 3, 64);
    let g = geo(8, 3, 64);
    let all = net.embed(&store, imgs.clone(), Modality::Sar, Some(g.clone())).unwrap();
    let again = net.embed(&store, imgs.clone(), Modality::Sar, Some(g.clone())).unwrap();
    assert_eq!(all, again);
    let per = 64 * 64;
    for i in 0..3 {
        let one = Tensor::new(vec![1, 3, 64, 64], imgs.data()[i * 3 * per..(i + 1) * 3 * per].to_vec()).unwrap();
        let one_g = Tensor::new(vec![1, 2, 64, 64], g.data()[i * 2 * per..(i + 1) * 2 * per].to_vec()).unwrap();
        let e = net.embed(&store, one, Modality::Sar, Some(one_g)).unwrap();
        let row = &all.data()[i * 1024..(i + 1) * 1024];
        for (a, b) in e.data().iter().zip(row) {
            assert!((a - b).abs() <= 1e-12, "{a} vs {b}");
        }
    }
}

#[test]
fn identical_inputs_give_identical_embeddings() {
    let (net, store) = GeoMamba::new::<f64>(ModelConfig::default(), 6).unwrap();
    let one = images(3, 1, 3, 64);
    let mut two = one.data().to_vec();
    two.extend_from_slice(one.data());
    let two = Tensor::new(vec![2, 3, 64, 64], two).unwrap();
    let e = net.embed(&store, two, Modality::Opt, None).unwrap();
    assert_eq!(e.data()[..1024], e.data()[1024..]);
}

#[test]
fn gfi_off_streams_are_independent() {
    let cfg = ModelConfig {
        gfi_enabled: false,
        ..ModelConfig::default()
    };
    let (net, store) = GeoMamba::new::<f64>(cfg, 7).unwrap();
    let run = |sar_seed: u64| {
        let mut input = batch(2, 2, 11);
        input.sar = Some(images(sar_seed, 2, 3, 64));
        let mut f = Fwd::new(&store, false);
        let out = net.forward(&mut f, &input).unwrap();
        let opt_rows: Vec<Vec<f64>> = out
            .stages
            .iter()
            .map(|&v| {
                let d = f.g.data(v);
                d[..d.len() / 2].to_vec()
            })
            .collect();
        let emb = f.g.data(out.embedding)[..2048].to_vec();
        (opt_rows, emb)
    };
    assert_eq!(run(100), run(200));
}

#[test]
fn gfi_on_couples_streams_under_partner_pairing() {
    let (net, mut store) = GeoMamba::new::<f64>(ModelConfig::default(), 7).unwrap();
    randomize(&mut store, "gfi", 3);
    let run = |sar_seed: u64| {
        let mut input = batch(2, 2, 11);
        input.sar = Some(images(sar_seed, 2, 3, 64));
        input.pairing = Pairing::Partners {
            opt_partner: vec![1, 0],
            sar_partner: vec![0, 1],
        };
        let mut f = Fwd::new(&store, false);
        let out = net.forward(&mut f, &input).unwrap();
        f.g.data(out.embedding)[..2048].to_vec()
    };
    assert_ne!(run(100), run(200));
}

#[test]
fn zero_init_gfi_is_exact_identity() {
    let (net, mut store) = GeoMamba::new::<f64>(ModelConfig::default(), 8).unwrap();
    // Randomize everything except the zero-initialized output projections.
    let ids: Vec<ParamId> = store.ids().collect();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for id in ids {
        let p = store.get_mut(id);
        let zero_out = p.name.contains(".attn.o.") || p.name.contains(".mlp.fc2.");
        if p.name.starts_with("gfi") && !zero_out {
            for v in p.value.data_mut() {
                *v = rng.random_range(-0.5..0.5);
            }
        }
    }
    let gfi_stage = net_gfi(&net, 1);
    let mut f = Fwd::new(&store, false);
    let xs = f.g.constant(images(1, 2, 32, 8));
    let xo = f.g.constant(images(2, 2, 32, 8));
    let xg = f.g.constant(images(3, 2, 32, 8));
    let inj = gfi_stage.inject.forward(&mut f, xs, xg).unwrap();
    assert_eq!(f.g.data(inj), f.g.data(xs));
    let cross = gfi_stage.cross.forward(&mut f, xo, xs).unwrap();
    assert_eq!(f.g.data(cross), f.g.data(xo));
    let cross = gfi_stage.cross.forward(&mut f, xs, xo).unwrap();
    assert_eq!(f.g.data(cross), f.g.data(xs));
}

fn net_gfi(net: &GeoMamba, stage: usize) -> GfiStage {
    net.gfi_stage(stage).expect("stage has injection").clone()
}

fn standalone_inject(dim: usize, geo_dim: usize, heads: usize, seed: u64) -> (GfiInject, ParamStore<f64>) {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = GfiInject::new(&mut Builder::new(&mut store, &mut rng), dim, geo_dim, heads).unwrap();
    randomize(&mut store, "", seed + 1);
    (m, store)
}

#[test]
fn injection_ignores_key_order() {
    let (m, store) = standalone_inject(8, 6, 2, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let xs = rand_tensor(&mut rng, &[2, 8, 3, 3]);
    let xg = rand_tensor(&mut rng, &[2, 6, 3, 3]);
    // Shuffle the 9 spatial positions of the prior.
    let perm = [4, 8, 0, 2, 7, 1, 3, 6, 5];
    let mut shuffled = xg.clone();
    for n in 0..2 {
        for c in 0..6 {
            for (dst, &src) in perm.iter().enumerate() {
                shuffled.data_mut()[(n * 6 + c) * 9 + dst] = xg.data()[(n * 6 + c) * 9 + src];
            }
        }
    }
    let run = |g: &Tensor<f64>| {
        let mut f = Fwd::new(&store, false);
        let a = f.g.constant(xs.clone());
        let b = f.g.constant(g.clone());
        let y = m.forward(&mut f, a, b).unwrap();
        f.g.data(y).to_vec()
    };
    let (a, b) = (run(&xg), run(&shuffled));
    assert_ne!(a, xs.data());
    for (u, v) in a.iter().zip(&b) {
        assert!((u - v).abs() < 1e-12);
    }
}

fn linear_apply(store: &ParamStore<f64>, l: &Linear, x: &[f64]) -> Vec<f64> {
    let w = store.get(l.w).value.data();
    (0..l.dout)
        .map(|j| {
            let mut acc = l.b.map_or(0.0, |b| store.get(b).value.data()[j]);
            for (i, &xi) in x.iter().enumerate() {
                acc += xi * w[i * l.dout + j];
            }
            acc
        })
        .collect()
}

#[test]
fn single_key_injection_adds_projected_value() {
    let (m, store) = standalone_inject(4, 3, 2, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let xs = rand_tensor(&mut rng, &[1, 4, 2, 2]);
    let xg = rand_tensor(&mut rng, &[1, 3, 1, 1]);
    // Spatial sizes must match, so broadcast the single prior token is not
    // allowed; use a 1×1 SAR map instead.
    let xs1 = Tensor::new(vec![1, 4, 1, 1], xs.data()[..4].to_vec()).unwrap();
    let mut f = Fwd::new(&store, false);
    let a = f.g.constant(xs1.clone());
    let b = f.g.constant(xg.clone());
    let y = m.forward(&mut f, a, b).unwrap();
    let v = linear_apply(&store, &m.attn.v, xg.data());
    let o = linear_apply(&store, &m.attn.o, &v);
    for c in 0..4 {
        let want = xs1.data()[c] + o[c];
        assert!((f.g.data(y)[c] - want).abs() < 1e-12);
    }
    let mut f = Fwd::new(&store, false);
    let a = f.g.constant(xs);
    let b = f.g.constant(xg);
    assert!(matches!(m.forward(&mut f, a, b), Err(ModelError::Shape(_))));
}

#[test]
fn single_head_cross_matches_scalar_attention() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let m = GfiCross::new(&mut Builder::new(&mut store, &mut rng), 3, 1, 2, 1e-5).unwrap();
    randomize(&mut store, "", 10);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let xq = rand_tensor(&mut rng, &[1, 3, 1, 1]);
    let xkv = rand_tensor(&mut rng, &[1, 3, 1, 1]);
    let mut f = Fwd::new(&store, false);
    let (a, b) = (f.g.constant(xq.clone()), f.g.constant(xkv.clone()));
    let y = m.forward(&mut f, a, b).unwrap();
    // One key: softmax weight 1, attention output is o(v(kv)).
    let v = linear_apply(&store, &m.attn.v, xkv.data());
    let o = linear_apply(&store, &m.attn.o, &v);
    let x1: Vec<f64> = xq.data().iter().zip(&o).map(|(a, b)| a + b).collect();
    let mean = x1.iter().sum::<f64>() / 3.0;
    let var = x1.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 3.0;
    let gamma = store.get(m.norm.gamma).value.data();
    let beta = store.get(m.norm.beta).value.data();
    let ln: Vec<f64> = (0..3)
        .map(|i| (x1[i] - mean) / (var + 1e-5).sqrt() * gamma[i] + beta[i])
        .collect();
    let h = linear_apply(&store, &m.mlp.fc1, &ln);
    let h: Vec<f64> = h
        .iter()
        .map(|&x| 0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044715 * x * x * x)).tanh()))
        .collect();
    let h = linear_apply(&store, &m.mlp.fc2, &h);
    for i in 0..3 {
        assert!((f.g.data(y)[i] - (x1[i] + h[i])).abs() < 1e-12);
    }
}

#[test]
fn cross_output_shape_follows_queries() {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let m = GfiCross::new(&mut Builder::new(&mut store, &mut rng), 8, 4, 4, 1e-5).unwrap();
    let mut f = Fwd::new(&store, false);
    let q = f.g.constant(images(1, 2, 8, 4));
    let kv = f.g.constant(images(2, 2, 8, 2));
    let y = m.forward(&mut f, q, kv).unwrap();
    assert_eq!(f.g.shape(y), [2, 8, 4, 4]);
    let bad = f.g.constant(images(3, 2, 6, 2));
    assert!(m.forward(&mut f, q, bad).is_err());
}

/// Per-step recurrence written independently of the tensor op.
fn naive_bidirectional_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    bm: &[f64],
    cm: &[f64],
    d: &[f64],
    l: usize,
    c: usize,
    s: usize,
) -> Vec<f64> {
    let mut out = vec![0.0; l * c];
    for reverse in [false, true] {
        for k in 0..c {
            let mut h = vec![0.0; s];
            let order: Vec<usize> = if reverse { (0..l).rev().collect() } else { (0..l).collect() };
            for t in order {
                let x = u[t * c + k];
                let dt = delta[t * c + k];
                let mut y = d[k] * x;
                for j in 0..s {
                    h[j] = (dt * a[k * s + j]).exp() * h[j] + dt * bm[t * s + j] * x;
                    y += cm[t * s + j] * h[j];
                }
                out[t * c + k] += 0.5 * y;
            }
        }
    }
    out
}

#[test]
fn mixer_scan_matches_naive_recurrence() {
    for (l, seed) in [(1usize, 1u64), (7, 2), (16, 3), (64, 4)] {
        let (c, s) = (4, 3);
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = SsmParams::new(&mut Builder::new(&mut store, &mut rng), c, s);
        let u = rand_tensor(&mut rng, &[1, l, c]);
        let mut f = Fwd::new(&store, false);
        let uv = f.g.constant(u.clone());
        let y = p.scan(&mut f, uv).unwrap();
        let lin = |lin: &Linear| -> Vec<f64> {
            (0..l)
                .flat_map(|t| linear_apply(&store, lin, &u.data()[t * c..(t + 1) * c]))
                .collect()
        };
        let delta: Vec<f64> = lin(&p.dt).into_iter().map(softplus).collect();
        let bm = lin(&p.proj_b);
        let cm = lin(&p.proj_c);
        let a: Vec<f64> = store.get(p.a).value.data().iter().map(|&v| -softplus(v)).collect();
        let d = store.get(p.d).value.data();
        let want = naive_bidirectional_scan(u.data(), &delta, &a, &bm, &cm, d, l, c, s);
        for (x, w) in f.g.data(y).iter().zip(&want) {
            assert!((x - w).abs() < 1e-12, "L={l}: {x} vs {w}");
        }
    }
}

#[test]
fn identity_scan_parameters_give_prefix_sums() {
    let mut g = crate::tensor::Graph::<f64>::new();
    let l = 6;
    let xs: Vec<f64> = (0..l).map(|i| i as f64 * 0.5 - 1.0).collect();
    let u = g.constant(Tensor::new(vec![1, l, 1], xs.clone()).unwrap());
    let delta = g.constant(Tensor::full(&[1, l, 1], 1.0));
    let a = g.constant(Tensor::zeros(&[1, 1]));
    let b = g.constant(Tensor::full(&[1, l, 1], 1.0));
    let c = g.constant(Tensor::full(&[1, l, 1], 1.0));
    let d = g.constant(Tensor::zeros(&[1]));
    let y = g.selective_scan(u, delta, a, b, c, d, false).unwrap();
    let mut acc = 0.0;
    for (t, &x) in xs.iter().enumerate() {
        acc += x;
        assert_eq!(g.data(y)[t], acc);
    }
}

#[test]
fn single_step_scan() {
    let mut g = crate::tensor::Graph::<f64>::new();
    let (x, dt, bb, cc, dd) = (0.7, 0.3, -1.2, 0.9, 0.4);
    let u = g.constant(Tensor::full(&[1, 1, 1], x));
    let delta = g.constant(Tensor::full(&[1, 1, 1], dt));
    let a = g.constant(Tensor::full(&[1, 1], -2.0));
    let b = g.constant(Tensor::full(&[1, 1, 1], bb));
    let c = g.constant(Tensor::full(&[1, 1, 1], cc));
    let d = g.constant(Tensor::full(&[1], dd));
    let y = g.selective_scan(u, delta, a, b, c, d, true).unwrap();
    assert!((g.data(y)[0] - (cc * dt * bb * x + dd * x)).abs() < 1e-15);
}

#[test]
fn decay_stays_in_unit_interval() {
    for a in [-30.0, -1.0, 0.0, 2.0, 40.0] {
        for dt in [0.0, 1e-3, 0.5, 10.0] {
            let v = discretized_decay(dt, a);
            assert!(v > 0.0 && v <= 1.0, "{v}");
        }
    }
}

#[test]
fn ds_heads_project_to_one_channel() {
    let (net, mut store) = GeoMamba::new::<f64>(ModelConfig::default(), 13).unwrap();
    let head = net.ds.head(Modality::Opt, false).clone();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let x = rand_tensor(&mut rng, &[1, 16, 4, 4]);
    store.get_mut(head.w).value.data_mut().iter_mut().for_each(|v| *v = 0.0);
    let mut f = Fwd::new(&store, false);
    let xv = f.g.constant(x.clone());
    let y = head.forward(&mut f, xv).unwrap();
    let probs: Vec<f64> = f.g.data(y).iter().map(|&z| crate::tensor::sigmoid(z)).collect();
    assert!(probs.iter().all(|&p| p == 0.5));
    // Unit centre tap on channel 5 plus a bias.
    let k = ModelConfig::default().ds_kernel;
    store.get_mut(head.w).value.data_mut()[5 * k * k + k * k / 2] = 1.0;
    store.get_mut(head.b.unwrap()).value.data_mut()[0] = 0.25;
    let mut f = Fwd::new(&store, false);
    let xv = f.g.constant(x.clone());
    let y = head.forward(&mut f, xv).unwrap();
    for i in 0..16 {
        assert_eq!(f.g.data(y)[i], x.data()[5 * 16 + i] + 0.25);
    }
}

#[test]
fn batch_permutation_permutes_outputs() {
    let (net, store) = GeoMamba::new::<f64>(ModelConfig::default(), 15).unwrap();
    let imgs = images(16, 3, 3, 64);
    let per = 3 * 64 * 64;
    let order = [2, 0, 1];
    let permuted: Vec<f64> = order
        .iter()
        .flat_map(|&i| imgs.data()[i * per..(i + 1) * per].to_vec())
        .collect();
    let a = net.embed(&store, imgs, Modality::Opt, None).unwrap();
    let b = net
        .embed(&store, Tensor::new(vec![3, 3, 64, 64], permuted).unwrap(), Modality::Opt, None)
        .unwrap();
    for (k, &i) in order.iter().enumerate() {
        for j in 0..1024 {
            assert!((b.data()[k * 1024 + j] - a.data()[i * 1024 + j]).abs() <= 1e-12);
        }
    }
}

#[test]
fn parameter_names_are_unique_and_stable() {
    let (_, s1) = GeoMamba::new::<f64>(ModelConfig::default(), 1).unwrap();
    let (_, s2) = GeoMamba::new::<f64>(ModelConfig::default(), 2).unwrap();
    let n1: Vec<&str> = s1.params().iter().map(|p| p.name.as_str()).collect();
    let n2: Vec<&str> = s2.params().iter().map(|p| p.name.as_str()).collect();
    assert_eq!(n1, n2);
    let mut sorted = n1.clone();
    sorted.sort();
    sorted.dedup();
    assert_eq!(sorted.len(), n1.len());
    assert!(n1.contains(&"stage2.block0.ssm.a"));
    assert!(n1.contains(&"gfi1.inject.attn.o.w"));
    // Same seed, same values.
    let (_, s3) = GeoMamba::new::<f64>(ModelConfig::default(), 1).unwrap();
    assert_eq!(s1, s3);
}

#[test]
fn frozen_aux_enters_as_constant() {
    let cfg = ModelConfig {
        freeze_aux: true,
        ..ModelConfig::default()
    };
    let (net, store) = GeoMamba::new::<f64>(cfg, 3).unwrap();
    let mut f = Fwd::new(&store, true);
    let out = net.forward(&mut f, &batch(2, 2, 4)).unwrap();
    let loss = f.g.mean(out.embedding);
    f.g.backward(loss).unwrap();
    let grads = f.grads();
    assert!(grads.iter().all(|(id, _)| !store.get(*id).name.starts_with("aux.")));
    assert!(grads.iter().any(|(id, _)| store.get(*id).name.starts_with("gfi1.")));
}

#[test]
fn f32_forward_runs() {
    let (net, store) = GeoMamba::new::<f32>(ModelConfig::default(), 3).unwrap();
    let x = Tensor::<f32>::from_fn(&[1, 3, 64, 64], |i| ((i % 7) as f32) * 0.1);
    let e = net.embed(&store, x, Modality::Opt, None).unwrap();
    assert!(e.all_finite());
}
