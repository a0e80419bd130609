//! Finite-difference verification suite over every tensor op and loss.
//!
//! Shared by the unit tests and the `gradcheck` CLI command.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::losses::{
    focal_loss, gcc_loss, identity_loss, total_loss, triplet_loss, LossWeights, MaskTerm,
    ModalityMasks,
};
use crate::model::{BlockKind, Fwd, GeoMamba, ModelConfig, ModelError, ModelInput, Pairing, ParamStore, StageConfig};
use crate::tensor::{gradcheck_many, inject_backward_fault, Graph, Result, Tensor, TensorError, UnaryKind, Var};

/// Tolerance for single ops and losses.
pub const OP_TOL: f64 = 1e-4;
/// Tolerance for the end-to-end model check.
pub const MODEL_TOL: f64 = 1e-3;
/// Denominator floor of the end-to-end relative error. Biases feeding a
/// normalization or a softmax key have exactly zero gradient, where the
/// central difference returns rounding noise of about 1e-10.
pub const MODEL_DENOM_FLOOR: f64 = 1e-6;

/// Step used for every central difference.
pub const GRADCHECK_EPS: f64 = 1e-5;

type CaseFn = Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var>>;

struct Case {
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: CaseFn,
}

fn rand_t(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Values bounded away from zero, for ops with a kink there.
fn rand_off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.1..1.0);
        if rng.random_bool(0.5) {
            m
        } else {
            -m
        }
    })
}

/// Reduces `y` with fixed random positive weights.
pub fn weighted_sum(g: &mut Graph<f64>, y: Var, seed: u64) -> Result<Var> {
    if g.value(y).numel() == 1 {
        return Ok(g.sum(y));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = g.shape(y).to_vec();
    let w = g.constant(Tensor::from_fn(&shape, |_| rng.random_range(0.5..1.5)));
    let p = g.mul(y, w)?;
    Ok(g.sum(p))
}

fn case(
    name: &'static str,
    inputs: Vec<Tensor<f64>>,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'static,
) -> Case {
    Case {
        name,
        inputs,
        f: Box::new(move |g, v| {
            let y = f(g, v)?;
            weighted_sum(g, y, 0xC0FFEE)
        }),
    }
}

fn op_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut r;
    let mut cases = vec![
        case("matmul", vec![rand_t(r, &[3, 4]), rand_t(r, &[4, 2])], |g, v| {
            g.matmul(v[0], v[1])
        }),
        case(
            "matmul_batched",
            vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[2, 4, 2])],
            |g, v| g.matmul(v[0], v[1]),
        ),
        case(
            "conv2d",
            vec![rand_t(r, &[1, 2, 5, 5]), rand_t(r, &[3, 2, 3, 3]), rand_t(r, &[3])],
            |g, v| g.conv2d(v[0], v[1], Some(v[2]), 1, 1, 1),
        ),
        case(
            "conv2d_strided_grouped",
            vec![rand_t(r, &[2, 4, 6, 6]), rand_t(r, &[4, 2, 3, 3])],
            |g, v| g.conv2d(v[0], v[1], None, 2, 1, 2),
        ),
        case("add", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |g, v| {
            g.add(v[0], v[1])
        }),
        case("sub", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |g, v| {
            g.sub(v[0], v[1])
        }),
        case("mul", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 3])], |g, v| {
            g.mul(v[0], v[1])
        }),
        case("add_bias", vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[3])], |g, v| {
            g.add_bias(v[0], v[1], 1)
        }),
        case("mul_bias", vec![rand_t(r, &[2, 3, 4]), rand_t(r, &[4])], |g, v| {
            g.mul_bias(v[0], v[1], 2)
        }),
        case("scale", vec![rand_t(r, &[5])], |g, v| Ok(g.scale(v[0], 1.7))),
        case("add_scalar", vec![rand_t(r, &[5])], |g, v| Ok(g.add_scalar(v[0], -0.3))),
        case("relu", vec![rand_off_kink(r, &[8])], |g, v| Ok(g.relu(v[0]))),
    ];
    for (name, kind) in [
        ("gelu", UnaryKind::Gelu),
        ("sigmoid", UnaryKind::Sigmoid),
        ("silu", UnaryKind::Silu),
        ("softplus", UnaryKind::Softplus),
        ("exp", UnaryKind::Exp),
        ("tanh", UnaryKind::Tanh),
        ("square", UnaryKind::Square),
        ("neg", UnaryKind::Neg),
    ] {
        cases.push(case(name, vec![rand_t(r, &[8])], move |g, v| Ok(g.unary(v[0], kind))));
    }
    cases.extend([
        case("softmax", vec![rand_t(r, &[3, 5])], |g, v| g.softmax(v[0])),
        case(
            "layer_norm",
            vec![rand_t(r, &[3, 5]), rand_t(r, &[5]), rand_t(r, &[5])],
            |g, v| g.layer_norm(v[0], Some((v[1], v[2])), 1e-5),
        ),
        case(
            "batch_norm_train",
            vec![rand_t(r, &[3, 2, 2, 2]), rand_t(r, &[2]), rand_t(r, &[2])],
            |g, v| Ok(g.batch_norm(v[0], v[1], v[2], None, 1e-5)?.0),
        ),
        case(
            "batch_norm_eval",
            vec![rand_t(r, &[3, 2, 2, 2]), rand_t(r, &[2]), rand_t(r, &[2])],
            |g, v| Ok(g.batch_norm(v[0], v[1], v[2], Some((&[0.1, -0.2], &[0.5, 2.0])), 1e-5)?.0),
        ),
        case("avg_pool2d", vec![rand_t(r, &[1, 2, 4, 4])], |g, v| g.avg_pool2d(v[0], 2, 2)),
        case("max_pool2d", vec![rand_t(r, &[1, 2, 4, 4])], |g, v| g.max_pool2d(v[0], 2, 2)),
        case("global_avg_pool", vec![rand_t(r, &[2, 3, 2, 2])], |g, v| {
            g.global_avg_pool(v[0])
        }),
        case("reshape", vec![rand_t(r, &[2, 6])], |g, v| g.reshape(v[0], &[3, 4])),
        case("permute", vec![rand_t(r, &[2, 3, 4])], |g, v| g.permute(v[0], &[2, 0, 1])),
        case("transpose", vec![rand_t(r, &[3, 4])], |g, v| g.transpose(v[0])),
        case("concat", vec![rand_t(r, &[2, 3]), rand_t(r, &[2, 2])], |g, v| {
            g.concat(&[v[0], v[1]], 1)
        }),
        case("slice", vec![rand_t(r, &[3, 5])], |g, v| g.slice(v[0], 1, 1, 4)),
        case("flip", vec![rand_t(r, &[2, 4, 3])], |g, v| g.flip(v[0], 1)),
        case("sum", vec![rand_t(r, &[4])], |g, v| Ok(g.sum(v[0]))),
        case("mean", vec![rand_t(r, &[4])], |g, v| Ok(g.mean(v[0]))),
        case("gather", vec![rand_t(r, &[6])], |g, v| g.gather(v[0], &[4, 1, 1, 0])),
        case("cross_entropy_logits", vec![rand_t(r, &[4, 3])], |g, v| {
            g.cross_entropy_logits(v[0], &[0, 2, 1, 2], 0.1)
        }),
        case("focal_loss", vec![rand_t(r, &[2, 4])], |g, v| {
            g.focal_loss(v[0], &[true, false, false, true, false, false, true, false], 0.25, 2.0)
        }),
        case("focal_loss_gamma0", vec![rand_t(r, &[6])], |g, v| {
            g.focal_loss(v[0], &[true, false, true, false, false, true], 0.5, 0.0)
        }),
        case("l2_distance_matrix", vec![rand_t(r, &[4, 3])], |g, v| {
            g.l2_distance_matrix(v[0])
        }),
    ]);
    for (name, reverse) in [("selective_scan", false), ("selective_scan_reverse", true)] {
        let (b, l, c, s) = (2, 5, 3, 2);
        let delta = Tensor::from_fn(&[b, l, c], |_| r.random_range(0.1..0.9));
        let a = Tensor::from_fn(&[c, s], |_| r.random_range(-1.5..-0.1));
        cases.push(case(
            name,
            vec![
                rand_t(r, &[b, l, c]),
                delta,
                a,
                rand_t(r, &[b, l, s]),
                rand_t(r, &[b, l, s]),
                rand_t(r, &[c]),
            ],
            move |g, v| g.selective_scan(v[0], v[1], v[2], v[3], v[4], v[5], reverse),
        ));
    }
    cases
}

fn random_mask(rng: &mut ChaCha8Rng, n: usize) -> Vec<bool> {
    (0..n).map(|_| rng.random_bool(0.3)).collect()
}

fn loss_cases(seed: u64) -> Vec<Case> {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x1055);
    let r = &mut r;
    let w = LossWeights::default();
    let labels = [0, 0, 1, 1, 2, 2];
    let mut cases = vec![
        case("identity_loss", vec![rand_t(r, &[6, 4])], move |g, v| {
            identity_loss(g, v[0], &labels, 0.1)
        }),
        case("triplet_loss", vec![rand_t(r, &[6, 4])], move |g, v| {
            Ok(triplet_loss(g, v[0], &labels, 0.3)?.loss)
        }),
    ];
    let target = random_mask(r, 2 * 4 * 4);
    cases.push(case(
        "ds_head_focal",
        vec![rand_t(r, &[2, 3, 4, 4]), rand_t(r, &[1, 3, 1, 1]), rand_t(r, &[1])],
        move |g, v| {
            let m = g.conv2d(v[0], v[1], Some(v[2]), 1, 0, 1)?;
            focal_loss(g, m, &target, 0.25, 2.0)
        },
    ));
    let targets: Vec<Vec<bool>> = [8, 32, 8, 32].iter().map(|&n| random_mask(r, n)).collect();
    let wg = w.clone();
    let gcc_inputs = vec![
        rand_t(r, &[2, 1, 2, 2]),
        rand_t(r, &[2, 1, 4, 4]),
        rand_t(r, &[2, 1, 2, 2]),
        rand_t(r, &[2, 1, 4, 4]),
    ];
    let t2 = targets.clone();
    cases.push(case("gcc_loss", gcc_inputs, move |g, v| {
        let mm = |d: usize, s: usize| ModalityMasks {
            deep: MaskTerm {
                logits: v[d],
                target: t2[d].clone(),
            },
            shallow: MaskTerm {
                logits: v[s],
                target: t2[s].clone(),
            },
        };
        Ok(gcc_loss(g, Some(&mm(0, 1)), Some(&mm(2, 3)), &wg)?.loss)
    }));
    let wt = w.clone();
    cases.push(case(
        "total_loss",
        vec![rand_t(r, &[6, 4]), rand_t(r, &[4, 3]), rand_t(r, &[6, 1, 2, 2])],
        move |g, v| {
            let logits = g.matmul(v[0], v[1])?;
            let id = identity_loss(g, logits, &labels, 0.1)?;
            let tri = triplet_loss(g, v[0], &labels, 0.3)?.loss;
            let mask = MaskTerm {
                logits: v[2],
                target: targets[1][..24].to_vec(),
            };
            let gcc = gcc_loss(
                g,
                Some(&ModalityMasks {
                    deep: mask.clone(),
                    shallow: mask,
                }),
                None,
                &wt,
            )?
            .loss;
            total_loss(g, id, tri, gcc, &wt)
        },
    ));
    cases
}

/// Max relative gradcheck error for every registered op.
pub fn op_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    run_cases(op_cases(seed))
}

/// Max relative gradcheck error for every loss, including the composite.
pub fn loss_gradchecks(seed: u64) -> Result<Vec<(String, f64)>> {
    run_cases(loss_cases(seed))
}

fn run_cases(cases: Vec<Case>) -> Result<Vec<(String, f64)>> {
    cases
        .into_iter()
        .map(|c| {
            let report = gradcheck_many(&c.f, &c.inputs, GRADCHECK_EPS, None)?;
            Ok((c.name.to_string(), report.max_rel_error))
        })
        .collect()
}

/// Smallest configuration exercising every block type, injection and the
/// deep-supervision heads.
pub fn micro_model_config() -> ModelConfig {
    let stage = |channels, stride, kind, gfi| StageConfig {
        channels,
        stride,
        kind,
        depth: 1,
        gfi,
    };
    ModelConfig {
        image_size: 32,
        stages: vec![
            stage(4, 4, BlockKind::Conv, false),
            stage(4, 2, BlockKind::Conv, true),
            stage(4, 2, BlockKind::SsmMixer, true),
            stage(4, 2, BlockKind::SsmMixer, false),
        ],
        heads: 2,
        mlp_ratio: 2,
        state_dim: 2,
        embed_dim: 6,
        num_classes: 2,
        ..ModelConfig::default()
    }
}

fn model_err(e: ModelError) -> TensorError {
    match e {
        ModelError::Tensor(t) => t,
        other => TensorError::invalid("model", other.to_string()),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelGradcheck {
    pub max_rel_error: f64,
    /// Worst error per parameter group (name up to the first dot).
    pub per_group: Vec<(String, f64)>,
    pub checked: usize,
}

struct MicroBatch {
    input: ModelInput<f64>,
    labels: Vec<usize>,
    masks: Vec<[Vec<bool>; 2]>,
}

fn micro_batch(cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> MicroBatch {
    let s = cfg.image_size;
    let img = |rng: &mut ChaCha8Rng| Tensor::from_fn(&[1, 3, s, s], |_| rng.random_range(-1.0..1.0));
    let opt = img(rng);
    let sar = img(rng);
    let geo = Tensor::from_fn(&[1, 2, s, s], |i| {
        if i < s * s {
            rng.random_range(-1.0..1.0)
        } else if rng.random_bool(0.1) {
            1.0
        } else {
            0.0
        }
    });
    let deep = cfg.stage_side(cfg.stages.len() - 1);
    let shallow = cfg.stage_side(0);
    let masks = (0..2)
        .map(|_| [random_mask(rng, deep * deep), random_mask(rng, shallow * shallow)])
        .collect();
    MicroBatch {
        input: ModelInput {
            opt: Some(opt),
            sar: Some(sar),
            sar_geo: Some(geo),
            pairing: Pairing::Partners {
                opt_partner: vec![0],
                sar_partner: vec![0],
            },
        },
        labels: vec![1, 1],
        masks,
    }
}

fn micro_loss(model: &GeoMamba, f: &mut Fwd<f64>, b: &MicroBatch, w: &LossWeights) -> Result<Var> {
    let out = model.forward(f, &b.input).map_err(model_err)?;
    let id = identity_loss(&mut f.g, out.logits, &b.labels, w.label_smoothing)?;
    let tri = triplet_loss(&mut f.g, out.embedding, &b.labels, w.margin)?.loss;
    let mm = |deep: Option<Var>, shallow: Option<Var>, m: &[Vec<bool>; 2]| ModalityMasks {
        deep: MaskTerm {
            logits: deep.expect("deep map"),
            target: m[0].clone(),
        },
        shallow: MaskTerm {
            logits: shallow.expect("shallow map"),
            target: m[1].clone(),
        },
    };
    let om = mm(out.ds.opt_deep, out.ds.opt_shallow, &b.masks[0]);
    let sm = mm(out.ds.sar_deep, out.ds.sar_shallow, &b.masks[1]);
    let gcc = gcc_loss(&mut f.g, Some(&om), Some(&sm), w)?.loss;
    total_loss(&mut f.g, id, tri, gcc, w)
}

/// Total training loss of the micro model on a one-optical, one-SAR batch
/// against central differences, sampling `per_param` coordinates of every
/// parameter tensor. Zero-initialized projections are re-drawn first so
/// that every path carries gradient.
pub fn model_gradcheck(seed: u64, per_param: usize) -> Result<ModelGradcheck> {
    let cfg = micro_model_config();
    let (model, mut store) = GeoMamba::new::<f64>(cfg.clone(), seed).map_err(model_err)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xE2E);
    for p in store.params().iter().map(|p| p.name.clone()).collect::<Vec<_>>() {
        let id = store.find(&p).expect("listed");
        let v = &mut store.get_mut(id).value;
        if v.data().iter().all(|&x| x == 0.0) {
            for x in v.data_mut() {
                *x = rng.random_range(-0.3..0.3);
            }
        }
    }
    let batch = micro_batch(&cfg, &mut rng);
    let w = LossWeights::default();
    let loss_at = |store: &ParamStore<f64>| -> Result<f64> {
        let mut f = Fwd::new(store, true);
        let l = micro_loss(&model, &mut f, &batch, &w)?;
        Ok(f.g.value(l).item())
    };
    let analytic = {
        let mut f = Fwd::new(&store, true);
        let l = micro_loss(&model, &mut f, &batch, &w)?;
        f.g.backward(l)?;
        f.grads()
    };
    let mut groups: Vec<(String, f64)> = Vec::new();
    let mut checked = 0;
    for (id, grad) in &analytic {
        let name = store.get(*id).name.clone();
        let group = name.split('.').next().unwrap_or(&name).to_string();
        let n = grad.len();
        let mut worst = 0.0f64;
        for k in 0..per_param.min(n) {
            let j = k * n / per_param.min(n);
            let orig = store.get(*id).value.data()[j];
            store.get_mut(*id).value.data_mut()[j] = orig + GRADCHECK_EPS;
            let plus = loss_at(&store)?;
            store.get_mut(*id).value.data_mut()[j] = orig - GRADCHECK_EPS;
            let minus = loss_at(&store)?;
            store.get_mut(*id).value.data_mut()[j] = orig;
            let numeric = (plus - minus) / (2.0 * GRADCHECK_EPS);
            let a = grad[j];
            worst = worst.max((a - numeric).abs() / (a.abs() + numeric.abs()).max(MODEL_DENOM_FLOOR));
            checked += 1;
        }
        match groups.iter_mut().find(|(g, _)| *g == group) {
            Some((_, e)) => *e = e.max(worst),
            None => groups.push((group, worst)),
        }
    }
    Ok(ModelGradcheck {
        max_rel_error: groups.iter().map(|(_, e)| *e).fold(0.0, f64::max),
        per_group: groups,
        checked,
    })
}

/// Gradcheck of `gelu` with its backward rule deliberately doubled; the
/// returned error must exceed [`OP_TOL`].
pub fn corrupted_backward_error(seed: u64) -> Result<f64> {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    let x = rand_t(&mut r, &[3, 4]);
    let f = |g: &mut Graph<f64>, v: &[Var]| {
        let y = g.gelu(v[0]);
        weighted_sum(g, y, 1)
    };
    inject_backward_fault(Some(UnaryKind::Gelu));
    let report = gradcheck_many(f, std::slice::from_ref(&x), GRADCHECK_EPS, None);
    inject_backward_fault(None);
    Ok(report?.max_rel_error)
}

/// One line of the verification report.
#[derive(Debug, Clone, PartialEq)]
pub struct CheckLine {
    pub name: String,
    pub max_rel_error: f64,
    pub tolerance: f64,
}

impl CheckLine {
    pub fn passed(&self) -> bool {
        self.max_rel_error < self.tolerance
    }
}

/// Ops, losses and the end-to-end model check, in that order.
pub fn full_report(seed: u64) -> Result<Vec<CheckLine>> {
    let line = |prefix: &str, (name, e): (String, f64), tol| CheckLine {
        name: format!("{prefix}{name}"),
        max_rel_error: e,
        tolerance: tol,
    };
    let mut out: Vec<CheckLine> = op_gradchecks(seed)?
        .into_iter()
        .map(|c| line("op:", c, OP_TOL))
        .collect();
    out.extend(loss_gradchecks(seed)?.into_iter().map(|c| line("loss:", c, OP_TOL)));
    let m = model_gradcheck(seed, 3)?;
    out.extend(m.per_group.into_iter().map(|c| line("model:", c, MODEL_TOL)));
    Ok(out)
}
