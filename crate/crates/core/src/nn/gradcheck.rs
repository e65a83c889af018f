//! Central finite-difference oracle for every differentiable operation.
//!
//! Each check builds a small random graph in `f64`, reduces its output to a
//! scalar with random weights, and compares the tape's gradients (with
//! respect to the inputs and to every trainable parameter) against
//! `(f(x + h) - f(x - h)) / 2h`. The oracle only ever evaluates the forward
//! pass, so it is independent of the backward code it checks.

use alloc::boxed::Box;
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use num_traits::Float;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{
    ActKind, BatchNorm, ConvSpec, MbConv, MbConvSpec, Mode, ParamKind, ParamStore, PoolKind,
    Tape, Tensor, Var,
};
use crate::Result;

pub const STEP: f64 = 1e-4;

/// Outcome for one operation over all of its random cases.
#[derive(Clone, Debug)]
pub struct OpCheck {
    pub op: &'static str,
    pub cases: usize,
    /// Worst `|analytic - numeric|₂ / max(|numeric|₂, |analytic|₂)` over cases and tensors.
    pub max_rel_err: f64,
    pub shapes: Vec<String>,
}

type Build = Box<dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var>>;

struct Case {
    inputs: Vec<Tensor<f64>>,
    store: ParamStore<f64>,
    mode: Mode,
    build: Build,
}

/// Loss used by both routes: random projection of the output, fixed per case.
fn evaluate(case: &Case, inputs: &[Tensor<f64>], store: &ParamStore<f64>, weights: &mut Option<Vec<f64>>, want_grads: bool)
    -> Result<(f64, Option<(Vec<Tensor<f64>>, Vec<Tensor<f64>>)>)> {
    let mut tape = Tape::with_mode(case.mode, ChaCha8Rng::seed_from_u64(0x5eed));
    let vars: Vec<Var> = inputs.iter().map(|t| tape.input_with_grad(t.clone())).collect();
    let out = (case.build)(&mut tape, store, &vars)?;
    let n = tape.value(out).len();
    let w = weights.get_or_insert_with(|| {
        let mut r = ChaCha8Rng::seed_from_u64(n as u64 ^ 0xabcdef);
        (0..n).map(|_| r.gen_range(-1.0..1.0)).collect()
    });
    let loss = tape.weighted_sum(out, w.clone())?;
    let value = tape.value(loss).data()[0];
    if !want_grads {
        return Ok((value, None));
    }
    let grads = tape.backward(loss)?;
    let gin = vars
        .iter()
        .zip(inputs)
        .map(|(&v, t)| grads.wrt(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape())))
        .collect();
    Ok((value, Some((gin, grads.for_params(store)))))
}

fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>();
    let denom = Float::sqrt(na.max(nn));
    if denom < 1e-12 {
        Float::sqrt(diff)
    } else {
        Float::sqrt(diff) / denom
    }
}

fn check_case(case: &Case) -> Result<f64> {
    let mut weights = None;
    let (_, grads) = evaluate(case, &case.inputs, &case.store, &mut weights, true)?;
    let (gin, gparams) = grads.expect("requested");
    let mut worst: f64 = 0.0;
    for (i, input) in case.inputs.iter().enumerate() {
        let mut numeric = vec![0.0; input.len()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.inputs.clone();
            plus[i].data_mut()[j] += STEP;
            let mut minus = case.inputs.clone();
            minus[i].data_mut()[j] -= STEP;
            let (fp, _) = evaluate(case, &plus, &case.store, &mut weights, false)?;
            let (fm, _) = evaluate(case, &minus, &case.store, &mut weights, false)?;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(gin[i].data(), &numeric));
    }
    for id in case.store.ids() {
        if case.store.kind(id) != ParamKind::Trainable {
            continue;
        }
        let len = case.store.get(id).len();
        let mut numeric = vec![0.0; len];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = case.store.clone();
            plus.get_mut(id).data_mut()[j] += STEP;
            let mut minus = case.store.clone();
            minus.get_mut(id).data_mut()[j] -= STEP;
            let (fp, _) = evaluate(case, &case.inputs, &plus, &mut weights, false)?;
            let (fm, _) = evaluate(case, &case.inputs, &minus, &mut weights, false)?;
            *slot = (fp - fm) / (2.0 * STEP);
        }
        worst = worst.max(rel_err(gparams[id.index()].data(), &numeric));
    }
    Ok(worst)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("nonempty")
}

/// Values at least `10 * STEP` away from zero (keeps ReLU off its kink).
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    uniform(rng, shape).map(|v| if v.abs() < 0.05 { v.signum() * 0.05 + v } else { v })
}

/// Distinct values spaced far beyond `STEP` (keeps max pooling off ties).
fn spaced(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(rng);
    let data = idx
        .into_iter()
        .map(|i| (i as f64 - n as f64 / 2.0) * 0.1 + rng.gen_range(0.0..0.01))
        .collect();
    Tensor::from_vec(shape, data).expect("nonempty")
}

fn describe(inputs: &[Tensor<f64>], store: &ParamStore<f64>) -> String {
    let mut s = String::new();
    for t in inputs {
        s.push_str(&format!("{:?}", t.shape()));
    }
    if !store.is_empty() {
        s.push_str(&format!(" +{} params", store.trainable_count()));
    }
    s
}

fn conv_case(rng: &mut ChaCha8Rng, rank: usize, depthwise: bool) -> Case {
    let cin = rng.gen_range(1..=3);
    let cout = if depthwise { cin } else { rng.gen_range(1..=3) };
    let k = rng.gen_range(1..=3);
    let stride = rng.gen_range(1..=2);
    let mut spec = if rank == 3 {
        ConvSpec::cube(cin, cout, k, stride)
    } else {
        ConvSpec::square(cin, cout, k, stride)
    }
    .with_padding(rng.gen_range(0..=1))
    .with_bias(rng.gen_bool(0.5));
    if depthwise {
        spec = spec.depthwise();
    }
    let batch = rng.gen_range(1..=2);
    let mut shape = vec![batch, cin];
    for _ in 0..rank {
        shape.push(rng.gen_range(k.max(2)..=4));
    }
    let mut inputs = vec![uniform(rng, &shape), uniform(rng, &spec.weight_shape())];
    if spec.bias {
        inputs.push(uniform(rng, &[cout]));
    }
    Case {
        inputs,
        store: ParamStore::new(),
        mode: Mode::Eval,
        build: Box::new(move |t, _, v| t.conv(v[0], v[1], v.get(2).copied(), &spec)),
    }
}

fn bn_case(rng: &mut ChaCha8Rng, mode: Mode) -> Case {
    let ch = rng.gen_range(1..=3);
    let shape = [rng.gen_range(2..=3), ch, rng.gen_range(1..=3), rng.gen_range(2..=3)];
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(1);
    let bn = BatchNorm::new(&mut store, &mut r, "bn", ch).expect("valid");
    // non-trivial running statistics for eval mode
    store.set(bn.running_mean, uniform(rng, &[ch])).expect("shape");
    store
        .set(bn.running_var, uniform(rng, &[ch]).map(|v| v.abs() + 0.5))
        .expect("shape");
    let (rm, rv) = (bn.running_mean, bn.running_var);
    let (gamma, beta) = (bn.gamma, bn.beta);
    store.set(gamma, uniform(rng, &[ch])).expect("shape");
    store.set(beta, uniform(rng, &[ch])).expect("shape");
    Case {
        inputs: vec![uniform(rng, &shape)],
        store,
        mode,
        build: Box::new(move |t, s, v| {
            let g = t.param(s, gamma);
            let b = t.param(s, beta);
            t.batch_norm(v[0], g, b, s, rm, rv)
        }),
    }
}

fn act_case(rng: &mut ChaCha8Rng, kind: ActKind) -> Case {
    let shape = [rng.gen_range(1..=3), rng.gen_range(1..=4), rng.gen_range(1..=4)];
    Case {
        inputs: vec![away_from_zero(rng, &shape).map(|v| v * 3.0)],
        store: ParamStore::new(),
        mode: Mode::Eval,
        build: Box::new(move |t, _, v| Ok(t.activation(kind, v[0]))),
    }
}

fn se_case(rng: &mut ChaCha8Rng) -> Case {
    let c = rng.gen_range(2..=4);
    let r = rng.gen_range(1..=2);
    let shape = [rng.gen_range(1..=2), c, rng.gen_range(1..=3), rng.gen_range(1..=3), 2];
    let inputs = vec![
        uniform(rng, &shape),
        uniform(rng, &[c, r]),
        uniform(rng, &[r]),
        uniform(rng, &[r, c]),
        uniform(rng, &[c]),
    ];
    Case {
        inputs,
        store: ParamStore::new(),
        mode: Mode::Eval,
        build: Box::new(|t, _, v| {
            let p = t.global_pool(PoolKind::Avg, v[0])?;
            let h = t.dense(p, v[1], v[2])?;
            let h = t.activation(ActKind::Silu, h);
            let e = t.dense(h, v[3], v[4])?;
            let gate = t.activation(ActKind::Sigmoid, e);
            t.channel_scale(v[0], gate)
        }),
    }
}

fn mbconv_case(rng: &mut ChaCha8Rng, skip: bool) -> Case {
    let a = rng.gen_range(1..=2);
    let (b, exp, stride) = if skip { (a, 1, 1) } else { (rng.gen_range(1..=2), 6, rng.gen_range(1..=2)) };
    let spec = MbConvSpec::new(a, b, exp, 3, stride);
    let mut store = ParamStore::new();
    let mut r = ChaCha8Rng::seed_from_u64(rng.gen());
    let block = MbConv::new(&mut store, &mut r, "m", spec, 0.5).expect("valid");
    // BN scales away from 1 so every path carries signal
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        if store.kind(id) == ParamKind::Trainable && store.name(id).ends_with("gamma") {
            let shape = store.get(id).shape().to_vec();
            store.set(id, uniform(rng, &shape).map(|v| v + 1.5)).expect("shape");
        }
    }
    let shape = [2, a, 3, rng.gen_range(3..=4), 4];
    Case {
        inputs: vec![uniform(rng, &shape)],
        store,
        mode: Mode::Train,
        build: Box::new(move |t, s, v| block.forward(t, s, v[0])),
    }
}

fn simple(inputs: Vec<Tensor<f64>>, mode: Mode, build: Build) -> Case {
    Case {
        inputs,
        store: ParamStore::new(),
        mode,
        build,
    }
}

fn make_case(op: &'static str, rng: &mut ChaCha8Rng) -> Case {
    let b = rng.gen_range(1..=3);
    let c = rng.gen_range(1..=3);
    let h = rng.gen_range(1..=4);
    let w = rng.gen_range(2..=4);
    match op {
        "conv2d" => conv_case(rng, 2, false),
        "conv3d" => conv_case(rng, 3, false),
        "conv3d_depthwise" => conv_case(rng, 3, true),
        "batch_norm_train" => bn_case(rng, Mode::Train),
        "batch_norm_eval" => bn_case(rng, Mode::Eval),
        "silu" => act_case(rng, ActKind::Silu),
        "relu" => act_case(rng, ActKind::Relu),
        "sigmoid" => act_case(rng, ActKind::Sigmoid),
        "squeeze_excitation" => se_case(rng),
        "mbconv_skip" => mbconv_case(rng, true),
        "mbconv_expand" => mbconv_case(rng, false),
        "drop_sample" => simple(
            vec![uniform(rng, &[b + 3, c, w])],
            Mode::Train,
            Box::new(|t, _, v| t.drop_sample(v[0], 0.5)),
        ),
        "dropout" => simple(
            vec![uniform(rng, &[b, c, h, w])],
            Mode::Train,
            Box::new(|t, _, v| t.dropout(v[0], 0.2)),
        ),
        "global_max_pool" => simple(
            vec![spaced(rng, &[b, c, h, w])],
            Mode::Eval,
            Box::new(|t, _, v| t.global_pool(PoolKind::Max, v[0])),
        ),
        "global_avg_pool" => simple(
            vec![uniform(rng, &[b, c, h, w, 2])],
            Mode::Eval,
            Box::new(|t, _, v| t.global_pool(PoolKind::Avg, v[0])),
        ),
        "dense" => {
            let (f, g) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
            simple(
                vec![uniform(rng, &[b, f]), uniform(rng, &[f, g]), uniform(rng, &[g])],
                Mode::Eval,
                Box::new(|t, _, v| t.dense(v[0], v[1], v[2])),
            )
        }
        "softmax_cross_entropy" => {
            let labels: Vec<usize> = (0..b).map(|_| rng.gen_range(0..2)).collect();
            simple(
                vec![uniform(rng, &[b, 2]).map(|v| v * 4.0)],
                Mode::Eval,
                Box::new(move |t, _, v| Ok(t.softmax_cross_entropy(v[0], &labels)?.0)),
            )
        }
        "add" => simple(
            vec![uniform(rng, &[b, c, w]), uniform(rng, &[b, c, w])],
            Mode::Eval,
            Box::new(|t, _, v| t.add(v[0], v[1])),
        ),
        "channel_scale" => simple(
            vec![uniform(rng, &[b, c, h, w]), uniform(rng, &[b, c])],
            Mode::Eval,
            Box::new(|t, _, v| t.channel_scale(v[0], v[1])),
        ),
        "concat" => {
            let c2 = rng.gen_range(1..=3);
            simple(
                vec![uniform(rng, &[b, c, h, w]), uniform(rng, &[b, c2, h, w])],
                Mode::Eval,
                Box::new(|t, _, v| t.concat(&[v[0], v[1]])),
            )
        }
        "avg_pool" => simple(
            vec![uniform(rng, &[b, c, h + 1, w])],
            Mode::Eval,
            Box::new(|t, _, v| t.avg_pool(v[0], 3)),
        ),
        "group_mean" => simple(
            vec![uniform(rng, &[3 * b, c, w])],
            Mode::Eval,
            Box::new(|t, _, v| t.group_mean(v[0], 3)),
        ),
        "mean_of" => simple(
            vec![uniform(rng, &[b, c, w]), uniform(rng, &[b, c, w]), uniform(rng, &[b, c, w])],
            Mode::Eval,
            Box::new(|t, _, v| t.mean_of(&[v[0], v[1], v[2]])),
        ),
        "select_channel" => {
            let ch = rng.gen_range(0..3);
            simple(
                vec![uniform(rng, &[b, 3, h, w])],
                Mode::Eval,
                Box::new(move |t, _, v| t.select_channel(v[0], ch)),
            )
        }
        "reshape" => simple(
            vec![uniform(rng, &[b, c, h, w])],
            Mode::Eval,
            Box::new(move |t, _, v| t.reshape(v[0], &[b * c, h * w])),
        ),
        other => unreachable!("no gradient case for {other}"),
    }
}

/// Every operation the tape can differentiate.
pub const OPS: &[&str] = &[
    "conv2d",
    "conv3d",
    "conv3d_depthwise",
    "batch_norm_train",
    "batch_norm_eval",
    "silu",
    "relu",
    "sigmoid",
    "squeeze_excitation",
    "mbconv_skip",
    "mbconv_expand",
    "drop_sample",
    "dropout",
    "global_max_pool",
    "global_avg_pool",
    "dense",
    "softmax_cross_entropy",
    "add",
    "channel_scale",
    "concat",
    "avg_pool",
    "group_mean",
    "mean_of",
    "select_channel",
    "reshape",
];

/// Runs `cases` random shapes for `op`.
pub fn check_op(op: &'static str, cases: usize, seed: u64) -> Result<OpCheck> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut shapes = Vec::new();
    for _ in 0..cases {
        let case = make_case(op, &mut rng);
        shapes.push(describe(&case.inputs, &case.store));
        worst = worst.max(check_case(&case)?);
    }
    Ok(OpCheck {
        op,
        cases,
        max_rel_err: worst,
        shapes,
    })
}

pub fn check_all(cases: usize, seed: u64) -> Result<Vec<OpCheck>> {
    OPS.iter()
        .enumerate()
        .map(|(i, op)| check_op(op, cases, seed.wrapping_add(i as u64)))
        .collect()
}
