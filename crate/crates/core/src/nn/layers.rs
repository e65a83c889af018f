use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tape::Op;
use super::{Init, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ActKind {
    Silu,
    Relu,
    Sigmoid,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn act<T: Real>(kind: ActKind, x: T) -> T {
    match kind {
        ActKind::Silu => x * sigmoid(x),
        ActKind::Relu => x.max(T::zero()),
        ActKind::Sigmoid => sigmoid(x),
    }
}

fn act_grad<T: Real>(kind: ActKind, x: T) -> T {
    match kind {
        ActKind::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        ActKind::Relu => {
            if x > T::zero() {
                T::one()
            } else {
                T::zero()
            }
        }
        ActKind::Sigmoid => {
            let s = sigmoid(x);
            s * (T::one() - s)
        }
    }
}

pub(crate) fn act_backward<T: Real>(kind: ActKind, x: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let data = x
        .data()
        .iter()
        .zip(g.data())
        .map(|(&xv, &gv)| gv * act_grad(kind, xv))
        .collect();
    Tensor::from_vec(x.shape(), data).expect("same shape")
}

pub(crate) fn channel_scale_backward<T: Real>(
    x: &Tensor<T>,
    gate: &Tensor<T>,
    xv: Var,
    gv: Var,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let s = x.shape();
    let plane: usize = s[2..].iter().product();
    let mut gx = vec![T::zero(); x.len()];
    let mut ggate = vec![T::zero(); gate.len()];
    for (bc, &gate_v) in gate.data().iter().enumerate() {
        let off = bc * plane;
        let mut acc = T::zero();
        for i in off..off + plane {
            gx[i] = g.data()[i] * gate_v;
            acc += g.data()[i] * x.data()[i];
        }
        ggate[bc] = acc;
    }
    vec![
        (xv, Tensor::from_vec(s, gx).expect("same shape")),
        (gv, Tensor::from_vec(gate.shape(), ggate).expect("same shape")),
    ]
}

pub(crate) fn pool_backward<T: Real>(
    kind: PoolKind,
    x: &Tensor<T>,
    argmax: &[usize],
    g: &Tensor<T>,
) -> Tensor<T> {
    let plane: usize = x.shape()[2..].iter().product();
    let mut gx = Tensor::zeros(x.shape());
    let d = gx.data_mut();
    match kind {
        PoolKind::Max => {
            for (bc, &gv) in g.data().iter().enumerate() {
                d[bc * plane + argmax[bc]] += gv;
            }
        }
        PoolKind::Avg => {
            let inv = T::one() / T::lit(plane as f64);
            for (bc, &gv) in g.data().iter().enumerate() {
                for v in &mut d[bc * plane..(bc + 1) * plane] {
                    *v = gv * inv;
                }
            }
        }
    }
    gx
}

pub(crate) fn dense_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    xv: Var,
    wv: Var,
    bv: Var,
    g: &Tensor<T>,
) -> Vec<(Var, Tensor<T>)> {
    let (batch, fin) = (x.shape()[0], x.shape()[1]);
    let fout = w.shape()[1];
    let (xd, wd, gd) = (x.data(), w.data(), g.data());
    let mut gx = vec![T::zero(); batch * fin];
    let mut gw = vec![T::zero(); fin * fout];
    let mut gb = vec![T::zero(); fout];
    for b in 0..batch {
        let grow = &gd[b * fout..(b + 1) * fout];
        for (acc, &gv) in gb.iter_mut().zip(grow) {
            *acc += gv;
        }
        for f in 0..fin {
            let wrow = &wd[f * fout..(f + 1) * fout];
            let mut s = T::zero();
            for (&wv, &gv) in wrow.iter().zip(grow) {
                s += wv * gv;
            }
            gx[b * fin + f] = s;
            let xval = xd[b * fin + f];
            for (acc, &gv) in gw[f * fout..(f + 1) * fout].iter_mut().zip(grow) {
                *acc += xval * gv;
            }
        }
    }
    vec![
        (xv, Tensor::from_vec(x.shape(), gx).expect("same shape")),
        (wv, Tensor::from_vec(w.shape(), gw).expect("same shape")),
        (bv, Tensor::from_vec(&[fout], gb).expect("same shape")),
    ]
}

pub(crate) fn concat_backward<T: Real>(
    tape: &Tape<T>,
    xs: &[Var],
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let s = g.shape();
    let (batch, total) = (s[0], s[1]);
    let plane: usize = s[2..].iter().product();
    let mut out = Vec::with_capacity(xs.len());
    let mut c0 = 0;
    for &x in xs {
        let shape = tape.shape(x);
        let c = shape[1];
        let mut data = Vec::with_capacity(batch * c * plane);
        for b in 0..batch {
            let start = (b * total + c0) * plane;
            data.extend_from_slice(&g.data()[start..start + c * plane]);
        }
        out.push((x, Tensor::from_vec(shape, data)?));
        c0 += c;
    }
    Ok(out)
}

/// Visits the clipped `k x k` window around each pixel of an `h x w` plane.
fn for_each_window(h: usize, w: usize, k: usize, mut f: impl FnMut(usize, usize)) {
    let r = k / 2;
    for y in 0..h {
        for x in 0..w {
            let o = y * w + x;
            for yy in y.saturating_sub(r)..(y + k - r).min(h) {
                for xx in x.saturating_sub(r)..(x + k - r).min(w) {
                    f(o, yy * w + xx);
                }
            }
        }
    }
}

pub(crate) fn avg_pool_backward<T: Real>(x: &Tensor<T>, k: usize, g: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    let (h, w) = (s[2], s[3]);
    let inv = T::one() / T::lit((k * k) as f64);
    let mut gx = Tensor::zeros(s);
    let plane = h * w;
    for bc in 0..s[0] * s[1] {
        let src = &g.data()[bc * plane..(bc + 1) * plane];
        let dst = &mut gx.data_mut()[bc * plane..(bc + 1) * plane];
        for_each_window(h, w, k, |o, i| dst[i] += src[o] * inv);
    }
    gx
}

impl<T: Real> Tape<T> {
    pub fn activation(&mut self, kind: ActKind, x: Var) -> Var {
        let out = self.value(x).map(|v| act(kind, v));
        self.push(out, Op::Act { kind, x })
    }

    /// `x[b, c, ..] * gate[b, c]`.
    pub fn channel_scale(&mut self, x: Var, gate: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || self.shape(gate) != &s[..2] {
            return Err(Error::shape(
                "channel_scale",
                format!("gate {:?} does not match {:?}", self.shape(gate), s),
            ));
        }
        let plane: usize = s[2..].iter().product();
        let (xd, gd) = (self.value(x).data(), self.value(gate).data());
        let data = xd
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gd[i / plane])
            .collect();
        let out = Tensor::from_vec(&s, data)?;
        Ok(self.push(out, Op::ChannelScale { x, gate }))
    }

    /// Reduces every spatial axis: `[B, C, ..] -> [B, C]`.
    pub fn global_pool(&mut self, kind: PoolKind, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 3 {
            return Err(Error::RankMismatch {
                op: "global_pool",
                expected: 3,
                actual: s.len(),
            });
        }
        let plane: usize = s[2..].iter().product();
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1]);
        let mut argmax = Vec::new();
        for chunk in xd.chunks_exact(plane) {
            match kind {
                PoolKind::Max => {
                    let mut best = 0;
                    for (i, &v) in chunk.iter().enumerate() {
                        if v > chunk[best] {
                            best = i;
                        }
                    }
                    argmax.push(best);
                    out.push(chunk[best]);
                }
                PoolKind::Avg => {
                    let mut sum = T::zero();
                    for &v in chunk {
                        sum += v;
                    }
                    out.push(sum / T::lit(plane as f64));
                }
            }
        }
        let out = Tensor::from_vec(&s[..2], out)?;
        Ok(self.push(out, Op::GlobalPool { kind, x, argmax }))
    }

    /// `x[B, F] · w[F, G] + b[G]`.
    pub fn dense(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::RankMismatch {
                op: "dense",
                expected: 2,
                actual: if xs.len() != 2 { xs.len() } else { ws.len() },
            });
        }
        if xs[1] != ws[0] {
            return Err(Error::AxisMismatch {
                op: "dense",
                axis: 1,
                expected: ws[0],
                actual: xs[1],
            });
        }
        if self.shape(b) != [ws[1]] {
            return Err(Error::shape(
                "dense",
                format!("bias {:?} for {} outputs", self.shape(b), ws[1]),
            ));
        }
        let (batch, fin, fout) = (xs[0], xs[1], ws[1]);
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = Vec::with_capacity(batch * fout);
        for bi in 0..batch {
            let mut row = bd.to_vec();
            for f in 0..fin {
                let xv = xd[bi * fin + f];
                for (acc, &wv) in row.iter_mut().zip(&wd[f * fout..(f + 1) * fout]) {
                    *acc += xv * wv;
                }
            }
            out.extend(row);
        }
        let out = Tensor::from_vec(&[batch, fout], out)?;
        Ok(self.push(out, Op::Dense { x, w, b }))
    }

    /// Inverted dropout; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid("dropout rate", format!("{rate} not in [0, 1)")));
        }
        if !self.is_train() || rate == 0.0 {
            return Ok(x);
        }
        let n = self.value(x).len();
        let keep = T::lit(1.0 / (1.0 - rate));
        let factors: Vec<T> = (0..n)
            .map(|_| if self.rng.gen::<f64>() < rate { T::zero() } else { keep })
            .collect();
        Ok(self.mask(x, factors, 1))
    }

    /// Zeros whole samples with probability `1 - survival_p` and scales the
    /// survivors by `1 / survival_p` (2 at the default 0.5); identity in eval mode.
    pub fn drop_sample(&mut self, x: Var, survival_p: f64) -> Result<Var> {
        if !(survival_p > 0.0 && survival_p <= 1.0) {
            return Err(Error::invalid(
                "drop-sample survival probability",
                format!("{survival_p} not in (0, 1]"),
            ));
        }
        if !self.is_train() {
            return Ok(x);
        }
        let s = self.shape(x);
        let block: usize = s[1..].iter().product();
        let batch = s[0];
        let scale = T::lit(1.0 / survival_p);
        let factors: Vec<T> = (0..batch)
            .map(|_| if self.rng.gen::<f64>() < survival_p { scale } else { T::zero() })
            .collect();
        Ok(self.mask(x, factors, block))
    }

    fn mask(&mut self, x: Var, factors: Vec<T>, block: usize) -> Var {
        let xd = self.value(x);
        let data = xd
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * factors[i / block])
            .collect();
        let out = Tensor::from_vec(xd.shape(), data).expect("same shape");
        self.push(out, Op::Mask { x, factors, block })
    }

    /// Concatenates along the channel axis.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let s0 = self.shape(first).to_vec();
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != s0.len() || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s:?} vs {s0:?}")));
            }
            total += s[1];
        }
        let plane: usize = s0[2..].iter().product();
        let mut data = Vec::with_capacity(s0[0] * total * plane);
        for b in 0..s0[0] {
            for &x in xs {
                let c = self.shape(x)[1];
                data.extend_from_slice(&self.value(x).data()[b * c * plane..(b + 1) * c * plane]);
            }
        }
        let mut shape = s0.clone();
        shape[1] = total;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Concat { xs: xs.to_vec() }))
    }

    /// `k x k` average pooling of `[B, C, H, W]`, stride 1, zero "same"
    /// padding counted in the divisor.
    pub fn avg_pool(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::RankMismatch {
                op: "avg_pool",
                expected: 4,
                actual: s.len(),
            });
        }
        if kernel % 2 == 0 {
            return Err(Error::invalid("avg_pool kernel", "must be odd"));
        }
        let (h, w) = (s[2], s[3]);
        let plane = h * w;
        let inv = T::one() / T::lit((kernel * kernel) as f64);
        let xd = self.value(x).data();
        let mut out = vec![T::zero(); xd.len()];
        for bc in 0..s[0] * s[1] {
            let src = &xd[bc * plane..(bc + 1) * plane];
            let dst = &mut out[bc * plane..(bc + 1) * plane];
            for_each_window(h, w, kernel, |o, i| dst[o] += src[i]);
            for v in dst.iter_mut() {
                *v *= inv;
            }
        }
        let out = Tensor::from_vec(&s, out)?;
        Ok(self.push(out, Op::AvgPool { x, kernel }))
    }

    /// Mean negative log-likelihood of `labels` under `softmax(logits)`.
    ///
    /// Returns the scalar loss node and the row-major class probabilities.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<(Var, Vec<T>)> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 {
            return Err(Error::RankMismatch {
                op: "softmax_cross_entropy",
                expected: 2,
                actual: s.len(),
            });
        }
        let (batch, classes) = (s[0], s[1]);
        if labels.len() != batch {
            return Err(Error::AxisMismatch {
                op: "softmax_cross_entropy",
                axis: 0,
                expected: batch,
                actual: labels.len(),
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::invalid("label", format!("{bad} with {classes} classes")));
        }
        let z = self.value(logits).data();
        let mut probs = Vec::with_capacity(z.len());
        let mut total = T::zero();
        for (row, &label) in z.chunks_exact(classes).zip(labels) {
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for &v in row {
                sum += (v - m).exp();
            }
            for &v in row {
                probs.push((v - m).exp() / sum);
            }
            // m + ln(sum) - z_label, with ln(sum) = ln(1 + rest) for accuracy near zero loss
            let rest = sum - T::one();
            let nll = (m - row[label]) + rest.ln_1p();
            total += nll.max(T::zero());
        }
        let loss = total / T::lit(batch as f64);
        let var = self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCe {
                logits,
                probs: probs.clone(),
                labels: labels.to_vec(),
            },
        );
        Ok((var, probs))
    }
}

/// Batch normalization with learned affine parameters and running statistics.
#[derive(Clone, Debug)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
}

impl BatchNorm {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let mut add = |suffix: &str, kind, v| {
            store.init(rng, &format!("{name}.{suffix}"), kind, &[channels], Init::Const(v))
        };
        Ok(BatchNorm {
            gamma: add("gamma", ParamKind::Trainable, 1.0)?,
            beta: add("beta", ParamKind::Trainable, 0.0)?,
            running_mean: add("running_mean", ParamKind::Buffer, 0.0)?,
            running_var: add("running_var", ParamKind::Buffer, 1.0)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        tape.batch_norm(x, g, b, store, self.running_mean, self.running_var)
    }
}

/// Fully connected layer, weights `[in, out]`.
#[derive(Clone, Debug)]
pub struct Dense {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
}

impl Dense {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        inputs: usize,
        outputs: usize,
    ) -> Result<Self> {
        if inputs == 0 || outputs == 0 {
            return Err(Error::invalid("dense", "feature counts must be positive"));
        }
        let weight = store.init(
            rng,
            &format!("{name}.weight"),
            ParamKind::Trainable,
            &[inputs, outputs],
            Init::KaimingUniform { fan_in: inputs },
        )?;
        let bias = store.init(
            rng,
            &format!("{name}.bias"),
            ParamKind::Trainable,
            &[outputs],
            Init::Const(0.0),
        )?;
        Ok(Dense {
            weight,
            bias,
            inputs,
            outputs,
        })
    }

    pub fn param_count(&self) -> usize {
        self.inputs * self.outputs + self.outputs
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = tape.param(store, self.bias);
        tape.dense(x, w, b)
    }
}

/// Channel attention: global average pool, `C -> C/r` dense, SiLU,
/// `C/r -> C` dense, sigmoid gate multiplied into the input.
#[derive(Clone, Debug)]
pub struct SqueezeExcitation {
    pub reduce: Dense,
    pub expand: Dense,
}

impl SqueezeExcitation {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
        reduced: usize,
    ) -> Result<Self> {
        if reduced == 0 {
            return Err(Error::invalid("squeeze-excitation", "reduced channel count is zero"));
        }
        Ok(SqueezeExcitation {
            reduce: Dense::new(store, rng, &format!("{name}.reduce"), channels, reduced)?,
            expand: Dense::new(store, rng, &format!("{name}.expand"), reduced, channels)?,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let pooled = tape.global_pool(PoolKind::Avg, x)?;
        let r = self.reduce.forward(tape, store, pooled)?;
        let r = tape.activation(ActKind::Silu, r);
        let e = self.expand.forward(tape, store, r)?;
        let gate = tape.activation(ActKind::Sigmoid, e);
        tape.channel_scale(x, gate)
    }
}
