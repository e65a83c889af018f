use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::conv::ConvSaved;
use super::layers::{ActKind, PoolKind};
use super::norm::BnSaved;
use super::{ParamId, ParamKind, ParamStore, Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(pub(crate) usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

pub(crate) enum Op<T> {
    Leaf,
    Param,
    Conv(ConvSaved),
    BatchNorm(BnSaved<T>),
    Act {
        kind: ActKind,
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    /// `x[b, c, ..] * gate[b, c]`
    ChannelScale {
        x: Var,
        gate: Var,
    },
    GlobalPool {
        kind: PoolKind,
        x: Var,
        argmax: Vec<usize>,
    },
    Dense {
        x: Var,
        w: Var,
        b: Var,
    },
    /// Elementwise multiply by a fixed factor per block of `block` values.
    Mask {
        x: Var,
        factors: Vec<T>,
        block: usize,
    },
    Concat {
        xs: Vec<Var>,
    },
    AvgPool {
        x: Var,
        kernel: usize,
    },
    Reshape {
        x: Var,
    },
    /// Mean over consecutive groups of `group` samples along the batch axis.
    GroupMean {
        x: Var,
        group: usize,
    },
    MeanOf {
        xs: Vec<Var>,
    },
    SelectChannel {
        x: Var,
        channel: usize,
    },
    SoftmaxCe {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    WeightedSum {
        x: Var,
        weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Leaf | Op::Param => vec![],
            Op::Conv(s) => {
                let mut p = vec![s.x, s.w];
                p.extend(s.b);
                p
            }
            Op::BatchNorm(s) => vec![s.x, s.gamma, s.beta],
            Op::Act { x, .. }
            | Op::GlobalPool { x, .. }
            | Op::Mask { x, .. }
            | Op::AvgPool { x, .. }
            | Op::Reshape { x }
            | Op::GroupMean { x, .. }
            | Op::SelectChannel { x, .. }
            | Op::WeightedSum { x, .. } => vec![*x],
            Op::SoftmaxCe { logits, .. } => vec![*logits],
            Op::Add { a, b } => vec![*a, *b],
            Op::ChannelScale { x, gate } => vec![*x, *gate],
            Op::Dense { x, w, b } => vec![*x, *w, *b],
            Op::Concat { xs } | Op::MeanOf { xs } => xs.clone(),
        }
    }
}

pub(crate) struct Node<T> {
    pub(crate) value: Tensor<T>,
    pub(crate) op: Op<T>,
    pub(crate) needs_grad: bool,
}

/// Records a forward pass so that gradients can be computed afterwards.
///
/// A tape is single-use: build it, run one forward pass, optionally call
/// [`Tape::backward`], then drop it. Train-mode tapes carry the random stream
/// used by dropout and drop-sample.
pub struct Tape<T> {
    pub(crate) nodes: Vec<Node<T>>,
    mode: Mode,
    pub(crate) rng: ChaCha8Rng,
    param_vars: BTreeMap<ParamId, Var>,
    pub(crate) buffer_updates: Vec<(ParamId, Tensor<T>)>,
}

/// Gradients of a scalar with respect to every node of a tape.
pub struct Grads<T> {
    by_node: Vec<Option<Tensor<T>>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<T: Real> Grads<T> {
    /// Gradient with respect to a recorded value; `None` if it did not need one.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_node.get(v.0).and_then(Option::as_ref)
    }

    /// One gradient per store entry. Buffers and unused parameters get zeros.
    pub fn for_params(&self, store: &ParamStore<T>) -> Vec<Tensor<T>> {
        store
            .iter()
            .map(|(id, _, _, value)| {
                self.param_vars
                    .get(&id)
                    .and_then(|v| self.wrt(*v))
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(value.shape()))
            })
            .collect()
    }
}

impl<T: Real> Tape<T> {
    pub fn eval() -> Self {
        Self::with_mode(Mode::Eval, ChaCha8Rng::seed_from_u64(0))
    }

    pub fn train(rng: ChaCha8Rng) -> Self {
        Self::with_mode(Mode::Train, rng)
    }

    pub fn with_mode(mode: Mode, rng: ChaCha8Rng) -> Self {
        Tape {
            nodes: Vec::new(),
            mode,
            rng,
            param_vars: BTreeMap::new(),
            buffer_updates: Vec::new(),
        }
    }

    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn is_train(&self) -> bool {
        self.mode == Mode::Train
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Running-statistic updates produced by train-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(ParamId, Tensor<T>)> {
        core::mem::take(&mut self.buffer_updates)
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = op.parents().iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// An input whose gradient is wanted (used by gradient checks).
    pub fn input_with_grad(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn leaf(&mut self, value: Tensor<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Places a stored parameter on the tape, once per tape.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Param,
            needs_grad: store.kind(id) == ParamKind::Trainable,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", va.shape(), vb.shape()),
            ));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| x + y).collect();
        let out = Tensor::from_vec(va.shape(), data)?;
        Ok(self.push(out, Op::Add { a, b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }))
    }

    /// Channel `c` of `[B, C, ...]` as a `[B, 1, ...]` tensor.
    pub fn select_channel(&mut self, x: Var, channel: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() < 2 || channel >= s[1] {
            return Err(Error::shape(
                "select_channel",
                format!("channel {channel} out of range for {s:?}"),
            ));
        }
        let plane: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(s[0] * plane);
        for b in 0..s[0] {
            let start = (b * s[1] + channel) * plane;
            data.extend_from_slice(&v.data()[start..start + plane]);
        }
        let mut shape = s.to_vec();
        shape[1] = 1;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::SelectChannel { x, channel }))
    }

    /// Mean over consecutive groups of `group` samples: `[B*group, ..] -> [B, ..]`.
    ///
    /// The summands of each element are sorted before adding, so the result
    /// does not depend on the order of the samples within a group.
    pub fn group_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let v = self.value(x);
        let s = v.shape();
        if group == 0 || s.is_empty() || s[0] % group != 0 {
            return Err(Error::shape(
                "group_mean",
                format!("batch of {:?} is not a multiple of {group}", s.first()),
            ));
        }
        let per: usize = s[1..].iter().product();
        let outer = s[0] / group;
        let mut data = Vec::with_capacity(outer * per);
        let mut buf = vec![T::zero(); group];
        for o in 0..outer {
            for i in 0..per {
                for (g, slot) in buf.iter_mut().enumerate() {
                    *slot = v.data()[(o * group + g) * per + i];
                }
                data.push(order_free_mean(&mut buf));
            }
        }
        let mut shape = s.to_vec();
        shape[0] = outer;
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::GroupMean { x, group }))
    }

    /// Elementwise mean of equally shaped values, independent of their order.
    pub fn mean_of(&mut self, xs: &[Var]) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::shape("mean_of", "no inputs"))?;
        let shape = self.shape(first).to_vec();
        for &x in xs {
            if self.shape(x) != shape.as_slice() {
                return Err(Error::shape(
                    "mean_of",
                    format!("{:?} vs {:?}", self.shape(x), shape),
                ));
            }
        }
        let n = self.value(first).len();
        let mut buf = vec![T::zero(); xs.len()];
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            for (slot, &x) in buf.iter_mut().zip(xs) {
                *slot = self.value(x).data()[i];
            }
            data.push(order_free_mean(&mut buf));
        }
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::MeanOf { xs: xs.to_vec() }))
    }

    /// `sum_i x_i * w_i`; turns any tensor into a scalar for gradient checks.
    pub fn weighted_sum(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let v = self.value(x);
        if v.len() != weights.len() {
            return Err(Error::shape(
                "weighted_sum",
                format!("{} weights for {} values", weights.len(), v.len()),
            ));
        }
        let s: T = v.data().iter().zip(&weights).map(|(&a, &b)| a * b).sum();
        Ok(self.push(Tensor::scalar(s), Op::WeightedSum { x, weights }))
    }

    /// Reverse-mode pass from a scalar node.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let parents = node.op.parents();
            if let Some(p) = parents.iter().find(|p| p.0 >= i) {
                return Err(Error::TapeCycle { node: i, parent: p.0 });
            }
            let Some(g) = grads[i].take() else { continue };
            let contributions = self.node_backward(node, &g)?;
            for (p, pg) in contributions {
                if !self.nodes[p.0].needs_grad {
                    continue;
                }
                match &mut grads[p.0] {
                    Some(acc) => acc.add_assign(&pg),
                    slot @ None => *slot = Some(pg),
                }
            }
            grads[i] = Some(g);
        }
        Ok(Grads {
            by_node: grads,
            param_vars: self.param_vars.clone(),
        })
    }

    fn node_backward(&self, node: &Node<T>, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let out = match &node.op {
            Op::Leaf | Op::Param => vec![],
            Op::Conv(saved) => super::conv::backward(self, saved, g)?,
            Op::BatchNorm(saved) => super::norm::backward(self, saved, g)?,
            Op::Act { kind, x } => {
                vec![(*x, super::layers::act_backward(*kind, self.value(*x), g))]
            }
            Op::Add { a, b } => vec![(*a, g.clone()), (*b, g.clone())],
            Op::ChannelScale { x, gate } => {
                super::layers::channel_scale_backward(self.value(*x), self.value(*gate), *x, *gate, g)
            }
            Op::GlobalPool { kind, x, argmax } => {
                vec![(*x, super::layers::pool_backward(*kind, self.value(*x), argmax, g))]
            }
            Op::Dense { x, w, b } => {
                super::layers::dense_backward(self.value(*x), self.value(*w), *x, *w, *b, g)
            }
            Op::Mask { x, factors, block } => {
                let data = g
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| v * factors[i / block])
                    .collect();
                vec![(*x, Tensor::from_vec(g.shape(), data)?)]
            }
            Op::Concat { xs } => super::layers::concat_backward(self, xs, g)?,
            Op::AvgPool { x, kernel } => {
                vec![(*x, super::layers::avg_pool_backward(self.value(*x), *kernel, g))]
            }
            Op::Reshape { x } => vec![(*x, g.clone().reshape(self.shape(*x))?)],
            Op::GroupMean { x, group } => {
                let s = self.shape(*x);
                let per: usize = s[1..].iter().product();
                let scale = T::one() / T::lit(*group as f64);
                let mut data = vec![T::zero(); s.iter().product()];
                for (j, slot) in data.iter_mut().enumerate() {
                    let o = j / per / group;
                    *slot = g.data()[o * per + j % per] * scale;
                }
                vec![(*x, Tensor::from_vec(s, data)?)]
            }
            Op::MeanOf { xs } => {
                let scale = T::one() / T::lit(xs.len() as f64);
                xs.iter().map(|&x| (x, g.map(|v| v * scale))).collect()
            }
            Op::SelectChannel { x, channel } => {
                let s = self.shape(*x);
                let plane: usize = s[2..].iter().product();
                let mut gx = Tensor::zeros(s);
                for b in 0..s[0] {
                    let dst = (b * s[1] + channel) * plane;
                    gx.data_mut()[dst..dst + plane]
                        .copy_from_slice(&g.data()[b * plane..(b + 1) * plane]);
                }
                vec![(*x, gx)]
            }
            Op::SoftmaxCe {
                logits,
                probs,
                labels,
            } => {
                let s = self.shape(*logits);
                let (batch, classes) = (s[0], s[1]);
                let scale = g.data()[0] / T::lit(batch as f64);
                let mut data = probs.clone();
                for (b, &l) in labels.iter().enumerate() {
                    data[b * classes + l] -= T::one();
                }
                for v in &mut data {
                    *v *= scale;
                }
                vec![(*logits, Tensor::from_vec(s, data)?)]
            }
            Op::WeightedSum { x, weights } => {
                let s = g.data()[0];
                let data = weights.iter().map(|&w| w * s).collect();
                vec![(*x, Tensor::from_vec(self.shape(*x), data)?)]
            }
        };
        Ok(out)
    }

    #[cfg(test)]
    pub(crate) fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }
}

fn order_free_mean<T: Real>(buf: &mut [T]) -> T {
    buf.sort_by(|a, b| a.partial_cmp(b).unwrap_or(core::cmp::Ordering::Equal));
    let mut s = T::zero();
    for &v in buf.iter() {
        s += v;
    }
    s / T::lit(buf.len() as f64)
}
