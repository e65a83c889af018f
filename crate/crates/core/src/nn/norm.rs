use alloc::vec;
use alloc::vec::Vec;

use super::tape::Op;
use super::{ParamId, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

pub const BN_EPS: f64 = 1e-5;
/// Weight of the new batch statistic in the running average.
pub const BN_MOMENTUM: f64 = 0.1;

pub(crate) struct BnSaved<T> {
    pub(crate) x: Var,
    pub(crate) gamma: Var,
    pub(crate) beta: Var,
    xhat: Vec<T>,
    inv_std: Vec<T>,
    train: bool,
}

fn channel_layout(shape: &[usize]) -> Result<(usize, usize, usize)> {
    if shape.len() < 2 {
        return Err(Error::RankMismatch {
            op: "batch_norm",
            expected: 2,
            actual: shape.len(),
        });
    }
    Ok((shape[0], shape[1], shape[2..].iter().product()))
}

impl<T: Real> Tape<T> {
    /// Per-channel normalization of `[B, C, ...]`.
    ///
    /// Train mode normalizes with the biased batch variance and records the
    /// new running statistics (see [`Tape::take_buffer_updates`]); eval mode
    /// uses the running statistics stored at `running_mean` / `running_var`.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        store: &ParamStore<T>,
        running_mean: ParamId,
        running_var: ParamId,
    ) -> Result<Var> {
        let (batch, ch, plane) = channel_layout(self.shape(x))?;
        for v in [gamma, beta] {
            if self.shape(v) != [ch] {
                return Err(Error::AxisMismatch {
                    op: "batch_norm",
                    axis: 1,
                    expected: self.shape(v).first().copied().unwrap_or(0),
                    actual: ch,
                });
            }
        }
        let eps = T::lit(BN_EPS);
        let n = batch * plane;
        let train = self.is_train();
        let (mean, var) = if train {
            if n < 2 {
                return Err(Error::UndefinedVariance { channel: 0 });
            }
            let xv = self.value(x).data();
            let mut mean = vec![T::zero(); ch];
            let mut var = vec![T::zero(); ch];
            for c in 0..ch {
                let mut s = T::zero();
                for b in 0..batch {
                    for &v in &xv[(b * ch + c) * plane..][..plane] {
                        s += v;
                    }
                }
                let m = s / T::lit(n as f64);
                let mut ss = T::zero();
                for b in 0..batch {
                    for &v in &xv[(b * ch + c) * plane..][..plane] {
                        ss += (v - m) * (v - m);
                    }
                }
                mean[c] = m;
                var[c] = ss / T::lit(n as f64);
            }
            let mom = T::lit(BN_MOMENTUM);
            let keep = T::one() - mom;
            let unbias = if n > 1 { T::lit(n as f64 / (n - 1) as f64) } else { T::one() };
            let rm = store.get(running_mean).data();
            let rv = store.get(running_var).data();
            let new_mean = (0..ch).map(|c| keep * rm[c] + mom * mean[c]).collect();
            let new_var = (0..ch).map(|c| keep * rv[c] + mom * var[c] * unbias).collect();
            self.buffer_updates
                .push((running_mean, Tensor::from_vec(&[ch], new_mean)?));
            self.buffer_updates
                .push((running_var, Tensor::from_vec(&[ch], new_var)?));
            (mean, var)
        } else {
            (
                store.get(running_mean).data().to_vec(),
                store.get(running_var).data().to_vec(),
            )
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let xv = self.value(x).data();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..batch {
            for c in 0..ch {
                let off = (b * ch + c) * plane;
                for i in off..off + plane {
                    let h = (xv[i] - mean[c]) * inv_std[c];
                    xhat[i] = h;
                    out[i] = gv[c] * h + bv[c];
                }
            }
        }
        let out = Tensor::from_vec(self.shape(x), out)?;
        Ok(self.push(
            out,
            Op::BatchNorm(BnSaved {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            }),
        ))
    }
}

pub(crate) fn backward<T: Real>(
    tape: &Tape<T>,
    s: &BnSaved<T>,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let shape = tape.shape(s.x);
    let (batch, ch, plane) = channel_layout(shape)?;
    let n = T::lit((batch * plane) as f64);
    let gamma = tape.value(s.gamma).data();
    let gd = g.data();
    let mut dgamma = vec![T::zero(); ch];
    let mut dbeta = vec![T::zero(); ch];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * plane;
            for i in off..off + plane {
                dbeta[c] += gd[i];
                dgamma[c] += gd[i] * s.xhat[i];
            }
        }
    }
    let mut dx = vec![T::zero(); gd.len()];
    for b in 0..batch {
        for c in 0..ch {
            let off = (b * ch + c) * plane;
            let k = gamma[c] * s.inv_std[c];
            for i in off..off + plane {
                dx[i] = if s.train {
                    // dxhat = g * gamma; dx = inv_std/N * (N dxhat - sum dxhat - xhat sum(dxhat xhat))
                    k * (gd[i] - (dbeta[c] + s.xhat[i] * dgamma[c]) / n)
                } else {
                    k * gd[i]
                };
            }
        }
    }
    Ok(vec![
        (s.x, Tensor::from_vec(shape, dx)?),
        (s.gamma, Tensor::from_vec(&[ch], dgamma)?),
        (s.beta, Tensor::from_vec(&[ch], dbeta)?),
    ])
}
