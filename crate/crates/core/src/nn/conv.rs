use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;

use super::tape::Op;
use super::{Init, ParamId, ParamKind, ParamStore, Real, Tape, Tensor, Var};
use crate::{Error, Result};

/// Geometry of a 2D or 3D convolution.
///
/// Per-axis arrays are always `[depth, height, width]`; rank-2 convolutions
/// keep depth at kernel 1, stride 1, padding 0.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub rank: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    pub padding: [usize; 3],
    pub groups: usize,
    pub bias: bool,
}

impl ConvSpec {
    /// Cubic 3D kernel with "same" padding `k / 2`.
    pub fn cube(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            rank: 3,
            in_channels,
            out_channels,
            kernel: [k; 3],
            stride: [stride; 3],
            padding: [k / 2; 3],
            groups: 1,
            bias: false,
        }
    }

    /// Square 2D kernel with "same" padding `k / 2`.
    pub fn square(in_channels: usize, out_channels: usize, k: usize, stride: usize) -> Self {
        ConvSpec {
            rank: 2,
            in_channels,
            out_channels,
            kernel: [1, k, k],
            stride: [1, stride, stride],
            padding: [0, k / 2, k / 2],
            groups: 1,
            bias: false,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_padding(mut self, pad: usize) -> Self {
        self.padding = if self.rank == 3 { [pad; 3] } else { [0, pad, pad] };
        self
    }

    /// One filter per input channel.
    pub fn depthwise(mut self) -> Self {
        self.groups = self.in_channels;
        self
    }

    fn axes(&self) -> core::ops::Range<usize> {
        (3 - self.rank)..3
    }

    pub fn weight_shape(&self) -> Vec<usize> {
        let mut s = vec![self.out_channels, self.in_channels / self.groups.max(1)];
        s.extend(self.axes().map(|a| self.kernel[a]));
        s
    }

    pub fn fan_in(&self) -> usize {
        self.weight_shape()[1..].iter().product()
    }

    pub fn param_count(&self) -> usize {
        self.weight_shape().iter().product::<usize>() + if self.bias { self.out_channels } else { 0 }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |d: &str| Err(Error::invalid("conv spec", d));
        if self.rank != 2 && self.rank != 3 {
            return bad("rank must be 2 or 3");
        }
        if self.in_channels == 0 || self.out_channels == 0 || self.groups == 0 {
            return bad("channel and group counts must be positive");
        }
        if self.in_channels % self.groups != 0 || self.out_channels % self.groups != 0 {
            return bad("groups must divide both channel counts");
        }
        if self.kernel.iter().chain(&self.stride).any(|&v| v == 0) {
            return bad("kernel and stride must be positive");
        }
        if self.rank == 2 && (self.kernel[0] != 1 || self.stride[0] != 1 || self.padding[0] != 0) {
            return bad("rank-2 spec must have a trivial depth axis");
        }
        Ok(())
    }

    /// Spatial output extents for the given spatial input extents.
    pub fn output_dims(&self, spatial: &[usize]) -> Result<Vec<usize>> {
        if spatial.len() != self.rank {
            return Err(Error::RankMismatch {
                op: "conv",
                expected: self.rank + 2,
                actual: spatial.len() + 2,
            });
        }
        self.axes()
            .zip(spatial)
            .enumerate()
            .map(|(i, (a, &n))| {
                let padded = n + 2 * self.padding[a];
                if padded < self.kernel[a] {
                    return Err(Error::shape(
                        "conv",
                        format!(
                            "axis {}: extent {n} with padding {} is smaller than kernel {}",
                            i + 2,
                            self.padding[a],
                            self.kernel[a]
                        ),
                    ));
                }
                Ok((padded - self.kernel[a]) / self.stride[a] + 1)
            })
            .collect()
    }
}

/// Resolved sizes of one convolution call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct Geom {
    batch: usize,
    cin: usize,
    cout: usize,
    groups: usize,
    input: [usize; 3],
    output: [usize; 3],
    kernel: [usize; 3],
    stride: [usize; 3],
    pad: [usize; 3],
}

impl Geom {
    fn new(spec: &ConvSpec, in_shape: &[usize]) -> Result<Self> {
        spec.validate()?;
        if in_shape.len() != spec.rank + 2 {
            return Err(Error::RankMismatch {
                op: "conv",
                expected: spec.rank + 2,
                actual: in_shape.len(),
            });
        }
        if in_shape[1] != spec.in_channels {
            return Err(Error::AxisMismatch {
                op: "conv",
                axis: 1,
                expected: spec.in_channels,
                actual: in_shape[1],
            });
        }
        let out = spec.output_dims(&in_shape[2..])?;
        let mut input = [1; 3];
        let mut output = [1; 3];
        for (k, a) in spec.axes().enumerate() {
            input[a] = in_shape[2 + k];
            output[a] = out[k];
        }
        Ok(Geom {
            batch: in_shape[0],
            cin: spec.in_channels,
            cout: spec.out_channels,
            groups: spec.groups,
            input,
            output,
            kernel: spec.kernel,
            stride: spec.stride,
            pad: spec.padding,
        })
    }

    fn in_plane(&self) -> usize {
        self.input.iter().product()
    }

    fn out_plane(&self) -> usize {
        self.output.iter().product()
    }

    fn ksize(&self) -> usize {
        self.kernel.iter().product()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1; 3] && self.stride == [1; 3] && self.pad == [0; 3]
    }
}

/// Range of output positions along one axis whose input tap `o * stride + k - pad`
/// lands inside `0..n_in`.
#[inline]
fn valid_range(n_out: usize, n_in: usize, stride: usize, k: usize, pad: usize) -> (usize, usize) {
    let lo = if pad > k { (pad - k).div_ceil(stride) } else { 0 };
    let hi = if n_in + pad > k {
        ((n_in + pad - k - 1) / stride + 1).min(n_out)
    } else {
        0
    };
    (lo, hi.max(lo))
}

/// Visits every (output row, input row, weight index, output column range)
/// combination of one input/output channel pair.
#[inline]
fn for_each_tap(g: &Geom, mut f: impl FnMut(usize, usize, usize, usize, usize, usize)) {
    let [od_n, oh_n, ow_n] = g.output;
    let [id_n, ih_n, iw_n] = g.input;
    let [kd_n, kh_n, kw_n] = g.kernel;
    let [sd, sh, sw] = g.stride;
    let [pd, ph, pw] = g.pad;
    for kd in 0..kd_n {
        let (d_lo, d_hi) = valid_range(od_n, id_n, sd, kd, pd);
        for od in d_lo..d_hi {
            let id = od * sd + kd - pd;
            for kh in 0..kh_n {
                let (h_lo, h_hi) = valid_range(oh_n, ih_n, sh, kh, ph);
                for oh in h_lo..h_hi {
                    let ih = oh * sh + kh - ph;
                    let orow = (od * oh_n + oh) * ow_n;
                    let irow = (id * ih_n + ih) * iw_n;
                    for kw in 0..kw_n {
                        let (w_lo, w_hi) = valid_range(ow_n, iw_n, sw, kw, pw);
                        if w_lo < w_hi {
                            let widx = (kd * kh_n + kh) * kw_n + kw;
                            f(orow, irow, widx, w_lo, w_hi, kw);
                        }
                    }
                }
            }
        }
    }
}

fn forward_kernel<T: Real>(g: &Geom, x: &[T], w: &[T], bias: Option<&[T]>) -> Vec<T> {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.ksize());
    let (sw, pw) = (g.stride[2], g.pad[2]);
    let mut out = vec![T::zero(); g.batch * g.cout * op];
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let o = &mut out[(b * g.cout + oc) * op..][..op];
            if let Some(bias) = bias {
                o.fill(bias[oc]);
            }
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xin = &x[(b * g.cin + ic) * ip..][..ip];
                let wk = &w[(oc * cin_g + icg) * ks..][..ks];
                if g.pointwise() {
                    let wv = wk[0];
                    for (o, &xv) in o.iter_mut().zip(xin) {
                        *o += wv * xv;
                    }
                    continue;
                }
                for_each_tap(g, |orow, irow, widx, lo, hi, kw| {
                    let wv = wk[widx];
                    let orow = &mut o[orow..];
                    let irow = &xin[irow..];
                    if sw == 1 {
                        let off = lo + kw - pw;
                        for (o, &xv) in orow[lo..hi].iter_mut().zip(&irow[off..off + hi - lo]) {
                            *o += wv * xv;
                        }
                    } else {
                        for ow in lo..hi {
                            orow[ow] += wv * irow[ow * sw + kw - pw];
                        }
                    }
                });
            }
        }
    }
    out
}

/// Returns (grad input, grad weight, grad bias).
fn backward_kernel<T: Real>(
    g: &Geom,
    x: &[T],
    w: &[T],
    gout: &[T],
    want_x: bool,
    want_w: bool,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let cin_g = g.cin / g.groups;
    let cout_g = g.cout / g.groups;
    let (ip, op, ks) = (g.in_plane(), g.out_plane(), g.ksize());
    let (sw, pw) = (g.stride[2], g.pad[2]);
    let mut gx = if want_x { vec![T::zero(); x.len()] } else { Vec::new() };
    let mut gw = vec![T::zero(); if want_w { w.len() } else { 0 }];
    let mut gb = vec![T::zero(); g.cout];
    for b in 0..g.batch {
        for oc in 0..g.cout {
            let grp = oc / cout_g;
            let go = &gout[(b * g.cout + oc) * op..][..op];
            let mut s = T::zero();
            for &v in go {
                s += v;
            }
            gb[oc] += s;
            for icg in 0..cin_g {
                let ic = grp * cin_g + icg;
                let xoff = (b * g.cin + ic) * ip;
                let woff = (oc * cin_g + icg) * ks;
                if g.pointwise() {
                    if want_x {
                        let wv = w[woff];
                        for (d, &gv) in gx[xoff..xoff + ip].iter_mut().zip(go) {
                            *d += wv * gv;
                        }
                    }
                    if want_w {
                        let mut acc = T::zero();
                        for (&xv, &gv) in x[xoff..xoff + ip].iter().zip(go) {
                            acc += xv * gv;
                        }
                        gw[woff] += acc;
                    }
                    continue;
                }
                let xin = &x[xoff..xoff + ip];
                for_each_tap(g, |orow, irow, widx, lo, hi, kw| {
                    let grow = &go[orow..];
                    if want_x {
                        let wv = w[woff + widx];
                        let dst = &mut gx[xoff + irow..];
                        for ow in lo..hi {
                            dst[ow * sw + kw - pw] += wv * grow[ow];
                        }
                    }
                    if want_w {
                        let src = &xin[irow..];
                        let mut acc = T::zero();
                        if sw == 1 {
                            let off = lo + kw - pw;
                            for (&gv, &xv) in grow[lo..hi].iter().zip(&src[off..off + hi - lo]) {
                                acc += gv * xv;
                            }
                        } else {
                            for ow in lo..hi {
                                acc += grow[ow] * src[ow * sw + kw - pw];
                            }
                        }
                        gw[woff + widx] += acc;
                    }
                });
            }
        }
    }
    (gx, gw, gb)
}

pub(crate) struct ConvSaved {
    pub(crate) x: Var,
    pub(crate) w: Var,
    pub(crate) b: Option<Var>,
    geom: Geom,
}

impl<T: Real> Tape<T> {
    /// Cross-correlation (no kernel flip) of `[B, Cin, spatial..]` with
    /// weights `[Cout, Cin/groups, kernel..]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Option<Var>, spec: &ConvSpec) -> Result<Var> {
        let geom = Geom::new(spec, self.shape(x))?;
        let wshape = spec.weight_shape();
        let got = self.shape(w);
        if got.len() != wshape.len() {
            return Err(Error::RankMismatch {
                op: "conv weight",
                expected: wshape.len(),
                actual: got.len(),
            });
        }
        if let Some(axis) = (0..wshape.len()).find(|&i| got[i] != wshape[i]) {
            return Err(Error::AxisMismatch {
                op: "conv weight",
                axis,
                expected: wshape[axis],
                actual: got[axis],
            });
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::shape(
                    "conv bias",
                    format!("expected [{}], got {:?}", spec.out_channels, self.shape(b)),
                ));
            }
        }
        let data = forward_kernel(
            &geom,
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let mut shape = vec![geom.batch, geom.cout];
        shape.extend(spec.axes().map(|a| geom.output[a]));
        let out = Tensor::from_vec(&shape, data)?;
        Ok(self.push(out, Op::Conv(ConvSaved { x, w, b, geom })))
    }
}

pub(crate) fn backward<T: Real>(
    tape: &Tape<T>,
    s: &ConvSaved,
    g: &Tensor<T>,
) -> Result<Vec<(Var, Tensor<T>)>> {
    let want_x = tape.nodes[s.x.0].needs_grad;
    let want_w = tape.nodes[s.w.0].needs_grad;
    let (gx, gw, gb) = backward_kernel(
        &s.geom,
        tape.value(s.x).data(),
        tape.value(s.w).data(),
        g.data(),
        want_x,
        want_w,
    );
    let mut out = Vec::new();
    if want_x {
        out.push((s.x, Tensor::from_vec(tape.shape(s.x), gx)?));
    }
    if want_w {
        out.push((s.w, Tensor::from_vec(tape.shape(s.w), gw)?));
    }
    if let Some(b) = s.b {
        out.push((b, Tensor::from_vec(&[s.geom.cout], gb)?));
    }
    Ok(out)
}

/// Convolution layer with its parameters registered in a [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Conv {
    pub spec: ConvSpec,
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Conv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: ConvSpec,
    ) -> Result<Self> {
        spec.validate()?;
        let weight = store.init(
            rng,
            &format!("{name}.weight"),
            ParamKind::Trainable,
            &spec.weight_shape(),
            Init::KaimingUniform {
                fan_in: spec.fan_in(),
            },
        )?;
        let bias = if spec.bias {
            Some(store.init(
                rng,
                &format!("{name}.bias"),
                ParamKind::Trainable,
                &[spec.out_channels],
                Init::Const(0.0),
            )?)
        } else {
            None
        };
        Ok(Conv { spec, weight, bias })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.weight);
        let b = self.bias.map(|b| tape.param(store, b));
        tape.conv(x, w, b, &self.spec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn run(spec: &ConvSpec, x: Tensor<f64>, w: Tensor<f64>) -> Result<Tensor<f64>> {
        let mut tape = Tape::eval();
        let (x, w) = (tape.input(x), tape.input(w));
        let y = tape.conv(x, w, None, spec)?;
        Ok(tape.value(y).clone())
    }

    #[test]
    fn hand_cross_correlation() {
        let spec = ConvSpec::square(1, 1, 2, 1).with_padding(0);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::full(&[1, 1, 2, 2], 1.0);
        let y = run(&spec, x, w).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.data(), &[10.0]);
    }

    #[test]
    fn no_kernel_flip() {
        // Kernel [[1,0],[0,0]] picks the top-left tap under cross-correlation.
        let spec = ConvSpec::square(1, 1, 2, 1).with_padding(0);
        let x = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::from_vec(&[1, 1, 2, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(run(&spec, x, w).unwrap().data(), &[1.0]);
    }

    #[test]
    fn zero_input_zero_output() {
        let spec = ConvSpec::cube(1, 3, 3, 1);
        let x = Tensor::zeros(&[1, 1, 4, 4, 4]);
        let w = Tensor::full(&spec.weight_shape(), 0.7);
        let y = run(&spec, x, w).unwrap();
        assert_eq!(y.shape(), &[1, 3, 4, 4, 4]);
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_kernel() {
        for spec in [ConvSpec::cube(1, 1, 1, 1), ConvSpec::square(1, 1, 1, 1)] {
            let shape: Vec<usize> = if spec.rank == 3 { vec![2, 1, 3, 4, 5] } else { vec![2, 1, 4, 5] };
            let n: usize = shape.iter().product();
            let x = Tensor::from_vec(&shape, (0..n).map(|i| i as f64 * 0.5 - 3.0).collect()).unwrap();
            let w = Tensor::full(&spec.weight_shape(), 1.0);
            assert_eq!(run(&spec, x.clone(), w).unwrap(), x);
        }
    }

    #[test]
    fn output_extent_formula() {
        let spec = ConvSpec::cube(1, 2, 3, 2);
        let x = Tensor::zeros(&[1, 1, 9, 8, 7]);
        let w = Tensor::zeros(&spec.weight_shape());
        // floor((n + 2 - 3) / 2) + 1
        assert_eq!(run(&spec, x, w).unwrap().shape(), &[1, 2, 5, 4, 4]);
    }

    #[test]
    fn channel_mismatch_names_axis() {
        let spec = ConvSpec::square(3, 2, 3, 1);
        let x = Tensor::zeros(&[1, 2, 5, 5]);
        let w = Tensor::zeros(&spec.weight_shape());
        assert_eq!(
            run(&spec, x, w).unwrap_err(),
            Error::AxisMismatch {
                op: "conv",
                axis: 1,
                expected: 3,
                actual: 2
            }
        );
    }

    #[test]
    fn wrong_rank_rejected() {
        let spec = ConvSpec::cube(1, 1, 3, 1);
        let err = run(&spec, Tensor::zeros(&[1, 1, 4, 4]), Tensor::zeros(&spec.weight_shape()));
        assert!(matches!(err, Err(Error::RankMismatch { expected: 5, actual: 4, .. })));
    }

    #[test]
    fn depthwise_keeps_channels_separate() {
        let spec = ConvSpec::square(2, 2, 1, 1).depthwise();
        let x = Tensor::from_vec(&[1, 2, 1, 2], vec![1.0, 2.0, 10.0, 20.0]).unwrap();
        let w = Tensor::from_vec(&[2, 1, 1, 1], vec![2.0, 3.0]).unwrap();
        assert_eq!(run(&spec, x, w).unwrap().data(), &[2.0, 4.0, 30.0, 60.0]);
    }

    #[test]
    fn strided_padded_matches_naive() {
        let spec = ConvSpec {
            rank: 3,
            in_channels: 2,
            out_channels: 3,
            kernel: [3, 2, 3],
            stride: [2, 1, 3],
            padding: [1, 0, 2],
            groups: 1,
            bias: false,
        };
        let in_shape = [2, 2, 5, 4, 7];
        let n: usize = in_shape.iter().product();
        let x: Vec<f64> = (0..n).map(|i| ((i * 37 % 11) as f64) - 5.0).collect();
        let ws = spec.weight_shape();
        let wn: usize = ws.iter().product();
        let w: Vec<f64> = (0..wn).map(|i| ((i * 13 % 7) as f64) * 0.25 - 0.5).collect();
        let y = run(
            &spec,
            Tensor::from_vec(&in_shape, x.clone()).unwrap(),
            Tensor::from_vec(&ws, w.clone()).unwrap(),
        )
        .unwrap();
        let os = y.shape().to_vec();
        let at = |b: usize, c: usize, d: isize, h: isize, ww: isize| -> f64 {
            if d < 0 || h < 0 || ww < 0 || d >= 5 || h >= 4 || ww >= 7 {
                return 0.0;
            }
            x[(((b * 2 + c) * 5 + d as usize) * 4 + h as usize) * 7 + ww as usize]
        };
        for b in 0..2 {
            for oc in 0..3 {
                for od in 0..os[2] {
                    for oh in 0..os[3] {
                        for ow in 0..os[4] {
                            let mut s = 0.0;
                            for ic in 0..2 {
                                for kd in 0..3 {
                                    for kh in 0..2 {
                                        for kw in 0..3 {
                                            let wv = w[(((oc * 2 + ic) * 3 + kd) * 2 + kh) * 3 + kw];
                                            s += wv
                                                * at(
                                                    b,
                                                    ic,
                                                    (od * 2 + kd) as isize - 1,
                                                    (oh + kh) as isize,
                                                    (ow * 3 + kw) as isize - 2,
                                                );
                                        }
                                    }
                                }
                            }
                            let got = y.data()[(((b * 3 + oc) * os[2] + od) * os[3] + oh) * os[4] + ow];
                            assert!((got - s).abs() < 1e-12, "{got} vs {s}");
                        }
                    }
                }
            }
        }
    }
}
