use alloc::format;

use rand::Rng;

use super::{ActKind, BatchNorm, Conv, ConvSpec, ParamStore, Real, SqueezeExcitation, Tape, Var};
use crate::{Error, Result};

/// Mobile inverted-bottleneck block geometry (3D).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MbConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// 1 or 6.
    pub expansion: usize,
    pub kernel: [usize; 3],
    pub stride: [usize; 3],
    /// The squeeze layer has `max(1, expanded / se_reduction)` units.
    pub se_reduction: usize,
}

impl MbConvSpec {
    /// Cubic kernel and stride; squeeze width is a quarter of the block input,
    /// as in EfficientNet-B0.
    pub fn new(in_channels: usize, out_channels: usize, expansion: usize, kernel: usize, stride: usize) -> Self {
        MbConvSpec {
            in_channels,
            out_channels,
            expansion,
            kernel: [kernel; 3],
            stride: [stride; 3],
            se_reduction: 4 * expansion.max(1),
        }
    }

    pub fn expanded(&self) -> usize {
        self.in_channels * self.expansion
    }

    pub fn se_channels(&self) -> usize {
        (self.expanded() / self.se_reduction.max(1)).max(1)
    }

    /// Skip connection and drop-sample exist iff channels match and stride is 1.
    pub fn has_skip(&self) -> bool {
        self.in_channels == self.out_channels && self.stride == [1; 3]
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::invalid("mbconv spec", "channel counts must be positive"));
        }
        if self.expansion != 1 && self.expansion != 6 {
            return Err(Error::invalid(
                "mbconv spec",
                format!("expansion ratio {} (must be 1 or 6)", self.expansion),
            ));
        }
        if self.se_reduction == 0 || self.kernel.contains(&0) || self.stride.contains(&0) {
            return Err(Error::invalid("mbconv spec", "kernel, stride and se_reduction must be positive"));
        }
        Ok(())
    }

    fn depthwise_spec(&self) -> ConvSpec {
        let c = self.expanded();
        ConvSpec {
            rank: 3,
            in_channels: c,
            out_channels: c,
            kernel: self.kernel,
            stride: self.stride,
            padding: [self.kernel[0] / 2, self.kernel[1] / 2, self.kernel[2] / 2],
            groups: c,
            bias: false,
        }
    }
}

/// expand (1x1x1, skipped when the ratio is 1) → BN → SiLU → depthwise →
/// BN → SiLU → squeeze-excitation → project (1x1x1) → BN, plus the
/// drop-sampled skip branch when [`MbConvSpec::has_skip`].
#[derive(Clone, Debug)]
pub struct MbConv {
    pub spec: MbConvSpec,
    pub expand: Option<(Conv, BatchNorm)>,
    pub depthwise: (Conv, BatchNorm),
    pub se: SqueezeExcitation,
    pub project: (Conv, BatchNorm),
    pub survival_p: f64,
}

impl MbConv {
    pub fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: MbConvSpec,
        survival_p: f64,
    ) -> Result<Self> {
        spec.validate()?;
        let e = spec.expanded();
        let expand = if spec.expansion != 1 {
            Some((
                Conv::new(store, rng, &format!("{name}.expand"), ConvSpec::cube(spec.in_channels, e, 1, 1))?,
                BatchNorm::new(store, rng, &format!("{name}.expand_bn"), e)?,
            ))
        } else {
            None
        };
        let depthwise = (
            Conv::new(store, rng, &format!("{name}.depthwise"), spec.depthwise_spec())?,
            BatchNorm::new(store, rng, &format!("{name}.depthwise_bn"), e)?,
        );
        let se = SqueezeExcitation::new(store, rng, &format!("{name}.se"), e, spec.se_channels())?;
        let project = (
            Conv::new(store, rng, &format!("{name}.project"), ConvSpec::cube(e, spec.out_channels, 1, 1))?,
            BatchNorm::new(store, rng, &format!("{name}.project_bn"), spec.out_channels)?,
        );
        Ok(MbConv {
            spec,
            expand,
            depthwise,
            se,
            project,
            survival_p,
        })
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut h = x;
        if let Some((conv, bn)) = &self.expand {
            h = conv.forward(tape, store, h)?;
            h = bn.forward(tape, store, h)?;
            h = tape.activation(ActKind::Silu, h);
        }
        h = self.depthwise.0.forward(tape, store, h)?;
        h = self.depthwise.1.forward(tape, store, h)?;
        h = tape.activation(ActKind::Silu, h);
        h = self.se.forward(tape, store, h)?;
        h = self.project.0.forward(tape, store, h)?;
        h = self.project.1.forward(tape, store, h)?;
        if self.spec.has_skip() {
            h = tape.drop_sample(h, self.survival_p)?;
            h = tape.add(x, h)?;
        }
        Ok(h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_residual_path_is_pure_skip() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = MbConv::new(&mut store, &mut rng, "b", MbConvSpec::new(4, 4, 6, 3, 1), 0.5).unwrap();
        let ids: alloc::vec::Vec<_> = store.ids().collect();
        for id in ids {
            if store.kind(id) == crate::nn::ParamKind::Trainable {
                let shape = store.get(id).shape().to_vec();
                store.set(id, Tensor::zeros(&shape)).unwrap();
            }
        }
        let mut tape = Tape::eval();
        let data: alloc::vec::Vec<f64> = (0..2 * 4 * 27).map(|i| (i as f64).sin()).collect();
        let x = tape.input(Tensor::from_vec(&[2, 4, 3, 3, 3], data).unwrap());
        let y = block.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.value(y), tape.value(x));
    }

    #[test]
    fn expansion_width_and_skip_rules() {
        let spec = MbConvSpec::new(16, 24, 6, 3, 2);
        assert!(!spec.has_skip());
        assert_eq!(spec.expanded(), 96);
        assert!(!MbConvSpec::new(16, 24, 6, 3, 1).has_skip());
        assert!(!MbConvSpec::new(16, 16, 6, 3, 2).has_skip());
        assert!(MbConvSpec::new(16, 16, 6, 3, 1).has_skip());
        assert!(MbConvSpec::new(16, 16, 3, 3, 1).validate().is_err());
    }

    #[test]
    fn shapes_through_block() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let block = MbConv::new(&mut store, &mut rng, "b", MbConvSpec::new(16, 24, 6, 3, 2), 0.5).unwrap();
        let mut tape = Tape::eval();
        let x = tape.input(Tensor::full(&[1, 16, 4, 4, 4], 0.1));
        let expanded = block.expand.as_ref().unwrap().0.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(expanded)[1], 96);
        let y = block.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[1, 24, 2, 2, 2]);
    }
}
