use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{
    ActKind, BatchNorm, Conv, ConvSpec, Dense, MbConv, MbConvSpec, ParamStore, PoolKind, Real, Tape, Var,
};
use crate::{Error, Result};

/// One row of the stage table: `repeats` MBConv blocks sharing a width.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StageSpec {
    pub expansion: usize,
    pub channels: usize,
    pub repeats: usize,
    pub kernel: usize,
    /// Applied by the first block of the stage only.
    pub stride: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model3DSpec {
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    pub stages: Vec<StageSpec>,
    pub head_channels: usize,
    /// `[depth, height, width]` of the input volume.
    pub input_dims: [usize; 3],
    pub classes: usize,
    pub survival_p: f64,
}

const fn stage(expansion: usize, channels: usize, repeats: usize, kernel: usize, stride: usize) -> StageSpec {
    StageSpec {
        expansion,
        channels,
        repeats,
        kernel,
        stride,
    }
}

impl Model3DSpec {
    /// EfficientNet-B0 layout with cubic kernels on a 128x64x128 volume.
    pub fn b0() -> Self {
        Model3DSpec {
            stem_channels: 32,
            stem_kernel: 3,
            stem_stride: 2,
            stages: alloc::vec![
                stage(1, 16, 1, 3, 1),
                stage(6, 24, 2, 3, 2),
                stage(6, 40, 2, 5, 2),
                stage(6, 80, 3, 3, 2),
                stage(6, 112, 3, 5, 1),
                stage(6, 192, 4, 5, 2),
                stage(6, 320, 1, 3, 1),
            ],
            head_channels: 1280,
            input_dims: [128, 64, 128],
            classes: 2,
            survival_p: 0.5,
        }
    }

    /// Two-stage network on a 32x16x32 volume for fast tests.
    pub fn reduced() -> Self {
        Model3DSpec {
            stem_channels: 8,
            stem_kernel: 3,
            stem_stride: 2,
            stages: alloc::vec![stage(1, 8, 1, 3, 1), stage(6, 16, 1, 3, 2)],
            head_channels: 32,
            input_dims: [32, 16, 32],
            classes: 2,
            survival_p: 0.5,
        }
    }

    pub fn stem_spec(&self) -> ConvSpec {
        ConvSpec::cube(1, self.stem_channels, self.stem_kernel, self.stem_stride)
    }

    /// Every MBConv block in order, with channel counts chained.
    pub fn blocks(&self) -> Vec<MbConvSpec> {
        let mut out = Vec::new();
        let mut channels = self.stem_channels;
        for s in &self.stages {
            for r in 0..s.repeats {
                let stride = if r == 0 { s.stride } else { 1 };
                out.push(MbConvSpec::new(channels, s.channels, s.expansion, s.kernel, stride));
                channels = s.channels;
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |detail: &str| Err(Error::invalid("3D model spec", detail));
        if self.input_dims.contains(&0) {
            return bad("input dims must be positive");
        }
        if self.stem_channels == 0 || self.head_channels == 0 || self.stem_kernel == 0 || self.stem_stride == 0 {
            return bad("stem and head sizes must be positive");
        }
        if self.classes != 2 {
            return bad("classes must be 2");
        }
        if !(self.survival_p > 0.0 && self.survival_p <= 1.0) {
            return bad("survival_p must be in (0, 1]");
        }
        if self.stages.is_empty() {
            return bad("stage table is empty");
        }
        for (i, s) in self.stages.iter().enumerate() {
            let want = if i == 0 { 1 } else { 6 };
            if s.expansion != want {
                return Err(Error::invalid(
                    "3D model spec",
                    format!("stage {i} has expansion {} (first stage 1, later stages 6)", s.expansion),
                ));
            }
            if s.repeats == 0 || s.channels == 0 || s.kernel == 0 || s.stride == 0 {
                return Err(Error::invalid("3D model spec", format!("stage {i} has a zero entry")));
            }
        }
        let mut dims = self.stem_spec().output_dims(&self.input_dims)?;
        for b in self.blocks() {
            b.validate()?;
            let dw = ConvSpec {
                kernel: b.kernel,
                stride: b.stride,
                padding: [b.kernel[0] / 2, b.kernel[1] / 2, b.kernel[2] / 2],
                ..ConvSpec::cube(1, 1, 1, 1)
            };
            dims = dw.output_dims(&dims)?;
        }
        Ok(())
    }
}

/// Stem conv, MBConv stages, 1x1x1 head, global average pool, dense.
#[derive(Clone, Debug)]
pub struct EfficientNet3d {
    pub spec: Model3DSpec,
    stem: (Conv, BatchNorm),
    blocks: Vec<MbConv>,
    head: (Conv, BatchNorm),
    classifier: Dense,
}

impl EfficientNet3d {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, spec: &Model3DSpec) -> Result<Self> {
        spec.validate()?;
        let stem = (
            Conv::new(store, rng, "stem.conv", spec.stem_spec())?,
            BatchNorm::new(store, rng, "stem.bn", spec.stem_channels)?,
        );
        let mut blocks = Vec::new();
        for (i, b) in spec.blocks().into_iter().enumerate() {
            blocks.push(MbConv::new(store, rng, &format!("block{i}"), b, spec.survival_p)?);
        }
        let last = spec.stages.last().map_or(spec.stem_channels, |s| s.channels);
        let head = (
            Conv::new(store, rng, "head.conv", ConvSpec::cube(last, spec.head_channels, 1, 1))?,
            BatchNorm::new(store, rng, "head.bn", spec.head_channels)?,
        );
        let classifier = Dense::new(store, rng, "classifier", spec.head_channels, spec.classes)?;
        Ok(EfficientNet3d {
            spec: spec.clone(),
            stem,
            blocks,
            head,
            classifier,
        })
    }

    /// `[B, 1, D, H, W]` to `[B, 2]` logits.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x);
        let [d, h, w] = self.spec.input_dims;
        if s.len() != 5 || s[1] != 1 || s[2..] != [d, h, w] {
            return Err(Error::shape(
                "efficientnet3d",
                format!("input {s:?}, expected [B, 1, {d}, {h}, {w}]"),
            ));
        }
        let mut y = self.stem.0.forward(tape, store, x)?;
        y = self.stem.1.forward(tape, store, y)?;
        y = tape.activation(ActKind::Silu, y);
        for b in &self.blocks {
            y = b.forward(tape, store, y)?;
        }
        y = self.head.0.forward(tape, store, y)?;
        y = self.head.1.forward(tape, store, y)?;
        y = tape.activation(ActKind::Silu, y);
        y = tape.global_pool(PoolKind::Avg, y)?;
        self.classifier.forward(tape, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn reduced_parameter_count_by_hand() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        EfficientNet3d::new(&mut store, &mut rng, &Model3DSpec::reduced()).unwrap();
        let bn = |c: usize| 2 * c;
        let dense = |i: usize, o: usize| i * o + o;
        let stem = 8 * 27 + bn(8);
        // 8 -> 8, no expansion, squeeze to 2
        let block0 = 8 * 27 + bn(8) + dense(8, 2) + dense(2, 8) + 8 * 8 + bn(8);
        // 8 -> 48 -> 16, squeeze to 2
        let block1 = 8 * 48 + bn(48) + 48 * 27 + bn(48) + dense(48, 2) + dense(2, 48) + 48 * 16 + bn(16);
        let head = 16 * 32 + bn(32) + dense(32, 2);
        assert_eq!(stem + block0 + block1 + head, 4142);
        assert_eq!(store.trainable_count(), 4142);
    }

    #[test]
    fn b0_block_table() {
        let spec = Model3DSpec::b0();
        let blocks = spec.blocks();
        assert_eq!(blocks.len(), 16);
        assert_eq!(blocks[0].in_channels, 32);
        assert_eq!(blocks[0].expansion, 1);
        assert_eq!(blocks.last().unwrap().out_channels, 320);
        for w in blocks.windows(2) {
            assert_eq!(w[0].out_channels, w[1].in_channels);
        }
        spec.validate().unwrap();
    }

    #[test]
    fn rejects_bad_expansion_order() {
        let mut spec = Model3DSpec::reduced();
        spec.stages[0].expansion = 6;
        assert!(spec.validate().is_err());
        let mut spec = Model3DSpec::reduced();
        spec.stages[1].expansion = 1;
        assert!(spec.validate().is_err());
    }

    #[test]
    fn reduced_forward_shape_and_zero_input() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let net = EfficientNet3d::new(&mut store, &mut rng, &Model3DSpec::reduced()).unwrap();
        let mut tape = Tape::eval();
        let x = tape.input(Tensor::zeros(&[2, 1, 32, 16, 32]));
        let y = net.forward(&mut tape, &store, x).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert!(tape.value(y).is_finite());
        let bad = tape.input(Tensor::zeros(&[1, 1, 16, 16, 32]));
        assert!(net.forward(&mut tape, &store, bad).is_err());
    }
}
