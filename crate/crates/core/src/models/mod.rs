//! The two classifiers: a 3D EfficientNet over whole volumes and a
//! multi-view 2D network over projection triplets.

mod cnn2d;
mod efficientnet3d;

use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use cnn2d::{Cnn2d, FebFilters, Model2DSpec, VIEWS};
pub use efficientnet3d::{EfficientNet3d, Model3DSpec, StageSpec};

use crate::nn::{ParamStore, Real, Tape, Var};
use crate::Result;

#[derive(Clone, Debug, PartialEq)]
pub enum ModelSpec {
    Volume(Model3DSpec),
    Views(Model2DSpec),
}

impl ModelSpec {
    pub fn validate(&self) -> Result<()> {
        match self {
            ModelSpec::Volume(s) => s.validate(),
            ModelSpec::Views(s) => s.validate(),
        }
    }

    /// Shape of one input sample, without the batch axis.
    pub fn sample_shape(&self) -> Vec<usize> {
        match self {
            ModelSpec::Volume(s) => {
                let [d, h, w] = s.input_dims;
                alloc::vec![1, d, h, w]
            }
            ModelSpec::Views(s) => alloc::vec![VIEWS, s.input[0], s.input[1]],
        }
    }
}

#[derive(Clone, Debug)]
pub enum Model {
    Volume(EfficientNet3d),
    Views(Cnn2d),
}

impl Model {
    pub fn spec(&self) -> ModelSpec {
        match self {
            Model::Volume(m) => ModelSpec::Volume(m.spec.clone()),
            Model::Views(m) => ModelSpec::Views(m.spec.clone()),
        }
    }

    /// Batch of samples to `[B, 2]` logits.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Model::Volume(m) => m.forward(tape, store, x),
            Model::Views(m) => m.forward(tape, store, x),
        }
    }
}

/// Registers and initializes all parameters; the same seed gives the same
/// values and names.
pub fn build_model<T: Real>(spec: &ModelSpec, seed: u64) -> Result<(Model, ParamStore<T>)> {
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let model = match spec {
        ModelSpec::Volume(s) => Model::Volume(EfficientNet3d::new(&mut store, &mut rng, s)?),
        ModelSpec::Views(s) => Model::Views(Cnn2d::new(&mut store, &mut rng, s)?),
    };
    Ok((model, store))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_parameters() {
        let spec = ModelSpec::Views(Model2DSpec::new(2, 2, 1).with_input(8, 8));
        let (_, a) = build_model::<f32>(&spec, 9).unwrap();
        let (_, b) = build_model::<f32>(&spec, 9).unwrap();
        let (_, c) = build_model::<f32>(&spec, 10).unwrap();
        let flat = |s: &ParamStore<f32>| -> Vec<u32> {
            s.iter().flat_map(|(_, _, _, t)| t.data().iter().map(|v| v.to_bits())).collect()
        };
        assert_eq!(flat(&a), flat(&b));
        assert_ne!(flat(&a), flat(&c));
        let names = |s: &ParamStore<f32>| -> Vec<alloc::string::String> { s.iter().map(|(_, n, _, _)| n.into()).collect() };
        assert_eq!(names(&a), names(&c));
    }

    #[test]
    fn invalid_spec_rejected() {
        let spec = ModelSpec::Views(Model2DSpec::new(0, 4, 6));
        assert!(build_model::<f32>(&spec, 0).is_err());
    }
}
