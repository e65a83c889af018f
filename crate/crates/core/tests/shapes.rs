use vesselnet_core::models::{build_model, Model2DSpec, Model3DSpec, ModelSpec};
use vesselnet_core::nn::{Tape, Tensor};

fn logits_shape(spec: ModelSpec, batch: usize) -> Vec<usize> {
    let (model, store) = build_model::<f32>(&spec, 0).unwrap();
    let mut shape = vec![batch];
    shape.extend(spec.sample_shape());
    let mut tape = Tape::eval();
    let x = tape.input(Tensor::full(&shape, 0.25));
    let y = model.forward(&mut tape, &store, x).unwrap();
    assert!(tape.value(y).is_finite());
    tape.shape(y).to_vec()
}

#[test]
fn full_size_volume_network() {
    assert_eq!(logits_shape(ModelSpec::Volume(Model3DSpec::b0()), 1), [1, 2]);
}

#[test]
fn full_size_view_network() {
    assert_eq!(logits_shape(ModelSpec::Views(Model2DSpec::tuned()), 1), [1, 2]);
}

#[test]
fn reduced_networks() {
    assert_eq!(logits_shape(ModelSpec::Volume(Model3DSpec::reduced()), 3), [3, 2]);
    let spec = Model2DSpec::new(1, 1, 1).with_input(16, 32);
    assert_eq!(logits_shape(ModelSpec::Views(spec), 3), [3, 2]);
}

#[test]
fn sampled_hyperparameter_grid() {
    for (m, n, p) in [(1, 1, 1), (10, 1, 1), (3, 10, 2), (2, 5, 10), (10, 10, 3)] {
        let spec = Model2DSpec::new(m, n, p).with_input(5, 7);
        assert_eq!(logits_shape(ModelSpec::Views(spec), 2), [2, 2], "m={m} n={n} p={p}");
    }
}
