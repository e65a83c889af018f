use alloc::format;
use alloc::vec::Vec;

use rand::Rng;

use crate::nn::{ActKind, BatchNorm, Conv, ConvSpec, Dense, ParamStore, PoolKind, Real, Tape, Var};
use crate::{Error, Result};

/// Filter counts of the `n` plain conv layers of the feature extractor.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FebFilters {
    /// Every layer has `4 * (n + 1)` filters.
    Constant,
    /// Layer `i` (1-based) has `4 * (i + 1)` filters.
    Indexed,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Model2DSpec {
    /// Hidden dense layers, each `6 * m` wide.
    pub m: usize,
    /// Plain 3x3 conv layers in the feature extractor.
    pub n: usize,
    /// Inception blocks after the conv layers.
    pub p: usize,
    /// One extractor for all three views instead of one per view.
    pub feb_shared: bool,
    pub filters: FebFilters,
    pub dropout_rate: f64,
    pub classes: usize,
    /// `[rows, cols]` of each view image.
    pub input: [usize; 2],
}

impl Model2DSpec {
    pub fn new(m: usize, n: usize, p: usize) -> Self {
        Model2DSpec {
            m,
            n,
            p,
            feb_shared: true,
            filters: FebFilters::Constant,
            dropout_rate: 0.2,
            classes: 2,
            input: [200, 400],
        }
    }

    /// m = 1, n = 4, p = 6 on 200x400 views.
    pub fn tuned() -> Self {
        Self::new(1, 4, 6)
    }

    pub fn with_input(mut self, rows: usize, cols: usize) -> Self {
        self.input = [rows, cols];
        self
    }

    pub fn conv_widths(&self) -> Vec<usize> {
        (1..=self.n)
            .map(|i| match self.filters {
                FebFilters::Constant => 4 * (self.n + 1),
                FebFilters::Indexed => 4 * (i + 1),
            })
            .collect()
    }

    /// Channels leaving the feature extractor.
    pub fn feature_channels(&self) -> usize {
        4 * (self.n + 1)
    }

    pub fn hidden_width(&self) -> usize {
        6 * self.m
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("m", self.m), ("n", self.n), ("p", self.p)] {
            if !(1..=10).contains(&v) {
                return Err(Error::invalid("2D model spec", format!("{name} = {v} is outside 1..=10")));
            }
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::invalid("2D model spec", "dropout rate must be in [0, 1)"));
        }
        if self.classes != 2 {
            return Err(Error::invalid("2D model spec", "classes must be 2"));
        }
        if self.input.contains(&0) {
            return Err(Error::invalid("2D model spec", "input size must be positive"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
struct ConvBnRelu {
    conv: Conv,
    bn: BatchNorm,
}

impl ConvBnRelu {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
    ) -> Result<Self> {
        Ok(ConvBnRelu {
            conv: Conv::new(store, rng, &format!("{name}.conv"), ConvSpec::square(cin, cout, k, 1))?,
            bn: BatchNorm::new(store, rng, &format!("{name}.bn"), cout)?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let y = self.conv.forward(tape, store, x)?;
        let y = self.bn.forward(tape, store, y)?;
        Ok(tape.activation(ActKind::Relu, y))
    }
}

/// Inception-A: 1x1 | 1x1-3x3 | 1x1-3x3-3x3 | avgpool-1x1, each a quarter of
/// the channels, concatenated. Width and resolution are preserved.
#[derive(Clone, Debug)]
struct Inception {
    single: ConvBnRelu,
    double: [ConvBnRelu; 2],
    triple: [ConvBnRelu; 3],
    pooled: ConvBnRelu,
}

impl Inception {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        channels: usize,
    ) -> Result<Self> {
        let q = channels / 4;
        let mut unit = |branch: &str, cin, k| ConvBnRelu::new(store, rng, &format!("{name}.{branch}"), cin, q, k);
        Ok(Inception {
            single: unit("b1", channels, 1)?,
            double: [unit("b2a", channels, 1)?, unit("b2b", q, 3)?],
            triple: [unit("b3a", channels, 1)?, unit("b3b", q, 3)?, unit("b3c", q, 3)?],
            pooled: unit("b4", channels, 1)?,
        })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let a = self.single.forward(tape, store, x)?;
        let mut b = x;
        for u in &self.double {
            b = u.forward(tape, store, b)?;
        }
        let mut c = x;
        for u in &self.triple {
            c = u.forward(tape, store, c)?;
        }
        let d = tape.avg_pool(x, 3)?;
        let d = self.pooled.forward(tape, store, d)?;
        tape.concat(&[a, b, c, d])
    }
}

/// Feature extraction block: `n` 3x3 conv layers then `p` inception blocks.
#[derive(Clone, Debug)]
struct FeatureExtractor {
    convs: Vec<ConvBnRelu>,
    blocks: Vec<Inception>,
}

impl FeatureExtractor {
    fn new<T: Real, R: Rng + ?Sized>(
        store: &mut ParamStore<T>,
        rng: &mut R,
        name: &str,
        spec: &Model2DSpec,
    ) -> Result<Self> {
        let mut convs = Vec::new();
        let mut cin = 1;
        for (i, w) in spec.conv_widths().into_iter().enumerate() {
            convs.push(ConvBnRelu::new(store, rng, &format!("{name}.conv{i}"), cin, w, 3)?);
            cin = w;
        }
        let blocks = (0..spec.p)
            .map(|i| Inception::new(store, rng, &format!("{name}.inception{i}"), cin))
            .collect::<Result<_>>()?;
        Ok(FeatureExtractor { convs, blocks })
    }

    fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let mut y = x;
        for c in &self.convs {
            y = c.forward(tape, store, y)?;
        }
        for b in &self.blocks {
            y = b.forward(tape, store, y)?;
        }
        Ok(y)
    }
}

/// Multi-view classifier: per-view feature extraction, mean over views,
/// global max pool, `m` ReLU dense layers with dropout, dense to logits.
#[derive(Clone, Debug)]
pub struct Cnn2d {
    pub spec: Model2DSpec,
    extractors: Vec<FeatureExtractor>,
    hidden: Vec<Dense>,
    classifier: Dense,
}

pub const VIEWS: usize = 3;

impl Cnn2d {
    pub fn new<T: Real, R: Rng + ?Sized>(store: &mut ParamStore<T>, rng: &mut R, spec: &Model2DSpec) -> Result<Self> {
        spec.validate()?;
        let extractors = if spec.feb_shared {
            alloc::vec![FeatureExtractor::new(store, rng, "feb", spec)?]
        } else {
            (0..VIEWS)
                .map(|v| FeatureExtractor::new(store, rng, &format!("feb{v}"), spec))
                .collect::<Result<_>>()?
        };
        let mut hidden = Vec::new();
        let mut width = spec.feature_channels();
        for i in 0..spec.m {
            hidden.push(Dense::new(store, rng, &format!("dense{i}"), width, spec.hidden_width())?);
            width = spec.hidden_width();
        }
        let classifier = Dense::new(store, rng, "classifier", width, spec.classes)?;
        Ok(Cnn2d {
            spec: spec.clone(),
            extractors,
            hidden,
            classifier,
        })
    }

    /// Number of plain conv layers in each feature extractor.
    pub fn conv_layers(&self) -> usize {
        self.extractors[0].convs.len()
    }

    /// `[B, 3, rows, cols]` to `[B, 2]` logits.
    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.len() != 4 {
            return Err(Error::RankMismatch {
                op: "cnn2d",
                expected: 4,
                actual: s.len(),
            });
        }
        if s[1] != VIEWS {
            return Err(Error::AxisMismatch {
                op: "cnn2d",
                axis: 1,
                expected: VIEWS,
                actual: s[1],
            });
        }
        if s[2..] != self.spec.input {
            return Err(Error::shape(
                "cnn2d",
                format!("views are {}x{}, expected {}x{}", s[2], s[3], self.spec.input[0], self.spec.input[1]),
            ));
        }
        let features = if self.spec.feb_shared {
            let stacked = tape.reshape(x, &[s[0] * VIEWS, 1, s[2], s[3]])?;
            let f = self.extractors[0].forward(tape, store, stacked)?;
            tape.group_mean(f, VIEWS)?
        } else {
            let mut per_view = Vec::with_capacity(VIEWS);
            for (v, feb) in self.extractors.iter().enumerate() {
                let view = tape.select_channel(x, v)?;
                per_view.push(feb.forward(tape, store, view)?);
            }
            tape.mean_of(&per_view)?
        };
        let mut y = tape.global_pool(PoolKind::Max, features)?;
        for d in &self.hidden {
            y = d.forward(tape, store, y)?;
            y = tape.activation(ActKind::Relu, y);
            y = tape.dropout(y, self.spec.dropout_rate)?;
        }
        self.classifier.forward(tape, store, y)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;
    use alloc::vec;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small() -> Model2DSpec {
        Model2DSpec::new(1, 1, 1).with_input(6, 8)
    }

    fn build(spec: &Model2DSpec) -> (Cnn2d, ParamStore<f64>) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let net = Cnn2d::new(&mut store, &mut rng, spec).unwrap();
        (net, store)
    }

    fn views(seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..3 * 48).map(|_| rng.gen_range(0.0..1.0)).collect()
    }

    fn logits(net: &Cnn2d, store: &ParamStore<f64>, data: Vec<f64>) -> Vec<f64> {
        let mut tape = Tape::eval();
        let x = tape.input(Tensor::from_vec(&[1, 3, 6, 8], data).unwrap());
        let y = net.forward(&mut tape, store, x).unwrap();
        tape.value(y).data().to_vec()
    }

    #[test]
    fn filter_readings() {
        let mut spec = Model2DSpec::tuned();
        assert_eq!(spec.conv_widths(), vec![20; 4]);
        spec.filters = FebFilters::Indexed;
        assert_eq!(spec.conv_widths(), vec![8, 12, 16, 20]);
        assert_eq!(spec.feature_channels(), 20);
        assert_eq!(spec.hidden_width(), 6);
    }

    #[test]
    fn hyperparameter_range() {
        for (m, n, p) in [(0, 1, 1), (1, 0, 1), (1, 1, 11)] {
            assert!(Model2DSpec::new(m, n, p).validate().is_err());
        }
        Model2DSpec::new(10, 10, 10).validate().unwrap();
    }

    #[test]
    fn four_conv_layers_for_n4() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let net = Cnn2d::new(&mut store, &mut rng, &Model2DSpec::new(1, 4, 1)).unwrap();
        assert_eq!(net.conv_layers(), 4);
        assert!(store.id("feb.conv3.conv.weight").is_some());
        assert!(store.id("feb.conv4.conv.weight").is_none());
    }

    #[test]
    fn view_order_does_not_matter() {
        let (net, store) = build(&small());
        let data = views(1);
        let base = logits(&net, &store, data.clone());
        for perm in [[1, 0, 2], [2, 1, 0], [1, 2, 0]] {
            let permuted: Vec<f64> = perm.iter().flat_map(|&v| data[v * 48..(v + 1) * 48].to_vec()).collect();
            assert_eq!(logits(&net, &store, permuted), base);
        }
    }

    #[test]
    fn replicated_views_match_single_view_pass() {
        let (net, store) = build(&small());
        let one = views(2)[..48].to_vec();
        let tripled: Vec<f64> = one.iter().chain(&one).chain(&one).copied().collect();
        let got = logits(&net, &store, tripled);
        // single view: features without averaging
        let mut tape = Tape::eval();
        let x = tape.input(Tensor::from_vec(&[1, 1, 6, 8], one).unwrap());
        let mut y = net.extractors[0].forward(&mut tape, &store, x).unwrap();
        y = tape.global_pool(PoolKind::Max, y).unwrap();
        for d in &net.hidden {
            y = d.forward(&mut tape, &store, y).unwrap();
            y = tape.activation(ActKind::Relu, y);
        }
        y = net.classifier.forward(&mut tape, &store, y).unwrap();
        for (a, b) in got.iter().zip(tape.value(y).data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn wrong_view_count_names_axis() {
        let (net, store) = build(&small());
        let mut tape = Tape::eval();
        let x = tape.input(Tensor::zeros(&[1, 2, 6, 8]));
        assert!(matches!(
            net.forward(&mut tape, &store, x),
            Err(Error::AxisMismatch { axis: 1, expected: 3, actual: 2, .. })
        ));
    }

    #[test]
    fn separate_extractors_mode() {
        let mut spec = small();
        spec.feb_shared = false;
        let (net, store) = build(&spec);
        assert!(store.id("feb2.conv0.conv.weight").is_some());
        assert_eq!(logits(&net, &store, views(4)).len(), 2);
    }
}
