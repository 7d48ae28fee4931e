//! The feature extractor, the prototype set with its distance-based
//! classifier, and the entropy domain discriminator that shares the
//! classifier's parameters.

use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::diffcore::{matmul, pairwise_sqdist, relu_backward, relu_forward, Matrix};
use crate::error::{Error, Result};

/// One fully-connected layer: `y = x W + b`.
#[derive(Debug, Clone)]
pub struct DenseLayer {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Multilayer perceptron mapping inputs to the embedding space. Rectifier
/// after every layer except the last; the final layer is linear.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    layers: Vec<DenseLayer>,
}

/// Intermediate state of one forward pass, kept for backpropagation.
pub struct ForwardTrace {
    input: Matrix,
    pre_activations: Vec<Matrix>,
    activations: Vec<Matrix>,
}

impl ForwardTrace {
    pub fn output(&self) -> &Matrix {
        self.activations
            .last()
            .expect("trace always holds at least one layer")
    }
}

/// Parameter gradients for every layer of the extractor.
pub struct ExtractorGrads {
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
}

impl FeatureExtractor {
    /// Builds layers for the dimension chain `dims = [in, h1, ..., d]` with
    /// uniform fan-in initialization (+-sqrt(6/(in+out))) and zero biases.
    pub fn new(dims: &[usize], rng: &mut impl Rng) -> Result<Self> {
        if dims.len() < 2 {
            return Err(Error::Config(
                "extractor needs at least an input and an output dimension".into(),
            ));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("extractor layer dimensions must be nonzero".into()));
        }
        let mut layers = Vec::with_capacity(dims.len() - 1);
        for w in dims.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let dist = Uniform::new_inclusive(-limit, limit)
                .map_err(|e| Error::Config(format!("init distribution: {e}")))?;
            let data = (0..fan_in * fan_out).map(|_| dist.sample(rng)).collect();
            layers.push(DenseLayer {
                weight: Matrix::from_vec(fan_in, fan_out, data)?,
                bias: vec![0.0; fan_out],
            });
        }
        Ok(FeatureExtractor { layers })
    }

    pub fn from_layers(layers: Vec<DenseLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::Config("extractor needs at least one layer".into()));
        }
        for (i, pair) in layers.windows(2).enumerate() {
            if pair[0].weight.cols() != pair[1].weight.rows() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} outputs {} but layer {} expects {}",
                    i,
                    pair[0].weight.cols(),
                    i + 1,
                    pair[1].weight.rows()
                )));
            }
        }
        for (i, layer) in layers.iter().enumerate() {
            if layer.bias.len() != layer.weight.cols() {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} bias length {} vs weight cols {}",
                    i,
                    layer.bias.len(),
                    layer.weight.cols()
                )));
            }
        }
        Ok(FeatureExtractor { layers })
    }

    pub fn layers(&self) -> &[DenseLayer] {
        &self.layers
    }

    pub fn layers_mut(&mut self) -> &mut [DenseLayer] {
        &mut self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().unwrap().weight.cols()
    }

    /// The dimension chain `[in, h1, ..., d]`.
    pub fn dims(&self) -> Vec<usize> {
        let mut dims = vec![self.input_dim()];
        dims.extend(self.layers.iter().map(|l| l.weight.cols()));
        dims
    }

    /// Forward pass: `x` is N x in, result is N x d.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix> {
        let mut trace = self.forward_trace(x)?;
        Ok(trace.activations.pop().unwrap())
    }

    /// Forward pass retaining per-layer pre-activations for `backward`.
    pub fn forward_trace(&self, x: &Matrix) -> Result<ForwardTrace> {
        if x.cols() != self.input_dim() {
            return Err(Error::ShapeMismatch(format!(
                "extractor expects {} input columns, got {}",
                self.input_dim(),
                x.cols()
            )));
        }
        let last = self.layers.len() - 1;
        let mut pre_activations = Vec::with_capacity(self.layers.len());
        let mut activations = Vec::with_capacity(self.layers.len());
        let mut current = x.clone();
        for (l, layer) in self.layers.iter().enumerate() {
            let mut pre = matmul(&current, &layer.weight)?;
            for i in 0..pre.rows() {
                let row = pre.row_mut(i);
                for (v, b) in row.iter_mut().zip(&layer.bias) {
                    *v += b;
                }
            }
            let act = if l < last { relu_forward(&pre) } else { pre.clone() };
            pre_activations.push(pre);
            activations.push(act.clone());
            current = act;
        }
        Ok(ForwardTrace {
            input: x.clone(),
            pre_activations,
            activations,
        })
    }

    /// Backpropagates `upstream = dL/d(output)` through the trace, producing
    /// parameter gradients for every layer.
    pub fn backward(&self, trace: &ForwardTrace, upstream: &Matrix) -> Result<ExtractorGrads> {
        let n_layers = self.layers.len();
        if upstream.shape() != trace.output().shape() {
            return Err(Error::ShapeMismatch(format!(
                "upstream {}x{} vs extractor output {}x{}",
                upstream.rows(),
                upstream.cols(),
                trace.output().rows(),
                trace.output().cols()
            )));
        }
        let mut weight_grads = vec![Matrix::zeros(0, 0); n_layers];
        let mut bias_grads = vec![Vec::new(); n_layers];
        let mut delta = upstream.clone();
        for l in (0..n_layers).rev() {
            let input = if l == 0 {
                &trace.input
            } else {
                &trace.activations[l - 1]
            };
            weight_grads[l] = matmul(&input.transpose(), &delta)?;
            let mut bias = vec![0.0; delta.cols()];
            for i in 0..delta.rows() {
                for (acc, v) in bias.iter_mut().zip(delta.row(i)) {
                    *acc += v;
                }
            }
            bias_grads[l] = bias;
            if l > 0 {
                let da = matmul(&delta, &self.layers[l].weight.transpose())?;
                delta = relu_backward(&trace.pre_activations[l - 1], &da)?;
            }
        }
        Ok(ExtractorGrads {
            weights: weight_grads,
            biases: bias_grads,
        })
    }
}

/// The class prototypes (one embedding-space row per class) and the softmax
/// temperature of the distance classifier.
#[derive(Debug, Clone)]
pub struct PrototypeSet {
    prototypes: Matrix,
    temperature: f64,
}

impl PrototypeSet {
    pub fn new(prototypes: Matrix, temperature: f64) -> Result<Self> {
        if prototypes.rows() < 2 {
            return Err(Error::Config(format!(
                "need at least 2 classes, got {}",
                prototypes.rows()
            )));
        }
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        if !prototypes.is_finite() {
            return Err(Error::NonFinite("prototypes".into()));
        }
        Ok(PrototypeSet {
            prototypes,
            temperature,
        })
    }

    /// Gaussian initialization with standard deviation 0.01; prototypes are
    /// then trained by gradient like any other parameter group.
    pub fn init(class_count: usize, embed_dim: usize, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, 0.01).expect("valid normal");
        let data = (0..class_count * embed_dim)
            .map(|_| normal.sample(rng))
            .collect();
        PrototypeSet::new(Matrix::from_vec(class_count, embed_dim, data)?, 10.0)
    }

    pub fn with_temperature(mut self, temperature: f64) -> Result<Self> {
        if !(temperature > 0.0) {
            return Err(Error::Config(format!("temperature must be > 0, got {temperature}")));
        }
        self.temperature = temperature;
        Ok(self)
    }

    pub fn class_count(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn embed_dim(&self) -> usize {
        self.prototypes.cols()
    }

    pub fn temperature(&self) -> f64 {
        self.temperature
    }

    pub fn prototypes(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn prototypes_mut(&mut self) -> &mut Matrix {
        &mut self.prototypes
    }

    /// Squared distances of every feature row to every prototype.
    pub fn sqdists(&self, features: &Matrix) -> Result<Matrix> {
        pairwise_sqdist(features, &self.prototypes)
    }

    /// Class posteriors: softmax over `-d(f, p_j) / T`, row-max subtracted
    /// before exponentiation. Each row sums to 1.
    pub fn posteriors(&self, features: &Matrix) -> Result<Matrix> {
        if !features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        let d = self.sqdists(features)?;
        let mut out = Matrix::zeros(d.rows(), d.cols());
        for i in 0..d.rows() {
            let logits: Vec<f64> = d.row(i).iter().map(|&v| -v / self.temperature).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let row = out.row_mut(i);
            let mut sum = 0.0;
            for (slot, &z) in row.iter_mut().zip(&logits) {
                let e = (z - max).exp();
                *slot = e;
                sum += e;
            }
            for slot in row.iter_mut() {
                *slot /= sum;
            }
        }
        Ok(out)
    }

    /// Log of `posteriors`, computed via log-sum-exp so tiny probabilities
    /// keep full precision.
    pub fn log_posteriors(&self, features: &Matrix) -> Result<Matrix> {
        if !features.is_finite() {
            return Err(Error::NonFinite("features".into()));
        }
        let d = self.sqdists(features)?;
        let mut out = Matrix::zeros(d.rows(), d.cols());
        for i in 0..d.rows() {
            let logits: Vec<f64> = d.row(i).iter().map(|&v| -v / self.temperature).collect();
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max
                + logits
                    .iter()
                    .map(|&z| (z - max).exp())
                    .sum::<f64>()
                    .ln();
            for (slot, &z) in out.row_mut(i).iter_mut().zip(&logits) {
                *slot = z - lse;
            }
        }
        Ok(out)
    }

    /// Nearest-prototype labels; ties break toward the lowest class index.
    /// Identical to the argmax of `posteriors` for every temperature.
    pub fn classify(&self, features: &Matrix) -> Result<Vec<usize>> {
        let d = self.sqdists(features)?;
        let mut labels = Vec::with_capacity(d.rows());
        for i in 0..d.rows() {
            let row = d.row(i);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate() {
                if v < row[best] {
                    best = j;
                }
            }
            labels.push(best);
        }
        Ok(labels)
    }

    /// Domain score of each feature row: the normalized prediction entropy
    /// `-(1/ln M) sum_j P(j|f) ln P(j|f)`, in [0, 1]. High entropy reads as
    /// target-like, low as source-like.
    pub fn discriminate(&self, features: &Matrix) -> Result<Vec<f64>> {
        if self.class_count() < 2 {
            return Err(Error::Config(
                "discriminator needs at least 2 classes to normalize entropy".into(),
            ));
        }
        let post = self.posteriors(features)?;
        Ok((0..post.rows())
            .map(|i| normalized_entropy(post.row(i)))
            .collect())
    }
}

/// Entropy of a probability row normalized by `ln M`, so the uniform row maps
/// to exactly 1.0 and a one-hot row to 0.0.
pub fn normalized_entropy(row: &[f64]) -> f64 {
    let m = row.len();
    debug_assert!(m >= 2);
    // A bitwise-uniform row is the exact maximum; short-circuit so the
    // normalized value is 1.0 rather than 1.0 +- a few ulps.
    if row.windows(2).all(|w| w[0] == w[1]) {
        return 1.0;
    }
    let mut h = 0.0;
    for &p in row {
        if p > 0.0 {
            h -= p * p.ln();
        }
    }
    (h / (m as f64).ln()).clamp(0.0, 1.0)
}

/// The trainable state: extractor parameters plus the prototype set.
#[derive(Debug, Clone)]
pub struct ModelState {
    pub extractor: FeatureExtractor,
    pub prototypes: PrototypeSet,
}

impl ModelState {
    pub fn init(
        input_dim: usize,
        hidden_dims: &[usize],
        embed_dim: usize,
        class_count: usize,
        temperature: f64,
        rng: &mut impl Rng,
    ) -> Result<Self> {
        let mut dims = vec![input_dim];
        dims.extend_from_slice(hidden_dims);
        dims.push(embed_dim);
        let extractor = FeatureExtractor::new(&dims, rng)?;
        let prototypes = PrototypeSet::init(class_count, embed_dim, rng)?.with_temperature(temperature)?;
        Ok(ModelState {
            extractor,
            prototypes,
        })
    }

    pub fn new(extractor: FeatureExtractor, prototypes: PrototypeSet) -> Result<Self> {
        if extractor.output_dim() != prototypes.embed_dim() {
            return Err(Error::ShapeMismatch(format!(
                "extractor emits {} dims but prototypes live in {}",
                extractor.output_dim(),
                prototypes.embed_dim()
            )));
        }
        Ok(ModelState {
            extractor,
            prototypes,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        let file = ModelStateFile {
            schema: MODEL_SCHEMA.to_string(),
            layer_dims: self.extractor.dims(),
            weights: self
                .extractor
                .layers()
                .iter()
                .map(|l| l.weight.data().to_vec())
                .collect(),
            biases: self.extractor.layers().iter().map(|l| l.bias.clone()).collect(),
            class_count: self.prototypes.class_count(),
            embed_dim: self.prototypes.embed_dim(),
            prototypes: self.prototypes.prototypes().data().to_vec(),
            temperature: self.prototypes.temperature(),
        };
        Ok(serde_json::to_string_pretty(&file)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelStateFile = serde_json::from_str(text)?;
        if file.schema != MODEL_SCHEMA {
            return Err(Error::Config(format!(
                "unsupported model schema {:?}, expected {:?}",
                file.schema, MODEL_SCHEMA
            )));
        }
        if file.layer_dims.len() < 2 {
            return Err(Error::Config("model file has no layers".into()));
        }
        let n_layers = file.layer_dims.len() - 1;
        if file.weights.len() != n_layers || file.biases.len() != n_layers {
            return Err(Error::Config(format!(
                "model file declares {} layers but carries {} weight and {} bias arrays",
                n_layers,
                file.weights.len(),
                file.biases.len()
            )));
        }
        let mut layers = Vec::with_capacity(n_layers);
        for (i, (w, b)) in file.weights.into_iter().zip(file.biases).enumerate() {
            let (rows, cols) = (file.layer_dims[i], file.layer_dims[i + 1]);
            if b.len() != cols {
                return Err(Error::ShapeMismatch(format!(
                    "layer {} bias length {} vs declared dim {}",
                    i,
                    b.len(),
                    cols
                )));
            }
            layers.push(DenseLayer {
                weight: Matrix::from_vec(rows, cols, w)?,
                bias: b,
            });
        }
        let extractor = FeatureExtractor::from_layers(layers)?;
        let prototypes = PrototypeSet::new(
            Matrix::from_vec(file.class_count, file.embed_dim, file.prototypes)?,
            file.temperature,
        )?;
        ModelState::new(extractor, prototypes)
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        ModelState::from_json(&std::fs::read_to_string(path)?)
    }
}

pub const MODEL_SCHEMA: &str = "ntda-model/1";

#[derive(Serialize, Deserialize)]
struct ModelStateFile {
    schema: String,
    layer_dims: Vec<usize>,
    weights: Vec<Vec<f64>>,
    biases: Vec<Vec<f64>>,
    class_count: usize,
    embed_dim: usize,
    prototypes: Vec<f64>,
    temperature: f64,
}
