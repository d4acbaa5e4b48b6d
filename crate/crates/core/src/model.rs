//! Feed-forward per-position word classifier with exact reverse-mode
//! gradients.
//!
//! The hidden ReLU layers play the role of encoder layers and the final
//! projection plays the role of the decoder. Every position of an utterance
//! carries one feature vector and is classified into the vocabulary
//! independently.
//!
//! All arithmetic runs in `f64`; parameters and gradients are stored as
//! `f32`. A variable tagged [`Precision::F16`] holds values that are exactly
//! representable in half precision, so the forward pass sees the rounded
//! values widened back to `f32`.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Word identifier inside the vocabulary.
pub type WordId = u32;

/// Gradients keyed by variable name. Only trainable variables appear.
pub type GradientMap = BTreeMap<String, Vec<f32>>;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelArch {
    pub vocab_size: usize,
    pub feature_dim: usize,
    /// Widths of the hidden ("encoder") layers, bottom first.
    pub hidden_dims: Vec<usize>,
}

impl ModelArch {
    pub fn new(vocab_size: usize, feature_dim: usize, hidden_dims: Vec<usize>) -> Self {
        ModelArch {
            vocab_size,
            feature_dim,
            hidden_dims,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size == 0 || self.feature_dim == 0 {
            return Err(Error::Config(
                "vocab_size and feature_dim must be positive".into(),
            ));
        }
        if self.hidden_dims.is_empty() {
            return Err(Error::Config("at least one hidden layer is required".into()));
        }
        if self.hidden_dims.iter().any(|&d| d == 0) {
            return Err(Error::Config("hidden layer widths must be positive".into()));
        }
        Ok(())
    }

    pub fn num_hidden(&self) -> usize {
        self.hidden_dims.len()
    }

    /// `(fan_in, fan_out)` for every layer, decoder last.
    pub fn layer_dims(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 1);
        let mut fan_in = self.feature_dim;
        for &h in &self.hidden_dims {
            dims.push((fan_in, h));
            fan_in = h;
        }
        dims.push((fan_in, self.vocab_size));
        dims
    }

    pub fn parameter_count(&self) -> usize {
        self.layer_dims().iter().map(|(i, o)| i * o + o).sum()
    }

    /// Names of the variables of one layer, `(matrix, bias)`. Index
    /// `num_hidden()` is the decoder.
    pub fn layer_names(&self, layer: usize) -> (String, String) {
        layer_names(layer, self.num_hidden())
    }

    /// All variable names in canonical order.
    pub fn variable_names(&self) -> Vec<String> {
        (0..=self.num_hidden())
            .flat_map(|l| {
                let (m, b) = self.layer_names(l);
                [m, b]
            })
            .collect()
    }
}

fn layer_names(layer: usize, num_hidden: usize) -> (String, String) {
    if layer == num_hidden {
        ("decoder/matrix".to_string(), "decoder/bias".to_string())
    } else {
        (format!("layer{layer}/matrix"), format!("layer{layer}/bias"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarKind {
    Matrix,
    Bias,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Precision {
    F32,
    F16,
}

impl Precision {
    pub fn width(self) -> usize {
        match self {
            Precision::F32 => 4,
            Precision::F16 => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Variable {
    pub name: String,
    pub layer_index: usize,
    pub kind: VarKind,
    /// `[rows, cols]` for matrices (`[fan_out, fan_in]`), `[len]` for biases.
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub data: Vec<f32>,
    pub trainable: bool,
}

impl Variable {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn byte_len(&self) -> usize {
        self.data.len() * self.precision.width()
    }

    /// Bit-level equality, so that `-0.0 != 0.0` and NaNs compare by payload.
    pub fn bit_eq(&self, other: &Variable) -> bool {
        self.name == other.name
            && self.layer_index == other.layer_index
            && self.kind == other.kind
            && self.shape == other.shape
            && self.precision == other.precision
            && self.trainable == other.trainable
            && self.data.len() == other.data.len()
            && self
                .data
                .iter()
                .zip(&other.data)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Ordered collection of named model variables.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ParameterSet {
    pub variables: Vec<Variable>,
}

impl ParameterSet {
    pub fn new(variables: Vec<Variable>) -> Result<Self> {
        let set = ParameterSet { variables };
        set.validate()?;
        Ok(set)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for v in &self.variables {
            if !seen.insert(v.name.as_str()) {
                return Err(Error::Config(format!("duplicate variable name {}", v.name)));
            }
            let expected: usize = v.shape.iter().product();
            if expected != v.data.len() {
                return Err(Error::Shape(format!(
                    "{}: shape {:?} implies {} elements, found {}",
                    v.name,
                    v.shape,
                    expected,
                    v.data.len()
                )));
            }
            if v.kind == VarKind::Bias && v.precision != Precision::F32 {
                return Err(Error::Config(format!("bias {} must be f32", v.name)));
            }
            if v.trainable && v.precision != Precision::F32 {
                return Err(Error::Config(format!(
                    "trainable variable {} must be f32",
                    v.name
                )));
            }
        }
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Variable> {
        self.variables.iter().find(|v| v.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Variable> {
        self.variables.iter_mut().find(|v| v.name == name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.variables.iter().map(|v| v.name.as_str())
    }

    pub fn parameter_count(&self) -> usize {
        self.variables.iter().map(Variable::len).sum()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.variables
            .iter()
            .filter(|v| v.trainable)
            .map(|v| v.name.clone())
            .collect()
    }

    pub fn bit_eq(&self, other: &ParameterSet) -> bool {
        self.variables.len() == other.variables.len()
            && self
                .variables
                .iter()
                .zip(&other.variables)
                .all(|(a, b)| a.bit_eq(b))
    }

    /// Recovers the architecture from the variable layout.
    pub fn arch(&self) -> Result<ModelArch> {
        let mut hidden_dims = Vec::new();
        let mut feature_dim = None;
        let mut l = 0;
        while let Some(m) = self.get(&format!("layer{l}/matrix")) {
            if m.shape.len() != 2 {
                return Err(Error::Shape(format!("{} is not rank 2", m.name)));
            }
            if l == 0 {
                feature_dim = Some(m.shape[1]);
            }
            hidden_dims.push(m.shape[0]);
            l += 1;
        }
        let dec = self
            .get("decoder/matrix")
            .ok_or_else(|| Error::Shape("missing decoder/matrix".into()))?;
        if dec.shape.len() != 2 {
            return Err(Error::Shape("decoder/matrix is not rank 2".into()));
        }
        let feature_dim =
            feature_dim.ok_or_else(|| Error::Shape("missing layer0/matrix".into()))?;
        let arch = ModelArch::new(dec.shape[0], feature_dim, hidden_dims);
        // Every layer's shapes must chain.
        for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
            let (m, b) = arch.layer_names(l);
            let mv = self.get(&m).ok_or_else(|| Error::Shape(format!("missing {m}")))?;
            let bv = self.get(&b).ok_or_else(|| Error::Shape(format!("missing {b}")))?;
            if mv.shape != [fan_out, fan_in] || bv.shape != [fan_out] {
                return Err(Error::Shape(format!("layer {l} shapes do not chain")));
            }
        }
        Ok(arch)
    }
}

/// Glorot-uniform matrices, zero biases, everything f32 and trainable.
pub fn init_model(arch: &ModelArch, seed: u64) -> Result<ParameterSet> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut variables = Vec::new();
    for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
        let (m, b) = arch.layer_names(l);
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let data = (0..fan_in * fan_out)
            .map(|_| rng.random_range(-bound..bound) as f32)
            .collect();
        variables.push(Variable {
            name: m,
            layer_index: l,
            kind: VarKind::Matrix,
            shape: vec![fan_out, fan_in],
            precision: Precision::F32,
            data,
            trainable: true,
        });
        variables.push(Variable {
            name: b,
            layer_index: l,
            kind: VarKind::Bias,
            shape: vec![fan_out],
            precision: Precision::F32,
            data: vec![0.0; fan_out],
            trainable: true,
        });
    }
    ParameterSet::new(variables)
}

struct Layer<'a> {
    matrix: &'a Variable,
    bias: &'a Variable,
    fan_in: usize,
    fan_out: usize,
}

fn layers(params: &ParameterSet) -> Result<(ModelArch, Vec<Layer<'_>>)> {
    let arch = params.arch()?;
    let mut out = Vec::with_capacity(arch.num_hidden() + 1);
    for (l, (fan_in, fan_out)) in arch.layer_dims().into_iter().enumerate() {
        let (m, b) = arch.layer_names(l);
        out.push(Layer {
            matrix: params.get(&m).expect("checked by arch()"),
            bias: params.get(&b).expect("checked by arch()"),
            fan_in,
            fan_out,
        });
    }
    Ok((arch, out))
}

/// `out[t, o] = b[o] + sum_i W[o, i] * input[t, i]`, row-major.
fn affine(layer: &Layer<'_>, input: &[f64], rows: usize) -> Vec<f64> {
    let (fi, fo) = (layer.fan_in, layer.fan_out);
    let w = &layer.matrix.data;
    let b = &layer.bias.data;
    let mut out = vec![0.0; rows * fo];
    for t in 0..rows {
        let x = &input[t * fi..(t + 1) * fi];
        let y = &mut out[t * fo..(t + 1) * fo];
        for o in 0..fo {
            let row = &w[o * fi..(o + 1) * fi];
            let mut acc = b[o] as f64;
            for (wi, xi) in row.iter().zip(x) {
                acc += *wi as f64 * xi;
            }
            y[o] = acc;
        }
    }
    out
}

fn relu(z: &[f64]) -> Vec<f64> {
    z.iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect()
}

/// Activations retained by [`forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    seq_len: usize,
    vocab_size: usize,
    checkpointing: bool,
    /// Layer inputs: the features, then every hidden layer's output.
    boundaries: Vec<Vec<f64>>,
    /// Hidden pre-activations. Empty when checkpointing; recomputed during
    /// backward one layer at a time.
    pre_activations: Vec<Vec<f64>>,
    logits: Vec<f64>,
}

impl ForwardTrace {
    pub fn seq_len(&self) -> usize {
        self.seq_len
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab_size
    }

    pub fn checkpointing(&self) -> bool {
        self.checkpointing
    }

    /// Row-major `(seq_len, vocab_size)` logits.
    pub fn logits(&self) -> &[f64] {
        &self.logits
    }

    pub fn logits_f32(&self) -> Vec<f32> {
        self.logits.iter().map(|&v| v as f32).collect()
    }

    /// Number of f64 activation elements this trace keeps alive.
    pub fn stored_elements(&self) -> usize {
        self.boundaries.iter().map(Vec::len).sum::<usize>()
            + self.pre_activations.iter().map(Vec::len).sum::<usize>()
            + self.logits.len()
    }

    /// Argmax word per position.
    pub fn predictions(&self) -> Vec<WordId> {
        self.logits
            .chunks(self.vocab_size)
            .map(|row| {
                let mut best = 0;
                for (i, &v) in row.iter().enumerate() {
                    if v > row[best] {
                        best = i;
                    }
                }
                best as WordId
            })
            .collect()
    }

    /// Mean softmax cross-entropy over positions.
    pub fn loss(&self, labels: &[WordId]) -> Result<f64> {
        self.check_labels(labels)?;
        let mut total = 0.0;
        for (row, &y) in self.logits.chunks(self.vocab_size).zip(labels) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[y as usize];
        }
        Ok(total / self.seq_len as f64)
    }

    fn check_labels(&self, labels: &[WordId]) -> Result<()> {
        if labels.len() != self.seq_len {
            return Err(Error::Shape(format!(
                "{} labels for a sequence of length {}",
                labels.len(),
                self.seq_len
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y as usize >= self.vocab_size) {
            return Err(Error::Data(format!(
                "label {bad} outside vocabulary of {}",
                self.vocab_size
            )));
        }
        Ok(())
    }
}

pub fn forward(
    params: &ParameterSet,
    features: &[Vec<f32>],
    checkpointing: bool,
) -> Result<ForwardTrace> {
    let (arch, layers) = layers(params)?;
    let rows = features.len();
    let mut input = Vec::with_capacity(rows * arch.feature_dim);
    for f in features {
        if f.len() != arch.feature_dim {
            return Err(Error::Shape(format!(
                "feature vector of length {}, expected {}",
                f.len(),
                arch.feature_dim
            )));
        }
        input.extend(f.iter().map(|&v| v as f64));
    }

    let (hidden, decoder) = layers.split_at(layers.len() - 1);
    let mut boundaries = vec![input];
    let mut pre_activations = Vec::new();
    for layer in hidden {
        let z = affine(layer, boundaries.last().unwrap(), rows);
        let h = relu(&z);
        if !checkpointing {
            pre_activations.push(z);
        }
        boundaries.push(h);
    }
    let logits = affine(&decoder[0], boundaries.last().unwrap(), rows);
    Ok(ForwardTrace {
        seq_len: rows,
        vocab_size: arch.vocab_size,
        checkpointing,
        boundaries,
        pre_activations,
        logits,
    })
}

/// Gradient of the mean softmax cross-entropy with respect to every
/// trainable variable. Frozen variables are absent from the result.
pub fn backward(
    params: &ParameterSet,
    trace: &ForwardTrace,
    labels: &[WordId],
) -> Result<GradientMap> {
    trace.check_labels(labels)?;
    let (arch, layers) = layers(params)?;
    if arch.vocab_size != trace.vocab_size || trace.boundaries.len() != layers.len() {
        return Err(Error::Shape("trace does not match parameters".into()));
    }
    let mut grads = GradientMap::new();
    // Nothing below the lowest trainable layer needs a delta.
    let lowest_trainable = match layers
        .iter()
        .position(|l| l.matrix.trainable || l.bias.trainable)
    {
        Some(l) => l,
        None => return Ok(grads),
    };

    let rows = trace.seq_len;
    let scale = 1.0 / rows as f64;
    let v = arch.vocab_size;
    let mut delta = vec![0.0; rows * v];
    for t in 0..rows {
        let row = &trace.logits[t * v..(t + 1) * v];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        for k in 0..v {
            delta[t * v + k] = exps[k] / sum * scale;
        }
        delta[t * v + labels[t] as usize] -= scale;
    }

    for l in (lowest_trainable..layers.len()).rev() {
        let layer = &layers[l];
        let input = &trace.boundaries[l];
        let (fi, fo) = (layer.fan_in, layer.fan_out);
        if layer.matrix.trainable {
            let mut gw = vec![0.0f64; fo * fi];
            for t in 0..rows {
                let d = &delta[t * fo..(t + 1) * fo];
                let x = &input[t * fi..(t + 1) * fi];
                for o in 0..fo {
                    if d[o] == 0.0 {
                        continue;
                    }
                    let g = &mut gw[o * fi..(o + 1) * fi];
                    for (gi, xi) in g.iter_mut().zip(x) {
                        *gi += d[o] * xi;
                    }
                }
            }
            grads.insert(layer.matrix.name.clone(), to_f32(&gw));
        }
        if layer.bias.trainable {
            let mut gb = vec![0.0f64; fo];
            for t in 0..rows {
                for o in 0..fo {
                    gb[o] += delta[t * fo + o];
                }
            }
            grads.insert(layer.bias.name.clone(), to_f32(&gb));
        }
        if l == lowest_trainable {
            break;
        }
        // Propagate into the layer below: dh = W^T delta, then gate by ReLU.
        let w = &layer.matrix.data;
        let mut dh = vec![0.0; rows * fi];
        for t in 0..rows {
            let d = &delta[t * fo..(t + 1) * fo];
            let out = &mut dh[t * fi..(t + 1) * fi];
            for o in 0..fo {
                if d[o] == 0.0 {
                    continue;
                }
                let row = &w[o * fi..(o + 1) * fi];
                for (oi, wi) in out.iter_mut().zip(row) {
                    *oi += d[o] * *wi as f64;
                }
            }
        }
        let below = l - 1;
        let recomputed;
        let z: &[f64] = if trace.checkpointing {
            recomputed = affine(&layers[below], &trace.boundaries[below], rows);
            &recomputed
        } else {
            &trace.pre_activations[below]
        };
        for (g, &zi) in dh.iter_mut().zip(z) {
            if zi <= 0.0 {
                *g = 0.0;
            }
        }
        delta = dh;
    }
    Ok(grads)
}

fn to_f32(v: &[f64]) -> Vec<f32> {
    v.iter().map(|&x| x as f32).collect()
}

/// Forward plus backward for one utterance.
pub fn example_gradient(
    params: &ParameterSet,
    features: &[Vec<f32>],
    labels: &[WordId],
    checkpointing: bool,
) -> Result<GradientMap> {
    let trace = forward(params, features, checkpointing)?;
    backward(params, &trace, labels)
}

/// Mean over examples of each example's mean cross-entropy, and its
/// gradient.
pub fn batch_loss(params: &ParameterSet, batch: &[(&[Vec<f32>], &[WordId])]) -> Result<f64> {
    let mut total = 0.0;
    for (features, labels) in batch {
        total += forward(params, features, false)?.loss(labels)?;
    }
    Ok(total / batch.len() as f64)
}

pub fn batch_gradient(
    params: &ParameterSet,
    batch: &[(&[Vec<f32>], &[WordId])],
    checkpointing: bool,
) -> Result<GradientMap> {
    let mut acc: BTreeMap<String, Vec<f64>> = BTreeMap::new();
    for (features, labels) in batch {
        let g = example_gradient(params, features, labels, checkpointing)?;
        for (name, values) in g {
            let slot = acc
                .entry(name)
                .or_insert_with(|| vec![0.0; values.len()]);
            for (s, v) in slot.iter_mut().zip(values) {
                *s += v as f64;
            }
        }
    }
    let n = batch.len() as f64;
    Ok(acc
        .into_iter()
        .map(|(k, v)| (k, v.into_iter().map(|x| (x / n) as f32).collect()))
        .collect())
}

/// Analytic training-memory model for one client step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct MemoryEstimate {
    /// Variable storage at each variable's precision.
    pub parameter_bytes: u64,
    /// f32 gradient buffers for the trainable variables.
    pub gradient_bytes: u64,
    /// f32 activations kept alive for the backward pass.
    pub activation_bytes: u64,
}

impl MemoryEstimate {
    pub fn total(&self) -> u64 {
        self.parameter_bytes + self.gradient_bytes + self.activation_bytes
    }
}

/// Without checkpointing every hidden layer keeps its pre-activation and its
/// output; with checkpointing only layer outputs are kept and one layer's
/// pre-activation is recomputed at a time.
pub fn activation_elements(arch: &ModelArch, checkpointing: bool, tokens: usize) -> u64 {
    let sum: usize = arch.hidden_dims.iter().sum();
    let max = arch.hidden_dims.iter().copied().max().unwrap_or(0);
    let per_token = if checkpointing {
        arch.feature_dim + sum + max + arch.vocab_size
    } else {
        arch.feature_dim + 2 * sum + arch.vocab_size
    };
    (per_token * tokens) as u64
}

pub fn peak_memory_estimate(
    params: &ParameterSet,
    checkpointing: bool,
    tokens: usize,
) -> Result<MemoryEstimate> {
    let arch = params.arch()?;
    let parameter_bytes = params.variables.iter().map(|v| v.byte_len() as u64).sum();
    let gradient_bytes = params
        .variables
        .iter()
        .filter(|v| v.trainable)
        .map(|v| 4 * v.len() as u64)
        .sum();
    Ok(MemoryEstimate {
        parameter_bytes,
        gradient_bytes,
        activation_bytes: 4 * activation_elements(&arch, checkpointing, tokens),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> ModelArch {
        ModelArch::new(4, 2, vec![3])
    }

    #[test]
    fn init_is_deterministic() {
        let a = init_model(&tiny(), 7).unwrap();
        let b = init_model(&tiny(), 7).unwrap();
        assert!(a.bit_eq(&b));
        let c = init_model(&tiny(), 8).unwrap();
        assert!(!a.bit_eq(&c));
    }

    #[test]
    fn init_biases_zero_and_count() {
        let arch = ModelArch::new(7, 5, vec![4, 6, 3]);
        let p = init_model(&arch, 1).unwrap();
        for v in p.variables.iter().filter(|v| v.kind == VarKind::Bias) {
            assert!(v.data.iter().all(|&x| x == 0.0));
        }
        assert_eq!(init_model(&tiny(), 7).unwrap().parameter_count(), 25);
        assert_eq!(tiny().parameter_count(), 25);
        assert!(p.variables.iter().all(|v| v.trainable && v.precision == Precision::F32));
    }

    #[test]
    fn init_respects_glorot_bound() {
        let arch = ModelArch::new(10, 6, vec![8]);
        let p = init_model(&arch, 3).unwrap();
        let bound = (6.0f64 / 14.0).sqrt() as f32;
        assert!(p.get("layer0/matrix").unwrap().data.iter().all(|x| x.abs() <= bound));
    }

    #[test]
    fn init_rejects_bad_dims() {
        assert!(matches!(
            init_model(&ModelArch::new(4, 2, vec![]), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init_model(&ModelArch::new(0, 2, vec![3]), 0),
            Err(Error::Config(_))
        ));
        assert!(matches!(
            init_model(&ModelArch::new(4, 2, vec![3, 0]), 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn naming_scheme() {
        let arch = ModelArch::new(4, 2, vec![3, 3]);
        assert_eq!(
            arch.variable_names(),
            vec![
                "layer0/matrix",
                "layer0/bias",
                "layer1/matrix",
                "layer1/bias",
                "decoder/matrix",
                "decoder/bias"
            ]
        );
        let p = init_model(&arch, 0).unwrap();
        assert_eq!(p.arch().unwrap(), arch);
    }

    #[test]
    fn zero_model_gives_uniform_softmax() {
        let mut p = init_model(&tiny(), 1).unwrap();
        for v in &mut p.variables {
            v.data.iter_mut().for_each(|x| *x = 0.0);
        }
        let trace = forward(&p, &[vec![0.3, -1.0], vec![2.0, 5.0]], false).unwrap();
        assert!(trace.logits().iter().all(|&x| x == 0.0));
        let loss = trace.loss(&[0, 3]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn hand_computed_logits() {
        // W0 = [[1,0],[0,1],[1,1]], b0 = [0, -1, 0.5]
        // Wd (4x3) = rows [1,0,0],[0,1,0],[0,0,1],[1,1,1], bd = [0,0,0,0.25]
        let mut p = init_model(&tiny(), 1).unwrap();
        p.get_mut("layer0/matrix").unwrap().data = vec![1.0, 0.0, 0.0, 1.0, 1.0, 1.0];
        p.get_mut("layer0/bias").unwrap().data = vec![0.0, -1.0, 0.5];
        p.get_mut("decoder/matrix").unwrap().data =
            vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 1.0, 1.0];
        p.get_mut("decoder/bias").unwrap().data = vec![0.0, 0.0, 0.0, 0.25];
        // x = (2, 0.5): z = (2, -0.5, 3) -> h = (2, 0, 3)
        // logits = (2, 0, 3, 5.25)
        let trace = forward(&p, &[vec![2.0, 0.5]], false).unwrap();
        assert_eq!(trace.logits(), &[2.0, 0.0, 3.0, 5.25]);
        assert_eq!(trace.predictions(), vec![3]);
    }

    #[test]
    fn checkpointing_keeps_logits_and_gradients() {
        let arch = ModelArch::new(6, 3, vec![5, 4, 5]);
        let p = init_model(&arch, 3).unwrap();
        let feats: Vec<Vec<f32>> = (0..4)
            .map(|t| (0..3).map(|i| ((t * 3 + i) as f32 * 0.37).sin()).collect())
            .collect();
        let a = forward(&p, &feats, false).unwrap();
        let b = forward(&p, &feats, true).unwrap();
        assert_eq!(a.logits_f32(), b.logits_f32());
        assert!(b.stored_elements() < a.stored_elements());
        let labels = [0, 5, 2, 1];
        let ga = backward(&p, &a, &labels).unwrap();
        let gb = backward(&p, &b, &labels).unwrap();
        assert_eq!(ga, gb);
    }

    #[test]
    fn frozen_model_has_no_gradients() {
        let mut p = init_model(&tiny(), 2).unwrap();
        p.variables.iter_mut().for_each(|v| v.trainable = false);
        let g = example_gradient(&p, &[vec![1.0, 1.0]], &[1], false).unwrap();
        assert!(g.is_empty());
    }

    #[test]
    fn frozen_variables_absent_from_gradients() {
        let arch = ModelArch::new(4, 2, vec![3, 3]);
        let mut p = init_model(&arch, 2).unwrap();
        for v in &mut p.variables {
            v.trainable = v.layer_index >= 1;
        }
        let g = example_gradient(&p, &[vec![1.0, -1.0]], &[2], false).unwrap();
        let keys: Vec<_> = g.keys().cloned().collect();
        assert_eq!(
            keys,
            vec!["decoder/bias", "decoder/matrix", "layer1/bias", "layer1/matrix"]
        );
    }

    #[test]
    fn duplicated_example_batch_matches_single() {
        let arch = ModelArch::new(5, 3, vec![4, 4]);
        let p = init_model(&arch, 9).unwrap();
        let feats = vec![vec![0.1, 0.5, -0.3], vec![1.0, -0.2, 0.4]];
        let labels = vec![1u32, 4];
        let single = example_gradient(&p, &feats, &labels, false).unwrap();
        let batch = batch_gradient(
            &p,
            &[(&feats[..], &labels[..]), (&feats[..], &labels[..])],
            false,
        )
        .unwrap();
        for (k, v) in &single {
            for (a, b) in v.iter().zip(&batch[k]) {
                assert!((a - b).abs() <= 1e-7 * a.abs().max(1e-6));
            }
        }
    }

    #[test]
    fn label_errors() {
        let p = init_model(&tiny(), 2).unwrap();
        let trace = forward(&p, &[vec![1.0, 1.0]], false).unwrap();
        assert!(matches!(backward(&p, &trace, &[4]), Err(Error::Data(_))));
        assert!(matches!(backward(&p, &trace, &[0, 1]), Err(Error::Shape(_))));
        assert!(matches!(
            forward(&p, &[vec![1.0, 1.0, 1.0]], false),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn memory_accounting() {
        let p = init_model(&tiny(), 0).unwrap();
        let m = peak_memory_estimate(&p, false, 1).unwrap();
        assert_eq!(m.parameter_bytes, 100);
        assert_eq!(m.gradient_bytes, 100);
        // one hidden layer: checkpointing saves nothing
        let on = peak_memory_estimate(&p, true, 1).unwrap();
        assert_eq!(on.activation_bytes, m.activation_bytes);

        let deep = init_model(&ModelArch::new(4, 2, vec![3, 5, 3]), 0).unwrap();
        let off = peak_memory_estimate(&deep, false, 10).unwrap();
        let on = peak_memory_estimate(&deep, true, 10).unwrap();
        assert!(on.activation_bytes < off.activation_bytes);
        // (2 + 2*11 + 4) vs (2 + 11 + 5 + 4) per token
        assert_eq!(off.activation_bytes, 4 * 28 * 10);
        assert_eq!(on.activation_bytes, 4 * 22 * 10);
    }
}
