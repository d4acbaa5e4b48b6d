//! Independent reference implementations used as test oracles.
#![allow(dead_code)]

use fedcorr_core::{ParameterSet, WordId};

/// Dense f64 copy of an MLP: `(matrix [out][in], bias [out])` per layer.
pub struct Mlp {
    pub layers: Vec<(Vec<Vec<f64>>, Vec<f64>)>,
}

impl Mlp {
    pub fn from_params(p: &ParameterSet) -> Mlp {
        let mut layers = Vec::new();
        let mut l = 0;
        loop {
            let (m, b) = match p.get(&format!("layer{l}/matrix")) {
                Some(m) => (m, p.get(&format!("layer{l}/bias")).unwrap()),
                None => (p.get("decoder/matrix").unwrap(), p.get("decoder/bias").unwrap()),
            };
            let (rows, cols) = (m.shape[0], m.shape[1]);
            let matrix = (0..rows)
                .map(|r| (0..cols).map(|c| m.data[r * cols + c] as f64).collect())
                .collect();
            layers.push((matrix, b.data.iter().map(|&x| x as f64).collect()));
            if m.name == "decoder/matrix" {
                break;
            }
            l += 1;
        }
        Mlp { layers }
    }

    /// Hidden pre-activations per layer and the logits, for one token.
    pub fn token(&self, x: &[f32]) -> (Vec<Vec<f64>>, Vec<f64>) {
        let mut h: Vec<f64> = x.iter().map(|&v| v as f64).collect();
        let mut pre = Vec::new();
        let last = self.layers.len() - 1;
        for (i, (m, b)) in self.layers.iter().enumerate() {
            let z: Vec<f64> = m
                .iter()
                .zip(b)
                .map(|(row, bias)| row.iter().zip(&h).map(|(w, v)| w * v).sum::<f64>() + bias)
                .collect();
            if i == last {
                return (pre, z);
            }
            h = z.iter().map(|&v| v.max(0.0)).collect();
            pre.push(z);
        }
        unreachable!()
    }

    /// Mean softmax cross-entropy over the positions of one utterance.
    pub fn loss(&self, features: &[Vec<f32>], labels: &[WordId]) -> f64 {
        let mut total = 0.0;
        for (x, &y) in features.iter().zip(labels) {
            let (_, z) = self.token(x);
            let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - z[y as usize];
        }
        total / features.len() as f64
    }

    /// Signs of every hidden pre-activation, to detect ReLU kinks.
    pub fn pattern(&self, features: &[Vec<f32>]) -> Vec<bool> {
        features
            .iter()
            .flat_map(|x| self.token(x).0.into_iter().flatten().map(|v| v > 0.0))
            .collect()
    }

    /// The parameter behind `(variable name, flat index)`.
    pub fn param_mut(&mut self, name: &str, index: usize) -> &mut f64 {
        let l = if name.starts_with("decoder") {
            self.layers.len() - 1
        } else {
            name[5..name.find('/').unwrap()].parse().unwrap()
        };
        let (m, b) = &mut self.layers[l];
        if name.ends_with("bias") {
            &mut b[index]
        } else {
            let cols = m[0].len();
            &mut m[index / cols][index % cols]
        }
    }
}

/// Levenshtein distance by exhaustive recursion over edit choices.
pub fn brute_edit_distance(a: &[WordId], b: &[WordId]) -> usize {
    match (a.split_first(), b.split_first()) {
        (None, _) => b.len(),
        (_, None) => a.len(),
        (Some((x, ra)), Some((y, rb))) => {
            let sub = brute_edit_distance(ra, rb) + usize::from(x != y);
            let del = brute_edit_distance(ra, b) + 1;
            let ins = brute_edit_distance(a, rb) + 1;
            sub.min(del).min(ins)
        }
    }
}

/// Relative infinity-norm difference `max|a-b| / max(max|b|, tiny)`.
pub fn rel_inf(a: &[f64], b: &[f64]) -> f64 {
    let diff = a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let scale = b.iter().map(|x| x.abs()).fold(0.0, f64::max).max(1e-30);
    diff / scale
}
