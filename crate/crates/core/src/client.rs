//! Per-client behaviour: the eligibility test, correction filtering, example
//! weights and the single-batch FedSGD gradient.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{example_gradient, GradientMap, ParameterSet, WordId};
use crate::stats::{align, AccTable, EditOp, FreqTable};

/// One utterance on a device.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientExample {
    pub features: Vec<Vec<f32>>,
    /// Simulation only; never used for training.
    pub truth: Vec<WordId>,
    pub incumbent: Vec<WordId>,
    /// Transcript after the user's edits.
    pub final_transcript: Vec<WordId>,
    pub is_correction: bool,
}

impl ClientExample {
    pub fn new(
        features: Vec<Vec<f32>>,
        truth: Vec<WordId>,
        incumbent: Vec<WordId>,
        final_transcript: Vec<WordId>,
    ) -> Result<Self> {
        if features.len() != incumbent.len() {
            return Err(Error::Shape(format!(
                "{} feature vectors for an incumbent transcript of {} words",
                features.len(),
                incumbent.len()
            )));
        }
        let is_correction = final_transcript != incumbent;
        Ok(ClientExample {
            features,
            truth,
            incumbent,
            final_transcript,
            is_correction,
        })
    }

    /// Labels the model trains on: the final transcript laid over the
    /// feature positions. A final transcript of a different length is cut
    /// short or padded with the incumbent's words.
    pub fn training_labels(&self) -> Vec<WordId> {
        (0..self.features.len())
            .map(|k| {
                self.final_transcript
                    .get(k)
                    .copied()
                    .unwrap_or(self.incumbent[k])
            })
            .collect()
    }

    /// Words the user changed to: position-wise for equal lengths,
    /// substituted or inserted words of an edit alignment otherwise. Keeps
    /// multiplicity and order.
    pub fn corrected_tokens(&self) -> Vec<WordId> {
        let (inc, fin) = (&self.incumbent, &self.final_transcript);
        if inc.len() == fin.len() {
            return inc
                .iter()
                .zip(fin)
                .filter(|(a, b)| a != b)
                .map(|(_, &b)| b)
                .collect();
        }
        align(inc, fin)
            .into_iter()
            .filter_map(|op| match op {
                EditOp::Substitute { target, .. } | EditOp::Insert { target } => {
                    Some(fin[target])
                }
                _ => None,
            })
            .collect()
    }

    pub fn corrected_words(&self) -> BTreeSet<WordId> {
        self.corrected_tokens().into_iter().collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EligibilitySpec {
    /// Equal to the batch size.
    pub min_corrections: usize,
    pub max_word_len_diff: usize,
}

impl EligibilitySpec {
    pub fn validate(&self) -> Result<()> {
        if self.min_corrections == 0 {
            return Err(Error::Config("min_corrections must be at least 1".into()));
        }
        Ok(())
    }
}

/// Rejects edits whose word count moves too far from the incumbent's.
pub fn quality_heuristic(example: &ClientExample, max_word_len_diff: usize) -> Result<bool> {
    if !example.is_correction {
        return Err(Error::Contract(
            "quality heuristic applies to corrections only".into(),
        ));
    }
    let diff = example
        .final_transcript
        .len()
        .abs_diff(example.incumbent.len());
    Ok(diff <= max_word_len_diff)
}

fn is_valid_correction(example: &ClientExample, max_word_len_diff: usize) -> bool {
    example.is_correction
        && example
            .final_transcript
            .len()
            .abs_diff(example.incumbent.len())
            <= max_word_len_diff
}

/// Corrections that pass the heuristic, in on-device order.
pub fn valid_corrections<'a>(
    dataset: &'a [ClientExample],
    max_word_len_diff: usize,
) -> impl Iterator<Item = &'a ClientExample> + 'a {
    dataset
        .iter()
        .filter(move |e| is_valid_correction(e, max_word_len_diff))
}

pub fn eligibility_test(dataset: &[ClientExample], spec: &EligibilitySpec) -> bool {
    valid_corrections(dataset, spec.max_word_len_diff)
        .take(spec.min_corrections)
        .count()
        >= spec.min_corrections
}

/// The first `batch_size` valid corrections.
pub fn filter_batch<'a>(
    dataset: &'a [ClientExample],
    spec: &EligibilitySpec,
    batch_size: usize,
) -> Result<Vec<&'a ClientExample>> {
    let batch: Vec<_> = valid_corrections(dataset, spec.max_word_len_diff)
        .take(batch_size)
        .collect();
    if batch.len() < batch_size {
        return Err(Error::Eligibility(format!(
            "{} valid corrections for a batch of {batch_size}",
            batch.len()
        )));
    }
    Ok(batch)
}

/// The first `batch_size` examples regardless of edits.
pub fn unfiltered_batch(dataset: &[ClientExample], batch_size: usize) -> Result<Vec<&ClientExample>> {
    if dataset.len() < batch_size {
        return Err(Error::Eligibility(format!(
            "{} examples for a batch of {batch_size}",
            dataset.len()
        )));
    }
    Ok(dataset.iter().take(batch_size).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WeightScheme {
    Uniform,
    /// Sum of inverse corrected-word frequencies.
    Frequency,
    /// Sum of `(1 - acc_w) / freq_w`.
    FreqAccuracy,
}

impl fmt::Display for WeightScheme {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            WeightScheme::Uniform => "uniform",
            WeightScheme::Frequency => "frequency",
            WeightScheme::FreqAccuracy => "freq_accuracy",
        })
    }
}

impl FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "frequency" => Ok(WeightScheme::Frequency),
            "freq_accuracy" => Ok(WeightScheme::FreqAccuracy),
            _ => Err(Error::Config(format!("unknown weight scheme {s:?}"))),
        }
    }
}

/// Shared, read-only inputs to the example weights.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightTables {
    pub freq: FreqTable,
    pub acc: AccTable,
    /// Sum over corrected word tokens instead of distinct words.
    pub count_tokens: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExampleWeight {
    pub weight: f64,
    /// Corrected words missing from the frequency table.
    pub misses: usize,
}

pub fn compute_example_weight(
    example: &ClientExample,
    scheme: WeightScheme,
    tables: Option<&WeightTables>,
) -> Result<ExampleWeight> {
    if scheme == WeightScheme::Uniform {
        return Ok(ExampleWeight {
            weight: 1.0,
            misses: 0,
        });
    }
    let tables = tables.ok_or_else(|| {
        Error::Config(format!("weight scheme {scheme} needs frequency tables"))
    })?;
    let words = if tables.count_tokens {
        example.corrected_tokens()
    } else {
        example.corrected_words().into_iter().collect()
    };
    let fallback = tables.freq.max_frequency();
    let mut misses = 0;
    let mut weight = 0.0;
    for w in words {
        let freq = tables.freq.get(w).unwrap_or_else(|| {
            misses += 1;
            fallback
        });
        let numerator = match scheme {
            WeightScheme::Frequency => 1.0,
            WeightScheme::FreqAccuracy => 1.0 - tables.acc.get(w),
            WeightScheme::Uniform => unreachable!(),
        };
        weight += numerator / freq;
    }
    Ok(ExampleWeight { weight, misses })
}

/// A client's upload: `gradients = sum_j G_ij * w_ij`, `weight = sum_j w_ij`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalUpdate {
    pub client_id: usize,
    pub gradients: GradientMap,
    pub weight: f64,
    pub example_count: usize,
    pub weight_misses: usize,
}

impl LocalUpdate {
    /// The client's weighted mean gradient, `None` when the weight is zero.
    pub fn normalized(&self) -> Option<BTreeMap<&str, Vec<f64>>> {
        (self.weight > 0.0).then(|| {
            self.gradients
                .iter()
                .map(|(k, v)| (k.as_str(), v.iter().map(|&g| g as f64 / self.weight).collect()))
                .collect()
        })
    }
}

/// One FedSGD step on one batch: per-example gradients against the final
/// transcripts, combined with per-example weights.
pub fn local_update(
    client_id: usize,
    params: &ParameterSet,
    batch: &[&ClientExample],
    scheme: WeightScheme,
    tables: Option<&WeightTables>,
    checkpointing: bool,
) -> Result<LocalUpdate> {
    let mut acc: BTreeMap<String, Vec<f64>> = params
        .variables
        .iter()
        .filter(|v| v.trainable)
        .map(|v| (v.name.clone(), vec![0.0; v.len()]))
        .collect();
    let mut weight = 0.0;
    let mut misses = 0;
    for example in batch {
        let w = compute_example_weight(example, scheme, tables)?;
        weight += w.weight;
        misses += w.misses;
        if w.weight == 0.0 {
            continue;
        }
        let labels = example.training_labels();
        let g = example_gradient(params, &example.features, &labels, checkpointing)?;
        for (name, values) in g {
            let slot = acc.get_mut(&name).expect("gradients only for trainable variables");
            for (s, v) in slot.iter_mut().zip(values) {
                *s += v as f64 * w.weight;
            }
        }
    }
    Ok(LocalUpdate {
        client_id,
        gradients: acc
            .into_iter()
            .map(|(k, v)| (k, v.into_iter().map(|x| x as f32).collect()))
            .collect(),
        weight,
        example_count: batch.len(),
        weight_misses: misses,
    })
}
