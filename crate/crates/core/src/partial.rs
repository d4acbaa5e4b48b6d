//! Which variables train and which stay frozen.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelArch, ParameterSet, Precision};

/// Trainable-set mode. Frozen layers are always a consecutive bottom prefix
/// of the hidden stack.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "k")]
pub enum TrainableSet {
    Full,
    DecoderOnly,
    DecoderPlusTopK(usize),
}

impl TrainableSet {
    /// Variable names that train under this mode.
    pub fn resolve(&self, arch: &ModelArch) -> Result<BTreeSet<String>> {
        let layers = arch.num_hidden();
        let first_trainable = match *self {
            TrainableSet::Full => 0,
            TrainableSet::DecoderOnly => layers,
            TrainableSet::DecoderPlusTopK(0) => {
                return Err(Error::Config("decoder_plus_top_k needs k >= 1".into()))
            }
            TrainableSet::DecoderPlusTopK(k) if k > layers => {
                return Err(Error::Config(format!(
                    "cannot train top {k} of {layers} encoder layers"
                )))
            }
            TrainableSet::DecoderPlusTopK(k) => layers - k,
        };
        Ok((first_trainable..=layers)
            .flat_map(|l| {
                let (m, b) = arch.layer_names(l);
                [m, b]
            })
            .collect())
    }
}

impl fmt::Display for TrainableSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TrainableSet::Full => write!(f, "full"),
            TrainableSet::DecoderOnly => write!(f, "decoder_only"),
            TrainableSet::DecoderPlusTopK(k) => write!(f, "decoder_plus_top_{k}"),
        }
    }
}

impl FromStr for TrainableSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "full" => Ok(TrainableSet::Full),
            "decoder_only" => Ok(TrainableSet::DecoderOnly),
            _ => s
                .strip_prefix("decoder_plus_top_")
                .and_then(|k| k.parse().ok())
                .map(TrainableSet::DecoderPlusTopK)
                .ok_or_else(|| Error::Config(format!("unknown trainable set {s:?}"))),
        }
    }
}

/// Marks exactly `names` as trainable. Variables that become trainable are
/// widened back to f32.
pub fn freeze(params: &ParameterSet, names: &BTreeSet<String>) -> Result<ParameterSet> {
    if let Some(unknown) = names.iter().find(|n| params.get(n).is_none()) {
        return Err(Error::Config(format!("unknown variable {unknown}")));
    }
    let mut out = params.clone();
    for v in &mut out.variables {
        v.trainable = names.contains(&v.name);
        if v.trainable {
            v.precision = Precision::F32;
        }
    }
    Ok(out)
}

/// Number of parameters in the resolved trainable set.
pub fn trainable_elements(params: &ParameterSet) -> usize {
    params
        .variables
        .iter()
        .filter(|v| v.trainable)
        .map(|v| v.len())
        .sum()
}
