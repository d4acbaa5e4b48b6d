//! Federated fine-tuning of a transcription model from user corrections.
//!
//! The crate covers client selection by an eligibility test, on-device
//! filtering of corrections, FedSGD rounds with weighted client
//! aggregation, reduced-precision model payloads, partial training and the
//! noisy word histogram that feeds the aggregation weights. [`sim`] holds a
//! synthetic task and the experiment harness on top of it.

pub mod client;
pub mod error;
pub mod model;
pub mod partial;
pub mod payload;
pub mod server;
pub mod sim;
pub mod stats;

#[cfg(test)]
mod proptests;

pub use client::{
    compute_example_weight, eligibility_test, filter_batch, local_update, quality_heuristic,
    ClientExample, EligibilitySpec, LocalUpdate, WeightScheme, WeightTables,
};
pub use error::{Error, Result};
pub use model::{
    backward, example_gradient, forward, init_model, peak_memory_estimate, GradientMap,
    MemoryEstimate, ModelArch, ParameterSet, Precision, VarKind, Variable, WordId,
};
pub use partial::{freeze, TrainableSet};
pub use payload::{apply_policy, deserialize, serialize, PrecisionPolicy};
pub use server::{
    aggregate, apply_update, prepare_model, select_clients, AggregationRule, Federation,
    MetricsRecord, RoundConfig, Server,
};
pub use stats::{
    accuracy_table, dp_histogram, edit_distance, evaluate, wer, AccTable, CorrectedWordList,
    FreqTable, LabeledUtterance, WerReport,
};
