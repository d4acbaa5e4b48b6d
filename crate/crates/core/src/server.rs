//! The federated round loop: selection, model preparation, client training,
//! aggregation and the server step.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{
    eligibility_test, filter_batch, local_update, unfiltered_batch, valid_corrections,
    ClientExample, EligibilitySpec, LocalUpdate, WeightScheme, WeightTables,
};
use crate::error::{Error, Result};
use crate::model::{peak_memory_estimate, GradientMap, ParameterSet};
use crate::partial::{freeze, TrainableSet};
use crate::payload::{
    apply_policy, dequantize_trainable, deserialize, encode_update, serialize, PrecisionPolicy,
    QuantStats, TransportSize,
};
use crate::stats::{evaluate, CorrectedWordList, LabeledUtterance};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationRule {
    /// Mean of per-client mean gradients.
    SimpleAvg,
    /// Client means weighted by example count.
    ExampleWeighted,
    /// Weighted client aggregation: `sum_i G_i / sum_i w_i` where each
    /// `G_i` already carries its example weights.
    Wca,
}

impl fmt::Display for AggregationRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AggregationRule::SimpleAvg => "simple_avg",
            AggregationRule::ExampleWeighted => "example_weighted",
            AggregationRule::Wca => "wca",
        })
    }
}

impl FromStr for AggregationRule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "simple_avg" => Ok(AggregationRule::SimpleAvg),
            "example_weighted" => Ok(AggregationRule::ExampleWeighted),
            "wca" => Ok(AggregationRule::Wca),
            _ => Err(Error::Config(format!("unknown aggregation rule {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundConfig {
    pub report_goal: usize,
    pub batch_size: usize,
    pub aggregation: AggregationRule,
    pub weight_scheme: WeightScheme,
    pub omc_enabled: bool,
    #[serde(with = "trainable_set_str")]
    pub trainable_set: TrainableSet,
    pub learning_rate: f64,
    pub rounds: usize,
    pub seed: u64,
    /// Admit only clients passing the eligibility test.
    pub client_selection: bool,
    /// Train on valid corrections only.
    pub data_filtering: bool,
    pub checkpointing: bool,
}

mod trainable_set_str {
    use super::TrainableSet;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(t: &TrainableSet, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&t.to_string())
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<TrainableSet, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl RoundConfig {
    pub fn validate(&self) -> Result<()> {
        if self.report_goal == 0 {
            return Err(Error::Config("report_goal must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        Ok(())
    }

    pub fn policy(&self) -> PrecisionPolicy {
        PrecisionPolicy {
            omc_enabled: self.omc_enabled,
        }
    }

    /// Scheme the clients actually use. Only WCA consumes example weights.
    pub fn effective_scheme(&self) -> WeightScheme {
        match self.aggregation {
            AggregationRule::Wca => self.weight_scheme,
            _ => WeightScheme::Uniform,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Selection {
    pub ids: Vec<usize>,
    /// The pool ran out before the report goal was reached.
    pub exhausted: bool,
}

/// Probes clients in random order until `report_goal` pass the eligibility
/// test.
pub fn select_clients(
    pool: &[Vec<ClientExample>],
    spec: &EligibilitySpec,
    report_goal: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Selection> {
    if pool.is_empty() {
        return Err(Error::Config("client pool is empty".into()));
    }
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let mut ids = Vec::with_capacity(report_goal);
    for id in order {
        if eligibility_test(&pool[id], spec) {
            ids.push(id);
            if ids.len() == report_goal {
                break;
            }
        }
    }
    if ids.is_empty() {
        return Err(Error::NoEligibleClients { pool: pool.len() });
    }
    let exhausted = ids.len() < report_goal;
    Ok(Selection { ids, exhausted })
}

/// Uniform sampling without an eligibility test.
pub fn sample_clients(pool_size: usize, report_goal: usize, rng: &mut ChaCha8Rng) -> Result<Selection> {
    if pool_size == 0 {
        return Err(Error::Config("client pool is empty".into()));
    }
    let mut order: Vec<usize> = (0..pool_size).collect();
    order.shuffle(rng);
    order.truncate(report_goal);
    Ok(Selection {
        exhausted: order.len() < report_goal,
        ids: order,
    })
}

/// The model as the clients receive it.
#[derive(Debug, Clone)]
pub struct PreparedModel {
    pub params: ParameterSet,
    pub payload: Vec<u8>,
    pub quant: QuantStats,
}

/// Freeze per the trainable set, quantize, restore trainable variables to
/// f32, serialize.
pub fn prepare_model(params: &ParameterSet, config: &RoundConfig) -> Result<PreparedModel> {
    let arch = params.arch()?;
    let trainable = config.trainable_set.resolve(&arch)?;
    let frozen = freeze(params, &trainable)?;
    let (quantized, quant) = apply_policy(&frozen, config.policy())?;
    let names: Vec<&String> = trainable.iter().collect();
    let prepared = dequantize_trainable(&quantized, &names)?;
    let payload = serialize(&prepared)?;
    Ok(PreparedModel {
        params: prepared,
        payload,
        quant,
    })
}

/// Combines client uploads. Reduction runs in ascending client id; clients
/// with zero weight contribute nothing. `None` when every weight is zero.
pub fn aggregate(updates: &[LocalUpdate], rule: AggregationRule) -> Result<Option<GradientMap>> {
    if updates.is_empty() {
        return Err(Error::Config("no client updates to aggregate".into()));
    }
    let mut ordered: Vec<&LocalUpdate> = updates.iter().filter(|u| u.weight > 0.0).collect();
    ordered.sort_by_key(|u| u.client_id);
    if ordered.is_empty() {
        return Ok(None);
    }
    let template = &ordered[0].gradients;
    for u in &ordered {
        if u.gradients.len() != template.len()
            || u
                .gradients
                .iter()
                .zip(template)
                .any(|((ka, va), (kb, vb))| ka != kb || va.len() != vb.len())
        {
            return Err(Error::Shape(format!(
                "client {} uploaded a different variable layout",
                u.client_id
            )));
        }
    }
    let mut acc: BTreeMap<&str, Vec<f64>> = template
        .iter()
        .map(|(k, v)| (k.as_str(), vec![0.0; v.len()]))
        .collect();
    // Each client's coefficient on its raw upload `G_i`, and the divisor.
    let (coefs, divisor): (Vec<f64>, f64) = match rule {
        AggregationRule::SimpleAvg => (
            ordered.iter().map(|u| 1.0 / u.weight).collect(),
            ordered.len() as f64,
        ),
        AggregationRule::ExampleWeighted => (
            ordered
                .iter()
                .map(|u| u.example_count as f64 / u.weight)
                .collect(),
            ordered.iter().map(|u| u.example_count as f64).sum(),
        ),
        AggregationRule::Wca => (
            vec![1.0; ordered.len()],
            ordered.iter().map(|u| u.weight).sum(),
        ),
    };
    if !(divisor > 0.0) {
        return Ok(None);
    }
    for (u, c) in ordered.iter().zip(coefs) {
        for (name, values) in &u.gradients {
            let slot = acc.get_mut(name.as_str()).unwrap();
            for (s, &g) in slot.iter_mut().zip(values) {
                *s += g as f64 * c;
            }
        }
    }
    Ok(Some(
        acc.into_iter()
            .map(|(k, v)| (k.to_string(), v.into_iter().map(|x| (x / divisor) as f32).collect()))
            .collect(),
    ))
}

/// Plain SGD on the trainable variables.
pub fn apply_update(
    params: &ParameterSet,
    gradient: &GradientMap,
    learning_rate: f64,
) -> Result<ParameterSet> {
    let mut out = params.clone();
    for (name, g) in gradient {
        let v = out
            .get_mut(name)
            .ok_or_else(|| Error::Shape(format!("gradient for unknown variable {name}")))?;
        if g.len() != v.len() {
            return Err(Error::Shape(format!(
                "gradient for {name} has {} elements, expected {}",
                g.len(),
                v.len()
            )));
        }
        if !v.trainable {
            continue;
        }
        for (x, &d) in v.data.iter_mut().zip(g) {
            *x = (*x as f64 - learning_rate * d as f64) as f32;
        }
    }
    Ok(out)
}

/// Everything a round reads but never mutates.
#[derive(Debug, Clone, Copy)]
pub struct Federation<'a> {
    pub pool: &'a [Vec<ClientExample>],
    pub eligibility: EligibilitySpec,
    pub tables: Option<&'a WeightTables>,
    pub general_eval: &'a [LabeledUtterance],
    pub target_words: &'a CorrectedWordList,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub round: usize,
    pub general_wer: f64,
    pub target_wer: Option<f64>,
    pub download_bytes_raw: u64,
    pub download_bytes_compressed: u64,
    /// Per client; every client uploads the same variable layout.
    pub upload_bytes_raw: u64,
    pub upload_bytes_compressed_total: u64,
    /// Mean over participating clients.
    pub peak_memory_bytes: f64,
    pub participating: usize,
    pub exhausted: bool,
    pub skipped: bool,
    pub trained_examples: usize,
    /// Corrections the length heuristic removed on participating clients.
    pub rejected_corrections: usize,
    pub weight_misses: usize,
    pub total_weight: f64,
    pub quant_overflow: usize,
    pub quant_underflow: usize,
}

#[derive(Debug, Clone)]
pub struct RoundResult {
    pub participants: Vec<usize>,
    pub aggregated: Option<GradientMap>,
    pub metrics: MetricsRecord,
}

/// Server-owned state between rounds.
#[derive(Debug, Clone)]
pub struct Server {
    pub params: ParameterSet,
    pub config: RoundConfig,
    rng: ChaCha8Rng,
    round: usize,
}

impl Server {
    pub fn new(params: ParameterSet, config: RoundConfig) -> Result<Self> {
        config.validate()?;
        params.validate()?;
        config.trainable_set.resolve(&params.arch()?)?;
        Ok(Server {
            rng: ChaCha8Rng::seed_from_u64(config.seed),
            params,
            config,
            round: 0,
        })
    }

    pub fn round(&self) -> usize {
        self.round
    }

    pub fn run_round(&mut self, fed: &Federation<'_>) -> Result<RoundResult> {
        let cfg = &self.config;
        // 1. selection
        let selection = if cfg.client_selection {
            select_clients(fed.pool, &fed.eligibility, cfg.report_goal, &mut self.rng)?
        } else {
            sample_clients(fed.pool.len(), cfg.report_goal, &mut self.rng)?
        };
        // 2. model preparation and download
        let prepared = prepare_model(&self.params, cfg)?;
        let download = TransportSize::of(&prepared.payload);
        let client_view = deserialize(&prepared.payload)?;

        // 3-4. on-device filtering and training
        let scheme = cfg.effective_scheme();
        let results: Vec<Result<(LocalUpdate, u64, f64, usize)>> = selection
            .ids
            .par_iter()
            .map(|&id| {
                let data = &fed.pool[id];
                let batch = if cfg.data_filtering {
                    filter_batch(data, &fed.eligibility, cfg.batch_size)?
                } else {
                    unfiltered_batch(data, cfg.batch_size)?
                };
                let update = local_update(
                    id,
                    &client_view,
                    &batch,
                    scheme,
                    fed.tables,
                    cfg.checkpointing,
                )?;
                let upload = encode_update(
                    &update.gradients,
                    &client_view,
                    update.weight,
                    update.example_count as u32,
                )?;
                let up = TransportSize::of(&upload);
                let tokens = batch.iter().map(|e| e.features.len()).sum();
                let memory = peak_memory_estimate(&client_view, cfg.checkpointing, tokens)?;
                let corrections = data.iter().filter(|e| e.is_correction).count();
                let rejected =
                    corrections - valid_corrections(data, fed.eligibility.max_word_len_diff).count();
                Ok((update, up.compressed, memory.total() as f64, rejected))
            })
            .collect();
        let mut updates = Vec::with_capacity(results.len());
        let mut upload_compressed = 0;
        let mut memory = 0.0;
        let mut rejected = 0;
        for r in results {
            let (u, c, m, rej) = r?;
            upload_compressed += c;
            memory += m;
            rejected += rej;
            updates.push(u);
        }
        let upload_raw = updates
            .first()
            .map(|u| crate::payload::update_size(&u.gradients, &client_view) as u64)
            .unwrap_or(0);

        // 5. aggregation and server step
        let aggregated = aggregate(&updates, cfg.aggregation)?;
        if let Some(g) = &aggregated {
            self.params = apply_update(&freeze_like(&self.params, &client_view), g, cfg.learning_rate)?;
        }
        self.round += 1;

        let words = (!fed.target_words.is_empty()).then_some(fed.target_words);
        let wer = evaluate(&self.params, fed.general_eval, words)?;
        let metrics = MetricsRecord {
            round: self.round,
            general_wer: wer.general,
            target_wer: wer.target,
            download_bytes_raw: download.raw,
            download_bytes_compressed: download.compressed,
            upload_bytes_raw: upload_raw,
            upload_bytes_compressed_total: upload_compressed,
            peak_memory_bytes: memory / updates.len() as f64,
            participating: updates.len(),
            exhausted: selection.exhausted,
            skipped: aggregated.is_none(),
            trained_examples: updates.iter().map(|u| u.example_count).sum(),
            rejected_corrections: rejected,
            weight_misses: updates.iter().map(|u| u.weight_misses).sum(),
            total_weight: updates.iter().map(|u| u.weight).sum(),
            quant_overflow: prepared.quant.overflow,
            quant_underflow: prepared.quant.underflow,
        };
        Ok(RoundResult {
            participants: selection.ids,
            aggregated,
            metrics,
        })
    }
}

/// Copies trainability flags from the client view onto the f32 master copy.
fn freeze_like(master: &ParameterSet, view: &ParameterSet) -> ParameterSet {
    let mut out = master.clone();
    for v in &mut out.variables {
        v.trainable = view.get(&v.name).map(|c| c.trainable).unwrap_or(false);
    }
    out
}

/// Runs `config.rounds` rounds from `initial`.
pub fn run_experiment(
    initial: ParameterSet,
    config: RoundConfig,
    fed: &Federation<'_>,
) -> Result<(ParameterSet, Vec<RoundResult>)> {
    let rounds = config.rounds;
    let mut server = Server::new(initial, config)?;
    let mut results = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        results.push(server.run_round(fed)?);
    }
    Ok((server.params, results))
}
