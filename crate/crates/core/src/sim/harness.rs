//! Experiment configuration, warm-start pretraining and the ablation ladder.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::client::{EligibilitySpec, WeightScheme, WeightTables};
use crate::error::{Error, Result};
use crate::model::{example_gradient, init_model, ModelArch, ParameterSet, WordId};
use crate::partial::TrainableSet;
use crate::payload::wrap;
use crate::server::{
    apply_update, prepare_model, AggregationRule, Federation, MetricsRecord, RoundConfig, Server,
};
use crate::sim::task::{build_world, client_correction_words, generate_clients, Dataset, TaskSpec, World};
use crate::stats::{accuracy_table, dp_histogram, evaluate, FreqTable, WerReport};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    pub hidden_dims: Vec<usize>,
    pub init_seed: u64,
}

/// Central warm start on incumbent-labeled data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainSection {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FederatedSection {
    pub report_goal: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rounds: usize,
    pub omc_enabled: bool,
    pub trainable_set: String,
    pub checkpointing: bool,
    pub max_word_len_diff: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacySection {
    pub epsilon: f64,
    pub clip_per_client: usize,
    pub floor: f64,
    /// Sum example weights over corrected word tokens instead of types.
    pub count_tokens: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentSection {
    pub seeds: Vec<u64>,
    pub arms: Vec<Arm>,
    /// A round is eligible for reporting while its general WER stays within
    /// this relative margin of the warm-start model's.
    pub general_wer_tolerance: f64,
    #[serde(default)]
    pub write_payloads: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub task: TaskSpec,
    pub model: ModelSection,
    pub pretrain: PretrainSection,
    pub federated: FederatedSection,
    pub privacy: PrivacySection,
    pub experiment: ExperimentSection,
}

/// The pinned reference experiment, identical to `configs/reference.toml`.
pub const REFERENCE_CONFIG: &str = include_str!("../../../../configs/reference.toml");
/// A small configuration for smoke runs, identical to `configs/smoke.toml`.
pub const SMOKE_CONFIG: &str = include_str!("../../../../configs/smoke.toml");

impl ExperimentConfig {
    pub fn reference() -> Self {
        Self::from_toml(REFERENCE_CONFIG).expect("reference config parses")
    }

    pub fn smoke() -> Self {
        Self::from_toml(SMOKE_CONFIG).expect("smoke config parses")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: ExperimentConfig =
            toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn arch(&self) -> ModelArch {
        ModelArch::new(
            self.task.vocab_size,
            self.task.feature_dim,
            self.model.hidden_dims.clone(),
        )
    }

    pub fn trainable_set(&self) -> Result<TrainableSet> {
        self.federated.trainable_set.parse()
    }

    pub fn eligibility(&self) -> EligibilitySpec {
        EligibilitySpec {
            min_corrections: self.federated.batch_size,
            max_word_len_diff: self.federated.max_word_len_diff,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.task.validate()?;
        self.arch().validate()?;
        self.trainable_set()?.resolve(&self.arch())?;
        if self.pretrain.batch_size == 0 || !(self.pretrain.learning_rate > 0.0) {
            return Err(Error::Config("pretrain batch_size and learning_rate must be positive".into()));
        }
        if !(self.privacy.epsilon > 0.0) || self.privacy.clip_per_client == 0 || !(self.privacy.floor > 0.0) {
            return Err(Error::Config("privacy epsilon, clip and floor must be positive".into()));
        }
        if self.experiment.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if !(self.experiment.general_wer_tolerance >= 0.0) {
            return Err(Error::Config("general_wer_tolerance must be non-negative".into()));
        }
        if self.task.examples_per_client < self.federated.batch_size {
            return Err(Error::Config("clients hold fewer examples than one batch".into()));
        }
        self.round_config(Arm::Filter, 0)?.validate()
    }

    pub fn round_config(&self, arm: Arm, seed: u64) -> Result<RoundConfig> {
        let f = &self.federated;
        let (client_selection, data_filtering, aggregation, weight_scheme) = arm.settings();
        Ok(RoundConfig {
            report_goal: f.report_goal,
            batch_size: f.batch_size,
            aggregation,
            weight_scheme,
            omc_enabled: f.omc_enabled,
            trainable_set: self.trainable_set()?,
            learning_rate: f.learning_rate,
            rounds: f.rounds,
            seed: derive_seed(seed, 5),
            client_selection,
            data_filtering,
            checkpointing: f.checkpointing,
        })
    }
}

/// One rung of the ablation ladder; each adds a method to the one before.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Arm {
    Initial,
    Select,
    Filter,
    WcaFreq,
    WcaFreqAcc,
}

impl Arm {
    pub const ALL: [Arm; 5] = [
        Arm::Initial,
        Arm::Select,
        Arm::Filter,
        Arm::WcaFreq,
        Arm::WcaFreqAcc,
    ];

    /// `(client selection, data filtering, aggregation, weight scheme)`.
    pub fn settings(self) -> (bool, bool, AggregationRule, WeightScheme) {
        match self {
            Arm::Initial => (false, false, AggregationRule::SimpleAvg, WeightScheme::Uniform),
            Arm::Select => (true, false, AggregationRule::SimpleAvg, WeightScheme::Uniform),
            Arm::Filter => (true, true, AggregationRule::SimpleAvg, WeightScheme::Uniform),
            Arm::WcaFreq => (true, true, AggregationRule::Wca, WeightScheme::Frequency),
            Arm::WcaFreqAcc => (true, true, AggregationRule::Wca, WeightScheme::FreqAccuracy),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Arm::Initial => "initial",
            Arm::Select => "select",
            Arm::Filter => "filter",
            Arm::WcaFreq => "wca-freq",
            Arm::WcaFreqAcc => "wca-freqacc",
        }
    }
}

impl fmt::Display for Arm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Arm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Arm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown arm {s:?}")))
    }
}

impl TryFrom<String> for Arm {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Arm> for String {
    fn from(a: Arm) -> String {
        a.name().to_string()
    }
}

/// Mixes a stream index into a run seed (splitmix64 finalizer).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed
        .wrapping_add(stream.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Minibatch SGD on incumbent-labeled central data.
pub fn pretrain(
    initial: ParameterSet,
    data: &[(Vec<Vec<f32>>, Vec<WordId>)],
    settings: &PretrainSection,
    seed: u64,
) -> Result<ParameterSet> {
    let mut params = initial;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    for _ in 0..settings.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(settings.batch_size) {
            let grads: Vec<_> = chunk
                .par_iter()
                .map(|&i| example_gradient(&params, &data[i].0, &data[i].1, false))
                .collect::<Result<_>>()?;
            let mut mean = grads[0].clone();
            for g in &grads[1..] {
                for (k, v) in g {
                    for (m, x) in mean.get_mut(k).unwrap().iter_mut().zip(v) {
                        *m += x;
                    }
                }
            }
            let n = grads.len() as f32;
            mean.values_mut().flatten().for_each(|m| *m /= n);
            params = apply_update(&params, &mean, settings.learning_rate)?;
        }
    }
    Ok(params)
}

/// Everything shared by the arms of one seed.
#[derive(Debug, Clone)]
pub struct SeedContext {
    pub seed: u64,
    pub world: World,
    pub data: Dataset,
    pub initial_model: ParameterSet,
    pub tables: WeightTables,
    pub baseline: WerReport,
}

pub fn build_tables(config: &ExperimentConfig, data: &Dataset, seed: u64) -> Result<WeightTables> {
    let words = client_correction_words(&data.clients, config.federated.max_word_len_diff);
    let domain: BTreeSet<WordId> = (0..config.task.vocab_size as WordId).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 3));
    let freq: FreqTable = dp_histogram(
        &words,
        &domain,
        config.privacy.epsilon,
        config.privacy.clip_per_client,
        config.privacy.floor,
        &mut rng,
    )?;
    let acc = accuracy_table(
        data.accuracy_eval
            .iter()
            .map(|(t, o)| (t.as_slice(), o.as_slice())),
    )?;
    Ok(WeightTables {
        freq,
        acc,
        count_tokens: config.privacy.count_tokens,
    })
}

/// Generates the world, client pool, tables and warm-start model for a seed.
pub fn prepare_seed(config: &ExperimentConfig, seed: u64) -> Result<SeedContext> {
    config.validate()?;
    let mut task = config.task.clone();
    task.embedding_seed = derive_seed(task.embedding_seed ^ seed, 1);
    let world = build_world(&task)?;
    let data = generate_clients(&world, derive_seed(seed, 2), config.federated.max_word_len_diff);
    let tables = build_tables(config, &data, seed)?;
    let init = init_model(&config.arch(), derive_seed(config.model.init_seed ^ seed, 4))?;
    let initial_model = pretrain(init, &data.pretrain, &config.pretrain, derive_seed(seed, 6))?;
    let words = (!data.corrected_words.is_empty()).then_some(&data.corrected_words);
    let baseline = evaluate(&initial_model, &data.eval, words)?;
    Ok(SeedContext {
        seed,
        world,
        data,
        initial_model,
        tables,
        baseline,
    })
}

#[derive(Debug, Clone)]
pub struct ArmRun {
    pub arm: Arm,
    pub seed: u64,
    pub baseline: WerReport,
    pub records: Vec<MetricsRecord>,
}

impl ArmRun {
    /// Lowest target WER among rounds whose general WER stays within the
    /// tolerance of the warm-start general WER. Round 0 is the warm start.
    pub fn selected_round(&self, tolerance: f64) -> usize {
        let limit = self.baseline.general * (1.0 + tolerance);
        let mut best = (0, self.baseline.target.unwrap_or(f64::INFINITY));
        for r in &self.records {
            if let Some(t) = r.target_wer {
                if r.general_wer <= limit && t < best.1 {
                    best = (r.round, t);
                }
            }
        }
        best.0
    }

    /// `(general, target)` WER after `round`; round 0 is the warm start.
    pub fn wer_at(&self, round: usize) -> (f64, Option<f64>) {
        if round == 0 {
            (self.baseline.general, self.baseline.target)
        } else {
            let r = &self.records[round - 1];
            (r.general_wer, r.target_wer)
        }
    }

    pub fn final_wer(&self) -> (f64, Option<f64>) {
        self.wer_at(self.records.len())
    }

    pub fn argmin_general(&self) -> usize {
        argmin((0..=self.records.len()).map(|r| self.wer_at(r).0))
    }

    pub fn argmin_target(&self) -> usize {
        argmin((0..=self.records.len()).map(|r| self.wer_at(r).1.unwrap_or(f64::INFINITY)))
    }

    pub fn metrics_jsonl(&self) -> String {
        let mut s = String::new();
        for r in &self.records {
            s.push_str(&serde_json::to_string(r).expect("metrics serialize"));
            s.push('\n');
        }
        s
    }
}

/// First index of the minimum.
fn argmin(values: impl Iterator<Item = f64>) -> usize {
    let mut best = (0, f64::INFINITY);
    for (i, v) in values.enumerate() {
        if v < best.1 {
            best = (i, v);
        }
    }
    best.0
}

/// Runs one arm from the seed's warm start. When `payload_dir` is given each
/// round's download payload is written there in wire form.
pub fn run_arm(
    config: &ExperimentConfig,
    ctx: &SeedContext,
    arm: Arm,
    payload_dir: Option<&Path>,
) -> Result<ArmRun> {
    let round_cfg = config.round_config(arm, ctx.seed)?;
    let fed = Federation {
        pool: &ctx.data.clients,
        eligibility: config.eligibility(),
        tables: Some(&ctx.tables),
        general_eval: &ctx.data.eval,
        target_words: &ctx.data.corrected_words,
    };
    let rounds = round_cfg.rounds;
    let mut server = Server::new(ctx.initial_model.clone(), round_cfg)?;
    let mut records = Vec::with_capacity(rounds);
    for _ in 0..rounds {
        if let Some(dir) = payload_dir {
            let prepared = prepare_model(&server.params, &server.config)?;
            let path = dir.join(format!(
                "{}_seed{}_round{:04}.bin",
                arm,
                ctx.seed,
                server.round() + 1
            ));
            fs::write(path, wrap(&prepared.payload, true))?;
        }
        records.push(server.run_round(&fed)?.metrics);
    }
    Ok(ArmRun {
        arm,
        seed: ctx.seed,
        baseline: ctx.baseline,
        records,
    })
}

/// Per-arm means over seeds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ArmSummary {
    pub arm: Arm,
    pub seeds: usize,
    pub baseline_general_wer: f64,
    pub baseline_target_wer: Option<f64>,
    pub selected_general_wer: f64,
    pub selected_target_wer: Option<f64>,
    pub final_general_wer: f64,
    pub final_target_wer: Option<f64>,
    pub mean_selected_round: f64,
}

fn mean_opt(values: impl Iterator<Item = Option<f64>>) -> Option<f64> {
    let v: Option<Vec<f64>> = values.collect();
    v.filter(|v| !v.is_empty())
        .map(|v| v.iter().sum::<f64>() / v.len() as f64)
}

pub fn summarize(runs: &[ArmRun], tolerance: f64) -> Vec<ArmSummary> {
    let arms: BTreeSet<Arm> = runs.iter().map(|r| r.arm).collect();
    arms.into_iter()
        .map(|arm| {
            let rs: Vec<&ArmRun> = runs.iter().filter(|r| r.arm == arm).collect();
            let n = rs.len() as f64;
            let sel: Vec<usize> = rs.iter().map(|r| r.selected_round(tolerance)).collect();
            ArmSummary {
                arm,
                seeds: rs.len(),
                baseline_general_wer: rs.iter().map(|r| r.baseline.general).sum::<f64>() / n,
                baseline_target_wer: mean_opt(rs.iter().map(|r| r.baseline.target)),
                selected_general_wer: rs
                    .iter()
                    .zip(&sel)
                    .map(|(r, &s)| r.wer_at(s).0)
                    .sum::<f64>()
                    / n,
                selected_target_wer: mean_opt(rs.iter().zip(&sel).map(|(r, &s)| r.wer_at(s).1)),
                final_general_wer: rs.iter().map(|r| r.final_wer().0).sum::<f64>() / n,
                final_target_wer: mean_opt(rs.iter().map(|r| r.final_wer().1)),
                mean_selected_round: sel.iter().sum::<usize>() as f64 / n,
            }
        })
        .collect()
}

fn pct(v: Option<f64>) -> String {
    v.map(|x| format!("{:.2}", 100.0 * x))
        .unwrap_or_else(|| "-".to_string())
}

/// Plain-text summary table, WERs in percent.
pub fn summary_table(summaries: &[ArmSummary]) -> String {
    let mut s = String::from(
        "arm\tseeds\tbase_gen\tbase_tgt\tsel_round\tsel_gen\tsel_tgt\tfinal_gen\tfinal_tgt\n",
    );
    for a in summaries {
        s.push_str(&format!(
            "{}\t{}\t{}\t{}\t{:.1}\t{}\t{}\t{}\t{}\n",
            a.arm,
            a.seeds,
            pct(Some(a.baseline_general_wer)),
            pct(a.baseline_target_wer),
            a.mean_selected_round,
            pct(Some(a.selected_general_wer)),
            pct(a.selected_target_wer),
            pct(Some(a.final_general_wer)),
            pct(a.final_target_wer),
        ));
    }
    s
}

/// Runs the requested arms for every seed, writing one metrics file per arm
/// and seed plus `summary.tsv` when `out` is given.
pub fn run_experiment_suite(
    config: &ExperimentConfig,
    seeds: &[u64],
    arms: &[Arm],
    out: Option<&Path>,
) -> Result<Vec<ArmRun>> {
    let payload_dir = match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            if config.experiment.write_payloads {
                let p = dir.join("payloads");
                fs::create_dir_all(&p)?;
                Some(p)
            } else {
                None
            }
        }
        None => None,
    };
    let mut runs = Vec::new();
    for &seed in seeds {
        let ctx = prepare_seed(config, seed)?;
        for &arm in arms {
            let run = run_arm(config, &ctx, arm, payload_dir.as_deref())?;
            if let Some(dir) = out {
                let mut f = fs::File::create(dir.join(format!("metrics_{arm}_seed{seed}.jsonl")))?;
                f.write_all(run.metrics_jsonl().as_bytes())?;
            }
            runs.push(run);
        }
    }
    if let Some(dir) = out {
        let table = summary_table(&summarize(&runs, config.experiment.general_wer_tolerance));
        fs::write(dir.join("summary.tsv"), table)?;
    }
    Ok(runs)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn arm_names_roundtrip() {
        for a in Arm::ALL {
            assert_eq!(a.name().parse::<Arm>().unwrap(), a);
        }
        assert!("best".parse::<Arm>().is_err());
    }

    #[test]
    fn bundled_configs_parse() {
        let r = ExperimentConfig::reference();
        assert_eq!(r.model.hidden_dims, vec![32, 32, 32]);
        assert_eq!(r.federated.report_goal, 16);
        assert_eq!(r.federated.batch_size, 2);
        assert_eq!(r.federated.rounds, 150);
        assert_eq!(r.experiment.seeds.len(), 3);
        let again = ExperimentConfig::from_toml(&r.to_toml()).unwrap();
        assert_eq!(again, r);
        ExperimentConfig::smoke();
    }

    #[test]
    fn bad_config_is_a_config_error() {
        assert!(matches!(
            ExperimentConfig::from_toml("[task]\nvocab_size = 3\n"),
            Err(Error::Config(_))
        ));
        let mut text = SMOKE_CONFIG.replace("fix_prob = 0.7", "fix_prob = 0.95");
        text = text.replace("garble_prob = 0.1", "garble_prob = 0.2");
        assert!(ExperimentConfig::from_toml(&text).is_err());
    }

    #[test]
    fn derived_seeds_differ() {
        assert_ne!(derive_seed(1, 1), derive_seed(1, 2));
        assert_ne!(derive_seed(1, 1), derive_seed(2, 1));
        assert_eq!(derive_seed(7, 3), derive_seed(7, 3));
    }

    #[test]
    fn selected_round_respects_general_limit() {
        let rec = |round, g, t| MetricsRecord {
            round,
            general_wer: g,
            target_wer: Some(t),
            download_bytes_raw: 0,
            download_bytes_compressed: 0,
            upload_bytes_raw: 0,
            upload_bytes_compressed_total: 0,
            peak_memory_bytes: 0.0,
            participating: 0,
            exhausted: false,
            skipped: false,
            trained_examples: 0,
            rejected_corrections: 0,
            weight_misses: 0,
            total_weight: 0.0,
            quant_overflow: 0,
            quant_underflow: 0,
        };
        let run = ArmRun {
            arm: Arm::Filter,
            seed: 0,
            baseline: WerReport {
                general: 0.10,
                target: Some(0.30),
            },
            records: vec![rec(1, 0.09, 0.25), rec(2, 0.10, 0.20), rec(3, 0.12, 0.10)],
        };
        assert_eq!(run.selected_round(0.0), 2);
        assert_eq!(run.selected_round(0.25), 3);
        assert_eq!(run.argmin_general(), 1);
        assert_eq!(run.argmin_target(), 3);
        assert_eq!(run.final_wer(), (0.12, Some(0.10)));
    }
}
