//! Word statistics shared by server and clients: the noisy correction
//! histogram, the incumbent's per-word accuracy, and word error rates.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{forward, ParameterSet, WordId};

/// Smallest frequency the released histogram may hold.
pub const DEFAULT_FLOOR: f64 = 1.0;

/// Differentially private word frequencies.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FreqTable {
    pub counts: BTreeMap<WordId, f64>,
    pub epsilon: f64,
    pub floor: f64,
}

impl FreqTable {
    pub fn get(&self, word: WordId) -> Option<f64> {
        self.counts.get(&word).copied()
    }

    /// Absent words resolve to the floor.
    pub fn lookup_or_floor(&self, word: WordId) -> f64 {
        self.get(word).unwrap_or(self.floor)
    }

    /// Largest stored frequency, or the floor when the table is empty.
    pub fn max_frequency(&self) -> f64 {
        self.counts.values().copied().fold(self.floor, f64::max)
    }

    pub fn scaled(&self, c: f64) -> FreqTable {
        FreqTable {
            counts: self.counts.iter().map(|(&w, &v)| (w, v * c)).collect(),
            epsilon: self.epsilon,
            floor: self.floor * c,
        }
    }

    pub fn to_text(&self) -> String {
        table_to_text(&self.counts)
    }
}

/// Per-word accuracy of the incumbent transcriber, in `[0, 1]`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AccTable {
    pub accuracy: BTreeMap<WordId, f64>,
}

impl AccTable {
    pub fn new(accuracy: BTreeMap<WordId, f64>) -> Self {
        AccTable {
            accuracy: accuracy
                .into_iter()
                .map(|(w, a)| (w, a.clamp(0.0, 1.0)))
                .collect(),
        }
    }

    /// Words never seen count as recognized perfectly.
    pub fn get(&self, word: WordId) -> f64 {
        self.accuracy.get(&word).copied().unwrap_or(1.0)
    }

    pub fn to_text(&self) -> String {
        table_to_text(&self.accuracy)
    }
}

fn table_to_text(table: &BTreeMap<WordId, f64>) -> String {
    let mut s = String::new();
    for (w, v) in table {
        writeln!(s, "{w}\t{v}").unwrap();
    }
    s
}

/// Parses `word_id<TAB>value` lines. Blank lines are skipped.
pub fn parse_table(text: &str) -> Result<BTreeMap<WordId, f64>> {
    let mut out = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (w, v) = line
            .split_once('\t')
            .ok_or_else(|| Error::Decode(format!("line {}: missing tab", i + 1)))?;
        let w: WordId = w
            .parse()
            .map_err(|_| Error::Decode(format!("line {}: bad word id {w:?}", i + 1)))?;
        let v: f64 = v
            .trim_end()
            .parse()
            .map_err(|_| Error::Decode(format!("line {}: bad value {v:?}", i + 1)))?;
        out.insert(w, v);
    }
    Ok(out)
}

/// The set of words users corrected to.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectedWordList {
    pub words: BTreeSet<WordId>,
}

impl CorrectedWordList {
    pub fn new(words: impl IntoIterator<Item = WordId>) -> Self {
        CorrectedWordList {
            words: words.into_iter().collect(),
        }
    }

    pub fn contains(&self, w: WordId) -> bool {
        self.words.contains(&w)
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn intersects(&self, seq: &[WordId]) -> bool {
        seq.iter().any(|w| self.words.contains(w))
    }
}

fn laplace(scale: f64) -> Exp<f64> {
    Exp::new(1.0 / scale).expect("scale is positive and finite")
}

/// Clipped counts with double-exponential noise, rounded to integers but
/// not yet floored. Each client contributes at most `clip_per_client`
/// words (its first ones); only words in `domain` are released.
pub fn noisy_counts<R: Rng + ?Sized>(
    client_words: &[Vec<WordId>],
    domain: &BTreeSet<WordId>,
    epsilon: f64,
    clip_per_client: usize,
    rng: &mut R,
) -> Result<BTreeMap<WordId, f64>> {
    if !(epsilon > 0.0) || !epsilon.is_finite() {
        return Err(Error::Config(format!("epsilon must be positive, got {epsilon}")));
    }
    if clip_per_client == 0 {
        return Err(Error::Config("clip_per_client must be at least 1".into()));
    }
    let mut counts: BTreeMap<WordId, f64> = domain.iter().map(|&w| (w, 0.0)).collect();
    for words in client_words {
        for w in words.iter().take(clip_per_client) {
            if let Some(c) = counts.get_mut(w) {
                *c += 1.0;
            }
        }
    }
    let exp = laplace(clip_per_client as f64 / epsilon);
    for c in counts.values_mut() {
        let noise = exp.sample(rng) - exp.sample(rng);
        *c = (*c + noise).round();
    }
    Ok(counts)
}

/// Releases the per-word correction histogram, floored at `floor`.
pub fn dp_histogram<R: Rng + ?Sized>(
    client_words: &[Vec<WordId>],
    domain: &BTreeSet<WordId>,
    epsilon: f64,
    clip_per_client: usize,
    floor: f64,
    rng: &mut R,
) -> Result<FreqTable> {
    if !(floor > 0.0) {
        return Err(Error::Config("frequency floor must be positive".into()));
    }
    let counts = noisy_counts(client_words, domain, epsilon, clip_per_client, rng)?
        .into_iter()
        .map(|(w, c)| (w, c.max(floor)))
        .collect();
    Ok(FreqTable {
        counts,
        epsilon,
        floor,
    })
}

/// `acc_w = #(truth = w and incumbent = w) / #(truth = w)` over aligned
/// `(truth, incumbent output)` pairs.
pub fn accuracy_table<'a, I>(eval: I) -> Result<AccTable>
where
    I: IntoIterator<Item = (&'a [WordId], &'a [WordId])>,
{
    let mut hits: BTreeMap<WordId, (u64, u64)> = BTreeMap::new();
    let mut any = false;
    for (truth, output) in eval {
        any = true;
        if truth.len() != output.len() {
            return Err(Error::Data(format!(
                "incumbent output of length {} for reference of length {}",
                output.len(),
                truth.len()
            )));
        }
        for (&t, &o) in truth.iter().zip(output) {
            let e = hits.entry(t).or_default();
            e.1 += 1;
            if t == o {
                e.0 += 1;
            }
        }
    }
    if !any {
        return Err(Error::Config("accuracy table needs a non-empty eval set".into()));
    }
    Ok(AccTable::new(
        hits.into_iter()
            .map(|(w, (ok, n))| (w, ok as f64 / n as f64))
            .collect(),
    ))
}

/// One step of a minimum-cost alignment from `source` to `target`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EditOp {
    Match { source: usize, target: usize },
    Substitute { source: usize, target: usize },
    Insert { target: usize },
    Delete { source: usize },
}

fn edit_table(source: &[WordId], target: &[WordId]) -> Vec<Vec<usize>> {
    let (n, m) = (source.len(), target.len());
    let mut d = vec![vec![0usize; m + 1]; n + 1];
    for (i, row) in d.iter_mut().enumerate() {
        row[0] = i;
    }
    for j in 0..=m {
        d[0][j] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = d[i - 1][j - 1] + usize::from(source[i - 1] != target[j - 1]);
            d[i][j] = sub.min(d[i - 1][j] + 1).min(d[i][j - 1] + 1);
        }
    }
    d
}

/// Levenshtein distance with unit costs.
pub fn edit_distance(source: &[WordId], target: &[WordId]) -> usize {
    edit_table(source, target)[source.len()][target.len()]
}

/// A minimum-cost alignment, preferring diagonal moves on ties.
pub fn align(source: &[WordId], target: &[WordId]) -> Vec<EditOp> {
    let d = edit_table(source, target);
    let (mut i, mut j) = (source.len(), target.len());
    let mut ops = Vec::with_capacity(i.max(j));
    while i > 0 || j > 0 {
        if i > 0 && j > 0 {
            let same = source[i - 1] == target[j - 1];
            if d[i][j] == d[i - 1][j - 1] + usize::from(!same) {
                ops.push(if same {
                    EditOp::Match { source: i - 1, target: j - 1 }
                } else {
                    EditOp::Substitute { source: i - 1, target: j - 1 }
                });
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i][j] == d[i][j - 1] + 1 {
            ops.push(EditOp::Insert { target: j - 1 });
            j -= 1;
        } else {
            ops.push(EditOp::Delete { source: i - 1 });
            i -= 1;
        }
    }
    ops.reverse();
    ops
}

/// Word error rate of `hypothesis` against `reference`.
pub fn wer(hypothesis: &[WordId], reference: &[WordId]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Undefined("word error rate of an empty reference".into()));
    }
    Ok(edit_distance(hypothesis, reference) as f64 / reference.len() as f64)
}

/// An utterance with its true transcript, used for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledUtterance {
    pub features: Vec<Vec<f32>>,
    pub truth: Vec<WordId>,
}

pub fn transcribe(model: &ParameterSet, features: &[Vec<f32>]) -> Result<Vec<WordId>> {
    Ok(forward(model, features, false)?.predictions())
}

/// Total errors over total reference words.
pub fn corpus_wer<'a, I>(model: &ParameterSet, utterances: I) -> Result<Option<f64>>
where
    I: IntoIterator<Item = &'a LabeledUtterance>,
{
    let mut errors = 0usize;
    let mut words = 0usize;
    for u in utterances {
        let hyp = transcribe(model, &u.features)?;
        errors += edit_distance(&hyp, &u.truth);
        words += u.truth.len();
    }
    Ok((words > 0).then(|| errors as f64 / words as f64))
}

pub fn general_wer(model: &ParameterSet, eval: &[LabeledUtterance]) -> Result<f64> {
    corpus_wer(model, eval)?
        .ok_or_else(|| Error::Config("general eval set is empty".into()))
}

/// WER restricted to utterances whose reference contains a corrected word.
/// `None` when no utterance qualifies.
pub fn target_wer(
    model: &ParameterSet,
    eval: &[LabeledUtterance],
    words: &CorrectedWordList,
) -> Result<Option<f64>> {
    if words.is_empty() {
        return Err(Error::Config("corrected word list is empty".into()));
    }
    corpus_wer(model, eval.iter().filter(|u| words.intersects(&u.truth)))
}

/// General and target WER from one pass over the eval set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WerReport {
    pub general: f64,
    pub target: Option<f64>,
}

/// Transcribes every eval utterance once (in parallel) and scores both the
/// general and, when `words` is given, the target subset.
pub fn evaluate(
    model: &ParameterSet,
    eval: &[LabeledUtterance],
    words: Option<&CorrectedWordList>,
) -> Result<WerReport> {
    if eval.is_empty() {
        return Err(Error::Config("general eval set is empty".into()));
    }
    if words.is_some_and(|w| w.is_empty()) {
        return Err(Error::Config("corrected word list is empty".into()));
    }
    let scored: Vec<(usize, usize, bool)> = eval
        .par_iter()
        .map(|u| {
            let hyp = transcribe(model, &u.features)?;
            let in_target = words.is_some_and(|w| w.intersects(&u.truth));
            Ok((edit_distance(&hyp, &u.truth), u.truth.len(), in_target))
        })
        .collect::<Result<_>>()?;
    let (mut e, mut n, mut te, mut tn) = (0usize, 0usize, 0usize, 0usize);
    for (err, len, t) in scored {
        e += err;
        n += len;
        if t {
            te += err;
            tn += len;
        }
    }
    if n == 0 {
        return Err(Error::Config("general eval set has no words".into()));
    }
    Ok(WerReport {
        general: e as f64 / n as f64,
        target: (tn > 0).then(|| te as f64 / tn as f64),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn wer_examples() {
        assert_eq!(wer(&[1, 2, 3], &[1, 2, 3]).unwrap(), 0.0);
        assert!((wer(&[1, 2, 3], &[1, 9, 3]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert_eq!(wer(&[1, 2], &[1, 2, 3, 4]).unwrap(), 0.5);
        assert!(matches!(wer(&[1], &[]), Err(Error::Undefined(_))));
        assert_eq!(wer(&[], &[1, 2]).unwrap(), 1.0);
    }

    #[test]
    fn alignment_reconstructs_target() {
        let src = [1, 2, 3, 4];
        let dst = [1, 5, 3, 6, 4];
        let ops = align(&src, &dst);
        let cost = ops
            .iter()
            .filter(|op| !matches!(op, EditOp::Match { .. }))
            .count();
        assert_eq!(cost, edit_distance(&src, &dst));
        let rebuilt: Vec<_> = ops
            .iter()
            .filter_map(|op| match *op {
                EditOp::Match { target, .. }
                | EditOp::Substitute { target, .. }
                | EditOp::Insert { target } => Some(dst[target]),
                EditOp::Delete { .. } => None,
            })
            .collect();
        assert_eq!(rebuilt, dst);
    }

    #[test]
    fn huge_epsilon_gives_true_counts() {
        let clients = vec![vec![1, 2, 2, 3], vec![2, 2], vec![5]];
        let domain: BTreeSet<_> = (0..6).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = dp_histogram(&clients, &domain, 1e9, 3, 1.0, &mut rng).unwrap();
        // clipped: [1,2,2], [2,2], [5]
        assert_eq!(t.get(1), Some(1.0));
        assert_eq!(t.get(2), Some(4.0));
        assert_eq!(t.get(3), Some(1.0)); // clipped away, floored
        assert_eq!(t.get(5), Some(1.0));
        assert_eq!(t.get(0), Some(1.0));
        assert_eq!(t.get(9), None);
        assert_eq!(t.lookup_or_floor(9), 1.0);
    }

    #[test]
    fn empty_pool_resolves_to_floor() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = dp_histogram(&[], &BTreeSet::new(), 1.0, 1, 1.0, &mut rng).unwrap();
        assert_eq!(t.lookup_or_floor(42), 1.0);
        assert_eq!(t.max_frequency(), 1.0);
    }

    #[test]
    fn bad_epsilon() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for eps in [0.0, -1.0, f64::NAN] {
            assert!(matches!(
                dp_histogram(&[], &BTreeSet::new(), eps, 1, 1.0, &mut rng),
                Err(Error::Config(_))
            ));
        }
    }

    #[test]
    fn noise_is_centered() {
        // 3 clients, true count of word 7 is 3.
        let clients = vec![vec![7], vec![7, 8], vec![7]];
        let domain: BTreeSet<_> = [7, 8].into_iter().collect();
        let trials = 10_000;
        let mut sum = 0.0;
        for seed in 0..trials {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sum += noisy_counts(&clients, &domain, 1.0, 2, &mut rng).unwrap()[&7];
        }
        let mean = sum / trials as f64;
        // Laplace(scale 2) variance 8 plus rounding 1/12
        let sigma = ((8.0 + 1.0 / 12.0) / trials as f64).sqrt();
        assert!((mean - 3.0).abs() < 3.0 * sigma, "mean {mean}");
    }

    #[test]
    fn accuracy_examples() {
        let truth = vec![1, 2, 1, 1, 1];
        let out = vec![1, 2, 9, 1, 1];
        let t = accuracy_table([(&truth[..], &out[..])]).unwrap();
        assert_eq!(t.get(1), 0.75);
        assert_eq!(t.get(2), 1.0);
        assert_eq!(t.get(77), 1.0);

        let wrong = vec![3, 3];
        let t = accuracy_table([(&wrong[..], &[4, 4][..])]).unwrap();
        assert_eq!(t.get(3), 0.0);

        let none: Vec<(&[WordId], &[WordId])> = vec![];
        assert!(matches!(accuracy_table(none), Err(Error::Config(_))));
    }

    #[test]
    fn table_text_roundtrip() {
        let t = AccTable::new([(3, 0.1), (10, 1.0 / 3.0), (4, 1.0)].into_iter().collect());
        assert_eq!(parse_table(&t.to_text()).unwrap(), t.accuracy);
        assert_eq!(t.to_text().lines().next().unwrap(), "3\t0.1");
        assert!(parse_table("1 2\n").is_err());
    }

    #[test]
    fn acc_values_clamped() {
        let t = AccTable::new([(1, 1.5), (2, -0.2)].into_iter().collect());
        assert_eq!(t.get(1), 1.0);
        assert_eq!(t.get(2), 0.0);
    }
}
