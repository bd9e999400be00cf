//! Text-generation scoring (BLEU-1..4, ROUGE-1) and decoding-error position
//! analysis. All scores are on a 0-100 scale; everything here is pure and
//! deterministic.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error("{0}")]
    Invalid(String),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
}

pub type Result<T> = std::result::Result<T, MetricsError>;

fn invalid<T>(msg: impl Into<String>) -> Result<T> {
    Err(MetricsError::Invalid(msg.into()))
}

// ---------------------------------------------------------------------------
// BLEU / ROUGE
// ---------------------------------------------------------------------------

/// BLEU-1..max_n with per-cutoff scores, modified n-gram precisions, and the
/// brevity penalty. No smoothing: a zero precision at cutoff n makes BLEU-n
/// exactly 0.
#[derive(Debug, Clone)]
pub struct BleuScore {
    /// scores[n-1] = BLEU-n on a 0-100 scale
    pub scores: Vec<f64>,
    /// precisions[n-1] = clipped modified n-gram precision p_n in [0, 1]
    pub precisions: Vec<f64>,
    pub brevity_penalty: f64,
}

fn ngram_counts(words: &[String], n: usize) -> HashMap<String, usize> {
    let mut counts = HashMap::new();
    if words.len() >= n {
        for w in words.windows(n) {
            *counts.entry(w.join("\x1f")).or_insert(0) += 1;
        }
    }
    counts
}

pub fn bleu(candidate: &[String], references: &[Vec<String>], max_n: usize) -> Result<BleuScore> {
    if max_n == 0 || max_n > 4 {
        return invalid(format!("bleu: max_n {max_n} outside 1..=4"));
    }
    if references.is_empty() || references.iter().all(|r| r.is_empty()) {
        return invalid("bleu: empty reference");
    }
    let c = candidate.len();
    // effective reference length: closest to c, ties broken to the shorter
    let r = references
        .iter()
        .map(|r| r.len())
        .min_by_key(|&len| (len.abs_diff(c), len))
        .unwrap();
    let brevity_penalty = if c == 0 {
        0.0
    } else if c > r {
        1.0
    } else {
        (1.0 - r as f64 / c as f64).exp()
    };

    let mut precisions = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let cand_counts = ngram_counts(candidate, n);
        let total: usize = cand_counts.values().sum();
        if total == 0 {
            precisions.push(0.0);
            continue;
        }
        let mut clipped = 0usize;
        for (gram, &count) in &cand_counts {
            let max_ref = references
                .iter()
                .map(|r| ngram_counts(r, n).get(gram).copied().unwrap_or(0))
                .max()
                .unwrap_or(0);
            clipped += count.min(max_ref);
        }
        precisions.push(clipped as f64 / total as f64);
    }

    let mut scores = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        if precisions[..n].iter().any(|&p| p == 0.0) {
            scores.push(0.0);
        } else {
            let log_mean: f64 =
                precisions[..n].iter().map(|p| p.ln()).sum::<f64>() / n as f64;
            scores.push(100.0 * brevity_penalty * log_mean.exp());
        }
    }
    Ok(BleuScore { scores, precisions, brevity_penalty })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Rouge1 {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Clipped unigram overlap on a 0-100 scale. An empty candidate scores zero.
pub fn rouge1(candidate: &[String], reference: &[String]) -> Rouge1 {
    if candidate.is_empty() || reference.is_empty() {
        return Rouge1 { precision: 0.0, recall: 0.0, f1: 0.0 };
    }
    let cand = ngram_counts(candidate, 1);
    let refc = ngram_counts(reference, 1);
    let overlap: usize = cand
        .iter()
        .map(|(w, &c)| c.min(refc.get(w).copied().unwrap_or(0)))
        .sum();
    let p = 100.0 * overlap as f64 / candidate.len() as f64;
    let r = 100.0 * overlap as f64 / reference.len() as f64;
    let f = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    Rouge1 { precision: p, recall: r, f1: f }
}

// ---------------------------------------------------------------------------
// Decoding-error position analysis
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ErrorKind {
    Substitution,
    Insertion,
    Deletion,
}

impl ErrorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ErrorKind::Substitution => "substitution",
            ErrorKind::Insertion => "insertion",
            ErrorKind::Deletion => "deletion",
        }
    }
}

/// One decoding error located in the truth word stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorEvent {
    pub kind: ErrorKind,
    /// global index into the truth word sequence
    pub truth_pos: usize,
    pub frame: usize,
    /// within-frame position percentile: 10, 20, .., 100
    pub pos_pct: usize,
}

fn locate(truth_pos: usize, frame_counts: &[usize]) -> (usize, usize) {
    let mut start = 0;
    for (frame, &count) in frame_counts.iter().enumerate() {
        if truth_pos < start + count {
            let within = truth_pos - start + 1; // 1-based
            let pct = (10 * within).div_ceil(count) * 10;
            return (frame, pct);
        }
        start += count;
    }
    unreachable!("truth position outside frame boundaries")
}

/// Minimal-cost edit alignment between decoded and truth word sequences with
/// unit costs; ties prefer substitution, then deletion, then insertion.
///
/// Counting rules: a substitution marks the mismatched truth position, an
/// insertion (redundant decoded word) marks the last matched truth position,
/// and a deletion marks every missing truth position. Matching is strict
/// exact match on the given tokens.
pub fn align_errors(
    decoded: &[String],
    truth: &[String],
    frame_counts: &[usize],
) -> Result<Vec<ErrorEvent>> {
    if truth.is_empty() {
        return invalid("align_errors: empty truth");
    }
    if frame_counts.iter().sum::<usize>() != truth.len() {
        return invalid(format!(
            "align_errors: frame boundaries cover {} words, truth has {}",
            frame_counts.iter().sum::<usize>(),
            truth.len()
        ));
    }
    let n = decoded.len();
    let m = truth.len();
    let mut dp = vec![0usize; (n + 1) * (m + 1)];
    let idx = |i: usize, j: usize| i * (m + 1) + j;
    for i in 0..=n {
        dp[idx(i, 0)] = i;
    }
    for j in 0..=m {
        dp[idx(0, j)] = j;
    }
    for i in 1..=n {
        for j in 1..=m {
            let sub = dp[idx(i - 1, j - 1)] + usize::from(decoded[i - 1] != truth[j - 1]);
            let del = dp[idx(i, j - 1)] + 1;
            let ins = dp[idx(i - 1, j)] + 1;
            dp[idx(i, j)] = sub.min(del).min(ins);
        }
    }

    // traceback, forward op order
    #[derive(Clone, Copy)]
    enum Step {
        Match(usize),
        Sub(usize),
        Del(usize),
        Ins,
    }
    // Error steps are tried before matches at equal cost so that redundant
    // or missing words attach after the last matched word in forward order;
    // among error kinds the preference is substitution, deletion, insertion.
    let mut steps = Vec::new();
    let (mut i, mut j) = (n, m);
    while i > 0 || j > 0 {
        let cost = dp[idx(i, j)];
        if i > 0 && j > 0 && decoded[i - 1] != truth[j - 1] && dp[idx(i - 1, j - 1)] + 1 == cost {
            steps.push(Step::Sub(j - 1));
            i -= 1;
            j -= 1;
        } else if j > 0 && dp[idx(i, j - 1)] + 1 == cost {
            steps.push(Step::Del(j - 1));
            j -= 1;
        } else if i > 0 && dp[idx(i - 1, j)] + 1 == cost {
            steps.push(Step::Ins);
            i -= 1;
        } else {
            steps.push(Step::Match(j - 1));
            i -= 1;
            j -= 1;
        }
    }
    steps.reverse();

    let mut events = Vec::new();
    let mut last_matched = 0usize;
    for step in steps {
        match step {
            Step::Match(j) => last_matched = j,
            Step::Sub(j) => {
                let (frame, pos_pct) = locate(j, frame_counts);
                events.push(ErrorEvent { kind: ErrorKind::Substitution, truth_pos: j, frame, pos_pct });
            }
            Step::Del(j) => {
                let (frame, pos_pct) = locate(j, frame_counts);
                events.push(ErrorEvent { kind: ErrorKind::Deletion, truth_pos: j, frame, pos_pct });
            }
            Step::Ins => {
                let (frame, pos_pct) = locate(last_matched, frame_counts);
                events.push(ErrorEvent { kind: ErrorKind::Insertion, truth_pos: last_matched, frame, pos_pct });
            }
        }
    }
    Ok(events)
}

/// Error probabilities at the ten within-frame percentiles 10..100.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PositionHistogram {
    /// probabilities[i] = p_{i+1}, the error probability of the (i+1)*10% position
    pub probabilities: [f64; 10],
    pub counts: [usize; 10],
    pub total: usize,
    pub first_half: f64,
    pub last_half: f64,
}

impl PositionHistogram {
    pub fn empty() -> Self {
        PositionHistogram {
            probabilities: [0.0; 10],
            counts: [0; 10],
            total: 0,
            first_half: 0.0,
            last_half: 0.0,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Buckets events by their within-frame percentile. With no events the
/// histogram is all-zero and flagged empty via `total == 0`.
pub fn error_position_distribution(
    events: &[ErrorEvent],
    frame_counts: &[usize],
) -> Result<PositionHistogram> {
    if frame_counts.iter().any(|&c| c == 0) {
        return invalid("error_position_distribution: empty frame in boundaries");
    }
    let mut h = PositionHistogram::empty();
    for e in events {
        if e.pos_pct == 0 || e.pos_pct > 100 || e.pos_pct % 10 != 0 {
            return invalid(format!("error_position_distribution: bad percentile {}", e.pos_pct));
        }
        h.counts[e.pos_pct / 10 - 1] += 1;
        h.total += 1;
    }
    if h.total > 0 {
        for i in 0..10 {
            h.probabilities[i] = h.counts[i] as f64 / h.total as f64;
        }
        h.first_half = h.probabilities[..5].iter().sum();
        h.last_half = h.probabilities[5..].iter().sum();
    }
    Ok(h)
}

/// Information-loss slope: the growth rate of error probability from the
/// first half of each frame to the last half,
/// `((p_6 + .. + p_10) - (p_1 + .. + p_5)) / 0.5`.
pub fn info_loss_slope(h: &PositionHistogram) -> f64 {
    (h.last_half - h.first_half) / 0.5
}

// ---------------------------------------------------------------------------
// Corpus-level report
// ---------------------------------------------------------------------------

/// One decoded/truth pair with the truth's per-frame word counts.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalPair {
    pub decoded: Vec<String>,
    pub truth: Vec<String>,
    pub frame_counts: Vec<usize>,
}

/// Aggregate metric outputs; scalar metrics are means over evaluated pairs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu_1: f64,
    pub bleu_2: f64,
    pub bleu_3: f64,
    pub bleu_4: f64,
    pub rouge1_precision: f64,
    pub rouge1_recall: f64,
    pub rouge1_f1: f64,
    pub histogram: PositionHistogram,
    pub phi: f64,
    pub pairs: usize,
    /// externally computed per-pair metrics merged in by name
    pub extra: BTreeMap<String, f64>,
}

impl ScoreReport {
    /// Plugin hook: merges externally computed per-pair scores (averaged)
    /// into the report under `name`.
    pub fn merge_external(&mut self, name: &str, per_pair: &[f64]) -> Result<()> {
        if per_pair.len() != self.pairs {
            return invalid(format!(
                "merge_external: {} values for {} pairs",
                per_pair.len(),
                self.pairs
            ));
        }
        let mean = per_pair.iter().sum::<f64>() / per_pair.len().max(1) as f64;
        self.extra.insert(name.to_string(), mean);
        Ok(())
    }
}

/// Scores every pair and pools the error events into one histogram.
pub fn evaluate_pairs(pairs: &[EvalPair]) -> Result<(ScoreReport, Vec<ErrorEvent>)> {
    if pairs.is_empty() {
        return invalid("evaluate_pairs: no pairs");
    }
    let mut bleu_sums = [0.0f64; 4];
    let mut rouge_sums = [0.0f64; 3];
    let mut events = Vec::new();
    for pair in pairs {
        let b = bleu(&pair.decoded, std::slice::from_ref(&pair.truth), 4)?;
        for (sum, s) in bleu_sums.iter_mut().zip(&b.scores) {
            *sum += s;
        }
        let r = rouge1(&pair.decoded, &pair.truth);
        rouge_sums[0] += r.precision;
        rouge_sums[1] += r.recall;
        rouge_sums[2] += r.f1;
        events.extend(align_errors(&pair.decoded, &pair.truth, &pair.frame_counts)?);
    }
    let n = pairs.len() as f64;
    let all_counts: Vec<usize> = pairs.iter().flat_map(|p| p.frame_counts.clone()).collect();
    let histogram = error_position_distribution(&events, &all_counts)?;
    let phi = info_loss_slope(&histogram);
    Ok((
        ScoreReport {
            bleu_1: bleu_sums[0] / n,
            bleu_2: bleu_sums[1] / n,
            bleu_3: bleu_sums[2] / n,
            bleu_4: bleu_sums[3] / n,
            rouge1_precision: rouge_sums[0] / n,
            rouge1_recall: rouge_sums[1] / n,
            rouge1_f1: rouge_sums[2] / n,
            histogram,
            phi,
            pairs: pairs.len(),
            extra: BTreeMap::new(),
        },
        events,
    ))
}

// ---------------------------------------------------------------------------
// Report files
// ---------------------------------------------------------------------------

/// `metrics.json` with sorted keys and a trailing newline.
pub fn write_metrics_json(report: &ScoreReport, path: &Path) -> Result<()> {
    let value = serde_json::to_value(report)?;
    fs::write(path, serde_json::to_string_pretty(&value)? + "\n")?;
    Ok(())
}

/// `errors.csv`: `kind,truth_pos,frame,pospct` per event.
pub fn write_errors_csv(events: &[ErrorEvent], path: &Path) -> Result<()> {
    let mut out = String::from("kind,truth_pos,frame,pospct\n");
    for e in events {
        out.push_str(&format!("{},{},{},{}\n", e.kind.as_str(), e.truth_pos, e.frame, e.pos_pct));
    }
    fs::write(path, out)?;
    Ok(())
}

/// `histogram.csv`: `bucket,probability` for buckets 10..100.
pub fn write_histogram_csv(h: &PositionHistogram, path: &Path) -> Result<()> {
    let mut out = String::from("bucket,probability\n");
    for (i, p) in h.probabilities.iter().enumerate() {
        out.push_str(&format!("{},{}\n", (i + 1) * 10, p));
    }
    fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn words(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_is_100() {
        let text = words("the quick brown fox jumps over the lazy dog");
        let b = bleu(&text, &[text.clone()], 4).unwrap();
        for s in &b.scores {
            assert!((s - 100.0).abs() < 1e-9);
        }
    }

    #[test]
    fn bleu_clipped_unigram_precision() {
        let cand = vec!["the".to_string(); 7];
        let reference = words("the cat is on the mat");
        let b = bleu(&cand, &[reference], 1).unwrap();
        assert!((b.precisions[0] - 2.0 / 7.0).abs() < 1e-12);
        // c=7 > r=6 so BP = 1
        assert_eq!(b.brevity_penalty, 1.0);
        assert!((b.scores[0] - 100.0 * 2.0 / 7.0).abs() < 1e-9);
    }

    #[test]
    fn bleu_brevity_penalty_formula() {
        let cand = words("a b c d e");
        let reference = words("a b c d e f g h i j");
        let b = bleu(&cand, &[reference], 1).unwrap();
        assert!((b.brevity_penalty - (-1.0f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn bleu_zero_precision_stays_zero() {
        let cand = words("x y");
        let reference = words("a b c");
        let b = bleu(&cand, &[reference], 4).unwrap();
        assert_eq!(b.scores, vec![0.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn bleu_empty_reference_errors() {
        assert!(bleu(&words("a"), &[], 4).is_err());
        assert!(bleu(&words("a"), &[vec![]], 4).is_err());
    }

    #[test]
    fn rouge1_identity_and_disjoint() {
        let text = words("he could still hear");
        let r = rouge1(&text, &text);
        assert_eq!((r.precision, r.recall, r.f1), (100.0, 100.0, 100.0));
        let r = rouge1(&words("x y"), &words("a b"));
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
    }

    #[test]
    fn rouge1_counting_oracle() {
        let r = rouge1(&words("a b c"), &words("a d"));
        assert!((r.precision - 100.0 / 3.0).abs() < 1e-9);
        assert!((r.recall - 50.0).abs() < 1e-9);
        assert!((r.f1 - 40.0).abs() < 1e-9);
    }

    #[test]
    fn rouge1_invariant_under_candidate_permutation() {
        let cand = words("d a c b a");
        let shuffled = words("a b a c d");
        let reference = words("a b c x");
        assert_eq!(rouge1(&cand, &reference), rouge1(&shuffled, &reference));
    }

    #[test]
    fn align_substitution_example() {
        let events = align_errors(&words("he should"), &words("he could"), &[2]).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, ErrorKind::Substitution);
        assert_eq!(events[0].truth_pos, 1);
    }

    #[test]
    fn align_exact_match_yields_nothing() {
        let text = words("it was more real");
        assert!(align_errors(&text, &text, &[4]).unwrap().is_empty());
    }

    #[test]
    fn align_missing_phrase_marks_every_deletion() {
        let truth = words("that sharp metal ripping explosion");
        let decoded = words("that explosion");
        let events = align_errors(&decoded, &truth, &[5]).unwrap();
        assert_eq!(events.len(), 3);
        for (e, want) in events.iter().zip([1, 2, 3]) {
            assert_eq!(e.kind, ErrorKind::Deletion);
            assert_eq!(e.truth_pos, want);
        }
    }

    #[test]
    fn align_redundant_word_marks_last_match() {
        let truth = words("hear and feel");
        let decoded = words("hear and and feel");
        let events = align_errors(&decoded, &truth, &[3]).unwrap();
        assert_eq!(events.len(), 1);
        assert_eq!(events[0].kind, ErrorKind::Insertion);
        assert_eq!(events[0].truth_pos, 1);
    }

    #[test]
    fn align_cost_matches_dp_oracle_on_random_pairs() {
        let mut state = 0x2545F491_4F6CDD1Du64;
        let mut next = move |bound: usize| {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            (state >> 33) as usize % bound
        };
        let lexicon = ["a", "b", "c", "d"];
        for _ in 0..200 {
            let tl = 1 + next(12);
            let dl = next(13);
            let truth: Vec<String> = (0..tl).map(|_| lexicon[next(4)].to_string()).collect();
            let decoded: Vec<String> = (0..dl).map(|_| lexicon[next(4)].to_string()).collect();
            let events = align_errors(&decoded, &truth, &[tl]).unwrap();
            assert_eq!(events.len(), levenshtein(&decoded, &truth), "{decoded:?} vs {truth:?}");
        }
    }

    fn levenshtein(a: &[String], b: &[String]) -> usize {
        let mut prev: Vec<usize> = (0..=b.len()).collect();
        for i in 1..=a.len() {
            let mut cur = vec![i; b.len() + 1];
            for j in 1..=b.len() {
                let cost = usize::from(a[i - 1] != b[j - 1]);
                cur[j] = (prev[j - 1] + cost).min(prev[j] + 1).min(cur[j - 1] + 1);
            }
            prev = cur;
        }
        prev[b.len()]
    }

    #[test]
    fn histogram_sums_to_one_and_places_mass() {
        let truth = words("w x y z");
        let decoded = words("w x y q");
        let events = align_errors(&decoded, &truth, &[4]).unwrap();
        let h = error_position_distribution(&events, &[4]).unwrap();
        assert!((h.probabilities.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        // single error at word 4 of a 4-word frame: all mass at 100%
        assert_eq!(h.probabilities[9], 1.0);
    }

    #[test]
    fn histogram_matches_hand_tabulated_oracle() {
        // two frames of 7 and 4 words; events at (frame pos) percentiles:
        // pos 2/7 -> ceil(20/7)*10 = 30; pos 7/7 -> 100; pos 1/4 -> ceil(10/4)*10=30;
        // pos 4/4 -> 100, plus a deletion at pos 3/4 -> ceil(30/4)*10 = 80
        let frames = [7usize, 4];
        let mk = |pos: usize, kind: ErrorKind| {
            let (frame, pct) = super::locate(pos, &frames);
            ErrorEvent { kind, truth_pos: pos, frame, pos_pct: pct }
        };
        let events = vec![
            mk(1, ErrorKind::Substitution),
            mk(6, ErrorKind::Substitution),
            mk(7, ErrorKind::Insertion),
            mk(10, ErrorKind::Deletion),
            mk(9, ErrorKind::Deletion),
        ];
        let h = error_position_distribution(&events, &frames).unwrap();
        assert_eq!(h.counts[2], 2); // 30%
        assert_eq!(h.counts[9], 2); // 100%
        assert_eq!(h.counts[7], 1); // 80%
        assert!((h.first_half - 0.4).abs() < 1e-12);
        assert!((h.last_half - 0.6).abs() < 1e-12);
    }

    #[test]
    fn histogram_empty_events_flagged() {
        let h = error_position_distribution(&[], &[3]).unwrap();
        assert!(h.is_empty());
        assert!(h.probabilities.iter().all(|&p| p == 0.0));
    }

    #[test]
    fn phi_fixtures() {
        let mut h = PositionHistogram::empty();
        h.probabilities = [0.1; 10];
        h.first_half = 0.5;
        h.last_half = 0.5;
        assert_eq!(info_loss_slope(&h), 0.0);
        h.first_half = 0.0;
        h.last_half = 1.0;
        assert_eq!(info_loss_slope(&h), 2.0);
        h.first_half = 1.0;
        h.last_half = 0.0;
        assert_eq!(info_loss_slope(&h), -2.0);
    }

    #[test]
    fn phi_invariant_under_count_scaling() {
        let events: Vec<ErrorEvent> = [20usize, 40, 90, 100]
            .iter()
            .map(|&pct| ErrorEvent {
                kind: ErrorKind::Substitution,
                truth_pos: 0,
                frame: 0,
                pos_pct: pct,
            })
            .collect();
        let h1 = error_position_distribution(&events, &[10]).unwrap();
        let tripled: Vec<ErrorEvent> = events.iter().cycle().take(12).cloned().collect();
        let h2 = error_position_distribution(&tripled, &[10]).unwrap();
        assert!((info_loss_slope(&h1) - info_loss_slope(&h2)).abs() < 1e-12);
    }

    #[test]
    fn report_merges_external_scores() {
        let pairs = vec![EvalPair {
            decoded: words("a b"),
            truth: words("a b"),
            frame_counts: vec![2],
        }];
        let (mut report, _) = evaluate_pairs(&pairs).unwrap();
        assert_eq!(report.pairs, 1);
        report.merge_external("bertscore", &[83.1]).unwrap();
        assert_eq!(report.extra["bertscore"], 83.1);
        assert!(report.merge_external("bad", &[1.0, 2.0]).is_err());
    }

    #[test]
    fn report_files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let pairs = vec![EvalPair {
            decoded: words("he should still"),
            truth: words("he could still"),
            frame_counts: vec![3],
        }];
        let (report, events) = evaluate_pairs(&pairs).unwrap();
        let mpath = dir.path().join("metrics.json");
        write_metrics_json(&report, &mpath).unwrap();
        let text = fs::read_to_string(&mpath).unwrap();
        assert!(text.ends_with('\n'));
        let parsed: serde_json::Value = serde_json::from_str(&text).unwrap();
        assert!(parsed.get("bleu_1").is_some());
        write_errors_csv(&events, &dir.path().join("errors.csv")).unwrap();
        let csv = fs::read_to_string(dir.path().join("errors.csv")).unwrap();
        assert!(csv.starts_with("kind,truth_pos,frame,pospct\n"));
        assert!(csv.ends_with('\n'));
        write_histogram_csv(&report.histogram, &dir.path().join("histogram.csv")).unwrap();
        let hcsv = fs::read_to_string(dir.path().join("histogram.csv")).unwrap();
        assert_eq!(hcsv.lines().count(), 11);
    }
}
