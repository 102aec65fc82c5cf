//! Drift measurements over decoded pivot messages.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::hash::Hash;

use crate::agents::Agent;
use crate::constraints::LanguageModel;
use crate::corpus::{Category, LanguageSpec, Meaning, Triple, Vocabs};
use crate::error::{Error, Result};

pub const BLEU_SMOOTHING: &str = "add-one on n>=2 counts when any n-gram precision is zero";

fn ngram_counts<T: Hash + Eq + Clone>(toks: &[T], n: usize) -> HashMap<&[T], usize> {
    let mut m = HashMap::new();
    if toks.len() >= n {
        for w in toks.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// Clipped n-gram matches and hypothesis n-gram totals for n = 1..=max_n.
pub fn ngram_stats<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T], max_n: usize) -> Vec<(usize, usize)> {
    (1..=max_n)
        .map(|n| {
            let h = ngram_counts(hyp, n);
            let r = ngram_counts(reference, n);
            let matches = h
                .iter()
                .map(|(g, &c)| c.min(r.get(g).copied().unwrap_or(0)))
                .sum();
            (matches, hyp.len().saturating_sub(n - 1))
        })
        .collect()
}

fn bleu_from_stats(stats: &[(usize, usize)], hyp_len: usize, ref_len: usize) -> f64 {
    if hyp_len == 0 || stats[0].0 == 0 {
        return 0.0;
    }
    let smooth = stats.iter().any(|&(m, _)| m == 0);
    let log_p: f64 = stats
        .iter()
        .enumerate()
        .map(|(i, &(m, t))| {
            if smooth && i > 0 {
                ((m + 1) as f64 / (t + 1) as f64).ln()
            } else {
                (m as f64 / t as f64).ln()
            }
        })
        .sum::<f64>()
        / stats.len() as f64;
    let bp = if hyp_len > ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / hyp_len as f64).exp()
    };
    100.0 * bp * log_p.exp()
}

/// Corpus-level BLEU in [0, 100] with one reference per hypothesis.
pub fn corpus_bleu<T: Hash + Eq + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<f64> {
    if hyps.is_empty() {
        return Err(Error::Usage("BLEU of an empty corpus".into()));
    }
    if hyps.len() != refs.len() {
        return Err(Error::Usage(format!(
            "{} hypotheses for {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if max_n == 0 {
        return Err(Error::Usage("max_n must be positive".into()));
    }
    let mut stats = vec![(0usize, 0usize); max_n];
    let (mut hl, mut rl) = (0, 0);
    for (h, r) in hyps.iter().zip(refs) {
        for (acc, s) in stats.iter_mut().zip(ngram_stats(h, r, max_n)) {
            acc.0 += s.0;
            acc.1 += s.1;
        }
        hl += h.len();
        rl += r.len();
    }
    Ok(bleu_from_stats(&stats, hl, rl))
}

/// Smoothed BLEU of a single sentence pair.
pub fn sentence_bleu<T: Hash + Eq + Clone>(hyp: &[T], reference: &[T]) -> f64 {
    bleu_from_stats(&ngram_stats(hyp, reference, 4), hyp.len(), reference.len())
}

/// Mean per-token negative log-likelihood of the hypotheses' tokens (the
/// end-of-sentence term is not counted).
pub fn pivot_lm_nll(lm: &LanguageModel, hyps: &[Vec<usize>]) -> Result<f64> {
    let (mut nll, mut n) = (0.0, 0usize);
    for h in hyps.iter().filter(|h| !h.is_empty()) {
        let lps = lm.token_logprobs(h)?;
        nll -= lps[..h.len()].iter().sum::<f64>();
        n += h.len();
    }
    if n == 0 {
        return Err(Error::Usage("LM NLL of an empty corpus".into()));
    }
    Ok(nll / n as f64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqStats {
    /// Distinct tokens over the whole corpus.
    pub unique: usize,
    /// Mean number of distinct tokens per sentence.
    pub per_sentence: f64,
    /// Mean over sentences of distinct tokens / tokens.
    pub ratio: f64,
    pub total: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FreqReport {
    pub hyp: FreqStats,
    pub reference: FreqStats,
    /// Sorted hypothesis counts minus sorted reference counts, one entry per
    /// vocabulary id.
    pub curve: Vec<i64>,
}

fn freq_stats(sents: &[Vec<usize>]) -> FreqStats {
    let mut all = HashSet::new();
    let (mut per, mut ratio, mut n, mut total) = (0.0, 0.0, 0usize, 0usize);
    for s in sents {
        let uniq: HashSet<usize> = s.iter().copied().collect();
        all.extend(uniq.iter().copied());
        total += s.len();
        if !s.is_empty() {
            per += uniq.len() as f64;
            ratio += uniq.len() as f64 / s.len() as f64;
            n += 1;
        }
    }
    let n = n.max(1) as f64;
    FreqStats {
        unique: all.len(),
        per_sentence: per / n,
        ratio: ratio / n,
        total,
    }
}

fn sorted_counts(sents: &[Vec<usize>], vocab: usize) -> Result<Vec<i64>> {
    let mut c = vec![0i64; vocab];
    for &t in sents.iter().flatten() {
        *c.get_mut(t).ok_or(Error::OutOfVocab { id: t, vocab })? += 1;
    }
    c.sort_unstable_by(|a, b| b.cmp(a));
    Ok(c)
}

pub fn token_frequency_report(hyps: &[Vec<usize>], refs: &[Vec<usize>], vocab: usize) -> Result<FreqReport> {
    if hyps.is_empty() || refs.is_empty() {
        return Err(Error::Usage("frequency report of an empty corpus".into()));
    }
    let h = sorted_counts(hyps, vocab)?;
    let r = sorted_counts(refs, vocab)?;
    Ok(FreqReport {
        hyp: freq_stats(hyps),
        reference: freq_stats(refs),
        curve: h.iter().zip(&r).map(|(a, b)| a - b).collect(),
    })
}

/// Recall hits and totals per category.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CategoryRecall {
    pub counts: BTreeMap<Category, (usize, usize)>,
}

impl CategoryRecall {
    pub fn recall(&self, c: Category) -> Option<f64> {
        self.counts
            .get(&c)
            .filter(|(_, t)| *t > 0)
            .map(|&(h, t)| h as f64 / t as f64)
    }

    /// Pooled recall over function or content categories.
    pub fn pooled(&self, function: bool) -> Option<f64> {
        let (h, t) = self
            .counts
            .iter()
            .filter(|(c, _)| c.is_function() == function)
            .fold((0, 0), |(h, t), (_, &(a, b))| (h + a, t + b));
        (t > 0).then(|| h as f64 / t as f64)
    }
}

/// Fraction of reference tokens of each category that also appear in the
/// paired hypothesis.
pub fn category_recall(hyps: &[Vec<String>], refs: &[Vec<String>], lexicon: &LanguageSpec) -> Result<CategoryRecall> {
    if hyps.len() != refs.len() {
        return Err(Error::Usage("category recall needs paired sentences".into()));
    }
    let mut out = CategoryRecall::default();
    for (h, r) in hyps.iter().zip(refs) {
        let present: HashSet<&str> = h.iter().map(String::as_str).collect();
        for tok in r {
            let cat = lexicon
                .category(tok)
                .ok_or_else(|| Error::Lexicon(format!("uncategorized token {tok:?}")))?;
            let e = out.counts.entry(cat).or_insert((0, 0));
            e.1 += 1;
            if present.contains(tok.as_str()) {
                e.0 += 1;
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct FlipCandidate {
    pub reference: String,
    pub hypothesis: String,
    pub count: usize,
    pub support: usize,
}

impl FlipCandidate {
    pub fn rate(&self) -> f64 {
        self.count as f64 / self.support as f64
    }
}

/// Hypothesis tokens that stand in for a reference content token they do not
/// denote.
///
/// For each reference content token `r`, over the pairs whose reference
/// contains `r` and whose hypothesis lacks it, counts hypothesis tokens that are not function
/// words, whose lexicon meaning differs from `r`'s, and whose meaning is not
/// part of that pair's [`Meaning`]. Pairs with rate ≥ `min_rate` over at least
/// `min_support` sentences are reported, sorted by reference then hypothesis.
pub fn token_flip_report(
    hyps: &[Vec<String>],
    refs: &[Vec<String>],
    meanings: &[Meaning],
    lexicon: &LanguageSpec,
    min_rate: f64,
    min_support: usize,
) -> Result<Vec<FlipCandidate>> {
    if hyps.len() != refs.len() || refs.len() != meanings.len() {
        return Err(Error::Usage("flip report needs aligned hypotheses, references and meanings".into()));
    }
    let is_content = |t: &str| lexicon.category(t).is_none_or(|c| !c.is_function());
    let mut support: BTreeMap<&str, usize> = BTreeMap::new();
    let mut co: BTreeMap<(&str, &str), usize> = BTreeMap::new();
    for ((h, r), m) in hyps.iter().zip(refs).zip(meanings) {
        let rset: HashSet<&str> = r.iter().map(String::as_str).filter(|t| is_content(t)).collect();
        let hset: HashSet<&str> = h.iter().map(String::as_str).filter(|t| is_content(t)).collect();
        for &rt in &rset {
            *support.entry(rt).or_insert(0) += 1;
            if hset.contains(rt) {
                continue;
            }
            let rsem = lexicon.denotation(rt);
            for &ht in &hset {
                if ht == rt || rset.contains(ht) {
                    continue;
                }
                let hsem = lexicon.denotation(ht);
                if hsem.is_some() && (hsem == rsem || m.mentions(hsem.unwrap())) {
                    continue;
                }
                *co.entry((rt, ht)).or_insert(0) += 1;
            }
        }
    }
    Ok(co
        .into_iter()
        .filter_map(|((r, h), count)| {
            let s = support[r];
            (s >= min_support && count as f64 / s as f64 >= min_rate).then(|| FlipCandidate {
                reference: r.to_string(),
                hypothesis: h.to_string(),
                count,
                support: s,
            })
        })
        .collect())
}

/// Evaluation record of one pair of agents on a corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct DriftReport {
    pub task_bleu: f64,
    pub pivot_bleu: f64,
    pub pivot_lm_nll: f64,
    pub freq: FreqReport,
    pub recall: CategoryRecall,
    pub flips: Vec<FlipCandidate>,
    /// Per-sentence smoothed BLEU of pivot messages.
    pub pivot_sentence_bleu: Vec<f64>,
    pub pivot_hyps: Vec<Vec<String>>,
    pub task_hyps: Vec<Vec<String>>,
}

/// Decoded outputs of the pivot chain.
#[derive(Debug, Clone, PartialEq)]
pub struct ChainOutput {
    pub pivot: Vec<Vec<usize>>,
    pub target: Vec<Vec<usize>>,
}

/// Greedy length-capped pivot messages from `a`, then greedy targets from `b`.
pub fn decode_chain(a: &Agent, b: &Agent, data: &[Triple], vocabs: &Vocabs) -> Result<ChainOutput> {
    let srcs: Vec<Vec<usize>> = data.iter().map(|t| vocabs.source.encode(&t.src)).collect();
    let caps: Vec<usize> = srcs.iter().map(Vec::len).collect();
    let msgs = a.greedy_many(&srcs, &caps, 100)?;
    let inputs: Vec<Vec<usize>> = msgs.iter().map(|m| m.as_input()).collect();
    Ok(ChainOutput {
        pivot: msgs.iter().map(|m| m.content().to_vec()).collect(),
        target: decode_targets(b, &inputs, data)?,
    })
}

/// Greedy targets from `b` for given pivot inputs; the cap is twice the
/// gold target length plus two.
pub fn decode_targets(b: &Agent, inputs: &[Vec<usize>], data: &[Triple]) -> Result<Vec<Vec<usize>>> {
    let caps: Vec<usize> = data.iter().map(|t| 2 * t.tgt.len() + 2).collect();
    Ok(b.greedy_many(inputs, &caps, 100)?
        .iter()
        .map(|m| m.content().to_vec())
        .collect())
}

pub struct ReportInputs<'a> {
    pub lm: &'a LanguageModel,
    pub data: &'a [Triple],
    pub vocabs: &'a Vocabs,
    pub lexicon: &'a LanguageSpec,
}

/// Assembles every drift metric from decoded chain outputs.
pub fn drift_report_from(chain: &ChainOutput, inp: &ReportInputs) -> Result<DriftReport> {
    let v = inp.vocabs;
    let pivot_hyps: Vec<Vec<String>> = chain.pivot.iter().map(|p| v.pivot.decode(p)).collect();
    let task_hyps: Vec<Vec<String>> = chain.target.iter().map(|p| v.target.decode(p)).collect();
    let pivot_refs: Vec<Vec<String>> = inp.data.iter().map(|t| t.pivot.clone()).collect();
    let tgt_refs: Vec<Vec<String>> = inp.data.iter().map(|t| t.tgt.clone()).collect();
    let ref_ids: Vec<Vec<usize>> = pivot_refs.iter().map(|r| v.pivot.encode(r)).collect();
    let meanings: Vec<Meaning> = inp.data.iter().map(|t| t.meaning.clone()).collect();
    Ok(DriftReport {
        task_bleu: corpus_bleu(&task_hyps, &tgt_refs, 4)?,
        pivot_bleu: corpus_bleu(&pivot_hyps, &pivot_refs, 4)?,
        pivot_lm_nll: pivot_lm_nll(inp.lm, &chain.pivot)?,
        freq: token_frequency_report(&chain.pivot, &ref_ids, v.pivot.len())?,
        recall: category_recall(&pivot_hyps, &pivot_refs, inp.lexicon)?,
        flips: token_flip_report(&pivot_hyps, &pivot_refs, &meanings, inp.lexicon, 0.3, 5)?,
        pivot_sentence_bleu: pivot_hyps
            .iter()
            .zip(&pivot_refs)
            .map(|(h, r)| sentence_bleu(h, r))
            .collect(),
        pivot_hyps,
        task_hyps,
    })
}

pub fn drift_report(a: &Agent, b: &Agent, inp: &ReportInputs) -> Result<DriftReport> {
    let chain = decode_chain(a, b, inp.data, inp.vocabs)?;
    drift_report_from(&chain, inp)
}

impl DriftReport {
    /// `metric<TAB>value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "bleu_smoothing\t{BLEU_SMOOTHING}");
        let _ = writeln!(s, "task_bleu\t{:.4}", self.task_bleu);
        let _ = writeln!(s, "pivot_bleu\t{:.4}", self.pivot_bleu);
        let _ = writeln!(s, "pivot_lm_nll\t{:.6}", self.pivot_lm_nll);
        for (name, f) in [("hyp", &self.freq.hyp), ("ref", &self.freq.reference)] {
            let _ = writeln!(s, "{name}_unique\t{}", f.unique);
            let _ = writeln!(s, "{name}_per_sentence\t{:.6}", f.per_sentence);
            let _ = writeln!(s, "{name}_ratio\t{:.6}", f.ratio);
            let _ = writeln!(s, "{name}_tokens\t{}", f.total);
        }
        for (c, (h, t)) in &self.recall.counts {
            let r = if *t > 0 { *h as f64 / *t as f64 } else { 0.0 };
            let _ = writeln!(s, "recall_{c}\t{r:.6}\t{h}/{t}");
        }
        for f in &self.flips {
            let _ = writeln!(s, "flip\t{}->{}\t{}/{}", f.reference, f.hypothesis, f.count, f.support);
        }
        s
    }

    /// Two-column CSV of the sorted frequency-difference curve.
    pub fn curve_csv(&self) -> String {
        let mut s = String::from("rank,difference\n");
        for (i, d) in self.freq.curve.iter().enumerate() {
            let _ = writeln!(s, "{i},{d}");
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::Languages;

    fn toks(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_string).collect()
    }

    #[test]
    fn bleu_identity_and_errors() {
        let c = vec![toks("a red dog runs on the beach ."), toks("two cats .")];
        assert!((corpus_bleu(&c, &c, 4).unwrap() - 100.0).abs() < 1e-9);
        assert!(corpus_bleu::<String>(&[], &[], 4).is_err());
        assert!(corpus_bleu(&c[..1], &c, 4).is_err());
    }

    #[test]
    fn bleu_repeated_token_example() {
        // clipped unigram precision 1/4; smoothed higher orders 1/4, 1/3, 1/2
        let b = corpus_bleu(&[toks("the the the the")], &[toks("the cat sat down")], 4).unwrap();
        let want = 100.0 * (0.25f64 * 0.25 * (1.0 / 3.0) * 0.5).powf(0.25);
        assert!((b - want).abs() < 1e-9);
        let s = ngram_stats(&toks("the the the the"), &toks("the cat sat down"), 4);
        assert_eq!(s[0], (1, 4));
        assert_eq!(s[1], (0, 3));
    }

    #[test]
    fn nll_single_token_and_uniform() {
        let lm = LanguageModel::with_scale(10, 4, 0.0, 0);
        assert!((pivot_lm_nll(&lm, &[vec![5]]).unwrap() - 10f64.ln()).abs() < 1e-12);
        assert!((pivot_lm_nll(&lm, &[vec![5, 6, 7], vec![4]]).unwrap() - 10f64.ln()).abs() < 1e-12);
        let lm = LanguageModel::new(10, 4, 3);
        let t = lm.token_logprobs(&[6]).unwrap()[0];
        assert!((pivot_lm_nll(&lm, &[vec![6]]).unwrap() + t).abs() < 1e-12);
        assert!(pivot_lm_nll(&lm, &[vec![]]).is_err());
    }

    #[test]
    fn frequency_cases() {
        let hyps = vec![vec![4, 4, 4]];
        let r = token_frequency_report(&hyps, &hyps, 8).unwrap();
        assert_eq!(r.hyp.unique, 1);
        assert_eq!(r.hyp.per_sentence, 1.0);
        assert!((r.hyp.ratio - 1.0 / 3.0).abs() < 1e-15);
        assert!(r.curve.iter().all(|&d| d == 0));
        assert_eq!(r.curve.len(), 8);
        let refs = vec![vec![4, 5, 6, 7], vec![5]];
        let r = token_frequency_report(&hyps, &refs, 8).unwrap();
        assert_eq!(r.curve.iter().sum::<i64>(), 3 - 5);
    }

    #[test]
    fn category_recall_cases() {
        let langs = Languages::default();
        let refs = vec![toks("a red dog runs on the beach ."), toks("two cats and a bird .")];
        let full = category_recall(&refs, &refs, &langs.pivot).unwrap();
        for c in full.counts.keys() {
            assert_eq!(full.recall(*c), Some(1.0));
        }
        let stripped = vec![toks("red dog runs beach"), toks("two cats bird")];
        let r = category_recall(&stripped, &refs, &langs.pivot).unwrap();
        assert_eq!(r.pooled(true), Some(0.0));
        assert_eq!(r.pooled(false), Some(1.0));
        // hand count
        let hyps = vec![toks("a dog runs the beach"), toks("two cat and bird ."), toks("one lion .")];
        let refs = vec![toks("a red dog runs on the beach ."), toks("two cats and a bird ."), toks("a lion sits .")];
        let r = category_recall(&hyps, &refs, &langs.pivot).unwrap();
        assert_eq!(r.counts[&Category::Determiner], (2, 4));
        assert_eq!(r.counts[&Category::Noun], (4, 5));
        assert_eq!(r.counts[&Category::Punctuation], (2, 3));
        assert_eq!(r.counts[&Category::Verb], (1, 2));
        assert_eq!(r.counts[&Category::Adjective], (0, 1));
        assert_eq!(r.counts[&Category::Numeral], (1, 1));
        assert!(matches!(
            category_recall(&[toks("x")], &[toks("zzz")], &langs.pivot),
            Err(Error::Lexicon(_))
        ));
    }

    #[test]
    fn flip_report_cases() {
        let langs = Languages::default();
        let m = Meaning {
            entity: 6,
            action: Some(0),
            ..Default::default()
        };
        let refs: Vec<Vec<String>> = (0..35).map(|_| toks("a child runs .")).collect();
        let meanings = vec![m; 35];
        assert!(token_flip_report(&refs, &refs, &meanings, &langs.pivot, 0.3, 5).unwrap().is_empty());
        let mut hyps = refs.clone();
        for h in hyps.iter_mut().take(15) {
            *h = toks("a punk runs .");
        }
        let f = token_flip_report(&hyps, &refs, &meanings, &langs.pivot, 0.3, 5).unwrap();
        assert_eq!(f.len(), 1);
        assert_eq!((f[0].reference.as_str(), f[0].hypothesis.as_str()), ("child", "punk"));
        assert_eq!((f[0].count, f[0].support), (15, 35));
        assert!(token_flip_report(&hyps, &refs, &meanings, &langs.pivot, 1.01, 5).unwrap().is_empty());
    }

    #[test]
    fn report_text_shape() {
        let r = DriftReport {
            task_bleu: 10.0,
            pivot_bleu: 20.0,
            pivot_lm_nll: 1.5,
            freq: token_frequency_report(&[vec![4]], &[vec![4]], 5).unwrap(),
            recall: CategoryRecall::default(),
            flips: vec![],
            pivot_sentence_bleu: vec![],
            pivot_hyps: vec![],
            task_hyps: vec![],
        };
        let t = r.to_text();
        assert!(t.lines().all(|l| l.contains('\t')));
        assert!(t.contains("pivot_bleu\t20.0000"));
        assert_eq!(r.curve_csv().lines().count(), 6);
    }
}
