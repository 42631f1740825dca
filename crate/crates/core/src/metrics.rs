//! Corpus metrics: BLEU, ROUGE-n, ROUGE-L, exact match and rewriting
//! precision/recall/F1 over context-word n-grams.

use std::collections::{BTreeMap, HashMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum MetricError {
    #[error("cannot score an empty corpus")]
    EmptyCorpus,
    #[error("corpus lists differ in length: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("n-gram order must be at least 1")]
    ZeroOrder,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl Prf {
    /// Builds P/R/F1 from an overlap count and the two totals; a zero
    /// denominator yields 0 for that side.
    pub fn from_counts(overlap: usize, predicted: usize, reference: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        Prf::new(ratio(overlap, predicted), ratio(overlap, reference))
    }

    pub fn new(precision: f64, recall: f64) -> Self {
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        Prf { precision, recall, f1 }
    }
}

fn check<A, B>(preds: &[A], refs: &[B]) -> Result<(), MetricError> {
    if preds.len() != refs.len() {
        return Err(MetricError::LengthMismatch(preds.len(), refs.len()));
    }
    if preds.is_empty() {
        return Err(MetricError::EmptyCorpus);
    }
    Ok(())
}

fn ngrams<S: AsRef<str>>(tokens: &[S], n: usize) -> HashMap<Vec<&str>, usize> {
    let mut counts = HashMap::new();
    if n > 0 && tokens.len() >= n {
        for w in tokens.windows(n) {
            *counts.entry(w.iter().map(AsRef::as_ref).collect()).or_insert(0) += 1;
        }
    }
    counts
}

fn clipped_overlap(pred: &HashMap<Vec<&str>, usize>, reference: &HashMap<Vec<&str>, usize>) -> usize {
    pred.iter().map(|(g, &c)| c.min(reference.get(g).copied().unwrap_or(0))).sum()
}

/// Corpus-level cumulative BLEU up to order `n`, uniform weights, no smoothing.
pub fn bleu_n<S: AsRef<str>>(preds: &[Vec<S>], refs: &[Vec<S>], n: usize) -> Result<f64, MetricError> {
    check(preds, refs)?;
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let mut log_sum = 0.0;
    for k in 1..=n {
        let (mut matched, mut total) = (0, 0);
        for (p, r) in preds.iter().zip(refs) {
            let pg = ngrams(p, k);
            matched += clipped_overlap(&pg, &ngrams(r, k));
            total += pg.values().sum::<usize>();
        }
        if matched == 0 {
            return Ok(0.0);
        }
        log_sum += (matched as f64 / total as f64).ln();
    }
    let pred_len: usize = preds.iter().map(Vec::len).sum();
    let ref_len: usize = refs.iter().map(Vec::len).sum();
    let bp = (1.0 - ref_len as f64 / pred_len as f64).min(0.0).exp();
    Ok(bp * (log_sum / n as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RougeScore {
    #[default]
    F1,
    Recall,
}

/// Per-example ROUGE-n with clipped counts. A reference shorter than `n`
/// scores 0.
pub fn rouge_n_example<S: AsRef<str>>(pred: &[S], reference: &[S], n: usize) -> Prf {
    let rg = ngrams(reference, n);
    let pg = ngrams(pred, n);
    if rg.is_empty() {
        return Prf::default();
    }
    Prf::from_counts(clipped_overlap(&pg, &rg), pg.values().sum(), rg.values().sum())
}

/// Macro-averaged ROUGE-n.
pub fn rouge_n<S: AsRef<str>>(
    preds: &[Vec<S>],
    refs: &[Vec<S>],
    n: usize,
    score: RougeScore,
) -> Result<f64, MetricError> {
    check(preds, refs)?;
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let total: f64 = preds
        .iter()
        .zip(refs)
        .map(|(p, r)| {
            let prf = rouge_n_example(p, r, n);
            match score {
                RougeScore::F1 => prf.f1,
                RougeScore::Recall => prf.recall,
            }
        })
        .sum();
    Ok(total / preds.len() as f64)
}

fn lcs_len<S: AsRef<str>>(a: &[S], b: &[S]) -> usize {
    let mut prev = vec![0; b.len() + 1];
    let mut cur = vec![0; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x.as_ref() == y.as_ref() { prev[j] + 1 } else { prev[j + 1].max(cur[j]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

/// LCS-based precision (over the prediction), recall (over the reference) and F1.
pub fn rouge_l_example<S: AsRef<str>>(pred: &[S], reference: &[S]) -> Prf {
    if pred.is_empty() && reference.is_empty() {
        return Prf::new(1.0, 1.0);
    }
    Prf::from_counts(lcs_len(pred, reference), pred.len(), reference.len())
}

/// Macro-averaged ROUGE-L F1.
pub fn rouge_l<S: AsRef<str>>(preds: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64, MetricError> {
    check(preds, refs)?;
    Ok(preds.iter().zip(refs).map(|(p, r)| rouge_l_example(p, r).f1).sum::<f64>() / preds.len() as f64)
}

pub fn exact_match<S: AsRef<str>>(preds: &[Vec<S>], refs: &[Vec<S>]) -> Result<f64, MetricError> {
    check(preds, refs)?;
    let hits = preds
        .iter()
        .zip(refs)
        .filter(|(p, r)| p.len() == r.len() && p.iter().zip(r.iter()).all(|(a, b)| a.as_ref() == b.as_ref()))
        .count();
    Ok(hits as f64 / preds.len() as f64)
}

/// Which context words make an n-gram count for rewriting P/R/F1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContextWords {
    /// Words of the context that do not occur in the incomplete utterance.
    #[default]
    NotInUtterance,
    /// Every word of the context.
    InContext,
}

fn restricted_ngrams<'a, S: AsRef<str>>(
    tokens: &'a [S],
    n: usize,
    ctx: &HashSet<&str>,
) -> HashMap<Vec<&'a str>, usize> {
    let mut g = ngrams(tokens, n);
    g.retain(|gram, _| gram.iter().any(|w| ctx.contains(w)));
    g
}

/// Micro-averaged precision/recall/F1 over n-grams containing at least one
/// context word. When no example has any such n-gram on either side the
/// score is vacuously 1.
pub fn rewriting_prf<S: AsRef<str>>(
    preds: &[Vec<S>],
    refs: &[Vec<S>],
    contexts: &[Vec<S>],
    incompletes: &[Vec<S>],
    n: usize,
    words: ContextWords,
) -> Result<Prf, MetricError> {
    check(preds, refs)?;
    check(preds, contexts)?;
    check(preds, incompletes)?;
    if n == 0 {
        return Err(MetricError::ZeroOrder);
    }
    let (mut overlap, mut pred_total, mut ref_total) = (0, 0, 0);
    for i in 0..preds.len() {
        let in_x: HashSet<&str> = incompletes[i].iter().map(AsRef::as_ref).collect();
        let ctx: HashSet<&str> = contexts[i]
            .iter()
            .map(AsRef::as_ref)
            .filter(|w| words == ContextWords::InContext || !in_x.contains(w))
            .collect();
        let pg = restricted_ngrams(&preds[i], n, &ctx);
        let rg = restricted_ngrams(&refs[i], n, &ctx);
        overlap += clipped_overlap(&pg, &rg);
        pred_total += pg.values().sum::<usize>();
        ref_total += rg.values().sum::<usize>();
    }
    if pred_total == 0 && ref_total == 0 {
        return Ok(Prf::new(1.0, 1.0));
    }
    Ok(Prf::from_counts(overlap, pred_total, ref_total))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalOptions {
    pub rouge: RougeScore,
    pub context_words: ContextWords,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    /// Cumulative BLEU-1 … BLEU-4.
    pub bleu: BTreeMap<usize, f64>,
    /// ROUGE-1 and ROUGE-2.
    pub rouge_n: BTreeMap<usize, f64>,
    pub rouge_l: f64,
    pub em: f64,
    /// Rewriting P/R/F1 for n = 1 … 3.
    pub rewriting: BTreeMap<usize, Prf>,
    pub counts: usize,
}

/// Every metric of an [`EvalReport`] over one aligned corpus.
pub fn evaluate<S: AsRef<str>>(
    preds: &[Vec<S>],
    refs: &[Vec<S>],
    contexts: &[Vec<S>],
    incompletes: &[Vec<S>],
    options: EvalOptions,
) -> Result<EvalReport, MetricError> {
    let mut bleu = BTreeMap::new();
    for n in 1..=4 {
        bleu.insert(n, bleu_n(preds, refs, n)?);
    }
    let mut rouge = BTreeMap::new();
    for n in 1..=2 {
        rouge.insert(n, rouge_n(preds, refs, n, options.rouge)?);
    }
    let mut rewriting = BTreeMap::new();
    for n in 1..=3 {
        rewriting.insert(n, rewriting_prf(preds, refs, contexts, incompletes, n, options.context_words)?);
    }
    Ok(EvalReport {
        bleu,
        rouge_n: rouge,
        rouge_l: rouge_l(preds, refs)?,
        em: exact_match(preds, refs)?,
        rewriting,
        counts: preds.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s(text: &str) -> Vec<String> {
        text.split_whitespace().map(str::to_string).collect()
    }

    fn corpus(texts: &[&str]) -> Vec<Vec<String>> {
        texts.iter().map(|t| s(t)).collect()
    }

    const EPS: f64 = 1e-6;

    #[test]
    fn bleu_fixtures() {
        let refs = corpus(&["a b x d"]);
        assert!((bleu_n(&corpus(&["a b c d"]), &refs, 2).unwrap() - 0.5).abs() < EPS);
        assert_eq!(bleu_n(&corpus(&["p q r"]), &refs, 1).unwrap(), 0.0);
        assert_eq!(bleu_n(&refs, &refs, 4).unwrap(), 1.0);
        assert_eq!(bleu_n::<String>(&[], &[], 1), Err(MetricError::EmptyCorpus));
    }

    #[test]
    fn bleu_brevity_penalty() {
        // Perfect precision, prediction half as long as the reference.
        let b = bleu_n(&corpus(&["a b"]), &corpus(&["a b c d"]), 1).unwrap();
        assert!((b - (-1.0f64).exp()).abs() < EPS);
    }

    #[test]
    fn rouge_fixtures() {
        let r = rouge_n(&corpus(&["a b"]), &corpus(&["a c"]), 1, RougeScore::F1).unwrap();
        assert!((r - 0.5).abs() < EPS);
        assert_eq!(rouge_n(&corpus(&["a b"]), &corpus(&["c d"]), 1, RougeScore::F1).unwrap(), 0.0);
        let refs = corpus(&["why is beijing always cloudy"]);
        assert_eq!(rouge_n(&refs, &refs, 2, RougeScore::F1).unwrap(), 1.0);
        // Short reference scores 0 but is still counted.
        let r2 = rouge_n(&corpus(&["a", "a b"]), &corpus(&["a", "a b"]), 2, RougeScore::F1).unwrap();
        assert!((r2 - 0.5).abs() < EPS);
        let recall = rouge_n(&corpus(&["a b c d"]), &corpus(&["a b"]), 1, RougeScore::Recall).unwrap();
        assert_eq!(recall, 1.0);
    }

    #[test]
    fn rouge_l_fixtures() {
        let p = rouge_l_example(&s("a x b"), &s("a b"));
        assert!((p.precision - 2.0 / 3.0).abs() < EPS);
        assert_eq!(p.recall, 1.0);
        assert!((p.f1 - 0.8).abs() < EPS);
        assert_eq!(rouge_l(&corpus(&["a b"]), &corpus(&["a b"])).unwrap(), 1.0);
        assert_eq!(rouge_l(&corpus(&["a b"]), &corpus(&["c d"])).unwrap(), 0.0);
    }

    #[test]
    fn exact_match_fixtures() {
        let refs = corpus(&["a b", "c d"]);
        assert_eq!(exact_match(&refs, &refs).unwrap(), 1.0);
        assert_eq!(exact_match(&corpus(&["a b", "c"]), &refs).unwrap(), 0.5);
        assert_eq!(exact_match(&corpus(&["b", "c"]), &refs).unwrap(), 0.0);
    }

    #[test]
    fn rewriting_fixtures() {
        let ctx = corpus(&["how is the weather in beijing today [S] cloudy today"]);
        let x = corpus(&["why is always this"]);
        let refs = corpus(&["why is beijing always cloudy"]);
        let pred = corpus(&["why is beijing always this"]);
        // "cloudy" is a context-only word too; restrict the context to the worked case.
        let ctx_b = corpus(&["beijing"]);
        let prf = rewriting_prf(&pred, &refs, &ctx_b, &x, 1, ContextWords::NotInUtterance).unwrap();
        assert_eq!(prf, Prf::new(1.0, 1.0));
        let same = rewriting_prf(&refs, &refs, &ctx, &x, 2, ContextWords::NotInUtterance).unwrap();
        assert_eq!(same, Prf::new(1.0, 1.0));
        // Prediction copies nothing from the context: P falls back to 0, R is 0.
        let none = rewriting_prf(&x, &refs, &ctx, &x, 1, ContextWords::NotInUtterance).unwrap();
        assert_eq!(none, Prf::new(0.0, 0.0));
        // With the full context, "why" and "is" count as well.
        let strict = rewriting_prf(&pred, &refs, &ctx, &x, 1, ContextWords::InContext).unwrap();
        assert_eq!(strict.precision, 1.0);
        assert!((strict.recall - 2.0 / 3.0).abs() < EPS);
    }

    #[test]
    fn evaluate_identical_corpus() {
        let refs = corpus(&["why is beijing always cloudy", "what about the weather in shanghai"]);
        let ctx = corpus(&["beijing cloudy", "shanghai weather"]);
        let x = corpus(&["why is always this", "what about"]);
        let report = evaluate(&refs, &refs, &ctx, &x, EvalOptions::default()).unwrap();
        assert!(report.bleu.values().chain(report.rouge_n.values()).all(|&v| v == 1.0));
        assert_eq!((report.rouge_l, report.em, report.counts), (1.0, 1.0, 2));
        assert!(report.rewriting.values().all(|p| *p == Prf::new(1.0, 1.0)));
        let json = serde_json::to_value(&report).unwrap();
        assert!(json["bleu"]["4"].is_number());
        assert!(json["rewriting"]["3"]["f1"].is_number());
    }

    fn sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 0..8)
    }

    fn long_sentence() -> impl Strategy<Value = Vec<String>> {
        prop::collection::vec(prop::sample::select(vec!["a", "b", "c", "d", "e"]).prop_map(String::from), 4..8)
    }

    proptest! {
        #[test]
        fn scores_are_bounded(pairs in prop::collection::vec((sentence(), sentence(), sentence(), sentence()), 1..6)) {
            let preds: Vec<_> = pairs.iter().map(|p| p.0.clone()).collect();
            let refs: Vec<_> = pairs.iter().map(|p| p.1.clone()).collect();
            let ctx: Vec<_> = pairs.iter().map(|p| p.2.clone()).collect();
            let x: Vec<_> = pairs.iter().map(|p| p.3.clone()).collect();
            for opts in [EvalOptions::default(), EvalOptions { rouge: RougeScore::Recall, context_words: ContextWords::InContext }] {
                let r = evaluate(&preds, &refs, &ctx, &x, opts).unwrap();
                let mut all: Vec<f64> = r.bleu.values().chain(r.rouge_n.values()).copied().collect();
                all.extend([r.rouge_l, r.em]);
                all.extend(r.rewriting.values().flat_map(|p| [p.precision, p.recall, p.f1]));
                prop_assert!(all.iter().all(|v| (0.0..=1.0).contains(v)), "{all:?}");
            }
        }

        #[test]
        fn identical_corpora_score_one(refs in prop::collection::vec((long_sentence(), sentence(), sentence()), 1..6)) {
            let r: Vec<_> = refs.iter().map(|p| p.0.clone()).collect();
            let ctx: Vec<_> = refs.iter().map(|p| p.1.clone()).collect();
            let x: Vec<_> = refs.iter().map(|p| p.2.clone()).collect();
            let report = evaluate(&r, &r, &ctx, &x, EvalOptions::default()).unwrap();
            prop_assert!(report.bleu.values().chain(report.rouge_n.values()).all(|&v| v == 1.0));
            prop_assert_eq!(report.rouge_l, 1.0);
            prop_assert_eq!(report.em, 1.0);
            prop_assert!(report.rewriting.values().all(|p| p.f1 == 1.0));
        }

        #[test]
        fn corpus_order_does_not_matter(pairs in prop::collection::vec((sentence(), sentence(), sentence()), 1..6), rot in 0usize..6) {
            let mk = |v: &[(Vec<String>, Vec<String>, Vec<String>)]| {
                let p: Vec<_> = v.iter().map(|t| t.0.clone()).collect();
                let r: Vec<_> = v.iter().map(|t| t.1.clone()).collect();
                let c: Vec<_> = v.iter().map(|t| t.2.clone()).collect();
                evaluate(&p, &r, &c, &r, EvalOptions::default()).unwrap()
            };
            let mut rotated = pairs.clone();
            rotated.rotate_left(rot % pairs.len());
            let (a, b) = (mk(&pairs), mk(&rotated));
            let close = |x: f64, y: f64| (x - y).abs() < 1e-12;
            prop_assert!(a.bleu.iter().zip(&b.bleu).all(|(x, y)| close(*x.1, *y.1)));
            prop_assert!(close(a.rouge_l, b.rouge_l) && close(a.em, b.em));
            prop_assert!(a.rewriting.iter().zip(&b.rewriting).all(|(x, y)| close(x.1.f1, y.1.f1)));
        }

        #[test]
        fn rouge_l_duality(p in sentence(), r in sentence()) {
            let a = rouge_l_example(&p, &r);
            let b = rouge_l_example(&r, &p);
            prop_assert_eq!(a.precision, b.recall);
            prop_assert_eq!(a.recall, b.precision);
            prop_assert_eq!(a.f1, b.f1);
        }
    }
}
