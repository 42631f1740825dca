//! Synthetic dialogue corpus whose rewrites are always representable as
//! edit matrices.
//!
//! The vocabulary splits into four classes plus fillers. Class `k` owns a
//! pronoun `p{k}`, a trigger `t{k}` and entity words `e{k}a`..`e{k}d`. Each
//! class used by an example places one entity run somewhere in the context;
//! the incomplete utterance then either carries the pronoun (rewritten by
//! substituting the run) or the trigger (the run is inserted before it).

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dialogue::{words, DialogueExample, Token};
use crate::edit::EditType;

pub const CLASSES: usize = 4;
pub const ENTITIES_PER_CLASS: usize = 4;
const CLASS_WORDS: usize = CLASSES * (2 + ENTITIES_PER_CLASS);
const MIN_FILLERS: usize = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub vocab_size: usize,
    pub num_examples: usize,
    /// Inclusive range of context utterances per example.
    pub context_turns: [usize; 2],
    /// Inclusive range of words per utterance (context and incomplete).
    pub utterance_len: [usize; 2],
    pub substitutes: [usize; 2],
    pub inserts: [usize; 2],
    /// Inclusive range of entity-run lengths.
    pub span_len: [usize; 2],
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            vocab_size: 50,
            num_examples: 1000,
            context_turns: [1, 3],
            utterance_len: [3, 8],
            substitutes: [0, 2],
            inserts: [0, 1],
            span_len: [1, 2],
            seed: 7,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SynthError {
    #[error("vocab_size {got} is too small, need at least {need}")]
    VocabTooSmall { need: usize, got: usize },
    #[error("range {0} is empty or out of bounds")]
    BadRange(&'static str),
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<(), SynthError> {
        let need = CLASS_WORDS + MIN_FILLERS;
        if self.vocab_size < need {
            return Err(SynthError::VocabTooSmall { need, got: self.vocab_size });
        }
        let ok = |r: [usize; 2], lo: usize, hi: usize| r[0] <= r[1] && r[0] >= lo && r[1] <= hi;
        if !ok(self.context_turns, 1, usize::MAX) {
            return Err(SynthError::BadRange("context_turns"));
        }
        if !ok(self.utterance_len, 1, usize::MAX) {
            return Err(SynthError::BadRange("utterance_len"));
        }
        if !ok(self.span_len, 1, ENTITIES_PER_CLASS) {
            return Err(SynthError::BadRange("span_len"));
        }
        if !ok(self.substitutes, 0, CLASSES)
            || !ok(self.inserts, 0, CLASSES)
            || self.substitutes[1] + self.inserts[1] > CLASSES
        {
            return Err(SynthError::BadRange("substitutes/inserts"));
        }
        Ok(())
    }
}

pub fn pronoun(class: usize) -> String {
    format!("p{class}")
}

pub fn trigger(class: usize) -> String {
    format!("t{class}")
}

pub fn entity(class: usize, i: usize) -> String {
    format!("e{class}{}", (b'a' + i as u8) as char)
}

fn fillers(spec: &SyntheticSpec) -> Vec<String> {
    (0..spec.vocab_size - CLASS_WORDS).map(|i| format!("w{i}")).collect()
}

/// Every word the generator can emit, class words first.
pub fn synthetic_vocabulary(spec: &SyntheticSpec) -> Vec<String> {
    let mut v = Vec::with_capacity(spec.vocab_size);
    for k in 0..CLASSES {
        v.push(pronoun(k));
        v.push(trigger(k));
        v.extend((0..ENTITIES_PER_CLASS).map(|i| entity(k, i)));
    }
    v.extend(fillers(spec));
    v
}

/// One planted edit: `span` replaces column `column` (Substitute) or is
/// inserted before it (Insert).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlantedEdit {
    pub kind: EditType,
    pub column: usize,
    pub span: Vec<String>,
}

fn sample(rng: &mut ChaCha8Rng, range: [usize; 2]) -> usize {
    rng.random_range(range[0]..=range[1])
}

/// Places runs into free slots of the context turns, overwriting filler words.
/// A run that fits nowhere is appended to a random turn.
fn place_runs(rng: &mut ChaCha8Rng, turns: &mut [Vec<String>], runs: &[Vec<String>]) {
    let mut used: Vec<Vec<bool>> = turns.iter().map(|t| vec![false; t.len()]).collect();
    for run in runs {
        let mut slots = Vec::new();
        for (t, turn) in turns.iter().enumerate() {
            for start in 0..=turn.len().saturating_sub(run.len()) {
                if start + run.len() <= turn.len() && !used[t][start..start + run.len()].iter().any(|&u| u) {
                    slots.push((t, start));
                }
            }
        }
        match slots.choose(rng) {
            Some(&(t, start)) => {
                for (i, w) in run.iter().enumerate() {
                    turns[t][start + i] = w.clone();
                    used[t][start + i] = true;
                }
            }
            None => {
                let t = rng.random_range(0..turns.len());
                turns[t].extend(run.iter().cloned());
                used[t].extend(std::iter::repeat_n(true, run.len()));
            }
        }
    }
}

/// Picks columns for the pronouns and the triggers of a length-`len`
/// utterance such that no two pronouns touch and no trigger directly follows
/// a pronoun. Returns `None` when the random draw violates that.
fn draw_columns(rng: &mut ChaCha8Rng, len: usize, subs: usize, ins: usize) -> Option<(Vec<usize>, Vec<usize>)> {
    let mut cols: Vec<usize> = (0..len).collect();
    cols.shuffle(rng);
    let pron = cols[..subs].to_vec();
    let trig = cols[subs..subs + ins].to_vec();
    let touches = |a: usize, b: usize| a + 1 == b || b + 1 == a;
    let bad_pron = pron.iter().any(|&a| pron.iter().any(|&b| touches(a, b)));
    let bad_trig = trig.iter().any(|&t| pron.iter().any(|&p| p + 1 == t));
    if bad_pron || bad_trig {
        None
    } else {
        Some((pron, trig))
    }
}

fn generate_one(rng: &mut ChaCha8Rng, spec: &SyntheticSpec, fill: &[String]) -> (DialogueExample, Vec<PlantedEdit>) {
    let subs = sample(rng, spec.substitutes);
    let ins = sample(rng, spec.inserts);
    let mut classes: Vec<usize> = (0..CLASSES).collect();
    classes.shuffle(rng);
    let classes = &classes[..subs + ins];

    let runs: Vec<Vec<String>> = classes
        .iter()
        .map(|&k| {
            let len = sample(rng, spec.span_len);
            let mut ids: Vec<usize> = (0..ENTITIES_PER_CLASS).collect();
            ids.shuffle(rng);
            ids[..len].iter().map(|&i| entity(k, i)).collect()
        })
        .collect();

    let n_turns = sample(rng, spec.context_turns);
    let mut turns: Vec<Vec<String>> = (0..n_turns)
        .map(|_| {
            let len = sample(rng, spec.utterance_len);
            (0..len).map(|_| fill.choose(rng).expect("fillers").clone()).collect()
        })
        .collect();
    let mut order: Vec<usize> = (0..runs.len()).collect();
    order.shuffle(rng);
    let ordered: Vec<Vec<String>> = order.iter().map(|&i| runs[i].clone()).collect();
    place_runs(rng, &mut turns, &ordered);

    let mut len = sample(rng, spec.utterance_len).max(subs + ins).max(1);
    let (pron_cols, trig_cols) = loop {
        if let Some(found) = (0..64).find_map(|_| draw_columns(rng, len, subs, ins)) {
            break found;
        }
        len += 1;
    };
    let mut x: Vec<String> = (0..len).map(|_| fill.choose(rng).expect("fillers").clone()).collect();
    let mut planted = Vec::new();
    for (i, &col) in pron_cols.iter().enumerate() {
        x[col] = pronoun(classes[i]);
        planted.push(PlantedEdit { kind: EditType::Substitute, column: col, span: runs[i].clone() });
    }
    for (i, &col) in trig_cols.iter().enumerate() {
        x[col] = trigger(classes[subs + i]);
        planted.push(PlantedEdit { kind: EditType::Insert, column: col, span: runs[subs + i].clone() });
    }
    planted.sort_by_key(|p| p.column);

    let mut rewrite = Vec::with_capacity(len + 4);
    let mut edits = planted.iter().peekable();
    for (col, w) in x.iter().enumerate() {
        match edits.next_if(|p| p.column == col) {
            Some(p) if p.kind == EditType::Substitute => rewrite.extend(p.span.iter().cloned()),
            Some(p) => {
                rewrite.extend(p.span.iter().cloned());
                rewrite.push(w.clone());
            }
            None => rewrite.push(w.clone()),
        }
    }

    let context: Vec<Vec<Token>> = turns.iter().map(|t| words(t)).collect();
    let example = DialogueExample::new(context, words(&x), Some(words(&rewrite))).expect("generated words are plain");
    (example, planted)
}

/// Generated examples together with the edits planted in each.
pub fn generate_synthetic_with_edits(
    spec: &SyntheticSpec,
) -> Result<Vec<(DialogueExample, Vec<PlantedEdit>)>, SynthError> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let fill = fillers(spec);
    Ok((0..spec.num_examples).map(|_| generate_one(&mut rng, spec, &fill)).collect())
}

pub fn generate_synthetic(spec: &SyntheticSpec) -> Result<Vec<DialogueExample>, SynthError> {
    Ok(generate_synthetic_with_edits(spec)?.into_iter().map(|(ex, _)| ex).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dialogue::{join_context, prepare_incomplete, ConnectionWordList};
    use crate::generate::generate;
    use crate::supervision::{build_gold_matrix, Coverage};
    use std::collections::HashSet;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::text).collect()
    }

    #[test]
    fn deterministic_per_seed() {
        let spec = SyntheticSpec { num_examples: 50, ..SyntheticSpec::default() };
        assert_eq!(generate_synthetic(&spec).unwrap(), generate_synthetic(&spec).unwrap());
        let other = SyntheticSpec { seed: 8, ..spec.clone() };
        assert_ne!(generate_synthetic(&spec).unwrap(), generate_synthetic(&other).unwrap());
    }

    #[test]
    fn zero_edits_copy_the_utterance() {
        let spec = SyntheticSpec { num_examples: 30, substitutes: [0, 0], inserts: [0, 0], ..SyntheticSpec::default() };
        for ex in generate_synthetic(&spec).unwrap() {
            assert_eq!(ex.gold_rewrite().unwrap(), ex.incomplete());
        }
    }

    #[test]
    fn single_substitute_changes_one_window() {
        let spec = SyntheticSpec {
            num_examples: 30,
            substitutes: [1, 1],
            inserts: [0, 0],
            span_len: [2, 2],
            ..SyntheticSpec::default()
        };
        for (ex, planted) in generate_synthetic_with_edits(&spec).unwrap() {
            let (x, star) = (texts(ex.incomplete()), texts(ex.gold_rewrite().unwrap()));
            let col = planted[0].column;
            assert_eq!(star.len(), x.len() + 1);
            assert_eq!(&star[..col], &x[..col]);
            assert_eq!(&star[col + 2..], &x[col + 1..]);
            assert_eq!(star[col..col + 2], planted[0].span.iter().map(String::as_str).collect::<Vec<_>>()[..]);
        }
    }

    #[test]
    fn words_stay_in_the_vocabulary() {
        let spec = SyntheticSpec { num_examples: 200, ..SyntheticSpec::default() };
        let vocab: HashSet<String> = synthetic_vocabulary(&spec).into_iter().collect();
        assert_eq!(vocab.len(), 50);
        for ex in generate_synthetic(&spec).unwrap() {
            let all = ex.context_utterances().iter().flatten().chain(ex.incomplete()).chain(ex.gold_rewrite().unwrap());
            assert!(all.into_iter().all(|t| vocab.contains(t.text())));
        }
    }

    #[test]
    fn gold_path_reproduces_every_rewrite() {
        let spec = SyntheticSpec { num_examples: 300, seed: 3, ..SyntheticSpec::default() };
        let conn = ConnectionWordList::empty();
        for ex in generate_synthetic(&spec).unwrap() {
            let (y, coverage) = build_gold_matrix(&ex, &conn, 0).unwrap();
            assert_eq!(coverage, Coverage::Full);
            let c = join_context(&ex, &conn, 0);
            let (out, _) = generate(&y, &prepare_incomplete(ex.incomplete()), &c);
            assert_eq!(texts(&out), texts(ex.gold_rewrite().unwrap()));
        }
    }

    #[test]
    fn fixed_lengths_fix_the_grid() {
        let spec = SyntheticSpec {
            num_examples: 100,
            context_turns: [2, 2],
            utterance_len: [6, 6],
            ..SyntheticSpec::default()
        };
        for ex in generate_synthetic(&spec).unwrap() {
            let c = join_context(&ex, &ConnectionWordList::empty(), 0);
            assert_eq!(c.len(), 13);
            assert_eq!(ex.incomplete().len(), 6);
        }
    }

    #[test]
    fn rejects_bad_specs() {
        let small = SyntheticSpec { vocab_size: 20, ..SyntheticSpec::default() };
        assert!(matches!(small.validate(), Err(SynthError::VocabTooSmall { .. })));
        let too_many = SyntheticSpec { substitutes: [0, 3], inserts: [0, 2], ..SyntheticSpec::default() };
        assert!(too_many.validate().is_err());
        let inverted = SyntheticSpec { utterance_len: [5, 2], ..SyntheticSpec::default() };
        assert!(inverted.validate().is_err());
    }
}
