//! Dialogue data model: tokens, examples, joined context and connection words.

use std::collections::{BTreeMap, HashSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};

/// Text of the separator placed between context utterances.
pub const SEP_TEXT: &str = "[S]";
/// Text of the end marker appended to the incomplete utterance.
pub const END_TEXT: &str = "[E]";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TokenKind {
    Word,
    SepS,
    EndE,
    ConnectionWord,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    text: String,
    kind: TokenKind,
}

impl Token {
    /// Creates a word token. Returns `None` for empty text or text with whitespace.
    pub fn word(text: impl Into<String>) -> Option<Self> {
        let text = text.into();
        if text.is_empty() || text.chars().any(char::is_whitespace) {
            return None;
        }
        Some(Token { text, kind: TokenKind::Word })
    }

    pub fn sep() -> Self {
        Token { text: SEP_TEXT.to_string(), kind: TokenKind::SepS }
    }

    pub fn end() -> Self {
        Token { text: END_TEXT.to_string(), kind: TokenKind::EndE }
    }

    pub fn connection(text: impl Into<String>) -> Option<Self> {
        Token::word(text).map(|t| Token { kind: TokenKind::ConnectionWord, ..t })
    }

    pub fn text(&self) -> &str {
        &self.text
    }

    pub fn kind(&self) -> TokenKind {
        self.kind
    }

    pub fn is_special(&self) -> bool {
        matches!(self.kind, TokenKind::SepS | TokenKind::EndE)
    }
}

/// How raw text is split into tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenizationMode {
    #[default]
    Whitespace,
    PerCharacter,
}

impl TokenizationMode {
    /// Separator used when turning a token sequence back into text.
    pub fn joiner(self) -> &'static str {
        match self {
            TokenizationMode::Whitespace => " ",
            TokenizationMode::PerCharacter => "",
        }
    }
}

pub fn tokenize(text: &str, mode: TokenizationMode) -> Vec<Token> {
    match mode {
        TokenizationMode::Whitespace => {
            text.split_whitespace().map(|w| Token { text: w.to_string(), kind: TokenKind::Word }).collect()
        }
        TokenizationMode::PerCharacter => text
            .chars()
            .filter(|c| !c.is_whitespace())
            .map(|c| Token { text: c.to_string(), kind: TokenKind::Word })
            .collect(),
    }
}

/// Joins token texts back into a string using the mode's separator.
pub fn detokenize(tokens: &[Token], mode: TokenizationMode) -> String {
    tokens.iter().map(Token::text).collect::<Vec<_>>().join(mode.joiner())
}

/// Builds word tokens from plain strings; panics on empty or whitespace-bearing words.
///
/// Intended for fixtures and generated data where the words are known to be valid.
pub fn words<S: AsRef<str>>(items: &[S]) -> Vec<Token> {
    items.iter().map(|s| Token::word(s.as_ref()).unwrap_or_else(|| panic!("invalid word {:?}", s.as_ref()))).collect()
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ExampleError {
    #[error("incomplete utterance is empty")]
    EmptyIncomplete,
    #[error("special token {0:?} inside a raw utterance")]
    SpecialToken(String),
}

/// One dialogue turn to rewrite: history, the incomplete utterance and
/// optionally its self-contained rewrite.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DialogueExample {
    context_utterances: Vec<Vec<Token>>,
    incomplete: Vec<Token>,
    gold_rewrite: Option<Vec<Token>>,
}

impl DialogueExample {
    pub fn new(
        context_utterances: Vec<Vec<Token>>,
        incomplete: Vec<Token>,
        gold_rewrite: Option<Vec<Token>>,
    ) -> Result<Self, ExampleError> {
        if incomplete.is_empty() {
            return Err(ExampleError::EmptyIncomplete);
        }
        let all = context_utterances.iter().flatten().chain(incomplete.iter()).chain(gold_rewrite.iter().flatten());
        for tok in all {
            if tok.is_special() {
                return Err(ExampleError::SpecialToken(tok.text.clone()));
            }
        }
        Ok(DialogueExample { context_utterances, incomplete, gold_rewrite })
    }

    pub fn context_utterances(&self) -> &[Vec<Token>] {
        &self.context_utterances
    }

    pub fn incomplete(&self) -> &[Token] {
        &self.incomplete
    }

    pub fn gold_rewrite(&self) -> Option<&[Token]> {
        self.gold_rewrite.as_deref()
    }
}

/// Context utterances concatenated into one sequence `c`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JoinedContext {
    tokens: Vec<Token>,
    utterance_boundaries: Vec<Range<usize>>,
    connection_word_range: Option<Range<usize>>,
}

impl JoinedContext {
    pub fn tokens(&self) -> &[Token] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn utterance_boundaries(&self) -> &[Range<usize>] {
        &self.utterance_boundaries
    }

    pub fn connection_word_range(&self) -> Option<Range<usize>> {
        self.connection_word_range.clone()
    }

    /// Maps a position of `c` back to `(utterance index, offset)`.
    /// Separators and connection words map to `None`.
    pub fn locate_word(&self, index: usize) -> Option<(usize, usize)> {
        self.utterance_boundaries
            .iter()
            .enumerate()
            .find(|(_, r)| r.contains(&index))
            .map(|(u, r)| (u, index - r.start))
    }
}

/// Corpus-derived out-of-dialogue words, most frequent first.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ConnectionWordList {
    words: Vec<String>,
    frequencies: Vec<usize>,
}

impl ConnectionWordList {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Builds a list from words with unknown counts (e.g. loaded from disk).
    /// Duplicates keep their first position.
    pub fn from_words<S: AsRef<str>>(items: &[S]) -> Self {
        let mut seen = HashSet::new();
        let words: Vec<String> = items
            .iter()
            .map(|s| s.as_ref().trim().to_string())
            .filter(|w| !w.is_empty() && seen.insert(w.clone()))
            .collect();
        let frequencies = vec![0; words.len()];
        ConnectionWordList { words, frequencies }
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn frequencies(&self) -> &[usize] {
        &self.frequencies
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    /// One word per line, frequency order.
    pub fn to_text(&self) -> String {
        self.words.iter().map(|w| format!("{w}\n")).collect()
    }

    pub fn from_text(text: &str) -> Self {
        let lines: Vec<&str> = text.lines().collect();
        Self::from_words(&lines)
    }
}

/// Concatenates the context utterances with `[S]` separators and appends the
/// first `k` connection words (behind their own separator).
///
/// # Panics
/// Panics if `k` exceeds the connection word list length.
pub fn join_context(example: &DialogueExample, conn: &ConnectionWordList, k: usize) -> JoinedContext {
    assert!(k <= conn.len(), "k = {k} exceeds {} connection words", conn.len());
    let mut tokens = Vec::new();
    let mut utterance_boundaries = Vec::with_capacity(example.context_utterances.len());
    for (i, utt) in example.context_utterances.iter().enumerate() {
        if i > 0 {
            tokens.push(Token::sep());
        }
        let start = tokens.len();
        tokens.extend(utt.iter().cloned());
        utterance_boundaries.push(start..tokens.len());
    }
    let connection_word_range = if k > 0 {
        if !tokens.is_empty() {
            tokens.push(Token::sep());
        }
        let start = tokens.len();
        for w in &conn.words[..k] {
            tokens.push(Token { text: w.clone(), kind: TokenKind::ConnectionWord });
        }
        Some(start..tokens.len())
    } else {
        None
    };
    JoinedContext { tokens, utterance_boundaries, connection_word_range }
}

/// Returns `x ++ [E]`.
pub fn prepare_incomplete(x: &[Token]) -> Vec<Token> {
    let mut out = Vec::with_capacity(x.len() + 1);
    out.extend(x.iter().cloned());
    out.push(Token::end());
    out
}

/// Collects rewrite words that occur in neither the example's context nor its
/// incomplete utterance, ranked by corpus frequency (ties broken alphabetically).
///
/// Examples without a gold rewrite contribute nothing.
pub fn derive_connection_words(train: &[DialogueExample], max_size: usize) -> ConnectionWordList {
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for ex in train {
        let Some(rewrite) = ex.gold_rewrite() else { continue };
        let seen: HashSet<&str> =
            ex.context_utterances.iter().flatten().chain(ex.incomplete.iter()).map(Token::text).collect();
        for tok in rewrite {
            if !seen.contains(tok.text()) {
                *counts.entry(tok.text()).or_default() += 1;
            }
        }
    }
    let mut ranked: Vec<(&str, usize)> = counts.into_iter().collect();
    // BTreeMap order is alphabetical; a stable sort keeps it for equal counts.
    ranked.sort_by_key(|&(_, n)| std::cmp::Reverse(n));
    ranked.truncate(max_size);
    ConnectionWordList {
        words: ranked.iter().map(|(w, _)| w.to_string()).collect(),
        frequencies: ranked.iter().map(|(_, c)| *c).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn texts(tokens: &[Token]) -> Vec<&str> {
        tokens.iter().map(Token::text).collect()
    }

    fn example(context: &[&[&str]], current: &[&str], rewrite: Option<&[&str]>) -> DialogueExample {
        DialogueExample::new(context.iter().map(|u| words(u)).collect(), words(current), rewrite.map(words)).unwrap()
    }

    #[test]
    fn tokenize_modes() {
        assert_eq!(
            texts(&tokenize("why is always this", TokenizationMode::Whitespace)),
            ["why", "is", "always", "this"]
        );
        assert!(tokenize("", TokenizationMode::Whitespace).is_empty());
        assert_eq!(texts(&tokenize("北京今天", TokenizationMode::PerCharacter)), ["北", "京", "今", "天"]);
        assert_eq!(texts(&tokenize(" 北 京\t", TokenizationMode::PerCharacter)), ["北", "京"]);
    }

    #[test]
    fn token_invariants() {
        assert!(Token::word("").is_none());
        assert!(Token::word("a b").is_none());
        assert_eq!(Token::sep().text(), "[S]");
        assert_eq!(Token::end().text(), "[E]");
    }

    #[test]
    fn example_rejects_bad_input() {
        assert_eq!(DialogueExample::new(vec![], vec![], None).unwrap_err(), ExampleError::EmptyIncomplete);
        let err = DialogueExample::new(vec![vec![Token::sep()]], words(&["a"]), None).unwrap_err();
        assert!(matches!(err, ExampleError::SpecialToken(_)));
    }

    #[test]
    fn join_two_utterances() {
        let ex = example(&[&["how", "is", "weather"], &["cloudy", "today"]], &["x"], None);
        let c = join_context(&ex, &ConnectionWordList::empty(), 0);
        assert_eq!(texts(c.tokens()), ["how", "is", "weather", "[S]", "cloudy", "today"]);
        assert_eq!(c.utterance_boundaries(), &[0..3, 4..6]);
        assert_eq!(c.connection_word_range(), None);
        assert_eq!(c.locate_word(4), Some((1, 0)));
        assert_eq!(c.locate_word(3), None);
    }

    #[test]
    fn join_with_connection_words() {
        let ex = example(&[&["a"]], &["x"], None);
        let conn = ConnectionWordList::from_words(&["of", "the"]);
        let c = join_context(&ex, &conn, 1);
        assert_eq!(texts(c.tokens()), ["a", "[S]", "of"]);
        assert_eq!(c.tokens()[2].kind(), TokenKind::ConnectionWord);
        assert_eq!(c.connection_word_range(), Some(2..3));
    }

    #[test]
    fn join_empty_context() {
        let ex = example(&[], &["x"], None);
        assert!(join_context(&ex, &ConnectionWordList::empty(), 0).is_empty());
        let conn = ConnectionWordList::from_words(&["of"]);
        assert_eq!(texts(join_context(&ex, &conn, 1).tokens()), ["of"]);
    }

    #[test]
    fn prepare_appends_end() {
        assert_eq!(texts(&prepare_incomplete(&words(&["why", "is", "always", "this"]))).len(), 5);
        assert_eq!(texts(&prepare_incomplete(&[])), ["[E]"]);
        assert_eq!(texts(&prepare_incomplete(&words(&["a", "b"]))), ["a", "b", "[E]"]);
    }

    #[test]
    fn connection_words_none_needed() {
        let train = vec![example(&[&["a", "b"]], &["c"], Some(&["a", "c"]))];
        assert!(derive_connection_words(&train, 5).is_empty());
    }

    #[test]
    fn connection_words_single() {
        let train = vec![example(&[&["a"]], &["b"], Some(&["a", "of", "b"]))];
        let conn = derive_connection_words(&train, 5);
        assert_eq!(conn.words(), ["of"]);
        assert_eq!(conn.frequencies(), [1]);
    }

    #[test]
    fn connection_words_ranked_by_frequency() {
        let train = vec![
            example(&[&["a"]], &["b"], Some(&["a", "of", "the", "b"])),
            example(&[&["c"]], &["d"], Some(&["c", "of", "d"])),
        ];
        let conn = derive_connection_words(&train, 1);
        assert_eq!(conn.words(), ["of"]);
        let full = derive_connection_words(&train, 10);
        assert_eq!(full.words(), ["of", "the"]);
        assert_eq!(full.frequencies(), [2, 1]);
    }

    #[test]
    fn connection_list_text_roundtrip() {
        let conn = ConnectionWordList::from_words(&["of", "the"]);
        assert_eq!(ConnectionWordList::from_text(&conn.to_text()).words(), conn.words());
    }
}
