//! WordPiece-style subword tokenizer.
//!
//! Text is NFC-normalised and Latin script is lowercased. Pre-tokenisation
//! splits on whitespace and makes every CJK character and every punctuation
//! mark a unit of its own; remaining runs become word units, which are
//! encoded greedily longest-match-first with `##`-prefixed continuations.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use unicode_normalization::UnicodeNormalization;

use crate::error::{Error, Result};

pub type TokenId = u32;

pub const PAD: TokenId = 0;
pub const UNK: TokenId = 1;
pub const MASK: TokenId = 2;
pub const BOS: TokenId = 3;
pub const EOS: TokenId = 4;
pub const SEP: TokenId = 5;

/// Special tokens in id order; they occupy the first ids of every vocab.
pub const SPECIAL_TOKENS: [&str; 6] = ["[PAD]", "[UNK]", "[MASK]", "[BOS]", "[EOS]", "[SEP]"];

const CONTINUATION: &str = "##";

pub fn is_cjk(c: char) -> bool {
    matches!(c as u32,
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0x20000..=0x2A6DF | 0x2A700..=0x2EBEF
        | 0xF900..=0xFAFF | 0x2F800..=0x2FA1F)
}

pub fn is_punctuation(c: char) -> bool {
    c.is_ascii_punctuation()
        || matches!(c as u32,
            0x2000..=0x206F | 0x3000..=0x303F | 0xFF01..=0xFF0F | 0xFF1A..=0xFF20
            | 0xFF3B..=0xFF40 | 0xFF5B..=0xFF65)
}

fn is_latin(c: char) -> bool {
    (c as u32) <= 0x024F
}

/// NFC, then lowercase Latin-script characters.
fn canonical(text: &str) -> String {
    text.nfc().flat_map(|c| if is_latin(c) { c.to_lowercase().collect::<Vec<_>>() } else { vec![c] }).collect()
}

fn is_single_unit(c: char) -> bool {
    is_cjk(c) || is_punctuation(c)
}

/// Split normalised text into tokenisation units.
pub fn pre_tokenize(text: &str) -> Vec<String> {
    let mut units = Vec::new();
    let mut word = String::new();
    for c in canonical(text).chars() {
        if c.is_whitespace() || is_single_unit(c) {
            if !word.is_empty() {
                units.push(std::mem::take(&mut word));
            }
            if !c.is_whitespace() {
                units.push(c.to_string());
            }
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        units.push(word);
    }
    units
}

fn is_word_unit(unit: &str) -> bool {
    let mut chars = unit.chars();
    match (chars.next(), chars.next()) {
        (Some(c), None) => !is_single_unit(c),
        (Some(_), Some(_)) => true,
        _ => false,
    }
}

/// Join units, separating two adjacent word units by one space.
fn join_units<S: AsRef<str>>(units: &[S]) -> String {
    let mut out = String::new();
    let mut prev_word = false;
    for u in units {
        let u = u.as_ref();
        let word = is_word_unit(u);
        if prev_word && word {
            out.push(' ');
        }
        out.push_str(u);
        prev_word = word;
    }
    out
}

/// Canonical surface form; `decode(encode(t)) == normalize(t)` whenever
/// every unit of `t` is covered by the vocabulary.
pub fn normalize(text: &str) -> String {
    join_units(&pre_tokenize(text))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, TokenId>,
}

/// Token ids plus, for each id, the index of the pre-tokenised unit it came
/// from.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct TokenSequence {
    pub ids: Vec<TokenId>,
    pub units: Vec<usize>,
}

impl Vocab {
    /// Build from an id-ordered token list whose first entries are the
    /// special tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIAL_TOKENS.len() || tokens.iter().zip(SPECIAL_TOKENS).any(|(t, s)| t != s) {
            return Err(Error::invalid("vocabulary must start with the six special tokens"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.contains(['\n', '\r']) {
                return Err(Error::invalid(format!("invalid token at line {}", i + 1)));
            }
            if index.insert(t.clone(), i as TokenId).is_some() {
                return Err(Error::invalid(format!("duplicate token {t:?}")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn specials_only() -> Self {
        Self::from_tokens(SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect()).expect("specials are valid")
    }

    /// One token per line; line number is the id.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_tokens(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.tokens.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<TokenId> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: TokenId) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, text: &str) -> TokenSequence {
        encode(text, self)
    }

    pub fn decode(&self, ids: &[TokenId]) -> Result<String> {
        decode(ids, self)
    }

    fn encode_unit(&self, unit: &str, out: &mut Vec<TokenId>) {
        if let Some(id) = self.id(unit) {
            out.push(id);
            return;
        }
        if !is_word_unit(unit) {
            out.push(UNK);
            return;
        }
        let chars: Vec<char> = unit.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        let mut candidate = String::new();
        while start < chars.len() {
            let mut found = None;
            for end in (start + 1..=chars.len()).rev() {
                candidate.clear();
                if start > 0 {
                    candidate.push_str(CONTINUATION);
                }
                candidate.extend(&chars[start..end]);
                if let Some(id) = self.id(&candidate) {
                    found = Some((id, end));
                    break;
                }
            }
            match found {
                Some((id, end)) => {
                    pieces.push(id);
                    start = end;
                }
                None => {
                    out.push(UNK);
                    return;
                }
            }
        }
        out.extend(pieces);
    }
}

pub fn encode(text: &str, vocab: &Vocab) -> TokenSequence {
    let mut seq = TokenSequence::default();
    for (u, unit) in pre_tokenize(text).iter().enumerate() {
        let before = seq.ids.len();
        vocab.encode_unit(unit, &mut seq.ids);
        seq.units.extend(std::iter::repeat_n(u, seq.ids.len() - before));
    }
    seq
}

/// Inverse of [`encode`] up to `[UNK]` and whitespace normalisation.
/// `[PAD]` and `[BOS]` are skipped; decoding stops at the first `[EOS]`.
pub fn decode(ids: &[TokenId], vocab: &Vocab) -> Result<String> {
    let mut units: Vec<String> = Vec::new();
    for &id in ids {
        let token = vocab.token(id).ok_or(Error::TokenOutOfRange { id, size: vocab.len() })?;
        match id {
            PAD | BOS => continue,
            EOS => break,
            _ => {}
        }
        match (token.strip_prefix(CONTINUATION), units.last_mut()) {
            (Some(rest), Some(last)) if !rest.is_empty() && is_word_unit(last) => last.push_str(rest),
            _ => units.push(token.to_string()),
        }
    }
    Ok(join_units(&units))
}

/// Merge-based vocabulary construction.
///
/// CJK characters and punctuation are single-character units. Base
/// symbols are added by descending frequency (ties by string), then the
/// most frequent adjacent symbol pair inside word units is merged
/// repeatedly (ties go to the pair seen first) until the vocabulary
/// reaches `target_size` or no pair occurs at least `min_freq` times.
pub fn build_vocab<S: AsRef<str>>(corpus_lines: &[S], target_size: usize, min_freq: usize) -> Result<Vocab> {
    if target_size < SPECIAL_TOKENS.len() {
        return Err(Error::invalid(format!("target_size {target_size} below the {} special tokens", SPECIAL_TOKENS.len())));
    }
    let min_freq = min_freq.max(1);

    let mut singles: HashMap<String, usize> = HashMap::new();
    let mut word_order: Vec<String> = Vec::new();
    let mut word_counts: HashMap<String, usize> = HashMap::new();
    let mut any = false;
    for line in corpus_lines {
        for unit in pre_tokenize(line.as_ref()) {
            any = true;
            if is_word_unit(&unit) {
                let c = word_counts.entry(unit.clone()).or_insert(0);
                if *c == 0 {
                    word_order.push(unit);
                }
                *c += 1;
            } else {
                *singles.entry(unit).or_insert(0) += 1;
            }
        }
    }
    if !any {
        return Err(Error::invalid("empty corpus"));
    }

    // words as symbol sequences, with their counts, in first-seen order
    let mut words: Vec<(Vec<String>, usize)> = word_order
        .iter()
        .map(|w| {
            let syms = w
                .chars()
                .enumerate()
                .map(|(i, c)| if i == 0 { c.to_string() } else { format!("{CONTINUATION}{c}") })
                .collect();
            (syms, word_counts[w])
        })
        .collect();

    let mut base: HashMap<String, usize> = singles;
    for (syms, n) in &words {
        for s in syms {
            *base.entry(s.clone()).or_insert(0) += n;
        }
    }
    let mut base: Vec<(String, usize)> = base.into_iter().filter(|(_, n)| *n >= min_freq).collect();
    base.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

    let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
    let mut have: std::collections::HashSet<String> = tokens.iter().cloned().collect();
    for (s, _) in base {
        if tokens.len() >= target_size {
            break;
        }
        if have.insert(s.clone()) {
            tokens.push(s);
        }
    }

    while tokens.len() < target_size {
        let mut pairs: HashMap<(&str, &str), (usize, usize)> = HashMap::new();
        let mut seen = 0usize;
        for (syms, n) in &words {
            for w in syms.windows(2) {
                if !have.contains(&w[0]) || !have.contains(&w[1]) {
                    continue;
                }
                let e = pairs.entry((w[0].as_str(), w[1].as_str())).or_insert((0, seen));
                e.0 += n;
                seen += 1;
            }
        }
        let best = pairs
            .into_iter()
            .filter(|(_, (n, _))| *n >= min_freq)
            .max_by(|a, b| a.1 .0.cmp(&b.1 .0).then_with(|| b.1 .1.cmp(&a.1 .1)))
            .map(|((l, r), _)| (l.to_string(), r.to_string()));
        let Some((left, right)) = best else { break };
        let merged = format!("{left}{}", right.strip_prefix(CONTINUATION).unwrap_or(&right));
        for (syms, _) in words.iter_mut() {
            let mut i = 0;
            while i + 1 < syms.len() {
                if syms[i] == left && syms[i + 1] == right {
                    syms[i] = merged.clone();
                    syms.remove(i + 1);
                }
                i += 1;
            }
        }
        if have.insert(merged.clone()) {
            tokens.push(merged);
        }
    }
    Vocab::from_tokens(tokens)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab(extra: &[&str]) -> Vocab {
        let mut t: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        t.extend(extra.iter().map(|s| s.to_string()));
        Vocab::from_tokens(t).unwrap()
    }

    #[test]
    fn pre_tokenize_splits_cjk_and_punctuation() {
        assert_eq!(pre_tokenize("Hello, 世界 ab1"), vec!["hello", ",", "世", "界", "ab1"]);
        assert_eq!(normalize("  Hello ,  World "), "hello,world");
        assert_eq!(normalize("foo bar"), "foo bar");
    }

    #[test]
    fn greedy_longest_match_first() {
        let v = vocab(&["un", "##able", "able"]);
        let seq = v.encode("unable");
        assert_eq!(seq.ids, vec![6, 7]);
        assert_eq!(v.decode(&seq.ids).unwrap(), "unable");
        assert_eq!(v.encode("able").ids, vec![8]);
    }

    #[test]
    fn unmatched_unit_is_one_unk() {
        let v = vocab(&["un"]);
        assert_eq!(v.encode("unx 好").ids, vec![UNK, UNK]);
    }

    #[test]
    fn empty_text() {
        assert!(vocab(&[]).encode("").ids.is_empty());
        assert_eq!(vocab(&[]).decode(&[]).unwrap(), "");
    }

    #[test]
    fn decode_skips_pad_and_stops_at_eos() {
        let v = vocab(&["a", "b"]);
        assert_eq!(v.decode(&[BOS, 6, PAD, 7, EOS, 6]).unwrap(), "a b");
        assert!(matches!(v.decode(&[99]), Err(Error::TokenOutOfRange { id: 99, .. })));
    }

    #[test]
    fn merges_follow_pair_counts() {
        // abab -> a ##b ##a ##b; base symbols by frequency: ##b(2), ##a, a
        let v = build_vocab(&["abab"], 9, 1).unwrap();
        assert_eq!(&v.tokens()[6..], &["##b", "##a", "a"]);
        // one more slot: all pairs occur once, the first seen (a, ##b) wins
        let v = build_vocab(&["abab"], 10, 1).unwrap();
        assert_eq!(v.tokens()[9], "ab");
        assert_eq!(v.encode("abab").ids, vec![9, 7, 6]);
    }

    #[test]
    fn cjk_characters_are_their_own_tokens() {
        let v = build_vocab(&["今天天气很好", "天气 nice"], 64, 1).unwrap();
        for c in "今天气很好".chars() {
            assert!(v.id(&c.to_string()).is_some(), "{c}");
        }
        assert_eq!(v.decode(&v.encode("天气很好").ids).unwrap(), "天气很好");
    }

    #[test]
    fn specials_only_vocab_encodes_to_unk() {
        let v = build_vocab(&["hello 世界"], 6, 1).unwrap();
        assert_eq!(v.len(), 6);
        assert!(v.encode("hello 世界").ids.iter().all(|&i| i == UNK));
    }

    #[test]
    fn build_vocab_errors() {
        assert!(build_vocab::<&str>(&[], 10, 1).is_err());
        assert!(build_vocab(&["   "], 10, 1).is_err());
        assert!(build_vocab(&["a"], 5, 1).is_err());
    }

    #[test]
    fn vocab_file_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = build_vocab(&["the cat sat on the mat 猫"], 30, 1).unwrap();
        v.save(&path).unwrap();
        let text = fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("[PAD]\n[UNK]\n[MASK]\n[BOS]\n[EOS]\n[SEP]\n"));
        assert_eq!(Vocab::load(&path).unwrap(), v);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn text() -> impl Strategy<Value = String> {
            let unit = prop_oneof![
                "[a-z]{1,6}",
                Just("天".to_string()),
                Just("气".to_string()),
                Just("，".to_string()),
                Just("!".to_string()),
                "[A-Z][a-z]{0,3}",
            ];
            proptest::collection::vec((unit, prop_oneof![Just(""), Just(" "), Just("  ")]), 0..12)
                .prop_map(|parts| parts.into_iter().map(|(u, sp)| format!("{u}{sp}")).collect())
        }

        proptest! {
            #[test]
            fn roundtrip_for_covered_text(t in text(), extra in text()) {
                let v = build_vocab(&[t.as_str(), extra.as_str(), "seed"], 10_000, 1).unwrap();
                let seq = v.encode(&t);
                prop_assert!(!seq.ids.contains(&UNK));
                prop_assert_eq!(v.decode(&seq.ids).unwrap(), normalize(&t));
            }

            #[test]
            fn encode_never_emits_structural_specials(t in text(), size in 6usize..40) {
                let v = build_vocab(&["seed words 天气", t.as_str()], size, 1).unwrap();
                let seq = v.encode(&t);
                prop_assert!(seq.ids.iter().all(|&i| !matches!(i, PAD | BOS | EOS | MASK | SEP)));
                prop_assert!(seq.ids.iter().all(|&i| (i as usize) < v.len()));
                prop_assert_eq!(&seq, &v.encode(&t));
                prop_assert_eq!(seq.ids.len(), seq.units.len());
            }
        }
    }
}
