//! Vocabulary, greedy longest-match subword tokenization, and sequence encoding.
//!
//! Text is lowercased and split on whitespace and punctuation (each punctuation
//! character is its own token). Every resulting word is then decomposed greedily:
//! the longest vocabulary entry that prefixes the remaining characters is taken,
//! non-initial pieces being looked up with a `##` prefix. A word that cannot be
//! fully decomposed becomes `[UNK]`.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "[PAD]";
pub const UNK: &str = "[UNK]";
pub const CLS: &str = "[CLS]";
pub const SEP: &str = "[SEP]";
pub const SPECIALS: [&str; 4] = [PAD, UNK, CLS, SEP];

pub const PAD_ID: u32 = 0;
pub const UNK_ID: u32 = 1;
pub const CLS_ID: u32 = 2;
pub const SEP_ID: u32 = 3;

pub const CONTINUATION: &str = "##";
/// Words longer than this many characters map straight to `[UNK]`.
pub const MAX_WORD_CHARS: usize = 100;

/// Dense token inventory. Ids `0..4` are always `[PAD] [UNK] [CLS] [SEP]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Builds a vocabulary from tokens in id order; the first four must be the specials.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens.iter().zip(SPECIALS).any(|(t, s)| t != s) {
            return Err(Error::data(format!(
                "vocabulary must start with {}",
                SPECIALS.join(", ")
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() {
                return Err(Error::data(format!("empty token at id {i}")));
            }
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::data(format!("duplicate token {t:?} at id {i}")));
            }
        }
        Ok(Self { tokens, index })
    }

    /// Counts basic tokens over `corpus` and keeps those seen at least `min_freq` times.
    ///
    /// Ids after the specials are assigned by descending frequency, ties broken
    /// lexicographically, so the result depends only on the corpus contents.
    pub fn build<I, S>(corpus: I, min_freq: usize) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        if min_freq == 0 {
            return Err(Error::usage("min_freq must be positive"));
        }
        let mut counts: HashMap<String, usize> = HashMap::new();
        let mut texts = 0usize;
        for text in corpus {
            texts += 1;
            for tok in basic_tokenize(text.as_ref()) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        if texts == 0 {
            return Err(Error::usage("cannot build a vocabulary from an empty corpus"));
        }
        let mut kept: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(t, c)| *c >= min_freq && !SPECIALS.contains(&t.as_str()))
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(kept.into_iter().map(|(t, _)| t))
            .collect();
        Self::from_tokens(tokens)
    }

    /// Reads a vocabulary file: one token per line, line number is the id.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens = text
            .lines()
            .map(|l| l.strip_suffix('\r').unwrap_or(l).to_string())
            .collect();
        Self::from_tokens(tokens)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
        for t in &self.tokens {
            writeln!(f, "{t}").map_err(|e| Error::io(path, e))?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Id of `token`, falling back to `[UNK]`.
    pub fn id_or_unk(&self, token: &str) -> u32 {
        self.id(token).unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.index.contains_key(token)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

fn is_punctuation(c: char) -> bool {
    !c.is_alphanumeric() && !c.is_whitespace() && !c.is_control()
}

/// Lowercases and splits on whitespace and punctuation; punctuation characters
/// become single-character tokens and control characters are dropped.
pub fn basic_tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for c in text.to_lowercase().chars() {
        if c.is_whitespace() || c.is_control() {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
        } else if is_punctuation(c) {
            if !word.is_empty() {
                out.push(std::mem::take(&mut word));
            }
            out.push(c.to_string());
        } else {
            word.push(c);
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Greedy longest-match decomposition of one word.
pub fn wordpiece(word: &str, vocab: &Vocab) -> Vec<String> {
    let chars: Vec<char> = word.chars().collect();
    if chars.len() > MAX_WORD_CHARS {
        return vec![UNK.to_string()];
    }
    let mut pieces = Vec::new();
    let mut start = 0;
    while start < chars.len() {
        let mut end = chars.len();
        let mut found = None;
        while end > start {
            let mut cand: String = chars[start..end].iter().collect();
            if start > 0 {
                cand.insert_str(0, CONTINUATION);
            }
            if vocab.contains(&cand) {
                found = Some(cand);
                break;
            }
            end -= 1;
        }
        match found {
            Some(p) => pieces.push(p),
            None => return vec![UNK.to_string()],
        }
        start = end;
    }
    pieces
}

pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<String> {
    basic_tokenize(text).iter().flat_map(|w| wordpiece(w, vocab)).collect()
}

/// Token ids plus masks for one model input of fixed length.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedInput {
    pub ids: Vec<u32>,
    /// True on real tokens, false on padding.
    pub attention_mask: Vec<bool>,
    /// 0 for the first sequence (through its `[SEP]`), 1 for the second.
    pub segment_ids: Vec<u8>,
}

impl EncodedInput {
    pub fn max_len(&self) -> usize {
        self.ids.len()
    }

    /// Number of non-padding positions.
    pub fn unpadded_len(&self) -> usize {
        self.attention_mask.iter().filter(|&&m| m).count()
    }

    fn from_parts(mut ids: Vec<u32>, mut segments: Vec<u8>, max_len: usize) -> Self {
        let used = ids.len();
        ids.resize(max_len, PAD_ID);
        segments.resize(max_len, 0);
        let attention_mask = (0..max_len).map(|i| i < used).collect();
        Self {
            ids,
            attention_mask,
            segment_ids: segments,
        }
    }
}

/// `[CLS] tokens [SEP]`, truncated to `max_len` (keeping `[SEP]`) and right-padded.
pub fn encode_single(tokens: &[String], vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    if max_len < 3 {
        return Err(Error::usage(format!("max_len {max_len} below 3")));
    }
    let keep = tokens.len().min(max_len - 2);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(tokens[..keep].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(SEP_ID);
    let segments = vec![0; ids.len()];
    Ok(EncodedInput::from_parts(ids, segments, max_len))
}

/// Lengths of the two sequences after longest-first truncation to fit
/// `budget` tokens; ties shorten the second sequence.
pub fn truncate_pair_lengths(mut a: usize, mut b: usize, budget: usize) -> (usize, usize) {
    while a + b > budget {
        if a > b {
            a -= 1;
        } else {
            b -= 1;
        }
    }
    (a, b)
}

/// `[CLS] a [SEP] b [SEP]`, right-padded. Segment 0 covers `[CLS]`, `a` and the
/// first `[SEP]`; segment 1 covers `b` and the final `[SEP]`.
pub fn encode_pair(a: &[String], b: &[String], vocab: &Vocab, max_len: usize) -> Result<EncodedInput> {
    if max_len < 5 {
        return Err(Error::usage(format!("max_len {max_len} below 5")));
    }
    let (la, lb) = truncate_pair_lengths(a.len(), b.len(), max_len - 3);
    let mut ids = Vec::with_capacity(max_len);
    ids.push(CLS_ID);
    ids.extend(a[..la].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(SEP_ID);
    let first = ids.len();
    ids.extend(b[..lb].iter().map(|t| vocab.id_or_unk(t)));
    ids.push(SEP_ID);
    let mut segments = vec![0u8; first];
    segments.resize(ids.len(), 1);
    Ok(EncodedInput::from_parts(ids, segments, max_len))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn vocab(words: &[&str]) -> Vocab {
        let tokens = SPECIALS.iter().chain(words).map(|s| s.to_string()).collect();
        Vocab::from_tokens(tokens).unwrap()
    }

    fn strs(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    /// Oracle: for each suffix start, scan the whole vocabulary for the longest
    /// matching piece; decompositions are assembled right-to-left.
    fn dp_longest_prefix(word: &str, vocab: &Vocab) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let n = chars.len();
        let mut best: Vec<Option<Vec<String>>> = vec![None; n + 1];
        best[n] = Some(Vec::new());
        for start in (0..n).rev() {
            let rest: String = chars[start..].iter().collect();
            let mut longest: Option<(usize, &str)> = None;
            for tok in vocab.tokens().iter().skip(SPECIALS.len()) {
                let body = if start > 0 {
                    match tok.strip_prefix(CONTINUATION) {
                        Some(b) => b,
                        None => continue,
                    }
                } else if tok.starts_with(CONTINUATION) {
                    continue;
                } else {
                    tok.as_str()
                };
                let len = body.chars().count();
                if len > 0 && rest.starts_with(body) && longest.is_none_or(|(l, _)| len > l) {
                    longest = Some((len, tok));
                }
            }
            best[start] = longest.and_then(|(len, tok)| {
                best[start + len].as_ref().map(|tail| {
                    let mut v = vec![tok.to_string()];
                    v.extend(tail.iter().cloned());
                    v
                })
            });
        }
        best[0].clone().unwrap_or_else(|| vec![UNK.to_string()])
    }

    #[test]
    fn specials_are_fixed() {
        let v = vocab(&["a"]);
        assert_eq!(v.id(PAD), Some(0));
        assert_eq!(v.id(UNK), Some(1));
        assert_eq!(v.id(CLS), Some(2));
        assert_eq!(v.id(SEP), Some(3));
        assert!(Vocab::from_tokens(strs(&["[UNK]", "[PAD]", "[CLS]", "[SEP]"])).is_err());
        assert!(Vocab::from_tokens(strs(&["[PAD]", "[UNK]", "[CLS]", "[SEP]", "x", "x"])).is_err());
    }

    #[test]
    fn build_respects_min_freq_and_is_deterministic() {
        let v = Vocab::build(["a a b"], 2).unwrap();
        assert!(v.contains("a"));
        assert!(!v.contains("b"));
        let corpus = ["how are you?", "are you ok", "b a c a"];
        let v1 = Vocab::build(corpus, 1).unwrap();
        let v2 = Vocab::build(corpus, 1).unwrap();
        assert_eq!(v1, v2);
        // "a", "are", "you" appear twice; ties broken lexicographically
        assert_eq!(&v1.tokens()[4..7], &strs(&["a", "are", "you"])[..]);
        assert!(Vocab::build(Vec::<String>::new(), 1).is_err());
    }

    #[test]
    fn basic_tokenize_splits_punctuation() {
        assert_eq!(basic_tokenize("How are you?"), strs(&["how", "are", "you", "?"]));
        assert_eq!(
            basic_tokenize("  it's\tfine!! "),
            strs(&["it", "'", "s", "fine", "!", "!"])
        );
        assert!(basic_tokenize("").is_empty());
    }

    #[test]
    fn tokenize_examples() {
        let v = vocab(&["how", "are", "you", "?"]);
        assert_eq!(tokenize("How are you?", &v), strs(&["how", "are", "you", "?"]));
        assert_eq!(tokenize("zebra", &v), strs(&[UNK]));
        let g = vocab(&["geo", "##logist"]);
        assert_eq!(tokenize("geologist", &g), strs(&["geo", "##logist"]));
        assert_eq!(dp_longest_prefix("geologist", &g), strs(&["geo", "##logist"]));
        assert!(tokenize("", &v).is_empty());
    }

    #[test]
    fn over_long_words_are_unknown() {
        let long = "a".repeat(MAX_WORD_CHARS + 1);
        let v = vocab(&["a", "##a"]);
        assert_eq!(wordpiece(&long, &v), strs(&[UNK]));
        assert_eq!(wordpiece(&long[..MAX_WORD_CHARS], &v).len(), MAX_WORD_CHARS);
    }

    #[test]
    fn vocab_file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.txt");
        let v = vocab(&["geo", "##logist", "?"]);
        v.save(&path).unwrap();
        assert_eq!(Vocab::load(&path).unwrap(), v);
        std::fs::write(&path, "[UNK]\n[PAD]\n[CLS]\n[SEP]\n").unwrap();
        assert!(Vocab::load(&path).is_err());
    }

    #[test]
    fn encode_single_examples() {
        let v = vocab(&["hi"]);
        let e = encode_single(&strs(&["hi"]), &v, 4).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, 4, SEP_ID, PAD_ID]);
        assert_eq!(e.attention_mask, vec![true, true, true, false]);
        assert_eq!(e.segment_ids, vec![0; 4]);

        let many: Vec<String> = (0..40).map(|_| "hi".to_string()).collect();
        let e = encode_single(&many, &v, 32).unwrap();
        assert_eq!(e.unpadded_len(), 32);
        assert_eq!(e.ids[0], CLS_ID);
        assert_eq!(e.ids[31], SEP_ID);
        assert_eq!(e.ids[1..31].iter().filter(|&&i| i == 4).count(), 30);

        let e = encode_single(&[], &v, 5).unwrap();
        assert_eq!(e.ids, vec![CLS_ID, SEP_ID, PAD_ID, PAD_ID, PAD_ID]);
        assert!(encode_single(&[], &v, 2).is_err());
    }

    #[test]
    fn encode_pair_packs_with_segments() {
        let v = vocab(&["how", "are", "you", "do"]);
        let e = encode_pair(
            &strs(&["how", "are", "you"]),
            &strs(&["how", "do", "you", "do"]),
            &v,
            16,
        )
        .unwrap();
        let expected: Vec<u32> = [CLS_ID, 4, 5, 6, SEP_ID, 4, 7, 6, 7, SEP_ID]
            .into_iter()
            .chain([PAD_ID; 6])
            .collect();
        assert_eq!(e.ids, expected);
        assert_eq!(e.segment_ids, [0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 0, 0, 0, 0, 0, 0]);
        assert_eq!(e.unpadded_len(), 10);
        assert!(encode_pair(&[], &[], &v, 4).is_err());
    }

    #[test]
    fn encode_pair_identical_questions_keep_both_copies() {
        let v = vocab(&["x", "y"]);
        let q = strs(&["x", "y"]);
        let e = encode_pair(&q, &q, &v, 10).unwrap();
        assert_eq!(&e.ids[..7], &[CLS_ID, 4, 5, SEP_ID, 4, 5, SEP_ID]);
        assert_eq!(&e.segment_ids[..7], &[0, 0, 0, 0, 1, 1, 1]);
    }

    #[test]
    fn pair_truncation_is_longest_first() {
        // simulate one token at a time by hand: 40/10 -> 19/10
        let (mut a, mut b) = (40usize, 10usize);
        while a + b + 3 > 32 {
            if a > b {
                a -= 1
            } else {
                b -= 1
            }
        }
        assert_eq!((a, b), (19, 10));
        assert_eq!(truncate_pair_lengths(40, 10, 29), (19, 10));
        assert_eq!(truncate_pair_lengths(20, 20, 29), (15, 14));
        let v = vocab(&["a", "b"]);
        let e = encode_pair(&vec!["a".to_string(); 40], &vec!["b".to_string(); 10], &v, 32).unwrap();
        assert_eq!(e.ids.iter().filter(|&&i| i == 4).count(), 19);
        assert_eq!(e.ids.iter().filter(|&&i| i == 5).count(), 10);
        assert_eq!(e.unpadded_len(), 32);
    }

    fn check_encoding(e: &EncodedInput, max_len: usize) {
        assert_eq!(e.ids.len(), max_len);
        assert_eq!(e.attention_mask.len(), max_len);
        assert_eq!(e.segment_ids.len(), max_len);
        let used = e.unpadded_len();
        assert!(e.attention_mask[..used].iter().all(|&m| m));
        assert!(e.attention_mask[used..].iter().all(|&m| !m));
        for (i, &id) in e.ids.iter().enumerate() {
            assert_eq!(id != PAD_ID, e.attention_mask[i]);
        }
        let last_real = e.ids.iter().rposition(|&i| i != PAD_ID).unwrap();
        assert_eq!(used, last_real + 1);
    }

    fn word() -> impl Strategy<Value = String> {
        "[abc]{1,6}"
    }

    proptest! {
        #[test]
        fn encodings_satisfy_invariants(
            a in prop::collection::vec(word(), 0..30),
            b in prop::collection::vec(word(), 0..30),
            max_len in 5usize..40,
        ) {
            let v = Vocab::build(a.iter().chain(&b), 1).unwrap_or_else(|_| vocab(&[]));
            let single = encode_single(&a, &v, max_len).unwrap();
            check_encoding(&single, max_len);
            prop_assert!(single.segment_ids.iter().all(|&s| s == 0));

            let ab = encode_pair(&a, &b, &v, max_len).unwrap();
            let ba = encode_pair(&b, &a, &v, max_len).unwrap();
            check_encoding(&ab, max_len);
            prop_assert_eq!(ab.unpadded_len(), ba.unpadded_len());
            let first_sep = ab.ids.iter().position(|&i| i == SEP_ID).unwrap();
            for (i, &s) in ab.segment_ids.iter().enumerate() {
                let expected = u8::from(i > first_sep && ab.attention_mask[i]);
                prop_assert_eq!(s, expected);
            }
        }

        #[test]
        fn greedy_matches_dp_oracle(
            pieces in prop::collection::btree_set("(##)?[abc]{1,3}", 1..60),
            words in prop::collection::vec("[abc]{1,10}", 1..20),
        ) {
            let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            tokens.extend(pieces.into_iter().filter(|p| p != CONTINUATION));
            prop_assume!(tokens.len() <= 100);
            let v = Vocab::from_tokens(tokens).unwrap();
            for w in &words {
                prop_assert_eq!(wordpiece(w, &v), dp_longest_prefix(w, &v));
            }
        }

        #[test]
        fn tokenize_round_trips_without_unk(
            text in "[ab ?,.]{0,40}",
            pieces in prop::collection::btree_set("(##)?[ab]{1,2}", 1..12),
        ) {
            let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
            tokens.extend(["?", ",", "."].iter().map(|s| s.to_string()));
            tokens.extend(pieces);
            let v = Vocab::from_tokens(tokens).unwrap();
            let toks = tokenize(&text, &v);
            prop_assume!(!toks.iter().any(|t| t == UNK));
            let mut joined = String::new();
            for t in &toks {
                match t.strip_prefix(CONTINUATION) {
                    Some(rest) => joined.push_str(rest),
                    None => {
                        if !joined.is_empty() {
                            joined.push(' ');
                        }
                        joined.push_str(t);
                    }
                }
            }
            prop_assert_eq!(joined, basic_tokenize(&text).join(" "));
        }
    }
}
