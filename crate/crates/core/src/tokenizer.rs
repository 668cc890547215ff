//! Toy byte-pair-encoding laboratory: greedy merge training, tokenization,
//! efficiency metrics (token count, CpT, TpW), and detection of the merge
//! ambiguity that appears when two vocabularies are combined.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TokenizerError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("vocab_size {vocab_size} must exceed alphabet size {alphabet}")]
    VocabTooSmall { vocab_size: usize, alphabet: usize },
    #[error("text has no whitespace-delimited words")]
    NoWords,
    #[error("empty text")]
    EmptyText,
    #[error("incompatible alphabets: {0}")]
    IncompatibleAlphabets(String),
    #[error("exhaustive scan of {count} strings exceeds the {limit} limit; lower max_len")]
    ScanTooLarge { count: u128, limit: u128 },
    #[error("malformed vocab file at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// One learned merge: `left + right -> merged`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MergeRule {
    pub left: String,
    pub right: String,
    pub merged: String,
}

/// Base alphabet plus the ordered merge list.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BpeVocab {
    pub alphabet: BTreeSet<char>,
    pub merges: Vec<MergeRule>,
}

/// Tokenizer efficiency numbers: raw token count, characters per token, and
/// tokens per word.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizerMetrics {
    pub token_count: usize,
    pub chars_per_token: f64,
    pub tokens_per_word: f64,
}

/// Overlaps and order-dependent ambiguities found when merging vocabularies.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ConflictReport {
    /// Merged token strings present in both vocabularies.
    pub overlapping_tokens: Vec<String>,
    /// Strings (within the scan bound) that tokenize differently under the
    /// two inputs; the merged vocabulary has to pick one side.
    pub ambiguous: Vec<AmbiguousString>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AmbiguousString {
    pub text: String,
    pub under_a: Vec<String>,
    pub under_b: Vec<String>,
    pub under_merged: Vec<String>,
}

impl BpeVocab {
    /// All token strings: alphabet plus merge products.
    pub fn token_strings(&self) -> BTreeSet<String> {
        let mut set: BTreeSet<String> = self.alphabet.iter().map(|c| c.to_string()).collect();
        for m in &self.merges {
            set.insert(m.merged.clone());
        }
        set
    }

    pub fn vocab_size(&self) -> usize {
        self.token_strings().len()
    }
}

/// Greedy BPE training: repeatedly merge the most frequent adjacent pair,
/// ties broken lexicographically by pair, until `vocab_size` tokens exist or
/// no adjacent pair remains.
pub fn bpe_train(corpus: &[String], vocab_size: usize) -> Result<BpeVocab, TokenizerError> {
    if corpus.iter().all(|d| d.is_empty()) {
        return Err(TokenizerError::EmptyCorpus);
    }
    let alphabet: BTreeSet<char> = corpus.iter().flat_map(|d| d.chars()).collect();
    if vocab_size <= alphabet.len() {
        return Err(TokenizerError::VocabTooSmall {
            vocab_size,
            alphabet: alphabet.len(),
        });
    }
    let mut docs: Vec<Vec<String>> = corpus
        .iter()
        .filter(|d| !d.is_empty())
        .map(|d| d.chars().map(|c| c.to_string()).collect())
        .collect();
    let mut merges = Vec::new();
    while alphabet.len() + merges.len() < vocab_size {
        let mut counts: BTreeMap<(&str, &str), usize> = BTreeMap::new();
        for doc in &docs {
            for pair in doc.windows(2) {
                *counts.entry((pair[0].as_str(), pair[1].as_str())).or_insert(0) += 1;
            }
        }
        // most frequent; BTreeMap iteration order gives the lexicographically
        // smallest pair on ties
        let Some(((left, right), _)) = counts.iter().fold(None::<((&str, &str), usize)>, |best, (&pair, &c)| {
            match best {
                Some((_, bc)) if bc >= c => best,
                _ => Some((pair, c)),
            }
        }) else {
            break;
        };
        let rule = MergeRule {
            left: left.to_string(),
            right: right.to_string(),
            merged: format!("{left}{right}"),
        };
        for doc in &mut docs {
            apply_merge(doc, &rule);
        }
        merges.push(rule);
    }
    Ok(BpeVocab { alphabet, merges })
}

fn apply_merge(symbols: &mut Vec<String>, rule: &MergeRule) {
    let mut out = Vec::with_capacity(symbols.len());
    let mut i = 0;
    while i < symbols.len() {
        if i + 1 < symbols.len() && symbols[i] == rule.left && symbols[i + 1] == rule.right {
            out.push(rule.merged.clone());
            i += 2;
        } else {
            out.push(std::mem::take(&mut symbols[i]));
            i += 1;
        }
    }
    *symbols = out;
}

/// Apply merges in training order, exhaustively. Characters outside the base
/// alphabet stay as single-character fallback tokens.
pub fn tokenize(vocab: &BpeVocab, text: &str) -> Vec<String> {
    let mut symbols: Vec<String> = text.chars().map(|c| c.to_string()).collect();
    for rule in &vocab.merges {
        apply_merge(&mut symbols, rule);
    }
    symbols
}

/// Token count, characters per token, tokens per word. Characters are unicode
/// scalar values; words are whitespace-delimited.
pub fn metrics(vocab: &BpeVocab, text: &str) -> Result<TokenizerMetrics, TokenizerError> {
    if text.is_empty() {
        return Err(TokenizerError::EmptyText);
    }
    let words = text.split_whitespace().count();
    if words == 0 {
        return Err(TokenizerError::NoWords);
    }
    let chars = text.chars().count();
    let tokens = tokenize(vocab, text).len();
    Ok(TokenizerMetrics {
        token_count: tokens,
        chars_per_token: chars as f64 / tokens as f64,
        tokens_per_word: tokens as f64 / words as f64,
    })
}

const SCAN_LIMIT: u128 = 2_000_000;

/// Combine two vocabularies (a's merges first, then b's novel ones) and
/// report overlapping tokens and merge-order ambiguities, found by
/// exhaustively tokenizing every string up to `max_len` characters.
pub fn merge_vocabs(
    a: &BpeVocab,
    b: &BpeVocab,
    max_len: usize,
) -> Result<(BpeVocab, ConflictReport), TokenizerError> {
    if a.alphabet != b.alphabet {
        let only_a: Vec<char> = a.alphabet.difference(&b.alphabet).copied().collect();
        let only_b: Vec<char> = b.alphabet.difference(&a.alphabet).copied().collect();
        return Err(TokenizerError::IncompatibleAlphabets(format!(
            "only in a: {only_a:?}, only in b: {only_b:?}"
        )));
    }
    let mut merges = a.merges.clone();
    for rule in &b.merges {
        if !merges.contains(rule) {
            merges.push(rule.clone());
        }
    }
    let merged = BpeVocab {
        alphabet: a.alphabet.clone(),
        merges,
    };
    let a_tokens: BTreeSet<&String> = a.merges.iter().map(|m| &m.merged).collect();
    let overlapping_tokens: Vec<String> = b
        .merges
        .iter()
        .map(|m| &m.merged)
        .filter(|t| a_tokens.contains(t))
        .cloned()
        .collect();

    let alphabet: Vec<char> = a.alphabet.iter().copied().collect();
    let mut count: u128 = 0;
    let mut pow: u128 = 1;
    for _ in 0..max_len {
        pow = pow.saturating_mul(alphabet.len() as u128);
        count = count.saturating_add(pow);
    }
    if count > SCAN_LIMIT {
        return Err(TokenizerError::ScanTooLarge {
            count,
            limit: SCAN_LIMIT,
        });
    }
    let mut ambiguous = Vec::new();
    let mut stack: Vec<String> = vec![String::new()];
    while let Some(prefix) = stack.pop() {
        if !prefix.is_empty() {
            let under_a = tokenize(a, &prefix);
            let under_b = tokenize(b, &prefix);
            if under_a != under_b {
                let under_merged = tokenize(&merged, &prefix);
                ambiguous.push(AmbiguousString {
                    text: prefix.clone(),
                    under_a,
                    under_b,
                    under_merged,
                });
            }
        }
        if prefix.chars().count() < max_len {
            for &c in alphabet.iter().rev() {
                let mut next = prefix.clone();
                next.push(c);
                stack.push(next);
            }
        }
    }
    ambiguous.sort_by(|x, y| x.text.cmp(&y.text));
    Ok((
        merged,
        ConflictReport {
            overlapping_tokens,
            ambiguous,
        },
    ))
}

fn escape_token(s: &str) -> String {
    let mut out = String::new();
    for c in s.chars() {
        match c {
            '\\' => out.push_str("\\\\"),
            ' ' => out.push_str("\\s"),
            '\t' => out.push_str("\\t"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out
}

fn unescape_token(s: &str) -> Result<String, String> {
    let mut out = String::new();
    let mut chars = s.chars();
    while let Some(c) = chars.next() {
        if c == '\\' {
            match chars.next() {
                Some('\\') => out.push('\\'),
                Some('s') => out.push(' '),
                Some('t') => out.push('\t'),
                Some('n') => out.push('\n'),
                Some('r') => out.push('\r'),
                other => return Err(format!("bad escape \\{other:?}")),
            }
        } else {
            out.push(c);
        }
    }
    Ok(out)
}

/// Write the ordered merge list, one `token_a token_b merged` line each.
/// Whitespace inside tokens is backslash-escaped.
pub fn save_vocab<W: Write>(vocab: &BpeVocab, mut w: W) -> Result<(), TokenizerError> {
    let alphabet: String = vocab.alphabet.iter().map(|&c| escape_token(&c.to_string())).collect::<Vec<_>>().join(" ");
    writeln!(w, "#alphabet {alphabet}")?;
    for m in &vocab.merges {
        writeln!(w, "{} {} {}", escape_token(&m.left), escape_token(&m.right), escape_token(&m.merged))?;
    }
    Ok(())
}

pub fn load_vocab<R: BufRead>(r: R) -> Result<BpeVocab, TokenizerError> {
    let mut alphabet = BTreeSet::new();
    let mut merges = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix("#alphabet ") {
            for tok in rest.split(' ') {
                let s = unescape_token(tok).map_err(|message| TokenizerError::Malformed {
                    line: i + 1,
                    message,
                })?;
                alphabet.extend(s.chars());
            }
            continue;
        }
        let parts: Vec<&str> = line.split(' ').collect();
        if parts.len() != 3 {
            return Err(TokenizerError::Malformed {
                line: i + 1,
                message: format!("expected 3 fields, got {}", parts.len()),
            });
        }
        let mut fields = parts
            .iter()
            .map(|p| unescape_token(p))
            .collect::<Result<Vec<_>, _>>()
            .map_err(|message| TokenizerError::Malformed {
                line: i + 1,
                message,
            })?;
        let merged = fields.pop().unwrap();
        let right = fields.pop().unwrap();
        let left = fields.pop().unwrap();
        if format!("{left}{right}") != merged {
            return Err(TokenizerError::Malformed {
                line: i + 1,
                message: format!("{left:?} + {right:?} does not concatenate to {merged:?}"),
            });
        }
        merges.push(MergeRule { left, right, merged });
    }
    // merges reference only characters already seen
    for m in &merges {
        alphabet.extend(m.merged.chars());
    }
    Ok(BpeVocab { alphabet, merges })
}

/// Map token strings to dense ids for feeding models: alphabet first (sorted),
/// then merge products in merge order. Unknown fallback characters map to id 0.
pub fn token_ids(vocab: &BpeVocab, tokens: &[String], vocab_cap: usize) -> Vec<u32> {
    let mut index: BTreeMap<String, u32> = BTreeMap::new();
    let mut next = 1u32; // 0 reserved for unknown
    for c in &vocab.alphabet {
        index.entry(c.to_string()).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
    }
    for m in &vocab.merges {
        index.entry(m.merged.clone()).or_insert_with(|| {
            let id = next;
            next += 1;
            id
        });
    }
    tokens
        .iter()
        .map(|t| {
            let id = index.get(t.as_str()).copied().unwrap_or(0);
            if (id as usize) < vocab_cap {
                id
            } else {
                0
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn corpus(docs: &[&str]) -> Vec<String> {
        docs.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn train_forced_merges_on_repeated_char() {
        let v = bpe_train(&corpus(&["aaaa"]), 3).unwrap();
        assert_eq!(v.alphabet.len(), 1);
        assert_eq!(v.merges.len(), 2);
        assert_eq!((v.merges[0].left.as_str(), v.merges[0].right.as_str()), ("a", "a"));
        assert_eq!(v.merges[1].merged, "aaaa");
    }

    #[test]
    fn train_first_merge_is_most_frequent_pair() {
        let v = bpe_train(&corpus(&["ab", "ab", "ab"]), 3).unwrap();
        assert_eq!(v.merges[0].merged, "ab");
    }

    #[test]
    fn train_rejects_empty_and_small_vocab() {
        assert!(matches!(bpe_train(&[], 5), Err(TokenizerError::EmptyCorpus)));
        assert!(matches!(
            bpe_train(&corpus(&["abc"]), 3),
            Err(TokenizerError::VocabTooSmall { .. })
        ));
    }

    #[test]
    fn train_matches_bruteforce_pair_counting_oracle() {
        let docs = corpus(&["the cat sat", "the hat", "that cat", "a bat", "the bat sat"]);
        let v = bpe_train(&docs, docs.iter().flat_map(|d| d.chars()).collect::<BTreeSet<_>>().len() + 6).unwrap();
        // independent oracle: naive recount each step over fresh tokenizations
        let mut oracle_docs: Vec<Vec<String>> = docs.iter().map(|d| d.chars().map(|c| c.to_string()).collect()).collect();
        for rule in &v.merges {
            let mut counts: BTreeMap<(String, String), usize> = BTreeMap::new();
            for doc in &oracle_docs {
                for w in doc.windows(2) {
                    *counts.entry((w[0].clone(), w[1].clone())).or_insert(0) += 1;
                }
            }
            let best = counts
                .iter()
                .fold(None::<(&(String, String), usize)>, |best, (p, &c)| match best {
                    Some((_, bc)) if bc >= c => best,
                    _ => Some((p, c)),
                })
                .unwrap()
                .0
                .clone();
            assert_eq!((best.0.as_str(), best.1.as_str()), (rule.left.as_str(), rule.right.as_str()));
            for doc in &mut oracle_docs {
                apply_merge(doc, rule);
            }
        }
    }

    #[test]
    fn tokenize_edge_cases_and_roundtrip() {
        let v = bpe_train(&corpus(&["abab"]), 4).unwrap();
        assert!(tokenize(&v, "").is_empty());
        assert_eq!(tokenize(&v, "a"), vec!["a"]);
        // unknown char falls back to itself
        assert_eq!(tokenize(&v, "z"), vec!["z"]);
        for text in ["abab", "aabb", "baba", "xyzab"] {
            assert_eq!(tokenize(&v, text).concat(), text);
        }
    }

    #[test]
    fn metrics_hand_counts() {
        let v = bpe_train(&corpus(&["aaa bbb"]), 9).unwrap();
        // fully merged: "aaa bbb" collapses to few tokens; use a fresh vocab
        // with no merges for exact counting instead
        let plain = BpeVocab {
            alphabet: v.alphabet.clone(),
            merges: vec![],
        };
        let m = metrics(&plain, "abc").unwrap();
        assert_eq!(m.token_count, 3);
        assert_eq!(m.chars_per_token, 1.0);
        assert_eq!(m.tokens_per_word, 3.0);
        assert!(matches!(metrics(&plain, "   "), Err(TokenizerError::NoWords)));
        assert!(matches!(metrics(&plain, ""), Err(TokenizerError::EmptyText)));
    }

    #[test]
    fn metrics_two_token_example() {
        // tokenizes "aaa bbb" as ["aaa", " bbb"]: CpT 3.5, TpW 1.0
        let alphabet: BTreeSet<char> = "ab ".chars().collect();
        let merges = vec![
            MergeRule { left: "a".into(), right: "a".into(), merged: "aa".into() },
            MergeRule { left: "aa".into(), right: "a".into(), merged: "aaa".into() },
            MergeRule { left: "b".into(), right: "b".into(), merged: "bb".into() },
            MergeRule { left: "bb".into(), right: "b".into(), merged: "bbb".into() },
            MergeRule { left: " ".into(), right: "bbb".into(), merged: " bbb".into() },
        ];
        let v = BpeVocab { alphabet, merges };
        assert_eq!(tokenize(&v, "aaa bbb"), vec!["aaa", " bbb"]);
        let m = metrics(&v, "aaa bbb").unwrap();
        assert_eq!(m.token_count, 2);
        assert_eq!(m.chars_per_token, 3.5);
        assert_eq!(m.tokens_per_word, 1.0);
    }

    #[test]
    fn merge_vocabs_idempotent_and_disjoint() {
        let a = bpe_train(&corpus(&["abab", "abab"]), 4).unwrap();
        let (m, report) = merge_vocabs(&a, &a, 4).unwrap();
        assert_eq!(m, a);
        assert!(report.ambiguous.is_empty());
        // identical vocabularies share every merged token
        assert_eq!(report.overlapping_tokens.len(), a.merges.len());
    }

    #[test]
    fn merge_vocabs_rejects_different_alphabets() {
        let a = bpe_train(&corpus(&["abab"]), 4).unwrap();
        let b = bpe_train(&corpus(&["cdcd"]), 4).unwrap();
        assert!(matches!(
            merge_vocabs(&a, &b, 3),
            Err(TokenizerError::IncompatibleAlphabets(_))
        ));
    }

    #[test]
    fn merge_vocabs_detects_constructed_ambiguity() {
        // under a: "abc" -> ["ab", "c"]; under b: "abc" -> ["a", "bc"]
        let alphabet: BTreeSet<char> = "abc".chars().collect();
        let a = BpeVocab {
            alphabet: alphabet.clone(),
            merges: vec![MergeRule { left: "a".into(), right: "b".into(), merged: "ab".into() }],
        };
        let b = BpeVocab {
            alphabet,
            merges: vec![MergeRule { left: "b".into(), right: "c".into(), merged: "bc".into() }],
        };
        let (merged, report) = merge_vocabs(&a, &b, 4).unwrap();
        let hit = report.ambiguous.iter().find(|s| s.text == "abc").expect("abc reported");
        assert_eq!(hit.under_a, vec!["ab", "c"]);
        assert_eq!(hit.under_b, vec!["a", "bc"]);
        assert_eq!(tokenize(&merged, "abc"), vec!["ab", "c"]); // a's rule wins
    }

    #[test]
    fn vocab_file_roundtrip_with_spaces() {
        let v = bpe_train(&corpus(&["a b a b", "a b"]), 6).unwrap();
        let mut buf = Vec::new();
        save_vocab(&v, &mut buf).unwrap();
        let loaded = load_vocab(buf.as_slice()).unwrap();
        assert_eq!(v, loaded);
    }
}
