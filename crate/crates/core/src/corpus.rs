//! Corpus quality pipeline: text cleanup/anonymization, surface stylometric
//! features, a small gradient-boosted-tree classifier with a softmax
//! objective, and the strict 90%-probability gate for the high-quality class.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use regex::Regex;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("empty text")]
    EmptyText,
    #[error("sample {index} has {actual} features, expected {expected}")]
    FeatureLength {
        index: usize,
        expected: usize,
        actual: usize,
    },
    #[error("training data contains a single class; need at least two")]
    SingleClass,
    #[error("empty dataset")]
    EmptyDataset,
    #[error("class label {label} out of range for {classes} classes")]
    ClassOutOfRange { label: usize, classes: usize },
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("model file: {0}")]
    ModelFile(String),
    #[error("model expects features {expected:?}, registry provides {actual:?}")]
    RegistryMismatch {
        expected: Vec<String>,
        actual: Vec<String>,
    },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Cleanup / anonymization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    LineEnding,
    ControlChar,
    Url,
    Email,
    Phone,
    BlankLines,
    InvalidUtf8,
}

/// One repair applied by `clean_text`; `offset` is the byte offset in the
/// text as it stood when that pass ran.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Edit {
    pub kind: EditKind,
    pub offset: usize,
}

fn email_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"[A-Za-z0-9._%+-]+@[A-Za-z0-9-]+(\.[A-Za-z0-9-]+)+").unwrap())
}

fn url_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    RE.get_or_init(|| Regex::new(r"(https?://|www\.)[^\s<>]+").unwrap())
}

fn blank_re() -> &'static Regex {
    static RE: OnceLock<Regex> = OnceLock::new();
    // 3 newlines = 2 blank lines; longer runs collapse to that
    RE.get_or_init(|| Regex::new(r"\n{4,}").unwrap())
}

/// Maximal digit runs (separators: single space or dash, optional leading
/// `+`) with 9–15 digits. Runs outside that range are left alone, so long
/// numbers are never partially anonymized.
fn find_phone_spans(s: &str) -> Vec<(usize, usize)> {
    let bytes = s.as_bytes();
    let mut spans = Vec::new();
    let mut i = 0;
    while i < bytes.len() {
        let has_plus = bytes[i] == b'+' && i + 1 < bytes.len() && bytes[i + 1].is_ascii_digit();
        if !(bytes[i].is_ascii_digit() || has_plus) {
            i += 1;
            continue;
        }
        // boundary: a digit run continuing from the previous char is not a start
        if i > 0 && bytes[i - 1].is_ascii_digit() {
            i += 1;
            while i < bytes.len() && bytes[i].is_ascii_digit() {
                i += 1;
            }
            continue;
        }
        let start = i;
        if has_plus {
            i += 1;
        }
        let mut digits = 0usize;
        let mut end = i;
        while i < bytes.len() {
            if bytes[i].is_ascii_digit() {
                digits += 1;
                i += 1;
                end = i;
            } else if (bytes[i] == b' ' || bytes[i] == b'-')
                && i + 1 < bytes.len()
                && bytes[i + 1].is_ascii_digit()
            {
                i += 1;
            } else {
                break;
            }
        }
        if (9..=15).contains(&digits) {
            spans.push((start, end));
        }
    }
    spans
}

/// Total cleanup pass: normalizes Windows line endings, strips control
/// characters other than tab/newline, replaces URLs, emails, and phone-like
/// digit runs with placeholder tokens, and collapses runs of more than two
/// blank lines. Idempotent.
pub fn clean_text(raw: &str) -> (String, Vec<Edit>) {
    let mut edits = Vec::new();

    let mut text = String::with_capacity(raw.len());
    for (off, c) in raw.char_indices() {
        if raw[off..].starts_with("\r\n") {
            edits.push(Edit {
                kind: EditKind::LineEnding,
                offset: off,
            });
            continue; // drop the '\r'; '\n' follows on its own
        }
        if c.is_control() && c != '\t' && c != '\n' {
            edits.push(Edit {
                kind: EditKind::ControlChar,
                offset: off,
            });
            continue;
        }
        text.push(c);
    }

    for (re, kind, placeholder) in [
        (url_re(), EditKind::Url, "<URL>"),
        (email_re(), EditKind::Email, "<EMAIL>"),
    ] {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for m in re.find_iter(&text) {
            edits.push(Edit {
                kind,
                offset: m.start(),
            });
            out.push_str(&text[last..m.start()]);
            out.push_str(placeholder);
            last = m.end();
        }
        out.push_str(&text[last..]);
        text = out;
    }

    let spans = find_phone_spans(&text);
    if !spans.is_empty() {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for &(start, end) in &spans {
            edits.push(Edit {
                kind: EditKind::Phone,
                offset: start,
            });
            out.push_str(&text[last..start]);
            out.push_str("<PHONE>");
            last = end;
        }
        out.push_str(&text[last..]);
        text = out;
    }

    if blank_re().is_match(&text) {
        let mut out = String::with_capacity(text.len());
        let mut last = 0;
        for m in blank_re().find_iter(&text) {
            edits.push(Edit {
                kind: EditKind::BlankLines,
                offset: m.start(),
            });
            out.push_str(&text[last..m.start()]);
            out.push_str("\n\n\n");
            last = m.end();
        }
        out.push_str(&text[last..]);
        text = out;
    }

    (text, edits)
}

/// Like `clean_text` but accepts raw bytes; invalid UTF-8 sequences are
/// replaced with U+FFFD and recorded.
pub fn clean_bytes(raw: &[u8]) -> (String, Vec<Edit>) {
    let decoded = String::from_utf8_lossy(raw);
    let mut edits: Vec<Edit> = decoded
        .char_indices()
        .filter(|&(_, c)| c == char::REPLACEMENT_CHARACTER)
        .map(|(offset, _)| Edit {
            kind: EditKind::InvalidUtf8,
            offset,
        })
        .collect();
    let (clean, mut rest) = clean_text(&decoded);
    edits.append(&mut rest);
    (clean, edits)
}

// ---------------------------------------------------------------------------
// Feature registry
// ---------------------------------------------------------------------------

/// Extractors available to the registry. Frequencies are per character or
/// per word, so every ratio lands in [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeatureExtractor {
    CharCount,
    WordCount,
    SentenceCount,
    LineCount,
    BlankLineCount,
    MeanWordLen,
    StdWordLen,
    MeanSentenceLenWords,
    StdSentenceLenWords,
    TypeTokenRatio,
    UppercaseRatio,
    DigitRatio,
    WhitespaceRatio,
    PunctuationRatio,
    StopwordFreq,
    BlankLineDensity,
    MarkupDensity,
    CharFreq(char),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDef {
    pub name: String,
    pub extractor: FeatureExtractor,
    pub description: String,
}

/// Ordered feature list; the order is the serialization contract for
/// feature vectors and trained models.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRegistry {
    pub features: Vec<FeatureDef>,
    pub stopwords: Vec<String>,
}

const DEFAULT_STOPWORDS: &[&str] = &[
    "i", "w", "z", "na", "do", "się", "nie", "to", "jest", "że", "a", "o", "po", "jak", "ale",
    "czy", "za", "od", "the", "and", "of",
];

const PUNCT_FREQ_CHARS: &[char] = &[
    '.', ',', '!', '?', ';', ':', '-', '"', '\'', '(', ')', '/', '*', '#', '<', '>', '&', '[',
    ']', '=', '+', '%', '@',
];

impl FeatureRegistry {
    /// Shipped surface-feature set (~40 features).
    pub fn default_set() -> Self {
        use FeatureExtractor::*;
        let mut features = vec![
            ("char_count", CharCount, "unicode scalar count"),
            ("word_count", WordCount, "whitespace-delimited words"),
            ("sentence_count", SentenceCount, "terminator-delimited sentences"),
            ("line_count", LineCount, "newline-delimited lines"),
            ("blank_line_count", BlankLineCount, "empty lines"),
            ("mean_word_len", MeanWordLen, "mean word length in chars"),
            ("std_word_len", StdWordLen, "word length population std"),
            ("mean_sentence_len_words", MeanSentenceLenWords, "mean sentence length in words"),
            ("std_sentence_len_words", StdSentenceLenWords, "sentence length population std"),
            ("type_token_ratio", TypeTokenRatio, "unique words / words"),
            ("uppercase_ratio", UppercaseRatio, "uppercase chars / chars"),
            ("digit_ratio", DigitRatio, "digit chars / chars"),
            ("whitespace_ratio", WhitespaceRatio, "whitespace chars / chars"),
            ("punctuation_ratio", PunctuationRatio, "ascii punctuation chars / chars"),
            ("stopword_freq", StopwordFreq, "stopword words / words"),
            ("blank_line_density", BlankLineDensity, "blank lines / lines"),
            ("markup_density", MarkupDensity, "markup-ish chars / chars"),
        ]
        .into_iter()
        .map(|(name, extractor, description)| FeatureDef {
            name: name.to_string(),
            extractor,
            description: description.to_string(),
        })
        .collect::<Vec<_>>();
        for &c in PUNCT_FREQ_CHARS {
            features.push(FeatureDef {
                name: format!("freq_{}", c),
                extractor: CharFreq(c),
                description: format!("frequency of {c:?} per char"),
            });
        }
        Self {
            features,
            stopwords: DEFAULT_STOPWORDS.iter().map(|s| s.to_string()).collect(),
        }
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name.clone()).collect()
    }

    pub fn validate(&self) -> Result<(), CorpusError> {
        let unique: BTreeSet<&str> = self.features.iter().map(|f| f.name.as_str()).collect();
        if unique.len() != self.features.len() {
            return Err(CorpusError::Config("duplicate feature names".into()));
        }
        if self.features.is_empty() {
            return Err(CorpusError::Config("empty feature registry".into()));
        }
        Ok(())
    }
}

struct TextStats {
    chars: Vec<char>,
    words: Vec<String>,
    sentence_word_counts: Vec<usize>,
    lines: usize,
    blank_lines: usize,
}

fn markup_char(c: char) -> bool {
    matches!(c, '<' | '>' | '&' | '*' | '#' | '[' | ']' | '_' | '`' | '|')
}

fn text_stats(text: &str) -> TextStats {
    let chars: Vec<char> = text.chars().collect();
    let words: Vec<String> = text.split_whitespace().map(|w| w.to_string()).collect();
    // sentences: maximal runs of .!? end one sentence; a trailing fragment
    // with any word characters counts as one more
    let mut sentence_word_counts = Vec::new();
    let mut words_in_current = 0usize;
    let mut in_word = false;
    let mut prev_was_terminator = false;
    for &c in &chars {
        let terminator = matches!(c, '.' | '!' | '?');
        if terminator {
            if !prev_was_terminator {
                if in_word {
                    words_in_current += 1;
                    in_word = false;
                }
                sentence_word_counts.push(words_in_current);
                words_in_current = 0;
            }
        } else if c.is_whitespace() {
            if in_word {
                words_in_current += 1;
                in_word = false;
            }
        } else {
            in_word = true;
        }
        prev_was_terminator = terminator;
    }
    if in_word {
        words_in_current += 1;
    }
    if words_in_current > 0 {
        sentence_word_counts.push(words_in_current);
    }
    let lines = text.lines().count();
    let blank_lines = text.lines().filter(|l| l.trim().is_empty()).count();
    TextStats {
        chars,
        words,
        sentence_word_counts,
        lines,
        blank_lines,
    }
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count();
    if n == 0 {
        return (0.0, 0.0);
    }
    let mean = values.clone().sum::<f64>() / n as f64;
    let var = values.map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
    (mean, var.sqrt())
}

/// Deterministic feature vector in registry order.
pub fn extract_features(text: &str, registry: &FeatureRegistry) -> Result<Vec<f64>, CorpusError> {
    if text.is_empty() {
        return Err(CorpusError::EmptyText);
    }
    let stats = text_stats(text);
    let nchars = stats.chars.len() as f64;
    let nwords = stats.words.len();
    let char_ratio = |pred: &dyn Fn(char) -> bool| {
        stats.chars.iter().filter(|&&c| pred(c)).count() as f64 / nchars
    };
    let out = registry
        .features
        .iter()
        .map(|def| match &def.extractor {
            FeatureExtractor::CharCount => nchars,
            FeatureExtractor::WordCount => nwords as f64,
            FeatureExtractor::SentenceCount => stats.sentence_word_counts.len() as f64,
            FeatureExtractor::LineCount => stats.lines as f64,
            FeatureExtractor::BlankLineCount => stats.blank_lines as f64,
            FeatureExtractor::MeanWordLen => {
                mean_std(stats.words.iter().map(|w| w.chars().count() as f64)).0
            }
            FeatureExtractor::StdWordLen => {
                mean_std(stats.words.iter().map(|w| w.chars().count() as f64)).1
            }
            FeatureExtractor::MeanSentenceLenWords => {
                mean_std(stats.sentence_word_counts.iter().map(|&n| n as f64)).0
            }
            FeatureExtractor::StdSentenceLenWords => {
                mean_std(stats.sentence_word_counts.iter().map(|&n| n as f64)).1
            }
            FeatureExtractor::TypeTokenRatio => {
                if nwords == 0 {
                    0.0
                } else {
                    let unique: BTreeSet<&String> = stats.words.iter().collect();
                    unique.len() as f64 / nwords as f64
                }
            }
            FeatureExtractor::UppercaseRatio => char_ratio(&|c| c.is_uppercase()),
            FeatureExtractor::DigitRatio => char_ratio(&|c| c.is_ascii_digit()),
            FeatureExtractor::WhitespaceRatio => char_ratio(&|c| c.is_whitespace()),
            FeatureExtractor::PunctuationRatio => char_ratio(&|c| c.is_ascii_punctuation()),
            FeatureExtractor::StopwordFreq => {
                if nwords == 0 {
                    0.0
                } else {
                    let stop: BTreeSet<&str> =
                        registry.stopwords.iter().map(|s| s.as_str()).collect();
                    stats
                        .words
                        .iter()
                        .filter(|w| stop.contains(w.to_lowercase().as_str()))
                        .count() as f64
                        / nwords as f64
                }
            }
            FeatureExtractor::BlankLineDensity => {
                if stats.lines == 0 {
                    0.0
                } else {
                    stats.blank_lines as f64 / stats.lines as f64
                }
            }
            FeatureExtractor::MarkupDensity => char_ratio(&markup_char),
            FeatureExtractor::CharFreq(c) => char_ratio(&|x| x == *c),
        })
        .collect();
    Ok(out)
}

// ---------------------------------------------------------------------------
// Gradient-boosted trees, softmax objective
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtConfig {
    /// Boosting rounds; each round fits one tree per class.
    pub rounds: usize,
    pub max_depth: usize,
    pub learning_rate: f64,
    /// L2 leaf regularization.
    pub lambda: f64,
    pub seed: u64,
}

impl Default for GbtConfig {
    fn default() -> Self {
        Self {
            rounds: 50,
            max_depth: 3,
            learning_rate: 0.3,
            lambda: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TreeNode {
    Split {
        feature: usize,
        threshold: f64,
        left: usize,
        right: usize,
    },
    Leaf {
        value: f64,
    },
}

/// Regression tree stored as a node array; node 0 is the root. Samples with
/// `x[feature] <= threshold` go left.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tree {
    pub nodes: Vec<TreeNode>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> f64 {
        let mut i = 0;
        loop {
            match &self.nodes[i] {
                TreeNode::Leaf { value } => return *value,
                TreeNode::Split {
                    feature,
                    threshold,
                    left,
                    right,
                } => {
                    i = if x[*feature] <= *threshold { *left } else { *right };
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GbtModel {
    pub n_classes: usize,
    pub feature_names: Vec<String>,
    pub config: GbtConfig,
    /// `trees[round][class]`.
    pub trees: Vec<Vec<Tree>>,
}

fn softmax_rows(scores: &[Vec<f64>]) -> Vec<Vec<f64>> {
    scores
        .iter()
        .map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&s| (s - m).exp()).collect();
            let z: f64 = exps.iter().sum();
            exps.iter().map(|&e| e / z).collect()
        })
        .collect()
}

struct SplitChoice {
    feature: usize,
    threshold: f64,
    gain: f64,
}

/// Exact greedy split search. Gain ties resolve toward the lower feature
/// index, then the lower threshold, because candidates are scanned in that
/// order and only strictly better gains replace the incumbent.
fn best_split(
    xs: &[Vec<f64>],
    idx: &[usize],
    grad: &[f64],
    hess: &[f64],
    lambda: f64,
) -> Option<SplitChoice> {
    let n_features = xs[0].len();
    let total_g: f64 = idx.iter().map(|&i| grad[i]).sum();
    let total_h: f64 = idx.iter().map(|&i| hess[i]).sum();
    let parent_obj = total_g * total_g / (total_h + lambda);
    let mut best: Option<SplitChoice> = None;
    for f in 0..n_features {
        let mut order: Vec<usize> = idx.to_vec();
        order.sort_by(|&a, &b| xs[a][f].partial_cmp(&xs[b][f]).unwrap());
        let mut gl = 0.0;
        let mut hl = 0.0;
        for w in 0..order.len() - 1 {
            let i = order[w];
            gl += grad[i];
            hl += hess[i];
            let v = xs[i][f];
            let v_next = xs[order[w + 1]][f];
            if v == v_next {
                continue;
            }
            let threshold = v + (v_next - v) / 2.0;
            let gr = total_g - gl;
            let hr = total_h - hl;
            let gain =
                gl * gl / (hl + lambda) + gr * gr / (hr + lambda) - parent_obj;
            if gain > best.as_ref().map_or(1e-12, |b| b.gain) {
                best = Some(SplitChoice {
                    feature: f,
                    threshold,
                    gain,
                });
            }
        }
    }
    best
}

fn build_tree(
    xs: &[Vec<f64>],
    idx: Vec<usize>,
    grad: &[f64],
    hess: &[f64],
    depth_left: usize,
    lambda: f64,
    nodes: &mut Vec<TreeNode>,
) -> usize {
    let make_leaf = |nodes: &mut Vec<TreeNode>, idx: &[usize]| {
        let g: f64 = idx.iter().map(|&i| grad[i]).sum();
        let h: f64 = idx.iter().map(|&i| hess[i]).sum();
        nodes.push(TreeNode::Leaf {
            value: -g / (h + lambda),
        });
        nodes.len() - 1
    };
    if depth_left == 0 || idx.len() < 2 {
        return make_leaf(nodes, &idx);
    }
    let Some(split) = best_split(xs, &idx, grad, hess, lambda) else {
        return make_leaf(nodes, &idx);
    };
    let (li, ri): (Vec<usize>, Vec<usize>) = idx
        .into_iter()
        .partition(|&i| xs[i][split.feature] <= split.threshold);
    let me = nodes.len();
    nodes.push(TreeNode::Leaf { value: 0.0 }); // placeholder
    let left = build_tree(xs, li, grad, hess, depth_left - 1, lambda, nodes);
    let right = build_tree(xs, ri, grad, hess, depth_left - 1, lambda, nodes);
    nodes[me] = TreeNode::Split {
        feature: split.feature,
        threshold: split.threshold,
        left,
        right,
    };
    me
}

/// Multiclass boosting: per round and class, fit a regression tree to the
/// softmax gradient/hessian and add it with the learning rate.
pub fn gbt_train(
    samples: &[(Vec<f64>, usize)],
    feature_names: &[String],
    cfg: &GbtConfig,
) -> Result<GbtModel, CorpusError> {
    if samples.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let n_features = feature_names.len();
    for (i, (x, _)) in samples.iter().enumerate() {
        if x.len() != n_features {
            return Err(CorpusError::FeatureLength {
                index: i,
                expected: n_features,
                actual: x.len(),
            });
        }
    }
    let classes: BTreeSet<usize> = samples.iter().map(|&(_, c)| c).collect();
    if classes.len() < 2 {
        return Err(CorpusError::SingleClass);
    }
    let n_classes = classes.iter().max().unwrap() + 1;
    if cfg.rounds == 0 || cfg.max_depth == 0 {
        return Err(CorpusError::Config("rounds and max_depth must be >= 1".into()));
    }

    // deterministic sample order: sort by (features, class) so shuffled
    // input produces the identical model
    let mut order: Vec<usize> = (0..samples.len()).collect();
    order.sort_by(|&a, &b| {
        samples[a]
            .0
            .partial_cmp(&samples[b].0)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(samples[a].1.cmp(&samples[b].1))
    });
    let xs: Vec<Vec<f64>> = order.iter().map(|&i| samples[i].0.clone()).collect();
    let ys: Vec<usize> = order.iter().map(|&i| samples[i].1).collect();

    let n = xs.len();
    let mut scores = vec![vec![0.0f64; n_classes]; n];
    let mut trees = Vec::with_capacity(cfg.rounds);
    let all_idx: Vec<usize> = (0..n).collect();
    for _ in 0..cfg.rounds {
        let probs = softmax_rows(&scores);
        let mut round_trees = Vec::with_capacity(n_classes);
        for c in 0..n_classes {
            let grad: Vec<f64> = (0..n)
                .map(|i| probs[i][c] - if ys[i] == c { 1.0 } else { 0.0 })
                .collect();
            let hess: Vec<f64> = (0..n).map(|i| probs[i][c] * (1.0 - probs[i][c])).collect();
            let mut nodes = Vec::new();
            build_tree(
                &xs,
                all_idx.clone(),
                &grad,
                &hess,
                cfg.max_depth,
                cfg.lambda,
                &mut nodes,
            );
            let tree = Tree { nodes };
            for (i, row) in scores.iter_mut().enumerate() {
                row[c] += cfg.learning_rate * tree.predict(&xs[i]);
            }
            round_trees.push(tree);
        }
        trees.push(round_trees);
    }
    Ok(GbtModel {
        n_classes,
        feature_names: feature_names.to_vec(),
        config: cfg.clone(),
        trees,
    })
}

impl GbtModel {
    pub fn scores(&self, x: &[f64]) -> Vec<f64> {
        let mut s = vec![0.0f64; self.n_classes];
        for round in &self.trees {
            for (c, tree) in round.iter().enumerate() {
                s[c] += self.config.learning_rate * tree.predict(x);
            }
        }
        s
    }

    /// Softmax over accumulated scores; sums to 1.
    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        softmax_rows(&[self.scores(x)]).remove(0)
    }

    pub fn predict_class(&self, x: &[f64]) -> usize {
        let p = self.predict_proba(x);
        p.iter()
            .enumerate()
            .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .map(|(i, _)| i)
            .unwrap()
    }
}

// ---------------------------------------------------------------------------
// Validation metrics
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ValidationReport {
    /// `confusion[actual][predicted]`.
    pub confusion: Vec<Vec<usize>>,
    pub per_class_precision: Vec<f64>,
    pub per_class_recall: Vec<f64>,
    pub per_class_f1: Vec<f64>,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
}

/// Macro-averaged precision/recall/F1 plus the full confusion matrix. A
/// class never predicted gets precision 0; a class absent from the holdout
/// gets recall 0.
pub fn gbt_validate(
    model: &GbtModel,
    holdout: &[(Vec<f64>, usize)],
) -> Result<ValidationReport, CorpusError> {
    if holdout.is_empty() {
        return Err(CorpusError::EmptyDataset);
    }
    let k = model.n_classes;
    let mut confusion = vec![vec![0usize; k]; k];
    for (i, (x, y)) in holdout.iter().enumerate() {
        if *y >= k {
            return Err(CorpusError::ClassOutOfRange {
                label: *y,
                classes: k,
            });
        }
        if x.len() != model.feature_names.len() {
            return Err(CorpusError::FeatureLength {
                index: i,
                expected: model.feature_names.len(),
                actual: x.len(),
            });
        }
        confusion[*y][model.predict_class(x)] += 1;
    }
    let mut precision = vec![0.0; k];
    let mut recall = vec![0.0; k];
    let mut f1 = vec![0.0; k];
    for c in 0..k {
        let tp = confusion[c][c] as f64;
        let pred: f64 = (0..k).map(|a| confusion[a][c] as f64).sum();
        let actual: f64 = confusion[c].iter().map(|&v| v as f64).sum();
        precision[c] = if pred > 0.0 { tp / pred } else { 0.0 };
        recall[c] = if actual > 0.0 { tp / actual } else { 0.0 };
        f1[c] = if precision[c] + recall[c] > 0.0 {
            2.0 * precision[c] * recall[c] / (precision[c] + recall[c])
        } else {
            0.0
        };
    }
    let kf = k as f64;
    Ok(ValidationReport {
        macro_precision: precision.iter().sum::<f64>() / kf,
        macro_recall: recall.iter().sum::<f64>() / kf,
        macro_f1: f1.iter().sum::<f64>() / kf,
        per_class_precision: precision,
        per_class_recall: recall,
        per_class_f1: f1,
        confusion,
    })
}

// ---------------------------------------------------------------------------
// Quality gate & pipeline
// ---------------------------------------------------------------------------

pub const HIGH_CLASS: usize = 0;
pub const MEDIUM_CLASS: usize = 1;
pub const LOW_CLASS: usize = 2;
pub const DEFAULT_QUALITY_THRESHOLD: f64 = 0.90;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Kept,
    Excluded,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualityProbs {
    pub high: f64,
    pub medium: f64,
    pub low: f64,
}

/// Kept iff the high-class probability strictly exceeds the threshold.
pub fn gate_with_threshold(probs: &QualityProbs, threshold: f64) -> Decision {
    if probs.high > threshold {
        Decision::Kept
    } else {
        Decision::Excluded
    }
}

pub fn gate(probs: &QualityProbs) -> Decision {
    gate_with_threshold(probs, DEFAULT_QUALITY_THRESHOLD)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct InputDoc {
    pub id: String,
    pub text: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct QualityRecord {
    pub doc_id: String,
    pub text: String,
    pub features: Vec<f64>,
    pub probs: QualityProbs,
    pub decision: Decision,
}

/// Clean, featurize, classify, and gate each document in parallel; output
/// order equals input order. Documents that are empty after cleaning are
/// returned as errors keyed by position.
pub fn process_documents(
    docs: &[InputDoc],
    registry: &FeatureRegistry,
    model: &GbtModel,
    threshold: f64,
) -> Vec<Result<QualityRecord, CorpusError>> {
    docs.par_iter()
        .map(|doc| {
            if model.feature_names != registry.names() {
                return Err(CorpusError::RegistryMismatch {
                    expected: model.feature_names.clone(),
                    actual: registry.names(),
                });
            }
            let (clean, _) = clean_text(&doc.text);
            let features = extract_features(&clean, registry)?;
            let p = model.predict_proba(&features);
            let probs = QualityProbs {
                high: p.first().copied().unwrap_or(0.0),
                medium: p.get(1).copied().unwrap_or(0.0),
                low: p.get(2).copied().unwrap_or(0.0),
            };
            Ok(QualityRecord {
                doc_id: doc.id.clone(),
                text: clean,
                features,
                decision: gate_with_threshold(&probs, threshold),
                probs,
            })
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Model file
// ---------------------------------------------------------------------------

pub const GBT_MAGIC: &[u8; 4] = b"WGBT";
pub const GBT_VERSION: u32 = 1;

/// Versioned binary model file: magic, version, then the model as JSON. The
/// tree arrays are plain data, so JSON keeps the format inspectable while
/// the magic/version header still rejects foreign files.
pub fn save_gbt<W: Write>(model: &GbtModel, mut w: W) -> Result<(), CorpusError> {
    w.write_all(GBT_MAGIC)?;
    w.write_all(&GBT_VERSION.to_le_bytes())?;
    let body = serde_json::to_vec(model)?;
    w.write_all(&(body.len() as u64).to_le_bytes())?;
    w.write_all(&body)?;
    Ok(())
}

pub fn load_gbt<R: Read>(mut r: R) -> Result<GbtModel, CorpusError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| CorpusError::ModelFile("truncated header".into()))?;
    if &magic != GBT_MAGIC {
        return Err(CorpusError::ModelFile(format!(
            "bad magic {magic:?}, expected {GBT_MAGIC:?}"
        )));
    }
    let mut buf4 = [0u8; 4];
    r.read_exact(&mut buf4)
        .map_err(|_| CorpusError::ModelFile("truncated version".into()))?;
    let version = u32::from_le_bytes(buf4);
    if version != GBT_VERSION {
        return Err(CorpusError::ModelFile(format!(
            "unsupported version {version}, expected {GBT_VERSION}"
        )));
    }
    let mut buf8 = [0u8; 8];
    r.read_exact(&mut buf8)
        .map_err(|_| CorpusError::ModelFile("truncated length".into()))?;
    let len = u64::from_le_bytes(buf8) as usize;
    let mut body = vec![0u8; len];
    r.read_exact(&mut body)
        .map_err(|_| CorpusError::ModelFile("truncated body".into()))?;
    Ok(serde_json::from_slice(&body)?)
}

// ---------------------------------------------------------------------------
// Synthetic benchmark
// ---------------------------------------------------------------------------

/// Three Gaussian clusters in feature space for classifier sanity checks.
/// Cluster means sit `separation` apart per feature block; labels follow the
/// high/medium/low convention.
pub fn synthetic_benchmark(
    n_train: usize,
    n_holdout: usize,
    n_features: usize,
    separation: f64,
    seed: u64,
) -> (Vec<(Vec<f64>, usize)>, Vec<(Vec<f64>, usize)>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Normal::new(0.0, 1.0).unwrap();
    let mut draw = |n: usize| {
        (0..n)
            .map(|i| {
                let class = i % 3;
                let x = (0..n_features)
                    .map(|f| {
                        let mean = if f % 3 == class { separation } else { 0.0 };
                        mean + noise.sample(&mut rng)
                    })
                    .collect();
                (x, class)
            })
            .collect::<Vec<_>>()
    };
    let train = draw(n_train);
    let holdout = draw(n_holdout);
    (train, holdout)
}
