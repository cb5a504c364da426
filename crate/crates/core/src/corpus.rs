//! Multi-task text ingestion, tokenization, and cross-task frequency statistics.
//!
//! Corpus files are UTF-8 JSON lines, one flat object per record:
//!
//! ```text
//! {"task_id": 1, "text": "The bank froze my account", "label": "fraud"}
//! ```
//!
//! An optional `"split"` key (`"train"` or `"eval"`) pins a record to a split.
//! When a task carries no split markers at all, every fifth record is held out
//! for evaluation.

use std::collections::{BTreeMap, BTreeSet, HashMap, HashSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = usize;

/// Left-padding id for short contexts.
pub const PAD: TokenId = 0;
/// Out-of-vocabulary id.
pub const UNK: TokenId = 1;

pub const PAD_SURFACE: &str = "<pad>";
pub const UNK_SURFACE: &str = "<unk>";

/// Default cap on corpus-built vocabulary types (labels always fit; PAD and UNK are extra).
pub const DEFAULT_VOCAB_CAP: usize = 2048;

/// Default salience threshold for the support count.
pub const DEFAULT_TAU: f64 = 0.2;

const BUNDLED_STOPWORDS: &str = include_str!("../data/stopwords.txt");

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Token {
    pub id: TokenId,
    pub surface: String,
}

/// Lowercased word splitter: runs of alphanumeric characters form words, every
/// other non-whitespace character is its own token.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut word = String::new();
    for ch in text.chars() {
        if ch.is_alphanumeric() {
            word.extend(ch.to_lowercase());
            continue;
        }
        if !word.is_empty() {
            out.push(std::mem::take(&mut word));
        }
        if !ch.is_whitespace() {
            out.push(ch.to_lowercase().collect());
        }
    }
    if !word.is_empty() {
        out.push(word);
    }
    out
}

/// Normalized surface form of a class label: lowercased, inner whitespace joined by `_`.
pub fn label_surface(label: &str) -> String {
    label
        .split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join("_")
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    surfaces: Vec<String>,
    index: HashMap<String, TokenId>,
}

impl Vocabulary {
    /// Builds a vocabulary from raw texts and label strings.
    ///
    /// Ids 0 and 1 are PAD and UNK. Label surfaces come next (sorted), then
    /// words by descending frequency with lexical tie-break, up to `cap` types
    /// in total beyond PAD/UNK.
    pub fn build<'a, T, L>(texts: T, labels: L, cap: usize) -> Self
    where
        T: IntoIterator<Item = &'a str>,
        L: IntoIterator<Item = &'a str>,
    {
        let labels: BTreeSet<String> = labels.into_iter().map(label_surface).collect();
        let mut counts: HashMap<String, usize> = HashMap::new();
        for text in texts {
            for w in split_words(text) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts
            .into_iter()
            .filter(|(w, _)| !labels.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));

        let mut surfaces = vec![PAD_SURFACE.to_string(), UNK_SURFACE.to_string()];
        surfaces.extend(labels);
        let room = cap.saturating_sub(surfaces.len() - 2);
        surfaces.extend(words.into_iter().take(room).map(|(w, _)| w));
        Self::from_surfaces(surfaces)
    }

    fn from_surfaces(surfaces: Vec<String>) -> Self {
        let index = surfaces
            .iter()
            .enumerate()
            .map(|(i, s)| (s.clone(), i))
            .collect();
        Self { surfaces, index }
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<TokenId> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: TokenId) -> &str {
        self.surfaces.get(id).map_or(UNK_SURFACE, String::as_str)
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }

    /// Deterministic tokenization; words outside the vocabulary map to UNK.
    pub fn tokenize(&self, text: &str) -> Vec<Token> {
        split_words(text)
            .into_iter()
            .map(|w| {
                let id = self.id(&w).unwrap_or(UNK);
                Token { id, surface: w }
            })
            .collect()
    }

    pub fn label_id(&self, label: &str) -> Option<TokenId> {
        self.id(&label_surface(label))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedSequence {
    /// Unique within a corpus (the record index).
    pub id: usize,
    pub task_id: u32,
    /// Text tokens followed by the label token.
    pub tokens: Vec<TokenId>,
}

impl TokenizedSequence {
    pub fn new(id: usize, task_id: u32, mut text: Vec<TokenId>, label_token: TokenId) -> Self {
        text.push(label_token);
        Self {
            id,
            task_id,
            tokens: text,
        }
    }

    pub fn label_token(&self) -> TokenId {
        *self.tokens.last().expect("sequence always holds its label")
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskCorpus {
    pub task_id: u32,
    pub train: Vec<TokenizedSequence>,
    pub eval: Vec<TokenizedSequence>,
    pub label_set: BTreeSet<TokenId>,
}

impl TaskCorpus {
    pub fn len(&self) -> usize {
        self.train.len() + self.eval.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

/// One line of a corpus file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub task_id: u32,
    pub text: String,
    pub label: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<Split>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CorpusFormat {
    /// One JSON object per line.
    JsonLines,
}

/// A tokenized multi-task corpus sharing one vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub vocab: Vocabulary,
    pub tasks: Vec<TaskCorpus>,
}

impl Corpus {
    pub fn from_records(records: &[CorpusRecord], vocab_cap: usize) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("no records".into()));
        }
        let vocab = Vocabulary::build(
            records.iter().map(|r| r.text.as_str()),
            records.iter().map(|r| r.label.as_str()),
            vocab_cap,
        );

        let mut by_task: BTreeMap<u32, Vec<(usize, &CorpusRecord)>> = BTreeMap::new();
        for (i, r) in records.iter().enumerate() {
            by_task.entry(r.task_id).or_default().push((i, r));
        }

        let mut tasks = Vec::with_capacity(by_task.len());
        for (task_id, recs) in by_task {
            if recs.iter().all(|(_, r)| split_words(&r.text).is_empty()) {
                return Err(Error::Data(format!("task {task_id} is empty")));
            }
            let explicit = recs.iter().any(|(_, r)| r.split.is_some());
            let mut task = TaskCorpus {
                task_id,
                train: Vec::new(),
                eval: Vec::new(),
                label_set: BTreeSet::new(),
            };
            for (k, (i, r)) in recs.iter().enumerate() {
                let label = vocab
                    .label_id(&r.label)
                    .expect("labels are always in the vocabulary");
                task.label_set.insert(label);
                let text = vocab.tokenize(&r.text).into_iter().map(|t| t.id).collect();
                let seq = TokenizedSequence::new(*i, task_id, text, label);
                let split = match r.split {
                    Some(s) => s,
                    None if !explicit && recs.len() >= 5 && k % 5 == 4 => Split::Eval,
                    None => Split::Train,
                };
                match split {
                    Split::Train => task.train.push(seq),
                    Split::Eval => task.eval.push(seq),
                }
            }
            tasks.push(task);
        }
        Ok(Self { vocab, tasks })
    }

    pub fn task(&self, task_id: u32) -> Option<&TaskCorpus> {
        self.tasks.iter().find(|t| t.task_id == task_id)
    }

    pub fn task_ids(&self) -> Vec<u32> {
        self.tasks.iter().map(|t| t.task_id).collect()
    }
}

fn parse_record(path: &Path, line_no: usize, line: &str) -> Result<CorpusRecord> {
    let malformed = |message: String| Error::MalformedRecord {
        path: path.to_path_buf(),
        line: line_no,
        message,
    };
    let value: serde_json::Value =
        serde_json::from_str(line).map_err(|e| malformed(e.to_string()))?;
    let obj = value
        .as_object()
        .ok_or_else(|| malformed("record is not an object".into()))?;
    for key in obj.keys() {
        if !matches!(key.as_str(), "task_id" | "text" | "label" | "split") {
            return Err(malformed(format!("unknown field `{key}`")));
        }
    }
    let task_id = obj
        .get("task_id")
        .and_then(serde_json::Value::as_u64)
        .and_then(|v| u32::try_from(v).ok())
        .ok_or_else(|| malformed("missing or invalid `task_id` (expected a non-negative integer)".into()))?;
    let text = obj
        .get("text")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| malformed("missing or non-string `text`".into()))?;
    let label = obj
        .get("label")
        .and_then(serde_json::Value::as_str)
        .ok_or_else(|| malformed("missing or non-string `label`".into()))?;
    if label_surface(label).is_empty() {
        return Err(malformed("empty `label`".into()));
    }
    let split = match obj.get("split") {
        None => None,
        Some(v) => Some(
            serde_json::from_value(v.clone())
                .map_err(|_| malformed("`split` must be \"train\" or \"eval\"".into()))?,
        ),
    };
    Ok(CorpusRecord {
        task_id,
        text: text.to_string(),
        label: label.to_string(),
        split,
    })
}

pub fn read_records(path: &Path, format: CorpusFormat) -> Result<Vec<CorpusRecord>> {
    let CorpusFormat::JsonLines = format;
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    raw.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| parse_record(path, i + 1, l))
        .collect()
}

/// Loads and tokenizes a corpus file into one [`TaskCorpus`] per distinct task id.
pub fn load_corpus(path: &Path, format: CorpusFormat, vocab_cap: usize) -> Result<Corpus> {
    let records = read_records(path, format)?;
    if records.is_empty() {
        return Err(Error::Data(format!("{}: no records", path.display())));
    }
    Corpus::from_records(&records, vocab_cap)
}

pub fn write_records(path: &Path, records: &[CorpusRecord]) -> Result<()> {
    let mut out = String::new();
    for r in records {
        out.push_str(&serde_json::to_string(r).expect("records serialize"));
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StopwordSet {
    words: HashSet<String>,
}

impl StopwordSet {
    /// The bundled English function-word list.
    pub fn bundled() -> Self {
        Self::parse(BUNDLED_STOPWORDS)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::parse(&raw))
    }

    pub fn parse(raw: &str) -> Self {
        let words = raw
            .lines()
            .map(|l| l.trim().to_lowercase())
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .collect();
        Self { words }
    }

    pub fn empty() -> Self {
        Self {
            words: HashSet::new(),
        }
    }

    pub fn contains(&self, surface: &str) -> bool {
        self.words.contains(surface)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }
}

impl Default for StopwordSet {
    fn default() -> Self {
        Self::bundled()
    }
}

/// Per-task token frequencies with the derived salience and support counts.
#[derive(Debug, Clone, PartialEq)]
pub struct CorpusStats {
    tau: f64,
    task_ids: Vec<u32>,
    counts: Vec<HashMap<TokenId, u64>>,
    max_counts: Vec<u64>,
    support: HashMap<TokenId, usize>,
}

impl CorpusStats {
    pub fn tau(&self) -> f64 {
        self.tau
    }

    pub fn num_tasks(&self) -> usize {
        self.task_ids.len()
    }

    pub fn task_ids(&self) -> &[u32] {
        &self.task_ids
    }

    /// Raw count f_n(t) for the task at position `task_index`.
    pub fn count(&self, task_index: usize, token: TokenId) -> u64 {
        self.counts[task_index].get(&token).copied().unwrap_or(0)
    }

    pub fn max_count(&self, task_index: usize) -> u64 {
        self.max_counts[task_index]
    }

    /// p_n(t) = f_n(t) / max f_n.
    pub fn salience(&self, task_index: usize, token: TokenId) -> f64 {
        self.count(task_index, token) as f64 / self.max_counts[task_index] as f64
    }

    /// d(t): number of tasks with p_n(t) ≥ τ.
    pub fn support(&self, token: TokenId) -> usize {
        self.support.get(&token).copied().unwrap_or(0)
    }
}

/// Counts every training token (text and label) per task and derives p_n and d.
pub fn compute_corpus_stats<'a, I>(corpora: I, tau: f64) -> Result<CorpusStats>
where
    I: IntoIterator<Item = &'a TaskCorpus>,
{
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::InvalidArgument(format!("tau must lie in (0,1), got {tau}")));
    }
    let mut task_ids = Vec::new();
    let mut counts = Vec::new();
    let mut max_counts = Vec::new();
    for task in corpora {
        let mut c: HashMap<TokenId, u64> = HashMap::new();
        for seq in &task.train {
            for &t in &seq.tokens {
                *c.entry(t).or_default() += 1;
            }
        }
        let max = c.values().copied().max().unwrap_or(0);
        if max == 0 {
            return Err(Error::Data(format!("task {} has no tokens", task.task_id)));
        }
        task_ids.push(task.task_id);
        counts.push(c);
        max_counts.push(max);
    }
    if task_ids.is_empty() {
        return Err(Error::InvalidArgument("no tasks to count".into()));
    }
    let mut support: HashMap<TokenId, usize> = HashMap::new();
    for (c, &max) in counts.iter().zip(&max_counts) {
        for (&t, &f) in c {
            if f as f64 / max as f64 >= tau {
                *support.entry(t).or_default() += 1;
            }
        }
    }
    Ok(CorpusStats {
        tau,
        task_ids,
        counts,
        max_counts,
        support,
    })
}
