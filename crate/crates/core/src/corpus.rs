//! Corpora, vocabulary and batching.
//!
//! Examples are `(prompt, response)` text pairs. Only response tokens are
//! ever corrupted or supervised; prompt tokens stay visible. Token
//! frequencies are counted over response tokens, which are exactly the
//! positions the analysis pipeline can emit confidences for.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::rng::{self, Stream};

pub const MASK_TOKEN: &str = "[MASK]";
pub const PAD_TOKEN: &str = "[PAD]";
pub const VOCAB_FORMAT_VERSION: u32 = 1;

/// One line of a corpus file.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Example {
    pub prompt: String,
    pub response: String,
}

impl Example {
    pub fn new(prompt: impl Into<String>, response: impl Into<String>) -> Self {
        Example {
            prompt: prompt.into(),
            response: response.into(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    Copy,
    Reverse,
    AdditionCot,
    MiniCountdown,
}

impl std::str::FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "copy" => Ok(Task::Copy),
            "reverse" => Ok(Task::Reverse),
            "addition_cot" => Ok(Task::AdditionCot),
            "mini_countdown" => Ok(Task::MiniCountdown),
            other => Err(Error::Config(format!("unknown task {other:?}"))),
        }
    }
}

/// Shape knobs for the synthetic generators.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TaskParams {
    /// String length for copy/reverse.
    pub length: usize,
    /// Operand digits for addition.
    pub digits: u32,
}

impl Default for TaskParams {
    fn default() -> Self {
        TaskParams { length: 6, digits: 2 }
    }
}

impl Task {
    fn id(self) -> u64 {
        self as u64
    }

    /// The answer a correct response must yield for `prompt`.
    pub fn canonical_answer(self, prompt: &str) -> Option<String> {
        match self {
            Task::Copy => Some(prompt.to_string()),
            Task::Reverse => Some(prompt.chars().rev().collect()),
            Task::AdditionCot => {
                let body = prompt.strip_suffix('=')?;
                let (a, b) = body.split_once('+')?;
                let sum = a.parse::<u64>().ok()? + b.parse::<u64>().ok()?;
                Some(sum.to_string())
            }
            Task::MiniCountdown => {
                let (_, target) = parse_countdown_prompt(prompt)?;
                Some(target.to_string())
            }
        }
    }

    /// The answer carried by a generated response, if it can be read.
    pub fn extract_answer(self, prompt: &str, response: &str) -> Option<String> {
        match self {
            Task::Copy | Task::Reverse => Some(response.to_string()),
            Task::AdditionCot => {
                let (_, tail) = response.rsplit_once("=>")?;
                let digits: String = tail.chars().take_while(|c| c.is_ascii_digit()).collect();
                let v: u64 = digits.parse().ok()?;
                Some(v.to_string())
            }
            Task::MiniCountdown => {
                let (numbers, _) = parse_countdown_prompt(prompt)?;
                let (value, mut used) = eval_expression(response)?;
                let mut expected = numbers;
                used.sort_unstable();
                expected.sort_unstable();
                (used == expected).then(|| value.to_string())
            }
        }
    }

    pub fn is_correct(self, prompt: &str, response: &str) -> bool {
        match (self.canonical_answer(prompt), self.extract_answer(prompt, response)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

fn parse_countdown_prompt(prompt: &str) -> Option<(Vec<i64>, i64)> {
    let body = prompt.strip_suffix(':')?;
    let (nums, target) = body.split_once('|')?;
    let numbers = nums
        .split(',')
        .map(|n| n.parse::<i64>().ok())
        .collect::<Option<Vec<_>>>()?;
    Some((numbers, target.parse().ok()?))
}

/// Evaluates `n (op n)*` with `*` binding tighter than `+`/`-`, returning the
/// value and the operands used.
fn eval_expression(expr: &str) -> Option<(i64, Vec<i64>)> {
    let mut numbers = Vec::new();
    let mut ops = Vec::new();
    let mut cur = String::new();
    for c in expr.chars() {
        if c.is_ascii_digit() {
            cur.push(c);
        } else if matches!(c, '+' | '-' | '*') {
            numbers.push(cur.parse::<i64>().ok()?);
            cur.clear();
            ops.push(c);
        } else {
            return None;
        }
    }
    numbers.push(cur.parse::<i64>().ok()?);
    // fold products first
    let mut terms = vec![numbers[0]];
    let mut signs = vec!['+'];
    for (op, &n) in ops.iter().zip(&numbers[1..]) {
        if *op == '*' {
            let last = terms.last_mut()?;
            *last = last.checked_mul(n)?;
        } else {
            terms.push(n);
            signs.push(*op);
        }
    }
    let value = terms
        .iter()
        .zip(&signs)
        .map(|(t, s)| if *s == '-' { -t } else { *t })
        .sum();
    Some((value, numbers))
}

fn addition_example(rng: &mut impl Rng, digits: u32) -> Example {
    let lo = 10u64.pow(digits - 1);
    let hi = 10u64.pow(digits);
    let a = rng.random_range(lo..hi);
    let b = rng.random_range(lo..hi);
    let da: Vec<u64> = (0..digits).map(|i| (a / 10u64.pow(i)) % 10).collect();
    let db: Vec<u64> = (0..digits).map(|i| (b / 10u64.pow(i)) % 10).collect();
    let mut carry = 0;
    let mut steps = Vec::new();
    for i in 0..digits as usize {
        let s = da[i] + db[i] + carry;
        steps.push(format!("{}+{}+{}={:02}", da[i], db[i], carry, s));
        carry = s / 10;
    }
    let width = digits as usize + 1;
    Example::new(
        format!("{a}+{b}="),
        format!("{}=>{:0width$}", steps.join(","), a + b),
    )
}

fn countdown_example(rng: &mut impl Rng) -> Example {
    loop {
        let nums: Vec<i64> = (0..3).map(|_| rng.random_range(1..10)).collect();
        let ops: Vec<char> = (0..2).map(|_| ['+', '-', '*'][rng.random_range(0..3)]).collect();
        let mut order = nums.clone();
        order.shuffle(rng);
        let expr = format!("{}{}{}{}{}", order[0], ops[0], order[1], ops[1], order[2]);
        let (value, _) = eval_expression(&expr).expect("well-formed");
        if (0..100).contains(&value) {
            let listed: Vec<String> = nums.iter().map(|n| n.to_string()).collect();
            return Example::new(format!("{}|{}:", listed.join(","), value), expr);
        }
    }
}

fn letters(rng: &mut impl Rng, n: usize) -> String {
    (0..n).map(|_| (b'a' + rng.random_range(0..26u8)) as char).collect()
}

/// `count` distinct-prompt examples of `task`, deterministic in `seed`.
pub fn generate_synthetic(task: Task, count: usize, seed: u64) -> Result<Vec<Example>> {
    generate_synthetic_with(task, count, seed, TaskParams::default())
}

pub fn generate_synthetic_with(
    task: Task,
    count: usize,
    seed: u64,
    params: TaskParams,
) -> Result<Vec<Example>> {
    if count == 0 {
        return Err(Error::Config("count must be at least 1".into()));
    }
    if params.length == 0 || params.digits == 0 || params.digits > 9 {
        return Err(Error::Config(format!("invalid task parameters {params:?}")));
    }
    let mut rng = rng::stream(seed, Stream::Corpus, &[task.id()]);
    let mut seen = HashSet::new();
    let mut out = Vec::with_capacity(count);
    let mut attempts = 0usize;
    while out.len() < count {
        attempts += 1;
        if attempts > count * 50 + 1000 {
            return Err(Error::Config(format!(
                "cannot draw {count} distinct {task:?} examples with {params:?}"
            )));
        }
        let ex = match task {
            Task::Copy => {
                let s = letters(&mut rng, params.length);
                Example::new(s.clone(), s)
            }
            Task::Reverse => {
                let s = letters(&mut rng, params.length);
                let r: String = s.chars().rev().collect();
                Example::new(s, r)
            }
            Task::AdditionCot => addition_example(&mut rng, params.digits),
            Task::MiniCountdown => countdown_example(&mut rng),
        };
        if seen.insert(ex.prompt.clone()) {
            out.push(ex);
        }
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tokenization {
    #[default]
    Char,
    /// Alternating runs of whitespace and non-whitespace, so joining the
    /// tokens reproduces the input exactly.
    Whitespace,
}

pub fn tokenize(s: &str, how: Tokenization) -> Vec<String> {
    match how {
        Tokenization::Char => s.chars().map(String::from).collect(),
        Tokenization::Whitespace => {
            let mut out: Vec<String> = Vec::new();
            let mut prev_ws: Option<bool> = None;
            for c in s.chars() {
                let ws = c.is_whitespace();
                match (prev_ws, out.last_mut()) {
                    (Some(p), Some(last)) if p == ws => last.push(c),
                    _ => out.push(c.to_string()),
                }
                prev_ws = Some(ws);
            }
            out
        }
    }
}

pub fn detokenize<S: AsRef<str>>(tokens: &[S]) -> String {
    tokens.iter().map(|t| t.as_ref()).collect()
}

/// Encoded example: prompt ids followed by response ids, optionally padded.
#[derive(Clone, Debug, PartialEq, Eq, Hash)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub prompt_len: usize,
    pub response_len: usize,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, prompt_len: usize, response_len: usize) -> Result<Self> {
        if response_len == 0 || prompt_len + response_len > ids.len() {
            return Err(Error::Input(format!(
                "bad spans: prompt {prompt_len}, response {response_len}, len {}",
                ids.len()
            )));
        }
        Ok(TokenSequence {
            ids,
            prompt_len,
            response_len,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Prompt plus response, excluding padding.
    pub fn content_len(&self) -> usize {
        self.prompt_len + self.response_len
    }

    pub fn response_range(&self) -> std::ops::Range<usize> {
        self.prompt_len..self.prompt_len + self.response_len
    }

    pub fn response_ids(&self) -> &[usize] {
        &self.ids[self.response_range()]
    }

    pub fn padded(&self, len: usize, pad_id: usize) -> TokenSequence {
        let mut ids = self.ids[..self.content_len()].to_vec();
        ids.resize(len.max(self.content_len()), pad_id);
        TokenSequence {
            ids,
            prompt_len: self.prompt_len,
            response_len: self.response_len,
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct VocabFile {
    version: u32,
    tokenization: Tokenization,
    tokens: Vec<String>,
    mask_id: usize,
    pad_id: usize,
    frequency: Vec<u64>,
}

#[derive(Clone, Debug)]
pub struct Vocabulary {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
    mask_id: usize,
    pad_id: usize,
    frequency: Vec<u64>,
    tokenization: Tokenization,
}

impl PartialEq for Vocabulary {
    fn eq(&self, other: &Self) -> bool {
        self.tokens == other.tokens
            && self.mask_id == other.mask_id
            && self.pad_id == other.pad_id
            && self.frequency == other.frequency
            && self.tokenization == other.tokenization
    }
}

impl Vocabulary {
    /// Builds the vocabulary of `corpus`. Data tokens are sorted, followed by
    /// `[MASK]` and `[PAD]`; frequencies count response tokens.
    pub fn build(corpus: &[Example], tokenization: Tokenization) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::Ingestion("empty corpus".into()));
        }
        let mut set = BTreeSet::new();
        let mut counts: HashMap<String, u64> = HashMap::new();
        for ex in corpus {
            for t in tokenize(&ex.prompt, tokenization) {
                set.insert(t);
            }
            for t in tokenize(&ex.response, tokenization) {
                *counts.entry(t.clone()).or_default() += 1;
                set.insert(t);
            }
        }
        if set.contains(MASK_TOKEN) || set.contains(PAD_TOKEN) {
            return Err(Error::Ingestion("corpus contains a reserved token".into()));
        }
        let mut tokens: Vec<String> = set.into_iter().collect();
        let frequency = tokens
            .iter()
            .map(|t| counts.get(t).copied().unwrap_or(0))
            .chain([0, 0])
            .collect();
        tokens.push(MASK_TOKEN.into());
        tokens.push(PAD_TOKEN.into());
        Self::from_parts(tokens, frequency, tokenization)
    }

    fn from_parts(tokens: Vec<String>, frequency: Vec<u64>, tokenization: Tokenization) -> Result<Self> {
        let index: HashMap<String, usize> =
            tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        if index.len() != tokens.len() || frequency.len() != tokens.len() {
            return Err(Error::Ingestion("duplicate tokens or frequency length mismatch".into()));
        }
        let mask_id = *index
            .get(MASK_TOKEN)
            .ok_or_else(|| Error::Ingestion("vocabulary lacks [MASK]".into()))?;
        let pad_id = *index
            .get(PAD_TOKEN)
            .ok_or_else(|| Error::Ingestion("vocabulary lacks [PAD]".into()))?;
        Ok(Vocabulary {
            tokens,
            index,
            mask_id,
            pad_id,
            frequency,
            tokenization,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn mask_id(&self) -> usize {
        self.mask_id
    }

    pub fn pad_id(&self) -> usize {
        self.pad_id
    }

    pub fn tokenization(&self) -> Tokenization {
        self.tokenization
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn frequency(&self) -> &[u64] {
        &self.frequency
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn encode_text(&self, s: &str) -> Result<Vec<usize>> {
        tokenize(s, self.tokenization)
            .into_iter()
            .map(|t| {
                self.id(&t)
                    .filter(|&i| i != self.mask_id && i != self.pad_id)
                    .ok_or_else(|| Error::Input(format!("token {t:?} not in vocabulary")))
            })
            .collect()
    }

    pub fn encode(&self, ex: &Example) -> Result<TokenSequence> {
        let mut ids = self.encode_text(&ex.prompt)?;
        let prompt_len = ids.len();
        ids.extend(self.encode_text(&ex.response)?);
        let response_len = ids.len() - prompt_len;
        if response_len == 0 {
            return Err(Error::Ingestion(format!("empty response for prompt {:?}", ex.prompt)));
        }
        TokenSequence::new(ids, prompt_len, response_len)
    }

    pub fn encode_all(&self, corpus: &[Example]) -> Result<Vec<TokenSequence>> {
        corpus.iter().map(|e| self.encode(e)).collect()
    }

    /// Renders ids back to text; `[MASK]` renders as `_` and padding is dropped.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .filter(|&&i| i != self.pad_id)
            .map(|&i| {
                if i == self.mask_id {
                    "_"
                } else {
                    self.token(i).unwrap_or("?")
                }
            })
            .collect()
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(&self.to_file()).expect("serializable");
        hex::encode(Sha256::digest(json))
    }

    fn to_file(&self) -> VocabFile {
        VocabFile {
            version: VOCAB_FORMAT_VERSION,
            tokenization: self.tokenization,
            tokens: self.tokens.clone(),
            mask_id: self.mask_id,
            pad_id: self.pad_id,
            frequency: self.frequency.clone(),
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(&self.to_file()).expect("serializable")
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let f: VocabFile = serde_json::from_str(s)?;
        if f.version != VOCAB_FORMAT_VERSION {
            return Err(Error::Ingestion(format!("unsupported vocabulary version {}", f.version)));
        }
        let v = Self::from_parts(f.tokens, f.frequency, f.tokenization)?;
        if v.mask_id != f.mask_id || v.pad_id != f.pad_id {
            return Err(Error::Ingestion("special token ids disagree with token list".into()));
        }
        Ok(v)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Sequences padded to a common length.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub sequences: Vec<TokenSequence>,
    pub seed: u64,
}

impl Batch {
    pub fn from_sequences(seqs: &[TokenSequence], pad_id: usize, seed: u64) -> Self {
        let len = seqs.iter().map(TokenSequence::content_len).max().unwrap_or(0);
        Batch {
            sequences: seqs.iter().map(|s| s.padded(len, pad_id)).collect(),
            seed,
        }
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn seq_len(&self) -> usize {
        self.sequences.first().map_or(0, TokenSequence::len)
    }
}

/// Example order for `epoch`: a seeded permutation of `0..n`.
pub fn epoch_order(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(seed, Stream::DataOrder, &[epoch]));
    order
}

/// Batches for one epoch; the final partial batch is kept.
pub fn make_batches(
    data: &[TokenSequence],
    batch_size: usize,
    shuffle_seed: u64,
    epoch: u64,
    pad_id: usize,
) -> Result<Vec<Batch>> {
    if data.is_empty() {
        return Err(Error::Ingestion("no sequences to batch".into()));
    }
    if batch_size == 0 {
        return Err(Error::Config("batch_size must be at least 1".into()));
    }
    let order = epoch_order(data.len(), shuffle_seed, epoch);
    Ok(order
        .chunks(batch_size)
        .map(|idx| {
            let seqs: Vec<TokenSequence> = idx.iter().map(|&i| data[i].clone()).collect();
            Batch::from_sequences(&seqs, pad_id, shuffle_seed)
        })
        .collect())
}

/// Drops examples whose prompt + response exceeds `max_len` tokens.
pub fn filter_max_len(data: Vec<TokenSequence>, max_len: Option<usize>) -> Vec<TokenSequence> {
    match max_len {
        Some(m) => data.into_iter().filter(|s| s.content_len() <= m).collect(),
        None => data,
    }
}

pub fn read_jsonl(path: &Path) -> Result<Vec<Example>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let ex: Example = serde_json::from_str(&line)
            .map_err(|e| Error::Ingestion(format!("{}:{}: {e}", path.display(), i + 1)))?;
        out.push(ex);
    }
    Ok(out)
}

/// Plain text: every non-blank line is a prompt-less example.
pub fn read_text(path: &Path) -> Result<Vec<Example>> {
    let text = std::fs::read_to_string(path)?;
    Ok(text
        .lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Example::new("", l))
        .collect())
}

/// Reads `.jsonl` files as corpus records and anything else as plain text.
pub fn read_corpus(path: &Path) -> Result<Vec<Example>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("jsonl") => read_jsonl(path),
        _ => read_text(path),
    }
}

pub fn write_jsonl(path: &Path, data: &[Example]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for ex in data {
        serde_json::to_writer(&mut w, ex)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// SHA-256 over the corpus in its JSON-lines form.
pub fn corpus_hash(data: &[Example]) -> String {
    let mut h = Sha256::new();
    for ex in data {
        h.update(serde_json::to_vec(ex).expect("serializable"));
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}
