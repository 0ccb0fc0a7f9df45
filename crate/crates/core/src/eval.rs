//! Task evaluation: exact match, unbiased pass@k and avg@k.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{Example, Task, Vocabulary};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::rng::{self, Stream};
use crate::sampler::{self, DecodeConfig, SpecialIds};

/// Probability that at least one of `k` draws without replacement from `n`
/// samples (`c` correct) is correct: `1 - C(n-c, k) / C(n, k)`, evaluated
/// as a product of ratios in log space.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n || k == 0 || k > n {
        return Err(Error::Contract(format!("pass_at_k needs 0 <= c <= n and 1 <= k <= n, got n={n} c={c} k={k}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i=n-c+1}^{n} (1 - k / i)
    let log_ratio: f64 = (n - c + 1..=n).map(|i| (1.0 - k as f64 / i as f64).ln()).sum();
    Ok(1.0 - log_ratio.exp())
}

/// Mean correctness over the `n` samples of one prompt.
pub fn avg_at_k(n: usize, c: usize) -> Result<f64> {
    if n == 0 || c > n {
        return Err(Error::Contract(format!("avg_at_k needs 0 <= c <= n, n >= 1; got n={n} c={c}")));
    }
    Ok(c as f64 / n as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub prompt: String,
    pub generations: Vec<String>,
    pub canonical_answer: Option<String>,
    pub extracted: Vec<Option<String>>,
    /// Whether the first sample is correct.
    pub correct: bool,
    pub num_correct: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: Task,
    pub seed: u64,
    pub samples_per_prompt: usize,
    pub decode: DecodeConfig,
    pub accuracy: f64,
    pub pass_at_k: BTreeMap<usize, f64>,
    pub avg_at_k: BTreeMap<usize, f64>,
    pub examples: Vec<EvalRecord>,
}

/// Summary over per-prompt correct counts.
pub fn summarize(counts: &[usize], n: usize, k_list: &[usize]) -> Result<(BTreeMap<usize, f64>, BTreeMap<usize, f64>)> {
    let mut pass = BTreeMap::new();
    let mut avg = BTreeMap::new();
    let m = counts.len().max(1) as f64;
    for &k in k_list {
        let p = counts.iter().map(|&c| pass_at_k(n, c, k)).sum::<Result<f64>>()?;
        let a = counts.iter().map(|&c| avg_at_k(n, c)).sum::<Result<f64>>()?;
        pass.insert(k, p / m);
        avg.insert(k, a / m);
    }
    Ok((pass, avg))
}

/// Decodes `max(k_list)` samples per prompt and scores them with the task's
/// extractor. Prompts are decoded in batches of `batch_size`; batches run
/// on the current rayon pool.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    model: &Denoiser,
    vocab: &Vocabulary,
    task: Task,
    eval_set: &[Example],
    cfg: &DecodeConfig,
    k_list: &[usize],
    seed: u64,
    batch_size: usize,
) -> Result<EvalReport> {
    cfg.validate()?;
    let k_list: Vec<usize> = if k_list.is_empty() { vec![1] } else { k_list.to_vec() };
    if k_list.contains(&0) {
        return Err(Error::Config("k values must be at least 1".into()));
    }
    let n = *k_list.iter().max().expect("non-empty");
    if n > 1 && cfg.temperature == 0.0 {
        return Err(Error::Config(format!(
            "{n} samples per prompt at temperature 0 would be identical; set temperature > 0"
        )));
    }
    if eval_set.is_empty() {
        return Err(Error::Ingestion("evaluation set is empty".into()));
    }
    let ids = SpecialIds {
        mask_id: vocab.mask_id(),
        pad_id: vocab.pad_id(),
    };
    let prompts: Vec<Vec<usize>> = eval_set.iter().map(|e| vocab.encode_text(&e.prompt)).collect::<Result<_>>()?;
    let bs = batch_size.max(1);
    let chunks: Vec<(usize, &[Vec<usize>])> = prompts.chunks(bs).enumerate().map(|(i, c)| (i * bs, c)).collect();
    // generations[prompt][sample]
    let per_chunk: Vec<Vec<Vec<Vec<usize>>>> = chunks
        .par_iter()
        .map(|&(start, chunk)| {
            let mut by_prompt = vec![Vec::with_capacity(n); chunk.len()];
            for s in 0..n {
                let mut rngs: Vec<_> = (0..chunk.len())
                    .map(|j| rng::stream(seed, Stream::Decode, &[(start + j) as u64, s as u64]))
                    .collect();
                let outs = sampler::generate_batch(model, chunk, cfg, ids, &mut rngs)?;
                for (j, o) in outs.into_iter().enumerate() {
                    by_prompt[j].push(o);
                }
            }
            Ok(by_prompt)
        })
        .collect::<Result<_>>()?;
    let generations: Vec<Vec<Vec<usize>>> = per_chunk.into_iter().flatten().collect();

    let mut examples = Vec::with_capacity(eval_set.len());
    for (ex, gens) in eval_set.iter().zip(generations) {
        let texts: Vec<String> = gens.iter().map(|g| vocab.decode(g)).collect();
        let canonical = task.canonical_answer(&ex.prompt);
        let extracted: Vec<Option<String>> = texts.iter().map(|t| task.extract_answer(&ex.prompt, t)).collect();
        let flags: Vec<bool> = extracted
            .iter()
            .map(|e| matches!((e, &canonical), (Some(a), Some(b)) if a == b))
            .collect();
        examples.push(EvalRecord {
            prompt: ex.prompt.clone(),
            correct: flags[0],
            num_correct: flags.iter().filter(|&&f| f).count(),
            generations: texts,
            canonical_answer: canonical,
            extracted,
        });
    }
    let accuracy = examples.iter().filter(|e| e.correct).count() as f64 / examples.len() as f64;
    let counts: Vec<usize> = examples.iter().map(|e| e.num_correct).collect();
    let (pass_at_k, avg_at_k) = summarize(&counts, n, &k_list)?;
    Ok(EvalReport {
        task,
        seed,
        samples_per_prompt: n,
        decode: *cfg,
        accuracy,
        pass_at_k,
        avg_at_k,
        examples,
    })
}

impl EvalReport {
    /// Writes `eval_report.json` and a one-row `eval_summary.csv` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("eval_report.json"), serde_json::to_string_pretty(self)?)?;
        let mut w = csv::Writer::from_path(dir.join("eval_summary.csv"))?;
        let mut header = vec!["task".to_string(), "seed".into(), "n".into(), "temperature".into(), "accuracy".into()];
        let mut row = vec![
            serde_json::to_value(self.task)?.as_str().unwrap_or_default().to_string(),
            self.seed.to_string(),
            self.samples_per_prompt.to_string(),
            self.decode.temperature.to_string(),
            self.accuracy.to_string(),
        ];
        for (k, v) in &self.pass_at_k {
            header.push(format!("pass@{k}"));
            row.push(v.to_string());
        }
        for (k, v) in &self.avg_at_k {
            header.push(format!("avg@{k}"));
            row.push(v.to_string());
        }
        w.write_record(&header)?;
        w.write_record(&row)?;
        w.flush()?;
        Ok(())
    }
}
