//! Token learnability analysis: ground-truth confidence binned by corpus
//! frequency and diffusion time.
//!
//! Frequency bins are decades by default, the last one open-ended. Time bins
//! are log-spaced between `2^-2` and `2^-1/4`, with a catch-all bin on each
//! side so every `t` in `(0, 1]` lands somewhere.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{TokenSequence, Vocabulary};
use crate::diffusion::{self, DEFAULT_T_MIN};
use crate::error::{Error, Result};
use crate::model::Denoiser;
use crate::rng::{self, Stream};
use crate::stats::RunningStats;

pub const TIME_LO: f64 = 0.25;
/// `2^(-1/4)`
pub const TIME_HI: f64 = 0.840_896_415_253_714_6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConfidenceRecord {
    pub token_id: usize,
    pub frequency: u64,
    pub t: f64,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AnalysisConfig {
    pub samples_per_example: usize,
    /// Log-spaced bins between `2^-2` and `2^-1/4`.
    pub time_bins: usize,
    /// Lower frequency edges; the last bin is open-ended.
    pub freq_edges: Vec<f64>,
    pub top_tokens_per_bin: usize,
    pub batch_size: usize,
    pub t_min: f64,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        AnalysisConfig {
            samples_per_example: 4,
            time_bins: 8,
            freq_edges: vec![1.0, 1e1, 1e2, 1e3, 1e4, 1e5],
            top_tokens_per_bin: 10,
            batch_size: 64,
            t_min: DEFAULT_T_MIN,
        }
    }
}

impl AnalysisConfig {
    pub fn validate(&self) -> Result<()> {
        if self.samples_per_example == 0 || self.time_bins == 0 || self.batch_size == 0 {
            return Err(Error::Config("samples_per_example, time_bins and batch_size must be positive".into()));
        }
        GridSpec::new(self.freq_edges.clone(), self.time_bins).map(|_| ())
    }

    pub fn grid(&self) -> Result<GridSpec> {
        GridSpec::new(self.freq_edges.clone(), self.time_bins)
    }
}

/// Bin boundaries. Frequency bin `i` is `[freq_edges[i], freq_edges[i+1])`;
/// time bin `j` is `[time_edges[j], time_edges[j+1])` except the last, which
/// also includes its upper edge `1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub freq_edges: Vec<f64>,
    pub time_edges: Vec<f64>,
}

impl GridSpec {
    pub fn new(freq_edges: Vec<f64>, time_bins: usize) -> Result<Self> {
        if freq_edges.len() < 2 {
            return Err(Error::Config("at least two frequency bins are required".into()));
        }
        if freq_edges[0] > 1.0 || freq_edges.windows(2).any(|w| !(w[0] < w[1])) || freq_edges[0] <= 0.0 {
            return Err(Error::Config(format!(
                "frequency edges must be increasing and start in (0, 1]: {freq_edges:?}"
            )));
        }
        if time_bins == 0 {
            return Err(Error::Config("time_bins must be positive".into()));
        }
        let (lo, hi) = (TIME_LO.log2(), TIME_HI.log2());
        let mut time_edges = vec![0.0];
        time_edges.extend((0..=time_bins).map(|i| 2f64.powf(lo + (hi - lo) * i as f64 / time_bins as f64)));
        time_edges.push(1.0);
        Ok(GridSpec { freq_edges, time_edges })
    }

    pub fn n_freq(&self) -> usize {
        self.freq_edges.len()
    }

    pub fn n_time(&self) -> usize {
        self.time_edges.len() - 1
    }

    pub fn freq_bounds(&self, i: usize) -> (f64, f64) {
        (self.freq_edges[i], self.freq_edges.get(i + 1).copied().unwrap_or(f64::INFINITY))
    }

    pub fn time_bounds(&self, j: usize) -> (f64, f64) {
        (self.time_edges[j], self.time_edges[j + 1])
    }

    pub fn freq_bin(&self, f: f64) -> Option<usize> {
        if f < self.freq_edges[0] {
            return None;
        }
        Some(self.freq_edges.partition_point(|&e| e <= f) - 1)
    }

    pub fn time_bin(&self, t: f64) -> Option<usize> {
        if !(t > 0.0 && t <= 1.0) {
            return None;
        }
        let j = self.time_edges.partition_point(|&e| e <= t);
        Some((j - 1).min(self.n_time() - 1))
    }
}

/// Streaming statistics per (frequency bin, time bin) cell plus marginals.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BinGrid {
    pub spec: GridSpec,
    /// Row-major `[freq][time]`.
    pub cells: Vec<RunningStats>,
    pub freq_marginal: Vec<RunningStats>,
    pub time_marginal: Vec<RunningStats>,
    /// Record-weighted frequency per frequency bin.
    pub freq_mean: Vec<RunningStats>,
    pub tokens: BTreeMap<usize, (u64, RunningStats)>,
}

impl BinGrid {
    pub fn new(spec: GridSpec) -> Self {
        let (f, t) = (spec.n_freq(), spec.n_time());
        BinGrid {
            cells: vec![RunningStats::new(); f * t],
            freq_marginal: vec![RunningStats::new(); f],
            time_marginal: vec![RunningStats::new(); t],
            freq_mean: vec![RunningStats::new(); f],
            tokens: BTreeMap::new(),
            spec,
        }
    }

    pub fn cell(&self, freq_bin: usize, time_bin: usize) -> &RunningStats {
        &self.cells[freq_bin * self.spec.n_time() + time_bin]
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().map(RunningStats::count).sum()
    }

    pub fn push(&mut self, r: &ConfidenceRecord) -> Result<()> {
        if r.frequency == 0 {
            return Err(Error::Input(format!("record for token {} has frequency 0", r.token_id)));
        }
        if !(0.0..=1.0).contains(&r.confidence) {
            return Err(Error::Input(format!("confidence {} outside [0, 1]", r.confidence)));
        }
        let fb = self
            .spec
            .freq_bin(r.frequency as f64)
            .ok_or_else(|| Error::Input(format!("frequency {} below the first bin", r.frequency)))?;
        let tb = self
            .spec
            .time_bin(r.t)
            .ok_or_else(|| Error::Input(format!("diffusion time {} outside (0, 1]", r.t)))?;
        let nt = self.spec.n_time();
        self.cells[fb * nt + tb].push(r.confidence);
        self.freq_marginal[fb].push(r.confidence);
        self.time_marginal[tb].push(r.confidence);
        self.freq_mean[fb].push(r.frequency as f64);
        let e = self.tokens.entry(r.token_id).or_insert((r.frequency, RunningStats::new()));
        e.1.push(r.confidence);
        Ok(())
    }

    pub fn merge(&mut self, other: &BinGrid) -> Result<()> {
        if self.spec != other.spec {
            return Err(Error::Contract("cannot merge grids with different bins".into()));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
        for (a, b) in self.freq_marginal.iter_mut().zip(&other.freq_marginal) {
            a.merge(b);
        }
        for (a, b) in self.time_marginal.iter_mut().zip(&other.time_marginal) {
            a.merge(b);
        }
        for (a, b) in self.freq_mean.iter_mut().zip(&other.freq_mean) {
            a.merge(b);
        }
        for (id, (f, s)) in &other.tokens {
            self.tokens.entry(*id).or_insert((*f, RunningStats::new())).1.merge(s);
        }
        Ok(())
    }
}

/// Bins a record stream in one pass.
pub fn bin(records: &[ConfidenceRecord], spec: &GridSpec) -> Result<BinGrid> {
    let mut g = BinGrid::new(spec.clone());
    for r in records {
        g.push(r)?;
    }
    Ok(g)
}

/// Masks each example `samples_per_example` times at `t ~ U[t_min, 1]` and
/// records the ground-truth confidence at every masked response position.
/// Forward passes run in evaluation mode, batched, on the rayon pool.
pub fn collect(
    model: &Denoiser,
    data: &[TokenSequence],
    vocab: &Vocabulary,
    cfg: &AnalysisConfig,
    seed: u64,
) -> Result<Vec<ConfidenceRecord>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Ingestion("analysis corpus is empty".into()));
    }
    if model.config().vocab_size != vocab.len() {
        return Err(Error::Mismatch(format!(
            "model vocabulary size {} does not match vocabulary of {} tokens",
            model.config().vocab_size,
            vocab.len()
        )));
    }
    let jobs: Vec<(usize, usize)> = (0..data.len())
        .flat_map(|i| (0..cfg.samples_per_example).map(move |s| (i, s)))
        .collect();
    let freq = vocab.frequency();
    let per_batch: Vec<Vec<ConfidenceRecord>> = jobs
        .par_chunks(cfg.batch_size)
        .map(|chunk| {
            let mut rows = Vec::with_capacity(chunk.len());
            let mut meta = Vec::with_capacity(chunk.len());
            for &(i, s) in chunk {
                let mut rng = rng::stream(seed, Stream::Analysis, &[i as u64, s as u64]);
                let t = cfg.t_min + rng.random::<f64>() * (1.0 - cfg.t_min);
                let c = diffusion::corrupt(&data[i], t, vocab.mask_id(), &mut rng);
                rows.push(c);
                meta.push((i, t));
            }
            let width = chunk.iter().map(|&(i, _)| data[i].content_len()).max().unwrap_or(0);
            let ids: Vec<Vec<usize>> = rows
                .iter()
                .zip(&meta)
                .map(|(c, &(i, _))| {
                    let mut r = c.ids[..data[i].content_len()].to_vec();
                    r.resize(width, vocab.pad_id());
                    r
                })
                .collect();
            let valid: Vec<usize> = meta.iter().map(|&(i, _)| data[i].content_len()).collect();
            let mut out = Vec::new();
            if rows.iter().all(|c| c.mask_set.is_empty()) {
                return Ok(out);
            }
            let pred = model.predict(&ids, &valid)?;
            for (r, (c, &(i, t))) in rows.iter().zip(&meta).enumerate() {
                for &p in &c.mask_set {
                    let id = data[i].ids[p];
                    out.push(ConfidenceRecord {
                        token_id: id,
                        frequency: freq.get(id).copied().unwrap_or(0),
                        t,
                        confidence: pred.at(r, p)[id].exp().clamp(0.0, 1.0),
                    });
                }
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    Ok(per_batch.into_iter().flatten().collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportSummary {
    pub records: u64,
    pub occupied_cells: usize,
    pub warnings: Vec<String>,
}

fn fmt_edge(x: f64) -> String {
    if x.is_infinite() {
        "inf".into()
    } else {
        format!("{x}")
    }
}

/// Writes `cells.csv`, `marginal.csv`, `time_marginal.csv`,
/// `confidence.svg`, `tokens.txt` and `summary.json` into `dir`.
pub fn report(grid: &BinGrid, vocab: Option<&Vocabulary>, top_tokens_per_bin: usize, dir: &Path) -> Result<ReportSummary> {
    std::fs::create_dir_all(dir)?;
    let spec = &grid.spec;
    let mut warnings = Vec::new();
    if grid.total() == 0 {
        warnings.push("no confidence records; artifacts are empty".to_string());
    }

    let mut cells = csv::Writer::from_path(dir.join("cells.csv"))?;
    cells.write_record(["freq_bin_lo", "freq_bin_hi", "t_bin_lo", "t_bin_hi", "count", "mean_conf", "var_conf"])?;
    let mut occupied = 0;
    for f in 0..spec.n_freq() {
        for t in 0..spec.n_time() {
            let s = grid.cell(f, t);
            if s.is_empty() {
                continue;
            }
            occupied += 1;
            let (flo, fhi) = spec.freq_bounds(f);
            let (tlo, thi) = spec.time_bounds(t);
            cells.write_record([
                fmt_edge(flo),
                fmt_edge(fhi),
                fmt_edge(tlo),
                fmt_edge(thi),
                s.count().to_string(),
                s.mean().to_string(),
                s.variance().to_string(),
            ])?;
        }
    }
    cells.flush()?;

    let mut marginal = csv::Writer::from_path(dir.join("marginal.csv"))?;
    marginal.write_record(["freq_bin_lo", "freq_bin_hi", "count", "mean_freq", "mean_conf", "var_conf"])?;
    for f in 0..spec.n_freq() {
        let s = &grid.freq_marginal[f];
        if s.is_empty() {
            continue;
        }
        let (lo, hi) = spec.freq_bounds(f);
        marginal.write_record([
            fmt_edge(lo),
            fmt_edge(hi),
            s.count().to_string(),
            grid.freq_mean[f].mean().to_string(),
            s.mean().to_string(),
            s.variance().to_string(),
        ])?;
    }
    marginal.flush()?;

    let mut time = csv::Writer::from_path(dir.join("time_marginal.csv"))?;
    time.write_record(["t_bin_lo", "t_bin_hi", "count", "mean_conf", "var_conf"])?;
    for t in 0..spec.n_time() {
        let s = &grid.time_marginal[t];
        if s.is_empty() {
            continue;
        }
        let (lo, hi) = spec.time_bounds(t);
        time.write_record([fmt_edge(lo), fmt_edge(hi), s.count().to_string(), s.mean().to_string(), s.variance().to_string()])?;
    }
    time.flush()?;

    std::fs::write(dir.join("confidence.svg"), render_svg(grid))?;

    let mut text = String::new();
    for f in 0..spec.n_freq() {
        let (lo, hi) = spec.freq_bounds(f);
        let mut toks: Vec<(&usize, &(u64, RunningStats))> = grid
            .tokens
            .iter()
            .filter(|(_, (freq, _))| spec.freq_bin(*freq as f64) == Some(f))
            .collect();
        if toks.is_empty() {
            continue;
        }
        toks.sort_by(|a, b| b.1 .1.count().cmp(&a.1 .1.count()).then(a.0.cmp(b.0)));
        let _ = writeln!(text, "# frequency [{}, {}) mean_conf={:.6}", fmt_edge(lo), fmt_edge(hi), grid.freq_marginal[f].mean());
        for (id, (freq, s)) in toks.into_iter().take(top_tokens_per_bin) {
            let name = vocab.and_then(|v| v.token(*id)).map_or_else(|| id.to_string(), |t| format!("{t:?}"));
            let _ = writeln!(text, "{name}\tfreq={freq}\tcount={}\tmean_conf={:.6}", s.count(), s.mean());
        }
        text.push('\n');
    }
    std::fs::write(dir.join("tokens.txt"), text)?;

    let summary = ReportSummary {
        records: grid.total(),
        occupied_cells: occupied,
        warnings,
    };
    std::fs::write(dir.join("summary.json"), serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

fn xml_escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Line chart of mean confidence against log10 mean frequency, one polyline
/// per occupied time bin.
pub fn render_svg(grid: &BinGrid) -> String {
    let (w, h, pad) = (640.0, 400.0, 50.0);
    let spec = &grid.spec;
    let nt = spec.n_time();
    let xs: Vec<f64> = grid
        .freq_mean
        .iter()
        .map(|s| if s.is_empty() { 0.0 } else { s.mean().max(1.0).log10() })
        .collect();
    let occupied_x: Vec<f64> = (0..spec.n_freq()).filter(|&f| !grid.freq_mean[f].is_empty()).map(|f| xs[f]).collect();
    let xmin = occupied_x.iter().copied().fold(f64::INFINITY, f64::min);
    let xmax = occupied_x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if xmax > xmin { xmax - xmin } else { 1.0 };
    let px = |x: f64| pad + (x - if xmin.is_finite() { xmin } else { 0.0 }) / span * (w - 2.0 * pad);
    let py = |c: f64| h - pad - c * (h - 2.0 * pad);

    let mut s = String::new();
    let _ = writeln!(s, r#"<?xml version="1.0" encoding="UTF-8"?>"#);
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<line x1="{pad}" y1="{y}" x2="{x2}" y2="{y}" stroke="black"/><line x1="{pad}" y1="{pad}" x2="{pad}" y2="{y}" stroke="black"/>"#,
        y = h - pad,
        x2 = w - pad
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">log10 token frequency</text>"#, w / 2.0, h - 12.0);
    let _ = writeln!(s, r#"<text x="14" y="{}" font-size="12" transform="rotate(-90 14 {})" text-anchor="middle">mean confidence</text>"#, h / 2.0, h / 2.0);
    let mut legend = 0;
    for t in 0..nt {
        let pts: Vec<String> = (0..spec.n_freq())
            .filter(|&f| !grid.cell(f, t).is_empty())
            .map(|f| format!("{:.2},{:.2}", px(xs[f]), py(grid.cell(f, t).mean())))
            .collect();
        if pts.is_empty() {
            continue;
        }
        let hue = (t as f64 / nt.max(1) as f64 * 300.0).round();
        let (lo, hi) = spec.time_bounds(t);
        let label = xml_escape(&format!("t in [{lo:.3}, {hi:.3})"));
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="hsl({hue},70%,45%)" stroke-width="2" points="{}"><title>{label}</title></polyline>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="10" fill="hsl({hue},70%,45%)">{label}</text>"#,
            w - pad - 110.0,
            pad + 12.0 * legend as f64
        );
        legend += 1;
    }
    s.push_str("</svg>\n");
    s
}
