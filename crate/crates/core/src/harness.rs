//! Evaluation metrics (error rate, real-time factor), the three analysis
//! experiments (per-strategy table, decoder-input robustness, CTC length
//! histogram, CTC-vs-decoder comparison), and report writers.
//!
//! All reports come out twice: machine-readable CSV and an aligned text
//! table with a host header. Error-rate totals are integer edit-distance
//! sums, so they are bitwise reproducible no matter how decoding is
//! parallelized; only timing fields vary between runs. The `NAR_THREADS`
//! environment variable caps decode parallelism.

use crate::ctc::SpikeMode;
use crate::data::Utterance;
use crate::decode::{
    ctc_draft, decode_causal_refine, decode_mask_predict, decode_one, decode_pm_refine,
    encode_utterances, low_confidence_mask, DecodeConfig, DecodeResult, Strategy,
};
use crate::error::{NarError, Result};
use crate::model::Model;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Unit-cost edit distance between two token sequences.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    let (n, m) = (a.len(), b.len());
    let mut prev: Vec<usize> = (0..=m).collect();
    let mut cur = vec![0usize; m + 1];
    for i in 1..=n {
        cur[0] = i;
        for j in 1..=m {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[m]
}

/// Edit distance over reference length; can exceed 1 with many insertions.
pub fn cer(hyp: &[usize], reference: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(NarError::Contract("reference must be nonempty".into()));
    }
    Ok(levenshtein(hyp, reference) as f64 / reference.len() as f64)
}

/// Corpus-level error rate: total edits over total reference length.
/// Integer accumulators keep the result bitwise reproducible under any
/// evaluation order.
#[derive(Clone, Copy, Debug, Default)]
pub struct CerAccumulator {
    pub edits: usize,
    pub ref_len: usize,
}

impl CerAccumulator {
    pub fn add(&mut self, hyp: &[usize], reference: &[usize]) {
        self.edits += levenshtein(hyp, reference);
        self.ref_len += reference.len();
    }

    pub fn merge(&mut self, other: CerAccumulator) {
        self.edits += other.edits;
        self.ref_len += other.ref_len;
    }

    pub fn value(&self) -> f64 {
        assert!(self.ref_len > 0, "no references accumulated");
        self.edits as f64 / self.ref_len as f64
    }
}

/// Real-time factor: wall time over audio duration.
pub fn rtf(total_wall_s: f64, total_audio_s: f64) -> f64 {
    assert!(total_audio_s > 0.0, "audio duration must be positive");
    total_wall_s / total_audio_s
}

/// Run `f` under the thread cap from `NAR_THREADS`, if set.
pub fn with_decode_pool<R: Send>(f: impl FnOnce() -> R + Send) -> R {
    match std::env::var("NAR_THREADS").ok().and_then(|v| v.parse::<usize>().ok()) {
        Some(n) if n >= 1 => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .expect("failed to build decode thread pool")
            .install(f),
        _ => f(),
    }
}

/// Full evaluation of one (model, decode config) pair on a test set.
#[derive(Clone, Debug)]
pub struct EvalOutcome {
    pub results: Vec<DecodeResult>,
    pub cer: f64,
    pub rtf: f64,
    pub mean_decoder_passes: f64,
    pub wall_s: f64,
    pub audio_s: f64,
}

/// Decode `test` and score it. The timed section covers encoding and
/// decoding; when `warmup` is set, one batch is decoded untimed first so
/// cold-start costs (allocator, thread pool) stay out of the clock.
pub fn evaluate(
    model: &Model<f32>,
    test: &[Utterance],
    cfg: &DecodeConfig,
    batch_size: usize,
    warmup: bool,
) -> Result<EvalOutcome> {
    if test.is_empty() {
        return Err(NarError::Contract("test set must be nonempty".into()));
    }
    with_decode_pool(|| {
        if warmup {
            let n = batch_size.min(test.len());
            let encoded = encode_utterances(model, &test[..n], batch_size)?;
            for eu in &encoded {
                decode_one(model, eu, cfg)?;
            }
        }
        let t0 = Instant::now();
        let encoded = encode_utterances(model, test, batch_size)?;
        let results: Vec<DecodeResult> = encoded
            .par_iter()
            .map(|eu| decode_one(model, eu, cfg))
            .collect::<Result<_>>()?;
        let wall_s = t0.elapsed().as_secs_f64();

        let mut acc = CerAccumulator::default();
        let mut passes = 0usize;
        for (r, u) in results.iter().zip(test) {
            acc.add(&r.tokens, &u.target);
            passes += r.decoder_passes;
        }
        let audio_s: f64 = test.iter().map(|u| u.duration_s()).sum();
        Ok(EvalOutcome {
            cer: acc.value(),
            rtf: rtf(wall_s, audio_s),
            mean_decoder_passes: passes as f64 / results.len() as f64,
            wall_s,
            audio_s,
            results,
        })
    })
}

/// One row of the per-strategy table.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StrategyRow {
    pub label: String,
    pub strategy: String,
    pub cer: f64,
    pub rtf: f64,
    pub mean_decoder_passes: f64,
}

/// A (checkpoint, decode config) pair to evaluate as one table row.
pub struct TableEntry<'a> {
    pub label: String,
    pub model: &'a Model<f32>,
    pub config: DecodeConfig,
}

/// The per-strategy table: one evaluation per entry, batch size 8 by
/// default at the call sites.
pub fn run_strategy_table(
    entries: &[TableEntry<'_>],
    test: &[Utterance],
    batch_size: usize,
) -> Result<Vec<StrategyRow>> {
    entries
        .iter()
        .map(|e| {
            let out = evaluate(e.model, test, &e.config, batch_size, true)?;
            Ok(StrategyRow {
                label: e.label.clone(),
                strategy: e.config.strategy.name().to_string(),
                cer: out.cer,
                rtf: out.rtf,
                mean_decoder_passes: out.mean_decoder_passes,
            })
        })
        .collect()
}

/// One row of the input-robustness experiment.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub strategy: String,
    pub cer_with_ctc_input: f64,
    pub cer_with_gt_input: f64,
    /// ctc-input error minus gt-input error; expected nonnegative.
    pub gap: f64,
    /// Soft flag: a negative gap is reported, not failed on.
    pub inverted: bool,
}

/// Decode once with the model's own CTC output as decoder input and once
/// with a ground-truth-derived input, per refinement strategy. For the
/// mask-predict strategy the ground-truth input keeps the CTC length and
/// mask set but swaps every *visible* token for the correct one at its
/// position.
pub fn run_robustness(
    entries: &[TableEntry<'_>],
    test: &[Utterance],
    batch_size: usize,
    mp_iterations: usize,
    mp_threshold: f64,
) -> Result<Vec<RobustnessRow>> {
    entries
        .iter()
        .map(|e| {
            let strategy = e.config.strategy;
            if !matches!(strategy, Strategy::CausalRefine | Strategy::PmRefine | Strategy::MpCtc) {
                return Err(NarError::Config(format!(
                    "robustness experiment does not apply to strategy '{strategy}'"
                )));
            }
            let encoded = encode_utterances(e.model, test, batch_size)?;
            let (mut ctc_acc, mut gt_acc) = (CerAccumulator::default(), CerAccumulator::default());
            for (eu, u) in encoded.iter().zip(test) {
                let draft = ctc_draft(eu, SpikeMode::default());
                let (with_ctc, with_gt) = match strategy {
                    Strategy::CausalRefine => (
                        decode_causal_refine(e.model, eu, &draft.tokens)?,
                        decode_causal_refine(e.model, eu, &u.target)?,
                    ),
                    Strategy::PmRefine => (
                        decode_pm_refine(e.model, eu, &draft.tokens)?,
                        decode_pm_refine(e.model, eu, &u.target)?,
                    ),
                    Strategy::MpCtc => {
                        let masked = low_confidence_mask(&draft, mp_threshold);
                        let mut gt_input = draft.tokens.clone();
                        for (i, t) in gt_input.iter_mut().enumerate() {
                            if !masked[i] && i < u.target.len() {
                                *t = u.target[i];
                            }
                        }
                        (
                            decode_mask_predict(e.model, eu, &draft.tokens, &masked, mp_iterations)?,
                            decode_mask_predict(e.model, eu, &gt_input, &masked, mp_iterations)?,
                        )
                    }
                    _ => unreachable!(),
                };
                ctc_acc.add(&with_ctc.tokens, &u.target);
                gt_acc.add(&with_gt.tokens, &u.target);
            }
            let (c, g) = (ctc_acc.value(), gt_acc.value());
            Ok(RobustnessRow {
                strategy: strategy.name().to_string(),
                cer_with_ctc_input: c,
                cer_with_gt_input: g,
                gap: c - g,
                inverted: c < g,
            })
        })
        .collect()
}

/// Histogram of (reference length T − CTC predicted length T').
#[derive(Clone, Debug, Default, Serialize, Deserialize)]
pub struct LengthHistogram {
    pub counts: BTreeMap<i64, usize>,
    pub total: usize,
}

impl LengthHistogram {
    pub fn add(&mut self, diff: i64) {
        *self.counts.entry(diff).or_insert(0) += 1;
        self.total += 1;
    }

    /// Fraction with T = T'.
    pub fn exact_rate(&self) -> f64 {
        *self.counts.get(&0).unwrap_or(&0) as f64 / self.total.max(1) as f64
    }

    /// Fraction with |T − T'| ≤ `k`.
    pub fn mass_within(&self, k: i64) -> f64 {
        let n: usize = self
            .counts
            .iter()
            .filter(|(&d, _)| d.abs() <= k)
            .map(|(_, &c)| c)
            .sum();
        n as f64 / self.total.max(1) as f64
    }

    /// Fraction with T − T' ≤ 0: the over- or exact-length cases that EOS
    /// truncation can still repair.
    pub fn mass_le_zero(&self) -> f64 {
        let n: usize = self
            .counts
            .iter()
            .filter(|(&d, _)| d <= 0)
            .map(|(_, &c)| c)
            .sum();
        n as f64 / self.total.max(1) as f64
    }
}

/// CTC length-prediction accuracy over the test set.
pub fn run_length_histogram(
    model: &Model<f32>,
    test: &[Utterance],
    batch_size: usize,
) -> Result<LengthHistogram> {
    let encoded = encode_utterances(model, test, batch_size)?;
    let mut hist = LengthHistogram::default();
    for (eu, u) in encoded.iter().zip(test) {
        let draft = ctc_draft(eu, SpikeMode::default());
        hist.add(u.target.len() as i64 - draft.predicted_length() as i64);
    }
    Ok(hist)
}

/// Raw CTC greedy error versus the decoder's refined error.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CtcVsDecoder {
    pub cer_ctc_greedy: f64,
    pub cer_decoder: f64,
}

pub fn run_ctc_vs_decoder(
    model: &Model<f32>,
    test: &[Utterance],
    batch_size: usize,
) -> Result<CtcVsDecoder> {
    let encoded = encode_utterances(model, test, batch_size)?;
    let (mut raw, mut refined) = (CerAccumulator::default(), CerAccumulator::default());
    for (eu, u) in encoded.iter().zip(test) {
        let draft = ctc_draft(eu, SpikeMode::default());
        let dec = decode_causal_refine(model, eu, &draft.tokens)?;
        raw.add(&draft.tokens, &u.target);
        refined.add(&dec.tokens, &u.target);
    }
    Ok(CtcVsDecoder { cer_ctc_greedy: raw.value(), cer_decoder: refined.value() })
}

// ---------------------------------------------------------------------------
// report writers
// ---------------------------------------------------------------------------

fn host_header() -> String {
    let threads = std::thread::available_parallelism()
        .map(|n| n.get().to_string())
        .unwrap_or_else(|_| "?".into());
    format!(
        "# host: {} {}, {} hardware threads",
        std::env::consts::OS,
        std::env::consts::ARCH,
        threads
    )
}

fn write_text(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "{}", host_header())?;
    writeln!(f, "{header}")?;
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

pub fn write_strategy_table_csv(path: &Path, rows: &[StrategyRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "label,strategy,cer,rtf,mean_decoder_passes")?;
    for r in rows {
        writeln!(f, "{},{},{},{},{}", r.label, r.strategy, r.cer, r.rtf, r.mean_decoder_passes)?;
    }
    Ok(())
}

pub fn write_strategy_table_text(path: &Path, rows: &[StrategyRow]) -> Result<()> {
    let lines = rows
        .iter()
        .map(|r| {
            format!(
                "{:<28} {:<14} {:>8.4} {:>10.5} {:>8.2}",
                r.label, r.strategy, r.cer, r.rtf, r.mean_decoder_passes
            )
        })
        .collect::<Vec<_>>();
    let header = format!(
        "{:<28} {:<14} {:>8} {:>10} {:>8}",
        "label", "strategy", "cer", "rtf", "passes"
    );
    write_text(path, &header, &lines)
}

pub fn write_robustness_csv(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "strategy,cer_with_ctc_input,cer_with_gt_input,gap,inverted")?;
    for r in rows {
        writeln!(
            f,
            "{},{},{},{},{}",
            r.strategy, r.cer_with_ctc_input, r.cer_with_gt_input, r.gap, r.inverted
        )?;
    }
    Ok(())
}

pub fn write_robustness_text(path: &Path, rows: &[RobustnessRow]) -> Result<()> {
    let lines = rows
        .iter()
        .map(|r| {
            let note = if r.inverted { "  (inverted: gt input scored worse)" } else { "" };
            format!(
                "{:<14} ctc-input {:>8.4}  gt-input {:>8.4}  gap {:>8.4}{note}",
                r.strategy, r.cer_with_ctc_input, r.cer_with_gt_input, r.gap
            )
        })
        .collect::<Vec<_>>();
    write_text(path, "decoder-input robustness (error-rate gap, lower is more robust)", &lines)
}

pub fn write_histogram_csv(path: &Path, hist: &LengthHistogram) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "length_diff,count")?;
    for (d, c) in &hist.counts {
        writeln!(f, "{d},{c}")?;
    }
    Ok(())
}

pub fn write_histogram_text(path: &Path, hist: &LengthHistogram) -> Result<()> {
    let mut lines: Vec<String> = hist
        .counts
        .iter()
        .map(|(d, c)| format!("{d:>4}  {c:>6}  {}", "#".repeat(1 + c * 40 / hist.total.max(1))))
        .collect();
    lines.push(format!(
        "total {}   exact rate {:.4}   mass(diff<=0) {:.4}   mass(|diff|<=2) {:.4}",
        hist.total,
        hist.exact_rate(),
        hist.mass_le_zero(),
        hist.mass_within(2)
    ));
    write_text(path, "reference length minus CTC predicted length", &lines)
}

pub fn write_ctc_vs_decoder_csv(path: &Path, c: &CtcVsDecoder) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "system,cer")?;
    writeln!(f, "ctc_greedy,{}", c.cer_ctc_greedy)?;
    writeln!(f, "decoder,{}", c.cer_decoder)?;
    Ok(())
}

pub fn write_ctc_vs_decoder_text(path: &Path, c: &CtcVsDecoder) -> Result<()> {
    let lines = vec![
        format!("{:<12} {:>8.4}", "ctc-greedy", c.cer_ctc_greedy),
        format!("{:<12} {:>8.4}", "decoder", c.cer_decoder),
    ];
    write_text(path, "ctc greedy vs decoder-refined error rate", &lines)
}

// ---------------------------------------------------------------------------
// flat key=value config files
// ---------------------------------------------------------------------------

/// Parse a flat `key = value` config file. `#` starts a comment; blank
/// lines are ignored; duplicate keys are an error.
pub fn parse_config_str(text: &str) -> Result<HashMap<String, String>> {
    let mut map = HashMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(NarError::Config(format!(
                "line {}: expected 'key = value', got '{raw}'",
                lineno + 1
            )));
        };
        let (k, v) = (k.trim().to_string(), v.trim().to_string());
        if map.insert(k.clone(), v).is_some() {
            return Err(NarError::Config(format!("duplicate key '{k}'")));
        }
    }
    Ok(map)
}

pub fn parse_config_file(path: &Path) -> Result<HashMap<String, String>> {
    parse_config_str(&std::fs::read_to_string(path)?)
}
