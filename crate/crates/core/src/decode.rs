//! Inference strategies behind one interface: autoregressive beam search
//! plus the single- and few-pass alternatives that reuse the CTC head's
//! greedy output (its token sequence, length, or spike frames) to fix the
//! decoder input length up front.
//!
//! Every strategy reports how many decoder passes it spent, so throughput
//! comparisons count the same thing. Wall times here cover decoding only;
//! the per-utterance share of encoder time is reported separately on
//! [`EncodedUtterance`] so real-time factors can include it.

use crate::ctc::{ctc_greedy, CtcGreedyResult, SpikeMode};
use crate::data::{Utterance, BLANK, CONTENT_BASE, EOS, MASK, SOS};
use crate::error::{NarError, Result};
use crate::model::{DecoderMask, EncoderOutput, Mode, Model, Session};
use crate::numerics::Tensor;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// The seven decoding procedures.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    /// Autoregressive beam search from SOS, ranked by length-normalized
    /// log-probability.
    Ar,
    /// One padding-mask pass over a fixed number of MASK inputs, truncated
    /// at the first EOS.
    FixedMask,
    /// One pass whose decoder input is the encoder states at the CTC spike
    /// frames (no token embedding at all).
    SpikeCopy,
    /// Mask low-confidence CTC tokens and re-fill them over a few
    /// padding-mask passes, committing the most confident fills first.
    MpCtc,
    /// One causal pass over `[SOS, draft]` where the draft is the CTC
    /// greedy output; equivalent to forcing the draft as an AR prefix.
    CausalRefine,
    /// One padding-mask pass over the CTC greedy output, re-reading each
    /// position in full bidirectional context.
    PmRefine,
    /// One padding-mask pass over MASK tokens whose count is the CTC
    /// predicted length.
    MaskLen,
}

impl Strategy {
    pub const ALL: [Strategy; 7] = [
        Strategy::Ar,
        Strategy::FixedMask,
        Strategy::SpikeCopy,
        Strategy::MpCtc,
        Strategy::CausalRefine,
        Strategy::PmRefine,
        Strategy::MaskLen,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Ar => "ar",
            Strategy::FixedMask => "fixed-mask",
            Strategy::SpikeCopy => "spike-copy",
            Strategy::MpCtc => "mp-ctc",
            Strategy::CausalRefine => "causal-refine",
            Strategy::PmRefine => "pm-refine",
            Strategy::MaskLen => "mask-len",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        Strategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = Strategy::ALL.iter().map(|s| s.name()).collect();
                NarError::Config(format!(
                    "unknown strategy '{s}' (expected one of: {})",
                    names.join(", ")
                ))
            })
    }
}

impl std::fmt::Display for Strategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

/// Knobs for [`decode_one`]; strategies ignore the knobs they do not use.
#[derive(Clone, Debug)]
pub struct DecodeConfig {
    pub strategy: Strategy,
    /// Beam width for [`Strategy::Ar`]; 1 is greedy.
    pub beam: usize,
    /// Input length for [`Strategy::FixedMask`].
    pub fixed_len: usize,
    /// Pass budget for [`Strategy::MpCtc`].
    pub mp_iterations: usize,
    /// Confidence below which a CTC token is re-predicted in
    /// [`Strategy::MpCtc`]. Tokens at or above it are kept verbatim, so the
    /// threshold trades decoder corrections against trust in the draft.
    pub mp_threshold: f64,
    pub spike_mode: SpikeMode,
}

impl DecodeConfig {
    pub fn new(strategy: Strategy) -> Self {
        DecodeConfig {
            strategy,
            beam: 10,
            fixed_len: 16,
            mp_iterations: 5,
            mp_threshold: 0.4,
            spike_mode: SpikeMode::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam < 1 {
            return Err(NarError::Config("beam must be >= 1".into()));
        }
        if self.fixed_len < 1 {
            return Err(NarError::Config("fixed_len must be >= 1".into()));
        }
        if self.mp_iterations < 1 {
            return Err(NarError::Config("mp_iterations must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.mp_threshold) {
            return Err(NarError::Config("mp_threshold must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// One hypothesis per utterance, with the bookkeeping the reports need.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DecodeResult {
    pub utt_id: String,
    pub strategy: String,
    /// Content token ids only; truncated at the first EOS, which is not
    /// included.
    pub tokens: Vec<usize>,
    /// Sum of the log-probabilities of the emitted tokens (plus EOS where
    /// one was emitted). Ranking inside beam search is length-normalized;
    /// this field is the raw sum.
    pub score: f64,
    pub decoder_passes: usize,
    /// Decoding wall time; excludes the encoder (see
    /// [`EncodedUtterance::encode_share_s`]).
    pub wall_time_s: f64,
    /// True when the strategy ran out of budget before emitting EOS.
    pub truncated: bool,
}

/// Encoder output for one utterance, detached from any tape so any number
/// of decoder passes can reuse it.
#[derive(Clone, Debug)]
pub struct EncodedUtterance {
    pub utt_id: String,
    /// `[1, sub_len, d_model]` — valid subsampled frames only.
    pub states: Tensor<f32>,
    /// `[sub_len, vocab]` log-distributions from the CTC head.
    pub ctc_log_posts: Tensor<f32>,
    pub duration_s: f64,
    /// This utterance's share of its batch's encoder wall time.
    pub encode_share_s: f64,
}

impl EncodedUtterance {
    pub fn sub_len(&self) -> usize {
        self.states.shape()[1]
    }
}

/// Run the encoder and CTC head over `utts` in batches, returning detached
/// per-utterance states in input order.
pub fn encode_utterances(
    model: &Model<f32>,
    utts: &[Utterance],
    batch_size: usize,
) -> Result<Vec<EncodedUtterance>> {
    if batch_size < 1 {
        return Err(NarError::Config("batch_size must be >= 1".into()));
    }
    let mut out = Vec::with_capacity(utts.len());
    for chunk in utts.chunks(batch_size) {
        let members: Vec<&Utterance> = chunk.iter().collect();
        let batch = crate::data::collate(&members);
        let t0 = Instant::now();
        let mut sess = model.session(Mode::Eval, 0);
        let enc = sess.encode(&batch.features, &batch.feat_lengths)?;
        let head = sess.ctc_head(&enc);
        let wall = t0.elapsed().as_secs_f64();
        let states = sess.tape.value(enc.states);
        let posts = sess.tape.value(head);
        let d = model.config.d_model;
        let vocab = model.config.vocab_size;
        let total_sub: usize = enc.sub_lengths.iter().sum();
        for (b, u) in chunk.iter().enumerate() {
            let n = enc.sub_lengths[b];
            let row = b * enc.sub_frames;
            let st = states.data()[row * d..(row + n) * d].to_vec();
            let lp = posts.data()[row * vocab..(row + n) * vocab].to_vec();
            out.push(EncodedUtterance {
                utt_id: u.utt_id.clone(),
                states: Tensor::new(vec![1, n, d], st),
                ctc_log_posts: Tensor::new(vec![n, vocab], lp),
                duration_s: u.duration_s(),
                encode_share_s: wall * n as f64 / total_sub as f64,
            });
        }
    }
    Ok(out)
}

/// Greedy CTC decode of one encoded utterance.
pub fn ctc_draft(eu: &EncodedUtterance, spike_mode: SpikeMode) -> CtcGreedyResult {
    ctc_greedy(&eu.ctc_log_posts, eu.sub_len(), BLANK, spike_mode)
}

/// Positions of `ctc` whose run confidence falls below `threshold`.
pub fn low_confidence_mask(ctc: &CtcGreedyResult, threshold: f64) -> Vec<bool> {
    ctc.confidences.iter().map(|&c| c < threshold).collect()
}

/// Decode one utterance with the configured strategy.
pub fn decode_one(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    cfg: &DecodeConfig,
) -> Result<DecodeResult> {
    cfg.validate()?;
    let t0 = Instant::now();
    let mut r = match cfg.strategy {
        Strategy::Ar => decode_ar(model, eu, cfg.beam)?,
        Strategy::FixedMask => decode_fixed_mask(model, eu, cfg.fixed_len)?,
        Strategy::SpikeCopy => {
            let ctc = ctc_draft(eu, cfg.spike_mode);
            decode_spike_copy(model, eu, &ctc)?
        }
        Strategy::MpCtc => {
            let ctc = ctc_draft(eu, cfg.spike_mode);
            let masked = low_confidence_mask(&ctc, cfg.mp_threshold);
            decode_mask_predict(model, eu, &ctc.tokens, &masked, cfg.mp_iterations)?
        }
        Strategy::CausalRefine => {
            let ctc = ctc_draft(eu, cfg.spike_mode);
            decode_causal_refine(model, eu, &ctc.tokens)?
        }
        Strategy::PmRefine => {
            let ctc = ctc_draft(eu, cfg.spike_mode);
            decode_pm_refine(model, eu, &ctc.tokens)?
        }
        Strategy::MaskLen => {
            let ctc = ctc_draft(eu, cfg.spike_mode);
            decode_mask_len(model, eu, ctc.predicted_length())?
        }
    };
    r.utt_id = eu.utt_id.clone();
    r.strategy = cfg.strategy.name().to_string();
    r.wall_time_s = t0.elapsed().as_secs_f64();
    Ok(r)
}

/// Encode and decode a whole set, preserving input order.
pub fn decode_utterances(
    model: &Model<f32>,
    utts: &[Utterance],
    cfg: &DecodeConfig,
    batch_size: usize,
) -> Result<Vec<DecodeResult>> {
    let encoded = encode_utterances(model, utts, batch_size)?;
    encoded.iter().map(|eu| decode_one(model, eu, cfg)).collect()
}

/// One JSON object per line: `{utt_id, strategy, tokens, score,
/// decoder_passes, wall_time_s, truncated}`.
pub fn write_results_jsonl(path: &Path, results: &[DecodeResult]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in results {
        serde_json::to_writer(&mut f, r)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

fn blank_result() -> DecodeResult {
    DecodeResult {
        utt_id: String::new(),
        strategy: String::new(),
        tokens: Vec::new(),
        score: 0.0,
        decoder_passes: 0,
        wall_time_s: 0.0,
        truncated: false,
    }
}

/// Best token over EOS (optionally) and the content range; ties go to the
/// lowest id.
fn best_allowed(row: &[f32], allow_eos: bool) -> (usize, f32) {
    let mut best = CONTENT_BASE;
    let mut best_lp = row[CONTENT_BASE];
    if allow_eos && row[EOS] >= best_lp {
        best = EOS;
        best_lp = row[EOS];
    }
    for (k, &lp) in row.iter().enumerate().skip(CONTENT_BASE + 1) {
        if lp > best_lp {
            best = k;
            best_lp = lp;
        }
    }
    (best, best_lp)
}

fn open_session<'m>(
    model: &'m Model<f32>,
    eu: &EncodedUtterance,
) -> (Session<'m, f32>, EncoderOutput) {
    let mut sess = model.session(Mode::Eval, 0);
    let enc = sess.import_encoder(eu.states.clone(), vec![eu.sub_len()]);
    (sess, enc)
}

/// One decoder pass over a single token row; returns `[l, vocab]`
/// log-probabilities flattened.
fn single_pass(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    tokens: Vec<usize>,
    mask: DecoderMask,
) -> Result<Vec<f32>> {
    let (mut sess, enc) = open_session(model, eu);
    let out = sess.decoder_forward(&[tokens], &mask, &enc)?;
    Ok(sess.tape.value(out).data().to_vec())
}

/// Collect tokens row by row, stopping at the first EOS. Returns
/// (tokens, score, saw_eos).
fn read_rows(rows: &[f32], vocab: usize, positions: usize) -> (Vec<usize>, f64, bool) {
    let mut tokens = Vec::new();
    let mut score = 0.0f64;
    for p in 0..positions {
        let row = &rows[p * vocab..(p + 1) * vocab];
        let (tok, lp) = best_allowed(row, true);
        score += lp as f64;
        if tok == EOS {
            return (tokens, score, true);
        }
        tokens.push(tok);
    }
    (tokens, score, false)
}

/// Autoregressive beam search; `beam == 1` is greedy. The step budget is
/// twice the encoded frame count plus ten.
pub fn decode_ar(model: &Model<f32>, eu: &EncodedUtterance, beam: usize) -> Result<DecodeResult> {
    decode_ar_limited(model, eu, beam, eu.sub_len() * 2 + 10)
}

#[derive(Clone)]
struct Hyp {
    tokens: Vec<usize>,
    /// Raw sum of log-probabilities (including EOS once finished).
    score: f64,
}

impl Hyp {
    /// Length-normalized ranking score; finished hypotheses count EOS as a
    /// step.
    fn normalized(&self, finished: bool) -> f64 {
        let steps = self.tokens.len() + usize::from(finished);
        self.score / steps.max(1) as f64
    }
}

fn decode_ar_limited(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    beam: usize,
    max_steps: usize,
) -> Result<DecodeResult> {
    let vocab = model.config.vocab_size;
    let d = model.config.d_model;
    let sub_len = eu.sub_len();
    let mut live = vec![Hyp { tokens: Vec::new(), score: 0.0 }];
    let mut finished: Vec<Hyp> = Vec::new();
    let mut passes = 0usize;

    for step in 1..=max_steps {
        let n = live.len();
        // replicate the encoder states across the live hypotheses
        let mut tiled = Vec::with_capacity(n * eu.states.numel());
        for _ in 0..n {
            tiled.extend_from_slice(eu.states.data());
        }
        let mut sess = model.session(Mode::Eval, 0);
        let enc = sess.import_encoder(
            Tensor::new(vec![n, sub_len, d], tiled),
            vec![sub_len; n],
        );
        let inputs: Vec<Vec<usize>> = live
            .iter()
            .map(|h| {
                let mut row = Vec::with_capacity(step);
                row.push(SOS);
                row.extend_from_slice(&h.tokens);
                row
            })
            .collect();
        let out = sess.decoder_forward(&inputs, &DecoderMask::Causal, &enc)?;
        passes += 1;
        let out = sess.tape.value(out);

        // gather candidate extensions (EOS and every content token)
        let mut cands: Vec<(f64, usize, usize)> = Vec::with_capacity(n * (vocab - 4));
        for (b, h) in live.iter().enumerate() {
            let row = &out.data()[(b * step + step - 1) * vocab..(b * step + step) * vocab];
            cands.push((h.score + row[EOS] as f64, b, EOS));
            for k in CONTENT_BASE..vocab {
                cands.push((h.score + row[k] as f64, b, k));
            }
        }
        cands.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.2.cmp(&b.2)));

        let mut next = Vec::with_capacity(beam);
        for &(score, b, k) in cands.iter().take(beam) {
            let mut tokens = live[b].tokens.clone();
            if k == EOS {
                finished.push(Hyp { tokens, score });
            } else {
                tokens.push(k);
                next.push(Hyp { tokens, score });
            }
        }
        live = next;
        if live.is_empty() || finished.len() >= beam {
            break;
        }
    }

    let pick_best = |hyps: &[Hyp], fin: bool| {
        hyps.iter()
            .enumerate()
            .max_by(|(ia, a), (ib, b)| {
                a.normalized(fin)
                    .partial_cmp(&b.normalized(fin))
                    .unwrap()
                    .then(ib.cmp(ia))
            })
            .map(|(_, h)| h.clone())
    };
    let mut r = blank_result();
    r.decoder_passes = passes;
    if let Some(best) = pick_best(&finished, true) {
        r.tokens = best.tokens;
        r.score = best.score;
    } else {
        // budget exhausted before any hypothesis emitted EOS
        let best = pick_best(&live, false).expect("live set cannot be empty here");
        r.tokens = best.tokens;
        r.score = best.score;
        r.truncated = true;
    }
    Ok(r)
}

/// One padding-mask pass over `len` MASK inputs, truncated at the first
/// EOS.
pub fn decode_fixed_mask(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    len: usize,
) -> Result<DecodeResult> {
    if len == 0 {
        return Err(NarError::Config("fixed_len must be >= 1".into()));
    }
    let rows = single_pass(model, eu, vec![MASK; len], DecoderMask::Padding(vec![len]))?;
    let (tokens, score, saw_eos) = read_rows(&rows, model.config.vocab_size, len);
    let mut r = blank_result();
    r.tokens = tokens;
    r.score = score;
    r.decoder_passes = 1;
    r.truncated = !saw_eos;
    Ok(r)
}

/// One pass whose decoder input is the encoder states at the CTC spike
/// frames. An empty CTC output costs zero decoder passes.
pub fn decode_spike_copy(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    ctc: &CtcGreedyResult,
) -> Result<DecodeResult> {
    let t = ctc.predicted_length();
    let mut r = blank_result();
    if t == 0 {
        return Ok(r);
    }
    let (mut sess, enc) = open_session(model, eu);
    let gathered = sess.gather_encoder_rows(&enc, 0, &ctc.spike_frames);
    let d = model.config.d_model;
    let input = sess.tape.reshape(gathered, vec![1, t, d]);
    let out = sess.decoder_forward_embedded(input, &DecoderMask::Padding(vec![t]), &enc)?;
    let rows = sess.tape.value(out).data().to_vec();
    let (tokens, score, _) = read_rows(&rows, model.config.vocab_size, t);
    r.tokens = tokens;
    r.score = score;
    r.decoder_passes = 1;
    Ok(r)
}

/// Iteratively re-fill the `masked` positions of `draft` over padding-mask
/// passes. Each pass commits the `ceil(n_masked / iterations)` fills with
/// the highest posterior, so at most `iterations` passes run; positions
/// that start unmasked are never revisited. Fills are restricted to
/// content tokens because the output length is fixed.
pub fn decode_mask_predict(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    draft: &[usize],
    masked: &[bool],
    iterations: usize,
) -> Result<DecodeResult> {
    if masked.len() != draft.len() {
        return Err(NarError::Contract(format!(
            "mask length {} does not match draft length {}",
            masked.len(),
            draft.len()
        )));
    }
    if iterations < 1 {
        return Err(NarError::Config("iterations must be >= 1".into()));
    }
    let vocab = model.config.vocab_size;
    let mut tokens = draft.to_vec();
    let mut remaining: Vec<usize> = (0..draft.len()).filter(|&i| masked[i]).collect();
    let mut r = blank_result();
    if remaining.is_empty() {
        r.tokens = tokens;
        return Ok(r);
    }
    let quota = remaining.len().div_ceil(iterations);
    let len = tokens.len();
    for it in 0..iterations {
        let mut input = tokens.clone();
        for &i in &remaining {
            input[i] = MASK;
        }
        let rows = single_pass(model, eu, input, DecoderMask::Padding(vec![len]))?;
        r.decoder_passes += 1;
        let mut fills: Vec<(f64, usize, usize)> = remaining
            .iter()
            .map(|&i| {
                let (tok, lp) = best_allowed(&rows[i * vocab..(i + 1) * vocab], false);
                (lp as f64, i, tok)
            })
            .collect();
        fills.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
        let commit = if it + 1 == iterations { fills.len() } else { quota.min(fills.len()) };
        for &(lp, i, tok) in fills.iter().take(commit) {
            tokens[i] = tok;
            r.score += lp;
            remaining.retain(|&j| j != i);
        }
        if remaining.is_empty() {
            break;
        }
    }
    r.tokens = tokens;
    Ok(r)
}

/// One causal pass over `[SOS, draft]`; position `i` re-predicts token
/// `i + 1` from the draft prefix, and the whole output is truncated at the
/// first EOS.
pub fn decode_causal_refine(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    draft: &[usize],
) -> Result<DecodeResult> {
    let mut input = Vec::with_capacity(draft.len() + 1);
    input.push(SOS);
    input.extend_from_slice(draft);
    let l = input.len();
    let rows = single_pass(model, eu, input, DecoderMask::Causal)?;
    let (tokens, score, saw_eos) = read_rows(&rows, model.config.vocab_size, l);
    let mut r = blank_result();
    r.tokens = tokens;
    r.score = score;
    r.decoder_passes = 1;
    r.truncated = !saw_eos;
    Ok(r)
}

/// One padding-mask pass over the draft itself; position `i` re-predicts
/// token `i` with bidirectional context.
pub fn decode_pm_refine(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    draft: &[usize],
) -> Result<DecodeResult> {
    let mut r = blank_result();
    if draft.is_empty() {
        return Ok(r);
    }
    let l = draft.len();
    let rows = single_pass(model, eu, draft.to_vec(), DecoderMask::Padding(vec![l]))?;
    let (tokens, score, _) = read_rows(&rows, model.config.vocab_size, l);
    r.tokens = tokens;
    r.score = score;
    r.decoder_passes = 1;
    Ok(r)
}

/// One padding-mask pass over `len` MASK inputs where `len` is the CTC
/// predicted length.
pub fn decode_mask_len(
    model: &Model<f32>,
    eu: &EncodedUtterance,
    len: usize,
) -> Result<DecodeResult> {
    let mut r = blank_result();
    if len == 0 {
        return Ok(r);
    }
    let rows = single_pass(model, eu, vec![MASK; len], DecoderMask::Padding(vec![len]))?;
    let (tokens, score, _) = read_rows(&rows, model.config.vocab_size, len);
    r.tokens = tokens;
    r.score = score;
    r.decoder_passes = 1;
    Ok(r)
}
