//! Joint CTC + attention training with the decoder-input regimes that
//! mirror each inference strategy: teacher forcing, on-the-fly CTC-output
//! sampling (causal or bidirectional), all-mask forcing, and random-mask
//! prediction.
//!
//! One loss everywhere: `ctc_weight * L_ctc + (1 - ctc_weight) * L_att`,
//! where `L_att` uses label smoothing and ignores padded targets, and
//! utterances whose target cannot align to the subsampled frames simply
//! drop out of the CTC term for that step. The optimizer is Adam under an
//! inverse-square-root warmup schedule with global-norm gradient clipping.

use crate::ctc::{ctc_greedy, ctc_loss, SpikeMode};
use crate::data::{collate, spec_augment, Batch, Utterance, BLANK, EOS, MASK, PAD, SOS};
use crate::error::{NarError, Result};
use crate::model::{DecoderMask, Mode, Model, Session};
use crate::numerics::{s, Scalar, Tensor, Var};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

/// How decoder inputs and targets are built from a batch during training.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TrainStrategy {
    /// Causal decoder over `[SOS, y]`, predicting `[y, EOS]`.
    TeacherForcingCm,
    /// Causal decoder whose input prefix is the model's own CTC greedy
    /// output (length-adjusted), falling back to the ground truth when the
    /// CTC length is off by more than the tolerance.
    CtcSamplingCm,
    /// Bidirectional decoder over the CTC greedy output, re-predicting
    /// every position of `y` (no EOS; the length is given by the input).
    CtcSamplingPm,
    /// Bidirectional decoder over all-MASK input, predicting `[y, EOS]`
    /// from audio alone.
    MaskForcingPm,
    /// Bidirectional decoder over `y` with a random subset replaced by
    /// MASK; only the masked positions are supervised.
    MaskPredictPm,
}

impl TrainStrategy {
    pub const ALL: [TrainStrategy; 5] = [
        TrainStrategy::TeacherForcingCm,
        TrainStrategy::CtcSamplingCm,
        TrainStrategy::CtcSamplingPm,
        TrainStrategy::MaskForcingPm,
        TrainStrategy::MaskPredictPm,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TrainStrategy::TeacherForcingCm => "teacher-forcing-cm",
            TrainStrategy::CtcSamplingCm => "ctc-sampling-cm",
            TrainStrategy::CtcSamplingPm => "ctc-sampling-pm",
            TrainStrategy::MaskForcingPm => "mask-forcing-pm",
            TrainStrategy::MaskPredictPm => "mask-predict-pm",
        }
    }

    pub fn parse(s: &str) -> Result<TrainStrategy> {
        TrainStrategy::ALL
            .iter()
            .copied()
            .find(|st| st.name() == s)
            .ok_or_else(|| {
                let names: Vec<&str> = TrainStrategy::ALL.iter().map(|s| s.name()).collect();
                NarError::Config(format!(
                    "unknown training strategy '{s}' (expected one of: {})",
                    names.join(", ")
                ))
            })
    }

    /// Whether this strategy feeds the model's own CTC output back in.
    pub fn samples_ctc(&self) -> bool {
        matches!(self, TrainStrategy::CtcSamplingCm | TrainStrategy::CtcSamplingPm)
    }
}

impl std::fmt::Display for TrainStrategy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrainConfig {
    pub strategy: TrainStrategy,
    pub epochs: usize,
    pub batch_size: usize,
    /// Multiplier on the warmup schedule's base rate.
    pub lr_scale: f64,
    pub warmup_steps: usize,
    /// Global-norm gradient clip.
    pub grad_clip: f64,
    pub label_smoothing: f64,
    /// First epoch (0-based) at which CTC-sampling strategies switch from
    /// ground-truth inputs to the model's own CTC output.
    pub sampling_start_epoch: usize,
    /// CTC drafts whose length differs from the target's by more than this
    /// fall back to the ground truth for that utterance.
    pub length_tolerance: usize,
    pub seed: u64,
    /// Apply time/feature masking to the input features.
    pub spec_augment: bool,
}

impl TrainConfig {
    pub fn new(strategy: TrainStrategy) -> Self {
        TrainConfig {
            strategy,
            epochs: 180,
            batch_size: 16,
            lr_scale: 1.0,
            warmup_steps: 800,
            grad_clip: 5.0,
            label_smoothing: 0.1,
            sampling_start_epoch: 5,
            length_tolerance: 2,
            seed: 1,
            spec_augment: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 || self.batch_size < 1 || self.warmup_steps < 1 {
            return Err(NarError::Config(
                "epochs, batch_size and warmup_steps must be >= 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(NarError::Config("label_smoothing must be in [0, 1)".into()));
        }
        if self.grad_clip <= 0.0 || self.lr_scale <= 0.0 {
            return Err(NarError::Config("grad_clip and lr_scale must be > 0".into()));
        }
        Ok(())
    }
}

/// Decoder inputs/targets for one batch. Target id PAD marks unsupervised
/// positions.
#[derive(Clone, Debug)]
pub struct DecoderIo {
    pub inputs: Vec<Vec<usize>>,
    pub targets: Vec<Vec<usize>>,
    pub mask: DecoderMask,
    /// Fraction of utterances whose input came from the model's own CTC
    /// output rather than the ground truth.
    pub ctc_input_ratio: f64,
}

/// Truncate or EOS-pad a CTC draft to exactly `len` tokens.
fn adjust_draft(draft: &[usize], len: usize) -> Vec<usize> {
    let mut out: Vec<usize> = draft.iter().copied().take(len).collect();
    out.resize(len, EOS);
    out
}

/// Build decoder inputs and targets for `targets` (unpadded, one row per
/// utterance). `drafts` are CTC greedy outputs when sampling is active.
pub fn build_decoder_io(
    strategy: TrainStrategy,
    targets: &[Vec<usize>],
    drafts: Option<&[Vec<usize>]>,
    length_tolerance: usize,
    rng: &mut ChaCha8Rng,
) -> DecoderIo {
    let batch = targets.len();
    let max_t = targets.iter().map(|t| t.len()).max().unwrap_or(0);
    let mut io = DecoderIo {
        inputs: Vec::with_capacity(batch),
        targets: Vec::with_capacity(batch),
        mask: DecoderMask::Causal,
        ctc_input_ratio: 0.0,
    };
    let mut sampled = 0usize;
    // per-utterance sampled input of length T, ground truth fallback
    let sampled_input = |b: usize, sampled: &mut usize| -> Vec<usize> {
        let y = &targets[b];
        match drafts.map(|d| &d[b]) {
            Some(d) if y.len().abs_diff(d.len()) <= length_tolerance => {
                *sampled += 1;
                adjust_draft(d, y.len())
            }
            _ => y.clone(),
        }
    };
    match strategy {
        TrainStrategy::TeacherForcingCm | TrainStrategy::CtcSamplingCm => {
            for (b, y) in targets.iter().enumerate() {
                let body = if strategy == TrainStrategy::CtcSamplingCm {
                    sampled_input(b, &mut sampled)
                } else {
                    y.clone()
                };
                let mut input = Vec::with_capacity(max_t + 1);
                input.push(SOS);
                input.extend_from_slice(&body);
                input.resize(max_t + 1, PAD);
                let mut target = y.clone();
                target.push(EOS);
                target.resize(max_t + 1, PAD);
                io.inputs.push(input);
                io.targets.push(target);
            }
            io.mask = DecoderMask::Causal;
        }
        TrainStrategy::CtcSamplingPm => {
            let lengths: Vec<usize> = targets.iter().map(|y| y.len()).collect();
            for (b, y) in targets.iter().enumerate() {
                let mut input = sampled_input(b, &mut sampled);
                input.resize(max_t, PAD);
                let mut target = y.clone();
                target.resize(max_t, PAD);
                io.inputs.push(input);
                io.targets.push(target);
            }
            io.mask = DecoderMask::Padding(lengths);
        }
        TrainStrategy::MaskForcingPm => {
            // the mask spans the whole padded row so EOS placement must be
            // read off the audio, not off the visible input length
            for y in targets {
                io.inputs.push(vec![MASK; max_t + 1]);
                let mut target = y.clone();
                target.push(EOS);
                target.resize(max_t + 1, PAD);
                io.targets.push(target);
            }
            io.mask = DecoderMask::Padding(vec![max_t + 1; batch]);
        }
        TrainStrategy::MaskPredictPm => {
            let lengths: Vec<usize> = targets.iter().map(|y| y.len()).collect();
            for y in targets {
                let t = y.len();
                let n_mask = rng.gen_range(1..=t);
                let mut order: Vec<usize> = (0..t).collect();
                order.shuffle(rng);
                let mut input = y.clone();
                let mut target = vec![PAD; t];
                for &i in order.iter().take(n_mask) {
                    input[i] = MASK;
                    target[i] = y[i];
                }
                input.resize(max_t, PAD);
                target.resize(max_t, PAD);
                io.inputs.push(input);
                io.targets.push(target);
            }
            io.mask = DecoderMask::Padding(lengths);
        }
    }
    if strategy.samples_ctc() && batch > 0 {
        io.ctc_input_ratio = sampled as f64 / batch as f64;
    }
    io
}

/// The joint objective assembled on a session's tape.
pub struct JointLoss<T: Scalar> {
    pub total: Var,
    pub ctc_value: T,
    pub att_value: T,
    /// Utterances whose CTC alignment was feasible this step.
    pub ctc_used: usize,
}

/// Forward pass and loss for one batch. Generic over the scalar so the
/// whole objective can be gradient-checked in f64.
pub fn joint_loss<T: Scalar>(
    sess: &mut Session<'_, T>,
    features: &Tensor<T>,
    feat_lengths: &[usize],
    ctc_targets: &[Vec<usize>],
    io: &DecoderIo,
    label_smoothing: f64,
) -> Result<JointLoss<T>> {
    let enc = sess.encode(features, feat_lengths)?;
    let vocab = sess.config().vocab_size;
    let lambda = sess.config().ctc_weight;

    let head = sess.ctc_head(&enc);
    let flat_head = sess
        .tape
        .reshape(head, vec![enc.batch * enc.sub_frames, vocab]);
    let mut ctc_terms: Vec<Var> = Vec::new();
    let mut ctc_value = T::zero();
    for (b, target) in ctc_targets.iter().enumerate() {
        let rows: Vec<usize> = (0..enc.sub_lengths[b])
            .map(|t| b * enc.sub_frames + t)
            .collect();
        let posts = sess.tape.gather_rows(flat_head, &rows);
        let term = ctc_loss(&mut sess.tape, posts, target, BLANK)?;
        let v = sess.tape.value(term).item();
        if v.is_finite() {
            ctc_terms.push(term);
            ctc_value = ctc_value + v;
        }
    }
    let ctc_used = ctc_terms.len();
    if ctc_used > 0 {
        ctc_value = ctc_value / s(ctc_used as f64);
    }

    let dec = sess.decoder_forward(&io.inputs, &io.mask, &enc)?;
    let positions = io.inputs.len() * io.inputs[0].len();
    let flat_dec = sess.tape.reshape(dec, vec![positions, vocab]);
    let flat_targets: Vec<usize> = io.targets.iter().flatten().copied().collect();
    let att = sess
        .tape
        .label_smoothed_nll(flat_dec, &flat_targets, s(label_smoothing), PAD)?;
    let att_value = sess.tape.value(att).item();

    let mut total = sess.tape.scale(att, s(1.0 - lambda));
    if ctc_used > 0 {
        let mut ctc_sum = ctc_terms[0];
        for &t in &ctc_terms[1..] {
            ctc_sum = sess.tape.add(ctc_sum, t);
        }
        let ctc_mean = sess.tape.scale(ctc_sum, s::<T>(lambda) / s(ctc_used as f64));
        total = sess.tape.add(total, ctc_mean);
    }
    Ok(JointLoss { total, ctc_value, att_value, ctc_used })
}

/// Adam with inverse-square-root warmup and global-norm clipping.
pub struct Optimizer {
    step: usize,
    m: Vec<Tensor<f32>>,
    v: Vec<Tensor<f32>>,
    d_model: usize,
    lr_scale: f64,
    warmup_steps: usize,
    grad_clip: f64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;

impl Optimizer {
    pub fn new(model: &Model<f32>, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Tensor<f32>> = model
            .params
            .iter()
            .map(|(_, t)| Tensor::zeros(t.shape().to_vec()))
            .collect();
        Optimizer {
            step: 0,
            m: zeros.clone(),
            v: zeros,
            d_model: model.config.d_model,
            lr_scale: cfg.lr_scale,
            warmup_steps: cfg.warmup_steps,
            grad_clip: cfg.grad_clip,
        }
    }

    /// Learning rate after `step` updates (1-based).
    pub fn lr_at(&self, step: usize) -> f64 {
        let s = step as f64;
        let w = self.warmup_steps as f64;
        self.lr_scale * (self.d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * w.powf(-1.5))
    }

    pub fn steps_taken(&self) -> usize {
        self.step
    }

    /// One update; `grads` aligned with the model's parameter order.
    pub fn apply(&mut self, model: &mut Model<f32>, grads: &[Tensor<f32>]) -> f64 {
        assert_eq!(grads.len(), model.params.len());
        self.step += 1;
        let lr = self.lr_at(self.step);
        let norm: f64 = grads
            .iter()
            .flat_map(|g| g.data())
            .map(|&g| (g as f64) * (g as f64))
            .sum::<f64>()
            .sqrt();
        let clip = if norm > self.grad_clip { self.grad_clip / norm } else { 1.0 };
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for (i, (_, p)) in model.params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (j, x) in p.data_mut().iter_mut().enumerate() {
                let g = grads[i].data()[j] as f64 * clip;
                let mj = ADAM_BETA1 * m[j] as f64 + (1.0 - ADAM_BETA1) * g;
                let vj = ADAM_BETA2 * v[j] as f64 + (1.0 - ADAM_BETA2) * g * g;
                m[j] = mj as f32;
                v[j] = vj as f32;
                *x -= (lr * (mj / bc1) / ((vj / bc2).sqrt() + ADAM_EPS)) as f32;
            }
        }
        lr
    }
}

/// One row of the training log.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LogRow {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
    pub ctc_loss: f64,
    pub att_loss: f64,
    pub ctc_input_ratio: f64,
}

#[derive(Clone, Debug)]
pub struct TrainReport {
    pub log: Vec<LogRow>,
    pub steps: usize,
    /// Steps abandoned because the loss was non-finite.
    pub skipped_steps: usize,
    /// Mean loss over the final epoch.
    pub final_epoch_loss: f64,
}

/// CSV with one row per step.
pub fn write_training_log(path: &Path, log: &[LogRow]) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(f, "step,epoch,lr,loss,ctc_loss,att_loss,ctc_input_ratio")?;
    for r in log {
        writeln!(
            f,
            "{},{},{},{},{},{},{}",
            r.step, r.epoch, r.lr, r.loss, r.ctc_loss, r.att_loss, r.ctc_input_ratio
        )?;
    }
    Ok(())
}

/// CTC greedy outputs for every utterance of a batch under the current
/// model, for sampling strategies.
fn ctc_drafts(model: &Model<f32>, batch: &Batch) -> Result<Vec<Vec<usize>>> {
    let mut sess = model.session(Mode::Eval, 0);
    let enc = sess.encode(&batch.features, &batch.feat_lengths)?;
    let head = sess.ctc_head(&enc);
    let posts = sess.tape.value(head);
    let vocab = model.config.vocab_size;
    Ok((0..batch.size())
        .map(|b| {
            let n = enc.sub_lengths[b];
            let row = b * enc.sub_frames;
            let lp = Tensor::new(
                vec![n, vocab],
                posts.data()[row * vocab..(row + n) * vocab].to_vec(),
            );
            ctc_greedy(&lp, n, BLANK, SpikeMode::RunPeak).tokens
        })
        .collect())
}

fn trimmed_targets(batch: &Batch) -> Vec<Vec<usize>> {
    batch
        .targets
        .iter()
        .zip(&batch.target_lengths)
        .map(|(t, &n)| t[..n].to_vec())
        .collect()
}

/// Full training loop; deterministic per config seed.
pub fn train(model: &mut Model<f32>, utts: &[Utterance], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if utts.is_empty() {
        return Err(NarError::Contract("cannot train on an empty set".into()));
    }
    let mut opt = Optimizer::new(model, cfg);
    let mut report = TrainReport {
        log: Vec::new(),
        steps: 0,
        skipped_steps: 0,
        final_epoch_loss: f64::NAN,
    };
    for epoch in 0..cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..utts.len()).collect();
        order.shuffle(&mut rng);
        let sampling = cfg.strategy.samples_ctc() && epoch >= cfg.sampling_start_epoch;
        let mut epoch_loss = 0.0f64;
        let mut epoch_batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let members: Vec<&Utterance> = chunk.iter().map(|&i| &utts[i]).collect();
            let mut batch = collate(&members);
            if cfg.spec_augment {
                spec_augment(&mut batch.features, 2, 4, 1, 2, &mut rng);
            }
            let drafts = if sampling { Some(ctc_drafts(model, &batch)?) } else { None };
            let targets = trimmed_targets(&batch);
            let io = build_decoder_io(
                cfg.strategy,
                &targets,
                drafts.as_deref(),
                cfg.length_tolerance,
                &mut rng,
            );

            let step_seed = cfg.seed ^ (report.steps as u64).wrapping_mul(0x9e3779b97f4a7c15);
            let (loss_value, parts, grads) = {
                let mut sess = model.session(Mode::Train, step_seed);
                let parts = joint_loss(
                    &mut sess,
                    &batch.features,
                    &batch.feat_lengths,
                    &targets,
                    &io,
                    cfg.label_smoothing,
                )?;
                let loss_value = sess.tape.value(parts.total).item() as f64;
                if !loss_value.is_finite() {
                    (loss_value, parts, None)
                } else {
                    let g = sess.tape.backward(parts.total)?;
                    let tensors: Vec<Tensor<f32>> = sess
                        .param_vars()
                        .iter()
                        .map(|&(_, v)| g.grad(v).clone())
                        .collect();
                    (loss_value, parts, Some(tensors))
                }
            };
            let Some(grads) = grads else {
                report.skipped_steps += 1;
                continue;
            };
            let lr = opt.apply(model, &grads);
            report.steps += 1;
            epoch_loss += loss_value;
            epoch_batches += 1;
            report.log.push(LogRow {
                step: report.steps,
                epoch,
                lr,
                loss: loss_value,
                ctc_loss: parts.ctc_value as f64,
                att_loss: parts.att_value as f64,
                ctc_input_ratio: io.ctc_input_ratio,
            });
        }
        if epoch_batches > 0 {
            report.final_epoch_loss = epoch_loss / epoch_batches as f64;
        }
    }
    Ok(report)
}
