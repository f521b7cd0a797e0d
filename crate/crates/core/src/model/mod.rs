//! Transformer encoder-decoder with causal (CM) and padding (PM) decoder
//! attention regimes, a convolutional-style 4x frame subsampler and a CTC
//! projection head on the encoder.

mod checkpoint;

pub use checkpoint::{load_checkpoint, save_checkpoint};

use crate::data::PAD;
use crate::error::{NarError, Result};
use crate::numerics::{s, Scalar, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::HashMap;

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub encoder_layers: usize,
    pub decoder_layers: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub feat_dim: usize,
    /// Joint-training weight λ: loss = λ·ctc + (1−λ)·attention.
    pub ctc_weight: f64,
    /// Half-width of the encoder self-attention window in subsampled
    /// frames; `None` means global attention. A local (streaming-style)
    /// acoustic encoder keeps sequence-level disambiguation out of the CTC
    /// head — that is the decoder's job.
    pub encoder_window: Option<usize>,
}

impl ModelConfig {
    /// Desk-scale default sizes.
    pub fn desk(vocab_size: usize, feat_dim: usize) -> Self {
        // sized so that desk-scale training (single core, minutes) reaches
        // low CER: a wider/deeper net underfits badly in the same budget
        ModelConfig {
            d_model: 32,
            n_heads: 4,
            d_ff: 64,
            encoder_layers: 3,
            decoder_layers: 2,
            dropout: 0.1,
            vocab_size,
            feat_dim,
            ctc_weight: 0.3,
            encoder_window: Some(0),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model % self.n_heads != 0 {
            return Err(NarError::Contract(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.vocab_size < 5 {
            return Err(NarError::Contract(
                "vocab_size must be at least 5 (PAD, BLANK, SOS, EOS, MASK)".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(NarError::Contract("dropout must be in [0, 1)".into()));
        }
        if !(0.0..=1.0).contains(&self.ctc_weight) {
            return Err(NarError::Contract("ctc_weight must be in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Named parameter store with a stable iteration order.
#[derive(Clone)]
pub struct Params<T> {
    entries: Vec<(String, Tensor<T>)>,
    index: HashMap<String, usize>,
}

impl<T: Scalar> Params<T> {
    pub fn new() -> Self {
        Params {
            entries: Vec::new(),
            index: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: &str, tensor: Tensor<T>) {
        assert!(!self.index.contains_key(name), "duplicate param {name}");
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.entries[self.index[name]].1
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Tensor<T> {
        let i = self.index[name];
        &mut self.entries[i].1
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }
}

impl<T: Scalar> Default for Params<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[derive(Clone)]
pub struct Model<T> {
    pub config: ModelConfig,
    pub params: Params<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Decoder self-attention regime.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum DecoderMask {
    /// Causal Mask: position t sees positions 1..t only.
    Causal,
    /// Padding Mask: every position sees all real (non-pad) positions;
    /// one key length per batch row.
    Padding(Vec<usize>),
}

/// Boolean allowed-matrix over `[queries, keys]`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub queries: usize,
    pub keys: usize,
    /// row-major; `allowed[i*keys + j]` ⇔ query i may attend key j
    pub allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn allowed_at(&self, q: usize, k: usize) -> bool {
        self.allowed[q * self.keys + k]
    }
}

/// Lower-triangular allowed matrix: `allowed[i][j] ⇔ j ≤ i`.
pub fn build_causal_mask(l: usize) -> AttentionMask {
    assert!(l >= 1);
    let mut allowed = vec![false; l * l];
    for i in 0..l {
        for j in 0..=i {
            allowed[i * l + j] = true;
        }
    }
    AttentionMask {
        queries: l,
        keys: l,
        allowed,
    }
}

/// One mask per batch row: `allowed[i][j] ⇔ j < length`.
pub fn build_padding_mask(lengths: &[usize], l: usize) -> Result<Vec<AttentionMask>> {
    lengths
        .iter()
        .map(|&len| {
            if len == 0 {
                return Err(NarError::Contract("padding mask over zero length".into()));
            }
            if len > l {
                return Err(NarError::Contract(format!("length {len} exceeds L={l}")));
            }
            let mut allowed = vec![false; l * l];
            for i in 0..l {
                for j in 0..len {
                    allowed[i * l + j] = true;
                }
            }
            Ok(AttentionMask {
                queries: l,
                keys: l,
                allowed,
            })
        })
        .collect()
}

/// Encoder states with their validity mask. `states` is
/// `[batch, sub_frames, d_model]`; rows beyond `sub_lengths[b]` are padding
/// and are blocked from every attention read.
pub struct EncoderOutput {
    pub states: Var,
    pub sub_lengths: Vec<usize>,
    pub batch: usize,
    pub sub_frames: usize,
}

impl EncoderOutput {
    /// True at valid (non-pad) subsampled frames, `[batch, sub_frames]`.
    pub fn frame_mask(&self) -> Vec<bool> {
        let mut m = vec![false; self.batch * self.sub_frames];
        for b in 0..self.batch {
            for t in 0..self.sub_lengths[b] {
                m[b * self.sub_frames + t] = true;
            }
        }
        m
    }
}

/// Everything a single forward pass needs: the tape, the bound parameter
/// vars and the dropout state.
pub struct Session<'m, T: Scalar> {
    pub tape: Tape<T>,
    model: &'m Model<T>,
    vars: Vec<Var>,
    dropout_rng: Option<ChaCha8Rng>,
}

const NEG_FILL: f64 = -1e9;
const LN_EPS: f64 = 1e-6;

impl<T: Scalar> Model<T> {
    /// Fresh model with Xavier-uniform weights, deterministic per seed.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = Params::new();
        let c = &config;
        let d = c.d_model;

        fn linear<T: Scalar>(
            rng: &mut ChaCha8Rng,
            p: &mut Params<T>,
            name: &str,
            fan_in: usize,
            fan_out: usize,
        ) {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            let w: Vec<T> = (0..fan_in * fan_out)
                .map(|_| s(rng.gen_range(-limit..limit)))
                .collect();
            p.insert(&format!("{name}.w"), Tensor::new(vec![fan_in, fan_out], w));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![fan_out]));
        }
        fn norm<T: Scalar>(p: &mut Params<T>, name: &str, dim: usize) {
            p.insert(&format!("{name}.g"), Tensor::full(vec![dim], T::one()));
            p.insert(&format!("{name}.b"), Tensor::zeros(vec![dim]));
        }
        fn attention<T: Scalar>(rng: &mut ChaCha8Rng, p: &mut Params<T>, name: &str, d: usize) {
            for proj in ["q", "k", "v", "o"] {
                linear(rng, p, &format!("{name}.{proj}"), d, d);
            }
        }

        linear(&mut rng, &mut params, "enc.sub1", 2 * c.feat_dim, d);
        linear(&mut rng, &mut params, "enc.sub2", 2 * d, d);
        for i in 0..c.encoder_layers {
            attention(&mut rng, &mut params, &format!("enc.{i}.att"), d);
            norm(&mut params, &format!("enc.{i}.ln1"), d);
            linear(&mut rng, &mut params, &format!("enc.{i}.ff1"), d, c.d_ff);
            linear(&mut rng, &mut params, &format!("enc.{i}.ff2"), c.d_ff, d);
            norm(&mut params, &format!("enc.{i}.ln2"), d);
        }
        {
            let limit = (6.0 / (c.vocab_size + d) as f64).sqrt();
            let w: Vec<T> = (0..c.vocab_size * d)
                .map(|_| s(rng.gen_range(-limit..limit)))
                .collect();
            params.insert("dec.embed", Tensor::new(vec![c.vocab_size, d], w));
        }
        for i in 0..c.decoder_layers {
            attention(&mut rng, &mut params, &format!("dec.{i}.self"), d);
            norm(&mut params, &format!("dec.{i}.ln1"), d);
            attention(&mut rng, &mut params, &format!("dec.{i}.cross"), d);
            norm(&mut params, &format!("dec.{i}.ln2"), d);
            linear(&mut rng, &mut params, &format!("dec.{i}.ff1"), d, c.d_ff);
            linear(&mut rng, &mut params, &format!("dec.{i}.ff2"), c.d_ff, d);
            norm(&mut params, &format!("dec.{i}.ln3"), d);
        }
        linear(&mut rng, &mut params, "dec.out", d, c.vocab_size);
        linear(&mut rng, &mut params, "ctc.out", d, c.vocab_size);

        Ok(Model { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut params = Params::new();
        for (name, t) in self.params.iter() {
            params.insert(name, t.cast::<U>());
        }
        Model {
            config: self.config.clone(),
            params,
        }
    }

    /// Bind every parameter onto a fresh tape. Gradients are requested in
    /// `Train` mode; `Eval` mode disables both gradients and dropout.
    pub fn session(&self, mode: Mode, dropout_seed: u64) -> Session<'_, T> {
        let mut tape = Tape::new();
        let requires_grad = mode == Mode::Train;
        let vars = self
            .params
            .iter()
            .map(|(_, t)| tape.leaf(t.clone(), requires_grad))
            .collect();
        Session {
            tape,
            model: self,
            vars,
            dropout_rng: if mode == Mode::Train && self.config.dropout > 0.0 {
                Some(ChaCha8Rng::seed_from_u64(dropout_seed))
            } else {
                None
            },
        }
    }
}

impl<'m, T: Scalar> Session<'m, T> {
    pub fn config(&self) -> &ModelConfig {
        &self.model.config
    }

    pub fn var(&self, name: &str) -> Var {
        self.vars[self.model.params.index[name]]
    }

    /// (name, var) pairs in parameter order, for gradient extraction.
    pub fn param_vars(&self) -> Vec<(String, Var)> {
        self.model
            .params
            .iter()
            .zip(&self.vars)
            .map(|((n, _), &v)| (n.to_string(), v))
            .collect()
    }

    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.var(&format!("{name}.w"));
        let b = self.var(&format!("{name}.b"));
        let y = self.tape.matmul(x, w);
        self.tape.add(y, b)
    }

    fn norm(&mut self, x: Var, name: &str) -> Var {
        let g = self.var(&format!("{name}.g"));
        let b = self.var(&format!("{name}.b"));
        self.tape.layer_norm(x, g, b, s(LN_EPS))
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.model.config.dropout;
        let rng = match &mut self.dropout_rng {
            Some(rng) if p > 0.0 => rng,
            _ => return x,
        };
        let shape = self.tape.value(x).shape().to_vec();
        let keep = T::one() / s::<T>(1.0 - p);
        let mask: Vec<T> = (0..shape.iter().product())
            .map(|_| if rng.gen_range(0.0..1.0) < p { T::zero() } else { keep })
            .collect();
        let m = self.tape.constant(Tensor::new(shape, mask));
        self.tape.mul(x, m)
    }

    /// Multi-head attention. `blocked` is `[batch, q_len, k_len]`, true
    /// where attention is forbidden.
    fn attention(
        &mut self,
        name: &str,
        queries: Var,
        keys_values: Var,
        blocked: &[bool],
    ) -> Var {
        let h = self.model.config.n_heads;
        let d = self.model.config.d_model;
        let dh = d / h;
        let q_shape = self.tape.value(queries).shape().to_vec();
        let kv_shape = self.tape.value(keys_values).shape().to_vec();
        let (b, lq, lk) = (q_shape[0], q_shape[1], kv_shape[1]);

        let q = self.linear(queries, &format!("{name}.q"));
        let k = self.linear(keys_values, &format!("{name}.k"));
        let v = self.linear(keys_values, &format!("{name}.v"));
        let split = |sess: &mut Self, x: Var, l: usize| {
            let r = sess.tape.reshape(x, vec![b, l, h, dh]);
            sess.tape.permute(r, &[0, 2, 1, 3]) // [b, h, l, dh]
        };
        let q = split(self, q, lq);
        let k = split(self, k, lk);
        let v = split(self, v, lk);

        let kt = self.tape.transpose_last(k);
        let scores = self.tape.matmul(q, kt);
        let scores = self.tape.scale(scores, T::one() / s::<T>((dh as f64).sqrt()));
        let scores = self
            .tape
            .masked_fill(scores, blocked, &[b, lq, lk], s(NEG_FILL));
        let attn = self.tape.softmax(scores);
        let ctx = self.tape.matmul(attn, v);
        let ctx = self.tape.permute(ctx, &[0, 2, 1, 3]);
        let ctx = self.tape.reshape(ctx, vec![b, lq, d]);
        self.linear(ctx, &format!("{name}.o"))
    }

    fn feed_forward(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.ff1"));
        let h = self.tape.relu(h);
        self.linear(h, &format!("{prefix}.ff2"))
    }

    fn residual_norm(&mut self, x: Var, sub: Var, ln: &str) -> Var {
        let sub = self.dropout(sub);
        let sum = self.tape.add(x, sub);
        self.norm(sum, ln)
    }

    /// Encode padded features `[batch, frames, feat_dim]` into subsampled
    /// states `[batch, ceil(frames/4), d_model]`.
    pub fn encode(&mut self, features: &Tensor<T>, lengths: &[usize]) -> Result<EncoderOutput> {
        let shape = features.shape().to_vec();
        if shape.len() != 3 {
            return Err(NarError::Contract("features must be [batch, frames, feat_dim]".into()));
        }
        let (batch, frames, feat_dim) = (shape[0], shape[1], shape[2]);
        if feat_dim != self.model.config.feat_dim {
            return Err(NarError::Contract(format!(
                "feat_dim {feat_dim} does not match model {}",
                self.model.config.feat_dim
            )));
        }
        if lengths.len() != batch || lengths.iter().any(|&l| l == 0 || l > frames) {
            return Err(NarError::Contract(
                "feature lengths must be in 1..=frames per utterance".into(),
            ));
        }
        features.check_finite("encoder input")?;

        // pad the frame axis to a multiple of 4 for the two stride-2 blocks
        let padded_frames = frames.next_multiple_of(4);
        let feats = if padded_frames == frames {
            features.clone()
        } else {
            let mut out = Tensor::zeros(vec![batch, padded_frames, feat_dim]);
            for b in 0..batch {
                let src = &features.data()[b * frames * feat_dim..(b + 1) * frames * feat_dim];
                out.data_mut()[b * padded_frames * feat_dim..b * padded_frames * feat_dim + src.len()]
                    .copy_from_slice(src);
            }
            out
        };
        let x = self.tape.constant(feats);

        // two stride-2 kernel-2 blocks: frame pairs stacked then projected
        let x = self.tape.reshape(x, vec![batch, padded_frames / 2, 2 * feat_dim]);
        let x = self.linear(x, "enc.sub1");
        let x = self.tape.relu(x);
        let d = self.model.config.d_model;
        let sub_frames = padded_frames / 4;
        let x = self.tape.reshape(x, vec![batch, sub_frames, 2 * d]);
        let x = self.linear(x, "enc.sub2");
        let x = self.tape.relu(x);

        let pe = self.tape.constant(positional_encoding::<T>(sub_frames, d));
        let x = self.tape.add(x, pe);
        let mut x = self.dropout(x);

        let sub_lengths: Vec<usize> = lengths.iter().map(|&l| l.div_ceil(4)).collect();
        let mut blocked = key_padding_blocked(&sub_lengths, sub_frames, sub_frames);
        if let Some(w) = self.model.config.encoder_window {
            for b in 0..batch {
                for q in 0..sub_frames {
                    for k in 0..sub_frames {
                        if q.abs_diff(k) > w {
                            blocked[(b * sub_frames + q) * sub_frames + k] = true;
                        }
                    }
                }
            }
        }
        for i in 0..self.model.config.encoder_layers {
            let att = self.attention(&format!("enc.{i}.att"), x, x, &blocked);
            x = self.residual_norm(x, att, &format!("enc.{i}.ln1"));
            let ff = self.feed_forward(x, &format!("enc.{i}"));
            x = self.residual_norm(x, ff, &format!("enc.{i}.ln2"));
        }
        Ok(EncoderOutput {
            states: x,
            sub_lengths,
            batch,
            sub_frames,
        })
    }

    /// Per-frame log-posteriors over the vocabulary (incl. BLANK),
    /// `[batch, sub_frames, vocab]`.
    pub fn ctc_head(&mut self, enc: &EncoderOutput) -> Var {
        let logits = self.linear(enc.states, "ctc.out");
        self.tape.log_softmax(logits)
    }

    /// Decoder pass over token ids `[batch][l]`, all rows the same length.
    /// Output is `[batch, l, vocab]` log-probabilities.
    pub fn decoder_forward(
        &mut self,
        tokens: &[Vec<usize>],
        mask: &DecoderMask,
        enc: &EncoderOutput,
    ) -> Result<Var> {
        let batch = tokens.len();
        if batch == 0 || tokens[0].is_empty() {
            return Err(NarError::Contract("decoder needs at least one token".into()));
        }
        let l = tokens[0].len();
        if tokens.iter().any(|row| row.len() != l) {
            return Err(NarError::Contract("ragged decoder input".into()));
        }
        let vocab = self.model.config.vocab_size;
        if tokens.iter().flatten().any(|&t| t >= vocab) {
            return Err(NarError::Contract("token id out of vocab range".into()));
        }
        let d = self.model.config.d_model;
        let ids: Vec<usize> = tokens.iter().flatten().copied().collect();
        let embed_w = self.var("dec.embed");
        let emb = self.tape.embedding(embed_w, &ids);
        let emb = self.tape.reshape(emb, vec![batch, l, d]);
        let emb = self.tape.scale(emb, s((d as f64).sqrt()));
        self.decoder_stack(emb, mask, enc)
    }

    /// Decoder pass from raw input embeddings (spike-triggered copy path).
    pub fn decoder_forward_embedded(
        &mut self,
        input: Var,
        mask: &DecoderMask,
        enc: &EncoderOutput,
    ) -> Result<Var> {
        self.decoder_stack(input, mask, enc)
    }

    fn decoder_stack(&mut self, input: Var, mask: &DecoderMask, enc: &EncoderOutput) -> Result<Var> {
        let shape = self.tape.value(input).shape().to_vec();
        let (batch, l, d) = (shape[0], shape[1], shape[2]);
        assert_eq!(d, self.model.config.d_model);
        if batch != enc.batch {
            return Err(NarError::Contract("decoder/encoder batch mismatch".into()));
        }

        let self_blocked: Vec<bool> = match mask {
            DecoderMask::Causal => {
                let m = build_causal_mask(l);
                let mut out = Vec::with_capacity(batch * l * l);
                for _ in 0..batch {
                    out.extend(m.allowed.iter().map(|&a| !a));
                }
                out
            }
            DecoderMask::Padding(lengths) => {
                if lengths.len() != batch {
                    return Err(NarError::Contract("padding-mask lengths/batch mismatch".into()));
                }
                let masks = build_padding_mask(lengths, l)?;
                let mut out = Vec::with_capacity(batch * l * l);
                for m in &masks {
                    out.extend(m.allowed.iter().map(|&a| !a));
                }
                out
            }
        };
        // cross-attention always blocks padded encoder frames
        let cross_blocked = key_padding_blocked(&enc.sub_lengths, l, enc.sub_frames);

        let pe = self.tape.constant(positional_encoding::<T>(l, d));
        let x = self.tape.add(input, pe);
        let mut x = self.dropout(x);
        for i in 0..self.model.config.decoder_layers {
            let att = self.attention(&format!("dec.{i}.self"), x, x, &self_blocked);
            x = self.residual_norm(x, att, &format!("dec.{i}.ln1"));
            let cross = self.attention(&format!("dec.{i}.cross"), x, enc.states, &cross_blocked);
            x = self.residual_norm(x, cross, &format!("dec.{i}.ln2"));
            let ff = self.feed_forward(x, &format!("dec.{i}"));
            x = self.residual_norm(x, ff, &format!("dec.{i}.ln3"));
        }
        let logits = self.linear(x, "dec.out");
        Ok(self.tape.log_softmax(logits))
    }

    /// Re-import previously computed encoder states (e.g. extracted from
    /// another session) as a constant for decoder passes on this tape.
    pub fn import_encoder(&mut self, states: Tensor<T>, sub_lengths: Vec<usize>) -> EncoderOutput {
        let shape = states.shape().to_vec();
        assert_eq!(shape.len(), 3);
        assert_eq!(shape[0], sub_lengths.len());
        let var = self.tape.constant(states);
        EncoderOutput {
            states: var,
            sub_lengths,
            batch: shape[0],
            sub_frames: shape[1],
        }
    }

    /// Gather the valid rows of one utterance's encoder states as a
    /// `[n, d_model]` var (used by spike-triggered copy).
    pub fn gather_encoder_rows(&mut self, enc: &EncoderOutput, batch_idx: usize, rows: &[usize]) -> Var {
        let d = self.model.config.d_model;
        let flat = self
            .tape
            .reshape(enc.states, vec![enc.batch * enc.sub_frames, d]);
        let global: Vec<usize> = rows
            .iter()
            .map(|&r| batch_idx * enc.sub_frames + r)
            .collect();
        self.tape.gather_rows(flat, &global)
    }
}

/// Blocked mask `[batch, q_len, k_len]` from per-row valid key counts.
fn key_padding_blocked(key_lengths: &[usize], q_len: usize, k_len: usize) -> Vec<bool> {
    let batch = key_lengths.len();
    let mut blocked = vec![false; batch * q_len * k_len];
    for (b, &len) in key_lengths.iter().enumerate() {
        for q in 0..q_len {
            for k in len..k_len {
                blocked[(b * q_len + q) * k_len + k] = true;
            }
        }
    }
    blocked
}

/// Sinusoidal positional encoding `[len, d]`, computed at f64 then cast.
fn positional_encoding<T: Scalar>(len: usize, d: usize) -> Tensor<T> {
    let mut data = Vec::with_capacity(len * d);
    for pos in 0..len {
        for i in 0..d {
            let angle = pos as f64 / 10000f64.powf((2 * (i / 2)) as f64 / d as f64);
            data.push(s(if i % 2 == 0 { angle.sin() } else { angle.cos() }));
        }
    }
    Tensor::new(vec![len, d], data)
}

/// Decoder input padding id shared with data::PAD.
pub const PAD_ID: usize = PAD;

#[cfg(test)]
mod tests;
