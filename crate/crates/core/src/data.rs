//! Synthetic speech-like corpus, vocabulary, batching and feature masking.
//!
//! Each content token owns a fixed prototype vector; an utterance is the
//! concatenation of its tokens' prototypes, each repeated for a random
//! number of frames, plus Gaussian noise. The corpus is committed as a
//! generation recipe (seed + parameters), never as binary data.

use crate::error::{NarError, Result};
use crate::numerics::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const PAD: usize = 0;
pub const BLANK: usize = 1;
pub const SOS: usize = 2;
pub const EOS: usize = 3;
pub const MASK: usize = 4;
/// First content token id.
pub const CONTENT_BASE: usize = 5;

/// Token inventory with the reserved PAD/BLANK/SOS/EOS/MASK ids shared by
/// CTC and the decoder.
#[derive(Clone, Debug)]
pub struct Vocab {
    n_content: usize,
}

impl Vocab {
    pub fn new(n_content: usize) -> Result<Self> {
        if n_content < 1 {
            return Err(NarError::Contract("vocab needs at least 1 content token".into()));
        }
        Ok(Vocab { n_content })
    }

    pub fn size(&self) -> usize {
        CONTENT_BASE + self.n_content
    }

    pub fn n_content(&self) -> usize {
        self.n_content
    }

    pub fn is_content(&self, id: usize) -> bool {
        (CONTENT_BASE..self.size()).contains(&id)
    }

    pub fn token_name(&self, id: usize) -> String {
        match id {
            PAD => "<pad>".into(),
            BLANK => "<blank>".into(),
            SOS => "<sos>".into(),
            EOS => "<eos>".into(),
            MASK => "<mask>".into(),
            _ => format!("t{}", id - CONTENT_BASE),
        }
    }

    pub fn token_id(&self, name: &str) -> Option<usize> {
        match name {
            "<pad>" => Some(PAD),
            "<blank>" => Some(BLANK),
            "<sos>" => Some(SOS),
            "<eos>" => Some(EOS),
            "<mask>" => Some(MASK),
            _ => name
                .strip_prefix('t')
                .and_then(|n| n.parse::<usize>().ok())
                .filter(|&n| n < self.n_content)
                .map(|n| n + CONTENT_BASE),
        }
    }
}

/// One synthetic utterance: features plus its content-token transcript.
#[derive(Clone, Debug)]
pub struct Utterance {
    pub utt_id: String,
    /// `[frames, feat_dim]`
    pub features: Tensor<f32>,
    /// Nominal seconds per frame; gives RTF a well-defined denominator.
    pub frame_duration: f64,
    pub target: Vec<usize>,
}

impl Utterance {
    pub fn frames(&self) -> usize {
        self.features.shape()[0]
    }

    pub fn duration_s(&self) -> f64 {
        self.frames() as f64 * self.frame_duration
    }
}

/// Generator recipe. Serialized alongside the manifest so features are
/// regenerable from the seed.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct CorpusConfig {
    pub seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub n_content_tokens: usize,
    pub feat_dim: usize,
    pub len_min: usize,
    pub len_max: usize,
    pub frames_per_token_min: usize,
    pub frames_per_token_max: usize,
    pub noise_std: f64,
    pub prototype_std: f64,
    pub frame_duration: f64,
    /// Token-sequence structure: each content token allows this many
    /// distinct successors (never itself), sampled once per corpus from the
    /// seed. 0 means unconstrained (any non-duplicate successor). Structure
    /// in the targets is what lets the attention decoder improve on the
    /// purely framewise CTC output.
    #[serde(default = "default_branching")]
    pub branching: usize,
    /// This many token pairs share one feature prototype (tokens 0/1, 2/3,
    /// ...). Acoustics alone cannot tell the members of a pair apart; only
    /// sequence context can, which is exactly where a decoder with learned
    /// transition structure beats a framewise CTC readout.
    #[serde(default = "default_homophone_pairs")]
    pub homophone_pairs: usize,
}

fn default_branching() -> usize {
    4
}

fn default_homophone_pairs() -> usize {
    2
}

impl Default for CorpusConfig {
    fn default() -> Self {
        CorpusConfig {
            seed: 17,
            n_train: 1200,
            n_test: 200,
            n_content_tokens: 20,
            feat_dim: 8,
            len_min: 4,
            len_max: 10,
            // constant durations that match the 4x subsampling grid (two
            // subsampled frames per token) keep the audio-to-token alignment
            // position-predictable, which the attention decoder needs to
            // reach low CER within the desk-scale training budget
            frames_per_token_min: 8,
            frames_per_token_max: 8,
            noise_std: 0.3,
            prototype_std: 0.5,
            frame_duration: 0.01,
            branching: default_branching(),
            homophone_pairs: default_homophone_pairs(),
        }
    }
}

pub struct Corpus {
    pub config: CorpusConfig,
    pub vocab: Vocab,
    pub train: Vec<Utterance>,
    pub test: Vec<Utterance>,
}

/// Deterministic corpus generation from the recipe. Train and test draw
/// from disjoint id spaces and independent rng streams.
pub fn generate_corpus(config: &CorpusConfig) -> Result<Corpus> {
    if config.n_content_tokens < 1 {
        return Err(NarError::Contract("need at least 1 content token".into()));
    }
    if config.len_min < 1 || config.len_min > config.len_max {
        return Err(NarError::Contract(format!(
            "infeasible length range {}..{}",
            config.len_min, config.len_max
        )));
    }
    if config.frames_per_token_min < 4 || config.frames_per_token_min > config.frames_per_token_max
    {
        return Err(NarError::Contract(format!(
            "infeasible frames-per-token range {}..{} (min 4 keeps CTC feasible after subsampling)",
            config.frames_per_token_min, config.frames_per_token_max
        )));
    }
    if config.branching >= config.n_content_tokens {
        return Err(NarError::Contract(format!(
            "branching {} needs at least {} content tokens (a token never succeeds itself)",
            config.branching,
            config.branching + 1
        )));
    }
    if config.homophone_pairs * 2 > config.n_content_tokens {
        return Err(NarError::Contract(format!(
            "{} homophone pairs need at least {} content tokens",
            config.homophone_pairs,
            config.homophone_pairs * 2
        )));
    }
    if config.homophone_pairs > 0
        && config.branching + config.homophone_pairs + 1 > config.n_content_tokens
    {
        return Err(NarError::Contract(format!(
            "branching {} with {} homophone pairs needs at least {} content tokens",
            config.branching,
            config.homophone_pairs,
            config.branching + config.homophone_pairs + 1
        )));
    }
    let vocab = Vocab::new(config.n_content_tokens)?;

    let mut proto_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut prototypes: Vec<Vec<f32>> = (0..config.n_content_tokens)
        .map(|_| {
            (0..config.feat_dim)
                .map(|_| (proto_rng.gen_range(-1.0f64..1.0) * config.prototype_std * 1.7320508) as f32)
                .collect()
        })
        .collect();
    for pair in 0..config.homophone_pairs {
        prototypes[2 * pair + 1] = prototypes[2 * pair].clone();
    }

    // index of a token's homophone mate, if it has one
    let mate = |t: usize| -> Option<usize> {
        (t < 2 * config.homophone_pairs).then(|| t ^ 1)
    };

    // Per-token successor sets shared by both splits, drawn from the same
    // stream as the prototypes so they are fixed by the seed alone. Three
    // rules keep homophones resolvable from the token to their left alone:
    //   - a set never contains both members of a pair, so the preceding
    //     token fully determines which member can follow it;
    //   - a token's mate never follows it (back-to-back identical acoustics
    //     would merge into one long token);
    //   - pair members share one successor set, so a homophone confusion in
    //     a decoder's input prefix does not derail its transition model.
    let successors: Option<Vec<Vec<usize>>> = if config.branching > 0 {
        let mut sets: Vec<Vec<usize>> = (0..config.n_content_tokens)
            .map(|t| {
                let mut pool: Vec<usize> = (0..config.n_content_tokens)
                    .filter(|&x| x != t && Some(x) != mate(t))
                    .collect();
                for i in 0..pool.len() {
                    let j = proto_rng.gen_range(i..pool.len());
                    pool.swap(i, j);
                }
                let mut set: Vec<usize> = Vec::with_capacity(config.branching);
                for c in pool {
                    if mate(c).is_some_and(|m| set.contains(&m)) {
                        continue;
                    }
                    set.push(c);
                    if set.len() == config.branching {
                        break;
                    }
                }
                set.sort_unstable();
                set
            })
            .collect();
        for pair in 0..config.homophone_pairs {
            sets[2 * pair + 1] = sets[2 * pair].clone();
        }
        Some(sets)
    } else {
        None
    };

    let gen_split = |split: &str, n: usize, stream: u64| -> Vec<Utterance> {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_add(stream));
        (0..n)
            .map(|i| {
                let len = rng.gen_range(config.len_min..=config.len_max);
                let mut target: Vec<usize> = Vec::with_capacity(len);
                for _ in 0..len {
                    let t = match (&successors, target.last()) {
                        (Some(s), Some(&prev)) => {
                            let opts = &s[prev - CONTENT_BASE];
                            CONTENT_BASE + opts[rng.gen_range(0..opts.len())]
                        }
                        // adjacent duplicates (or homophone mates) are
                        // acoustically indistinguishable from one long
                        // token; keep targets free of them even when
                        // unconstrained
                        _ => loop {
                            let i = rng.gen_range(0..config.n_content_tokens);
                            let c = CONTENT_BASE + i;
                            let clash = target.last().is_some_and(|&prev| {
                                prev == c || mate(i).map(|m| CONTENT_BASE + m) == Some(prev)
                            });
                            if !clash {
                                break c;
                            }
                        },
                    };
                    target.push(t);
                }
                let mut feats = Vec::new();
                let mut frames = 0usize;
                for &t in &target {
                    let dur = rng
                        .gen_range(config.frames_per_token_min..=config.frames_per_token_max);
                    let proto = &prototypes[t - CONTENT_BASE];
                    for _ in 0..dur {
                        for &p in proto {
                            let noise = if config.noise_std > 0.0 {
                                sample_gaussian(&mut rng) * config.noise_std
                            } else {
                                0.0
                            };
                            feats.push(p + noise as f32);
                        }
                        frames += 1;
                    }
                }
                Utterance {
                    utt_id: format!("{split}-{i:05}"),
                    features: Tensor::new(vec![frames, config.feat_dim], feats),
                    frame_duration: config.frame_duration,
                    target,
                }
            })
            .collect()
    };

    let train = gen_split("train", config.n_train, 1);
    let test = gen_split("test", config.n_test, 2);
    Ok(Corpus {
        config: config.clone(),
        vocab,
        train,
        test,
    })
}

fn sample_gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// Padded features/targets with their true lengths.
#[derive(Clone, Debug)]
pub struct Batch {
    pub utt_ids: Vec<String>,
    /// `[batch, frames, feat_dim]`, zero-padded at the tail.
    pub features: Tensor<f32>,
    pub feat_lengths: Vec<usize>,
    /// PAD-padded targets, `[batch][max_target_len]`.
    pub targets: Vec<Vec<usize>>,
    pub target_lengths: Vec<usize>,
    pub total_duration_s: f64,
}

impl Batch {
    pub fn size(&self) -> usize {
        self.feat_lengths.len()
    }

    pub fn target(&self, i: usize) -> &[usize] {
        &self.targets[i][..self.target_lengths[i]]
    }
}

/// Pads features with zero frames and targets with PAD to the batch maxima.
pub fn make_batches(utts: &[Utterance], batch_size: usize, sort_by_frames: bool) -> Vec<Batch> {
    assert!(batch_size >= 1);
    let mut order: Vec<usize> = (0..utts.len()).collect();
    if sort_by_frames {
        order.sort_by_key(|&i| (utts[i].frames(), i));
    }
    order
        .chunks(batch_size)
        .map(|chunk| {
            let members: Vec<&Utterance> = chunk.iter().map(|&i| &utts[i]).collect();
            collate(&members)
        })
        .collect()
}

pub fn collate(members: &[&Utterance]) -> Batch {
    assert!(!members.is_empty());
    let feat_dim = members[0].features.shape()[1];
    // keep the padded frame count a multiple of 4 for the 4x subsampler
    let max_frames = members
        .iter()
        .map(|u| u.frames())
        .max()
        .unwrap()
        .next_multiple_of(4);
    let max_target = members.iter().map(|u| u.target.len()).max().unwrap();
    let mut feats = vec![0.0f32; members.len() * max_frames * feat_dim];
    let mut targets = Vec::new();
    for (b, u) in members.iter().enumerate() {
        let n = u.frames() * feat_dim;
        feats[b * max_frames * feat_dim..b * max_frames * feat_dim + n]
            .copy_from_slice(u.features.data());
        let mut t = u.target.clone();
        t.resize(max_target, PAD);
        targets.push(t);
    }
    Batch {
        utt_ids: members.iter().map(|u| u.utt_id.clone()).collect(),
        features: Tensor::new(vec![members.len(), max_frames, feat_dim], feats),
        feat_lengths: members.iter().map(|u| u.frames()).collect(),
        targets,
        target_lengths: members.iter().map(|u| u.target.len()).collect(),
        total_duration_s: members.iter().map(|u| u.duration_s()).sum(),
    }
}

/// SpecAugment-style masking: zero whole time spans and feature channels.
/// Shape never changes; only zeros are written.
pub fn spec_augment(
    features: &mut Tensor<f32>,
    n_time_masks: usize,
    time_width: usize,
    n_feat_masks: usize,
    feat_width: usize,
    rng: &mut ChaCha8Rng,
) {
    let frames = features.shape()[0];
    let feat_dim = features.shape()[1];
    assert!(time_width < frames, "time mask width must be below frame count");
    assert!(feat_width < feat_dim, "feature mask width must be below feat dim");
    for _ in 0..n_time_masks {
        let t0 = rng.gen_range(0..=frames - time_width);
        for t in t0..t0 + time_width {
            for f in 0..feat_dim {
                features.data_mut()[t * feat_dim + f] = 0.0;
            }
        }
    }
    for _ in 0..n_feat_masks {
        let w = feat_width;
        let f0 = rng.gen_range(0..=feat_dim - w);
        for t in 0..frames {
            for f in f0..f0 + w {
                features.data_mut()[t * feat_dim + f] = 0.0;
            }
        }
    }
}

/// One manifest row per utterance: features are regenerable from the seed.
#[derive(Serialize, Deserialize)]
pub struct ManifestRow {
    pub utt_id: String,
    pub frames: usize,
    pub target: Vec<String>,
}

pub fn write_manifest(path: &std::path::Path, corpus: &Corpus) -> Result<()> {
    use std::io::Write;
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    for u in corpus.train.iter().chain(&corpus.test) {
        let row = ManifestRow {
            utt_id: u.utt_id.clone(),
            frames: u.frames(),
            target: u.target.iter().map(|&t| corpus.vocab.token_name(t)).collect(),
        };
        serde_json::to_writer(&mut f, &row)?;
        f.write_all(b"\n")?;
    }
    Ok(())
}

/// Flat serializable mirror of an utterance for corpus files.
#[derive(Serialize, Deserialize)]
struct UttRecord {
    utt_id: String,
    frames: usize,
    feat_dim: usize,
    features: Vec<f32>,
    frame_duration: f64,
    target: Vec<usize>,
}

impl UttRecord {
    fn from_utterance(u: &Utterance) -> Self {
        UttRecord {
            utt_id: u.utt_id.clone(),
            frames: u.features.shape()[0],
            feat_dim: u.features.shape()[1],
            features: u.features.data().to_vec(),
            frame_duration: u.frame_duration,
            target: u.target.clone(),
        }
    }

    fn into_utterance(self) -> Result<Utterance> {
        if self.features.len() != self.frames * self.feat_dim {
            return Err(NarError::Contract(format!(
                "utterance {}: {} feature values for shape [{}, {}]",
                self.utt_id,
                self.features.len(),
                self.frames,
                self.feat_dim
            )));
        }
        Ok(Utterance {
            utt_id: self.utt_id,
            features: Tensor::new(vec![self.frames, self.feat_dim], self.features),
            frame_duration: self.frame_duration,
            target: self.target,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct CorpusFile {
    config: CorpusConfig,
    train: Vec<UttRecord>,
    test: Vec<UttRecord>,
}

/// Persist a corpus (config plus both splits) as one JSON file.
pub fn save_corpus(path: &std::path::Path, corpus: &Corpus) -> Result<()> {
    let file = CorpusFile {
        config: corpus.config.clone(),
        train: corpus.train.iter().map(UttRecord::from_utterance).collect(),
        test: corpus.test.iter().map(UttRecord::from_utterance).collect(),
    };
    let f = std::io::BufWriter::new(std::fs::File::create(path)?);
    serde_json::to_writer(f, &file)?;
    Ok(())
}

pub fn load_corpus(path: &std::path::Path) -> Result<Corpus> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let file: CorpusFile = serde_json::from_reader(f)?;
    Ok(Corpus {
        vocab: Vocab::new(file.config.n_content_tokens)?,
        config: file.config,
        train: file.train.into_iter().map(UttRecord::into_utterance).collect::<Result<_>>()?,
        test: file.test.into_iter().map(UttRecord::into_utterance).collect::<Result<_>>()?,
    })
}
