//! Train a small model for a few epochs and print transcripts next to the
//! references, with the single-pass causal refinement decoder.
//!
//! Run with `cargo run --release --example train_and_transcribe`
//! (release strongly recommended; training is compute-bound).

use nar_asr::data::{generate_corpus, CorpusConfig};
use nar_asr::decode::{decode_utterances, DecodeConfig, Strategy};
use nar_asr::harness::cer;
use nar_asr::model::{Model, ModelConfig};
use nar_asr::train::{train, TrainConfig, TrainStrategy};

fn main() -> nar_asr::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        n_train: 200,
        n_test: 12,
        n_content_tokens: 8,
        len_min: 3,
        len_max: 6,
        ..CorpusConfig::default()
    })?;

    let model_cfg = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 64,
        encoder_layers: 2,
        decoder_layers: 2,
        dropout: 0.0,
        vocab_size: corpus.vocab.size(),
        feat_dim: corpus.config.feat_dim,
        ctc_weight: 0.3,
        encoder_window: None,
    };
    let mut model = Model::<f32>::init(model_cfg, 1)?;

    let mut cfg = TrainConfig::new(TrainStrategy::TeacherForcingCm);
    cfg.epochs = 12;
    cfg.warmup_steps = 100;
    let report = train(&mut model, &corpus.train, &cfg)?;
    println!(
        "trained {} steps ({} skipped), final epoch mean loss {:.3}",
        report.steps, report.skipped_steps, report.final_epoch_loss
    );

    let results =
        decode_utterances(&model, &corpus.test, &DecodeConfig::new(Strategy::CausalRefine), 4)?;
    for (r, u) in results.iter().zip(&corpus.test) {
        let show = |ts: &[usize]| {
            ts.iter().map(|&t| corpus.vocab.token_name(t)).collect::<Vec<_>>().join(" ")
        };
        println!(
            "{}: hyp [{}] | ref [{}] | cer {:.2}",
            u.utt_id,
            show(&r.tokens),
            show(&u.target),
            cer(&r.tokens, &u.target)?
        );
    }
    Ok(())
}
