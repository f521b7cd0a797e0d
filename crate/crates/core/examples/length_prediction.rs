//! How well the number of CTC spikes predicts the true target length:
//! histogram of T − T' over a test set, exact-match rate, and the mass
//! within a small tolerance.
//!
//! Run with `cargo run --release --example length_prediction`.

use nar_asr::data::{generate_corpus, CorpusConfig};
use nar_asr::harness::run_length_histogram;
use nar_asr::model::{Model, ModelConfig};
use nar_asr::train::{train, TrainConfig, TrainStrategy};

fn main() -> nar_asr::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        n_train: 150,
        n_test: 40,
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
    cfg.epochs = 8;
    cfg.warmup_steps = 80;
    train(&mut model, &corpus.train, &cfg)?;

    let hist = run_length_histogram(&model, &corpus.test, 8)?;
    println!("T - T'   count");
    for (diff, count) in &hist.counts {
        println!("{diff:>6}   {count}");
    }
    println!("exact rate         {:.3}", hist.exact_rate());
    println!("mass |T - T'| <= 2 {:.3}", hist.mass_within(2));
    println!("mass T <= T'       {:.3}", hist.mass_le_zero());
    Ok(())
}
