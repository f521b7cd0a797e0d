//! Run every decoding strategy over one test set and print a CER / RTF /
//! decoder-pass table (one row per strategy, all sharing one model here).
//!
//! Run with `cargo run --release --example strategy_table`.

use nar_asr::data::{generate_corpus, CorpusConfig};
use nar_asr::decode::{DecodeConfig, Strategy};
use nar_asr::harness::{run_strategy_table, TableEntry};
use nar_asr::model::{Model, ModelConfig};
use nar_asr::train::{train, TrainConfig, TrainStrategy};

fn main() -> nar_asr::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        n_train: 150,
        n_test: 16,
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

    let entries: Vec<TableEntry<'_>> = Strategy::ALL
        .iter()
        .map(|&s| TableEntry {
            label: s.name().to_string(),
            model: &model,
            config: DecodeConfig::new(s),
        })
        .collect();
    let rows = run_strategy_table(&entries, &corpus.test, 8)?;

    println!("{:<14} {:>8} {:>10} {:>8}", "strategy", "cer", "rtf", "passes");
    for r in &rows {
        println!(
            "{:<14} {:>8.4} {:>10.5} {:>8.2}",
            r.strategy, r.cer, r.rtf, r.mean_decoder_passes
        );
    }
    Ok(())
}
