//! Compare each refinement decoder's accuracy when fed the model's own
//! CTC output versus a ground-truth-derived input. The gap measures how
//! sensitive a strategy is to errors in its draft.
//!
//! Run with `cargo run --release --example robustness_gap`.

use nar_asr::data::{generate_corpus, CorpusConfig};
use nar_asr::decode::{DecodeConfig, Strategy};
use nar_asr::harness::{run_robustness, TableEntry};
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

    // Each refinement strategy is evaluated on the model trained with its
    // matching decoder-input regime.
    let pairs = [
        (Strategy::CausalRefine, TrainStrategy::CtcSamplingCm),
        (Strategy::PmRefine, TrainStrategy::CtcSamplingPm),
        (Strategy::MpCtc, TrainStrategy::MaskPredictPm),
    ];
    let mut models = Vec::new();
    for (_, ts) in &pairs {
        let mut model = Model::<f32>::init(model_cfg.clone(), 1)?;
        let mut cfg = TrainConfig::new(*ts);
        cfg.epochs = 8;
        cfg.warmup_steps = 80;
        cfg.sampling_start_epoch = 3;
        train(&mut model, &corpus.train, &cfg)?;
        models.push(model);
    }

    let entries: Vec<TableEntry<'_>> = pairs
        .iter()
        .zip(&models)
        .map(|((ds, ts), model)| TableEntry {
            label: format!("{} on {}", ds.name(), ts.name()),
            model,
            config: DecodeConfig::new(*ds),
        })
        .collect();
    let rows = run_robustness(&entries, &corpus.test, 8, 5, 0.4)?;

    println!(
        "{:<14} {:>14} {:>13} {:>8}  inverted",
        "strategy", "cer(ctc input)", "cer(gt input)", "gap"
    );
    for r in &rows {
        println!(
            "{:<14} {:>14.4} {:>13.4} {:>8.4}  {}",
            r.strategy, r.cer_with_ctc_input, r.cer_with_gt_input, r.gap, r.inverted
        );
    }
    Ok(())
}
