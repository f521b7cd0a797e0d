//! Benchmark decoding speed as real-time factor (wall time / audio time):
//! autoregressive beam search against the single-pass refinement decoder.
//! `NAR_THREADS` caps decode parallelism (try `NAR_THREADS=1`).
//!
//! Run with `cargo run --release --example bench_rtf`.

use nar_asr::data::{generate_corpus, CorpusConfig};
use nar_asr::decode::{DecodeConfig, Strategy};
use nar_asr::harness::evaluate;
use nar_asr::model::{Model, ModelConfig};

fn main() -> nar_asr::Result<()> {
    let corpus = generate_corpus(&CorpusConfig {
        n_train: 1,
        n_test: 32,
        ..CorpusConfig::default()
    })?;
    // Speed does not depend on training, so an untrained model suffices.
    let model_cfg = ModelConfig::desk(corpus.vocab.size(), corpus.config.feat_dim);
    let model = Model::<f32>::init(model_cfg, 1)?;

    let mut ar = DecodeConfig::new(Strategy::Ar);
    ar.beam = 10;
    let single_pass = DecodeConfig::new(Strategy::CausalRefine);

    // One warm-up batch per run keeps allocator/thread-pool start-up out
    // of the clock.
    let ar_out = evaluate(&model, &corpus.test, &ar, 8, true)?;
    let sp_out = evaluate(&model, &corpus.test, &single_pass, 8, true)?;

    println!("{:<22} {:>10} {:>10} {:>8}", "strategy", "rtf", "wall (s)", "passes");
    for (label, o) in [("ar beam=10", &ar_out), ("causal-refine", &sp_out)] {
        println!(
            "{:<22} {:>10.5} {:>10.3} {:>8.2}",
            label, o.rtf, o.wall_s, o.mean_decoder_passes
        );
    }
    println!("speedup: {:.1}x", ar_out.rtf / sp_out.rtf);
    Ok(())
}
