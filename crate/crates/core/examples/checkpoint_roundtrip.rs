//! Save a model to the binary checkpoint format and load it back,
//! demonstrating a bitwise-exact parameter roundtrip.
//!
//! Run with `cargo run --example checkpoint_roundtrip`.

use nar_asr::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};

fn main() -> nar_asr::Result<()> {
    let cfg = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        encoder_layers: 2,
        decoder_layers: 2,
        dropout: 0.1,
        vocab_size: 12,
        feat_dim: 8,
        ctc_weight: 0.3,
        encoder_window: None,
    };
    let model = Model::<f32>::init(cfg, 42)?;

    let path = std::env::temp_dir().join("nar_asr_roundtrip.ckpt");
    save_checkpoint(&path, &model)?;
    let loaded = load_checkpoint(&path)?;

    assert_eq!(loaded.config, model.config);
    let mut n_params = 0usize;
    for (name, t) in model.params.iter() {
        let other = loaded.params.get(name);
        assert_eq!(t.shape(), other.shape(), "{name}");
        // bitwise, not approximate
        for (a, b) in t.data().iter().zip(other.data()) {
            assert_eq!(a.to_bits(), b.to_bits(), "{name}");
        }
        n_params += t.numel();
    }
    println!(
        "{} parameters across {} tensors roundtripped bitwise via {}",
        n_params,
        model.params.len(),
        path.display()
    );
    Ok(())
}
