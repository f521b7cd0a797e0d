//! Generate a synthetic spoken-token corpus and inspect it.
//!
//! Each utterance is a random content-token sequence rendered to noisy
//! feature frames (one Gaussian prototype per token, a few frames per
//! token). Run with `cargo run --example generate_corpus`.

use nar_asr::data::{generate_corpus, save_corpus, write_manifest, CorpusConfig};

fn main() -> nar_asr::Result<()> {
    let config = CorpusConfig {
        n_train: 32,
        n_test: 8,
        ..CorpusConfig::default()
    };
    let corpus = generate_corpus(&config)?;

    println!(
        "vocab: {} ids total ({} content tokens + PAD/BLANK/SOS/EOS/MASK)",
        corpus.vocab.size(),
        corpus.vocab.n_content()
    );
    println!("train: {} utterances, test: {}", corpus.train.len(), corpus.test.len());

    for u in corpus.train.iter().take(4) {
        let names: Vec<String> = u.target.iter().map(|&t| corpus.vocab.token_name(t)).collect();
        println!(
            "  {}: {} frames ({:.2}s) -> [{}]",
            u.utt_id,
            u.frames(),
            u.duration_s(),
            names.join(" ")
        );
    }

    let dir = std::env::temp_dir().join("nar_asr_generate_corpus");
    std::fs::create_dir_all(&dir)?;
    save_corpus(&dir.join("corpus.json"), &corpus)?;
    write_manifest(&dir.join("manifest.jsonl"), &corpus)?;
    println!("wrote {}", dir.display());
    Ok(())
}
