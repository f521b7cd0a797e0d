//! CTC in isolation: loss over all alignments, greedy decoding, spike
//! frames, per-token confidence, and length prediction.
//!
//! Run with `cargo run --example ctc_loss_and_greedy`.

use nar_asr::ctc::{ctc_greedy, ctc_loss, predict_length, SpikeMode};
use nar_asr::data::BLANK;
use nar_asr::numerics::{Tape, Tensor};

fn main() -> nar_asr::Result<()> {
    // A hand-built 6-frame, 4-symbol table (BLANK=1) that clearly spells
    // out target [2, 3]: blank, spike 2, blank, spike 3, spike 3, blank.
    let rows: [[f64; 4]; 6] = [
        [0.05, 0.85, 0.05, 0.05],
        [0.05, 0.05, 0.85, 0.05],
        [0.05, 0.85, 0.05, 0.05],
        [0.05, 0.05, 0.05, 0.85],
        [0.10, 0.10, 0.10, 0.70],
        [0.05, 0.85, 0.05, 0.05],
    ];
    let data: Vec<f64> = rows.iter().flatten().map(|p| p.ln()).collect();
    let log_posts = Tensor::new(vec![6, 4], data);

    let mut tape = Tape::<f64>::new();
    let lp = tape.leaf(log_posts.clone(), true);
    let loss = ctc_loss(&mut tape, lp, &[2, 3], BLANK)?;
    println!("-log P([2,3] | frames) = {:.4}", tape.value(loss).data()[0]);

    // The recorded gradient is the hand-derived forward-backward one.
    let grads = tape.backward(loss)?;
    let g = grads.grad(lp);
    println!("gradient norm over the frame table = {:.4}", g.data().iter().map(|x| x * x).sum::<f64>().sqrt());

    // An impossible target (too long for 6 frames) is +inf loss, not an error.
    let mut tape2 = Tape::<f64>::new();
    let lp2 = tape2.leaf(log_posts.clone(), true);
    let inf = ctc_loss(&mut tape2, lp2, &[2, 2, 2, 2], BLANK)?;
    println!("infeasible target loss = {}", tape2.value(inf).data()[0]);

    let greedy = ctc_greedy(&log_posts, 6, BLANK, SpikeMode::RunPeak);
    println!("greedy tokens      = {:?}", greedy.tokens);
    println!("spike frames       = {:?}", greedy.spike_frames);
    println!("run confidences    = {:?}", greedy.confidences.iter().map(|c| (c * 100.0).round() / 100.0).collect::<Vec<_>>());
    println!("predicted length T' = {}", predict_length(&greedy));
    Ok(())
}
