//! Verify the whole training objective's analytic gradients against an
//! independent finite-difference oracle, in f64 on a small model.
//!
//! Run with `cargo run --example gradient_check`.

use nar_asr::model::{Mode, Model, ModelConfig};
use nar_asr::numerics::{finite_diff_check, Tensor};
use nar_asr::train::{build_decoder_io, joint_loss, TrainStrategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn main() -> nar_asr::Result<()> {
    let config = ModelConfig {
        d_model: 8,
        n_heads: 2,
        d_ff: 12,
        encoder_layers: 1,
        decoder_layers: 1,
        dropout: 0.0, // dropout must be off: the oracle needs a deterministic function
        vocab_size: 8,
        feat_dim: 4,
        ctc_weight: 0.3,
        encoder_window: None,
    };
    let model = Model::<f64>::init(config, 5)?;

    let mut r = ChaCha8Rng::seed_from_u64(77);
    let features = Tensor::new(vec![2, 12, 4], (0..96).map(|_| r.gen_range(-1.0..1.0)).collect());
    let feat_lengths = vec![12, 9];
    let targets = vec![vec![5, 6], vec![7]];
    let io = build_decoder_io(
        TrainStrategy::TeacherForcingCm,
        &targets,
        None,
        2,
        &mut ChaCha8Rng::seed_from_u64(3),
    );

    let loss_of = |m: &Model<f64>| -> f64 {
        let mut sess = m.session(Mode::Eval, 0);
        let parts = joint_loss(&mut sess, &features, &feat_lengths, &targets, &io, 0.1).unwrap();
        sess.tape.value(parts.total).item()
    };

    let mut sess = model.session(Mode::Train, 0);
    let parts = joint_loss(&mut sess, &features, &feat_lengths, &targets, &io, 0.1)?;
    println!(
        "loss = {:.4} (ctc {:.4}, attention {:.4})",
        sess.tape.value(parts.total).item(),
        parts.ctc_value,
        parts.att_value
    );
    let grads = sess.tape.backward(parts.total)?;

    for name in ["dec.out.w", "ctc.out.b", "enc.0.att.q.w", "dec.0.cross.v.b", "enc.sub1.w"] {
        let analytic = grads.grad(sess.var(name)).clone();
        let f = |p: &Tensor<f64>| {
            let mut m = model.clone();
            *m.params.get_mut(name) = p.clone();
            loss_of(&m)
        };
        let err = finite_diff_check(f, model.params.get(name), &analytic, 1e-5)?;
        println!("{name:<18} max relative error {err:.2e}");
        assert!(err < 1e-6);
    }
    println!("all checked parameters agree with central differences");
    Ok(())
}
