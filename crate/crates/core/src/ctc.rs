//! CTC loss (log-space forward-backward), greedy decoding with collapse,
//! spike extraction, length prediction and per-token confidence.

use crate::error::{NarError, Result};
use crate::numerics::{finite_diff_check, Scalar, Tape, Tensor, Var};

/// Where within a greedy run the spike frame is taken.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpikeMode {
    /// Frame with maximal posterior for the run's token.
    #[default]
    RunPeak,
    /// First frame of the run.
    RunStart,
}

/// Greedy CTC decode of one utterance. `tokens.len()` is the CTC-predicted
/// target length T'.
#[derive(Clone, Debug, Default)]
pub struct CtcGreedyResult {
    pub tokens: Vec<usize>,
    pub spike_frames: Vec<usize>,
    pub confidences: Vec<f64>,
}

impl CtcGreedyResult {
    pub fn predicted_length(&self) -> usize {
        self.tokens.len()
    }
}

/// CTC-predicted target length T' (the number of CTC spikes).
pub fn predict_length(result: &CtcGreedyResult) -> usize {
    result.predicted_length()
}

/// Negative log-likelihood of `target` under the alignment-summing CTC
/// model, recorded on the tape with its hand-derived gradient.
///
/// `log_posteriors` is `[frames, vocab]` of per-frame log-distributions.
/// A target that cannot fit in the given frames yields +inf loss with a
/// zero gradient rather than an error, so on-the-fly sampling never aborts
/// a batch.
pub fn ctc_loss<T: Scalar>(
    tape: &mut Tape<T>,
    log_posteriors: Var,
    target: &[usize],
    blank: usize,
) -> Result<Var> {
    let lp = tape.value(log_posteriors).clone();
    if lp.rank() != 2 {
        return Err(NarError::Contract("ctc_loss expects [frames, vocab]".into()));
    }
    let vocab = lp.shape()[1];
    if target.iter().any(|&t| t == blank || t >= vocab) {
        return Err(NarError::Contract(
            "ctc target must not contain BLANK and must be in vocab range".into(),
        ));
    }
    let (loss, grad) = ctc_forward_backward(&lp, target, blank);
    Ok(tape.custom_scalar(log_posteriors, loss, grad))
}

/// Loss value only, without a tape.
pub fn ctc_loss_value<T: Scalar>(log_posteriors: &Tensor<T>, target: &[usize], blank: usize) -> T {
    ctc_forward_backward(log_posteriors, target, blank).0
}

/// alpha/beta recursion over the blank-interleaved label sequence.
/// Returns (−log P, d(−log P)/d log_posteriors).
fn ctc_forward_backward<T: Scalar>(
    logp: &Tensor<T>,
    target: &[usize],
    blank: usize,
) -> (T, Tensor<T>) {
    let frames = logp.shape()[0];
    let vocab = logp.shape()[1];
    let n = target.len();
    let s_len = 2 * n + 1;
    let ext = |s: usize| -> usize {
        if s % 2 == 0 {
            blank
        } else {
            target[(s - 1) / 2]
        }
    };
    let ninf = T::neg_infinity();
    let lp = |t: usize, k: usize| logp.data()[t * vocab + k];

    // forward
    let mut alpha = vec![ninf; frames * s_len];
    alpha[0] = lp(0, blank);
    if s_len > 1 {
        alpha[1] = lp(0, ext(1));
    }
    for t in 1..frames {
        for s in 0..s_len {
            let mut acc = alpha[(t - 1) * s_len + s];
            if s >= 1 {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 1]);
            }
            if s >= 2 && ext(s) != blank && ext(s) != ext(s - 2) {
                acc = lse2(acc, alpha[(t - 1) * s_len + s - 2]);
            }
            alpha[t * s_len + s] = acc + lp(t, ext(s));
        }
    }
    let mut total = alpha[(frames - 1) * s_len + s_len - 1];
    if s_len > 1 {
        total = lse2(total, alpha[(frames - 1) * s_len + s_len - 2]);
    }
    if total == ninf {
        // target longer than achievable in the given frames
        return (T::infinity(), Tensor::zeros(logp.shape().to_vec()));
    }

    // backward: beta[t][s] covers frames t+1.. (emission at t excluded)
    let mut beta = vec![ninf; frames * s_len];
    beta[(frames - 1) * s_len + s_len - 1] = T::zero();
    if s_len > 1 {
        beta[(frames - 1) * s_len + s_len - 2] = T::zero();
    }
    for t in (0..frames - 1).rev() {
        for s in 0..s_len {
            let mut acc = beta[(t + 1) * s_len + s] + lp(t + 1, ext(s));
            if s + 1 < s_len {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 1] + lp(t + 1, ext(s + 1)));
            }
            if s + 2 < s_len && ext(s + 2) != blank && ext(s + 2) != ext(s) {
                acc = lse2(acc, beta[(t + 1) * s_len + s + 2] + lp(t + 1, ext(s + 2)));
            }
            beta[t * s_len + s] = acc;
        }
    }

    // d(−log P)/d logp[t][k] = −Σ_{s: ext(s)=k} exp(α[t][s] + β[t][s] − log P)
    let mut grad = Tensor::zeros(logp.shape().to_vec());
    for t in 0..frames {
        for s in 0..s_len {
            let occ = alpha[t * s_len + s] + beta[t * s_len + s] - total;
            if occ > ninf {
                let k = ext(s);
                let slot = &mut grad.data_mut()[t * vocab + k];
                *slot = *slot - occ.exp();
            }
        }
    }
    (-total, grad)
}

fn lse2<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let m = T::max(a, b);
    m + ((a - m).exp() + (b - m).exp()).ln()
}

/// Per-frame argmax path over the valid frames, collapsed: merge adjacent
/// duplicates then delete blanks. Ties break toward the lowest token id.
pub fn ctc_greedy<T: Scalar>(
    log_posteriors: &Tensor<T>,
    valid_frames: usize,
    blank: usize,
    spike: SpikeMode,
) -> CtcGreedyResult {
    let vocab = log_posteriors.shape()[1];
    assert!(valid_frames >= 1 && valid_frames <= log_posteriors.shape()[0]);
    let mut result = CtcGreedyResult::default();
    let mut run_label = blank;
    let mut run_best_frame = 0usize;
    let mut run_best_logp = T::neg_infinity();
    let mut run_start = 0usize;
    let flush = |r: &mut CtcGreedyResult,
                 label: usize,
                 best_frame: usize,
                 best_logp: T,
                 start: usize| {
        if label != blank {
            r.tokens.push(label);
            r.spike_frames.push(match spike {
                SpikeMode::RunPeak => best_frame,
                SpikeMode::RunStart => start,
            });
            r.confidences.push(best_logp.exp().to_f64().unwrap());
        }
    };
    for t in 0..valid_frames {
        let row = &log_posteriors.data()[t * vocab..(t + 1) * vocab];
        let mut best = 0usize;
        for (k, &v) in row.iter().enumerate() {
            if v > row[best] {
                best = k;
            }
        }
        if best != run_label {
            flush(&mut result, run_label, run_best_frame, run_best_logp, run_start);
            run_label = best;
            run_best_frame = t;
            run_best_logp = row[best];
            run_start = t;
        } else if row[best] > run_best_logp {
            run_best_logp = row[best];
            run_best_frame = t;
        }
    }
    flush(&mut result, run_label, run_best_frame, run_best_logp, run_start);
    result
}

/// Finite-difference check of the CTC gradient w.r.t. posterior logits
/// (the log-softmax sits between the logits and the loss). Returns the max
/// relative error.
pub fn ctc_gradient_check(logits: &Tensor<f64>, target: &[usize], blank: usize) -> Result<f64> {
    let analytic = {
        let mut tape = Tape::new();
        let l = tape.leaf(logits.clone(), true);
        let lp = tape.log_softmax(l);
        let loss = ctc_loss(&mut tape, lp, target, blank)?;
        if !tape.value(loss).item().is_finite() {
            // defined saturation: +inf loss has zero gradient
            let grads = tape.backward(loss)?;
            let g = grads.grad(l);
            return if g.data().iter().all(|&v| v == 0.0) {
                Ok(0.0)
            } else {
                Err(NarError::OracleInvalid("non-zero gradient at +inf loss".into()))
            };
        }
        let grads = tape.backward(loss)?;
        grads.grad(l).clone()
    };
    finite_diff_check(
        |p| {
            let mut tape = Tape::new();
            let l = tape.leaf(p.clone(), false);
            let lp = tape.log_softmax(l);
            let loss = ctc_loss(&mut tape, lp, target, blank).unwrap();
            tape.value(loss).item()
        },
        logits,
        &analytic,
        1e-5,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::BLANK;
    use crate::numerics::log_sum_exp;

    fn log_tensor(shape: Vec<usize>, probs: &[f64]) -> Tensor<f64> {
        Tensor::new(shape, probs.iter().map(|p| p.ln()).collect())
    }

    /// Brute-force oracle: enumerate every frame path, collapse it, and sum
    /// the probabilities of paths that collapse to the target.
    fn enumeration_oracle(log_posteriors: &Tensor<f64>, target: &[usize], blank: usize) -> f64 {
        let frames = log_posteriors.shape()[0];
        let vocab = log_posteriors.shape()[1];
        let mut total = 0.0f64;
        let n_paths = vocab.pow(frames as u32);
        for code in 0..n_paths {
            let mut c = code;
            let mut path = Vec::with_capacity(frames);
            for _ in 0..frames {
                path.push(c % vocab);
                c /= vocab;
            }
            let collapsed = collapse(&path, blank);
            if collapsed == target {
                let logp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &k)| log_posteriors.data()[t * vocab + k])
                    .sum();
                total += logp.exp();
            }
        }
        -total.ln()
    }

    fn collapse(path: &[usize], blank: usize) -> Vec<usize> {
        let mut out = Vec::new();
        let mut prev = blank;
        for &k in path {
            if k != prev && k != blank {
                out.push(k);
            }
            prev = k;
        }
        out
    }

    fn loss_of(logp: &Tensor<f64>, target: &[usize]) -> f64 {
        ctc_loss_value(logp, target, BLANK)
    }

    #[test]
    fn single_frame_single_alignment() {
        // vocab {pad, blank, a}: p(a) = 0.7 at the only frame
        let lp = log_tensor(vec![1, 3], &[0.1, 0.2, 0.7]);
        let loss = loss_of(&lp, &[2]);
        assert!((loss - (-0.7f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn two_frames_three_alignments() {
        // uniform p = 0.5 over {blank, a}: alignments (a,a), (a,-), (-,a)
        let lp = log_tensor(vec![2, 2], &[0.5, 0.5, 0.5, 0.5]);
        let loss = ctc_loss_value(&lp, &[1], 0);
        assert!((loss - (-0.75f64.ln())).abs() < 1e-12, "loss {loss}");
    }

    #[test]
    fn random_case_matches_enumeration_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        // frames=3, vocab {blank, a, b}, random posteriors, target "ab"
        let mut probs = Vec::new();
        for _ in 0..3 {
            let raw: Vec<f64> = (0..3).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            probs.extend(raw.into_iter().map(|p| p / sum));
        }
        let lp = log_tensor(vec![3, 3], &probs);
        let loss = ctc_loss_value(&lp, &[1, 2], 0);
        let oracle = enumeration_oracle(&lp, &[1, 2], 0);
        assert!((loss - oracle).abs() < 1e-6, "{loss} vs {oracle}");
    }

    #[test]
    fn exhaustive_small_instances_match_enumeration_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for frames in 1..=6usize {
            for vocab in 2..=4usize {
                // random per-frame distributions
                let mut probs = Vec::new();
                for _ in 0..frames {
                    let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
                    let sum: f64 = raw.iter().sum();
                    probs.extend(raw.into_iter().map(|p| p / sum));
                }
                let lp = log_tensor(vec![frames, vocab], &probs);
                // all targets of length <= 3 over non-blank labels
                for len in 0..=3usize {
                    let labels = vocab - 1;
                    for code in 0..labels.pow(len as u32) {
                        let mut c = code;
                        let mut target = Vec::new();
                        for _ in 0..len {
                            target.push(1 + c % labels);
                            c /= labels;
                        }
                        let loss = ctc_loss_value(&lp, &target, 0);
                        let oracle = enumeration_oracle(&lp, &target, 0);
                        if oracle.is_infinite() {
                            assert!(loss.is_infinite());
                        } else {
                            assert!(
                                (loss - oracle).abs() < 1e-6,
                                "frames={frames} vocab={vocab} target={target:?}: {loss} vs {oracle}"
                            );
                        }
                    }
                }
            }
        }
    }

    #[test]
    fn total_probability_over_all_collapse_classes_is_one() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let (frames, vocab) = (4usize, 3usize);
        let mut probs = Vec::new();
        for _ in 0..frames {
            let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
            let sum: f64 = raw.iter().sum();
            probs.extend(raw.into_iter().map(|p| p / sum));
        }
        let lp = log_tensor(vec![frames, vocab], &probs);
        let labels = vocab - 1;
        let mut total = 0.0f64;
        for len in 0..=frames {
            for code in 0..labels.pow(len as u32) {
                let mut c = code;
                let mut target = Vec::new();
                for _ in 0..len {
                    target.push(1 + c % labels);
                    c /= labels;
                }
                let loss = ctc_loss_value(&lp, &target, 0);
                if loss.is_finite() {
                    total += (-loss).exp();
                }
            }
        }
        assert!((total - 1.0).abs() < 1e-5, "total probability {total}");
    }

    #[test]
    fn infeasible_target_returns_inf_not_error() {
        let lp = log_tensor(vec![1, 3], &[0.3, 0.3, 0.4]);
        let loss = ctc_loss_value(&lp, &[2, 2], 1);
        assert!(loss.is_infinite());
    }

    #[test]
    fn target_with_blank_is_contract_violation() {
        let mut tape = Tape::new();
        let lp = log_tensor(vec![2, 3], &[0.3, 0.3, 0.4, 0.3, 0.3, 0.4]);
        let v = tape.leaf(lp, true);
        assert!(ctc_loss(&mut tape, v, &[BLANK], BLANK).is_err());
    }

    #[test]
    fn greedy_collapse_rules() {
        // argmax path [-, a, a, -, b] over vocab {-, a, b}
        let lp = log_tensor(
            vec![5, 3],
            &[
                0.8, 0.1, 0.1, //
                0.1, 0.8, 0.1, //
                0.1, 0.7, 0.2, //
                0.6, 0.2, 0.2, //
                0.1, 0.2, 0.7,
            ],
        );
        let r = ctc_greedy(&lp, 5, 0, SpikeMode::RunPeak);
        assert_eq!(r.tokens, vec![1, 2]);
        assert_eq!(r.predicted_length(), 2);
        // spike of "a" run is frame 1 (posterior 0.8 > 0.7)
        assert_eq!(r.spike_frames, vec![1, 4]);
        assert!((r.confidences[0] - 0.8).abs() < 1e-9);
    }

    #[test]
    fn greedy_all_blank_is_empty() {
        let lp = log_tensor(vec![3, 2], &[0.9, 0.1, 0.9, 0.1, 0.9, 0.1]);
        let r = ctc_greedy(&lp, 3, 0, SpikeMode::RunPeak);
        assert!(r.tokens.is_empty());
        assert_eq!(predict_length(&r), 0);
    }

    #[test]
    fn greedy_blank_separates_repeats() {
        // path [a, -, a] -> "aa"
        let lp = log_tensor(vec![3, 2], &[0.1, 0.9, 0.9, 0.1, 0.2, 0.8]);
        let r = ctc_greedy(&lp, 3, 0, SpikeMode::RunPeak);
        assert_eq!(r.tokens, vec![1, 1]);
    }

    #[test]
    fn greedy_invariants() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        for _ in 0..50 {
            let frames = rng.gen_range(1..12usize);
            let vocab = rng.gen_range(2..6usize);
            let mut probs = Vec::new();
            for _ in 0..frames {
                let raw: Vec<f64> = (0..vocab).map(|_| rng.gen_range(0.05..1.0)).collect();
                let sum: f64 = raw.iter().sum();
                probs.extend(raw.into_iter().map(|p| p / sum));
            }
            let lp = log_tensor(vec![frames, vocab], &probs);
            let r = ctc_greedy(&lp, frames, 0, SpikeMode::RunPeak);
            assert!(r.tokens.iter().all(|&t| t != 0));
            assert!(r.spike_frames.windows(2).all(|w| w[0] < w[1]));
            assert!(r.confidences.iter().all(|&c| c > 0.0 && c <= 1.0));
            assert!(r.predicted_length() <= frames);
            assert_eq!(r.tokens.len(), r.spike_frames.len());
        }
    }

    #[test]
    fn gradient_matches_finite_differences_two_frame_case() {
        let logits = Tensor::new(vec![2, 2], vec![0.0f64, 0.0, 0.0, 0.0]);
        let err = ctc_gradient_check(&logits, &[1], 0).unwrap();
        assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn inf_loss_case_has_zero_gradient_no_nan() {
        let logits = Tensor::new(vec![1, 3], vec![0.1f64, 0.2, 0.3]);
        let err = ctc_gradient_check(&logits, &[2, 2], 1).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn random_gradient_checks() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let frames = rng.gen_range(1..=6usize);
            let vocab = rng.gen_range(2..=4usize);
            let tlen = rng.gen_range(0..=3usize);
            let target: Vec<usize> = (0..tlen).map(|_| rng.gen_range(1..vocab)).collect();
            let logits = Tensor::new(
                vec![frames, vocab],
                (0..frames * vocab).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            );
            let err = ctc_gradient_check(&logits, &target, 0).unwrap();
            assert!(err < 1e-4, "frames={frames} vocab={vocab} target={target:?} err={err}");
        }
    }

    #[test]
    fn log_sum_exp_reexported_behaviour() {
        // permutation invariance and translation equivariance
        let v = [0.3f64, -1.2, 2.0];
        let p = [2.0f64, 0.3, -1.2];
        assert!((log_sum_exp(&v) - log_sum_exp(&p)).abs() < 1e-12);
        let shifted: Vec<f64> = v.iter().map(|x| x + 5.0).collect();
        assert!((log_sum_exp(&shifted) - (log_sum_exp(&v) + 5.0)).abs() < 1e-9);
    }
}
