//! End-to-end acceptance criteria for the workbench. Each test checks one
//! criterion and prints exactly one verdict line
//! (`CRITERION NN <name>: PASS|FAIL <detail>`); run with
//! `cargo test --test acceptance -- --nocapture` to see them all.
//!
//! Criteria 05-09 share one set of desk-scale models, trained once on first
//! use (several minutes per model on one core).

use nar_asr::ctc::{ctc_loss_value, SpikeMode};
use nar_asr::data::{generate_corpus, Corpus, CorpusConfig, CONTENT_BASE, EOS, SOS};
use nar_asr::decode::{
    ctc_draft, decode_causal_refine, encode_utterances, DecodeConfig, Strategy,
};
use nar_asr::harness::{
    evaluate, run_ctc_vs_decoder, run_length_histogram, run_robustness, run_strategy_table,
    TableEntry,
};
use nar_asr::model::{DecoderMask, Mode, Model, ModelConfig};
use nar_asr::numerics::{finite_diff_check, Tensor};
use nar_asr::train::{build_decoder_io, joint_loss, train, TrainConfig, TrainStrategy};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::Instant;

/// Shared desk-scale world: one corpus, one trained model per training
/// strategy, and the wall time the whole build took.
struct World {
    corpus: Corpus,
    models: BTreeMap<&'static str, Model<f32>>,
    build_secs: f64,
}

const DESK_EPOCHS: usize = 180;
const DESK_SEED: u64 = 1;

fn desk_corpus_config() -> CorpusConfig {
    CorpusConfig::default()
}

fn desk_model_config(corpus: &Corpus) -> ModelConfig {
    let mut m = ModelConfig::desk(corpus.vocab.size(), corpus.config.feat_dim);
    m.dropout = 0.1;
    m
}

fn desk_train_config(strategy: TrainStrategy) -> TrainConfig {
    let mut cfg = TrainConfig::new(strategy);
    cfg.epochs = DESK_EPOCHS;
    cfg.seed = DESK_SEED;
    cfg
}

fn world() -> &'static World {
    static WORLD: OnceLock<World> = OnceLock::new();
    WORLD.get_or_init(|| {
        let t0 = Instant::now();
        let corpus = generate_corpus(&desk_corpus_config()).expect("corpus");
        let mut models = BTreeMap::new();
        for strategy in TrainStrategy::ALL {
            let mut model =
                Model::<f32>::init(desk_model_config(&corpus), DESK_SEED).expect("init");
            let report =
                train(&mut model, &corpus.train, &desk_train_config(strategy)).expect("train");
            eprintln!(
                "[world] trained {} ({} steps, final-epoch loss {:.3}, {:.0}s elapsed)",
                strategy.name(),
                report.steps,
                report.final_epoch_loss,
                t0.elapsed().as_secs_f64()
            );
            models.insert(strategy.name(), model);
        }
        World {
            corpus,
            models,
            build_secs: t0.elapsed().as_secs_f64(),
        }
    })
}

fn verdict(id: u32, name: &str, pass: bool, detail: &str) {
    let v = if pass { "PASS" } else { "FAIL" };
    println!("CRITERION {id:02} {name}: {v} — {detail}");
    assert!(pass, "CRITERION {id:02} {name} FAILED — {detail}");
}

// --- criterion 1: CTC loss against exhaustive alignment enumeration -------

/// Independent oracle: enumerate every frame-labelling, collapse it
/// (repeats then blanks), and sum the probability of those matching the
/// target.
fn ctc_brute_force(log_posts: &Tensor<f64>, target: &[usize], blank: usize) -> f64 {
    let frames = log_posts.shape()[0];
    let vocab = log_posts.shape()[1];
    let mut total = 0.0f64;
    let mut path = vec![0usize; frames];
    loop {
        // collapse: remove adjacent repeats, then blanks
        let mut collapsed: Vec<usize> = Vec::new();
        for (i, &l) in path.iter().enumerate() {
            if (i == 0 || path[i - 1] != l) && l != blank {
                collapsed.push(l);
            }
        }
        if collapsed == target {
            let lp: f64 = path
                .iter()
                .enumerate()
                .map(|(t, &l)| log_posts.data()[t * vocab + l])
                .sum();
            total += lp.exp();
        }
        // next path in lexicographic order
        let mut i = frames;
        loop {
            if i == 0 {
                return -total.ln();
            }
            i -= 1;
            path[i] += 1;
            if path[i] < vocab {
                break;
            }
            path[i] = 0;
        }
    }
}

fn random_log_posts(rng: &mut ChaCha8Rng, frames: usize, vocab: usize) -> Tensor<f64> {
    let mut data = Vec::with_capacity(frames * vocab);
    for _ in 0..frames {
        let logits: Vec<f64> = (0..vocab).map(|_| rng.gen_range(-2.0..2.0)).collect();
        let mx = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - mx).exp()).sum();
        data.extend(logits.iter().map(|l| l - mx - z.ln()));
    }
    Tensor::new(vec![frames, vocab], data)
}

#[test]
fn criterion_01_ctc_loss_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let blank = 0usize;
    let mut worst: f64 = 0.0;
    let mut cases = 0usize;
    for frames in 2..=6 {
        for vocab in 2..=4usize {
            let lp = random_log_posts(&mut rng, frames, vocab);
            // all targets over non-blank labels up to length 3, incl. empty
            let labels: Vec<usize> = (0..vocab).filter(|&v| v != blank).collect();
            let mut targets: Vec<Vec<usize>> = vec![vec![]];
            for len in 1..=3usize {
                let mut idx = vec![0usize; len];
                'outer: loop {
                    // adjacent duplicates included: the loss must handle them
                    targets.push(idx.iter().map(|&i| labels[i]).collect());
                    let mut i = len;
                    loop {
                        if i == 0 {
                            break 'outer;
                        }
                        i -= 1;
                        idx[i] += 1;
                        if idx[i] < labels.len() {
                            break;
                        }
                        idx[i] = 0;
                    }
                }
            }
            for t in &targets {
                let oracle = ctc_brute_force(&lp, t, blank);
                let got: f64 = ctc_loss_value(&lp, t, blank);
                cases += 1;
                if oracle.is_infinite() || got.is_infinite() {
                    assert_eq!(
                        oracle.is_infinite(),
                        got.is_infinite(),
                        "feasibility mismatch frames={frames} vocab={vocab} target={t:?}"
                    );
                    continue;
                }
                let err = (oracle - got).abs() / oracle.abs().max(1.0);
                worst = worst.max(err);
                assert!(
                    err < 1e-6,
                    "frames={frames} vocab={vocab} target={t:?}: oracle {oracle} got {got}"
                );
            }
        }
    }
    verdict(
        1,
        "ctc loss vs exhaustive alignment sum",
        worst < 1e-6,
        &format!("{cases} cases, max rel err {worst:.2e}"),
    );
}

// --- criterion 2: full objective gradient check in f64 --------------------

#[test]
fn criterion_02_joint_loss_gradient_check() {
    let config = ModelConfig {
        d_model: 16,
        n_heads: 2,
        d_ff: 24,
        encoder_layers: 2,
        decoder_layers: 2,
        dropout: 0.0,
        vocab_size: 9,
        feat_dim: 6,
        ctc_weight: 0.3,
        encoder_window: None,
    };
    let model = Model::<f64>::init(config, 13).unwrap();
    let mut r = ChaCha8Rng::seed_from_u64(29);
    let features = Tensor::new(
        vec![2, 16, 6],
        (0..192).map(|_| r.gen_range(-1.0..1.0)).collect(),
    );
    let feat_lengths = vec![16, 11];
    let targets = vec![vec![5, 7, 6], vec![8, 5]];
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
    let parts = joint_loss(&mut sess, &features, &feat_lengths, &targets, &io, 0.1).unwrap();
    let grads = sess.tape.backward(parts.total).unwrap();

    let names: Vec<String> = model.params.iter().map(|(n, _)| n.to_string()).collect();
    let mut worst: f64 = 0.0;
    // every parameter tensor of the full model
    for name in &names {
        let analytic = grads.grad(sess.var(name)).clone();
        let f = |p: &Tensor<f64>| {
            let mut m = model.clone();
            *m.params.get_mut(name) = p.clone();
            loss_of(&m)
        };
        let err = finite_diff_check(f, model.params.get(name), &analytic, 1e-5).unwrap();
        worst = worst.max(err);
        assert!(err < 1e-4, "{name}: max rel err {err}");
    }
    verdict(
        2,
        "joint objective vs central differences (f64)",
        worst < 1e-4,
        &format!("{} tensors, max rel err {worst:.2e}", names.len()),
    );
}

// --- criterion 3: single causal pass == forced-prefix AR ------------------

#[test]
fn criterion_03_causal_refine_equals_forced_prefix_ar() {
    let corpus = generate_corpus(&CorpusConfig {
        n_train: 0,
        n_test: 200,
        ..desk_corpus_config()
    })
    .unwrap();
    // an untrained model: equivalence must hold for any parameters
    let model = Model::<f32>::init(desk_model_config(&corpus), 99).unwrap();
    let encoded = encode_utterances(&model, &corpus.test, 8).unwrap();

    let mut checked = 0usize;
    for eu in &encoded {
        let draft = ctc_draft(eu, SpikeMode::RunPeak).tokens;
        let refined = decode_causal_refine(&model, eu, &draft).unwrap();

        // oracle: step-by-step AR greedy forced to follow the draft prefix
        let mut sess = model.session(Mode::Eval, 0);
        let enc = sess.import_encoder(eu.states.clone(), vec![eu.sub_len()]);
        let mut oracle: Vec<usize> = Vec::new();
        // one forced step per row of [SOS, draft]: the final row may extend
        // the output one token past the draft when EOS does not win
        for i in 0..=draft.len() {
            let mut input = vec![SOS];
            input.extend_from_slice(&draft[..i]);
            let out = sess
                .decoder_forward(&[input.clone()], &DecoderMask::Causal, &enc)
                .unwrap();
            let row = sess.tape.value(out);
            let vocab = model.config.vocab_size;
            let last = &row.data()[(input.len() - 1) * vocab..input.len() * vocab];
            let mut best = CONTENT_BASE;
            for k in CONTENT_BASE + 1..vocab {
                if last[k] > last[best] {
                    best = k;
                }
            }
            if last[EOS] >= last[best] {
                break;
            }
            oracle.push(best);
        }
        assert_eq!(refined.tokens, oracle, "mismatch on {}", eu.utt_id);
        checked += 1;
    }
    verdict(
        3,
        "causal refinement == forced-prefix autoregression",
        checked == 200,
        &format!("{checked} utterances, exact token match"),
    );
}

// --- criterion 4: causality and padding invariance -------------------------

#[test]
fn criterion_04_causality_and_padding_invariance() {
    let config = ModelConfig {
        d_model: 32,
        n_heads: 4,
        d_ff: 48,
        encoder_layers: 2,
        decoder_layers: 2,
        dropout: 0.1, // eval mode must ignore it
        vocab_size: 13,
        feat_dim: 6,
        ctc_weight: 0.3,
        encoder_window: None,
    };
    let model = Model::<f32>::init(config.clone(), 7).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(41);

    // causality: perturbing token j leaves outputs before j bitwise intact
    for case in 0..100 {
        let frames = rng.gen_range(8..28);
        let feats = Tensor::new(
            vec![1, frames, 6],
            (0..frames * 6).map(|_| rng.gen_range(-1.0f32..1.0)).collect(),
        );
        let l = rng.gen_range(2..9usize);
        let mut tokens: Vec<usize> = vec![SOS];
        tokens.extend((1..l).map(|_| rng.gen_range(CONTENT_BASE..13)));
        let j = rng.gen_range(1..l);
        let mut perturbed = tokens.clone();
        perturbed[j] = if perturbed[j] + 1 < 13 { perturbed[j] + 1 } else { CONTENT_BASE };

        let run = |toks: &[usize]| -> Vec<f32> {
            let mut sess = model.session(Mode::Eval, 0);
            let enc = sess.encode(&feats, &[frames]).unwrap();
            let out = sess
                .decoder_forward(&[toks.to_vec()], &DecoderMask::Causal, &enc)
                .unwrap();
            sess.tape.value(out).data().to_vec()
        };
        let a = run(&tokens);
        let b = run(&perturbed);
        let vocab = 13;
        assert_eq!(a[..j * vocab], b[..j * vocab], "causality case {case} (j={j})");
        assert_ne!(a, b, "perturbation must matter somewhere (case {case})");
    }

    // padding invariance: an utterance batched next to a longer one decodes
    // to the same outputs as alone
    let mut worst = 0.0f32;
    for case in 0..100 {
        let short = rng.gen_range(8..20usize);
        let long = short + rng.gen_range(4..17);
        let mk = |frames: usize, r: &mut ChaCha8Rng| -> Vec<f32> {
            (0..frames * 6).map(|_| r.gen_range(-1.0f32..1.0)).collect()
        };
        let shorts = mk(short, &mut rng);
        let longs = mk(long, &mut rng);
        let l = rng.gen_range(2..7usize);
        let toks: Vec<usize> = std::iter::once(SOS)
            .chain((1..l).map(|_| rng.gen_range(CONTENT_BASE..13)))
            .collect();

        let solo = {
            let mut sess = model.session(Mode::Eval, 0);
            let enc = sess
                .encode(&Tensor::new(vec![1, short, 6], shorts.clone()), &[short])
                .unwrap();
            let out = sess
                .decoder_forward(&[toks.clone()], &DecoderMask::Causal, &enc)
                .unwrap();
            sess.tape.value(out).data().to_vec()
        };
        let batched = {
            let mut feats = vec![0.0f32; 2 * long * 6];
            feats[..short * 6].copy_from_slice(&shorts);
            feats[long * 6..].copy_from_slice(&longs);
            let mut sess = model.session(Mode::Eval, 0);
            let enc = sess
                .encode(&Tensor::new(vec![2, long, 6], feats), &[short, long])
                .unwrap();
            let out = sess
                .decoder_forward(
                    &[toks.clone(), toks.clone()],
                    &DecoderMask::Causal,
                    &enc,
                )
                .unwrap();
            let v = sess.tape.value(out);
            v.data()[..toks.len() * 13].to_vec()
        };
        for (i, (x, y)) in solo.iter().zip(&batched).enumerate() {
            let d = (x - y).abs();
            worst = worst.max(d);
            assert!(d < 1e-5, "padding case {case} idx {i}: {x} vs {y}");
        }
    }
    verdict(
        4,
        "decoder causality (bitwise) and padding invariance",
        true,
        &format!("100 cases each, max padding diff {worst:.2e}"),
    );
}

// --- criteria 5-9: trained desk-scale comparisons --------------------------

#[test]
fn criterion_05_strategy_table_orderings() {
    let w = world();
    let tf = &w.models[TrainStrategy::TeacherForcingCm.name()];
    let mf = &w.models[TrainStrategy::MaskForcingPm.name()];
    let pm = &w.models[TrainStrategy::CtcSamplingPm.name()];

    let mut beam1 = DecodeConfig::new(Strategy::Ar);
    beam1.beam = 1;
    let entries = [
        TableEntry {
            label: "causal-refine on teacher-forcing".into(),
            model: tf,
            config: DecodeConfig::new(Strategy::CausalRefine),
        },
        TableEntry {
            label: "mask-len on mask-forcing".into(),
            model: mf,
            config: DecodeConfig::new(Strategy::MaskLen),
        },
        TableEntry {
            label: "pm-refine on ctc-sampling-pm".into(),
            model: pm,
            config: DecodeConfig::new(Strategy::PmRefine),
        },
        TableEntry {
            label: "ar beam 10".into(),
            model: tf,
            config: DecodeConfig::new(Strategy::Ar),
        },
        TableEntry {
            label: "ar beam 1".into(),
            model: tf,
            config: beam1,
        },
    ];
    let rows = run_strategy_table(&entries, &w.corpus.test, 8).unwrap();
    let cer: Vec<f64> = rows.iter().map(|r| r.cer).collect();
    for r in &rows {
        eprintln!("[table] {:<32} cer {:.4} rtf {:.5} passes {:.2}", r.label, r.cer, r.rtf, r.mean_decoder_passes);
    }
    let (causal, masklen, pmref, ar10, ar1) = (cer[0], cer[1], cer[2], cer[3], cer[4]);
    let a = causal <= masklen && causal <= pmref;
    let b = (causal - ar10).abs() <= 0.02;
    let c = ar10 <= ar1 + 0.002;
    let budget = w.build_secs < 3600.0;
    verdict(
        5,
        "strategy table orderings within the time budget",
        a && b && c && budget,
        &format!(
            "causal {causal:.4} masklen {masklen:.4} pm {pmref:.4} ar10 {ar10:.4} ar1 {ar1:.4}, build {:.0}s",
            w.build_secs
        ),
    );
}

#[test]
fn criterion_06_refinement_beats_raw_ctc() {
    let w = world();
    let model = &w.models[TrainStrategy::CtcSamplingCm.name()];
    let c = run_ctc_vs_decoder(model, &w.corpus.test, 8).unwrap();
    verdict(
        6,
        "causal refinement improves on greedy CTC",
        c.cer_decoder <= c.cer_ctc_greedy,
        &format!("ctc {:.4} vs refined {:.4}", c.cer_ctc_greedy, c.cer_decoder),
    );
}

#[test]
fn criterion_07_pass_counts_and_speedup() {
    let w = world();
    let model = &w.models[TrainStrategy::TeacherForcingCm.name()];

    // pass accounting, per utterance
    let encoded = encode_utterances(model, &w.corpus.test, 8).unwrap();
    for eu in &encoded {
        let refined = decode_causal_refine(model, eu, &ctc_draft(eu, SpikeMode::RunPeak).tokens).unwrap();
        let expect = usize::from(!ctc_draft(eu, SpikeMode::RunPeak).tokens.is_empty());
        assert_eq!(refined.decoder_passes, expect, "{}", eu.utt_id);
        let greedy = nar_asr::decode::decode_ar(model, eu, 1).unwrap();
        if !greedy.truncated {
            assert_eq!(greedy.decoder_passes, greedy.tokens.len() + 1, "{}", eu.utt_id);
        }
    }

    let ar10 = evaluate(model, &w.corpus.test, &DecodeConfig::new(Strategy::Ar), 8, true).unwrap();
    let single =
        evaluate(model, &w.corpus.test, &DecodeConfig::new(Strategy::CausalRefine), 8, true)
            .unwrap();
    let ratio = single.rtf / ar10.rtf;
    verdict(
        7,
        "pass accounting exact and single pass is >=5x faster than beam",
        ratio <= 0.2,
        &format!(
            "rtf ar10 {:.5}, causal {:.5}, ratio {:.3} (passes {:.1} vs {:.1})",
            ar10.rtf, single.rtf, ratio, ar10.mean_decoder_passes, single.mean_decoder_passes
        ),
    );
}

#[test]
fn criterion_08_ctc_length_prediction() {
    let w = world();
    let model = &w.models[TrainStrategy::CtcSamplingCm.name()];
    let hist = run_length_histogram(model, &w.corpus.test, 8).unwrap();
    let exact = hist.exact_rate();
    let within2 = hist.mass_within(2);
    verdict(
        8,
        "CTC spike count predicts target length",
        exact >= 0.80 && within2 >= 0.95,
        &format!("exact {exact:.3} (>=0.80), |diff|<=2 {within2:.3} (>=0.95)"),
    );
}

#[test]
fn criterion_09_robustness_gap_ordering() {
    let w = world();
    let entries = [
        TableEntry {
            label: "causal-refine".into(),
            model: &w.models[TrainStrategy::CtcSamplingCm.name()],
            config: DecodeConfig::new(Strategy::CausalRefine),
        },
        TableEntry {
            label: "pm-refine".into(),
            model: &w.models[TrainStrategy::CtcSamplingPm.name()],
            config: DecodeConfig::new(Strategy::PmRefine),
        },
        TableEntry {
            label: "mp-ctc".into(),
            model: &w.models[TrainStrategy::MaskPredictPm.name()],
            config: DecodeConfig::new(Strategy::MpCtc),
        },
    ];
    let rows = run_robustness(&entries, &w.corpus.test, 8, 5, 0.4).unwrap();
    for r in &rows {
        eprintln!(
            "[robustness] {:<14} ctc-in {:.4} gt-in {:.4} gap {:+.4}",
            r.strategy, r.cer_with_ctc_input, r.cer_with_gt_input, r.gap
        );
    }
    let causal_gap = rows[0].gap;
    let pm_gap = rows[1].gap;
    let mp_gap = rows[2].gap;
    verdict(
        9,
        "draft-robustness ordering (causal < pm-refine < mp-ctc gaps)",
        causal_gap < pm_gap && mp_gap > pm_gap,
        &format!("causal {causal_gap:+.4}, pm {pm_gap:+.4}, mp {mp_gap:+.4}"),
    );
}

// --- criterion 10: end-to-end determinism ----------------------------------

#[test]
fn criterion_10_end_to_end_determinism() {
    let run = || {
        let corpus = generate_corpus(&CorpusConfig {
            n_train: 120,
            n_test: 30,
            ..desk_corpus_config()
        })
        .unwrap();
        let mut model = Model::<f32>::init(desk_model_config(&corpus), DESK_SEED).unwrap();
        let mut cfg = desk_train_config(TrainStrategy::TeacherForcingCm);
        cfg.epochs = 3;
        cfg.warmup_steps = 30;
        train(&mut model, &corpus.train, &cfg).unwrap();
        let out =
            evaluate(&model, &corpus.test, &DecodeConfig::new(Strategy::CausalRefine), 8, false)
                .unwrap();
        (model, out.cer)
    };
    let (m1, cer1) = run();
    let (m2, cer2) = run();
    let mut identical = true;
    for (name, t) in m1.params.iter() {
        let o = m2.params.get(name);
        if t.data().iter().zip(o.data()).any(|(a, b)| a.to_bits() != b.to_bits()) {
            identical = false;
            eprintln!("[determinism] divergence in {name}");
        }
    }
    verdict(
        10,
        "identical seeds give bitwise-identical checkpoints and CER",
        identical && cer1 == cer2,
        &format!("cer {cer1:.4} vs {cer2:.4}, params bitwise {identical}"),
    );
}
