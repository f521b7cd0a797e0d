//! Thin command-line front end over the library: corpus generation,
//! training, decoding, evaluation, the report generators, and the
//! real-time-factor benchmark. Every knob a flag takes can also come from
//! a flat `key = value` config file (flags win).
//!
//! Exit codes: 0 on success, 2 on usage/config errors, 1 on runtime
//! failures.

use clap::{Args, Parser, Subcommand};
use nar_asr::data::{self, CorpusConfig};
use nar_asr::decode::{self, DecodeConfig, Strategy};
use nar_asr::harness::{self, TableEntry};
use nar_asr::model::{load_checkpoint, save_checkpoint, Model, ModelConfig};
use nar_asr::train::{self, TrainConfig, TrainStrategy};
use nar_asr::{NarError, Result};
use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;

#[derive(Parser)]
#[command(name = "nar-asr", about = "Desk-scale ASR workbench", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its manifest.
    GenData(GenDataArgs),
    /// Train a model with one decoder-input strategy.
    Train(TrainArgs),
    /// Decode the test split and write hypotheses as JSONL.
    Decode(DecodeArgs),
    /// Decode and score: error rate, real-time factor, pass counts.
    Eval(DecodeArgs),
    /// Per-strategy table (error rate / real-time factor / passes).
    ReportTable1(ReportTableArgs),
    /// Decoder-input robustness experiment.
    ReportFig2(ReportTableArgs),
    /// CTC length-prediction histogram.
    ReportFig3(SingleModelReportArgs),
    /// CTC greedy vs decoder-refined error rate.
    ReportTable3(SingleModelReportArgs),
    /// Real-time-factor benchmark over a list of strategies.
    BenchRtf(BenchArgs),
}

#[derive(Args)]
struct ConfigArg {
    /// Flat key=value config file supplying defaults for any flag.
    #[arg(long)]
    config: Option<PathBuf>,
}

#[derive(Args)]
struct GenDataArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Output directory for corpus.json and manifest.jsonl.
    #[arg(long, default_value = "data")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_train: Option<usize>,
    #[arg(long)]
    n_test: Option<usize>,
    #[arg(long)]
    n_content_tokens: Option<usize>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    config: ConfigArg,
    /// Decoder-input regime (teacher-forcing-cm, ctc-sampling-cm,
    /// ctc-sampling-pm, mask-forcing-pm, mask-predict-pm).
    #[arg(long)]
    strategy: Option<String>,
    /// Corpus file written by gen-data.
    #[arg(long, default_value = "data/corpus.json")]
    corpus: PathBuf,
    /// Checkpoint path to write.
    #[arg(long, default_value = "model.ckpt")]
    out: PathBuf,
    /// Optional CSV training log.
    #[arg(long)]
    log: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    lr_scale: Option<f64>,
    #[arg(long)]
    warmup_steps: Option<usize>,
    #[arg(long)]
    sampling_start_epoch: Option<usize>,
    #[arg(long)]
    dropout: Option<f64>,
    #[arg(long)]
    ctc_weight: Option<f64>,
}

#[derive(Args)]
struct DecodeArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, visible_alias = "test", default_value = "data/corpus.json")]
    corpus: PathBuf,
    /// Inference strategy (ar, fixed-mask, spike-copy, mp-ctc,
    /// causal-refine, pm-refine, mask-len).
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    fixed_len: Option<usize>,
    #[arg(long)]
    mp_iterations: Option<usize>,
    #[arg(long)]
    mp_threshold: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Hypothesis JSONL path (decode subcommand only).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ReportTableArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long, visible_alias = "test", default_value = "data/corpus.json")]
    corpus: PathBuf,
    /// One table row: `label,strategy,checkpoint[,beamN]`. Repeatable; a
    /// row whose checkpoint fails to load is skipped with a warning.
    #[arg(long = "row", required = true)]
    rows: Vec<String>,
    #[arg(long, default_value = "reports")]
    out_dir: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct SingleModelReportArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, visible_alias = "test", default_value = "data/corpus.json")]
    corpus: PathBuf,
    #[arg(long, default_value = "reports")]
    out_dir: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
}

#[derive(Args)]
struct BenchArgs {
    #[command(flatten)]
    config: ConfigArg,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long, visible_alias = "test", default_value = "data/corpus.json")]
    corpus: PathBuf,
    /// Comma-separated list like `ar:beam10,causal_refine`.
    #[arg(long)]
    strategies: String,
    /// Output CSV (stdout summary is always printed).
    #[arg(long, default_value = "reports/rtf.csv")]
    out: PathBuf,
    #[arg(long)]
    batch_size: Option<usize>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenData(a) => cmd_gen_data(a),
        Command::Train(a) => cmd_train(a),
        Command::Decode(a) => cmd_decode(a, true),
        Command::Eval(a) => cmd_decode(a, false),
        Command::ReportTable1(a) => cmd_report_table1(a),
        Command::ReportFig2(a) => cmd_report_fig2(a),
        Command::ReportFig3(a) => cmd_report_fig3(a),
        Command::ReportTable3(a) => cmd_report_table3(a),
        Command::BenchRtf(a) => cmd_bench_rtf(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ NarError::Config(_)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}

/// Typed lookup in a config-file map.
fn cfg_get<T: FromStr>(map: &HashMap<String, String>, key: &str) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some(v) => v
            .parse::<T>()
            .map(Some)
            .map_err(|_| NarError::Config(format!("config key '{key}': bad value '{v}'"))),
    }
}

fn load_config(arg: &ConfigArg) -> Result<HashMap<String, String>> {
    match &arg.config {
        Some(p) => harness::parse_config_file(p),
        None => Ok(HashMap::new()),
    }
}

/// Strategy names accept underscores interchangeably with hyphens.
fn normalize(name: &str) -> String {
    name.replace('_', "-")
}

fn cmd_gen_data(a: GenDataArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let mut cfg = CorpusConfig::default();
    macro_rules! fill {
        ($field:ident) => {
            if let Some(v) = cfg_get(&file, stringify!($field))? {
                cfg.$field = v;
            }
        };
    }
    fill!(seed);
    fill!(n_train);
    fill!(n_test);
    fill!(n_content_tokens);
    fill!(feat_dim);
    fill!(len_min);
    fill!(len_max);
    fill!(frames_per_token_min);
    fill!(frames_per_token_max);
    fill!(noise_std);
    fill!(prototype_std);
    fill!(frame_duration);
    fill!(branching);
    fill!(homophone_pairs);
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.n_train {
        cfg.n_train = v;
    }
    if let Some(v) = a.n_test {
        cfg.n_test = v;
    }
    if let Some(v) = a.n_content_tokens {
        cfg.n_content_tokens = v;
    }
    let corpus = data::generate_corpus(&cfg)?;
    std::fs::create_dir_all(&a.out_dir)?;
    let corpus_path = a.out_dir.join("corpus.json");
    data::save_corpus(&corpus_path, &corpus)?;
    data::write_manifest(&a.out_dir.join("manifest.jsonl"), &corpus)?;
    println!(
        "wrote {} ({} train / {} test utterances, vocab {})",
        corpus_path.display(),
        corpus.train.len(),
        corpus.test.len(),
        corpus.vocab.size()
    );
    Ok(())
}

fn model_config_from(
    file: &HashMap<String, String>,
    vocab_size: usize,
    feat_dim: usize,
) -> Result<ModelConfig> {
    let mut m = ModelConfig::desk(vocab_size, feat_dim);
    macro_rules! fill {
        ($field:ident) => {
            if let Some(v) = cfg_get(file, stringify!($field))? {
                m.$field = v;
            }
        };
    }
    fill!(d_model);
    fill!(n_heads);
    fill!(d_ff);
    fill!(encoder_layers);
    fill!(decoder_layers);
    fill!(dropout);
    fill!(ctc_weight);
    // window in subsampled frames; the word "global" lifts the restriction
    if let Some(v) = file.get("encoder_window") {
        m.encoder_window = if v == "global" {
            None
        } else {
            Some(cfg_get::<usize>(file, "encoder_window")?.unwrap())
        };
    }
    Ok(m)
}

fn cmd_train(a: TrainArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let strategy_name = a
        .strategy
        .or_else(|| file.get("strategy").cloned())
        .ok_or_else(|| NarError::Config("missing --strategy".into()))?;
    let strategy = TrainStrategy::parse(&normalize(&strategy_name))?;
    let corpus = data::load_corpus(&a.corpus)?;

    let mut model_cfg = model_config_from(&file, corpus.vocab.size(), corpus.config.feat_dim)?;
    if let Some(v) = a.dropout {
        model_cfg.dropout = v;
    }
    if let Some(v) = a.ctc_weight {
        model_cfg.ctc_weight = v;
    }

    let mut cfg = TrainConfig::new(strategy);
    macro_rules! fill {
        ($field:ident) => {
            if let Some(v) = cfg_get(&file, stringify!($field))? {
                cfg.$field = v;
            }
        };
    }
    fill!(epochs);
    fill!(batch_size);
    fill!(lr_scale);
    fill!(warmup_steps);
    fill!(grad_clip);
    fill!(label_smoothing);
    fill!(sampling_start_epoch);
    fill!(length_tolerance);
    fill!(seed);
    fill!(spec_augment);
    if let Some(v) = a.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = a.batch_size {
        cfg.batch_size = v;
    }
    if let Some(v) = a.seed {
        cfg.seed = v;
    }
    if let Some(v) = a.lr_scale {
        cfg.lr_scale = v;
    }
    if let Some(v) = a.warmup_steps {
        cfg.warmup_steps = v;
    }
    if let Some(v) = a.sampling_start_epoch {
        cfg.sampling_start_epoch = v;
    }

    let mut model = Model::<f32>::init(model_cfg, cfg.seed)?;
    let report = train::train(&mut model, &corpus.train, &cfg)?;
    save_checkpoint(&a.out, &model)?;
    if let Some(log) = &a.log {
        train::write_training_log(log, &report.log)?;
    }
    println!(
        "trained {} for {} steps ({} skipped); final-epoch loss {:.4}; wrote {}",
        strategy,
        report.steps,
        report.skipped_steps,
        report.final_epoch_loss,
        a.out.display()
    );
    Ok(())
}

fn decode_config_from(
    file: &HashMap<String, String>,
    a: &DecodeArgs,
) -> Result<(DecodeConfig, usize)> {
    let strategy_name = a
        .strategy
        .clone()
        .or_else(|| file.get("strategy").cloned())
        .ok_or_else(|| NarError::Config("missing --strategy".into()))?;
    let mut cfg = DecodeConfig::new(Strategy::parse(&normalize(&strategy_name))?);
    macro_rules! fill {
        ($field:ident) => {
            if let Some(v) = cfg_get(file, stringify!($field))? {
                cfg.$field = v;
            }
        };
    }
    fill!(beam);
    fill!(fixed_len);
    fill!(mp_iterations);
    fill!(mp_threshold);
    if let Some(v) = a.beam {
        cfg.beam = v;
    }
    if let Some(v) = a.fixed_len {
        cfg.fixed_len = v;
    }
    if let Some(v) = a.mp_iterations {
        cfg.mp_iterations = v;
    }
    if let Some(v) = a.mp_threshold {
        cfg.mp_threshold = v;
    }
    cfg.validate()?;
    let batch_size = a
        .batch_size
        .map(Ok)
        .unwrap_or_else(|| cfg_get(file, "batch_size").map(|v| v.unwrap_or(8)))?;
    Ok((cfg, batch_size))
}

fn cmd_decode(a: DecodeArgs, write_hyps: bool) -> Result<()> {
    let file = load_config(&a.config)?;
    let (cfg, batch_size) = decode_config_from(&file, &a)?;
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = data::load_corpus(&a.corpus)?;
    let out = harness::evaluate(&model, &corpus.test, &cfg, batch_size, !write_hyps)?;
    if write_hyps {
        let path = a
            .out
            .clone()
            .unwrap_or_else(|| PathBuf::from(format!("hyp-{}.jsonl", cfg.strategy)));
        decode::write_results_jsonl(&path, &out.results)?;
        println!("wrote {} hypotheses to {}", out.results.len(), path.display());
    }
    println!(
        "strategy {}  cer {:.4}  rtf {:.5}  mean passes {:.2}  ({} utterances, {:.1} s audio)",
        cfg.strategy,
        out.cer,
        out.rtf,
        out.mean_decoder_passes,
        out.results.len(),
        out.audio_s
    );
    Ok(())
}

/// Parse `label,strategy,checkpoint[,beamN]` rows, loading checkpoints and
/// skipping (with a warning) rows whose checkpoint cannot be loaded.
fn load_rows(rows: &[String]) -> Result<Vec<(String, Model<f32>, DecodeConfig)>> {
    let mut out = Vec::new();
    for row in rows {
        let parts: Vec<&str> = row.split(',').map(str::trim).collect();
        if parts.len() < 3 || parts.len() > 4 {
            return Err(NarError::Config(format!(
                "bad --row '{row}' (expected label,strategy,checkpoint[,beamN])"
            )));
        }
        let mut cfg = DecodeConfig::new(Strategy::parse(&normalize(parts[1]))?);
        if parts.len() == 4 {
            let b = parts[3]
                .strip_prefix("beam")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| NarError::Config(format!("bad beam spec '{}'", parts[3])))?;
            cfg.beam = b;
        }
        match load_checkpoint(Path::new(parts[2])) {
            Ok(model) => out.push((parts[0].to_string(), model, cfg)),
            Err(e) => eprintln!("warning: skipping row '{}': {e}", parts[0]),
        }
    }
    Ok(out)
}

fn cmd_report_table1(a: ReportTableArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let batch_size = a
        .batch_size
        .map(Ok)
        .unwrap_or_else(|| cfg_get(&file, "batch_size").map(|v| v.unwrap_or(8)))?;
    let corpus = data::load_corpus(&a.corpus)?;
    let loaded = load_rows(&a.rows)?;
    let entries: Vec<TableEntry<'_>> = loaded
        .iter()
        .map(|(label, model, cfg)| TableEntry {
            label: label.clone(),
            model,
            config: cfg.clone(),
        })
        .collect();
    let rows = harness::run_strategy_table(&entries, &corpus.test, batch_size)?;
    std::fs::create_dir_all(&a.out_dir)?;
    harness::write_strategy_table_csv(&a.out_dir.join("table1.csv"), &rows)?;
    harness::write_strategy_table_text(&a.out_dir.join("table1.txt"), &rows)?;
    println!("wrote {}", a.out_dir.join("table1.{csv,txt}").display());
    Ok(())
}

fn cmd_report_fig2(a: ReportTableArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let batch_size = a
        .batch_size
        .map(Ok)
        .unwrap_or_else(|| cfg_get(&file, "batch_size").map(|v| v.unwrap_or(8)))?;
    let mp_iterations = cfg_get(&file, "mp_iterations")?.unwrap_or(5);
    let mp_threshold = cfg_get(&file, "mp_threshold")?.unwrap_or(0.4);
    let corpus = data::load_corpus(&a.corpus)?;
    let loaded = load_rows(&a.rows)?;
    let entries: Vec<TableEntry<'_>> = loaded
        .iter()
        .map(|(label, model, cfg)| TableEntry {
            label: label.clone(),
            model,
            config: cfg.clone(),
        })
        .collect();
    let rows =
        harness::run_robustness(&entries, &corpus.test, batch_size, mp_iterations, mp_threshold)?;
    std::fs::create_dir_all(&a.out_dir)?;
    harness::write_robustness_csv(&a.out_dir.join("fig2.csv"), &rows)?;
    harness::write_robustness_text(&a.out_dir.join("fig2.txt"), &rows)?;
    println!("wrote {}", a.out_dir.join("fig2.{csv,txt}").display());
    Ok(())
}

fn cmd_report_fig3(a: SingleModelReportArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let batch_size = a
        .batch_size
        .map(Ok)
        .unwrap_or_else(|| cfg_get(&file, "batch_size").map(|v| v.unwrap_or(8)))?;
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = data::load_corpus(&a.corpus)?;
    let hist = harness::run_length_histogram(&model, &corpus.test, batch_size)?;
    std::fs::create_dir_all(&a.out_dir)?;
    harness::write_histogram_csv(&a.out_dir.join("fig3.csv"), &hist)?;
    harness::write_histogram_text(&a.out_dir.join("fig3.txt"), &hist)?;
    println!(
        "wrote {} (exact rate {:.4}, mass(diff<=0) {:.4})",
        a.out_dir.join("fig3.{csv,txt}").display(),
        hist.exact_rate(),
        hist.mass_le_zero()
    );
    Ok(())
}

fn cmd_report_table3(a: SingleModelReportArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let batch_size = a
        .batch_size
        .map(Ok)
        .unwrap_or_else(|| cfg_get(&file, "batch_size").map(|v| v.unwrap_or(8)))?;
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = data::load_corpus(&a.corpus)?;
    let cmp = harness::run_ctc_vs_decoder(&model, &corpus.test, batch_size)?;
    std::fs::create_dir_all(&a.out_dir)?;
    harness::write_ctc_vs_decoder_csv(&a.out_dir.join("table3.csv"), &cmp)?;
    harness::write_ctc_vs_decoder_text(&a.out_dir.join("table3.txt"), &cmp)?;
    println!(
        "wrote {} (ctc {:.4} vs decoder {:.4})",
        a.out_dir.join("table3.{csv,txt}").display(),
        cmp.cer_ctc_greedy,
        cmp.cer_decoder
    );
    Ok(())
}

/// Parse one bench item like `ar:beam10` or `causal_refine`.
fn parse_bench_item(item: &str) -> Result<(String, DecodeConfig)> {
    let (name, beam) = match item.split_once(':') {
        Some((n, spec)) => {
            let b = spec
                .strip_prefix("beam")
                .and_then(|v| v.parse::<usize>().ok())
                .ok_or_else(|| NarError::Config(format!("bad bench spec '{item}'")))?;
            (n, Some(b))
        }
        None => (item, None),
    };
    let mut cfg = DecodeConfig::new(Strategy::parse(&normalize(name))?);
    if let Some(b) = beam {
        cfg.beam = b;
    }
    Ok((item.to_string(), cfg))
}

fn cmd_bench_rtf(a: BenchArgs) -> Result<()> {
    let file = load_config(&a.config)?;
    let batch_size = a
        .batch_size
        .map(Ok)
        .unwrap_or_else(|| cfg_get(&file, "batch_size").map(|v| v.unwrap_or(8)))?;
    let model = load_checkpoint(&a.checkpoint)?;
    let corpus = data::load_corpus(&a.corpus)?;
    let mut rows = Vec::new();
    for item in a.strategies.split(',').map(str::trim).filter(|s| !s.is_empty()) {
        let (label, cfg) = parse_bench_item(item)?;
        let out = harness::evaluate(&model, &corpus.test, &cfg, batch_size, true)?;
        println!(
            "{label}: rtf {:.5} (wall {:.2} s over {:.1} s audio), cer {:.4}",
            out.rtf, out.wall_s, out.audio_s, out.cer
        );
        rows.push(harness::StrategyRow {
            label,
            strategy: cfg.strategy.name().to_string(),
            cer: out.cer,
            rtf: out.rtf,
            mean_decoder_passes: out.mean_decoder_passes,
        });
    }
    if let Some(dir) = a.out.parent() {
        if !dir.as_os_str().is_empty() {
            std::fs::create_dir_all(dir)?;
        }
    }
    harness::write_strategy_table_csv(&a.out, &rows)?;
    println!("wrote {}", a.out.display());
    Ok(())
}
