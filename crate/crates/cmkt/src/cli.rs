//! Command-line surface: corpus synthesis, training, decoding, evaluation,
//! and the finite-difference gradient suite.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::path::PathBuf;

use clap::{Parser, Subcommand};

use crate::config::{Config, EncoderConfig, ModelConfig};
use crate::ctc::ctc_loss_node;
use crate::encoder::{
    adapter_fuse, adapter_project, encoder_block, register_acoustic_params,
};
use crate::error::{Error, Result};
use crate::io::{load_checkpoint, read_feature};
use crate::model::Model;
use crate::ot::{eot_loss_node, sinkhorn_node};
use crate::params::{Bound, Init, Params};
use crate::tape::{
    grad_check_sampled, log_softmax_rows, mean_all, GradReport, NodeId, Tape,
};
use crate::tensor::Tensor2D;
use crate::text::{
    alignment_loss_node, cm_block, embed_tokens_node, register_text_params, tokenize, Vocabulary,
};
use crate::trainer::{
    composite_grad_check, corpus_cer, load_utterances, synth_dataset, SynthSpec, Trainer,
    Utterance,
};

#[derive(Parser)]
#[command(
    name = "cmkt",
    version,
    about = "Cross-modality knowledge-transfer training for CTC speech recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic labelled corpus under a directory
    Synth {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 32)]
        num_utts: usize,
        /// Distinct content characters ('a' onward, at most 26)
        #[arg(long, default_value_t = 8)]
        vocab_size: usize,
        /// Output directory (features plus manifest.tsv)
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model from a key=value config file and a manifest
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Training manifest (utt_id<TAB>feature_path<TAB>transcript)
        #[arg(long)]
        data: PathBuf,
        /// Output directory for checkpoints and metrics.jsonl
        #[arg(long)]
        out: PathBuf,
        /// Disable the cross-modality branch (acoustic-only baseline)
        #[arg(long)]
        no_cmkt: bool,
        /// Disable adapter feedback into the acoustic stack
        #[arg(long)]
        no_feedback: bool,
        /// Override the run seed (init, shuffling)
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Greedy-decode one feature file and print the hypothesis
    Decode {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        features: PathBuf,
    },
    /// Print corpus character error rate on a manifest
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        data: PathBuf,
    },
    /// Run the finite-difference gradient suite (nonzero exit on failure)
    Gradcheck {
        /// Probed entries per parameter tensor
        #[arg(long, default_value_t = 4)]
        probes: usize,
    },
}

/// Entry point used by `main`; argv comes from the process environment.
pub fn run() -> i32 {
    run_command(std::env::args_os())
}

/// Parses and executes one command line, returning the process exit code:
/// 0 success, 1 usage error, 2 data/format error, 3 gradient-suite failure.
pub fn run_command<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            return code;
        }
    };
    match dispatch(cli.command) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {}", err);
            2
        }
    }
}

fn dispatch(cmd: Command) -> Result<i32> {
    match cmd {
        Command::Synth {
            seed,
            num_utts,
            vocab_size,
            out,
        } => {
            let spec = SynthSpec {
                seed,
                num_utts,
                content_vocab: vocab_size,
                ..SynthSpec::default()
            };
            let manifest = synth_dataset(&spec, &out)?;
            println!("wrote {} utterances, manifest {}", num_utts, manifest.display());
            Ok(0)
        }
        Command::Train {
            config,
            data,
            out,
            no_cmkt,
            no_feedback,
            seed,
        } => {
            let text = std::fs::read_to_string(&config)?;
            let mut cfg = Config::parse(&text)?;
            if no_cmkt {
                cfg.model.flags.cmkt_enabled = false;
            }
            if no_feedback {
                cfg.model.flags.feedback_enabled = false;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
            }
            let utts = load_utterances(&data)?;
            let model = Model::init(cfg.model.clone(), cfg.train.seed)?;
            let mut trainer = Trainer::new(model, cfg.train.clone());
            let report = trainer.fit(&utts, Some(&out), None)?;
            if let Some(last) = report.epochs.last() {
                println!(
                    "trained {} epochs ({} steps), final train CER {:.4}",
                    last.epoch,
                    report.steps.len(),
                    last.train_cer
                );
            }
            if report.skipped_utterances > 0 {
                eprintln!(
                    "note: {} utterance visits were CTC-infeasible and skipped",
                    report.skipped_utterances
                );
            }
            if report.skipped_updates > 0 {
                eprintln!(
                    "note: {} optimizer updates skipped (non-finite gradients)",
                    report.skipped_updates
                );
            }
            println!("checkpoints and metrics.jsonl under {}", out.display());
            Ok(0)
        }
        Command::Decode { model, features } => {
            let ckpt = load_checkpoint(&model)?;
            let m = Model::from_parts(ckpt.config.model, ckpt.params)?;
            let feats = read_feature(&features)?;
            println!("{}", m.decode_to_string(&feats)?);
            Ok(0)
        }
        Command::Eval { model, data } => {
            let ckpt = load_checkpoint(&model)?;
            let m = Model::from_parts(ckpt.config.model, ckpt.params)?;
            let utts = load_utterances(&data)?;
            println!("{:.6}", corpus_cer(&m, &utts)?);
            Ok(0)
        }
        Command::Gradcheck { probes } => {
            let cases = gradient_suite(Some(probes.max(1)))?;
            let mut failed = false;
            for (name, report) in &cases {
                let ok = report.max_relative_error < GRAD_TOLERANCE;
                failed |= !ok;
                println!(
                    "{:<24} max rel err {:.3e} ({} probes, worst {}) {}",
                    name,
                    report.max_relative_error,
                    report.probes,
                    report.worst_parameter,
                    if ok { "PASS" } else { "FAIL" }
                );
            }
            Ok(if failed { 3 } else { 0 })
        }
    }
}

/// Acceptance threshold for every gradient check.
pub const GRAD_TOLERANCE: f64 = 1e-4;

fn tiny_encoder() -> EncoderConfig {
    let mut enc = Config::desk().model.encoder;
    enc.m_a = 2;
    enc.d_a = 8;
    enc.d_t = 12;
    enc.heads = 2;
    enc.ffn_dim = 16;
    enc.conv_kernel = 3;
    enc.subsample_layers = 1;
    enc.attachment_stride = 2;
    enc.d_in = 6;
    enc
}

fn tiny_model_config() -> ModelConfig {
    let mut cfg = Config::desk().model;
    cfg.encoder = tiny_encoder();
    cfg.m_t = 2;
    cfg
}

fn fixture(rows: usize, cols: usize, seed: u64) -> Tensor2D {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    Tensor2D::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0))
}

fn filtered(params: &Params, prefixes: &[&str]) -> Params {
    let mut out = Params::new();
    for (name, t) in params.iter() {
        if prefixes.iter().any(|p| name.starts_with(p)) {
            out.insert(name.clone(), t.clone());
        }
    }
    out
}

fn check_case<F>(
    name: &str,
    params: &Params,
    probes: Option<usize>,
    build: F,
) -> Result<(String, GradReport)>
where
    F: Fn(&Tape, &Bound) -> Result<NodeId>,
{
    let table: BTreeMap<String, Tensor2D> = params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    let report = grad_check_sampled(&table, 1e-5, probes, |tape, nodes| {
        build(tape, &Bound::from_nodes(nodes.clone()))
    })?;
    Ok((name.to_string(), report))
}

/// Central-difference gradient checks through every differentiable
/// component: one conformer-lite block, one CM block with the K=3 Sinkhorn
/// unroll, the adapter projection/fusion pair, the alignment and EOT
/// losses, CTC, and a small end-to-end composite loss.
pub fn gradient_suite(probes: Option<usize>) -> Result<Vec<(String, GradReport)>> {
    let mut cases = Vec::new();
    let enc = tiny_encoder();
    let vocab = Vocabulary::from_alphabet("abcd")?;

    let mut acoustic = Params::new();
    register_acoustic_params(&mut acoustic, &enc, vocab.size(), 41);
    let mut textual = Params::new();
    register_text_params(&mut textual, vocab.size(), enc.d_t, 1, 43);

    // One encoder block over a fixed input stream.
    let block_params = filtered(&acoustic, &["enc.1."]);
    let g_in = fixture(5, enc.d_a, 7);
    let enc_cfg = enc.clone();
    cases.push(check_case("conformer_block", &block_params, probes, move |tape, bound| {
        let g = tape.constant(g_in.clone());
        Ok(mean_all(tape, encoder_block(tape, bound, &enc_cfg, g, 1)?))
    })?);

    // One CM block: embedding -> Sinkhorn attention -> fusion.
    let tokens = tokenize("abca", &vocab);
    let h_in = fixture(5, enc.d_t, 8);
    let toks = tokens.clone();
    cases.push(check_case("cm_block_k3", &textual, probes, move |tape, bound| {
        let z0 = embed_tokens_node(tape, bound, &toks)?;
        let h = tape.constant(h_in.clone());
        let out = cm_block(tape, bound, z0, h, 1, 1, 1.0, 3)?;
        Ok(mean_all(tape, out.z))
    })?);

    // Adapter projection and feedback fusion.
    let adapter_params = filtered(&acoustic, &["adapter."]);
    let g_in = fixture(4, enc.d_a, 9);
    cases.push(check_case("adapter_fuse", &adapter_params, probes, move |tape, bound| {
        let g = tape.constant(g_in.clone());
        let h = adapter_project(tape, bound, g)?;
        Ok(mean_all(tape, adapter_fuse(tape, bound, g, h)?))
    })?);

    // Alignment loss against a fixed target.
    let emb_params = filtered(&textual, &["text.emb"]);
    let target = fixture(6, enc.d_t, 10);
    let toks = tokens.clone();
    cases.push(check_case("alignment_loss", &emb_params, probes, move |tape, bound| {
        let z = embed_tokens_node(tape, bound, &toks)?;
        let tgt = tape.constant(target.clone());
        alignment_loss_node(tape, z, tgt)
    })?);

    // EOT loss as a function of the cost matrix itself.
    let mut cost_params = Params::new();
    cost_params.init("c", 4, 5, Init::Uniform { limit: 2.0 }, 11);
    cases.push(check_case("eot_loss", &cost_params, probes, |tape, bound| {
        let c = bound.node("c")?;
        let plan = sinkhorn_node(tape, c, 0.7, 3, true, None)?;
        eot_loss_node(tape, plan.gamma, plan.log_gamma, c, 0.7)
    })?);

    // CTC loss as a function of pre-softmax scores.
    let mut logit_params = Params::new();
    logit_params.init("logits", 5, vocab.size(), Init::Uniform { limit: 1.5 }, 12);
    cases.push(check_case("ctc_loss", &logit_params, probes, |tape, bound| {
        let log_probs = log_softmax_rows(tape, bound.node("logits")?)?;
        ctc_loss_node(tape, log_probs, &[4, 5, 4])?
            .ok_or_else(|| Error::numeric("gradient-suite CTC case must be feasible"))
    })?);

    // End-to-end composite loss on a two-utterance micro-corpus
    // (subsampled length 3 per utterance).
    let model = Model::init(tiny_model_config(), 44)?;
    let utts = vec![
        Utterance {
            utt_id: "g0".into(),
            features: fixture(7, enc.d_in, 13),
            transcript: "ab".into(),
        },
        Utterance {
            utt_id: "g1".into(),
            features: fixture(8, enc.d_in, 14),
            transcript: "ba".into(),
        },
    ];
    let report = composite_grad_check(&model, &utts, 1e-5, probes)?;
    cases.push(("end_to_end_desk_tiny".to_string(), report));

    Ok(cases)
}
