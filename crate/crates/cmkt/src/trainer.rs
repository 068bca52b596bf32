//! Training: composite-loss assembly over utterance batches, Adam with a
//! warmup/inverse-sqrt schedule, synthetic corpus generation, checkpointing,
//! and corpus-level evaluation.

use std::collections::{BTreeMap, VecDeque};
use std::fs::File;
use std::io::{BufWriter, Write as IoWrite};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::Serialize;

use crate::config::{Config, TrainConfig};
use crate::ctc::{ctc_loss_node, levenshtein, min_frames};
use crate::encoder::subsampled_len;
use crate::error::{Error, Result};
use crate::io::{save_checkpoint, write_feature, write_manifest, ManifestEntry};
use crate::model::Model;
use crate::params::{
    bind, collect_grads, name_stream, Bound, Params,
};
use crate::tape::{grad_check_sampled, GradReport, NodeId, Tape};
use crate::tensor::Tensor2D;
use crate::text::{tokenize, TokenSequence};

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.98;
const ADAM_EPS: f64 = 1e-9;

/// Learning rate at a 1-based optimizer step: linear warmup to `peak` over
/// `warmup` steps, then inverse square-root decay.
pub fn lr_schedule(step: u64, warmup: usize, peak: f64) -> f64 {
    if step == 0 {
        return 0.0;
    }
    let s = step as f64;
    let w = warmup.max(1) as f64;
    peak * (s / w).min((w / s).sqrt())
}

/// Adam optimizer state (first/second moments plus the update count).
pub struct AdamState {
    pub m: Params,
    pub v: Params,
    /// Completed updates; also the bias-correction exponent.
    pub t: u64,
    /// Updates skipped because the batch gradient was non-finite.
    pub skipped: u64,
}

impl AdamState {
    pub fn new(params: &Params) -> AdamState {
        let mut m = Params::new();
        let mut v = Params::new();
        for (name, t) in params.iter() {
            m.insert(name.clone(), Tensor2D::zeros(t.rows(), t.cols()));
            v.insert(name.clone(), Tensor2D::zeros(t.rows(), t.cols()));
        }
        AdamState {
            m,
            v,
            t: 0,
            skipped: 0,
        }
    }

    /// Resumes from checkpointed moments.
    pub fn from_moments(m: Params, v: Params, t: u64) -> AdamState {
        AdamState {
            m,
            v,
            t,
            skipped: 0,
        }
    }

    /// One bias-corrected update. Returns `false` (and counts the skip)
    /// when any gradient entry is non-finite; parameters are untouched.
    pub fn step(&mut self, params: &mut Params, grads: &Params, lr: f64) -> Result<bool> {
        let finite = grads
            .iter()
            .all(|(_, g)| g.data().iter().all(|x| x.is_finite()));
        if !finite {
            self.skipped += 1;
            return Ok(false);
        }
        self.t += 1;
        let bc1 = 1.0 - BETA1.powi(self.t as i32);
        let bc2 = 1.0 - BETA2.powi(self.t as i32);
        for (name, g) in grads.iter() {
            let m = self.m.get_mut(name)?;
            *m = m.zip_map(g, |m, g| BETA1 * m + (1.0 - BETA1) * g);
            let m = self.m.get(name)?.clone();
            let v = self.v.get_mut(name)?;
            *v = v.zip_map(g, |v, g| BETA2 * v + (1.0 - BETA2) * g * g);
            let v = self.v.get(name)?.clone();
            let p = params.get_mut(name)?;
            let upd = m.zip_map(&v, |m, v| {
                let m_hat = m / bc1;
                let v_hat = v / bc2;
                m_hat / (v_hat.sqrt() + ADAM_EPS)
            });
            *p = p.zip_map(&upd, |p, u| p - lr * u);
        }
        Ok(true)
    }
}

/// Rescales gradients so the global L2 norm does not exceed `max_norm`.
/// Returns the pre-clip norm.
pub fn clip_global_norm(grads: &mut Params, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        let s = max_norm / norm;
        for (_, t) in grads.iter_mut() {
            *t = t.scale(s);
        }
    }
    norm
}

/// One labelled utterance: features in, transcript out.
#[derive(Debug, Clone)]
pub struct Utterance {
    pub utt_id: String,
    pub features: Tensor2D,
    pub transcript: String,
}

/// Parameters of the synthetic corpus generator.
#[derive(Debug, Clone)]
pub struct SynthSpec {
    pub seed: u64,
    pub num_utts: usize,
    /// Number of distinct content characters ('a' onward, at most 26).
    pub content_vocab: usize,
    pub d_in: usize,
    /// Inclusive range of frames each token emits.
    pub frames_per_token: (usize, usize),
    pub noise_std: f64,
    /// Inclusive range of tokens per utterance.
    pub utt_tokens: (usize, usize),
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            seed: 0,
            num_utts: 32,
            content_vocab: 8,
            d_in: 16,
            frames_per_token: (2, 4),
            noise_std: 0.1,
            utt_tokens: (2, 10),
        }
    }
}

/// First `n` lowercase letters, the alphabet the generator emits.
pub fn synth_alphabet(n: usize) -> Result<String> {
    if n == 0 || n > 26 {
        return Err(Error::Config(format!(
            "content vocabulary size {} outside 1..=26",
            n
        )));
    }
    Ok(('a'..='z').take(n).collect())
}

fn synth_rng(seed: u64, label: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(name_stream(label));
    rng
}

/// Synthetic utterances: each token emits a run of frames around a
/// token-specific prototype vector plus Gaussian noise. Deterministic in
/// the `SynthSpec` (same settings, same corpus, bit for bit).
pub fn synth_utterances(spec: &SynthSpec) -> Result<Vec<Utterance>> {
    let alphabet: Vec<char> = synth_alphabet(spec.content_vocab)?.chars().collect();
    if spec.d_in == 0 || spec.num_utts == 0 {
        return Err(Error::Config("synthesis needs d_in >= 1 and utterances >= 1".into()));
    }
    let (f_lo, f_hi) = spec.frames_per_token;
    let (u_lo, u_hi) = spec.utt_tokens;
    if f_lo == 0 || f_lo > f_hi || u_lo == 0 || u_lo > u_hi {
        return Err(Error::Config("empty frames-per-token or tokens-per-utterance range".into()));
    }

    let prototypes: Vec<Vec<f64>> = (0..spec.content_vocab)
        .map(|k| {
            let mut rng = synth_rng(spec.seed, &format!("synth.proto.{}", k));
            (0..spec.d_in).map(|_| rng.gen_range(-1.0..1.0)).collect()
        })
        .collect();

    let mut utts = Vec::with_capacity(spec.num_utts);
    for i in 0..spec.num_utts {
        let mut rng = synth_rng(spec.seed, &format!("synth.utt.{}", i));
        let u = rng.gen_range(u_lo..=u_hi);
        let token_ids: Vec<usize> = (0..u).map(|_| rng.gen_range(0..spec.content_vocab)).collect();
        let transcript: String = token_ids.iter().map(|&k| alphabet[k]).collect();

        let mut rows: Vec<f64> = Vec::new();
        let mut frames = 0usize;
        for &k in &token_ids {
            let span = rng.gen_range(f_lo..=f_hi);
            for _ in 0..span {
                frames += 1;
                for &mean in &prototypes[k] {
                    let noise: f64 = rng.sample(StandardNormal);
                    rows.push(mean + spec.noise_std * noise);
                }
            }
        }
        utts.push(Utterance {
            utt_id: format!("utt{:04}", i),
            features: Tensor2D::from_raw(frames, spec.d_in, rows),
            transcript,
        });
    }
    Ok(utts)
}

/// Writes the synthetic corpus under `dir` (one feature file per utterance
/// plus `manifest.tsv`) and returns the manifest path.
pub fn synth_dataset(spec: &SynthSpec, dir: &Path) -> Result<PathBuf> {
    std::fs::create_dir_all(dir)?;
    let utts = synth_utterances(spec)?;
    let mut entries = Vec::with_capacity(utts.len());
    for utt in &utts {
        let file = format!("{}.cmkt", utt.utt_id);
        write_feature(&dir.join(&file), &utt.features)?;
        entries.push(ManifestEntry {
            utt_id: utt.utt_id.clone(),
            feature_path: PathBuf::from(file),
            transcript: utt.transcript.clone(),
        });
    }
    let manifest = dir.join("manifest.tsv");
    write_manifest(&manifest, &entries)?;
    Ok(manifest)
}

/// Loads every utterance a manifest references.
pub fn load_utterances(manifest: &Path) -> Result<Vec<Utterance>> {
    crate::io::read_manifest(manifest)?
        .into_iter()
        .map(|e| {
            Ok(Utterance {
                features: crate::io::read_feature(&e.feature_path)?,
                utt_id: e.utt_id,
                transcript: e.transcript,
            })
        })
        .collect()
}

/// An utterance ready for the training graph: tokenized, target attached,
/// CTC feasibility precomputed.
#[derive(Debug, Clone)]
pub struct PreparedUtt {
    pub utt_id: String,
    pub features: Tensor2D,
    pub tokens: TokenSequence,
    /// Target-space representation for alignment (present iff the CMKT
    /// branch is enabled).
    pub target: Option<Tensor2D>,
    /// Whether the subsampled frame count admits the CTC target.
    pub feasible: bool,
}

/// Tokenizes, fetches targets, and checks CTC feasibility for a corpus.
pub fn prepare_utts(model: &Model, utts: &[Utterance]) -> Result<Vec<PreparedUtt>> {
    let layers = model.config.encoder.subsample_layers;
    utts.iter()
        .map(|u| {
            let tokens = tokenize(&u.transcript, &model.vocab);
            let target = if model.config.flags.cmkt_enabled {
                Some(model.target.target_for(&u.utt_id, &tokens)?)
            } else {
                None
            };
            let feasible = match subsampled_len(u.features.rows(), layers) {
                Ok(l_a) => l_a >= min_frames(tokens.interior()),
                Err(_) => false,
            };
            Ok(PreparedUtt {
                utt_id: u.utt_id.clone(),
                features: u.features.clone(),
                tokens,
                target,
                feasible,
            })
        })
        .collect()
}

/// Scalar composite-loss components for one batch, all means over the
/// feasible utterances.
#[derive(Debug, Clone)]
pub struct LossBundle {
    pub ctc: f64,
    /// Attachment block -> mean alignment loss.
    pub align: BTreeMap<usize, f64>,
    /// Attachment block -> mean EOT loss.
    pub eot: BTreeMap<usize, f64>,
    pub total: f64,
}

impl LossBundle {
    pub fn align_sum(&self) -> f64 {
        self.align.values().sum()
    }

    pub fn eot_sum(&self) -> f64 {
        self.eot.values().sum()
    }

    /// Knowledge-transfer part: alignment plus EOT summed over blocks.
    pub fn transfer_sum(&self) -> f64 {
        self.align_sum() + self.eot_sum()
    }

    /// Recombines the components; must match `total` to tight tolerance.
    pub fn recomposed(&self, lambda: f64, w: f64) -> f64 {
        lambda * self.ctc + (1.0 - lambda) * w * self.transfer_sum()
    }
}

struct BatchNodes {
    total: NodeId,
    ctc_mean: NodeId,
    align: BTreeMap<usize, NodeId>,
    eot: BTreeMap<usize, NodeId>,
    feasible: usize,
    skipped: usize,
}

fn mean_node(tape: &Tape, nodes: &[NodeId]) -> Result<NodeId> {
    let mut sum = nodes[0];
    for &n in &nodes[1..] {
        sum = tape.add(sum, n)?;
    }
    Ok(tape.scale(sum, 1.0 / nodes.len() as f64))
}

/// Builds the composite-loss graph for a batch on `tape`. Returns `None`
/// when no utterance in the batch is CTC-feasible. `unrolled_eot` swaps the
/// envelope-gradient EOT nodes for fully differentiated ones; the values are
/// identical, so only finite-difference checks care.
fn assemble_batch(
    model: &Model,
    tape: &Tape,
    bound: &Bound,
    batch: &[&PreparedUtt],
    unrolled_eot: bool,
) -> Result<Option<BatchNodes>> {
    let cfg = &model.config;
    let mut ctc_nodes = Vec::new();
    let mut align_nodes: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    let mut eot_nodes: BTreeMap<usize, Vec<NodeId>> = BTreeMap::new();
    let mut skipped = 0usize;

    for utt in batch {
        if !utt.feasible {
            skipped += 1;
            continue;
        }
        let text = utt.target.as_ref().map(|t| (&utt.tokens, t));
        let fwd = model.forward_utterance(tape, bound, &utt.features, text)?;
        let ctc = ctc_loss_node(tape, fwd.log_posteriors, utt.tokens.interior())?
            .ok_or_else(|| Error::numeric("utterance marked feasible but CTC disagreed"))?;
        ctc_nodes.push(ctc);
        for (b, n) in fwd.align {
            align_nodes.entry(b).or_default().push(n);
        }
        let eot_terms = if unrolled_eot {
            fwd.eot_unrolled
        } else {
            fwd.eot
        };
        for (b, n) in eot_terms {
            eot_nodes.entry(b).or_default().push(n);
        }
    }
    if ctc_nodes.is_empty() {
        return Ok(None);
    }

    let ctc_mean = mean_node(tape, &ctc_nodes)?;
    let mut align = BTreeMap::new();
    let mut eot = BTreeMap::new();
    let mut transfer: Option<NodeId> = None;
    for (b, nodes) in &align_nodes {
        let m = mean_node(tape, nodes)?;
        align.insert(*b, m);
        transfer = Some(match transfer {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }
    for (b, nodes) in &eot_nodes {
        let m = mean_node(tape, nodes)?;
        eot.insert(*b, m);
        transfer = Some(match transfer {
            Some(t) => tape.add(t, m)?,
            None => m,
        });
    }

    let mut total = tape.scale(ctc_mean, cfg.lambda);
    if let Some(tr) = transfer {
        total = tape.add(total, tape.scale(tr, (1.0 - cfg.lambda) * cfg.w))?;
    }
    Ok(Some(BatchNodes {
        total,
        ctc_mean,
        align,
        eot,
        feasible: ctc_nodes.len(),
        skipped,
    }))
}

fn scalar_of(tape: &Tape, id: NodeId) -> f64 {
    tape.value(id).data()[0]
}

/// Losses plus parameter gradients for one batch.
pub struct BatchComputation {
    pub bundle: LossBundle,
    pub grads: Params,
    pub feasible: usize,
    pub skipped: usize,
}

/// Finite-difference check of the full composite-loss gradient on a small
/// corpus. `max_probes` caps probed entries per parameter.
pub fn composite_grad_check(
    model: &Model,
    utts: &[Utterance],
    h: f64,
    max_probes: Option<usize>,
) -> Result<GradReport> {
    let prepared = prepare_utts(model, utts)?;
    let refs: Vec<&PreparedUtt> = prepared.iter().collect();
    let table: BTreeMap<String, Tensor2D> = model
        .params
        .iter()
        .map(|(n, t)| (n.clone(), t.clone()))
        .collect();
    grad_check_sampled(&table, h, max_probes, |tape, nodes| {
        let bound = Bound::from_nodes(nodes.clone());
        let batch = assemble_batch(model, tape, &bound, &refs, true)?
            .ok_or_else(|| Error::numeric("no CTC-feasible utterance in gradient-check corpus"))?;
        Ok(batch.total)
    })
}

/// One metrics-log line: losses at an optimizer step. `train_cer` is
/// filled on the last step of each epoch.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    pub step: u64,
    pub lr: f64,
    pub ctc: f64,
    pub align: f64,
    pub eot: f64,
    pub total: f64,
    pub train_cer: Option<f64>,
}

/// Per-epoch aggregate of the step records plus the train-set greedy CER.
#[derive(Debug, Clone, Serialize)]
pub struct EpochSummary {
    pub epoch: usize,
    pub steps: usize,
    pub mean_total: f64,
    pub mean_ctc: f64,
    pub mean_align: f64,
    pub mean_eot: f64,
    pub train_cer: f64,
}

/// Everything `fit` produced.
pub struct TrainReport {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochSummary>,
    /// Utterance visits skipped as CTC-infeasible (counted per epoch).
    pub skipped_utterances: u64,
    /// Optimizer updates skipped for non-finite gradients.
    pub skipped_updates: u64,
}

/// Corpus character error rate: total edit distance over total reference
/// length, greedy decoding.
pub fn corpus_cer(model: &Model, utts: &[Utterance]) -> Result<f64> {
    let mut edits = 0usize;
    let mut chars = 0usize;
    for u in utts {
        let hyp = model.decode(&u.features)?;
        let reference = tokenize(&u.transcript, &model.vocab);
        edits += levenshtein(reference.interior(), &hyp.ids);
        chars += reference.interior().len();
    }
    if chars == 0 {
        return Err(Error::Data("empty reference corpus".into()));
    }
    Ok(edits as f64 / chars as f64)
}

/// Owns the model and optimizer state through a training run.
pub struct Trainer {
    pub model: Model,
    pub train: TrainConfig,
    pub opt: AdamState,
    pub skipped_utterances: u64,
}

impl Trainer {
    pub fn new(model: Model, train: TrainConfig) -> Trainer {
        let opt = AdamState::new(&model.params);
        Trainer {
            model,
            train,
            opt,
            skipped_utterances: 0,
        }
    }

    /// Rebuilds a trainer from checkpointed state.
    pub fn resume(model: Model, train: TrainConfig, moments: (Params, Params), step: u64) -> Trainer {
        Trainer {
            opt: AdamState::from_moments(moments.0, moments.1, step),
            model,
            train,
            skipped_utterances: 0,
        }
    }

    pub fn config(&self) -> Config {
        Config {
            model: self.model.config.clone(),
            train: self.train.clone(),
        }
    }

    pub fn prepare(&self, utts: &[Utterance]) -> Result<Vec<PreparedUtt>> {
        prepare_utts(&self.model, utts)
    }

    /// Forward/backward over one batch without touching parameters.
    pub fn compute_batch(&self, batch: &[&PreparedUtt]) -> Result<BatchComputation> {
        let cfg = &self.model.config;
        let tape = Tape::new();
        let bound = bind(&tape, &self.model.params, true);
        let nodes = match assemble_batch(&self.model, &tape, &bound, batch, false)? {
            Some(n) => n,
            None => {
                return Ok(BatchComputation {
                    bundle: LossBundle {
                        ctc: 0.0,
                        align: BTreeMap::new(),
                        eot: BTreeMap::new(),
                        total: 0.0,
                    },
                    grads: Params::new(),
                    feasible: 0,
                    skipped: batch.len(),
                })
            }
        };

        let grads_raw = tape.backward(nodes.total);
        let grads = collect_grads(&bound, &grads_raw, &self.model.params)?;
        let bundle = LossBundle {
            ctc: scalar_of(&tape, nodes.ctc_mean),
            align: nodes
                .align
                .iter()
                .map(|(b, n)| (*b, scalar_of(&tape, *n)))
                .collect(),
            eot: nodes
                .eot
                .iter()
                .map(|(b, n)| (*b, scalar_of(&tape, *n)))
                .collect(),
            total: scalar_of(&tape, nodes.total),
        };
        let recomposed = bundle.recomposed(cfg.lambda, cfg.w);
        if (recomposed - bundle.total).abs() > 1e-6 * bundle.total.abs().max(1.0) {
            return Err(Error::numeric(format!(
                "loss recomposition drift: total {} vs recomposed {}",
                bundle.total, recomposed
            )));
        }
        Ok(BatchComputation {
            bundle,
            grads,
            feasible: nodes.feasible,
            skipped: nodes.skipped,
        })
    }

    /// One optimizer step over a batch. Returns `None` when nothing in the
    /// batch was feasible (no update happens).
    pub fn train_step(&mut self, batch: &[&PreparedUtt]) -> Result<Option<StepRecord>> {
        let comp = self.compute_batch(batch)?;
        self.skipped_utterances += comp.skipped as u64;
        if comp.feasible == 0 {
            return Ok(None);
        }
        let mut grads = comp.grads;
        clip_global_norm(&mut grads, self.train.grad_clip);
        let lr = lr_schedule(self.opt.t + 1, self.train.warmup, self.train.peak_lr);
        self.opt.step(&mut self.model.params, &grads, lr)?;
        Ok(Some(StepRecord {
            step: self.opt.t,
            lr,
            ctc: comp.bundle.ctc,
            align: comp.bundle.align_sum(),
            eot: comp.bundle.eot_sum(),
            total: comp.bundle.total,
            train_cer: None,
        }))
    }

    /// Full training run: seeded per-epoch shuffling, metrics JSONL and
    /// per-epoch checkpoints under `out_dir` when given, optional early
    /// stop once train CER reaches `stop_cer`, and checkpoint averaging of
    /// the last `avg_last` epochs for the released parameters.
    pub fn fit(
        &mut self,
        data: &[Utterance],
        out_dir: Option<&Path>,
        stop_cer: Option<f64>,
    ) -> Result<TrainReport> {
        let prepared = self.prepare(data)?;
        let mut metrics = match out_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                Some(BufWriter::new(File::create(dir.join("metrics.jsonl"))?))
            }
            None => None,
        };

        let avg_last = self.train.avg_last;
        let mut snapshots: VecDeque<Params> = VecDeque::new();
        let mut report = TrainReport {
            steps: Vec::new(),
            epochs: Vec::new(),
            skipped_utterances: 0,
            skipped_updates: 0,
        };

        for epoch in 1..=self.train.epochs {
            let mut order: Vec<usize> = (0..prepared.len()).collect();
            let mut rng = synth_rng(self.train.seed, &format!("shuffle.{}", epoch));
            order.shuffle(&mut rng);

            let mut epoch_records: Vec<StepRecord> = Vec::new();
            for chunk in order.chunks(self.train.batch_size.max(1)) {
                let batch: Vec<&PreparedUtt> = chunk.iter().map(|&i| &prepared[i]).collect();
                if let Some(rec) = self.train_step(&batch)? {
                    epoch_records.push(rec);
                }
            }

            let cer = corpus_cer(&self.model, data)?;
            if let Some(last) = epoch_records.last_mut() {
                last.train_cer = Some(cer);
            }
            let steps = epoch_records.len();
            let mean = |f: fn(&StepRecord) -> f64| -> f64 {
                if steps == 0 {
                    0.0
                } else {
                    epoch_records.iter().map(f).sum::<f64>() / steps as f64
                }
            };
            report.epochs.push(EpochSummary {
                epoch,
                steps,
                mean_total: mean(|r| r.total),
                mean_ctc: mean(|r| r.ctc),
                mean_align: mean(|r| r.align),
                mean_eot: mean(|r| r.eot),
                train_cer: cer,
            });
            if let Some(w) = metrics.as_mut() {
                for rec in &epoch_records {
                    let line = serde_json::to_string(rec)
                        .map_err(|e| Error::Data(format!("metrics serialization: {}", e)))?;
                    writeln!(w, "{}", line)?;
                }
            }
            report.steps.extend(epoch_records);

            if avg_last > 0 {
                snapshots.push_back(self.model.params.clone());
                while snapshots.len() > avg_last {
                    snapshots.pop_front();
                }
            }
            if let Some(dir) = out_dir {
                save_checkpoint(
                    &dir.join(format!("epoch-{:03}.ckpt", epoch)),
                    &self.config(),
                    &self.model.params,
                    Some((&self.opt.m, &self.opt.v)),
                    self.opt.t,
                )?;
            }
            if stop_cer.map_or(false, |threshold| cer <= threshold) {
                break;
            }
        }

        if avg_last > 0 && !snapshots.is_empty() {
            self.model.params = average_params(snapshots.make_contiguous())?;
        }
        if let Some(w) = metrics.as_mut() {
            w.flush()?;
        }
        if let Some(dir) = out_dir {
            let moments = if avg_last > 0 {
                None
            } else {
                Some((&self.opt.m, &self.opt.v))
            };
            save_checkpoint(
                &dir.join("final.ckpt"),
                &self.config(),
                &self.model.params,
                moments,
                self.opt.t,
            )?;
        }
        report.skipped_utterances = self.skipped_utterances;
        report.skipped_updates = self.opt.skipped;
        Ok(report)
    }
}

/// Entrywise mean of parameter snapshots (all must share names/shapes).
pub fn average_params(snapshots: &[Params]) -> Result<Params> {
    if snapshots.is_empty() {
        return Err(Error::Checkpoint("no parameter snapshots to average".into()));
    }
    let mut acc = snapshots[0].clone();
    for s in &snapshots[1..] {
        acc.axpy(1.0, s)?;
    }
    let inv = 1.0 / snapshots.len() as f64;
    for (_, t) in acc.iter_mut() {
        *t = t.scale(inv);
    }
    Ok(acc)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::{Config, ModelConfig};
    use crate::io::load_checkpoint;
    use crate::params::Init;

    fn tiny_config() -> ModelConfig {
        let mut cfg = Config::desk().model;
        cfg.encoder.m_a = 2;
        cfg.encoder.d_a = 8;
        cfg.encoder.d_t = 12;
        cfg.encoder.heads = 2;
        cfg.encoder.ffn_dim = 16;
        cfg.encoder.conv_kernel = 3;
        cfg.encoder.subsample_layers = 1;
        cfg.encoder.attachment_stride = 2;
        cfg.encoder.d_in = 6;
        cfg.m_t = 2;
        cfg
    }

    fn tiny_synth() -> SynthSpec {
        SynthSpec {
            seed: 11,
            num_utts: 4,
            content_vocab: 4,
            d_in: 6,
            frames_per_token: (3, 4),
            noise_std: 0.05,
            utt_tokens: (2, 3),
        }
    }

    #[test]
    fn lr_schedule_hits_documented_points() {
        let peak = 1e-3;
        let w = 100;
        assert!((lr_schedule(100, w, peak) - peak).abs() < 1e-15);
        assert!((lr_schedule(50, w, peak) - peak / 2.0).abs() < 1e-15);
        assert!((lr_schedule(400, w, peak) - peak / 2.0).abs() < 1e-15);
        assert_eq!(lr_schedule(0, w, peak), 0.0);
        // Monotone up through warmup, down after.
        assert!(lr_schedule(99, w, peak) < lr_schedule(100, w, peak));
        assert!(lr_schedule(101, w, peak) < lr_schedule(100, w, peak));
    }

    #[test]
    fn adam_first_steps_move_by_lr_under_constant_gradient() {
        // With a constant gradient the bias-corrected update is exactly
        // m_hat/sqrt(v_hat) = 1, so each step moves by -lr/(1 + eps').
        let mut params = Params::new();
        params.insert("p", Tensor2D::zeros(1, 1));
        let mut grads = Params::new();
        grads.insert("p", Tensor2D::filled(1, 1, 1.0));
        let mut opt = AdamState::new(&params);

        assert!(opt.step(&mut params, &grads, 0.1).unwrap());
        let after_one = params.get("p").unwrap().data()[0];
        assert!((after_one + 0.1).abs() < 1e-8, "got {}", after_one);

        assert!(opt.step(&mut params, &grads, 0.1).unwrap());
        let after_two = params.get("p").unwrap().data()[0];
        assert!((after_two + 0.2).abs() < 1e-8, "got {}", after_two);
        assert_eq!(opt.t, 2);
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut params = Params::new();
        params.insert("p", Tensor2D::filled(1, 1, 3.0));
        let mut grads = Params::new();
        grads.insert("p", Tensor2D::filled(1, 1, f64::NAN));
        let mut opt = AdamState::new(&params);
        assert!(!opt.step(&mut params, &grads, 0.1).unwrap());
        assert_eq!(params.get("p").unwrap().data()[0], 3.0);
        assert_eq!(opt.skipped, 1);
        assert_eq!(opt.t, 0);
    }

    #[test]
    fn clip_rescales_only_above_threshold() {
        let mut grads = Params::new();
        grads.insert("a", Tensor2D::filled(1, 1, 3.0));
        grads.insert("b", Tensor2D::filled(1, 1, 4.0));
        let norm = clip_global_norm(&mut grads, 5.0);
        assert!((norm - 5.0).abs() < 1e-12);
        assert_eq!(grads.get("a").unwrap().data()[0], 3.0);

        let pre = clip_global_norm(&mut grads, 1.0);
        assert!((pre - 5.0).abs() < 1e-12);
        let clipped = grads.global_norm();
        assert!((clipped - 1.0).abs() < 1e-12);
    }

    #[test]
    fn synthesis_is_deterministic_and_in_range() {
        let spec = SynthSpec::default();
        let a = synth_utterances(&spec).unwrap();
        let b = synth_utterances(&spec).unwrap();
        assert_eq!(a.len(), 32);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.utt_id, y.utt_id);
            assert_eq!(x.transcript, y.transcript);
            assert_eq!(x.features.data(), y.features.data());
        }
        for u in &a {
            let tokens = u.transcript.chars().count();
            assert!((2..=10).contains(&tokens));
            assert!(u.features.rows() >= 2 * tokens && u.features.rows() <= 4 * tokens);
            assert_eq!(u.features.cols(), 16);
            assert!(u.transcript.chars().all(|c| ('a'..='h').contains(&c)));
        }

        let mut other = SynthSpec::default();
        other.seed = 1;
        let c = synth_utterances(&other).unwrap();
        assert_ne!(
            a[0].features.data(),
            c[0].features.data(),
            "different seeds must differ"
        );
    }

    #[test]
    fn dataset_roundtrips_through_files_at_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let spec = tiny_synth();
        let manifest = synth_dataset(&spec, dir.path()).unwrap();
        let loaded = load_utterances(&manifest).unwrap();
        let in_memory = synth_utterances(&spec).unwrap();
        assert_eq!(loaded.len(), in_memory.len());
        for (l, m) in loaded.iter().zip(&in_memory) {
            assert_eq!(l.utt_id, m.utt_id);
            assert_eq!(l.transcript, m.transcript);
            let narrowed: Vec<f64> = m.features.data().iter().map(|&x| x as f32 as f64).collect();
            assert_eq!(l.features.data(), &narrowed[..]);
        }
    }

    #[test]
    fn compute_batch_losses_are_finite_and_recompose() {
        let model = Model::init(tiny_config(), 5).unwrap();
        let trainer = Trainer::new(model, Config::desk().train);
        let utts = synth_utterances(&tiny_synth()).unwrap();
        let prepared = trainer.prepare(&utts).unwrap();
        let refs: Vec<&PreparedUtt> = prepared.iter().collect();
        let comp = trainer.compute_batch(&refs).unwrap();

        assert_eq!(comp.feasible + comp.skipped, utts.len());
        assert!(comp.feasible > 0);
        assert!(comp.bundle.total.is_finite());
        assert!(comp.bundle.ctc > 0.0);
        assert!(!comp.bundle.align.is_empty());
        let blocks: Vec<usize> = comp.bundle.align.keys().copied().collect();
        assert_eq!(blocks, trainer.model.config.encoder.attachment_blocks());
        let lambda = trainer.model.config.lambda;
        let w = trainer.model.config.w;
        let drift = (comp.bundle.recomposed(lambda, w) - comp.bundle.total).abs();
        assert!(drift <= 1e-9 * comp.bundle.total.abs().max(1.0));
        // Gradients flow to both branches.
        assert!(comp.grads.get("enc.1.ffn1.fc1.w").unwrap().max_abs() > 0.0);
        assert!(comp.grads.get("cm.1.wz").unwrap().max_abs() > 0.0);
        assert!(comp.grads.get("text.emb").unwrap().max_abs() > 0.0);
    }

    #[test]
    fn infeasible_only_batch_yields_no_update() {
        let model = Model::init(tiny_config(), 5).unwrap();
        let mut trainer = Trainer::new(model, Config::desk().train);
        // 40 tokens but only ~6 subsampled frames: infeasible.
        let utt = Utterance {
            utt_id: "long".into(),
            features: Tensor2D::filled(14, 6, 0.1),
            transcript: "abcd".repeat(10),
        };
        let prepared = trainer.prepare(std::slice::from_ref(&utt)).unwrap();
        assert!(!prepared[0].feasible);
        let refs: Vec<&PreparedUtt> = prepared.iter().collect();
        let before = trainer.model.params.clone();
        let rec = trainer.train_step(&refs).unwrap();
        assert!(rec.is_none());
        assert_eq!(trainer.skipped_utterances, 1);
        for (name, t) in before.iter() {
            assert_eq!(t.data(), trainer.model.params.get(name).unwrap().data());
        }
    }

    #[test]
    fn composite_gradient_matches_finite_differences() {
        let model = Model::init(tiny_config(), 7).unwrap();
        let utts = synth_utterances(&tiny_synth()).unwrap();
        let report = composite_grad_check(&model, &utts[..2], 1e-5, Some(2)).unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "worst {} at {}",
            report.max_relative_error,
            report.worst_parameter
        );
    }

    #[test]
    fn short_training_run_reduces_loss_deterministically() {
        let utts = synth_utterances(&tiny_synth()).unwrap();
        let mut train_cfg = Config::desk().train;
        train_cfg.epochs = 6;
        train_cfg.batch_size = 2;
        train_cfg.warmup = 10;
        train_cfg.avg_last = 0;

        let run = |seed: u64| -> TrainReport {
            let model = Model::init(tiny_config(), seed).unwrap();
            let mut t = Trainer::new(model, train_cfg.clone());
            t.fit(&utts, None, None).unwrap()
        };
        let a = run(5);
        let b = run(5);
        assert_eq!(a.steps.len(), b.steps.len());
        for (x, y) in a.steps.iter().zip(&b.steps) {
            assert_eq!(
                serde_json::to_string(x).unwrap(),
                serde_json::to_string(y).unwrap()
            );
        }
        let first = a.epochs.first().unwrap().mean_total;
        let last = a.epochs.last().unwrap().mean_total;
        assert!(
            last < first,
            "loss should drop over six epochs: {} -> {}",
            first,
            last
        );
    }

    #[test]
    fn fit_writes_metrics_and_checkpoints() {
        let dir = tempfile::tempdir().unwrap();
        let utts = synth_utterances(&tiny_synth()).unwrap();
        let mut train_cfg = Config::desk().train;
        train_cfg.epochs = 2;
        train_cfg.batch_size = 2;
        train_cfg.avg_last = 2;

        let model = Model::init(tiny_config(), 5).unwrap();
        let mut trainer = Trainer::new(model, train_cfg);
        let report = trainer.fit(&utts, Some(dir.path()), None).unwrap();
        assert_eq!(report.epochs.len(), 2);

        let metrics = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<&str> = metrics.lines().collect();
        assert_eq!(lines.len(), report.steps.len());
        let first: serde_json::Value = serde_json::from_str(lines[0]).unwrap();
        for key in ["step", "lr", "ctc", "align", "eot", "total", "train_cer"] {
            assert!(first.get(key).is_some(), "missing metrics key {}", key);
        }

        assert!(dir.path().join("epoch-001.ckpt").exists());
        assert!(dir.path().join("epoch-002.ckpt").exists());
        let final_ckpt = load_checkpoint(&dir.path().join("final.ckpt")).unwrap();
        // avg_last=2: released params are the mean of the two epoch snapshots.
        let e1 = load_checkpoint(&dir.path().join("epoch-001.ckpt")).unwrap();
        let e2 = load_checkpoint(&dir.path().join("epoch-002.ckpt")).unwrap();
        let avg = average_params(&[e1.params, e2.params]).unwrap();
        for (name, t) in avg.iter() {
            let released = final_ckpt.params.get(name).unwrap();
            for (a, b) in t.data().iter().zip(released.data()) {
                assert!((a - b).abs() <= 1e-6 * a.abs().max(1.0), "{} drifted", name);
            }
        }
        // Released params live on the trainer too.
        assert_eq!(
            trainer.model.params.get("head.fc1.w").unwrap().data()[0] as f32,
            final_ckpt.params.get("head.fc1.w").unwrap().data()[0] as f32
        );
    }

    #[test]
    fn average_params_is_entrywise_mean() {
        let mut a = Params::new();
        a.init("w", 1, 2, Init::Uniform { limit: 1.0 }, 1);
        let mut b = Params::new();
        b.init("w", 1, 2, Init::Uniform { limit: 1.0 }, 2);
        let avg = average_params(&[a.clone(), b.clone()]).unwrap();
        for i in 0..2 {
            let want = 0.5 * (a.get("w").unwrap().data()[i] + b.get("w").unwrap().data()[i]);
            assert!((avg.get("w").unwrap().data()[i] - want).abs() < 1e-15);
        }
    }
}
