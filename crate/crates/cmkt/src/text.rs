//! Text branch: character vocabulary, token embedding, the CM-encoder
//! stack that fuses textual state with transported acoustic features, the
//! frozen oracle target encoder, and the cross-modal alignment loss.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::config::TargetConfig;
use crate::encoder::sinusoidal_pe;
use crate::error::{Error, Result};
use crate::ot::{cost_matrix_node, sinkhorn_node};
use crate::params::{bind, Bound, Init, Params};
use crate::tape::{
    cosine_rows_node, layer_norm_node, linear, NodeId, Tape, COSINE_EPS, LAYER_NORM_EPS,
};
use crate::tensor::Tensor2D;
use crate::{BLANK_ID, CLS_ID, FIRST_CONTENT_ID, SEP_ID, UNK_ID};

/// Character → id map with the four reserved ids fixed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: BTreeMap<char, usize>,
    from_id: Vec<char>,
}

impl Vocabulary {
    /// Content characters get consecutive ids after the reserved block, in
    /// the order given.
    pub fn from_alphabet(alphabet: &str) -> Result<Self> {
        let mut to_id = BTreeMap::new();
        let mut from_id = Vec::new();
        for (i, ch) in alphabet.chars().enumerate() {
            if to_id.insert(ch, FIRST_CONTENT_ID + i).is_some() {
                return Err(Error::Vocab(format!("alphabet repeats '{}'", ch)));
            }
            from_id.push(ch);
        }
        if from_id.is_empty() {
            return Err(Error::Vocab("alphabet must be nonempty".into()));
        }
        Ok(Self { to_id, from_id })
    }

    /// Total vocabulary size including reserved ids.
    pub fn size(&self) -> usize {
        FIRST_CONTENT_ID + self.from_id.len()
    }

    /// Id of a character, unk for unseen ones.
    pub fn id_of(&self, ch: char) -> usize {
        self.to_id.get(&ch).copied().unwrap_or(UNK_ID)
    }

    /// Character for a content id; reserved and out-of-range ids render as
    /// the replacement character.
    pub fn char_of(&self, id: usize) -> char {
        id.checked_sub(FIRST_CONTENT_ID)
            .and_then(|i| self.from_id.get(i).copied())
            .unwrap_or('\u{FFFD}')
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&id| self.char_of(id)).collect()
    }
}

/// Token ids wrapped in cls/sep markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    ids: Vec<usize>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>) -> Result<Self> {
        if ids.len() < 2 || ids[0] != CLS_ID || *ids.last().unwrap() != SEP_ID {
            return Err(Error::Vocab(
                "token sequence must be [cls, …, sep]".into(),
            ));
        }
        if ids[1..ids.len() - 1]
            .iter()
            .any(|&id| id == CLS_ID || id == SEP_ID || id == BLANK_ID)
        {
            return Err(Error::Vocab(
                "interior tokens may not be cls/sep/blank".into(),
            ));
        }
        Ok(Self { ids })
    }

    pub fn ids(&self) -> &[usize] {
        &self.ids
    }

    /// Sequence length l_t including the markers.
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        false // always holds cls and sep
    }

    /// The content ids between cls and sep — the CTC target.
    pub fn interior(&self) -> &[usize] {
        &self.ids[1..self.ids.len() - 1]
    }
}

/// Character tokenizer: cls + per-character ids (unk for unseen) + sep.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    let mut ids = Vec::with_capacity(text.chars().count() + 2);
    ids.push(CLS_ID);
    ids.extend(text.chars().map(|ch| vocab.id_of(ch)));
    ids.push(SEP_ID);
    TokenSequence { ids }
}

/// Registers the trainable text-branch parameters: token embedding and the
/// shared CM-encoder stack.
pub fn register_text_params(
    params: &mut Params,
    vocab_size: usize,
    d_t: usize,
    m_t: usize,
    seed: u64,
) {
    let limit = (1.0 / d_t as f64).sqrt();
    params.init("text.emb", vocab_size, d_t, Init::Uniform { limit }, seed);
    for j in 1..=m_t {
        let p = |s: &str| format!("cm.{}.{}", j, s);
        for proj in ["wz", "wh"] {
            params.init(&p(proj), d_t, d_t, Init::Uniform { limit }, seed);
        }
        params.init(&p("ln1.g"), 1, d_t, Init::Ones, seed);
        params.init(&p("ln1.b"), 1, d_t, Init::Zeros, seed);
        params.init(&p("fc.w"), d_t, d_t, Init::Uniform { limit }, seed);
        params.init(&p("fc.b"), 1, d_t, Init::Zeros, seed);
        params.init(&p("ln2.g"), 1, d_t, Init::Ones, seed);
        params.init(&p("ln2.b"), 1, d_t, Init::Zeros, seed);
    }
}

/// Z_0 = embedding rows + sinusoidal positional encoding.
pub fn embed_tokens_node(tape: &Tape, bound: &Bound, tokens: &TokenSequence) -> Result<NodeId> {
    let table = bound.node("text.emb")?;
    let rows = tape.embed_rows(table, tokens.ids())?;
    let (l_t, d_t) = tape.shape(rows);
    let pe = tape.constant(sinusoidal_pe(l_t, d_t));
    tape.add(rows, pe)
}

/// Plain-value convenience for `embed_tokens_node`.
pub fn embed_tokens(params: &Params, tokens: &TokenSequence) -> Result<Tensor2D> {
    let tape = Tape::new();
    let bound = bind(&tape, params, false);
    let z0 = embed_tokens_node(&tape, &bound, tokens)?;
    Ok(tape.value(z0))
}

/// Everything one CM block produces: the new textual state plus the OT
/// artifacts needed for the EOT loss and for inspection.
pub struct CmOut {
    pub z: NodeId,
    pub transported: NodeId,
    pub c: NodeId,
    pub gamma: NodeId,
    pub log_gamma: NodeId,
}

/// One CM-encoder layer: OT-transport the acoustic rows into the textual
/// frame, fuse residually, layer-norm, feed-forward, layer-norm.
pub fn cm_block(
    tape: &Tape,
    bound: &Bound,
    z_prev: NodeId,
    h: NodeId,
    layer: usize,
    m_t: usize,
    alpha: f64,
    sinkhorn_k: usize,
) -> Result<CmOut> {
    if layer == 0 || layer > m_t {
        return Err(Error::Config(format!(
            "cm layer {} outside 1..={}",
            layer, m_t
        )));
    }
    let (_, dz) = tape.shape(z_prev);
    let (_, dh) = tape.shape(h);
    if dz != dh {
        return Err(Error::Config(format!(
            "modal widths disagree: text {}, acoustic {}",
            dz, dh
        )));
    }
    let p = |s: &str| format!("cm.{}.{}", layer, s);

    let c = cost_matrix_node(tape, z_prev, h, bound.node(&p("wz"))?, bound.node(&p("wh"))?, true)?;
    let plan = sinkhorn_node(tape, c, alpha, sinkhorn_k, true, None)?;
    let transported = tape.matmul(plan.gamma, h)?;

    let fused = tape.add(z_prev, transported)?;
    let z_hat = layer_norm_node(
        tape,
        fused,
        bound.node(&p("ln1.g"))?,
        bound.node(&p("ln1.b"))?,
        LAYER_NORM_EPS,
    )?;
    let ff = linear(tape, z_hat, bound.node(&p("fc.w"))?, bound.node(&p("fc.b"))?)?;
    let z = layer_norm_node(
        tape,
        tape.add(z_hat, ff)?,
        bound.node(&p("ln2.g"))?,
        bound.node(&p("ln2.b"))?,
        LAYER_NORM_EPS,
    )?;
    Ok(CmOut {
        z,
        transported,
        c,
        gamma: plan.gamma,
        log_gamma: plan.log_gamma,
    })
}

/// Frozen provider of target text representations: a seeded stand-in for a
/// pretrained language model, or recorded matrices loaded from disk.
pub struct TargetProvider {
    seed: u64,
    depth: usize,
    d_t: usize,
    dir: Option<PathBuf>,
    frozen: Params,
}

impl TargetProvider {
    /// Oracle mode: a frozen embedding plus `depth` frozen self-attention
    /// layers, deterministic in (seed, vocab, shape).
    pub fn oracle(seed: u64, depth: usize, d_t: usize, vocab_size: usize) -> Self {
        let mut frozen = Params::new();
        let limit = (1.0 / d_t as f64).sqrt();
        frozen.init("tgt.emb", vocab_size, d_t, Init::Uniform { limit }, seed);
        for l in 1..=depth {
            let p = |s: &str| format!("tgt.{}.{}", l, s);
            for proj in ["wq", "wk", "wv", "wo"] {
                frozen.init(&p(proj), d_t, d_t, Init::Uniform { limit }, seed);
            }
            frozen.init(&p("ln.g"), 1, d_t, Init::Ones, seed);
            frozen.init(&p("ln.b"), 1, d_t, Init::Zeros, seed);
        }
        Self {
            seed,
            depth,
            d_t,
            dir: None,
            frozen,
        }
    }

    /// File mode: targets load from `<dir>/<utt_id>.cmkt` feature files.
    pub fn from_config(cfg: &TargetConfig, d_t: usize, vocab_size: usize) -> Self {
        let mut p = Self::oracle(cfg.seed, cfg.depth, d_t, vocab_size);
        p.dir = cfg.dir.clone();
        p
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// The frozen oracle parameters (for bit-identity auditing).
    pub fn frozen_params(&self) -> &Params {
        &self.frozen
    }

    /// Z̃ for one utterance: l_t × d_t, no gradient ever.
    pub fn target_for(&self, utt_id: &str, tokens: &TokenSequence) -> Result<Tensor2D> {
        if let Some(dir) = &self.dir {
            let path = dir.join(format!("{}.cmkt", utt_id));
            let t = crate::io::read_feature(&path)?;
            if t.shape() != (tokens.len(), self.d_t) {
                return Err(Error::Data(format!(
                    "target for '{}' is {}x{}, expected {}x{}",
                    utt_id,
                    t.rows(),
                    t.cols(),
                    tokens.len(),
                    self.d_t
                )));
            }
            return Ok(t);
        }

        // Oracle: frozen embedding + PE, then `depth` post-norm
        // self-attention layers, evaluated without gradients.
        let tape = Tape::new();
        let bound = bind(&tape, &self.frozen, false);
        let emb = tape.embed_rows(bound.node("tgt.emb")?, tokens.ids())?;
        let (l_t, d_t) = tape.shape(emb);
        let mut x = tape.add(emb, tape.constant(sinusoidal_pe(l_t, d_t)))?;
        let scale = 1.0 / (d_t as f64).sqrt();
        for l in 1..=self.depth {
            let p = |s: &str| format!("tgt.{}.{}", l, s);
            let q = tape.matmul(x, bound.node(&p("wq"))?)?;
            let k = tape.matmul(x, bound.node(&p("wk"))?)?;
            let v = tape.matmul(x, bound.node(&p("wv"))?)?;
            let attn = tape.softmax_rows(tape.scale(tape.matmul(q, tape.transpose(k))?, scale));
            let ctx = tape.matmul(tape.matmul(attn, v)?, bound.node(&p("wo"))?)?;
            x = layer_norm_node(
                &tape,
                tape.add(x, ctx)?,
                bound.node(&p("ln.g"))?,
                bound.node(&p("ln.b"))?,
                LAYER_NORM_EPS,
            )?;
        }
        Ok(tape.value(x))
    }
}

/// Σ over interior positions of (1 − cos(z_j, z̃_j)); the cls/sep rows are
/// excluded. An empty interior yields zero.
pub fn alignment_loss_node(tape: &Tape, z_final: NodeId, z_target: NodeId) -> Result<NodeId> {
    let (l_t, d) = tape.shape(z_final);
    if tape.shape(z_target) != (l_t, d) {
        return Err(Error::shape(format!(
            "alignment shapes disagree: {}x{} vs {}x{}",
            l_t,
            d,
            tape.shape(z_target).0,
            tape.shape(z_target).1
        )));
    }
    if l_t < 2 {
        return Err(Error::Length("alignment needs at least cls+sep rows".into()));
    }
    let interior = l_t - 2;
    if interior == 0 {
        return Ok(tape.constant(Tensor2D::scalar(0.0)));
    }
    let zi = tape.slice_rows(z_final, 1, interior)?;
    let ti = tape.slice_rows(z_target, 1, interior)?;
    let cos = cosine_rows_node(tape, zi, ti, COSINE_EPS)?;
    let total = tape.sum_all(cos);
    Ok(tape.add_const(tape.scale(total, -1.0), interior as f64))
}

/// Plain-value alignment loss.
pub fn alignment_loss(z_final: &Tensor2D, z_target: &Tensor2D) -> Result<f64> {
    let tape = Tape::new();
    let a = tape.constant(z_final.clone());
    let b = tape.constant(z_target.clone());
    let node = alignment_loss_node(&tape, a, b)?;
    tape.scalar_value(node)
}
