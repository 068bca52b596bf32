//! Acoustic branch: strided subsampling with positional encoding, a stack
//! of conformer-lite blocks, the shared adapter that bridges acoustic and
//! textual widths, and the CTC posterior head.
//!
//! All forward functions build onto a caller-supplied tape and look
//! parameters up by name in a [`Bound`] view; `register_acoustic_params`
//! creates those parameters with matching names.

use crate::config::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Params};
use crate::tape::{layer_norm_node, linear, log_softmax_rows, NodeId, Tape, LAYER_NORM_EPS};
use crate::tensor::Tensor2D;

/// Absolute sinusoidal positional encoding: even dims sin, odd dims cos,
/// wavelengths geometric in 10000^(2i/dim).
pub fn sinusoidal_pe(len: usize, dim: usize) -> Tensor2D {
    Tensor2D::from_fn(len, dim, |pos, j| {
        let i = (j / 2) as f64;
        let angle = pos as f64 / 10000f64.powf(2.0 * i / dim as f64);
        if j % 2 == 0 {
            angle.sin()
        } else {
            angle.cos()
        }
    })
}

/// Length after `layers` applications of kernel-3 stride-2 subsampling:
/// l → ⌊(l−3)/2⌋ + 1.
pub fn subsampled_len(t: usize, layers: usize) -> Result<usize> {
    let mut l = t;
    for _ in 0..layers {
        if l < 3 {
            return Err(Error::Length(format!(
                "input of {} frames too short for {} subsampling layers",
                t, layers
            )));
        }
        l = (l - 3) / 2 + 1;
    }
    Ok(l)
}

fn weight_init(rows: usize) -> Init {
    Init::Uniform {
        limit: (1.0 / rows as f64).sqrt(),
    }
}

fn register_linear(params: &mut Params, name: &str, rows: usize, cols: usize, seed: u64) {
    params.init(&format!("{}.w", name), rows, cols, weight_init(rows), seed);
    params.init(&format!("{}.b", name), 1, cols, Init::Zeros, seed);
}

fn register_ln(params: &mut Params, name: &str, dim: usize, seed: u64) {
    params.init(&format!("{}.g", name), 1, dim, Init::Ones, seed);
    params.init(&format!("{}.b", name), 1, dim, Init::Zeros, seed);
}

/// Creates every parameter of the acoustic branch (subsampler, encoder
/// blocks, adapter, posterior head) under its canonical name.
pub fn register_acoustic_params(
    params: &mut Params,
    cfg: &EncoderConfig,
    vocab_size: usize,
    seed: u64,
) {
    // Subsampling convolutions and projection.
    let mut width = cfg.d_in;
    for l in 1..=cfg.subsample_layers {
        register_linear(params, &format!("sub.conv{}", l), 3 * width, cfg.d_a, seed);
        width = cfg.d_a;
    }
    register_linear(params, "sub.proj", width, cfg.d_a, seed);

    let d_h = cfg.d_a / cfg.heads;
    for i in 1..=cfg.m_a {
        let p = |s: &str| format!("enc.{}.{}", i, s);
        register_linear(params, &p("ffn1.fc1"), cfg.d_a, cfg.ffn_dim, seed);
        register_linear(params, &p("ffn1.fc2"), cfg.ffn_dim, cfg.d_a, seed);
        register_ln(params, &p("ln1"), cfg.d_a, seed);
        for h in 0..cfg.heads {
            for proj in ["wq", "wk", "wv"] {
                params.init(
                    &p(&format!("attn.h{}.{}", h, proj)),
                    cfg.d_a,
                    d_h,
                    weight_init(cfg.d_a),
                    seed,
                );
            }
            params.init(
                &p(&format!("attn.h{}.wo", h)),
                d_h,
                cfg.d_a,
                weight_init(d_h),
                seed,
            );
        }
        params.init(&p("attn.bo"), 1, cfg.d_a, Init::Zeros, seed);
        register_ln(params, &p("ln2"), cfg.d_a, seed);
        params.init(
            &p("conv.dw"),
            cfg.conv_kernel,
            cfg.d_a,
            weight_init(cfg.conv_kernel),
            seed,
        );
        register_linear(params, &p("conv.pw"), cfg.d_a, cfg.d_a, seed);
        register_ln(params, &p("ln3"), cfg.d_a, seed);
        register_linear(params, &p("ffn2.fc1"), cfg.d_a, cfg.ffn_dim, seed);
        register_linear(params, &p("ffn2.fc2"), cfg.ffn_dim, cfg.d_a, seed);
        register_ln(params, &p("ln4"), cfg.d_a, seed);
    }

    // Shared adapter: projection to d_t, feedback to d_a, two layer norms.
    register_linear(params, "adapter.fc2", cfg.d_a, cfg.d_t, seed);
    register_ln(params, "adapter.ln", cfg.d_t, seed);
    register_linear(params, "adapter.fc3", cfg.d_t, cfg.d_a, seed);
    register_ln(params, "adapter.out_ln", cfg.d_a, seed);

    register_linear(params, "head.fc1", cfg.d_a, vocab_size, seed);
}

fn bound_linear(tape: &Tape, bound: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    linear(
        tape,
        x,
        bound.node(&format!("{}.w", name))?,
        bound.node(&format!("{}.b", name))?,
    )
}

fn bound_ln(tape: &Tape, bound: &Bound, name: &str, x: NodeId) -> Result<NodeId> {
    layer_norm_node(
        tape,
        x,
        bound.node(&format!("{}.g", name))?,
        bound.node(&format!("{}.b", name))?,
        LAYER_NORM_EPS,
    )
}

/// Strided subsampling stack + projection to d_a + positional encoding.
pub fn subsample_pe(
    tape: &Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    features: NodeId,
) -> Result<NodeId> {
    let (t, d_in) = tape.shape(features);
    if d_in != cfg.d_in {
        return Err(Error::shape(format!(
            "features have width {}, config expects {}",
            d_in, cfg.d_in
        )));
    }
    // Validate the full length chain up front for a clearer error.
    subsampled_len(t, cfg.subsample_layers)?;

    let mut x = features;
    for l in 1..=cfg.subsample_layers {
        let windows = tape.unfold(x, 3, 2)?;
        x = tape.relu(bound_linear(tape, bound, &format!("sub.conv{}", l), windows)?);
    }
    let projected = bound_linear(tape, bound, "sub.proj", x)?;
    let (l_a, d_a) = tape.shape(projected);
    let pe = tape.constant(sinusoidal_pe(l_a, d_a));
    tape.add(projected, pe)
}

fn feed_forward(tape: &Tape, bound: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let hidden = tape.relu(bound_linear(tape, bound, &format!("{}.fc1", prefix), x)?);
    bound_linear(tape, bound, &format!("{}.fc2", prefix), hidden)
}

fn self_attention(
    tape: &Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    prefix: &str,
    x: NodeId,
) -> Result<NodeId> {
    let d_h = cfg.d_a / cfg.heads;
    let scale = 1.0 / (d_h as f64).sqrt();
    let mut out: Option<NodeId> = None;
    for h in 0..cfg.heads {
        let name = |p: &str| format!("{}.h{}.{}", prefix, h, p);
        let q = tape.matmul(x, bound.node(&name("wq"))?)?;
        let k = tape.matmul(x, bound.node(&name("wk"))?)?;
        let v = tape.matmul(x, bound.node(&name("wv"))?)?;
        let scores = tape.scale(tape.matmul(q, tape.transpose(k))?, scale);
        let attn = tape.softmax_rows(scores);
        let ctx = tape.matmul(attn, v)?;
        let projected = tape.matmul(ctx, bound.node(&name("wo"))?)?;
        out = Some(match out {
            None => projected,
            Some(acc) => tape.add(acc, projected)?,
        });
    }
    let summed = out.expect("heads >= 1 by config validation");
    tape.add_row(summed, bound.node(&format!("{}.bo", prefix))?)
}

fn conv_module(tape: &Tape, bound: &Bound, prefix: &str, x: NodeId) -> Result<NodeId> {
    let dw = tape.depthwise_conv(x, bound.node(&format!("{}.dw", prefix))?)?;
    bound_linear(tape, bound, &format!("{}.pw", prefix), dw)
}

/// One conformer-lite block: half-step FFN, self-attention, depthwise
/// convolution, half-step FFN — each residual followed by layer norm.
pub fn encoder_block(
    tape: &Tape,
    bound: &Bound,
    cfg: &EncoderConfig,
    g_prev: NodeId,
    block_index: usize,
) -> Result<NodeId> {
    if block_index == 0 || block_index > cfg.m_a {
        return Err(Error::Config(format!(
            "block index {} outside 1..={}",
            block_index, cfg.m_a
        )));
    }
    let p = |s: &str| format!("enc.{}.{}", block_index, s);

    let ffn1 = feed_forward(tape, bound, &p("ffn1"), g_prev)?;
    let x = bound_ln(tape, bound, &p("ln1"), tape.add(g_prev, tape.scale(ffn1, 0.5))?)?;

    let attn = self_attention(tape, bound, cfg, &p("attn"), x)?;
    let x = bound_ln(tape, bound, &p("ln2"), tape.add(x, attn)?)?;

    let conv = conv_module(tape, bound, &p("conv"), x)?;
    let x = bound_ln(tape, bound, &p("ln3"), tape.add(x, conv)?)?;

    let ffn2 = feed_forward(tape, bound, &p("ffn2"), x)?;
    bound_ln(tape, bound, &p("ln4"), tape.add(x, tape.scale(ffn2, 0.5))?)
}

/// Shared adapter projection H_i = FC2(G_i), acoustic width → textual width.
pub fn adapter_project(tape: &Tape, bound: &Bound, g: NodeId) -> Result<NodeId> {
    bound_linear(tape, bound, "adapter.fc2", g)
}

/// Feedback fusion: G_i + LN(FC3(LN(H_i))).
pub fn adapter_fuse(tape: &Tape, bound: &Bound, g: NodeId, h: NodeId) -> Result<NodeId> {
    let normed = bound_ln(tape, bound, "adapter.ln", h)?;
    let back = bound_linear(tape, bound, "adapter.fc3", normed)?;
    let fused = bound_ln(tape, bound, "adapter.out_ln", back)?;
    tape.add(g, fused)
}

/// Log posteriors over the vocabulary: log-softmax of the head logits.
pub fn output_log_posteriors(tape: &Tape, bound: &Bound, h_final: NodeId) -> Result<NodeId> {
    let logits = bound_linear(tape, bound, "head.fc1", h_final)?;
    log_softmax_rows(tape, logits)
}

/// Plain posterior probabilities (row-softmax of the head logits).
pub fn output_posteriors(h_final: &Tensor2D, w: &Tensor2D, b: &Tensor2D) -> Result<Tensor2D> {
    let tape = Tape::new();
    let h = tape.constant(h_final.clone());
    let logits = linear(&tape, h, tape.constant(w.clone()), tape.constant(b.clone()))?;
    Ok(tape.value(tape.softmax_rows(logits)))
}
