//! Entropy-regularized optimal transport between textual and acoustic
//! sequences.
//!
//! The coupling is computed by Sinkhorn iterations in log space: starting
//! from log γ⁰ = −C/α, each iteration normalizes rows then columns to unit
//! sums via log-sum-exp subtraction. With zero iterations and a trailing
//! row normalization this reduces exactly to row-softmax of −C/α, i.e.
//! scaled dot-product attention.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor2D;

/// Pairwise transport cost, text rows by acoustic columns.
#[derive(Debug, Clone)]
pub struct CostMatrix {
    pub c: Tensor2D,
}

/// A coupling γ together with the inputs that produced it.
#[derive(Debug, Clone)]
pub struct TransportPlan {
    /// l_t x l_a, entries strictly positive.
    pub gamma: Tensor2D,
    pub cost: CostMatrix,
    pub alpha: f64,
    pub iterations: usize,
    pub final_row_normalized: bool,
}

/// Row/column sums recorded after each normalization, for auditing
/// feasibility of the iterates.
#[derive(Debug, Clone, Default)]
pub struct SinkhornTrace {
    /// Row sums of γ after each row normalization (including a trailing one).
    pub row_sums: Vec<Vec<f64>>,
    /// Column sums of γ after each column normalization.
    pub col_sums: Vec<Vec<f64>>,
}

/// Scaled negative inner-product cost: C = −(Z·W_Z)(H·W_H)ᵀ, divided by
/// √d_k when `scaled` (matching attention); unscaled otherwise.
pub fn cost_matrix(
    z: &Tensor2D,
    h: &Tensor2D,
    w_z: &Tensor2D,
    w_h: &Tensor2D,
    scaled: bool,
) -> Result<CostMatrix> {
    let tape = Tape::new();
    let zn = tape.constant(z.clone());
    let hn = tape.constant(h.clone());
    let wzn = tape.constant(w_z.clone());
    let whn = tape.constant(w_h.clone());
    let c = cost_matrix_node(&tape, zn, hn, wzn, whn, scaled)?;
    Ok(CostMatrix {
        c: tape.value(c),
    })
}

/// Tape form of `cost_matrix` for differentiable pipelines.
pub fn cost_matrix_node(
    tape: &Tape,
    z: NodeId,
    h: NodeId,
    w_z: NodeId,
    w_h: NodeId,
    scaled: bool,
) -> Result<NodeId> {
    let (_, d_k) = tape.shape(w_z);
    let (_, d_k2) = tape.shape(w_h);
    if d_k != d_k2 {
        return Err(Error::shape(format!(
            "cost_matrix: projection widths differ, {} vs {}",
            d_k, d_k2
        )));
    }
    let zq = tape.matmul(z, w_z)?;
    let hk = tape.matmul(h, w_h)?;
    let scores = tape.matmul(zq, tape.transpose(hk))?;
    let factor = if scaled {
        -1.0 / (d_k as f64).sqrt()
    } else {
        -1.0
    };
    Ok(tape.scale(scores, factor))
}

/// Nodes produced by a Sinkhorn run on a tape. `log_gamma` stays exact in
/// log space; `gamma` is its exponential, floored at the smallest positive
/// double so entries stay strictly positive even for extreme costs.
pub struct SinkhornNodes {
    pub log_gamma: NodeId,
    pub gamma: NodeId,
}

/// Runs `k` Sinkhorn iterations on the tape: each iteration row-normalizes
/// then column-normalizes in log space; `final_row_norm` appends one
/// trailing row normalization. Records sums into `trace` if given.
pub fn sinkhorn_node(
    tape: &Tape,
    c: NodeId,
    alpha: f64,
    k: usize,
    final_row_norm: bool,
    mut trace: Option<&mut SinkhornTrace>,
) -> Result<SinkhornNodes> {
    if alpha <= 0.0 || !alpha.is_finite() {
        return Err(Error::numeric(format!(
            "sinkhorn: alpha must be positive and finite, got {}",
            alpha
        )));
    }
    let (rows, cols) = tape.shape(c);
    if rows == 0 || cols == 0 {
        return Err(Error::shape("sinkhorn: empty cost matrix"));
    }

    let row_normalize = |tape: &Tape, lg: NodeId| -> Result<NodeId> {
        let lse = tape.logsumexp_rows(lg);
        tape.add_col(lg, tape.scale(lse, -1.0))
    };
    let col_normalize = |tape: &Tape, lg: NodeId| -> Result<NodeId> {
        let lse = tape.logsumexp_cols(lg);
        tape.add_row(lg, tape.scale(lse, -1.0))
    };
    let record = |trace: &mut Option<&mut SinkhornTrace>, tape: &Tape, lg: NodeId, rows: bool| {
        if let Some(t) = trace.as_deref_mut() {
            let gamma = tape.value(lg).map(f64::exp);
            if rows {
                t.row_sums.push(gamma.row_sums().data().to_vec());
            } else {
                t.col_sums.push(gamma.col_sums().data().to_vec());
            }
        }
    };

    let mut lg = tape.scale(c, -1.0 / alpha);
    for _ in 0..k {
        lg = row_normalize(tape, lg)?;
        record(&mut trace, tape, lg, true);
        lg = col_normalize(tape, lg)?;
        record(&mut trace, tape, lg, false);
    }
    if final_row_norm {
        lg = row_normalize(tape, lg)?;
        record(&mut trace, tape, lg, true);
    }
    let gamma = tape.clamp_min(tape.exp(lg), f64::MIN_POSITIVE);
    Ok(SinkhornNodes {
        log_gamma: lg,
        gamma,
    })
}

/// Plain-value Sinkhorn producing a `TransportPlan`.
pub fn sinkhorn(
    cost: &CostMatrix,
    alpha: f64,
    k: usize,
    final_row_norm: bool,
) -> Result<TransportPlan> {
    let (plan, _) = sinkhorn_traced(cost, alpha, k, final_row_norm)?;
    Ok(plan)
}

/// As `sinkhorn` but also returns the per-normalization marginal trace.
pub fn sinkhorn_traced(
    cost: &CostMatrix,
    alpha: f64,
    k: usize,
    final_row_norm: bool,
) -> Result<(TransportPlan, SinkhornTrace)> {
    let tape = Tape::new();
    let c = tape.constant(cost.c.clone());
    let mut trace = SinkhornTrace::default();
    let nodes = sinkhorn_node(&tape, c, alpha, k, final_row_norm, Some(&mut trace))?;
    let gamma = tape.value(nodes.gamma);
    if !gamma.all_finite() {
        return Err(Error::numeric("sinkhorn: non-finite coupling"));
    }
    Ok((
        TransportPlan {
            gamma,
            cost: cost.clone(),
            alpha,
            iterations: k,
            final_row_normalized: final_row_norm,
        },
        trace,
    ))
}

/// Transports acoustic rows into the textual frame: γ · H.
pub fn transport_apply(plan: &TransportPlan, h: &Tensor2D) -> Result<Tensor2D> {
    if plan.gamma.cols() != h.rows() {
        return Err(Error::shape(format!(
            "transport_apply: coupling has {} columns, H has {} rows",
            plan.gamma.cols(),
            h.rows()
        )));
    }
    Ok(plan.gamma.matmul(h))
}

/// Transport cost plus entropy: Σ γC + α Σ γ·log γ.
///
/// `log_gamma` is the log-space coupling so the entropy term never takes a
/// log of an underflowed value.
pub fn eot_loss_node(
    tape: &Tape,
    gamma: NodeId,
    log_gamma: NodeId,
    c: NodeId,
    alpha: f64,
) -> Result<NodeId> {
    let transport = tape.sum_all(tape.mul(gamma, c)?);
    let entropy = tape.sum_all(tape.mul(gamma, log_gamma)?);
    tape.add(transport, tape.scale(entropy, alpha))
}

/// Plain-value EOT objective of a finished plan.
pub fn eot_loss(plan: &TransportPlan) -> Result<f64> {
    if plan.gamma.shape() != plan.cost.c.shape() {
        return Err(Error::shape("eot_loss: plan shapes disagree"));
    }
    let tape = Tape::new();
    let gamma = tape.constant(plan.gamma.clone());
    // Recover logs with an epsilon floor; plan entries are strictly positive
    // by construction but the guard keeps the objective total.
    let log_gamma = tape.ln(tape.clamp_min(gamma, 1e-30));
    let c = tape.constant(plan.cost.c.clone());
    let loss = eot_loss_node(&tape, gamma, log_gamma, c, plan.alpha)?;
    tape.scalar_value(loss)
}
