//! Connectionist temporal classification: loss, greedy decoding, and
//! character error rate.
//!
//! The loss is the standard forward recursion over the blank-interleaved
//! extended target, carried out entirely in log space. It is built on the
//! autodiff tape so gradients w.r.t. the log-probability grid come from the
//! same recursion that computes the value.

use crate::error::{Error, Result};
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor2D;
use crate::{BLANK_ID, CLS_ID, SEP_ID};

/// Per-frame log posteriors over the vocabulary, blank at id 0.
#[derive(Debug, Clone)]
pub struct PosteriorGrid {
    log_probs: Tensor2D,
}

impl PosteriorGrid {
    /// Validates that every row is a normalized log distribution
    /// (exp sums to 1 within 1e-5).
    pub fn new(log_probs: Tensor2D) -> Result<Self> {
        if log_probs.rows() == 0 || log_probs.cols() == 0 {
            return Err(Error::shape("posterior grid must be nonempty"));
        }
        for r in 0..log_probs.rows() {
            let total: f64 = (0..log_probs.cols())
                .map(|c| log_probs.get(r, c).exp())
                .sum();
            if (total - 1.0).abs() > 1e-5 {
                return Err(Error::numeric(format!(
                    "posterior row {} sums to {}, expected 1",
                    r, total
                )));
            }
        }
        Ok(Self { log_probs })
    }

    pub fn log_probs(&self) -> &Tensor2D {
        &self.log_probs
    }

    /// Number of acoustic frames.
    pub fn frames(&self) -> usize {
        self.log_probs.rows()
    }

    pub fn vocab_size(&self) -> usize {
        self.log_probs.cols()
    }
}

/// A decoded label sequence with its greedy path log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct Hypothesis {
    pub ids: Vec<usize>,
    pub score: f64,
}

/// Outcome of a CTC loss evaluation: a finite loss, or an infeasible
/// length pairing that callers should skip rather than treat as an error.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CtcOutcome {
    Loss(f64),
    Infeasible { required: usize, available: usize },
}

impl CtcOutcome {
    /// The loss value, +∞ when infeasible.
    pub fn value(&self) -> f64 {
        match self {
            CtcOutcome::Loss(v) => *v,
            CtcOutcome::Infeasible { .. } => f64::INFINITY,
        }
    }

    pub fn is_feasible(&self) -> bool {
        matches!(self, CtcOutcome::Loss(_))
    }
}

/// Minimum number of frames needed to emit `target`: one per label plus one
/// separating blank per adjacent repeat.
pub fn min_frames(target: &[usize]) -> usize {
    let repeats = target.windows(2).filter(|w| w[0] == w[1]).count();
    target.len() + repeats
}

fn validate_target(target: &[usize], vocab: usize) -> Result<()> {
    for &id in target {
        if id == BLANK_ID {
            return Err(Error::Vocab("ctc target contains the blank id".into()));
        }
        if id >= vocab {
            return Err(Error::Vocab(format!(
                "ctc target id {} outside vocabulary of {}",
                id, vocab
            )));
        }
    }
    Ok(())
}

/// CTC forward recursion on the tape. Returns `None` when the grid is too
/// short for the target (the infeasible case). The returned node is the
/// negative log-likelihood.
pub fn ctc_loss_node(
    tape: &Tape,
    log_probs: NodeId,
    target: &[usize],
) -> Result<Option<NodeId>> {
    let (frames, vocab) = tape.shape(log_probs);
    validate_target(target, vocab)?;
    if frames < min_frames(target) {
        return Ok(None);
    }

    // Extended sequence: blanks interleaved around every label.
    let mut ext = Vec::with_capacity(2 * target.len() + 1);
    ext.push(BLANK_ID);
    for &id in target {
        ext.push(id);
        ext.push(BLANK_ID);
    }
    let s_len = ext.len();

    // alpha[s]: log-probability of consuming the first frames and ending in
    // extended state s. Unreachable states stay None (log 0).
    let mut alpha: Vec<Option<NodeId>> = vec![None; s_len];
    alpha[0] = Some(tape.at(log_probs, 0, ext[0])?);
    if s_len > 1 {
        alpha[1] = Some(tape.at(log_probs, 0, ext[1])?);
    }

    for t in 1..frames {
        let mut next: Vec<Option<NodeId>> = vec![None; s_len];
        // States reachable at frame t and still able to reach the end.
        let lo = s_len.saturating_sub(2 * (frames - t));
        let hi = (2 * (t + 1)).min(s_len);
        for s in lo..hi {
            let stay = alpha[s];
            let step = if s >= 1 { alpha[s - 1] } else { None };
            let skip = if s >= 2 && ext[s] != BLANK_ID && ext[s] != ext[s - 2] {
                alpha[s - 2]
            } else {
                None
            };
            let mut acc: Option<NodeId> = None;
            for prev in [stay, step, skip].into_iter().flatten() {
                acc = Some(match acc {
                    None => prev,
                    Some(a) => tape.logaddexp(a, prev)?,
                });
            }
            if let Some(paths) = acc {
                let emit = tape.at(log_probs, t, ext[s])?;
                next[s] = Some(tape.add(paths, emit)?);
            }
        }
        alpha = next;
    }

    let mut total: Option<NodeId> = None;
    for s in [s_len.wrapping_sub(1), s_len.wrapping_sub(2)] {
        if let Some(Some(a)) = alpha.get(s).map(|v| *v) {
            total = Some(match total {
                None => a,
                Some(acc) => tape.logaddexp(acc, a)?,
            });
        }
    }
    let total = total.ok_or_else(|| Error::numeric("ctc: no terminal state reached"))?;
    Ok(Some(tape.scale(total, -1.0)))
}

/// Negative log-likelihood of `target` under the grid, or an infeasibility
/// marker when the grid has too few frames.
pub fn ctc_loss(grid: &PosteriorGrid, target: &[usize]) -> Result<CtcOutcome> {
    let tape = Tape::new();
    let lp = tape.constant(grid.log_probs.clone());
    match ctc_loss_node(&tape, lp, target)? {
        Some(node) => Ok(CtcOutcome::Loss(tape.scalar_value(node)?)),
        None => Ok(CtcOutcome::Infeasible {
            required: min_frames(target),
            available: grid.frames(),
        }),
    }
}

/// Best-path decoding: per-frame argmax (ties to the lowest id), collapse
/// consecutive repeats, then drop blanks and the cls/sep markers.
pub fn greedy_decode(grid: &PosteriorGrid) -> Hypothesis {
    let lp = &grid.log_probs;
    let mut ids = Vec::new();
    let mut score = 0.0;
    let mut prev = usize::MAX;
    for t in 0..lp.rows() {
        let mut best = 0;
        for c in 1..lp.cols() {
            if lp.get(t, c) > lp.get(t, best) {
                best = c;
            }
        }
        score += lp.get(t, best);
        if best != prev && best != BLANK_ID && best != CLS_ID && best != SEP_ID {
            ids.push(best);
        }
        prev = best;
    }
    Hypothesis { ids, score }
}

/// Character error rate: edit distance over the reference length.
pub fn cer(reference: &[usize], hypothesis: &[usize]) -> Result<f64> {
    if reference.is_empty() {
        return Err(Error::Length("cer: empty reference".into()));
    }
    Ok(levenshtein(reference, hypothesis) as f64 / reference.len() as f64)
}

/// Unit-cost edit distance with a single rolling row.
pub fn levenshtein(a: &[usize], b: &[usize]) -> usize {
    if a.is_empty() {
        return b.len();
    }
    if b.is_empty() {
        return a.len();
    }
    let mut row: Vec<usize> = (0..=b.len()).collect();
    for (i, &ai) in a.iter().enumerate() {
        let mut diag = row[0];
        row[0] = i + 1;
        for (j, &bj) in b.iter().enumerate() {
            let sub = diag + usize::from(ai != bj);
            diag = row[j + 1];
            row[j + 1] = sub.min(row[j] + 1).min(diag + 1);
        }
    }
    row[b.len()]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeMap;

    fn uniform_grid(frames: usize, vocab: usize) -> PosteriorGrid {
        let lp = (1.0 / vocab as f64).ln();
        PosteriorGrid::new(Tensor2D::filled(frames, vocab, lp)).unwrap()
    }

    fn random_grid(frames: usize, vocab: usize, rng: &mut ChaCha8Rng) -> PosteriorGrid {
        let logits = Tensor2D::from_fn(frames, vocab, |_, _| rng.gen_range(-2.0..2.0));
        let lp = crate::tensor::logsumexp_rows_kernel(&logits);
        let normalized = Tensor2D::from_fn(frames, vocab, |r, c| logits.get(r, c) - lp.get(r, 0));
        PosteriorGrid::new(normalized).unwrap()
    }

    /// Brute-force oracle: sum the probability of every frame-level path
    /// whose CTC collapse equals the target.
    fn enumerate_oracle(grid: &PosteriorGrid, target: &[usize]) -> f64 {
        let frames = grid.frames();
        let vocab = grid.vocab_size();
        let mut total = 0.0;
        let mut path = vec![0usize; frames];
        loop {
            let collapsed: Vec<usize> = {
                let mut out = Vec::new();
                let mut prev = usize::MAX;
                for &p in &path {
                    if p != prev && p != BLANK_ID {
                        out.push(p);
                    }
                    prev = p;
                }
                out
            };
            if collapsed == target {
                let logp: f64 = path
                    .iter()
                    .enumerate()
                    .map(|(t, &p)| grid.log_probs().get(t, p))
                    .sum();
                total += logp.exp();
            }
            // Odometer increment over vocab^frames paths.
            let mut i = 0;
            loop {
                if i == frames {
                    return -total.ln();
                }
                path[i] += 1;
                if path[i] < vocab {
                    break;
                }
                path[i] = 0;
                i += 1;
            }
        }
    }

    #[test]
    fn single_frame_single_path() {
        let grid = uniform_grid(1, 2);
        let loss = ctc_loss(&grid, &[1]).unwrap();
        assert!((loss.value() - 2.0_f64.ln()).abs() < 1e-12, "{:?}", loss);
    }

    #[test]
    fn two_frames_three_paths() {
        let grid = uniform_grid(2, 2);
        let loss = ctc_loss(&grid, &[1]).unwrap();
        assert!((loss.value() - (-0.75_f64.ln())).abs() < 1e-12, "{:?}", loss);
    }

    #[test]
    fn four_frames_matches_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let grid = random_grid(4, 3, &mut rng);
        let loss = ctc_loss(&grid, &[1, 2]).unwrap();
        let oracle = enumerate_oracle(&grid, &[1, 2]);
        assert!((loss.value() - oracle).abs() < 1e-9);
    }

    #[test]
    fn matches_enumeration_over_many_random_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(1234);
        let mut checked = 0;
        while checked < 120 {
            let frames = rng.gen_range(1..=5);
            let vocab = rng.gen_range(2..=4);
            let u = rng.gen_range(0..=3usize.min(frames));
            let target: Vec<usize> = (0..u).map(|_| rng.gen_range(1..vocab)).collect();
            let grid = random_grid(frames, vocab, &mut rng);
            match ctc_loss(&grid, &target).unwrap() {
                CtcOutcome::Loss(v) => {
                    let oracle = enumerate_oracle(&grid, &target);
                    assert!(
                        (v - oracle).abs() < 1e-9,
                        "frames={} vocab={} target={:?}: {} vs {}",
                        frames,
                        vocab,
                        target,
                        v,
                        oracle
                    );
                    assert!(v >= -1e-12, "negative loss {}", v);
                    checked += 1;
                }
                CtcOutcome::Infeasible { required, available } => {
                    assert!(available < required);
                    assert!(frames < min_frames(&target));
                }
            }
        }
    }

    #[test]
    fn infeasible_length_is_flagged_not_fatal() {
        let grid = uniform_grid(1, 3);
        let out = ctc_loss(&grid, &[1, 2]).unwrap();
        assert_eq!(
            out,
            CtcOutcome::Infeasible {
                required: 2,
                available: 1
            }
        );
        assert!(out.value().is_infinite());

        // Adjacent repeats need a separating blank.
        let grid2 = uniform_grid(2, 3);
        let out2 = ctc_loss(&grid2, &[1, 1]).unwrap();
        assert!(!out2.is_feasible());
        assert_eq!(min_frames(&[1, 1]), 3);
    }

    #[test]
    fn blank_in_target_is_an_error() {
        let grid = uniform_grid(3, 3);
        assert!(ctc_loss(&grid, &[0]).is_err());
        assert!(ctc_loss(&grid, &[7]).is_err());
    }

    #[test]
    fn lowering_target_probability_raises_loss() {
        // Two-frame, two-token grids; shift mass away from the target token.
        let mk = |p_target: f64| {
            let row = vec![(1.0 - p_target).ln(), p_target.ln()];
            let mut data = row.clone();
            data.extend(row);
            PosteriorGrid::new(Tensor2D::new(2, 2, data).unwrap()).unwrap()
        };
        let hi = ctc_loss(&mk(0.8), &[1]).unwrap().value();
        let lo = ctc_loss(&mk(0.4), &[1]).unwrap().value();
        assert!(lo > hi);
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        let grid = random_grid(5, 4, &mut rng);
        let mut params = BTreeMap::new();
        params.insert("lp".to_string(), grid.log_probs().clone());
        let target = vec![1, 2, 1];
        let report = grad_check(&params, 1e-5, |tape, ids| {
            ctc_loss_node(tape, ids["lp"], &target)?
                .ok_or_else(|| Error::numeric("unexpected infeasible"))
        })
        .unwrap();
        assert!(
            report.max_relative_error < 1e-4,
            "rel err {} at {}",
            report.max_relative_error,
            report.worst_parameter
        );
    }

    #[test]
    fn empty_target_is_all_blanks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let grid = random_grid(3, 3, &mut rng);
        let loss = ctc_loss(&grid, &[]).unwrap();
        let expected: f64 = -(0..3).map(|t| grid.log_probs().get(t, 0)).sum::<f64>();
        assert!((loss.value() - expected).abs() < 1e-12);
    }

    fn grid_from_argmax(path: &[usize], vocab: usize) -> PosteriorGrid {
        // Peaked rows: 0.9 on the chosen id, rest spread uniformly.
        let rest = 0.1 / (vocab - 1) as f64;
        PosteriorGrid::new(Tensor2D::from_fn(path.len(), vocab, |t, c| {
            if c == path[t] { 0.9_f64.ln() } else { rest.ln() }
        }))
        .unwrap()
    }

    #[test]
    fn greedy_collapses_runs_and_blanks() {
        let hyp = greedy_decode(&grid_from_argmax(&[0, 4, 4, 0, 4], 5));
        assert_eq!(hyp.ids, vec![4, 4]);

        let hyp = greedy_decode(&grid_from_argmax(&[0, 0, 0], 5));
        assert_eq!(hyp.ids, Vec::<usize>::new());

        let hyp = greedy_decode(&grid_from_argmax(&[4, 5, 5, 4], 6));
        assert_eq!(hyp.ids, vec![4, 5, 4]);
    }

    #[test]
    fn greedy_breaks_ties_toward_lowest_id() {
        let grid = uniform_grid(3, 4);
        let hyp = greedy_decode(&grid);
        // Argmax of a uniform row is id 0 = blank everywhere.
        assert_eq!(hyp.ids, Vec::<usize>::new());
        assert!((hyp.score - 3.0 * (0.25_f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn greedy_drops_marker_tokens() {
        let hyp = greedy_decode(&grid_from_argmax(&[2, 4, 3], 5));
        assert_eq!(hyp.ids, vec![4]);
    }

    #[test]
    fn greedy_output_is_structurally_clean() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..50 {
            let frames = rng.gen_range(1..=8);
            let vocab = rng.gen_range(2..=6);
            let grid = random_grid(frames, vocab, &mut rng);
            let hyp = greedy_decode(&grid);
            assert!(hyp.ids.iter().all(|&id| id != BLANK_ID));
            assert!(hyp.ids.iter().all(|&id| id != CLS_ID && id != SEP_ID));
        }
    }

    #[test]
    fn cer_cases() {
        assert_eq!(cer(&[4, 5, 6], &[4, 5, 6]).unwrap(), 0.0);
        assert!((cer(&[4, 5, 6], &[4, 9, 6]).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(cer(&[4], &[]).unwrap(), 1.0);
        assert!(cer(&[], &[4]).is_err());
    }

    #[test]
    fn levenshtein_cases() {
        assert_eq!(levenshtein(&[], &[]), 0);
        assert_eq!(levenshtein(&[1, 2, 3], &[1, 3]), 1);
        assert_eq!(levenshtein(&[1, 2], &[2, 1]), 2);
        assert_eq!(levenshtein(&[1, 2, 3, 4], &[]), 4);
    }
}
