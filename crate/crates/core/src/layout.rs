//! Expert-contiguous layout of token rows and its inverse.
//!
//! The forward transform emits one row per admitted `(token, slot)` pair,
//! grouped by expert id ascending and, inside a group, ordered by token index
//! then slot (a stable counting sort). The reverse transform folds expert
//! outputs back into token order as the gate-weighted sum over each token's
//! slots.

use crate::error::{Error, Result};
use crate::gates::GateDecision;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Permutation {
    /// Source token of every buffer row.
    pub forward: Vec<usize>,
    /// Gate slot of every buffer row.
    pub slots: Vec<usize>,
    /// `E + 1` prefix sums; expert `e` owns rows `offsets[e]..offsets[e + 1]`.
    pub expert_offsets: Vec<usize>,
}

impl Permutation {
    pub fn len(&self) -> usize {
        self.forward.len()
    }

    pub fn is_empty(&self) -> bool {
        self.forward.is_empty()
    }

    pub fn num_experts(&self) -> usize {
        self.expert_offsets.len().saturating_sub(1)
    }

    pub fn expert_rows(&self, expert: usize) -> std::ops::Range<usize> {
        self.expert_offsets[expert]..self.expert_offsets[expert + 1]
    }

    pub fn expert_count(&self, expert: usize) -> usize {
        self.expert_offsets[expert + 1] - self.expert_offsets[expert]
    }
}

/// Builds the permutation alone, without touching token data.
pub fn plan_layout(decision: &GateDecision) -> Permutation {
    let e = decision.num_experts();
    let mut offsets = vec![0usize; e + 1];
    for (x, &c) in decision.admitted().iter().enumerate() {
        offsets[x + 1] = offsets[x] + c;
    }
    let rows = offsets[e];
    let mut cursor = offsets[..e].to_vec();
    let mut forward = vec![0; rows];
    let mut slots = vec![0; rows];
    let k = decision.k();
    for (i, id) in decision.expert_ids().iter().enumerate() {
        if let Some(x) = *id {
            let dst = cursor[x];
            cursor[x] += 1;
            forward[dst] = i / k;
            slots[dst] = i % k;
        }
    }
    Permutation {
        forward,
        slots,
        expert_offsets: offsets,
    }
}

pub fn layout_transform(x: &Matrix, decision: &GateDecision) -> Result<(Matrix, Permutation)> {
    if x.rows() != decision.num_tokens() {
        return Err(Error::invalid(
            "decision",
            format!(
                "decision covers {} tokens, batch has {}",
                decision.num_tokens(),
                x.rows()
            ),
        ));
    }
    let perm = plan_layout(decision);
    let d = x.cols();
    let mut data = Vec::with_capacity(perm.len() * d);
    for &src in &perm.forward {
        data.extend_from_slice(x.row(src));
    }
    Ok((Matrix::from_parts_unchecked(perm.len(), d, data), perm))
}

/// `y_i = sum over admitted slots s of w_{i,s} * buffer[row(i, s)]`, summed in
/// slot order starting from zero. Fully dropped tokens give zero rows.
pub fn reverse_layout_transform(
    buffer: &Matrix,
    perm: &Permutation,
    decision: &GateDecision,
    num_tokens: usize,
) -> Result<Matrix> {
    if buffer.rows() != perm.len()
        || perm.slots.len() != perm.len()
        || perm.expert_offsets.last().copied() != Some(perm.len())
    {
        return Err(Error::invalid(
            "perm",
            format!(
                "permutation of {} rows does not match buffer of {} rows",
                perm.len(),
                buffer.rows()
            ),
        ));
    }
    if decision.num_tokens() != num_tokens {
        return Err(Error::invalid(
            "num_tokens",
            format!(
                "decision covers {} tokens, asked for {num_tokens}",
                decision.num_tokens()
            ),
        ));
    }
    let k = decision.k();
    let mut row_of = vec![None; num_tokens * k];
    for (row, (&t, &s)) in perm.forward.iter().zip(&perm.slots).enumerate() {
        if t >= num_tokens || s >= k || decision.token_experts(t)[s].is_none() {
            return Err(Error::invalid(
                "perm",
                format!("row {row} refers to token {t} slot {s}, which is not admitted"),
            ));
        }
        row_of[t * k + s] = Some(row);
    }

    let d = buffer.cols();
    let mut out = vec![0.0; num_tokens * d];
    for t in 0..num_tokens {
        let acc = &mut out[t * d..(t + 1) * d];
        for s in 0..k {
            let Some(row) = row_of[t * k + s] else {
                continue;
            };
            let w = decision.token_weights(t)[s];
            for (a, v) in acc.iter_mut().zip(buffer.row(row)) {
                *a += w * v;
            }
        }
    }
    Matrix::from_vec(num_tokens, d, out)
}
