//! Balanced token-to-expert assignment.
//!
//! Each expert is expanded into as many column copies as tokens it must
//! receive, which turns the balanced problem into a square linear assignment
//! solved exactly with the Hungarian method.

use crate::error::{Error, Result};
use crate::tensor::{matmul, Matrix};

use super::GateDecision;

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    /// Expert of every token.
    pub experts: Vec<usize>,
    /// Sum of the chosen token-expert scores.
    pub objective: f64,
    pub num_experts: usize,
}

impl Assignment {
    /// Top-1 decision with unit weights; no capacity is applied since the
    /// assignment is balanced by construction.
    pub fn to_decision(&self) -> Result<GateDecision> {
        GateDecision::new(
            self.num_experts,
            1,
            self.experts.iter().map(|&e| Some(e)).collect(),
            vec![1.0; self.experts.len()],
        )
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_experts];
        for &e in &self.experts {
            c[e] += 1;
        }
        c
    }
}

/// Tokens each expert must take: `floor(S / E)`, plus one for the lowest
/// `S mod E` experts.
pub fn balanced_quota(num_tokens: usize, num_experts: usize) -> Vec<usize> {
    let (base, rem) = (num_tokens / num_experts, num_tokens % num_experts);
    (0..num_experts)
        .map(|e| base + usize::from(e < rem))
        .collect()
}

/// Maximises `sum_i x_i . w_{a_i}` subject to every expert receiving its
/// balanced quota.
pub fn base_layer_assign(x: &Matrix, w: &Matrix) -> Result<Assignment> {
    if x.cols() != w.rows() {
        return Err(Error::Shape {
            op: "base_layer_assign",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let (s, e) = (x.rows(), w.cols());
    if e == 0 {
        return Err(Error::invalid("num_experts", "must be at least 1"));
    }
    if e > s {
        return Err(Error::invalid(
            "num_experts",
            format!("{e} experts cannot be balanced over {s} tokens"),
        ));
    }
    let scores = matmul(x, w)?;

    let mut column_expert = Vec::with_capacity(s);
    for (expert, quota) in balanced_quota(s, e).into_iter().enumerate() {
        column_expert.extend(std::iter::repeat_n(expert, quota));
    }
    let square: Vec<f64> = (0..s)
        .flat_map(|i| column_expert.iter().map(move |&ex| (i, ex)))
        .map(|(i, ex)| scores.get(i, ex))
        .collect();
    let cols = solve_max_assignment(s, &square);

    let experts: Vec<usize> = cols.iter().map(|&c| column_expert[c]).collect();
    let objective = experts
        .iter()
        .enumerate()
        .map(|(i, &ex)| scores.get(i, ex))
        .sum();
    Ok(Assignment {
        experts,
        objective,
        num_experts: e,
    })
}

/// Hungarian method on an `n x n` row-major score matrix; returns the column
/// assigned to each row in a maximum-weight perfect matching.
pub fn solve_max_assignment(n: usize, scores: &[f64]) -> Vec<usize> {
    assert_eq!(scores.len(), n * n, "score matrix must be n x n");
    if n == 0 {
        return Vec::new();
    }
    // Minimise negated scores. 1-based potentials, column 0 is a sentinel.
    let cost = |i: usize, j: usize| -scores[(i - 1) * n + (j - 1)];
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0f64; n + 1];
    let mut used = vec![false; n + 1];

    for row in 1..=n {
        owner[0] = row;
        let mut j0 = 0;
        minv.fill(f64::INFINITY);
        used.fill(false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost(i0, j) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let mut assignment = vec![0usize; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}
