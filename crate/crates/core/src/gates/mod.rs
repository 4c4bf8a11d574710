//! Token-to-expert routing.
//!
//! Every strategy produces a [`GateDecision`]: for each of the `S` tokens a row
//! of `k` expert slots, each slot holding an expert id (or nothing, when the
//! slot was dropped) and a combine weight.

mod assignment;
mod dense;
mod hash;
mod topk;

pub use assignment::{base_layer_assign, solve_max_assignment, Assignment};
pub use dense::{dense_to_sparse_gate, GateMode, PRUNE_THRESHOLD};
pub use hash::{build_hash_table, hash_gate, HashKind, HashTable};
pub use topk::{hierarchical_topk_gate, ktop1_gate, topk_gate, topk_rows, TopK};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

/// Raw sentinel used when expert ids are exported as plain integers.
pub const DROPPED: i64 = -1;

/// A batch of `S` tokens: an `S x d` representation matrix plus the vocabulary
/// id of every token (only the hash gate reads the ids).
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBatch {
    pub x: Matrix,
    pub token_ids: Vec<usize>,
}

impl TokenBatch {
    pub fn new(x: Matrix, token_ids: Vec<usize>) -> Result<Self> {
        if token_ids.len() != x.rows() {
            return Err(Error::invalid(
                "token_ids",
                format!("{} ids for {} token rows", token_ids.len(), x.rows()),
            ));
        }
        Ok(Self { x, token_ids })
    }

    /// Batch whose token ids are simply `0..S`.
    pub fn from_matrix(x: Matrix) -> Self {
        let token_ids = (0..x.rows()).collect();
        Self { x, token_ids }
    }

    pub fn len(&self) -> usize {
        self.x.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.x.rows() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct GateConfig {
    pub num_experts: usize,
    /// Selections per token.
    pub k: usize,
    pub capacity_factor: f64,
    /// kTop1 only.
    pub num_prototypes: usize,
    /// Hierarchical top-k only.
    pub num_groups: usize,
    /// Dense-to-sparse only.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for GateConfig {
    fn default() -> Self {
        Self {
            num_experts: 1,
            k: 1,
            capacity_factor: 1.0,
            num_prototypes: 1,
            num_groups: 1,
            temperature: 1.0,
            seed: 0,
        }
    }
}

impl GateConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_experts == 0 {
            return Err(Error::invalid("num_experts", "must be at least 1"));
        }
        if self.k == 0 || self.k > self.num_experts {
            return Err(Error::invalid(
                "k",
                format!("must lie in 1..={}, got {}", self.num_experts, self.k),
            ));
        }
        if !(self.capacity_factor.is_finite() && self.capacity_factor > 0.0) {
            return Err(Error::invalid(
                "capacity_factor",
                format!("must be positive, got {}", self.capacity_factor),
            ));
        }
        if !(self.temperature.is_finite() && self.temperature > 0.0) {
            return Err(Error::invalid(
                "temperature",
                format!("must be positive, got {}", self.temperature),
            ));
        }
        if self.num_prototypes == 0 {
            return Err(Error::invalid("num_prototypes", "must be at least 1"));
        }
        if self.num_groups == 0 {
            return Err(Error::invalid("num_groups", "must be at least 1"));
        }
        Ok(())
    }

    /// `ceil(C * S * k / E)`.
    pub fn capacity_limit(&self, num_tokens: usize, k: usize, num_experts: usize) -> usize {
        capacity_limit(self.capacity_factor, num_tokens, k, num_experts)
    }
}

fn capacity_limit(capacity_factor: f64, num_tokens: usize, k: usize, num_experts: usize) -> usize {
    (capacity_factor * num_tokens as f64 * k as f64 / num_experts as f64).ceil() as usize
}

/// Per-token expert selections and combine weights.
#[derive(Debug, Clone, PartialEq)]
pub struct GateDecision {
    num_tokens: usize,
    num_experts: usize,
    k: usize,
    expert_ids: Vec<Option<usize>>,
    weights: Vec<f64>,
    admitted: Vec<usize>,
    capacity_limit: Option<usize>,
}

impl GateDecision {
    /// `expert_ids` and `weights` are row-major `S x k`.
    pub fn new(
        num_experts: usize,
        k: usize,
        expert_ids: Vec<Option<usize>>,
        weights: Vec<f64>,
    ) -> Result<Self> {
        if k == 0 {
            return Err(Error::invalid("k", "must be at least 1"));
        }
        if expert_ids.len() != weights.len() || !expert_ids.len().is_multiple_of(k) {
            return Err(Error::invalid(
                "expert_ids",
                format!(
                    "{} ids and {} weights do not form rows of {k} slots",
                    expert_ids.len(),
                    weights.len()
                ),
            ));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::invalid("weights", "must be finite and non-negative"));
        }
        let mut admitted = vec![0; num_experts];
        for row in expert_ids.chunks(k) {
            for (i, id) in row.iter().enumerate() {
                let Some(e) = *id else { continue };
                if e >= num_experts {
                    return Err(Error::invalid(
                        "expert_ids",
                        format!("expert {e} out of range for {num_experts} experts"),
                    ));
                }
                if row[..i].contains(&Some(e)) {
                    return Err(Error::invalid(
                        "expert_ids",
                        format!("expert {e} selected twice by one token"),
                    ));
                }
                admitted[e] += 1;
            }
        }
        Ok(Self {
            num_tokens: expert_ids.len() / k,
            num_experts,
            k,
            expert_ids,
            weights,
            admitted,
            capacity_limit: None,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.num_tokens
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn expert_ids(&self) -> &[Option<usize>] {
        &self.expert_ids
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn token_experts(&self, token: usize) -> &[Option<usize>] {
        &self.expert_ids[token * self.k..(token + 1) * self.k]
    }

    pub fn token_weights(&self, token: usize) -> &[f64] {
        &self.weights[token * self.k..(token + 1) * self.k]
    }

    /// Admitted (non-dropped) slots per expert.
    pub fn admitted(&self) -> &[usize] {
        &self.admitted
    }

    pub fn admitted_slots(&self) -> usize {
        self.admitted.iter().sum()
    }

    /// The limit enforced by [`apply_capacity`], if it ran.
    pub fn capacity_limit(&self) -> Option<usize> {
        self.capacity_limit
    }

    /// Expert ids as integers with [`DROPPED`] for empty slots.
    pub fn raw_expert_ids(&self) -> Vec<i64> {
        self.expert_ids
            .iter()
            .map(|id| id.map_or(DROPPED, |e| e as i64))
            .collect()
    }

    pub fn is_fully_dropped(&self, token: usize) -> bool {
        self.token_experts(token).iter().all(Option::is_none)
    }

    /// Tokens whose every slot is dropped.
    pub fn fully_dropped_count(&self) -> usize {
        (0..self.num_tokens)
            .filter(|&t| self.is_fully_dropped(t))
            .count()
    }

    /// Decision restricted to tokens `start..end`.
    pub fn slice_tokens(&self, start: usize, end: usize) -> Result<Self> {
        if start > end || end > self.num_tokens {
            return Err(Error::invalid(
                "slice_tokens",
                format!("range {start}..{end} outside {} tokens", self.num_tokens),
            ));
        }
        let (lo, hi) = (start * self.k, end * self.k);
        let mut out = Self::new(
            self.num_experts,
            self.k,
            self.expert_ids[lo..hi].to_vec(),
            self.weights[lo..hi].to_vec(),
        )?;
        out.capacity_limit = self.capacity_limit;
        Ok(out)
    }

    /// Concatenates per-prototype top-1 decisions into one decision with one
    /// slot per prototype. Prototype `p` owns the global experts
    /// `p * E_p .. (p + 1) * E_p`.
    pub fn merge_prototypes(parts: &[GateDecision]) -> Result<Self> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("parts", "need at least one prototype decision"))?;
        let (s, per) = (first.num_tokens, first.num_experts);
        if parts
            .iter()
            .any(|p| p.k != 1 || p.num_tokens != s || p.num_experts != per)
        {
            return Err(Error::invalid(
                "parts",
                "prototype decisions must be top-1 over equal token and expert counts",
            ));
        }
        let k = parts.len();
        let mut ids = Vec::with_capacity(s * k);
        let mut weights = Vec::with_capacity(s * k);
        for t in 0..s {
            for (p, part) in parts.iter().enumerate() {
                ids.push(part.expert_ids[t].map(|e| p * per + e));
                weights.push(part.weights[t]);
            }
        }
        Self::new(per * k, k, ids, weights)
    }
}

/// Enforces the per-expert capacity `ceil(C * S * k / E)`.
///
/// Slots are admitted in ascending token order (and slot order within a
/// token); overflowing slots become dropped with weight 0. Surviving weights are
/// left as they are.
pub fn apply_capacity(decision: GateDecision, capacity_factor: f64) -> GateDecision {
    let limit = capacity_limit(
        capacity_factor,
        decision.num_tokens,
        decision.k,
        decision.num_experts,
    );
    let GateDecision {
        num_tokens,
        num_experts,
        k,
        mut expert_ids,
        mut weights,
        ..
    } = decision;
    let mut admitted = vec![0usize; num_experts];
    for (id, w) in expert_ids.iter_mut().zip(weights.iter_mut()) {
        let Some(e) = *id else { continue };
        if admitted[e] < limit {
            admitted[e] += 1;
        } else {
            *id = None;
            *w = 0.0;
        }
    }
    GateDecision {
        num_tokens,
        num_experts,
        k,
        expert_ids,
        weights,
        admitted,
        capacity_limit: Some(limit),
    }
}

/// A routing strategy together with its learned parameters.
#[derive(Debug, Clone)]
pub enum Gate {
    /// Top-k softmax gate (`k = 1` Switch, `k = 2` GShard); `d x E` weights.
    TopK {
        weights: Matrix,
    },
    /// One `d x (E / prototypes)` weight matrix per prototype.
    KTop1 {
        prototypes: Vec<Matrix>,
    },
    /// Group router (`d x groups`) followed by an expert router (`d x E`).
    Hierarchical {
        group: Matrix,
        expert: Matrix,
    },
    /// Balanced linear assignment against `d x E` expert embeddings.
    Base {
        weights: Matrix,
    },
    Hash {
        table: HashTable,
    },
    DenseToSparse {
        weights: Matrix,
        mode: GateMode,
    },
}

impl Gate {
    pub fn kind_name(&self) -> &'static str {
        match self {
            Gate::TopK { .. } => "topk",
            Gate::KTop1 { .. } => "ktop1",
            Gate::Hierarchical { .. } => "hierarchical",
            Gate::Base { .. } => "base",
            Gate::Hash { table } => table.kind().name(),
            Gate::DenseToSparse { .. } => "dense-to-sparse",
        }
    }
}

/// A gate plus the configuration it runs under.
#[derive(Debug, Clone)]
pub struct ConfiguredGate {
    pub gate: Gate,
    pub config: GateConfig,
}

impl ConfiguredGate {
    pub fn new(gate: Gate, config: GateConfig) -> Self {
        Self { gate, config }
    }

    /// Routes a batch. Expert ids in the result are global; kTop1 yields one
    /// slot per prototype with unit weights so that prototype outputs sum.
    pub fn route(&self, batch: &TokenBatch) -> Result<GateDecision> {
        let cfg = &self.config;
        match &self.gate {
            Gate::TopK { weights } => topk_gate(&batch.x, weights, cfg),
            Gate::KTop1 { prototypes } => {
                GateDecision::merge_prototypes(&ktop1_gate(&batch.x, prototypes, cfg)?)
            }
            Gate::Hierarchical { group, expert } => {
                hierarchical_topk_gate(&batch.x, group, expert, cfg)
            }
            Gate::Base { weights } => base_layer_assign(&batch.x, weights)?.to_decision(),
            Gate::Hash { table } => hash_gate(&batch.token_ids, table),
            Gate::DenseToSparse { weights, mode } => {
                let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
                dense_to_sparse_gate(&batch.x, weights, cfg, &mut rng, *mode)
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn decision(e: usize, k: usize, ids: &[i64]) -> GateDecision {
        let ids: Vec<Option<usize>> = ids
            .iter()
            .map(|&i| if i < 0 { None } else { Some(i as usize) })
            .collect();
        let n = ids.len();
        GateDecision::new(e, k, ids, vec![1.0 / k as f64; n]).unwrap()
    }

    #[test]
    fn capacity_large_factor_is_identity() {
        let d = decision(2, 1, &[0, 0, 1, 0]);
        let out = apply_capacity(d.clone(), 10.0);
        assert_eq!(out.expert_ids(), d.expert_ids());
        assert_eq!(out.weights(), d.weights());
        assert_eq!(out.capacity_limit(), Some(20));
    }

    #[test]
    fn capacity_forced_overflow() {
        // ceil(0.5 * 4 * 1 / 2) = 1
        let out = apply_capacity(decision(2, 1, &[0, 1, 0, 1]), 0.5);
        assert_eq!(out.capacity_limit(), Some(1));
        assert_eq!(out.raw_expert_ids(), vec![0, 1, DROPPED, DROPPED]);
        assert_eq!(out.weights(), &[1.0, 1.0, 0.0, 0.0]);
        assert_eq!(out.admitted(), &[1, 1]);
        assert_eq!(out.fully_dropped_count(), 2);
    }

    #[test]
    fn capacity_admits_in_token_then_slot_order() {
        // limit = ceil(0.5 * 3 * 2 / 3) = 1
        let out = apply_capacity(decision(3, 2, &[0, 1, 1, 2, 0, 2]), 0.5);
        assert_eq!(
            out.raw_expert_ids(),
            vec![0, 1, DROPPED, 2, DROPPED, DROPPED]
        );
        assert_eq!(out.token_weights(0), &[0.5, 0.5]);
        assert_eq!(out.token_weights(1), &[0.0, 0.5]);
        assert!(out.is_fully_dropped(2));
    }

    #[test]
    fn decision_rejects_duplicates_and_range() {
        assert!(GateDecision::new(3, 2, vec![Some(1), Some(1)], vec![0.5, 0.5]).is_err());
        assert!(GateDecision::new(3, 1, vec![Some(3)], vec![1.0]).is_err());
        assert!(GateDecision::new(3, 2, vec![Some(0)], vec![1.0]).is_err());
        assert!(GateDecision::new(3, 1, vec![Some(0)], vec![-1.0]).is_err());
        // Two dropped slots in one row are fine.
        assert!(GateDecision::new(3, 2, vec![None, None], vec![0.0, 0.0]).is_ok());
    }

    #[test]
    fn merge_prototypes_offsets_ids() {
        let a = decision(2, 1, &[1, 0]);
        let b = decision(2, 1, &[0, DROPPED]);
        let m = GateDecision::merge_prototypes(&[a, b]).unwrap();
        assert_eq!(m.k(), 2);
        assert_eq!(m.num_experts(), 4);
        assert_eq!(m.raw_expert_ids(), vec![1, 2, 0, DROPPED]);
    }

    #[test]
    fn slice_tokens_recounts() {
        let d = decision(2, 1, &[0, 1, 1, 1]);
        let s = d.slice_tokens(1, 3).unwrap();
        assert_eq!(s.num_tokens(), 2);
        assert_eq!(s.admitted(), &[0, 2]);
        assert!(d.slice_tokens(3, 5).is_err());
    }

    #[test]
    fn config_validation() {
        let ok = GateConfig {
            num_experts: 4,
            k: 2,
            ..GateConfig::default()
        };
        assert!(ok.validate().is_ok());
        let bad_k = GateConfig { k: 5, ..ok.clone() };
        assert!(matches!(
            bad_k.validate(),
            Err(Error::InvalidArgument { field: "k", .. })
        ));
        let bad_c = GateConfig {
            capacity_factor: 0.0,
            ..ok.clone()
        };
        assert!(bad_c.validate().is_err());
        let bad_t = GateConfig {
            temperature: -1.0,
            ..ok
        };
        assert!(matches!(
            bad_t.validate(),
            Err(Error::InvalidArgument {
                field: "temperature",
                ..
            })
        ));
    }
}
