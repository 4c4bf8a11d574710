//! Hash routing: a fixed table maps every vocabulary id to one expert.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::Matrix;

use super::{GateConfig, GateDecision};

/// Lloyd iterations used for clustered tables.
pub const KMEANS_ITERATIONS: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HashKind {
    /// Seeded uniform map.
    Random,
    /// Greedy frequency balancing: heaviest ids first, each to the lightest expert.
    Balanced,
    /// k-means over token embeddings, one cluster per expert.
    Clustered,
}

impl HashKind {
    pub fn name(self) -> &'static str {
        match self {
            HashKind::Random => "hash-random",
            HashKind::Balanced => "hash-balanced",
            HashKind::Clustered => "hash-clustered",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashTable {
    kind: HashKind,
    num_experts: usize,
    table: Vec<usize>,
}

impl HashTable {
    pub fn kind(&self) -> HashKind {
        self.kind
    }

    pub fn num_experts(&self) -> usize {
        self.num_experts
    }

    pub fn vocab_size(&self) -> usize {
        self.table.len()
    }

    pub fn expert_of(&self, token_id: usize) -> Option<usize> {
        self.table.get(token_id).copied()
    }

    pub fn as_slice(&self) -> &[usize] {
        &self.table
    }
}

pub fn build_hash_table(
    vocab_size: usize,
    kind: HashKind,
    cfg: &GateConfig,
    frequencies: Option<&[u64]>,
    embeddings: Option<&Matrix>,
) -> Result<HashTable> {
    let e = cfg.num_experts;
    if e == 0 {
        return Err(Error::invalid("num_experts", "must be at least 1"));
    }
    let table = match kind {
        HashKind::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            (0..vocab_size).map(|_| rng.gen_range(0..e)).collect()
        }
        HashKind::Balanced => {
            let freqs = frequencies.ok_or(Error::MissingHashData {
                kind: "balanced",
                missing: "token frequencies",
            })?;
            if freqs.len() != vocab_size {
                return Err(Error::invalid(
                    "frequencies",
                    format!("{} counts for a vocabulary of {vocab_size}", freqs.len()),
                ));
            }
            balanced_table(freqs, e)
        }
        HashKind::Clustered => {
            let emb = embeddings.ok_or(Error::MissingHashData {
                kind: "clustered",
                missing: "token embeddings",
            })?;
            if emb.rows() != vocab_size {
                return Err(Error::invalid(
                    "embeddings",
                    format!("{} rows for a vocabulary of {vocab_size}", emb.rows()),
                ));
            }
            if e > vocab_size {
                return Err(Error::invalid(
                    "num_experts",
                    format!("cannot form {e} clusters from {vocab_size} embeddings"),
                ));
            }
            kmeans(emb, e, KMEANS_ITERATIONS, cfg.seed)
        }
    };
    Ok(HashTable {
        kind,
        num_experts: e,
        table,
    })
}

fn balanced_table(freqs: &[u64], e: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..freqs.len()).collect();
    order.sort_by(|&a, &b| freqs[b].cmp(&freqs[a]).then(a.cmp(&b)));
    let mut load = vec![0u64; e];
    let mut table = vec![0; freqs.len()];
    for id in order {
        let lightest = (0..e).min_by_key(|&x| (load[x], x)).unwrap();
        load[lightest] += freqs[id];
        table[id] = lightest;
    }
    table
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(point: &[f64], centroids: &[Vec<f64>]) -> usize {
    let mut best = (0, f64::INFINITY);
    for (c, centre) in centroids.iter().enumerate() {
        let d = sq_dist(point, centre);
        if d < best.1 {
            best = (c, d);
        }
    }
    best.0
}

/// Lloyd's algorithm with seeded k-means++ initialisation. Empty clusters keep
/// their previous centroid.
fn kmeans(points: &Matrix, clusters: usize, iterations: usize, seed: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.rows();
    let mut centroids: Vec<Vec<f64>> = vec![points.row(rng.gen_range(0..n)).to_vec()];
    while centroids.len() < clusters {
        let dists: Vec<f64> = points
            .row_iter()
            .map(|p| {
                centroids
                    .iter()
                    .map(|c| sq_dist(p, c))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total > 0.0 {
            let mut target = rng.gen_range(0.0..total);
            let mut pick = n - 1;
            for (i, d) in dists.iter().enumerate() {
                if target < *d {
                    pick = i;
                    break;
                }
                target -= d;
            }
            pick
        } else {
            // All points coincide with chosen centres: any distinct index will do.
            sample(&mut rng, n, 1).index(0)
        };
        centroids.push(points.row(next).to_vec());
    }

    let dim = points.cols();
    let mut labels: Vec<usize> = points.row_iter().map(|p| nearest(p, &centroids)).collect();
    for _ in 0..iterations {
        let mut sums = vec![vec![0.0; dim]; clusters];
        let mut counts = vec![0usize; clusters];
        for (p, &l) in points.row_iter().zip(&labels) {
            counts[l] += 1;
            for (s, v) in sums[l].iter_mut().zip(p) {
                *s += v;
            }
        }
        for c in 0..clusters {
            if counts[c] > 0 {
                centroids[c] = sums[c].iter().map(|s| s / counts[c] as f64).collect();
            }
        }
        labels = points.row_iter().map(|p| nearest(p, &centroids)).collect();
    }
    labels
}

/// Looks up every token id; `k = 1`, weight exactly 1, nothing dropped.
pub fn hash_gate(token_ids: &[usize], table: &HashTable) -> Result<GateDecision> {
    let ids = token_ids
        .iter()
        .map(|&id| {
            table.expert_of(id).map(Some).ok_or(Error::TokenOutOfVocab {
                id,
                vocab_size: table.vocab_size(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let n = ids.len();
    GateDecision::new(table.num_experts, 1, ids, vec![1.0; n])
}
