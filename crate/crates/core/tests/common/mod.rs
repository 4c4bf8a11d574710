//! Brute-force oracles shared by the integration tests. None of these call
//! into the code paths they check beyond constructing inputs.
#![allow(dead_code)]

use moesim_core::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_matrix(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
}

pub fn naive_matmul(a: &Matrix, b: &Matrix) -> Vec<Vec<f64>> {
    (0..a.rows())
        .map(|i| {
            (0..b.cols())
                .map(|j| (0..a.cols()).map(|k| a.get(i, k) * b.get(k, j)).sum())
                .collect()
        })
        .collect()
}

pub fn naive_softmax(v: &[f64]) -> Vec<f64> {
    let m = v.iter().cloned().fold(f64::MIN, f64::max);
    let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|x| x / s).collect()
}

/// Indices of the `k` largest entries; equal values by lower index.
pub fn full_sort_topk(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Pre-capacity top-k gate composed from scratch: `(ids, weights)` per token.
pub fn topk_gate_oracle(x: &Matrix, w: &Matrix, k: usize) -> Vec<(Vec<usize>, Vec<f64>)> {
    naive_matmul(x, w)
        .into_iter()
        .map(|logits| {
            let ids = full_sort_topk(&logits, k);
            let sel: Vec<f64> = ids.iter().map(|&i| logits[i]).collect();
            (ids, naive_softmax(&sel))
        })
        .collect()
}

/// Replays admissions token by token; returns surviving ids and per-expert counts.
pub fn capacity_replay(
    ids: &[Option<usize>],
    experts: usize,
    limit: usize,
) -> (Vec<Option<usize>>, Vec<usize>) {
    let mut counts = vec![0; experts];
    let mut out = Vec::with_capacity(ids.len());
    for id in ids {
        match id {
            Some(e) if counts[*e] < limit => {
                counts[*e] += 1;
                out.push(Some(*e));
            }
            _ => out.push(None),
        }
    }
    (out, counts)
}

/// Best objective over every assignment giving each expert exactly `S / E` tokens.
pub fn exhaustive_balanced_optimum(scores: &[Vec<f64>], experts: usize) -> f64 {
    let s = scores.len();
    let quota = s / experts;
    let mut best = f64::NEG_INFINITY;
    let mut a = vec![0usize; s];
    let total = experts.pow(s as u32);
    for code in 0..total {
        let mut c = code;
        let mut counts = vec![0; experts];
        for slot in a.iter_mut() {
            *slot = c % experts;
            c /= experts;
            counts[*slot] += 1;
        }
        if counts.iter().all(|&n| n == quota) {
            let obj: f64 = a.iter().enumerate().map(|(i, &e)| scores[i][e]).sum();
            best = best.max(obj);
        }
    }
    best
}

/// `(expert, token, slot)` for every admitted slot, stably sorted by expert.
pub fn layout_triples(ids: &[Option<usize>], k: usize) -> Vec<(usize, usize, usize)> {
    let mut triples: Vec<(usize, usize, usize)> = ids
        .iter()
        .enumerate()
        .filter_map(|(i, id)| id.map(|e| (e, i / k, i % k)))
        .collect();
    triples.sort_by_key(|t| t.0);
    triples
}
