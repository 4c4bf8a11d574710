//! Quick oracle-equivalence checks that run from the binary. Each check
//! compares an optimised path against a brute-force reference.

use std::path::{Path, PathBuf};

use moesim_core::gates::{
    apply_capacity, base_layer_assign, topk_gate, topk_rows, ConfiguredGate, Gate, GateConfig,
    GateDecision,
};
use moesim_core::layout::{layout_transform, reverse_layout_transform};
use moesim_core::moe::{moe_forward, place_round_robin, Collective, ExpertParams};
use moesim_core::netsim::{hierarchical_alltoall, vanilla_alltoall, ClusterSpec, DeviceBuffers};
use moesim_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bench::{point_rng, random_batch, random_matrix, write_csv};
use crate::error::CliError;

pub const SELFTEST_FILE: &str = "selftest.csv";

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub check: &'static str,
    pub cases: usize,
    pub passed: bool,
    pub detail: String,
}

type Check = fn(&mut ChaCha8Rng) -> Result<usize, String>;

const CHECKS: [(&str, Check); 7] = [
    ("topk_vs_full_sort", topk_vs_full_sort),
    ("capacity_bound", capacity_bound),
    ("gate_normalization", gate_normalization),
    ("layout_round_trip", layout_round_trip),
    ("base_vs_exhaustive", base_vs_exhaustive),
    ("collective_equivalence", collective_equivalence),
    ("moe_collective_independence", moe_collective_independence),
];

pub fn run_selftest(seed: u64) -> Vec<CheckResult> {
    CHECKS
        .iter()
        .enumerate()
        .map(|(i, (name, check))| {
            let mut rng = point_rng(seed, i as u64);
            match check(&mut rng) {
                Ok(cases) => CheckResult {
                    check: name,
                    cases,
                    passed: true,
                    detail: String::new(),
                },
                Err(detail) => CheckResult {
                    check: name,
                    cases: 0,
                    passed: false,
                    detail,
                },
            }
        })
        .collect()
}

/// Runs every check, writes the report, and fails with exit code 2 if any
/// check failed.
pub fn selftest(seed: u64, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let results = run_selftest(seed);
    let path = out.join(SELFTEST_FILE);
    write_csv(&path, &results)?;
    for r in &results {
        if r.passed {
            println!("PASS {} ({} cases)", r.check, r.cases);
        } else {
            println!("FAIL {}: {}", r.check, r.detail);
        }
    }
    let failed: Vec<&str> = results
        .iter()
        .filter(|r| !r.passed)
        .map(|r| r.check)
        .collect();
    if failed.is_empty() {
        Ok(vec![path])
    } else {
        Err(CliError::Correctness(format!(
            "selftest failed: {}",
            failed.join(", ")
        )))
    }
}

fn err(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn full_sort(row: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

fn topk_vs_full_sort(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut cases = 0;
    for _ in 0..50 {
        let cols = rng.gen_range(1..64);
        // Coarse values so ties actually occur.
        let scores = Matrix::from_fn(16, cols, |_, _| rng.gen_range(0..8) as f64).unwrap();
        for k in [1, 2, 3, 5] {
            if k > cols {
                continue;
            }
            let got = topk_rows(&scores, k).map_err(|e| e.to_string())?;
            for r in 0..16 {
                let want = full_sort(scores.row(r), k);
                err(got.row_indices(r) == want.as_slice(), || {
                    format!("row {r}, k = {k}: {:?} vs {want:?}", got.row_indices(r))
                })?;
                cases += 1;
            }
        }
    }
    Ok(cases)
}

fn capacity_bound(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    for case in 0..200 {
        let e = rng.gen_range(1..16);
        let k = rng.gen_range(1..=e.min(4));
        let s = rng.gen_range(1..64);
        let c = rng.gen_range(0.1..2.0);
        let mut ids = Vec::with_capacity(s * k);
        for _ in 0..s {
            let mut picks: Vec<usize> = (0..e).collect();
            for j in 0..k {
                let t = rng.gen_range(j..e);
                picks.swap(j, t);
            }
            ids.extend(picks[..k].iter().map(|&x| Some(x)));
        }
        let d =
            GateDecision::new(e, k, ids, vec![1.0 / k as f64; s * k]).map_err(|x| x.to_string())?;
        let limit = (c * (s * k) as f64 / e as f64).ceil() as usize;
        let out = apply_capacity(d, c);
        let mut counts = vec![0; e];
        for id in out.expert_ids().iter().flatten() {
            counts[*id] += 1;
        }
        err(counts.iter().all(|&n| n <= limit), || {
            format!("case {case}: {counts:?} over {limit}")
        })?;
    }
    Ok(200)
}

fn gate_normalization(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    for case in 0..100 {
        let e = rng.gen_range(2..16);
        let k = rng.gen_range(1..=e.min(4));
        let x = random_matrix(8, 6, 1.0, rng);
        let w = random_matrix(6, e, 1.0, rng);
        let cfg = GateConfig {
            num_experts: e,
            k,
            capacity_factor: 1e6,
            ..GateConfig::default()
        };
        let d = topk_gate(&x, &w, &cfg).map_err(|x| x.to_string())?;
        for t in 0..8 {
            let sum: f64 = d.token_weights(t).iter().sum();
            err((sum - 1.0).abs() < 1e-9, || {
                format!("case {case}, token {t}: sum {sum}")
            })?;
        }
    }
    Ok(100)
}

fn layout_round_trip(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    for case in 0..100 {
        let s = rng.gen_range(1..128);
        let e = rng.gen_range(1..32);
        let x = random_matrix(s, 4, 1.0, rng);
        let ids = (0..s).map(|_| Some(rng.gen_range(0..e))).collect();
        let d = GateDecision::new(e, 1, ids, vec![1.0; s]).map_err(|x| x.to_string())?;
        let (buf, perm) = layout_transform(&x, &d).map_err(|x| x.to_string())?;
        let back = reverse_layout_transform(&buf, &perm, &d, s).map_err(|x| x.to_string())?;
        err(back == x, || {
            format!("case {case}: round trip changed the input")
        })?;
    }
    Ok(100)
}

fn base_vs_exhaustive(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    for case in 0..50 {
        let e = if rng.gen_bool(0.5) { 2 } else { 4 };
        let s = e * rng.gen_range(1..=8 / e);
        let x = random_matrix(s, 3, 1.0, rng);
        let w = random_matrix(3, e, 1.0, rng);
        let scores: Vec<Vec<f64>> = (0..s)
            .map(|i| {
                (0..e)
                    .map(|j| (0..3).map(|c| x.get(i, c) * w.get(c, j)).sum())
                    .collect()
            })
            .collect();
        let mut best = f64::NEG_INFINITY;
        for code in 0..e.pow(s as u32) {
            let mut counts = vec![0; e];
            let mut obj = 0.0;
            let mut c = code;
            for row in &scores {
                counts[c % e] += 1;
                obj += row[c % e];
                c /= e;
            }
            if counts.iter().all(|&n| n == s / e) {
                best = best.max(obj);
            }
        }
        let a = base_layer_assign(&x, &w).map_err(|x| x.to_string())?;
        err((a.objective - best).abs() < 1e-9, || {
            format!("case {case}: {} vs {best}", a.objective)
        })?;
        err(a.counts().iter().all(|&n| n == s / e), || {
            format!("case {case}: unbalanced")
        })?;
    }
    Ok(50)
}

fn collective_equivalence(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    let mut cases = 0;
    for n in [1, 2, 4] {
        for g in [1, 2, 4, 8] {
            let spec = ClusterSpec::commodity(n, g);
            for _ in 0..5 {
                let input = DeviceBuffers::from_fn(n * g, |_, _| {
                    let len = rng.gen_range(0..32);
                    (0..len).map(|_| rng.gen()).collect()
                });
                let (a, _) = vanilla_alltoall(input.clone(), &spec).map_err(|x| x.to_string())?;
                let (b, _) = hierarchical_alltoall(input, &spec).map_err(|x| x.to_string())?;
                err(a == b, || format!("N = {n}, G = {g}: outputs differ"))?;
                cases += 1;
            }
        }
    }
    Ok(cases)
}

fn moe_collective_independence(rng: &mut ChaCha8Rng) -> Result<usize, String> {
    for case in 0..5 {
        let spec = ClusterSpec::commodity(2, 2);
        let (s, d, h, e) = (32, 8, 16, 8);
        let batch = random_batch(s, d, 100, rng);
        let mut experts: Vec<ExpertParams> = (0..e)
            .map(|_| {
                ExpertParams::new(
                    random_matrix(d, h, 1.0, rng),
                    random_matrix(h, d, 1.0, rng),
                    0,
                )
                .unwrap()
            })
            .collect();
        place_round_robin(&mut experts, 4);
        let cfg = GateConfig {
            num_experts: e,
            k: 2,
            ..GateConfig::default()
        };
        let gate = ConfiguredGate::new(
            Gate::TopK {
                weights: random_matrix(d, e, 1.0, rng),
            },
            cfg,
        );
        let run = |c| moe_forward(&batch, &gate, &experts, &spec, c).map_err(|x| x.to_string());
        let a = run(Collective::Vanilla)?;
        let b = run(Collective::Hierarchical)?;
        err(a.y == b.y, || format!("case {case}: outputs differ"))?;
    }
    Ok(5)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_check_passes() {
        for r in run_selftest(7) {
            assert!(r.passed, "{}: {}", r.check, r.detail);
            assert!(r.cases > 0);
        }
    }
}
