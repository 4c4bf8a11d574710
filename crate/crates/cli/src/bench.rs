//! The three benchmark sweeps. Every random quantity comes from a ChaCha8
//! stream keyed by the config seed and the sweep point, so a rerun writes the
//! same bytes.

use std::path::{Path, PathBuf};
use std::time::Instant;

use moesim_core::gates::{
    build_hash_table, ConfiguredGate, Gate, GateDecision, GateMode, TokenBatch,
};
use moesim_core::moe::{moe_forward_with_flops, place_round_robin, ExpertParams};
use moesim_core::netsim::{
    estimate_speedup, hierarchical_alltoall, vanilla_alltoall, DeviceBuffers,
};
use moesim_core::Matrix;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::config::{ExperimentConfig, GateKind};
use crate::error::CliError;

pub const GATE_BENCH_FILE: &str = "gate_bench.csv";
pub const COMM_BENCH_FILE: &str = "comm_bench.csv";
pub const MOE_BENCH_FILE: &str = "moe_bench.csv";
pub const MOE_BENCH_JSON: &str = "moe_bench.json";

pub fn point_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(stream);
    r
}

/// First 8 bytes of SHA-256, as 16 hex digits.
pub fn checksum(bytes: impl IntoIterator<Item = [u8; 8]>) -> String {
    let mut h = Sha256::new();
    for b in bytes {
        h.update(b);
    }
    h.finalize()[..8]
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

pub fn decision_checksum(d: &GateDecision) -> String {
    checksum(d.raw_expert_ids().into_iter().map(i64::to_le_bytes))
}

pub fn matrix_checksum(m: &Matrix) -> String {
    checksum(m.as_slice().iter().map(|v| v.to_le_bytes()))
}

/// Uniform entries in `[-scale, scale)`.
pub fn random_matrix(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale)).expect("finite entries")
}

/// A batch of `s` tokens: random embeddings and ids drawn from the vocabulary.
pub fn random_batch(s: usize, d: usize, vocab: usize, rng: &mut ChaCha8Rng) -> TokenBatch {
    let x = random_matrix(s, d, 1.0, rng);
    let ids = (0..s).map(|_| rng.gen_range(0..vocab)).collect();
    TokenBatch::new(x, ids).expect("ids match rows")
}

/// Builds the configured gate for `experts` experts with fresh parameters.
/// Hash gates learn their table from `batch` (token frequencies) and random
/// vocabulary embeddings.
pub fn build_gate(
    cfg: &ExperimentConfig,
    experts: usize,
    temperature: f64,
    batch: &TokenBatch,
    rng: &mut ChaCha8Rng,
) -> Result<ConfiguredGate, CliError> {
    let d = cfg.model.d_model;
    let scale = 1.0 / (d as f64).sqrt();
    let gcfg = cfg.gate_config(experts, temperature, rng.gen());
    let gate = match cfg.gate.kind {
        GateKind::Topk => Gate::TopK {
            weights: random_matrix(d, experts, scale, rng),
        },
        GateKind::Ktop1 => Gate::KTop1 {
            prototypes: (0..cfg.gate.num_prototypes)
                .map(|_| random_matrix(d, experts / cfg.gate.num_prototypes, scale, rng))
                .collect(),
        },
        GateKind::Hierarchical => Gate::Hierarchical {
            group: random_matrix(d, cfg.gate.num_groups, scale, rng),
            expert: random_matrix(d, experts, scale, rng),
        },
        GateKind::Base => Gate::Base {
            weights: random_matrix(d, experts, scale, rng),
        },
        GateKind::DenseToSparse => Gate::DenseToSparse {
            weights: random_matrix(d, experts, scale, rng),
            mode: if cfg.gate.eval_mode {
                GateMode::Eval
            } else {
                GateMode::Train
            },
        },
        GateKind::HashRandom | GateKind::HashBalanced | GateKind::HashClustered => {
            let vocab = cfg.model.vocab_size;
            let mut freq = vec![0u64; vocab];
            for &t in &batch.token_ids {
                freq[t] += 1;
            }
            let emb = random_matrix(vocab, d, 1.0, rng);
            let kind = cfg.gate.kind.hash_kind().expect("hash kind");
            Gate::Hash {
                table: build_hash_table(vocab, kind, &gcfg, Some(&freq), Some(&emb))?,
            }
        }
    };
    Ok(ConfiguredGate::new(gate, gcfg))
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GateRow {
    pub gate_kind: String,
    #[serde(rename = "S")]
    pub tokens: usize,
    #[serde(rename = "E")]
    pub experts: usize,
    pub k: usize,
    pub wall_micros_reference_impl: Option<u64>,
    pub decisions_checksum: String,
    /// Dense-to-sparse rows only.
    pub temperature: Option<f64>,
}

pub fn run_gate_bench(cfg: &ExperimentConfig) -> Result<Vec<GateRow>, CliError> {
    let mut rows = Vec::new();
    let temperatures: Vec<Option<f64>> = if cfg.gate.kind == GateKind::DenseToSparse {
        cfg.sweep.temperatures.iter().map(|&t| Some(t)).collect()
    } else {
        vec![None]
    };
    let mut stream = 0;
    for &s in &cfg.sweep.num_tokens {
        for &e in &cfg.sweep.num_experts {
            for &tau in &temperatures {
                stream += 1;
                let mut rng = point_rng(cfg.seed, stream);
                let batch = random_batch(s, cfg.model.d_model, cfg.model.vocab_size, &mut rng);
                let gate = build_gate(
                    cfg,
                    e,
                    tau.unwrap_or(cfg.gate.temperature),
                    &batch,
                    &mut rng,
                )?;
                let start = Instant::now();
                let decision = gate.route(&batch)?;
                let micros = start.elapsed().as_micros() as u64;
                rows.push(GateRow {
                    gate_kind: cfg.gate.kind.name().to_string(),
                    tokens: s,
                    experts: e,
                    k: decision.k(),
                    wall_micros_reference_impl: cfg.bench.measure_wall_time.then_some(micros),
                    decisions_checksum: decision_checksum(&decision),
                    temperature: tau,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CommRow {
    #[serde(rename = "N")]
    pub nodes: usize,
    #[serde(rename = "G")]
    pub devices_per_node: usize,
    pub bytes: u64,
    pub t_vanilla: f64,
    pub t_hier: f64,
    pub ratio: f64,
    pub inter_msg_size_vanilla: u64,
    pub inter_msg_size_hier: u64,
}

/// Prices both collectives per sweep point and checks on real (size-capped)
/// payloads that they deliver identical buffers.
pub fn run_comm_bench(cfg: &ExperimentConfig) -> Result<Vec<CommRow>, CliError> {
    let mut rows = Vec::new();
    let mut stream = 0;
    for &n in &cfg.sweep.nodes {
        for &g in &cfg.sweep.devices_per_node {
            for &bytes in &cfg.sweep.payload_bytes {
                stream += 1;
                let spec = cfg.cluster_spec(n, g);
                let s = estimate_speedup(&spec, bytes)?;

                let p = spec.num_devices();
                let len = (bytes / p as u64).min(cfg.bench.verify_chunk_bytes) as usize;
                let mut rng = point_rng(cfg.seed, stream);
                let input = DeviceBuffers::from_fn(p, |_, _| {
                    let mut payload = vec![0u8; len];
                    rng.fill_bytes(&mut payload);
                    payload
                });
                let (a, _) = vanilla_alltoall(input.clone(), &spec)?;
                let (b, _) = hierarchical_alltoall(input, &spec)?;
                if a != b {
                    return Err(CliError::Correctness(format!(
                        "collectives disagree at N = {n}, G = {g}, {bytes} bytes"
                    )));
                }

                rows.push(CommRow {
                    nodes: n,
                    devices_per_node: g,
                    bytes,
                    t_vanilla: s.vanilla.total,
                    t_hier: s.hierarchical.total,
                    ratio: s.ratio,
                    inter_msg_size_vanilla: s.vanilla.inter_node.max_bytes,
                    inter_msg_size_hier: s.hierarchical.inter_node.max_bytes,
                });
            }
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoeRow {
    pub batch_size: usize,
    #[serde(rename = "S")]
    pub tokens: usize,
    pub total_seconds: f64,
    pub gate_share: f64,
    pub layout_share: f64,
    pub alltoall_share: f64,
    pub expert_share: f64,
    pub combine_share: f64,
    pub drop_count: usize,
    pub y_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSeconds {
    pub gate: f64,
    pub layout: f64,
    pub alltoall: f64,
    pub expert: f64,
    pub combine: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoePoint {
    pub batch_size: usize,
    pub tokens: usize,
    pub seconds: PhaseSeconds,
    pub dispatch_seconds: f64,
    pub return_seconds: f64,
    pub drop_count: usize,
    pub y_checksum: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MoeReport {
    pub gate_kind: String,
    pub collective: String,
    pub nodes: usize,
    pub devices_per_node: usize,
    pub num_experts: usize,
    pub d_model: usize,
    pub hidden: usize,
    pub seq_len: usize,
    pub points: Vec<MoePoint>,
}

/// One forward pass per batch size. Gate and expert parameters are drawn once
/// and shared by every point; each point gets its own input batch.
pub fn run_moe_bench(cfg: &ExperimentConfig) -> Result<(Vec<MoeRow>, MoeReport), CliError> {
    let (n, g) = (cfg.cluster.nodes, cfg.cluster.devices_per_node);
    let spec = cfg.cluster_spec(n, g);
    let (d, h, e) = (cfg.model.d_model, cfg.model.hidden, cfg.gate.num_experts);

    let mut param_rng = point_rng(cfg.seed, 0);
    let mut experts: Vec<ExpertParams> = (0..e)
        .map(|_| {
            let w1 = random_matrix(d, h, 1.0 / (d as f64).sqrt(), &mut param_rng);
            let w2 = random_matrix(h, d, 1.0 / (h as f64).sqrt(), &mut param_rng);
            ExpertParams::new(w1, w2, 0)
        })
        .collect::<Result<_, _>>()?;
    place_round_robin(&mut experts, spec.num_devices());
    // Hash tables are learned from a reference batch of the first size.
    let reference = random_batch(
        cfg.num_tokens(cfg.sweep.batch_sizes[0]),
        d,
        cfg.model.vocab_size,
        &mut param_rng,
    );
    let gate = build_gate(cfg, e, cfg.gate.temperature, &reference, &mut param_rng)?;

    let mut rows = Vec::new();
    let mut points = Vec::new();
    for (i, &b) in cfg.sweep.batch_sizes.iter().enumerate() {
        let s = cfg.num_tokens(b);
        let mut rng = point_rng(cfg.seed, 1 + i as u64);
        let batch = random_batch(s, d, cfg.model.vocab_size, &mut rng);
        let out = moe_forward_with_flops(
            &batch,
            &gate,
            &experts,
            &spec,
            cfg.cluster.collective.into(),
            cfg.cluster.device_flops,
        )?;
        let t = out.timing;
        let [gs, ls, als, es, cs] = t.shares();
        let y_checksum = matrix_checksum(&out.y);
        rows.push(MoeRow {
            batch_size: b,
            tokens: s,
            total_seconds: t.total,
            gate_share: gs,
            layout_share: ls,
            alltoall_share: als,
            expert_share: es,
            combine_share: cs,
            drop_count: out.drop_count,
            y_checksum: y_checksum.clone(),
        });
        points.push(MoePoint {
            batch_size: b,
            tokens: s,
            seconds: PhaseSeconds {
                gate: t.gate,
                layout: t.layout,
                alltoall: t.alltoall(),
                expert: t.expert,
                combine: t.combine,
                total: t.total,
            },
            dispatch_seconds: t.dispatch.total,
            return_seconds: t.gather_back.total,
            drop_count: out.drop_count,
            y_checksum,
        });
    }
    let report = MoeReport {
        gate_kind: cfg.gate.kind.name().to_string(),
        collective: cfg.cluster.collective.name().to_string(),
        nodes: n,
        devices_per_node: g,
        num_experts: e,
        d_model: d,
        hidden: h,
        seq_len: cfg.model.seq_len,
        points,
    };
    Ok((rows, report))
}

pub fn write_csv<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), CliError> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Runs gate-bench and writes its CSV into `out`.
pub fn gate_bench(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = run_gate_bench(cfg)?;
    let path = out.join(GATE_BENCH_FILE);
    write_csv(&path, &rows)?;
    Ok(vec![path])
}

pub fn comm_bench(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let rows = run_comm_bench(cfg)?;
    let path = out.join(COMM_BENCH_FILE);
    write_csv(&path, &rows)?;
    Ok(vec![path])
}

pub fn moe_bench(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<PathBuf>, CliError> {
    let (rows, report) = run_moe_bench(cfg)?;
    let csv_path = out.join(MOE_BENCH_FILE);
    let json_path = out.join(MOE_BENCH_JSON);
    write_csv(&csv_path, &rows)?;
    write_json(&json_path, &report)?;
    Ok(vec![csv_path, json_path])
}
