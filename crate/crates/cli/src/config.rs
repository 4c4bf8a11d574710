//! Experiment configuration, read from TOML.

use std::fmt;
use std::path::{Path, PathBuf};

use moesim_core::gates::{GateConfig, HashKind};
use moesim_core::moe::{Collective, DEFAULT_DEVICE_FLOPS};
use moesim_core::netsim::{ClusterSpec, DEFAULT_REORDER_BETA};
use serde::Deserialize;

use crate::error::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GateKind {
    Topk,
    Ktop1,
    Hierarchical,
    Base,
    HashRandom,
    HashBalanced,
    HashClustered,
    DenseToSparse,
}

impl GateKind {
    pub fn name(self) -> &'static str {
        match self {
            GateKind::Topk => "topk",
            GateKind::Ktop1 => "ktop1",
            GateKind::Hierarchical => "hierarchical",
            GateKind::Base => "base",
            GateKind::HashRandom => "hash-random",
            GateKind::HashBalanced => "hash-balanced",
            GateKind::HashClustered => "hash-clustered",
            GateKind::DenseToSparse => "dense-to-sparse",
        }
    }

    pub fn hash_kind(self) -> Option<HashKind> {
        match self {
            GateKind::HashRandom => Some(HashKind::Random),
            GateKind::HashBalanced => Some(HashKind::Balanced),
            GateKind::HashClustered => Some(HashKind::Clustered),
            _ => None,
        }
    }

    /// Slots per token the gate actually emits for `k` and `experts`.
    pub fn slots(self, k: usize, experts: usize, prototypes: usize) -> usize {
        match self {
            GateKind::Ktop1 => prototypes,
            GateKind::Base
            | GateKind::HashRandom
            | GateKind::HashBalanced
            | GateKind::HashClustered => 1,
            GateKind::DenseToSparse => experts,
            GateKind::Topk | GateKind::Hierarchical => k,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CollectiveKind {
    Vanilla,
    Hierarchical,
}

impl CollectiveKind {
    pub fn name(self) -> &'static str {
        match self {
            CollectiveKind::Vanilla => "vanilla",
            CollectiveKind::Hierarchical => "hierarchical",
        }
    }
}

impl From<CollectiveKind> for Collective {
    fn from(k: CollectiveKind) -> Self {
        match k {
            CollectiveKind::Vanilla => Collective::Vanilla,
            CollectiveKind::Hierarchical => Collective::Hierarchical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    pub batch_size: usize,
    pub seq_len: usize,
    pub d_model: usize,
    pub hidden: usize,
    /// Token ids are drawn from `0..vocab_size`.
    pub vocab_size: usize,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            batch_size: 8,
            seq_len: 16,
            d_model: 32,
            hidden: 64,
            vocab_size: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GateSection {
    pub kind: GateKind,
    pub num_experts: usize,
    pub k: usize,
    pub capacity_factor: f64,
    pub num_prototypes: usize,
    pub num_groups: usize,
    pub temperature: f64,
    /// Dense-to-sparse only: evaluate deterministically instead of sampling noise.
    pub eval_mode: bool,
}

impl Default for GateSection {
    fn default() -> Self {
        Self {
            kind: GateKind::Topk,
            num_experts: 16,
            k: 2,
            capacity_factor: 1.0,
            num_prototypes: 1,
            num_groups: 1,
            temperature: 1.0,
            eval_mode: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ClusterSection {
    pub nodes: usize,
    pub devices_per_node: usize,
    pub intra_alpha: f64,
    pub intra_beta: f64,
    pub inter_alpha: f64,
    pub inter_beta: f64,
    pub reorder_beta: f64,
    pub device_flops: f64,
    pub collective: CollectiveKind,
}

impl Default for ClusterSection {
    fn default() -> Self {
        let c = ClusterSpec::commodity(1, 1);
        Self {
            nodes: 2,
            devices_per_node: 2,
            intra_alpha: c.intra_alpha,
            intra_beta: c.intra_beta,
            inter_alpha: c.inter_alpha,
            inter_beta: c.inter_beta,
            reorder_beta: DEFAULT_REORDER_BETA,
            device_flops: DEFAULT_DEVICE_FLOPS,
            collective: CollectiveKind::Hierarchical,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSection {
    /// gate-bench token counts.
    pub num_tokens: Vec<usize>,
    /// gate-bench expert counts.
    pub num_experts: Vec<usize>,
    /// moe-bench batch sizes.
    pub batch_sizes: Vec<usize>,
    /// comm-bench node counts.
    pub nodes: Vec<usize>,
    /// comm-bench devices per node.
    pub devices_per_node: Vec<usize>,
    /// comm-bench bytes sent per device.
    pub payload_bytes: Vec<u64>,
    /// gate-bench temperatures for the dense-to-sparse gate.
    pub temperatures: Vec<f64>,
}

impl Default for SweepSection {
    fn default() -> Self {
        Self {
            num_tokens: vec![1024],
            num_experts: vec![2, 4, 8, 16, 32],
            batch_sizes: vec![8, 16, 32, 64],
            nodes: vec![1, 2, 4, 8],
            devices_per_node: vec![1, 2, 4, 8],
            payload_bytes: vec![16 << 20],
            temperatures: vec![10.0, 1.0, 0.1, 0.01],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BenchSection {
    /// Fill the gate-bench wall-time column. Off by default so that reruns
    /// produce identical files.
    pub measure_wall_time: bool,
    /// comm-bench materialises at most this many bytes per chunk when it
    /// checks that both collectives deliver the same data.
    pub verify_chunk_bytes: u64,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            measure_wall_time: false,
            verify_chunk_bytes: 4096,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    pub model: ModelSection,
    pub gate: GateSection,
    pub cluster: ClusterSection,
    pub sweep: SweepSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            model: ModelSection::default(),
            gate: GateSection::default(),
            cluster: ClusterSection::default(),
            sweep: SweepSection::default(),
            bench: BenchSection::default(),
        }
    }
}

/// One rejected field.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FieldError {
    pub field: String,
    pub reason: String,
}

impl fmt::Display for FieldError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.reason)
    }
}

struct Checker(Vec<FieldError>);

impl Checker {
    fn fail(&mut self, field: &str, reason: impl Into<String>) {
        self.0.push(FieldError {
            field: field.to_string(),
            reason: reason.into(),
        });
    }

    fn positive(&mut self, field: &str, v: usize) {
        if v == 0 {
            self.fail(field, "must be at least 1");
        }
    }

    fn positive_f(&mut self, field: &str, v: f64) {
        if !(v.is_finite() && v > 0.0) {
            self.fail(field, format!("must be a positive finite number, got {v}"));
        }
    }

    fn non_negative_f(&mut self, field: &str, v: f64) {
        if !(v.is_finite() && v >= 0.0) {
            self.fail(
                field,
                format!("must be a non-negative finite number, got {v}"),
            );
        }
    }

    fn axis<T: Copy>(&mut self, field: &str, values: &[T], ok: impl Fn(T) -> bool, what: &str) {
        if values.is_empty() {
            self.fail(field, "sweep axis must not be empty");
        } else if !values.iter().all(|&v| ok(v)) {
            self.fail(field, format!("every entry must be {what}"));
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        let cfg: Self = toml::from_str(text).map_err(|e| {
            CliError::Config(vec![FieldError {
                field: "config".into(),
                reason: e.to_string().trim_end().to_string(),
            }])
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::Config(vec![FieldError {
                field: "config".into(),
                reason: format!("cannot read {}: {e}", path.display()),
            }])
        })?;
        Self::from_toml(&text)
    }

    pub fn num_tokens(&self, batch_size: usize) -> usize {
        batch_size * self.model.seq_len
    }

    /// Checks every field and reports all problems at once.
    pub fn validate(&self) -> Result<(), CliError> {
        let mut c = Checker(Vec::new());
        let m = &self.model;
        c.positive("model.batch_size", m.batch_size);
        c.positive("model.seq_len", m.seq_len);
        c.positive("model.d_model", m.d_model);
        c.positive("model.hidden", m.hidden);
        c.positive("model.vocab_size", m.vocab_size);

        let g = &self.gate;
        c.positive("gate.num_experts", g.num_experts);
        c.positive("gate.k", g.k);
        c.positive_f("gate.capacity_factor", g.capacity_factor);
        c.positive("gate.num_prototypes", g.num_prototypes);
        c.positive("gate.num_groups", g.num_groups);
        c.positive_f("gate.temperature", g.temperature);

        let k = &self.cluster;
        c.positive("cluster.nodes", k.nodes);
        c.positive("cluster.devices_per_node", k.devices_per_node);
        c.non_negative_f("cluster.intra_alpha", k.intra_alpha);
        c.positive_f("cluster.intra_beta", k.intra_beta);
        c.non_negative_f("cluster.inter_alpha", k.inter_alpha);
        c.positive_f("cluster.inter_beta", k.inter_beta);
        c.positive_f("cluster.reorder_beta", k.reorder_beta);
        c.positive_f("cluster.device_flops", k.device_flops);

        let s = &self.sweep;
        c.axis("sweep.num_tokens", &s.num_tokens, |v| v > 0, "at least 1");
        c.axis("sweep.num_experts", &s.num_experts, |v| v > 0, "at least 1");
        c.axis("sweep.batch_sizes", &s.batch_sizes, |v| v > 0, "at least 1");
        c.axis("sweep.nodes", &s.nodes, |v| v > 0, "at least 1");
        c.axis(
            "sweep.devices_per_node",
            &s.devices_per_node,
            |v| v > 0,
            "at least 1",
        );
        c.axis(
            "sweep.payload_bytes",
            &s.payload_bytes,
            |v| v > 0,
            "at least 1",
        );
        c.axis(
            "sweep.temperatures",
            &s.temperatures,
            |v: f64| v.is_finite() && v > 0.0,
            "a positive finite number",
        );
        if self.bench.verify_chunk_bytes == 0 {
            c.fail("bench.verify_chunk_bytes", "must be at least 1");
        }

        // Gate requirements against the layer's expert count and every swept one.
        let mut experts = vec![("gate.num_experts", g.num_experts)];
        experts.extend(s.num_experts.iter().map(|&e| ("sweep.num_experts", e)));
        for (field, e) in experts {
            if e == 0 || g.k == 0 || g.num_prototypes == 0 || g.num_groups == 0 {
                continue;
            }
            if matches!(g.kind, GateKind::Topk | GateKind::Hierarchical) && g.k > e {
                c.fail("gate.k", format!("k = {} exceeds {field} = {e}", g.k));
            }
            if g.kind == GateKind::Ktop1 && e % g.num_prototypes != 0 {
                c.fail(
                    "gate.num_prototypes",
                    format!(
                        "{} prototypes do not divide {field} = {e}",
                        g.num_prototypes
                    ),
                );
            }
            if g.kind == GateKind::Hierarchical {
                if e % g.num_groups != 0 {
                    c.fail(
                        "gate.num_groups",
                        format!("{} groups do not divide {field} = {e}", g.num_groups),
                    );
                } else if g.k > e / g.num_groups {
                    c.fail(
                        "gate.k",
                        format!(
                            "k = {} exceeds the group size {} at {field} = {e}",
                            g.k,
                            e / g.num_groups
                        ),
                    );
                }
            }
        }
        if g.kind == GateKind::Base {
            let min_s = s.num_tokens.iter().copied().min().unwrap_or(0);
            if let Some(&e) = s.num_experts.iter().max() {
                if min_s > 0 && e > min_s {
                    c.fail(
                        "sweep.num_experts",
                        format!("base gate needs E <= S, got E = {e}, S = {min_s}"),
                    );
                }
            }
            let min_batch = s.batch_sizes.iter().copied().min().unwrap_or(0) * m.seq_len;
            if min_batch > 0 && g.num_experts > min_batch {
                c.fail(
                    "gate.num_experts",
                    format!(
                        "base gate needs E <= S, got E = {} with S = {min_batch}",
                        g.num_experts
                    ),
                );
            }
        }

        let p = k.nodes * k.devices_per_node;
        if p > 0 && m.seq_len > 0 {
            for &b in &s.batch_sizes {
                if b > 0 && !(b * m.seq_len).is_multiple_of(p) {
                    c.fail(
                        "sweep.batch_sizes",
                        format!(
                            "{b} x seq_len {} tokens do not split over {p} devices",
                            m.seq_len
                        ),
                    );
                    break;
                }
            }
        }
        'split: for &n in &s.nodes {
            for &gpn in &s.devices_per_node {
                let p = (n * gpn) as u64;
                if p == 0 {
                    continue;
                }
                if let Some(&b) = s.payload_bytes.iter().find(|&&b| b % p != 0) {
                    c.fail(
                        "sweep.payload_bytes",
                        format!("{b} bytes do not split evenly over {n} x {gpn} devices"),
                    );
                    break 'split;
                }
            }
        }

        if c.0.is_empty() {
            Ok(())
        } else {
            Err(CliError::Config(c.0))
        }
    }

    pub fn gate_config(&self, num_experts: usize, temperature: f64, seed: u64) -> GateConfig {
        GateConfig {
            num_experts,
            k: self.gate.k,
            capacity_factor: self.gate.capacity_factor,
            num_prototypes: self.gate.num_prototypes,
            num_groups: self.gate.num_groups,
            temperature,
            seed,
        }
    }

    pub fn cluster_spec(&self, nodes: usize, devices_per_node: usize) -> ClusterSpec {
        let c = &self.cluster;
        ClusterSpec {
            nodes,
            devices_per_node,
            intra_alpha: c.intra_alpha,
            intra_beta: c.intra_beta,
            inter_alpha: c.inter_alpha,
            inter_beta: c.inter_beta,
            reorder_beta: c.reorder_beta,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fields(text: &str) -> Vec<String> {
        match ExperimentConfig::from_toml(text) {
            Err(CliError::Config(errs)) => errs.into_iter().map(|e| e.field).collect(),
            other => panic!("expected a config error, got {other:?}"),
        }
    }

    #[test]
    fn empty_file_is_the_default() {
        assert_eq!(
            ExperimentConfig::from_toml("").unwrap(),
            ExperimentConfig::default()
        );
    }

    #[test]
    fn names_each_bad_field() {
        let f =
            fields("[model]\nd_model = 0\n[gate]\ncapacity_factor = -1.0\n[sweep]\nnodes = []\n");
        assert_eq!(f, ["model.d_model", "gate.capacity_factor", "sweep.nodes"]);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let f = fields("[gate]\nexperts = 4\n");
        assert_eq!(f, ["config"]);
    }

    #[test]
    fn gate_requirements_checked_against_sweep() {
        let f =
            fields("[gate]\nkind = \"ktop1\"\nnum_prototypes = 4\n[sweep]\nnum_experts = [2, 8]\n");
        assert_eq!(f, ["gate.num_prototypes"]);
        let f = fields("[gate]\nk = 4\n[sweep]\nnum_experts = [2]\n");
        assert_eq!(f, ["gate.k"]);
    }

    #[test]
    fn payload_must_split() {
        let f = fields("[sweep]\nnodes = [3]\ndevices_per_node = [1]\npayload_bytes = [16]\n");
        assert_eq!(f, ["sweep.payload_bytes"]);
    }
}
