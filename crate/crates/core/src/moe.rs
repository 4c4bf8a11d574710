//! End-to-end forward pass of one MoE layer on the simulated cluster.
//!
//! Tokens are split evenly over the `N * G` devices. Routing is decided over
//! the whole batch, so capacity and balanced assignment see every token no
//! matter how many devices there are. Each device then lays out its tokens by
//! expert, ships them to the experts' home devices with an AllToAll, the
//! experts run, a second AllToAll brings the results back, and the reverse
//! layout transform combines them with the gate weights.

use crate::error::{Error, Result};
use crate::gates::{ConfiguredGate, Gate, GateDecision, TokenBatch};
use crate::layout::{layout_transform, reverse_layout_transform, Permutation};
use crate::netsim::{
    hierarchical_alltoall, vanilla_alltoall, Chunk, ClusterSpec, DeviceBuffers, TimingReport,
};
use crate::tensor::{matmul, relu, Matrix};

/// Device compute rate used when none is given (10 TFLOP/s).
pub const DEFAULT_DEVICE_FLOPS: f64 = 10e12;

#[derive(Debug, Clone, PartialEq)]
pub struct ExpertParams {
    /// `d x h`.
    pub w1: Matrix,
    /// `h x d`.
    pub w2: Matrix,
    pub home_device: usize,
}

impl ExpertParams {
    pub fn new(w1: Matrix, w2: Matrix, home_device: usize) -> Result<Self> {
        if w1.cols() != w2.rows() || w1.rows() != w2.cols() {
            return Err(Error::Shape {
                op: "expert_params",
                left: w1.shape(),
                right: w2.shape(),
            });
        }
        Ok(Self {
            w1,
            w2,
            home_device,
        })
    }

    pub fn model_dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w1.cols()
    }
}

/// Places expert `i` on device `i mod devices`.
pub fn place_round_robin(experts: &mut [ExpertParams], devices: usize) {
    for (i, e) in experts.iter_mut().enumerate() {
        e.home_device = i % devices;
    }
}

/// `relu(x . W1) . W2`
pub fn expert_ffn(x: &Matrix, p: &ExpertParams) -> Result<Matrix> {
    if x.cols() != p.model_dim() {
        return Err(Error::Shape {
            op: "expert_ffn",
            left: x.shape(),
            right: p.w1.shape(),
        });
    }
    matmul(&relu(&matmul(x, &p.w1)?), &p.w2)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Collective {
    Vanilla,
    Hierarchical,
}

impl Collective {
    pub fn run(
        self,
        bufs: DeviceBuffers,
        spec: &ClusterSpec,
    ) -> Result<(DeviceBuffers, TimingReport)> {
        match self {
            Collective::Vanilla => vanilla_alltoall(bufs, spec),
            Collective::Hierarchical => hierarchical_alltoall(bufs, spec),
        }
    }
}

/// Modeled seconds for every step of the layer.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MoeTiming {
    pub gate: f64,
    pub layout: f64,
    pub dispatch: TimingReport,
    pub expert: f64,
    pub gather_back: TimingReport,
    pub combine: f64,
    pub total: f64,
}

impl MoeTiming {
    /// Both AllToAll collectives together.
    pub fn alltoall(&self) -> f64 {
        self.dispatch.total + self.gather_back.total
    }

    /// `(gate, layout, alltoall, expert, combine)` as fractions of the total.
    pub fn shares(&self) -> [f64; 5] {
        let parts = [
            self.gate,
            self.layout,
            self.alltoall(),
            self.expert,
            self.combine,
        ];
        if self.total > 0.0 {
            parts.map(|p| p / self.total)
        } else {
            [0.0; 5]
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeOutput {
    pub y: Matrix,
    pub timing: MoeTiming,
    /// Tokens with every slot dropped; their output rows are zero.
    pub drop_count: usize,
    pub decision: GateDecision,
}

pub fn moe_forward(
    x: &TokenBatch,
    gate: &ConfiguredGate,
    experts: &[ExpertParams],
    spec: &ClusterSpec,
    collective: Collective,
) -> Result<MoeOutput> {
    moe_forward_with_flops(x, gate, experts, spec, collective, DEFAULT_DEVICE_FLOPS)
}

pub fn moe_forward_with_flops(
    x: &TokenBatch,
    gate: &ConfiguredGate,
    experts: &[ExpertParams],
    spec: &ClusterSpec,
    collective: Collective,
    device_flops: f64,
) -> Result<MoeOutput> {
    spec.validate()?;
    if !(device_flops.is_finite() && device_flops > 0.0) {
        return Err(Error::invalid("device_flops", "must be positive"));
    }
    let p = spec.num_devices();
    let (s, d) = x.x.shape();
    if s % p != 0 {
        return Err(Error::invalid(
            "num_tokens",
            format!("{s} tokens do not split evenly over {p} devices"),
        ));
    }
    if experts.len() != gate.config.num_experts {
        return Err(Error::invalid(
            "experts",
            format!(
                "{} experts for a gate over {}",
                experts.len(),
                gate.config.num_experts
            ),
        ));
    }
    for (i, e) in experts.iter().enumerate() {
        if e.home_device >= p {
            return Err(Error::invalid(
                "home_device",
                format!("expert {i} lives on device {} of {p}", e.home_device),
            ));
        }
        if e.model_dim() != d || e.w2.shape() != (e.hidden_dim(), d) {
            return Err(Error::Shape {
                op: "moe_forward",
                left: x.x.shape(),
                right: e.w1.shape(),
            });
        }
    }

    // Step 1: routing over the whole batch.
    let decision = gate.route(x)?;
    if decision.num_experts() != experts.len() || decision.num_tokens() != s {
        return Err(Error::invalid(
            "gate",
            "decision does not match experts or batch",
        ));
    }
    let local = s / p;
    let hosted: Vec<Vec<usize>> = (0..p)
        .map(|dev| {
            (0..experts.len())
                .filter(|&e| experts[e].home_device == dev)
                .collect()
        })
        .collect();

    // Step 2: per-device layout transform.
    let mut local_decisions = Vec::with_capacity(p);
    let mut perms: Vec<Permutation> = Vec::with_capacity(p);
    let mut outgoing = Vec::with_capacity(p);
    for dev in 0..p {
        let dec = decision.slice_tokens(dev * local, (dev + 1) * local)?;
        let xs = x.x.row_range(dev * local, (dev + 1) * local)?;
        let (buf, perm) = layout_transform(&xs, &dec)?;
        let chunks = (0..p)
            .map(|dst| Chunk {
                dst,
                payload: encode_sections(&buf, &perm, &hosted[dst]),
            })
            .collect();
        outgoing.push(chunks);
        local_decisions.push(dec);
        perms.push(perm);
    }

    // Step 3: dispatch.
    let (arrived, dispatch) = collective.run(DeviceBuffers { devices: outgoing }, spec)?;

    // Step 4: experts run on their home devices.
    let mut replies = Vec::with_capacity(p);
    let mut expert_rows = vec![0usize; p];
    for (dev, chunks) in arrived.devices.into_iter().enumerate() {
        let per_source = chunks
            .iter()
            .map(|c| decode_sections(&c.payload, hosted[dev].len(), d))
            .collect::<Result<Vec<_>>>()?;
        // outputs[src][j] = output rows for hosted expert j from source src
        let mut outputs: Vec<Vec<Matrix>> = vec![Vec::with_capacity(hosted[dev].len()); p];
        for (j, &e) in hosted[dev].iter().enumerate() {
            let parts: Vec<Matrix> = per_source.iter().map(|secs| secs[j].clone()).collect();
            let input = Matrix::vstack(d, &parts)?;
            expert_rows[dev] += input.rows();
            let out = expert_ffn(&input, &experts[e])?;
            let mut start = 0;
            for (src, part) in parts.iter().enumerate() {
                outputs[src].push(out.row_range(start, start + part.rows())?);
                start += part.rows();
            }
        }
        let chunks = outputs
            .into_iter()
            .enumerate()
            .map(|(src, secs)| Chunk {
                dst: src,
                payload: encode_matrices(&secs, d),
            })
            .collect();
        replies.push(chunks);
    }

    // Step 5: results travel back.
    let (returned, gather_back) = collective.run(DeviceBuffers { devices: replies }, spec)?;

    // Step 6: reverse layout and weighted combine.
    let mut y_parts = Vec::with_capacity(p);
    for (dev, chunks) in returned.devices.into_iter().enumerate() {
        let perm = &perms[dev];
        let mut rows = vec![0.0; perm.len() * d];
        for (home, c) in chunks.iter().enumerate() {
            let secs = decode_sections(&c.payload, hosted[home].len(), d)?;
            for (sec, &e) in secs.iter().zip(&hosted[home]) {
                let span = perm.expert_rows(e);
                if sec.rows() != span.len() {
                    return Err(Error::MalformedBuffers(format!(
                        "expert {e} returned {} rows to device {dev}, expected {}",
                        sec.rows(),
                        span.len()
                    )));
                }
                rows[span.start * d..span.end * d].copy_from_slice(sec.as_slice());
            }
        }
        let ybuf = Matrix::from_vec(perm.len(), d, rows)?;
        y_parts.push(reverse_layout_transform(
            &ybuf,
            perm,
            &local_decisions[dev],
            local,
        )?);
    }
    let y = Matrix::vstack(d, &y_parts)?;

    let h = experts.first().map_or(0, ExpertParams::hidden_dim);
    let row_bytes = (d * std::mem::size_of::<f64>()) as f64;
    let max_layout_rows = perms.iter().map(Permutation::len).max().unwrap_or(0) as f64;
    let gate_time = gate_flops_per_token(&gate.gate, d) * local as f64 / device_flops;
    let layout = max_layout_rows * row_bytes / spec.reorder_beta;
    let expert = expert_rows
        .iter()
        .map(|&r| 4.0 * (r * d * h) as f64 / device_flops)
        .fold(0.0, f64::max);
    let combine = layout;
    let timing = MoeTiming {
        gate: gate_time,
        layout,
        dispatch,
        expert,
        gather_back,
        combine,
        total: gate_time + layout + dispatch.total + expert + gather_back.total + combine,
    };

    Ok(MoeOutput {
        drop_count: decision.fully_dropped_count(),
        y,
        timing,
        decision,
    })
}

/// Multiply-adds of the gate's logit projections, counted as two flops each.
fn gate_flops_per_token(gate: &Gate, d: usize) -> f64 {
    let cols = match gate {
        Gate::TopK { weights } | Gate::Base { weights } | Gate::DenseToSparse { weights, .. } => {
            weights.cols()
        }
        Gate::KTop1 { prototypes } => prototypes.iter().map(Matrix::cols).sum(),
        Gate::Hierarchical { group, expert } => group.cols() + expert.cols(),
        Gate::Hash { .. } => 0,
    };
    2.0 * (d * cols) as f64
}

/// Wire format of one chunk: a little-endian `u64` row count per section,
/// followed by the sections' rows as little-endian `f64`s.
fn encode_matrices(sections: &[Matrix], d: usize) -> Vec<u8> {
    let rows: usize = sections.iter().map(Matrix::rows).sum();
    let mut out = Vec::with_capacity(8 * sections.len() + rows * d * 8);
    for m in sections {
        out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    }
    for m in sections {
        for v in m.as_slice() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn encode_sections(buf: &Matrix, perm: &Permutation, experts: &[usize]) -> Vec<u8> {
    let d = buf.cols();
    let sections: Vec<Matrix> = experts
        .iter()
        .map(|&e| {
            let r = perm.expert_rows(e);
            Matrix::from_parts_unchecked(
                r.len(),
                d,
                buf.as_slice()[r.start * d..r.end * d].to_vec(),
            )
        })
        .collect();
    encode_matrices(&sections, d)
}

fn decode_sections(payload: &[u8], sections: usize, d: usize) -> Result<Vec<Matrix>> {
    let malformed =
        || Error::MalformedBuffers(format!("chunk of {} bytes is truncated", payload.len()));
    let header = payload.get(..8 * sections).ok_or_else(malformed)?;
    let counts: Vec<usize> = header
        .chunks_exact(8)
        .map(|b| u64::from_le_bytes(b.try_into().unwrap()) as usize)
        .collect();
    let mut values = payload[8 * sections..]
        .chunks_exact(8)
        .map(|b| f64::from_le_bytes(b.try_into().unwrap()));
    let total: usize = counts.iter().sum();
    if payload.len() != 8 * sections + total * d * 8 {
        return Err(malformed());
    }
    counts
        .into_iter()
        .map(|rows| Matrix::from_vec(rows, d, values.by_ref().take(rows * d).collect()))
        .collect()
}
