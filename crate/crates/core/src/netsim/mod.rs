//! Simulated N-node x G-device cluster with a single NIC per node.
//!
//! Collectives move real bytes between per-device buffers and, separately,
//! emit a [`CommSchedule`] describing every message they issue. The schedule
//! is priced with an alpha-beta model:
//!
//! - a message between two devices of one node costs
//!   `intra_alpha + bytes / intra_beta` on both endpoint devices;
//! - a message between nodes costs `inter_alpha + bytes / inter_beta` on both
//!   endpoint NICs;
//! - a local reorder costs `bytes / reorder_beta` on the device doing it;
//! - a phase lasts as long as its busiest device or NIC, and phases run one
//!   after the other.

mod alltoall;
mod schedule;

pub use alltoall::{
    estimate_speedup, hierarchical_alltoall, hierarchical_schedule, uniform_sizes,
    vanilla_alltoall, vanilla_schedule, Speedup,
};
pub use schedule::{CommSchedule, MessageStats, Phase, PhaseKind, TimingReport, Transfer};

use crate::error::{Error, Result};

/// Local reorder bandwidth used unless configured otherwise (50 GB/s).
pub const DEFAULT_REORDER_BETA: f64 = 50e9;

#[derive(Debug, Clone, PartialEq)]
pub struct ClusterSpec {
    pub nodes: usize,
    pub devices_per_node: usize,
    /// Seconds per intra-node message.
    pub intra_alpha: f64,
    /// Intra-node bytes per second.
    pub intra_beta: f64,
    /// Seconds per inter-node message.
    pub inter_alpha: f64,
    /// Bytes per second through a node's NIC.
    pub inter_beta: f64,
    /// Bytes per second for on-device reorders.
    pub reorder_beta: f64,
}

impl ClusterSpec {
    pub fn new(
        nodes: usize,
        devices_per_node: usize,
        intra_alpha: f64,
        intra_beta: f64,
        inter_alpha: f64,
        inter_beta: f64,
    ) -> Result<Self> {
        let spec = Self {
            nodes,
            devices_per_node,
            intra_alpha,
            intra_beta,
            inter_alpha,
            inter_beta,
            reorder_beta: DEFAULT_REORDER_BETA,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// PCIe-class nodes (5 us, 16 GB/s) joined by a 100 Gbps NIC (30 us,
    /// 12.5 GB/s).
    pub fn commodity(nodes: usize, devices_per_node: usize) -> Self {
        Self {
            nodes,
            devices_per_node,
            intra_alpha: 5e-6,
            intra_beta: 16e9,
            inter_alpha: 30e-6,
            inter_beta: 12.5e9,
            reorder_beta: DEFAULT_REORDER_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.nodes == 0 {
            return Err(Error::invalid("nodes", "must be at least 1"));
        }
        if self.devices_per_node == 0 {
            return Err(Error::invalid("devices_per_node", "must be at least 1"));
        }
        for (field, v) in [
            ("intra_beta", self.intra_beta),
            ("inter_beta", self.inter_beta),
            ("reorder_beta", self.reorder_beta),
        ] {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::invalid(field, format!("must be positive, got {v}")));
            }
        }
        for (field, v) in [
            ("intra_alpha", self.intra_alpha),
            ("inter_alpha", self.inter_alpha),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::invalid(
                    field,
                    format!("must be non-negative, got {v}"),
                ));
            }
        }
        Ok(())
    }

    pub fn num_devices(&self) -> usize {
        self.nodes * self.devices_per_node
    }

    pub fn node_of(&self, device: usize) -> usize {
        device / self.devices_per_node
    }

    pub fn device(&self, node: usize, local_rank: usize) -> usize {
        node * self.devices_per_node + local_rank
    }

    /// Local rank 0 aggregates for its node.
    pub fn leader(&self, node: usize) -> usize {
        self.device(node, 0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Chunk {
    pub dst: usize,
    pub payload: Vec<u8>,
}

/// Per-device lists of outgoing (or, after a collective, received) chunks.
///
/// After an AllToAll, device `d` holds one chunk per source, the `i`-th having
/// come from global device `i`.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DeviceBuffers {
    pub devices: Vec<Vec<Chunk>>,
}

impl DeviceBuffers {
    /// One chunk per (source, destination) pair, built by `payload(src, dst)`.
    pub fn from_fn(devices: usize, mut payload: impl FnMut(usize, usize) -> Vec<u8>) -> Self {
        Self {
            devices: (0..devices)
                .map(|src| {
                    (0..devices)
                        .map(|dst| Chunk {
                            dst,
                            payload: payload(src, dst),
                        })
                        .collect()
                })
                .collect(),
        }
    }

    pub fn total_bytes(&self) -> u64 {
        self.devices
            .iter()
            .flatten()
            .map(|c| c.payload.len() as u64)
            .sum()
    }

    /// `sizes[src][dst]` in bytes; checks one chunk per destination.
    pub fn size_matrix(&self, num_devices: usize) -> Result<Vec<Vec<u64>>> {
        if self.devices.len() != num_devices {
            return Err(Error::MalformedBuffers(format!(
                "{} device buffers for a cluster of {num_devices} devices",
                self.devices.len()
            )));
        }
        let mut sizes = vec![vec![0u64; num_devices]; num_devices];
        for (src, chunks) in self.devices.iter().enumerate() {
            let mut seen = vec![false; num_devices];
            for c in chunks {
                if c.dst >= num_devices {
                    return Err(Error::MalformedBuffers(format!(
                        "device {src} addresses a chunk to device {} of {num_devices}",
                        c.dst
                    )));
                }
                if std::mem::replace(&mut seen[c.dst], true) {
                    return Err(Error::MalformedBuffers(format!(
                        "device {src} holds two chunks for device {}",
                        c.dst
                    )));
                }
                sizes[src][c.dst] = c.payload.len() as u64;
            }
            if let Some(missing) = seen.iter().position(|s| !s) {
                return Err(Error::MalformedBuffers(format!(
                    "device {src} has no chunk for device {missing}"
                )));
            }
        }
        Ok(sizes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn spec_validation() {
        assert!(ClusterSpec::new(2, 4, 0.0, 1.0, 0.0, 1.0).is_ok());
        assert!(ClusterSpec::new(0, 4, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(ClusterSpec::new(1, 0, 0.0, 1.0, 0.0, 1.0).is_err());
        assert!(ClusterSpec::new(1, 1, 0.0, 0.0, 0.0, 1.0).is_err());
        assert!(ClusterSpec::new(1, 1, -1.0, 1.0, 0.0, 1.0).is_err());
        assert!(ClusterSpec::commodity(8, 8).validate().is_ok());
    }

    #[test]
    fn topology_helpers() {
        let s = ClusterSpec::commodity(3, 4);
        assert_eq!(s.num_devices(), 12);
        assert_eq!(s.node_of(7), 1);
        assert_eq!(s.device(2, 3), 11);
        assert_eq!(s.leader(2), 8);
    }

    #[test]
    fn malformed_buffers() {
        let mut b = DeviceBuffers::from_fn(2, |s, d| vec![s as u8, d as u8]);
        assert!(b.size_matrix(2).is_ok());
        assert!(b.size_matrix(3).is_err());
        b.devices[1][0].dst = 1;
        assert!(matches!(b.size_matrix(2), Err(Error::MalformedBuffers(_))));
        b.devices[1].pop();
        assert!(b.size_matrix(2).is_err());
        b.devices[0][1].dst = 5;
        assert!(b.size_matrix(2).is_err());
    }
}
