use super::ClusterSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PhaseKind {
    /// Direct device-to-device exchange within nodes.
    IntraAllToAll,
    /// Transfers that cross nodes (through the NICs).
    InterAllToAll,
    /// Non-leader devices send their data to the node leader.
    Gather,
    /// On-device reordering of buffered data.
    LocalTransform,
    /// Leader sends each device its share.
    Scatter,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transfer {
    pub src: usize,
    pub dst: usize,
    pub bytes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Phase {
    pub kind: PhaseKind,
    pub transfers: Vec<Transfer>,
    /// `(device, bytes)` reordered locally.
    pub reorders: Vec<(usize, u64)>,
}

impl Phase {
    pub fn transfers(kind: PhaseKind, transfers: Vec<Transfer>) -> Self {
        Self {
            kind,
            transfers,
            reorders: Vec::new(),
        }
    }

    pub fn reorder(reorders: Vec<(usize, u64)>) -> Self {
        Self {
            kind: PhaseKind::LocalTransform,
            transfers: Vec::new(),
            reorders,
        }
    }

    /// Bulk-synchronous duration: the busiest device or NIC.
    pub fn duration(&self, spec: &ClusterSpec) -> f64 {
        let mut device = vec![0.0f64; spec.num_devices()];
        let mut nic = vec![0.0f64; spec.nodes];
        for t in &self.transfers {
            if t.src == t.dst {
                continue;
            }
            let (a, b) = (spec.node_of(t.src), spec.node_of(t.dst));
            if a == b {
                let cost = spec.intra_alpha + t.bytes as f64 / spec.intra_beta;
                device[t.src] += cost;
                device[t.dst] += cost;
            } else {
                let cost = spec.inter_alpha + t.bytes as f64 / spec.inter_beta;
                nic[a] += cost;
                nic[b] += cost;
            }
        }
        for &(d, bytes) in &self.reorders {
            device[d] += bytes as f64 / spec.reorder_beta;
        }
        device.into_iter().chain(nic).fold(0.0, f64::max)
    }
}

/// Ordered phases of one collective.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CommSchedule {
    pub phases: Vec<Phase>,
}

impl CommSchedule {
    pub fn messages(&self) -> impl Iterator<Item = &Transfer> + '_ {
        self.phases.iter().flat_map(|p| p.transfers.iter())
    }

    pub fn cost(&self, spec: &ClusterSpec) -> TimingReport {
        let mut r = TimingReport::default();
        for p in &self.phases {
            let t = p.duration(spec);
            match p.kind {
                PhaseKind::IntraAllToAll => r.intra_alltoall += t,
                PhaseKind::InterAllToAll => r.inter_alltoall += t,
                PhaseKind::Gather => r.gather += t,
                PhaseKind::LocalTransform => r.local_transform += t,
                PhaseKind::Scatter => r.scatter += t,
            }
        }
        r.total = r.intra_alltoall + r.gather + r.local_transform + r.inter_alltoall + r.scatter;
        r.messages = MessageStats::from_sizes(self.messages().map(|t| t.bytes));
        r.inter_node = MessageStats::from_sizes(
            self.messages()
                .filter(|t| spec.node_of(t.src) != spec.node_of(t.dst))
                .map(|t| t.bytes),
        );
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MessageStats {
    pub count: usize,
    pub min_bytes: u64,
    pub max_bytes: u64,
    pub mean_bytes: f64,
}

impl MessageStats {
    pub fn from_sizes(sizes: impl Iterator<Item = u64>) -> Self {
        let mut s = MessageStats {
            min_bytes: u64::MAX,
            ..Default::default()
        };
        let mut total = 0u128;
        for b in sizes {
            s.count += 1;
            s.min_bytes = s.min_bytes.min(b);
            s.max_bytes = s.max_bytes.max(b);
            total += u128::from(b);
        }
        if s.count == 0 {
            s.min_bytes = 0;
        } else {
            s.mean_bytes = total as f64 / s.count as f64;
        }
        s
    }
}

/// Modeled seconds per collective phase.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TimingReport {
    pub intra_alltoall: f64,
    pub gather: f64,
    pub local_transform: f64,
    pub inter_alltoall: f64,
    pub scatter: f64,
    pub total: f64,
    /// Every message issued, including a device's message to itself.
    pub messages: MessageStats,
    /// Messages whose endpoints sit on different nodes.
    pub inter_node: MessageStats,
}
