use crate::error::{Error, Result};

use super::schedule::{CommSchedule, Phase, PhaseKind, TimingReport, Transfer};
use super::{Chunk, ClusterSpec, DeviceBuffers};

/// Schedule of a flat AllToAll: every device messages every device directly.
/// Same-node messages form the intra phase, cross-node ones the inter phase.
pub fn vanilla_schedule(spec: &ClusterSpec, sizes: &[Vec<u64>]) -> CommSchedule {
    let p = spec.num_devices();
    let mut intra = Vec::new();
    let mut inter = Vec::new();
    for src in 0..p {
        for dst in 0..p {
            let t = Transfer {
                src,
                dst,
                bytes: sizes[src][dst],
            };
            if spec.node_of(src) == spec.node_of(dst) {
                intra.push(t);
            } else {
                inter.push(t);
            }
        }
    }
    CommSchedule {
        phases: vec![
            Phase::transfers(PhaseKind::IntraAllToAll, intra),
            Phase::transfers(PhaseKind::InterAllToAll, inter),
        ],
    }
}

/// Schedule of the two-level AllToAll: gather to each node leader, reorder by
/// destination node, leader-to-leader exchange of one aggregated message per
/// node pair, reorder by destination device, scatter. A single node needs only
/// the gather and the scatter.
pub fn hierarchical_schedule(spec: &ClusterSpec, sizes: &[Vec<u64>]) -> CommSchedule {
    let (n, g) = (spec.nodes, spec.devices_per_node);
    let p = spec.num_devices();
    let sent_by = |d: usize| -> u64 { sizes[d].iter().sum() };
    let received_by = |d: usize| -> u64 { (0..p).map(|s| sizes[s][d]).sum() };
    let node_to_node = |a: usize, b: usize| -> u64 {
        (0..g)
            .flat_map(|i| (0..g).map(move |j| (i, j)))
            .map(|(i, j)| sizes[spec.device(a, i)][spec.device(b, j)])
            .sum()
    };

    let mut gather = Vec::new();
    let mut scatter = Vec::new();
    for node in 0..n {
        let leader = spec.leader(node);
        for r in 1..g {
            let d = spec.device(node, r);
            gather.push(Transfer {
                src: d,
                dst: leader,
                bytes: sent_by(d),
            });
            scatter.push(Transfer {
                src: leader,
                dst: d,
                bytes: received_by(d),
            });
        }
    }
    if n == 1 {
        // Nothing leaves the node: the leader only relays.
        return CommSchedule {
            phases: vec![
                Phase::transfers(PhaseKind::Gather, gather),
                Phase::transfers(PhaseKind::Scatter, scatter),
            ],
        };
    }
    let pack = (0..n)
        .map(|node| {
            let bytes = (0..g).map(|r| sent_by(spec.device(node, r))).sum();
            (spec.leader(node), bytes)
        })
        .collect();
    let unpack = (0..n)
        .map(|node| {
            let bytes = (0..g).map(|r| received_by(spec.device(node, r))).sum();
            (spec.leader(node), bytes)
        })
        .collect();
    let mut exchange = Vec::with_capacity(n * n);
    for a in 0..n {
        for b in 0..n {
            exchange.push(Transfer {
                src: spec.leader(a),
                dst: spec.leader(b),
                bytes: node_to_node(a, b),
            });
        }
    }

    CommSchedule {
        phases: vec![
            Phase::transfers(PhaseKind::Gather, gather),
            Phase::reorder(pack),
            Phase::transfers(PhaseKind::InterAllToAll, exchange),
            Phase::reorder(unpack),
            Phase::transfers(PhaseKind::Scatter, scatter),
        ],
    }
}

/// Takes every chunk out of `bufs` into a `[src][dst]` table.
fn route_table(bufs: DeviceBuffers, p: usize) -> Vec<Vec<Option<Vec<u8>>>> {
    let mut table: Vec<Vec<Option<Vec<u8>>>> = vec![vec![None; p]; p];
    for (src, chunks) in bufs.devices.into_iter().enumerate() {
        for c in chunks {
            table[src][c.dst] = Some(c.payload);
        }
    }
    table
}

/// Flat AllToAll. Device `d` ends up with the chunks addressed to it, in
/// ascending source order.
pub fn vanilla_alltoall(
    bufs: DeviceBuffers,
    spec: &ClusterSpec,
) -> Result<(DeviceBuffers, TimingReport)> {
    spec.validate()?;
    let p = spec.num_devices();
    let sizes = bufs.size_matrix(p)?;
    let mut table = route_table(bufs, p);
    let devices = (0..p)
        .map(|dst| {
            (0..p)
                .map(|src| Chunk {
                    dst,
                    payload: table[src][dst].take().expect("validated chunk"),
                })
                .collect()
        })
        .collect();
    let timing = vanilla_schedule(spec, &sizes).cost(spec);
    Ok((DeviceBuffers { devices }, timing))
}

/// A chunk in flight, remembering where it started.
struct Tagged {
    src: usize,
    chunk: Chunk,
}

/// Two-level AllToAll through one leader device per node. Delivers exactly
/// what [`vanilla_alltoall`] delivers, in the same order.
pub fn hierarchical_alltoall(
    bufs: DeviceBuffers,
    spec: &ClusterSpec,
) -> Result<(DeviceBuffers, TimingReport)> {
    spec.validate()?;
    let (n, g) = (spec.nodes, spec.devices_per_node);
    let p = spec.num_devices();
    let sizes = bufs.size_matrix(p)?;

    // (1) gather: the leader collects the chunks of its node in local-rank order.
    let mut leader_bufs: Vec<Vec<Tagged>> = (0..n).map(|_| Vec::new()).collect();
    for (src, chunks) in bufs.devices.into_iter().enumerate() {
        let node = spec.node_of(src);
        leader_bufs[node].extend(chunks.into_iter().map(|chunk| Tagged { src, chunk }));
    }

    // (2) reorder by destination node into one outgoing message per node.
    let mut outgoing: Vec<Vec<Vec<Tagged>>> = (0..n)
        .map(|_| (0..n).map(|_| Vec::new()).collect())
        .collect();
    for (node, held) in leader_bufs.into_iter().enumerate() {
        for t in held {
            let dst_node = spec.node_of(t.chunk.dst);
            outgoing[node][dst_node].push(t);
        }
        for msg in &mut outgoing[node] {
            msg.sort_by_key(|t| (t.src, t.chunk.dst));
        }
    }

    // (3) leader-to-leader exchange; node b receives from nodes 0..n in order.
    let mut incoming: Vec<Vec<Tagged>> = (0..n).map(|_| Vec::new()).collect();
    for msgs in outgoing {
        for (dst_node, msg) in msgs.into_iter().enumerate() {
            incoming[dst_node].extend(msg);
        }
    }

    // (4) reorder by destination device, ascending source within a device.
    let mut devices: Vec<Vec<Chunk>> = (0..p).map(|_| Vec::with_capacity(p)).collect();
    for (node, held) in incoming.into_iter().enumerate() {
        let mut per_device: Vec<Vec<Tagged>> = (0..g).map(|_| Vec::new()).collect();
        for t in held {
            if spec.node_of(t.chunk.dst) != node {
                return Err(Error::MalformedBuffers(format!(
                    "chunk for device {} reached node {node}",
                    t.chunk.dst
                )));
            }
            per_device[t.chunk.dst % g].push(t);
        }
        // (5) scatter to the owning devices.
        for (r, mut list) in per_device.into_iter().enumerate() {
            list.sort_by_key(|t| t.src);
            devices[spec.device(node, r)] = list.into_iter().map(|t| t.chunk).collect();
        }
    }

    let timing = hierarchical_schedule(spec, &sizes).cost(spec);
    Ok((DeviceBuffers { devices }, timing))
}

/// Size matrix with `per_device_bytes` split evenly over all destinations.
pub fn uniform_sizes(spec: &ClusterSpec, per_device_bytes: u64) -> Result<Vec<Vec<u64>>> {
    let p = spec.num_devices() as u64;
    if !per_device_bytes.is_multiple_of(p) {
        return Err(Error::invalid(
            "per_device_bytes",
            format!("{per_device_bytes} bytes do not split evenly over {p} devices"),
        ));
    }
    let each = per_device_bytes / p;
    Ok(vec![vec![each; p as usize]; p as usize])
}

#[derive(Debug, Clone, PartialEq)]
pub struct Speedup {
    pub vanilla: TimingReport,
    pub hierarchical: TimingReport,
    /// `vanilla.total / hierarchical.total`, or 1 when both are free.
    pub ratio: f64,
}

/// Prices both collectives for a uniform payload of `per_device_bytes` per
/// device. Only sizes matter to the cost model, so no payload is materialised.
pub fn estimate_speedup(spec: &ClusterSpec, per_device_bytes: u64) -> Result<Speedup> {
    spec.validate()?;
    let sizes = uniform_sizes(spec, per_device_bytes)?;
    let vanilla = vanilla_schedule(spec, &sizes).cost(spec);
    let hierarchical = hierarchical_schedule(spec, &sizes).cost(spec);
    let ratio = if vanilla.total == 0.0 && hierarchical.total == 0.0 {
        1.0
    } else {
        vanilla.total / hierarchical.total
    };
    Ok(Speedup {
        ratio,
        vanilla,
        hierarchical,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tagged_buffers(p: usize) -> DeviceBuffers {
        DeviceBuffers::from_fn(p, |s, d| vec![s as u8, d as u8, (s * d) as u8])
    }

    #[test]
    fn single_device_is_identity() {
        let spec = ClusterSpec::commodity(1, 1);
        let input = tagged_buffers(1);
        let (out, t) = vanilla_alltoall(input.clone(), &spec).unwrap();
        assert_eq!(out, input);
        assert_eq!(t.inter_alltoall, 0.0);
        assert_eq!(t.total, 0.0);
    }

    #[test]
    fn vanilla_delivers_by_source() {
        let spec = ClusterSpec::commodity(2, 2);
        let (out, _) = vanilla_alltoall(tagged_buffers(4), &spec).unwrap();
        for (d, chunks) in out.devices.iter().enumerate() {
            for (s, c) in chunks.iter().enumerate() {
                assert_eq!(c.dst, d);
                assert_eq!(c.payload[..2], [s as u8, d as u8]);
            }
        }
    }

    #[test]
    fn chunk_order_on_input_does_not_matter() {
        let spec = ClusterSpec::commodity(2, 2);
        let mut shuffled = tagged_buffers(4);
        for chunks in &mut shuffled.devices {
            chunks.reverse();
        }
        let (a, _) = vanilla_alltoall(tagged_buffers(4), &spec).unwrap();
        let (b, _) = hierarchical_alltoall(shuffled, &spec).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn single_node_hierarchy_has_no_inter_traffic() {
        let spec = ClusterSpec::commodity(1, 4);
        let (a, _) = vanilla_alltoall(tagged_buffers(4), &spec).unwrap();
        let (b, t) = hierarchical_alltoall(tagged_buffers(4), &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(t.inter_alltoall, 0.0);
        assert_eq!(t.inter_node.count, 0);
        assert!(t.gather > 0.0 && t.scatter > 0.0);
    }

    #[test]
    fn malformed_input_rejected() {
        let spec = ClusterSpec::commodity(2, 1);
        let mut b = tagged_buffers(2);
        b.devices[0].pop();
        assert!(vanilla_alltoall(b.clone(), &spec).is_err());
        assert!(hierarchical_alltoall(b, &spec).is_err());
    }

    #[test]
    fn uniform_split_must_divide() {
        let spec = ClusterSpec::commodity(2, 2);
        assert!(uniform_sizes(&spec, 10).is_err());
        assert_eq!(uniform_sizes(&spec, 8).unwrap(), vec![vec![2; 4]; 4]);
    }
}
