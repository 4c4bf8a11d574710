use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax, softmax_rows, Matrix};

use super::{apply_capacity, GateConfig, GateDecision};

/// Row-wise top-k: the `k` largest values of every row in descending order.
/// Equal values rank by lower column index first.
#[derive(Debug, Clone, PartialEq)]
pub struct TopK {
    pub k: usize,
    pub indices: Vec<usize>,
    pub values: Vec<f64>,
}

impl TopK {
    pub fn row_indices(&self, row: usize) -> &[usize] {
        &self.indices[row * self.k..(row + 1) * self.k]
    }

    pub fn row_values(&self, row: usize) -> &[f64] {
        &self.values[row * self.k..(row + 1) * self.k]
    }
}

pub fn topk_rows(scores: &Matrix, k: usize) -> Result<TopK> {
    if k == 0 || k > scores.cols() {
        return Err(Error::Shape {
            op: "topk_rows",
            left: scores.shape(),
            right: (k, scores.cols()),
        });
    }
    let n = scores.rows();
    let mut indices = Vec::with_capacity(n * k);
    let mut values = Vec::with_capacity(n * k);
    for row in scores.row_iter() {
        match k {
            1 => {
                let (i, v) = top1(row);
                indices.push(i);
                values.push(v);
            }
            2 => {
                let [(i0, v0), (i1, v1)] = top2(row);
                indices.extend([i0, i1]);
                values.extend([v0, v1]);
            }
            _ => {
                for (i, v) in topk_insertion(row, k) {
                    indices.push(i);
                    values.push(v);
                }
            }
        }
    }
    Ok(TopK { k, indices, values })
}

fn top1(row: &[f64]) -> (usize, f64) {
    let mut best = (0, row[0]);
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > best.1 {
            best = (i, v);
        }
    }
    best
}

fn top2(row: &[f64]) -> [(usize, f64); 2] {
    let mut first = (0, row[0]);
    let mut second = (1, row[1]);
    if second.1 > first.1 {
        std::mem::swap(&mut first, &mut second);
    }
    for (i, &v) in row.iter().enumerate().skip(2) {
        if v > first.1 {
            second = first;
            first = (i, v);
        } else if v > second.1 {
            second = (i, v);
        }
    }
    [first, second]
}

/// Keeps a descending buffer of at most `k` entries. Columns are visited in
/// ascending order, so an equal value always lands after the ones already kept.
fn topk_insertion(row: &[f64], k: usize) -> Vec<(usize, f64)> {
    let mut buf: Vec<(usize, f64)> = Vec::with_capacity(k + 1);
    for (i, &v) in row.iter().enumerate() {
        if buf.len() == k && v <= buf[k - 1].1 {
            continue;
        }
        let pos = buf.partition_point(|&(_, b)| b >= v);
        buf.insert(pos, (i, v));
        buf.truncate(k);
    }
    buf
}

fn check_gate_shapes(x: &Matrix, w: &Matrix, experts: usize, op: &'static str) -> Result<()> {
    if x.cols() != w.rows() || w.cols() != experts {
        return Err(Error::Shape {
            op,
            left: x.shape(),
            right: w.shape(),
        });
    }
    Ok(())
}

/// `softmax(TopK(x . W, k))` followed by the capacity limit.
pub fn topk_gate(x: &Matrix, w: &Matrix, cfg: &GateConfig) -> Result<GateDecision> {
    cfg.validate()?;
    check_gate_shapes(x, w, cfg.num_experts, "topk_gate")?;
    let logits = matmul(x, w)?;
    let top = topk_rows(&logits, cfg.k)?;
    let mut ids = Vec::with_capacity(top.indices.len());
    let mut weights = Vec::with_capacity(top.values.len());
    for t in 0..logits.rows() {
        ids.extend(top.row_indices(t).iter().map(|&e| Some(e)));
        weights.extend(softmax(top.row_values(t)));
    }
    let decision = GateDecision::new(cfg.num_experts, cfg.k, ids, weights)?;
    Ok(apply_capacity(decision, cfg.capacity_factor))
}

/// kTop1: experts split into `num_prototypes` contiguous slices, one top-1
/// decision per slice. Ids in each returned decision are local to its slice.
pub fn ktop1_gate(x: &Matrix, ws: &[Matrix], cfg: &GateConfig) -> Result<Vec<GateDecision>> {
    cfg.validate()?;
    let p = cfg.num_prototypes;
    if !cfg.num_experts.is_multiple_of(p) {
        return Err(Error::invalid(
            "num_prototypes",
            format!("{p} prototypes do not divide {} experts", cfg.num_experts),
        ));
    }
    if ws.len() != p {
        return Err(Error::invalid(
            "ws",
            format!("expected {p} prototype weight matrices, got {}", ws.len()),
        ));
    }
    let sub = GateConfig {
        num_experts: cfg.num_experts / p,
        k: 1,
        ..cfg.clone()
    };
    ws.iter().map(|w| topk_gate(x, w, &sub)).collect()
}

/// Two-level routing: pick the most probable expert group, then the top-k
/// experts inside it. Weights are the within-group softmax scaled by the group
/// probability and renormalised to sum to one.
pub fn hierarchical_topk_gate(
    x: &Matrix,
    w_group: &Matrix,
    w_expert: &Matrix,
    cfg: &GateConfig,
) -> Result<GateDecision> {
    cfg.validate()?;
    let (e, groups) = (cfg.num_experts, cfg.num_groups);
    if e % groups != 0 {
        return Err(Error::invalid(
            "num_groups",
            format!("{groups} groups do not divide {e} experts"),
        ));
    }
    let group_size = e / groups;
    if cfg.k > group_size {
        return Err(Error::invalid(
            "k",
            format!("k = {} exceeds group size {group_size}", cfg.k),
        ));
    }
    check_gate_shapes(x, w_group, groups, "hierarchical_topk_gate")?;
    check_gate_shapes(x, w_expert, e, "hierarchical_topk_gate")?;

    let group_probs = softmax_rows(&matmul(x, w_group)?)?;
    let chosen = topk_rows(&group_probs, 1)?;
    let logits = matmul(x, w_expert)?;

    let mut ids = Vec::with_capacity(x.rows() * cfg.k);
    let mut weights = Vec::with_capacity(x.rows() * cfg.k);
    for t in 0..x.rows() {
        let g = chosen.indices[t];
        let p_group = chosen.values[t];
        let lo = g * group_size;
        let slice = Matrix::from_parts_unchecked(
            1,
            group_size,
            logits.row(t)[lo..lo + group_size].to_vec(),
        );
        let top = topk_rows(&slice, cfg.k)?;
        let scaled: Vec<f64> = softmax(&top.values).iter().map(|w| w * p_group).collect();
        let total: f64 = scaled.iter().sum();
        ids.extend(top.indices.iter().map(|&i| Some(lo + i)));
        weights.extend(scaled.iter().map(|w| w / total));
    }
    let decision = GateDecision::new(e, cfg.k, ids, weights)?;
    Ok(apply_capacity(decision, cfg.capacity_factor))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-1.0..1.0)).unwrap()
    }

    fn full_sort(row: &[f64], k: usize) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..row.len()).collect();
        idx.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).unwrap().then(a.cmp(&b)));
        idx.truncate(k);
        idx
    }

    #[test]
    fn hand_cases() {
        let m = Matrix::from_rows(&[[3.0, 1.0, 2.0]]).unwrap();
        let t = topk_rows(&m, 1).unwrap();
        assert_eq!((t.indices[0], t.values[0]), (0, 3.0));

        let tie = Matrix::from_rows(&[[5.0, 5.0, 1.0]]).unwrap();
        assert_eq!(topk_rows(&tie, 2).unwrap().indices, vec![0, 1]);
        let tie = Matrix::from_rows(&[[1.0, 5.0, 5.0, 5.0]]).unwrap();
        assert_eq!(topk_rows(&tie, 2).unwrap().indices, vec![1, 2]);
        assert_eq!(topk_rows(&tie, 3).unwrap().indices, vec![1, 2, 3]);
    }

    #[test]
    fn k_larger_than_cols_is_shape_error() {
        let m = Matrix::zeros(2, 3);
        assert!(matches!(topk_rows(&m, 4), Err(Error::Shape { .. })));
        assert!(topk_rows(&m, 0).is_err());
    }

    #[test]
    fn matches_full_sort_with_ties() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        for _ in 0..50 {
            // Coarse values force plenty of ties.
            let m = Matrix::from_fn(64, 128, |_, _| rng.gen_range(0..8) as f64).unwrap();
            for k in [1, 2, 4] {
                let t = topk_rows(&m, k).unwrap();
                for r in 0..m.rows() {
                    assert_eq!(t.row_indices(r), full_sort(m.row(r), k).as_slice());
                }
            }
        }
    }

    #[test]
    fn specialised_paths_agree_with_general() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..200 {
            let cols = rng.gen_range(2..20);
            let row: Vec<f64> = (0..cols).map(|_| rng.gen_range(0..4) as f64).collect();
            assert_eq!(vec![top1(&row)], topk_insertion(&row, 1));
            assert_eq!(top2(&row).to_vec(), topk_insertion(&row, 2));
        }
    }

    #[test]
    fn single_expert_routes_everything_to_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(9, 4, &mut rng);
        let w = random(4, 1, &mut rng);
        let cfg = GateConfig {
            num_experts: 1,
            k: 1,
            capacity_factor: 1.0,
            ..GateConfig::default()
        };
        let d = topk_gate(&x, &w, &cfg).unwrap();
        assert!(d.expert_ids().iter().all(|id| *id == Some(0)));
        assert!(d.weights().iter().all(|w| *w == 1.0));
    }

    #[test]
    fn k_equal_e_reproduces_full_softmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random(10, 6, &mut rng);
        let w = random(6, 5, &mut rng);
        let cfg = GateConfig {
            num_experts: 5,
            k: 5,
            capacity_factor: 10.0,
            ..GateConfig::default()
        };
        let d = topk_gate(&x, &w, &cfg).unwrap();
        let full = softmax_rows(&matmul(&x, &w).unwrap()).unwrap();
        for t in 0..10 {
            for (id, wt) in d.token_experts(t).iter().zip(d.token_weights(t)) {
                assert!((full.get(t, id.unwrap()) - wt).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn gate_shape_mismatch() {
        let cfg = GateConfig {
            num_experts: 4,
            ..GateConfig::default()
        };
        assert!(topk_gate(&Matrix::zeros(3, 5), &Matrix::zeros(4, 4), &cfg).is_err());
        assert!(topk_gate(&Matrix::zeros(3, 4), &Matrix::zeros(4, 3), &cfg).is_err());
    }

    #[test]
    fn ktop1_degenerate_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(12, 3, &mut rng);
        let w = random(3, 4, &mut rng);
        let cfg = GateConfig {
            num_experts: 4,
            k: 1,
            capacity_factor: 2.0,
            num_prototypes: 1,
            ..GateConfig::default()
        };
        let single = ktop1_gate(&x, std::slice::from_ref(&w), &cfg).unwrap();
        assert_eq!(single, vec![topk_gate(&x, &w, &cfg).unwrap()]);

        let per_expert = GateConfig {
            num_prototypes: 4,
            ..cfg.clone()
        };
        let ws: Vec<Matrix> = (0..4).map(|i| w.col_slice(i, i + 1).unwrap()).collect();
        for d in ktop1_gate(&x, &ws, &per_expert).unwrap() {
            assert!(d.expert_ids().iter().all(|id| *id == Some(0)));
        }

        let bad = GateConfig {
            num_prototypes: 3,
            ..cfg
        };
        assert!(ktop1_gate(&x, &ws[..3], &bad).is_err());
    }

    #[test]
    fn hierarchical_errors() {
        let cfg = GateConfig {
            num_experts: 6,
            k: 3,
            num_groups: 4,
            ..GateConfig::default()
        };
        let x = Matrix::zeros(2, 3);
        assert!(
            hierarchical_topk_gate(&x, &Matrix::zeros(3, 4), &Matrix::zeros(3, 6), &cfg).is_err()
        );
        let cfg = GateConfig {
            num_groups: 3,
            ..cfg
        };
        // group size 2 < k = 3
        assert!(
            hierarchical_topk_gate(&x, &Matrix::zeros(3, 3), &Matrix::zeros(3, 6), &cfg).is_err()
        );
    }
}
