use rand::distributions::Open01;
use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matmul, softmax, Matrix};

use super::{GateConfig, GateDecision};

/// Experts whose gate weight falls below this are pruned.
pub const PRUNE_THRESHOLD: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GateMode {
    /// Gumbel noise is added to the logits.
    Train,
    Eval,
}

/// Draws `-ln(-ln(u))` with `u` uniform on the open interval (0, 1).
pub fn gumbel<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    let u: f64 = rng.sample(Open01);
    -(-u.ln()).ln()
}

/// Gumbel-softmax gate over all `E` experts at temperature `cfg.temperature`.
///
/// The decision has one slot per expert (slot `j` is expert `j`). Experts with
/// weight below [`PRUNE_THRESHOLD`] are dropped and the survivors renormalised,
/// so the effective `k` shrinks as the temperature falls. The arg-max expert is
/// never pruned, which only matters once `1 / E` drops below the threshold.
pub fn dense_to_sparse_gate<R: Rng + ?Sized>(
    x: &Matrix,
    w: &Matrix,
    cfg: &GateConfig,
    rng: &mut R,
    mode: GateMode,
) -> Result<GateDecision> {
    let tau = cfg.temperature;
    if !(tau.is_finite() && tau > 0.0) {
        return Err(Error::invalid(
            "temperature",
            format!("must be positive, got {tau}"),
        ));
    }
    let e = cfg.num_experts;
    if x.cols() != w.rows() || w.cols() != e {
        return Err(Error::Shape {
            op: "dense_to_sparse_gate",
            left: x.shape(),
            right: w.shape(),
        });
    }
    let logits = matmul(x, w)?;
    let mut ids = Vec::with_capacity(x.rows() * e);
    let mut weights = Vec::with_capacity(x.rows() * e);
    let mut scaled = vec![0.0; e];
    for row in logits.row_iter() {
        for (s, &l) in scaled.iter_mut().zip(row) {
            let noisy = match mode {
                GateMode::Train => l + gumbel(rng),
                GateMode::Eval => l,
            };
            *s = noisy / tau;
        }
        let probs = softmax(&scaled);
        let argmax = probs
            .iter()
            .enumerate()
            .fold(0, |best, (i, &p)| if p > probs[best] { i } else { best });
        let keep = |i: usize| i == argmax || probs[i] >= PRUNE_THRESHOLD;
        let total: f64 = (0..e).filter(|&i| keep(i)).map(|i| probs[i]).sum();
        for (i, p) in probs.iter().enumerate() {
            if keep(i) {
                ids.push(Some(i));
                weights.push(p / total);
            } else {
                ids.push(None);
                weights.push(0.0);
            }
        }
    }
    GateDecision::new(e, e, ids, weights)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(e: usize, tau: f64) -> GateConfig {
        GateConfig {
            num_experts: e,
            k: 1,
            temperature: tau,
            ..GateConfig::default()
        }
    }

    fn setup(seed: u64) -> (Matrix, Matrix) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Matrix::from_fn(20, 6, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        let w = Matrix::from_fn(6, 8, |_, _| rng.gen_range(-1.0..1.0)).unwrap();
        (x, w)
    }

    #[test]
    fn high_temperature_is_uniform() {
        let (x, w) = setup(1);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = dense_to_sparse_gate(&x, &w, &cfg(8, 1e6), &mut rng, GateMode::Eval).unwrap();
        assert!(d.expert_ids().iter().all(Option::is_some));
        for wt in d.weights() {
            assert!((wt - 1.0 / 8.0).abs() < 1e-3);
        }
    }

    #[test]
    fn low_temperature_is_argmax() {
        let (x, w) = setup(2);
        let logits = matmul(&x, &w).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let d = dense_to_sparse_gate(&x, &w, &cfg(8, 1e-3), &mut rng, GateMode::Eval).unwrap();
        for t in 0..x.rows() {
            let survivors: Vec<usize> = d.token_experts(t).iter().flatten().copied().collect();
            let row = logits.row(t);
            let best = (0..8)
                .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                .unwrap();
            assert_eq!(survivors, vec![best]);
            assert_eq!(d.token_weights(t)[best], 1.0);
        }
    }

    #[test]
    fn train_mode_uses_rng_deterministically() {
        let (x, w) = setup(3);
        let c = cfg(8, 0.5);
        let a = dense_to_sparse_gate(
            &x,
            &w,
            &c,
            &mut ChaCha8Rng::seed_from_u64(9),
            GateMode::Train,
        )
        .unwrap();
        let b = dense_to_sparse_gate(
            &x,
            &w,
            &c,
            &mut ChaCha8Rng::seed_from_u64(9),
            GateMode::Train,
        )
        .unwrap();
        let eval = dense_to_sparse_gate(
            &x,
            &w,
            &c,
            &mut ChaCha8Rng::seed_from_u64(9),
            GateMode::Eval,
        )
        .unwrap();
        assert_eq!(a, b);
        assert_ne!(a, eval);
        for t in 0..x.rows() {
            let s: f64 = a.token_weights(t).iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn non_positive_temperature_rejected() {
        let (x, w) = setup(4);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for tau in [0.0, -1.0] {
            assert!(dense_to_sparse_gate(&x, &w, &cfg(8, tau), &mut rng, GateMode::Eval).is_err());
        }
    }

    #[test]
    fn gumbel_is_finite() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        assert!((0..10_000).map(|_| gumbel(&mut rng)).all(f64::is_finite));
    }
}
