mod common;

use common::*;
use moesim_core::gates::{ConfiguredGate, Gate, GateConfig, GateDecision, TokenBatch};
use moesim_core::moe::{expert_ffn, moe_forward, place_round_robin, Collective, ExpertParams};
use moesim_core::netsim::ClusterSpec;
use moesim_core::tensor::{matmul, relu};
use moesim_core::Matrix;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn experts(e: usize, d: usize, h: usize, devices: usize, r: &mut ChaCha8Rng) -> Vec<ExpertParams> {
    let mut out: Vec<ExpertParams> = (0..e)
        .map(|_| ExpertParams::new(random_matrix(d, h, r), random_matrix(h, d, r), 0).unwrap())
        .collect();
    place_round_robin(&mut out, devices);
    out
}

fn topk(d: usize, e: usize, k: usize, c: f64, r: &mut ChaCha8Rng) -> ConfiguredGate {
    let cfg = GateConfig {
        num_experts: e,
        k,
        capacity_factor: c,
        ..GateConfig::default()
    };
    ConfiguredGate::new(
        Gate::TopK {
            weights: random_matrix(d, e, r),
        },
        cfg,
    )
}

#[test]
fn ffn_matches_composed_oracle() {
    let mut r = rng(400);
    let x = random_matrix(4, 8, &mut r);
    let p = ExpertParams::new(random_matrix(8, 6, &mut r), random_matrix(6, 8, &mut r), 0).unwrap();
    let want = matmul(&relu(&matmul(&x, &p.w1).unwrap()), &p.w2).unwrap();
    assert_eq!(expert_ffn(&x, &p).unwrap(), want);
}

#[test]
fn single_expert_is_plain_ffn() {
    let mut r = rng(401);
    for (n, g) in [(1, 1), (2, 2), (1, 4)] {
        let spec = ClusterSpec::commodity(n, g);
        let x = TokenBatch::from_matrix(random_matrix(16, 8, &mut r));
        let ex = experts(1, 8, 12, n * g, &mut r);
        let gate = topk(8, 1, 1, 1.0, &mut r);
        for coll in [Collective::Vanilla, Collective::Hierarchical] {
            let out = moe_forward(&x, &gate, &ex, &spec, coll).unwrap();
            assert_eq!(out.y, expert_ffn(&x.x, &ex[0]).unwrap());
            assert_eq!(out.drop_count, 0);
        }
    }
}

#[test]
fn ktop1_with_one_prototype_equals_top1() {
    let mut r = rng(402);
    let spec = ClusterSpec::commodity(2, 2);
    let x = TokenBatch::from_matrix(random_matrix(32, 8, &mut r));
    let ex = experts(8, 8, 16, 4, &mut r);
    let w = random_matrix(8, 8, &mut r);
    let cfg = GateConfig {
        num_experts: 8,
        capacity_factor: 1.25,
        ..GateConfig::default()
    };
    let a = ConfiguredGate::new(Gate::TopK { weights: w.clone() }, cfg.clone());
    let b = ConfiguredGate::new(
        Gate::KTop1 {
            prototypes: vec![w],
        },
        cfg,
    );
    let ya = moe_forward(&x, &a, &ex, &spec, Collective::Vanilla).unwrap();
    let yb = moe_forward(&x, &b, &ex, &spec, Collective::Vanilla).unwrap();
    assert_eq!(ya.y, yb.y);
    assert_eq!(ya.drop_count, yb.drop_count);
}

#[test]
fn collectives_give_identical_outputs() {
    let mut r = rng(403);
    let spec = ClusterSpec::commodity(2, 2);
    let x = TokenBatch::from_matrix(random_matrix(64, 8, &mut r));
    let ex = experts(16, 8, 16, 4, &mut r);
    let gate = topk(8, 16, 2, 1.0, &mut r);
    let a = moe_forward(&x, &gate, &ex, &spec, Collective::Vanilla).unwrap();
    let b = moe_forward(&x, &gate, &ex, &spec, Collective::Hierarchical).unwrap();
    assert_eq!(a.y, b.y);
    assert_ne!(a.timing.dispatch, b.timing.dispatch);
}

/// Direct per-token evaluation of the combine rule, no devices involved.
fn combine_oracle(x: &Matrix, decision: &GateDecision, ex: &[ExpertParams]) -> Matrix {
    let d = x.cols();
    let mut data = vec![0.0; x.rows() * d];
    for t in 0..x.rows() {
        let xt = x.row_range(t, t + 1).unwrap();
        for (id, w) in decision
            .token_experts(t)
            .iter()
            .zip(decision.token_weights(t))
        {
            if let Some(e) = id {
                let o = expert_ffn(&xt, &ex[*e]).unwrap();
                for c in 0..d {
                    data[t * d + c] += w * o.get(0, c);
                }
            }
        }
    }
    Matrix::from_vec(x.rows(), d, data).unwrap()
}

#[test]
fn output_matches_per_token_oracle() {
    let mut r = rng(404);
    let spec = ClusterSpec::commodity(2, 2);
    for _ in 0..10 {
        let x = TokenBatch::from_matrix(random_matrix(32, 6, &mut r));
        let ex = experts(8, 6, 10, 4, &mut r);
        let gate = topk(6, 8, 2, 0.75, &mut r);
        let out = moe_forward(&x, &gate, &ex, &spec, Collective::Hierarchical).unwrap();
        let want = combine_oracle(&x.x, &out.decision, &ex);
        for (a, b) in out.y.as_slice().iter().zip(want.as_slice()) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn device_count_independence() {
    let mut r = rng(405);
    let x = TokenBatch::from_matrix(random_matrix(64, 8, &mut r));
    let gate = topk(8, 16, 2, 1.0, &mut r);
    let base = experts(16, 8, 16, 1, &mut r);
    let mut reference: Option<Matrix> = None;
    for (n, g) in [(1, 1), (2, 2), (4, 4)] {
        let mut ex = base.clone();
        place_round_robin(&mut ex, n * g);
        let out = moe_forward(
            &x,
            &gate,
            &ex,
            &ClusterSpec::commodity(n, g),
            Collective::Vanilla,
        )
        .unwrap();
        match &reference {
            None => reference = Some(out.y),
            Some(y0) => {
                for (a, b) in out.y.as_slice().iter().zip(y0.as_slice()) {
                    assert!((a - b).abs() <= 1e-9);
                }
            }
        }
    }
}

#[test]
fn doubling_w2_doubles_output() {
    let mut r = rng(406);
    let spec = ClusterSpec::commodity(2, 2);
    let x = TokenBatch::from_matrix(random_matrix(32, 8, &mut r));
    let ex = experts(8, 8, 16, 4, &mut r);
    let doubled: Vec<ExpertParams> = ex
        .iter()
        .map(|e| ExpertParams::new(e.w1.clone(), e.w2.scale(2.0).unwrap(), e.home_device).unwrap())
        .collect();
    let gate = topk(8, 8, 2, 1.0, &mut r);
    let a = moe_forward(&x, &gate, &ex, &spec, Collective::Vanilla).unwrap();
    let b = moe_forward(&x, &gate, &doubled, &spec, Collective::Vanilla).unwrap();
    assert_eq!(a.y.scale(2.0).unwrap(), b.y);
}

#[test]
fn dropped_tokens_emit_zero_rows() {
    let mut r = rng(407);
    let spec = ClusterSpec::commodity(1, 2);
    for _ in 0..20 {
        let x = TokenBatch::from_matrix(random_matrix(32, 4, &mut r));
        let ex = experts(4, 4, 8, 2, &mut r);
        let gate = topk(4, 4, 1, r.gen_range(0.25..1.0), &mut r);
        let out = moe_forward(&x, &gate, &ex, &spec, Collective::Vanilla).unwrap();
        let dropped: Vec<usize> = (0..32)
            .filter(|&t| out.decision.is_fully_dropped(t))
            .collect();
        assert_eq!(out.drop_count, dropped.len());
        for t in dropped {
            assert!(out.y.row(t).iter().all(|&v| v == 0.0));
        }
    }
}

#[test]
fn timing_phases_are_consistent() {
    let mut r = rng(408);
    let x = TokenBatch::from_matrix(random_matrix(64, 8, &mut r));
    let gate = topk(8, 16, 2, 1.0, &mut r);
    let ex = experts(16, 8, 16, 8, &mut r);
    let spec = ClusterSpec::commodity(2, 4);
    let out = moe_forward(&x, &gate, &ex, &spec, Collective::Hierarchical).unwrap();
    let t = out.timing;
    for v in [t.gate, t.layout, t.alltoall(), t.expert, t.combine] {
        assert!(v >= 0.0);
    }
    assert!((t.shares().iter().sum::<f64>() - 1.0).abs() < 1e-12);

    let single = ClusterSpec::commodity(1, 1);
    let ex1 = experts(1, 8, 16, 1, &mut r);
    let out = moe_forward(
        &x,
        &topk(8, 1, 1, 1.0, &mut r),
        &ex1,
        &single,
        Collective::Vanilla,
    )
    .unwrap();
    assert_eq!(out.timing.alltoall(), 0.0);
}
