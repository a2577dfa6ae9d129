mod common;

use common::*;
use ggcnlab::autodiff::{grad_check, Tape, Var};
use ggcnlab::layers::{
    base_layer, degree_correction, edge_similarity, gcn_layer, ggcn_layer, linear_transform,
    mlp2, norm_modifier, propagate, sign_matrix, BatchNormState, DecaySchedule, GgcnOptions,
    GgcnVars, LayerFlags, Mlp2Vars, NormKind, NormVars, PropagationContext, Similarity,
    DEFAULT_DELTA,
};
use ggcnlab::{Graph, Scheme, Tensor};
use proptest::prelude::*;
use rand::Rng;

const TOL: f64 = 1e-5;
const STEP: f64 = 1e-5;
const SEEDS: u64 = 10;
const DIM: usize = 4;
const NORMS: [NormKind; 3] = [NormKind::None, NormKind::BatchNorm, NormKind::LayerNorm];

fn graph6(seed: u64) -> Graph {
    random_connected_graph(6, 4, &mut rng(1000 + seed))
}

fn all_flags() -> Vec<LayerFlags> {
    (0..16)
        .map(|m| LayerFlags {
            use_sign: m & 1 != 0,
            use_degree_correction: m & 2 != 0,
            use_decay: m & 4 != 0,
            residual: m & 8 != 0,
        })
        .collect()
}

fn running_state(seed: u64) -> BatchNormState {
    let mut r = rng(seed);
    BatchNormState {
        running_mean: (0..DIM).map(|_| r.random_range(-0.5..0.5)).collect(),
        running_var: (0..DIM).map(|_| r.random_range(0.5..2.0)).collect(),
    }
}

/// Reduces `out` to `sum(out ⊙ C)` with a fixed random `C`.
fn weighted_sum(tape: &mut Tape, out: Var, seed: u64) -> ggcnlab::Result<Var> {
    let (r, c) = tape.shape(out);
    let w = tape.constant(random_tensor(r, c, &mut rng(seed ^ 0xC0FFEE)));
    let prod = tape.mul(out, w)?;
    Ok(tape.sum(prod))
}

fn assert_grad(name: &str, seed: u64, err: f64) {
    assert!(err <= TOL, "{name} seed {seed}: relative error {err:e}");
}

#[test]
fn mlp2_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng(seed);
        let params = vec![
            random_tensor(6, DIM, &mut r),
            random_tensor(DIM, 5, &mut r),
            random_tensor(1, 5, &mut r),
            random_tensor(5, 3, &mut r),
            random_tensor(1, 3, &mut r),
        ];
        let err = grad_check(
            |tape, v| {
                let vars = Mlp2Vars { w1: v[1], b1: v[2], w2: v[3], b2: v[4] };
                let out = mlp2(tape, v[0], &vars, 0.5, false, &mut rng(0))?;
                weighted_sum(tape, out, seed)
            },
            &params,
            STEP,
        )
        .unwrap();
        assert_grad("mlp2", seed, err);
    }
}

#[test]
fn gcn_layer_gradients() {
    for seed in 0..SEEDS {
        let ctx = PropagationContext::new(&graph6(seed), Scheme::Renormalized);
        let state = running_state(seed);
        for norm in NORMS {
            for (activate, training) in [(false, true), (true, true), (true, false)] {
                let mut r = rng(seed);
                let params = vec![
                    random_tensor(6, DIM, &mut r),
                    random_tensor(DIM, DIM, &mut r),
                    random_tensor(1, DIM, &mut r),
                    positive_tensor(1, DIM, &mut r),
                    random_tensor(1, DIM, &mut r),
                ];
                let err = grad_check(
                    |tape, v| {
                        let nv = NormVars { scale: v[3], shift: v[4] };
                        let (out, _) = gcn_layer(
                            tape, &ctx, v[0], v[1], Some(v[2]), activate, norm, Some(nv),
                            Some(&state), training,
                        )?;
                        weighted_sum(tape, out, seed)
                    },
                    &params,
                    STEP,
                )
                .unwrap();
                assert_grad(&format!("gcn_layer {norm:?} act={activate} train={training}"), seed, err);
            }
        }
    }
}

#[test]
fn base_layer_gradients() {
    for seed in 0..SEEDS {
        let ctx = PropagationContext::new(&graph6(seed), Scheme::Renormalized);
        let state = running_state(seed);
        for norm in NORMS {
            for corrected in [false, true] {
                let mut r = rng(seed);
                let params = vec![
                    random_tensor(6, DIM, &mut r),
                    random_tensor(DIM, DIM, &mut r),
                    random_tensor(1, DIM, &mut r),
                    Tensor::scalar(r.random_range(-1.0..1.0)),
                    Tensor::scalar(r.random_range(-1.0..1.0)),
                    positive_tensor(1, DIM, &mut r),
                    random_tensor(1, DIM, &mut r),
                ];
                let err = grad_check(
                    |tape, v| {
                        let lambdas = corrected.then_some((v[3], v[4]));
                        let nv = NormVars { scale: v[5], shift: v[6] };
                        let (out, _) = base_layer(
                            tape, &ctx, v[0], v[1], v[2], lambdas, norm, Some(nv), Some(&state),
                            true,
                        )?;
                        // Keep unused scalars on the tape so every slot has a gradient.
                        let out = if corrected { out } else {
                            let z = tape.scale(v[3], 0.0);
                            let z2 = tape.scale(v[4], 0.0);
                            let z = tape.add(z, z2)?;
                            tape.add_scalar(out, z)?
                        };
                        weighted_sum(tape, out, seed)
                    },
                    &params,
                    STEP,
                )
                .unwrap();
                assert_grad(&format!("base_layer {norm:?} corrected={corrected}"), seed, err);
            }
        }
    }
}

fn ggcn_params(seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    vec![
        random_tensor(6, DIM, &mut r),
        random_tensor(DIM, DIM, &mut r),
        random_tensor(1, DIM, &mut r),
        Tensor::scalar(r.random_range(0.5..2.5)),
        random_tensor(1, 3, &mut r),
        Tensor::scalar(r.random_range(-1.0..1.0)),
        Tensor::scalar(r.random_range(-1.0..1.0)),
        positive_tensor(1, DIM, &mut r),
        random_tensor(1, DIM, &mut r),
    ]
}

fn ggcn_vars(v: &[Var], norm: NormKind) -> GgcnVars {
    GgcnVars {
        w: v[1],
        b: v[2],
        alpha: v[3],
        beta: v[4],
        lambda0: Some(v[5]),
        lambda1: Some(v[6]),
        norm: (norm != NormKind::None).then_some(NormVars { scale: v[7], shift: v[8] }),
    }
}

#[test]
fn ggcn_layer_gradients_for_every_flag_combination() {
    for seed in 0..SEEDS {
        let ctx = PropagationContext::new(&graph6(seed), Scheme::Renormalized);
        for flags in all_flags() {
            for similarity in [Similarity::Cosine, Similarity::Literal] {
                let err = grad_check(
                    |tape, v| {
                        let opts = GgcnOptions {
                            flags,
                            decay: Some((DecaySchedule::default(), 2)),
                            similarity,
                            ..GgcnOptions::default()
                        };
                        let (out, _) = ggcn_layer(tape, &ctx, v[0], &ggcn_vars(v, NormKind::None), &opts)?;
                        // Touch every parameter so unused ones report zero gradient.
                        let mut acc = weighted_sum(tape, out, seed)?;
                        for &p in &v[5..] {
                            let s = tape.sum(p);
                            let z = tape.scale(s, 0.0);
                            acc = tape.add(acc, z)?;
                        }
                        Ok(acc)
                    },
                    &ggcn_params(seed),
                    STEP,
                )
                .unwrap();
                assert_grad(&format!("ggcn_layer {flags:?} {similarity:?}"), seed, err);
            }
        }
    }
}

#[test]
fn ggcn_layer_gradients_with_norms() {
    for seed in 0..SEEDS {
        let ctx = PropagationContext::new(&graph6(seed), Scheme::Renormalized);
        let state = running_state(seed);
        let flags = LayerFlags { use_sign: true, use_degree_correction: true, use_decay: true, residual: true };
        for norm in [NormKind::BatchNorm, NormKind::LayerNorm] {
            for training in [true, false] {
                let err = grad_check(
                    |tape, v| {
                        let opts = GgcnOptions {
                            flags,
                            decay: Some((DecaySchedule::default(), 1)),
                            norm,
                            norm_state: Some(&state),
                            training,
                            ..GgcnOptions::default()
                        };
                        let (out, _) = ggcn_layer(tape, &ctx, v[0], &ggcn_vars(v, norm), &opts)?;
                        weighted_sum(tape, out, seed)
                    },
                    &ggcn_params(seed),
                    STEP,
                )
                .unwrap();
                assert_grad(&format!("ggcn_layer {norm:?} train={training}"), seed, err);
            }
        }
    }
}

#[test]
fn norm_modifier_gradients() {
    for seed in 0..SEEDS {
        let state = running_state(seed);
        for norm in NORMS {
            for training in [true, false] {
                let mut r = rng(seed);
                let params = vec![
                    random_tensor(6, DIM, &mut r),
                    positive_tensor(1, DIM, &mut r),
                    random_tensor(1, DIM, &mut r),
                ];
                let err = grad_check(
                    |tape, v| {
                        let nv = NormVars { scale: v[1], shift: v[2] };
                        let (out, _) = norm_modifier(tape, v[0], norm, Some(nv), Some(&state), training)?;
                        let out = if norm == NormKind::None {
                            let s = tape.mul_row(out, v[1])?;
                            tape.add_row(s, v[2])?
                        } else {
                            out
                        };
                        weighted_sum(tape, out, seed)
                    },
                    &params,
                    STEP,
                )
                .unwrap();
                assert_grad(&format!("norm_modifier {norm:?} train={training}"), seed, err);
            }
        }
    }
}

#[test]
fn unsigned_residual_layer_is_the_plain_mixture() {
    let flags = LayerFlags { residual: true, ..LayerFlags::default() };
    for seed in 0..SEEDS {
        let ctx = PropagationContext::new(&graph6(seed), Scheme::Renormalized);
        let params = ggcn_params(seed);

        let mut tape = Tape::new();
        let v: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let start = tape.len();
        let opts = GgcnOptions { flags, ..GgcnOptions::default() };
        let vars = GgcnVars { lambda0: None, lambda1: None, norm: None, ..ggcn_vars(&v, NormKind::None) };
        let (out, _) = ggcn_layer(&mut tape, &ctx, v[0], &vars, &opts).unwrap();
        let layer_nodes = tape.len() - start;
        let layer_out = tape.value(out).clone();

        // α̂ (β̂0 F̂ + β̂1 Ã F̂ + β̂2 · 0), then F + elu(·).
        let mut tape = Tape::new();
        let v: Vec<Var> = params.iter().map(|p| tape.param(p.clone())).collect();
        let start = tape.len();
        let fh = linear_transform(&mut tape, v[0], v[1], Some(v[2])).unwrap();
        let alpha_hat = tape.softplus(v[3]);
        let beta_hat = tape.row_softmax(v[4]);
        let b0 = tape.element(beta_hat, 0, 0).unwrap();
        let b1 = tape.element(beta_hat, 0, 1).unwrap();
        let _b2 = tape.element(beta_hat, 0, 2).unwrap();
        let own = tape.scale_by(fh, b0).unwrap();
        let agg = propagate(&mut tape, &ctx, fh).unwrap();
        let agg = tape.scale_by(agg, b1).unwrap();
        let mixed = tape.add(own, agg).unwrap();
        let core = tape.scale_by(mixed, alpha_hat).unwrap();
        let act = tape.elu(core);
        let hand = tape.add(v[0], act).unwrap();

        assert_eq!(layer_nodes, tape.len() - start, "seed {seed}");
        assert!(layer_out.max_abs_diff(tape.value(hand)) <= 1e-14, "seed {seed}");
    }
}

#[test]
fn edge_similarity_matches_dense_sign_matrix() {
    for seed in 0..SEEDS {
        let g = graph6(seed);
        let ctx = PropagationContext::new(&g, Scheme::Renormalized);
        let f = random_tensor(6, DIM, &mut rng(seed));
        for similarity in [Similarity::Cosine, Similarity::Literal] {
            let dense = sign_matrix(&f, DEFAULT_DELTA, similarity);
            let mut tape = Tape::new();
            let x = tape.constant(f.clone());
            let s = edge_similarity(&mut tape, &ctx, x, DEFAULT_DELTA, similarity).unwrap();
            for (i, j, e) in ctx.edges.iter() {
                let want = dense.s_pos.get(i, j) + dense.s_neg.get(i, j);
                assert!((tape.value(s).get(0, e) - want).abs() < 1e-14);
            }
        }
    }
}

#[test]
fn batch_norm_eval_is_row_local() {
    let state = running_state(3);
    let mut r = rng(3);
    let a = random_tensor(5, DIM, &mut r);
    let mut b = random_tensor(5, DIM, &mut r);
    b.row_mut(0).copy_from_slice(a.row(0));
    let run = |x: &Tensor| {
        let mut tape = Tape::new();
        let h = tape.constant(x.clone());
        let (out, stats) =
            norm_modifier(&mut tape, h, NormKind::BatchNorm, None, Some(&state), false).unwrap();
        assert!(stats.is_none());
        tape.value(out).row(0).to_vec()
    };
    assert_eq!(run(&a), run(&b));
}

proptest! {
    #[test]
    fn mixture_weights_form_a_simplex(beta in proptest::collection::vec(-60.0..60.0f64, 3)) {
        let mut tape = Tape::new();
        let b = tape.param(Tensor::row_vector(&beta).unwrap());
        let s = tape.row_softmax(b);
        let w = tape.value(s).data();
        prop_assert!(w.iter().all(|&x| x > 0.0));
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
    }

    #[test]
    fn cosine_sign_matrix_is_bounded_and_symmetric(
        rows in 2..8usize,
        seed in any::<u64>(),
        zero_row in any::<bool>(),
    ) {
        let mut f = random_tensor(rows, 3, &mut rng(seed)).map(|v| 10.0 * v);
        if zero_row {
            f.row_mut(0).fill(0.0);
        }
        let s = sign_matrix(&f, DEFAULT_DELTA, Similarity::Cosine);
        for i in 0..rows {
            prop_assert_eq!(s.s_pos.get(i, i), 0.0);
            prop_assert_eq!(s.s_neg.get(i, i), 0.0);
            for j in 0..rows {
                let (p, n) = (s.s_pos.get(i, j), s.s_neg.get(i, j));
                prop_assert!(p >= 0.0 && n <= 0.0 && p * n == 0.0);
                prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&(p + n)));
                prop_assert!((p - s.s_pos.get(j, i)).abs() < 1e-15);
                prop_assert!((n - s.s_neg.get(j, i)).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn degree_correction_is_positive(
        g in arb_connected_graph(20),
        l0 in -20.0..20.0f64,
        l1 in -20.0..20.0f64,
    ) {
        let tau = degree_correction(&g, l0, l1).unwrap();
        prop_assert_eq!(tau.len(), 2 * g.num_edges());
        prop_assert!(tau.iter().all(|&t| t > 0.0));
    }

    #[test]
    fn decay_coefficient_shrinks_after_onset(
        eta in 0.01..3.0f64,
        k in 0.5..4.0f64,
        l0 in 1..6usize,
    ) {
        let s = DecaySchedule { eta, k, l0 };
        for l in 1..l0 {
            prop_assert_eq!(s.coefficient(l), 1.0);
        }
        let mut prev = f64::INFINITY;
        for l in l0..l0 + 50 {
            let c = s.coefficient(l);
            prop_assert!(c > 0.0 && c <= prev);
            prop_assert!((c - (eta / (l as f64).powf(k) + 1.0).ln()).abs() < 1e-15);
            prev = c;
        }
        // ln(1 + x) ≤ x, so once l^k ≥ 1e6 the coefficient is below 1e-6 η.
        let far = 1e6f64.powf(1.0 / k).ceil() as usize + l0;
        prop_assert!(s.coefficient(far) <= 1e-6 * eta);
    }
}
