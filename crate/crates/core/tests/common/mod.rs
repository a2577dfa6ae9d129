#![allow(dead_code)]

use ggcnlab::{build_graph, Graph, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(-1.0..1.0))
}

/// Entries bounded away from zero, for divisors and logs.
pub fn positive_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(rows, cols, |_, _| rng.random_range(0.5..2.0))
}

/// A ring through every node plus random chords, so no node is isolated.
pub fn random_connected_graph(n: usize, extra: usize, rng: &mut ChaCha8Rng) -> Graph {
    let mut edges: Vec<(usize, usize)> = (0..n).map(|i| (i, (i + 1) % n)).collect();
    for _ in 0..extra {
        let u = rng.random_range(0..n);
        let v = rng.random_range(0..n);
        if u != v {
            edges.push((u, v));
        }
    }
    build_graph(edges.into_iter().filter(|(u, v)| u != v), n).unwrap()
}

/// `2m`-regular circulant graph on `n > 2m` nodes.
pub fn circulant(n: usize, m: usize) -> Graph {
    let edges = (0..n).flat_map(|i| (1..=m).map(move |k| (i, (i + k) % n)));
    build_graph(edges, n).unwrap()
}

/// Arbitrary simple graph on 1..=max_n nodes; isolated nodes allowed.
pub fn arb_graph(max_n: usize) -> impl Strategy<Value = Graph> {
    (1..=max_n).prop_flat_map(|n| {
        proptest::collection::vec((0..n, 0..n), 0..3 * n).prop_map(move |pairs| {
            build_graph(pairs.into_iter().filter(|(u, v)| u != v), n).unwrap()
        })
    })
}

/// Graph without isolated nodes on 3..=max_n nodes.
pub fn arb_connected_graph(max_n: usize) -> impl Strategy<Value = Graph> {
    (3..=max_n, any::<u64>(), 0..40usize)
        .prop_map(|(n, seed, extra)| random_connected_graph(n, extra, &mut rng(seed)))
}

/// Regular graph from a circulant family.
pub fn arb_regular_graph() -> impl Strategy<Value = Graph> {
    (1..5usize).prop_flat_map(|m| (2 * m + 1..2 * m + 20).prop_map(move |n| circulant(n, m)))
}
