//! Undirected simple graphs, adjacency normalizations and the homophily /
//! relative-degree statistics that drive propagation dynamics.

use std::collections::BTreeSet;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Immutable undirected graph without self-loops or multi-edges.
///
/// Edges are stored canonically as `(u, v)` with `u < v`, sorted; neighbor
/// lists are kept in CSR form and sorted ascending.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Graph {
    n: usize,
    edges: Vec<(usize, usize)>,
    offsets: Vec<usize>,
    neighbors: Vec<usize>,
}

/// Builds a simple symmetric graph from an edge list.
///
/// Duplicates and both orientations collapse to one edge. Isolated nodes are
/// allowed here; statistics that need neighbors reject them later.
pub fn build_graph<I>(edges: I, n: usize) -> Result<Graph>
where
    I: IntoIterator<Item = (usize, usize)>,
{
    let mut set = BTreeSet::new();
    for (u, v) in edges {
        for x in [u, v] {
            if x >= n {
                return Err(Error::IndexOutOfRange { index: x, n });
            }
        }
        if u == v {
            return Err(Error::SelfLoop(u));
        }
        set.insert((u.min(v), u.max(v)));
    }
    let edges: Vec<_> = set.into_iter().collect();

    let mut degree = vec![0usize; n];
    for &(u, v) in &edges {
        degree[u] += 1;
        degree[v] += 1;
    }
    let mut offsets = Vec::with_capacity(n + 1);
    offsets.push(0);
    for d in &degree {
        offsets.push(offsets.last().unwrap() + d);
    }
    let mut fill = offsets[..n].to_vec();
    let mut neighbors = vec![0; 2 * edges.len()];
    for &(u, v) in &edges {
        neighbors[fill[u]] = v;
        fill[u] += 1;
        neighbors[fill[v]] = u;
        fill[v] += 1;
    }
    for i in 0..n {
        neighbors[offsets[i]..offsets[i + 1]].sort_unstable();
    }
    Ok(Graph {
        n,
        edges,
        offsets,
        neighbors,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    /// `D̃^{-1/2} (I + A) D̃^{-1/2}` with `D̃` the degree matrix of `I + A`.
    Renormalized,
    /// `D̃^{-1} (I + A)`.
    RowNormalized,
}

#[derive(Clone, Debug, PartialEq)]
pub struct NormalizedAdjacency {
    pub scheme: Scheme,
    pub matrix: Tensor,
}

/// Sign of a representation relative to the class axis.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Sign {
    Pos,
    Neg,
}

impl Sign {
    /// Zero maps to `Pos`.
    pub fn of(x: f64) -> Sign {
        if x < 0.0 {
            Sign::Neg
        } else {
            Sign::Pos
        }
    }

    pub fn value(self) -> f64 {
        match self {
            Sign::Pos => 1.0,
            Sign::Neg => -1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HomophilyStats {
    pub per_node_h: Vec<f64>,
    pub graph_h: f64,
}

/// `r_ij = sqrt((d_i + 1) / (d_j + 1))` per directed edge and its
/// neighborhood mean `r̄_i`.
#[derive(Clone, Debug, PartialEq)]
pub struct RelativeDegreeStats {
    /// Indexed like [`Graph::edge_pattern`]: entry `e` is `(i, j)` for the
    /// e-th neighbor slot.
    pub r: Vec<f64>,
    pub rbar: Vec<f64>,
    pattern: Arc<SparsePattern>,
}

impl RelativeDegreeStats {
    pub fn get(&self, i: usize, j: usize) -> Option<f64> {
        self.pattern.position(i, j).map(|e| self.r[e])
    }

    pub fn pattern(&self) -> &Arc<SparsePattern> {
        &self.pattern
    }
}

/// Row-sorted CSR sparsity pattern on `n` rows and `n` columns.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SparsePattern {
    n: usize,
    offsets: Vec<usize>,
    cols: Vec<usize>,
}

impl SparsePattern {
    pub fn new(n: usize, offsets: Vec<usize>, cols: Vec<usize>) -> Self {
        assert_eq!(offsets.len(), n + 1);
        assert_eq!(*offsets.last().unwrap(), cols.len());
        SparsePattern { n, offsets, cols }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn nnz(&self) -> usize {
        self.cols.len()
    }

    pub fn row(&self, i: usize) -> &[usize] {
        &self.cols[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn row_range(&self, i: usize) -> std::ops::Range<usize> {
        self.offsets[i]..self.offsets[i + 1]
    }

    pub fn col(&self, e: usize) -> usize {
        self.cols[e]
    }

    /// `(row, col, entry index)` in storage order.
    pub fn iter(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        (0..self.n).flat_map(move |i| self.row_range(i).map(move |e| (i, self.cols[e], e)))
    }

    pub fn position(&self, i: usize, j: usize) -> Option<usize> {
        let start = self.offsets[i];
        self.row(i).binary_search(&j).ok().map(|k| start + k)
    }
}

/// Sparse matrix sharing a pattern.
#[derive(Clone, Debug, PartialEq)]
pub struct SparseMatrix {
    pub pattern: Arc<SparsePattern>,
    pub values: Vec<f64>,
}

impl SparseMatrix {
    pub fn to_dense(&self) -> Tensor {
        let n = self.pattern.n();
        let mut out = Tensor::zeros(n, n);
        for (i, j, e) in self.pattern.iter() {
            out.set(i, j, self.values[e]);
        }
        out
    }

    /// Sparse-dense product.
    pub fn matmul(&self, x: &Tensor) -> Result<Tensor> {
        if x.rows() != self.pattern.n() {
            return Err(Error::shape(
                "SparseMatrix::matmul",
                (self.pattern.n(), self.pattern.n()),
                x.shape(),
            ));
        }
        let d = x.cols();
        let mut out = Tensor::zeros(x.rows(), d);
        for (i, j, e) in self.pattern.iter() {
            let w = self.values[e];
            for (o, s) in out.row_mut(i).iter_mut().zip(x.row(j)) {
                *o += w * s;
            }
        }
        Ok(out)
    }
}

impl Graph {
    pub fn num_nodes(&self) -> usize {
        self.n
    }

    pub fn num_edges(&self) -> usize {
        self.edges.len()
    }

    /// Canonical `(u, v)` pairs with `u < v`, sorted.
    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[self.offsets[i]..self.offsets[i + 1]]
    }

    pub fn degree(&self, i: usize) -> usize {
        self.offsets[i + 1] - self.offsets[i]
    }

    pub fn degrees(&self) -> Vec<usize> {
        (0..self.n).map(|i| self.degree(i)).collect()
    }

    pub fn has_edge(&self, u: usize, v: usize) -> bool {
        u < self.n && self.neighbors(u).binary_search(&v).is_ok()
    }

    pub fn isolated_nodes(&self) -> Vec<usize> {
        (0..self.n).filter(|&i| self.degree(i) == 0).collect()
    }

    pub fn is_regular(&self) -> bool {
        let d = self.degrees();
        d.windows(2).all(|w| w[0] == w[1])
    }

    fn require_no_isolated(&self) -> Result<()> {
        match (0..self.n).find(|&i| self.degree(i) == 0) {
            Some(i) => Err(Error::IsolatedNode(i)),
            None => Ok(()),
        }
    }

    /// Directed neighbor slots (both orientations of every edge), no diagonal.
    pub fn edge_pattern(&self) -> Arc<SparsePattern> {
        Arc::new(SparsePattern::new(
            self.n,
            self.offsets.clone(),
            self.neighbors.clone(),
        ))
    }

    /// Neighbor slots plus the diagonal, i.e. the pattern of `I + A`.
    pub fn self_loop_pattern(&self) -> Arc<SparsePattern> {
        let mut offsets = Vec::with_capacity(self.n + 1);
        let mut cols = Vec::with_capacity(self.neighbors.len() + self.n);
        offsets.push(0);
        for i in 0..self.n {
            let nb = self.neighbors(i);
            let split = nb.partition_point(|&j| j < i);
            cols.extend_from_slice(&nb[..split]);
            cols.push(i);
            cols.extend_from_slice(&nb[split..]);
            offsets.push(cols.len());
        }
        Arc::new(SparsePattern::new(self.n, offsets, cols))
    }

    /// Sparse normalized `I + A`.
    pub fn normalized_sparse(&self, scheme: Scheme) -> SparseMatrix {
        let pattern = self.self_loop_pattern();
        let dt: Vec<f64> = (0..self.n).map(|i| self.degree(i) as f64 + 1.0).collect();
        let values = pattern
            .iter()
            .map(|(i, j, _)| match scheme {
                Scheme::Renormalized => 1.0 / (dt[i] * dt[j]).sqrt(),
                Scheme::RowNormalized => 1.0 / dt[i],
            })
            .collect();
        SparseMatrix { pattern, values }
    }

    /// Dense normalized adjacency.
    pub fn normalize(&self, scheme: Scheme) -> NormalizedAdjacency {
        NormalizedAdjacency {
            scheme,
            matrix: self.normalized_sparse(scheme).to_dense(),
        }
    }

    /// Fraction of each node's neighbors sharing its label, and the
    /// unweighted mean over nodes.
    pub fn node_homophily(&self, labels: &[usize]) -> Result<HomophilyStats> {
        self.check_len("node_homophily", labels.len())?;
        self.require_no_isolated()?;
        let per_node_h: Vec<f64> = (0..self.n)
            .map(|i| {
                let nb = self.neighbors(i);
                nb.iter().filter(|&&j| labels[j] == labels[i]).count() as f64 / nb.len() as f64
            })
            .collect();
        let graph_h = mean(&per_node_h);
        Ok(HomophilyStats { per_node_h, graph_h })
    }

    pub fn relative_degrees(&self) -> Result<RelativeDegreeStats> {
        self.require_no_isolated()?;
        let pattern = self.edge_pattern();
        let dt: Vec<f64> = (0..self.n).map(|i| self.degree(i) as f64 + 1.0).collect();
        let r: Vec<f64> = pattern.iter().map(|(i, j, _)| (dt[i] / dt[j]).sqrt()).collect();
        let rbar = (0..self.n)
            .map(|i| {
                let range = pattern.row_range(i);
                let len = range.len() as f64;
                r[range].iter().sum::<f64>() / len
            })
            .collect();
        Ok(RelativeDegreeStats { r, rbar, pattern })
    }

    /// Fraction of neighbors whose sign matches the node's own.
    pub fn effective_homophily(&self, signs: &[Sign]) -> Result<Vec<f64>> {
        self.check_len("effective_homophily", signs.len())?;
        self.require_no_isolated()?;
        Ok((0..self.n)
            .map(|i| {
                let nb = self.neighbors(i);
                nb.iter().filter(|&&j| signs[j] == signs[i]).count() as f64 / nb.len() as f64
            })
            .collect())
    }

    /// Fraction of neighbors that share the node's label *and* are
    /// classified correctly.
    pub fn empirical_effective_homophily(
        &self,
        labels: &[usize],
        correct: &[bool],
    ) -> Result<Vec<f64>> {
        self.check_len("empirical_effective_homophily", labels.len())?;
        self.check_len("empirical_effective_homophily", correct.len())?;
        self.require_no_isolated()?;
        Ok((0..self.n)
            .map(|i| {
                let nb = self.neighbors(i);
                nb.iter()
                    .filter(|&&j| labels[j] == labels[i] && correct[j])
                    .count() as f64
                    / nb.len() as f64
            })
            .collect())
    }

    fn check_len(&self, op: &'static str, len: usize) -> Result<()> {
        if len != self.n {
            return Err(Error::shape(op, (self.n, 1), (len, 1)));
        }
        Ok(())
    }
}

pub(crate) fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    xs.iter().sum::<f64>() / xs.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cycle4() -> Graph {
        build_graph([(0, 1), (1, 2), (2, 3), (3, 0)], 4).unwrap()
    }

    fn path3() -> Graph {
        build_graph([(0, 1), (1, 2)], 3).unwrap()
    }

    fn star3() -> Graph {
        build_graph([(0, 1), (0, 2), (0, 3)], 4).unwrap()
    }

    #[test]
    fn build_dedups_orientations() {
        let g = build_graph([(0, 1), (1, 0)], 2).unwrap();
        assert_eq!(g.num_edges(), 1);
        assert_eq!(g.degrees(), vec![1, 1]);
    }

    #[test]
    fn build_rejects_bad_input() {
        assert!(matches!(build_graph([(0, 0)], 1), Err(Error::SelfLoop(0))));
        assert!(matches!(
            build_graph([(0, 2)], 2),
            Err(Error::IndexOutOfRange { index: 2, n: 2 })
        ));
    }

    #[test]
    fn cycle_degrees() {
        let g = cycle4();
        assert_eq!(g.degrees(), vec![2; 4]);
        assert!(g.is_regular());
        assert_eq!(g.neighbors(0), &[1, 3]);
    }

    #[test]
    fn single_edge_normalizations() {
        let g = build_graph([(0, 1)], 2).unwrap();
        for scheme in [Scheme::Renormalized, Scheme::RowNormalized] {
            let m = g.normalize(scheme).matrix;
            assert_eq!(m.data(), &[0.5, 0.5, 0.5, 0.5]);
        }
    }

    #[test]
    fn isolated_node_normalizes_to_one() {
        let g = build_graph([], 1).unwrap();
        for scheme in [Scheme::Renormalized, Scheme::RowNormalized] {
            assert_eq!(g.normalize(scheme).matrix.data(), &[1.0]);
        }
    }

    #[test]
    fn renormalized_entries_star() {
        let g = star3();
        let m = g.normalize(Scheme::Renormalized).matrix;
        assert!((m.get(0, 0) - 0.25).abs() < 1e-15);
        assert!((m.get(1, 1) - 0.5).abs() < 1e-15);
        assert!((m.get(0, 1) - 1.0 / (2.0 * 2f64.sqrt())).abs() < 1e-15);
        assert_eq!(m.get(1, 2), 0.0);
    }

    #[test]
    fn regular_graph_schemes_coincide() {
        let g = cycle4();
        let a = g.normalize(Scheme::Renormalized).matrix;
        let b = g.normalize(Scheme::RowNormalized).matrix;
        assert!(a.max_abs_diff(&b) < 1e-15);
    }

    #[test]
    fn homophily_examples() {
        let g = cycle4();
        let s = g.node_homophily(&[0, 0, 0, 0]).unwrap();
        assert_eq!(s.per_node_h, vec![1.0; 4]);
        assert_eq!(s.graph_h, 1.0);
        let s = g.node_homophily(&[0, 1, 0, 1]).unwrap();
        assert_eq!(s.per_node_h, vec![0.0; 4]);
        assert_eq!(s.graph_h, 0.0);
        let s = path3().node_homophily(&[0, 0, 1]).unwrap();
        assert_eq!(s.per_node_h, vec![1.0, 0.5, 0.0]);
        assert_eq!(s.graph_h, 0.5);
    }

    #[test]
    fn homophily_rejects_isolated() {
        let g = build_graph([(0, 1)], 3).unwrap();
        assert!(matches!(
            g.node_homophily(&[0, 0, 0]),
            Err(Error::IsolatedNode(2))
        ));
        assert!(matches!(g.relative_degrees(), Err(Error::IsolatedNode(2))));
    }

    #[test]
    fn relative_degree_examples() {
        let s = cycle4().relative_degrees().unwrap();
        assert!(s.r.iter().all(|&r| r == 1.0));
        assert!(s.rbar.iter().all(|&r| r == 1.0));

        let s = star3().relative_degrees().unwrap();
        let sqrt2 = 2f64.sqrt();
        assert!((s.get(0, 1).unwrap() - sqrt2).abs() < 1e-15);
        assert!((s.rbar[0] - sqrt2).abs() < 1e-15);
        assert!((s.rbar[2] - sqrt2 / 2.0).abs() < 1e-15);

        let s = path3().relative_degrees().unwrap();
        assert!((s.rbar[1] - 1.5f64.sqrt()).abs() < 1e-15);
        assert!((s.rbar[1] - 1.22474).abs() < 1e-5);
    }

    #[test]
    fn effective_homophily_examples() {
        use Sign::*;
        let g = cycle4();
        assert_eq!(g.effective_homophily(&[Pos; 4]).unwrap(), vec![1.0; 4]);
        assert_eq!(
            g.effective_homophily(&[Pos, Neg, Pos, Neg]).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(
            path3().effective_homophily(&[Pos, Pos, Neg]).unwrap(),
            vec![1.0, 0.5, 0.0]
        );
    }

    #[test]
    fn empirical_effective_homophily_examples() {
        let g = cycle4();
        assert_eq!(
            g.empirical_effective_homophily(&[0; 4], &[true; 4]).unwrap(),
            vec![1.0; 4]
        );
        assert_eq!(
            g.empirical_effective_homophily(&[0; 4], &[false; 4]).unwrap(),
            vec![0.0; 4]
        );
        assert_eq!(
            path3()
                .empirical_effective_homophily(&[0, 0, 0], &[true, false, true])
                .unwrap(),
            vec![0.0, 1.0, 0.0]
        );
    }

    #[test]
    fn sparse_matmul_matches_dense() {
        let g = star3();
        let sp = g.normalized_sparse(Scheme::Renormalized);
        let x = Tensor::from_fn(4, 2, |r, c| (r * 2 + c) as f64 - 3.0);
        let dense = sp.to_dense().matmul(&x).unwrap();
        assert!(sp.matmul(&x).unwrap().max_abs_diff(&dense) < 1e-15);
    }
}
