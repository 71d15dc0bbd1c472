//! Global disease co-occurrence graph.
//!
//! Co-occurrence counts come from the *training feature visits only*; the
//! adjacency is row-normalized over the pairs that pass the frequency
//! threshold, which makes it asymmetric: two diseases that co-occur equally
//! often still influence each other with different weights when their
//! overall co-occurrence totals differ.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::ehr::Visit;
use crate::num::Tensor;
use crate::{Error, Result};

/// Default frequency threshold for keeping an edge.
pub const DEFAULT_DELTA: f64 = 0.01;

/// Symmetric pairwise co-occurrence counts with a zero diagonal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FreqMatrix {
    d: usize,
    counts: Vec<u64>,
}

impl FreqMatrix {
    pub fn zeros(d: usize) -> Self {
        FreqMatrix { d, counts: vec![0; d * d] }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn get(&self, i: usize, j: usize) -> u64 {
        self.counts[i * self.d + j]
    }

    fn bump(&mut self, i: usize, j: usize) {
        self.counts[i * self.d + j] += 1;
        self.counts[j * self.d + i] += 1;
    }
}

/// Count pairwise co-occurrence over visits: every unordered code pair
/// appearing together in a single visit adds one to both `f[i][j]` and
/// `f[j][i]`, once per visit it appears in.
pub fn count_cooccurrence<'a, I>(feature_visits: I, d: usize) -> FreqMatrix
where
    I: IntoIterator<Item = &'a Visit>,
{
    let mut f = FreqMatrix::zeros(d);
    for visit in feature_visits {
        let codes = visit.codes();
        for (pos, &i) in codes.iter().enumerate() {
            for &j in &codes[pos + 1..] {
                f.bump(i, j);
            }
        }
    }
    f
}

/// The weighted global graph: a dense `d x d` adjacency with zero diagonal
/// whose nonzero rows are normalized over the threshold-qualified set, plus
/// cached adjacency lists for neighbor discovery.
#[derive(Debug, Clone, PartialEq)]
pub struct CoGraph {
    d: usize,
    delta: f64,
    a: Tensor,
    /// Nonzero columns per row (outgoing edges).
    row_adj: Vec<Vec<usize>>,
    /// Codes adjacent in either direction, per code.
    und_adj: Vec<Vec<usize>>,
}

impl CoGraph {
    pub fn d(&self) -> usize {
        self.d
    }

    pub fn delta(&self) -> f64 {
        self.delta
    }

    /// Dense adjacency matrix.
    pub fn adjacency(&self) -> &Tensor {
        &self.a
    }

    pub fn weight(&self, i: usize, j: usize) -> f64 {
        self.a.get2(i, j)
    }

    /// Codes reachable by an outgoing edge from `i`.
    pub fn out_neighbors(&self, i: usize) -> &[usize] {
        &self.row_adj[i]
    }

    /// Codes adjacent to `i` in either direction.
    pub fn undirected_neighbors(&self, i: usize) -> &[usize] {
        &self.und_adj[i]
    }

    /// Nonzero entries as `(row, col, weight)` triples.
    pub fn to_triples(&self) -> Vec<(usize, usize, f64)> {
        let mut out = Vec::new();
        for i in 0..self.d {
            for &j in &self.row_adj[i] {
                out.push((i, j, self.weight(i, j)));
            }
        }
        out
    }

    /// Rebuild a graph from stored triples.
    pub fn from_triples(d: usize, delta: f64, triples: &[(usize, usize, f64)]) -> Result<Self> {
        let mut data = vec![0.0; d * d];
        for &(i, j, w) in triples {
            if i >= d || j >= d {
                return Err(Error::data(None, format!("edge ({i}, {j}) out of bounds for d={d}")));
            }
            if i == j {
                return Err(Error::data(None, format!("self-loop on code {i}")));
            }
            data[i * d + j] = w;
        }
        Ok(Self::from_dense(d, delta, data))
    }

    fn from_dense(d: usize, delta: f64, data: Vec<f64>) -> Self {
        let mut row_adj = vec![Vec::new(); d];
        let mut und_adj = vec![Vec::new(); d];
        for i in 0..d {
            for j in 0..d {
                if data[i * d + j] > 0.0 {
                    row_adj[i].push(j);
                }
            }
        }
        for i in 0..d {
            for j in 0..d {
                if i != j && (data[i * d + j] > 0.0 || data[j * d + i] > 0.0) {
                    und_adj[i].push(j);
                }
            }
        }
        let a = Tensor::matrix(d, d, data).expect("square by construction");
        CoGraph { d, delta, a, row_adj, und_adj }
    }
}

/// Build the adjacency matrix from co-occurrence counts.
///
/// Per row `i`: a partner `j` qualifies when `f[i][j] / sum_j f[i][j]`
/// reaches `delta` (ties at exactly `delta` qualify; the ratio denominator
/// is the *full* row sum). Qualified entries are `f[i][j] / q_i` with `q_i`
/// the sum of qualified counts, so every nonzero row sums to one. Rows with
/// no qualified partner stay zero.
pub fn build_adjacency(f: &FreqMatrix, delta: f64) -> Result<CoGraph> {
    if !(0.0..=1.0).contains(&delta) {
        return Err(Error::config(format!("delta must be in [0, 1], got {delta}")));
    }
    let d = f.d();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        let row = &f.counts[i * d..(i + 1) * d];
        let row_sum: u64 = row.iter().sum();
        if row_sum == 0 {
            continue;
        }
        let rs = row_sum as f64;
        let mut qualified: Vec<usize> = Vec::new();
        let mut q_i = 0u64;
        for (j, &count) in row.iter().enumerate() {
            if j != i && count > 0 && count as f64 / rs >= delta {
                qualified.push(j);
                q_i += count;
            }
        }
        if q_i == 0 {
            continue;
        }
        for j in qualified {
            data[i * d + j] = row[j] as f64 / q_i as f64;
        }
    }
    Ok(CoGraph::from_dense(d, delta, data))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn worked_visits(d: usize) -> Vec<Visit> {
        [vec![0, 1], vec![0, 1, 2], vec![1, 2], vec![2]]
            .into_iter()
            .map(|codes| Visit::new(codes, d).unwrap())
            .collect()
    }

    #[test]
    fn counts_match_hand_tally() {
        let visits = worked_visits(4);
        let f = count_cooccurrence(&visits, 4);
        assert_eq!(f.get(0, 1), 2);
        assert_eq!(f.get(1, 0), 2);
        assert_eq!(f.get(0, 2), 1);
        assert_eq!(f.get(1, 2), 2);
        for k in 0..4 {
            assert_eq!(f.get(3, k), 0);
            assert_eq!(f.get(k, 3), 0);
            assert_eq!(f.get(k, k), 0);
        }
    }

    #[test]
    fn single_code_visits_produce_no_pairs() {
        let visits: Vec<Visit> = (0..3).map(|c| Visit::new(vec![c], 3).unwrap()).collect();
        let f = count_cooccurrence(&visits, 3);
        assert!(f.counts.iter().all(|&c| c == 0));
    }

    #[test]
    fn repeated_pair_across_visits_counts_twice() {
        let visits = vec![Visit::new(vec![0, 1], 2).unwrap(), Visit::new(vec![0, 1], 2).unwrap()];
        let f = count_cooccurrence(&visits, 2);
        assert_eq!(f.get(0, 1), 2);
    }

    #[test]
    fn worked_adjacency_values() {
        let f = count_cooccurrence(&worked_visits(4), 4);
        let g = build_adjacency(&f, 0.01).unwrap();
        let expect = [
            [0.0, 2.0 / 3.0, 1.0 / 3.0, 0.0],
            [0.5, 0.0, 0.5, 0.0],
            [1.0 / 3.0, 2.0 / 3.0, 0.0, 0.0],
            [0.0, 0.0, 0.0, 0.0],
        ];
        for i in 0..4 {
            for j in 0..4 {
                assert!(
                    (g.weight(i, j) - expect[i][j]).abs() < 1e-12,
                    "A[{i}][{j}] = {} expected {}",
                    g.weight(i, j),
                    expect[i][j]
                );
            }
        }
        // Asymmetric where totals differ.
        assert!(g.weight(0, 1) != g.weight(1, 0));
    }

    #[test]
    fn delta_one_filters_unequal_rows() {
        let f = count_cooccurrence(&worked_visits(4), 4);
        let g = build_adjacency(&f, 1.0).unwrap();
        for j in 0..4 {
            assert_eq!(g.weight(0, j), 0.0, "row with 2/3 and 1/3 ratios survives delta=1");
        }
    }

    #[test]
    fn exact_tie_at_delta_qualifies() {
        // Row 1 has ratios 1/2 and 1/2; delta = 0.5 keeps both.
        let f = count_cooccurrence(&worked_visits(4), 4);
        let g = build_adjacency(&f, 0.5).unwrap();
        assert!((g.weight(1, 0) - 0.5).abs() < 1e-12);
        assert!((g.weight(1, 2) - 0.5).abs() < 1e-12);
        // Row 0 keeps only the 2/3 partner, renormalized to 1.
        assert!((g.weight(0, 1) - 1.0).abs() < 1e-12);
        assert_eq!(g.weight(0, 2), 0.0);
    }

    #[test]
    fn isolated_code_has_zero_row_and_column() {
        let f = count_cooccurrence(&worked_visits(4), 4);
        let g = build_adjacency(&f, 0.01).unwrap();
        for k in 0..4 {
            assert_eq!(g.weight(3, k), 0.0);
            assert_eq!(g.weight(k, 3), 0.0);
        }
        assert!(g.undirected_neighbors(3).is_empty());
    }

    #[test]
    fn delta_out_of_range_rejected() {
        let f = FreqMatrix::zeros(2);
        assert!(build_adjacency(&f, -0.1).is_err());
        assert!(build_adjacency(&f, 1.5).is_err());
    }

    fn random_freq(d: usize, rng: &mut ChaCha12Rng) -> FreqMatrix {
        let mut f = FreqMatrix::zeros(d);
        for i in 0..d {
            for j in (i + 1)..d {
                if rng.random_bool(0.4) {
                    let c = rng.random_range(1..20u64);
                    f.counts[i * d + j] = c;
                    f.counts[j * d + i] = c;
                }
            }
        }
        f
    }

    #[test]
    fn rows_sum_to_one_or_zero_and_edges_need_counts() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        for _ in 0..50 {
            let d = rng.random_range(2..12);
            let f = random_freq(d, &mut rng);
            let delta = rng.random_range(0.0..0.5);
            let g = build_adjacency(&f, delta).unwrap();
            for i in 0..d {
                assert_eq!(g.weight(i, i), 0.0);
                let sum: f64 = (0..d).map(|j| g.weight(i, j)).sum();
                assert!(
                    sum.abs() < 1e-9 || (sum - 1.0).abs() < 1e-9,
                    "row {i} sums to {sum}"
                );
                for j in 0..d {
                    let w = g.weight(i, j);
                    assert!(w >= 0.0);
                    if w > 0.0 {
                        assert!(f.get(i, j) > 0, "edge without co-occurrence");
                    }
                }
            }
        }
    }

    #[test]
    fn raising_delta_never_adds_edges() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..30 {
            let d = rng.random_range(2..10);
            let f = random_freq(d, &mut rng);
            let lo = build_adjacency(&f, 0.05).unwrap();
            let hi = build_adjacency(&f, 0.25).unwrap();
            for i in 0..d {
                for j in 0..d {
                    if hi.weight(i, j) > 0.0 {
                        assert!(lo.weight(i, j) > 0.0, "edge ({i},{j}) appeared at higher delta");
                    }
                }
            }
        }
    }

    #[test]
    fn triples_roundtrip() {
        let f = count_cooccurrence(&worked_visits(4), 4);
        let g = build_adjacency(&f, 0.01).unwrap();
        let rebuilt = CoGraph::from_triples(g.d(), g.delta(), &g.to_triples()).unwrap();
        assert_eq!(g, rebuilt);
    }
}
