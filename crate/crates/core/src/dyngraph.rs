//! Per-visit dynamic graph structure.
//!
//! A visit induces a diagnosis mask `m` and a neighbor mask `n` (connected
//! but not diagnosed). Four subgraph adjacency matrices follow: the
//! diagnosis-diagnosis complete graph, the diagnosis->neighbor and
//! neighbor->diagnosis bipartite parts, and the neighbor-neighbor graph.
//! Aggregation over them has two algebraically equal routes:
//!
//! - the oracle route materializes all four `d x d` matrices and multiplies
//!   them against the embedding tables;
//! - the optimized route rewrites every product as
//!   `mask * (E + A(m * M) + A(n * N))`, keeping every intermediate at
//!   `d x s`.
//!
//! The equivalence of the two routes is a test obligation, exercised by
//! [`run_equivalence`] and by the acceptance suite, including an
//! allocation-accounting check that the optimized route never allocates a
//! `d x d` buffer.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::cograph::{build_adjacency, count_cooccurrence, CoGraph};
use crate::ehr::Visit;
use crate::num::{kernels, track, GradTape, Tensor, LEAKY_SLOPE};
use crate::{Error, Result};

/// Relative tolerance for the oracle-vs-optimized aggregation comparison.
pub const AGGREGATE_TOL: f64 = 1e-10;

/// Dense 0/1 vector over the code universe.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    bits: Vec<bool>,
}

impl Mask {
    pub fn empty(d: usize) -> Self {
        Mask { bits: vec![false; d] }
    }

    pub fn from_indices(d: usize, indices: &[usize]) -> Self {
        let mut bits = vec![false; d];
        for &i in indices {
            bits[i] = true;
        }
        Mask { bits }
    }

    pub fn from_visit(visit: &Visit, d: usize) -> Self {
        Self::from_indices(d, visit.codes())
    }

    /// Universe size `d`.
    pub fn len(&self) -> usize {
        self.bits.len()
    }

    pub fn is_empty(&self) -> bool {
        !self.bits.iter().any(|&b| b)
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, i: usize) -> bool {
        self.bits[i]
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn indices(&self) -> Vec<usize> {
        self.bits
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    pub fn and(&self, other: &Mask) -> Mask {
        Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && b).collect(),
        }
    }

    pub fn or(&self, other: &Mask) -> Mask {
        Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a || b).collect(),
        }
    }

    /// `self AND NOT other`.
    pub fn minus(&self, other: &Mask) -> Mask {
        Mask {
            bits: self.bits.iter().zip(&other.bits).map(|(&a, &b)| a && !b).collect(),
        }
    }

    pub fn is_disjoint(&self, other: &Mask) -> bool {
        self.bits.iter().zip(&other.bits).all(|(&a, &b)| !(a && b))
    }
}

/// How visit neighbors are discovered in the asymmetric graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NeighborMode {
    /// A code is a neighbor when an edge exists in either direction
    /// between it and any diagnosis.
    #[default]
    Union,
    /// Only outgoing edges from diagnoses count.
    OutEdges,
}

/// Diagnosis mask and neighbor mask of one visit; always disjoint.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct VisitMasks {
    pub m: Mask,
    pub n: Mask,
}

impl VisitMasks {
    pub fn new(visit: &Visit, graph: &CoGraph, mode: NeighborMode) -> Self {
        let m = Mask::from_visit(visit, graph.d());
        let n = neighbor_vector(&m, graph, mode);
        VisitMasks { m, n }
    }
}

/// Neighbors of a diagnosis set: codes not diagnosed but adjacent to some
/// diagnosis.
pub fn neighbor_vector(m: &Mask, graph: &CoGraph, mode: NeighborMode) -> Mask {
    let mut bits = vec![false; graph.d()];
    for j in 0..graph.d() {
        if !m.get(j) {
            continue;
        }
        let adjacent = match mode {
            NeighborMode::Union => graph.undirected_neighbors(j),
            NeighborMode::OutEdges => graph.out_neighbors(j),
        };
        for &i in adjacent {
            if !m.get(i) {
                bits[i] = true;
            }
        }
    }
    Mask { bits }
}

/// The three disjoint diagnosis roles of a visit at `t >= 2`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RoleMasks {
    /// Diagnosed now and at the previous visit.
    pub persistent: Mask,
    /// Diagnosed now, a neighbor at the previous visit.
    pub emerging_neighbor: Mask,
    /// Diagnosed now, neither diagnosed nor neighboring before.
    pub emerging_unrelated: Mask,
}

/// Split a visit's diagnoses by their role at the previous visit.
pub fn split_roles(m_t: &Mask, m_prev: &Mask, n_prev: &Mask) -> RoleMasks {
    let known = m_prev.or(n_prev);
    RoleMasks {
        persistent: m_t.and(m_prev),
        emerging_neighbor: m_t.and(n_prev),
        emerging_unrelated: m_t.minus(&known),
    }
}

/// The four materialized per-visit subgraph adjacency matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct SubgraphSet {
    /// Diagnosis-diagnosis entries of `A`.
    pub mt: Tensor,
    /// Diagnosis-row, neighbor-column entries of `A`.
    pub bt: Tensor,
    /// Neighbor-row, diagnosis-column entries of `A`.
    pub bhat: Tensor,
    /// Neighbor-neighbor entries of `A`.
    pub nt: Tensor,
}

fn masked_matrix(a: &Tensor, d: usize, rows: &Mask, cols: &Mask) -> Tensor {
    let ad = a.data();
    let mut data = vec![0.0; d * d];
    for i in 0..d {
        if !rows.get(i) {
            continue;
        }
        for j in 0..d {
            if cols.get(j) {
                data[i * d + j] = ad[i * d + j];
            }
        }
    }
    Tensor::matrix(d, d, data).expect("square")
}

/// Materialize the subgraphs through the row/column masking identities
/// `m * A * m'`, `m * A * n'`, `n * A * m'`, `n * A * n'`.
pub fn oracle_subgraphs(m: &Mask, n: &Mask, graph: &CoGraph) -> SubgraphSet {
    let d = graph.d();
    let a = graph.adjacency();
    SubgraphSet {
        mt: masked_matrix(a, d, m, m),
        bt: masked_matrix(a, d, m, n),
        bhat: masked_matrix(a, d, n, m),
        nt: masked_matrix(a, d, n, n),
    }
}

/// Materialize the subgraphs straight from their case definitions, with an
/// explicit graph-adjacency test on the bipartite parts. Test oracle for
/// the masking identities.
pub fn subgraphs_by_definition(m: &Mask, n: &Mask, graph: &CoGraph) -> SubgraphSet {
    let d = graph.d();
    let mut mt = vec![0.0; d * d];
    let mut bt = vec![0.0; d * d];
    let mut bhat = vec![0.0; d * d];
    let mut nt = vec![0.0; d * d];
    for i in 0..d {
        let connected = graph.undirected_neighbors(i);
        for j in 0..d {
            let w = graph.weight(i, j);
            let adjacent = connected.binary_search(&j).is_ok();
            if m.get(i) && m.get(j) && i != j {
                mt[i * d + j] = w;
            }
            if m.get(i) && n.get(j) && adjacent {
                bt[i * d + j] = w;
            }
            if n.get(i) && m.get(j) && adjacent {
                bhat[i * d + j] = w;
            }
            if n.get(i) && n.get(j) {
                nt[i * d + j] = w;
            }
        }
    }
    SubgraphSet {
        mt: Tensor::matrix(d, d, mt).expect("square"),
        bt: Tensor::matrix(d, d, bt).expect("square"),
        bhat: Tensor::matrix(d, d, bhat).expect("square"),
        nt: Tensor::matrix(d, d, nt).expect("square"),
    }
}

/// Embedding tables of the dynamic graph layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphEmbeddings {
    /// Disease-as-diagnosis embeddings, `d x s`.
    pub m_emb: Tensor,
    /// Disease-as-neighbor embeddings, `d x s`.
    pub n_emb: Tensor,
    /// Unrelated-disease embeddings, `d x s'`.
    pub r_emb: Tensor,
    /// Graph layer weight, `s x s'`.
    pub w: Tensor,
}

fn mask_tensor_rows(x: &Tensor, mask: &Mask) -> Tensor {
    let (r, c) = x.dims2().expect("2-D");
    let xd = x.data();
    let mut data = vec![0.0; r * c];
    for i in 0..r {
        if mask.get(i) {
            data[i * c..(i + 1) * c].copy_from_slice(&xd[i * c..(i + 1) * c]);
        }
    }
    Tensor::matrix(r, c, data).expect("same shape")
}

fn add3(a: &Tensor, b: &Tensor, c: &Tensor) -> Tensor {
    let data: Vec<f64> = a
        .data()
        .iter()
        .zip(b.data())
        .zip(c.data())
        .map(|((x, y), z)| x + y + z)
        .collect();
    Tensor::matrix(a.shape()[0], a.shape()[1], data).expect("same shape")
}

/// Brute-force aggregation through the materialized subgraphs:
/// `Z_D = m*M + Mt.M + Bt.N` and `Z_N = n*N + Nt.N + Bhat.M`.
///
/// Test oracle and benchmark baseline; the training path never runs this.
pub fn oracle_aggregate(m: &Mask, n: &Mask, s: &SubgraphSet, e: &GraphEmbeddings) -> (Tensor, Tensor) {
    let d = m.len();
    let (_, width) = e.m_emb.dims2().expect("2-D");
    let mm = Tensor::matrix(d, width, kernels::matmul(s.mt.data(), e.m_emb.data(), d, d, width)).unwrap();
    let bn = Tensor::matrix(d, width, kernels::matmul(s.bt.data(), e.n_emb.data(), d, d, width)).unwrap();
    let z_d = add3(&mask_tensor_rows(&e.m_emb, m), &mm, &bn);
    let nn = Tensor::matrix(d, width, kernels::matmul(s.nt.data(), e.n_emb.data(), d, d, width)).unwrap();
    let bm = Tensor::matrix(d, width, kernels::matmul(s.bhat.data(), e.m_emb.data(), d, d, width)).unwrap();
    let z_n = add3(&mask_tensor_rows(&e.n_emb, n), &nn, &bm);
    (z_d, z_n)
}

/// Memory-optimized aggregation:
/// `Z_D = m * (M + A(m*M) + A(n*N))`, `Z_N = n * (N + A(n*N) + A(m*M))`.
///
/// Never materializes a per-visit `d x d` matrix; every intermediate is
/// `d x s`.
pub fn aggregate_optimized(m: &Mask, n: &Mask, graph: &CoGraph, e: &GraphEmbeddings) -> (Tensor, Tensor) {
    let d = graph.d();
    let (_, width) = e.m_emb.dims2().expect("2-D");
    let idx_m = m.indices();
    let idx_n = n.indices();
    let a = graph.adjacency().data();
    let am = Tensor::matrix(d, width, kernels::col_select_matmul(a, e.m_emb.data(), d, width, &idx_m)).unwrap();
    let an = Tensor::matrix(d, width, kernels::col_select_matmul(a, e.n_emb.data(), d, width, &idx_n)).unwrap();
    let z_d = mask_tensor_rows(&add3(&e.m_emb, &am, &an), m);
    let z_n = mask_tensor_rows(&add3(&e.n_emb, &an, &am), n);
    (z_d, z_n)
}

/// Tape-recorded version of [`aggregate_optimized`] used by the model
/// forward pass; gradients flow into the embedding tables.
pub fn aggregate_optimized_taped(
    tape: &mut GradTape,
    graph: &CoGraph,
    m: &Mask,
    n: &Mask,
    m_emb: &Tensor,
    n_emb: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let a = graph.adjacency();
    let am = tape.graph_aggregate(a, m_emb, &m.indices())?;
    let an = tape.graph_aggregate(a, n_emb, &n.indices())?;
    // Same association order as the untaped route, so the two agree bitwise.
    let zd_partial = tape.add(m_emb, &am)?;
    let zd_sum = tape.add(&zd_partial, &an)?;
    let z_d = tape.mask_rows(&zd_sum, m.bits())?;
    let zn_partial = tape.add(n_emb, &an)?;
    let zn_sum = tape.add(&zn_partial, &am)?;
    let z_n = tape.mask_rows(&zn_sum, n.bits())?;
    Ok((z_d, z_n))
}

/// One graph layer: `H = LeakyReLU(Z . W)` applied to both aggregates.
pub fn graph_layer(z_d: &Tensor, z_n: &Tensor, w: &Tensor) -> Result<(Tensor, Tensor)> {
    let (d, s) = z_d.dims2()?;
    let (s2, s_out) = w.dims2()?;
    if s != s2 || z_n.dims2()? != (d, s) {
        return Err(Error::shape(
            "graph_layer",
            format!("z {d}x{s}, w {s2}x{s_out}, z_n {:?}", z_n.shape()),
        ));
    }
    let h = |z: &Tensor| {
        let prod = kernels::matmul(z.data(), w.data(), d, s, s_out);
        Tensor::matrix(d, s_out, kernels::leaky_relu(&prod, LEAKY_SLOPE)).expect("sized")
    };
    Ok((h(z_d), h(z_n)))
}

// ---------------------------------------------------------------------------
// Equivalence harness
// ---------------------------------------------------------------------------

/// Outcome of the subgraph/aggregation equivalence suites.
#[derive(Debug, Clone, Default)]
pub struct EquivalenceReport {
    pub trials: usize,
    /// Entries where the masked identities differ from the definitions
    /// (must be zero; the comparison is exact).
    pub subgraph_mismatches: usize,
    /// Worst relative deviation between the two aggregation routes.
    pub max_aggregate_dev: f64,
    /// `d x d`-sized allocations observed on the optimized path.
    pub dd_allocations: usize,
    /// Largest single allocation on the optimized path, in elements.
    pub optimized_largest_alloc: usize,
    /// Instance seeds that violated a bound.
    pub failed_seeds: Vec<u64>,
}

impl EquivalenceReport {
    pub fn passed(&self) -> bool {
        self.subgraph_mismatches == 0
            && self.max_aggregate_dev <= AGGREGATE_TOL
            && self.dd_allocations == 0
            && self.failed_seeds.is_empty()
    }
}

/// A randomly built graph instance for the equivalence suites.
struct Instance {
    graph: CoGraph,
    m: Mask,
    n: Mask,
    emb: GraphEmbeddings,
}

fn random_instance(seed: u64, max_d: usize) -> Instance {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let max_d = max_d.max(3);
    loop {
        let d = rng.random_range(3..=max_d);
        let s = rng.random_range(1..=6.min(d - 1));
        let s_out = rng.random_range(1..=6.min(d - 1));
        let visits: Vec<Visit> = (0..2 * d)
            .map(|_| {
                let k = rng.random_range(1..=4.min(d));
                let codes: Vec<usize> = (0..k).map(|_| rng.random_range(0..d)).collect();
                Visit::new(codes, d).expect("nonempty")
            })
            .collect();
        let freq = count_cooccurrence(&visits, d);
        let graph = build_adjacency(&freq, 0.01).expect("valid delta");
        if graph.to_triples().is_empty() {
            continue;
        }
        let m_size = rng.random_range(1..=4.min(d));
        let mut picks: Vec<usize> = (0..m_size).map(|_| rng.random_range(0..d)).collect();
        picks.sort_unstable();
        picks.dedup();
        let m = Mask::from_indices(d, &picks);
        let n = neighbor_vector(&m, &graph, NeighborMode::Union);
        let emb = GraphEmbeddings {
            m_emb: Tensor::uniform(&[d, s], 1.0, &mut rng),
            n_emb: Tensor::uniform(&[d, s], 1.0, &mut rng),
            r_emb: Tensor::uniform(&[d, s_out], 1.0, &mut rng),
            w: Tensor::uniform(&[s, s_out], 1.0, &mut rng),
        };
        return Instance { graph, m, n, emb };
    }
}

fn rel_dev(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1.0)
}

/// Run the Theorem 1 / Theorem 2 equivalence suites on `trials` random
/// instances with `d <= max_d`.
///
/// `inject_fault` perturbs one adjacency entry of the optimized route's
/// input on every instance, a self-test that the comparison actually
/// detects deviations.
pub fn run_equivalence(trials: usize, max_d: usize, seed: u64, inject_fault: bool) -> EquivalenceReport {
    let mut report = EquivalenceReport::default();
    for t in 0..trials {
        let instance_seed = seed.wrapping_add(t as u64);
        let inst = random_instance(instance_seed, max_d);
        let d = inst.graph.d();
        let mut failed = false;

        // Subgraph identities vs. case definitions, entrywise exact.
        let by_identity = oracle_subgraphs(&inst.m, &inst.n, &inst.graph);
        let by_definition = subgraphs_by_definition(&inst.m, &inst.n, &inst.graph);
        for (lhs, rhs) in [
            (&by_identity.mt, &by_definition.mt),
            (&by_identity.bt, &by_definition.bt),
            (&by_identity.bhat, &by_definition.bhat),
            (&by_identity.nt, &by_definition.nt),
        ] {
            let mismatches = lhs.data().iter().zip(rhs.data()).filter(|(a, b)| a != b).count();
            if mismatches > 0 {
                report.subgraph_mismatches += mismatches;
                failed = true;
            }
        }

        // Aggregation routes, within AGGREGATE_TOL; the optimized route may
        // not allocate anything d*d sized.
        let opt_graph = if inject_fault {
            let mut triples = inst.graph.to_triples();
            triples[0].2 *= 1.5;
            CoGraph::from_triples(d, inst.graph.delta(), &triples).expect("valid triples")
        } else {
            inst.graph.clone()
        };
        let (oracle_zd, oracle_zn) = oracle_aggregate(
            &inst.m,
            &inst.n,
            &oracle_subgraphs(&inst.m, &inst.n, &inst.graph),
            &inst.emb,
        );
        let ((opt_zd, opt_zn), stats) = track::with_tracking(d * d, || {
            aggregate_optimized(&inst.m, &inst.n, &opt_graph, &inst.emb)
        });
        report.dd_allocations += stats.count_at_threshold;
        report.optimized_largest_alloc = report.optimized_largest_alloc.max(stats.largest_elems);
        if stats.count_at_threshold > 0 {
            failed = true;
        }
        for (a, b) in oracle_zd.data().iter().zip(opt_zd.data()) {
            let dev = rel_dev(*a, *b);
            if dev > report.max_aggregate_dev {
                report.max_aggregate_dev = dev;
            }
        }
        for (a, b) in oracle_zn.data().iter().zip(opt_zn.data()) {
            let dev = rel_dev(*a, *b);
            if dev > report.max_aggregate_dev {
                report.max_aggregate_dev = dev;
            }
        }
        if report.max_aggregate_dev > AGGREGATE_TOL {
            failed = true;
        }

        if failed {
            report.failed_seeds.push(instance_seed);
        }
        report.trials += 1;
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cograph;

    /// The worked four-visit graph over codes {c1..c4}.
    fn worked_graph() -> CoGraph {
        let visits: Vec<Visit> = [vec![0, 1], vec![0, 1, 2], vec![1, 2], vec![2]]
            .into_iter()
            .map(|codes| Visit::new(codes, 4).unwrap())
            .collect();
        cograph::build_adjacency(&cograph::count_cooccurrence(&visits, 4), 0.01).unwrap()
    }

    #[test]
    fn neighbors_of_first_code() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        assert_eq!(n.indices(), vec![1, 2]);
        assert!(m.is_disjoint(&n));
    }

    #[test]
    fn covering_all_connected_codes_leaves_no_neighbors() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0, 1, 2]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        assert!(n.is_empty());
        // The isolated code is never a neighbor.
        let m = Mask::from_indices(4, &[3]);
        assert!(neighbor_vector(&m, &g, NeighborMode::Union).is_empty());
    }

    #[test]
    fn empty_graph_has_no_neighbors() {
        let g = CoGraph::from_triples(3, 0.01, &[]).unwrap();
        let m = Mask::from_indices(3, &[0, 2]);
        assert!(neighbor_vector(&m, &g, NeighborMode::Union).is_empty());
        assert!(neighbor_vector(&m, &g, NeighborMode::OutEdges).is_empty());
    }

    #[test]
    fn out_edges_mode_follows_rows_only() {
        // Single directed edge 0 -> 1.
        let g = CoGraph::from_triples(3, 0.01, &[(0, 1, 1.0)]).unwrap();
        let m = Mask::from_indices(3, &[1]);
        assert!(neighbor_vector(&m, &g, NeighborMode::OutEdges).is_empty());
        assert_eq!(neighbor_vector(&m, &g, NeighborMode::Union).indices(), vec![0]);
    }

    #[test]
    fn role_split_matches_boolean_evaluation() {
        let d = 4;
        let roles = split_roles(
            &Mask::from_indices(d, &[0, 1, 2]),
            &Mask::from_indices(d, &[0, 1]),
            &Mask::from_indices(d, &[2]),
        );
        assert_eq!(roles.persistent.indices(), vec![0, 1]);
        assert_eq!(roles.emerging_neighbor.indices(), vec![2]);
        assert!(roles.emerging_unrelated.is_empty());

        // Previous diagnosis was the isolated code; everything new is
        // unrelated.
        let roles = split_roles(
            &Mask::from_indices(d, &[0]),
            &Mask::from_indices(d, &[3]),
            &Mask::empty(d),
        );
        assert_eq!(roles.emerging_unrelated.indices(), vec![0]);
        assert!(roles.persistent.is_empty());

        // Identical visits: everything persistent.
        let m = Mask::from_indices(d, &[1, 2]);
        let roles = split_roles(&m, &m, &Mask::empty(d));
        assert_eq!(roles.persistent, m);
        assert!(roles.emerging_neighbor.is_empty());
        assert!(roles.emerging_unrelated.is_empty());
    }

    #[test]
    fn role_split_partitions_for_random_masks() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let d = rng.random_range(1..30);
            let mut m_prev = Mask::empty(d);
            let mut n_prev = Mask::empty(d);
            let mut m_t = Mask::empty(d);
            for i in 0..d {
                m_t.bits[i] = rng.random_bool(0.4);
                if rng.random_bool(0.3) {
                    m_prev.bits[i] = true;
                } else if rng.random_bool(0.3) {
                    n_prev.bits[i] = true;
                }
            }
            assert!(m_prev.is_disjoint(&n_prev));
            let roles = split_roles(&m_t, &m_prev, &n_prev);
            assert!(roles.persistent.is_disjoint(&roles.emerging_neighbor));
            assert!(roles.persistent.is_disjoint(&roles.emerging_unrelated));
            assert!(roles.emerging_neighbor.is_disjoint(&roles.emerging_unrelated));
            let union = roles.persistent.or(&roles.emerging_neighbor).or(&roles.emerging_unrelated);
            assert_eq!(union, m_t);
        }
    }

    #[test]
    fn worked_subgraph_entries() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        let s = oracle_subgraphs(&m, &n, &g);
        assert!(s.mt.data().iter().all(|&v| v == 0.0), "single diagnosis has no pairs");
        assert!((s.bt.get2(0, 1) - 2.0 / 3.0).abs() < 1e-12);
        assert!((s.bt.get2(0, 2) - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(s.bt.get2(0, 3), 0.0);
        assert!((s.bhat.get2(1, 0) - 0.5).abs() < 1e-12);
        assert!((s.bhat.get2(2, 0) - 1.0 / 3.0).abs() < 1e-12);
        assert!((s.nt.get2(1, 2) - 0.5).abs() < 1e-12);
        assert!((s.nt.get2(2, 1) - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn empty_neighbors_zero_the_bipartite_and_neighbor_graphs() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0, 1, 2]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        assert!(n.is_empty());
        let s = oracle_subgraphs(&m, &n, &g);
        assert!(s.bt.data().iter().all(|&v| v == 0.0));
        assert!(s.bhat.data().iter().all(|&v| v == 0.0));
        assert!(s.nt.data().iter().all(|&v| v == 0.0));
    }

    fn ones_embeddings(d: usize, s: usize, s_out: usize) -> GraphEmbeddings {
        GraphEmbeddings {
            m_emb: Tensor::filled(&[d, s], 1.0),
            n_emb: Tensor::filled(&[d, s], 1.0),
            r_emb: Tensor::filled(&[d, s_out], 1.0),
            w: Tensor::filled(&[s, s_out], 1.0),
        }
    }

    #[test]
    fn worked_aggregate_value() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        let e = ones_embeddings(4, 1, 1);
        let s = oracle_subgraphs(&m, &n, &g);
        let (z_d, z_n) = oracle_aggregate(&m, &n, &s, &e);
        // Row c1: own embedding 1 + no diagnosis pairs + neighbors 2/3 + 1/3.
        assert!((z_d.get2(0, 0) - 2.0).abs() < 1e-12);
        // Rows outside m (resp. n) are zero.
        for i in 1..4 {
            assert_eq!(z_d.get2(i, 0), 0.0);
        }
        assert_eq!(z_n.get2(0, 0), 0.0);
        assert_eq!(z_n.get2(3, 0), 0.0);
    }

    #[test]
    fn optimized_matches_oracle_on_worked_instance() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        let e = ones_embeddings(4, 1, 1);
        let s = oracle_subgraphs(&m, &n, &g);
        let (zd_o, zn_o) = oracle_aggregate(&m, &n, &s, &e);
        let (zd_f, zn_f) = aggregate_optimized(&m, &n, &g, &e);
        for (a, b) in zd_o.data().iter().zip(zd_f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in zn_o.data().iter().zip(zn_f.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn saturated_mask_reduces_to_full_local_context() {
        // m covers everything, n empty: Z_D = M + A.M.
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0, 1, 2, 3]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        assert!(n.is_empty());
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let m_emb = Tensor::uniform(&[4, 2], 1.0, &mut rng);
        let e = GraphEmbeddings {
            m_emb: m_emb.clone(),
            n_emb: Tensor::uniform(&[4, 2], 1.0, &mut rng),
            r_emb: Tensor::uniform(&[4, 2], 1.0, &mut rng),
            w: Tensor::uniform(&[2, 2], 1.0, &mut rng),
        };
        let (z_d, _) = aggregate_optimized(&m, &n, &g, &e);
        let am = kernels::matmul(g.adjacency().data(), m_emb.data(), 4, 4, 2);
        for i in 0..4 {
            for j in 0..2 {
                let expect = m_emb.get2(i, j) + am[i * 2 + j];
                assert!((z_d.get2(i, j) - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn optimized_path_never_allocates_dxd() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        let e = ones_embeddings(4, 1, 1);
        let (_, stats) = track::with_tracking(16, || aggregate_optimized(&m, &n, &g, &e));
        assert_eq!(stats.count_at_threshold, 0);
        assert!(stats.largest_elems <= 4);
        // The oracle route, by contrast, does materialize d x d matrices.
        let (_, stats) = track::with_tracking(16, || oracle_subgraphs(&m, &n, &g));
        assert!(stats.count_at_threshold >= 4);
    }

    #[test]
    fn taped_aggregate_matches_pure_route() {
        let g = worked_graph();
        let m = Mask::from_indices(4, &[0, 2]);
        let n = neighbor_vector(&m, &g, NeighborMode::Union);
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let e = GraphEmbeddings {
            m_emb: Tensor::uniform(&[4, 3], 1.0, &mut rng),
            n_emb: Tensor::uniform(&[4, 3], 1.0, &mut rng),
            r_emb: Tensor::uniform(&[4, 2], 1.0, &mut rng),
            w: Tensor::uniform(&[3, 2], 1.0, &mut rng),
        };
        let (zd_pure, zn_pure) = aggregate_optimized(&m, &n, &g, &e);
        let mut tape = GradTape::new();
        let (zd_tape, zn_tape) = aggregate_optimized_taped(&mut tape, &g, &m, &n, &e.m_emb, &e.n_emb).unwrap();
        assert_eq!(zd_pure.data(), zd_tape.data());
        assert_eq!(zn_pure.data(), zn_tape.data());
    }

    #[test]
    fn graph_layer_slope_and_zero() {
        let z = Tensor::zeros(&[2, 2]);
        let (h, _) = graph_layer(&z, &z, &Tensor::eye(2)).unwrap();
        assert!(h.data().iter().all(|&v| v == 0.0));
        let z = Tensor::matrix(2, 2, vec![-1.0, 2.0, 0.5, -4.0]).unwrap();
        let (h, _) = graph_layer(&z, &z, &Tensor::eye(2)).unwrap();
        assert_eq!(h.data(), &[-0.01, 2.0, 0.5, -0.04]);
        assert!(graph_layer(&z, &z, &Tensor::eye(3)).is_err());
    }

    #[test]
    fn equivalence_suite_passes_and_detects_faults() {
        let report = run_equivalence(25, 30, 99, false);
        assert!(report.passed(), "clean run failed: {report:?}");
        assert_eq!(report.trials, 25);

        let faulty = run_equivalence(5, 20, 99, true);
        assert!(!faulty.passed(), "fault injection went undetected");
        assert!(!faulty.failed_seeds.is_empty());
    }
}
