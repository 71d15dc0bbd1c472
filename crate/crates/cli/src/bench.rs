//! Benchmark of naive (materialized subgraph) vs. optimized aggregation:
//! peak transient allocation and wall time as the code universe grows.

use std::time::Instant;

use anyhow::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;

use sequela_core::cograph::{build_adjacency, count_cooccurrence, CoGraph};
use sequela_core::dyngraph::{
    aggregate_optimized, neighbor_vector, oracle_aggregate, oracle_subgraphs, GraphEmbeddings, Mask,
    NeighborMode,
};
use sequela_core::ehr::Visit;
use sequela_core::num::{track, Tensor};

/// One benchmark measurement.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchRow {
    pub d: usize,
    pub s: usize,
    /// Largest single transient allocation on the naive path, bytes.
    pub naive_bytes: usize,
    /// Largest single transient allocation on the optimized path, bytes.
    pub optimized_bytes: usize,
    pub naive_ms: f64,
    pub optimized_ms: f64,
}

/// Render rows as CSV with the declared header.
pub fn to_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("d,s,naive_bytes,optimized_bytes,naive_ms,optimized_ms\n");
    for r in rows {
        out.push_str(&format!(
            "{},{},{},{},{:.3},{:.3}\n",
            r.d, r.s, r.naive_bytes, r.optimized_bytes, r.naive_ms, r.optimized_ms
        ));
    }
    out
}

/// A clustered random graph plus a visit mask sized like a real admission.
fn bench_instance(d: usize, seed: u64) -> (CoGraph, Mask, Mask) {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let cluster = 20.min(d);
    // Enough visits within small windows to create dense local structure.
    let visits: Vec<Visit> = (0..2 * d / cluster.max(1))
        .flat_map(|block| {
            let start = (block * cluster) % d;
            (0..10).map(move |_| (start, block))
        })
        .map(|(start, block)| {
            let mut rng = ChaCha12Rng::seed_from_u64(seed ^ ((start as u64) << 20) ^ block as u64);
            let codes: Vec<usize> = (0..8).map(|_| start + rng.random_range(0..cluster.min(d - start))).collect();
            Visit::new(codes, d).expect("nonempty")
        })
        .collect();
    let graph = build_adjacency(&count_cooccurrence(&visits, d), 0.01).expect("valid delta");
    let m_codes: Vec<usize> = (0..13).map(|_| rng.random_range(0..d)).collect();
    let m = Mask::from_indices(d, &m_codes);
    let n = neighbor_vector(&m, &graph, NeighborMode::Union);
    (graph, m, n)
}

/// Measure both aggregation routes for each code-universe size.
pub fn run_bench(d_values: &[usize], s: usize, iters: usize, seed: u64) -> Result<Vec<BenchRow>> {
    if s == 0 || iters == 0 {
        bail!("bench needs s >= 1 and iters >= 1");
    }
    if let Some(&bad) = d_values.iter().find(|&&d| d < s) {
        bail!("bench requires d >= s; got d={bad} with s={s}");
    }
    let mut rows = Vec::with_capacity(d_values.len());
    for &d in d_values {
        let (graph, m, n) = bench_instance(d, seed);
        let mut rng = ChaCha12Rng::seed_from_u64(seed ^ 0xbeef);
        let emb = GraphEmbeddings {
            m_emb: Tensor::uniform(&[d, s], 1.0, &mut rng),
            n_emb: Tensor::uniform(&[d, s], 1.0, &mut rng),
            r_emb: Tensor::uniform(&[d, s], 1.0, &mut rng),
            w: Tensor::uniform(&[s, s], 1.0, &mut rng),
        };

        let naive_start = Instant::now();
        let (_, naive_stats) = track::with_tracking(d * d, || {
            for _ in 0..iters {
                let subgraphs = oracle_subgraphs(&m, &n, &graph);
                let _ = oracle_aggregate(&m, &n, &subgraphs, &emb);
            }
        });
        let naive_ms = naive_start.elapsed().as_secs_f64() * 1e3 / iters as f64;

        let opt_start = Instant::now();
        let (_, opt_stats) = track::with_tracking(d * d, || {
            for _ in 0..iters {
                let _ = aggregate_optimized(&m, &n, &graph, &emb);
            }
        });
        let optimized_ms = opt_start.elapsed().as_secs_f64() * 1e3 / iters as f64;

        rows.push(BenchRow {
            d,
            s,
            naive_bytes: naive_stats.largest_bytes(),
            optimized_bytes: opt_stats.largest_bytes(),
            naive_ms,
            optimized_ms,
        });
    }
    Ok(rows)
}
