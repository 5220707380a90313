//! kNN graph construction, all-pairs geodesic distances, Euclidean
//! distances, and the pairwise similarity target derived from them.
//!
//! The graph approximates the plant surface: each point connects to its k
//! nearest neighbors within a cutoff `tau`, the relation is symmetrized by
//! union, and shortest-path closure turns edge lengths into geodesic
//! distances. Similarities are `1 / (D + eps)` normalized by the matrix
//! maximum, which maps zero distance to exactly 1 and unreachable pairs to
//! exactly 0.

use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::io;
use crate::math;
use rayon::prelude::*;
use std::path::Path;

/// Undirected kNN graph with Euclidean edge lengths in meters.
#[derive(Debug, Clone, PartialEq)]
pub struct KnnGraph {
    n_vertices: usize,
    /// Each edge stored once as (u, v, length) with u < v, sorted.
    edges: Vec<(u32, u32, f64)>,
    pub k: usize,
    pub tau: f64,
}

impl KnnGraph {
    pub fn n_vertices(&self) -> usize {
        self.n_vertices
    }

    pub fn edges(&self) -> &[(u32, u32, f64)] {
        &self.edges
    }

    /// Adjacency list view (both directions).
    pub fn adjacency(&self) -> Vec<Vec<(usize, f64)>> {
        let mut adj = vec![Vec::new(); self.n_vertices];
        for &(u, v, w) in &self.edges {
            adj[u as usize].push((v as usize, w));
            adj[v as usize].push((u as usize, w));
        }
        adj
    }

    pub fn degree(&self, v: usize) -> usize {
        self.edges
            .iter()
            .filter(|&&(a, b, _)| a as usize == v || b as usize == v)
            .count()
    }
}

/// Defaults: 7 neighbors within 2 cm.
pub const DEFAULT_K: usize = 7;
pub const DEFAULT_TAU: f64 = 0.02;

/// Builds the union-symmetrized kNN graph: every point gets edges to its k
/// nearest points with length <= tau, and an edge kept by either endpoint is
/// kept for both. Neighbor ties break by point index.
pub fn build_knn_graph(cloud: &PointCloud, k: usize, tau: f64) -> Result<KnnGraph> {
    if k < 1 {
        return Err(Error::invalid("k must be >= 1"));
    }
    if tau <= 0.0 || tau.is_nan() {
        return Err(Error::invalid("tau must be > 0"));
    }
    let pts = cloud.positions();
    let n = pts.len();
    let mut pairs: Vec<(u32, u32)> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut cand: Vec<(f64, usize)> = (0..n)
                .filter(|&j| j != i)
                .map(|j| (math::dist(pts[i], pts[j]), j))
                .filter(|&(d, _)| d <= tau)
                .collect();
            cand.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            cand.truncate(k);
            cand.into_iter().map(move |(_, j)| {
                let (a, b) = if i < j { (i, j) } else { (j, i) };
                (a as u32, b as u32)
            })
        })
        .collect();
    pairs.sort_unstable();
    pairs.dedup();
    let edges = pairs
        .into_iter()
        .map(|(a, b)| (a, b, math::dist(pts[a as usize], pts[b as usize])))
        .collect();
    Ok(KnnGraph {
        n_vertices: n,
        edges,
        k,
        tau,
    })
}

/// Dense symmetric matrix of non-negative distances with `inf` marking
/// unreachable pairs and an exactly zero diagonal.
#[derive(Debug, Clone, PartialEq)]
pub struct DistanceMatrix {
    n: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn from_raw(n: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * n {
            return Err(Error::ShapeMismatch(format!(
                "expected {} entries for n={n}, got {}",
                n * n,
                data.len()
            )));
        }
        let m = DistanceMatrix { n, data };
        m.validate()?;
        Ok(m)
    }

    fn validate(&self) -> Result<()> {
        for r in 0..self.n {
            if self.get(r, r) != 0.0 {
                return Err(Error::invalid(format!("nonzero diagonal at row {r}")));
            }
            for c in (r + 1)..self.n {
                let v = self.get(r, c);
                if v.is_nan() || v < 0.0 {
                    return Err(Error::invalid(format!("invalid distance at ({r},{c})")));
                }
                if v != self.get(c, r) {
                    return Err(Error::invalid(format!("asymmetric at ({r},{c})")));
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_grid_csv(path, self.n, self.n, &self.data)
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        io::write_grid_bin(path, self.n, self.n, &self.data)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let (rows, cols, data) = io::read_grid_csv(path)?;
        if rows != cols {
            return Err(Error::invalid(format!("matrix not square: {rows}x{cols}")));
        }
        Self::from_raw(rows, data)
    }

    pub fn load_bin(path: &Path) -> Result<Self> {
        let (rows, cols, data) = io::read_grid_bin(path)?;
        if rows != cols {
            return Err(Error::invalid(format!("matrix not square: {rows}x{cols}")));
        }
        Self::from_raw(rows, data)
    }
}

/// Pre-closure matrix: edge weights where an edge exists, 0 on the
/// diagonal, `inf` elsewhere.
pub fn init_distance_matrix(graph: &KnnGraph) -> DistanceMatrix {
    let n = graph.n_vertices();
    let mut data = vec![f64::INFINITY; n * n];
    for i in 0..n {
        data[i * n + i] = 0.0;
    }
    for &(u, v, w) in graph.edges() {
        data[u as usize * n + v as usize] = w;
        data[v as usize * n + u as usize] = w;
    }
    DistanceMatrix { n, data }
}

/// Dense pairwise Euclidean distances; never `inf`.
pub fn euclidean_distance_matrix(cloud: &PointCloud) -> DistanceMatrix {
    let pts = cloud.positions();
    let n = pts.len();
    let mut data = vec![0.0; n * n];
    for i in 0..n {
        for j in (i + 1)..n {
            let d = math::dist(pts[i], pts[j]);
            data[i * n + j] = d;
            data[j * n + i] = d;
        }
    }
    DistanceMatrix { n, data }
}

/// Default tile width of the blocked shortest-path closure. 64 keeps three
/// working tiles (96 KiB) inside L2 on ordinary desktops.
pub const DEFAULT_FW_BLOCK: usize = 64;

/// All-pairs shortest-path closure with the default block size.
pub fn floyd_warshall(d: &DistanceMatrix) -> Result<DistanceMatrix> {
    floyd_warshall_blocked(d, DEFAULT_FW_BLOCK)
}

/// Blocked (tiled) Floyd-Warshall closure. The input is untouched;
/// unreachable pairs stay `inf` (IEEE addition already saturates for
/// non-negative weights). Tiles in the same phase never read each other, so
/// the result is bitwise identical for any rayon thread count.
pub fn floyd_warshall_blocked(d: &DistanceMatrix, block: usize) -> Result<DistanceMatrix> {
    d.validate()
        .map_err(|e| Error::invalid(format!("floyd_warshall input: {e}")))?;
    let n = d.n();
    if n == 0 {
        return Ok(d.clone());
    }
    let b = block.max(1).min(n);
    let nb = n.div_ceil(b);

    // Pack into padded b*b tiles; padding is inf off the global diagonal
    // and 0 on it, which keeps phantom vertices isolated.
    let mut tiles: Vec<Vec<f64>> = Vec::with_capacity(nb * nb);
    for ti in 0..nb {
        for tj in 0..nb {
            let mut tile = vec![f64::INFINITY; b * b];
            for i in 0..b {
                let gi = ti * b + i;
                for j in 0..b {
                    let gj = tj * b + j;
                    tile[i * b + j] = if gi < n && gj < n {
                        d.get(gi, gj)
                    } else if gi == gj {
                        0.0
                    } else {
                        f64::INFINITY
                    };
                }
            }
            tiles.push(tile);
        }
    }

    for t in 0..nb {
        fw_diag_tile(&mut tiles[t * nb + t], b);
        let diag = tiles[t * nb + t].clone();

        tiles
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, tile)| {
                let (ti, tj) = (idx / nb, idx % nb);
                if ti == t && tj != t {
                    fw_row_panel(tile, &diag, b);
                } else if tj == t && ti != t {
                    fw_col_panel(tile, &diag, b);
                }
            });

        let row_panel: Vec<Vec<f64>> = (0..nb).map(|j| tiles[t * nb + j].clone()).collect();
        let col_panel: Vec<Vec<f64>> = (0..nb).map(|i| tiles[i * nb + t].clone()).collect();

        tiles
            .par_iter_mut()
            .enumerate()
            .for_each(|(idx, tile)| {
                let (ti, tj) = (idx / nb, idx % nb);
                if ti != t && tj != t {
                    fw_minplus(tile, &col_panel[ti], &row_panel[tj], b);
                }
            });
    }

    let mut data = vec![0.0; n * n];
    for ti in 0..nb {
        for tj in 0..nb {
            let tile = &tiles[ti * nb + tj];
            for i in 0..b {
                let gi = ti * b + i;
                if gi >= n {
                    break;
                }
                for j in 0..b {
                    let gj = tj * b + j;
                    if gj >= n {
                        break;
                    }
                    data[gi * n + gj] = tile[i * b + j];
                }
            }
        }
    }
    Ok(DistanceMatrix { n, data })
}

/// Closure of the diagonal tile: plain Floyd-Warshall restricted to it.
fn fw_diag_tile(t: &mut [f64], b: usize) {
    let mut rowk = vec![0.0; b];
    for k in 0..b {
        // Row k is fixed during step k (the tile diagonal is 0).
        rowk.copy_from_slice(&t[k * b..(k + 1) * b]);
        for i in 0..b {
            let aik = t[i * b + k];
            if aik < f64::INFINITY {
                let row = &mut t[i * b..(i + 1) * b];
                for j in 0..b {
                    let v = aik + rowk[j];
                    if v < row[j] {
                        row[j] = v;
                    }
                }
            }
        }
    }
}

/// Tile in the pivot row: c <- min(c, diag[i][k] + c[k][j]), k ascending.
fn fw_row_panel(c: &mut [f64], diag: &[f64], b: usize) {
    let mut rowk = vec![0.0; b];
    for k in 0..b {
        rowk.copy_from_slice(&c[k * b..(k + 1) * b]);
        for i in 0..b {
            let aik = diag[i * b + k];
            if aik < f64::INFINITY {
                let row = &mut c[i * b..(i + 1) * b];
                for j in 0..b {
                    let v = aik + rowk[j];
                    if v < row[j] {
                        row[j] = v;
                    }
                }
            }
        }
    }
}

/// Tile in the pivot column: c <- min(c, c[i][k] + diag[k][j]), k ascending.
fn fw_col_panel(c: &mut [f64], diag: &[f64], b: usize) {
    for k in 0..b {
        for i in 0..b {
            let cik = c[i * b + k];
            if cik < f64::INFINITY {
                let dk = &diag[k * b..(k + 1) * b];
                let row = &mut c[i * b..(i + 1) * b];
                for j in 0..b {
                    let v = cik + dk[j];
                    if v < row[j] {
                        row[j] = v;
                    }
                }
            }
        }
    }
}

/// Off-pivot tile: c <- min(c, a[i][k] + bm[k][j]) over all k (min-plus
/// product); a and bm are read-only snapshots so any loop order works, this
/// one streams rows.
fn fw_minplus(c: &mut [f64], a: &[f64], bm: &[f64], b: usize) {
    for i in 0..b {
        let row = &mut c[i * b..(i + 1) * b];
        for k in 0..b {
            let aik = a[i * b + k];
            if aik < f64::INFINITY {
                let bk = &bm[k * b..(k + 1) * b];
                for j in 0..b {
                    let v = aik + bk[j];
                    if v < row[j] {
                        row[j] = v;
                    }
                }
            }
        }
    }
}

/// Per-source Dijkstra over the sparse adjacency; the independent
/// alternative to the dense closure. Matches `floyd_warshall` to 1e-9.
pub fn apsp_sparse(graph: &KnnGraph) -> DistanceMatrix {
    let n = graph.n_vertices();
    let adj = graph.adjacency();
    let rows: Vec<Vec<f64>> = (0..n)
        .into_par_iter()
        .map(|src| {
            let mut dist = vec![f64::INFINITY; n];
            dist[src] = 0.0;
            let mut heap = std::collections::BinaryHeap::new();
            heap.push(HeapEntry { dist: 0.0, node: src });
            while let Some(HeapEntry { dist: d, node }) = heap.pop() {
                if d > dist[node] {
                    continue;
                }
                for &(next, w) in &adj[node] {
                    let nd = d + w;
                    if nd < dist[next] {
                        dist[next] = nd;
                        heap.push(HeapEntry { dist: nd, node: next });
                    }
                }
            }
            dist
        })
        .collect();
    let mut data = vec![0.0; n * n];
    for (i, row) in rows.iter().enumerate() {
        for (j, &v) in row.iter().enumerate() {
            data[i * n + j] = v;
        }
    }
    // Per-source relaxation sums weights in path order, so (i,j) and (j,i)
    // can disagree in the last ulp; take the min to restore exact symmetry.
    for i in 0..n {
        for j in (i + 1)..n {
            let v = data[i * n + j].min(data[j * n + i]);
            data[i * n + j] = v;
            data[j * n + i] = v;
        }
    }
    DistanceMatrix { n, data }
}

struct HeapEntry {
    dist: f64,
    node: usize,
}

impl PartialEq for HeapEntry {
    fn eq(&self, other: &Self) -> bool {
        self.dist == other.dist && self.node == other.node
    }
}
impl Eq for HeapEntry {}
impl PartialOrd for HeapEntry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for HeapEntry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Reversed: BinaryHeap is a max-heap, we want the closest node.
        other
            .dist
            .total_cmp(&self.dist)
            .then(other.node.cmp(&self.node))
    }
}

/// Dense symmetric similarity target with entries in [0, 1], unit diagonal,
/// and exact zeros for unreachable pairs.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityMatrix {
    n: usize,
    data: Vec<f64>,
}

impl SimilarityMatrix {
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.n + c]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_grid_csv(path, self.n, self.n, &self.data)
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        io::write_grid_bin(path, self.n, self.n, &self.data)
    }
}

pub const DEFAULT_EPSILON: f64 = 1e-8;

/// Similarity target: `1 / (D + epsilon)` normalized by the matrix maximum.
/// With a zero diagonal the maximum is `1 / epsilon`, so the normalized form
/// is `epsilon / (D + epsilon)`: exactly 1 at zero distance, exactly 0 at
/// `inf`, strictly decreasing in finite distance.
pub fn similarity_matrix(d: &DistanceMatrix, epsilon: f64) -> Result<SimilarityMatrix> {
    if epsilon <= 0.0 || epsilon.is_nan() {
        return Err(Error::invalid("epsilon must be > 0"));
    }
    d.validate()
        .map_err(|e| Error::invalid(format!("similarity input: {e}")))?;
    let n = d.n();
    let raw: Vec<f64> = d.data().iter().map(|&v| 1.0 / (v + epsilon)).collect();
    let max = raw.iter().fold(0.0f64, |m, &v| m.max(v));
    if max == 0.0 {
        // Only possible for n == 0.
        return Ok(SimilarityMatrix { n, data: raw });
    }
    let data = raw.into_iter().map(|v| v / max).collect();
    Ok(SimilarityMatrix { n, data })
}
