//! Embedding container, the point-to-point and spatially informed
//! contrastive losses, analytic gradients through the row normalization,
//! and a direct embedding optimizer that stands in for a network backbone
//! at desk scale.
//!
//! As printed, the loss is `sum_ij T_ij - C_ij` with `C` the cross-view
//! cosine matrix and `T` either the identity or the spatial target `S`.
//! That raw difference is unbounded below, so the default discrepancy is
//! the elementwise square `(T_ij - C_ij)^2`, in line with the
//! redundancy-reduction losses this construction descends from. `absolute`
//! and `literal` modes are kept for fidelity experiments.
//!
//! Spatial targets only make sense on one fixed geometry: rotations and
//! translations move points between views, so in two-view training build
//! the target on view 0's coordinates and share it.

use crate::cloud::{subsample, PointCloud};
use crate::error::{Error, Result};
use crate::geodesy::{
    build_knn_graph, euclidean_distance_matrix, floyd_warshall, init_distance_matrix,
    similarity_matrix, SimilarityMatrix,
};
use crate::io;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::path::Path;

/// Dense N x D matrix of per-point embeddings. Entries are always finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Embeddings {
    n: usize,
    d: usize,
    data: Vec<f64>,
}

impl Embeddings {
    pub fn new(n: usize, d: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != n * d {
            return Err(Error::ShapeMismatch(format!(
                "expected {} values for {n}x{d}, got {}",
                n * d,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::invalid(format!(
                "non-finite embedding entry at row {}",
                bad / d.max(1)
            )));
        }
        Ok(Embeddings { n, d, data })
    }

    pub fn from_rows(rows: Vec<Vec<f64>>) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != d) {
            return Err(Error::ShapeMismatch("ragged embedding rows".into()));
        }
        Embeddings::new(n, d, rows.into_iter().flatten().collect())
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn dim(&self) -> usize {
        self.d
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.d..(i + 1) * self.d]
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        io::write_grid_csv(path, self.n, self.d, &self.data)
    }

    pub fn save_bin(&self, path: &Path) -> Result<()> {
        io::write_grid_bin(path, self.n, self.d, &self.data)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let (n, d, data) = io::read_grid_csv(path)?;
        Embeddings::new(n, d, data)
    }

    pub fn load_bin(path: &Path) -> Result<Self> {
        let (n, d, data) = io::read_grid_bin(path)?;
        Embeddings::new(n, d, data)
    }

    /// Subset of rows at the given indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut data = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Embeddings {
            n: indices.len(),
            d: self.d,
            data,
        }
    }

    /// Point positions as 3-column feature rows, for clustering baselines
    /// that run on geometry instead of learned embeddings.
    pub fn from_positions(cloud: &PointCloud) -> Self {
        let data = cloud.positions().iter().flatten().copied().collect();
        Embeddings {
            n: cloud.len(),
            d: 3,
            data,
        }
    }
}

/// Divides each row by its Euclidean norm.
pub fn normalize_embeddings(e: &Embeddings) -> Result<Embeddings> {
    let mut data = Vec::with_capacity(e.data.len());
    for i in 0..e.n {
        let row = e.row(i);
        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::invalid(format!("zero-norm embedding row {i}")));
        }
        data.extend(row.iter().map(|v| v / norm));
    }
    Embeddings::new(e.n, e.d, data)
}

/// Cross-view cosine matrix `C[i][j] = e0_i . e1_j`, row-major. Expects
/// unit rows; one-view mode passes the same embeddings twice.
pub fn cross_similarity(e0: &Embeddings, e1: &Embeddings) -> Result<Vec<f64>> {
    if e0.n != e1.n || e0.d != e1.d {
        return Err(Error::ShapeMismatch(format!(
            "views disagree: {}x{} vs {}x{}",
            e0.n, e0.d, e1.n, e1.d
        )));
    }
    let n = e0.n;
    let mut c = vec![0.0; n * n];
    for i in 0..n {
        let ri = e0.row(i);
        for j in 0..n {
            c[i * n + j] = dot(ri, e1.row(j));
        }
    }
    Ok(c)
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// What the cross-similarity is pulled toward.
#[derive(Debug, Clone, Copy)]
pub enum LossTarget<'a> {
    /// The identity matrix: each point should match only itself
    /// across views (point-to-point pre-training).
    Identity,
    /// A spatial similarity target.
    Spatial(&'a SimilarityMatrix),
}

impl LossTarget<'_> {
    #[inline]
    fn get(&self, i: usize, j: usize) -> f64 {
        match self {
            LossTarget::Identity => {
                if i == j {
                    1.0
                } else {
                    0.0
                }
            }
            LossTarget::Spatial(s) => s.get(i, j),
        }
    }

    fn n(&self) -> Option<usize> {
        match self {
            LossTarget::Identity => None,
            LossTarget::Spatial(s) => Some(s.n()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetKind {
    Identity,
    Euclidean,
    Graph,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Discrepancy {
    /// `(T - C)^2`, the default.
    Squared,
    /// `|T - C|`.
    Absolute,
    /// `T - C` exactly as printed; unbounded below.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Reduction {
    /// Divide by N^2 so losses compare across point counts (default).
    Mean,
    /// Raw double sum.
    Sum,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub target: TargetKind,
    pub n_views: usize,
    pub discrepancy: Discrepancy,
    pub reduction: Reduction,
    /// Skip i == j terms; off by default.
    pub mask_diagonal: bool,
    /// Loss subsample size; clouds smaller than this are used whole.
    pub n_points: usize,
    /// Similarity epsilon for spatial targets.
    pub epsilon: f64,
    pub graph_k: usize,
    pub graph_tau: f64,
    /// Embedding size D for the optimizer.
    pub embed_dim: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            target: TargetKind::Graph,
            n_views: 1,
            discrepancy: Discrepancy::Squared,
            reduction: Reduction::Mean,
            mask_diagonal: false,
            n_points: 10_000,
            epsilon: crate::geodesy::DEFAULT_EPSILON,
            graph_k: crate::geodesy::DEFAULT_K,
            graph_tau: crate::geodesy::DEFAULT_TAU,
            embed_dim: 3,
        }
    }
}

impl Discrepancy {
    #[inline]
    fn value(self, x: f64) -> f64 {
        match self {
            Discrepancy::Squared => x * x,
            Discrepancy::Absolute => x.abs(),
            Discrepancy::Literal => x,
        }
    }

    #[inline]
    fn derivative(self, x: f64) -> f64 {
        match self {
            Discrepancy::Squared => 2.0 * x,
            Discrepancy::Absolute => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Discrepancy::Literal => 1.0,
        }
    }
}

fn check_views<'a>(
    views: &'a [Embeddings],
    target: &LossTarget,
    config: &LossConfig,
) -> Result<(&'a Embeddings, &'a Embeddings)> {
    if !(config.n_views == 1 || config.n_views == 2) {
        return Err(Error::invalid("n_views must be 1 or 2"));
    }
    if views.len() != config.n_views {
        return Err(Error::ShapeMismatch(format!(
            "{} views passed but n_views = {}",
            views.len(),
            config.n_views
        )));
    }
    let e0 = &views[0];
    let e1 = views.get(1).unwrap_or(e0);
    if e0.n != e1.n || e0.d != e1.d {
        return Err(Error::ShapeMismatch("views have different shapes".into()));
    }
    if let Some(tn) = target.n() {
        if tn != e0.n {
            return Err(Error::ShapeMismatch(format!(
                "target is {tn}x{tn} but embeddings have {} rows",
                e0.n
            )));
        }
    }
    Ok((e0, e1))
}

/// The contrastive loss `reduce_ij f(T_ij - e0_i . e1_j)` over row-normalized
/// embeddings. Rows are normalized internally, so the value is invariant to
/// positive per-row rescaling of the inputs.
pub fn contrastive_loss(
    views: &[Embeddings],
    target: &LossTarget,
    config: &LossConfig,
) -> Result<f64> {
    let (e0, e1) = check_views(views, target, config)?;
    let n = e0.n;
    if n == 0 {
        return Ok(0.0);
    }
    let e0n = normalize_embeddings(e0)?;
    let e1n = if config.n_views == 2 {
        normalize_embeddings(e1)?
    } else {
        e0n.clone()
    };
    // Per-row partial sums keep the reduction order fixed regardless of
    // rayon scheduling.
    let partials: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let ri = e0n.row(i);
            let mut acc = 0.0;
            for j in 0..n {
                if config.mask_diagonal && i == j {
                    continue;
                }
                let diff = target.get(i, j) - dot(ri, e1n.row(j));
                acc += config.discrepancy.value(diff);
            }
            acc
        })
        .collect();
    let total: f64 = partials.iter().sum();
    Ok(match config.reduction {
        Reduction::Mean => total / ((n * n) as f64),
        Reduction::Sum => total,
    })
}

/// Loss value plus exact gradients with respect to the raw
/// (pre-normalization) embeddings, one matrix per view.
///
/// With unit rows `u_i = e_i / |e_i|`, the chain through the normalization
/// is `grad e_i = (g_i - (g_i . u_i) u_i) / |e_i|` where `g_i` is the
/// gradient with respect to `u_i`; the projection makes the derivative
/// along a row's own direction exactly zero.
pub fn loss_gradient(
    views: &[Embeddings],
    target: &LossTarget,
    config: &LossConfig,
) -> Result<(f64, Vec<Embeddings>)> {
    let (e0, e1) = check_views(views, target, config)?;
    let n = e0.n;
    let d = e0.d;
    if n == 0 {
        return Ok((0.0, views.to_vec()));
    }
    let e0n = normalize_embeddings(e0)?;
    let e1n = if config.n_views == 2 {
        normalize_embeddings(e1)?
    } else {
        e0n.clone()
    };
    let scale = match config.reduction {
        Reduction::Mean => 1.0 / ((n * n) as f64),
        Reduction::Sum => 1.0,
    };

    // dL/dC_ij, with the loss-partial for free.
    let g = |i: usize, j: usize| -> f64 {
        let diff = target.get(i, j) - dot(e0n.row(i), e1n.row(j));
        -scale * config.discrepancy.derivative(diff)
    };

    let loss = contrastive_loss(views, target, config)?;

    // Gradient with respect to the normalized rows of view 0:
    // sum_j G_ij u1_j, plus the transposed term in one-view mode.
    let one_view = config.n_views == 1;
    let grad0_unit: Vec<f64> = (0..n)
        .into_par_iter()
        .flat_map_iter(|i| {
            let mut acc = vec![0.0; d];
            for j in 0..n {
                if config.mask_diagonal && i == j {
                    continue;
                }
                let gij = g(i, j);
                for (a, &v) in acc.iter_mut().zip(e1n.row(j)) {
                    *a += gij * v;
                }
                if one_view {
                    let gji = g(j, i);
                    for (a, &v) in acc.iter_mut().zip(e0n.row(j)) {
                        *a += gji * v;
                    }
                }
            }
            acc.into_iter()
        })
        .collect();

    let to_raw = |raw: &Embeddings, unit: &Embeddings, grad_unit: &[f64]| -> Embeddings {
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let norm = raw.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            let u = unit.row(i);
            let gu = &grad_unit[i * d..(i + 1) * d];
            let radial = dot(gu, u);
            for k in 0..d {
                out[i * d + k] = (gu[k] - radial * u[k]) / norm;
            }
        }
        Embeddings { n, d, data: out }
    };

    let mut grads = vec![to_raw(e0, &e0n, &grad0_unit)];
    if config.n_views == 2 {
        let grad1_unit: Vec<f64> = (0..n)
            .into_par_iter()
            .flat_map_iter(|j| {
                let mut acc = vec![0.0; d];
                for i in 0..n {
                    if config.mask_diagonal && i == j {
                        continue;
                    }
                    let gij = g(i, j);
                    for (a, &v) in acc.iter_mut().zip(e0n.row(i)) {
                        *a += gij * v;
                    }
                }
                acc.into_iter()
            })
            .collect();
        grads.push(to_raw(e1, &e1n, &grad1_unit));
    }
    Ok((loss, grads))
}

/// Builds the configured similarity target on a cloud; None means identity.
pub fn build_target(cloud: &PointCloud, config: &LossConfig) -> Result<Option<SimilarityMatrix>> {
    match config.target {
        TargetKind::Identity => Ok(None),
        TargetKind::Euclidean => {
            let d = euclidean_distance_matrix(cloud);
            Ok(Some(similarity_matrix(&d, config.epsilon)?))
        }
        TargetKind::Graph => {
            let g = build_knn_graph(cloud, config.graph_k, config.graph_tau)?;
            let d = floyd_warshall(&init_distance_matrix(&g))?;
            Ok(Some(similarity_matrix(&d, config.epsilon)?))
        }
    }
}

/// Result of direct embedding optimization.
#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    /// Raw (unnormalized) embeddings of view 0 after the final step.
    pub embeddings: Embeddings,
    /// Loss before any update, then after each step; length `steps + 1`.
    pub trace: Vec<f64>,
    /// Original cloud index of each embedding row (the loss subsample).
    pub indices: Vec<usize>,
}

/// Gradient descent on the contrastive loss over freely parameterized
/// per-point embeddings — the desk-scale stand-in for a network backbone.
/// Rows initialize from U(-0.1, 0.1)^D and are normalized once; the target
/// is built on the shared loss subsample.
pub fn optimize_embeddings(
    cloud: &PointCloud,
    config: &LossConfig,
    steps: usize,
    learning_rate: f64,
    seed: u64,
) -> Result<OptimizeOutcome> {
    if cloud.len() < 2 {
        return Err(Error::invalid("optimization needs at least 2 points"));
    }
    if config.embed_dim == 0 {
        return Err(Error::invalid("embed_dim must be >= 1"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (sub, indices) = subsample(cloud, config.n_points, rng.gen())?;
    let target_matrix = build_target(&sub, config)?;
    let target = match &target_matrix {
        Some(s) => LossTarget::Spatial(s),
        None => LossTarget::Identity,
    };

    let n = sub.len();
    let d = config.embed_dim;
    let mut views: Vec<Embeddings> = (0..config.n_views)
        .map(|_| {
            let data: Vec<f64> = (0..n * d).map(|_| rng.gen_range(-0.1..=0.1)).collect();
            normalize_embeddings(&Embeddings::new(n, d, data)?)
        })
        .collect::<Result<_>>()?;

    let mut trace = Vec::with_capacity(steps + 1);
    for step in 0..steps {
        let (loss, grads) = loss_gradient(&views, &target, config)?;
        if !loss.is_finite() {
            return Err(Error::Diverged {
                step,
                message: "loss became non-finite".into(),
            });
        }
        trace.push(loss);
        for (view, grad) in views.iter_mut().zip(&grads) {
            for (v, g) in view.data.iter_mut().zip(&grad.data) {
                *v -= learning_rate * g;
            }
            if view.data.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged {
                    step,
                    message: "embeddings became non-finite".into(),
                });
            }
        }
    }
    trace.push(contrastive_loss(&views, &target, config)?);
    Ok(OptimizeOutcome {
        embeddings: views.swap_remove(0),
        trace,
        indices,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{synth_plant, PointCloud, SynthPlantParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn emb(rows: &[&[f64]]) -> Embeddings {
        Embeddings::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn sim_from_distance(entries: &[(usize, usize, f64)], n: usize, eps: f64) -> SimilarityMatrix {
        let mut data = vec![f64::INFINITY; n * n];
        for i in 0..n {
            data[i * n + i] = 0.0;
        }
        for &(r, c, v) in entries {
            data[r * n + c] = v;
            data[c * n + r] = v;
        }
        let d = crate::geodesy::DistanceMatrix::from_raw(n, data).unwrap();
        similarity_matrix(&d, eps).unwrap()
    }

    #[test]
    fn normalize_three_four_five() {
        let e = emb(&[&[3.0, 4.0]]);
        let n = normalize_embeddings(&e).unwrap();
        assert_relative_eq!(n.row(0)[0], 0.6);
        assert_relative_eq!(n.row(0)[1], 0.8);
    }

    #[test]
    fn normalize_leaves_unit_rows_alone() {
        let e = emb(&[&[1.0, 0.0], &[0.0, -1.0]]);
        let n = normalize_embeddings(&e).unwrap();
        assert_eq!(n.data(), e.data());
    }

    #[test]
    fn normalize_rejects_zero_row_naming_it() {
        let e = emb(&[&[1.0, 0.0], &[0.0, 0.0]]);
        match normalize_embeddings(&e) {
            Err(Error::InvalidInput(msg)) => assert!(msg.contains("row 1"), "{msg}"),
            other => panic!("expected input error, got {other:?}"),
        }
    }

    #[test]
    fn cross_similarity_cases() {
        let ortho = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let c = cross_similarity(&ortho, &ortho).unwrap();
        assert_eq!(c, vec![1.0, 0.0, 0.0, 1.0]);

        let same = emb(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let c = cross_similarity(&same, &same).unwrap();
        assert_eq!(c, vec![1.0; 4]);

        let a = emb(&[&[1.0, 0.0]]);
        let b = emb(&[&[0.0, 1.0]]);
        assert_eq!(cross_similarity(&a, &b).unwrap(), vec![0.0]);
    }

    #[test]
    fn cross_similarity_rejects_shape_mismatch() {
        let a = emb(&[&[1.0, 0.0]]);
        let b = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        assert!(cross_similarity(&a, &b).is_err());
    }

    fn sum_config() -> LossConfig {
        LossConfig {
            target: TargetKind::Identity,
            reduction: Reduction::Sum,
            ..Default::default()
        }
    }

    #[test]
    fn loss_zero_when_cross_matches_identity() {
        let e = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let loss = contrastive_loss(&[e], &LossTarget::Identity, &sum_config()).unwrap();
        assert_relative_eq!(loss, 0.0, epsilon = 1e-15);
    }

    #[test]
    fn loss_identical_embeddings_identity_target() {
        // C is all ones; the two off-diagonal terms each contribute
        // (0 - 1)^2 under the raw sum.
        let e = emb(&[&[1.0, 0.0], &[1.0, 0.0]]);
        let loss =
            contrastive_loss(std::slice::from_ref(&e), &LossTarget::Identity, &sum_config())
                .unwrap();
        assert_relative_eq!(loss, 2.0, epsilon = 1e-12);
        // Mean reduction divides by N^2 = 4.
        let mean_cfg = LossConfig {
            target: TargetKind::Identity,
            ..Default::default()
        };
        let loss = contrastive_loss(&[e], &LossTarget::Identity, &mean_cfg).unwrap();
        assert_relative_eq!(loss, 0.5, epsilon = 1e-12);
    }

    #[test]
    fn loss_orthogonal_embeddings_spatial_target() {
        // Orthogonal rows give C = I; a spatial target with off-diagonal s
        // leaves two s^2 terms.
        let e = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let s = sim_from_distance(&[(0, 1, 0.02)], 2, 0.01);
        let off = s.get(0, 1);
        assert_relative_eq!(off, 0.01 / 0.03, max_relative = 1e-12);
        let loss = contrastive_loss(
            &[e],
            &LossTarget::Spatial(&s),
            &LossConfig {
                reduction: Reduction::Sum,
                ..Default::default()
            },
        )
        .unwrap();
        assert_relative_eq!(loss, 2.0 * off * off, epsilon = 1e-12);
    }

    #[test]
    fn gradient_zero_at_minimum() {
        let e = emb(&[&[1.0, 0.0], &[0.0, 1.0]]);
        let (loss, grads) =
            loss_gradient(&[e], &LossTarget::Identity, &sum_config()).unwrap();
        assert_relative_eq!(loss, 0.0, epsilon = 1e-15);
        assert!(grads[0].data().iter().all(|g| g.abs() < 1e-12));
    }

    fn random_views(
        rng: &mut ChaCha8Rng,
        n: usize,
        d: usize,
        n_views: usize,
    ) -> Vec<Embeddings> {
        (0..n_views)
            .map(|_| {
                let data: Vec<f64> = (0..n * d)
                    .map(|_| {
                        // Keep norms comfortably away from zero so the
                        // normalization Jacobian stays tame.
                        let v: f64 = rng.gen_range(0.2..1.0);
                        if rng.gen_bool(0.5) {
                            v
                        } else {
                            -v
                        }
                    })
                    .collect();
                Embeddings::new(n, d, data).unwrap()
            })
            .collect()
    }

    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gradient_matches_central_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(77);
        for trial in 0..20 {
            let n = rng.gen_range(2..6);
            let d = rng.gen_range(2..4);
            let n_views = 1 + (trial % 2);
            let views = random_views(&mut rng, n, d, n_views);
            let s = {
                let pts: Vec<[f64; 3]> = (0..n)
                    .map(|_| [rng.gen_range(-0.05..0.05), rng.gen_range(-0.05..0.05), 0.0])
                    .collect();
                let cloud =
                    PointCloud::new(pts, vec![[0.5; 3]; n], None).unwrap();
                let dmat = euclidean_distance_matrix(&cloud);
                similarity_matrix(&dmat, 0.01).unwrap()
            };
            let target = if trial % 3 == 0 {
                LossTarget::Identity
            } else {
                LossTarget::Spatial(&s)
            };
            let config = LossConfig {
                n_views,
                reduction: Reduction::Mean,
                ..Default::default()
            };
            let (_, grads) = loss_gradient(&views, &target, &config).unwrap();
            let h = 1e-5;
            for v in 0..n_views {
                for idx in 0..n * d {
                    let mut plus = views.clone();
                    let mut minus = views.clone();
                    plus[v].data[idx] += h;
                    minus[v].data[idx] -= h;
                    let lp = contrastive_loss(&plus, &target, &config).unwrap();
                    let lm = contrastive_loss(&minus, &target, &config).unwrap();
                    let fd = (lp - lm) / (2.0 * h);
                    let an = grads[v].data[idx];
                    let tol = 1e-5 * fd.abs().max(1.0);
                    assert!(
                        (fd - an).abs() <= tol,
                        "trial {trial} view {v} idx {idx}: fd={fd} analytic={an}"
                    );
                }
            }
        }
    }

    #[test]
    fn gradient_has_no_radial_component() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let views = random_views(&mut rng, 4, 3, 1);
        let (_, grads) =
            loss_gradient(&views, &LossTarget::Identity, &LossConfig::default()).unwrap();
        for i in 0..4 {
            let raw = views[0].row(i);
            let g = grads[0].row(i);
            let radial: f64 = raw.iter().zip(g).map(|(a, b)| a * b).sum();
            assert!(radial.abs() < 1e-12, "row {i}: radial {radial}");
        }
    }

    proptest! {
        #[test]
        fn loss_invariant_to_positive_row_scaling(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..7);
            let d = rng.gen_range(2..5);
            let views = random_views(&mut rng, n, d, 1);
            let config = LossConfig { target: TargetKind::Identity, ..Default::default() };
            let base = contrastive_loss(&views, &LossTarget::Identity, &config).unwrap();
            let mut scaled = views.clone();
            for i in 0..n {
                let s: f64 = rng.gen_range(0.1..10.0);
                for k in 0..d {
                    scaled[0].data[i * d + k] *= s;
                }
            }
            let after = contrastive_loss(&scaled, &LossTarget::Identity, &config).unwrap();
            prop_assert!((base - after).abs() <= 1e-9 * base.abs().max(1.0));
        }

        #[test]
        fn two_view_swap_symmetry(seed in 0u64..100) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = rng.gen_range(2..7);
            let views = random_views(&mut rng, n, 3, 2);
            let s = sim_from_distance(&[(0, 1, 0.02)], n, 0.01);
            let config = LossConfig { n_views: 2, ..Default::default() };
            let a = contrastive_loss(&views, &LossTarget::Spatial(&s), &config).unwrap();
            let swapped = vec![views[1].clone(), views[0].clone()];
            let b = contrastive_loss(&swapped, &LossTarget::Spatial(&s), &config).unwrap();
            prop_assert!((a - b).abs() <= 1e-9 * a.abs().max(1.0));
        }
    }

    #[test]
    fn minimum_iff_orthonormal_for_two_by_two() {
        // Two unit rows in the plane; the one-view identity-target loss
        // vanishes exactly when the rows are orthogonal. Swept exhaustively
        // over a fine angle grid.
        let config = LossConfig {
            target: TargetKind::Identity,
            reduction: Reduction::Sum,
            ..Default::default()
        };
        for i in 0..360 {
            let phi = f64::from(i).to_radians();
            let e = emb(&[&[1.0, 0.0], &[phi.cos(), phi.sin()]]);
            let loss = contrastive_loss(&[e], &LossTarget::Identity, &config).unwrap();
            let orthogonal = phi.cos().abs() < 1e-12;
            if orthogonal {
                assert!(loss < 1e-20, "phi={phi}: loss {loss}");
            } else {
                assert!(loss > 0.0, "phi={phi}: loss {loss}");
            }
        }
    }

    #[test]
    fn optimize_descends_on_synthetic_plant() {
        let cloud = synth_plant(&SynthPlantParams {
            n_leaves: 3,
            points_per_leaf: 60,
            stem_points: 0,
            seed: 1,
            ..Default::default()
        })
        .unwrap();
        let config = LossConfig {
            target: TargetKind::Graph,
            epsilon: 0.05,
            embed_dim: 3,
            ..Default::default()
        };
        let out = optimize_embeddings(&cloud, &config, 500, 10.0, 3).unwrap();
        assert_eq!(out.trace.len(), 501);
        assert!(
            out.trace.last().unwrap() < &out.trace[0],
            "final {} vs initial {}",
            out.trace.last().unwrap(),
            out.trace[0]
        );
    }

    #[test]
    fn optimize_separates_two_distant_clusters() {
        let mut pts = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        for _ in 0..30 {
            pts.push([
                rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                0.0,
            ]);
        }
        for _ in 0..30 {
            pts.push([
                1.0 + rng.gen_range(-0.01..0.01),
                rng.gen_range(-0.01..0.01),
                0.0,
            ]);
        }
        let cloud = PointCloud::new(pts, vec![[0.5; 3]; 60], None).unwrap();
        let config = LossConfig {
            target: TargetKind::Graph,
            graph_tau: 0.05,
            epsilon: 0.02,
            embed_dim: 3,
            ..Default::default()
        };
        let out = optimize_embeddings(&cloud, &config, 400, 5.0, 4).unwrap();
        let e = normalize_embeddings(&out.embeddings).unwrap();
        let mut within = 0.0;
        let mut cross = 0.0;
        let mut wn = 0;
        let mut cn = 0;
        for i in 0..60 {
            for j in (i + 1)..60 {
                let c = dot(e.row(i), e.row(j));
                if (i < 30) == (j < 30) {
                    within += c;
                    wn += 1;
                } else {
                    cross += c;
                    cn += 1;
                }
            }
        }
        assert!(
            within / wn as f64 > cross / cn as f64,
            "within {} vs cross {}",
            within / wn as f64,
            cross / cn as f64
        );
    }

    #[test]
    fn optimize_zero_learning_rate_keeps_init() {
        let cloud = synth_plant(&SynthPlantParams {
            n_leaves: 2,
            points_per_leaf: 20,
            stem_points: 0,
            seed: 2,
            ..Default::default()
        })
        .unwrap();
        let config = LossConfig {
            target: TargetKind::Identity,
            embed_dim: 3,
            ..Default::default()
        };
        let a = optimize_embeddings(&cloud, &config, 0, 0.0, 7).unwrap();
        let b = optimize_embeddings(&cloud, &config, 25, 0.0, 7).unwrap();
        assert_eq!(a.embeddings, b.embeddings);
    }
}
