//! Instance-segmentation scoring (average precision over IoU thresholds),
//! perfect-embedding construction from ground-truth labels, the two noise
//! models used to stress postprocessing, and the sweep harness comparing
//! clustering methods under increasing noise.

use crate::cloud::{plant_center, PointCloud};
use crate::cluster::{
    agglomerative_cluster, dbscan, graph_cut_cluster, initial_radius,
    radius_decremental_cluster, InstanceAssignment, PostprocessConfig,
};
use crate::error::{Error, Result};
use crate::loss::Embeddings;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::collections::HashSet;
use std::path::Path;

/// One orthonormal basis vector per ground-truth instance: same-instance
/// cosine similarity 1, cross-instance 0.
pub fn perfect_embeddings(cloud: &PointCloud, d: usize) -> Result<Embeddings> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("perfect_embeddings needs ground-truth labels"))?;
    let mut distinct: Vec<u32> = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if d < distinct.len() {
        return Err(Error::invalid(format!(
            "embedding size {d} is smaller than the {} instances",
            distinct.len()
        )));
    }
    let index_of = |l: u32| distinct.binary_search(&l).expect("label present");
    let mut data = vec![0.0; labels.len() * d];
    for (i, &l) in labels.iter().enumerate() {
        data[i * d + index_of(l)] = 1.0;
    }
    Embeddings::new(labels.len(), d, data)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NoiseKind {
    /// Per-component noise from U(-magnitude, magnitude) everywhere.
    Uniform,
    /// Same draw with a spatial envelope `magnitude * exp(-d^2 / 2 sigma^2)`
    /// peaking at the plant center, where assignment is hardest.
    GaussianCenter,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct NoiseConfig {
    pub kind: NoiseKind,
    /// Maximum per-component perturbation.
    pub magnitude: f64,
    /// Spatial scale of the gaussian_center envelope, in meters.
    pub sigma: f64,
    pub seed: u64,
}

/// Adds per-component uniform noise to the embeddings; the gaussian_center
/// mode scales the noise bound by distance to the plant center in the
/// xy-plane. No renormalization — downstream cosine handles scale.
pub fn add_noise(e: &Embeddings, cloud: &PointCloud, config: &NoiseConfig) -> Result<Embeddings> {
    if e.n() != cloud.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} embedding rows but {} points",
            e.n(),
            cloud.len()
        )));
    }
    if config.magnitude < 0.0 {
        return Err(Error::invalid("noise magnitude must be >= 0"));
    }
    if config.sigma <= 0.0 || config.sigma.is_nan() {
        return Err(Error::invalid("sigma must be > 0"));
    }
    let center = plant_center(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let d = e.dim();
    let mut data = Vec::with_capacity(e.n() * d);
    for (i, p) in cloud.positions().iter().enumerate() {
        let bound = match config.kind {
            NoiseKind::Uniform => config.magnitude,
            NoiseKind::GaussianCenter => {
                let dist2 = (p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2);
                config.magnitude * (-dist2 / (2.0 * config.sigma * config.sigma)).exp()
            }
        };
        for k in 0..d {
            let delta = if bound == 0.0 {
                0.0
            } else {
                rng.gen_range(-bound..=bound)
            };
            data.push(e.row(i)[k] + delta);
        }
    }
    Embeddings::new(e.n(), d, data)
}

/// Point-set intersection over union.
pub fn instance_iou(pred_points: &[usize], gt_points: &[usize]) -> Result<f64> {
    if pred_points.is_empty() && gt_points.is_empty() {
        return Err(Error::invalid("IoU of two empty sets is undefined"));
    }
    let a: HashSet<usize> = pred_points.iter().copied().collect();
    let b: HashSet<usize> = gt_points.iter().copied().collect();
    let inter = a.intersection(&b).count();
    let union = a.union(&b).count();
    Ok(inter as f64 / union as f64)
}

/// Average precision at one IoU threshold and its matching counts.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize)]
pub struct ApAtThreshold {
    pub threshold: f64,
    pub ap: f64,
    pub tp: usize,
    pub fp: usize,
    pub fn_count: usize,
}

/// Per-threshold APs plus their mean.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct ApResult {
    pub per_threshold: Vec<ApAtThreshold>,
    pub map: f64,
    pub ap50: f64,
}

fn gt_instances(gt: &[u32]) -> Vec<Vec<usize>> {
    let mut distinct: Vec<u32> = gt.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    distinct
        .iter()
        .map(|&l| {
            gt.iter()
                .enumerate()
                .filter(|(_, &x)| x == l)
                .map(|(i, _)| i)
                .collect()
        })
        .collect()
}

fn prediction_order(pred: &InstanceAssignment) -> Vec<u32> {
    let mut ids: Vec<u32> = (0..pred.n_instances() as u32).collect();
    // Confidence descending, ties by ascending id.
    ids.sort_by(|&a, &b| {
        pred.confidences()[b as usize]
            .total_cmp(&pred.confidences()[a as usize])
            .then(a.cmp(&b))
    });
    ids
}

fn ap_for_ranking(
    ranked_members: &[Vec<usize>],
    gts: &[Vec<usize>],
    iou_threshold: f64,
) -> (f64, usize, usize, usize) {
    let n_gt = gts.len();
    if n_gt == 0 {
        return (0.0, 0, ranked_members.len(), 0);
    }
    let mut matched = vec![false; n_gt];
    let mut is_tp = Vec::with_capacity(ranked_members.len());
    for members in ranked_members {
        // Highest-IoU unmatched ground-truth instance; ties take the
        // lowest index.
        let mut best: Option<(usize, f64)> = None;
        for (g, gt_members) in gts.iter().enumerate() {
            if matched[g] {
                continue;
            }
            let iou = instance_iou(members, gt_members).unwrap_or(0.0);
            if best.is_none_or(|(_, b)| iou > b) {
                best = Some((g, iou));
            }
        }
        match best {
            Some((g, iou)) if iou >= iou_threshold => {
                matched[g] = true;
                is_tp.push(true);
            }
            _ => is_tp.push(false),
        }
    }
    let tp_total = is_tp.iter().filter(|t| **t).count();
    let fp_total = is_tp.len() - tp_total;
    let fn_total = n_gt - tp_total;

    // All-points interpolation: precision envelope over recall.
    let mut precisions = Vec::with_capacity(is_tp.len() + 2);
    let mut recalls = Vec::with_capacity(is_tp.len() + 2);
    recalls.push(0.0);
    precisions.push(0.0);
    let mut tp = 0usize;
    for (rank, t) in is_tp.iter().enumerate() {
        if *t {
            tp += 1;
        }
        recalls.push(tp as f64 / n_gt as f64);
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    recalls.push(1.0);
    precisions.push(0.0);
    for i in (0..precisions.len() - 1).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let mut ap = 0.0;
    for i in 0..recalls.len() - 1 {
        ap += (recalls[i + 1] - recalls[i]) * precisions[i + 1];
    }
    (ap, tp_total, fp_total, fn_total)
}

/// Average precision at one IoU threshold: predictions sorted by confidence
/// (ties by ascending id), greedily matched to the highest-IoU unmatched
/// ground-truth instance, scored by the area under the all-points
/// interpolated precision-recall curve. Noise points form no prediction.
pub fn average_precision(
    pred: &InstanceAssignment,
    gt: &[u32],
    iou_threshold: f64,
) -> Result<f64> {
    if gt.len() != pred.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "{} gt labels but {} predicted points",
            gt.len(),
            pred.n_points()
        )));
    }
    let gts = gt_instances(gt);
    let ranked: Vec<Vec<usize>> = prediction_order(pred)
        .iter()
        .map(|&id| pred.members(id))
        .collect();
    Ok(ap_for_ranking(&ranked, &gts, iou_threshold).0)
}

/// IoU thresholds 0.50, 0.55, ..., 0.95.
pub fn map_thresholds() -> Vec<f64> {
    (0..10).map(|i| 0.50 + 0.05 * i as f64).collect()
}

/// AP averaged over the 0.50:0.05:0.95 thresholds, with AP@0.50 reported
/// separately.
pub fn mean_average_precision(pred: &InstanceAssignment, gt: &[u32]) -> Result<ApResult> {
    if gt.len() != pred.n_points() {
        return Err(Error::ShapeMismatch(format!(
            "{} gt labels but {} predicted points",
            gt.len(),
            pred.n_points()
        )));
    }
    let gts = gt_instances(gt);
    let ranked: Vec<Vec<usize>> = prediction_order(pred)
        .iter()
        .map(|&id| pred.members(id))
        .collect();
    let per_threshold: Vec<ApAtThreshold> = map_thresholds()
        .into_iter()
        .map(|threshold| {
            let (ap, tp, fp, fn_count) = ap_for_ranking(&ranked, &gts, threshold);
            ApAtThreshold {
                threshold,
                ap,
                tp,
                fp,
                fn_count,
            }
        })
        .collect();
    let map = per_threshold.iter().map(|t| t.ap).sum::<f64>() / per_threshold.len() as f64;
    let ap50 = per_threshold[0].ap;
    Ok(ApResult {
        per_threshold,
        map,
        ap50,
    })
}

/// Clustering methods the sweep can compare.
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, serde::Serialize, serde::Deserialize,
)]
#[serde(rename_all = "lowercase")]
pub enum SweepMethod {
    Radius,
    GraphCut,
    Dbscan,
    Agglomerative,
}

impl SweepMethod {
    pub fn name(self) -> &'static str {
        match self {
            SweepMethod::Radius => "radius",
            SweepMethod::GraphCut => "graphcut",
            SweepMethod::Dbscan => "dbscan",
            SweepMethod::Agglomerative => "agglomerative",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "radius" => Ok(SweepMethod::Radius),
            "graphcut" => Ok(SweepMethod::GraphCut),
            "dbscan" => Ok(SweepMethod::Dbscan),
            "agglomerative" => Ok(SweepMethod::Agglomerative),
            other => Err(Error::invalid(format!("unknown method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    pub kinds: Vec<NoiseKind>,
    /// Repetitions per (kind, magnitude) cell.
    pub reps: usize,
    pub base_seed: u64,
    /// Embedding size; None uses the number of distinct labels.
    pub embed_dim: Option<usize>,
    /// gaussian_center spatial scale; None uses r_init / 2.
    pub sigma: Option<f64>,
    pub postprocess: PostprocessConfig,
    pub dbscan_eps: f64,
    pub dbscan_min_pts: usize,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            kinds: vec![NoiseKind::Uniform, NoiseKind::GaussianCenter],
            reps: 5,
            base_seed: 0,
            embed_dim: None,
            sigma: None,
            postprocess: PostprocessConfig::default(),
            dbscan_eps: 0.5,
            dbscan_min_pts: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepRow {
    pub method: SweepMethod,
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub rep: usize,
    pub map: f64,
    pub ap50: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct SweepSummary {
    pub method: SweepMethod,
    pub kind: NoiseKind,
    pub magnitude: f64,
    pub mean_map: f64,
    pub std_map: f64,
    pub mean_ap50: f64,
    pub std_ap50: f64,
}

pub fn noise_kind_name(kind: NoiseKind) -> &'static str {
    match kind {
        NoiseKind::Uniform => "uniform",
        NoiseKind::GaussianCenter => "gaussian_center",
    }
}

/// Runs the full perfect-embeddings -> noise -> clustering -> mAP pipeline
/// for every (method, kind, magnitude, rep) cell. The same noisy embeddings
/// feed every method within a cell, so comparisons are paired; a cell's
/// noise seed derives from the base seed by cell index. Rows come back
/// sorted by (method, kind, magnitude, rep) no matter how cells were
/// scheduled.
pub fn noise_sweep(
    cloud: &PointCloud,
    methods: &[SweepMethod],
    magnitudes: &[f64],
    config: &SweepConfig,
) -> Result<Vec<SweepRow>> {
    let labels = cloud
        .labels()
        .ok_or_else(|| Error::invalid("sweep needs ground-truth labels"))?
        .to_vec();
    if config.reps == 0 {
        return Err(Error::invalid("reps must be >= 1"));
    }
    let n_labels = {
        let mut d: Vec<u32> = labels.clone();
        d.sort_unstable();
        d.dedup();
        d.len()
    };
    let d = config.embed_dim.unwrap_or(n_labels);
    let perfect = perfect_embeddings(cloud, d)?;
    let (r_init, _) = initial_radius(cloud)?;
    let sigma = config.sigma.unwrap_or(r_init / 2.0).max(1e-9);

    let mut cells = Vec::new();
    for (ki, &kind) in config.kinds.iter().enumerate() {
        for (mi, &magnitude) in magnitudes.iter().enumerate() {
            for rep in 0..config.reps {
                let cell_index = (ki * magnitudes.len() + mi) * config.reps + rep;
                cells.push((kind, magnitude, rep, cell_index as u64));
            }
        }
    }

    let rows: Result<Vec<Vec<SweepRow>>> = cells
        .par_iter()
        .map(|&(kind, magnitude, rep, cell_index)| {
            let noisy = add_noise(
                &perfect,
                cloud,
                &NoiseConfig {
                    kind,
                    magnitude,
                    sigma,
                    seed: config.base_seed.wrapping_add(cell_index),
                },
            )?;
            methods
                .iter()
                .map(|&method| {
                    let assignment = run_method(method, cloud, &noisy, config)?;
                    let scores = mean_average_precision(&assignment, &labels)?;
                    Ok(SweepRow {
                        method,
                        kind,
                        magnitude,
                        rep,
                        map: scores.map,
                        ap50: scores.ap50,
                    })
                })
                .collect()
        })
        .collect();
    let mut rows: Vec<SweepRow> = rows?.into_iter().flatten().collect();
    rows.sort_by(|a, b| {
        a.method
            .cmp(&b.method)
            .then(noise_kind_name(a.kind).cmp(noise_kind_name(b.kind)))
            .then(a.magnitude.total_cmp(&b.magnitude))
            .then(a.rep.cmp(&b.rep))
    });
    Ok(rows)
}

fn run_method(
    method: SweepMethod,
    cloud: &PointCloud,
    embeddings: &Embeddings,
    config: &SweepConfig,
) -> Result<InstanceAssignment> {
    match method {
        SweepMethod::Radius => radius_decremental_cluster(cloud, embeddings, &config.postprocess),
        SweepMethod::GraphCut => graph_cut_cluster(cloud, embeddings, &config.postprocess),
        SweepMethod::Dbscan => dbscan(embeddings, config.dbscan_eps, config.dbscan_min_pts),
        SweepMethod::Agglomerative => {
            agglomerative_cluster(embeddings, config.postprocess.agglomerative_threshold)
        }
    }
}

/// Mean and standard deviation per (method, kind, magnitude).
pub fn summarize_sweep(rows: &[SweepRow]) -> Vec<SweepSummary> {
    let mut keys: Vec<(SweepMethod, NoiseKind, f64)> = rows
        .iter()
        .map(|r| (r.method, r.kind, r.magnitude))
        .collect();
    keys.sort_by(|a, b| {
        a.0.cmp(&b.0)
            .then(noise_kind_name(a.1).cmp(noise_kind_name(b.1)))
            .then(a.2.total_cmp(&b.2))
    });
    keys.dedup_by(|a, b| a.0 == b.0 && a.1 == b.1 && a.2 == b.2);
    keys.into_iter()
        .map(|(method, kind, magnitude)| {
            let vals: Vec<&SweepRow> = rows
                .iter()
                .filter(|r| r.method == method && r.kind == kind && r.magnitude == magnitude)
                .collect();
            let n = vals.len() as f64;
            let mean_map = vals.iter().map(|r| r.map).sum::<f64>() / n;
            let mean_ap50 = vals.iter().map(|r| r.ap50).sum::<f64>() / n;
            let var_map = vals.iter().map(|r| (r.map - mean_map).powi(2)).sum::<f64>() / n;
            let var_ap50 = vals.iter().map(|r| (r.ap50 - mean_ap50).powi(2)).sum::<f64>() / n;
            SweepSummary {
                method,
                kind,
                magnitude,
                mean_map,
                std_map: var_map.sqrt(),
                mean_ap50,
                std_ap50: var_ap50.sqrt(),
            }
        })
        .collect()
}

/// Long-format sweep CSV: `method,noise_kind,magnitude,rep,map,ap50`.
pub fn save_sweep_csv(rows: &[SweepRow], path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "method,noise_kind,magnitude,rep,map,ap50")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.method.name(),
                noise_kind_name(r.kind),
                r.magnitude,
                r.rep,
                r.map,
                r.ap50
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}

/// Summary CSV: mean and stddev per (method, kind, magnitude).
pub fn save_summary_csv(summaries: &[SweepSummary], path: &Path) -> Result<()> {
    use std::io::Write;
    let file = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut w = std::io::BufWriter::new(file);
    let res = (|| -> std::io::Result<()> {
        writeln!(w, "method,noise_kind,magnitude,mean_map,std_map,mean_ap50,std_ap50")?;
        for s in summaries {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                s.method.name(),
                noise_kind_name(s.kind),
                s.magnitude,
                s.mean_map,
                s.std_map,
                s.mean_ap50,
                s.std_ap50
            )?;
        }
        w.flush()
    })();
    res.map_err(|e| Error::io(path.display().to_string(), e))
}
