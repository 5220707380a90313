//! Bottom-up instance extraction from embeddings: agglomerative clustering
//! under cosine similarity, the radius-decremental postprocessing that
//! starts at the leaf tips, a seeded min-cut variant, and the DBSCAN
//! baseline.
//!
//! Points near the stem are the hard cases — every leaf's petiole meets
//! there — so both postprocessings cluster the radially outermost points
//! first and work inward, merging each new cluster into an existing
//! instance when the cosine similarity of the mean embeddings clears the
//! merge threshold.

use crate::cloud::{plant_center, PointCloud};
use crate::error::{Error, Result};
use crate::geodesy::build_knn_graph;
use crate::loss::Embeddings;
use crate::math::{self, Vec3};
use std::path::Path;

/// Per-point instance ids (None marks noise) plus one confidence per
/// instance. Ids are contiguous from 0 and every id has at least one
/// member.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceAssignment {
    point_instance: Vec<Option<u32>>,
    confidence: Vec<f64>,
    /// Set when an algorithm had to fall back from its primary strategy.
    pub note: Option<String>,
}

impl InstanceAssignment {
    pub fn new(point_instance: Vec<Option<u32>>, confidence: Vec<f64>) -> Result<Self> {
        let n_instances = confidence.len();
        let mut seen = vec![false; n_instances];
        for id in point_instance.iter().flatten() {
            let id = *id as usize;
            if id >= n_instances {
                return Err(Error::invalid(format!(
                    "instance id {id} out of range for {n_instances} confidences"
                )));
            }
            seen[id] = true;
        }
        if let Some(missing) = seen.iter().position(|s| !s) {
            return Err(Error::invalid(format!("instance {missing} has no members")));
        }
        if confidence.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(Error::invalid("confidences must lie in [0,1]"));
        }
        Ok(InstanceAssignment {
            point_instance,
            confidence,
            note: None,
        })
    }

    pub fn n_points(&self) -> usize {
        self.point_instance.len()
    }

    pub fn n_instances(&self) -> usize {
        self.confidence.len()
    }

    pub fn assignments(&self) -> &[Option<u32>] {
        &self.point_instance
    }

    pub fn confidences(&self) -> &[f64] {
        &self.confidence
    }

    pub fn members(&self, instance: u32) -> Vec<usize> {
        self.point_instance
            .iter()
            .enumerate()
            .filter(|(_, id)| **id == Some(instance))
            .map(|(i, _)| i)
            .collect()
    }

    /// CSV rows `point_index,instance_id,confidence`, noise as `-1` with
    /// confidence 0.
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let file = std::fs::File::create(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let mut w = std::io::BufWriter::new(file);
        let res = (|| -> std::io::Result<()> {
            writeln!(w, "point_index,instance_id,confidence")?;
            for (i, id) in self.point_instance.iter().enumerate() {
                match id {
                    Some(id) => writeln!(w, "{i},{id},{}", self.confidence[*id as usize])?,
                    None => writeln!(w, "{i},-1,0")?,
                }
            }
            w.flush()
        })();
        res.map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        use std::io::BufRead;
        let file = std::fs::File::open(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let reader = std::io::BufReader::new(file);
        let mut point_instance = Vec::new();
        let mut confidence: Vec<f64> = Vec::new();
        for (idx, line) in reader.lines().enumerate() {
            let line_no = idx + 1;
            let line = line.map_err(|e| Error::parse(line_no, e.to_string()))?;
            let line = line.trim_end_matches('\r');
            if idx == 0 {
                if line != "point_index,instance_id,confidence" {
                    return Err(Error::parse(1, "bad assignment header"));
                }
                continue;
            }
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::parse(line_no, "expected 3 columns"));
            }
            let id: i64 = fields[1]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("instance id: {e}")))?;
            let conf: f64 = fields[2]
                .parse()
                .map_err(|e| Error::parse(line_no, format!("confidence: {e}")))?;
            if id < 0 {
                point_instance.push(None);
            } else {
                let id = id as usize;
                if confidence.len() <= id {
                    confidence.resize(id + 1, 0.0);
                }
                confidence[id] = conf;
                point_instance.push(Some(id as u32));
            }
        }
        InstanceAssignment::new(point_instance, confidence)
    }
}

/// Average-linkage agglomeration over cosine similarity on local row
/// indices; merging stops when the best pair's linkage similarity falls
/// below `gamma`. Clusters come back ordered by their smallest member.
fn average_linkage_groups(rows: &[&[f64]], gamma: f64) -> Vec<Vec<usize>> {
    let m = rows.len();
    if m == 0 {
        return Vec::new();
    }
    let mut sim = vec![0.0; m * m];
    for i in 0..m {
        for j in (i + 1)..m {
            let s = math::cosine(rows[i], rows[j]);
            sim[i * m + j] = s;
            sim[j * m + i] = s;
        }
    }
    let mut active = vec![true; m];
    let mut size = vec![1usize; m];
    let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();

    // Lazy max-heap of candidate pairs; stale entries are skipped when the
    // stored similarity no longer matches the live matrix. Ties order by
    // the lowest (i, j) pair.
    #[derive(PartialEq)]
    struct Pair {
        sim: f64,
        i: usize,
        j: usize,
    }
    impl Eq for Pair {}
    impl PartialOrd for Pair {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Pair {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            self.sim
                .total_cmp(&other.sim)
                .then(other.i.cmp(&self.i))
                .then(other.j.cmp(&self.j))
        }
    }
    let mut heap = std::collections::BinaryHeap::new();
    for i in 0..m {
        for j in (i + 1)..m {
            heap.push(Pair {
                sim: sim[i * m + j],
                i,
                j,
            });
        }
    }

    while let Some(Pair { sim: s, i, j }) = heap.pop() {
        if !active[i] || !active[j] || sim[i * m + j] != s {
            continue;
        }
        if s < gamma {
            break;
        }
        // Merge j into i with the size-weighted average-linkage update.
        active[j] = false;
        let (ni, nj) = (size[i] as f64, size[j] as f64);
        for c in 0..m {
            if !active[c] || c == i {
                continue;
            }
            let merged = (ni * sim[i * m + c] + nj * sim[j * m + c]) / (ni + nj);
            sim[i * m + c] = merged;
            sim[c * m + i] = merged;
            let (a, b) = if i < c { (i, c) } else { (c, i) };
            heap.push(Pair { sim: merged, i: a, j: b });
        }
        size[i] += size[j];
        let moved = std::mem::take(&mut members[j]);
        members[i].extend(moved);
    }

    let mut groups: Vec<Vec<usize>> = (0..m)
        .filter(|&i| active[i])
        .map(|i| {
            let mut g = std::mem::take(&mut members[i]);
            g.sort_unstable();
            g
        })
        .collect();
    groups.sort_by_key(|g| g[0]);
    groups
}

/// Confidence of one instance: mean cosine similarity of its members to the
/// instance's mean embedding, clamped to [0, 1]. The centroid leaves the
/// scored member out — with self-inclusion every singleton would score
/// exactly 1.0 and spurious one-point instances would outrank real leaves
/// in the average-precision sweep. Singletons score 0.
fn mean_member_confidence(embeddings: &Embeddings, members: &[usize]) -> f64 {
    if members.len() < 2 {
        return 0.0;
    }
    let d = embeddings.dim();
    let mut sum = vec![0.0; d];
    for &i in members {
        for (m, v) in sum.iter_mut().zip(embeddings.row(i)) {
            *m += v;
        }
    }
    let mut rest = vec![0.0; d];
    let avg = members
        .iter()
        .map(|&i| {
            let row = embeddings.row(i);
            for (r, (s, v)) in rest.iter_mut().zip(sum.iter().zip(row)) {
                *r = s - v;
            }
            math::cosine(row, &rest)
        })
        .sum::<f64>()
        / members.len() as f64;
    avg.clamp(0.0, 1.0)
}

fn assignment_from_groups(
    n_points: usize,
    groups: &[Vec<usize>],
    embeddings: &Embeddings,
) -> Result<InstanceAssignment> {
    let mut point_instance = vec![None; n_points];
    let mut confidence = Vec::with_capacity(groups.len());
    for (id, group) in groups.iter().enumerate() {
        for &p in group {
            point_instance[p] = Some(id as u32);
        }
        confidence.push(mean_member_confidence(embeddings, group));
    }
    InstanceAssignment::new(point_instance, confidence)
}

/// Agglomerative clustering of whole-cloud embeddings.
pub fn agglomerative_cluster(embeddings: &Embeddings, gamma_agg: f64) -> Result<InstanceAssignment> {
    let rows: Vec<&[f64]> = (0..embeddings.n()).map(|i| embeddings.row(i)).collect();
    let groups = average_linkage_groups(&rows, gamma_agg);
    assignment_from_groups(embeddings.n(), &groups, embeddings)
}

/// Which plane radial distances are measured in.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RadialPlane {
    /// Horizontal distance only; the stem is vertical (default).
    Xy,
    /// Full 3D norm.
    ThreeD,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct PostprocessConfig {
    /// Number of radius decrements S.
    pub steps: usize,
    /// Merge threshold gamma on the cosine similarity of cluster means.
    pub merge_threshold: f64,
    /// Stopping threshold of the per-pass agglomerative clustering.
    pub agglomerative_threshold: f64,
    pub radial_plane: RadialPlane,
    /// kNN parameters of the graph-cut variant.
    pub graph_k: usize,
    pub graph_tau: f64,
}

impl Default for PostprocessConfig {
    fn default() -> Self {
        // The agglomerative threshold gates raw pairwise cosines, which are
        // much noisier than the denoised cluster means gamma gates, so it
        // defaults to the midpoint of the same-instance (1) and
        // cross-instance (0) similarity of unit-ish embeddings.
        PostprocessConfig {
            steps: 4,
            merge_threshold: 0.9,
            agglomerative_threshold: 0.5,
            radial_plane: RadialPlane::Xy,
            graph_k: crate::geodesy::DEFAULT_K,
            graph_tau: crate::geodesy::DEFAULT_TAU,
        }
    }
}

/// Half the smaller of the two axis-aligned extents about the plant center:
/// the starting radius that isolates the leaf tips.
pub fn initial_radius(cloud: &PointCloud) -> Result<(f64, Vec3)> {
    let center = plant_center(cloud)?;
    let mut dx = 0.0f64;
    let mut dy = 0.0f64;
    for p in cloud.positions() {
        dx = dx.max((p[0] - center[0]).abs());
        dy = dy.max((p[1] - center[1]).abs());
    }
    Ok((dx.min(dy) / 2.0, center))
}

fn radial_distances(cloud: &PointCloud, center: Vec3, plane: RadialPlane) -> Vec<f64> {
    cloud
        .positions()
        .iter()
        .map(|p| match plane {
            RadialPlane::Xy => ((p[0] - center[0]).powi(2) + (p[1] - center[1]).powi(2)).sqrt(),
            RadialPlane::ThreeD => math::dist(*p, center),
        })
        .collect()
}

/// Live instance state shared by both postprocessings.
struct InstancePool {
    members: Vec<Vec<usize>>,
    sums: Vec<Vec<f64>>,
    d: usize,
}

impl InstancePool {
    fn new(d: usize) -> Self {
        InstancePool {
            members: Vec::new(),
            sums: Vec::new(),
            d,
        }
    }

    fn mean(&self, k: usize) -> Vec<f64> {
        let n = self.members[k].len() as f64;
        self.sums[k].iter().map(|v| v / n).collect()
    }

    fn push(&mut self, group: Vec<usize>, embeddings: &Embeddings) -> u32 {
        let mut sum = vec![0.0; self.d];
        for &p in &group {
            for (s, v) in sum.iter_mut().zip(embeddings.row(p)) {
                *s += v;
            }
        }
        self.members.push(group);
        self.sums.push(sum);
        (self.members.len() - 1) as u32
    }

    fn absorb(&mut self, k: usize, group: &[usize], embeddings: &Embeddings) {
        for &p in group {
            for (s, v) in self.sums[k].iter_mut().zip(embeddings.row(p)) {
                *s += v;
            }
        }
        self.members[k].extend_from_slice(group);
    }

    /// Best existing instance by cosine of mean embeddings; ties take the
    /// lowest id.
    fn best_match(&self, group_mean: &[f64]) -> Option<(usize, f64)> {
        let mut best: Option<(usize, f64)> = None;
        for k in 0..self.members.len() {
            let s = math::cosine(group_mean, &self.mean(k));
            if best.is_none_or(|(_, bs)| s > bs) {
                best = Some((k, s));
            }
        }
        best
    }
}

fn group_mean(embeddings: &Embeddings, group: &[usize]) -> Vec<f64> {
    let mut mean = vec![0.0; embeddings.dim()];
    for &p in group {
        for (m, v) in mean.iter_mut().zip(embeddings.row(p)) {
            *m += v;
        }
    }
    for m in &mut mean {
        *m /= group.len() as f64;
    }
    mean
}

/// One pass of the shared step-2 logic: cluster the candidate points in
/// embedding space, then merge each new group into the best existing
/// instance when the mean-embedding similarity clears `gamma`.
fn merge_pass(
    candidates: &[usize],
    embeddings: &Embeddings,
    pool: &mut InstancePool,
    assigned: &mut [Option<u32>],
    gamma: f64,
    gamma_agg: f64,
) {
    if candidates.is_empty() {
        return;
    }
    let rows: Vec<&[f64]> = candidates.iter().map(|&p| embeddings.row(p)).collect();
    let groups = average_linkage_groups(&rows, gamma_agg);
    for local_group in groups {
        let group: Vec<usize> = local_group.iter().map(|&l| candidates[l]).collect();
        let mean = group_mean(embeddings, &group);
        let id = match pool.best_match(&mean) {
            Some((k, s)) if s >= gamma => {
                pool.absorb(k, &group, embeddings);
                k as u32
            }
            _ => pool.push(group.clone(), embeddings),
        };
        for &p in &group {
            assigned[p] = Some(id);
        }
    }
}

fn finish_assignment(
    pool: InstancePool,
    assigned: Vec<Option<u32>>,
    embeddings: &Embeddings,
) -> Result<InstanceAssignment> {
    let confidence = (0..pool.members.len())
        .map(|k| mean_member_confidence(embeddings, &pool.members[k]))
        .collect();
    InstanceAssignment::new(assigned, confidence)
}

/// Radius-decremental clustering: pass t of S uses radius
/// `r_init * (1 - t/S)` (t = 0 is the tip pass at `r_init` itself), each
/// pass clustering only the not-yet-assigned points radially outside the
/// current radius. At t = S the radius is 0 and every point is assigned;
/// points exactly at the center, if any, get one extra cleanup pass.
pub fn radius_decremental_cluster(
    cloud: &PointCloud,
    embeddings: &Embeddings,
    config: &PostprocessConfig,
) -> Result<InstanceAssignment> {
    check_alignment(cloud, embeddings)?;
    if config.steps < 1 {
        return Err(Error::invalid("steps must be >= 1"));
    }
    let (r_init, center) = initial_radius(cloud)?;
    let dist = radial_distances(cloud, center, config.radial_plane);
    let mut assigned: Vec<Option<u32>> = vec![None; cloud.len()];
    let mut pool = InstancePool::new(embeddings.dim());

    for t in 0..=config.steps {
        let r = r_init * (1.0 - t as f64 / config.steps as f64);
        let candidates: Vec<usize> = (0..cloud.len())
            .filter(|&p| assigned[p].is_none() && dist[p] > r)
            .collect();
        merge_pass(
            &candidates,
            embeddings,
            &mut pool,
            &mut assigned,
            config.merge_threshold,
            config.agglomerative_threshold,
        );
    }
    // Points with radial distance exactly 0 never exceed any radius.
    let leftovers: Vec<usize> = (0..cloud.len()).filter(|&p| assigned[p].is_none()).collect();
    merge_pass(
        &leftovers,
        embeddings,
        &mut pool,
        &mut assigned,
        config.merge_threshold,
        config.agglomerative_threshold,
    );
    finish_assignment(pool, assigned, embeddings)
}

fn check_alignment(cloud: &PointCloud, embeddings: &Embeddings) -> Result<()> {
    if cloud.len() != embeddings.n() {
        return Err(Error::ShapeMismatch(format!(
            "cloud has {} points but embeddings have {} rows",
            cloud.len(),
            embeddings.n()
        )));
    }
    Ok(())
}

/// Seeded min-cut postprocessing. The tip pass supplies the seeds; each
/// seed is separated from the union of the others by a minimum s-t cut on
/// the kNN graph, with neighbor-edge capacities `max(0, cos(e_u, e_v))` and
/// the standard seeded-segmentation terminal arcs: every non-seed point
/// links to the source with capacity `max(0, cos(e_p, mean_k))` and to the
/// sink with the best such affinity to any other seed. Without the terminal
/// arcs a minimum cut is free to sever the *other* seeds at their petioles
/// instead of isolating this seed's leaf, engulfing the whole interior. A
/// point is claimed by a seed when that seed's cut — and no other — places
/// it on the source side; contested or unreached points join the seed with
/// the most similar mean embedding. A final pass merges instances whose
/// mean similarity clears `merge_threshold`. With no seeds (degenerate
/// r_init) the routine falls back to one agglomerative pass and flags it
/// in `note`.
pub fn graph_cut_cluster(
    cloud: &PointCloud,
    embeddings: &Embeddings,
    config: &PostprocessConfig,
) -> Result<InstanceAssignment> {
    check_alignment(cloud, embeddings)?;
    let (r_init, center) = initial_radius(cloud)?;
    let dist = radial_distances(cloud, center, config.radial_plane);
    let tips: Vec<usize> = (0..cloud.len()).filter(|&p| dist[p] > r_init).collect();
    let seeds: Vec<Vec<usize>> = {
        let rows: Vec<&[f64]> = tips.iter().map(|&p| embeddings.row(p)).collect();
        average_linkage_groups(&rows, config.agglomerative_threshold)
            .into_iter()
            .map(|g| g.into_iter().map(|l| tips[l]).collect())
            .collect()
    };
    if seeds.is_empty() {
        let mut out = agglomerative_cluster(embeddings, config.agglomerative_threshold)?;
        out.note = Some("no tip seeds found; fell back to agglomerative clustering".into());
        return Ok(out);
    }

    let graph = build_knn_graph(cloud, config.graph_k, config.graph_tau)?;
    let n = cloud.len();
    let mut assigned: Vec<Option<u32>> = vec![None; n];
    let mut in_seed = vec![false; n];
    for (k, seed) in seeds.iter().enumerate() {
        for &p in seed {
            assigned[p] = Some(k as u32);
            in_seed[p] = true;
        }
    }
    let seed_means: Vec<Vec<f64>> = seeds.iter().map(|s| group_mean(embeddings, s)).collect();

    // Independent per-seed cuts (order-free, safe to parallelize).
    let source_sides: Vec<Vec<bool>> = (0..seeds.len())
        .map(|k| {
            let mut flow = MaxFlow::new(n + 2);
            let source = n;
            let sink = n + 1;
            for &(u, v, _) in graph.edges() {
                let c = math::cosine(embeddings.row(u as usize), embeddings.row(v as usize));
                if c > 0.0 {
                    flow.add_undirected(u as usize, v as usize, c);
                }
            }
            for (j, seed) in seeds.iter().enumerate() {
                for &p in seed {
                    if j == k {
                        flow.add_directed(source, p, MaxFlow::BIG);
                    } else {
                        flow.add_directed(p, sink, MaxFlow::BIG);
                    }
                }
            }
            for (p, _) in in_seed.iter().enumerate().filter(|(_, s)| !**s) {
                let own = math::cosine(embeddings.row(p), &seed_means[k]).max(0.0);
                let other = seed_means
                    .iter()
                    .enumerate()
                    .filter(|(j, _)| *j != k)
                    .map(|(_, m)| math::cosine(embeddings.row(p), m))
                    .fold(0.0f64, f64::max);
                if own > 0.0 {
                    flow.add_directed(source, p, own);
                }
                if other > 0.0 {
                    flow.add_directed(p, sink, other);
                }
            }
            flow.dinic(source, sink);
            let mut side = vec![false; n];
            for p in flow.source_side(source) {
                if p < n {
                    side[p] = true;
                }
            }
            side
        })
        .collect();
    for (p, slot) in assigned.iter_mut().enumerate() {
        if slot.is_some() {
            continue;
        }
        let mut claimants = source_sides.iter().enumerate().filter(|(_, side)| side[p]);
        if let (Some((k, _)), None) = (claimants.next(), claimants.next()) {
            *slot = Some(k as u32);
        }
    }

    // Disconnected or cut-ambiguous leftovers: most similar seed mean.
    let mut pool = InstancePool::new(embeddings.dim());
    for k in 0..seeds.len() {
        let members: Vec<usize> = (0..n).filter(|&p| assigned[p] == Some(k as u32)).collect();
        pool.push(members, embeddings);
    }
    for (p, slot) in assigned.iter_mut().enumerate() {
        if slot.is_none() {
            let (k, _) = pool
                .best_match(embeddings.row(p))
                .expect("at least one seed");
            pool.absorb(k, &[p], embeddings);
            *slot = Some(k as u32);
        }
    }

    // Final merge per the mean-similarity rule.
    let merged = merge_instances_by_mean(&pool, config.merge_threshold);
    let mut remap = vec![0u32; pool.members.len()];
    let mut final_members: Vec<Vec<usize>> = Vec::new();
    for group in &merged {
        let id = final_members.len() as u32;
        let mut all = Vec::new();
        for &k in group {
            remap[k] = id;
            all.extend_from_slice(&pool.members[k]);
        }
        all.sort_unstable();
        final_members.push(all);
    }
    let assigned = assigned
        .into_iter()
        .map(|id| id.map(|k| remap[k as usize]))
        .collect();
    let confidence = final_members
        .iter()
        .map(|m| mean_member_confidence(embeddings, m))
        .collect();
    InstanceAssignment::new(assigned, confidence)
}

/// Repeatedly merges the best pair of instances whose mean-embedding cosine
/// similarity is at least `gamma`; returns groups of original instance ids.
fn merge_instances_by_mean(pool: &InstancePool, gamma: f64) -> Vec<Vec<usize>> {
    struct Group {
        ids: Vec<usize>,
        sum: Vec<f64>,
        count: usize,
    }
    impl Group {
        fn mean(&self) -> Vec<f64> {
            self.sum.iter().map(|v| v / self.count as f64).collect()
        }
    }
    let k = pool.members.len();
    let mut groups: Vec<Option<Group>> = (0..k)
        .map(|i| {
            Some(Group {
                ids: vec![i],
                sum: pool.sums[i].clone(),
                count: pool.members[i].len(),
            })
        })
        .collect();
    loop {
        let mut best: Option<(usize, usize, f64)> = None;
        for i in 0..k {
            let Some(gi) = &groups[i] else { continue };
            let mi = gi.mean();
            for (j, slot) in groups.iter().enumerate().skip(i + 1) {
                let Some(gj) = slot else { continue };
                let s = math::cosine(&mi, &gj.mean());
                if best.is_none_or(|(_, _, bs)| s > bs) {
                    best = Some((i, j, s));
                }
            }
        }
        match best {
            Some((i, j, s)) if s >= gamma => {
                let merged = groups[j].take().unwrap();
                let slot = groups[i].as_mut().unwrap();
                slot.ids.extend(merged.ids);
                for (a, b) in slot.sum.iter_mut().zip(merged.sum) {
                    *a += b;
                }
                slot.count += merged.count;
            }
            _ => break,
        }
    }
    groups.into_iter().flatten().map(|g| g.ids).collect()
}

/// Dinic max-flow on a residual arc list; capacities are cosine
/// similarities so everything is f64 with a small positive floor deciding
/// reachability.
struct MaxFlow {
    adj: Vec<Vec<usize>>,
    to: Vec<usize>,
    cap: Vec<f64>,
    level: Vec<i32>,
    iter: Vec<usize>,
}

impl MaxFlow {
    const BIG: f64 = 1e18;
    const EPS: f64 = 1e-12;

    fn new(n: usize) -> Self {
        MaxFlow {
            adj: vec![Vec::new(); n],
            to: Vec::new(),
            cap: Vec::new(),
            level: vec![0; n],
            iter: vec![0; n],
        }
    }

    fn add_arc(&mut self, u: usize, v: usize, c: f64) -> usize {
        let id = self.to.len();
        self.adj[u].push(id);
        self.to.push(v);
        self.cap.push(c);
        id
    }

    fn add_directed(&mut self, u: usize, v: usize, c: f64) {
        self.add_arc(u, v, c);
        self.add_arc(v, u, 0.0);
    }

    fn add_undirected(&mut self, u: usize, v: usize, c: f64) {
        self.add_arc(u, v, c);
        self.add_arc(v, u, c);
    }

    fn bfs(&mut self, s: usize, t: usize) -> bool {
        self.level.iter_mut().for_each(|l| *l = -1);
        let mut queue = std::collections::VecDeque::new();
        self.level[s] = 0;
        queue.push_back(s);
        while let Some(u) = queue.pop_front() {
            for &e in &self.adj[u] {
                let v = self.to[e];
                if self.cap[e] > Self::EPS && self.level[v] < 0 {
                    self.level[v] = self.level[u] + 1;
                    queue.push_back(v);
                }
            }
        }
        self.level[t] >= 0
    }

    fn dfs(&mut self, u: usize, t: usize, f: f64) -> f64 {
        if u == t {
            return f;
        }
        while self.iter[u] < self.adj[u].len() {
            let e = self.adj[u][self.iter[u]];
            let v = self.to[e];
            if self.cap[e] > Self::EPS && self.level[v] == self.level[u] + 1 {
                let d = self.dfs(v, t, f.min(self.cap[e]));
                if d > Self::EPS {
                    self.cap[e] -= d;
                    self.cap[e ^ 1] += d;
                    return d;
                }
            }
            self.iter[u] += 1;
        }
        0.0
    }

    fn dinic(&mut self, s: usize, t: usize) -> f64 {
        let mut flow = 0.0;
        while self.bfs(s, t) {
            self.iter.iter_mut().for_each(|i| *i = 0);
            loop {
                let f = self.dfs(s, t, f64::INFINITY);
                if f <= Self::EPS {
                    break;
                }
                flow += f;
            }
        }
        flow
    }

    /// Vertices reachable from `s` in the residual graph.
    fn source_side(&self, s: usize) -> Vec<usize> {
        let mut seen = vec![false; self.adj.len()];
        let mut queue = std::collections::VecDeque::new();
        seen[s] = true;
        queue.push_back(s);
        let mut out = Vec::new();
        while let Some(u) = queue.pop_front() {
            out.push(u);
            for &e in &self.adj[u] {
                let v = self.to[e];
                if self.cap[e] > Self::EPS && !seen[v] {
                    seen[v] = true;
                    queue.push_back(v);
                }
            }
        }
        out
    }
}

/// Standard density-based clustering over the embedding rows with the
/// Euclidean metric; a point's eps-neighborhood includes itself. Noise
/// points stay unassigned. Instance confidence is one minus the noise
/// fraction seen in the members' neighborhoods, floored at 0.5.
pub fn dbscan(features: &Embeddings, eps: f64, min_pts: usize) -> Result<InstanceAssignment> {
    if eps <= 0.0 || eps.is_nan() {
        return Err(Error::invalid("eps must be > 0"));
    }
    if min_pts < 1 {
        return Err(Error::invalid("min_pts must be >= 1"));
    }
    let n = features.n();
    let neighborhood = |i: usize| -> Vec<usize> {
        (0..n)
            .filter(|&j| euclid(features.row(i), features.row(j)) <= eps)
            .collect()
    };
    let mut assigned: Vec<Option<u32>> = vec![None; n];
    let mut visited = vec![false; n];
    let mut cluster = 0u32;
    let mut members: Vec<Vec<usize>> = Vec::new();
    for start in 0..n {
        if visited[start] {
            continue;
        }
        visited[start] = true;
        let seeds = neighborhood(start);
        if seeds.len() < min_pts {
            continue; // noise unless adopted by a later cluster
        }
        let mut current = Vec::new();
        assigned[start] = Some(cluster);
        current.push(start);
        let mut queue: std::collections::VecDeque<usize> = seeds.into();
        while let Some(p) = queue.pop_front() {
            if assigned[p].is_none() {
                assigned[p] = Some(cluster);
                current.push(p);
            }
            if visited[p] {
                continue;
            }
            visited[p] = true;
            let nbrs = neighborhood(p);
            if nbrs.len() >= min_pts {
                for q in nbrs {
                    queue.push_back(q);
                }
            }
        }
        current.sort_unstable();
        members.push(current);
        cluster += 1;
    }
    let confidence = members
        .iter()
        .map(|m| {
            let mut total = 0usize;
            let mut noisy = 0usize;
            for &p in m {
                for q in neighborhood(p) {
                    total += 1;
                    if assigned[q].is_none() {
                        noisy += 1;
                    }
                }
            }
            let frac = if total == 0 { 0.0 } else { noisy as f64 / total as f64 };
            (1.0 - frac).max(0.5)
        })
        .collect();
    InstanceAssignment::new(assigned, confidence)
}

fn euclid(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{synth_plant, SynthPlantParams};
    use crate::eval::perfect_embeddings;
    use approx::assert_relative_eq;

    fn emb(rows: &[&[f64]]) -> Embeddings {
        Embeddings::from_rows(rows.iter().map(|r| r.to_vec()).collect()).unwrap()
    }

    fn plant(n_leaves: usize, seed: u64) -> PointCloud {
        synth_plant(&SynthPlantParams {
            n_leaves,
            points_per_leaf: 50,
            stem_points: 12,
            seed,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn agglomerative_identical_rows_form_one_cluster() {
        let e = emb(&[&[1.0, 0.0], &[1.0, 0.0], &[1.0, 0.0]]);
        let a = agglomerative_cluster(&e, 0.5).unwrap();
        assert_eq!(a.n_instances(), 1);
        assert!(a.assignments().iter().all(|id| *id == Some(0)));
    }

    #[test]
    fn agglomerative_orthogonal_groups_split_at_half() {
        let e = emb(&[
            &[1.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[0.0, 1.0],
        ]);
        let a = agglomerative_cluster(&e, 0.5).unwrap();
        assert_eq!(a.n_instances(), 2);
        assert_eq!(a.assignments()[0], a.assignments()[1]);
        assert_eq!(a.assignments()[2], a.assignments()[3]);
        assert_ne!(a.assignments()[0], a.assignments()[2]);
    }

    #[test]
    fn agglomerative_above_one_keeps_singletons() {
        let e = emb(&[&[1.0, 0.0], &[1.0, 0.0], &[0.0, 1.0]]);
        let a = agglomerative_cluster(&e, 1.1).unwrap();
        assert_eq!(a.n_instances(), 3);
    }

    #[test]
    fn heap_linkage_matches_naive_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..30 {
            let m = rng.gen_range(2..25);
            let d = rng.gen_range(2..5);
            let rows_data: Vec<Vec<f64>> = (0..m)
                .map(|_| (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect();
            let rows: Vec<&[f64]> = rows_data.iter().map(|r| r.as_slice()).collect();
            let gamma = rng.gen_range(-0.5..1.0);
            let fast = average_linkage_groups(&rows, gamma);
            let slow = naive_linkage(&rows, gamma);
            assert_eq!(fast, slow, "m={m} gamma={gamma}");
        }
    }

    /// Straightforward quadratic-scan reference for the linkage engine.
    fn naive_linkage(rows: &[&[f64]], gamma: f64) -> Vec<Vec<usize>> {
        let m = rows.len();
        let mut sim = vec![0.0; m * m];
        for i in 0..m {
            for j in 0..m {
                sim[i * m + j] = math::cosine(rows[i], rows[j]);
            }
        }
        let mut active: Vec<bool> = vec![true; m];
        let mut size = vec![1usize; m];
        let mut members: Vec<Vec<usize>> = (0..m).map(|i| vec![i]).collect();
        loop {
            let mut best: Option<(usize, usize, f64)> = None;
            for i in 0..m {
                if !active[i] {
                    continue;
                }
                for j in (i + 1)..m {
                    if !active[j] {
                        continue;
                    }
                    let s = sim[i * m + j];
                    if best.is_none_or(|(_, _, bs)| s > bs) {
                        best = Some((i, j, s));
                    }
                }
            }
            match best {
                Some((i, j, s)) if s >= gamma => {
                    active[j] = false;
                    let (ni, nj) = (size[i] as f64, size[j] as f64);
                    for c in 0..m {
                        if active[c] && c != i {
                            let v = (ni * sim[i * m + c] + nj * sim[j * m + c]) / (ni + nj);
                            sim[i * m + c] = v;
                            sim[c * m + i] = v;
                        }
                    }
                    size[i] += size[j];
                    let moved = std::mem::take(&mut members[j]);
                    members[i].extend(moved);
                }
                _ => break,
            }
        }
        let mut groups: Vec<Vec<usize>> = (0..m)
            .filter(|&i| active[i])
            .map(|i| {
                let mut g = std::mem::take(&mut members[i]);
                g.sort_unstable();
                g
            })
            .collect();
        groups.sort_by_key(|g| g[0]);
        groups
    }

    #[test]
    fn initial_radius_hand_case() {
        // d_x = 4 (points at +-4 in x), d_y = 2: r_init = min / 2 = 1.
        let cloud = PointCloud::new(
            vec![
                [4.0, 0.0, 0.0],
                [-4.0, 0.0, 0.0],
                [0.0, 2.0, 0.0],
                [0.0, -2.0, 0.0],
            ],
            vec![[0.5; 3]; 4],
            None,
        )
        .unwrap();
        let (r, center) = initial_radius(&cloud).unwrap();
        assert_relative_eq!(r, 1.0);
        assert_eq!(center, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn initial_radius_square_footprint() {
        let cloud = PointCloud::new(
            vec![
                [1.0, 0.0, 0.0],
                [-1.0, 0.0, 0.0],
                [0.0, 1.0, 0.0],
                [0.0, -1.0, 0.0],
            ],
            vec![[0.5; 3]; 4],
            None,
        )
        .unwrap();
        let (r, _) = initial_radius(&cloud).unwrap();
        assert_relative_eq!(r, 0.5);
    }

    #[test]
    fn initial_radius_single_point_is_zero() {
        let cloud = PointCloud::new(vec![[3.0, 1.0, 0.5]], vec![[0.5; 3]], None).unwrap();
        let (r, _) = initial_radius(&cloud).unwrap();
        assert_eq!(r, 0.0);
    }

    #[test]
    fn radius_cluster_recovers_perfect_embeddings() {
        let cloud = plant(3, 5);
        let e = perfect_embeddings(&cloud, 3).unwrap();
        let a = radius_decremental_cluster(&cloud, &e, &PostprocessConfig::default()).unwrap();
        assert_eq!(a.n_instances(), 3);
        // Partition must equal the labels up to relabeling.
        let labels = cloud.labels().unwrap();
        let mut mapping = std::collections::HashMap::new();
        for (i, id) in a.assignments().iter().enumerate() {
            let id = id.expect("total assignment");
            let prev = mapping.insert(labels[i], id);
            if let Some(prev) = prev {
                assert_eq!(prev, id, "label split across instances");
            }
        }
        assert_eq!(mapping.len(), 3);
    }

    #[test]
    fn radius_cluster_identical_embeddings_single_instance() {
        let cloud = plant(4, 6);
        let rows = vec![vec![1.0, 0.0, 0.0]; cloud.len()];
        let e = Embeddings::from_rows(rows).unwrap();
        for steps in [1, 4, 9] {
            let a = radius_decremental_cluster(
                &cloud,
                &e,
                &PostprocessConfig {
                    steps,
                    ..Default::default()
                },
            )
            .unwrap();
            assert_eq!(a.n_instances(), 1, "steps={steps}");
        }
    }

    #[test]
    fn radius_cluster_single_step_still_total() {
        let cloud = plant(5, 7);
        let e = perfect_embeddings(&cloud, 5).unwrap();
        let a = radius_decremental_cluster(
            &cloud,
            &e,
            &PostprocessConfig {
                steps: 1,
                ..Default::default()
            },
        )
        .unwrap();
        assert!(a.assignments().iter().all(|id| id.is_some()));
    }

    #[test]
    fn graph_cut_recovers_perfect_embeddings() {
        let cloud = plant(3, 8);
        let e = perfect_embeddings(&cloud, 3).unwrap();
        let a = graph_cut_cluster(&cloud, &e, &PostprocessConfig::default()).unwrap();
        assert_eq!(a.n_instances(), 3);
        let labels = cloud.labels().unwrap();
        let mut mapping = std::collections::HashMap::new();
        for (i, id) in a.assignments().iter().enumerate() {
            let id = id.expect("total assignment");
            let prev = mapping.insert(labels[i], id);
            if let Some(prev) = prev {
                assert_eq!(prev, id);
            }
        }
        assert_eq!(mapping.len(), 3);
        assert!(a.note.is_none());
    }

    #[test]
    fn graph_cut_single_seed_takes_everything() {
        let cloud = plant(1, 9);
        let rows = vec![vec![0.0, 1.0, 0.0]; cloud.len()];
        let e = Embeddings::from_rows(rows).unwrap();
        let a = graph_cut_cluster(&cloud, &e, &PostprocessConfig::default()).unwrap();
        assert_eq!(a.n_instances(), 1);
        assert!(a.assignments().iter().all(|id| *id == Some(0)));
    }

    #[test]
    fn graph_cut_falls_back_without_seeds() {
        // A single point gives r_init = 0 and no strictly-outside tips.
        let cloud = PointCloud::new(vec![[0.0; 3]], vec![[0.5; 3]], None).unwrap();
        let e = emb(&[&[1.0, 0.0]]);
        let a = graph_cut_cluster(&cloud, &e, &PostprocessConfig::default()).unwrap();
        assert!(a.note.is_some());
        assert_eq!(a.n_instances(), 1);
    }

    #[test]
    fn graph_cut_assigns_disconnected_point_by_similarity() {
        // Two tight blobs plus one far-away point with no graph edges; the
        // orphan's embedding matches blob 1.
        let mut pts = vec![
            [0.30, 0.0, 0.0],
            [0.31, 0.0, 0.0],
            [-0.30, 0.0, 0.0],
            [-0.31, 0.0, 0.0],
        ];
        pts.push([0.0, 5.0, 0.0]);
        let cloud = PointCloud::new(pts, vec![[0.5; 3]; 5], None).unwrap();
        let e = emb(&[
            &[1.0, 0.0],
            &[1.0, 0.0],
            &[0.0, 1.0],
            &[0.0, 1.0],
            &[0.9, 0.1],
        ]);
        let a = graph_cut_cluster(
            &cloud,
            &e,
            &PostprocessConfig {
                merge_threshold: 0.99,
                ..Default::default()
            },
        )
        .unwrap();
        let orphan = a.assignments()[4].unwrap();
        assert_eq!(orphan, a.assignments()[0].unwrap());
    }

    #[test]
    fn dbscan_two_blobs() {
        let mut rows = Vec::new();
        for i in 0..6 {
            rows.push(vec![0.01 * i as f64, 0.0]);
        }
        for i in 0..6 {
            rows.push(vec![10.0 + 0.01 * i as f64, 0.0]);
        }
        let e = Embeddings::from_rows(rows).unwrap();
        let a = dbscan(&e, 1.0, 3).unwrap();
        assert_eq!(a.n_instances(), 2);
        assert!(a.assignments().iter().all(|id| id.is_some()), "no noise");
    }

    #[test]
    fn dbscan_all_within_eps_single_cluster() {
        let e = emb(&[&[0.0, 0.0], &[0.1, 0.0], &[0.0, 0.1]]);
        let a = dbscan(&e, 1.0, 2).unwrap();
        assert_eq!(a.n_instances(), 1);
    }

    #[test]
    fn dbscan_isolated_point_is_noise() {
        let e = emb(&[&[0.0, 0.0], &[100.0, 0.0]]);
        let a = dbscan(&e, 1.0, 2).unwrap();
        assert_eq!(a.n_instances(), 0);
        assert!(a.assignments().iter().all(|id| id.is_none()));
    }

    #[test]
    fn assignment_csv_round_trip() {
        use tempfile::tempdir;
        let cloud = plant(3, 11);
        let e = perfect_embeddings(&cloud, 3).unwrap();
        let a = radius_decremental_cluster(&cloud, &e, &PostprocessConfig::default()).unwrap();
        let dir = tempdir().unwrap();
        let path = dir.path().join("a.csv");
        a.save_csv(&path).unwrap();
        let back = InstanceAssignment::load_csv(&path).unwrap();
        assert_eq!(back.assignments(), a.assignments());
        assert_eq!(back.confidences(), a.confidences());
    }

    #[test]
    fn monotone_instance_count_in_gamma() {
        let cloud = plant(4, 13);
        let e = perfect_embeddings(&cloud, 4).unwrap();
        let mut counts = Vec::new();
        for gamma in [0.3, 0.9, 1.5] {
            let a = radius_decremental_cluster(
                &cloud,
                &e,
                &PostprocessConfig {
                    merge_threshold: gamma,
                    ..Default::default()
                },
            )
            .unwrap();
            counts.push(a.n_instances());
        }
        assert!(counts[0] <= counts[1] && counts[1] <= counts[2], "{counts:?}");
    }

    #[test]
    fn rotation_about_z_leaves_assignments_invariant() {
        // Rigid z-rotation preserves xy radial distances about the center
        // and the kNN edge set; embeddings stay put, so both postprocessings
        // must return the same partition.
        let cloud = plant(5, 17);
        let e = perfect_embeddings(&cloud, 5).unwrap();
        let rot = crate::math::Mat3::rot_z(1.1);
        let center = plant_center(&cloud).unwrap();
        let rotated: Vec<Vec3> = cloud
            .positions()
            .iter()
            .map(|p| math::add(rot.mul_vec(math::sub(*p, center)), center))
            .collect();
        let turned = cloud.with_positions(rotated).unwrap();
        let config = PostprocessConfig::default();

        let base = radius_decremental_cluster(&cloud, &e, &config).unwrap();
        let after = radius_decremental_cluster(&turned, &e, &config).unwrap();
        assert_eq!(base.assignments(), after.assignments());

        let base = graph_cut_cluster(&cloud, &e, &config).unwrap();
        let after = graph_cut_cluster(&turned, &e, &config).unwrap();
        assert_eq!(base.assignments(), after.assignments());
    }
}
