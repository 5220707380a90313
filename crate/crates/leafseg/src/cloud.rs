//! Point-cloud data model, deterministic subsampling, plant-center
//! computation, and a synthetic labeled rosette-plant generator.

use crate::error::{Error, Result};
use crate::math::{self, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A plant point cloud: positions in meters, RGB colors in [0, 1], and
/// optional per-point leaf-instance labels.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    positions: Vec<Vec3>,
    colors: Vec<Vec3>,
    labels: Option<Vec<u32>>,
}

impl PointCloud {
    /// Builds a cloud, validating lengths, finiteness, and color range.
    pub fn new(
        positions: Vec<Vec3>,
        colors: Vec<Vec3>,
        labels: Option<Vec<u32>>,
    ) -> Result<Self> {
        if colors.len() != positions.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} positions but {} colors",
                positions.len(),
                colors.len()
            )));
        }
        if let Some(l) = &labels {
            if l.len() != positions.len() {
                return Err(Error::ShapeMismatch(format!(
                    "{} positions but {} labels",
                    positions.len(),
                    l.len()
                )));
            }
        }
        for (i, p) in positions.iter().enumerate() {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::invalid(format!(
                    "non-finite coordinate at point {i}"
                )));
            }
        }
        for (i, c) in colors.iter().enumerate() {
            if !c.iter().all(|v| (0.0..=1.0).contains(v)) {
                return Err(Error::invalid(format!(
                    "color out of [0,1] at point {i}"
                )));
            }
        }
        Ok(PointCloud {
            positions,
            colors,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn colors(&self) -> &[Vec3] {
        &self.colors
    }

    pub fn labels(&self) -> Option<&[u32]> {
        self.labels.as_deref()
    }

    /// Same cloud with positions replaced (colors and labels carried over).
    /// Used by rigid and per-point transforms that keep point identity.
    pub fn with_positions(&self, positions: Vec<Vec3>) -> Result<Self> {
        if positions.len() != self.len() {
            return Err(Error::ShapeMismatch(format!(
                "replacement has {} positions, cloud has {}",
                positions.len(),
                self.len()
            )));
        }
        PointCloud::new(positions, self.colors.clone(), self.labels.clone())
    }

    /// Subset of the cloud at the given original indices, in the given order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let positions = indices.iter().map(|&i| self.positions[i]).collect();
        let colors = indices.iter().map(|&i| self.colors[i]).collect();
        let labels = self
            .labels
            .as_ref()
            .map(|l| indices.iter().map(|&i| l[i]).collect());
        PointCloud {
            positions,
            colors,
            labels,
        }
    }
}

/// Plant center: the arithmetic mean of all point positions.
pub fn plant_center(cloud: &PointCloud) -> Result<Vec3> {
    if cloud.is_empty() {
        return Err(Error::invalid("plant_center of an empty cloud"));
    }
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in cloud.positions() {
        c = math::add(c, *p);
    }
    Ok(math::scale(c, 1.0 / n))
}

/// Uniform sampling of `min(n, N)` points without replacement.
///
/// Uses a Fisher-Yates prefix shuffle driven by a ChaCha8 stream so the
/// selection is identical across platforms for a fixed seed. The chosen
/// indices are returned sorted ascending, so the subsampled cloud keeps the
/// original relative order; when `n >= N` the cloud is returned unchanged.
pub fn subsample(cloud: &PointCloud, n: usize, seed: u64) -> Result<(PointCloud, Vec<usize>)> {
    if n == 0 {
        return Err(Error::invalid("subsample size must be >= 1"));
    }
    let total = cloud.len();
    if n >= total {
        return Ok((cloud.clone(), (0..total).collect()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut indices: Vec<usize> = (0..total).collect();
    for i in 0..n {
        let j = rng.gen_range(i..total);
        indices.swap(i, j);
    }
    let mut chosen: Vec<usize> = indices[..n].to_vec();
    chosen.sort_unstable();
    Ok((cloud.select(&chosen), chosen))
}

/// Parameters of the synthetic rosette-plant generator.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SynthPlantParams {
    pub n_leaves: usize,
    pub points_per_leaf: usize,
    pub stem_points: usize,
    /// Midrib length in meters.
    pub leaf_length: f64,
    /// Maximum blade width in meters (must be < leaf_length).
    pub leaf_width: f64,
    /// Arch of the midrib in radians; 0 gives flat leaves.
    pub droop_angle: f64,
    /// Per-component uniform position noise in meters.
    pub position_jitter: f64,
    /// Radius at which leaf petioles attach, so every plant has the hard
    /// near-stem region where all leaves meet.
    pub petiole_radius: f64,
    pub seed: u64,
}

impl Default for SynthPlantParams {
    fn default() -> Self {
        SynthPlantParams {
            n_leaves: 5,
            points_per_leaf: 100,
            stem_points: 20,
            leaf_length: 0.18,
            leaf_width: 0.06,
            droop_angle: 0.5,
            position_jitter: 0.002,
            petiole_radius: 0.02,
            seed: 0,
        }
    }
}

impl SynthPlantParams {
    fn validate(&self) -> Result<()> {
        if self.n_leaves < 1 {
            return Err(Error::invalid("n_leaves must be >= 1"));
        }
        if self.points_per_leaf < 1 {
            return Err(Error::invalid("points_per_leaf must be >= 1"));
        }
        if !(self.leaf_length > self.leaf_width && self.leaf_width > 0.0) {
            return Err(Error::invalid("need leaf_length > leaf_width > 0"));
        }
        if self.position_jitter < 0.0 || self.petiole_radius < 0.0 {
            return Err(Error::invalid("jitter and petiole_radius must be >= 0"));
        }
        Ok(())
    }
}

const STEM_BASE_HEIGHT: f64 = 0.01;

/// Generates a labeled rosette plant.
///
/// Leaves are arranged radially at azimuths `2*pi*i / n_leaves`. Each leaf is
/// a midrib of length `leaf_length` starting `petiole_radius` from the stem,
/// arching up and back down by `droop_angle`, with an elliptical half-width
/// profile that peaks at `leaf_width / 2` mid-blade and vanishes at petiole
/// and tip. Stem points fill a thin cylinder at the origin and take the label
/// of the nearest leaf petiole. Leaf tips are the radially outermost points,
/// so tip-first postprocessing has something to seed from.
pub fn synth_plant(params: &SynthPlantParams) -> Result<PointCloud> {
    params.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let total = params.n_leaves * params.points_per_leaf + params.stem_points;
    let mut positions = Vec::with_capacity(total);
    let mut colors = Vec::with_capacity(total);
    let mut labels = Vec::with_capacity(total);

    let jitter = |rng: &mut ChaCha8Rng, j: f64| -> f64 {
        if j == 0.0 {
            0.0
        } else {
            rng.gen_range(-j..=j)
        }
    };

    let mut petioles = Vec::with_capacity(params.n_leaves);
    for leaf in 0..params.n_leaves {
        let azimuth = 2.0 * std::f64::consts::PI * leaf as f64 / params.n_leaves as f64;
        let (sin_a, cos_a) = azimuth.sin_cos();
        let radial = [cos_a, sin_a, 0.0];
        let lateral = [-sin_a, cos_a, 0.0];
        petioles.push([
            params.petiole_radius * cos_a,
            params.petiole_radius * sin_a,
            STEM_BASE_HEIGHT,
        ]);

        for _ in 0..params.points_per_leaf {
            // t runs petiole -> tip along the midrib.
            let t: f64 = rng.gen_range(0.0..=1.0);
            let r = params.petiole_radius + t * params.leaf_length;
            // Arch: rises to mid-blade, returns to base height at the tip.
            let z = STEM_BASE_HEIGHT
                + params.leaf_length * params.droop_angle.sin() * 2.0 * t * (1.0 - t);
            // Elliptical blade profile, zero-width at both ends.
            let half_width = 0.5 * params.leaf_width * (1.0 - (2.0 * t - 1.0).powi(2)).sqrt();
            let w: f64 = rng.gen_range(-1.0..=1.0) * half_width;

            let p = [
                r * radial[0] + w * lateral[0] + jitter(&mut rng, params.position_jitter),
                r * radial[1] + w * lateral[1] + jitter(&mut rng, params.position_jitter),
                z + jitter(&mut rng, params.position_jitter),
            ];
            positions.push(p);
            colors.push([
                0.10 + 0.10 * rng.gen_range(0.0..=1.0),
                0.45 + 0.30 * rng.gen_range(0.0..=1.0),
                0.10 + 0.05 * rng.gen_range(0.0..=1.0),
            ]);
            labels.push(leaf as u32);
        }
    }

    for _ in 0..params.stem_points {
        let angle: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let radius = 0.5 * params.petiole_radius * rng.gen_range(0.0..=1.0f64).sqrt();
        let height: f64 = rng.gen_range(0.0..=STEM_BASE_HEIGHT);
        let p = [
            radius * angle.cos() + jitter(&mut rng, params.position_jitter),
            radius * angle.sin() + jitter(&mut rng, params.position_jitter),
            height + jitter(&mut rng, params.position_jitter),
        ];
        let nearest = petioles
            .iter()
            .enumerate()
            .min_by(|(_, a), (_, b)| {
                math::dist(p, **a).total_cmp(&math::dist(p, **b))
            })
            .map(|(i, _)| i as u32)
            .unwrap_or(0);
        positions.push(p);
        colors.push([
            0.35 + 0.10 * rng.gen_range(0.0..=1.0),
            0.40 + 0.15 * rng.gen_range(0.0..=1.0),
            0.20 + 0.05 * rng.gen_range(0.0..=1.0),
        ]);
        labels.push(nearest);
    }

    PointCloud::new(positions, colors, Some(labels))
}
