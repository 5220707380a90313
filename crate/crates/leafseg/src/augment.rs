//! Domain-specific and standard augmentations producing one or two
//! correspondence-preserving views of a plant cloud.
//!
//! Point-removing augmentations (leaf occlusion, erase) run once on a shared
//! base cloud before any view is derived, so point i of every view
//! corresponds to base point i. Each view then applies only
//! point-count-preserving transforms (rotation, translation, jitter, leaf
//! distortion).

use crate::cloud::{plant_center, subsample, PointCloud};
use crate::error::{Error, Result};
use crate::math::{self, Mat3, Vec3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Leaf-occlusion parameters: K ellipses with semi-axes drawn uniformly
/// from (0, delta) per component.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct OcclusionParams {
    pub k_ellipses: usize,
    /// Maximum semi-axis lengths (x, y) in meters.
    pub delta: [f64; 2],
    pub seed: u64,
}

impl Default for OcclusionParams {
    fn default() -> Self {
        // K = 2 suits row crops where occlusions come from neighbors in the
        // same row; raise it for irregular plantings.
        OcclusionParams {
            k_ellipses: 2,
            delta: [0.09, 0.03],
            seed: 0,
        }
    }
}

/// One sampled occlusion ellipse in the xy-plane.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Ellipse {
    pub center: [f64; 2],
    pub semi_axes: [f64; 2],
}

impl Ellipse {
    /// Signed indicator: `(x-cx)^2/a^2 + (y-cy)^2/b^2 - 1`; inside and
    /// boundary are <= 0.
    pub fn eval(&self, x: f64, y: f64) -> f64 {
        let dx = x - self.center[0];
        let dy = y - self.center[1];
        (dx * dx) / (self.semi_axes[0] * self.semi_axes[0])
            + (dy * dy) / (self.semi_axes[1] * self.semi_axes[1])
            - 1.0
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.eval(x, y) <= 0.0
    }
}

/// Removes all points whose xy-projection falls inside any of K sampled
/// ellipses, simulating occlusion by adjacent plants. Each ellipse picks x
/// or y as its major axis with probability 1/2, draws both semi-axes from
/// U(0, delta), and centers itself on the cloud point farthest along the
/// chosen axis (signed, relative to the plant center). Returns the
/// surviving cloud, the kept original indices (strictly increasing), and
/// the sampled ellipses.
pub fn leaf_occlusion_recorded(
    cloud: &PointCloud,
    params: &OcclusionParams,
) -> Result<(PointCloud, Vec<usize>, Vec<Ellipse>)> {
    if !(params.delta[0] > 0.0 && params.delta[1] > 0.0) {
        return Err(Error::invalid("occlusion delta components must be > 0"));
    }
    let center = plant_center(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut ellipses = Vec::with_capacity(params.k_ellipses);
    for _ in 0..params.k_ellipses {
        let major_is_x = rng.gen_bool(0.5);
        let a = rng.gen_range(0.0..params.delta[0]);
        let b = rng.gen_range(0.0..params.delta[1]);
        let axis = if major_is_x { 0 } else { 1 };
        let far = cloud
            .positions()
            .iter()
            .enumerate()
            .max_by(|(i, p), (j, q)| {
                (p[axis] - center[axis])
                    .total_cmp(&(q[axis] - center[axis]))
                    .then(j.cmp(i))
            })
            .map(|(_, p)| p)
            .expect("non-empty cloud");
        ellipses.push(Ellipse {
            center: [far[0], far[1]],
            semi_axes: [a, b],
        });
    }
    let kept: Vec<usize> = cloud
        .positions()
        .iter()
        .enumerate()
        .filter(|(_, p)| !ellipses.iter().any(|e| e.contains(p[0], p[1])))
        .map(|(i, _)| i)
        .collect();
    Ok((cloud.select(&kept), kept, ellipses))
}

/// [`leaf_occlusion_recorded`] without the sampled-ellipse record.
pub fn leaf_occlusion(
    cloud: &PointCloud,
    params: &OcclusionParams,
) -> Result<(PointCloud, Vec<usize>)> {
    let (c, kept, _) = leaf_occlusion_recorded(cloud, params)?;
    Ok((c, kept))
}

/// Leaf-distortion parameters: maximum Euler angles about x, y, z.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DistortionParams {
    /// (alpha_max, beta_max, gamma_max) in radians, each in [0, pi].
    pub theta_max: [f64; 3],
    pub seed: u64,
    /// Rotate about the world origin instead of the plant center. The
    /// centered form is the default: wind pivots leaves about the stem.
    #[serde(default)]
    pub about_origin: bool,
}

impl Default for DistortionParams {
    fn default() -> Self {
        DistortionParams {
            theta_max: [0.1, 0.1, 0.3],
            seed: 0,
            about_origin: false,
        }
    }
}

/// Rotates each point by Euler angles scaled with its distance to the plant
/// center, imitating leaf movement in wind: points at the center stay put,
/// the farthest point turns by the full sampled fraction of `theta_max`.
/// Returns the distorted cloud and the sampled fractions (alpha, beta,
/// gamma), each drawn from U(0, 1).
pub fn leaf_distortion_recorded(
    cloud: &PointCloud,
    params: &DistortionParams,
) -> Result<(PointCloud, [f64; 3])> {
    if !params
        .theta_max
        .iter()
        .all(|&t| (0.0..=std::f64::consts::PI).contains(&t))
    {
        return Err(Error::invalid("theta_max angles must be in [0, pi]"));
    }
    let center = plant_center(cloud)?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let theta: [f64; 3] = [
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..=1.0),
        rng.gen_range(0.0..=1.0),
    ];
    let dists: Vec<f64> = cloud
        .positions()
        .iter()
        .map(|p| math::dist(*p, center))
        .collect();
    let max_d = dists.iter().fold(0.0f64, |m, &d| m.max(d));
    if max_d == 0.0 {
        // Every point coincides with the center: identity.
        return Ok((cloud.clone(), theta));
    }
    let positions = cloud
        .positions()
        .iter()
        .zip(&dists)
        .map(|(p, &d)| {
            let f = d / max_d;
            let angles = [
                f * theta[0] * params.theta_max[0],
                f * theta[1] * params.theta_max[1],
                f * theta[2] * params.theta_max[2],
            ];
            if angles == [0.0, 0.0, 0.0] {
                // Zero rotation must be the exact identity, both for zero
                // theta_max and for the point at the center itself.
                return *p;
            }
            let rot = Mat3::rot_z(angles[2])
                .mul_mat(&Mat3::rot_y(angles[1]))
                .mul_mat(&Mat3::rot_x(angles[0]));
            if params.about_origin {
                rot.mul_vec(*p)
            } else {
                math::add(rot.mul_vec(math::sub(*p, center)), center)
            }
        })
        .collect();
    Ok((cloud.with_positions(positions)?, theta))
}

/// [`leaf_distortion_recorded`] without the sampled-angle record.
pub fn leaf_distortion(cloud: &PointCloud, params: &DistortionParams) -> Result<PointCloud> {
    Ok(leaf_distortion_recorded(cloud, params)?.0)
}

/// 3D versions of common 2D augmentations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StandardKind {
    /// Rigid rotation about the plant center; magnitude is the maximum
    /// angle in radians of a random axis-angle rotation.
    Rotate,
    /// Uniform offset drawn per axis from [-magnitude, magnitude].
    Translate,
    /// Per-point additive noise drawn per component from
    /// [-magnitude, magnitude].
    Jitter,
    /// Removes one contiguous spherical neighborhood holding the given
    /// fraction (magnitude in [0, 1]) of the points.
    Erase,
}

/// Applies one standard augmentation. The kept-index map is the identity
/// except for `Erase`, which reports the surviving original indices.
pub fn standard_augment(
    cloud: &PointCloud,
    kind: StandardKind,
    magnitude: f64,
    seed: u64,
) -> Result<(PointCloud, Vec<usize>)> {
    if magnitude < 0.0 {
        return Err(Error::invalid("augmentation magnitude must be >= 0"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let identity: Vec<usize> = (0..cloud.len()).collect();
    match kind {
        StandardKind::Rotate => {
            let center = plant_center(cloud)?;
            let axis = random_unit_vector(&mut rng);
            let angle = rng.gen_range(0.0..=magnitude);
            let rot = Mat3::axis_angle(axis, angle);
            let positions = cloud
                .positions()
                .iter()
                .map(|p| math::add(rot.mul_vec(math::sub(*p, center)), center))
                .collect();
            Ok((cloud.with_positions(positions)?, identity))
        }
        StandardKind::Translate => {
            let t = [
                rng.gen_range(-magnitude..=magnitude),
                rng.gen_range(-magnitude..=magnitude),
                rng.gen_range(-magnitude..=magnitude),
            ];
            let positions = cloud.positions().iter().map(|p| math::add(*p, t)).collect();
            Ok((cloud.with_positions(positions)?, identity))
        }
        StandardKind::Jitter => {
            let positions = cloud
                .positions()
                .iter()
                .map(|p| {
                    [
                        p[0] + rng.gen_range(-magnitude..=magnitude),
                        p[1] + rng.gen_range(-magnitude..=magnitude),
                        p[2] + rng.gen_range(-magnitude..=magnitude),
                    ]
                })
                .collect();
            Ok((cloud.with_positions(positions)?, identity))
        }
        StandardKind::Erase => {
            if magnitude > 1.0 {
                return Err(Error::invalid("erase fraction must be <= 1"));
            }
            if cloud.is_empty() {
                return Ok((cloud.clone(), identity));
            }
            let n_remove = ((cloud.len() as f64) * magnitude).round() as usize;
            if n_remove == 0 {
                return Ok((cloud.clone(), identity));
            }
            let seed_idx = rng.gen_range(0..cloud.len());
            let seed_pos = cloud.positions()[seed_idx];
            let mut by_dist: Vec<(f64, usize)> = cloud
                .positions()
                .iter()
                .enumerate()
                .map(|(i, p)| (math::dist(*p, seed_pos), i))
                .collect();
            by_dist.sort_unstable_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut removed = vec![false; cloud.len()];
            for &(_, i) in by_dist.iter().take(n_remove.min(cloud.len())) {
                removed[i] = true;
            }
            let kept: Vec<usize> = (0..cloud.len()).filter(|&i| !removed[i]).collect();
            Ok((cloud.select(&kept), kept))
        }
    }
}

fn random_unit_vector(rng: &mut ChaCha8Rng) -> Vec3 {
    loop {
        let v = [
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
            rng.gen_range(-1.0..=1.0),
        ];
        let n = math::norm(v);
        if n > 1e-3 && n <= 1.0 {
            return math::scale(v, 1.0 / n);
        }
    }
}

/// View-generation configuration. Serializes as the JSON document the CLI
/// accepts; all sub-seeds derive from `seed`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct ViewConfig {
    /// 1 or 2.
    pub n_views: usize,
    /// Shared subsample size applied to the base cloud; None keeps all.
    pub n_points: Option<usize>,
    pub occlusion: Option<OcclusionParams>,
    /// Fraction of points removed by a spherical erase on the base.
    pub erase_fraction: Option<f64>,
    /// Max angle (radians) of the per-view random rigid rotation.
    pub rotation_range: Option<f64>,
    /// Max per-axis offset (meters) of the per-view random translation.
    pub translation_range: Option<f64>,
    /// Per-view per-point noise half-width in meters.
    pub jitter: Option<f64>,
    pub distortion: Option<DistortionParams>,
    pub seed: u64,
}

impl Default for ViewConfig {
    fn default() -> Self {
        ViewConfig {
            n_views: 1,
            n_points: None,
            occlusion: None,
            erase_fraction: None,
            rotation_range: None,
            translation_range: None,
            jitter: None,
            distortion: None,
            seed: 0,
        }
    }
}

/// Values sampled while building views, echoed by the CLI under
/// `--record-draws`.
#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct ViewDraws {
    pub occlusion_ellipses: Vec<Ellipse>,
    /// Per view, the sampled distortion fractions (alpha, beta, gamma).
    pub distortion_theta: Vec<[f64; 3]>,
}

/// Output of [`make_views`]: the shared base cloud, its index map into the
/// original cloud, and the per-view clouds (index-aligned with the base).
#[derive(Debug, Clone)]
pub struct Views {
    pub views: Vec<PointCloud>,
    pub base: PointCloud,
    /// Original index of each base/view point.
    pub base_indices: Vec<usize>,
    pub draws: ViewDraws,
}

/// Builds one or two views. Occlusion, erase, and subsampling apply once to
/// the shared base (in that order) so views stay index-aligned; rotation,
/// translation, jitter, and distortion apply per view with seeds derived
/// from `config.seed`.
pub fn make_views(cloud: &PointCloud, config: &ViewConfig) -> Result<Views> {
    if !(config.n_views == 1 || config.n_views == 2) {
        return Err(Error::invalid("n_views must be 1 or 2"));
    }
    let mut draws = ViewDraws::default();
    let mut base = cloud.clone();
    let mut base_indices: Vec<usize> = (0..cloud.len()).collect();

    let mut seeder = ChaCha8Rng::seed_from_u64(config.seed);
    let mut next_seed = move || seeder.gen::<u64>();

    if let Some(occ) = &config.occlusion {
        let params = OcclusionParams {
            seed: next_seed(),
            ..occ.clone()
        };
        let (c, kept, ellipses) = leaf_occlusion_recorded(&base, &params)?;
        base_indices = kept.iter().map(|&i| base_indices[i]).collect();
        base = c;
        draws.occlusion_ellipses = ellipses;
    }
    if let Some(frac) = config.erase_fraction {
        let (c, kept) = standard_augment(&base, StandardKind::Erase, frac, next_seed())?;
        base_indices = kept.iter().map(|&i| base_indices[i]).collect();
        base = c;
    }
    if base.is_empty() {
        return Err(Error::invalid(
            "removal augmentations emptied the base cloud",
        ));
    }
    if let Some(n) = config.n_points {
        let (c, kept) = subsample(&base, n, next_seed())?;
        base_indices = kept.iter().map(|&i| base_indices[i]).collect();
        base = c;
    }

    let mut views = Vec::with_capacity(config.n_views);
    for _ in 0..config.n_views {
        let mut view = base.clone();
        if let Some(range) = config.rotation_range {
            view = standard_augment(&view, StandardKind::Rotate, range, next_seed())?.0;
        }
        if let Some(range) = config.translation_range {
            view = standard_augment(&view, StandardKind::Translate, range, next_seed())?.0;
        }
        if let Some(mag) = config.jitter {
            view = standard_augment(&view, StandardKind::Jitter, mag, next_seed())?.0;
        }
        if let Some(dist) = &config.distortion {
            let params = DistortionParams {
                seed: next_seed(),
                ..dist.clone()
            };
            let (c, theta) = leaf_distortion_recorded(&view, &params)?;
            view = c;
            draws.distortion_theta.push(theta);
        }
        views.push(view);
    }
    Ok(Views {
        views,
        base,
        base_indices,
        draws,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cloud::{synth_plant, SynthPlantParams};
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn cloud_of(points: Vec<Vec3>) -> PointCloud {
        let n = points.len();
        PointCloud::new(points, vec![[0.5; 3]; n], None).unwrap()
    }

    fn plant() -> PointCloud {
        synth_plant(&SynthPlantParams {
            n_leaves: 4,
            points_per_leaf: 60,
            stem_points: 10,
            seed: 21,
            ..Default::default()
        })
        .unwrap()
    }

    #[test]
    fn ellipse_eval_matches_hand_computation() {
        let e = Ellipse {
            center: [0.0, 0.0],
            semi_axes: [2.0, 1.0],
        };
        // 1.9^2 / 4 - 1 = -0.0975: removed.
        assert_relative_eq!(e.eval(1.9, 0.0), -0.0975, epsilon = 1e-12);
        assert!(e.contains(1.9, 0.0));
        // 1.5^2 / 1 - 1 = 1.25: kept.
        assert_relative_eq!(e.eval(0.0, 1.5), 1.25, epsilon = 1e-12);
        assert!(!e.contains(0.0, 1.5));
        // Center evaluates to exactly -1.
        assert_eq!(e.eval(0.0, 0.0), -1.0);
        assert!(e.contains(0.0, 0.0));
    }

    #[test]
    fn occlusion_keeps_strictly_increasing_index_map() {
        let (out, kept, ellipses) = leaf_occlusion_recorded(
            &plant(),
            &OcclusionParams {
                k_ellipses: 2,
                delta: [0.1, 0.05],
                seed: 3,
            },
        )
        .unwrap();
        assert_eq!(out.len(), kept.len());
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(ellipses.len(), 2);
        assert!(out.len() < plant().len(), "something should be removed");
    }

    #[test]
    fn occlusion_removal_agrees_with_direct_formula() {
        let cloud = plant();
        let params = OcclusionParams {
            k_ellipses: 3,
            delta: [0.1, 0.06],
            seed: 9,
        };
        let (_, kept, ellipses) = leaf_occlusion_recorded(&cloud, &params).unwrap();
        let kept_set: std::collections::HashSet<usize> = kept.iter().copied().collect();
        for (i, p) in cloud.positions().iter().enumerate() {
            let inside = ellipses.iter().any(|e| {
                (p[0] - e.center[0]).powi(2) / e.semi_axes[0].powi(2)
                    + (p[1] - e.center[1]).powi(2) / e.semi_axes[1].powi(2)
                    - 1.0
                    <= 0.0
            });
            assert_eq!(!inside, kept_set.contains(&i), "point {i}");
        }
    }

    #[test]
    fn distortion_zero_angles_is_identity() {
        let cloud = plant();
        let out = leaf_distortion(
            &cloud,
            &DistortionParams {
                theta_max: [0.0, 0.0, 0.0],
                seed: 5,
                about_origin: false,
            },
        )
        .unwrap();
        assert_eq!(out.positions(), cloud.positions());
    }

    #[test]
    fn distortion_fixes_the_center_point() {
        let center_probe = cloud_of(vec![
            [0.0, 0.0, 0.0],
            [1.0, 0.0, 0.0],
            [-1.0, 0.0, 0.0],
        ]);
        // Center is the origin; the origin point must not move.
        let out = leaf_distortion(
            &center_probe,
            &DistortionParams {
                theta_max: [0.3, 0.3, 0.3],
                seed: 7,
                about_origin: false,
            },
        )
        .unwrap();
        assert_eq!(out.positions()[0], [0.0, 0.0, 0.0]);
    }

    #[test]
    fn distortion_farthest_point_turns_by_full_sampled_angle() {
        // A point and its mirror keep the center at the origin; both sit at
        // the maximum distance, so their angle fraction is exactly 1 and the
        // rotation about z is gamma * gamma_max. Point (1,0,0) must land on
        // (cos, sin, 0) of that angle.
        let cloud = cloud_of(vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
        let gamma_max = std::f64::consts::FRAC_PI_2;
        let (out, theta) = leaf_distortion_recorded(
            &cloud,
            &DistortionParams {
                theta_max: [0.0, 0.0, gamma_max],
                seed: 11,
                about_origin: false,
            },
        )
        .unwrap();
        let angle = theta[2] * gamma_max;
        assert!(angle > 0.0);
        let p = out.positions()[0];
        assert_relative_eq!(p[0], angle.cos(), epsilon = 1e-12);
        assert_relative_eq!(p[1], angle.sin(), epsilon = 1e-12);
        assert_relative_eq!(p[2], 0.0, epsilon = 1e-12);
        // With theta sampled as exactly 1 this would be the quarter turn
        // (1,0,0) -> (0,1,0); verify that limit through the formula.
        assert_relative_eq!(
            (gamma_max).cos(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn distortion_single_point_is_identity() {
        let cloud = cloud_of(vec![[0.3, 0.2, 0.1]]);
        let out = leaf_distortion(
            &cloud,
            &DistortionParams {
                theta_max: [0.5, 0.5, 0.5],
                seed: 2,
                about_origin: false,
            },
        )
        .unwrap();
        assert_eq!(out.positions(), cloud.positions());
    }

    #[test]
    fn rotate_preserves_pairwise_distances() {
        let cloud = plant();
        let (out, map) = standard_augment(&cloud, StandardKind::Rotate, 1.0, 13).unwrap();
        assert_eq!(map.len(), cloud.len());
        for i in (0..cloud.len()).step_by(17) {
            for j in (i + 1..cloud.len()).step_by(23) {
                let before = math::dist(cloud.positions()[i], cloud.positions()[j]);
                let after = math::dist(out.positions()[i], out.positions()[j]);
                assert_relative_eq!(before, after, max_relative = 1e-9);
            }
        }
    }

    #[test]
    fn translate_moves_every_point_by_one_offset() {
        let cloud = plant();
        let (out, _) = standard_augment(&cloud, StandardKind::Translate, 0.3, 17).unwrap();
        let offset = math::sub(out.positions()[0], cloud.positions()[0]);
        assert!(offset.iter().any(|v| *v != 0.0));
        assert!(offset.iter().all(|v| v.abs() <= 0.3));
        for (a, b) in cloud.positions().iter().zip(out.positions()) {
            let d = math::sub(*b, *a);
            for k in 0..3 {
                assert_relative_eq!(d[k], offset[k], epsilon = 1e-12);
            }
        }
        let center_shift = math::sub(
            plant_center(&out).unwrap(),
            plant_center(&cloud).unwrap(),
        );
        for k in 0..3 {
            assert_relative_eq!(center_shift[k], offset[k], epsilon = 1e-12);
        }
    }

    #[test]
    fn jitter_zero_magnitude_is_identity() {
        let cloud = plant();
        let (out, _) = standard_augment(&cloud, StandardKind::Jitter, 0.0, 19).unwrap();
        assert_eq!(out.positions(), cloud.positions());
    }

    #[test]
    fn erase_removes_requested_fraction() {
        let cloud = plant();
        let (out, kept) = standard_augment(&cloud, StandardKind::Erase, 0.25, 23).unwrap();
        let expected = cloud.len() - ((cloud.len() as f64) * 0.25).round() as usize;
        assert_eq!(out.len(), expected);
        assert!(kept.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn negative_magnitude_rejected() {
        let cloud = plant();
        assert!(standard_augment(&cloud, StandardKind::Jitter, -0.1, 0).is_err());
    }

    #[test]
    fn make_views_identity_config_returns_base() {
        let cloud = plant();
        let out = make_views(&cloud, &ViewConfig::default()).unwrap();
        assert_eq!(out.views.len(), 1);
        assert_eq!(out.views[0], out.base);
        assert_eq!(out.base, cloud);
        assert_eq!(out.base_indices, (0..cloud.len()).collect::<Vec<_>>());
    }

    #[test]
    fn make_views_two_views_share_correspondence() {
        let cloud = plant();
        let config = ViewConfig {
            n_views: 2,
            n_points: Some(100),
            occlusion: Some(OcclusionParams::default()),
            erase_fraction: Some(0.1),
            rotation_range: Some(0.5),
            translation_range: Some(0.05),
            jitter: Some(0.001),
            distortion: Some(DistortionParams::default()),
            seed: 31,
        };
        let out = make_views(&cloud, &config).unwrap();
        assert_eq!(out.views.len(), 2);
        assert_eq!(out.views[0].len(), out.base.len());
        assert_eq!(out.views[1].len(), out.base.len());
        assert_eq!(out.base_indices.len(), out.base.len());
        // Labels travel with indices: every view point i must carry the
        // label of original point base_indices[i].
        let labels = cloud.labels().unwrap();
        for (i, &orig) in out.base_indices.iter().enumerate() {
            assert_eq!(out.views[0].labels().unwrap()[i], labels[orig]);
            assert_eq!(out.views[1].labels().unwrap()[i], labels[orig]);
        }
        assert_eq!(out.draws.distortion_theta.len(), 2);
        // Views differ: independent per-view transforms.
        assert_ne!(out.views[0].positions(), out.views[1].positions());
    }

    #[test]
    fn make_views_rejects_emptied_base() {
        // Delta much larger than the plant: the ellipses swallow everything.
        let cloud = plant();
        let config = ViewConfig {
            occlusion: Some(OcclusionParams {
                k_ellipses: 8,
                delta: [10.0, 10.0],
                seed: 0,
            }),
            ..Default::default()
        };
        let r = make_views(&cloud, &config);
        assert!(matches!(r, Err(Error::InvalidInput(_))));
    }

    proptest! {
        #[test]
        fn distortion_preserves_distance_to_center(seed in 0u64..100) {
            let cloud = plant();
            let center = plant_center(&cloud).unwrap();
            let out = leaf_distortion(
                &cloud,
                &DistortionParams {
                    theta_max: [0.4, 0.4, 0.8],
                    seed,
                    about_origin: false,
                },
            )
            .unwrap();
            for (a, b) in cloud.positions().iter().zip(out.positions()) {
                let da = math::dist(*a, center);
                let db = math::dist(*b, center);
                prop_assert!((da - db).abs() <= 1e-9 * da.max(1e-12));
            }
        }

        #[test]
        fn distortion_angles_monotone_in_center_distance(seed in 0u64..100) {
            // Verified through the definition: the per-point angle scale is
            // d_p / max_d, so ordering by d_p orders every angle component.
            let cloud = plant();
            let center = plant_center(&cloud).unwrap();
            let params = DistortionParams { theta_max: [0.3, 0.2, 0.6], seed, about_origin: false };
            let (_, theta) = leaf_distortion_recorded(&cloud, &params).unwrap();
            let max_d = cloud
                .positions()
                .iter()
                .map(|p| math::dist(*p, center))
                .fold(0.0f64, f64::max);
            let angle_of = |p: &Vec3| -> [f64; 3] {
                let f = math::dist(*p, center) / max_d;
                [
                    f * theta[0] * params.theta_max[0],
                    f * theta[1] * params.theta_max[1],
                    f * theta[2] * params.theta_max[2],
                ]
            };
            let mut pts: Vec<&Vec3> = cloud.positions().iter().collect();
            pts.sort_by(|a, b| math::dist(**a, center).total_cmp(&math::dist(**b, center)));
            for w in pts.windows(2) {
                let (a1, a2) = (angle_of(w[0]), angle_of(w[1]));
                for k in 0..3 {
                    prop_assert!(a1[k] <= a2[k]);
                }
            }
        }

        #[test]
        fn augmentations_are_deterministic(seed in 0u64..50) {
            let cloud = plant();
            let config = ViewConfig {
                n_views: 2,
                occlusion: Some(OcclusionParams::default()),
                jitter: Some(0.002),
                distortion: Some(DistortionParams::default()),
                seed,
                ..Default::default()
            };
            let a = make_views(&cloud, &config).unwrap();
            let b = make_views(&cloud, &config).unwrap();
            prop_assert_eq!(a.views, b.views);
            prop_assert_eq!(a.base_indices, b.base_indices);
        }
    }

    #[test]
    fn view_config_json_round_trip() {
        let config = ViewConfig {
            n_views: 2,
            occlusion: Some(OcclusionParams::default()),
            jitter: Some(0.01),
            seed: 5,
            ..Default::default()
        };
        let text = serde_json::to_string(&config).unwrap();
        let back: ViewConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, config);
    }
}
