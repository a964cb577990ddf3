//! Synthetic revisit world with known ground truth.
//!
//! A trajectory cycles through a handful of scenes in fixed-length visits.
//! Each scene owns a template of 3D landmarks with their own visual and
//! LiDAR descriptors plus a background appearance vector; background vectors
//! are mutually orthogonal, so frames of one scene look alike and frames of
//! different scenes do not. A frame's scan is its scene template seen from a
//! slightly perturbed pose, with Gaussian point noise and random clutter.
//! Patch embeddings show the landmark whose LiDAR return lies nearest the
//! patch center, or the background where no landmark projects.

use std::io;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::formats::{self, PatchEmbeddings};
use crate::fusion::{LidarScan, PatchGrid};
use crate::geometry::{l2_normalize_in_place, CameraIntrinsics, PoseRecord, PoseSE3};
use crate::harness::config::Config;
use crate::harness::manifest::{Calibration, FrameEntry, Manifest};
use crate::harness::pipeline::FrameData;
use crate::retrieval::FrameId;

/// Ground-truth trajectory written next to the manifest.
pub const TRAJECTORY_FILE: &str = "trajectory.txt";

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub scenes: usize,
    pub frames: usize,
    pub frames_per_visit: usize,
    pub frame_interval_s: f64,
    pub landmarks_per_scene: usize,
    pub clutter_points: usize,
    pub visual_dim: usize,
    pub lidar_dim: usize,
    pub layers: usize,
    /// Square image side, pixels.
    pub image_px: u32,
    pub focal_px: f64,
    /// Patches per image side.
    pub grid: usize,
    /// Per-axis standard deviation of point noise, meters.
    pub point_noise_m: f64,
    /// Per-dimension standard deviation of descriptor noise.
    pub feature_noise: f64,
    pub max_yaw_deg: f64,
    pub max_offset_m: f64,
    pub scene_spacing_m: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            scenes: 5,
            frames: 200,
            frames_per_visit: 8,
            frame_interval_s: 1.0,
            landmarks_per_scene: 80,
            clutter_points: 20,
            visual_dim: 16,
            lidar_dim: 16,
            layers: 3,
            image_px: 160,
            focal_px: 320.0,
            grid: 40,
            point_noise_m: 0.01,
            feature_noise: 0.02,
            max_yaw_deg: 3.0,
            max_offset_m: 0.15,
            scene_spacing_m: 100.0,
            seed: 7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SynthFrame {
    pub id: FrameId,
    pub timestamp_s: f64,
    pub scene: usize,
    /// `world_from_body`.
    pub pose: PoseSE3,
    pub embeddings: PatchEmbeddings,
    pub scan: LidarScan,
}

struct Landmark {
    world: Vector3<f64>,
    visual: Vec<f64>,
    lidar: Vec<f64>,
}

struct Scene {
    anchor: PoseSE3,
    background: Vec<f64>,
    landmarks: Vec<Landmark>,
}

#[derive(Debug, Clone)]
pub struct SynthWorld {
    pub config: SynthConfig,
    pub intrinsics: CameraIntrinsics,
    pub frames: Vec<SynthFrame>,
}

/// LiDAR (x forward, y left, z up) to camera (x right, y down, z forward),
/// with a small lever arm.
pub fn default_cam_from_lidar() -> PoseSE3 {
    let r = Matrix3::new(0.0, -1.0, 0.0, 0.0, 0.0, -1.0, 1.0, 0.0, 0.0);
    PoseSE3::new(r, Vector3::new(0.0, 0.08, -0.05)).expect("axis permutation is a rotation")
}

fn unit_gaussian(rng: &mut impl Rng, dim: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
    l2_normalize_in_place(&mut v);
    v
}

/// Gram–Schmidt over Gaussian draws: `count ≤ dim` orthonormal vectors.
fn orthonormal(rng: &mut impl Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    let mut out: Vec<Vec<f64>> = Vec::with_capacity(count);
    while out.len() < count {
        let mut v = unit_gaussian(rng, dim);
        for u in &out {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= d * b);
        }
        if l2_normalize_in_place(&mut v) {
            out.push(v);
        }
    }
    out
}

fn noisy(rng: &mut impl Rng, base: &[f64], sigma: f64) -> Vec<f64> {
    let n = Normal::new(0.0, sigma).expect("finite sigma");
    base.iter().map(|v| v + n.sample(rng)).collect()
}

/// Point at `range` along body-frame bearing/elevation (degrees).
fn ray_point(bearing_deg: f64, elevation_deg: f64, range: f64) -> Vector3<f64> {
    let (b, e) = (bearing_deg.to_radians(), elevation_deg.to_radians());
    Vector3::new(range * e.cos() * b.cos(), range * e.cos() * b.sin(), range * e.sin())
}

impl SynthWorld {
    pub fn generate(config: SynthConfig) -> Self {
        assert!(config.scenes <= config.visual_dim, "background vectors must be orthogonal");
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let intrinsics = CameraIntrinsics::new(
            config.focal_px,
            config.focal_px,
            config.image_px as f64 / 2.0,
            config.image_px as f64 / 2.0,
            config.image_px,
            config.image_px,
            default_cam_from_lidar(),
        )
        .expect("synthetic intrinsics are valid");
        // keep landmarks inside the field of view left after the largest perturbation
        let half_fov = (config.image_px as f64 / 2.0 / config.focal_px).atan().to_degrees();
        let spread = (half_fov - config.max_yaw_deg - 2.0).max(1.0);

        let backgrounds = orthonormal(&mut rng, config.scenes, config.visual_dim);
        let scenes: Vec<Scene> = backgrounds
            .into_iter()
            .enumerate()
            .map(|(s, background)| {
                let anchor = PoseSE3::from_yaw_deg(
                    72.0 * s as f64,
                    Vector3::new(config.scene_spacing_m * s as f64, 0.5 * config.scene_spacing_m * (s % 2) as f64, 0.0),
                );
                let landmarks = (0..config.landmarks_per_scene)
                    .map(|_| {
                        let local = ray_point(
                            rng.random_range(-spread..spread),
                            rng.random_range(-spread..spread),
                            rng.random_range(3.0..5.0),
                        );
                        Landmark {
                            world: anchor.transform_point(&local),
                            visual: unit_gaussian(&mut rng, config.visual_dim),
                            lidar: unit_gaussian(&mut rng, config.lidar_dim),
                        }
                    })
                    .collect();
                Scene {
                    anchor,
                    background,
                    landmarks,
                }
            })
            .collect();

        let frames = (0..config.frames)
            .map(|i| {
                let scene = (i / config.frames_per_visit) % config.scenes;
                Self::frame(&config, &intrinsics, &scenes[scene], scene, i, half_fov, &mut rng)
            })
            .collect();
        Self {
            config,
            intrinsics,
            frames,
        }
    }

    fn frame(
        cfg: &SynthConfig,
        intr: &CameraIntrinsics,
        scene: &Scene,
        scene_idx: usize,
        i: usize,
        half_fov: f64,
        rng: &mut ChaCha8Rng,
    ) -> SynthFrame {
        let m = cfg.max_offset_m;
        let perturb = PoseSE3::from_yaw_deg(
            rng.random_range(-cfg.max_yaw_deg..cfg.max_yaw_deg),
            Vector3::new(rng.random_range(-m..m), rng.random_range(-m..m), rng.random_range(-0.2 * m..0.2 * m)),
        );
        let pose = scene.anchor.compose(&perturb);
        let body_from_world = pose.inverse();
        let point_noise = Normal::new(0.0, cfg.point_noise_m).expect("finite sigma");

        // (point, lidar descriptor, visual content if a landmark)
        let mut points = Vec::new();
        let mut lidar_rows = Vec::new();
        let mut visuals: Vec<Option<usize>> = Vec::new();
        for (li, lm) in scene.landmarks.iter().enumerate() {
            let p = body_from_world.transform_point(&lm.world)
                + Vector3::new(point_noise.sample(rng), point_noise.sample(rng), point_noise.sample(rng));
            points.push(p);
            lidar_rows.extend(noisy(rng, &lm.lidar, cfg.feature_noise));
            visuals.push(Some(li));
        }
        for _ in 0..cfg.clutter_points {
            let p = ray_point(
                rng.random_range(-half_fov..half_fov),
                rng.random_range(-half_fov..half_fov),
                rng.random_range(2.0..8.0),
            );
            points.push(p);
            lidar_rows.extend(unit_gaussian(rng, cfg.lidar_dim));
            visuals.push(None);
        }

        // Patch content follows the return nearest each patch center.
        let grid = PatchGrid {
            rows: cfg.grid,
            cols: cfg.grid,
        };
        let mut nearest: Vec<Option<(usize, f64)>> = vec![None; grid.len()];
        for (k, p) in points.iter().enumerate() {
            let Ok(px) = intr.project(&intr.cam_from_lidar.transform_point(p)) else { continue };
            let Some(patch) = grid.patch_of(px.u, px.v, intr) else { continue };
            let (cu, cv) = grid.center(patch, intr);
            let d2 = (px.u - cu).powi(2) + (px.v - cv).powi(2);
            if nearest[patch].is_none_or(|(_, best)| d2 < best) {
                nearest[patch] = Some((k, d2));
            }
        }
        let layers = (0..cfg.layers)
            .map(|_| {
                let mut data = Vec::with_capacity(grid.len() * cfg.visual_dim);
                for slot in &nearest {
                    let base = match slot.and_then(|(k, _)| visuals[k]) {
                        Some(li) => &scene.landmarks[li].visual,
                        None => &scene.background,
                    };
                    data.extend(noisy(rng, base, cfg.feature_noise));
                }
                DMatrix::from_row_slice(grid.len(), cfg.visual_dim, &data)
            })
            .collect();

        SynthFrame {
            id: i as FrameId,
            timestamp_s: i as f64 * cfg.frame_interval_s,
            scene: scene_idx,
            pose,
            embeddings: PatchEmbeddings::new(layers).expect("equal layer shapes"),
            scan: LidarScan::new(points, DMatrix::from_row_slice(visuals.len(), cfg.lidar_dim, &lidar_rows))
                .expect("synthetic scan is valid"),
        }
    }

    /// Pipeline settings matched to the generator's grid and bank size.
    pub fn pipeline_config(&self) -> Config {
        let mut cfg = Config::default();
        cfg.aggregation.clusters = 8;
        cfg.aggregation.proj_dim = self.config.visual_dim;
        cfg.fusion.patch_rows = self.config.grid;
        cfg.fusion.patch_cols = self.config.grid;
        cfg.pipeline.seed = self.config.seed;
        cfg
    }

    pub fn frame_data(&self) -> Vec<FrameData> {
        self.frames
            .iter()
            .map(|f| FrameData {
                id: f.id,
                timestamp_s: f.timestamp_s,
                pose: Some(f.pose),
                embeddings: f.embeddings.clone(),
                scan: f.scan.clone(),
            })
            .collect()
    }

    pub fn manifest(&self, base_dir: impl Into<PathBuf>) -> Manifest {
        Manifest {
            calibration: Calibration::from_intrinsics(&self.intrinsics),
            frames: self
                .frames
                .iter()
                .map(|f| FrameEntry {
                    id: f.id,
                    timestamp_s: f.timestamp_s,
                    patch_file: PathBuf::from(format!("patches/{:05}.bin", f.id)),
                    scan_file: PathBuf::from(format!("scans/{:05}.bin", f.id)),
                    pose: Some(PoseRecord::from_pose(&f.pose)),
                })
                .collect(),
            base_dir: base_dir.into(),
        }
    }

    /// Writes frame files, `manifest.json`, `config.toml` and the ground-truth
    /// trajectory under `dir`.
    /// Returns `(manifest_path, config_path)`.
    pub fn write(&self, dir: impl AsRef<Path>) -> io::Result<(PathBuf, PathBuf)> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir.join("patches"))?;
        std::fs::create_dir_all(dir.join("scans"))?;
        let manifest = self.manifest(dir);
        let to_io = |e: formats::FormatError| io::Error::other(e.to_string());
        for (f, entry) in self.frames.iter().zip(&manifest.frames) {
            formats::save(dir.join(&entry.patch_file), |w| formats::write_patch_embeddings(w, &f.embeddings)).map_err(to_io)?;
            formats::save(dir.join(&entry.scan_file), |w| formats::write_scan(w, &f.scan)).map_err(to_io)?;
        }
        let manifest_path = dir.join("manifest.json");
        std::fs::write(&manifest_path, manifest.to_json_string())?;
        let config_path = dir.join("config.toml");
        std::fs::write(&config_path, self.pipeline_config().to_toml_string())?;
        let traj: Vec<formats::TimedPose> = self
            .frames
            .iter()
            .map(|f| formats::TimedPose {
                timestamp_s: f.timestamp_s,
                pose: f.pose,
            })
            .collect();
        let mut w = io::BufWriter::new(std::fs::File::create(dir.join(TRAJECTORY_FILE))?);
        formats::write_trajectory(&mut w, &traj)?;
        io::Write::flush(&mut w)?;
        Ok((manifest_path, config_path))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::cosine_similarity;

    fn small() -> SynthWorld {
        SynthWorld::generate(SynthConfig {
            frames: 40,
            ..Default::default()
        })
    }

    fn mean_patch(f: &SynthFrame) -> Vec<f64> {
        let mut v: Vec<f64> = f.embeddings.last().row_mean().iter().copied().collect();
        l2_normalize_in_place(&mut v);
        v
    }

    #[test]
    fn scene_separation_of_descriptors() {
        let w = small();
        let (a, b, c) = (&w.frames[0], &w.frames[1], &w.frames[8]);
        assert_eq!(a.scene, b.scene);
        assert_ne!(a.scene, c.scene);
        assert!(cosine_similarity(&mean_patch(a), &mean_patch(b)).unwrap() > 0.95);
        assert!(cosine_similarity(&mean_patch(a), &mean_patch(c)).unwrap() < 0.5);
    }

    #[test]
    fn scans_are_noisy_rigid_copies_of_the_template() {
        let w = small();
        let (a, b) = (&w.frames[0], &w.frames[41 % 40]);
        let rel = a.pose.inverse().compose(&b.pose);
        let n = w.config.landmarks_per_scene;
        let mut sq = 0.0;
        for k in 0..n {
            let d = rel.transform_point(&b.scan.points()[k]) - a.scan.points()[k];
            sq += d.norm_squared();
        }
        let rms = (sq / n as f64).sqrt();
        // two independent draws of per-axis 0.01 m noise
        assert!(rms > 0.01 && rms < 0.04, "rms {rms}");
    }

    #[test]
    fn deterministic() {
        let a = small();
        let b = small();
        assert_eq!(a.frames[7].embeddings, b.frames[7].embeddings);
        assert_eq!(a.frames[7].scan, b.frames[7].scan);
    }
}
