//! Procedural RGB + depth video clips.
//!
//! Every clip shows one object moving in front of a flat background. The
//! standard six-class set pairs classes so that two members of a pair render
//! pixel-identical RGB for the same seed and differ only in depth:
//!
//! | id | motion                    | RGB partner |
//! |----|---------------------------|-------------|
//! | 0  | approach (z decreases)    | 1           |
//! | 1  | recede (z increases)      | 0           |
//! | 2  | lateral-left              | -           |
//! | 3  | lateral-right             | -           |
//! | 4  | pass behind an occluder   | 5           |
//! | 5  | pass in front of occluder | 4           |
//!
//! The camera is orthographic, so an object's footprint never changes with
//! its distance. In classes 4/5 the occluder shares the object's albedo, so
//! the union silhouette is the same whichever surface is in front.

mod cache;
mod dataset;
mod depth;
pub mod stats;

pub use cache::{read_clip, write_clip, CLIP_MAGIC, CLIP_VERSION};
pub use dataset::{build_dataset, Manifest, Record, Split};
pub use depth::{estimate_depth, DepthMode};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of classes in the standard class set.
pub const STANDARD_CLASSES: usize = 6;

/// Distance of the background plane.
const Z_BACKGROUND: f64 = 5.0;
/// Nearest distance any surface can take (bounds the fixed normalization).
const Z_MIN: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Disk,
    Square,
}

/// How rendered inverse depth is mapped into `[0, 1]`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DepthNorm {
    /// Per-clip min-max over all frames.
    #[default]
    MinmaxClip,
    /// Fixed affine map of the scene's inverse-depth range `[1/5, 1]`.
    Fixed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Palette {
    pub shapes: Vec<ShapeKind>,
    pub albedos: Vec<[f32; 3]>,
    pub backgrounds: Vec<[f32; 3]>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            shapes: vec![ShapeKind::Disk, ShapeKind::Square],
            albedos: vec![
                [0.9, 0.2, 0.2],
                [0.2, 0.8, 0.3],
                [0.25, 0.35, 0.95],
                [0.95, 0.85, 0.2],
            ],
            backgrounds: vec![[0.1, 0.1, 0.1], [0.45, 0.45, 0.5]],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenConfig {
    pub height: usize,
    pub width: usize,
    /// Raw frames rendered per clip before stride sampling.
    pub total_frames: usize,
    pub num_classes: usize,
    pub noise_sigma: f64,
    pub depth_norm: DepthNorm,
    pub palette: Palette,
}

impl Default for GenConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            total_frames: 32,
            num_classes: STANDARD_CLASSES,
            noise_sigma: 0.02,
            depth_norm: DepthNorm::MinmaxClip,
            palette: Palette::default(),
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(Error::config("height", "frames must be at least 8x8"));
        }
        if self.total_frames < 2 {
            return Err(Error::config("total_frames", "need at least 2 frames"));
        }
        if !(2..=STANDARD_CLASSES).contains(&self.num_classes) {
            return Err(Error::config(
                "num_classes",
                format!("must be in 2..={STANDARD_CLASSES}"),
            ));
        }
        if !(0.0..=0.5).contains(&self.noise_sigma) {
            return Err(Error::config("noise_sigma", "must be in [0, 0.5]"));
        }
        let p = &self.palette;
        if p.shapes.is_empty() || p.albedos.is_empty() || p.backgrounds.is_empty() {
            return Err(Error::config("palette", "palette lists must be non-empty"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Motion {
    Approach,
    Recede,
    LateralLeft,
    LateralRight,
    BehindOccluder,
    InFrontOfOccluder,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ClassSpec {
    pub id: usize,
    pub name: &'static str,
    pub motion: Motion,
    pub partner: Option<usize>,
}

pub const CLASS_SPECS: [ClassSpec; STANDARD_CLASSES] = [
    ClassSpec {
        id: 0,
        name: "approach",
        motion: Motion::Approach,
        partner: Some(1),
    },
    ClassSpec {
        id: 1,
        name: "recede",
        motion: Motion::Recede,
        partner: Some(0),
    },
    ClassSpec {
        id: 2,
        name: "lateral_left",
        motion: Motion::LateralLeft,
        partner: None,
    },
    ClassSpec {
        id: 3,
        name: "lateral_right",
        motion: Motion::LateralRight,
        partner: None,
    },
    ClassSpec {
        id: 4,
        name: "pass_behind_occluder",
        motion: Motion::BehindOccluder,
        partner: Some(5),
    },
    ClassSpec {
        id: 5,
        name: "pass_in_front_of_occluder",
        motion: Motion::InFrontOfOccluder,
        partner: Some(4),
    },
];

pub fn class_name(id: usize) -> &'static str {
    CLASS_SPECS.get(id).map_or("unknown", |c| c.name)
}

/// RGB frames plus aligned inverse depth.
#[derive(Clone, Debug, PartialEq)]
pub struct VideoClip {
    pub num_frames: usize,
    pub height: usize,
    pub width: usize,
    /// `T × H × W × 3`, values in `[0, 1]`.
    pub frames: Vec<f32>,
    /// `T × H × W`, normalized inverse depth (1 = nearest).
    pub depth: Vec<f32>,
    pub label: usize,
    pub seed: u64,
}

impl VideoClip {
    pub fn frame_len(&self) -> usize {
        self.height * self.width
    }

    pub fn rgb_frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len() * 3;
        &self.frames[t * n..(t + 1) * n]
    }

    pub fn depth_frame(&self, t: usize) -> &[f32] {
        let n = self.frame_len();
        &self.depth[t * n..(t + 1) * n]
    }

    pub fn bitwise_eq(&self, other: &VideoClip) -> bool {
        let bits = |v: &[f32]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        self.num_frames == other.num_frames
            && self.height == other.height
            && self.width == other.width
            && self.label == other.label
            && self.seed == other.seed
            && bits(&self.frames) == bits(&other.frames)
            && bits(&self.depth) == bits(&other.depth)
    }
}

/// Random scene parameters, drawn in a fixed order regardless of class so
/// partnered classes share appearance, 2D path and pixel noise.
struct SceneDraw {
    shape: ShapeKind,
    albedo: [f32; 3],
    background: [f32; 3],
    radius: f64,
    center: (f64, f64),
    drift: (f64, f64),
    z_near: f64,
    z_far: f64,
    z_lateral: f64,
    direction: f64,
    occluder_z: f64,
    occluder_half_width: f64,
    gap: f64,
    noise_seed: u64,
}

impl SceneDraw {
    fn sample(seed: u64, cfg: &GenConfig) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = &cfg.palette;
        let (h, w) = (cfg.height as f64, cfg.width as f64);
        let side = h.min(w);
        let shape = p.shapes[rng.random_range(0..p.shapes.len())];
        let albedo = p.albedos[rng.random_range(0..p.albedos.len())];
        let background = p.backgrounds[rng.random_range(0..p.backgrounds.len())];
        let radius = side * rng.random_range(0.1..0.16);
        // integer-pixel centers keep the rasterized footprint translation-invariant
        let margin = radius + 0.15 * side;
        let center = (
            rng.random_range(margin..w - margin).floor() + 0.5,
            rng.random_range(margin..h - margin).floor() + 0.5,
        );
        // horizontal only, so height-in-image cues stay constant
        let drift = (side * rng.random_range(-0.08..0.08), 0.0);
        Self {
            shape,
            albedo,
            background,
            radius,
            center,
            drift,
            z_near: rng.random_range(1.0..1.5),
            z_far: rng.random_range(2.8..3.8),
            z_lateral: rng.random_range(1.5..3.0),
            direction: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
            occluder_z: rng.random_range(2.2..2.8),
            occluder_half_width: side * rng.random_range(0.06..0.1),
            gap: rng.random_range(0.5..0.9),
            noise_seed: rng.random(),
        }
    }
}

/// Object pose at one frame: pixel center and distance.
struct Pose {
    x: f64,
    y: f64,
    z: f64,
}

fn pose(draw: &SceneDraw, motion: Motion, tau: f64, cfg: &GenConfig) -> Pose {
    let w = cfg.width as f64;
    let (cx, cy) = draw.center;
    let still = |z: f64| Pose {
        x: cx + (draw.drift.0 * tau).round(),
        y: cy + (draw.drift.1 * tau).round(),
        z,
    };
    let lateral = |from: f64, to: f64, z: f64| Pose {
        x: (from + (to - from) * tau).floor() + 0.5,
        y: cy,
        z,
    };
    let (left, right) = (0.2 * w, 0.8 * w);
    match motion {
        Motion::Approach => still(draw.z_far + (draw.z_near - draw.z_far) * tau),
        Motion::Recede => still(draw.z_near + (draw.z_far - draw.z_near) * tau),
        Motion::LateralLeft => lateral(right, left, draw.z_lateral),
        Motion::LateralRight => lateral(left, right, draw.z_lateral),
        Motion::BehindOccluder | Motion::InFrontOfOccluder => {
            let (from, to) = if draw.direction > 0.0 {
                (left, right)
            } else {
                (right, left)
            };
            let z = if motion == Motion::BehindOccluder {
                draw.occluder_z + draw.gap
            } else {
                draw.occluder_z - draw.gap
            };
            lateral(from, to, z)
        }
    }
}

fn covers(shape: ShapeKind, px: f64, py: f64, p: &Pose, r: f64) -> bool {
    let (dx, dy) = (px - p.x, py - p.y);
    match shape {
        ShapeKind::Disk => dx * dx + dy * dy <= r * r,
        ShapeKind::Square => dx.abs() <= r && dy.abs() <= r,
    }
}

/// Renders a clip of `cfg.total_frames` frames for `class_id`.
pub fn generate_clip(class_id: usize, seed: u64, cfg: &GenConfig) -> Result<VideoClip> {
    cfg.validate()?;
    if class_id >= cfg.num_classes {
        return Err(Error::contract(format!(
            "class id {class_id} out of range for {} classes",
            cfg.num_classes
        )));
    }
    let motion = CLASS_SPECS[class_id].motion;
    let draw = SceneDraw::sample(seed, cfg);
    let (t_total, h, w) = (cfg.total_frames, cfg.height, cfg.width);
    let occluded = matches!(motion, Motion::BehindOccluder | Motion::InFrontOfOccluder);
    let occ_x = w as f64 / 2.0;

    let mut frames = Vec::with_capacity(t_total * h * w * 3);
    let mut inv_depth = Vec::with_capacity(t_total * h * w);
    for t in 0..t_total {
        let tau = t as f64 / (t_total - 1) as f64;
        let p = pose(&draw, motion, tau, cfg);
        for y in 0..h {
            for x in 0..w {
                let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                let mut z = Z_BACKGROUND;
                let mut color = draw.background;
                if occluded && (px - occ_x).abs() <= draw.occluder_half_width {
                    z = draw.occluder_z;
                    color = draw.albedo;
                }
                if covers(draw.shape, px, py, &p, draw.radius) && p.z < z {
                    z = p.z;
                    color = draw.albedo;
                }
                frames.extend_from_slice(&color);
                inv_depth.push(1.0 / z);
            }
        }
    }

    if cfg.noise_sigma > 0.0 {
        let mut rng = ChaCha8Rng::seed_from_u64(draw.noise_seed);
        let normal = Normal::new(0.0, cfg.noise_sigma).expect("valid sigma");
        for v in frames.iter_mut() {
            let n: f64 = normal.sample(&mut rng);
            *v = (f64::from(*v) + n).clamp(0.0, 1.0) as f32;
        }
    }

    let depth = normalize_inverse_depth(&inv_depth, cfg.depth_norm);
    Ok(VideoClip {
        num_frames: t_total,
        height: h,
        width: w,
        frames,
        depth,
        label: class_id,
        seed,
    })
}

fn normalize_inverse_depth(inv: &[f64], norm: DepthNorm) -> Vec<f32> {
    let (lo, hi) = match norm {
        DepthNorm::MinmaxClip => inv
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            }),
        DepthNorm::Fixed => (1.0 / Z_BACKGROUND, 1.0 / Z_MIN),
    };
    let span = hi - lo;
    inv.iter()
        .map(|&v| {
            if span > 0.0 {
                ((v - lo) / span).clamp(0.0, 1.0) as f32
            } else {
                0.0
            }
        })
        .collect()
}

/// Keeps frames `0, stride, …, (n−1)·stride` of both RGB and depth.
pub fn sample_frames(clip: &VideoClip, n: usize, stride: usize) -> Result<VideoClip> {
    if n == 0 || stride == 0 {
        return Err(Error::Range(format!(
            "frame count and stride must be positive (n={n}, stride={stride})"
        )));
    }
    if (n - 1) * stride >= clip.num_frames {
        return Err(Error::Range(format!(
            "(n-1)*stride = {} exceeds clip length {}",
            (n - 1) * stride,
            clip.num_frames
        )));
    }
    let mut frames = Vec::with_capacity(n * clip.frame_len() * 3);
    let mut depth = Vec::with_capacity(n * clip.frame_len());
    for t in sample_indices(n, stride) {
        frames.extend_from_slice(clip.rgb_frame(t));
        depth.extend_from_slice(clip.depth_frame(t));
    }
    Ok(VideoClip {
        num_frames: n,
        frames,
        depth,
        ..clip.clone()
    })
}

pub fn sample_indices(n: usize, stride: usize) -> Vec<usize> {
    (0..n).map(|i| i * stride).collect()
}
