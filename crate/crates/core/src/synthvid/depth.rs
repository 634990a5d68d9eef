//! Stand-ins for a monocular depth estimator.

use std::fmt;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::stats::{foreground_mask, frame_silhouette};
use super::VideoClip;
use crate::error::{Error, Result};

/// Which depth signal the depth branches see.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DepthMode {
    /// The rendered inverse depth, unchanged.
    #[default]
    GroundTruth,
    /// Gaussian noise of std `sigma`, then rounding onto `levels` uniform
    /// values in `[0, 1]`.
    QuantizedNoisy { levels: u32, sigma: f64 },
    /// Inverse depth guessed from 2D cues only: footprint size and height
    /// in the image.
    Pictorial,
}

impl fmt::Display for DepthMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            DepthMode::GroundTruth => write!(f, "ground_truth"),
            DepthMode::QuantizedNoisy { levels, sigma } => {
                write!(f, "quantized_noisy:{levels}:{sigma}")
            }
            DepthMode::Pictorial => write!(f, "pictorial"),
        }
    }
}

impl FromStr for DepthMode {
    type Err = Error;

    /// Accepts `ground_truth`, `pictorial`, `quantized_noisy` (8 levels,
    /// σ = 0.05) or `quantized_noisy:<levels>:<sigma>`.
    fn from_str(s: &str) -> Result<Self> {
        let mut parts = s.split(':');
        let mode = match parts.next().unwrap_or_default() {
            "ground_truth" => DepthMode::GroundTruth,
            "pictorial" => DepthMode::Pictorial,
            "quantized_noisy" => {
                let levels = parts.next().map_or(Ok(8), str::parse).map_err(|_| {
                    Error::contract(format!("bad quantization levels in depth mode `{s}`"))
                })?;
                let sigma = parts
                    .next()
                    .map_or(Ok(0.05), str::parse)
                    .map_err(|_| Error::contract(format!("bad noise sigma in depth mode `{s}`")))?;
                DepthMode::QuantizedNoisy { levels, sigma }
            }
            other => return Err(Error::contract(format!("unknown depth mode `{other}`"))),
        };
        if parts.next().is_some() {
            return Err(Error::contract(format!(
                "trailing fields in depth mode `{s}`"
            )));
        }
        mode.validate()?;
        Ok(mode)
    }
}

impl DepthMode {
    pub fn validate(&self) -> Result<()> {
        if let DepthMode::QuantizedNoisy { levels, sigma } = *self {
            if levels < 2 {
                return Err(Error::contract("quantized_noisy needs at least 2 levels"));
            }
            if !(sigma >= 0.0 && sigma.is_finite()) {
                return Err(Error::contract("quantized_noisy sigma must be >= 0"));
            }
        }
        Ok(())
    }
}

/// Rounds `v ∈ [0,1]` to the nearest of `levels` evenly spaced values.
pub fn quantize(v: f64, levels: u32) -> f64 {
    let steps = f64::from(levels - 1);
    (v.clamp(0.0, 1.0) * steps).round() / steps
}

/// Depth map (`T × H × W`, values in `[0,1]`) as seen through `mode`.
pub fn estimate_depth(clip: &VideoClip, mode: &DepthMode) -> Result<Vec<f32>> {
    mode.validate()?;
    match *mode {
        DepthMode::GroundTruth => Ok(clip.depth.clone()),
        DepthMode::QuantizedNoisy { levels, sigma } => {
            let mut rng = ChaCha8Rng::seed_from_u64(clip.seed ^ 0x5eed_de97);
            let normal = Normal::new(0.0, sigma).expect("validated sigma");
            Ok(clip
                .depth
                .iter()
                .map(|&v| {
                    let noisy = if sigma > 0.0 {
                        f64::from(v) + normal.sample(&mut rng)
                    } else {
                        f64::from(v)
                    };
                    quantize(noisy, levels) as f32
                })
                .collect())
        }
        DepthMode::Pictorial => Ok(pictorial(clip)),
    }
}

fn pictorial(clip: &VideoClip) -> Vec<f32> {
    let (h, w) = (clip.height, clip.width);
    let sils: Vec<_> = (0..clip.num_frames)
        .map(|t| frame_silhouette(clip, t))
        .collect();
    let max_area = sils.iter().map(|s| s.area).fold(0.0, f64::max);
    let mut out = Vec::with_capacity(clip.depth.len());
    for (t, sil) in sils.iter().enumerate() {
        let mask = foreground_mask(clip, t);
        let size_cue = if max_area > 0.0 {
            sil.area / max_area
        } else {
            0.0
        };
        let fg_value = 0.5 * size_cue + 0.5 * sil.centroid.1;
        for y in 0..h {
            let ground = 0.25 * (y as f64 + 0.5) / h as f64;
            for x in 0..w {
                let v = if mask[y * w + x] { fg_value } else { ground };
                out.push(v.clamp(0.0, 1.0) as f32);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::super::{generate_clip, GenConfig};
    use super::*;

    #[test]
    fn quantizer_grid() {
        // levels=8 grid is {0, 1/7, …, 1}; 0.5·7 = 3.5 rounds to 4
        assert!((quantize(0.5, 8) - 4.0 / 7.0).abs() < 1e-15);
        assert!((quantize(0.5, 8) - 0.5714).abs() < 1e-4);
        assert_eq!(quantize(0.0, 8), 0.0);
        assert_eq!(quantize(1.0, 8), 1.0);
        assert_eq!(quantize(1.3, 8), 1.0);
    }

    #[test]
    fn ground_truth_passthrough_is_bit_identical() {
        let clip = generate_clip(3, 1, &GenConfig::default()).unwrap();
        let d = estimate_depth(&clip, &DepthMode::GroundTruth).unwrap();
        assert_eq!(
            d.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            clip.depth.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }

    #[test]
    fn noiseless_quantization_lands_on_grid() {
        let clip = generate_clip(0, 2, &GenConfig::default()).unwrap();
        let mode = DepthMode::QuantizedNoisy {
            levels: 8,
            sigma: 0.0,
        };
        let d = estimate_depth(&clip, &mode).unwrap();
        for v in d {
            let k = f64::from(v) * 7.0;
            assert!((k - k.round()).abs() < 1e-5);
        }
    }

    #[test]
    fn noisy_quantization_is_deterministic_and_bounded() {
        let clip = generate_clip(5, 4, &GenConfig::default()).unwrap();
        let mode: DepthMode = "quantized_noisy:4:0.1".parse().unwrap();
        let a = estimate_depth(&clip, &mode).unwrap();
        let b = estimate_depth(&clip, &mode).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn parsing_modes() {
        assert_eq!(
            "ground_truth".parse::<DepthMode>().unwrap(),
            DepthMode::GroundTruth
        );
        assert_eq!(
            "pictorial".parse::<DepthMode>().unwrap(),
            DepthMode::Pictorial
        );
        assert_eq!(
            "quantized_noisy".parse::<DepthMode>().unwrap(),
            DepthMode::QuantizedNoisy {
                levels: 8,
                sigma: 0.05
            }
        );
        assert!(matches!(
            "midas".parse::<DepthMode>(),
            Err(Error::Contract(_))
        ));
        assert!("quantized_noisy:1:0".parse::<DepthMode>().is_err());
    }

    #[test]
    fn pictorial_depth_is_constant_for_static_footprint() {
        let clip = generate_clip(0, 12, &GenConfig::default()).unwrap();
        let d = estimate_depth(&clip, &DepthMode::Pictorial).unwrap();
        let n = clip.frame_len();
        let fg_max: Vec<f32> = (0..clip.num_frames)
            .map(|t| d[t * n..(t + 1) * n].iter().copied().fold(0.0, f32::max))
            .collect();
        assert!(fg_max.windows(2).all(|w| w[0] == w[1]), "{fg_max:?}");
        let partner = generate_clip(1, 12, &GenConfig::default()).unwrap();
        let dp = estimate_depth(&partner, &DepthMode::Pictorial).unwrap();
        assert_eq!(d, dp);
    }
}
