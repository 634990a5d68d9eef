//! 2D silhouette statistics and the hand-written decision rules used to
//! check that partnered classes are separable by depth but not by RGB.

use super::VideoClip;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Silhouette {
    /// Foreground fraction of the frame.
    pub area: f64,
    /// Foreground centroid in normalized `(x, y)` image coordinates.
    pub centroid: (f64, f64),
}

/// Foreground pixels of frame `t`: those whose colour departs from the
/// per-channel median of the frame (the background estimate).
pub fn foreground_mask(clip: &VideoClip, t: usize) -> Vec<bool> {
    let frame = clip.rgb_frame(t);
    let n = clip.frame_len();
    let mut bg = [0f32; 3];
    for (c, slot) in bg.iter_mut().enumerate() {
        let mut channel: Vec<f32> = (0..n).map(|i| frame[i * 3 + c]).collect();
        channel.sort_by(f32::total_cmp);
        *slot = channel[n / 2];
    }
    (0..n)
        .map(|i| (0..3).any(|c| (frame[i * 3 + c] - bg[c]).abs() > 0.15))
        .collect()
}

pub fn frame_silhouette(clip: &VideoClip, t: usize) -> Silhouette {
    let mask = foreground_mask(clip, t);
    let (h, w) = (clip.height, clip.width);
    let (mut count, mut sx, mut sy) = (0usize, 0f64, 0f64);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                count += 1;
                sx += x as f64 + 0.5;
                sy += y as f64 + 0.5;
            }
        }
    }
    let centroid = if count > 0 {
        (sx / count as f64 / w as f64, sy / count as f64 / h as f64)
    } else {
        (0.5, 0.5)
    };
    Silhouette {
        area: count as f64 / (h * w) as f64,
        centroid,
    }
}

/// RGB-only rule for approach (true) vs recede: the silhouette grows, or
/// failing that, moves down the image (a monocular "nearer" cue).
pub fn rgb_rule_approach(clip: &VideoClip) -> bool {
    let first = frame_silhouette(clip, 0);
    let last = frame_silhouette(clip, clip.num_frames - 1);
    if last.area != first.area {
        last.area > first.area
    } else {
        last.centroid.1 >= first.centroid.1
    }
}

pub fn mean_depth(depth: &[f32], clip: &VideoClip, t: usize) -> f64 {
    let n = clip.frame_len();
    depth[t * n..(t + 1) * n]
        .iter()
        .map(|&v| f64::from(v))
        .sum::<f64>()
        / n as f64
}

/// Depth-aware rule for approach (true) vs recede: mean inverse depth rises.
pub fn depth_rule_approach(clip: &VideoClip, depth: &[f32]) -> bool {
    mean_depth(depth, clip, clip.num_frames - 1) > mean_depth(depth, clip, 0)
}

/// Depth-aware rule for behind (true) vs in front of the occluder: in the
/// first frame the object is clear of the occluder, so the occluder column
/// holds the frame's nearest value only when the object is behind it.
pub fn depth_rule_behind(clip: &VideoClip, depth: &[f32]) -> bool {
    let (h, w) = (clip.height, clip.width);
    let frame = &depth[..h * w];
    let nearest = frame.iter().copied().fold(0.0, f32::max);
    let column = (0..h).map(|y| frame[y * w + w / 2]).fold(0.0, f32::max);
    column >= nearest
}

/// RGB-only rule for behind (true) vs in front: the silhouette area at the
/// crossing is smaller than at the start (the object seems to vanish).
pub fn rgb_rule_behind(clip: &VideoClip) -> bool {
    let start = frame_silhouette(clip, 0).area;
    let mid = frame_silhouette(clip, clip.num_frames / 2).area;
    mid < start
}

#[cfg(test)]
mod tests {
    use super::super::{generate_clip, GenConfig};
    use super::*;

    #[test]
    fn silhouette_of_partners_is_identical() {
        let cfg = GenConfig::default();
        for seed in 0..5 {
            let a = generate_clip(0, seed, &cfg).unwrap();
            let b = generate_clip(1, seed, &cfg).unwrap();
            for t in 0..a.num_frames {
                assert_eq!(frame_silhouette(&a, t), frame_silhouette(&b, t));
            }
        }
    }

    #[test]
    fn static_footprint_has_constant_area() {
        let cfg = GenConfig::default();
        let clip = generate_clip(1, 8, &cfg).unwrap();
        let areas: Vec<f64> = (0..clip.num_frames)
            .map(|t| frame_silhouette(&clip, t).area)
            .collect();
        assert!(areas[0] > 0.0);
        assert!(areas.windows(2).all(|w| w[0] == w[1]));
    }
}
