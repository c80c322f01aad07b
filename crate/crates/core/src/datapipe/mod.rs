//! Video IO, clip sampling and the training-time input augmentations.

mod dataset;
mod netpbm;
mod synthetic;

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use dataset::{difficulty_of_set, load_dataset, load_video, write_dataset, write_video};
pub use netpbm::{decode_image, encode_image, encode_with_comment};
pub use synthetic::{generate_synthetic, generate_synthetic_set, Shape, SyntheticConfig, SyntheticVideo};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    Normal,
    Difficult,
    Synthetic,
}

impl Difficulty {
    pub const ALL: [Difficulty; 4] = [
        Difficulty::Easy,
        Difficulty::Normal,
        Difficulty::Difficult,
        Difficulty::Synthetic,
    ];
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "Easy",
            Difficulty::Normal => "Normal",
            Difficulty::Difficult => "Difficult",
            Difficulty::Synthetic => "Synthetic",
        })
    }
}

impl FromStr for Difficulty {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Difficulty::ALL
            .into_iter()
            .find(|d| d.to_string().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config(format!("unknown difficulty {s:?}")))
    }
}

/// A decoded video with one ground-truth saliency map per frame.
#[derive(Clone, Debug, PartialEq)]
pub struct Video {
    pub id: String,
    pub difficulty: Difficulty,
    /// `[3, H, W]` each.
    pub frames: Vec<Tensor<f32>>,
    /// `[1, H, W]` each.
    pub masks: Vec<Tensor<f32>>,
}

impl Video {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn height(&self) -> usize {
        self.frames.first().map_or(0, |f| f.shape()[1])
    }

    pub fn width(&self) -> usize {
        self.frames.first().map_or(0, |f| f.shape()[2])
    }

    /// Bilinearly resizes every frame and mask.
    pub fn resized(&self, height: usize, width: usize) -> Video {
        if self.height() == height && self.width() == width {
            return self.clone();
        }
        Video {
            id: self.id.clone(),
            difficulty: self.difficulty,
            frames: self.frames.iter().map(|f| resize_bilinear(f, height, width)).collect(),
            masks: self.masks.iter().map(|m| resize_bilinear(m, height, width)).collect(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipMeta {
    pub video_id: String,
    pub frame_indices: Vec<usize>,
    pub difficulty: Difficulty,
}

/// One training or evaluation item.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipSample {
    /// `[d, 3, H, W]`
    pub frames: Tensor<f32>,
    /// `[d, 1, H, W]`; entry `i` is the saliency of the frame one stride step
    /// before `frames[i]`.
    pub prior_maps: Tensor<f32>,
    /// `[1, H, W]`, ground truth for the last frame.
    pub target_map: Tensor<f32>,
    pub meta: ClipMeta,
}

impl ClipSample {
    pub fn depth(&self) -> usize {
        self.frames.shape()[0]
    }

    /// Keeps only the most recent `depth` frames and priors.
    pub fn keep_last(&self, depth: usize) -> Result<ClipSample> {
        let d = self.depth();
        if depth == 0 || depth > d {
            return Err(Error::Range(format!("cannot keep {depth} of {d} frames")));
        }
        Ok(ClipSample {
            frames: self.frames.narrow(0, d - depth, depth)?,
            prior_maps: self.prior_maps.narrow(0, d - depth, depth)?,
            target_map: self.target_map.clone(),
            meta: ClipMeta {
                frame_indices: self.meta.frame_indices[d - depth..].to_vec(),
                ..self.meta.clone()
            },
        })
    }
}

/// Bilinear resize of `[c, h, w]` with half-pixel-center alignment.
pub fn resize_bilinear(img: &Tensor<f32>, height: usize, width: usize) -> Tensor<f32> {
    let s = img.shape();
    assert!(s.len() == 3 && height > 0 && width > 0, "resize of {s:?} to {height}x{width}");
    let (c, h, w) = (s[0], s[1], s[2]);
    if (h, w) == (height, width) {
        return img.clone();
    }
    // source coordinate, lower index and blend weight per output position
    let axis = |out: usize, src: usize| -> Vec<(usize, usize, f32)> {
        let scale = src as f64 / out as f64;
        (0..out)
            .map(|i| {
                let pos = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
                let lo = pos.floor() as usize;
                let hi = (lo + 1).min(src - 1);
                (lo, hi, (pos - lo as f64) as f32)
            })
            .collect()
    };
    let ys = axis(height, h);
    let xs = axis(width, w);
    let d = img.data();
    let mut out = Vec::with_capacity(c * height * width);
    for ch in 0..c {
        let plane = &d[ch * h * w..(ch + 1) * h * w];
        for &(y0, y1, fy) in &ys {
            for &(x0, x1, fx) in &xs {
                let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![c, height, width], out).expect("resize output shape")
}

/// Frame indices of a clip ending at `t_last`, oldest first.
pub fn clip_indices(t_last: usize, depth: usize, stride: usize) -> Result<Vec<usize>> {
    if depth == 0 || stride == 0 {
        return Err(Error::config(format!(
            "clip depth {depth} and stride {stride} must be positive"
        )));
    }
    let span = (depth - 1) * stride;
    if t_last < span {
        return Err(Error::Range(format!(
            "t_last {t_last} has insufficient history for {depth} frames at stride {stride}"
        )));
    }
    Ok((0..depth).map(|i| t_last - (depth - 1 - i) * stride).collect())
}

fn stack(items: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
    let first = items[0].shape();
    let mut shape = vec![items.len()];
    shape.extend_from_slice(first);
    let mut data = Vec::with_capacity(items.len() * items[0].numel());
    for t in items {
        if t.shape() != first {
            return Err(Error::dim(format!("cannot stack {first:?} with {:?}", t.shape())));
        }
        data.extend_from_slice(t.data());
    }
    Tensor::new(shape, data)
}

/// Samples the clip ending at `t_last`, with ground-truth priors.
pub fn sample_clip(video: &Video, t_last: usize, depth: usize, stride: usize) -> Result<ClipSample> {
    sample_clip_with(video, t_last, depth, stride, |idx| video.masks[idx].clone())
}

/// Samples a clip taking the saliency prior of frame `i` from `prior(i)`.
/// Frames with no predecessor one stride back get an all-zero prior.
pub fn sample_clip_with(
    video: &Video,
    t_last: usize,
    depth: usize,
    stride: usize,
    mut prior: impl FnMut(usize) -> Tensor<f32>,
) -> Result<ClipSample> {
    let idx = clip_indices(t_last, depth, stride)?;
    if t_last >= video.len() {
        return Err(Error::Range(format!(
            "t_last {t_last} beyond video {} of {} frames",
            video.id,
            video.len()
        )));
    }
    let frames: Vec<&Tensor<f32>> = idx.iter().map(|&i| &video.frames[i]).collect();
    let zero = Tensor::zeros(video.masks[t_last].shape().to_vec());
    let priors: Vec<Tensor<f32>> = idx
        .iter()
        .map(|&i| if i >= stride { prior(i - stride) } else { zero.clone() })
        .collect();
    let prior_refs: Vec<&Tensor<f32>> = priors.iter().collect();
    Ok(ClipSample {
        frames: stack(&frames)?,
        prior_maps: stack(&prior_refs)?,
        target_map: video.masks[t_last].clone(),
        meta: ClipMeta {
            video_id: video.id.clone(),
            frame_indices: idx,
            difficulty: video.difficulty,
        },
    })
}

/// Replaces each prior map by zeros with probability `p_drop`.
pub fn frame_dropout<R: Rng + ?Sized>(prior_maps: &Tensor<f32>, p_drop: f64, rng: &mut R) -> Result<Tensor<f32>> {
    if !(0.0..=1.0).contains(&p_drop) {
        return Err(Error::domain(format!("p_drop {p_drop} outside [0, 1]")));
    }
    let mut out = prior_maps.clone();
    let d = prior_maps.shape()[0];
    let per = prior_maps.numel() / d;
    for chunk in out.data_mut().chunks_mut(per) {
        // draw unconditionally so the stream does not depend on p_drop edge cases
        let u: f64 = rng.random();
        if u < p_drop {
            chunk.fill(0.0);
        }
    }
    Ok(out)
}

/// [`frame_dropout`] with its own generator seeded by `seed`.
pub fn frame_dropout_seeded(prior_maps: &Tensor<f32>, p_drop: f64, seed: u64) -> Result<Tensor<f32>> {
    frame_dropout(prior_maps, p_drop, &mut ChaCha8Rng::seed_from_u64(seed))
}

/// Effective clip depth: `k * d_t` with `k` uniform in `1..=d_f/d_t` when
/// enabled, otherwise `d_f`.
pub fn sample_variable_depth<R: Rng + ?Sized>(
    d_f: usize,
    d_t: usize,
    enabled: bool,
    rng: &mut R,
) -> Result<usize> {
    if d_t == 0 || d_f == 0 || d_f % d_t != 0 {
        return Err(Error::config(format!(
            "tubelet depth {d_t} must divide frame depth {d_f}"
        )));
    }
    if !enabled {
        return Ok(d_f);
    }
    Ok(rng.random_range(1..=d_f / d_t) * d_t)
}
