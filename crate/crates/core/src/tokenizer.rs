//! Saliency-guided masking and tubelet tokens.
//!
//! A clip `[d', c, H, W]` is cut into non-overlapping tubelets of `d_t`
//! frames by `p x p` pixels. Token `n` (after the optional task token)
//! enumerates temporal blocks first, then rows, then columns, and keeps the
//! temporal axis: each token is `[d_t, c * p * p]`.

use crate::error::{Error, Result};
use crate::tensor::{Float, Tensor};

/// How strongly and with what lag prior maps suppress frame pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MaskSpec {
    /// Frame `t` is masked by the map at `t - offset`.
    pub offset: usize,
    /// Fraction removed where the map is 1.
    pub strength: f64,
}

impl Default for MaskSpec {
    fn default() -> Self {
        Self {
            offset: 0,
            strength: 1.0,
        }
    }
}

/// `masked[t] = frames[t] * (1 - s * maps[t - o])`; frames with `t < o` are
/// left untouched.
pub fn mask_frames<F: Float>(frames: &Tensor<F>, maps: &Tensor<F>, spec: MaskSpec) -> Result<Tensor<F>> {
    if !(0.0..=1.0).contains(&spec.strength) {
        return Err(Error::domain(format!("mask strength {} outside [0, 1]", spec.strength)));
    }
    let (fs, ms) = (frames.shape(), maps.shape());
    if fs.len() != 4 || ms.len() != 4 || ms[1] != 1 || fs[0] != ms[0] || fs[2..] != ms[2..] {
        return Err(Error::dim(format!(
            "mask_frames: frames {fs:?} and maps {ms:?} must be [d, c, H, W] and [d, 1, H, W]"
        )));
    }
    let (d, c, plane) = (fs[0], fs[1], fs[2] * fs[3]);
    let s = F::from_f64(spec.strength);
    let mut out = frames.clone();
    let md = maps.data();
    let od = out.data_mut();
    for t in spec.offset..d {
        let map = &md[(t - spec.offset) * plane..(t - spec.offset + 1) * plane];
        for ch in 0..c {
            let px = &mut od[(t * c + ch) * plane..(t * c + ch + 1) * plane];
            for (v, &m) in px.iter_mut().zip(map) {
                // skip exact zeros so unmasked pixels stay bitwise identical
                if m != F::zero() {
                    *v *= F::one() - s * m;
                }
            }
        }
    }
    Ok(out)
}

/// Token grid: `(gt, gh, gw)` blocks of `d_t` frames and `p x p` pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct TubeletGrid {
    pub gt: usize,
    pub gh: usize,
    pub gw: usize,
    pub d_t: usize,
    pub patch: usize,
}

impl TubeletGrid {
    pub fn new(depth: usize, height: usize, width: usize, d_t: usize, patch: usize) -> Result<Self> {
        for (what, n, k) in [("depth", depth, d_t), ("height", height, patch), ("width", width, patch)] {
            if k == 0 || n == 0 || n % k != 0 {
                let by = if what == "depth" { "tubelet depth" } else { "patch size" };
                return Err(Error::config(format!("{by} {k} does not divide {what} {n}")));
            }
        }
        Ok(Self {
            gt: depth / d_t,
            gh: height / patch,
            gw: width / patch,
            d_t,
            patch,
        })
    }

    pub fn num_tokens(&self) -> usize {
        self.gt * self.gh * self.gw
    }

    pub fn depth(&self) -> usize {
        self.gt * self.d_t
    }

    pub fn height(&self) -> usize {
        self.gh * self.patch
    }

    pub fn width(&self) -> usize {
        self.gw * self.patch
    }

    /// Index (without task token) of the tubelet at block `t`, row `r`, column `c`.
    pub fn token_index(&self, t: usize, r: usize, c: usize) -> usize {
        (t * self.gh + r) * self.gw + c
    }

    /// `[d', c, H, W]` viewed as `[gt, d_t, c, gh, p, gw, p]`.
    pub fn split_shape(&self, channels: usize) -> [usize; 7] {
        [self.gt, self.d_t, channels, self.gh, self.patch, self.gw, self.patch]
    }

    /// Axis order taking the split view to `[gt, gh, gw, d_t, c, p, p]`.
    pub const TO_TOKENS: [usize; 7] = [0, 3, 5, 1, 2, 4, 6];
    /// Inverse of [`TO_TOKENS`](Self::TO_TOKENS).
    pub const FROM_TOKENS: [usize; 7] = [0, 3, 4, 1, 5, 2, 6];

    /// `[gt, gh, gw, d_t, c, p, p]`.
    pub fn token_view_shape(&self, channels: usize) -> [usize; 7] {
        [self.gt, self.gh, self.gw, self.d_t, channels, self.patch, self.patch]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence<F: Float = f32> {
    /// `[N (+1), d_t, c * p * p]`
    pub tokens: Tensor<F>,
    pub grid: TubeletGrid,
    pub channels: usize,
    pub has_task_token: bool,
}

impl<F: Float> TokenSequence<F> {
    pub fn len(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn token_dim(&self) -> usize {
        self.tokens.shape()[2]
    }
}

/// Cuts `[d', c, H, W]` into tubelet tokens `[N, d_t, c * p * p]`.
pub fn extract_tubelets<F: Float>(seq: &Tensor<F>, d_t: usize, patch: usize) -> Result<TokenSequence<F>> {
    let s = seq.shape();
    if s.len() != 4 {
        return Err(Error::dim(format!("extract_tubelets expects [d, c, H, W], got {s:?}")));
    }
    let grid = TubeletGrid::new(s[0], s[2], s[3], d_t, patch)?;
    let c = s[1];
    let tokens = seq
        .clone()
        .reshape(grid.split_shape(c).to_vec())?
        .permute(&TubeletGrid::TO_TOKENS)?
        .reshape(vec![grid.num_tokens(), d_t, c * patch * patch])?;
    Ok(TokenSequence {
        tokens,
        grid,
        channels: c,
        has_task_token: false,
    })
}

/// One-hot task vector replicated over the `d_t` slots, shape `[d_t, E]`.
pub fn task_token<F: Float>(task_id: usize, num_tasks: usize, d_t: usize, dim: usize) -> Result<Tensor<F>> {
    if num_tasks == 0 || task_id >= num_tasks || num_tasks > dim {
        return Err(Error::domain(format!(
            "task id {task_id} invalid for {num_tasks} tasks in a {dim}-wide token"
        )));
    }
    let mut t = Tensor::zeros(vec![d_t, dim]);
    for slot in 0..d_t {
        t.set(&[slot, task_id], F::one());
    }
    Ok(t)
}

/// Prepends the one-hot task token as token 0.
pub fn prepend_task_token<F: Float>(
    tokens: &TokenSequence<F>,
    task_id: usize,
    num_tasks: usize,
) -> Result<TokenSequence<F>> {
    if tokens.has_task_token {
        return Err(Error::config("sequence already carries a task token"));
    }
    let d_t = tokens.grid.d_t;
    let head = task_token(task_id, num_tasks, d_t, tokens.token_dim())?.reshape(vec![1, d_t, tokens.token_dim()])?;
    Ok(TokenSequence {
        tokens: Tensor::concat(&[&head, &tokens.tokens], 0)?,
        has_task_token: true,
        ..tokens.clone()
    })
}

/// Inverse of [`extract_tubelets`], dropping the task token if present.
pub fn reassemble_tokens<F: Float>(
    tokens: &TokenSequence<F>,
    channels: usize,
    height: usize,
    width: usize,
) -> Result<Tensor<F>> {
    let g = tokens.grid;
    let skip = usize::from(tokens.has_task_token);
    let expect = [g.num_tokens() + skip, g.d_t, channels * g.patch * g.patch];
    if tokens.tokens.shape() != expect || g.height() != height || g.width() != width || tokens.channels != channels {
        return Err(Error::dim(format!(
            "tokens {:?} with grid {g:?} do not reassemble to [{}, {channels}, {height}, {width}]",
            tokens.tokens.shape(),
            g.depth()
        )));
    }
    let body = if skip == 1 {
        tokens.tokens.narrow(0, 1, g.num_tokens())?
    } else {
        tokens.tokens.clone()
    };
    body.reshape(g.token_view_shape(channels).to_vec())?
        .permute(&TubeletGrid::FROM_TOKENS)?
        .reshape(vec![g.depth(), channels, height, width])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn permutations_are_inverse() {
        let to = TubeletGrid::TO_TOKENS;
        let from = TubeletGrid::FROM_TOKENS;
        for i in 0..7 {
            assert_eq!(to[from[i]], i);
        }
    }

    #[test]
    fn grid_errors_name_the_pair() {
        let e = TubeletGrid::new(4, 30, 32, 2, 16).unwrap_err().to_string();
        assert!(e.contains("16") && e.contains("30"), "{e}");
        let e = TubeletGrid::new(6, 32, 32, 4, 16).unwrap_err().to_string();
        assert!(e.contains("tubelet depth 4") && e.contains("6"), "{e}");
    }

    #[test]
    fn full_scale_count() {
        assert_eq!(TubeletGrid::new(12, 224, 224, 6, 16).unwrap().num_tokens(), 392);
    }

    #[test]
    fn masking_examples() {
        let frames = Tensor::<f64>::full(vec![2, 3, 1, 2], 0.8);
        let zeros = Tensor::zeros(vec![2, 1, 1, 2]);
        assert_eq!(mask_frames(&frames, &zeros, MaskSpec::default()).unwrap(), frames);
        let ones = Tensor::ones(vec![2, 1, 1, 2]);
        assert!(mask_frames(&frames, &ones, MaskSpec::default()).unwrap().data().iter().all(|&v| v == 0.0));
        let half = MaskSpec { offset: 0, strength: 0.5 };
        let m = Tensor::new(vec![2, 1, 1, 2], vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let out = mask_frames(&frames, &m, half).unwrap();
        assert_eq!(out.at(&[0, 2, 0, 0]), 0.4);
        assert_eq!(out.at(&[0, 2, 0, 1]), 0.8);
        // with offset 1, frame 0 is untouched and frame 1 uses map 0
        let lag = mask_frames(&frames, &m, MaskSpec { offset: 1, strength: 1.0 }).unwrap();
        assert_eq!(lag.at(&[0, 0, 0, 0]), 0.8);
        assert_eq!(lag.at(&[1, 0, 0, 0]), 0.0);
        assert!(mask_frames(&frames, &Tensor::zeros(vec![2, 1, 2, 1]), half).is_err());
    }
}
