//! Building blocks of the encoder and decoder, expressed on a [`Graph`].

use crate::error::{Error, Result};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::tokenizer::TubeletGrid;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Linear<T> {
    /// `[in, out]`
    pub w: T,
    /// `[out]`
    pub b: T,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Norm<T> {
    pub gamma: T,
    pub beta: T,
}

/// Pre-norm attention and feed-forward sublayers.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EncoderLayerParams<T> {
    pub norm1: Norm<T>,
    pub q: Linear<T>,
    pub k: Linear<T>,
    pub v: Linear<T>,
    pub out: Linear<T>,
    pub norm2: Norm<T>,
    pub fc1: Linear<T>,
    pub fc2: Linear<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DecoderParams<T> {
    /// `dim -> channels * p * p`
    pub proj: Linear<T>,
    /// Kernels `[cout, cin, 3, 3]` and biases `[cout]`.
    pub convs: [Linear<T>; 3],
}

impl<T: Copy> Linear<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Linear<U> {
        Linear { w: f(self.w), b: f(self.b) }
    }
}

impl<T: Copy> Norm<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> Norm<U> {
        Norm {
            gamma: f(self.gamma),
            beta: f(self.beta),
        }
    }
}

impl<T: Copy> EncoderLayerParams<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> EncoderLayerParams<U> {
        EncoderLayerParams {
            norm1: self.norm1.map(f),
            q: self.q.map(f),
            k: self.k.map(f),
            v: self.v.map(f),
            out: self.out.map(f),
            norm2: self.norm2.map(f),
            fc1: self.fc1.map(f),
            fc2: self.fc2.map(f),
        }
    }
}

impl<T: Copy> DecoderParams<T> {
    pub fn map<U>(&self, f: &impl Fn(T) -> U) -> DecoderParams<U> {
        DecoderParams {
            proj: self.proj.map(f),
            convs: [self.convs[0].map(f), self.convs[1].map(f), self.convs[2].map(f)],
        }
    }
}

/// Which axis of a `[tokens, slots, dim]` activation attention runs along.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axis {
    /// Across tokens, one sequence per temporal slot.
    Spatial,
    /// Across the slots of each tubelet.
    Temporal,
}

/// First half of the layers spatial, second half temporal.
pub fn axis_plan(layers: usize) -> Vec<Axis> {
    (0..layers)
        .map(|i| if i < layers / 2 { Axis::Spatial } else { Axis::Temporal })
        .collect()
}

/// Sinusoidal table: `pe[pos, 2i] = sin(pos / 10000^(2i/dim))`, `pe[pos, 2i+1] = cos(..)`.
pub fn positional_encoding<F: Float>(max_pos: usize, dim: usize) -> Result<Tensor<F>> {
    if dim == 0 || dim % 2 != 0 {
        return Err(Error::config(format!("positional encoding needs an even dim, got {dim}")));
    }
    let mut pe = Tensor::zeros(vec![max_pos.max(1), dim]);
    for pos in 0..max_pos {
        for i in 0..dim / 2 {
            let angle = pos as f64 / 10_000f64.powf(2.0 * i as f64 / dim as f64);
            pe.set(&[pos, 2 * i], F::from_f64(angle.sin()));
            pe.set(&[pos, 2 * i + 1], F::from_f64(angle.cos()));
        }
    }
    Ok(pe)
}

/// Per-slot affine map of `[n, slots, E]` tokens to `[n, slots, dim]`.
pub fn embed_stream<F: Float>(g: &mut Graph<F>, tokens: Var, p: &Linear<Var>) -> Result<Var> {
    let (e, w) = (g.shape(tokens).last().copied(), g.shape(p.w)[0]);
    if e != Some(w) {
        return Err(Error::dim(format!(
            "token width {:?} does not match embedding input {w}",
            g.shape(tokens)
        )));
    }
    g.linear(tokens, p.w, Some(p.b))
}

/// Pre-norm self-attention plus feed-forward on `[batch, seq, dim]`.
fn encoder_block<F: Float>(g: &mut Graph<F>, x: Var, p: &EncoderLayerParams<Var>, heads: usize) -> Result<Var> {
    let s = g.shape(x).to_vec();
    let (batch, seq, dim) = (s[0], s[1], s[2]);
    if heads == 0 || dim % heads != 0 {
        return Err(Error::config(format!("{heads} heads do not divide dim {dim}")));
    }
    let hd = dim / heads;

    let h = g.layer_norm(x, p.norm1.gamma, p.norm1.beta, 2, LN_EPS)?;
    let split = [batch, seq, heads, hd];
    let q = g.linear(h, p.q.w, Some(p.q.b))?;
    let q = g.reshape(q, &split)?;
    let q = g.permute(q, &[0, 2, 1, 3])?;
    let k = g.linear(h, p.k.w, Some(p.k.b))?;
    let k = g.reshape(k, &split)?;
    let kt = g.permute(k, &[0, 2, 3, 1])?;
    let v = g.linear(h, p.v.w, Some(p.v.b))?;
    let v = g.reshape(v, &split)?;
    let v = g.permute(v, &[0, 2, 1, 3])?;

    let scores = g.matmul(q, kt)?;
    let scores = g.scale(scores, F::from_f64(1.0 / (hd as f64).sqrt()));
    let attn = g.softmax(scores, 3)?;
    let ctx = g.matmul(attn, v)?;
    let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
    let ctx = g.reshape(ctx, &[batch, seq, dim])?;
    let o = g.linear(ctx, p.out.w, Some(p.out.b))?;
    let x = g.add(x, o)?;

    let h = g.layer_norm(x, p.norm2.gamma, p.norm2.beta, 2, LN_EPS)?;
    let f = g.linear(h, p.fc1.w, Some(p.fc1.b))?;
    let f = g.gelu(f);
    let f = g.linear(f, p.fc2.w, Some(p.fc2.b))?;
    g.add(x, f)
}

fn check_tokens<F: Float>(g: &Graph<F>, x: Var) -> Result<()> {
    if g.shape(x).len() != 3 {
        return Err(Error::dim(format!("expected [tokens, slots, dim], got {:?}", g.shape(x))));
    }
    Ok(())
}

/// One encoder layer on `[tokens, slots, dim]` attending along `axis`.
pub fn attention_layer<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    axis: Axis,
    p: &EncoderLayerParams<Var>,
    heads: usize,
) -> Result<Var> {
    check_tokens(g, x)?;
    match axis {
        Axis::Temporal => encoder_block(g, x, p, heads),
        Axis::Spatial => {
            let t = g.permute(x, &[1, 0, 2])?;
            let y = encoder_block(g, t, p, heads)?;
            g.permute(y, &[1, 0, 2])
        }
    }
}

/// Applies `layers` following [`axis_plan`].
pub fn encoder_stream<F: Float>(
    g: &mut Graph<F>,
    x: Var,
    layers: &[EncoderLayerParams<Var>],
    heads: usize,
) -> Result<Var> {
    check_tokens(g, x)?;
    if layers.len() % 2 != 0 {
        return Err(Error::config(format!("encoder needs an even layer count, got {}", layers.len())));
    }
    let half = layers.len() / 2;
    let mut h = x;
    if half > 0 {
        // consecutive spatial layers share one transposition
        h = g.permute(h, &[1, 0, 2])?;
        for p in &layers[..half] {
            h = encoder_block(g, h, p, heads)?;
        }
        h = g.permute(h, &[1, 0, 2])?;
    }
    for p in &layers[half..] {
        h = encoder_block(g, h, p, heads)?;
    }
    Ok(h)
}

/// Elementwise sum of the two streams.
pub fn fuse_streams<F: Float>(g: &mut Graph<F>, frame: Var, saliency: Var) -> Result<Var> {
    if g.shape(frame) != g.shape(saliency) {
        return Err(Error::dim(format!(
            "cannot fuse streams {:?} and {:?}",
            g.shape(frame),
            g.shape(saliency)
        )));
    }
    g.add(frame, saliency)
}

/// Which output maps the decoder produces.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Output {
    /// One map per input frame.
    All,
    /// Only the map of the most recent frame.
    Last,
}

/// Decoder logits: drops the task token, projects each slot back to a
/// `channels x p x p` patch, reassembles the frames and runs the three
/// convolutions. Returns `[d', 1, H, W]` (or `[1, 1, H, W]` for
/// [`Output::Last`]).
pub fn decode_logits<F: Float>(
    g: &mut Graph<F>,
    tokens: Var,
    grid: TubeletGrid,
    p: &DecoderParams<Var>,
    output: Output,
) -> Result<Var> {
    let s = g.shape(tokens).to_vec();
    let n = grid.num_tokens();
    if s.len() != 3 || s[0] != n + 1 || s[1] != grid.d_t {
        return Err(Error::dim(format!(
            "decoder expects [{}, {}, dim] tokens with a task token, got {s:?}",
            n + 1,
            grid.d_t
        )));
    }
    let pp = grid.patch * grid.patch;
    let proj_out = g.shape(p.proj.w)[1];
    if proj_out % pp != 0 {
        return Err(Error::dim(format!("decoder projection width {proj_out} is not a multiple of {pp}")));
    }
    let channels = proj_out / pp;

    let (body, grid) = match output {
        Output::All => (g.narrow(tokens, 0, 1, n)?, grid),
        Output::Last => {
            // tubelets of the last temporal block, last slot only
            let per_block = grid.gh * grid.gw;
            let block = g.narrow(tokens, 0, 1 + n - per_block, per_block)?;
            let slot = g.narrow(block, 1, grid.d_t - 1, 1)?;
            (slot, TubeletGrid { gt: 1, d_t: 1, ..grid })
        }
    };
    let patches = g.linear(body, p.proj.w, Some(p.proj.b))?;
    let view = g.reshape(patches, &grid.token_view_shape(channels))?;
    let frames = g.permute(view, &TubeletGrid::FROM_TOKENS)?;
    let mut x = g.reshape(frames, &[grid.depth(), channels, grid.height(), grid.width()])?;
    for (i, conv) in p.convs.iter().enumerate() {
        x = g.conv2d(x, conv.w, Some(conv.b))?;
        if i < 2 {
            x = g.gelu(x);
        }
    }
    Ok(x)
}

/// [`decode_logits`] squashed to `[0, 1]`.
pub fn decode_head<F: Float>(
    g: &mut Graph<F>,
    tokens: Var,
    grid: TubeletGrid,
    p: &DecoderParams<Var>,
    output: Output,
) -> Result<Var> {
    let logits = decode_logits(g, tokens, grid, p, output)?;
    Ok(g.sigmoid(logits))
}
