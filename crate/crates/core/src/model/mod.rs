//! The dual-stream Transformer.
//!
//! Masked frames and prior maps are tokenized separately, embedded, encoded
//! by per-stream layers, summed, encoded jointly and decoded to one map per
//! frame.

mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub use layers::{
    attention_layer, axis_plan, decode_head, decode_logits, embed_stream, encoder_stream, fuse_streams,
    positional_encoding, Axis, DecoderParams, EncoderLayerParams, Linear, Norm, Output,
};

use crate::config::{parse_value, unknown_key, KeyValue};
use crate::datapipe::ClipSample;
use crate::error::{Error, Result, StageExt};
use crate::tensor::{Float, Graph, Tensor, Var};
use crate::tokenizer::{extract_tubelets, mask_frames, prepend_task_token, MaskSpec, TubeletGrid};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Frames per clip.
    pub d_f: usize,
    /// Frames per tubelet.
    pub d_t: usize,
    /// Video frames between consecutive clip frames.
    pub stride: usize,
    pub patch: usize,
    pub height: usize,
    pub width: usize,
    pub dim: usize,
    pub heads: usize,
    pub stream_layers: usize,
    pub multimodal_layers: usize,
    pub mlp_ratio: usize,
    pub mask: MaskSpec,
    pub num_tasks: usize,
    pub task_id: usize,
    /// Channels of the reassembled decoder input.
    pub decoder_channels: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_f: 4,
            d_t: 2,
            stride: 5,
            patch: 16,
            height: 64,
            width: 64,
            dim: 64,
            heads: 4,
            stream_layers: 2,
            multimodal_layers: 2,
            mlp_ratio: 4,
            mask: MaskSpec::default(),
            num_tasks: 1,
            task_id: 0,
            decoder_channels: 8,
        }
    }
}

impl ModelConfig {
    /// Full-size settings: 224x224 frames, dim 768, 12 heads, 6 + 6 layers.
    pub fn full_scale() -> Self {
        Self {
            d_f: 12,
            d_t: 6,
            height: 224,
            width: 224,
            dim: 768,
            heads: 12,
            stream_layers: 6,
            multimodal_layers: 6,
            ..Self::default()
        }
    }

    pub fn frame_token_dim(&self) -> usize {
        3 * self.patch * self.patch
    }

    pub fn saliency_token_dim(&self) -> usize {
        self.patch * self.patch
    }

    /// Token grid for a clip of `depth` frames.
    pub fn grid(&self, depth: usize) -> Result<TubeletGrid> {
        TubeletGrid::new(depth, self.height, self.width, self.d_t, self.patch)
    }

    /// Number of scalar parameters.
    pub fn param_count(&self) -> usize {
        let (d, h) = (self.dim, self.dim * self.mlp_ratio);
        let linear = |i: usize, o: usize| i * o + o;
        let layer = 2 * (2 * d) + 4 * linear(d, d) + linear(d, h) + linear(h, d);
        let c = self.decoder_channels;
        let conv = |i: usize, o: usize| o * i * 9 + o;
        linear(self.frame_token_dim(), d)
            + linear(self.saliency_token_dim(), d)
            + (2 * self.stream_layers + self.multimodal_layers) * layer
            + linear(d, c * self.patch * self.patch)
            + conv(c, c)
            + conv(c, c)
            + conv(c, 1)
    }
}

impl KeyValue for ModelConfig {
    fn keys() -> &'static [&'static str] {
        &[
            "d_f",
            "d_t",
            "stride",
            "patch",
            "height",
            "width",
            "dim",
            "heads",
            "stream_layers",
            "multimodal_layers",
            "mlp_ratio",
            "mask_offset",
            "mask_strength",
            "num_tasks",
            "task_id",
            "decoder_channels",
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "d_f" => self.d_f = parse_value(key, value)?,
            "d_t" => self.d_t = parse_value(key, value)?,
            "stride" => self.stride = parse_value(key, value)?,
            "patch" => self.patch = parse_value(key, value)?,
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "dim" => self.dim = parse_value(key, value)?,
            "heads" => self.heads = parse_value(key, value)?,
            "stream_layers" => self.stream_layers = parse_value(key, value)?,
            "multimodal_layers" => self.multimodal_layers = parse_value(key, value)?,
            "mlp_ratio" => self.mlp_ratio = parse_value(key, value)?,
            "mask_offset" => self.mask.offset = parse_value(key, value)?,
            "mask_strength" => self.mask.strength = parse_value(key, value)?,
            "num_tasks" => self.num_tasks = parse_value(key, value)?,
            "task_id" => self.task_id = parse_value(key, value)?,
            "decoder_channels" => self.decoder_channels = parse_value(key, value)?,
            _ => return Err(unknown_key(key, Self::keys())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("d_f", self.d_f.to_string()),
            ("d_t", self.d_t.to_string()),
            ("stride", self.stride.to_string()),
            ("patch", self.patch.to_string()),
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("dim", self.dim.to_string()),
            ("heads", self.heads.to_string()),
            ("stream_layers", self.stream_layers.to_string()),
            ("multimodal_layers", self.multimodal_layers.to_string()),
            ("mlp_ratio", self.mlp_ratio.to_string()),
            ("mask_offset", self.mask.offset.to_string()),
            ("mask_strength", self.mask.strength.to_string()),
            ("num_tasks", self.num_tasks.to_string()),
            ("task_id", self.task_id.to_string()),
            ("decoder_channels", self.decoder_channels.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        let positive = [
            ("d_f", self.d_f),
            ("d_t", self.d_t),
            ("stride", self.stride),
            ("patch", self.patch),
            ("height", self.height),
            ("width", self.width),
            ("dim", self.dim),
            ("heads", self.heads),
            ("mlp_ratio", self.mlp_ratio),
            ("num_tasks", self.num_tasks),
            ("decoder_channels", self.decoder_channels),
        ];
        if let Some((k, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::config(format!("{k} must be positive")));
        }
        if self.dim % self.heads != 0 {
            return Err(Error::config(format!("heads {} do not divide dim {}", self.heads, self.dim)));
        }
        if self.dim % 2 != 0 {
            return Err(Error::config(format!("dim {} must be even", self.dim)));
        }
        if self.stream_layers % 2 != 0 || self.multimodal_layers % 2 != 0 {
            return Err(Error::config(format!(
                "stream_layers {} and multimodal_layers {} must be even",
                self.stream_layers, self.multimodal_layers
            )));
        }
        self.grid(self.d_f)?;
        if !(0.0..=1.0).contains(&self.mask.strength) {
            return Err(Error::config(format!("mask_strength {} outside [0, 1]", self.mask.strength)));
        }
        if self.task_id >= self.num_tasks || self.num_tasks > self.saliency_token_dim() {
            return Err(Error::config(format!(
                "task_id {} / num_tasks {} invalid for {}-wide tokens",
                self.task_id,
                self.num_tasks,
                self.saliency_token_dim()
            )));
        }
        Ok(())
    }
}

/// Every parameter of the model, as indices (layout) or graph handles.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T> {
    pub frame_embed: Linear<T>,
    pub saliency_embed: Linear<T>,
    pub frame_layers: Vec<EncoderLayerParams<T>>,
    pub saliency_layers: Vec<EncoderLayerParams<T>>,
    pub multimodal_layers: Vec<EncoderLayerParams<T>>,
    pub decoder: DecoderParams<T>,
}

impl<T: Copy> Params<T> {
    pub fn map<U>(&self, f: impl Fn(T) -> U) -> Params<U> {
        let layers = |v: &[EncoderLayerParams<T>]| v.iter().map(|l| l.map(&f)).collect();
        Params {
            frame_embed: self.frame_embed.map(&f),
            saliency_embed: self.saliency_embed.map(&f),
            frame_layers: layers(&self.frame_layers),
            saliency_layers: layers(&self.saliency_layers),
            multimodal_layers: layers(&self.multimodal_layers),
            decoder: self.decoder.map(&f),
        }
    }
}

#[derive(Clone, Copy)]
enum Init {
    Zeros,
    Ones,
    /// Normal truncated at two standard deviations.
    TruncNormal(f64),
}

struct Builder<'a, F: Float> {
    names: Vec<String>,
    tensors: Vec<Tensor<F>>,
    rng: &'a mut ChaCha8Rng,
}

impl<F: Float> Builder<'_, F> {
    fn push(&mut self, name: String, shape: Vec<usize>, init: Init) -> usize {
        let t = match init {
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::ones(shape),
            Init::TruncNormal(std) => {
                let rng = &mut *self.rng;
                Tensor::from_fn(shape, |_| loop {
                    let z: f64 = StandardNormal.sample(rng);
                    if z.abs() <= 2.0 {
                        break F::from_f64(z * std);
                    }
                })
            }
        };
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn linear(&mut self, name: &str, i: usize, o: usize) -> Linear<usize> {
        Linear {
            w: self.push(format!("{name}.w"), vec![i, o], Init::TruncNormal(0.02)),
            b: self.push(format!("{name}.b"), vec![o], Init::Zeros),
        }
    }

    fn norm(&mut self, name: &str, d: usize) -> Norm<usize> {
        Norm {
            gamma: self.push(format!("{name}.gamma"), vec![d], Init::Ones),
            beta: self.push(format!("{name}.beta"), vec![d], Init::Zeros),
        }
    }

    fn conv(&mut self, name: &str, cin: usize, cout: usize) -> Linear<usize> {
        // He-scaled so the three-layer decoder neither vanishes nor explodes
        let std = (2.0 / (cin * 9) as f64).sqrt();
        Linear {
            w: self.push(format!("{name}.w"), vec![cout, cin, 3, 3], Init::TruncNormal(std)),
            b: self.push(format!("{name}.b"), vec![cout], Init::Zeros),
        }
    }

    fn layer(&mut self, name: &str, d: usize, hidden: usize) -> EncoderLayerParams<usize> {
        EncoderLayerParams {
            norm1: self.norm(&format!("{name}.norm1"), d),
            q: self.linear(&format!("{name}.attn_q"), d, d),
            k: self.linear(&format!("{name}.attn_k"), d, d),
            v: self.linear(&format!("{name}.attn_v"), d, d),
            out: self.linear(&format!("{name}.attn_out"), d, d),
            norm2: self.norm(&format!("{name}.norm2"), d),
            fc1: self.linear(&format!("{name}.fc1"), d, hidden),
            fc2: self.linear(&format!("{name}.fc2"), hidden, d),
        }
    }
}

/// Weights plus the precomputed positional table.
#[derive(Clone, Debug, PartialEq)]
pub struct Model<F: Float = f32> {
    cfg: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<F>>,
    layout: Params<usize>,
    pe: Tensor<F>,
}

impl<F: Float> Model<F> {
    /// Randomly initialized model.
    pub fn new(cfg: ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder {
            names: Vec::new(),
            tensors: Vec::new(),
            rng: &mut rng,
        };
        let (d, hidden) = (cfg.dim, cfg.dim * cfg.mlp_ratio);
        let c = cfg.decoder_channels;
        let frame_embed = b.linear("frame_embed", cfg.frame_token_dim(), d);
        let saliency_embed = b.linear("saliency_embed", cfg.saliency_token_dim(), d);
        let mut layers = |prefix: &str, n: usize| -> Vec<EncoderLayerParams<usize>> {
            (0..n).map(|i| b.layer(&format!("{prefix}.{i}"), d, hidden)).collect()
        };
        let frame_layers = layers("frame_layers", cfg.stream_layers);
        let saliency_layers = layers("saliency_layers", cfg.stream_layers);
        let multimodal_layers = layers("multimodal_layers", cfg.multimodal_layers);
        let decoder = DecoderParams {
            proj: b.linear("decoder.proj", d, c * cfg.patch * cfg.patch),
            convs: [b.conv("decoder.conv1", c, c), b.conv("decoder.conv2", c, c), b.conv("decoder.conv3", c, 1)],
        };
        let layout = Params {
            frame_embed,
            saliency_embed,
            frame_layers,
            saliency_layers,
            multimodal_layers,
            decoder,
        };
        let max_pos = cfg.grid(cfg.d_f)?.num_tokens() + 1;
        let pe = positional_encoding(max_pos.max(cfg.d_t), d)?;
        let Builder { names, tensors, .. } = b;
        Ok(Self {
            cfg,
            names,
            params: tensors,
            layout,
            pe,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn params(&self) -> &[Tensor<F>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<F>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn layout(&self) -> &Params<usize> {
        &self.layout
    }

    pub fn num_params(&self) -> usize {
        self.params.iter().map(Tensor::numel).sum()
    }

    /// Replaces all weights; shapes must match the current ones.
    pub fn set_params(&mut self, params: Vec<Tensor<F>>) -> Result<()> {
        if params.len() != self.params.len()
            || params.iter().zip(&self.params).any(|(a, b)| a.shape() != b.shape())
        {
            return Err(Error::dim("parameter list does not match the model layout"));
        }
        self.params = params;
        Ok(())
    }

    pub fn positional_table(&self) -> &Tensor<F> {
        &self.pe
    }

    /// Records the weights on `g`, as trainable leaves or constants.
    pub fn bind(&self, g: &mut Graph<F>, trainable: bool) -> Vec<Var> {
        self.params
            .iter()
            .map(|t| if trainable { g.param(t.clone()) } else { g.constant(t.clone()) })
            .collect()
    }

    /// Token-position plus slot sinusoids, `[n, d_t, dim]`.
    fn positions(&self, n: usize) -> Tensor<F> {
        let (d_t, dim) = (self.cfg.d_t, self.cfg.dim);
        let pe = self.pe.data();
        let mut out = Vec::with_capacity(n * d_t * dim);
        for pos in 0..n {
            for slot in 0..d_t {
                let a = &pe[pos * dim..(pos + 1) * dim];
                let b = &pe[slot * dim..(slot + 1) * dim];
                out.extend(a.iter().zip(b).map(|(&x, &y)| x + y));
            }
        }
        Tensor::new(vec![n, d_t, dim], out).expect("positional shape")
    }

    fn check_clip(&self, frames: &Tensor<F>, priors: &Tensor<F>) -> Result<usize> {
        let cfg = &self.cfg;
        let fs = frames.shape();
        let want = [cfg.height, cfg.width];
        if fs.len() != 4 || fs[1] != 3 || fs[2..] != want || priors.shape() != [fs[0], 1, cfg.height, cfg.width] {
            return Err(Error::dim(format!(
                "clip frames {fs:?} / priors {:?} do not match [d, 3, {h}, {w}] / [d, 1, {h}, {w}]",
                priors.shape(),
                h = cfg.height,
                w = cfg.width
            )));
        }
        let d = fs[0];
        if d == 0 || d > cfg.d_f || d % cfg.d_t != 0 {
            return Err(Error::config(format!(
                "clip depth {d} must be a multiple of d_t {} and at most d_f {}",
                cfg.d_t, cfg.d_f
            )));
        }
        Ok(d)
    }

    /// Full pipeline on bound weights, returning decoder logits.
    pub fn forward_with(
        &self,
        g: &mut Graph<F>,
        vars: &[Var],
        frames: &Tensor<F>,
        priors: &Tensor<F>,
        output: Output,
    ) -> Result<Var> {
        let cfg = &self.cfg;
        let depth = self.check_clip(frames, priors)?;
        let p = self.layout.map(|i| vars[i]);

        let masked = mask_frames(frames, priors, cfg.mask).stage("mask")?;
        let (ft, st) = (|| -> Result<_> {
            let ft = prepend_task_token(&extract_tubelets(&masked, cfg.d_t, cfg.patch)?, cfg.task_id, cfg.num_tasks)?;
            let st = prepend_task_token(&extract_tubelets(priors, cfg.d_t, cfg.patch)?, cfg.task_id, cfg.num_tasks)?;
            Ok((ft, st))
        })()
        .stage("tokenize")?;
        debug_assert_eq!(ft.grid.depth(), depth);

        let n = ft.len();
        let pe = g.constant(self.positions(n));
        let ftok = g.constant(ft.tokens);
        let stok = g.constant(st.tokens);
        let (ef, es) = (|| -> Result<_> {
            let ef = embed_stream(g, ftok, &p.frame_embed)?;
            let es = embed_stream(g, stok, &p.saliency_embed)?;
            Ok((g.add(ef, pe)?, g.add(es, pe)?))
        })()
        .stage("embed")?;

        let hf = encoder_stream(g, ef, &p.frame_layers, cfg.heads).stage("frame encoder")?;
        let hs = encoder_stream(g, es, &p.saliency_layers, cfg.heads).stage("saliency encoder")?;
        let fused = fuse_streams(g, hf, hs).stage("fuse")?;
        let h = encoder_stream(g, fused, &p.multimodal_layers, cfg.heads).stage("multimodal encoder")?;
        decode_logits(g, h, ft.grid, &p.decoder, output).stage("decode")
    }

    /// Saliency maps `[d, 1, H, W]` for every clip frame.
    pub fn predict(&self, frames: &Tensor<F>, priors: &Tensor<F>) -> Result<Tensor<F>> {
        self.infer(frames, priors, Output::All)
    }

    /// Saliency map `[1, H, W]` of the most recent frame.
    pub fn predict_last(&self, frames: &Tensor<F>, priors: &Tensor<F>) -> Result<Tensor<F>> {
        let m = self.infer(frames, priors, Output::Last)?;
        let (h, w) = (self.cfg.height, self.cfg.width);
        m.reshape(vec![1, h, w])
    }

    fn infer(&self, frames: &Tensor<F>, priors: &Tensor<F>, output: Output) -> Result<Tensor<F>> {
        let mut g = Graph::new();
        let vars = self.bind(&mut g, false);
        let logits = self.forward_with(&mut g, &vars, frames, priors, output)?;
        let probs = g.sigmoid(logits);
        Ok(g.value(probs).clone())
    }
}

impl Model<f32> {
    /// Maps for every frame of `clip`, using its prior maps as given.
    pub fn forward(&self, clip: &ClipSample) -> Result<Tensor<f32>> {
        self.predict(&clip.frames, &clip.prior_maps)
    }
}
