//! Training loop, dataset evaluation and the `(d_f, d_t)` sweep.

mod sweep;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use sweep::{
    comparison_table, parse_sweep_csv, rows_to_csv, sweep, SweepCell, SweepResult, SweepRow, SweepSpec, SWEEP_HEADER,
};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_bool, parse_value, unknown_key, KeyValue};
use crate::datapipe::{frame_dropout, sample_clip, sample_clip_with, sample_variable_depth, ClipSample, Video};
use crate::error::{Error, Result};
use crate::metrics::{MetricReport, ReportBuilder};
use crate::model::{Model, Output};
use crate::optim::{AdamState, CosineSchedule};
use crate::tensor::{Float, Graph, Tensor, Var};

/// Where the saliency priors come from at evaluation time.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum EvalMode {
    /// Ground-truth maps of the earlier frames.
    #[default]
    GtPrior,
    /// The model's own earlier predictions.
    Recursive,
}

impl fmt::Display for EvalMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            EvalMode::GtPrior => "gt_prior",
            EvalMode::Recursive => "recursive",
        })
    }
}

impl FromStr for EvalMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gt_prior" => Ok(EvalMode::GtPrior),
            "recursive" => Ok(EvalMode::Recursive),
            _ => Err(Error::config(format!("eval_mode must be gt_prior or recursive, got {s:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub lr_min: f64,
    /// Iterations until the cosine schedule reaches `lr_min`.
    pub horizon: u64,
    /// Probability of blanking each prior map.
    pub p_drop: f64,
    pub variable_depth: bool,
    pub seed: u64,
    /// Stop after this many iterations even mid-epoch; 0 means no cap.
    pub max_iterations: usize,
    /// Directory receiving one checkpoint per epoch.
    pub checkpoint_dir: Option<PathBuf>,
    pub eval_mode: EvalMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            batch_size: 2,
            lr_max: 1e-5,
            lr_min: 1e-7,
            horizon: 10_000,
            p_drop: 0.6,
            variable_depth: false,
            seed: 0,
            max_iterations: 0,
            checkpoint_dir: None,
            eval_mode: EvalMode::GtPrior,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> CosineSchedule {
        CosineSchedule {
            lr_max: self.lr_max,
            lr_min: self.lr_min,
            horizon: self.horizon,
        }
    }
}

impl KeyValue for TrainConfig {
    fn keys() -> &'static [&'static str] {
        &[
            "epochs",
            "batch_size",
            "lr_max",
            "lr_min",
            "horizon",
            "p_drop",
            "variable_depth",
            "seed",
            "max_iterations",
            "checkpoint_dir",
            "eval_mode",
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "epochs" => self.epochs = parse_value(key, value)?,
            "batch_size" => self.batch_size = parse_value(key, value)?,
            "lr_max" => self.lr_max = parse_value(key, value)?,
            "lr_min" => self.lr_min = parse_value(key, value)?,
            "horizon" => self.horizon = parse_value(key, value)?,
            "p_drop" => self.p_drop = parse_value(key, value)?,
            "variable_depth" => self.variable_depth = parse_bool(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            "max_iterations" => self.max_iterations = parse_value(key, value)?,
            "checkpoint_dir" => self.checkpoint_dir = (!value.is_empty()).then(|| PathBuf::from(value)),
            "eval_mode" => self.eval_mode = value.parse()?,
            _ => return Err(unknown_key(key, Self::keys())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        vec![
            ("epochs", self.epochs.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("lr_max", self.lr_max.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("horizon", self.horizon.to_string()),
            ("p_drop", self.p_drop.to_string()),
            ("variable_depth", self.variable_depth.to_string()),
            ("seed", self.seed.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            (
                "checkpoint_dir",
                self.checkpoint_dir.as_ref().map_or(String::new(), |p| p.display().to_string()),
            ),
            ("eval_mode", self.eval_mode.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config(format!(
                "epochs {} and batch_size {} must be at least 1",
                self.epochs, self.batch_size
            )));
        }
        if !(self.lr_max > 0.0 && self.lr_min > 0.0 && self.lr_min <= self.lr_max) {
            return Err(Error::config(format!(
                "need 0 < lr_min <= lr_max, got {} and {}",
                self.lr_min, self.lr_max
            )));
        }
        if !(0.0..=1.0).contains(&self.p_drop) {
            return Err(Error::config(format!("p_drop {} outside [0, 1]", self.p_drop)));
        }
        Ok(())
    }
}

/// Mean sigmoid cross-entropy of the last map in `logits` (`[d', 1, H, W]`)
/// against `target` (`[1, H, W]`). Earlier maps do not enter the loss.
pub fn loss_last_frame<F: Float>(g: &mut Graph<F>, logits: Var, target: &Tensor<F>) -> Result<Var> {
    let s = g.shape(logits).to_vec();
    if s.len() != 4 || s[0] == 0 || s[1..] != *target.shape() {
        return Err(Error::dim(format!(
            "loss expects [d, 1, H, W] logits matching target {:?}, got {s:?}",
            target.shape()
        )));
    }
    let last = g.narrow(logits, 0, s[0] - 1, 1)?;
    let last = g.reshape(last, target.shape())?;
    g.sigmoid_bce(last, target)
}

/// One optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct IterRecord {
    pub iteration: u64,
    pub epoch: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainOutcome {
    pub trace: Vec<IterRecord>,
    pub adam: AdamState<f32>,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

impl TrainOutcome {
    pub fn losses(&self) -> Vec<f64> {
        self.trace.iter().map(|r| r.loss).collect()
    }

    /// `iteration,epoch,lr,loss` lines.
    pub fn log_csv(&self) -> String {
        let mut out = String::from("iteration,epoch,lr,loss\n");
        for r in &self.trace {
            out.push_str(&format!("{},{},{:e},{:.9}\n", r.iteration, r.epoch, r.lr, r.loss));
        }
        out
    }
}

/// Every `(video, t_last)` with a full clip of history.
pub fn clip_positions(videos: &[Video], d_f: usize, stride: usize) -> Vec<(usize, usize)> {
    let first = (d_f - 1) * stride;
    videos
        .iter()
        .enumerate()
        .flat_map(|(vi, v)| (first..v.len()).map(move |t| (vi, t)))
        .collect()
}

fn check_extents(model: &Model<f32>, videos: &[Video]) -> Result<()> {
    if videos.is_empty() {
        return Err(Error::config("dataset is empty"));
    }
    let cfg = model.config();
    if let Some(v) = videos.iter().find(|v| v.height() != cfg.height || v.width() != cfg.width) {
        return Err(Error::dim(format!(
            "video {} is {}x{}, model expects {}x{}",
            v.id,
            v.height(),
            v.width(),
            cfg.height,
            cfg.width
        )));
    }
    Ok(())
}

/// Fits `model` on clips from `videos`. Calls `on_step` after every
/// iteration. Deterministic for a given `cfg.seed`.
pub fn train(
    model: &mut Model<f32>,
    videos: &[Video],
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&IterRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_extents(model, videos)?;
    let (d_f, d_t, stride) = (model.config().d_f, model.config().d_t, model.config().stride);
    let mut positions = clip_positions(videos, d_f, stride);
    if positions.is_empty() {
        return Err(Error::Range(format!(
            "no video has the {} frames needed for a clip of depth {d_f} at stride {stride}",
            (d_f - 1) * stride + 1
        )));
    }
    if let Some(dir) = &cfg.checkpoint_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }

    let sched = cfg.schedule();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = AdamState::new(model.params().iter().map(|t| t.shape()));
    let mut trace = Vec::new();
    let mut checkpoints = Vec::new();
    let mut iteration = 0u64;
    let cap = (cfg.max_iterations > 0).then_some(cfg.max_iterations as u64);

    'epochs: for epoch in 0..cfg.epochs {
        positions.shuffle(&mut rng);
        for batch in positions.chunks(cfg.batch_size) {
            if cap.is_some_and(|c| iteration >= c) {
                break;
            }
            let lr = sched.lr(iteration);
            let mut g = Graph::new();
            let vars = model.bind(&mut g, true);
            let mut total = None;
            for &(vi, t) in batch {
                let clip = sample_clip(&videos[vi], t, d_f, stride)?;
                let clip = ClipSample {
                    prior_maps: frame_dropout(&clip.prior_maps, cfg.p_drop, &mut rng)?,
                    ..clip
                };
                let depth = sample_variable_depth(d_f, d_t, cfg.variable_depth, &mut rng)?;
                let clip = clip.keep_last(depth)?;
                let logits = model.forward_with(&mut g, &vars, &clip.frames, &clip.prior_maps, Output::Last)?;
                let l = loss_last_frame(&mut g, logits, &clip.target_map)?;
                total = Some(match total {
                    None => l,
                    Some(acc) => g.add(acc, l)?,
                });
            }
            let total = total.expect("chunks are never empty");
            let loss = g.scale(total, 1.0 / batch.len() as f32);
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                let clips: Vec<String> = batch.iter().map(|&(vi, t)| format!("{}@{t}", videos[vi].id)).collect();
                return Err(Error::NonFinite(format!(
                    "loss {value} at iteration {iteration} (epoch {epoch}, lr {lr:e}, clips {})",
                    clips.join(" ")
                )));
            }
            g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = vars
                .iter()
                .zip(model.params())
                .map(|(&v, p)| g.grad(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
                .collect();
            adam.update(model.params_mut(), &grads, lr)?;
            let rec = IterRecord { iteration, epoch, lr, loss: value };
            on_step(&rec);
            trace.push(rec);
            iteration += 1;
        }
        if let Some(dir) = &cfg.checkpoint_dir {
            let path = dir.join(format!("epoch_{epoch:03}.tsal"));
            Checkpoint::from_model(model, Some(&adam)).save(&path)?;
            checkpoints.push(path);
        }
        if cap.is_some_and(|c| iteration >= c) {
            break 'epochs;
        }
    }
    Ok(TrainOutcome { trace, adam, checkpoints })
}

/// Last-frame predictions for every frame of `video` that has a full clip of
/// history, as `(frame index, [1, H, W] map)`.
///
/// In recursive mode the prior of a frame comes from the model's own
/// prediction for it when one exists, otherwise from ground truth, so each
/// chain of frames one stride apart starts from ground truth and then feeds
/// on itself.
pub fn predict_video(model: &Model<f32>, video: &Video, mode: EvalMode) -> Result<Vec<(usize, Tensor<f32>)>> {
    let cfg = model.config();
    let (d_f, stride) = (cfg.d_f, cfg.stride);
    let first = (d_f - 1) * stride;
    let mut preds: Vec<Option<Tensor<f32>>> = vec![None; video.len()];
    let mut out = Vec::with_capacity(video.len().saturating_sub(first));
    for t in first..video.len() {
        let clip = match mode {
            EvalMode::GtPrior => sample_clip(video, t, d_f, stride)?,
            EvalMode::Recursive => sample_clip_with(video, t, d_f, stride, |i| {
                preds[i].clone().unwrap_or_else(|| video.masks[i].clone())
            })?,
        };
        let map = model.predict_last(&clip.frames, &clip.prior_maps)?;
        if mode == EvalMode::Recursive {
            preds[t] = Some(map.clone());
        }
        out.push((t, map));
    }
    Ok(out)
}

/// Scores last-frame predictions over every clip position of `videos`,
/// grouped by each video's difficulty label.
pub fn evaluate_dataset(model: &Model<f32>, videos: &[Video], mode: EvalMode) -> Result<MetricReport> {
    check_extents(model, videos)?;
    let mut report = ReportBuilder::default();
    let mut any = false;
    for v in videos {
        for (t, map) in predict_video(model, v, mode)? {
            report.add_pair(&map, &v.masks[t], v.difficulty)?;
            any = true;
        }
    }
    if !any {
        return Err(Error::Range("no video is long enough to evaluate a single clip".into()));
    }
    Ok(report.finish())
}

/// Loads `path` into a fresh model of `model`'s configuration.
pub fn load_weights(model: &mut Model<f32>, path: &Path) -> Result<Option<AdamState<f32>>> {
    let ck = Checkpoint::load(path)?;
    ck.apply_to(model)?;
    Ok(ck.adam)
}
