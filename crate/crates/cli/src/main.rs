use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tubesal::checkpoint::Checkpoint;
use tubesal::config::{parse_value, unknown_key, KeyValue, KvMap};
use tubesal::datapipe::{
    decode_image, difficulty_of_set, encode_with_comment, generate_synthetic_set, load_dataset, load_video,
    write_dataset, SyntheticConfig, Video,
};
use tubesal::metrics::ReportBuilder;
use tubesal::model::{Model, ModelConfig};
use tubesal::trainer::{
    comparison_table, evaluate_dataset, parse_sweep_csv, predict_video, sweep, train, EvalMode, SweepSpec,
    TrainConfig,
};
use tubesal::Tensor;

mod staging;

use staging::Staging;

#[derive(Parser)]
#[command(name = "tubesal", version, about = "Video salient object detection with tubelet transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// Flat key=value config file with `model.`, `train.`, `data.` and `sweep.` keys.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override one config entry, e.g. `--set train.lr_max=1e-4`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Output directory.
    #[arg(long, short)]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic saliency-shift dataset (train and test splits).
    GenData {
        #[command(flatten)]
        common: Common,
        /// Overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long, default_value_t = 3)]
        train_videos: usize,
        #[arg(long, default_value_t = 1)]
        test_videos: usize,
    },
    /// Train a model; writes checkpoints, the loss log and the final weights.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
    },
    /// Score a trained model, or precomputed prediction maps, on a dataset.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        /// Directory written by `train`.
        #[arg(long, conflicts_with = "predictions", required_unless_present = "predictions")]
        model: Option<PathBuf>,
        /// Maps laid out as `<dir>/<set>/<video>/<frame>.pgm`.
        #[arg(long)]
        predictions: Option<PathBuf>,
    },
    /// Train and score one model per `(d_f, d_t)` pair.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
    },
    /// Predict saliency maps with recursive priors and write them as PGM.
    Infer {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        model: PathBuf,
    },
    /// Merge sweep CSVs into one comparison table.
    Report {
        #[command(flatten)]
        common: Common,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        /// Subset row to compare.
        #[arg(long, default_value = "All")]
        subset: String,
    },
}

/// Sweep-only settings.
struct SweepKeys {
    grid: Vec<(usize, usize)>,
    stride: usize,
}

impl Default for SweepKeys {
    fn default() -> Self {
        Self {
            grid: vec![(4, 2), (4, 4), (8, 2), (8, 4), (8, 8)],
            stride: 5,
        }
    }
}

impl KeyValue for SweepKeys {
    fn keys() -> &'static [&'static str] {
        &["grid", "stride"]
    }

    fn set(&mut self, key: &str, value: &str) -> tubesal::Result<()> {
        match key {
            "grid" => {
                self.grid = value
                    .split(',')
                    .map(|p| {
                        let (f, t) = p.trim().split_once(':').ok_or_else(|| {
                            tubesal::Error::config(format!("grid entry {p:?} is not d_f:d_t"))
                        })?;
                        Ok((parse_value(key, f.trim())?, parse_value(key, t.trim())?))
                    })
                    .collect::<tubesal::Result<_>>()?
            }
            "stride" => self.stride = parse_value(key, value)?,
            _ => return Err(unknown_key(key, Self::keys())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let grid: Vec<String> = self.grid.iter().map(|(f, t)| format!("{f}:{t}")).collect();
        vec![("grid", grid.join(",")), ("stride", self.stride.to_string())]
    }
}

/// Every configurable section of a run.
#[derive(Default)]
struct Settings {
    model: ModelConfig,
    train: TrainConfig,
    data: SyntheticConfig,
    sweep: SweepKeys,
}

const SECTIONS: [&str; 4] = ["model", "train", "data", "sweep"];

fn all_keys() -> Vec<String> {
    let per = [ModelConfig::keys(), TrainConfig::keys(), SyntheticConfig::keys(), SweepKeys::keys()];
    SECTIONS
        .iter()
        .zip(per)
        .flat_map(|(s, keys)| keys.iter().map(move |k| format!("{s}.{k}")))
        .collect()
}

impl Settings {
    fn load(common: &Common) -> Result<Self> {
        let mut map = match &common.config {
            Some(p) => KvMap::load(p)?,
            None => KvMap::default(),
        };
        for o in &common.overrides {
            let (k, v) = o
                .split_once('=')
                .with_context(|| format!("override {o:?} is not key=value"))?;
            map.insert(k.trim(), v.trim());
        }
        Self::from_map(&map)
    }

    fn from_map(map: &KvMap) -> Result<Self> {
        let valid = all_keys();
        for (k, _) in map.iter() {
            if !valid.iter().any(|v| v == k) {
                let refs: Vec<&str> = valid.iter().map(String::as_str).collect();
                return Err(unknown_key(k, &refs).into());
            }
        }
        let mut s = Settings::default();
        s.model.apply(&map.section("model"))?;
        s.train.apply(&map.section("train"))?;
        s.data.apply(&map.section("data"))?;
        s.sweep.apply(&map.section("sweep"))?;
        Ok(s)
    }
}

fn load_videos(root: &Path, cfg: &ModelConfig) -> Result<Vec<Video>> {
    let videos = load_dataset(root).with_context(|| format!("loading dataset {}", root.display()))?;
    Ok(videos
        .into_iter()
        .map(|v| {
            if v.height() == cfg.height && v.width() == cfg.width {
                v
            } else {
                v.resized(cfg.height, cfg.width)
            }
        })
        .collect())
}

/// Reads `model.cfg` and `model.tsal` from a directory written by `train`.
fn load_model(dir: &Path) -> Result<Model<f32>> {
    let map = KvMap::load(&dir.join("model.cfg"))?;
    let mut cfg = ModelConfig::default();
    cfg.apply(&map.section("model"))?;
    let mut model = Model::new(cfg, 0)?;
    Checkpoint::load(&dir.join("model.tsal"))?.apply_to(&mut model)?;
    Ok(model)
}

fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn gen_data(s: &Settings, out: &Path, train_videos: usize, test_videos: usize) -> Result<()> {
    let split = |seed: u64, n: usize| -> Result<Vec<Video>> {
        let cfg = SyntheticConfig { seed, ..s.data.clone() };
        Ok(generate_synthetic_set(&cfg, n)?.into_iter().map(|v| v.video).collect())
    };
    // test videos draw from seeds past the training ones
    let train = split(s.data.seed, train_videos)?;
    let test = split(s.data.seed.wrapping_add(train_videos as u64), test_videos)?;
    write_dataset(&out.join("train"), "synthetic", &train)?;
    if test_videos > 0 {
        write_dataset(&out.join("test"), "synthetic", &test)?;
    }
    write(&out.join("data.cfg"), s.data.to_kv("data").to_text())?;
    println!("wrote {train_videos} training and {test_videos} test videos to {}", out.display());
    Ok(())
}

fn run_train(s: &Settings, data: &Path, out: &Path) -> Result<()> {
    let videos = load_videos(data, &s.model)?;
    let mut model = Model::new(s.model.clone(), s.train.seed)?;
    let cfg = TrainConfig {
        checkpoint_dir: Some(out.join("checkpoints")),
        ..s.train.clone()
    };
    let outcome = train(&mut model, &videos, &cfg, |r| {
        if r.iteration % 50 == 0 {
            eprintln!("iter {:>6}  epoch {:>3}  lr {:.3e}  loss {:.5}", r.iteration, r.epoch, r.lr, r.loss);
        }
    })?;
    let mut kv = s.model.to_kv("model");
    for (k, v) in s.train.to_kv("train").iter() {
        kv.insert(k, v);
    }
    write(&out.join("model.cfg"), kv.to_text())?;
    Checkpoint::from_model(&model, Some(&outcome.adam)).save(&out.join("model.tsal"))?;
    write(&out.join("train_log.csv"), outcome.log_csv())?;
    if let Some(last) = outcome.trace.last() {
        println!("trained {} iterations, final loss {:.5}", last.iteration + 1, last.loss);
    }
    Ok(())
}

/// Pairs each ground-truth frame with `<pred>/<set>/<video>/<stem>.pgm` where present.
fn eval_predictions(data: &Path, pred: &Path) -> Result<tubesal::metrics::MetricReport> {
    let mut report = ReportBuilder::default();
    let mut frames = 0usize;
    for set in subdirs(data)? {
        let set_name = set.file_name().unwrap_or_default().to_owned();
        let difficulty = difficulty_of_set(&set_name.to_string_lossy());
        for vid in subdirs(&set)? {
            let mut gts: Vec<PathBuf> = fs::read_dir(vid.join("gt"))
                .with_context(|| format!("reading {}", vid.join("gt").display()))?
                .filter_map(|e| e.ok().map(|e| e.path()))
                .collect();
            gts.sort();
            for gt_path in gts {
                let p = pred
                    .join(&set_name)
                    .join(vid.file_name().unwrap_or_default())
                    .join(gt_path.file_name().unwrap_or_default());
                if !p.exists() {
                    continue;
                }
                let gt = decode_image(&fs::read(&gt_path)?)?;
                let pm = decode_image(&fs::read(&p)?)?;
                report
                    .add_pair(&pm, &gt, difficulty)
                    .with_context(|| format!("scoring {}", p.display()))?;
                frames += 1;
            }
        }
    }
    if frames == 0 {
        bail!("no prediction under {} matches a ground-truth frame in {}", pred.display(), data.display());
    }
    Ok(report.finish())
}

fn run_eval(s: &Settings, data: &Path, model: Option<&Path>, predictions: Option<&Path>, out: &Path) -> Result<()> {
    let report = match (model, predictions) {
        (_, Some(pred)) => eval_predictions(data, pred)?,
        (Some(dir), None) => {
            let model = load_model(dir)?;
            let videos = load_videos(data, model.config())?;
            evaluate_dataset(&model, &videos, s.train.eval_mode)?
        }
        (None, None) => bail!("eval needs --model or --predictions"),
    };
    write(&out.join("report.csv"), report.to_csv())?;
    let table = report.to_table();
    write(&out.join("report.txt"), &table)?;
    print!("{table}");
    Ok(())
}

fn run_sweep(s: &Settings, data: &Path, eval_data: &Path, out: &Path) -> Result<()> {
    let spec = SweepSpec {
        grid: s.sweep.grid.clone(),
        stride: s.sweep.stride,
        model: s.model.clone(),
        train: s.train.clone(),
    };
    let train_set = load_videos(data, &s.model)?;
    let eval_set = load_videos(eval_data, &s.model)?;
    let res = sweep(&spec, &train_set, &eval_set)?;
    for c in &res.cells {
        if let Err(e) = &c.report {
            eprintln!("cell d_f={} d_t={} failed: {e}", c.d_f, c.d_t);
        }
    }
    write(&out.join("sweep.csv"), res.to_csv())?;
    write(&out.join("table.txt"), res.table())?;
    for (name, svg) in res.charts() {
        write(&out.join("charts").join(name), svg)?;
    }
    let obs = res.peak_observations();
    write(&out.join("observations.txt"), &obs)?;
    print!("{}{obs}", res.table());
    Ok(())
}

fn to_pgm(map: &Tensor<f32>) -> Result<Vec<u8>> {
    Ok(encode_with_comment(map, Some("saliency p stored as round(255*p)"))?)
}

fn subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut v: Vec<PathBuf> = fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    v.sort();
    Ok(v)
}

fn run_infer(data: &Path, model_dir: &Path, out: &Path) -> Result<()> {
    let model = load_model(model_dir)?;
    let (h, w) = (model.config().height, model.config().width);
    let mut count = 0;
    for set in subdirs(data)? {
        let set_name = set.file_name().unwrap_or_default().to_owned();
        let difficulty = difficulty_of_set(&set_name.to_string_lossy());
        for dir in subdirs(&set)? {
            let v = load_video(&dir, difficulty)?;
            let v = if (v.height(), v.width()) == (h, w) { v } else { v.resized(h, w) };
            for (t, map) in predict_video(&model, &v, EvalMode::Recursive)? {
                write(&out.join(&set_name).join(&v.id).join(format!("{t:05}.pgm")), to_pgm(&map)?)?;
                count += 1;
            }
        }
    }
    println!("wrote {count} maps to {}", out.display());
    Ok(())
}

fn run_report(inputs: &[PathBuf], subset: &str, out: &Path) -> Result<()> {
    let mut tables = Vec::new();
    for p in inputs {
        let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
        let rows = parse_sweep_csv(&text).with_context(|| format!("parsing {}", p.display()))?;
        let name = p
            .parent()
            .and_then(|d| d.file_name())
            .or_else(|| p.file_stem())
            .map_or_else(|| p.display().to_string(), |s| s.to_string_lossy().into_owned());
        tables.push((name, rows));
    }
    let cols: Vec<(Option<&str>, &tubesal::trainer::SweepRow)> = tables
        .iter()
        .flat_map(|(name, rows)| rows.iter().filter(|r| r.subset == subset).map(move |r| (Some(name.as_str()), r)))
        .collect();
    if cols.is_empty() {
        bail!("no {subset:?} rows in the given sweep tables");
    }
    let table = comparison_table(&cols);
    write(&out.join("comparison.txt"), &table)?;
    let mut merged = String::from("run,");
    merged.push_str(tubesal::trainer::SWEEP_HEADER);
    merged.push('\n');
    for (name, rows) in &tables {
        for line in tubesal::trainer::rows_to_csv(rows).lines().skip(1) {
            merged.push_str(&format!("{name},{line}\n"));
        }
    }
    write(&out.join("comparison.csv"), merged)?;
    print!("{table}");
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::GenData { common, .. }
        | Command::Train { common, .. }
        | Command::Eval { common, .. }
        | Command::Sweep { common, .. }
        | Command::Infer { common, .. }
        | Command::Report { common, .. } => common.clone(),
    };
    let mut settings = Settings::load(&common)?;
    let stage = Staging::new(&common.out)?;
    let out = stage.path().to_path_buf();
    let result = match &cli.command {
        Command::GenData { seed, train_videos, test_videos, .. } => {
            if let Some(seed) = seed {
                settings.data.seed = *seed;
            }
            gen_data(&settings, &out, *train_videos, *test_videos)
        }
        Command::Train { data, .. } => run_train(&settings, data, &out),
        Command::Eval { data, model, predictions, .. } => {
            run_eval(&settings, data, model.as_deref(), predictions.as_deref(), &out)
        }
        Command::Sweep { data, eval_data, .. } => run_sweep(&settings, data, eval_data, &out),
        Command::Infer { data, model, .. } => run_infer(data, model, &out),
        Command::Report { inputs, subset, .. } => run_report(inputs, subset, &out),
    };
    match result {
        Ok(()) => stage.commit(),
        Err(e) => {
            stage.discard();
            Err(e)
        }
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
