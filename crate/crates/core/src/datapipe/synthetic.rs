//! Moving-shape videos where the salient object changes identity at fixed
//! frames.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Difficulty, Video};
use crate::config::{join_list, parse_list, parse_value, KeyValue};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    Disk,
    Square,
}

impl Shape {
    /// Whether the pixel centre `(px, py)` lies inside the shape of radius
    /// (or half side) `r` centred at `(cx, cy)`.
    pub fn contains(self, cx: f64, cy: f64, r: f64, px: f64, py: f64) -> bool {
        let (dx, dy) = (px - cx, py - cy);
        match self {
            Shape::Disk => dx * dx + dy * dy <= r * r,
            Shape::Square => dx.abs() <= r && dy.abs() <= r,
        }
    }
}

impl fmt::Display for Shape {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Shape::Disk => "disk",
            Shape::Square => "square",
        })
    }
}

impl FromStr for Shape {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "disk" => Ok(Shape::Disk),
            "square" => Ok(Shape::Square),
            _ => Err(format!("unknown shape {s:?} (disk|square)")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
struct Velocity(f64, f64);

impl fmt::Display for Velocity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.0, self.1)
    }
}

impl FromStr for Velocity {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let (x, y) = s.split_once(':').ok_or_else(|| format!("velocity {s:?} is not vx:vy"))?;
        let p = |v: &str| v.trim().parse::<f64>().map_err(|e| format!("velocity {s:?}: {e}"));
        Ok(Velocity(p(x)?, p(y)?))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticConfig {
    pub height: usize,
    pub width: usize,
    pub frames: usize,
    pub num_objects: usize,
    /// Cycled over objects.
    pub shapes: Vec<Shape>,
    /// Disk radius or square half side, in pixels.
    pub object_size: f64,
    /// Pixels per frame, cycled over objects. Empty draws random velocities.
    pub velocities: Vec<(f64, f64)>,
    pub shift_times: Vec<usize>,
    pub camera_drift: (f64, f64),
    pub noise_level: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            frames: 100,
            num_objects: 2,
            shapes: vec![Shape::Disk, Shape::Square],
            object_size: 9.0,
            velocities: Vec::new(),
            shift_times: vec![50],
            camera_drift: (0.0, 0.0),
            noise_level: 0.1,
            seed: 0,
        }
    }
}

impl KeyValue for SyntheticConfig {
    fn keys() -> &'static [&'static str] {
        &[
            "height",
            "width",
            "frames",
            "num_objects",
            "shapes",
            "object_size",
            "velocities",
            "shift_times",
            "camera_drift",
            "noise_level",
            "seed",
        ]
    }

    fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "height" => self.height = parse_value(key, value)?,
            "width" => self.width = parse_value(key, value)?,
            "frames" => self.frames = parse_value(key, value)?,
            "num_objects" => self.num_objects = parse_value(key, value)?,
            "shapes" => self.shapes = parse_list(key, value)?,
            "object_size" => self.object_size = parse_value(key, value)?,
            "velocities" => {
                self.velocities = parse_list::<Velocity>(key, value)?
                    .into_iter()
                    .map(|v| (v.0, v.1))
                    .collect()
            }
            "shift_times" => self.shift_times = parse_list(key, value)?,
            "camera_drift" => {
                let v: Velocity = parse_value(key, value)?;
                self.camera_drift = (v.0, v.1);
            }
            "noise_level" => self.noise_level = parse_value(key, value)?,
            "seed" => self.seed = parse_value(key, value)?,
            _ => return Err(crate::config::unknown_key(key, Self::keys())),
        }
        Ok(())
    }

    fn entries(&self) -> Vec<(&'static str, String)> {
        let vel: Vec<Velocity> = self.velocities.iter().map(|&(x, y)| Velocity(x, y)).collect();
        vec![
            ("height", self.height.to_string()),
            ("width", self.width.to_string()),
            ("frames", self.frames.to_string()),
            ("num_objects", self.num_objects.to_string()),
            ("shapes", join_list(&self.shapes)),
            ("object_size", self.object_size.to_string()),
            ("velocities", join_list(&vel)),
            ("shift_times", join_list(&self.shift_times)),
            ("camera_drift", Velocity(self.camera_drift.0, self.camera_drift.1).to_string()),
            ("noise_level", self.noise_level.to_string()),
            ("seed", self.seed.to_string()),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 || self.frames == 0 {
            return Err(Error::config("height, width and frames must be positive"));
        }
        if !(1..=3).contains(&self.num_objects) {
            return Err(Error::config(format!("num_objects {} outside 1..=3", self.num_objects)));
        }
        if self.shapes.is_empty() {
            return Err(Error::config("at least one shape is required"));
        }
        let limit = self.height.min(self.width) as f64 / 2.0;
        if !(self.object_size > 0.0 && self.object_size < limit) {
            return Err(Error::config(format!(
                "object_size {} needs 0 < size < min(H, W)/2 = {limit}",
                self.object_size
            )));
        }
        if self.shift_times.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("shift_times must be strictly increasing"));
        }
        if !self.shift_times.is_empty() && self.num_objects < 2 {
            return Err(Error::config("a saliency shift needs at least two objects"));
        }
        if !(self.noise_level >= 0.0 && self.noise_level <= 0.5) {
            return Err(Error::config(format!("noise_level {} outside [0, 0.5]", self.noise_level)));
        }
        let finite = |v: (f64, f64)| v.0.is_finite() && v.1.is_finite();
        if !self.velocities.iter().copied().all(finite) || !finite(self.camera_drift) {
            return Err(Error::config("velocities and camera_drift must be finite"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticVideo {
    pub video: Video,
    /// Salient object per frame.
    pub salient_ids: Vec<usize>,
    /// Object centres per frame, in pixels.
    pub centres: Vec<Vec<(f64, f64)>>,
    pub shapes: Vec<Shape>,
}

const PALETTE: [[f32; 3]; 3] = [[0.9, 0.15, 0.1], [0.1, 0.8, 0.2], [0.15, 0.3, 0.95]];

/// Reflects `x` into `[lo, hi]`, flipping `v` on each bounce.
fn reflect(mut x: f64, mut v: f64, lo: f64, hi: f64) -> (f64, f64) {
    for _ in 0..64 {
        if x < lo {
            x = 2.0 * lo - x;
            v = -v;
        } else if x > hi {
            x = 2.0 * hi - x;
            v = -v;
        } else {
            break;
        }
    }
    (x.clamp(lo, hi), v)
}

/// Generates one video. Identical configs give bitwise-identical output.
pub fn generate_synthetic(cfg: &SyntheticConfig, id: &str) -> Result<SyntheticVideo> {
    cfg.validate()?;
    let (h, w) = (cfg.height, cfg.width);
    let r = cfg.object_size;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let texture: Vec<f32> = (0..3 * h * w)
        .map(|_| (0.5 + cfg.noise_level * rng.random_range(-1.0..1.0)) as f32)
        .collect();

    let n = cfg.num_objects;
    let shapes: Vec<Shape> = (0..n).map(|i| cfg.shapes[i % cfg.shapes.len()]).collect();
    let mut pos: Vec<(f64, f64)> = (0..n)
        .map(|_| (rng.random_range(r..w as f64 - r), rng.random_range(r..h as f64 - r)))
        .collect();
    let mut vel: Vec<(f64, f64)> = (0..n)
        .map(|i| match cfg.velocities.get(i % cfg.velocities.len().max(1)) {
            Some(&v) => v,
            None => (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5)),
        })
        .collect();

    let mut salient = 0usize;
    let mut shifts = cfg.shift_times.iter().peekable();
    let mut video = Video {
        id: id.to_string(),
        difficulty: Difficulty::Synthetic,
        frames: Vec::with_capacity(cfg.frames),
        masks: Vec::with_capacity(cfg.frames),
    };
    let mut salient_ids = Vec::with_capacity(cfg.frames);
    let mut centres = Vec::with_capacity(cfg.frames);

    for t in 0..cfg.frames {
        if t > 0 {
            for (p, v) in pos.iter_mut().zip(vel.iter_mut()) {
                let (x, vx) = reflect(p.0 + v.0 + cfg.camera_drift.0, v.0, r, w as f64 - r);
                let (y, vy) = reflect(p.1 + v.1 + cfg.camera_drift.1, v.1, r, h as f64 - r);
                *p = (x, y);
                *v = (vx, vy);
            }
        }
        while shifts.peek().is_some_and(|&&s| s <= t) {
            if *shifts.next().unwrap() == t {
                salient = (salient + 1) % n;
            }
        }

        // background scrolls with the camera
        let ox = (cfg.camera_drift.0 * t as f64).round() as i64;
        let oy = (cfg.camera_drift.1 * t as f64).round() as i64;
        let mut frame = vec![0.0f32; 3 * h * w];
        for y in 0..h {
            let sy = (y as i64 + oy).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 + ox).rem_euclid(w as i64) as usize;
                for c in 0..3 {
                    frame[c * h * w + y * w + x] = texture[c * h * w + sy * w + sx];
                }
            }
        }
        let mut mask = vec![0.0f32; h * w];
        // salient object drawn last so it is never occluded
        let order = (0..n).filter(|&i| i != salient).chain(std::iter::once(salient));
        for i in order {
            let (cx, cy) = pos[i];
            let colour = PALETTE[i % PALETTE.len()];
            for y in 0..h {
                for x in 0..w {
                    if shapes[i].contains(cx, cy, r, x as f64 + 0.5, y as f64 + 0.5) {
                        for (c, &v) in colour.iter().enumerate() {
                            frame[c * h * w + y * w + x] = v;
                        }
                        if i == salient {
                            mask[y * w + x] = 1.0;
                        }
                    }
                }
            }
        }
        video.frames.push(Tensor::new(vec![3, h, w], frame)?);
        video.masks.push(Tensor::new(vec![1, h, w], mask)?);
        salient_ids.push(salient);
        centres.push(pos.clone());
    }

    Ok(SyntheticVideo {
        video,
        salient_ids,
        centres,
        shapes,
    })
}

/// `count` videos named `syn_000`, `syn_001`, ... with seeds `seed + i`.
pub fn generate_synthetic_set(cfg: &SyntheticConfig, count: usize) -> Result<Vec<SyntheticVideo>> {
    (0..count)
        .map(|i| {
            let c = SyntheticConfig {
                seed: cfg.seed.wrapping_add(i as u64),
                ..cfg.clone()
            };
            generate_synthetic(&c, &format!("syn_{i:03}"))
        })
        .collect()
}
