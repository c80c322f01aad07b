//! On-disk layout: `<root>/<set>/<video>/frames/NNNNN.ppm` and
//! `<root>/<set>/<video>/gt/NNNNN.pgm`.
//!
//! The difficulty label of a video comes from its set directory name
//! (`Easy...`, `Normal...`, `Difficult...`); any other name is `Synthetic`.

use std::fs;
use std::path::{Path, PathBuf};

use super::netpbm::{decode_image, encode_image};
use super::{Difficulty, Video};
use crate::error::{Error, Result};

pub fn difficulty_of_set(name: &str) -> Difficulty {
    let lower = name.to_ascii_lowercase();
    [Difficulty::Easy, Difficulty::Normal, Difficulty::Difficult]
        .into_iter()
        .find(|d| lower.starts_with(&d.to_string().to_ascii_lowercase()))
        .unwrap_or(Difficulty::Synthetic)
}

fn sorted_entries(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        out.push(entry.map_err(|e| Error::io(dir, e))?.path());
    }
    out.sort();
    Ok(out)
}

fn read_image(path: &Path) -> Result<crate::tensor::Tensor<f32>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_image(&bytes).map_err(|e| match e {
        Error::Parse { offset, message } => Error::Parse {
            offset,
            message: format!("{}: {message}", path.display()),
        },
        other => other,
    })
}

fn write_bytes(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Writes one video below `dir` (which becomes `<video>`).
pub fn write_video(dir: &Path, video: &Video) -> Result<()> {
    let frames = dir.join("frames");
    let gt = dir.join("gt");
    for d in [&frames, &gt] {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    for (i, (f, m)) in video.frames.iter().zip(&video.masks).enumerate() {
        write_bytes(&frames.join(format!("{i:05}.ppm")), &encode_image(f)?)?;
        write_bytes(&gt.join(format!("{i:05}.pgm")), &encode_image(m)?)?;
    }
    Ok(())
}

/// Reads `dir/frames/*.ppm` and `dir/gt/*.pgm`; the two lists must match.
pub fn load_video(dir: &Path, difficulty: Difficulty) -> Result<Video> {
    let id = dir
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    let list = |sub: &str, ext: &str| -> Result<Vec<PathBuf>> {
        Ok(sorted_entries(&dir.join(sub))?
            .into_iter()
            .filter(|p| p.extension().is_some_and(|e| e == ext))
            .collect())
    };
    let frame_paths = list("frames", "ppm")?;
    let gt_paths = list("gt", "pgm")?;
    let stems = |v: &[PathBuf]| -> Vec<String> {
        v.iter()
            .map(|p| p.file_stem().unwrap_or_default().to_string_lossy().into_owned())
            .collect()
    };
    if stems(&frame_paths) != stems(&gt_paths) {
        return Err(Error::dim(format!(
            "{}: {} frames but {} ground-truth maps with different indices",
            dir.display(),
            frame_paths.len(),
            gt_paths.len()
        )));
    }
    if frame_paths.is_empty() {
        return Err(Error::dim(format!("{}: no frames", dir.display())));
    }
    let mut video = Video {
        id,
        difficulty,
        frames: Vec::with_capacity(frame_paths.len()),
        masks: Vec::with_capacity(gt_paths.len()),
    };
    for (fp, gp) in frame_paths.iter().zip(&gt_paths) {
        let f = read_image(fp)?;
        let m = read_image(gp)?;
        if f.shape()[0] != 3 || m.shape()[0] != 1 || f.shape()[1..] != m.shape()[1..] {
            return Err(Error::dim(format!(
                "{}: frame {:?} and map {:?} disagree",
                fp.display(),
                f.shape(),
                m.shape()
            )));
        }
        if let Some(first) = video.frames.first() {
            if first.shape() != f.shape() {
                return Err(Error::dim(format!("{}: frame size changes mid-video", fp.display())));
            }
        }
        video.frames.push(f);
        video.masks.push(m);
    }
    Ok(video)
}

/// Writes every video under `<root>/<set>/<video.id>`.
pub fn write_dataset(root: &Path, set: &str, videos: &[Video]) -> Result<()> {
    for v in videos {
        write_video(&root.join(set).join(&v.id), v)?;
    }
    Ok(())
}

/// Loads every `<set>/<video>` under `root`, sorted by path.
pub fn load_dataset(root: &Path) -> Result<Vec<Video>> {
    let mut videos = Vec::new();
    for set in sorted_entries(root)?.into_iter().filter(|p| p.is_dir()) {
        let name = set.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let difficulty = difficulty_of_set(&name);
        for dir in sorted_entries(&set)?.into_iter().filter(|p| p.is_dir()) {
            videos.push(load_video(&dir, difficulty)?);
        }
    }
    if videos.is_empty() {
        return Err(Error::config(format!("no videos found under {}", root.display())));
    }
    Ok(videos)
}
