//! On-disk layout of datasets, checkpoints and run reports.
//!
//! A dataset directory holds `manifest.json` and, per scene,
//! `{split}/{index:04}.ogrd`, `.img.tnsr` and `.pts.tnsr`.

use std::fs;
use std::path::{Path, PathBuf};

use diffkit::io::{load_tensor, save_tensor};
use diffkit::Tensor;
use occ_core::scenegen::{cloud_tensor, PointCloud, SemGrid};
use occ_core::trainer::{Dataset, RunReport, Sample};
use occ_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Serialize, Deserialize)]
pub struct Manifest {
    pub config_hash: String,
    pub train: Vec<u64>,
    pub val: Vec<u64>,
}

fn scene_path(dir: &Path, split: &str, i: usize, ext: &str) -> PathBuf {
    dir.join(split).join(format!("{i:04}.{ext}"))
}

fn io_at(path: &Path, e: std::io::Error) -> Error {
    Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| io_at(path, e))
}

pub fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Input(format!("{}: {e}", path.display())))
}

pub fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| io_at(path, e))
}

pub fn save_dataset(dir: &Path, data: &Dataset, config_hash: &str) -> Result<()> {
    for (split, samples) in [("train", &data.train), ("val", &data.val)] {
        create_dir(&dir.join(split))?;
        for (i, s) in samples.iter().enumerate() {
            s.grid.save(scene_path(dir, split, i, "ogrd"))?;
            save_tensor(scene_path(dir, split, i, "img.tnsr"), &s.images)?;
            save_tensor(scene_path(dir, split, i, "pts.tnsr"), &cloud_tensor(&s.points))?;
        }
    }
    let manifest = Manifest {
        config_hash: config_hash.to_string(),
        train: data.train.iter().map(|s| s.seed).collect(),
        val: data.val.iter().map(|s| s.seed).collect(),
    };
    write_text(&dir.join("manifest.json"), &serde_json::to_string_pretty(&manifest)?)
}

fn points(t: &Tensor) -> Result<PointCloud> {
    if t.shape().len() != 2 || t.shape()[1] != 4 {
        return Err(Error::Input(format!("point tensor must be [N, 4], got {:?}", t.shape())));
    }
    Ok(t.data().chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest: Manifest = serde_json::from_str(&read_text(&dir.join("manifest.json"))?)?;
    let load = |split: &str, seeds: &[u64]| -> Result<Vec<Sample>> {
        seeds
            .iter()
            .enumerate()
            .map(|(i, &seed)| {
                Ok(Sample {
                    seed,
                    images: load_tensor(scene_path(dir, split, i, "img.tnsr"))?,
                    points: points(&load_tensor(scene_path(dir, split, i, "pts.tnsr"))?)?,
                    grid: SemGrid::load(scene_path(dir, split, i, "ogrd"))?,
                })
            })
            .collect()
    };
    Ok(Dataset { train: load("train", &manifest.train)?, val: load("val", &manifest.val)? })
}

pub fn save_report(path: &Path, r: &RunReport) -> Result<()> {
    write_text(path, &serde_json::to_string_pretty(r)?)
}

/// Every `*.json` file under `dir` that parses as a run report, in path
/// order; other JSON files are skipped.
pub fn load_reports(dir: &Path) -> Result<Vec<RunReport>> {
    let mut paths = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        let entries = fs::read_dir(&d).map_err(|e| Error::Input(format!("{}: {e}", d.display())))?;
        for e in entries {
            let p = e.map_err(|e| io_at(&d, e))?.path();
            if p.is_dir() {
                stack.push(p);
            } else if p.extension().is_some_and(|x| x == "json") {
                paths.push(p);
            }
        }
    }
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        if let Ok(r) = serde_json::from_str::<RunReport>(&read_text(&p)?) {
            out.push(r);
        }
    }
    if out.is_empty() {
        return Err(Error::Input(format!("no run reports under {}", dir.display())));
    }
    Ok(out)
}
