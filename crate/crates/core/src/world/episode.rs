//! On-disk episodes: `frames.bin` (raw RGB8, frame-major) and `meta.jsonl`.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::motion::DiscreteAction;
use super::pose::{CameraPose, Intrinsics};
use super::render::Frame;
use super::trajectory::{Episode, TrajectoryKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMeta {
    pub index: usize,
    /// `[R | T]` row-major.
    pub pose: [f64; 12],
    pub intrinsics: Intrinsics,
    pub action: u8,
    pub kind: TrajectoryKind,
    pub world_seed: u64,
    pub world_size: usize,
}

pub fn write_episode(dir: &Path, ep: &Episode) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut bin = Vec::with_capacity(ep.frames.iter().map(|f| f.rgb.len()).sum());
    for f in &ep.frames {
        bin.extend_from_slice(&f.rgb);
    }
    fs::write(dir.join("frames.bin"), bin)?;
    let mut meta = fs::File::create(dir.join("meta.jsonl"))?;
    for (t, (pose, action)) in ep.poses.iter().zip(&ep.actions).enumerate() {
        let line = FrameMeta {
            index: t,
            pose: pose.to_rows(),
            intrinsics: pose.intrinsics,
            action: action.bits(),
            kind: ep.kind,
            world_seed: ep.world_seed,
            world_size: ep.world_size,
        };
        writeln!(meta, "{}", serde_json::to_string(&line)?)?;
    }
    Ok(())
}

pub fn read_episode(dir: &Path) -> Result<Episode> {
    let meta: Vec<FrameMeta> = BufReader::new(fs::File::open(dir.join("meta.jsonl"))?)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l?)?))
        .collect::<Result<_>>()?;
    let first = meta.first().ok_or_else(|| Error::Trajectory(0, format!("{} has no frames", dir.display())))?;
    let bin = fs::read(dir.join("frames.bin"))?;
    let mut frames = Vec::with_capacity(meta.len());
    let mut offset = 0;
    for m in &meta {
        let n = (m.intrinsics.width * m.intrinsics.height * 3) as usize;
        let rgb = bin
            .get(offset..offset + n)
            .ok_or_else(|| Error::Trajectory(meta.len(), "frames.bin shorter than meta".into()))?
            .to_vec();
        offset += n;
        frames.push(Frame { width: m.intrinsics.width, height: m.intrinsics.height, rgb });
    }
    let ep = Episode {
        world_seed: first.world_seed,
        world_size: first.world_size,
        kind: first.kind,
        frames,
        poses: meta.iter().map(|m| CameraPose::from_rows(&m.pose, m.intrinsics)).collect(),
        actions: meta.iter().map(|m| DiscreteAction(m.action)).collect(),
    };
    ep.check_invariants()?;
    Ok(ep)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetEntry {
    pub dir: String,
    pub split: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub episodes: Vec<DatasetEntry>,
    #[serde(default)]
    pub meta: serde_json::Map<String, serde_json::Value>,
}

pub const DATASET_MANIFEST: &str = "dataset.json";

/// Write episodes under `root/ep_NNNNN` with their split tags and a manifest.
pub fn write_dataset(root: &Path, episodes: &[(Episode, String)], meta: serde_json::Map<String, serde_json::Value>) -> Result<DatasetManifest> {
    fs::create_dir_all(root)?;
    let mut entries = Vec::with_capacity(episodes.len());
    for (i, (ep, split)) in episodes.iter().enumerate() {
        let name = format!("ep_{i:05}");
        write_episode(&root.join(&name), ep)?;
        entries.push(DatasetEntry { dir: name, split: split.clone() });
    }
    let manifest = DatasetManifest { episodes: entries, meta };
    fs::write(root.join(DATASET_MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Episodes of `split` (all splits when `None`).
pub fn read_dataset(root: &Path, split: Option<&str>) -> Result<Vec<Episode>> {
    let manifest: DatasetManifest = serde_json::from_str(&fs::read_to_string(root.join(DATASET_MANIFEST))?)?;
    manifest
        .episodes
        .iter()
        .filter(|e| split.is_none_or(|s| s == e.split))
        .map(|e| read_episode(&PathBuf::from(root).join(&e.dir)))
        .collect()
}
