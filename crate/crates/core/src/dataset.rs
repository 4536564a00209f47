//! On-disk datasets: raw frame containers, JSON label sidecars, a manifest,
//! and score tables.
//!
//! ```text
//! <dataset>/manifest.json
//! <dataset>/<trajectory id>/frames.bin
//! <dataset>/<trajectory id>/labels.json      (optional)
//! ```
//!
//! `frames.bin` is `"S3NT"`, then u32 little-endian version, T, H, W, C, then
//! `T*H*W*C` bytes, frame-major and row-major within a frame.

use std::fs::{self, File};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::game::{GameConfig, Trajectory};
use crate::inject::{AnomalyType, InjectionConfig, TransitionLabel};

pub const FRAMES_MAGIC: &[u8; 4] = b"S3NT";
pub const FRAMES_VERSION: u32 = 1;
pub const FRAMES_HEADER_LEN: usize = 24;
pub const MANIFEST_VERSION: u32 = 1;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const FRAMES_FILE: &str = "frames.bin";
pub const LABELS_FILE: &str = "labels.json";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FramesHeader {
    pub frames: u32,
    pub height: u32,
    pub width: u32,
    pub channels: u32,
}

impl FramesHeader {
    pub fn payload_len(&self) -> u64 {
        self.frames as u64 * self.height as u64 * self.width as u64 * self.channels as u64
    }

    pub fn to_bytes(&self) -> [u8; FRAMES_HEADER_LEN] {
        let mut out = [0u8; FRAMES_HEADER_LEN];
        out[..4].copy_from_slice(FRAMES_MAGIC);
        for (i, v) in [FRAMES_VERSION, self.frames, self.height, self.width, self.channels]
            .into_iter()
            .enumerate()
        {
            out[4 + 4 * i..8 + 4 * i].copy_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn parse(bytes: &[u8], file: &Path) -> Result<Self> {
        let fail = |offset: u64, reason: String| Error::DatasetFormat {
            file: file.to_path_buf(),
            offset,
            reason,
        };
        if bytes.len() < FRAMES_HEADER_LEN {
            return Err(fail(
                bytes.len() as u64,
                format!("truncated header: {} of {FRAMES_HEADER_LEN} bytes", bytes.len()),
            ));
        }
        if &bytes[..4] != FRAMES_MAGIC {
            return Err(fail(0, "bad magic".into()));
        }
        let word = |i: usize| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap());
        if word(0) != FRAMES_VERSION {
            return Err(fail(4, format!("unsupported version {}", word(0))));
        }
        Ok(Self {
            frames: word(1),
            height: word(2),
            width: word(3),
            channels: word(4),
        })
    }
}

/// Decode a whole `frames.bin` image.
pub fn decode_frames(bytes: &[u8], file: &Path) -> Result<(FramesHeader, Vec<Vec<u8>>)> {
    let header = FramesHeader::parse(bytes, file)?;
    let fail = |offset: u64, reason: String| Error::DatasetFormat {
        file: file.to_path_buf(),
        offset,
        reason,
    };
    let payload = (bytes.len() - FRAMES_HEADER_LEN) as u64;
    if payload < header.payload_len() {
        return Err(fail(
            bytes.len() as u64,
            format!("truncated payload: {payload} of {} bytes", header.payload_len()),
        ));
    }
    if payload > header.payload_len() {
        return Err(fail(
            FRAMES_HEADER_LEN as u64 + header.payload_len(),
            format!("{} trailing bytes", payload - header.payload_len()),
        ));
    }
    let frame_len = (header.height * header.width * header.channels) as usize;
    let frames = if frame_len == 0 {
        vec![Vec::new(); header.frames as usize]
    } else {
        bytes[FRAMES_HEADER_LEN..]
            .chunks_exact(frame_len)
            .map(<[u8]>::to_vec)
            .collect()
    };
    Ok((header, frames))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFile {
    pub trajectory_id: String,
    pub transitions: Vec<TransitionLabel>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub frames: usize,
    pub corrupted: bool,
    /// Game seed the trajectory was simulated with.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub format_version: u32,
    pub game: String,
    pub generator: GameConfig,
    #[serde(default)]
    pub injection: Option<InjectionConfig>,
    pub trajectories: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn new(game: impl Into<String>, generator: GameConfig) -> Self {
        Self {
            format_version: MANIFEST_VERSION,
            game: game.into(),
            generator,
            injection: None,
            trajectories: Vec::new(),
        }
    }

    pub fn has_corrupted(&self) -> bool {
        self.trajectories.iter().any(|t| t.corrupted)
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        fs::write(dir.join(MANIFEST_FILE), json)?;
        Ok(())
    }

    /// Read and check the manifest against the files it lists.
    pub fn read(dir: &Path) -> Result<Self> {
        let path = dir.join(MANIFEST_FILE);
        let manifest: Self = serde_json::from_slice(&fs::read(&path)?).map_err(|e| {
            Error::DatasetFormat {
                file: path.clone(),
                offset: 0,
                reason: format!("manifest json: {e}"),
            }
        })?;
        if manifest.format_version != MANIFEST_VERSION {
            return Err(Error::DatasetFormat {
                file: path,
                offset: 0,
                reason: format!("unsupported manifest version {}", manifest.format_version),
            });
        }
        for entry in &manifest.trajectories {
            let file = dir.join(&entry.id).join(FRAMES_FILE);
            let mut head = [0u8; FRAMES_HEADER_LEN];
            let read = File::open(&file)?.read(&mut head)?;
            let header = FramesHeader::parse(&head[..read], &file)?;
            if header.frames as usize != entry.frames {
                return Err(Error::DatasetFormat {
                    file,
                    offset: 8,
                    reason: format!(
                        "manifest declares {} frames, file holds {}",
                        entry.frames, header.frames
                    ),
                });
            }
        }
        Ok(manifest)
    }
}

fn trajectory_dir(dir: &Path, id: &str) -> Result<PathBuf> {
    if id.is_empty() || id.contains(['/', '\\']) || id == "." || id == ".." {
        return Err(Error::InvalidInput(format!("unusable trajectory id `{id}`")));
    }
    Ok(dir.join(id))
}

pub fn write_trajectory(
    dir: &Path,
    trajectory: &Trajectory,
    labels: Option<&[TransitionLabel]>,
) -> Result<()> {
    let tdir = trajectory_dir(dir, &trajectory.id)?;
    fs::create_dir_all(&tdir)?;
    let header = FramesHeader {
        frames: trajectory.len() as u32,
        height: trajectory.height as u32,
        width: trajectory.width as u32,
        channels: 1,
    };
    let mut out = BufWriter::new(File::create(tdir.join(FRAMES_FILE))?);
    out.write_all(&header.to_bytes())?;
    for frame in &trajectory.frames {
        out.write_all(frame)?;
    }
    out.flush()?;

    let labels_path = tdir.join(LABELS_FILE);
    match labels {
        Some(labels) => {
            if labels.len() + 1 != trajectory.len() {
                return Err(Error::InvalidInput(format!(
                    "{} labels for {} frames",
                    labels.len(),
                    trajectory.len()
                )));
            }
            let file = LabelFile {
                trajectory_id: trajectory.id.clone(),
                transitions: labels.to_vec(),
            };
            let mut json = serde_json::to_string_pretty(&file)?;
            json.push('\n');
            fs::write(labels_path, json)?;
        }
        None if labels_path.exists() => fs::remove_file(labels_path)?,
        None => {}
    }
    Ok(())
}

pub fn read_trajectory(
    dir: &Path,
    id: &str,
) -> Result<(Trajectory, Option<Vec<TransitionLabel>>)> {
    let tdir = trajectory_dir(dir, id)?;
    let file = tdir.join(FRAMES_FILE);
    let (header, frames) = decode_frames(&fs::read(&file)?, &file)?;
    if header.channels != 1 {
        return Err(Error::DatasetFormat {
            file,
            offset: 20,
            reason: format!("{} channels; only grayscale is supported", header.channels),
        });
    }
    let trajectory = Trajectory::new(id, header.height as usize, header.width as usize, frames)?;

    let labels_path = tdir.join(LABELS_FILE);
    let labels = if labels_path.exists() {
        let fail = |reason: String| Error::DatasetFormat {
            file: labels_path.clone(),
            offset: 0,
            reason,
        };
        let parsed: LabelFile = serde_json::from_slice(&fs::read(&labels_path)?)
            .map_err(|e| fail(format!("labels json: {e}")))?;
        if parsed.trajectory_id != id {
            return Err(fail(format!("labels belong to `{}`", parsed.trajectory_id)));
        }
        if parsed.transitions.len() + 1 != trajectory.len() {
            return Err(fail(format!(
                "{} labels for {} frames",
                parsed.transitions.len(),
                trajectory.len()
            )));
        }
        if let Some(bad) = parsed.transitions.iter().enumerate().find(|(i, l)| {
            l.t != *i || l.anomalous != l.anomaly_type.is_some()
        }) {
            return Err(fail(format!("inconsistent label at index {}", bad.0)));
        }
        Some(parsed.transitions)
    } else {
        None
    };
    Ok((trajectory, labels))
}

/// A trajectory as stored in a dataset.
#[derive(Debug, Clone)]
pub struct StoredTrajectory {
    pub entry: ManifestEntry,
    pub trajectory: Trajectory,
    pub labels: Option<Vec<TransitionLabel>>,
}

/// Load every trajectory listed in the manifest, sorted by id.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<StoredTrajectory>)> {
    let manifest = DatasetManifest::read(dir)?;
    let mut entries = manifest.trajectories.clone();
    entries.sort_by(|a, b| a.id.cmp(&b.id));
    let mut out = Vec::with_capacity(entries.len());
    for entry in entries {
        let (mut trajectory, labels) = read_trajectory(dir, &entry.id)?;
        trajectory.game_config = entry.seed.map(|seed| GameConfig {
            seed,
            ..manifest.generator.clone()
        });
        out.push(StoredTrajectory {
            entry,
            trajectory,
            labels,
        });
    }
    Ok((manifest, out))
}

// ---------------------------------------------------------------------------
// score tables

pub const SCORE_COLUMNS: [&str; 5] = ["trajectory_id", "t", "score", "anomalous", "type"];

#[derive(Debug, Clone, PartialEq)]
pub struct ScoreRow {
    pub trajectory_id: String,
    pub t: usize,
    pub score: f64,
    pub anomalous: bool,
    pub anomaly_type: Option<AnomalyType>,
}

/// Shortest round-trip decimal with negative zero folded into zero.
fn format_score(v: f64) -> String {
    let v = if v == 0.0 { 0.0 } else { v };
    format!("{v}")
}

pub fn write_scores(path: &Path, rows: &[ScoreRow]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(csv_io)?;
    w.write_record(SCORE_COLUMNS).map_err(csv_io)?;
    for row in rows {
        w.write_record([
            row.trajectory_id.as_str(),
            &row.t.to_string(),
            &format_score(row.score),
            if row.anomalous { "true" } else { "false" },
            row.anomaly_type.map_or("", AnomalyType::name),
        ])
        .map_err(csv_io)?;
    }
    w.flush()?;
    Ok(())
}

fn csv_io(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Io(io),
        other => Error::Io(std::io::Error::other(format!("{other:?}"))),
    }
}

pub fn read_scores(path: &Path) -> Result<Vec<ScoreRow>> {
    let fail = |line: u64, reason: String| Error::Parse {
        file: path.to_path_buf(),
        line,
        reason,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(csv_io)?;
    let headers = reader.headers().map_err(|e| fail(1, e.to_string()))?.clone();
    if headers.iter().ne(SCORE_COLUMNS) {
        return Err(fail(1, format!("expected header {}", SCORE_COLUMNS.join(","))));
    }
    let mut rows = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| {
            let line = e.position().map_or(0, |p| p.line());
            fail(line, e.to_string())
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let field = |i: usize| record.get(i).unwrap_or("");
        let t = field(1)
            .parse::<usize>()
            .map_err(|e| fail(line, format!("t `{}`: {e}", field(1))))?;
        let score = field(2)
            .parse::<f64>()
            .map_err(|e| fail(line, format!("score `{}`: {e}", field(2))))?;
        let anomalous = match field(3) {
            "true" => true,
            "false" => false,
            other => return Err(fail(line, format!("anomalous `{other}` is not true/false"))),
        };
        let anomaly_type = match field(4) {
            "" => None,
            name => Some(name.parse().map_err(|e: Error| fail(line, e.to_string()))?),
        };
        if anomalous != anomaly_type.is_some() {
            return Err(fail(line, "type must be present iff anomalous".into()));
        }
        rows.push(ScoreRow {
            trajectory_id: field(0).to_string(),
            t,
            score: if score == 0.0 { 0.0 } else { score },
            anomalous,
            anomaly_type,
        });
    }
    Ok(rows)
}
