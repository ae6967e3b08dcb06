//! Descriptor records, the binary descriptor file format, dataset manifests
//! and location normalization.
//!
//! Descriptor file layout (little-endian):
//!
//! | field   | type          |
//! |---------|---------------|
//! | magic   | `b"STED"`     |
//! | version | u32 = 1       |
//! | width   | u32           |
//! | height  | u32           |
//! | frames  | u32           |
//! | dim     | u32           |
//! | N       | u64           |
//! | records | N × (x, y, t, phi\[dim\]) as f32 |
//!
//! Locations are stored raw (pixels, frame index) and normalized on demand.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::binfmt;
use crate::error::{Error, Result};

pub const DESCRIPTOR_MAGIC: &[u8; 4] = b"STED";
/// Bytes preceding the first record.
pub const DESCRIPTOR_HEADER_BYTES: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoHeader {
    pub width: u32,
    pub height: u32,
    pub frames: u32,
    pub dim: u32,
}

impl VideoHeader {
    pub fn new(width: u32, height: u32, frames: u32, dim: u32) -> Result<Self> {
        let header = Self {
            width,
            height,
            frames,
            dim,
        };
        header.validate()?;
        Ok(header)
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 || self.frames == 0 || self.dim == 0 {
            return Err(Error::Format(format!(
                "header fields must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// One located feature: raw pixel/frame location plus its appearance vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptor {
    pub x: f32,
    pub y: f32,
    pub t: f32,
    pub phi: Vec<f32>,
}

/// Normalized space-time location, every component in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Location {
    pub u: f64,
    pub v: f64,
    pub w: f64,
}

impl Location {
    pub fn new(u: f64, v: f64, w: f64) -> Self {
        Self { u, v, w }
    }
}

/// All descriptors extracted from one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoDescriptorSet {
    pub header: VideoHeader,
    pub descriptors: Vec<LocalDescriptor>,
}

impl VideoDescriptorSet {
    /// Builds a set, checking bounds and finiteness of every descriptor.
    pub fn new(header: VideoHeader, descriptors: Vec<LocalDescriptor>) -> Result<Self> {
        let set = Self {
            header,
            descriptors,
        };
        set.validate()?;
        Ok(set)
    }

    pub fn len(&self) -> usize {
        self.descriptors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.descriptors.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.header.dim as usize
    }

    pub fn validate(&self) -> Result<()> {
        self.header.validate()?;
        for (i, d) in self.descriptors.iter().enumerate() {
            validate_descriptor(&self.header, i, d)?;
        }
        Ok(())
    }

    /// Maps raw locations to `[0,1]^3`: `x/width`, `y/height`, `t/max(frames-1, 1)`.
    pub fn normalize_locations(&self) -> Vec<Location> {
        self.descriptors
            .iter()
            .map(|d| normalize_location(&self.header, d))
            .collect()
    }
}

pub fn normalize_location(header: &VideoHeader, d: &LocalDescriptor) -> Location {
    let t_span = header.frames.saturating_sub(1).max(1) as f64;
    Location {
        u: d.x as f64 / header.width as f64,
        v: d.y as f64 / header.height as f64,
        w: d.t as f64 / t_span,
    }
}

fn validate_descriptor(header: &VideoHeader, index: usize, d: &LocalDescriptor) -> Result<()> {
    if !(d.x.is_finite() && d.y.is_finite() && d.t.is_finite()) {
        return Err(Error::NonFinite(format!(
            "descriptor {index} has non-finite location ({}, {}, {})",
            d.x, d.y, d.t
        )));
    }
    if let Some(j) = d.phi.iter().position(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!(
            "descriptor {index} has non-finite phi[{j}]"
        )));
    }
    if d.phi.len() != header.dim as usize {
        return Err(Error::DimensionMismatch {
            expected: header.dim as usize,
            actual: d.phi.len(),
        });
    }
    let within = |v: f32, hi: f32| v >= 0.0 && v < hi;
    if !within(d.x, header.width as f32) {
        return Err(Error::Bounds {
            index,
            detail: format!("x = {} outside [0, {})", d.x, header.width),
        });
    }
    if !within(d.y, header.height as f32) {
        return Err(Error::Bounds {
            index,
            detail: format!("y = {} outside [0, {})", d.y, header.height),
        });
    }
    let t_max = (header.frames - 1) as f32;
    if !(d.t >= 0.0 && d.t <= t_max) {
        return Err(Error::Bounds {
            index,
            detail: format!("t = {} outside [0, {t_max}]", d.t),
        });
    }
    Ok(())
}

pub fn read_video_file(path: impl AsRef<Path>) -> Result<VideoDescriptorSet> {
    let path = path.as_ref();
    let mut r = binfmt::open(path)?;
    binfmt::read_header(&mut r, path, DESCRIPTOR_MAGIC)?;
    let width = binfmt::read_u32(&mut r, path, "width")?;
    let height = binfmt::read_u32(&mut r, path, "height")?;
    let frames = binfmt::read_u32(&mut r, path, "frames")?;
    let dim = binfmt::read_u32(&mut r, path, "dim")?;
    let header = VideoHeader {
        width,
        height,
        frames,
        dim,
    };
    header.validate()?;
    let n = binfmt::read_u64(&mut r, path, "descriptor count")?;

    // Reject absurd counts before allocating.
    let record = 4 * (3 + dim as u64);
    if let Ok(meta) = fs::metadata(path) {
        let expected = DESCRIPTOR_HEADER_BYTES as u64 + n.saturating_mul(record);
        if meta.len() < expected {
            return Err(Error::Format(format!(
                "{}: truncated, {} bytes for {n} records of dim {dim}",
                path.display(),
                meta.len()
            )));
        }
    }

    let mut descriptors = Vec::with_capacity(n as usize);
    for i in 0..n as usize {
        let loc = binfmt::read_f32s(&mut r, path, "record", 3)?;
        let phi = binfmt::read_f32s(&mut r, path, "record", dim as usize)?;
        let d = LocalDescriptor {
            x: loc[0],
            y: loc[1],
            t: loc[2],
            phi,
        };
        validate_descriptor(&header, i, &d)?;
        descriptors.push(d);
    }
    binfmt::expect_eof(&mut r, path)?;
    Ok(VideoDescriptorSet {
        header,
        descriptors,
    })
}

pub fn write_video_file(set: &VideoDescriptorSet, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    set.validate()?;
    let mut w = binfmt::create(path)?;
    binfmt::write_header(&mut w, path, DESCRIPTOR_MAGIC)?;
    let h = &set.header;
    for v in [h.width, h.height, h.frames, h.dim] {
        binfmt::write_u32(&mut w, path, v)?;
    }
    binfmt::write_u64(&mut w, path, set.descriptors.len() as u64)?;
    for d in &set.descriptors {
        binfmt::write_f32s(&mut w, path, &[d.x, d.y, d.t])?;
        binfmt::write_f32s(&mut w, path, &d.phi)?;
    }
    binfmt::finish(w, path)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    /// Descriptor file of the first channel, relative to the manifest directory.
    pub path: String,
    pub label: String,
    #[serde(default)]
    pub group: String,
    /// Descriptor files for further channels (e.g. HOF next to HOG).
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub extra_channels: Vec<String>,
}

impl ManifestEntry {
    pub fn channel_paths(&self) -> impl Iterator<Item = &str> {
        std::iter::once(self.path.as_str()).chain(self.extra_channels.iter().map(String::as_str))
    }

    pub fn channel_count(&self) -> usize {
        1 + self.extra_channels.len()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    #[serde(rename = "labels")]
    pub label_set: Vec<String>,
    /// Directory relative entry paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl DatasetManifest {
    pub fn new(entries: Vec<ManifestEntry>, label_set: Vec<String>) -> Result<Self> {
        let m = Self {
            entries,
            label_set,
            base_dir: PathBuf::new(),
        };
        m.validate()?;
        Ok(m)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut m: DatasetManifest = serde_json::from_str(&text)
            .map_err(|e| Error::Manifest(format!("{}: {e}", path.display())))?;
        m.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        m.validate()?;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::Manifest(e.to_string()))?;
        fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Checks id uniqueness, label membership and channel consistency.
    pub fn validate(&self) -> Result<()> {
        let mut labels = HashSet::new();
        for l in &self.label_set {
            if !labels.insert(l.as_str()) {
                return Err(Error::Manifest(format!("duplicate label {l:?} in label set")));
            }
        }
        let mut ids = HashSet::new();
        for e in &self.entries {
            if !ids.insert(e.id.as_str()) {
                return Err(Error::Manifest(format!("duplicate id {:?}", e.id)));
            }
            if !labels.contains(e.label.as_str()) {
                return Err(Error::Manifest(format!(
                    "entry {:?} has unknown label {:?}",
                    e.id, e.label
                )));
            }
        }
        if let Some(first) = self.entries.first() {
            let c = first.channel_count();
            if let Some(e) = self.entries.iter().find(|e| e.channel_count() != c) {
                return Err(Error::Manifest(format!(
                    "entry {:?} has {} channels, expected {c}",
                    e.id,
                    e.channel_count()
                )));
            }
        }
        Ok(())
    }

    /// Fails unless every entry carries a nonempty group.
    pub fn require_groups(&self) -> Result<()> {
        match self.entries.iter().find(|e| e.group.is_empty()) {
            Some(e) => Err(Error::Manifest(format!("entry {:?} has no group", e.id))),
            None => Ok(()),
        }
    }

    /// Distinct groups in order of first appearance.
    pub fn groups(&self) -> Vec<String> {
        let mut seen = HashSet::new();
        self.entries
            .iter()
            .filter(|e| seen.insert(e.group.as_str()))
            .map(|e| e.group.clone())
            .collect()
    }

    pub fn channel_count(&self) -> usize {
        self.entries.first().map_or(1, ManifestEntry::channel_count)
    }

    pub fn label_index(&self, label: &str) -> Option<usize> {
        self.label_set.iter().position(|l| l == label)
    }

    pub fn resolve(&self, rel: &str) -> PathBuf {
        let p = Path::new(rel);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Reads every channel of one entry.
    pub fn read_entry(&self, entry: &ManifestEntry) -> Result<Vec<VideoDescriptorSet>> {
        entry
            .channel_paths()
            .map(|p| read_video_file(self.resolve(p)))
            .collect()
    }
}
