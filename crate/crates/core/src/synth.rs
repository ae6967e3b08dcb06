//! Synthetic descriptor datasets whose classes differ in space-time structure.
//!
//! Every class is an ordered sequence of phases. A phase is a Gaussian blob in
//! descriptor space tied to a stretch of a straight spatial path. With
//! `reversed_pairs`, class `2i+1` plays the phases of class `2i` backwards in
//! time while keeping the same blobs and path, so the pair can only be told
//! apart by when descriptors occur.

use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{
    write_video_file, DatasetManifest, LocalDescriptor, ManifestEntry, VideoDescriptorSet,
    VideoHeader,
};
use crate::error::{Error, Result};

pub const SYNTH_WIDTH: u32 = 320;
pub const SYNTH_HEIGHT: u32 = 240;
pub const SYNTH_FRAMES: u32 = 100;
/// Standard deviation of the phase prototype means.
pub const PROTOTYPE_SPREAD: f64 = 0.5;

const FAMILY_STREAM_BASE: u64 = 1 << 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_classes: usize,
    pub videos_per_class: usize,
    pub phases_per_class: usize,
    pub descriptors_per_video: usize,
    pub dim: usize,
    /// Per-video uniform shift of the spatial path, as a fraction of the frame.
    pub spatial_jitter: f64,
    /// Per-video uniform shift of each phase boundary, as a fraction of the clip.
    pub temporal_jitter: f64,
    pub reversed_pairs: bool,
    /// Standard deviation of descriptors around their phase prototype.
    pub noise_sigma: f64,
    pub seed: u64,
    pub groups: usize,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            num_classes: 4,
            videos_per_class: 40,
            phases_per_class: 3,
            descriptors_per_video: 200,
            dim: 8,
            spatial_jitter: 0.1,
            temporal_jitter: 0.1,
            reversed_pairs: true,
            noise_sigma: 1.0,
            seed: 0,
            groups: 2,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("num_classes", self.num_classes),
            ("videos_per_class", self.videos_per_class),
            ("phases_per_class", self.phases_per_class),
            ("descriptors_per_video", self.descriptors_per_video),
            ("dim", self.dim),
            ("groups", self.groups),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        for (name, v) in [
            ("spatial_jitter", self.spatial_jitter),
            ("temporal_jitter", self.temporal_jitter),
        ] {
            if !(0.0..=0.5).contains(&v) {
                return Err(Error::InvalidConfig(format!("{name} must lie in [0, 0.5], got {v}")));
            }
        }
        if !(self.noise_sigma.is_finite() && self.noise_sigma >= 0.0) {
            return Err(Error::InvalidConfig("noise_sigma must be finite and non-negative".into()));
        }
        Ok(())
    }

    pub fn class_label(c: usize) -> String {
        format!("c{c}")
    }

    /// Label pairs `(c2i, c2i+1)` that share content in reversed order.
    pub fn reversed_pair_labels(&self) -> Vec<(String, String)> {
        if !self.reversed_pairs {
            return Vec::new();
        }
        (0..self.num_classes / 2)
            .map(|i| (Self::class_label(2 * i), Self::class_label(2 * i + 1)))
            .collect()
    }

    fn family_of(&self, class: usize) -> (usize, bool) {
        if self.reversed_pairs {
            (class / 2, class % 2 == 1)
        } else {
            (class, false)
        }
    }
}

/// Phase prototypes and spatial path shared by the classes of one family.
struct Family {
    prototypes: Vec<Vec<f64>>,
    path_start: [f64; 2],
    path_end: [f64; 2],
}

impl Family {
    fn new(spec: &SynthSpec, family: usize) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
        rng.set_stream(FAMILY_STREAM_BASE + family as u64);
        let prototypes = (0..spec.phases_per_class)
            .map(|_| {
                (0..spec.dim)
                    .map(|_| PROTOTYPE_SPREAD * rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let mut point = || [rng.random_range(0.15..0.85), rng.random_range(0.15..0.85)];
        let path_start = point();
        let path_end = point();
        Self {
            prototypes,
            path_start,
            path_end,
        }
    }

    fn path_at(&self, s: f64) -> [f64; 2] {
        [
            self.path_start[0] + s * (self.path_end[0] - self.path_start[0]),
            self.path_start[1] + s * (self.path_end[1] - self.path_start[1]),
        ]
    }
}

/// Phase boundaries in `[0, 1]`: evenly spaced, jittered, sorted and clamped.
fn phase_boundaries(phases: usize, jitter: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let mut inner: Vec<f64> = (1..phases)
        .map(|k| {
            let shift = if jitter > 0.0 {
                rng.random_range(-jitter..=jitter)
            } else {
                0.0
            };
            (k as f64 / phases as f64 + shift).clamp(0.0, 1.0)
        })
        .collect();
    inner.sort_by(f64::total_cmp);
    let mut b = Vec::with_capacity(phases + 1);
    b.push(0.0);
    b.extend(inner);
    b.push(1.0);
    b
}

/// Splits `n` items over `parts` as evenly as possible, earlier parts first.
fn split_even(n: usize, parts: usize) -> Vec<usize> {
    (0..parts)
        .map(|p| n / parts + usize::from(p < n % parts))
        .collect()
}

fn generate_video(spec: &SynthSpec, family: &Family, reversed: bool, stream: u64) -> Result<VideoDescriptorSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(stream);
    let mut shift = [0.0; 2];
    if spec.spatial_jitter > 0.0 {
        for s in &mut shift {
            *s = rng.random_range(-spec.spatial_jitter..=spec.spatial_jitter);
        }
    }
    let phases = spec.phases_per_class;
    let bounds = phase_boundaries(phases, spec.temporal_jitter, &mut rng);
    let counts = split_even(spec.descriptors_per_video, phases);
    let (w, h, f) = (SYNTH_WIDTH as f64, SYNTH_HEIGHT as f64, SYNTH_FRAMES as f64);

    let mut descriptors = Vec::with_capacity(spec.descriptors_per_video);
    for segment in 0..phases {
        let phase = if reversed { phases - 1 - segment } else { segment };
        // Counts follow the phase so reversed classes keep the same multiset.
        let n = counts[phase];
        let (t0, t1) = (bounds[segment], bounds[segment + 1]);
        for j in 0..n {
            let frac = (j as f64 + 0.5) / n as f64;
            let t = (t0 + frac * (t1 - t0)) * (f - 1.0);
            let p = family.path_at((phase as f64 + frac) / phases as f64);
            let x = ((p[0] + shift[0]) * w).clamp(0.0, w - 1e-2);
            let y = ((p[1] + shift[1]) * h).clamp(0.0, h - 1e-2);
            let phi = family.prototypes[phase]
                .iter()
                .map(|&m| (m + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)) as f32)
                .collect();
            descriptors.push(LocalDescriptor {
                x: x as f32,
                y: y as f32,
                t: (t as f32).min(SYNTH_FRAMES as f32 - 1.0),
                phi,
            });
        }
    }
    let header = VideoHeader::new(SYNTH_WIDTH, SYNTH_HEIGHT, SYNTH_FRAMES, spec.dim as u32)?;
    VideoDescriptorSet::new(header, descriptors)
}

/// Builds the dataset in memory; entry `i` of the manifest matches `videos[i]`.
pub fn generate_in_memory(spec: &SynthSpec) -> Result<(DatasetManifest, Vec<VideoDescriptorSet>)> {
    spec.validate()?;
    let families: Vec<Family> = (0..spec.num_classes)
        .map(|c| spec.family_of(c).0)
        .max()
        .map(|n| (0..=n).map(|fam| Family::new(spec, fam)).collect())
        .unwrap_or_default();
    let jobs: Vec<(usize, usize)> = (0..spec.num_classes)
        .flat_map(|c| (0..spec.videos_per_class).map(move |i| (c, i)))
        .collect();
    let videos = jobs
        .par_iter()
        .enumerate()
        .map(|(stream, &(c, _))| {
            let (fam, reversed) = spec.family_of(c);
            generate_video(spec, &families[fam], reversed, stream as u64)
        })
        .collect::<Result<Vec<_>>>()?;
    let entries = jobs
        .iter()
        .map(|&(c, i)| ManifestEntry {
            id: format!("c{c}_v{i}"),
            path: format!("videos/c{c}_v{i}.bin"),
            label: SynthSpec::class_label(c),
            group: format!("g{}", i % spec.groups),
            extra_channels: Vec::new(),
        })
        .collect();
    let labels = (0..spec.num_classes).map(SynthSpec::class_label).collect();
    Ok((DatasetManifest::new(entries, labels)?, videos))
}

/// Writes `manifest.json` and `videos/*.bin` under `out_dir` and returns the
/// manifest with its base directory set.
pub fn generate_dataset(spec: &SynthSpec, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    let out_dir = out_dir.as_ref();
    let (mut manifest, videos) = generate_in_memory(spec)?;
    let video_dir = out_dir.join("videos");
    fs::create_dir_all(&video_dir).map_err(|e| Error::io(&video_dir, e))?;
    manifest
        .entries
        .par_iter()
        .zip(videos.par_iter())
        .try_for_each(|(e, v)| write_video_file(v, out_dir.join(&e.path)))?;
    manifest.save(out_dir.join("manifest.json"))?;
    manifest.base_dir = out_dir.to_path_buf();
    Ok(manifest)
}
