//! Procedural blob phantoms with genuine through-plane structure.
//!
//! Each subject is a set of soft ellipsoidal blobs whose in-plane radius
//! varies smoothly with depth. Two "modalities" are rendered from the same
//! geometry:
//!
//! * `m0` (source): blob brightness is the per-blob base intensity
//!   modulated by `sin` of a per-subject global phase advancing one cycle
//!   across the stack.
//! * `m1` (target): brightness depends on the base intensity, on the
//!   quadrature (`cos`) component of the same phase, and on the blob's
//!   depth-integrated volume.
//!
//! A single source slice pins down only the product `I*(1 + eta*sin(...))`,
//! never the phase itself, while the full source stack reveals the phase
//! and the integrated volume. A per-slice translator therefore cannot
//! recover `m1` exactly, but a depth-context model can; the pair
//! constructed by [`context_probe_pair`] witnesses this with two subjects
//! whose source slices at one depth are bit-identical while their target
//! slices differ.
//!
//! All rendering math goes through [`crate::detmath`], so volumes are
//! byte-identical across platforms for a given (spec, seed).

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::detmath::{cos_tau, sin_tau, smoothstep01};
use crate::error::{Error, Result};
use crate::rng::{self, Stream};
use crate::volume::{ValueRange, Volume};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Modality {
    M0,
    M1,
}

impl Modality {
    pub fn name(&self) -> &'static str {
        match self {
            Modality::M0 => "m0",
            Modality::M1 => "m1",
        }
    }
}

/// Generation knobs shared by every subject of a dataset.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PhantomSpec {
    /// Voxels per axis; volumes are grid x grid x grid.
    pub grid: usize,
    pub blobs_min: usize,
    pub blobs_max: usize,
    /// Amplitude of the source-modality phase modulation.
    pub eta: f64,
    /// Centers are drawn in this fraction band of each axis.
    pub center_band: (f64, f64),
    /// Base radius band as a fraction of the grid.
    pub radius_band: (f64, f64),
    /// Blob base intensity band (in [0,1] texture units).
    pub intensity_band: (f64, f64),
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            grid: 32,
            blobs_min: 2,
            blobs_max: 4,
            eta: 0.3,
            center_band: (0.28, 0.72),
            radius_band: (0.12, 0.26),
            intensity_band: (0.35, 0.75),
        }
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.grid < 8 {
            return Err(Error::Config(format!("phantom grid {} < 8", self.grid)));
        }
        if self.blobs_min > self.blobs_max {
            return Err(Error::Config(format!(
                "blobs_min {} > blobs_max {}",
                self.blobs_min, self.blobs_max
            )));
        }
        if !(0.0..1.0).contains(&self.eta) {
            return Err(Error::Config(format!("eta {} outside [0,1)", self.eta)));
        }
        Ok(())
    }

    /// Hash of the canonical JSON encoding, recorded in manifests.
    pub fn digest(&self) -> u64 {
        let json = serde_json::to_string(self).expect("spec serializes");
        rng::fnv1a(json.as_bytes())
    }
}

/// One blob: an ellipsoid with a smoothly modulated per-depth radius.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Blob {
    pub cy: f64,
    pub cx: f64,
    pub cz: f64,
    /// Base in-plane radius in voxels.
    pub rho: f64,
    /// Half-extent along depth in voxels.
    pub half_len: f64,
    /// Relative sinusoidal radius modulation, amplitude and whole-stack
    /// frequency and phase (in turns).
    pub mod_amp: f64,
    pub mod_freq: f64,
    pub mod_phase: f64,
    /// Base intensity in [0,1] texture units.
    pub intensity: f64,
}

/// All randomness of one subject, fixed at sampling time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhantomParams {
    pub grid: usize,
    pub depth: usize,
    pub blobs: Vec<Blob>,
    /// Global depth-modulation phase in turns.
    pub global_phase: f64,
    pub eta: f64,
}

/// Draws the parameters of one subject.
pub fn sample_phantom(seed: u64, spec: &PhantomSpec) -> Result<PhantomParams> {
    spec.validate()?;
    let mut s = Stream::new(seed);
    let g = spec.grid as f64;
    let n = if spec.blobs_max == spec.blobs_min {
        spec.blobs_min
    } else {
        spec.blobs_min + s.below(spec.blobs_max - spec.blobs_min + 1)
    };
    let mut blobs = Vec::with_capacity(n);
    for _ in 0..n {
        let rho = s.range(spec.radius_band.0 * g, spec.radius_band.1 * g);
        blobs.push(Blob {
            cy: s.range(spec.center_band.0 * g, spec.center_band.1 * g),
            cx: s.range(spec.center_band.0 * g, spec.center_band.1 * g),
            cz: s.range(spec.center_band.0 * g, spec.center_band.1 * g),
            rho,
            half_len: s.range(0.8, 1.6) * rho,
            mod_amp: s.range(0.05, 0.25),
            mod_freq: (1 + s.below(2)) as f64,
            mod_phase: s.uniform(),
            intensity: s.range(spec.intensity_band.0, spec.intensity_band.1),
        });
    }
    Ok(PhantomParams {
        grid: spec.grid,
        depth: spec.grid,
        blobs,
        global_phase: s.uniform(),
        eta: spec.eta,
    })
}

impl Blob {
    /// In-plane radius at 0-based depth voxel `d` of `total` slices.
    pub fn radius_at(&self, d: usize, total: usize) -> f64 {
        let z = (d as f64 - self.cz) / self.half_len;
        let core = if z.abs() >= 1.0 {
            return 0.0;
        } else {
            self.rho * (1.0 - z * z).sqrt()
        };
        core * (1.0 + self.mod_amp * sin_tau(self.mod_freq * d as f64 / total as f64 + self.mod_phase))
    }

    /// Depth-integrated squared radius, normalized into [0,1].
    pub fn normalized_volume(&self, total: usize, grid: usize) -> f64 {
        let mut acc = 0.0;
        for d in 0..total {
            let r = self.radius_at(d, total);
            acc += r * r;
        }
        let norm = total as f64 * (0.26 * grid as f64).powi(2);
        (acc / norm).min(1.0)
    }
}

/// Per-depth blob brightness in [0,1] texture units.
fn blob_level(
    blob: &Blob,
    modality: Modality,
    d1: usize,
    total: usize,
    global_phase: f64,
    eta: f64,
    vnorm: f64,
) -> f64 {
    let tau = d1 as f64 / total as f64;
    match modality {
        Modality::M0 => {
            (blob.intensity * (1.0 + eta * sin_tau(global_phase + tau))).clamp(0.0, 1.0)
        }
        Modality::M1 => (0.25
            + 0.35 * blob.intensity
            + 0.2 * cos_tau(global_phase + tau)
            + 0.2 * vnorm)
            .clamp(0.0, 1.0),
    }
}

/// Renders one modality of a subject into a single-channel volume in
/// [-1, 1]. Background sits at -1; blob coverage is anti-aliased with a
/// one-voxel smoothstep over signed distance to the blob outline.
pub fn render_volume(params: &PhantomParams, modality: Modality) -> Result<Volume> {
    let g = params.grid;
    let total = params.depth;
    let mut out = Volume::zeros(1, g, g, total, ValueRange::UNIT)?;

    // Per-blob, per-depth radius and brightness tables.
    let mut radius = vec![0.0; params.blobs.len() * total];
    let mut level = vec![0.0; params.blobs.len() * total];
    for (b, blob) in params.blobs.iter().enumerate() {
        let vnorm = blob.normalized_volume(total, g);
        for d in 0..total {
            radius[b * total + d] = blob.radius_at(d, total);
            level[b * total + d] = blob_level(
                blob,
                modality,
                d + 1,
                total,
                params.global_phase,
                params.eta,
                vnorm,
            );
        }
    }

    let data = out.data_mut();
    for h in 0..g {
        for w in 0..g {
            for d in 0..total {
                let mut lit = 0.0f64;
                for (b, blob) in params.blobs.iter().enumerate() {
                    let r = radius[b * total + d];
                    if r <= 0.0 {
                        continue;
                    }
                    let dy = h as f64 - blob.cy;
                    let dx = w as f64 - blob.cx;
                    if dy.abs() > r + 0.5 || dx.abs() > r + 0.5 {
                        continue;
                    }
                    let sd = (dy * dy + dx * dx).sqrt() - r;
                    if sd >= 0.5 {
                        continue;
                    }
                    let cov = smoothstep01(0.5 - sd);
                    let v = cov * level[b * total + d];
                    if v > lit {
                        lit = v;
                    }
                }
                data[(h * g + w) * total + d] = -1.0 + 2.0 * lit;
            }
        }
    }
    Ok(out)
}

/// A source/target pair rendered from shared geometry.
#[derive(Debug, Clone)]
pub struct PairedSample {
    pub subject_id: String,
    pub source: Volume,
    pub target: Volume,
}

pub fn render_pair(subject_id: &str, params: &PhantomParams) -> Result<PairedSample> {
    Ok(PairedSample {
        subject_id: subject_id.to_string(),
        source: render_volume(params, Modality::M0)?,
        target: render_volume(params, Modality::M1)?,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(&self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DatasetMode {
    Unconditional,
    Paired,
}

/// One subject of a planned dataset.
#[derive(Debug, Clone)]
pub struct Subject {
    pub id: String,
    pub seed: u64,
    pub params: PhantomParams,
    pub split: Split,
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub spec: PhantomSpec,
    pub seed: u64,
    pub mode: DatasetMode,
    pub subjects: Vec<Subject>,
}

impl Dataset {
    pub fn split_subjects(&self, split: Split) -> Vec<&Subject> {
        self.subjects.iter().filter(|s| s.split == split).collect()
    }
}

/// Samples `n` subjects and assigns the deterministic 80/10/10 split by
/// seeded shuffle. Val and test each get floor(n/10) subjects but at
/// least one; train takes the rest.
pub fn make_dataset(seed: u64, n: usize, spec: &PhantomSpec, mode: DatasetMode) -> Result<Dataset> {
    spec.validate()?;
    if n < 3 {
        return Err(Error::Config(format!("need >= 3 subjects, got {n}")));
    }
    let n_val = (n / 10).max(1);
    let n_test = (n / 10).max(1);
    let n_train = n - n_val - n_test;
    if n_train == 0 {
        return Err(Error::Config(format!("split leaves no training subjects for n={n}")));
    }

    let mut order: Vec<usize> = (0..n).collect();
    Stream::derived(seed, "split").shuffle(&mut order);
    let mut splits = vec![Split::Train; n];
    for (rank, &subject) in order.iter().enumerate() {
        splits[subject] = if rank < n_train {
            Split::Train
        } else if rank < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        };
    }

    let mut subjects = Vec::with_capacity(n);
    for i in 0..n {
        let subject_seed = rng::derive_seed_index(seed, "subject", i as u64);
        subjects.push(Subject {
            id: format!("s{i:04}"),
            seed: subject_seed,
            params: sample_phantom(subject_seed, spec)?,
            split: splits[i],
        });
    }
    Ok(Dataset {
        spec: spec.clone(),
        seed,
        mode,
        subjects,
    })
}

/// Manifest entry for one written subject.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ManifestSubject {
    pub id: String,
    pub split: String,
    pub seed: u64,
    pub source: Option<String>,
    pub target: Option<String>,
    pub volume: Option<String>,
}

/// On-disk dataset manifest.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub mode: DatasetMode,
    pub spec_digest: String,
    pub spec: PhantomSpec,
    pub subjects: Vec<ManifestSubject>,
}

pub const MANIFEST_FILE: &str = "dataset.json";

/// Renders and writes every subject under `dir` as LFV1 plus a JSON
/// manifest; returns the manifest.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<DatasetManifest> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    let render_one = |i: usize| -> Result<ManifestSubject> {
        let s = &dataset.subjects[i];
        match dataset.mode {
            DatasetMode::Paired => {
                let pair = render_pair(&s.id, &s.params)?;
                let src = format!("{}_m0.lfv", s.id);
                let tgt = format!("{}_m1.lfv", s.id);
                crate::lfv::write_volume(&dir.join(&src), &pair.source)?;
                crate::lfv::write_volume(&dir.join(&tgt), &pair.target)?;
                Ok(ManifestSubject {
                    id: s.id.clone(),
                    split: s.split.name().to_string(),
                    seed: s.seed,
                    source: Some(src),
                    target: Some(tgt),
                    volume: None,
                })
            }
            DatasetMode::Unconditional => {
                let vol = render_volume(&s.params, Modality::M0)?;
                let name = format!("{}_m0.lfv", s.id);
                crate::lfv::write_volume(&dir.join(&name), &vol)?;
                Ok(ManifestSubject {
                    id: s.id.clone(),
                    split: s.split.name().to_string(),
                    seed: s.seed,
                    source: None,
                    target: None,
                    volume: Some(name),
                })
            }
        }
    };
    let entries = crate::threads::par_map(dataset.subjects.len(), |i| render_one(i));
    let mut subjects = Vec::with_capacity(entries.len());
    for e in entries {
        subjects.push(e?);
    }
    let manifest = DatasetManifest {
        seed: dataset.seed,
        mode: dataset.mode,
        spec_digest: format!("{:016x}", dataset.spec.digest()),
        spec: dataset.spec.clone(),
        subjects,
    };
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, json).map_err(|e| Error::io(path.display().to_string(), e))?;
    Ok(manifest)
}

/// Loads the manifest and all volumes of a written dataset.
pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<LoadedSubject>)> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| Error::invalid(format!("manifest parse: {e}")))?;
    let mut subjects = Vec::with_capacity(manifest.subjects.len());
    for m in &manifest.subjects {
        let split = match m.split.as_str() {
            "train" => Split::Train,
            "val" => Split::Val,
            "test" => Split::Test,
            other => return Err(Error::invalid(format!("unknown split {other:?}"))),
        };
        let read = |rel: &Option<String>| -> Result<Option<Volume>> {
            match rel {
                Some(rel) => Ok(Some(crate::lfv::read_volume(&dir.join(rel))?)),
                None => Ok(None),
            }
        };
        subjects.push(LoadedSubject {
            id: m.id.clone(),
            split,
            source: read(&m.source)?,
            target: read(&m.target)?,
            volume: read(&m.volume)?,
        });
    }
    Ok((manifest, subjects))
}

#[derive(Debug, Clone)]
pub struct LoadedSubject {
    pub id: String,
    pub split: Split,
    pub source: Option<Volume>,
    pub target: Option<Volume>,
    pub volume: Option<Volume>,
}

/// Two subjects with bit-identical source slices at the returned 1-based
/// depth but different target slices there: the phases sit half a turn
/// apart where the sine component vanishes, so only the quadrature term
/// of the target distinguishes them.
/// The index convention matches [`crate::volume::slice_extract`];
/// subtract one when indexing raw voxel data.
pub fn context_probe_pair(spec: &PhantomSpec) -> Result<(PhantomParams, PhantomParams, usize)> {
    spec.validate()?;
    let g = spec.grid as f64;
    let depth = spec.grid;
    let d_star = depth / 2;
    let tau_star = d_star as f64 / depth as f64;
    let blob = Blob {
        cy: g / 2.0,
        cx: g / 2.0,
        cz: (depth as f64 - 1.0) / 2.0,
        rho: 0.2 * g,
        half_len: 0.45 * depth as f64,
        mod_amp: 0.0,
        mod_freq: 1.0,
        mod_phase: 0.0,
        intensity: 0.55,
    };
    let params = |phase: f64| PhantomParams {
        grid: spec.grid,
        depth,
        blobs: vec![blob.clone()],
        global_phase: phase,
        eta: spec.eta,
    };
    // phase + tau* = 0 and 0.5 turns: sine is exactly zero at both, cosine
    // is +1 and -1.
    let a = params((1.0 - tau_star).rem_euclid(1.0));
    let b = params((0.5 - tau_star).rem_euclid(1.0));
    Ok((a, b, d_star))
}
