//! Synthetic 4D dataset generation, the fixed-length windowing protocol,
//! subject-stratified splits, and the on-disk volume format.

use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stream;

// ── on-disk volume format ────────────────────────────────────────────
//
// magic "T4D1" | u16 version | u8 ndim (=4) | 4 × u32 extents [t,x,y,z]
// | f32 little-endian payload in C order [t][x][y][z].

pub const T4D_MAGIC: &[u8; 4] = b"T4D1";
pub const T4D_VERSION: u16 = 1;
/// 4 magic + 2 version + 1 rank + 4×4 extents.
pub const T4D_HEADER_LEN: usize = 23;

pub fn save_t4d(path: &Path, t: usize, extents: [usize; 3], data: &[f32]) -> Result<()> {
    let vox: usize = extents.iter().product();
    if data.len() != t * vox {
        return Err(Error::ShapeMismatch(format!(
            "payload {} values, extents imply {}",
            data.len(),
            t * vox
        )));
    }
    let mut out = Vec::with_capacity(T4D_HEADER_LEN + data.len() * 4);
    out.extend_from_slice(T4D_MAGIC);
    out.extend_from_slice(&T4D_VERSION.to_le_bytes());
    out.push(4u8);
    for e in [t, extents[0], extents[1], extents[2]] {
        out.extend_from_slice(&(e as u32).to_le_bytes());
    }
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
    let mut f = std::fs::File::create(path)?;
    f.write_all(&out)?;
    Ok(())
}

pub fn load_t4d(path: &Path) -> Result<(usize, [usize; 3], Vec<f32>)> {
    let mut buf = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut buf)?;
    let need = |pos: usize, n: usize, what: &str| -> Result<()> {
        if pos + n > buf.len() {
            Err(Error::Format {
                offset: buf.len() as u64,
                message: format!("truncated: {what} needs bytes {pos}..{}", pos + n),
            })
        } else {
            Ok(())
        }
    };
    need(0, 4, "magic")?;
    if &buf[0..4] != T4D_MAGIC {
        return Err(Error::Format { offset: 0, message: format!("bad magic {:?}", &buf[0..4]) });
    }
    need(4, 2, "version")?;
    let version = u16::from_le_bytes(buf[4..6].try_into().unwrap());
    if version != T4D_VERSION {
        return Err(Error::Format { offset: 4, message: format!("unsupported version {version}") });
    }
    need(6, 1, "rank")?;
    if buf[6] != 4 {
        return Err(Error::Format { offset: 6, message: format!("rank {} volume, expected 4", buf[6]) });
    }
    need(7, 16, "extents")?;
    let ext = |i: usize| u32::from_le_bytes(buf[7 + 4 * i..11 + 4 * i].try_into().unwrap()) as usize;
    let (t, extents) = (ext(0), [ext(1), ext(2), ext(3)]);
    let count = t * extents.iter().product::<usize>();
    need(T4D_HEADER_LEN, count * 4, "payload")?;
    if buf.len() != T4D_HEADER_LEN + count * 4 {
        return Err(Error::Format {
            offset: (T4D_HEADER_LEN + count * 4) as u64,
            message: format!("{} trailing bytes", buf.len() - T4D_HEADER_LEN - count * 4),
        });
    }
    let data = buf[T4D_HEADER_LEN..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((t, extents, data))
}

// ── manifest ─────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ManifestInstance {
    pub path: String,
    pub label: usize,
    pub subject: String,
    pub run: u32,
    pub native_len: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetManifest {
    pub classes: Vec<String>,
    pub extents: [usize; 3],
    pub instances: Vec<ManifestInstance>,
}

impl DatasetManifest {
    pub fn save(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<DatasetManifest> {
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let m: DatasetManifest = serde_json::from_str(&text)?;
        for inst in &m.instances {
            if inst.label >= m.classes.len() {
                return Err(Error::Label { label: inst.label, classes: m.classes.len() });
            }
        }
        Ok(m)
    }

    /// Unique subject ids, sorted.
    pub fn subjects(&self) -> Vec<String> {
        let mut s: Vec<String> = self.instances.iter().map(|i| i.subject.clone()).collect();
        s.sort();
        s.dedup();
        s
    }
}

/// One instance's frames in memory, label attached.
#[derive(Debug, Clone)]
pub struct Volume4D {
    pub t: usize,
    pub extents: [usize; 3],
    /// C order [t][x][y][z].
    pub frames: Vec<f32>,
    pub label: usize,
    pub subject: String,
    pub run: u32,
}

impl Volume4D {
    pub fn load(dir: &Path, inst: &ManifestInstance, manifest: &DatasetManifest) -> Result<Volume4D> {
        let (t, extents, frames) = load_t4d(&dir.join(&inst.path))?;
        if extents != manifest.extents {
            return Err(Error::ShapeMismatch(format!(
                "{}: extents {extents:?} vs manifest {:?}",
                inst.path, manifest.extents
            )));
        }
        if t != inst.native_len {
            return Err(Error::ShapeMismatch(format!(
                "{}: {t} frames vs manifest native_len {}",
                inst.path, inst.native_len
            )));
        }
        if frames.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} contains non-finite voxels", inst.path)));
        }
        Ok(Volume4D {
            t,
            extents,
            frames,
            label: inst.label,
            subject: inst.subject.clone(),
            run: inst.run,
        })
    }

    pub fn voxels(&self) -> usize {
        self.extents.iter().product()
    }

    pub fn frame(&self, i: usize) -> &[f32] {
        let vox = self.voxels();
        &self.frames[i * vox..(i + 1) * vox]
    }
}

// ── windowing ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowMode {
    /// Random start r uniform in [0, T−k] (when T ≥ k).
    Train,
    /// Start r = 0.
    Eval,
}

/// Start offset for a k-frame window of a T-frame series. Only defined
/// (and only random) when T ≥ k; shorter series loop from frame 0.
pub fn window_start<R: Rng>(t: usize, k: usize, mode: WindowMode, rng: &mut R) -> usize {
    if t >= k {
        match mode {
            WindowMode::Train => rng.gen_range(0..=t - k),
            WindowMode::Eval => 0,
        }
    } else {
        0
    }
}

/// Frame indices of the window: a contiguous slice when T ≥ k, otherwise
/// the series repeated cyclically until k frames.
pub fn window_indices(t: usize, k: usize, start: usize) -> Vec<usize> {
    if t >= k {
        (start..start + k).collect()
    } else {
        (0..k).map(|i| i % t).collect()
    }
}

/// Materialize the window as k×vox values.
pub fn extract_window(v: &Volume4D, k: usize, start: usize) -> Result<Vec<f32>> {
    if k == 0 {
        return Err(Error::Contract("window length k must be ≥ 1".into()));
    }
    if v.t >= k && start > v.t - k {
        return Err(Error::Contract(format!(
            "window start {start} exceeds {} for T={}, k={k}",
            v.t - k,
            v.t
        )));
    }
    let vox = v.voxels();
    let mut out = Vec::with_capacity(k * vox);
    for i in window_indices(v.t, k, start) {
        out.extend_from_slice(v.frame(i));
    }
    Ok(out)
}

// ── subject-stratified split ─────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SplitManifest {
    /// Indices into the dataset manifest's instance list.
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
    pub fractions: (f64, f64, f64),
    pub seed: u64,
}

/// Shuffle subjects by seed, then cut subject counts as
/// floor(f_train·n) / floor(f_val·n) / remainder. Every instance follows
/// its subject, so no subject straddles partitions.
pub fn stratified_split(
    manifest: &DatasetManifest,
    fractions: (f64, f64, f64),
    seed: u64,
) -> Result<SplitManifest> {
    let (ft, fv, fe) = fractions;
    if !(ft > 0.0 && fv >= 0.0 && fe > 0.0) || (ft + fv + fe - 1.0).abs() > 1e-9 {
        return Err(Error::Split(format!("fractions {fractions:?} must be positive and sum to 1")));
    }
    let mut subjects = manifest.subjects();
    let n = subjects.len();
    if n < 3 {
        return Err(Error::Split(format!("{n} subjects cannot fill 3 partitions")));
    }
    let mut rng = stream(seed, "split-shuffle", &[]);
    // Fisher–Yates over the sorted list, so input order is irrelevant.
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        subjects.swap(i, j);
    }
    let n_train = (ft * n as f64).floor() as usize;
    let n_val = (fv * n as f64).floor() as usize;
    let bucket = |s: &str| -> usize {
        let pos = subjects.iter().position(|x| x == s).unwrap();
        if pos < n_train {
            0
        } else if pos < n_train + n_val {
            1
        } else {
            2
        }
    };
    let mut split = SplitManifest {
        train: Vec::new(),
        val: Vec::new(),
        test: Vec::new(),
        fractions,
        seed,
    };
    for (idx, inst) in manifest.instances.iter().enumerate() {
        match bucket(&inst.subject) {
            0 => split.train.push(idx),
            1 => split.val.push(idx),
            _ => split.test.push(idx),
        }
    }
    Ok(split)
}

// ── cropping ─────────────────────────────────────────────────────────

/// Copy an axis-aligned box (per-axis offset + size) out of one frame.
pub fn crop_frame(
    frame: &[f32],
    extents: [usize; 3],
    offset: [usize; 3],
    size: [usize; 3],
) -> Result<Vec<f32>> {
    if frame.len() != extents.iter().product::<usize>() {
        return Err(Error::ShapeMismatch(format!(
            "frame has {} voxels, extents {extents:?} imply {}",
            frame.len(),
            extents.iter().product::<usize>()
        )));
    }
    for a in 0..3 {
        if size[a] == 0 || offset[a] + size[a] > extents[a] {
            return Err(Error::Dimension(format!(
                "crop box offset {offset:?} size {size:?} exceeds extents {extents:?} on axis {a}"
            )));
        }
    }
    let mut out = Vec::with_capacity(size.iter().product());
    for x in 0..size[0] {
        for y in 0..size[1] {
            let row = ((offset[0] + x) * extents[1] + offset[1] + y) * extents[2] + offset[2];
            out.extend_from_slice(&frame[row..row + size[2]]);
        }
    }
    Ok(out)
}

/// Crop every frame of a volume.
pub fn crop_volume(v: &Volume4D, offset: [usize; 3], size: [usize; 3]) -> Result<Volume4D> {
    let mut frames = Vec::with_capacity(v.t * size.iter().product::<usize>());
    for i in 0..v.t {
        frames.extend(crop_frame(v.frame(i), v.extents, offset, size)?);
    }
    Ok(Volume4D { t: v.t, extents: size, frames, ..v.clone() })
}

/// Centered box taking the full-scale acquisition grid [91,109,91] down
/// to the working extents [75,93,81].
pub fn full_scale_crop_box() -> ([usize; 3], [usize; 3]) {
    ([8, 8, 5], [75, 93, 81])
}

// ── synthetic generator ──────────────────────────────────────────────

/// Activation time course of one blob.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub enum Course {
    /// One smooth bump peaking at frame `peak` (0-indexed).
    Bump { peak: usize, width: f64 },
    /// Periodic bump train: peaks at offset + phase + n·period. The
    /// per-instance phase is shared across a class's blobs, so relative
    /// offsets between blobs survive while absolute timing is randomized.
    Pulses { period: usize, offset: usize, width: f64 },
}

impl Course {
    pub fn value(&self, t: usize, phase: u64) -> f64 {
        match *self {
            Course::Bump { peak, width } => {
                let d = t as f64 - peak as f64;
                (-d * d / (2.0 * width * width)).exp()
            }
            Course::Pulses { period, offset, width } => {
                let p = period as f64;
                let m = (t as f64 - offset as f64 - phase as f64).rem_euclid(p);
                let d = m.min(p - m);
                (-d * d / (2.0 * width * width)).exp()
            }
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Blob {
    pub center: [usize; 3],
    pub radius: f64,
    pub amplitude: f64,
    pub course: Course,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ClassSpec {
    pub name: String,
    pub native_len: usize,
    pub blobs: Vec<Blob>,
    /// When set, each instance draws one integer phase in [0, p) shared
    /// by all of the class's periodic courses.
    pub phase_jitter: Option<u64>,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct SyntheticTaskSpec {
    pub extents: [usize; 3],
    pub noise_sigma: f64,
    /// Per-subject multiplicative gain on the signal: 1 ± jitter·U[−1,1].
    pub gain_jitter: f64,
    pub classes: Vec<ClassSpec>,
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(Error::Spec(format!("{} classes; need ≥ 2", self.classes.len())));
        }
        if self.extents.iter().any(|&e| e < 8) {
            return Err(Error::Spec(format!("extents {:?}; every axis must be ≥ 8", self.extents)));
        }
        if self.noise_sigma < 0.0 {
            return Err(Error::Spec(format!("noise sigma {} < 0", self.noise_sigma)));
        }
        for class in &self.classes {
            if class.native_len == 0 {
                return Err(Error::Spec(format!("class {} has zero frames", class.name)));
            }
            for blob in &class.blobs {
                for a in 0..3 {
                    let c = blob.center[a] as f64;
                    if c - blob.radius < 0.0 || c + blob.radius > (self.extents[a] - 1) as f64 {
                        return Err(Error::Spec(format!(
                            "class {}: blob at {:?} radius {} leaves the {:?} volume",
                            class.name, blob.center, blob.radius, self.extents
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Bounding box (offset, size) of one blob — the region used by the
    /// localization checks.
    pub fn blob_box(&self, blob: &Blob) -> ([usize; 3], [usize; 3]) {
        let mut offset = [0usize; 3];
        let mut size = [0usize; 3];
        for a in 0..3 {
            let lo = (blob.center[a] as f64 - blob.radius).floor().max(0.0) as usize;
            let hi = ((blob.center[a] as f64 + blob.radius).ceil() as usize).min(self.extents[a] - 1);
            offset[a] = lo;
            size[a] = hi - lo + 1;
        }
        (offset, size)
    }
}

/// Soft ball: weight exp(−d²/(2(r/2)²)) for voxels within 2r of the
/// center. Returned as (voxel index, weight) pairs.
fn ball(extents: [usize; 3], center: [usize; 3], radius: f64) -> Vec<(usize, f32)> {
    let s = radius / 2.0;
    let reach = (2.0 * radius).ceil() as i64;
    let mut out = Vec::new();
    for dx in -reach..=reach {
        let x = center[0] as i64 + dx;
        if x < 0 || x >= extents[0] as i64 {
            continue;
        }
        for dy in -reach..=reach {
            let y = center[1] as i64 + dy;
            if y < 0 || y >= extents[1] as i64 {
                continue;
            }
            for dz in -reach..=reach {
                let z = center[2] as i64 + dz;
                if z < 0 || z >= extents[2] as i64 {
                    continue;
                }
                let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                if d2 > (2.0 * radius) * (2.0 * radius) {
                    continue;
                }
                let w = (-d2 / (2.0 * s * s)).exp();
                let idx = (x as usize * extents[1] + y as usize) * extents[2] + z as usize;
                out.push((idx, w as f32));
            }
        }
    }
    out
}

/// Render one instance: blobs × time courses × subject gain + noise.
pub fn render_instance(
    spec: &SyntheticTaskSpec,
    class_idx: usize,
    gain: f64,
    seed: u64,
    salts: &[u64],
) -> Result<Vec<f32>> {
    let class = &spec.classes[class_idx];
    let vox: usize = spec.extents.iter().product();
    let mut rng = stream(seed, "instance", salts);
    let phase = match class.phase_jitter {
        Some(p) => rng.gen_range(0..p),
        None => 0,
    };
    let masks: Vec<Vec<(usize, f32)>> = class
        .blobs
        .iter()
        .map(|b| ball(spec.extents, b.center, b.radius))
        .collect();
    let mut frames = vec![0f32; class.native_len * vox];
    for t in 0..class.native_len {
        let frame = &mut frames[t * vox..(t + 1) * vox];
        for (blob, mask) in class.blobs.iter().zip(&masks) {
            let a = (blob.amplitude * blob.course.value(t, phase) * gain) as f32;
            if a.abs() < 1e-8 {
                continue;
            }
            for &(idx, w) in mask {
                frame[idx] += a * w;
            }
        }
    }
    if spec.noise_sigma > 0.0 {
        let normal = Normal::new(0.0, spec.noise_sigma).map_err(|e| Error::Spec(e.to_string()))?;
        for v in &mut frames {
            *v += normal.sample(&mut rng) as f32;
        }
    }
    Ok(frames)
}

/// Generate `n_subjects × runs_per_subject × classes` instances under
/// `dir` and write the manifest. Deterministic in (spec, seed).
pub fn generate_synthetic(
    spec: &SyntheticTaskSpec,
    n_subjects: usize,
    runs_per_subject: u32,
    seed: u64,
    dir: &Path,
) -> Result<DatasetManifest> {
    spec.validate()?;
    if n_subjects == 0 || runs_per_subject == 0 {
        return Err(Error::Spec("need at least one subject and one run".into()));
    }
    std::fs::create_dir_all(dir)?;
    let mut instances = Vec::new();
    for s in 0..n_subjects {
        let subject = format!("s{s:03}");
        let gain = if spec.gain_jitter > 0.0 {
            let mut g = stream(seed, "subject-gain", &[s as u64]);
            1.0 + spec.gain_jitter * (g.gen::<f64>() * 2.0 - 1.0)
        } else {
            1.0
        };
        for r in 0..runs_per_subject {
            for (c, class) in spec.classes.iter().enumerate() {
                let frames = render_instance(spec, c, gain, seed, &[s as u64, r as u64, c as u64])?;
                let name = format!("c{c}_{subject}_r{r}.t4d");
                save_t4d(&dir.join(&name), class.native_len, spec.extents, &frames)?;
                instances.push(ManifestInstance {
                    path: name,
                    label: c,
                    subject: subject.clone(),
                    run: r,
                    native_len: class.native_len,
                });
            }
        }
    }
    let manifest = DatasetManifest {
        classes: spec.classes.iter().map(|c| c.name.clone()).collect(),
        extents: spec.extents,
        instances,
    };
    manifest.save(dir)?;
    Ok(manifest)
}

/// Load every instance of a manifest into memory (desk-scale corpora are
/// small enough to hold whole).
pub fn load_all(dir: &Path, manifest: &DatasetManifest) -> Result<Vec<Volume4D>> {
    manifest
        .instances
        .iter()
        .map(|inst| Volume4D::load(dir, inst, manifest))
        .collect()
}

// ── stock task specs ─────────────────────────────────────────────────

/// Per-class native frame counts of the full-scale seven-task protocol.
pub const FULL_SCALE_NATIVE_LENS: [usize; 7] = [25, 38, 28, 16, 22, 31, 38];

/// Peak frame (0-indexed) of the planted single-bump time course: the
/// 7th frame.
pub const PLANTED_PEAK: usize = 6;

fn bump(center: [usize; 3], amplitude: f64) -> Blob {
    Blob {
        center,
        radius: 2.2,
        amplitude,
        course: Course::Bump { peak: PLANTED_PEAK, width: 1.7 },
    }
}

fn pulse(center: [usize; 3], amplitude: f64, offset: usize) -> Blob {
    Blob {
        center,
        radius: 2.2,
        amplitude,
        course: Course::Pulses { period: 12, offset, width: 1.1 },
    }
}

impl SyntheticTaskSpec {
    /// Desk-scale 7-class task on 16³ volumes. Five classes are spatially
    /// coded single bumps peaking at the planted frame; classes 1 and 6
    /// share the same two blob locations and differ only in the temporal
    /// gap between their pulse trains (4 vs 8 frames within a period of
    /// 12), with a random per-instance phase. A single frame therefore
    /// carries no information separating classes 1 and 6, and bump
    /// classes are near-baseline on most frames.
    pub fn desk_classification() -> SyntheticTaskSpec {
        let corners = |i: usize| -> [usize; 3] {
            let lo = 4usize;
            let hi = 11usize;
            [
                if i & 1 != 0 { hi } else { lo },
                if i & 2 != 0 { hi } else { lo },
                if i & 4 != 0 { hi } else { lo },
            ]
        };
        let pair_a = corners(3); // (11,11,4)
        let pair_b = corners(6); // (4,11,11)
        let amp = 1.0;
        let classes = vec![
            ClassSpec {
                name: "blob-origin".into(),
                native_len: FULL_SCALE_NATIVE_LENS[0],
                blobs: vec![bump(corners(0), amp)],
                phase_jitter: None,
            },
            ClassSpec {
                name: "pair-gap4".into(),
                native_len: FULL_SCALE_NATIVE_LENS[1],
                blobs: vec![pulse(pair_a, amp, 0), pulse(pair_b, amp, 4)],
                phase_jitter: Some(12),
            },
            ClassSpec {
                name: "blob-x".into(),
                native_len: FULL_SCALE_NATIVE_LENS[2],
                blobs: vec![bump(corners(1), amp)],
                phase_jitter: None,
            },
            ClassSpec {
                name: "blob-y".into(),
                native_len: FULL_SCALE_NATIVE_LENS[3],
                blobs: vec![bump(corners(2), amp)],
                phase_jitter: None,
            },
            ClassSpec {
                name: "blob-z".into(),
                native_len: FULL_SCALE_NATIVE_LENS[4],
                blobs: vec![bump(corners(4), amp)],
                phase_jitter: None,
            },
            ClassSpec {
                name: "blob-xyz".into(),
                native_len: FULL_SCALE_NATIVE_LENS[5],
                blobs: vec![bump(corners(7), amp)],
                phase_jitter: None,
            },
            ClassSpec {
                name: "pair-gap8".into(),
                native_len: FULL_SCALE_NATIVE_LENS[6],
                blobs: vec![pulse(pair_a, amp, 0), pulse(pair_b, amp, 8)],
                phase_jitter: Some(12),
            },
        ];
        SyntheticTaskSpec {
            extents: [16, 16, 16],
            noise_sigma: 0.35,
            gain_jitter: 0.10,
            classes,
        }
    }

    /// All-bump variant for temporal-attribution probes: every class has
    /// the same planted peak frame and a distinct blob location, and every
    /// series is long enough for a 32-frame evaluation window.
    pub fn desk_lag_probe() -> SyntheticTaskSpec {
        let mut spec = SyntheticTaskSpec::desk_classification();
        let lo = 4usize;
        let hi = 11usize;
        let centers = [
            [lo, lo, lo],
            [hi, lo, lo],
            [lo, hi, lo],
            [lo, lo, hi],
            [hi, hi, lo],
            [hi, lo, hi],
            [lo, hi, hi],
        ];
        for (c, class) in spec.classes.iter_mut().enumerate() {
            class.name = format!("lag-blob-{c}");
            class.native_len = 38;
            class.blobs = vec![bump(centers[c], 1.0)];
            class.phase_jitter = None;
        }
        spec
    }

    /// Held-out 5-class task with blob sites disjoint from the
    /// classification task's corners — the transfer-learning target.
    pub fn desk_transfer_target() -> SyntheticTaskSpec {
        let centers = [
            [7usize, 7, 7],
            [12, 7, 7],
            [7, 12, 7],
            [7, 7, 12],
            [12, 12, 12],
        ];
        let classes = centers
            .iter()
            .enumerate()
            .map(|(c, &center)| ClassSpec {
                name: format!("target-{c}"),
                native_len: 16,
                blobs: vec![bump(center, 1.0)],
                phase_jitter: None,
            })
            .collect();
        SyntheticTaskSpec {
            extents: [16, 16, 16],
            noise_sigma: 0.35,
            gain_jitter: 0.10,
            classes,
        }
    }

    /// Full-scale extents with the published per-class frame counts;
    /// intended for shape checks, not corpus generation.
    pub fn full_scale_shape() -> SyntheticTaskSpec {
        let mut spec = SyntheticTaskSpec::desk_classification();
        spec.extents = [75, 93, 81];
        for (class, blob_scale) in spec.classes.iter_mut().zip(std::iter::repeat(4usize)) {
            for blob in &mut class.blobs {
                blob.center = [
                    blob.center[0] * blob_scale + 6,
                    blob.center[1] * blob_scale + 10,
                    blob.center[2] * blob_scale + 8,
                ];
                blob.radius = 6.0;
            }
        }
        spec
    }
}

/// Resolve instance file paths that may be relative to the manifest dir.
pub fn dataset_dir(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.to_path_buf()
    } else {
        path.parent().unwrap_or(Path::new(".")).to_path_buf()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn t4d_round_trip_and_header_len() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.t4d");
        let data: Vec<f32> = (0..28 * 4 * 4 * 4).map(|i| i as f32 * 0.5 - 7.0).collect();
        save_t4d(&p, 28, [4, 4, 4], &data).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes.len(), T4D_HEADER_LEN + data.len() * 4);
        let (t, ext, back) = load_t4d(&p).unwrap();
        assert_eq!((t, ext), (28, [4, 4, 4]));
        assert_eq!(back, data);
    }

    #[test]
    fn t4d_truncation_reports_offset() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("v.t4d");
        save_t4d(&p, 2, [2, 2, 2], &vec![1.0; 16]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        std::fs::write(&p, &bytes[..bytes.len() - 5]).unwrap();
        match load_t4d(&p).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset as usize, bytes.len() - 5),
            e => panic!("{e:?}"),
        }
        std::fs::write(&p, b"BAD!").unwrap();
        match load_t4d(&p).unwrap_err() {
            Error::Format { offset, .. } => assert_eq!(offset, 0),
            e => panic!("{e:?}"),
        }
    }

    fn mini_volume(t: usize) -> Volume4D {
        let vox = 8;
        Volume4D {
            t,
            extents: [2, 2, 2],
            frames: (0..t * vox).map(|i| (i / vox) as f32).collect(),
            label: 0,
            subject: "s000".into(),
            run: 0,
        }
    }

    #[test]
    fn window_loops_short_series() {
        // T=16, k=28 → [0..15, 0..11]
        let v = mini_volume(16);
        let w = extract_window(&v, 28, 0).unwrap();
        let got: Vec<usize> = (0..28).map(|i| w[i * 8] as usize).collect();
        let want: Vec<usize> = (0..16).chain(0..12).collect();
        assert_eq!(got, want);
    }

    #[test]
    fn window_exact_is_identity() {
        let v = mini_volume(28);
        let w = extract_window(&v, 28, 0).unwrap();
        assert_eq!(w, v.frames);
    }

    #[test]
    fn window_start_ranges() {
        let mut rng = stream(5, "t", &[]);
        for _ in 0..50 {
            let r = window_start(38, 28, WindowMode::Train, &mut rng);
            assert!(r <= 10);
        }
        assert_eq!(window_start(38, 28, WindowMode::Eval, &mut rng), 0);
        assert_eq!(window_start(16, 28, WindowMode::Train, &mut rng), 0);
        // Same seed → same sequence of starts.
        let seq = |seed| -> Vec<usize> {
            let mut r = stream(seed, "t", &[]);
            (0..10).map(|_| window_start(38, 28, WindowMode::Train, &mut r)).collect()
        };
        assert_eq!(seq(9), seq(9));
        assert_ne!(seq(9), seq(10));
    }

    fn manifest_of(n_subjects: usize) -> DatasetManifest {
        let mut instances = Vec::new();
        for s in 0..n_subjects {
            for r in 0..2u32 {
                instances.push(ManifestInstance {
                    path: format!("c0_s{s:03}_r{r}.t4d"),
                    label: s % 3,
                    subject: format!("s{s:03}"),
                    run: r,
                    native_len: 16,
                });
            }
        }
        DatasetManifest { classes: vec!["a".into(), "b".into(), "c".into()], extents: [8, 8, 8], instances }
    }

    #[test]
    fn split_counts_and_disjointness() {
        let m = manifest_of(10);
        let s = stratified_split(&m, (0.7, 0.1, 0.2), 3).unwrap();
        let subj = |idxs: &[usize]| -> std::collections::BTreeSet<String> {
            idxs.iter().map(|&i| m.instances[i].subject.clone()).collect()
        };
        let (a, b, c) = (subj(&s.train), subj(&s.val), subj(&s.test));
        assert_eq!((a.len(), b.len(), c.len()), (7, 1, 2));
        assert!(a.is_disjoint(&b) && a.is_disjoint(&c) && b.is_disjoint(&c));
        assert_eq!(s.train.len() + s.val.len() + s.test.len(), m.instances.len());
    }

    #[test]
    fn split_large_subject_count_rounding() {
        let m = manifest_of(965);
        let s = stratified_split(&m, (0.7, 0.1, 0.2), 1).unwrap();
        let count = |idxs: &[usize]| -> usize {
            idxs.iter()
                .map(|&i| m.instances[i].subject.clone())
                .collect::<std::collections::BTreeSet<_>>()
                .len()
        };
        assert_eq!((count(&s.train), count(&s.val), count(&s.test)), (675, 96, 194));
    }

    #[test]
    fn split_is_deterministic_and_needs_subjects() {
        let m = manifest_of(10);
        assert_eq!(
            stratified_split(&m, (0.7, 0.1, 0.2), 5).unwrap(),
            stratified_split(&m, (0.7, 0.1, 0.2), 5).unwrap()
        );
        let tiny = manifest_of(2);
        assert!(matches!(stratified_split(&tiny, (0.7, 0.1, 0.2), 1), Err(Error::Split(_))));
    }

    #[test]
    fn crop_constant_and_idempotent() {
        let extents = [6, 5, 4];
        let frame = vec![3.5f32; 120];
        let out = crop_frame(&frame, extents, [1, 1, 1], [4, 3, 2]).unwrap();
        assert_eq!(out.len(), 24);
        assert!(out.iter().all(|&v| v == 3.5));
        // Identity box is a no-op.
        let again = crop_frame(&out, [4, 3, 2], [0, 0, 0], [4, 3, 2]).unwrap();
        assert_eq!(again, out);
        assert!(crop_frame(&frame, extents, [3, 0, 0], [4, 3, 2]).is_err());
    }

    #[test]
    fn full_scale_crop_box_shrinks_to_working_extents() {
        let (offset, size) = full_scale_crop_box();
        assert_eq!(size, [75, 93, 81]);
        for a in 0..3 {
            assert!(offset[a] + size[a] <= [91, 109, 91][a]);
        }
    }

    #[test]
    fn generator_is_deterministic() {
        let spec = SyntheticTaskSpec {
            extents: [8, 8, 8],
            noise_sigma: 0.2,
            gain_jitter: 0.1,
            classes: SyntheticTaskSpec::desk_classification().classes[..2]
                .iter()
                .cloned()
                .map(|mut c| {
                    for b in &mut c.blobs {
                        b.center = [4, 4, 4];
                    }
                    c.native_len = 6;
                    c
                })
                .collect(),
        };
        let d1 = tempfile::tempdir().unwrap();
        let d2 = tempfile::tempdir().unwrap();
        let m1 = generate_synthetic(&spec, 3, 2, 42, d1.path()).unwrap();
        let m2 = generate_synthetic(&spec, 3, 2, 42, d2.path()).unwrap();
        assert_eq!(m1, m2);
        for inst in &m1.instances {
            let a = std::fs::read(d1.path().join(&inst.path)).unwrap();
            let b = std::fs::read(d2.path().join(&inst.path)).unwrap();
            assert_eq!(a, b, "{}", inst.path);
        }
        assert_eq!(m1.instances.len(), 3 * 2 * 2);
    }

    #[test]
    fn noise_free_runs_of_same_subject_identical() {
        let mut spec = SyntheticTaskSpec::desk_classification();
        spec.noise_sigma = 0.0;
        spec.gain_jitter = 0.0;
        // Use a bump class (no phase jitter) — instances then depend only
        // on (class, subject).
        let a = render_instance(&spec, 0, 1.0, 9, &[0, 0, 0]).unwrap();
        let b = render_instance(&spec, 0, 1.0, 9, &[0, 1, 0]).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn zero_amplitude_class_is_pure_noise() {
        let mut spec = SyntheticTaskSpec::desk_classification();
        spec.gain_jitter = 0.0;
        spec.noise_sigma = 0.5;
        for blob in &mut spec.classes[0].blobs {
            blob.amplitude = 0.0;
        }
        let frames = render_instance(&spec, 0, 1.0, 3, &[0, 0, 0]).unwrap();
        let mean_abs: f64 = frames.iter().map(|v| v.abs() as f64).sum::<f64>() / frames.len() as f64;
        let expected = 0.5 * (2.0 / std::f64::consts::PI).sqrt();
        assert!(
            (mean_abs - expected).abs() / expected < 0.05,
            "mean |v| {mean_abs} vs {expected}"
        );
    }

    #[test]
    fn blob_out_of_bounds_rejected() {
        let mut spec = SyntheticTaskSpec::desk_classification();
        spec.classes[0].blobs[0].center = [1, 4, 4];
        assert!(matches!(spec.validate(), Err(Error::Spec(_))));
    }

    #[test]
    fn stock_specs_are_valid() {
        for spec in [
            SyntheticTaskSpec::desk_classification(),
            SyntheticTaskSpec::desk_lag_probe(),
            SyntheticTaskSpec::desk_transfer_target(),
            SyntheticTaskSpec::full_scale_shape(),
        ] {
            spec.validate().unwrap();
        }
        let desk = SyntheticTaskSpec::desk_classification();
        let lens: Vec<usize> = desk.classes.iter().map(|c| c.native_len).collect();
        assert_eq!(lens, FULL_SCALE_NATIVE_LENS.to_vec());
        // The temporally-coded pair shares blob geometry and differs only
        // in pulse offsets.
        let blob_sites = |c: &ClassSpec| -> Vec<[usize; 3]> { c.blobs.iter().map(|b| b.center).collect() };
        assert_eq!(blob_sites(&desk.classes[1]), blob_sites(&desk.classes[6]));
        assert_ne!(desk.classes[1].blobs[1].course, desk.classes[6].blobs[1].course);
    }

    #[test]
    fn pair_classes_single_frame_distribution_matches() {
        // The two pulse trains are mirror images: gap 4 forward vs gap 8
        // forward (= gap 4 backward). Sanity-check the per-frame activity
        // pattern sets coincide.
        let a = Course::Pulses { period: 12, offset: 4, width: 1.1 };
        let b = Course::Pulses { period: 12, offset: 8, width: 1.1 };
        let mut va: Vec<i64> = (0..12).map(|t| (a.value(t, 0) * 1e12) as i64).collect();
        let mut vb: Vec<i64> = (0..12).map(|t| (b.value(t, 0) * 1e12) as i64).collect();
        va.sort();
        vb.sort();
        assert_eq!(va, vb);
    }

    #[test]
    fn manifest_round_trip_and_load() {
        let dir = tempfile::tempdir().unwrap();
        let mut spec = SyntheticTaskSpec::desk_classification();
        for c in &mut spec.classes {
            c.native_len = 4;
        }
        spec.extents = [8, 8, 8];
        for c in &mut spec.classes {
            for b in &mut c.blobs {
                b.center = [4, 4, 4];
            }
        }
        let manifest = generate_synthetic(&spec, 3, 1, 7, dir.path()).unwrap();
        let back = DatasetManifest::load(dir.path()).unwrap();
        assert_eq!(back, manifest);
        let vols = load_all(dir.path(), &back).unwrap();
        assert_eq!(vols.len(), manifest.instances.len());
        assert_eq!(vols[0].t, 4);
        assert_eq!(vols[0].extents, [8, 8, 8]);
    }
}
