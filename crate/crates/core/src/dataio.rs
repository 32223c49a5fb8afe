//! On-disk stack format, in-plane resampling, presence labels and slice grouping.
//!
//! A stack directory holds `meta.json`, `volume.f32` (little-endian `f32` in
//! `[S, H, W]` row-major order) and `labels.u8` (same order). A dataset root holds
//! one such directory per stack plus `index.json` with the train/test split.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, IoContext, Result};
use crate::util::{atomic_write, read_json, write_json};

pub const CLASS_NAMES: [&str; 4] = ["background", "RV", "MYO", "LV"];
pub const N_CLASSES: usize = 4;
pub const MIN_INPLANE: usize = 8;

pub const META_FILE: &str = "meta.json";
pub const VOLUME_FILE: &str = "volume.f32";
pub const LABELS_FILE: &str = "labels.u8";
pub const INDEX_FILE: &str = "index.json";

/// Segmentation classes. The discriminant is the stored label byte.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Class {
    Background = 0,
    Rv = 1,
    Myo = 2,
    Lv = 3,
}

impl Class {
    /// Foreground classes in presence-vector order (RV, MYO, LV).
    pub const FOREGROUND: [Class; 3] = [Class::Rv, Class::Myo, Class::Lv];

    pub fn label(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        CLASS_NAMES[self as usize]
    }

    /// Position in the presence vector; `None` for background.
    pub fn presence_index(self) -> Option<usize> {
        match self {
            Class::Background => None,
            c => Some(c as usize - 1),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    pub s: usize,
    pub h: usize,
    pub w: usize,
}

impl Dims {
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn len(&self) -> usize {
        self.s * self.h * self.w
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Multi-slice 2D image volume with physical spacing.
#[derive(Clone, Debug, PartialEq)]
pub struct SliceStack {
    dims: Dims,
    voxels: Vec<f32>,
    inplane_spacing_mm: f64,
    slice_gap_mm: f64,
    stack_id: String,
}

impl SliceStack {
    pub fn new(
        dims: Dims,
        voxels: Vec<f32>,
        inplane_spacing_mm: f64,
        slice_gap_mm: f64,
        stack_id: impl Into<String>,
    ) -> Result<Self> {
        if dims.s < 1 || dims.h < MIN_INPLANE || dims.w < MIN_INPLANE {
            return Err(Error::InvalidStack(format!(
                "dimensions {}x{}x{} below minimum 1x{MIN_INPLANE}x{MIN_INPLANE}",
                dims.s, dims.h, dims.w
            )));
        }
        if voxels.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!("{} voxels for dims {dims:?}", voxels.len())));
        }
        if !(inplane_spacing_mm > 0.0 && slice_gap_mm > 0.0) {
            return Err(Error::InvalidStack(format!(
                "spacings must be positive (in-plane {inplane_spacing_mm}, gap {slice_gap_mm})"
            )));
        }
        if let Some(i) = voxels.iter().position(|v| !v.is_finite()) {
            return Err(Error::InvalidStack(format!("non-finite voxel at index {i}")));
        }
        Ok(Self { dims, voxels, inplane_spacing_mm, slice_gap_mm, stack_id: stack_id.into() })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn voxels(&self) -> &[f32] {
        &self.voxels
    }

    pub fn slice(&self, i: usize) -> &[f32] {
        let p = self.dims.plane();
        &self.voxels[i * p..(i + 1) * p]
    }

    pub fn inplane_spacing_mm(&self) -> f64 {
        self.inplane_spacing_mm
    }

    pub fn slice_gap_mm(&self) -> f64 {
        self.slice_gap_mm
    }

    pub fn stack_id(&self) -> &str {
        &self.stack_id
    }

    /// Same geometry, new voxel values (e.g. after normalisation).
    pub fn with_voxels(&self, voxels: Vec<f32>) -> Result<Self> {
        Self::new(self.dims, voxels, self.inplane_spacing_mm, self.slice_gap_mm, self.stack_id.clone())
    }

    pub fn with_id(&self, stack_id: &str) -> Self {
        Self { stack_id: stack_id.to_string(), ..self.clone() }
    }

    /// Per-stack z-score normalisation.
    pub fn zscore(&self) -> Self {
        let n = self.voxels.len() as f64;
        let mean = self.voxels.iter().map(|&v| v as f64).sum::<f64>() / n;
        let var = self.voxels.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
        let inv = 1.0 / var.sqrt().max(1e-8);
        let voxels = self.voxels.iter().map(|&v| ((v as f64 - mean) * inv) as f32).collect();
        Self { voxels, ..self.clone() }
    }
}

/// Per-pixel class map aligned with a [`SliceStack`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelStack {
    dims: Dims,
    labels: Vec<u8>,
}

impl LabelStack {
    pub fn new(dims: Dims, labels: Vec<u8>) -> Result<Self> {
        if labels.len() != dims.len() {
            return Err(Error::ShapeMismatch(format!("{} labels for dims {dims:?}", labels.len())));
        }
        if let Some((index, &value)) = labels.iter().enumerate().find(|(_, &v)| v as usize >= N_CLASSES) {
            return Err(Error::InvalidLabel { value, index });
        }
        Ok(Self { dims, labels })
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn labels(&self) -> &[u8] {
        &self.labels
    }

    pub fn slice(&self, i: usize) -> &[u8] {
        let p = self.dims.plane();
        &self.labels[i * p..(i + 1) * p]
    }

    pub fn has_foreground(&self, i: usize) -> bool {
        self.slice(i).iter().any(|&v| v != 0)
    }

    /// Slices `[start, start + len)` as a new stack.
    pub fn slices(&self, start: usize, len: usize) -> Result<Self> {
        let p = self.dims.plane();
        let dims = Dims { s: len, ..self.dims };
        Self::new(dims, self.labels[start * p..(start + len) * p].to_vec())
    }
}

/// Per-slice presence bits in (RV, MYO, LV) order.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct PresenceLabels(pub [bool; 3]);

impl PresenceLabels {
    pub fn rv(&self) -> bool {
        self.0[0]
    }

    pub fn myo(&self) -> bool {
        self.0[1]
    }

    pub fn lv(&self) -> bool {
        self.0[2]
    }

    pub fn from_slice(labels: &[u8]) -> Self {
        let mut bits = [false; 3];
        for &v in labels {
            if v != 0 {
                bits[v as usize - 1] = true;
            }
        }
        Self(bits)
    }
}

pub fn derive_presence(labels: &LabelStack) -> Vec<PresenceLabels> {
    (0..labels.dims().s).map(|i| PresenceLabels::from_slice(labels.slice(i))).collect()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SliceLevel {
    Base,
    Mid,
    Apex,
    Outside,
}

impl SliceLevel {
    pub const GROUPED: [SliceLevel; 3] = [SliceLevel::Base, SliceLevel::Mid, SliceLevel::Apex];

    pub fn name(self) -> &'static str {
        match self {
            SliceLevel::Base => "base",
            SliceLevel::Mid => "mid",
            SliceLevel::Apex => "apex",
            SliceLevel::Outside => "outside",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SliceGrouping(pub Vec<SliceLevel>);

impl SliceGrouping {
    pub fn levels(&self) -> &[SliceLevel] {
        &self.0
    }

    pub fn count(&self, level: SliceLevel) -> usize {
        self.0.iter().filter(|&&l| l == level).count()
    }
}

/// Split the heart-containing slices (stored base to apex) into base, mid and apex
/// thirds. Remainders go to base first, then mid.
pub fn group_slices(labels: &LabelStack) -> Result<SliceGrouping> {
    let heart: Vec<usize> = (0..labels.dims().s).filter(|&i| labels.has_foreground(i)).collect();
    let k = heart.len();
    if k < 3 {
        return Err(Error::Ungroupable(k));
    }
    let (base, mid, _apex) = group_sizes(k);
    let mut tags = vec![SliceLevel::Outside; labels.dims().s];
    for (rank, &i) in heart.iter().enumerate() {
        tags[i] = if rank < base {
            SliceLevel::Base
        } else if rank < base + mid {
            SliceLevel::Mid
        } else {
            SliceLevel::Apex
        };
    }
    Ok(SliceGrouping(tags))
}

/// Group sizes for `k` heart slices: `(ceil(k/3), ceil((k - base)/2), rest)`.
pub fn group_sizes(k: usize) -> (usize, usize, usize) {
    let base = k.div_ceil(3);
    let mid = (k - base).div_ceil(2);
    (base, mid, k - base - mid)
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct StackMeta {
    #[serde(rename = "S")]
    pub s: usize,
    #[serde(rename = "H")]
    pub h: usize,
    #[serde(rename = "W")]
    pub w: usize,
    pub inplane_spacing_mm: f64,
    pub slice_gap_mm: f64,
    pub class_names: Vec<String>,
    pub stack_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// Optional provenance stamped into written metadata.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub seed: u64,
}

pub fn save_stack(stack: &SliceStack, labels: &LabelStack, dir: &Path) -> Result<()> {
    save_stack_with(stack, labels, dir, None)
}

pub fn save_stack_with(stack: &SliceStack, labels: &LabelStack, dir: &Path, prov: Option<&Provenance>) -> Result<()> {
    if stack.dims() != labels.dims() {
        return Err(Error::ShapeMismatch(format!(
            "voxels {:?} vs labels {:?}",
            stack.dims(),
            labels.dims()
        )));
    }
    fs::create_dir_all(dir).at(dir)?;
    let d = stack.dims();
    let meta = StackMeta {
        s: d.s,
        h: d.h,
        w: d.w,
        inplane_spacing_mm: stack.inplane_spacing_mm(),
        slice_gap_mm: stack.slice_gap_mm(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        stack_id: stack.stack_id().to_string(),
        config_hash: prov.map(|p| p.config_hash.clone()),
        seed: prov.map(|p| p.seed),
    };
    let mut bytes = Vec::with_capacity(d.len() * 4);
    for v in stack.voxels() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    atomic_write(&dir.join(VOLUME_FILE), &bytes)?;
    atomic_write(&dir.join(LABELS_FILE), labels.labels())?;
    write_json(&dir.join(META_FILE), &meta)
}

pub fn read_meta(dir: &Path) -> Result<StackMeta> {
    read_json(&dir.join(META_FILE))
}

fn read_payload(path: &Path, expected: usize) -> Result<Vec<u8>> {
    let bytes = fs::read(path).at(path)?;
    if bytes.len() != expected {
        return Err(Error::SizeInconsistency { file: path.to_path_buf(), expected, actual: bytes.len() });
    }
    Ok(bytes)
}

pub fn load_stack(dir: &Path) -> Result<(SliceStack, LabelStack)> {
    let stack = load_volume(dir)?;
    let labels = read_payload(&dir.join(LABELS_FILE), stack.dims().len())?;
    let labels = LabelStack::new(stack.dims(), labels)?;
    Ok((stack, labels))
}

/// The image volume alone; a labels file need not exist.
pub fn load_volume(dir: &Path) -> Result<SliceStack> {
    let meta = read_meta(dir)?;
    let dims = Dims { s: meta.s, h: meta.h, w: meta.w };
    let raw = read_payload(&dir.join(VOLUME_FILE), dims.len() * 4)?;
    let voxels = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
    SliceStack::new(dims, voxels, meta.inplane_spacing_mm, meta.slice_gap_mm, meta.stack_id)
}

/// Labels only, e.g. a written prediction.
pub fn load_labels(dir: &Path) -> Result<LabelStack> {
    let meta = read_meta(dir)?;
    let dims = Dims { s: meta.s, h: meta.h, w: meta.w };
    let labels = read_payload(&dir.join(LABELS_FILE), dims.len())?;
    LabelStack::new(dims, labels)
}

/// Write a label map in the stack format without a volume payload.
pub fn save_labels(labels: &LabelStack, like: &SliceStack, dir: &Path, prov: Option<&Provenance>) -> Result<()> {
    fs::create_dir_all(dir).at(dir)?;
    let d = labels.dims();
    let meta = StackMeta {
        s: d.s,
        h: d.h,
        w: d.w,
        inplane_spacing_mm: like.inplane_spacing_mm(),
        slice_gap_mm: like.slice_gap_mm(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        stack_id: like.stack_id().to_string(),
        config_hash: prov.map(|p| p.config_hash.clone()),
        seed: prov.map(|p| p.seed),
    };
    atomic_write(&dir.join(LABELS_FILE), labels.labels())?;
    write_json(&dir.join(META_FILE), &meta)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub train: Vec<String>,
    pub test: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_hash: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

pub fn write_index(root: &Path, index: &DatasetIndex) -> Result<()> {
    write_json(&root.join(INDEX_FILE), index)
}

pub fn read_index(root: &Path) -> Result<DatasetIndex> {
    read_json(&root.join(INDEX_FILE))
}

/// A stack and its labels held in memory.
#[derive(Clone, Debug)]
pub struct Sample {
    pub stack: SliceStack,
    pub labels: LabelStack,
}

pub fn load_split(root: &Path, split: Split) -> Result<Vec<Sample>> {
    let index = read_index(root)?;
    let ids = match split {
        Split::Train => &index.train,
        Split::Test => &index.test,
    };
    ids.iter()
        .map(|id| {
            let (stack, labels) = load_stack(&root.join(id))?;
            Ok(Sample { stack, labels })
        })
        .collect()
}

pub fn stack_dir(root: &Path, id: &str) -> PathBuf {
    root.join(id)
}

fn resampled_len(n: usize, from_mm: f64, to_mm: f64) -> usize {
    (n as f64 * from_mm / to_mm).round() as usize
}

/// Source coordinate of output pixel `i` when pixel centres are aligned.
fn source_coord(i: usize, ratio: f64) -> f64 {
    (i as f64 + 0.5) * ratio - 0.5
}

/// Bilinear sample with clamp-to-edge addressing.
pub fn bilinear(plane: &[f32], h: usize, w: usize, y: f64, x: f64) -> f32 {
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let at = |yy: usize, xx: usize| plane[yy * w + xx] as f64;
    let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
    let bottom = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
    (top * (1.0 - fy) + bottom * fy) as f32
}

/// Nearest-neighbour sample with clamp-to-edge addressing.
pub fn nearest<T: Copy>(plane: &[T], h: usize, w: usize, y: f64, x: f64) -> T {
    let yy = (y.round().max(0.0) as usize).min(h - 1);
    let xx = (x.round().max(0.0) as usize).min(w - 1);
    plane[yy * w + xx]
}

/// Resample every slice to `target_spacing_mm` in-plane: images bilinear, labels
/// nearest-neighbour, pixel centres aligned so the physical extent is preserved.
pub fn resample_inplane(
    stack: &SliceStack,
    labels: &LabelStack,
    target_spacing_mm: f64,
) -> Result<(SliceStack, LabelStack)> {
    if !(target_spacing_mm > 0.0) {
        return Err(Error::InvalidConfig(format!("target spacing {target_spacing_mm} must be positive")));
    }
    if stack.dims() != labels.dims() {
        return Err(Error::ShapeMismatch(format!("voxels {:?} vs labels {:?}", stack.dims(), labels.dims())));
    }
    let d = stack.dims();
    let src = stack.inplane_spacing_mm();
    let (oh, ow) = (resampled_len(d.h, src, target_spacing_mm), resampled_len(d.w, src, target_spacing_mm));
    if oh < MIN_INPLANE || ow < MIN_INPLANE {
        return Err(Error::InvalidStack(format!("resampled size {oh}x{ow} below minimum {MIN_INPLANE}")));
    }
    let ratio = target_spacing_mm / src;
    let mut voxels = Vec::with_capacity(d.s * oh * ow);
    let mut out_labels = Vec::with_capacity(d.s * oh * ow);
    for s in 0..d.s {
        let img = stack.slice(s);
        let lab = labels.slice(s);
        for i in 0..oh {
            let y = source_coord(i, ratio);
            for j in 0..ow {
                let x = source_coord(j, ratio);
                voxels.push(bilinear(img, d.h, d.w, y, x));
                out_labels.push(nearest(lab, d.h, d.w, y, x));
            }
        }
    }
    let dims = Dims { s: d.s, h: oh, w: ow };
    Ok((
        SliceStack::new(dims, voxels, target_spacing_mm, stack.slice_gap_mm(), stack.stack_id())?,
        LabelStack::new(dims, out_labels)?,
    ))
}
