//! Synthetic short-axis stacks with analytically known labels.
//!
//! Each slice is drawn in 2D: an LV disk, a concentric MYO annulus and an RV
//! crescent (an offset disk minus the epicardial disk). Base and mid slices share
//! the full-size geometry; the apical third shrinks toward the tip. The topmost
//! slice always shows a bright crescent, but with `basal_ambiguity_prob` it is an
//! atrium look-alike labelled background whose image differs only by a thin dark
//! valve-plane line.

use std::path::Path;

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    save_stack_with, write_index, Class, DatasetIndex, Dims, LabelStack, PresenceLabels, Provenance, SliceStack,
};
use crate::error::{Error, Result};
use crate::topology::keep_largest;
use crate::util::hash_of;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub image_size: (usize, usize),
    pub spacing_mm: f64,
    pub slice_gap_mm: f64,
    pub n_slices: (usize, usize),
    /// Probability of one all-background slice past the apex.
    pub trailing_empty_prob: f64,
    pub lv_radius_mm: (f64, f64),
    pub myo_thickness_mm: (f64, f64),
    /// Angular extent of the RV crescent, degrees.
    pub rv_extent_deg: (f64, f64),
    /// RV disk centre offset as a fraction of the epicardial radius.
    pub rv_offset: (f64, f64),
    /// Direction of the RV from the LV centre, degrees (0 = +x, image rows grow downward).
    pub rv_direction_deg: (f64, f64),
    /// Maximum in-plane jitter of the heart centre, pixels.
    pub center_jitter_px: f64,
    /// Radius scale reached at the last heart slice.
    pub apex_scale: f64,
    pub basal_ambiguity_prob: f64,
    pub apical_rv_absent_prob: f64,
    /// Noise standard deviation as a fraction of the tissue contrast range.
    pub noise_std: f64,
    /// Mean intensities for background/body, RV, MYO, LV.
    pub intensity_means: [f64; 4],
    pub air_intensity: f64,
    /// Peak amplitude of the multiplicative polynomial bias field.
    pub bias_strength: f64,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            image_size: (96, 96),
            spacing_mm: 1.3,
            slice_gap_mm: 10.0,
            n_slices: (6, 10),
            trailing_empty_prob: 0.5,
            lv_radius_mm: (11.0, 15.0),
            myo_thickness_mm: (5.0, 7.0),
            rv_extent_deg: (110.0, 150.0),
            rv_offset: (0.7, 0.9),
            rv_direction_deg: (160.0, 200.0),
            center_jitter_px: 3.0,
            apex_scale: 0.45,
            basal_ambiguity_prob: 0.5,
            apical_rv_absent_prob: 0.25,
            noise_std: 0.05,
            intensity_means: [0.25, 0.85, 0.45, 0.95],
            air_intensity: 0.02,
            bias_strength: 0.1,
            seed: 0,
        }
    }
}

fn check_range<T: PartialOrd + std::fmt::Debug>(name: &str, r: (T, T)) -> Result<()> {
    if r.0 > r.1 {
        return Err(Error::InvalidConfig(format!("phantom {name} range {r:?} is empty")));
    }
    Ok(())
}

fn sample(rng: &mut impl Rng, r: (f64, f64)) -> f64 {
    if r.0 == r.1 {
        r.0
    } else {
        rng.random_range(r.0..=r.1)
    }
}

/// Crescent disk radius (as a fraction of the epicardial radius) for offset `b`
/// and angular extent `extent` (radians) where the disk crosses the epicardium.
fn rv_radius_factor(b: f64, extent: f64) -> f64 {
    (1.0 + b * b - 2.0 * b * (extent / 2.0).cos()).sqrt()
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        check_range("n_slices", self.n_slices)?;
        check_range("lv_radius_mm", self.lv_radius_mm)?;
        check_range("myo_thickness_mm", self.myo_thickness_mm)?;
        check_range("rv_extent_deg", self.rv_extent_deg)?;
        check_range("rv_offset", self.rv_offset)?;
        check_range("rv_direction_deg", self.rv_direction_deg)?;
        let bad = |m: &str| Err(Error::InvalidConfig(format!("phantom {m}")));
        if self.n_slices.0 < 4 {
            return bad("n_slices minimum must be at least 4 (3 heart slices plus one optional empty slice)");
        }
        if !(self.spacing_mm > 0.0 && self.slice_gap_mm > 0.0) {
            return bad("spacings must be positive");
        }
        if self.lv_radius_mm.0 <= 0.0 || self.myo_thickness_mm.0 <= 0.0 {
            return bad("radii and thickness must be positive");
        }
        if !(self.noise_std >= 0.0) {
            return bad("noise_std must be non-negative");
        }
        for (name, p) in [
            ("basal_ambiguity_prob", self.basal_ambiguity_prob),
            ("apical_rv_absent_prob", self.apical_rv_absent_prob),
            ("trailing_empty_prob", self.trailing_empty_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return bad(&format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.apex_scale > 0.0 && self.apex_scale <= 1.0) {
            return bad("apex_scale must lie in (0, 1]");
        }
        if !(self.rv_offset.0 > 0.0 && self.rv_offset.1 < 1.0) {
            return bad("rv_offset must lie in (0, 1)");
        }
        if !(self.rv_extent_deg.0 > 0.0 && self.rv_extent_deg.1 < 180.0) {
            return bad("rv_extent_deg must lie in (0, 180)");
        }
        let (h, w) = self.image_size;
        if h < 32 || w < 32 {
            return bad("image_size must be at least 32x32");
        }
        // farthest labelled pixel from the heart centre
        let r_epi = (self.lv_radius_mm.1 + self.myo_thickness_mm.1) / self.spacing_mm;
        let b = self.rv_offset.1;
        let a = rv_radius_factor(b, self.rv_extent_deg.1.to_radians()).max(rv_radius_factor(
            self.rv_offset.0,
            self.rv_extent_deg.1.to_radians(),
        ));
        let reach = r_epi * (b + a) + self.center_jitter_px + 2.0;
        if reach > h.min(w) as f64 / 2.0 {
            return Err(Error::InvalidConfig(format!(
                "phantom anatomy reaches {reach:.1} px from the centre but the image half-size is {}",
                h.min(w) / 2
            )));
        }
        if self.myo_thickness_mm.0 / self.spacing_mm < 3.0 {
            return bad("myo_thickness_mm minimum must span at least 3 pixels");
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        hash_of(self)
    }
}

/// A generated stack with the generator's own record of which structures it drew.
#[derive(Clone, Debug)]
pub struct PhantomStack {
    pub stack: SliceStack,
    pub labels: LabelStack,
    pub truth: Vec<PresenceLabels>,
    pub ambiguous_base: bool,
    pub heart_slices: usize,
}

struct SliceGeometry {
    cy: f64,
    cx: f64,
    r_lv: f64,
    r_epi: f64,
    rv: Option<(f64, f64, f64)>,
}

/// Heart-slice radius scale: 1 over base and mid, shrinking linearly over the
/// apical third down to `apex_scale` at the last heart slice.
fn scale_profile(k: usize, apex_scale: f64) -> Vec<f64> {
    let n_apex = k / 3;
    let first_apex = k - n_apex;
    (0..k)
        .map(|i| {
            if i < first_apex {
                1.0
            } else {
                let t = (i - first_apex + 1) as f64 / n_apex as f64;
                1.0 - (1.0 - apex_scale) * t
            }
        })
        .collect()
}

pub fn generate_stack(config: &PhantomConfig, seed: u64) -> Result<PhantomStack> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = config.image_size;
    let s = rng.random_range(config.n_slices.0..=config.n_slices.1);
    let trailing = usize::from(rng.random_bool(config.trailing_empty_prob));
    let k = s - trailing;

    let sp = config.spacing_mm;
    let r_lv0 = sample(&mut rng, config.lv_radius_mm) / sp;
    let thick0 = sample(&mut rng, config.myo_thickness_mm) / sp;
    let extent = sample(&mut rng, config.rv_extent_deg).to_radians();
    let offset = sample(&mut rng, config.rv_offset);
    let dir = sample(&mut rng, config.rv_direction_deg).to_radians();
    let jitter = config.center_jitter_px;
    let cy = (h as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let cx = (w as f64 - 1.0) / 2.0 + rng.random_range(-jitter..=jitter);
    let ambiguous_base = rng.random::<f64>() < config.basal_ambiguity_prob;
    let apical_rv_absent = rng.random::<f64>() < config.apical_rv_absent_prob;
    let bias: [f64; 5] = std::array::from_fn(|_| rng.random_range(-1.0..=1.0) * config.bias_strength / 2.5);

    let profile = scale_profile(k, config.apex_scale);
    let plane = h * w;
    let mut labels = vec![0u8; s * plane];
    let mut image = vec![0f64; s * plane];
    let mut truth = vec![PresenceLabels::default(); s];
    let m = config.intensity_means;

    for (i, &f) in profile.iter().enumerate() {
        let r_lv = r_lv0 * f;
        let r_epi = r_lv + (thick0 * (0.5 + 0.5 * f)).max(3.0);
        let rv_absent = i + 1 == k && apical_rv_absent;
        let a = rv_radius_factor(offset, extent);
        let geo = SliceGeometry {
            cy,
            cx,
            r_lv,
            r_epi,
            rv: (!rv_absent).then(|| (cy + offset * r_epi * dir.sin(), cx + offset * r_epi * dir.cos(), a * r_epi)),
        };
        let lab = &mut labels[i * plane..(i + 1) * plane];
        let crescent = draw_slice(&geo, h, w, lab);
        let img = &mut image[i * plane..(i + 1) * plane];
        for p in 0..plane {
            img[p] = m[lab[p] as usize];
        }
        if i == 0 && ambiguous_base {
            // atrium look-alike: drawn like RV, labelled background, cut by a valve-plane line
            for p in 0..plane {
                if crescent[p] {
                    lab[p] = 0;
                    let (y, x) = ((p / w) as f64, (p % w) as f64);
                    let r = ((y - cy).powi(2) + (x - cx).powi(2)).sqrt();
                    img[p] = if r < r_epi + 1.5 { m[0] } else { m[Class::Rv as usize] };
                }
            }
        }
        truth[i] = PresenceLabels([!(rv_absent || (i == 0 && ambiguous_base)), true, true]);
    }

    let contrast = m.iter().cloned().fold(f64::MIN, f64::max) - m.iter().cloned().fold(f64::MAX, f64::min);
    let noise = Normal::new(0.0, (config.noise_std * contrast).max(0.0)).expect("finite std");
    let (ry, rx) = (h as f64 / 2.0 * 0.92, w as f64 / 2.0 * 0.88);
    let (hy, hx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let mut voxels = Vec::with_capacity(s * plane);
    for si in 0..s {
        for p in 0..plane {
            let (y, x) = ((p / w) as f64, (p % w) as f64);
            let (u, v) = ((y - hy) / hy, (x - hx) / hx);
            let inside = ((y - hy) / ry).powi(2) + ((x - hx) / rx).powi(2) <= 1.0;
            let base = if inside { image[si * plane + p] } else { config.air_intensity };
            let field = 1.0 + bias[0] * u + bias[1] * v + bias[2] * u * v + bias[3] * u * u + bias[4] * v * v;
            voxels.push((base * field + noise.sample(&mut rng)) as f32);
        }
    }

    let dims = Dims { s, h, w };
    let id = format!("phantom_{seed:016x}");
    Ok(PhantomStack {
        stack: SliceStack::new(dims, voxels, sp, config.slice_gap_mm, id)?,
        labels: LabelStack::new(dims, labels)?,
        truth,
        ambiguous_base,
        heart_slices: k,
    })
}

/// Rasterise one heart slice into `lab`; returns the RV crescent mask as drawn.
fn draw_slice(g: &SliceGeometry, h: usize, w: usize, lab: &mut [u8]) -> Vec<bool> {
    let plane = h * w;
    let mut masks = [vec![false; plane], vec![false; plane], vec![false; plane]];
    for p in 0..plane {
        let (y, x) = ((p / w) as f64, (p % w) as f64);
        let r = ((y - g.cy).powi(2) + (x - g.cx).powi(2)).sqrt();
        if r < g.r_lv {
            masks[2][p] = true;
        } else if r < g.r_epi {
            masks[1][p] = true;
        } else if let Some((ry, rx, rr)) = g.rv {
            if (y - ry).powi(2) + (x - rx).powi(2) < rr * rr {
                masks[0][p] = true;
            }
        }
    }
    for m in masks.iter_mut() {
        keep_largest(m, h, w);
    }
    for (c, m) in masks.iter().enumerate() {
        for p in 0..plane {
            if m[p] {
                lab[p] = c as u8 + 1;
            }
        }
    }
    let [rv, _, _] = masks;
    rv
}

/// Write `n_train + n_test` stacks under `root` with seeds derived from
/// `config.seed`, plus `index.json`.
pub fn generate_dataset(config: &PhantomConfig, n_train: usize, n_test: usize, root: &Path) -> Result<DatasetIndex> {
    if n_train == 0 || n_test == 0 {
        return Err(Error::InvalidConfig("n_train and n_test must both be at least 1".into()));
    }
    config.validate()?;
    let prov = Provenance { config_hash: config.hash(), seed: config.seed };
    let mut master = ChaCha8Rng::seed_from_u64(config.seed);
    let mut index = DatasetIndex { config_hash: Some(prov.config_hash.clone()), seed: Some(config.seed), ..Default::default() };
    for i in 0..n_train + n_test {
        let stack_seed = master.next_u64();
        let ph = generate_stack(config, stack_seed)?;
        let id = format!("stack_{i:04}");
        let stack = ph.stack.with_id(&id);
        save_stack_with(&stack, &ph.labels, &root.join(&id), Some(&prov))?;
        if i < n_train {
            index.train.push(id);
        } else {
            index.test.push(id);
        }
    }
    write_index(root, &index)?;
    Ok(index)
}

/// Pearson correlation of two equally long sequences.
pub fn correlation(a: &[f32], b: &[f32]) -> f64 {
    let n = a.len() as f64;
    let ma = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&v| v as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataio::{derive_presence, group_slices, load_stack, read_index, SliceLevel};
    use crate::topology::{count_components, holes, label_components, Connectivity};

    fn mask(lab: &[u8], c: u8) -> Vec<bool> {
        lab.iter().map(|&v| v == c).collect()
    }

    #[test]
    fn deterministic_given_seed() {
        let cfg = PhantomConfig::default();
        let a = generate_stack(&cfg, 11).unwrap();
        let b = generate_stack(&cfg, 11).unwrap();
        assert_eq!(a.stack, b.stack);
        assert_eq!(a.labels, b.labels);
        let c = generate_stack(&cfg, 12).unwrap();
        assert_ne!(a.stack.voxels(), c.stack.voxels());
    }

    #[test]
    fn presence_matches_generator_truth_and_mid_slices_have_all_classes() {
        let cfg = PhantomConfig::default();
        for seed in 0..40 {
            let ph = generate_stack(&cfg, seed).unwrap();
            assert_eq!(derive_presence(&ph.labels), ph.truth, "seed {seed}");
            let grouping = group_slices(&ph.labels).unwrap();
            for (i, level) in grouping.levels().iter().enumerate() {
                if *level == SliceLevel::Mid {
                    assert_eq!(ph.truth[i], PresenceLabels([true, true, true]));
                }
            }
            assert_eq!(grouping.count(SliceLevel::Outside), ph.stack.dims().s - ph.heart_slices);
        }
    }

    #[test]
    fn ambiguous_base_differs_only_by_thin_line() {
        let mut yes = PhantomConfig { basal_ambiguity_prob: 1.0, ..Default::default() };
        let mut no = PhantomConfig { basal_ambiguity_prob: 0.0, ..Default::default() };
        for seed in 0..10 {
            yes.seed = seed;
            no.seed = seed;
            let a = generate_stack(&yes, seed).unwrap();
            let b = generate_stack(&no, seed).unwrap();
            assert!(a.ambiguous_base && !b.ambiguous_base);
            assert!(!derive_presence(&a.labels)[0].rv());
            assert!(derive_presence(&b.labels)[0].rv());
            let r = correlation(a.stack.slice(0), b.stack.slice(0));
            assert!(r > 0.95, "seed {seed}: correlation {r}");
            // the images differ only on the valve-plane line inside the RV crescent
            let changed: Vec<usize> = (0..a.stack.slice(0).len())
                .filter(|&p| a.stack.slice(0)[p] != b.stack.slice(0)[p])
                .collect();
            assert!(!changed.is_empty());
            assert!(changed.iter().all(|&p| b.labels.slice(0)[p] == 1));
            assert!(changed.len() * 4 < b.labels.slice(0).iter().filter(|&&v| v == 1).count());
            assert_eq!(a.stack.slice(1), b.stack.slice(1));
        }
    }

    #[test]
    fn topology_of_ground_truth() {
        let cfg = PhantomConfig::default();
        for seed in 0..40 {
            let ph = generate_stack(&cfg, seed).unwrap();
            let d = ph.labels.dims();
            for i in 0..ph.heart_slices {
                let lab = ph.labels.slice(i);
                let myo = mask(lab, 2);
                let lv = mask(lab, 3);
                assert_eq!(count_components(&myo, d.h, d.w), 1);
                let (hole_ids, n_holes) = holes(&myo, d.h, d.w);
                assert_eq!(n_holes, 1, "seed {seed} slice {i}");
                let hole: Vec<bool> = hole_ids.iter().map(|&v| v == 1).collect();
                assert_eq!(hole, lv, "MYO hole equals LV region");
                assert_eq!(count_components(&lv, d.h, d.w), 1);
                assert_eq!(holes(&lv, d.h, d.w).1, 0);
                let rv = mask(lab, 1);
                if rv.iter().any(|&v| v) {
                    assert_eq!(label_components(&rv, d.h, d.w, Connectivity::Four).1, 1);
                    assert_eq!(holes(&rv, d.h, d.w).1, 0);
                }
            }
        }
    }

    #[test]
    fn areas_shrink_toward_apex() {
        let cfg = PhantomConfig::default();
        for seed in 0..40 {
            let ph = generate_stack(&cfg, seed).unwrap();
            let grouping = group_slices(&ph.labels).unwrap();
            let first_mid = grouping.levels().iter().position(|&l| l == SliceLevel::Mid).unwrap();
            for c in 1..=3u8 {
                let areas: Vec<usize> = (first_mid..ph.stack.dims().s)
                    .map(|i| ph.labels.slice(i).iter().filter(|&&v| v == c).count())
                    .collect();
                assert!(areas.windows(2).all(|w| w[1] <= w[0]), "seed {seed} class {c}: {areas:?}");
            }
        }
    }

    #[test]
    fn rejects_incompatible_config() {
        let cfg = PhantomConfig { image_size: (48, 48), ..Default::default() };
        assert!(matches!(generate_stack(&cfg, 0), Err(Error::InvalidConfig(_))));
        let cfg = PhantomConfig { basal_ambiguity_prob: 1.5, ..Default::default() };
        assert!(cfg.validate().is_err());
        let cfg = PhantomConfig { n_slices: (8, 6), ..Default::default() };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn dataset_layout_and_determinism() {
        let tmp = tempfile::tempdir().unwrap();
        let cfg = PhantomConfig { seed: 5, ..Default::default() };
        let a = tmp.path().join("a");
        let b = tmp.path().join("b");
        let index = generate_dataset(&cfg, 8, 2, &a).unwrap();
        generate_dataset(&cfg, 8, 2, &b).unwrap();
        assert_eq!(index.train.len(), 8);
        assert_eq!(index.test.len(), 2);
        assert!(index.train.iter().all(|id| !index.test.contains(id)));
        assert_eq!(read_index(&a).unwrap(), index);
        let dirs = std::fs::read_dir(&a).unwrap().filter(|e| e.as_ref().unwrap().path().is_dir()).count();
        assert_eq!(dirs, 10);
        for id in index.train.iter().chain(&index.test) {
            let (sa, la) = load_stack(&a.join(id)).unwrap();
            let (sb, lb) = load_stack(&b.join(id)).unwrap();
            assert_eq!(sa, sb);
            assert_eq!(la, lb);
        }
    }
}
