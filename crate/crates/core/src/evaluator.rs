//! Per-slice Dice by heart level, topology defect counts, and the ablation matrix.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataio::{group_slices, Class, LabelStack, Sample, SliceLevel};
use crate::error::{Error, Result};
use crate::fusion_net::{NetworkConfig, SliceMode};
use crate::stages::{Pipeline, Variant};
use crate::topology::{count_components, count_holes};
use crate::trainer::{prepare_samples, train_ref, train_seg, RunOptions, TrainConfig, TrainedStage};
use crate::util::atomic_write;

/// `2|P∩G| / (|P|+|G|)`; `None` when both masks are empty.
pub fn dice(pred: &[bool], gt: &[bool]) -> Result<Option<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::ShapeMismatch(format!("masks of {} and {} pixels", pred.len(), gt.len())));
    }
    let (mut p, mut g, mut both) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.iter().zip(gt) {
        p += a as usize;
        g += b as usize;
        both += (a && b) as usize;
    }
    Ok(if p + g == 0 { None } else { Some(2.0 * both as f64 / (p + g) as f64) })
}

fn class_mask(labels: &[u8], class: Class) -> Vec<bool> {
    labels.iter().map(|&l| l == class.label()).collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiceRow {
    pub model: String,
    pub level: SliceLevel,
    pub class: Class,
    /// `None` when no slice in the group had a defined Dice.
    pub mean: Option<f64>,
    pub std: Option<f64>,
    pub n_slices: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DiceReport {
    pub rows: Vec<DiceRow>,
}

impl DiceReport {
    pub fn get(&self, model: &str, level: SliceLevel, class: Class) -> Option<&DiceRow> {
        self.rows.iter().find(|r| r.model == model && r.level == level && r.class == class)
    }

    pub fn extend(&mut self, other: DiceReport) {
        self.rows.extend(other.rows);
    }
}

/// Dice of every (prediction, ground truth) pair, grouped by the ground truth's
/// base/mid/apex levels. Standard deviation is the population one.
pub fn evaluate(model: &str, pairs: &[(LabelStack, LabelStack)]) -> Result<DiceReport> {
    if pairs.is_empty() {
        return Err(Error::EmptyDataset("no test stacks to evaluate".into()));
    }
    let mut values: BTreeMap<(SliceLevel, Class), Vec<f64>> = BTreeMap::new();
    for level in SliceLevel::GROUPED {
        for class in Class::FOREGROUND {
            values.insert((level, class), Vec::new());
        }
    }
    for (pred, gt) in pairs {
        if pred.dims() != gt.dims() {
            return Err(Error::ShapeMismatch(format!("prediction {:?} vs ground truth {:?}", pred.dims(), gt.dims())));
        }
        let grouping = group_slices(gt)?;
        for (i, &level) in grouping.levels().iter().enumerate() {
            if level == SliceLevel::Outside {
                continue;
            }
            for class in Class::FOREGROUND {
                if let Some(d) = dice(&class_mask(pred.slice(i), class), &class_mask(gt.slice(i), class))? {
                    values.get_mut(&(level, class)).expect("all groups present").push(d);
                }
            }
        }
    }
    let rows = values
        .into_iter()
        .map(|((level, class), v)| {
            let n = v.len();
            let (mean, std) = if n == 0 {
                (None, None)
            } else {
                let m = v.iter().sum::<f64>() / n as f64;
                let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / n as f64;
                (Some(m), Some(var.sqrt()))
            };
            DiceRow { model: model.to_string(), level, class, mean, std, n_slices: n }
        })
        .collect();
    Ok(DiceReport { rows })
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectRow {
    pub model: String,
    pub class: Class,
    pub extra_components: usize,
    pub unexpected_holes: usize,
    pub evaluated_slices: usize,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DefectReport {
    pub rows: Vec<DefectRow>,
}

impl DefectReport {
    pub fn total(&self) -> usize {
        self.rows.iter().map(|r| r.extra_components + r.unexpected_holes).sum()
    }

    pub fn get(&self, model: &str, class: Class) -> Option<&DefectRow> {
        self.rows.iter().find(|r| r.model == model && r.class == class)
    }

    pub fn extend(&mut self, other: DefectReport) {
        self.rows.extend(other.rows);
    }
}

/// Holes a clean shape of this class has: the myocardium is a ring.
pub fn expected_holes(class: Class) -> usize {
    usize::from(class == Class::Myo)
}

/// Topology deviations of predicted label stacks: components beyond the first and
/// any difference from the expected hole count, per slice where the class appears.
pub fn defects(model: &str, preds: &[LabelStack]) -> DefectReport {
    let rows = Class::FOREGROUND
        .into_iter()
        .map(|class| {
            let mut row = DefectRow { model: model.to_string(), class, extra_components: 0, unexpected_holes: 0, evaluated_slices: 0 };
            for pred in preds {
                let d = pred.dims();
                for i in 0..d.s {
                    let mask = class_mask(pred.slice(i), class);
                    if !mask.iter().any(|&m| m) {
                        continue;
                    }
                    row.evaluated_slices += 1;
                    row.extra_components += count_components(&mask, d.h, d.w) - 1;
                    row.unexpected_holes += count_holes(&mask, d.h, d.w).abs_diff(expected_holes(class));
                }
            }
            row
        })
        .collect();
    DefectReport { rows }
}

pub const DICE_HEADER: &str = "model,slice_level,class,dice_mean,dice_std,n_slices";
pub const DEFECT_HEADER: &str = "model,class,extra_components,unexpected_holes,evaluated_slices";

fn provenance_line(s: &mut String, provenance: Option<(&str, u64)>) {
    if let Some((hash, seed)) = provenance {
        let _ = writeln!(s, "# config_hash={hash} seed={seed}");
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.9}")).unwrap_or_default()
}

pub fn dice_csv(report: &DiceReport, provenance: Option<(&str, u64)>) -> String {
    let mut s = String::new();
    provenance_line(&mut s, provenance);
    s.push_str(DICE_HEADER);
    s.push('\n');
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{},{},{}", r.model, r.level.name(), r.class.name(), opt(r.mean), opt(r.std), r.n_slices);
    }
    s
}

pub fn defect_csv(report: &DefectReport, provenance: Option<(&str, u64)>) -> String {
    let mut s = String::new();
    provenance_line(&mut s, provenance);
    s.push_str(DEFECT_HEADER);
    s.push('\n');
    for r in &report.rows {
        let _ = writeln!(s, "{},{},{},{},{}", r.model, r.class.name(), r.extra_components, r.unexpected_holes, r.evaluated_slices);
    }
    s
}

pub const DICE_FILE: &str = "dice.csv";
pub const DEFECT_FILE: &str = "defects.csv";

/// Write `dice.csv` and `defects.csv` into `dir`.
pub fn write_reports(dir: &Path, dice: &DiceReport, defects: &DefectReport, provenance: Option<(&str, u64)>) -> Result<()> {
    atomic_write(&dir.join(DICE_FILE), dice_csv(dice, provenance).as_bytes())?;
    atomic_write(&dir.join(DEFECT_FILE), defect_csv(defects, provenance).as_bytes())
}

/// Predicted labels for every test stack.
pub fn predict(pipeline: &Pipeline, samples: &[Sample]) -> Result<Vec<LabelStack>> {
    samples.iter().map(|s| Ok(pipeline.forward(&s.stack)?.labels)).collect()
}

/// Dice and defect reports of a trained pipeline on test samples.
pub fn assess(model: &str, pipeline: &Pipeline, samples: &[Sample]) -> Result<(DiceReport, DefectReport)> {
    let preds = predict(pipeline, samples)?;
    let pairs: Vec<(LabelStack, LabelStack)> = preds.iter().cloned().zip(samples.iter().map(|s| s.labels.clone())).collect();
    Ok((evaluate(model, &pairs)?, defects(model, &preds)))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct AblationConfig {
    pub mode: SliceMode,
    pub variant: Variant,
}

impl AblationConfig {
    pub const SEG_SS: Self = Self { mode: SliceMode::SingleSlice, variant: Variant::SegOnly };
    pub const SEG_AS: Self = Self { mode: SliceMode::AllSlice, variant: Variant::SegOnly };
    pub const REF_NO_MT: Self = Self { mode: SliceMode::AllSlice, variant: Variant::SegRef { multitask: false } };
    pub const REF_MT: Self = Self { mode: SliceMode::AllSlice, variant: Variant::SegRef { multitask: true } };
    pub const SEG_MT: Self = Self { mode: SliceMode::AllSlice, variant: Variant::SegMultitask };

    pub fn name(&self) -> String {
        let m = self.mode.tag();
        match self.variant {
            Variant::SegOnly => format!("Seg({m})"),
            Variant::SegRef { multitask: false } => format!("Seg({m})+Ref({m} w/o MT)"),
            Variant::SegRef { multitask: true } => format!("Seg({m})+Ref({m} w/ MT)"),
            Variant::SegMultitask => format!("Seg({m}+MT)"),
        }
    }

    /// Directory name, e.g. `seg_as_ref_as_w_mt`.
    pub fn slug(&self) -> String {
        let mut s = String::new();
        for c in self.name().chars() {
            if c.is_ascii_alphanumeric() {
                s.push(c.to_ascii_lowercase());
            } else if !s.ends_with('_') {
                s.push('_');
            }
        }
        s.trim_matches('_').to_string()
    }

    pub fn parse(name: &str) -> Result<Self> {
        let all = [SliceMode::SingleSlice, SliceMode::AllSlice].into_iter().flat_map(|mode| {
            [Variant::SegOnly, Variant::SegRef { multitask: false }, Variant::SegRef { multitask: true }, Variant::SegMultitask]
                .into_iter()
                .map(move |variant| Self { mode, variant })
        });
        let compact: String = name.chars().filter(|c| !c.is_whitespace()).collect();
        all.into_iter()
            .find(|c| c.name().chars().filter(|c| !c.is_whitespace()).collect::<String>() == compact)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown ablation configuration {name:?}")))
    }
}

/// Ordered list of configurations to train and compare.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AblationSpec(pub Vec<AblationConfig>);

impl AblationSpec {
    /// The four configurations compared at desk scale.
    pub fn table() -> Self {
        Self(vec![AblationConfig::SEG_SS, AblationConfig::SEG_AS, AblationConfig::REF_NO_MT, AblationConfig::REF_MT])
    }

    /// Table plus the Seg stage with the classifier attached.
    pub fn full() -> Self {
        let mut s = Self::table();
        s.0.push(AblationConfig::SEG_MT);
        s
    }

    pub fn from_names(names: &[String]) -> Result<Self> {
        let v = names.iter().map(|n| AblationConfig::parse(n)).collect::<Result<Vec<_>>>()?;
        let mut seen = std::collections::HashSet::new();
        if let Some(dup) = v.iter().find(|c| !seen.insert(**c)) {
            return Err(Error::InvalidConfig(format!("configuration {} listed twice", dup.name())));
        }
        Ok(Self(v))
    }
}

#[derive(Clone, Debug)]
pub struct AblationResult {
    pub config: AblationConfig,
    pub pipeline: Pipeline,
    pub dice: DiceReport,
    pub defects: DefectReport,
}

/// Train and evaluate every configuration with the same seed and data. Seg stages
/// are shared between configurations that need the same one.
pub fn run_ablation(
    spec: &AblationSpec,
    train: &[Sample],
    test: &[Sample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
) -> Result<Vec<AblationResult>> {
    let mut cache = SegCache::default();
    spec.0.iter().map(|c| run_config(*c, train, test, net, cfg, &mut cache)).collect()
}

/// Trained Seg stages keyed by slice mode and classifier attachment.
#[derive(Default)]
pub struct SegCache(BTreeMap<(u8, bool), TrainedStage>);

pub fn run_config(
    config: AblationConfig,
    train: &[Sample],
    test: &[Sample],
    net: &NetworkConfig,
    cfg: &TrainConfig,
    cache: &mut SegCache,
) -> Result<AblationResult> {
    let cfg = TrainConfig { slice_mode: config.mode, variant: config.variant, ..cfg.clone() };
    let key = (config.mode as u8, config.variant.seg_has_classifier());
    let seg = match cache.0.entry(key) {
        std::collections::btree_map::Entry::Occupied(e) => e.get().model.clone(),
        std::collections::btree_map::Entry::Vacant(e) => {
            e.insert(train_seg(train, net, &cfg, &RunOptions::default())?).model.clone()
        }
    };
    let refine = if config.variant.has_ref() {
        Some(train_ref(train, &seg, net, &cfg, &RunOptions::default())?.model)
    } else {
        None
    };
    let pipeline = Pipeline { mode: config.mode, variant: config.variant, seg, refine };
    let test = prepare_samples(test, &cfg)?;
    let (dice, defects) = assess(&config.name(), &pipeline, &test)?;
    Ok(AblationResult { config, pipeline, dice, defects })
}
