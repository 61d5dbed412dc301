//! Slice-wise, class-wise metrics, baseline-relative normalization, ranking
//! across seeds and volumes, and paired significance tests.

mod rank;
mod stats;

pub use rank::{rank_models, RankEntry, RankTable};
pub use stats::{mean_ci95, paired_ttest, paired_ttest_one_sided, significance_tier, Alternative, TTest};

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::SliceBatch;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::synthdata::{Mask, Volume};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub model_id: String,
    pub seed: u64,
    #[serde(rename = "domain")]
    pub domain_id: String,
    #[serde(rename = "volume")]
    pub volume_id: String,
    #[serde(rename = "slice")]
    pub slice_index: usize,
    #[serde(rename = "class")]
    pub class_name: String,
    /// Percent.
    pub dice: f64,
    /// Femtolitres.
    pub uvd: f64,
}

impl MetricRecord {
    fn key(&self) -> (&str, u64, &str, &str, usize, &str) {
        (
            &self.model_id,
            self.seed,
            &self.domain_id,
            &self.volume_id,
            self.slice_index,
            &self.class_name,
        )
    }
}

pub fn sort_records(records: &mut [MetricRecord]) {
    records.sort_by(|a, b| a.key().cmp(&b.key()));
}

fn overlap_counts(pred: &[u8], gt: &[u8]) -> (usize, usize, usize) {
    let (mut tp, mut fp, mut fn_) = (0, 0, 0);
    for (&p, &g) in pred.iter().zip(gt) {
        match (p > 0, g > 0) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fn_ += 1,
            _ => {}
        }
    }
    (tp, fp, fn_)
}

fn check_masks(pred: &Mask, gt: &Mask) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::Shape(format!("masks {:?} vs {:?}", pred.shape(), gt.shape())));
    }
    Ok(())
}

fn dice_from_counts(tp: usize, fp: usize, fn_: usize) -> f64 {
    let denom = 2 * tp + fp + fn_;
    if denom == 0 {
        100.0
    } else {
        100.0 * (2 * tp) as f64 / denom as f64
    }
}

/// Dice in percent; two empty masks score 100.
pub fn dice_score(pred: &Mask, gt: &Mask) -> Result<f64> {
    check_masks(pred, gt)?;
    let (tp, fp, fn_) = overlap_counts(&pred.data, &gt.data);
    Ok(dice_from_counts(tp, fp, fn_))
}

/// Unnormalized volume dissimilarity `(FP + FN) · area · spacing` in fL.
pub fn uvd(pred: &Mask, gt: &Mask, pixel_area_um2: f64, slice_spacing_um: f64) -> Result<f64> {
    check_masks(pred, gt)?;
    if !(pixel_area_um2 > 0.0 && slice_spacing_um > 0.0) {
        return Err(Error::validation("geometry", "pixel area and slice spacing must be positive"));
    }
    let (_, fp, fn_) = overlap_counts(&pred.data, &gt.data);
    Ok((fp + fn_) as f64 * pixel_area_um2 * slice_spacing_um)
}

const EVAL_BATCH: usize = 16;

/// Per labeled slice and per class of the volume's domain: binarize at
/// `p >= threshold` and score. Dropout is off.
pub fn evaluate_model<'v>(
    state: &ModelState,
    volumes: impl IntoIterator<Item = &'v Volume>,
    threshold: f64,
    model_id: &str,
    seed: u64,
) -> Result<Vec<MetricRecord>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::validation("threshold", "must lie in (0, 1)"));
    }
    let classes = state.arch.classes();
    let mut out = Vec::new();
    for v in volumes {
        let labels_present = v.labels.is_some();
        if !labels_present {
            continue;
        }
        let channel: Vec<usize> = v
            .class_set
            .iter()
            .map(|c| {
                classes.iter().position(|m| m == c).ok_or_else(|| {
                    Error::Shape(format!("domain `{}` class `{c}` is not a model output ({})", v.domain_id, classes.join(",")))
                })
            })
            .collect::<Result<_>>()?;
        let plane = v.plane_len();
        let area = v.pixel_area_um2();
        let spacing = v.resolution.2;
        for chunk in v.labeled_slice_indices.chunks(EVAL_BATCH) {
            let images: Vec<_> = chunk.iter().map(|&s| v.slice(s)).collect();
            let refs = chunk.iter().map(|&s| crate::batch::SliceRef::of(v, s)).collect();
            let probs = state.forward_segment(&SliceBatch::from_images(&images, refs))?;
            for (bi, &s) in chunk.iter().enumerate() {
                let sample = probs.sample(bi);
                for (k, &ch) in channel.iter().enumerate() {
                    let p = &sample[ch * plane..(ch + 1) * plane];
                    let pred: Vec<u8> = p.iter().map(|&x| u8::from(x as f64 >= threshold)).collect();
                    let gt = v.label_data(s, k).expect("labels present");
                    let (tp, fp, fn_) = overlap_counts(&pred, gt);
                    out.push(MetricRecord {
                        model_id: model_id.to_string(),
                        seed,
                        domain_id: v.domain_id.clone(),
                        volume_id: v.volume_id.clone(),
                        slice_index: s,
                        class_name: v.class_set[k].clone(),
                        dice: dice_from_counts(tp, fp, fn_),
                        uvd: (fp + fn_) as f64 * area * spacing,
                    });
                }
            }
        }
    }
    Ok(out)
}

fn class_mean(records: &[MetricRecord], pick: fn(&MetricRecord) -> f64) -> Option<f64> {
    let mut per_class: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = per_class.entry(&r.class_name).or_default();
        e.0 += pick(r);
        e.1 += 1;
    }
    if per_class.is_empty() {
        return None;
    }
    Some(per_class.values().map(|(s, n)| s / *n as f64).sum::<f64>() / per_class.len() as f64)
}

/// Mean over classes of the per-class slice-mean Dice.
pub fn mean_dice(records: &[MetricRecord]) -> Option<f64> {
    class_mean(records, |r| r.dice)
}

/// Mean over classes of the per-class slice-mean UVD.
pub fn mean_uvd(records: &[MetricRecord]) -> Option<f64> {
    class_mean(records, |r| r.uvd)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelativeMetric {
    pub model_id: String,
    pub seed: u64,
    /// Percent change of Dice against the baseline class means.
    pub rel_dice: f64,
    /// Percent change of UVD against the baseline class means.
    pub rel_uvd: f64,
}

/// Per class, normalize by the mean over all baseline records of that class;
/// then average slices within a class and classes with equal weight, per
/// (model, seed). Classes whose baseline mean is zero are dropped for that
/// metric.
pub fn relative_metrics(records: &[MetricRecord], baseline: &[MetricRecord]) -> Result<Vec<RelativeMetric>> {
    let mut base: BTreeMap<&str, (f64, f64, usize)> = BTreeMap::new();
    for r in baseline {
        let e = base.entry(&r.class_name).or_default();
        e.0 += r.dice;
        e.1 += r.uvd;
        e.2 += 1;
    }
    let mut cells: BTreeMap<(&str, u64), BTreeMap<&str, (f64, f64, usize)>> = BTreeMap::new();
    for r in records {
        let &(bd, bu, bn) = base
            .get(r.class_name.as_str())
            .ok_or_else(|| Error::Missing(format!("baseline records for class `{}`", r.class_name)))?;
        let (md, mu) = (bd / bn as f64, bu / bn as f64);
        let e = cells.entry((&r.model_id, r.seed)).or_default().entry(&r.class_name).or_default();
        e.0 += if md != 0.0 { 100.0 * (r.dice / md - 1.0) } else { f64::NAN };
        e.1 += if mu != 0.0 { 100.0 * (r.uvd / mu - 1.0) } else { f64::NAN };
        e.2 += 1;
    }
    let mut warned = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for ((model, seed), classes) in cells {
        let mut avg = |pick: fn(&(f64, f64, usize)) -> f64, metric: &'static str| {
            let vals: Vec<f64> = classes
                .iter()
                .filter_map(|(c, e)| {
                    let v = pick(e) / e.2 as f64;
                    if v.is_nan() {
                        if warned.insert((metric, c.to_string())) {
                            log::warn!("baseline mean {metric} of class `{c}` is zero; class excluded");
                        }
                        None
                    } else {
                        Some(v)
                    }
                })
                .collect();
            if vals.is_empty() {
                f64::NAN
            } else {
                vals.iter().sum::<f64>() / vals.len() as f64
            }
        };
        let rel_dice = avg(|e| e.0, "dice");
        let rel_uvd = avg(|e| e.1, "uvd");
        out.push(RelativeMetric {
            model_id: model.to_string(),
            seed,
            rel_dice,
            rel_uvd,
        });
    }
    Ok(out)
}

pub fn write_records(path: &Path, records: &[MetricRecord]) -> Result<()> {
    let mut sorted = records.to_vec();
    sort_records(&mut sorted);
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    for r in &sorted {
        w.serialize(r).map_err(|e| Error::format(path, e.to_string()))?;
    }
    if sorted.is_empty() {
        w.write_record(["model_id", "seed", "domain", "volume", "slice", "class", "dice", "uvd"])
            .map_err(|e| Error::format(path, e.to_string()))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_records(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut r = csv::Reader::from_path(path).map_err(|e| Error::format(path, e.to_string()))?;
    r.deserialize()
        .map(|row| row.map_err(|e| Error::format(path, e.to_string())))
        .collect()
}
