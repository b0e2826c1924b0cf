//! Overlap metrics and their aggregation over slices and volumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::Mask;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Id,
    Ood,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "id" => Ok(Scope::Id),
            "ood" => Ok(Scope::Ood),
            other => Err(Error::Config(format!("unknown scope `{other}` (id|ood)"))),
        }
    }
}

impl std::fmt::Display for Scope {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Scope::Id => "id",
            Scope::Ood => "ood",
        })
    }
}

/// Set counts of one prediction/truth pair.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Overlap {
    pub intersection: u64,
    pub predicted: u64,
    pub truth: u64,
}

impl Overlap {
    pub fn count(pred: &Mask, truth: &Mask) -> Result<Self> {
        if pred.shape() != truth.shape() {
            return Err(Error::Contract(format!(
                "mask shapes differ: {:?} vs {:?}",
                pred.shape(),
                truth.shape()
            )));
        }
        let mut o = Overlap::default();
        for (&p, &t) in pred.data().iter().zip(truth.data()) {
            let (p, t) = (p != 0, t != 0);
            o.intersection += u64::from(p && t);
            o.predicted += u64::from(p);
            o.truth += u64::from(t);
        }
        Ok(o)
    }

    pub fn union(&self) -> u64 {
        self.predicted + self.truth - self.intersection
    }

    /// Dice and IoU; two empty sets agree perfectly.
    pub fn dice_iou(&self) -> (f64, f64) {
        let denom = self.predicted + self.truth;
        if denom == 0 {
            return (1.0, 1.0);
        }
        let dice = 2.0 * self.intersection as f64 / denom as f64;
        let iou = self.intersection as f64 / self.union() as f64;
        (dice, iou)
    }
}

pub fn dice_iou(pred: &Mask, truth: &Mask) -> Result<(f64, f64)> {
    Ok(Overlap::count(pred, truth)?.dice_iou())
}

/// Arithmetic mean of in-distribution and out-of-distribution dice, in the unit of its inputs.
pub fn mdice(id_dice: f64, ood_dice: f64) -> f64 {
    0.5 * (id_dice + ood_dice)
}

/// Rounds to `decimals` places, ties to even, after discarding binary noise below 1e-9 of a unit
/// in the last place; `86.45` becomes `86.4` and `86.55` becomes `86.6`.
pub fn round_half_even(value: f64, decimals: u32) -> f64 {
    let scale = 10f64.powi(decimals as i32);
    let x = value * scale;
    let cleaned = (x * 1e9).round() / 1e9;
    let floor = cleaned.floor();
    let frac = cleaned - floor;
    let r = if (frac - 0.5).abs() < 1e-12 {
        if floor % 2.0 == 0.0 { floor } else { floor + 1.0 }
    } else {
        cleaned.round()
    };
    r / scale
}

/// Mean and population standard deviation.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Aggregation {
    PerVolume,
    PerSlice,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceScore {
    pub volume_id: String,
    pub slice: usize,
    pub dice: f64,
    pub iou: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VolumeScore {
    pub volume_id: String,
    pub dice: f64,
    pub iou: f64,
    pub slices_scored: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub dice_mean: f64,
    pub dice_std: f64,
    pub iou_mean: f64,
    pub iou_std: f64,
    pub count: usize,
}

/// Scores the slices of one volume.
///
/// Slices with an empty truth count only when something was predicted (scored 0);
/// otherwise they are skipped, so the result may be empty.
pub fn score_slices(volume_id: &str, preds: &[Mask], truths: &[Mask]) -> Result<Vec<SliceScore>> {
    if preds.len() != truths.len() {
        return Err(Error::Contract(format!(
            "volume {volume_id}: {} predictions for {} masks",
            preds.len(),
            truths.len()
        )));
    }
    let mut out = Vec::new();
    for (k, (p, t)) in preds.iter().zip(truths).enumerate() {
        let o = Overlap::count(p, t)?;
        if o.truth == 0 && o.predicted == 0 {
            continue;
        }
        let (dice, iou) = o.dice_iou();
        out.push(SliceScore {
            volume_id: volume_id.to_string(),
            slice: k,
            dice,
            iou,
        });
    }
    Ok(out)
}

pub fn volume_score(volume_id: &str, slices: &[SliceScore]) -> Option<VolumeScore> {
    if slices.is_empty() {
        return None;
    }
    let n = slices.len() as f64;
    Some(VolumeScore {
        volume_id: volume_id.to_string(),
        dice: slices.iter().map(|s| s.dice).sum::<f64>() / n,
        iou: slices.iter().map(|s| s.iou).sum::<f64>() / n,
        slices_scored: slices.len(),
    })
}

fn summarize(pairs: impl Iterator<Item = (f64, f64)>) -> Summary {
    let (dice, iou): (Vec<f64>, Vec<f64>) = pairs.unzip();
    let (dice_mean, dice_std) = mean_std(&dice);
    let (iou_mean, iou_std) = mean_std(&iou);
    Summary {
        dice_mean,
        dice_std,
        iou_mean,
        iou_std,
        count: dice.len(),
    }
}

/// Evaluation result of one trained model on one test set.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub protocol: String,
    pub pipeline: String,
    /// Free-form variant label, e.g. an ablation row name.
    pub label: String,
    pub scope: Scope,
    pub aggregation: Aggregation,
    pub per_volume: Vec<VolumeScore>,
    pub per_slice: Vec<SliceScore>,
    /// Volumes without any scored slice.
    pub excluded: Vec<String>,
    pub summary: Summary,
}

impl MetricReport {
    pub fn from_slices(
        protocol: &str,
        pipeline: &str,
        label: &str,
        scope: Scope,
        aggregation: Aggregation,
        volumes: Vec<(String, Vec<SliceScore>)>,
    ) -> Result<Self> {
        if volumes.is_empty() {
            return Err(Error::Evaluation("empty test set".into()));
        }
        let mut per_volume = Vec::new();
        let mut per_slice = Vec::new();
        let mut excluded = Vec::new();
        for (id, slices) in volumes {
            match volume_score(&id, &slices) {
                Some(v) => per_volume.push(v),
                None => excluded.push(id),
            }
            per_slice.extend(slices);
        }
        let summary = match aggregation {
            Aggregation::PerVolume => summarize(per_volume.iter().map(|v| (v.dice, v.iou))),
            Aggregation::PerSlice => summarize(per_slice.iter().map(|s| (s.dice, s.iou))),
        };
        Ok(Self {
            protocol: protocol.to_string(),
            pipeline: pipeline.to_string(),
            label: label.to_string(),
            scope,
            aggregation,
            per_volume,
            per_slice,
            excluded,
            summary,
        })
    }

    /// Per-volume rows followed by a summary row.
    pub fn write_csv(&self, path: &std::path::Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["volume_id", "dice", "iou", "slices_scored"])?;
        for v in &self.per_volume {
            w.write_record([
                v.volume_id.clone(),
                format!("{:.6}", v.dice),
                format!("{:.6}", v.iou),
                v.slices_scored.to_string(),
            ])?;
        }
        let s = &self.summary;
        w.write_record([
            "mean".to_string(),
            format!("{:.6}", s.dice_mean),
            format!("{:.6}", s.iou_mean),
            s.count.to_string(),
        ])?;
        w.write_record([
            "std_population".to_string(),
            format!("{:.6}", s.dice_std),
            format!("{:.6}", s.iou_std),
            s.count.to_string(),
        ])?;
        w.flush().map_err(|e| Error::io(path, e))?;
        Ok(())
    }
}
