//! Overlap metrics between a predicted and a ground-truth mask.

use std::collections::BTreeMap;

use crate::error::{invalid, Result};
use crate::raster::BinaryMask;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

impl ConfusionCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.fn_ + self.tn
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Metrics {
    pub dice: f64,
    pub jaccard: f64,
    pub recall: f64,
    pub accuracy: f64,
    pub voe: f64,
}

impl Metrics {
    pub const HEADER: &'static str = "dice,jaccard,recall,accuracy,voe";

    pub fn values(&self) -> [f64; 5] {
        [self.dice, self.jaccard, self.recall, self.accuracy, self.voe]
    }

    /// Comma-separated with 4 decimals.
    pub fn csv_fields(&self) -> String {
        self.values().iter().map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(",")
    }

    fn mean<'a>(rows: impl IntoIterator<Item = &'a Metrics>) -> Metrics {
        let mut sum = [0.0; 5];
        let mut n = 0usize;
        for r in rows {
            for (s, v) in sum.iter_mut().zip(r.values()) {
                *s += v;
            }
            n += 1;
        }
        let m = sum.map(|s| s / n.max(1) as f64);
        Metrics {
            dice: m[0],
            jaccard: m[1],
            recall: m[2],
            accuracy: m[3],
            voe: m[4],
        }
    }
}

pub fn confusion_counts(pred: &BinaryMask, gt: &BinaryMask) -> Result<ConfusionCounts> {
    pred.check_same(gt, "confusion_counts")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p, g) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
            (false, false) => c.tn += 1,
        }
    }
    Ok(c)
}

/// Dice, Jaccard, Recall, Accuracy `(TP + TN) / total` and VOE `1 - J`.
/// Two empty masks count as perfect agreement.
pub fn compute_metrics(c: &ConfusionCounts) -> Result<Metrics> {
    if c.total() == 0 {
        return Err(invalid("metrics need at least one pixel"));
    }
    let (tp, fp, fn_, tn) = (c.tp as f64, c.fp as f64, c.fn_ as f64, c.tn as f64);
    let union = tp + fp + fn_;
    let (dice, jaccard) = if union == 0.0 {
        (1.0, 1.0)
    } else {
        (2.0 * tp / (2.0 * tp + fp + fn_), tp / union)
    };
    // an empty ground truth is fully recalled by any prediction
    let recall = if tp + fn_ == 0.0 { 1.0 } else { tp / (tp + fn_) };
    Ok(Metrics {
        dice,
        jaccard,
        recall,
        accuracy: (tp + tn) / c.total() as f64,
        voe: 1.0 - jaccard,
    })
}

pub fn score(pred: &BinaryMask, gt: &BinaryMask) -> Result<Metrics> {
    compute_metrics(&confusion_counts(pred, gt)?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImageMetrics {
    pub image_id: String,
    pub metrics: Metrics,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub images: Vec<ImageMetrics>,
    /// Class name and unweighted mean of its images, sorted by name.
    pub classes: Vec<(String, Metrics)>,
    /// Unweighted mean over all image rows.
    pub overall: Metrics,
}

/// Groups rows by `class_of(image_id)`; unknown images are rejected.
pub fn aggregate(rows: &[ImageMetrics], class_of: impl Fn(&str) -> Option<String>) -> Result<MetricsReport> {
    if rows.is_empty() {
        return Err(invalid("no metric rows to aggregate"));
    }
    let mut groups: BTreeMap<String, Vec<&Metrics>> = BTreeMap::new();
    for r in rows {
        let class = class_of(&r.image_id).ok_or_else(|| invalid(format!("no class for image `{}`", r.image_id)))?;
        groups.entry(class).or_default().push(&r.metrics);
    }
    Ok(MetricsReport {
        images: rows.to_vec(),
        classes: groups
            .into_iter()
            .map(|(c, ms)| (c, Metrics::mean(ms)))
            .collect(),
        overall: Metrics::mean(rows.iter().map(|r| &r.metrics)),
    })
}

impl MetricsReport {
    /// `image_id,dice,jaccard,recall,accuracy,voe`
    pub fn per_image_csv(&self) -> String {
        let mut out = format!("image_id,{}\n", Metrics::HEADER);
        for r in &self.images {
            out.push_str(&format!("{},{}\n", r.image_id, r.metrics.csv_fields()));
        }
        out
    }

    /// `class,dice,jaccard,recall,accuracy,voe`
    pub fn per_class_csv(&self) -> String {
        let mut out = format!("class,{}\n", Metrics::HEADER);
        for (c, m) in &self.classes {
            out.push_str(&format!("{c},{}\n", m.csv_fields()));
        }
        out
    }

    /// Header plus a single row.
    pub fn overall_csv(&self) -> String {
        format!("{}\n{}\n", Metrics::HEADER, self.overall.csv_fields())
    }
}
