//! Segmentation and calibration metrics.
//!
//! Confusion counts are mergeable value objects: accumulate per image (or
//! per worker), merge, then read dataset-scope ratios from the pooled counts
//! or image-scope means from per-image accumulators. Calibration errors bin
//! top-class confidences (ECE) or every class's probability (SCE), optionally
//! restricted to a boundary mask (BECE/BSCE).

use std::fmt;
use std::io::Write;

use crate::autodiff::Tensor;
use crate::labels::{LabelMap, PixelMask};

/// Default number of equal-width confidence bins.
pub const DEFAULT_BINS: usize = 15;

#[derive(Debug, Clone, PartialEq)]
pub enum MetricError {
    ShapeMismatch { detail: String },
    NoScoredPixels,
    EmptyMaskSelection,
    InvalidBins { bins: usize },
    ClassCountMismatch { expected: usize, actual: usize },
    Io(String),
}

impl fmt::Display for MetricError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MetricError::ShapeMismatch { detail } => write!(f, "shape mismatch: {detail}"),
            MetricError::NoScoredPixels => write!(f, "no scored pixels"),
            MetricError::EmptyMaskSelection => write!(f, "mask selects no pixels"),
            MetricError::InvalidBins { bins } => write!(f, "bin count must be >= 1, got {bins}"),
            MetricError::ClassCountMismatch { expected, actual } => {
                write!(f, "expected {expected} classes, got {actual}")
            }
            MetricError::Io(e) => write!(f, "io error: {e}"),
        }
    }
}

impl std::error::Error for MetricError {}

/// Per-class intersection/union/prediction/label counts plus pixel accuracy
/// counters. Merge of two accumulators equals accumulation over the
/// concatenated pixel stream.
#[derive(Debug, Clone, PartialEq)]
pub struct ConfusionAccumulator {
    classes: usize,
    intersection: Vec<u64>,
    union: Vec<u64>,
    predicted: Vec<u64>,
    labelled: Vec<u64>,
    total: u64,
    correct: u64,
}

impl ConfusionAccumulator {
    pub fn new(classes: usize) -> Self {
        ConfusionAccumulator {
            classes,
            intersection: vec![0; classes],
            union: vec![0; classes],
            predicted: vec![0; classes],
            labelled: vec![0; classes],
            total: 0,
            correct: 0,
        }
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn total(&self) -> u64 {
        self.total
    }

    /// Scores one image; pixels whose true label is the ignore value are
    /// skipped.
    pub fn accumulate(
        &mut self,
        predicted: &LabelMap,
        truth: &LabelMap,
    ) -> Result<(), MetricError> {
        if predicted.height() != truth.height() || predicted.width() != truth.width() {
            return Err(MetricError::ShapeMismatch {
                detail: format!(
                    "predictions {}x{} vs labels {}x{}",
                    predicted.height(),
                    predicted.width(),
                    truth.height(),
                    truth.width()
                ),
            });
        }
        for pixel in 0..truth.pixels() {
            if truth.is_ignored(pixel) {
                continue;
            }
            let t = truth.class_at(pixel) as usize;
            let p = predicted.class_at(pixel) as usize;
            if t >= self.classes || p >= self.classes {
                return Err(MetricError::ClassCountMismatch {
                    expected: self.classes,
                    actual: t.max(p) + 1,
                });
            }
            self.total += 1;
            self.predicted[p] += 1;
            self.labelled[t] += 1;
            if p == t {
                self.correct += 1;
                self.intersection[t] += 1;
                self.union[t] += 1;
            } else {
                self.union[t] += 1;
                self.union[p] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionAccumulator) -> Result<(), MetricError> {
        if self.classes != other.classes {
            return Err(MetricError::ClassCountMismatch {
                expected: self.classes,
                actual: other.classes,
            });
        }
        for c in 0..self.classes {
            self.intersection[c] += other.intersection[c];
            self.union[c] += other.union[c];
            self.predicted[c] += other.predicted[c];
            self.labelled[c] += other.labelled[c];
        }
        self.total += other.total;
        self.correct += other.correct;
        Ok(())
    }

    /// Overall pixel accuracy.
    pub fn accuracy(&self) -> Result<f64, MetricError> {
        if self.total == 0 {
            return Err(MetricError::NoScoredPixels);
        }
        Ok(self.correct as f64 / self.total as f64)
    }

    /// IoU per class; `None` where the union is empty (class absent from
    /// both prediction and label).
    pub fn per_class_iou(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|c| {
                if self.union[c] == 0 {
                    None
                } else {
                    Some(self.intersection[c] as f64 / self.union[c] as f64)
                }
            })
            .collect()
    }
}

/// Pooling scope for mean IoU.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MiouScope {
    /// Ratios of dataset-pooled counts, averaged over classes with nonzero
    /// union.
    Dataset,
    /// Per-image class means averaged over images.
    Image,
}

/// Mean IoU plus the per-class breakdown backing it.
#[derive(Debug, Clone)]
pub struct MiouReport {
    pub scope: MiouScope,
    pub miou: f64,
    /// Dataset scope: pooled per-class IoU. Image scope: per-class mean over
    /// the images where the class occurs.
    pub per_class: Vec<Option<f64>>,
}

/// Dataset-scope mean IoU from one pooled accumulator.
pub fn miou_dataset(acc: &ConfusionAccumulator) -> Result<MiouReport, MetricError> {
    if acc.total == 0 {
        return Err(MetricError::NoScoredPixels);
    }
    let per_class = acc.per_class_iou();
    let present: Vec<f64> = per_class.iter().flatten().cloned().collect();
    if present.is_empty() {
        return Err(MetricError::NoScoredPixels);
    }
    Ok(MiouReport {
        scope: MiouScope::Dataset,
        miou: present.iter().sum::<f64>() / present.len() as f64,
        per_class,
    })
}

/// Image-scope mean IoU from per-image accumulators.
pub fn miou_image(accs: &[ConfusionAccumulator]) -> Result<MiouReport, MetricError> {
    let scored: Vec<&ConfusionAccumulator> = accs.iter().filter(|a| a.total > 0).collect();
    if scored.is_empty() {
        return Err(MetricError::NoScoredPixels);
    }
    let classes = scored[0].classes;
    let mut image_means = Vec::with_capacity(scored.len());
    let mut class_sum = vec![0.0f64; classes];
    let mut class_n = vec![0u64; classes];
    for acc in &scored {
        if acc.classes != classes {
            return Err(MetricError::ClassCountMismatch {
                expected: classes,
                actual: acc.classes,
            });
        }
        let per_class = acc.per_class_iou();
        let present: Vec<f64> = per_class.iter().flatten().cloned().collect();
        if present.is_empty() {
            continue;
        }
        image_means.push(present.iter().sum::<f64>() / present.len() as f64);
        for (c, iou) in per_class.iter().enumerate() {
            if let Some(v) = iou {
                class_sum[c] += v;
                class_n[c] += 1;
            }
        }
    }
    if image_means.is_empty() {
        return Err(MetricError::NoScoredPixels);
    }
    let per_class = (0..classes)
        .map(|c| if class_n[c] == 0 { None } else { Some(class_sum[c] / class_n[c] as f64) })
        .collect();
    Ok(MiouReport {
        scope: MiouScope::Image,
        miou: image_means.iter().sum::<f64>() / image_means.len() as f64,
        per_class,
    })
}

/// Calibration error flavor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CalibrationKind {
    /// Expected calibration error over top-class confidences.
    Ece,
    /// Static calibration error: per-class binned gaps, averaged over
    /// classes.
    Sce,
}

/// One confidence bin: sample count, summed confidence, summed correctness.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct BinStat {
    pub count: u64,
    pub conf_sum: f64,
    pub correct_sum: f64,
}

impl BinStat {
    fn push(&mut self, confidence: f64, correct: bool) {
        self.count += 1;
        self.conf_sum += confidence;
        self.correct_sum += if correct { 1.0 } else { 0.0 };
    }
}

/// Row of an exported reliability table.
#[derive(Debug, Clone)]
pub struct BinRow {
    pub bin_lo: f64,
    pub bin_hi: f64,
    pub count: u64,
    pub mean_conf: f64,
    pub mean_acc: f64,
}

/// Calibration error value plus the bin table that produced it.
#[derive(Debug, Clone)]
pub struct CalibrationReport {
    pub kind: CalibrationKind,
    pub value: f64,
    pub scored: u64,
    /// ECE: the top-class bins. SCE: bins pooled over classes (each class
    /// also contributes its own binned gap to `value`).
    pub bins: Vec<BinRow>,
}

/// Equal-width confidence bins over [0, 1]; the last bin is right-closed.
#[derive(Debug, Clone)]
pub struct CalibrationBins {
    bins: usize,
    stats: Vec<BinStat>,
}

impl CalibrationBins {
    pub fn new(bins: usize) -> Result<Self, MetricError> {
        if bins == 0 {
            return Err(MetricError::InvalidBins { bins });
        }
        Ok(CalibrationBins { bins, stats: vec![BinStat::default(); bins] })
    }

    pub fn push(&mut self, confidence: f64, correct: bool) {
        let idx = ((confidence * self.bins as f64) as usize).min(self.bins - 1);
        self.stats[idx].push(confidence, correct);
    }

    pub fn scored(&self) -> u64 {
        self.stats.iter().map(|b| b.count).sum()
    }

    /// `sum_b (n_b / N) |acc_b - conf_b|` with N the given normalizer.
    pub fn weighted_gap(&self, normalizer: u64) -> f64 {
        if normalizer == 0 {
            return 0.0;
        }
        self.stats
            .iter()
            .filter(|b| b.count > 0)
            .map(|b| {
                let n = b.count as f64;
                (n / normalizer as f64) * ((b.correct_sum / n) - (b.conf_sum / n)).abs()
            })
            .sum()
    }

    pub fn rows(&self) -> Vec<BinRow> {
        self.stats
            .iter()
            .enumerate()
            .map(|(i, b)| BinRow {
                bin_lo: i as f64 / self.bins as f64,
                bin_hi: (i + 1) as f64 / self.bins as f64,
                count: b.count,
                mean_conf: if b.count > 0 { b.conf_sum / b.count as f64 } else { 0.0 },
                mean_acc: if b.count > 0 { b.correct_sum / b.count as f64 } else { 0.0 },
            })
            .collect()
    }

    fn merge_from(&mut self, other: &CalibrationBins) {
        for (a, b) in self.stats.iter_mut().zip(&other.stats) {
            a.count += b.count;
            a.conf_sum += b.conf_sum;
            a.correct_sum += b.correct_sum;
        }
    }
}

/// Computes ECE or SCE for per-pixel class probabilities against true
/// labels.
///
/// `probs` is `(C, H*W)` or `(C, H, W)`. With a mask, only masked pixels are
/// scored (BECE/BSCE); an empty selection is an error. Ignored pixels are
/// always skipped. Argmax ties resolve to the lowest class index.
pub fn calibration_error(
    probs: &Tensor,
    truth: &LabelMap,
    bins: usize,
    kind: CalibrationKind,
    mask: Option<&PixelMask>,
) -> Result<CalibrationReport, MetricError> {
    if bins == 0 {
        return Err(MetricError::InvalidBins { bins });
    }
    if probs.shape().is_empty() {
        return Err(MetricError::NoScoredPixels);
    }
    let classes = probs.shape()[0];
    let pixels = probs.len() / classes;
    if pixels != truth.pixels() {
        return Err(MetricError::ShapeMismatch {
            detail: format!("{pixels} probability columns vs {} label pixels", truth.pixels()),
        });
    }
    if let Some(m) = mask {
        if m.height() != truth.height() || m.width() != truth.width() {
            return Err(MetricError::ShapeMismatch {
                detail: "mask and label map sizes differ".to_string(),
            });
        }
        if m.count() == 0 {
            return Err(MetricError::EmptyMaskSelection);
        }
    }

    let scored_pixels: Vec<usize> = (0..pixels)
        .filter(|&p| !truth.is_ignored(p) && mask.map_or(true, |m| m.get(p)))
        .collect();
    if scored_pixels.is_empty() {
        return Err(if mask.is_some() {
            MetricError::EmptyMaskSelection
        } else {
            MetricError::NoScoredPixels
        });
    }

    match kind {
        CalibrationKind::Ece => {
            let mut table = CalibrationBins::new(bins)?;
            for &p in &scored_pixels {
                let mut best = probs.data()[p];
                let mut arg = 0usize;
                for c in 1..classes {
                    let v = probs.data()[c * pixels + p];
                    if v > best {
                        best = v;
                        arg = c;
                    }
                }
                table.push(best, arg == truth.class_at(p) as usize);
            }
            let n = table.scored();
            Ok(CalibrationReport {
                kind,
                value: table.weighted_gap(n),
                scored: n,
                bins: table.rows(),
            })
        }
        CalibrationKind::Sce => {
            let n = scored_pixels.len() as u64;
            let mut value = 0.0;
            let mut pooled = CalibrationBins::new(bins)?;
            for c in 0..classes {
                let mut table = CalibrationBins::new(bins)?;
                for &p in &scored_pixels {
                    let conf = probs.data()[c * pixels + p];
                    table.push(conf, truth.class_at(p) as usize == c);
                }
                value += table.weighted_gap(n);
                pooled.merge_from(&table);
            }
            Ok(CalibrationReport {
                kind,
                value: value / classes as f64,
                scored: n,
                bins: pooled.rows(),
            })
        }
    }
}

/// Writes a reliability table as CSV (`bin_lo,bin_hi,count,mean_conf,mean_acc`).
pub fn write_bins_csv<W: Write>(out: &mut W, rows: &[BinRow]) -> Result<(), MetricError> {
    let io = |e: std::io::Error| MetricError::Io(e.to_string());
    writeln!(out, "bin_lo,bin_hi,count,mean_conf,mean_acc").map_err(io)?;
    for r in rows {
        writeln!(out, "{},{},{},{},{}", r.bin_lo, r.bin_hi, r.count, r.mean_conf, r.mean_acc)
            .map_err(io)?;
    }
    Ok(())
}

/// Writes per-class IoU as CSV (`class,iou`); absent classes export an empty
/// field.
pub fn write_per_class_iou_csv<W: Write>(
    out: &mut W,
    per_class: &[Option<f64>],
) -> Result<(), MetricError> {
    let io = |e: std::io::Error| MetricError::Io(e.to_string());
    writeln!(out, "class,iou").map_err(io)?;
    for (c, iou) in per_class.iter().enumerate() {
        match iou {
            Some(v) => writeln!(out, "{c},{v}").map_err(io)?,
            None => writeln!(out, "{c},").map_err(io)?,
        }
    }
    Ok(())
}
