//! Pixel confusion counts, overlap metrics and image-level screening.
//!
//! A ratio whose denominator is zero is reported as 1.0 and marked
//! vacuous (for example sensitivity on an image without exudates).

use std::fmt;
use std::ops::{Add, AddAssign};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::tensor::{ensure_same_shape, Scalar, Tensor};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    /// Rejects the all-zero tally.
    pub fn new(tp: u64, fp: u64, tn: u64, fn_: u64) -> Result<Self> {
        let c = ConfusionCounts { tp, fp, tn, fn_ };
        if c.total() == 0 {
            return Err(Error::InvalidArgument("confusion counts must cover at least one pixel".into()));
        }
        Ok(c)
    }

    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

impl Add for ConfusionCounts {
    type Output = ConfusionCounts;

    fn add(self, o: ConfusionCounts) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp + o.tp, fp: self.fp + o.fp, tn: self.tn + o.tn, fn_: self.fn_ + o.fn_ }
    }
}

impl AddAssign for ConfusionCounts {
    fn add_assign(&mut self, o: ConfusionCounts) {
        *self = *self + o;
    }
}

/// A metric value and whether it came from a zero denominator.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Ratio {
    pub value: f64,
    pub vacuous: bool,
}

fn ratio(num: u64, den: u64) -> Ratio {
    if den == 0 {
        Ratio { value: 1.0, vacuous: true }
    } else {
        Ratio { value: num as f64 / den as f64, vacuous: false }
    }
}

pub fn precision_ratio(c: &ConfusionCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fp)
}

pub fn sensitivity_ratio(c: &ConfusionCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fn_)
}

pub fn specificity_ratio(c: &ConfusionCounts) -> Ratio {
    ratio(c.tn, c.tn + c.fp)
}

pub fn accuracy_ratio(c: &ConfusionCounts) -> Ratio {
    ratio(c.tp + c.tn, c.total())
}

pub fn dice_ratio(c: &ConfusionCounts) -> Ratio {
    ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn_)
}

pub fn iou_ratio(c: &ConfusionCounts) -> Ratio {
    ratio(c.tp, c.tp + c.fp + c.fn_)
}

/// `tp / (tp + fp)`
pub fn precision(c: &ConfusionCounts) -> f64 {
    precision_ratio(c).value
}

/// `tp / (tp + fn)`, also called recall.
pub fn sensitivity(c: &ConfusionCounts) -> f64 {
    sensitivity_ratio(c).value
}

/// `tn / (tn + fp)`
pub fn specificity(c: &ConfusionCounts) -> f64 {
    specificity_ratio(c).value
}

/// `(tp + tn) / total`
pub fn accuracy(c: &ConfusionCounts) -> f64 {
    accuracy_ratio(c).value
}

/// `2tp / (2tp + fp + fn)`
pub fn dice(c: &ConfusionCounts) -> f64 {
    dice_ratio(c).value
}

/// `tp / (tp + fp + fn)`
pub fn iou(c: &ConfusionCounts) -> f64 {
    iou_ratio(c).value
}

fn binary_check<T: Scalar>(t: &Tensor<T>, what: &str) -> Result<()> {
    match t.data().iter().find(|&&v| v != T::zero() && v != T::one()) {
        Some(v) => Err(Error::InvalidArgument(format!("{what} mask is not binary (found {v})"))),
        None => Ok(()),
    }
}

/// Per-pixel tally of `pred` against `gt`; both binary and congruent.
pub fn pixel_confusion<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>) -> Result<ConfusionCounts> {
    ensure_same_shape("pixel_confusion", pred.shape(), gt.shape())?;
    binary_check(pred, "predicted")?;
    binary_check(gt, "ground-truth")?;
    let mut c = ConfusionCounts::default();
    for (&p, &g) in pred.data().iter().zip(gt.data()) {
        match (p == T::one(), g == T::one()) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    ConfusionCounts::new(c.tp, c.fp, c.tn, c.fn_)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ScreenCategory {
    Tp,
    Tn,
    Fp,
    Fn,
}

impl fmt::Display for ScreenCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ScreenCategory::Tp => "TP",
            ScreenCategory::Tn => "TN",
            ScreenCategory::Fp => "FP",
            ScreenCategory::Fn => "FN",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ScreeningVerdict {
    pub category: ScreenCategory,
    pub min_area: usize,
}

/// Image-level call: a mask "has exudate" when it has at least `min_area`
/// positive pixels.
pub fn screen_image<T: Scalar>(pred: &Tensor<T>, gt: &Tensor<T>, min_area: usize) -> Result<ScreeningVerdict> {
    ensure_same_shape("screen_image", pred.shape(), gt.shape())?;
    let positives = |t: &Tensor<T>| t.data().iter().filter(|&&v| v > T::zero()).count();
    Ok(screen_counts(positives(pred), positives(gt), min_area))
}

/// [`screen_image`] from positive-pixel counts alone.
pub fn screen_counts(pred_positives: usize, gt_positives: usize, min_area: usize) -> ScreeningVerdict {
    let category = match (pred_positives >= min_area, gt_positives >= min_area) {
        (true, true) => ScreenCategory::Tp,
        (false, false) => ScreenCategory::Tn,
        (true, false) => ScreenCategory::Fp,
        (false, true) => ScreenCategory::Fn,
    };
    ScreeningVerdict { category, min_area }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Averaging {
    /// Metrics of the summed counts.
    #[default]
    Micro,
    /// Mean of per-image metrics.
    Macro,
}

impl fmt::Display for Averaging {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Averaging::Micro => "micro",
            Averaging::Macro => "macro",
        })
    }
}

impl FromStr for Averaging {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "micro" => Ok(Averaging::Micro),
            "macro" => Ok(Averaging::Macro),
            o => Err(format!("unknown averaging `{o}` (expected micro or macro)")),
        }
    }
}

/// Evaluation of one image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub id: String,
    pub counts: ConfusionCounts,
    pub verdict: ScreeningVerdict,
}

impl ImageEval {
    pub fn new<T: Scalar>(id: impl Into<String>, pred: &Tensor<T>, gt: &Tensor<T>, min_area: usize) -> Result<Self> {
        Ok(ImageEval { id: id.into(), counts: pixel_confusion(pred, gt)?, verdict: screen_image(pred, gt, min_area)? })
    }
}

/// Pixel-level metrics in report order.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PixelMetrics {
    pub accuracy: Ratio,
    pub sensitivity: Ratio,
    pub specificity: Ratio,
    pub precision: Ratio,
    pub dice: Ratio,
    pub iou: Ratio,
}

impl PixelMetrics {
    pub fn of(c: &ConfusionCounts) -> PixelMetrics {
        PixelMetrics {
            accuracy: accuracy_ratio(c),
            sensitivity: sensitivity_ratio(c),
            specificity: specificity_ratio(c),
            precision: precision_ratio(c),
            dice: dice_ratio(c),
            iou: iou_ratio(c),
        }
    }

    fn named(&self) -> [(&'static str, Ratio); 6] {
        [
            ("ACC", self.accuracy),
            ("SN", self.sensitivity),
            ("SP", self.specificity),
            ("PR", self.precision),
            ("DICE", self.dice),
            ("IOU", self.iou),
        ]
    }

    /// Mean over images; a mean is vacuous only if every term was.
    fn macro_mean(all: &[PixelMetrics]) -> PixelMetrics {
        let mean = |f: fn(&PixelMetrics) -> Ratio| {
            let n = all.len() as f64;
            Ratio { value: all.iter().map(|m| f(m).value).sum::<f64>() / n, vacuous: all.iter().all(|m| f(m).vacuous) }
        };
        PixelMetrics {
            accuracy: mean(|m| m.accuracy),
            sensitivity: mean(|m| m.sensitivity),
            specificity: mean(|m| m.specificity),
            precision: mean(|m| m.precision),
            dice: mean(|m| m.dice),
            iou: mean(|m| m.iou),
        }
    }
}

/// Image-level screening tallies.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ScreeningCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ScreeningCounts {
    pub fn as_confusion(&self) -> ConfusionCounts {
        ConfusionCounts { tp: self.tp, fp: self.fp, tn: self.tn, fn_: self.fn_ }
    }

    pub fn accuracy(&self) -> Ratio {
        accuracy_ratio(&self.as_confusion())
    }

    pub fn sensitivity(&self) -> Ratio {
        sensitivity_ratio(&self.as_confusion())
    }

    pub fn specificity(&self) -> Ratio {
        specificity_ratio(&self.as_confusion())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Report {
    pub dataset: String,
    pub images: usize,
    pub averaging: Averaging,
    pub counts: ConfusionCounts,
    pub pixel: PixelMetrics,
    pub screening: ScreeningCounts,
}

/// Summary row over `evals`, which must be non-empty.
pub fn aggregate_report(dataset: &str, evals: &[ImageEval], averaging: Averaging) -> Result<Report> {
    if evals.is_empty() {
        return Err(Error::InvalidArgument("cannot aggregate a report over zero images".into()));
    }
    let counts = evals.iter().fold(ConfusionCounts::default(), |acc, e| acc + e.counts);
    let pixel = match averaging {
        Averaging::Micro => PixelMetrics::of(&counts),
        Averaging::Macro => {
            PixelMetrics::macro_mean(&evals.iter().map(|e| PixelMetrics::of(&e.counts)).collect::<Vec<_>>())
        }
    };
    let mut screening = ScreeningCounts::default();
    for e in evals {
        match e.verdict.category {
            ScreenCategory::Tp => screening.tp += 1,
            ScreenCategory::Tn => screening.tn += 1,
            ScreenCategory::Fp => screening.fp += 1,
            ScreenCategory::Fn => screening.fn_ += 1,
        }
    }
    Ok(Report { dataset: dataset.to_string(), images: evals.len(), averaging, counts, pixel, screening })
}

pub const REPORT_COLUMNS: [&str; 13] =
    ["dataset", "images", "ACC", "SN", "SP", "PR", "DICE", "IOU", "IMG_ACC", "IMG_SN", "IMG_SP", "averaging", "vacuous"];

impl Report {
    fn cells(&self) -> Vec<String> {
        let f = |r: Ratio| format!("{:.4}", r.value);
        let image = [("IMG_ACC", self.screening.accuracy()), ("IMG_SN", self.screening.sensitivity()), ("IMG_SP", self.screening.specificity())];
        let vacuous: Vec<&str> =
            self.pixel.named().iter().chain(image.iter()).filter(|(_, r)| r.vacuous).map(|(n, _)| *n).collect();
        let mut row = vec![self.dataset.clone(), self.images.to_string()];
        row.extend(self.pixel.named().iter().map(|(_, r)| f(*r)));
        row.extend(image.iter().map(|(_, r)| f(*r)));
        row.push(self.averaging.to_string());
        row.push(if vacuous.is_empty() { "-".into() } else { vacuous.join(",") });
        row
    }
}

/// Header plus one tab-separated row per report.
pub fn reports_tsv(reports: &[Report]) -> String {
    let mut s = REPORT_COLUMNS.join("\t");
    s.push('\n');
    for r in reports {
        s.push_str(&r.cells().join("\t"));
        s.push('\n');
    }
    s
}

/// The same rows as [`reports_tsv`], space-aligned for reading.
pub fn reports_table(reports: &[Report]) -> String {
    let rows: Vec<Vec<String>> = std::iter::once(REPORT_COLUMNS.iter().map(|s| s.to_string()).collect())
        .chain(reports.iter().map(Report::cells))
        .collect();
    let widths: Vec<usize> = (0..REPORT_COLUMNS.len()).map(|i| rows.iter().map(|r| r[i].len()).max().unwrap_or(0)).collect();
    let mut s = String::new();
    for row in &rows {
        let line: Vec<String> = row.iter().zip(&widths).map(|(c, w)| format!("{c:<w$}")).collect();
        s.push_str(line.join("  ").trim_end());
        s.push('\n');
    }
    s
}

/// Per-image counts and verdicts as TSV.
pub fn image_evals_tsv(evals: &[ImageEval]) -> String {
    let mut s = String::from("id\ttp\tfp\ttn\tfn\tscreen\n");
    for e in evals {
        let c = e.counts;
        s.push_str(&format!("{}\t{}\t{}\t{}\t{}\t{}\n", e.id, c.tp, c.fp, c.tn, c.fn_, e.verdict.category));
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Shape;

    fn c(tp: u64, fp: u64, tn: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts::new(tp, fp, tn, fn_).unwrap()
    }

    #[test]
    fn hand_arithmetic() {
        assert_eq!(precision(&c(50, 50, 0, 0)), 0.5);
        let d = dice(&c(30, 10, 0, 20));
        assert!((d - 60.0 / 90.0).abs() < 1e-15);
        assert_eq!(sensitivity_ratio(&c(0, 3, 5, 0)), Ratio { value: 1.0, vacuous: true });
        assert!(ConfusionCounts::new(0, 0, 0, 0).is_err());
    }

    #[test]
    fn pixel_confusion_edge_cases() {
        let zero = Tensor::<f32>::zeros(Shape::new(1, 1, 3, 3));
        let k = pixel_confusion(&zero, &zero).unwrap();
        assert_eq!(k, c(0, 0, 9, 0));
        let gt = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, y, x]| ((y + x) % 2) as f32);
        let pred = Tensor::from_fn(Shape::new(1, 1, 3, 3), |[_, _, y, x]| (1 - (y + x) % 2) as f32);
        let k = pixel_confusion(&pred, &gt).unwrap();
        assert_eq!((k.tp, k.tn), (0, 0));
        let bad = Tensor::full(Shape::new(1, 1, 3, 3), 0.5f32);
        assert!(pixel_confusion(&bad, &gt).is_err());
    }

    #[test]
    fn screening_rules() {
        let empty = Tensor::<f32>::zeros(Shape::new(1, 1, 4, 4));
        let mut one = empty.clone();
        one.set([0, 0, 1, 1], 1.0);
        assert_eq!(screen_image(&empty, &empty, 1).unwrap().category, ScreenCategory::Tn);
        assert_eq!(screen_image(&one, &empty, 1).unwrap().category, ScreenCategory::Fp);
        assert_eq!(screen_image(&one, &empty, 5).unwrap().category, ScreenCategory::Tn);
        assert_eq!(screen_image(&empty, &one, 1).unwrap().category, ScreenCategory::Fn);
        assert_eq!(screen_image(&one, &one, 1).unwrap().category, ScreenCategory::Tp);
    }

    #[test]
    fn micro_report_of_two_images() {
        let v = screen_counts(1, 1, 1);
        let evals = [
            ImageEval { id: "a".into(), counts: c(10, 5, 80, 5), verdict: v },
            ImageEval { id: "b".into(), counts: c(0, 2, 90, 8), verdict: screen_counts(0, 8, 1) },
        ];
        let r = aggregate_report("x", &evals, Averaging::Micro).unwrap();
        // Summed: tp 10, fp 7, tn 170, fn 13.
        assert_eq!(r.pixel.precision.value, 10.0 / 17.0);
        assert_eq!(r.pixel.sensitivity.value, 10.0 / 23.0);
        assert_eq!(r.pixel.accuracy.value, 180.0 / 200.0);
        assert_eq!(r.screening, ScreeningCounts { tp: 1, tn: 0, fp: 0, fn_: 1 });
        let m = aggregate_report("x", &evals, Averaging::Macro).unwrap();
        assert_eq!(m.pixel.precision.value, (10.0 / 15.0 + 0.0) / 2.0);
        assert!(aggregate_report("x", &[], Averaging::Micro).is_err());
        let tsv = reports_tsv(std::slice::from_ref(&r));
        assert_eq!(tsv.lines().count(), 2);
        assert!(reports_table(&[r]).starts_with("dataset"));
    }
}
