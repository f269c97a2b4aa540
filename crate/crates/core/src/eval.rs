//! Confusion matrices, per-class IoU, condition-grouped mIoU reports and
//! prediction overlays.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{write_png, DatasetError, Image, LabeledSample};
use crate::model::{images_to_tensor, Model, ModelError};
use crate::schema::{encode_mask, SemanticClass, TimeOfDay, WeatherCondition, IGNORE_INDEX, NUM_CLASSES};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("prediction has {pred} pixels, ground truth {gt}")]
    ShapeMismatch { pred: usize, gt: usize },
    #[error("prediction value {value} at pixel {pixel} is not a class index")]
    InvalidPrediction { pixel: usize, value: u8 },
    #[error("ground-truth value {value} at pixel {pixel} is neither a class nor Ignore")]
    InvalidGroundTruth { pixel: usize, value: u8 },
    #[error("no class has a defined IoU")]
    NoDefinedClasses,
    #[error("empty dataset")]
    EmptyDataset,
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
}

/// `counts[g][p]`: pixels of ground-truth class `g` predicted as `p`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        ConfusionMatrix { counts: [[0; NUM_CLASSES]; NUM_CLASSES] }
    }
}

impl ConfusionMatrix {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds one count per non-Ignore ground-truth pixel. Validates everything
    /// before counting, so a failed call leaves the matrix unchanged.
    pub fn accumulate(&mut self, predicted: &[u8], ground_truth: &[u8]) -> Result<(), EvalError> {
        if predicted.len() != ground_truth.len() {
            return Err(EvalError::ShapeMismatch { pred: predicted.len(), gt: ground_truth.len() });
        }
        if let Some(pixel) = predicted.iter().position(|&v| v as usize >= NUM_CLASSES) {
            return Err(EvalError::InvalidPrediction { pixel, value: predicted[pixel] });
        }
        if let Some(pixel) = ground_truth.iter().position(|&v| v != IGNORE_INDEX && v as usize >= NUM_CLASSES) {
            return Err(EvalError::InvalidGroundTruth { pixel, value: ground_truth[pixel] });
        }
        for (&p, &g) in predicted.iter().zip(ground_truth) {
            if g != IGNORE_INDEX {
                self.counts[g as usize][p as usize] += 1;
            }
        }
        Ok(())
    }

    pub fn merge(&self, other: &ConfusionMatrix) -> ConfusionMatrix {
        let mut out = *self;
        for (row, orow) in out.counts.iter_mut().zip(&other.counts) {
            for (a, b) in row.iter_mut().zip(orow) {
                *a += b;
            }
        }
        out
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    /// `tp / (gt + pred − tp)` per class; `None` when the union is empty.
    pub fn iou_per_class(&self) -> [Option<f64>; NUM_CLASSES] {
        let mut out = [None; NUM_CLASSES];
        for (c, slot) in out.iter_mut().enumerate() {
            let tp = self.counts[c][c];
            let gt: u64 = self.counts[c].iter().sum();
            let pred: u64 = self.counts.iter().map(|row| row[c]).sum();
            let union = gt + pred - tp;
            if union > 0 {
                *slot = Some(tp as f64 / union as f64);
            }
        }
        out
    }

    /// Mean IoU over classes with a defined IoU.
    pub fn miou(&self) -> Result<f64, EvalError> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(EvalError::NoDefinedClasses);
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }
}

/// Report columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ConditionGroup {
    Rain,
    Fog,
    Snow,
    Night,
    /// Every sample with adverse weather or at night.
    Overall,
    /// Normal weather in daylight.
    Standard,
}

impl ConditionGroup {
    pub const ALL: [ConditionGroup; 6] = [
        ConditionGroup::Rain,
        ConditionGroup::Fog,
        ConditionGroup::Snow,
        ConditionGroup::Night,
        ConditionGroup::Overall,
        ConditionGroup::Standard,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConditionGroup::Rain => "Rain",
            ConditionGroup::Fog => "Fog",
            ConditionGroup::Snow => "Snow",
            ConditionGroup::Night => "Night",
            ConditionGroup::Overall => "Overall",
            ConditionGroup::Standard => "Standard",
        }
    }

    /// Groups a sample with these attributes contributes to.
    pub fn of(weather: WeatherCondition, time: TimeOfDay) -> Vec<ConditionGroup> {
        let mut groups = Vec::new();
        match weather {
            WeatherCondition::Rain => groups.push(ConditionGroup::Rain),
            WeatherCondition::Fog => groups.push(ConditionGroup::Fog),
            WeatherCondition::Snow => groups.push(ConditionGroup::Snow),
            WeatherCondition::Normal => {}
        }
        if time == TimeOfDay::Night {
            groups.push(ConditionGroup::Night);
        }
        if groups.is_empty() {
            groups.push(ConditionGroup::Standard);
        } else {
            groups.push(ConditionGroup::Overall);
        }
        groups
    }
}

impl fmt::Display for ConditionGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupResult {
    pub samples: usize,
    pub matrix: ConfusionMatrix,
    /// `None` when no class is defined.
    pub miou: Option<f64>,
    pub per_class: [Option<f64>; NUM_CLASSES],
}

/// Per-group results; groups without samples are absent.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub groups: BTreeMap<ConditionGroup, GroupResult>,
}

impl ConditionReport {
    pub fn miou(&self, group: ConditionGroup) -> Option<f64> {
        self.groups.get(&group).and_then(|g| g.miou)
    }

    /// Table row of group mIoUs in column order.
    pub fn row(&self, name: impl Into<String>) -> ReportRow {
        ReportRow { name: name.into(), cells: ConditionGroup::ALL.map(|g| self.miou(g)) }
    }

    /// Per-class IoU row for one group.
    pub fn class_row(&self, name: impl Into<String>, group: ConditionGroup) -> ClassRow {
        ClassRow { name: name.into(), cells: self.groups.get(&group).map_or([None; NUM_CLASSES], |g| g.per_class) }
    }

    /// Merges pooled counts of two reports over disjoint sample sets.
    pub fn merge(&self, other: &ConditionReport) -> ConditionReport {
        let mut counts: BTreeMap<ConditionGroup, (usize, ConfusionMatrix)> = BTreeMap::new();
        for r in [self, other] {
            for (g, res) in &r.groups {
                let e = counts.entry(*g).or_default();
                e.0 += res.samples;
                e.1 = e.1.merge(&res.matrix);
            }
        }
        ConditionReport::from_counts(counts)
    }

    fn from_counts(counts: BTreeMap<ConditionGroup, (usize, ConfusionMatrix)>) -> ConditionReport {
        let groups = counts
            .into_iter()
            .map(|(g, (samples, matrix))| {
                let result =
                    GroupResult { samples, matrix, miou: matrix.miou().ok(), per_class: matrix.iou_per_class() };
                (g, result)
            })
            .collect();
        ConditionReport { groups }
    }
}

/// Pools one confusion matrix per condition group from precomputed
/// predictions (one row-major mask per sample).
pub fn evaluate_predictions(dataset: &[LabeledSample], predictions: &[Vec<u8>]) -> Result<ConditionReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    assert_eq!(dataset.len(), predictions.len(), "one prediction per sample");
    let mut counts: BTreeMap<ConditionGroup, (usize, ConfusionMatrix)> = BTreeMap::new();
    for (sample, pred) in dataset.iter().zip(predictions) {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(pred, &sample.mask.data)?;
        for g in ConditionGroup::of(sample.weather, sample.time) {
            let e = counts.entry(g).or_default();
            e.0 += 1;
            e.1 = e.1.merge(&cm);
        }
    }
    Ok(ConditionReport::from_counts(counts))
}

/// Inference-mode argmax predictions, computed in fixed-size batches.
pub fn predict_all(model: &mut Model<f32>, dataset: &[LabeledSample]) -> Result<Vec<Vec<u8>>, EvalError> {
    let mut out = Vec::with_capacity(dataset.len());
    for chunk in dataset.chunks(8) {
        let refs: Vec<&LabeledSample> = chunk.iter().collect();
        out.extend(model.predict(&images_to_tensor(&refs))?);
    }
    Ok(out)
}

/// Runs segmentation inference (supervisors inactive) on every sample and
/// reports pooled mIoU per condition group.
pub fn evaluate(model: &mut Model<f32>, dataset: &[LabeledSample]) -> Result<ConditionReport, EvalError> {
    if dataset.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let predictions = predict_all(model, dataset)?;
    evaluate_predictions(dataset, &predictions)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Md,
    Csv,
}

impl std::str::FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "md" => Ok(ReportFormat::Md),
            "csv" => Ok(ReportFormat::Csv),
            other => Err(format!("unknown report format {other:?} (expected md or csv)")),
        }
    }
}

/// One model's condition mIoUs in [`ConditionGroup::ALL`] order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub name: String,
    pub cells: [Option<f64>; 6],
}

/// One model's per-class IoUs in class-index order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub name: String,
    pub cells: [Option<f64>; NUM_CLASSES],
}

pub const ABSENT: &str = "—";

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| ABSENT.to_string(), |x| format!("{x:.2}"))
}

fn render_table(header: &[&str], rows: &[(String, Vec<Option<f64>>)], format: ReportFormat) -> String {
    let mut out = String::new();
    match format {
        ReportFormat::Md => {
            out.push_str(&format!("| model | {} |\n", header.join(" | ")));
            out.push_str(&format!("|---|{}\n", "---|".repeat(header.len())));
            for (name, cells) in rows {
                let cells: Vec<String> = cells.iter().map(|&c| cell(c)).collect();
                out.push_str(&format!("| {} | {} |\n", name, cells.join(" | ")));
            }
        }
        ReportFormat::Csv => {
            out.push_str(&format!("model,{}\n", header.join(",")));
            for (name, cells) in rows {
                let cells: Vec<String> = cells.iter().map(|&c| cell(c)).collect();
                out.push_str(&format!("{},{}\n", csv_field(name), cells.join(",")));
            }
        }
    }
    out
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

/// Condition table: columns `Rain | Fog | Snow | Night | Overall | Standard`,
/// two decimals, absent cells as "—".
pub fn render_report(rows: &[ReportRow], format: ReportFormat) -> String {
    let header = ConditionGroup::ALL.map(ConditionGroup::as_str);
    let rows: Vec<_> = rows.iter().map(|r| (r.name.clone(), r.cells.to_vec())).collect();
    render_table(&header, &rows, format)
}

/// Per-class IoU table, one column per class.
pub fn render_per_class(rows: &[ClassRow], format: ReportFormat) -> String {
    let header = SemanticClass::ALL.map(SemanticClass::name);
    let rows: Vec<_> = rows.iter().map(|r| (r.name.clone(), r.cells.to_vec())).collect();
    render_table(&header, &rows, format)
}

/// Half-and-half blend of the image with the prediction's class colors.
pub fn overlay_image(image: &Image, predicted: &[u8]) -> Result<Vec<u8>, EvalError> {
    let pixels = image.height * image.width;
    if predicted.len() != pixels {
        return Err(EvalError::ShapeMismatch { pred: predicted.len(), gt: pixels });
    }
    if let Some(pixel) = predicted.iter().position(|&v| v as usize >= NUM_CLASSES) {
        return Err(EvalError::InvalidPrediction { pixel, value: predicted[pixel] });
    }
    let colors = encode_mask(predicted).expect("validated class indices");
    Ok(image.to_rgb8().iter().zip(&colors).map(|(&a, &b)| ((a as u16 + b as u16 + 1) / 2) as u8).collect())
}

/// Writes [`overlay_image`] as a PNG.
pub fn overlay(sample: &LabeledSample, predicted: &[u8], out_path: &Path) -> Result<(), EvalError> {
    let rgb = overlay_image(&sample.image, predicted)?;
    write_png(out_path, sample.image.height, sample.image.width, &rgb)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_road_two_by_two() {
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[0; 4], &[0; 4]).unwrap();
        let mut expected = ConfusionMatrix::new();
        expected.counts[0][0] = 4;
        assert_eq!(cm, expected);
        cm.accumulate(&[3; 4], &[IGNORE_INDEX; 4]).unwrap();
        assert_eq!(cm, expected);
    }

    #[test]
    fn hand_worked_two_by_two() {
        let (road, sky) = (SemanticClass::Road.index(), SemanticClass::Sky.index());
        let mut cm = ConfusionMatrix::new();
        cm.accumulate(&[road; 4], &[road, road, sky, sky]).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou[road as usize], Some(0.5));
        assert_eq!(iou[sky as usize], Some(0.0));
        assert_eq!(iou.iter().filter(|v| v.is_some()).count(), 2);
        assert_eq!(cm.miou().unwrap(), 0.25);
    }

    #[test]
    fn empty_and_invalid() {
        let cm = ConfusionMatrix::new();
        assert_eq!(cm.iou_per_class(), [None; NUM_CLASSES]);
        assert!(matches!(cm.miou(), Err(EvalError::NoDefinedClasses)));
        let mut cm = ConfusionMatrix::new();
        assert!(matches!(cm.accumulate(&[0, 10], &[0, 0]), Err(EvalError::InvalidPrediction { pixel: 1, value: 10 })));
        assert!(matches!(cm.accumulate(&[0], &[0, 0]), Err(EvalError::ShapeMismatch { .. })));
        assert!(matches!(cm.accumulate(&[0, 0], &[0, 77]), Err(EvalError::InvalidGroundTruth { .. })));
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn grouping() {
        use ConditionGroup::*;
        assert_eq!(ConditionGroup::of(WeatherCondition::Normal, TimeOfDay::Day), [Standard]);
        assert_eq!(ConditionGroup::of(WeatherCondition::Normal, TimeOfDay::Night), [Night, Overall]);
        assert_eq!(ConditionGroup::of(WeatherCondition::Snow, TimeOfDay::Night), [Snow, Night, Overall]);
        assert_eq!(ConditionGroup::of(WeatherCondition::Fog, TimeOfDay::Day), [Fog, Overall]);
    }

    #[test]
    fn report_rendering() {
        let row = ReportRow { name: "Full-Model".into(), cells: [0.57, 0.60, 0.50, 0.27, 0.49, 0.75].map(Some) };
        let md = render_report(std::slice::from_ref(&row), ReportFormat::Md);
        assert!(md.contains("| Full-Model | 0.57 | 0.60 | 0.50 | 0.27 | 0.49 | 0.75 |"), "{md}");
        assert!(md.starts_with("| model | Rain | Fog | Snow | Night | Overall | Standard |\n"));
        let csv = render_report(&[row], ReportFormat::Csv);
        assert_eq!(csv, "model,Rain,Fog,Snow,Night,Overall,Standard\nFull-Model,0.57,0.60,0.50,0.27,0.49,0.75\n");
        assert_eq!(render_report(&[], ReportFormat::Csv), "model,Rain,Fog,Snow,Night,Overall,Standard\n");
        assert_eq!(render_report(&[], ReportFormat::Md).lines().count(), 2);

        let mut cells = [None; 6];
        cells[5] = Some(0.789);
        let md = render_report(&[ReportRow { name: "std".into(), cells }], ReportFormat::Md);
        assert!(md.contains("| std | — | — | — | — | — | 0.79 |"));

        let mut per_class = [None; NUM_CLASSES];
        per_class[..3].copy_from_slice(&[Some(0.79), Some(0.40), Some(0.63)]);
        let md = render_per_class(&[ClassRow { name: "Ours".into(), cells: per_class }], ReportFormat::Md);
        assert!(md.contains("| Ours | 0.79 | 0.40 | 0.63 | — |"), "{md}");
        assert!(md.starts_with("| model | Road | Sidewalk | Building |"));
    }

    #[test]
    fn overlay_blends_and_rejects_ignore() {
        let image = Image::filled(2, 2, [1.0, 1.0, 1.0]);
        let rgb = overlay_image(&image, &[0; 4]).unwrap();
        assert_eq!(&rgb[..3], &[192, 160, 192]);
        assert!(matches!(overlay_image(&image, &[0, 0, 0, IGNORE_INDEX]), Err(EvalError::InvalidPrediction { .. })));
    }
}
