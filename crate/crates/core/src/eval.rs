//! Class maps, confusion matrices, IoU and the seen/unseen report tables.

use std::fmt::Write as _;

use crate::error::{Error, Result};

/// Label value excluded from every count.
pub const IGNORE_ID: u32 = 255;

/// Row-major `height × width` grid of class ids.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub data: Vec<u32>,
}

impl ClassMap {
    pub fn new(height: usize, width: usize, data: Vec<u32>) -> Result<Self> {
        if data.len() != height * width {
            return Err(Error::dim(format!(
                "class map {height}×{width} needs {} ids, got {}",
                height * width,
                data.len()
            )));
        }
        Ok(Self { height, width, data })
    }

    pub fn filled(height: usize, width: usize, id: u32) -> Self {
        Self {
            height,
            width,
            data: vec![id; height * width],
        }
    }

    pub fn get(&self, y: usize, x: usize) -> u32 {
        self.data[y * self.width + x]
    }

    pub fn set(&mut self, y: usize, x: usize, id: u32) {
        self.data[y * self.width + x] = id;
    }

    /// Cross-entropy targets for `k` classes: ignored pixels become `None`.
    pub fn targets(&self, k: usize) -> Result<Vec<Option<usize>>> {
        self.data
            .iter()
            .enumerate()
            .map(|(i, &id)| match id {
                IGNORE_ID => Ok(None),
                id if (id as usize) < k => Ok(Some(id as usize)),
                id => Err(Error::Validation(format!(
                    "label {id} at pixel (y={}, x={}) is not below K={k}",
                    i / self.width.max(1),
                    i % self.width.max(1)
                ))),
            })
            .collect()
    }

    /// Distinct non-ignored ids, ascending.
    pub fn classes_present(&self) -> Vec<u32> {
        let mut ids: Vec<u32> = self.data.iter().copied().filter(|&c| c != IGNORE_ID).collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

/// `K × K` counts; rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        Self {
            k,
            counts: vec![0; k * k],
        }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::dim(format!("{k}×{k} matrix needs {} counts, got {}", k * k, counts.len())));
        }
        Ok(Self { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn counts(&self) -> &[u64] {
        &self.counts
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one image. Pixels whose truth or prediction is [`IGNORE_ID`]
    /// are skipped; the matrix is left untouched when an id is out of range.
    pub fn update(&mut self, pred: &ClassMap, truth: &ClassMap) -> Result<()> {
        if (pred.height, pred.width) != (truth.height, truth.width) {
            return Err(Error::dim(format!(
                "prediction {}×{} vs ground truth {}×{}",
                pred.height, pred.width, truth.height, truth.width
            )));
        }
        let mut delta = Vec::with_capacity(pred.data.len());
        for (i, (&p, &t)) in pred.data.iter().zip(&truth.data).enumerate() {
            if p == IGNORE_ID || t == IGNORE_ID {
                continue;
            }
            for (what, id) in [("ground truth", t), ("prediction", p)] {
                if id as usize >= self.k {
                    return Err(Error::Validation(format!(
                        "{what} id {id} at pixel (y={}, x={}) is not below K={}",
                        i / truth.width,
                        i % truth.width,
                        self.k
                    )));
                }
            }
            delta.push(t as usize * self.k + p as usize);
        }
        for cell in delta {
            self.counts[cell] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dim(format!("cannot merge K={} into K={}", other.k, self.k)));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// `diag / (row + col − diag)`, `None` when the denominator is zero.
    pub fn iou(&self, k: usize) -> Option<f64> {
        let diag = self.get(k, k);
        let row: u64 = (0..self.k).map(|p| self.get(k, p)).sum();
        let col: u64 = (0..self.k).map(|t| self.get(t, k)).sum();
        let union = row + col - diag;
        (union > 0).then(|| diag as f64 / union as f64)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct IouSummary {
    /// Indexed by class id; `None` for classes absent from truth and prediction.
    pub per_class: Vec<Option<f64>>,
    /// Mean over defined classes of the subset; `None` when there are none.
    pub mean: Option<f64>,
}

/// Per-class IoU and the mean over `subset` (all classes when `None`).
/// Ids in the subset beyond `K` are ignored.
pub fn miou(cm: &ConfusionMatrix, subset: Option<&[usize]>) -> IouSummary {
    let per_class: Vec<Option<f64>> = (0..cm.num_classes()).map(|k| cm.iou(k)).collect();
    let all: Vec<usize> = (0..cm.num_classes()).collect();
    let members = subset.unwrap_or(&all);
    let defined: Vec<f64> = members.iter().filter_map(|&k| per_class.get(k).copied().flatten()).collect();
    let mean = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
    IouSummary { per_class, mean }
}

/// Seen/unseen/all mIoU, one column per condition.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Report {
    pub conditions: Vec<String>,
    pub seen: Vec<Option<f64>>,
    pub unseen: Vec<Option<f64>>,
    pub mean: Vec<Option<f64>>,
}

impl Report {
    /// Adds a column computed from `cm` for the given seen/unseen split.
    pub fn push(&mut self, condition: &str, cm: &ConfusionMatrix, seen: &[usize], unseen: &[usize]) {
        self.conditions.push(sanitize_label(condition));
        self.seen.push(miou(cm, Some(seen)).mean);
        self.unseen.push(if unseen.is_empty() { None } else { miou(cm, Some(unseen)).mean });
        self.mean.push(miou(cm, None).mean);
    }

    fn rows(&self) -> [(&'static str, &[Option<f64>]); 3] {
        [("seen", &self.seen), ("unseen", &self.unseen), ("mean", &self.mean)]
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split");
        for c in &self.conditions {
            out.push(',');
            out.push_str(c);
        }
        out.push('\n');
        for (name, values) in self.rows() {
            out.push_str(name);
            for v in values {
                out.push(',');
                out.push_str(&format_percent(*v));
            }
            out.push('\n');
        }
        out
    }

    pub fn to_text(&self) -> String {
        let mut table: Vec<Vec<String>> = vec![std::iter::once("split".to_string())
            .chain(self.conditions.iter().cloned())
            .collect()];
        for (name, values) in self.rows() {
            table.push(
                std::iter::once(name.to_string())
                    .chain(values.iter().map(|v| format_percent(*v)))
                    .collect(),
            );
        }
        let cols = table[0].len();
        let widths: Vec<usize> = (0..cols)
            .map(|c| table.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for row in &table {
            let mut line = String::new();
            for (c, cell) in row.iter().enumerate() {
                if c == 0 {
                    let _ = write!(line, "{cell:<w$}", w = widths[c]);
                } else {
                    let _ = write!(line, "  {cell:>w$}", w = widths[c]);
                }
            }
            out.push_str(line.trim_end());
            out.push('\n');
        }
        out
    }
}

/// Fraction → percent with two decimals, rounding half away from zero.
/// Missing values print as `n/a`.
pub fn format_percent(v: Option<f64>) -> String {
    match v {
        None => "n/a".to_string(),
        Some(x) => {
            let hundredths = (x * 10_000.0).round();
            format!("{:.2}", hundredths / 100.0)
        }
    }
}

/// Replaces every character outside `[A-Za-z0-9_-]` with `_`.
pub fn sanitize_label(label: &str) -> String {
    let s: String = label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '_' || c == '-' { c } else { '_' })
        .collect();
    if s.is_empty() {
        "_".into()
    } else {
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(h: usize, w: usize, ids: &[u32]) -> ClassMap {
        ClassMap::new(h, w, ids.to_vec()).unwrap()
    }

    #[test]
    fn binary_hand_case() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 2, 0, 4]).unwrap();
        let s = miou(&cm, None);
        assert_eq!(s.per_class[0], Some(0.5));
        assert!((s.per_class[1].unwrap() - 4.0 / 6.0).abs() < 1e-12);
        assert!((s.mean.unwrap() - 0.5833).abs() < 1e-4);
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = map(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&gt, &gt).unwrap();
        for t in 0..3 {
            for p in 0..3 {
                if t != p {
                    assert_eq!(cm.get(t, p), 0);
                }
            }
        }
        let s = miou(&cm, None);
        assert_eq!(s.mean, Some(1.0));
    }

    #[test]
    fn ignored_pixels_leave_matrix_unchanged() {
        let gt = ClassMap::filled(3, 3, IGNORE_ID);
        let pred = ClassMap::filled(3, 3, 1);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &gt).unwrap();
        assert_eq!(cm.total(), 0);
        assert_eq!(miou(&cm, None).mean, None);
    }

    #[test]
    fn accumulation_order_does_not_matter() {
        let (a_p, a_t) = (map(2, 2, &[0, 1, 1, 1]), map(2, 2, &[0, 0, 1, 1]));
        let (b_p, b_t) = (map(2, 2, &[1, 1, 0, 0]), map(2, 2, &[1, 0, 0, 1]));
        let mut x = ConfusionMatrix::new(2);
        x.update(&a_p, &a_t).unwrap();
        x.update(&b_p, &b_t).unwrap();
        let mut y = ConfusionMatrix::new(2);
        y.update(&b_p, &b_t).unwrap();
        y.update(&a_p, &a_t).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn out_of_range_id_names_the_pixel() {
        let gt = map(2, 3, &[0, 0, 0, 0, 7, 0]);
        let pred = ClassMap::filled(2, 3, 0);
        let mut cm = ConfusionMatrix::new(3);
        let msg = cm.update(&pred, &gt).unwrap_err().to_string();
        assert!(msg.contains("y=1") && msg.contains("x=1"), "{msg}");
        assert_eq!(cm.total(), 0);
    }

    #[test]
    fn disjoint_class_scores_zero() {
        let gt = map(1, 2, &[0, 1]);
        let pred = map(1, 2, &[1, 0]);
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&pred, &gt).unwrap();
        assert_eq!(cm.iou(0), Some(0.0));
    }

    #[test]
    fn empty_subset_is_undefined() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 0, 0, 1]).unwrap();
        assert_eq!(miou(&cm, Some(&[])).mean, None);
    }

    #[test]
    fn percent_rounding_is_half_away_from_zero() {
        assert_eq!(format_percent(Some(0.123_45)), "12.35");
        assert_eq!(format_percent(Some(0.5)), "50.00");
        assert_eq!(format_percent(Some(-0.000_05)), "-0.01");
        assert_eq!(format_percent(None), "n/a");
    }

    #[test]
    fn seen_only_report_marks_unseen_missing() {
        let cm = ConfusionMatrix::from_counts(2, vec![2, 2, 0, 4]).unwrap();
        let mut r = Report::default();
        r.push("clear", &cm, &[0, 1], &[]);
        let csv = r.to_csv();
        assert_eq!(csv, "split,clear\nseen,58.33\nunseen,n/a\nmean,58.33\n");
        assert_eq!(csv.lines().count(), 4);
        let text = r.to_text();
        assert!(text.lines().nth(2).unwrap().ends_with("n/a"));
    }

    #[test]
    fn two_condition_report_has_three_columns() {
        let cm = ConfusionMatrix::from_counts(2, vec![1, 0, 0, 1]).unwrap();
        let mut r = Report::default();
        r.push("clear", &cm, &[0], &[1]);
        r.push("heavy fog!", &cm, &[0], &[1]);
        for line in r.to_csv().lines() {
            assert_eq!(line.split(',').count(), 3);
        }
        assert!(r.to_csv().starts_with("split,clear,heavy_fog_\n"));
    }
}
