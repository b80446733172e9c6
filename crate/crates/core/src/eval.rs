//! ROC curves, AUC and the cross-manipulation evaluation protocol.
//!
//! Fake is the positive class throughout. Thresholds sit at distinct score
//! values and tied scores move together, which makes the trapezoidal area
//! equal to `P(fake > real) + P(tie) / 2`.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{fake_of, Family, Label, LabeledSample};
use crate::error::{Error, Result};

/// Header of the per-cell report CSV.
pub const REPORT_CSV_HEADER: &str = "train_kind,test_kind,auc";

#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`.
    pub points: Vec<(f64, f64)>,
    /// Score threshold at each point (`score >= t` is called fake); the
    /// first is `+inf`.
    pub thresholds: Vec<f64>,
}

/// Cumulative (false positive, true positive) counts at each threshold.
fn sweep(scores: &[f64], labels: &[Label]) -> Result<(Vec<(usize, usize)>, Vec<f64>, usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::dim("roc", &[scores.len()], &[labels.len()]));
    }
    if let Some(i) = scores.iter().position(|s| !s.is_finite()) {
        return Err(Error::Evaluation(format!("score {i} is {}", scores[i])));
    }
    let pos = labels.iter().filter(|l| l.is_fake()).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::Evaluation(format!("need both classes, got {pos} fake and {neg} real")));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut counts = vec![(0, 0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut fp, mut tp) = (0, 0);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]].is_fake() {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        counts.push((fp, tp));
        thresholds.push(s);
    }
    Ok((counts, thresholds, pos, neg))
}

pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    let (counts, thresholds, pos, neg) = sweep(scores, labels)?;
    let points = counts
        .iter()
        .map(|&(fp, tp)| (fp as f64 / neg as f64, tp as f64 / pos as f64))
        .collect();
    Ok(RocCurve { points, thresholds })
}

/// Trapezoidal area under the ROC curve.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    let (counts, _, pos, neg) = sweep(scores, labels)?;
    // twice the area in count units stays an exact integer
    let twice: u128 = counts
        .windows(2)
        .map(|w| ((w[1].0 - w[0].0) * (w[1].1 + w[0].1)) as u128)
        .sum();
    Ok(twice as f64 / (2.0 * pos as f64 * neg as f64))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub train_kind: Family,
    pub aucs: Vec<(Family, f64)>,
    pub avg: f64,
}

impl ReportRow {
    pub fn new(train_kind: Family, aucs: Vec<(Family, f64)>) -> Result<Self> {
        if aucs.is_empty() {
            return Err(Error::Evaluation(format!("empty report row for {train_kind}")));
        }
        let avg = aucs.iter().map(|(_, a)| a).sum::<f64>() / aucs.len() as f64;
        Ok(ReportRow { train_kind, aucs, avg })
    }

    pub fn auc(&self, kind: Family) -> Option<f64> {
        self.aucs.iter().find(|(k, _)| *k == kind).map(|(_, a)| *a)
    }
}

/// Train-kind by test-kind AUC table with row averages.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportTable {
    pub rows: Vec<ReportRow>,
}

impl ReportTable {
    pub fn to_csv(&self) -> String {
        let mut out = format!("{REPORT_CSV_HEADER}\n");
        for row in &self.rows {
            for (k, a) in &row.aucs {
                out.push_str(&format!("{},{},{a}\n", row.train_kind, k));
            }
        }
        out
    }

    pub fn to_json(&self) -> String {
        #[derive(Serialize)]
        struct Summary<'a> {
            positive_class: &'static str,
            rows: &'a [ReportRow],
        }
        let summary = Summary {
            positive_class: "fake",
            rows: &self.rows,
        };
        serde_json::to_string_pretty(&summary).expect("report serializes") + "\n"
    }

    /// Writes `report.csv` and `summary.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let csv = dir.join("report.csv");
        fs::write(&csv, self.to_csv()).map_err(|e| Error::io(&csv, e))?;
        let json = dir.join("summary.json");
        fs::write(&json, self.to_json()).map_err(|e| Error::io(&json, e))
    }

    /// Plain-text table with one column per test kind.
    pub fn render(&self) -> String {
        let kinds: Vec<Family> = self.rows.first().map(|r| r.aucs.iter().map(|(k, _)| *k).collect()).unwrap_or_default();
        let mut out = format!("{:<20}", "train \\ test");
        for k in &kinds {
            out.push_str(&format!("{:>20}", k.name()));
        }
        out.push_str(&format!("{:>10}\n", "avg"));
        for row in &self.rows {
            out.push_str(&format!("{:<20}", row.train_kind.name()));
            for k in &kinds {
                match row.auc(*k) {
                    Some(a) => out.push_str(&format!("{a:>20.4}")),
                    None => out.push_str(&format!("{:>20}", "-")),
                }
            }
            out.push_str(&format!("{:>10.4}\n", row.avg));
        }
        out
    }
}

/// One report row: scores the test reals once, then each test family's
/// fakes regenerated from those reals. `score` returns the probability of
/// the fake class.
pub fn cross_manipulation_eval<F>(
    score: F,
    train_kind: Family,
    train_scenes: &[u64],
    test_reals: &[LabeledSample],
    test_kinds: &[Family],
) -> Result<ReportRow>
where
    F: Fn(&LabeledSample) -> Result<f64>,
{
    let seen: BTreeSet<u64> = train_scenes.iter().copied().collect();
    if let Some(s) = test_reals.iter().find(|s| seen.contains(&s.scene_seed)) {
        return Err(Error::Protocol(format!("test scene {} was used in training", s.scene_seed)));
    }
    if let Some(s) = test_reals.iter().find(|s| s.label != Label::Real) {
        return Err(Error::Protocol(format!("test scene {} is not a real sample", s.scene_seed)));
    }
    if test_kinds.is_empty() {
        return Err(Error::Config("no test kinds given".into()));
    }
    let real_scores = test_reals.iter().map(&score).collect::<Result<Vec<_>>>()?;
    let mut aucs = Vec::with_capacity(test_kinds.len());
    for &kind in test_kinds {
        let mut scores = real_scores.clone();
        let mut labels = vec![Label::Real; real_scores.len()];
        for real in test_reals {
            scores.push(score(&fake_of(real, kind)?)?);
            labels.push(Label::Fake);
        }
        aucs.push((kind, auc(&scores, &labels)?));
    }
    ReportRow::new(train_kind, aucs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::{Fake, Real};

    #[test]
    fn worked_example() {
        let a = auc(&[0.9, 0.8, 0.4, 0.2], &[Fake, Real, Fake, Real]).unwrap();
        assert_eq!(a, 0.75);
    }

    #[test]
    fn separation_and_total_tie() {
        let labels = [Real, Real, Fake, Fake];
        let roc = roc_curve(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap();
        assert!(roc.points.contains(&(0.0, 1.0)));
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &labels).unwrap(), 1.0);
        let tied = roc_curve(&[0.5; 4], &labels).unwrap();
        assert_eq!(tied.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&[0.5; 4], &labels).unwrap(), 0.5);
    }

    #[test]
    fn single_class_is_an_error() {
        assert!(matches!(auc(&[0.1, 0.2], &[Real, Real]), Err(Error::Evaluation(_))));
        assert!(matches!(auc(&[0.1, f64::NAN], &[Real, Fake]), Err(Error::Evaluation(_))));
    }

    #[test]
    fn rows_average_and_serialize() {
        let row = ReportRow::new(
            Family::BandNotch,
            vec![(Family::BandNotch, 0.9), (Family::HighFreqGrid, 0.6), (Family::BandShuffleNoise, 0.3)],
        )
        .unwrap();
        assert!((row.avg - 0.6).abs() <= 1e-12);
        let table = ReportTable { rows: vec![row] };
        let csv = table.to_csv();
        assert_eq!(csv.lines().count(), 4);
        assert!(csv.starts_with(REPORT_CSV_HEADER));
        assert!(csv.contains("band_notch,high_freq_grid,0.6"));
        let back: serde_json::Value = serde_json::from_str(&table.to_json()).unwrap();
        assert_eq!(back["positive_class"], "fake");
        assert!(table.render().contains("band_notch"));
    }

    #[test]
    fn overlapping_scenes_violate_protocol() {
        let real = LabeledSample::new(crate::data::synth_scene(4, 8, 2).unwrap(), Real, None, 4).unwrap();
        let r = cross_manipulation_eval(|_| Ok(0.5), Family::BandNotch, &[4], &[real], &[Family::BandNotch]);
        assert!(matches!(r, Err(Error::Protocol(_))));
    }
}
