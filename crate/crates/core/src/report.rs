//! The comparison report: per-arm accuracies, confusion matrices, segmentation
//! scores, evidence overlap and provenance, plus its CSV tables.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::metrics::{ConfusionMatrix, SegmentationScores};

/// Arm name used for the classifier trained on raw images.
pub const RAW_ARM: &str = "w/o AOP";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitAccuracy {
    pub training: f64,
    pub validation: f64,
    pub test: f64,
}

impl SplitAccuracy {
    pub fn get(&self, split: Split) -> f64 {
        match split {
            Split::Training => self.training,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }

    /// In-domain minus out-of-domain accuracy.
    pub fn gap(&self) -> f64 {
        self.validation - self.test
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GradcamSummary {
    pub images: usize,
    pub mean_overlap: f64,
    /// Maps whose rectified evidence was zero everywhere.
    pub all_zero: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmReport {
    pub name: String,
    pub pretreat: String,
    /// Same for every arm of one comparison: the pretreatment is left out.
    pub classifier_hash: String,
    pub best_epoch: usize,
    pub accuracy: SplitAccuracy,
    pub gap: f64,
    /// Keyed by split directory name.
    pub confusion: BTreeMap<String, ConfusionMatrix>,
    pub gradcam: Option<GradcamSummary>,
}

impl ArmReport {
    pub fn new(
        name: &str,
        pretreat: &str,
        classifier_hash: &str,
        best_epoch: usize,
        confusion: BTreeMap<Split, ConfusionMatrix>,
    ) -> Result<Self> {
        let acc = |s: Split| {
            confusion.get(&s).map(ConfusionMatrix::accuracy).ok_or_else(|| Error::InvalidInput(format!("no {s:?} results")))
        };
        let accuracy = SplitAccuracy { training: acc(Split::Training)?, validation: acc(Split::Validation)?, test: acc(Split::Test)? };
        Ok(Self {
            name: name.into(),
            pretreat: pretreat.into(),
            classifier_hash: classifier_hash.into(),
            best_epoch,
            accuracy,
            gap: accuracy.gap(),
            confusion: confusion.into_iter().map(|(s, c)| (s.dir_name().to_owned(), c)).collect(),
            gradcam: None,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationRow {
    pub variant: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl SegmentationRow {
    pub fn new(variant: &str, s: SegmentationScores) -> Self {
        Self { variant: variant.into(), precision: s.precision, recall: s.recall, f1: s.f1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub config_hash: String,
    pub git_revision: Option<String>,
    pub started_unix: u64,
    pub finished_unix: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub arms: Vec<ArmReport>,
    pub segmentation: Vec<SegmentationRow>,
    pub provenance: Provenance,
}

impl MetricsReport {
    pub fn arm(&self, name: &str) -> Option<&ArmReport> {
        self.arms.iter().find(|a| a.name == name)
    }

    /// Stored gaps match their accuracies and every arm shares one classifier hash.
    pub fn check_consistency(&self) -> Result<()> {
        for arm in &self.arms {
            if arm.gap != arm.accuracy.validation - arm.accuracy.test {
                return Err(Error::InvalidInput(format!("gap of arm {} disagrees with its accuracies", arm.name)));
            }
        }
        if let Some(first) = self.arms.first() {
            if let Some(other) = self.arms.iter().find(|a| a.classifier_hash != first.classifier_hash) {
                return Err(Error::InvalidInput(format!(
                    "arms {} and {} were trained with different classifier configurations",
                    first.name, other.name
                )));
            }
        }
        Ok(())
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    /// `arm,pretreat,training,validation,test,gap`.
    pub fn save_accuracy_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        w.write_record(["arm", "pretreat", "training", "validation", "test", "gap"])?;
        for a in &self.arms {
            let acc = a.accuracy;
            w.write_record([
                a.name.clone(),
                a.pretreat.clone(),
                acc.training.to_string(),
                acc.validation.to_string(),
                acc.test.to_string(),
                a.gap.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }
}

/// `variant,precision,recall,f1`.
pub fn save_segmentation_csv(rows: &[SegmentationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn unix_now() -> u64 {
    std::time::SystemTime::now().duration_since(std::time::UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

/// `git rev-parse HEAD` of the working directory, when available.
pub fn git_revision() -> Option<String> {
    let out = std::process::Command::new("git").args(["rev-parse", "HEAD"]).output().ok()?;
    out.status.success().then(|| String::from_utf8_lossy(&out.stdout).trim().to_owned())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::DiseaseLabel;
    use crate::metrics::confusion_matrix;

    fn arm(name: &str, hash: &str) -> ArmReport {
        let truths: Vec<_> = DiseaseLabel::ALL.to_vec();
        let mut preds = truths.clone();
        preds[0] = DiseaseLabel::Healthy;
        let c = confusion_matrix(&preds, &truths).unwrap();
        let perfect = confusion_matrix(&truths, &truths).unwrap();
        let confusion = [(Split::Training, perfect.clone()), (Split::Validation, perfect), (Split::Test, c)].into_iter().collect();
        ArmReport::new(name, "none", hash, 3, confusion).unwrap()
    }

    #[test]
    fn gap_is_validation_minus_test() {
        let a = arm(RAW_ARM, "h");
        assert_eq!(a.accuracy.validation, 1.0);
        assert_eq!(a.accuracy.test, 7.0 / 8.0);
        assert_eq!(a.gap, a.accuracy.validation - a.accuracy.test);
        assert_eq!(a.confusion.len(), 3);
    }

    #[test]
    fn consistency_catches_tampering_and_mixed_configs() {
        let provenance = Provenance { config_hash: "c".into(), git_revision: None, started_unix: 0, finished_unix: 1 };
        let mut r = MetricsReport { arms: vec![arm("a", "h"), arm("b", "h")], segmentation: vec![], provenance };
        r.check_consistency().unwrap();
        r.arms[1].gap += 0.01;
        assert!(r.check_consistency().is_err());
        r.arms[1] = arm("b", "other");
        assert!(r.check_consistency().is_err());
    }

    #[test]
    fn files_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let provenance = Provenance { config_hash: "c".into(), git_revision: Some("abc".into()), started_unix: 5, finished_unix: 9 };
        let r = MetricsReport {
            arms: vec![arm(RAW_ARM, "h")],
            segmentation: vec![SegmentationRow { variant: "SSIM".into(), precision: 0.9, recall: 0.8, f1: 0.85 }],
            provenance,
        };
        let json = dir.path().join("r.json");
        r.save_json(&json).unwrap();
        assert_eq!(MetricsReport::load_json(&json).unwrap(), r);
        let csv_path = dir.path().join("seg.csv");
        save_segmentation_csv(&r.segmentation, &csv_path).unwrap();
        let text = std::fs::read_to_string(&csv_path).unwrap();
        assert_eq!(text.lines().next().unwrap(), "variant,precision,recall,f1");
        let acc = dir.path().join("acc.csv");
        r.save_accuracy_csv(&acc).unwrap();
        assert!(std::fs::read_to_string(&acc).unwrap().starts_with("arm,pretreat,training,validation,test,gap"));
    }
}
