use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::metrics::{display3, final_score};
use super::scores::{capability_score, mia_score, split_losses, tas_score};
use crate::data::{Dataset, Split};
use crate::error::{Error, Result};
use crate::model::ModelState;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExampleScore {
    pub id: String,
    pub split: Split,
    /// Regurgitation similarity; only forget and retain examples are decoded.
    pub similarity: Option<f64>,
    /// Mean masked next-token loss.
    pub loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ReportMetadata {
    pub base_checkpoint: Option<String>,
    pub model_checkpoint: Option<String>,
    pub dataset_digest: String,
    /// Seconds since the Unix epoch.
    pub timestamp: u64,
    pub mia_auc: f64,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplayScores {
    pub mia: String,
    pub tas: String,
    pub capability: String,
    #[serde(rename = "final")]
    pub final_score: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub mia: f64,
    pub tas: f64,
    pub capability: f64,
    #[serde(rename = "final")]
    pub final_score: f64,
    pub per_example: Vec<ExampleScore>,
    pub metadata: ReportMetadata,
    pub display: DisplayScores,
}

impl EvalReport {
    pub fn new(
        mia: f64,
        tas: f64,
        capability: f64,
        per_example: Vec<ExampleScore>,
        metadata: ReportMetadata,
    ) -> Result<Self> {
        let final_score = final_score(mia, tas, capability)?;
        Ok(EvalReport {
            mia,
            tas,
            capability,
            final_score,
            per_example,
            metadata,
            display: DisplayScores {
                mia: display3(mia),
                tas: display3(tas),
                capability: display3(capability),
                final_score: display3(final_score),
            },
        })
    }

    /// Checks score ranges and that `final` is exactly the mean of the components.
    pub fn validate(&self) -> Result<()> {
        let expected = final_score(self.mia, self.tas, self.capability)?;
        if expected != self.final_score {
            return Err(Error::Validation(format!(
                "final score {} is not the mean of its components ({expected})",
                self.final_score
            )));
        }
        Ok(())
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        self.validate()?;
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let r: EvalReport = serde_json::from_str(&fs::read_to_string(path)?)?;
        r.validate()?;
        Ok(r)
    }
}

pub fn write_report(report: &EvalReport, path: impl AsRef<Path>) -> Result<()> {
    report.write(path)
}

/// Scores `model` against `base` on every split of `ds`.
pub fn evaluate(base: &ModelState, model: &ModelState, ds: &Dataset) -> Result<EvalReport> {
    let (mia, auc) = mia_score(model, ds)?;
    let (tas, sims) = tas_score(model, ds)?;
    let capability = capability_score(base, model, ds)?;

    let mut per_example = Vec::with_capacity(ds.len());
    for split in Split::ALL {
        let losses = split_losses(model, ds, split)?;
        for (id, loss) in losses {
            let similarity = sims.iter().find(|r| r.id == id).map(|r| r.similarity);
            per_example.push(ExampleScore {
                id,
                split,
                similarity,
                loss,
            });
        }
    }
    let timestamp = std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map_or(0, |d| d.as_secs());
    let metadata = ReportMetadata {
        base_checkpoint: None,
        model_checkpoint: None,
        dataset_digest: ds.provenance.digest.clone(),
        timestamp,
        mia_auc: auc,
        extra: serde_json::Value::Null,
    };
    EvalReport::new(mia, tas, capability, per_example, metadata)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> EvalReport {
        let meta = ReportMetadata {
            base_checkpoint: Some("base.ulf".into()),
            model_checkpoint: Some("model.ulf".into()),
            dataset_digest: "ab".repeat(32),
            timestamp: 1,
            mia_auc: 0.75,
            extra: serde_json::json!({"seed": 3}),
        };
        let rows = vec![ExampleScore {
            id: "f1".into(),
            split: Split::Forget,
            similarity: Some(0.123456789),
            loss: 1.0 / 3.0,
        }];
        EvalReport::new(0.993, 0.408, 0.229, rows, meta).unwrap()
    }

    #[test]
    fn round_trip_and_display() {
        let r = sample();
        assert_eq!(r.display.final_score, "0.543");
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("report.json");
        write_report(&r, &path).unwrap();
        let back = EvalReport::load(&path).unwrap();
        assert_eq!(back, r);
        assert_eq!(
            back.final_score,
            (back.mia + back.tas + back.capability) / 3.0
        );
        let v: serde_json::Value =
            serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        for key in [
            "mia",
            "tas",
            "capability",
            "final",
            "per_example",
            "metadata",
        ] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
    }

    #[test]
    fn tampered_final_is_rejected() {
        let mut r = sample();
        r.final_score += 1e-12;
        assert!(r.validate().is_err());
    }

    #[test]
    fn unwritable_path() {
        assert!(matches!(
            sample().write("/nonexistent-dir/x/report.json"),
            Err(Error::Io(_))
        ));
    }
}
