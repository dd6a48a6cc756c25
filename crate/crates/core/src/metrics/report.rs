//! Per-concept scores and their means, written as CSV.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const COLUMNS: [&str; 14] = [
    "Rec",
    "VQA-BLEU",
    "VQA-judge",
    "QA-BLEU",
    "QA-judge",
    "sim-I",
    "sim-T",
    "sim-DINO-analog",
    "subject-sim",
    "PARG-score",
    "PARG-sim-I",
    "SEMA-C",
    "QUAL-I",
    "edit-Avg",
];

/// One report row. Scores not computed for a concept are left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ConceptScores {
    pub concept: String,
    #[serde(rename = "Rec")]
    pub rec: Option<f64>,
    #[serde(rename = "VQA-BLEU")]
    pub vqa_bleu: Option<f64>,
    #[serde(rename = "VQA-judge")]
    pub vqa_judge: Option<f64>,
    #[serde(rename = "QA-BLEU")]
    pub qa_bleu: Option<f64>,
    #[serde(rename = "QA-judge")]
    pub qa_judge: Option<f64>,
    #[serde(rename = "sim-I")]
    pub sim_i: Option<f64>,
    #[serde(rename = "sim-T")]
    pub sim_t: Option<f64>,
    #[serde(rename = "sim-DINO-analog")]
    pub sim_dino: Option<f64>,
    #[serde(rename = "subject-sim")]
    pub subject_sim: Option<f64>,
    #[serde(rename = "PARG-score")]
    pub parg_score: Option<f64>,
    #[serde(rename = "PARG-sim-I")]
    pub parg_sim_i: Option<f64>,
    #[serde(rename = "SEMA-C")]
    pub sema_c: Option<f64>,
    #[serde(rename = "QUAL-I")]
    pub qual_i: Option<f64>,
    #[serde(rename = "edit-Avg")]
    pub edit_avg: Option<f64>,
    /// Edit items whose judgment failed and were left out of the means.
    pub judge_missing: usize,
}

impl ConceptScores {
    pub fn values(&self) -> [Option<f64>; 14] {
        [
            self.rec,
            self.vqa_bleu,
            self.vqa_judge,
            self.qa_bleu,
            self.qa_judge,
            self.sim_i,
            self.sim_t,
            self.sim_dino,
            self.subject_sim,
            self.parg_score,
            self.parg_sim_i,
            self.sema_c,
            self.qual_i,
            self.edit_avg,
        ]
    }

    fn values_mut(&mut self) -> [&mut Option<f64>; 14] {
        [
            &mut self.rec,
            &mut self.vqa_bleu,
            &mut self.vqa_judge,
            &mut self.qa_bleu,
            &mut self.qa_judge,
            &mut self.sim_i,
            &mut self.sim_t,
            &mut self.sim_dino,
            &mut self.subject_sim,
            &mut self.parg_score,
            &mut self.parg_sim_i,
            &mut self.sema_c,
            &mut self.qual_i,
            &mut self.edit_avg,
        ]
    }

    /// Value of a column by its header name.
    pub fn get(&self, column: &str) -> Option<f64> {
        COLUMNS.iter().position(|c| *c == column).and_then(|i| self.values()[i])
    }

    pub fn check_ranges(&self) -> Result<()> {
        for (name, v) in COLUMNS.iter().zip(self.values()) {
            if let Some(v) = v {
                // cosine-based scores may dip below zero for bad generations
                let lo = if name.starts_with("sim") || *name == "subject-sim" || *name == "PARG-sim-I" { -1.0 } else { 0.0 };
                if !(lo..=1.0 + 1e-12).contains(&v) {
                    return Err(Error::Contract(format!("{} {name} = {v} outside [{lo}, 1]", self.concept)));
                }
            }
        }
        Ok(())
    }
}

pub const MEAN_ROW: &str = "mean";

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub concepts: Vec<ConceptScores>,
    pub mean: ConceptScores,
}

/// Arithmetic means over the concepts that have each score.
pub fn aggregate_report(concepts: Vec<ConceptScores>) -> Result<MetricReport> {
    if concepts.is_empty() {
        return Err(Error::Contract("report needs at least one concept".into()));
    }
    let mut mean = ConceptScores {
        concept: MEAN_ROW.into(),
        judge_missing: concepts.iter().map(|c| c.judge_missing).sum(),
        ..ConceptScores::default()
    };
    for (i, slot) in mean.values_mut().into_iter().enumerate() {
        let vals: Vec<f64> = concepts.iter().filter_map(|c| c.values()[i]).collect();
        if !vals.is_empty() {
            *slot = Some(vals.iter().sum::<f64>() / vals.len() as f64);
        }
    }
    Ok(MetricReport { concepts, mean })
}

impl MetricReport {
    /// Concept rows followed by the mean row.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for row in self.concepts.iter().chain(std::iter::once(&self.mean)) {
            w.serialize(row)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv(path: &Path) -> Result<Self> {
        let mut r = csv::Reader::from_path(path)?;
        let mut rows: Vec<ConceptScores> = r.deserialize().collect::<std::result::Result<_, _>>()?;
        match rows.pop() {
            Some(mean) if mean.concept == MEAN_ROW => Ok(Self { concepts: rows, mean }),
            _ => Err(Error::Format(format!("{} has no mean row", path.display()))),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(name: &str, rec: f64) -> ConceptScores {
        ConceptScores {
            concept: name.into(),
            rec: Some(rec),
            sema_c: Some(0.711),
            qual_i: Some(0.605),
            edit_avg: Some(0.658),
            ..ConceptScores::default()
        }
    }

    #[test]
    fn single_concept_is_its_own_mean() {
        let r = aggregate_report(vec![row("a", 0.9)]).unwrap();
        assert_eq!(r.mean.values(), r.concepts[0].values());
        assert!(aggregate_report(vec![]).is_err());
    }

    #[test]
    fn two_concept_mean() {
        let mut b = row("b", 0.6);
        b.judge_missing = 2;
        let r = aggregate_report(vec![row("a", 0.8), b]).unwrap();
        assert!((r.mean.rec.unwrap() - 0.7).abs() < 1e-15);
        assert_eq!(r.mean.judge_missing, 2);
        assert_eq!(r.mean.sim_i, None);
    }

    #[test]
    fn csv_round_trip_and_column_order() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("report.csv");
        let mut a = row("a", 1.0 / 3.0);
        a.sim_i = Some(0.123456789012345678);
        let r = aggregate_report(vec![a, row("b", 0.1)]).unwrap();
        r.write_csv(&p).unwrap();
        assert_eq!(MetricReport::read_csv(&p).unwrap(), r);
        let header = std::fs::read_to_string(&p).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, format!("concept,{},judge_missing", COLUMNS.join(",")));
    }

    #[test]
    fn range_check() {
        let mut r = row("a", 0.5);
        assert!(r.check_ranges().is_ok());
        r.rec = Some(1.5);
        assert!(r.check_ranges().is_err());
        assert_eq!(row("a", 0.5).get("edit-Avg"), Some(0.658));
    }
}
