use serde::{Deserialize, Serialize};

use crate::error::{degenerate, Result};
use crate::lab::{Corpus, DomainTag, ARTIFACTS};
use crate::metrics::{f1_accuracy_auc, plcc, srocc, BinaryOutcomes};
use crate::model::{Mode, Model};
use crate::pipeline::{score_clip, score_video};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub split: String,
    pub n: usize,
    pub srocc: f64,
    pub plcc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DetectionRow {
    pub split: String,
    pub artifact: String,
    pub positives: usize,
    pub n: usize,
    pub f1: f64,
    pub accuracy: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub checkpoint_hash: String,
    pub mode: Mode,
    pub threshold: f64,
    pub correlations: Vec<CorrelationRow>,
    pub detections: Vec<DetectionRow>,
}

pub fn correlation_row(split: &str, predicted: &[f64], mos: &[f64]) -> Result<CorrelationRow> {
    if predicted.is_empty() {
        return degenerate(format!("split {split:?} is empty"));
    }
    Ok(CorrelationRow { split: split.to_string(), n: predicted.len(), srocc: srocc(predicted, mos)?, plcc: plcc(predicted, mos)? })
}

/// One row per artifact class; `probs[i][k]` is item `i`'s probability for artifact `k`.
pub fn detection_rows(split: &str, probs: &[Vec<f64>], labels: &[Vec<u8>], threshold: f64) -> Result<Vec<DetectionRow>> {
    if probs.is_empty() {
        return degenerate(format!("split {split:?} is empty"));
    }
    ARTIFACTS
        .iter()
        .enumerate()
        .map(|(k, kind)| {
            let column: Vec<f64> = probs.iter().map(|p| p[k]).collect();
            let truth: Vec<bool> = labels.iter().map(|l| l[k] == 1).collect();
            let positives = truth.iter().filter(|&&t| t).count();
            let s = f1_accuracy_auc(&BinaryOutcomes::with_threshold(column, truth, threshold)?);
            Ok(DetectionRow {
                split: split.to_string(),
                artifact: kind.name().to_string(),
                positives,
                n: probs.len(),
                f1: s.f1,
                accuracy: s.accuracy,
                auc: s.auc,
            })
        })
        .collect()
}

/// Scores the Stage-3 videos through the inference pipeline (mean quality, max-pooled
/// artifacts) and the Stage-2 held-out patches.
pub fn evaluate(model: &Model, corpus: &Corpus, threshold: f64) -> Result<EvalReport> {
    let kernels = &corpus.config.lab.kernels;
    let fr = model.config.mode == Mode::Fr;
    let mut correlations = Vec::new();
    let mut detections = Vec::new();
    for (split, records, sources) in [
        ("stage3/train", &corpus.stage3.train, &corpus.video_sources.train),
        ("stage3/val", &corpus.stage3.val, &corpus.video_sources.val),
    ] {
        let (mut q, mut mos, mut probs, mut labels, mut domains) = (vec![], vec![], vec![], vec![], vec![]);
        for r in records {
            let (reference, dist) = r.materialize(sources, kernels)?;
            let report = score_video(&dist, fr.then_some(&reference), model)?;
            q.push(report.q_video);
            mos.push(r.mos.score);
            probs.push(report.artifact_summary.iter().map(|s| s.max).collect::<Vec<_>>());
            labels.push(r.labels.bits().to_vec());
            domains.push(r.domain);
        }
        correlations.push(correlation_row(split, &q, &mos)?);
        if split == "stage3/val" {
            for d in DomainTag::ALL {
                let idx: Vec<usize> = (0..q.len()).filter(|&i| domains[i] == d).collect();
                let pick = |x: &[f64]| idx.iter().map(|&i| x[i]).collect::<Vec<_>>();
                correlations.push(correlation_row(&format!("{split}/{d}"), &pick(&q), &pick(&mos))?);
            }
            detections.extend(detection_rows(split, &probs, &labels, threshold)?);
        }
    }
    let (mut probs, mut labels) = (vec![], vec![]);
    for r in &corpus.stage2.val {
        let (patch, reference) = r.materialize(&corpus.patch_sources.val, kernels)?;
        probs.push(score_clip(model, &patch, fr.then_some(&reference))?.1);
        labels.push(r.labels.bits().to_vec());
    }
    detections.extend(detection_rows("stage2/val", &probs, &labels, threshold)?);
    Ok(EvalReport { checkpoint_hash: model.state_hash(), mode: model.config.mode, threshold, correlations, detections })
}

/// Left-aligned first column, right-aligned others, two spaces apart.
pub(crate) fn align(rows: &[Vec<String>]) -> String {
    let cols = rows.iter().map(Vec::len).max().unwrap_or(0);
    let widths: Vec<usize> = (0..cols).map(|c| rows.iter().filter_map(|r| r.get(c)).map(|s| s.chars().count()).max().unwrap_or(0)).collect();
    let mut out = String::new();
    for r in rows {
        let cells: Vec<String> = r
            .iter()
            .enumerate()
            .map(|(c, s)| if c == 0 { format!("{s:<w$}", w = widths[c]) } else { format!("{s:>w$}", w = widths[c]) })
            .collect();
        out += cells.join("  ").trim_end();
        out.push('\n');
    }
    out
}

impl EvalReport {
    pub fn render(&self) -> String {
        let mut rows = vec![["split", "n", "SROCC", "PLCC"].map(String::from).to_vec()];
        for r in &self.correlations {
            rows.push(vec![r.split.clone(), r.n.to_string(), format!("{:.4}", r.srocc), format!("{:.4}", r.plcc)]);
        }
        let mut det = vec![["split", "artifact", "pos", "F1", "Acc", "AUC"].map(String::from).to_vec()];
        for r in &self.detections {
            let auc = r.auc.map_or("n/a".to_string(), |a| format!("{a:.4}"));
            det.push(vec![
                r.split.clone(),
                r.artifact.clone(),
                format!("{}/{}", r.positives, r.n),
                format!("{:.4}", r.f1),
                format!("{:.4}", r.accuracy),
                auc,
            ]);
        }
        format!("quality\n{}\ndetection (threshold {})\n{}", align(&rows), self.threshold, align(&det))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;

    #[test]
    fn empty_split_is_named() {
        match correlation_row("stage3/val", &[], &[]) {
            Err(Error::Degenerate(m)) => assert!(m.contains("stage3/val"), "{m}"),
            other => panic!("{other:?}"),
        }
        assert!(matches!(detection_rows("stage2/val", &[], &[], 0.5), Err(Error::Degenerate(m)) if m.contains("stage2/val")));
    }

    #[test]
    fn alignment_pads_columns() {
        let t = align(&[vec!["a".into(), "1".into()], vec!["bbb".into(), "22".into()]]);
        assert_eq!(t, "a     1\nbbb  22\n");
    }

    #[test]
    fn detection_rows_follow_taxonomy_order() {
        let probs = vec![vec![0.9; 10], vec![0.1; 10]];
        let labels = vec![vec![1; 10], vec![0; 10]];
        let rows = detection_rows("x", &probs, &labels, 0.5).unwrap();
        assert_eq!(rows.len(), 10);
        assert!(rows.iter().all(|r| r.f1 == 1.0 && r.accuracy == 1.0 && r.auc == Some(1.0)));
        assert_eq!(rows[0].artifact, ARTIFACTS[0].name());
    }
}
