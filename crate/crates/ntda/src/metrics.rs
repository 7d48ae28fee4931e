//! Evaluation: classification metrics, noise-selection quality against
//! ground-truth clean flags, the structured metrics report, and embedding
//! export for offline projection.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::DomainDataset;
use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::noisemodel::compute_weights;
use crate::trainer::TrainConfig;

pub const REPORT_SCHEMA: &str = "ntda-report/1";
pub const EMBEDDINGS_SCHEMA: &str = "ntda-embeddings/1";

/// The structured evaluation output. Serialized field order is fixed and
/// there are no timestamps, so identical runs produce identical bytes.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema: String,
    pub target_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub selection_precision: Option<f64>,
    pub selection_recall: Option<f64>,
    pub per_class_accuracy: Vec<f64>,
    pub config_echo: TrainConfig,
}

impl MetricsReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn validate(&self) -> Result<()> {
        let mut rates = vec![
            self.target_accuracy,
            self.macro_precision,
            self.macro_recall,
            self.macro_f1,
        ];
        rates.extend(self.selection_precision);
        rates.extend(self.selection_recall);
        rates.extend(self.per_class_accuracy.iter().copied());
        if rates.iter().any(|r| !(0.0..=1.0).contains(r)) {
            return Err(Error::Config("metrics outside [0, 1]".into()));
        }
        Ok(())
    }
}

/// Fraction of exact matches.
pub fn accuracy(pred: &[usize], truth: &[usize]) -> Result<f64> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::EmptyBatch(format!(
            "accuracy over {} predictions vs {} labels",
            pred.len(),
            truth.len()
        )));
    }
    let hits = pred.iter().zip(truth).filter(|(a, b)| a == b).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Macro precision/recall (unweighted class means, 0/0 -> 0 per class) and
/// their harmonic mean as F1.
pub fn macro_prf(pred: &[usize], truth: &[usize], class_count: usize) -> Result<(f64, f64, f64)> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::EmptyBatch("macro_prf on empty or mismatched inputs".into()));
    }
    if pred.iter().chain(truth).any(|&y| y >= class_count) {
        return Err(Error::Config(format!(
            "label out of range for {class_count} classes"
        )));
    }
    let mut tp = vec![0usize; class_count];
    let mut fp = vec![0usize; class_count];
    let mut fn_ = vec![0usize; class_count];
    for (&p, &t) in pred.iter().zip(truth) {
        if p == t {
            tp[p] += 1;
        } else {
            fp[p] += 1;
            fn_[t] += 1;
        }
    }
    let ratio = |num: usize, den: usize| if den == 0 { 0.0 } else { num as f64 / den as f64 };
    let mp = (0..class_count)
        .map(|c| ratio(tp[c], tp[c] + fp[c]))
        .sum::<f64>()
        / class_count as f64;
    let mr = (0..class_count)
        .map(|c| ratio(tp[c], tp[c] + fn_[c]))
        .sum::<f64>()
        / class_count as f64;
    let f1 = if mp + mr == 0.0 {
        0.0
    } else {
        2.0 * mp * mr / (mp + mr)
    };
    Ok((mp, mr, f1))
}

/// Per-class recall; classes absent from `truth` score 0.
pub fn per_class_accuracy(pred: &[usize], truth: &[usize], class_count: usize) -> Result<Vec<f64>> {
    if pred.is_empty() || pred.len() != truth.len() {
        return Err(Error::EmptyBatch("per-class accuracy on empty input".into()));
    }
    let mut hits = vec![0usize; class_count];
    let mut totals = vec![0usize; class_count];
    for (&p, &t) in pred.iter().zip(truth) {
        totals[t] += 1;
        if p == t {
            hits[t] += 1;
        }
    }
    Ok((0..class_count)
        .map(|c| {
            if totals[c] == 0 {
                0.0
            } else {
                hits[c] as f64 / totals[c] as f64
            }
        })
        .collect())
}

/// Quality of the clean-sample filter: the selected set is `{i : w_i > 0}`;
/// precision is the clean fraction among selected, recall the selected
/// fraction among clean. An empty selected set scores (0, 0) by convention.
pub fn selection_prf(weights: &[f64], clean_flags: &[bool]) -> Result<(f64, f64)> {
    if weights.len() != clean_flags.len() {
        return Err(Error::ShapeMismatch(format!(
            "{} weights vs {} flags",
            weights.len(),
            clean_flags.len()
        )));
    }
    let selected = weights.iter().filter(|&&w| w > 0.0).count();
    let clean = clean_flags.iter().filter(|&&f| f).count();
    let selected_clean = weights
        .iter()
        .zip(clean_flags)
        .filter(|(&w, &f)| w > 0.0 && f)
        .count();
    let precision = if selected == 0 {
        0.0
    } else {
        selected_clean as f64 / selected as f64
    };
    let recall = if clean == 0 {
        0.0
    } else {
        selected_clean as f64 / clean as f64
    };
    Ok((precision, recall))
}

/// Fits the noise model on `source` at the current model state and scores the
/// resulting selection against the dataset's ground-truth clean flags.
pub fn selection_metrics(
    model: &ModelState,
    source: &DomainDataset,
    eta: f64,
) -> Result<(f64, f64)> {
    let flags = source.clean_flags().ok_or_else(|| {
        Error::NotApplicable("selection metrics need ground-truth clean flags".into())
    })?;
    let (weights, _) = compute_weights(model, source, eta)?;
    selection_prf(&weights, flags)
}

/// Full evaluation of a model against a labeled target dataset; selection
/// metrics are included when a source dataset with clean flags is supplied.
pub fn evaluate(
    model: &ModelState,
    target: &DomainDataset,
    source: Option<&DomainDataset>,
    config: &TrainConfig,
) -> Result<MetricsReport> {
    let features = model.extractor.forward(target.features())?;
    let pred = model.prototypes.classify(&features)?;
    let truth = target.labels();
    let target_accuracy = accuracy(&pred, truth)?;
    let (mp, mr, f1) = macro_prf(&pred, truth, target.class_count())?;
    let per_class = per_class_accuracy(&pred, truth, target.class_count())?;
    let (sel_p, sel_r) = match source {
        Some(src) if src.clean_flags().is_some() => {
            let (p, r) = selection_metrics(model, src, config.eta)?;
            (Some(p), Some(r))
        }
        _ => (None, None),
    };
    let report = MetricsReport {
        schema: REPORT_SCHEMA.to_string(),
        target_accuracy,
        macro_precision: mp,
        macro_recall: mr,
        macro_f1: f1,
        selection_precision: sel_p,
        selection_recall: sel_r,
        per_class_accuracy: per_class,
        config_echo: config.clone(),
    };
    report.validate()?;
    Ok(report)
}

/// Writes `(schema, domain, true_label, predicted_label, weight, e0..e{d-1})`
/// rows for every source and target sample; the weight column is empty for
/// target rows. Intended for offline t-SNE/UMAP-style projection.
pub fn export_embeddings(
    model: &ModelState,
    source: &DomainDataset,
    source_weights: Option<&[f64]>,
    target: &DomainDataset,
    path: &Path,
) -> Result<()> {
    if let Some(w) = source_weights {
        if w.len() != source.len() {
            return Err(Error::ShapeMismatch(format!(
                "{} weights for {} source rows",
                w.len(),
                source.len()
            )));
        }
    }
    let d = model.prototypes.embed_dim();
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    let mut header = String::from("schema,domain,true_label,predicted_label,weight");
    for k in 0..d {
        header.push_str(&format!(",e{k}"));
    }
    writeln!(out, "{header}")?;

    for (ds, weights) in [(source, source_weights), (target, None)] {
        let features = model.extractor.forward(ds.features())?;
        let pred = model.prototypes.classify(&features)?;
        for i in 0..ds.len() {
            let weight = weights.map_or(String::new(), |w| w[i].to_string());
            let mut line = format!(
                "{},{},{},{},{}",
                EMBEDDINGS_SCHEMA,
                ds.domain_tag(),
                ds.labels()[i],
                pred[i],
                weight
            );
            for v in features.row(i) {
                line.push_str(&format!(",{v}"));
            }
            writeln!(out, "{line}")?;
        }
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn accuracy_trivial_cases() {
        assert_eq!(accuracy(&[1, 2, 3], &[1, 2, 3]).unwrap(), 1.0);
        assert_eq!(accuracy(&[0, 0], &[1, 1]).unwrap(), 0.0);
        assert_eq!(accuracy(&[1, 2, 3, 0], &[1, 2, 3, 1]).unwrap(), 0.75);
        assert!(accuracy(&[], &[]).is_err());
    }

    #[test]
    fn macro_prf_hand_example() {
        // M = 2, pred = [0,0,1,1], truth = [0,1,1,1]:
        // class 0: tp 1, fp 1 -> P0 = 0.5; class 1: tp 2, fp 0 -> P1 = 1.
        // R0 = 1, R1 = 2/3. MP = 0.75, MR = 5/6, F1 = their harmonic mean.
        let (mp, mr, f1) = macro_prf(&[0, 0, 1, 1], &[0, 1, 1, 1], 2).unwrap();
        assert!((mp - 0.75).abs() < 1e-12);
        assert!((mr - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((f1 - 0.7895).abs() < 1e-4, "f1 {f1}");
    }

    #[test]
    fn macro_prf_perfect_and_missing_class() {
        let (mp, mr, f1) = macro_prf(&[0, 1, 2], &[0, 1, 2], 3).unwrap();
        assert_eq!((mp, mr, f1), (1.0, 1.0, 1.0));

        // Class 2 never predicted: its precision term contributes 0.
        let (mp, _, _) = macro_prf(&[0, 0, 1], &[0, 2, 1], 3).unwrap();
        assert!((mp - (0.5 + 1.0) / 3.0).abs() < 1e-12, "mp {mp}");
    }

    #[test]
    fn selection_prf_cases() {
        let flags = [true, true, false, true];
        assert_eq!(
            selection_prf(&[1.0, 0.5, 0.0, 0.2], &flags).unwrap(),
            (1.0, 1.0)
        );
        assert_eq!(selection_prf(&[0.0; 4], &flags).unwrap(), (0.0, 0.0));

        // 90 of 100 selected are clean; 90 of 95 clean are selected.
        let mut weights = vec![0.0; 105];
        let mut flags = vec![false; 105];
        for f in flags.iter_mut().take(95) {
            *f = true;
        }
        for w in weights.iter_mut().take(90) {
            *w = 1.0; // selected clean
        }
        for w in weights.iter_mut().skip(95) {
            *w = 1.0; // selected noisy
        }
        let (p, r) = selection_prf(&weights, &flags).unwrap();
        assert!((p - 0.9).abs() < 1e-12);
        assert!((r - 90.0 / 95.0).abs() < 1e-12);
    }

    #[test]
    fn per_class_accuracy_handles_missing_truth_class() {
        let acc = per_class_accuracy(&[0, 0, 1], &[0, 1, 1], 3).unwrap();
        assert_eq!(acc, vec![1.0, 0.5, 0.0]);
    }
}
