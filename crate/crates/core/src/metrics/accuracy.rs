//! Per-pathology Top-1 accuracy over predicted and ground-truth label sets.

use std::collections::BTreeMap;

use crate::domain::{LabelSet, PathologyLabel};

use super::MetricsError;

/// Per-label accuracy plus the unweighted mean over the five labels.
pub fn multilabel_accuracy(
    preds: &[LabelSet],
    gts: &[LabelSet],
) -> Result<(BTreeMap<PathologyLabel, f64>, f64), MetricsError> {
    if preds.len() != gts.len() {
        return Err(MetricsError::LengthMismatch {
            left: preds.len(),
            right: gts.len(),
        });
    }
    if preds.is_empty() {
        return Err(MetricsError::EmptyInput("label sets"));
    }
    let total = preds.len() as f64;
    let mut per_label = BTreeMap::new();
    for label in PathologyLabel::ALL {
        let correct = preds
            .iter()
            .zip(gts)
            .filter(|(p, g)| p.get(label) == g.get(label))
            .count();
        per_label.insert(label, correct as f64 / total);
    }
    let avg = per_label.values().sum::<f64>() / PathologyLabel::ALL.len() as f64;
    Ok((per_label, avg))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let gts: Vec<LabelSet> = vec![
            LabelSet::from_positive(&[PathologyLabel::Pneumonia]),
            LabelSet::from_positive(&[PathologyLabel::Edema, PathologyLabel::Consolidation]),
        ];
        let (per_label, avg) = multilabel_accuracy(&gts, &gts).unwrap();
        assert!(per_label.values().all(|v| *v == 1.0));
        assert_eq!(avg, 1.0);
    }

    #[test]
    fn complement_predictions_score_zero() {
        let gts: Vec<LabelSet> = vec![
            LabelSet::from_positive(&[PathologyLabel::Pneumothorax]),
            LabelSet::all_false(),
        ];
        let preds: Vec<LabelSet> = gts.iter().map(|g| g.complement()).collect();
        let (per_label, avg) = multilabel_accuracy(&preds, &gts).unwrap();
        assert!(per_label.values().all(|v| *v == 0.0));
        assert_eq!(avg, 0.0);
    }

    #[test]
    fn three_of_four_pneumothorax() {
        let gt = LabelSet::from_positive(&[PathologyLabel::Pneumothorax]);
        let gts = vec![gt; 4];
        let mut preds = vec![gt; 3];
        preds.push(gt.with(PathologyLabel::Pneumothorax, false));
        let (per_label, _) = multilabel_accuracy(&preds, &gts).unwrap();
        assert_eq!(per_label[&PathologyLabel::Pneumothorax], 0.75);
        assert_eq!(per_label[&PathologyLabel::Edema], 1.0);
    }

    #[test]
    fn avg_is_mean_of_per_label() {
        let gts = vec![
            LabelSet::from_positive(&[PathologyLabel::Pneumonia]),
            LabelSet::from_positive(&[PathologyLabel::Edema]),
            LabelSet::all_false(),
        ];
        let preds = vec![
            LabelSet::from_positive(&[PathologyLabel::Pneumonia, PathologyLabel::Edema]),
            LabelSet::all_false(),
            LabelSet::from_positive(&[PathologyLabel::Consolidation]),
        ];
        let (per_label, avg) = multilabel_accuracy(&preds, &gts).unwrap();
        let mean = per_label.values().sum::<f64>() / 5.0;
        assert!((avg - mean).abs() < f64::EPSILON);
    }

    #[test]
    fn length_mismatch_rejected() {
        let a = vec![LabelSet::all_false()];
        let b = vec![LabelSet::all_false(), LabelSet::all_false()];
        assert!(matches!(
            multilabel_accuracy(&a, &b),
            Err(MetricsError::LengthMismatch { left: 1, right: 2 })
        ));
    }
}
