//! Precision, recall and F1 with label 1 (forwarding the later source) as
//! the positive class, plus the temporal split and group ablation.

use std::fmt;
use std::io::Write;

use serde::{Serialize, Serializer};

use crate::error::{Error, Result};
use crate::exposure::ChoiceInstance;
use crate::features::{FeatureGroup, Grouping, LabeledVector};
use crate::model::{fit, ChoiceModel, FitConfig, TrainReport};
use crate::par;

pub const DEFAULT_THRESHOLD: f64 = 0.5;

/// A ratio that may be undefined because its denominator is zero.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Metric {
    Defined(f64),
    Undefined,
}

impl Metric {
    pub fn ratio(num: f64, den: f64) -> Self {
        if den > 0.0 {
            Metric::Defined(num / den)
        } else {
            Metric::Undefined
        }
    }

    pub fn value(self) -> Option<f64> {
        match self {
            Metric::Defined(v) => Some(v),
            Metric::Undefined => None,
        }
    }

    pub fn is_defined(self) -> bool {
        matches!(self, Metric::Defined(_))
    }

    /// Fixed-precision text, `"undefined"` when undefined.
    pub fn format(self, decimals: usize) -> String {
        match self {
            Metric::Defined(v) => format!("{v:.decimals$}"),
            Metric::Undefined => "undefined".to_string(),
        }
    }
}

impl fmt::Display for Metric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.format(4))
    }
}

impl Serialize for Metric {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Metric::Defined(v) => s.serialize_f64(*v),
            Metric::Undefined => s.serialize_str("undefined"),
        }
    }
}

/// Harmonic mean of precision and recall.
pub fn f_score(precision: Metric, recall: Metric) -> Metric {
    match (precision, recall) {
        (Metric::Defined(p), Metric::Defined(r)) => Metric::ratio(2.0 * p * r, p + r),
        _ => Metric::Undefined,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EvalReport {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
    pub n: usize,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub threshold: f64,
    pub features: Vec<usize>,
}

impl EvalReport {
    pub fn from_counts(
        tp: usize,
        fp: usize,
        fn_: usize,
        tn: usize,
        threshold: f64,
        features: Vec<usize>,
    ) -> Self {
        let precision = Metric::ratio(tp as f64, (tp + fp) as f64);
        let recall = Metric::ratio(tp as f64, (tp + fn_) as f64);
        EvalReport {
            tp,
            fp,
            fn_,
            tn,
            n: tp + fp + fn_ + tn,
            precision,
            recall,
            f1: f_score(precision, recall),
            threshold,
            features,
        }
    }
}

/// Scores `model` on `test` at `threshold`.
pub fn evaluate(model: &ChoiceModel, test: &[LabeledVector], threshold: f64) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::Contract(
            "cannot evaluate on an empty test set".into(),
        ));
    }
    let predictions = par::map(test, |r| (model.classify(&r.x, threshold), r.label));
    let (mut tp, mut fp, mut fn_, mut tn) = (0, 0, 0, 0);
    for (pred, label) in predictions {
        match (pred, label) {
            (1, 1) => tp += 1,
            (1, _) => fp += 1,
            (_, 1) => fn_ += 1,
            _ => tn += 1,
        }
    }
    Ok(EvalReport::from_counts(
        tp,
        fp,
        fn_,
        tn,
        threshold,
        model.features.clone(),
    ))
}

/// Instances whose cascade was posted before `boundary` go to training, the
/// rest to testing. Relative order is preserved.
pub fn temporal_split(
    instances: &[ChoiceInstance],
    boundary: i64,
) -> (Vec<ChoiceInstance>, Vec<ChoiceInstance>) {
    instances.iter().partition(|i| i.root_time < boundary)
}

/// Row labels, in reporting order.
pub const ABLATION_ROWS: [&str; 5] = [
    "Our Method",
    "Without Content Features",
    "Without Structural Features",
    "Without Temporal Features",
    "Without History Features",
];

#[derive(Debug, Clone, Serialize)]
pub struct AblationRow {
    pub method: String,
    pub excluded: Option<FeatureGroup>,
    pub report: EvalReport,
    pub train: TrainReport,
}

/// Reference predictors, not fitted models.
#[derive(Debug, Clone, Serialize)]
pub struct BaselineRow {
    pub method: String,
    pub precision: Metric,
    pub recall: Metric,
    pub f1: Metric,
    pub n: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
    pub baselines: Vec<BaselineRow>,
}

impl AblationTable {
    pub fn row(&self, excluded: Option<FeatureGroup>) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.excluded == excluded)
    }

    /// `Method\tPrecision\tRecall\tF1\tN`.
    pub fn write_tsv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "Method\tPrecision\tRecall\tF1\tN")?;
        for r in &self.rows {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                r.method,
                r.report.precision.format(4),
                r.report.recall.format(4),
                r.report.f1.format(4),
                r.report.n
            )?;
        }
        for b in &self.baselines {
            writeln!(
                w,
                "{}\t{}\t{}\t{}\t{}",
                b.method,
                b.precision.format(4),
                b.recall.format(4),
                b.f1.format(4),
                b.n
            )?;
        }
        Ok(())
    }

    pub fn to_pretty(&self) -> String {
        let mut lines: Vec<[String; 5]> = vec![[
            "Method".into(),
            "Precision".into(),
            "Recall".into(),
            "F1".into(),
            "N".into(),
        ]];
        for r in &self.rows {
            lines.push([
                r.method.clone(),
                r.report.precision.format(3),
                r.report.recall.format(3),
                r.report.f1.format(3),
                r.report.n.to_string(),
            ]);
        }
        for b in &self.baselines {
            lines.push([
                b.method.clone(),
                b.precision.format(3),
                b.recall.format(3),
                b.f1.format(3),
                b.n.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..5)
            .map(|c| lines.iter().map(|l| l[c].len()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (k, l) in lines.iter().enumerate() {
            out.push_str(&format!("{:<w$}", l[0], w = widths[0]));
            for c in 1..5 {
                out.push_str(&format!("  {:>w$}", l[c], w = widths[c]));
            }
            out.push('\n');
            if k == 0 {
                out.push_str(&"-".repeat(widths.iter().sum::<usize>() + 8));
                out.push('\n');
            }
        }
        out
    }
}

fn baselines(train: &[LabeledVector], test: &[LabeledVector]) -> Vec<BaselineRow> {
    let n = test.len();
    let pos = test.iter().filter(|r| r.label == 1).count();
    let train_pos = train.iter().filter(|r| r.label == 1).count();
    let majority_positive = 2 * train_pos >= train.len();

    let majority = if majority_positive {
        EvalReport::from_counts(pos, n - pos, 0, 0, DEFAULT_THRESHOLD, Vec::new())
    } else {
        EvalReport::from_counts(0, 0, pos, n - pos, DEFAULT_THRESHOLD, Vec::new())
    };
    // expected metrics of a fair coin
    let coin_p = Metric::ratio(pos as f64, n as f64);
    let coin_r = if pos > 0 {
        Metric::Defined(0.5)
    } else {
        Metric::Undefined
    };
    vec![
        BaselineRow {
            method: "Majority class (baseline)".into(),
            precision: majority.precision,
            recall: majority.recall,
            f1: majority.f1,
            n,
        },
        BaselineRow {
            method: "Coin flip, expected (baseline)".into(),
            precision: coin_p,
            recall: coin_r,
            f1: f_score(coin_p, coin_r),
            n,
        },
    ]
}

/// Fits the full model and one model per left-out group, each from
/// scratch, and evaluates all five on `test`.
pub fn run_ablation(
    train: &[LabeledVector],
    test: &[LabeledVector],
    grouping: &Grouping,
    config: &FitConfig,
    threshold: f64,
) -> Result<AblationTable> {
    grouping.validate()?;
    let variants: Vec<Option<FeatureGroup>> = std::iter::once(None)
        .chain(FeatureGroup::ALL.into_iter().map(Some))
        .collect();
    let results = par::map(&variants, |excluded| -> Result<AblationRow> {
        let cfg = FitConfig {
            grouping: grouping.clone(),
            excluded: excluded.iter().copied().collect(),
            ..config.clone()
        };
        let (model, train_report) = fit(train, &cfg)?;
        let report = evaluate(&model, test, threshold)?;
        let idx = excluded.map_or(0, |g| {
            1 + FeatureGroup::ALL.iter().position(|x| *x == g).unwrap_or(0)
        });
        Ok(AblationRow {
            method: ABLATION_ROWS[idx].to_string(),
            excluded: *excluded,
            report,
            train: train_report,
        })
    });
    let rows = results.into_iter().collect::<Result<Vec<_>>>()?;
    Ok(AblationTable {
        rows,
        baselines: baselines(train, test),
    })
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::cascade::ForwardEvent;
    use crate::features::FeatureVector;
    use crate::graph::UserId;

    #[test]
    fn f_formula_anchor() {
        let f = f_score(Metric::Defined(0.913), Metric::Defined(0.772))
            .value()
            .unwrap();
        assert!((f - 0.837).abs() < 0.0005, "{f}");
    }

    #[test]
    fn perfect_classifier() {
        let r = EvalReport::from_counts(7, 0, 0, 5, 0.5, vec![]);
        assert_eq!(r.precision, Metric::Defined(1.0));
        assert_eq!(r.recall, Metric::Defined(1.0));
        assert_eq!(r.f1, Metric::Defined(1.0));
    }

    #[test]
    fn all_negative_predictions() {
        let r = EvalReport::from_counts(0, 0, 4, 6, 0.5, vec![]);
        assert_eq!(r.precision, Metric::Undefined);
        assert_eq!(r.recall, Metric::Defined(0.0));
        assert_eq!(r.f1, Metric::Undefined);
        let json = serde_json::to_value(&r).unwrap();
        assert_eq!(json["precision"], "undefined");
        assert_eq!(json["recall"], 0.0);
    }

    #[test]
    fn evaluate_requires_data() {
        let m = ChoiceModel::zeros(vec![1]);
        assert!(matches!(evaluate(&m, &[], 0.5), Err(Error::Contract(_))));
    }

    #[test]
    fn evaluate_counts() {
        // predict 1 iff f1 = 1
        let mut m = ChoiceModel::zeros(vec![1]);
        m.beta0 = -1.0;
        m.beta = vec![2.0];
        let row = |f1: f64, label| {
            let mut x = FeatureVector::default();
            x.set(1, f1);
            LabeledVector { x, label }
        };
        let test = [
            row(1.0, 1),
            row(1.0, 1),
            row(1.0, 0),
            row(0.0, 1),
            row(0.0, 0),
            row(0.0, 0),
        ];
        let r = evaluate(&m, &test, 0.5).unwrap();
        assert_eq!((r.tp, r.fp, r.fn_, r.tn, r.n), (2, 1, 1, 2, 6));
        assert_eq!(r.precision, Metric::Defined(2.0 / 3.0));
        let mut reversed = test;
        reversed.reverse();
        assert_eq!(evaluate(&m, &reversed, 0.5).unwrap(), r);
    }

    fn inst(message_id: u64, root_time: i64) -> ChoiceInstance {
        let e = ForwardEvent {
            event_id: 0,
            user: UserId(0),
            time: root_time,
            parent: None,
        };
        ChoiceInstance {
            message_id,
            root_time,
            allen: UserId(1),
            bob_event: e,
            jim_event: e,
            allen_event: e,
            label: 0,
            tied: false,
        }
    }

    #[test]
    fn split_by_root_time() {
        let times = [5, 99, 100, 100, 101, 0, 250, 99, 100];
        let all: Vec<_> = times
            .iter()
            .enumerate()
            .map(|(i, &t)| inst(i as u64, t))
            .collect();
        let (train, test) = temporal_split(&all, 100);
        let ids = |v: &[ChoiceInstance]| v.iter().map(|i| i.message_id).collect::<Vec<_>>();
        assert_eq!(ids(&train), vec![0, 1, 5, 7]);
        assert_eq!(ids(&test), vec![2, 3, 4, 6, 8]);
        let (train, test) = temporal_split(&all, -1);
        assert!(train.is_empty() && test.len() == 9);
        let (train, test) = temporal_split(&all, 1000);
        assert!(test.is_empty() && train.len() == 9);
    }

    #[test]
    fn unknown_group_is_config_error() {
        assert!(matches!(
            FeatureGroup::from_name("Lexical"),
            Err(Error::Config(_))
        ));
        let text = r#"{"content":[1,2,3],"structural":[4,5,6,7,8,9,10],"temporal":[11,12,13],"lexical":[14,15,16]}"#;
        assert!(matches!(Grouping::from_json(text), Err(Error::Config(_))));
    }

    #[test]
    fn pretty_table_lists_rows_in_order() {
        let report = EvalReport::from_counts(1, 0, 0, 1, 0.5, vec![]);
        let train = TrainReport {
            log_likelihood: 0.0,
            objective: 0.0,
            iterations: 0,
            converged: true,
            gradient_norm: 0.0,
            stop_reason: crate::model::StopReason::GradientNorm,
            n: 2,
            trace: vec![],
        };
        let rows = ABLATION_ROWS
            .iter()
            .map(|m| AblationRow {
                method: m.to_string(),
                excluded: None,
                report: report.clone(),
                train: train.clone(),
            })
            .collect();
        let t = AblationTable {
            rows,
            baselines: vec![],
        };
        let text = t.to_pretty();
        let pos: Vec<usize> = ABLATION_ROWS
            .iter()
            .map(|m| text.find(m).unwrap())
            .collect();
        assert!(pos.windows(2).all(|w| w[0] < w[1]));
        let mut tsv = Vec::new();
        t.write_tsv(&mut tsv).unwrap();
        assert!(String::from_utf8(tsv)
            .unwrap()
            .starts_with("Method\tPrecision\tRecall\tF1\tN\nOur Method\t1.0000"));
    }

    proptest! {
        #[test]
        fn report_invariants(tp in 0usize..50, fp in 0usize..50, fn_ in 0usize..50, tn in 0usize..50) {
            let r = EvalReport::from_counts(tp, fp, fn_, tn, 0.5, vec![]);
            prop_assert_eq!(r.tp + r.fp + r.fn_ + r.tn, r.n);
            for m in [r.precision, r.recall, r.f1] {
                if let Some(v) = m.value() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
            if let (Some(p), Some(rc), Some(f)) = (r.precision.value(), r.recall.value(), r.f1.value()) {
                prop_assert!(p.min(rc) - 1e-12 <= f && f <= p.max(rc) + 1e-12);
            }
            prop_assert_eq!(r.precision.is_defined(), tp + fp > 0);
            prop_assert_eq!(r.recall.is_defined(), tp + fn_ > 0);
        }
    }
}
