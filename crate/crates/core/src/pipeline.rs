//! Evaluation of a trained model on a dataset split.

use std::fmt::Write as _;

use crate::error::Result;
use crate::metrics::{build_report, mae, MetricsReport, PredictionRecord, ProtocolConfig};
use crate::model::{HeadChoice, Model};
use crate::routing::{apply_policy, head_records, paired_outputs, to_records, KlMode, Policy, RoutingReport};
use crate::synth::Dataset;
use crate::tensor::Real;

#[derive(Clone, Debug)]
pub struct VariantResult {
    pub policy: Policy,
    pub records: Vec<PredictionRecord>,
    pub report: MetricsReport,
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    /// One entry per policy; only `Vanilla` when the model has one head.
    pub variants: Vec<VariantResult>,
    pub routing: Option<RoutingReport>,
}

impl Evaluation {
    pub fn variant(&self, policy: Policy) -> Option<&VariantResult> {
        self.variants.iter().find(|v| v.policy == policy)
    }

    /// Table with one row per policy.
    pub fn summary(&self) -> String {
        let mut s = String::from("variant            MAE      CMAE     CMAE[head]  CMAE[tail]\n");
        let fmt = |v: Option<f64>| v.map_or("--".to_string(), |v| format!("{v:.4}"));
        for v in &self.variants {
            let r = &v.report;
            let _ = writeln!(
                s,
                "{:<18} {:<8.4} {:<8.4} {:<11} {}",
                v.policy.name(),
                r.mae,
                r.cmae,
                fmt(r.head_cmae()),
                fmt(r.tail_cmae())
            );
        }
        s
    }
}

/// Scores every policy on `subset` (the test split by default).
pub fn evaluate<T: Real>(
    model: &Model<T>,
    data: &Dataset,
    subset: &[usize],
    protocol: &ProtocolConfig,
    mode: KlMode,
) -> Result<Evaluation> {
    let outputs = paired_outputs(model, data, subset)?;
    let mut variants = Vec::new();
    let mut routing = None;
    if model.balanced.is_none() {
        let records = head_records(&outputs, HeadChoice::Vanilla)?;
        let report = build_report(&records, protocol)?;
        variants.push(VariantResult {
            policy: Policy::Vanilla,
            records,
            report,
        });
    } else {
        for policy in Policy::ALL {
            let routed = apply_policy(&outputs, policy, mode)?;
            let records = to_records(&routed);
            let report = build_report(&records, protocol)?;
            if policy == Policy::SmallerUpsilon {
                routing = Some(RoutingReport::build(routed, protocol));
            }
            variants.push(VariantResult {
                policy,
                records,
                report,
            });
        }
    }
    Ok(Evaluation { variants, routing })
}

/// MAE on `test` of always predicting the mean training age.
pub fn mean_baseline_mae(data: &Dataset) -> Result<f64> {
    let train_mean = data.train.iter().map(|&i| data.ages[i] as f64).sum::<f64>() / data.train.len().max(1) as f64;
    let records: Vec<PredictionRecord> = data
        .test
        .iter()
        .map(|&i| PredictionRecord::new(data.ids[i].clone(), data.ages[i], train_mean))
        .collect();
    mae(&records)
}
