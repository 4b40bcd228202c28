//! Evaluation metrics and report assembly.
//!
//! Predicted ages are used as real numbers throughout; nothing is rounded.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::labels::MAX_AGE;

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub id: String,
    pub y: usize,
    pub y_hat: f64,
    /// Per-sample annotation standard deviation, needed only for ε-error.
    pub sigma: Option<f64>,
}

impl PredictionRecord {
    pub fn new(id: impl Into<String>, y: usize, y_hat: f64) -> Self {
        PredictionRecord {
            id: id.into(),
            y,
            y_hat,
            sigma: None,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.sigma = Some(sigma);
        self
    }

    pub fn abs_error(&self) -> f64 {
        (self.y as f64 - self.y_hat).abs()
    }
}

/// Head/tail split and AAR grouping.
///
/// The head range is inclusive; the tails are whatever remains of `[0, K]`
/// on either side, so the three ranges always partition the label space.
#[derive(Clone, Debug, PartialEq)]
pub struct ProtocolConfig {
    pub max_age: usize,
    pub head_range: (usize, usize),
    pub group_width: usize,
}

impl Default for ProtocolConfig {
    fn default() -> Self {
        ProtocolConfig {
            max_age: MAX_AGE,
            head_range: (18, 65),
            group_width: 10,
        }
    }
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.head_range;
        if lo > hi || hi > self.max_age {
            bail!(Config, "head range {lo}-{hi} must satisfy lo <= hi <= {}", self.max_age);
        }
        if self.group_width == 0 {
            bail!(Config, "group width must be positive");
        }
        Ok(())
    }

    pub fn head(&self) -> (usize, usize) {
        self.head_range
    }

    /// Tail ranges below and above the head, skipping empty ones.
    pub fn tails(&self) -> Vec<(usize, usize)> {
        let (lo, hi) = self.head_range;
        let mut t = Vec::new();
        if lo > 0 {
            t.push((0, lo - 1));
        }
        if hi < self.max_age {
            t.push((hi + 1, self.max_age));
        }
        t
    }

    /// All protocol ranges in ascending order.
    pub fn ranges(&self) -> Vec<(usize, usize)> {
        let mut r = self.tails();
        r.push(self.head_range);
        r.sort();
        r
    }

    pub fn group_of(&self, age: usize) -> usize {
        age / self.group_width
    }

    pub fn is_head(&self, age: usize) -> bool {
        (self.head_range.0..=self.head_range.1).contains(&age)
    }
}

fn range_key((lo, hi): (usize, usize)) -> String {
    format!("{lo}-{hi}")
}

fn require_nonempty(records: &[PredictionRecord]) -> Result<()> {
    if records.is_empty() {
        bail!(InvalidInput, "no prediction records");
    }
    Ok(())
}

pub fn mae(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records)?;
    Ok(records.iter().map(PredictionRecord::abs_error).sum::<f64>() / records.len() as f64)
}

/// Per-class `(count, MAE)`; classes with no records have `None`.
pub fn per_class(records: &[PredictionRecord], max_age: usize) -> Vec<(usize, Option<f64>)> {
    let mut sum = vec![0.0; max_age + 1];
    let mut count = vec![0usize; max_age + 1];
    for r in records.iter().filter(|r| r.y <= max_age) {
        sum[r.y] += r.abs_error();
        count[r.y] += 1;
    }
    count
        .iter()
        .zip(sum)
        .map(|(&n, s)| (n, (n > 0).then(|| s / n as f64)))
        .collect()
}

fn class_mean(records: &[PredictionRecord], keep: impl Fn(usize) -> bool) -> Option<f64> {
    let k = records.iter().map(|r| r.y).max()?;
    let classes: Vec<f64> = per_class(records, k)
        .into_iter()
        .enumerate()
        .filter(|(age, _)| keep(*age))
        .filter_map(|(_, (_, m))| m)
        .collect();
    (!classes.is_empty()).then(|| classes.iter().sum::<f64>() / classes.len() as f64)
}

/// Class-wise MAE: the unweighted mean of per-class MAEs over non-empty classes.
pub fn cmae(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records)?;
    Ok(class_mean(records, |_| true).expect("non-empty records"))
}

/// CMAE restricted to classes inside any of `ranges`; `None` when they hold no records.
pub fn group_cmae(records: &[PredictionRecord], ranges: &[(usize, usize)]) -> Option<f64> {
    class_mean(records, |age| ranges.iter().any(|&(lo, hi)| (lo..=hi).contains(&age)))
}

/// `1 − mean exp(−(ŷ − y)² / 2σ²)`.
pub fn epsilon_error(records: &[PredictionRecord]) -> Result<f64> {
    require_nonempty(records)?;
    let mut acc = 0.0;
    for r in records {
        let Some(s) = r.sigma else {
            bail!(InvalidInput, "record '{}' has no sigma", r.id);
        };
        if !(s > 0.0) {
            bail!(InvalidInput, "record '{}' has non-positive sigma {s}", r.id);
        }
        let d = r.y_hat - r.y as f64;
        acc += (-d * d / (2.0 * s * s)).exp();
    }
    Ok(1.0 - acc / records.len() as f64)
}

/// `max(0, 7 − MAE) + max(0, 3 − σ)`.
pub fn aar_score(mae: f64, sigma: f64) -> f64 {
    (7.0 - mae).max(0.0) + (3.0 - sigma).max(0.0)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AarResult {
    pub aar: f64,
    pub mae: f64,
    pub sigma: f64,
    /// `(group index, MAE)` for every non-empty group, ascending.
    pub groups: Vec<(usize, f64)>,
}

pub fn aar(records: &[PredictionRecord], protocol: &ProtocolConfig) -> Result<AarResult> {
    protocol.validate()?;
    let overall = mae(records)?;
    let mut by_group: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in records {
        let e = by_group.entry(protocol.group_of(r.y)).or_default();
        e.0 += r.abs_error();
        e.1 += 1;
    }
    let groups: Vec<(usize, f64)> = by_group.into_iter().map(|(g, (s, n))| (g, s / n as f64)).collect();
    let var = groups.iter().map(|(_, m)| (m - overall).powi(2)).sum::<f64>() / groups.len() as f64;
    let sigma = var.sqrt();
    Ok(AarResult {
        aar: aar_score(overall, sigma),
        mae: overall,
        sigma,
        groups,
    })
}

/// MAE inside each inclusive range; ranges without records are `None`.
pub fn group_mae(records: &[PredictionRecord], ranges: &[(usize, usize)]) -> Vec<Option<f64>> {
    ranges
        .iter()
        .map(|&(lo, hi)| {
            let (s, n) = records
                .iter()
                .filter(|r| (lo..=hi).contains(&r.y))
                .fold((0.0, 0usize), |(s, n), r| (s + r.abs_error(), n + 1));
            (n > 0).then(|| s / n as f64)
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub mae: f64,
    pub cmae: f64,
    /// Length `K + 1`; `null` for ages without test samples.
    pub per_class_mae: Vec<Option<f64>>,
    pub per_class_count: Vec<usize>,
    /// Keyed by inclusive range `"lo-hi"`; empty ranges are absent.
    pub group_mae: BTreeMap<String, f64>,
    /// CMAE over the head classes and over all tail classes.
    pub group_cmae: BTreeMap<String, f64>,
    /// AAR groups keyed by their age span.
    pub decade_mae: BTreeMap<String, f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub epsilon: Option<f64>,
    pub aar: f64,
    pub sigma_spread: f64,
    pub n: usize,
    pub m: usize,
}

impl MetricsReport {
    pub fn head_cmae(&self) -> Option<f64> {
        self.group_cmae.get("head").copied()
    }

    pub fn tail_cmae(&self) -> Option<f64> {
        self.group_cmae.get("tail").copied()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load_json(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "samples   {}", self.n);
        let _ = writeln!(s, "classes   {}", self.m);
        let _ = writeln!(s, "MAE       {:.4}", self.mae);
        let _ = writeln!(s, "CMAE      {:.4}", self.cmae);
        if let Some(e) = self.epsilon {
            let _ = writeln!(s, "epsilon   {e:.4}");
        }
        let _ = writeln!(s, "AAR       {:.4}  (sigma {:.4})", self.aar, self.sigma_spread);
        for (k, v) in &self.group_mae {
            let _ = writeln!(s, "MAE[{k}]  {v:.4}");
        }
        for (k, v) in &self.group_cmae {
            let _ = writeln!(s, "CMAE[{k}]  {v:.4}");
        }
        s
    }
}

pub fn build_report(records: &[PredictionRecord], protocol: &ProtocolConfig) -> Result<MetricsReport> {
    protocol.validate()?;
    require_nonempty(records)?;
    for r in records {
        if r.y > protocol.max_age {
            bail!(
                InvalidInput,
                "record '{}': age {} exceeds {}",
                r.id,
                r.y,
                protocol.max_age
            );
        }
        if !r.y_hat.is_finite() {
            bail!(InvalidInput, "record '{}': non-finite prediction", r.id);
        }
    }
    let classes = per_class(records, protocol.max_age);
    let ranges = protocol.ranges();
    let group_mae = ranges
        .iter()
        .zip(group_mae(records, &ranges))
        .filter_map(|(&r, m)| m.map(|m| (range_key(r), m)))
        .collect();
    let mut group_cmae = BTreeMap::new();
    if let Some(h) = self::group_cmae(records, &[protocol.head()]) {
        group_cmae.insert("head".to_string(), h);
    }
    if let Some(t) = self::group_cmae(records, &protocol.tails()) {
        group_cmae.insert("tail".to_string(), t);
    }
    let a = aar(records, protocol)?;
    let w = protocol.group_width;
    let decade_mae = a
        .groups
        .iter()
        .map(|&(g, m)| (range_key((g * w, g * w + w - 1)), m))
        .collect();
    let epsilon = if records.iter().all(|r| r.sigma.is_some()) {
        Some(epsilon_error(records)?)
    } else {
        None
    };
    Ok(MetricsReport {
        mae: a.mae,
        cmae: cmae(records)?,
        per_class_mae: classes.iter().map(|c| c.1).collect(),
        per_class_count: classes.iter().map(|c| c.0).collect(),
        m: classes.iter().filter(|c| c.0 > 0).count(),
        n: records.len(),
        group_mae,
        group_cmae,
        decade_mae,
        epsilon,
        aar: a.aar,
        sigma_spread: a.sigma,
    })
}

/// Writes `id,true_age,pred_age[,sigma]`.
pub fn write_predictions(path: &Path, records: &[PredictionRecord]) -> Result<()> {
    let with_sigma = records.iter().any(|r| r.sigma.is_some());
    let mut w = crate::error::csv_writer(path)?;
    if with_sigma {
        w.write_record(["id", "true_age", "pred_age", "sigma"])?;
    } else {
        w.write_record(["id", "true_age", "pred_age"])?;
    }
    for r in records {
        let mut row = vec![r.id.clone(), r.y.to_string(), r.y_hat.to_string()];
        if with_sigma {
            row.push(r.sigma.map(|s| s.to_string()).unwrap_or_default());
        }
        w.write_record(&row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a prediction CSV; columns other than the four known ones are ignored.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let mut rdr = crate::error::csv_reader(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h.trim() == name);
    let (Some(ci), Some(cy), Some(cp)) = (col("id"), col("true_age"), col("pred_age")) else {
        bail!(
            InvalidInput,
            "{}: header must contain id,true_age,pred_age",
            path.display()
        );
    };
    let cs = col("sigma");
    let mut out = Vec::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row?;
        let line = i + 2;
        let field = |c: usize| row.get(c).map(str::trim).unwrap_or("");
        let y = field(cy)
            .parse()
            .map_err(|_| Error::InvalidInput(format!("line {line}: bad true_age '{}'", field(cy))))?;
        let y_hat: f64 = field(cp)
            .parse()
            .map_err(|_| Error::InvalidInput(format!("line {line}: bad pred_age '{}'", field(cp))))?;
        let sigma = match cs.map(field) {
            None | Some("") => None,
            Some(s) => Some(
                s.parse()
                    .map_err(|_| Error::InvalidInput(format!("line {line}: bad sigma '{s}'")))?,
            ),
        };
        out.push(PredictionRecord {
            id: field(ci).to_string(),
            y,
            y_hat,
            sigma,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn rec(y: usize, y_hat: f64) -> PredictionRecord {
        PredictionRecord::new(format!("{y}"), y, y_hat)
    }

    #[test]
    fn mae_examples() {
        assert_eq!(mae(&[rec(3, 3.0), rec(7, 7.0)]).unwrap(), 0.0);
        let r = [rec(10, 10.0), rec(10, 12.0), rec(10, 14.0)];
        assert!((mae(&r).unwrap() - 2.0).abs() < 1e-15);
        assert!(mae(&[]).is_err());
        assert!(cmae(&[]).is_err());
    }

    #[test]
    fn cmae_differs_under_imbalance() {
        let r = [rec(5, 5.0), rec(5, 7.0), rec(9, 13.0)];
        assert!((mae(&r).unwrap() - 2.0).abs() < 1e-15);
        assert!((cmae(&r).unwrap() - 2.5).abs() < 1e-15);
        let one = [rec(4, 1.0), rec(4, 6.0)];
        assert_eq!(cmae(&one).unwrap(), mae(&one).unwrap());
    }

    #[test]
    fn epsilon_examples() {
        let r = [rec(30, 31.5).with_sigma(1.5)];
        assert!((epsilon_error(&r).unwrap() - (1.0 - (-0.5f64).exp())).abs() < 1e-12);
        assert!((epsilon_error(&r).unwrap() - 0.393469).abs() < 1e-6);
        assert_eq!(epsilon_error(&[rec(1, 1.0).with_sigma(2.0)]).unwrap(), 0.0);
        assert!(epsilon_error(&[rec(1, 1.0)]).is_err());
        let far = epsilon_error(&[rec(0, 1e6).with_sigma(1.0)]).unwrap();
        assert_eq!(far, 1.0);
    }

    #[test]
    fn aar_examples() {
        assert_eq!(aar_score(0.0, 0.0), 10.0);
        assert_eq!(aar_score(7.0, 3.0), 0.0);
        assert_eq!(aar_score(9.0, 4.5), 0.0);
        assert!((aar_score(1.73, 0.69) - 7.58).abs() < 1e-9);
    }

    #[test]
    fn aar_groups_and_spread() {
        // groups 0 and 3: MAEs 1 and 3, overall 2 → σ = 1
        let r = [rec(2, 3.0), rec(35, 38.0)];
        let a = aar(&r, &ProtocolConfig::default()).unwrap();
        assert_eq!(a.groups, vec![(0, 1.0), (3, 3.0)]);
        assert!((a.sigma - 1.0).abs() < 1e-15);
        assert!((a.aar - (5.0 + 2.0)).abs() < 1e-15);
    }

    #[test]
    fn group_examples() {
        let p = ProtocolConfig::default();
        assert_eq!(p.ranges(), vec![(0, 17), (18, 65), (66, 100)]);
        let r = [rec(10, 13.0), rec(30, 31.0)];
        assert_eq!(group_mae(&r, &p.ranges()), vec![Some(3.0), Some(1.0), None]);
        let single = [rec(40, 42.0), rec(50, 49.0)];
        let g = group_mae(&single, &p.ranges());
        assert_eq!(g[1], Some(mae(&single).unwrap()));
        assert!(g[0].is_none() && g[2].is_none());
    }

    #[test]
    fn protocol_validation() {
        let bad = ProtocolConfig {
            head_range: (70, 20),
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let edge = ProtocolConfig {
            head_range: (0, 100),
            ..Default::default()
        };
        assert!(edge.tails().is_empty());
    }

    #[test]
    fn report_cross_checks() {
        let r = [rec(5, 5.0), rec(5, 7.0), rec(9, 13.0), rec(40, 41.0)];
        let p = ProtocolConfig::default();
        let rep = build_report(&r, &p).unwrap();
        assert_eq!(rep.per_class_mae.len(), 101);
        assert_eq!(rep.mae, mae(&r).unwrap());
        assert_eq!(rep.cmae, cmae(&r).unwrap());
        assert_eq!(rep.m, 3);
        assert_eq!(rep.n, 4);
        assert_eq!(rep.epsilon, None);
        assert_eq!(rep.group_mae.get("66-100"), None);
        assert_eq!(rep.head_cmae(), Some(1.0));
        assert_eq!(rep.tail_cmae(), Some(2.5));
        let json = rep.to_json().unwrap();
        assert!(!json.contains("epsilon"));
        for key in [
            "mae",
            "cmae",
            "per_class_mae",
            "group_mae",
            "aar",
            "sigma_spread",
            "\"n\"",
            "\"m\"",
        ] {
            assert!(json.contains(key), "{key}");
        }
        assert_eq!(MetricsReport::from_json(&json).unwrap(), rep);
        assert!(build_report(&[rec(101, 1.0)], &p).is_err());
    }

    #[test]
    fn csv_round_trip_ignores_extra_columns() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let r = vec![rec(3, 4.25).with_sigma(2.0), rec(80, 70.125).with_sigma(1.0)];
        write_predictions(&path, &r).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), r);
        std::fs::write(&path, "id,true_age,pred_age,chosen\na,5,6.5,vanilla\n").unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back, vec![PredictionRecord::new("a", 5, 6.5)]);
        std::fs::write(&path, "id,age\na,5\n").unwrap();
        assert!(read_predictions(&path).is_err());
    }

    fn naive(records: &[(usize, f64)]) -> (f64, f64) {
        let mut total = 0.0;
        for &(y, p) in records {
            total += (y as f64 - p).abs();
        }
        let mut class_maes = Vec::new();
        for k in 0..=100 {
            let mut s = 0.0;
            let mut n = 0;
            for &(y, p) in records {
                if y == k {
                    s += (y as f64 - p).abs();
                    n += 1;
                }
            }
            if n > 0 {
                class_maes.push(s / n as f64);
            }
        }
        let cm = class_maes.iter().sum::<f64>() / class_maes.len() as f64;
        (total / records.len() as f64, cm)
    }

    proptest! {
        #[test]
        fn matches_naive_and_recombines(
            raw in prop::collection::vec((0usize..=100, -20.0f64..120.0), 1..60)
        ) {
            let recs: Vec<_> = raw.iter().map(|&(y, p)| rec(y, p)).collect();
            let (m, c) = naive(&raw);
            prop_assert!((mae(&recs).unwrap() - m).abs() < 1e-9);
            prop_assert!((cmae(&recs).unwrap() - c).abs() < 1e-9);
            let p = ProtocolConfig::default();
            let ranges = p.ranges();
            let g = group_mae(&recs, &ranges);
            let mut recombined = 0.0;
            for (&(lo, hi), v) in ranges.iter().zip(&g) {
                let n = recs.iter().filter(|r| (lo..=hi).contains(&r.y)).count();
                if let Some(v) = v {
                    recombined += n as f64 / recs.len() as f64 * v;
                }
            }
            prop_assert!((recombined - m).abs() < 1e-9);
            let a = aar(&recs, &p).unwrap();
            prop_assert!((0.0..=10.0).contains(&a.aar));
            let mut rev = recs.clone();
            rev.reverse();
            prop_assert!((mae(&rev).unwrap() - m).abs() < 1e-12);
        }

        #[test]
        fn aar_monotone(m in 0.0f64..12.0, s in 0.0f64..6.0, dm in 0.0f64..2.0, ds in 0.0f64..2.0) {
            prop_assert!(aar_score(m + dm, s) <= aar_score(m, s));
            prop_assert!(aar_score(m, s + ds) <= aar_score(m, s));
        }

        #[test]
        fn equal_counts_make_cmae_equal_mae(
            preds in prop::collection::vec(prop::collection::vec(-10.0f64..110.0, 3), 1..8)
        ) {
            let mut recs = Vec::new();
            for (k, ps) in preds.iter().enumerate() {
                for &p in ps {
                    recs.push(rec(k * 7, p));
                }
            }
            prop_assert!((cmae(&recs).unwrap() - mae(&recs).unwrap()).abs() < 1e-9);
        }
    }
}
