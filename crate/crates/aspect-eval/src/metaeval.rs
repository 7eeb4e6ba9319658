//! Rank-correlation meta-evaluation: Pearson r, Spearman rho, and Kendall
//! tau-b, with pooled and per-group aggregation.
//!
//! "Pooled" computes one correlation over all instances; "GroupedMean"
//! computes the correlation within each context group and averages the
//! defined ones, reporting how many groups were skipped. Correlations on
//! constant input are reported as undefined, never NaN.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PairedSeries {
    pub ids: Vec<String>,
    pub predicted: Vec<f64>,
    pub human: Vec<f64>,
    /// Context group key per instance, when grouped aggregation is wanted.
    pub groups: Option<Vec<String>>,
}

impl PairedSeries {
    pub fn new(ids: Vec<String>, predicted: Vec<f64>, human: Vec<f64>) -> Result<Self> {
        let series = PairedSeries {
            ids,
            predicted,
            human,
            groups: None,
        };
        series.validate()?;
        Ok(series)
    }

    pub fn with_groups(mut self, groups: Vec<String>) -> Result<Self> {
        if groups.len() != self.predicted.len() {
            return Err(Error::Validation("group keys do not align with the series".into()));
        }
        self.groups = Some(groups);
        Ok(self)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.predicted.len();
        if self.human.len() != n || self.ids.len() != n {
            return Err(Error::Validation("paired series sides have unequal length".into()));
        }
        if n < 2 {
            return Err(Error::Validation(format!("paired series needs n >= 2, got {n}")));
        }
        if self
            .predicted
            .iter()
            .chain(&self.human)
            .any(|v| !v.is_finite())
        {
            return Err(Error::Validation("paired series contains a non-finite value".into()));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.predicted.len()
    }

    pub fn is_empty(&self) -> bool {
        self.predicted.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Pearson,
    Spearman,
    KendallTauB,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::Pearson, Metric::Spearman, Metric::KendallTauB];
}

impl std::fmt::Display for Metric {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Metric::Pearson => "pearson",
            Metric::Spearman => "spearman",
            Metric::KendallTauB => "kendall_tau_b",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    Pooled,
    GroupedMean,
}

impl AggregationMode {
    pub const ALL: [AggregationMode; 2] = [AggregationMode::Pooled, AggregationMode::GroupedMean];
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            AggregationMode::Pooled => "pooled",
            AggregationMode::GroupedMean => "grouped_mean",
        };
        f.write_str(s)
    }
}

/// A correlation result. `value: None` means undefined (constant input);
/// the aggregation mode is always named so reports stay comparable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationReport {
    pub metric: Metric,
    pub mode: AggregationMode,
    pub value: Option<f64>,
    pub n: usize,
    pub groups_used: usize,
    pub groups_skipped: usize,
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

fn pearson_raw(x: &[f64], y: &[f64]) -> Option<f64> {
    let mx = mean(x);
    let my = mean(y);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        None
    } else {
        Some(sxy / (sxx * syy).sqrt())
    }
}

/// Average (fractional) ranks: ties receive the mean of their rank span.
pub fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let n = xs.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap());
    let mut ranks = vec![0.0; n];
    let mut i = 0;
    while i < n {
        let mut j = i;
        while j + 1 < n && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        // positions i..=j share the average of ranks i+1..=j+1
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &idx in &order[i..=j] {
            ranks[idx] = avg;
        }
        i = j + 1;
    }
    ranks
}

/// Sample Pearson correlation; undefined on constant input.
pub fn pearson(series: &PairedSeries) -> Result<Option<f64>> {
    series.validate()?;
    Ok(pearson_raw(&series.predicted, &series.human))
}

/// Spearman rho: Pearson correlation of average ranks.
pub fn spearman(series: &PairedSeries) -> Result<Option<f64>> {
    series.validate()?;
    let rx = average_ranks(&series.predicted);
    let ry = average_ranks(&series.human);
    Ok(pearson_raw(&rx, &ry))
}

/// Kendall tau-b with tie corrections over all pairs.
pub fn kendall_tau_b(series: &PairedSeries) -> Result<Option<f64>> {
    series.validate()?;
    let x = &series.predicted;
    let y = &series.human;
    let n = x.len();
    let mut concordant = 0u64;
    let mut discordant = 0u64;
    let mut tied_x_only = 0u64;
    let mut tied_y_only = 0u64;
    for i in 0..n {
        for j in (i + 1)..n {
            let dx = (x[i] - x[j]).partial_cmp(&0.0).unwrap();
            let dy = (y[i] - y[j]).partial_cmp(&0.0).unwrap();
            use std::cmp::Ordering::Equal;
            match (dx == Equal, dy == Equal) {
                (true, true) => {}
                (true, false) => tied_x_only += 1,
                (false, true) => tied_y_only += 1,
                (false, false) => {
                    if dx == dy {
                        concordant += 1;
                    } else {
                        discordant += 1;
                    }
                }
            }
        }
    }
    // pairs comparable on x: C + D + tied-on-y-only, and symmetrically
    let denom_x = (concordant + discordant + tied_y_only) as f64;
    let denom_y = (concordant + discordant + tied_x_only) as f64;
    if denom_x == 0.0 || denom_y == 0.0 {
        return Ok(None);
    }
    Ok(Some(
        (concordant as f64 - discordant as f64) / (denom_x * denom_y).sqrt(),
    ))
}

pub fn compute(metric: Metric, series: &PairedSeries) -> Result<Option<f64>> {
    match metric {
        Metric::Pearson => pearson(series),
        Metric::Spearman => spearman(series),
        Metric::KendallTauB => kendall_tau_b(series),
    }
}

/// Correlate a scored dataset either pooled or as the unweighted mean of
/// per-group correlations. Groups where the correlation is undefined or
/// |group| < 2 are skipped and counted.
pub fn segment_correlation(
    series: &PairedSeries,
    metric: Metric,
    mode: AggregationMode,
) -> Result<CorrelationReport> {
    series.validate()?;
    match mode {
        AggregationMode::Pooled => Ok(CorrelationReport {
            metric,
            mode,
            value: compute(metric, series)?,
            n: series.len(),
            groups_used: 1,
            groups_skipped: 0,
        }),
        AggregationMode::GroupedMean => {
            let groups = series.groups.as_ref().ok_or_else(|| {
                Error::Validation("grouped aggregation requires group keys".into())
            })?;
            // first-occurrence group order keeps reports deterministic
            let mut order: Vec<&String> = Vec::new();
            let mut buckets: HashMap<&String, Vec<usize>> = HashMap::new();
            for (i, g) in groups.iter().enumerate() {
                buckets.entry(g).or_insert_with(|| {
                    order.push(g);
                    Vec::new()
                });
                buckets.get_mut(g).unwrap().push(i);
            }
            let mut values = Vec::new();
            let mut skipped = 0usize;
            for g in order {
                let idx = &buckets[g];
                if idx.len() < 2 {
                    skipped += 1;
                    continue;
                }
                let sub = PairedSeries {
                    ids: idx.iter().map(|&i| series.ids[i].clone()).collect(),
                    predicted: idx.iter().map(|&i| series.predicted[i]).collect(),
                    human: idx.iter().map(|&i| series.human[i]).collect(),
                    groups: None,
                };
                match compute(metric, &sub)? {
                    Some(v) => values.push(v),
                    None => skipped += 1,
                }
            }
            if values.is_empty() {
                return Err(Error::Validation(format!(
                    "no usable groups for {metric} ({skipped} skipped)"
                )));
            }
            Ok(CorrelationReport {
                metric,
                mode,
                value: Some(mean(&values)),
                n: series.len(),
                groups_used: values.len(),
                groups_skipped: skipped,
            })
        }
    }
}
