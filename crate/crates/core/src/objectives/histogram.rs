use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HistogramSpec {
    pub bins: usize,
}

impl Default for HistogramSpec {
    fn default() -> Self {
        Self { bins: 256 }
    }
}

impl HistogramSpec {
    pub fn validate(&self) -> Result<()> {
        if self.bins < 2 {
            return Err(contract(format!(
                "histogram needs at least 2 bins, got {}",
                self.bins
            )));
        }
        Ok(())
    }

    fn top(&self) -> f64 {
        (self.bins - 1) as f64
    }

    /// Intensity level of a value in `[0, 1]`, clamping outside values.
    pub fn level(&self, x: f64) -> usize {
        (x.clamp(0.0, 1.0) * self.top()).round() as usize
    }

    pub fn value(&self, level: usize) -> f64 {
        level as f64 / self.top()
    }

    /// Normalized cumulative histogram over levels.
    pub fn cdf(&self, values: &[f64]) -> Vec<f64> {
        let mut counts = vec![0usize; self.bins];
        for &v in values {
            counts[self.level(v)] += 1;
        }
        let n = values.len() as f64;
        let mut acc = 0usize;
        counts
            .iter()
            .map(|&c| {
                acc += c;
                acc as f64 / n
            })
            .collect()
    }
}

/// Matches one channel by rank. Source values are ordered at full
/// precision, so a run of distinct values inside one level is spread over
/// the reference distribution; values that are exactly equal share the
/// reference quantile at their mid-rank. A region matched to itself is
/// unchanged and a constant source lands on the reference median. Outputs
/// are reference levels.
pub fn match_channel(source: &[f64], reference: &[f64], spec: &HistogramSpec) -> Option<Vec<f64>> {
    if source.is_empty() || reference.is_empty() {
        return None;
    }
    let mut sorted_ref = reference.to_vec();
    sorted_ref.sort_by(f64::total_cmp);
    let mut order: Vec<usize> = (0..source.len()).collect();
    order.sort_by(|&a, &b| source[a].total_cmp(&source[b]));
    let (ns, nr) = (source.len() as f64, sorted_ref.len());
    let mut out = vec![0.0; source.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && source[order[j]] == source[order[i]] {
            j += 1;
        }
        // smallest reference rank whose CDF reaches the group's mid-rank
        let mid = (i + j) as f64 / (2.0 * ns);
        let k = ((mid * nr as f64).ceil() as usize).clamp(1, nr) - 1;
        let v = spec.value(spec.level(sorted_ref[k]));
        for &o in &order[i..j] {
            out[o] = v;
        }
        i = j;
    }
    Some(out)
}

/// Per-channel histogram matching of masked region pixels. `source` and
/// `reference` hold one slice per channel. Returns `None` when either region
/// is empty.
pub fn histogram_match(
    source: &[Vec<f64>],
    reference: &[Vec<f64>],
    spec: &HistogramSpec,
) -> Option<Vec<Vec<f64>>> {
    if source.len() != reference.len() {
        return None;
    }
    source
        .iter()
        .zip(reference)
        .map(|(s, r)| match_channel(s, r, spec))
        .collect()
}

/// Earth mover's distance between the level histograms of two samples, in
/// intensity units with unit total mass.
pub fn histogram_emd(a: &[f64], b: &[f64], spec: &HistogramSpec) -> f64 {
    let (ca, cb) = (spec.cdf(a), spec.cdf(b));
    ca.iter().zip(&cb).map(|(x, y)| (x - y).abs()).sum::<f64>() / spec.top()
}
