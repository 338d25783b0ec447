use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{AnalysisError, Result};

pub const DEFAULT_SMOOTHING: f64 = 0.5;
pub const DEFAULT_MIN_COUNT: usize = 5;

/// Per-token association with one property (for example the target or the
/// label of the document a token occurs in).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RelevanceTable {
    pub property: String,
    /// Added to every count cell; `None` means raw counts.
    pub smoothing: Option<f64>,
    pub min_count: usize,
    pub scores: BTreeMap<String, f64>,
}

/// Counts of one token inside and outside one stratum.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Cells {
    pub t_p: f64,
    pub not_t_p: f64,
    pub t_not_p: f64,
    pub not_t_not_p: f64,
}

/// `ln( (c(t,p)/c(¬t,p)) / (c(t,¬p)/c(¬t,¬p)) )`. Without smoothing, a zero
/// cell makes the ratio undefined and yields `None`.
pub fn log_odds_ratio(c: Cells, smoothing: Option<f64>) -> Option<f64> {
    let s = smoothing.unwrap_or(0.0);
    let [a, b, cc, d] = [c.t_p, c.not_t_p, c.t_not_p, c.not_t_not_p].map(|x| x + s);
    if a <= 0.0 || b <= 0.0 || cc <= 0.0 || d <= 0.0 {
        return None;
    }
    Some(((a / b) / (cc / d)).ln())
}

/// `r(t) = max_p log_odds_ratio(t, p)` over the values `p` of the property.
/// `docs` pairs each document's tokens with its property value. Tokens that
/// occur fewer than `min_count` times are left out, as are tokens with no
/// defined ratio in the unsmoothed mode.
pub fn token_property_relevance(
    docs: &[(Vec<String>, String)],
    property: &str,
    smoothing: Option<f64>,
    min_count: usize,
) -> Result<RelevanceTable> {
    let mut per_value: BTreeMap<&str, (BTreeMap<&str, usize>, usize)> = BTreeMap::new();
    let mut totals: BTreeMap<&str, usize> = BTreeMap::new();
    for (tokens, value) in docs {
        let (counts, size) = per_value.entry(value.as_str()).or_default();
        for t in tokens {
            *counts.entry(t.as_str()).or_default() += 1;
            *totals.entry(t.as_str()).or_default() += 1;
            *size += 1;
        }
    }
    if per_value.len() < 2 {
        return Err(AnalysisError::SingleValuedProperty(property.to_string()));
    }
    let corpus: usize = per_value.values().map(|(_, n)| n).sum();
    let mut scores = BTreeMap::new();
    for (&token, &total) in &totals {
        if total < min_count {
            continue;
        }
        let best = per_value
            .values()
            .filter_map(|(counts, size)| {
                let t_p = counts.get(token).copied().unwrap_or(0);
                log_odds_ratio(
                    Cells {
                        t_p: t_p as f64,
                        not_t_p: (size - t_p) as f64,
                        t_not_p: (total - t_p) as f64,
                        not_t_not_p: ((corpus - size) - (total - t_p)) as f64,
                    },
                    smoothing,
                )
            })
            .reduce(f64::max);
        if let Some(r) = best {
            scores.insert(token.to_string(), r);
        }
    }
    Ok(RelevanceTable {
        property: property.to_string(),
        smoothing,
        min_count,
        scores,
    })
}

/// Sample Pearson correlation.
pub fn pearson_correlation(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(AnalysisError::Contract(format!(
            "correlation needs two equal-length vectors of at least 2 points, got {} and {}",
            x.len(),
            y.len()
        )));
    }
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        let (dx, dy) = (a - mx, b - my);
        sxy += dx * dy;
        sxx += dx * dx;
        syy += dy * dy;
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(AnalysisError::UndefinedCorrelation);
    }
    Ok((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}
