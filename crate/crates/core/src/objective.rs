//! Quantity/quality objective `E = richness · (1 + β · characteristic)` and a
//! sweep of it over retain fractions.

use serde::{Deserialize, Serialize};

use crate::diffscore::ScoreEntry;
use crate::error::{Error, Result};
use crate::filterpipe;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveParams {
    pub beta: f64,
    pub lambda: f64,
}

impl ObjectiveParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta >= 0.0 && self.beta.is_finite()) || !(self.lambda > 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!(
                "objective needs beta >= 0 and lambda > 0, got {self:?}"
            )));
        }
        Ok(())
    }

    /// β = 1 and λ with λ·|D| = 5, so richness at full data is ≈ 0.993.
    pub fn default_for(dataset_size: usize) -> Self {
        ObjectiveParams {
            beta: 1.0,
            lambda: 5.0 / dataset_size.max(1) as f64,
        }
    }
}

/// `1 − e^(−λ·size)`.
pub fn richness(size: usize, params: &ObjectiveParams) -> f64 {
    -(-params.lambda * size as f64).exp_m1()
}

/// Mean of the per-sample characteristic values.
pub fn characteristic(values: &[f64]) -> Result<f64> {
    if values.is_empty() {
        return Err(Error::Domain("characteristic of an empty subset".into()));
    }
    // shifted by the first value so constant inputs come back exactly
    let x0 = values[0];
    let shift: f64 = values.iter().map(|v| v - x0).sum();
    Ok(x0 + shift / values.len() as f64)
}

pub fn objective(subset_values: &[f64], params: &ObjectiveParams) -> Result<f64> {
    params.validate()?;
    let c = characteristic(subset_values)?;
    Ok(richness(subset_values.len(), params) * (1.0 + params.beta * c))
}

/// How a sample's diff score becomes its characteristic value.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CharacteristicMap {
    /// `−(s − min)/(max − min)` over the full set: small change, high value.
    #[default]
    NegNormalized,
    /// The raw score.
    Raw,
}

impl CharacteristicMap {
    pub fn apply(self, scores: &[f64]) -> Vec<f64> {
        match self {
            CharacteristicMap::Raw => scores.to_vec(),
            CharacteristicMap::NegNormalized => {
                let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
                let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let span = hi - lo;
                scores
                    .iter()
                    .map(|&s| if span > 0.0 { -(s - lo) / span } else { 0.0 })
                    .collect()
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub size: usize,
    pub richness: f64,
    pub characteristic: f64,
    pub e: f64,
}

/// For each retain fraction, selects the subset exactly as filtering would
/// and evaluates the objective on it. Rows follow grid order.
pub fn sweep(
    scores: &[ScoreEntry],
    grid: &[f64],
    params: &ObjectiveParams,
    map: CharacteristicMap,
) -> Result<Vec<SweepRow>> {
    params.validate()?;
    let raw: Vec<f64> = scores.iter().map(|s| s.score).collect();
    let values = map.apply(&raw);
    let by_index: std::collections::HashMap<usize, f64> =
        scores.iter().zip(&values).map(|(s, &v)| (s.index, v)).collect();
    let mut rows = Vec::with_capacity(grid.len());
    for &p in grid {
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("grid fraction {p} outside (0, 1]")));
        }
        let kept = filterpipe::select(scores, p)?;
        let subset: Vec<f64> = kept.iter().map(|i| by_index[i]).collect();
        let c = characteristic(&subset)?;
        let r = richness(subset.len(), params);
        rows.push(SweepRow {
            p,
            size: subset.len(),
            richness: r,
            characteristic: c,
            e: r * (1.0 + params.beta * c),
        });
    }
    Ok(rows)
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("p,size,richness,characteristic,E\n");
    for r in rows {
        out.push_str(&format!("{},{},{},{},{}\n", r.p, r.size, r.richness, r.characteristic, r.e));
    }
    out
}
