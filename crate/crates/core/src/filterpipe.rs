//! From scores to a retained subset: keep the `k` lowest-change samples in
//! their original order, optionally re-ordered afterwards.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dataio::Sample;
use crate::diffscore::{ScoreEntry, Stat};
use crate::error::{Error, Result};
use crate::model::Module;
use crate::numcore::Rng;

/// Inclusive range of decoder-block indices.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerRange {
    pub first: usize,
    pub last: usize,
}

impl LayerRange {
    pub fn len(&self) -> usize {
        self.last - self.first + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn contains(&self, layer: usize) -> bool {
        (self.first..=self.last).contains(&layer)
    }
}

impl fmt::Display for LayerRange {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.first, self.last)
    }
}

impl std::str::FromStr for LayerRange {
    type Err = Error;

    /// `first:last`, both inclusive.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("layer range {s:?} is not of the form first:last"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let first = a.trim().parse().map_err(|_| bad())?;
        let last = b.trim().parse().map_err(|_| bad())?;
        if first > last {
            return Err(Error::Config(format!("empty layer range {s:?}")));
        }
        Ok(LayerRange { first, last })
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum OrderStrategy {
    #[default]
    Original,
    Random {
        seed: u64,
    },
    MinToMax,
    MaxToMin,
}

impl OrderStrategy {
    pub fn parse(name: &str, seed: u64) -> Result<Self> {
        match name {
            "original" => Ok(OrderStrategy::Original),
            "random" => Ok(OrderStrategy::Random { seed }),
            "min_to_max" => Ok(OrderStrategy::MinToMax),
            "max_to_min" => Ok(OrderStrategy::MaxToMin),
            _ => Err(Error::Config(format!("unknown ordering strategy {name:?}"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterSpec {
    pub retain_fraction: f64,
    /// Score over the last `layer_window` decoder blocks...
    pub layer_window: usize,
    /// ...unless an explicit range is given.
    pub layer_range: Option<LayerRange>,
    pub module: Module,
    pub stat: Stat,
    pub ordering: OrderStrategy,
}

impl Default for FilterSpec {
    fn default() -> Self {
        FilterSpec {
            retain_fraction: 0.5,
            layer_window: 3,
            layer_range: None,
            module: Module::Wup,
            stat: Stat::MeanAbs,
            ordering: OrderStrategy::Original,
        }
    }
}

impl FilterSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.retain_fraction > 0.0 && self.retain_fraction <= 1.0) {
            return Err(Error::Config(format!(
                "retain fraction {} outside (0, 1]",
                self.retain_fraction
            )));
        }
        if self.layer_window == 0 {
            return Err(Error::Config("layer window must be at least 1".into()));
        }
        if let Some(r) = self.layer_range {
            if r.first > r.last {
                return Err(Error::Config(format!("empty layer range {r}")));
            }
        }
        Ok(())
    }

    /// Layers scored for a model with `depth` decoder blocks.
    pub fn window(&self, depth: usize) -> Result<LayerRange> {
        self.validate()?;
        let range = match self.layer_range {
            Some(r) => r,
            None => {
                if self.layer_window > depth {
                    return Err(Error::Config(format!(
                        "layer window {} deeper than the model ({depth} layers)",
                        self.layer_window
                    )));
                }
                LayerRange {
                    first: depth - self.layer_window,
                    last: depth - 1,
                }
            }
        };
        if range.last >= depth {
            return Err(Error::Config(format!(
                "layer range {range} outside model depth {depth}"
            )));
        }
        Ok(range)
    }
}

/// `⌊n × retain⌋`. The product is nudged by a relative 1e-9 so decimal
/// fractions such as 0.29 × 100 land on the intended integer.
pub fn retained_count(n: usize, retain_fraction: f64) -> usize {
    let exact = n as f64 * retain_fraction;
    ((exact * (1.0 + 1e-9)).floor() as usize).min(n)
}

fn check_scores(scores: &[ScoreEntry]) -> Result<()> {
    if scores.is_empty() {
        return Err(Error::Config("no scores to select from".into()));
    }
    let mut seen = std::collections::HashSet::with_capacity(scores.len());
    for s in scores {
        if !seen.insert(s.index) {
            return Err(Error::Data(format!("duplicate sample index {}", s.index)));
        }
        if !s.score.is_finite() {
            return Err(Error::Data(format!("non-finite score for sample {}", s.index)));
        }
    }
    Ok(())
}

/// The `k = ⌊|D|·retain⌋` indices with the smallest scores (ties keep the
/// smaller index), returned in ascending index order.
pub fn select(scores: &[ScoreEntry], retain_fraction: f64) -> Result<Vec<usize>> {
    check_scores(scores)?;
    if !(retain_fraction > 0.0 && retain_fraction <= 1.0) {
        return Err(Error::Config(format!("retain fraction {retain_fraction} outside (0, 1]")));
    }
    let k = retained_count(scores.len(), retain_fraction);
    if k == 0 {
        return Err(Error::Config(format!(
            "retaining {retain_fraction} of {} samples keeps nothing",
            scores.len()
        )));
    }
    let mut ranked: Vec<(f64, usize)> = scores.iter().map(|s| (s.score, s.index)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut kept: Vec<usize> = ranked[..k].iter().map(|&(_, i)| i).collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Rank-threshold form of [`select`]: rank 1 is the largest score and a
/// sample is kept when its rank exceeds `|D| − k`. Among equal scores the
/// larger index ranks first, so the smaller index survives.
pub fn select_by_rank(scores: &[ScoreEntry], retain_fraction: f64) -> Result<Vec<usize>> {
    check_scores(scores)?;
    let n = scores.len();
    let k = retained_count(n, retain_fraction);
    if k == 0 {
        return Err(Error::Config("retain fraction keeps nothing".into()));
    }
    let mut by_rank: Vec<(f64, usize)> = scores.iter().map(|s| (s.score, s.index)).collect();
    by_rank.sort_by(|a, b| b.0.total_cmp(&a.0).then(b.1.cmp(&a.1)));
    let mut kept: Vec<usize> = by_rank
        .iter()
        .enumerate()
        .filter(|(pos, _)| pos + 1 > n - k)
        .map(|(_, &(_, i))| i)
        .collect();
    kept.sort_unstable();
    Ok(kept)
}

/// Re-orders retained indices.
pub fn order(indices: &[usize], scores: &[ScoreEntry], strategy: OrderStrategy) -> Result<Vec<usize>> {
    let lookup: std::collections::HashMap<usize, f64> = scores.iter().map(|s| (s.index, s.score)).collect();
    let mut keyed = Vec::with_capacity(indices.len());
    for &i in indices {
        let score = lookup
            .get(&i)
            .ok_or_else(|| Error::Data(format!("index {i} has no score")))?;
        keyed.push((*score, i));
    }
    let mut out: Vec<usize> = indices.to_vec();
    match strategy {
        OrderStrategy::Original => {}
        OrderStrategy::MinToMax => {
            keyed.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            out = keyed.into_iter().map(|(_, i)| i).collect();
        }
        OrderStrategy::MaxToMin => {
            keyed.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            out = keyed.into_iter().map(|(_, i)| i).collect();
        }
        OrderStrategy::Random { seed } => Rng::new(seed).shuffle(&mut out),
    }
    Ok(out)
}

/// Materializes the filtered dataset in the given order.
pub fn apply(data: &[Sample], kept: &[usize]) -> Result<Vec<Sample>> {
    kept.iter()
        .map(|&i| {
            data.get(i).cloned().ok_or_else(|| {
                Error::Data(format!("index {i} out of range for {} samples", data.len()))
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub kept_indices: Vec<usize>,
    pub spec: FilterSpec,
    pub input_hash: String,
}
