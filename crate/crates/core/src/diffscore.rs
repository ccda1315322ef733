//! Per-sample weight-change features.
//!
//! For a sample `d`, the base model is copied, given one probe update on `d`
//! alone, and the change in every scored projection of every layer is
//! summarised by a fixed set of statistics. A chosen statistic of a chosen
//! module, averaged over a window of layers, is the sample's score. Larger
//! scores always mean a larger parameter change.

use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataio::TokenizedSample;
use crate::error::{Error, Result};
use crate::filterpipe::{FilterSpec, LayerRange};
use crate::model::{ModelConfig, Module, ParamStore};
use crate::numcore::{self, Matrix};
use crate::fsutil;
use crate::train::{probe_step, OptimizerConfig};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stat {
    /// Mean of |ΔW|.
    #[default]
    MeanAbs,
    /// Mean of ΔW, kept for comparison with the absolute reading.
    MeanSigned,
    /// Population standard deviation of ΔW.
    Std,
    /// Percentiles of |ΔW|.
    P90,
    P95,
    P99,
    /// Cosine between flattened W_after and W_before; scored as 1 − cos.
    Cosine,
    /// Pearson between flattened W_after and W_before; scored as 1 − r.
    Pearson,
}

impl Stat {
    pub const ALL: [Stat; 8] = [
        Stat::MeanAbs,
        Stat::MeanSigned,
        Stat::Std,
        Stat::P90,
        Stat::P95,
        Stat::P99,
        Stat::Cosine,
        Stat::Pearson,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Stat::MeanAbs => "mean_abs",
            Stat::MeanSigned => "mean_signed",
            Stat::Std => "std",
            Stat::P90 => "p90",
            Stat::P95 => "p95",
            Stat::P99 => "p99",
            Stat::Cosine => "cosine",
            Stat::Pearson => "pearson",
        }
    }

    /// Similarity statistics are flipped so larger means more change.
    pub fn is_similarity(self) -> bool {
        matches!(self, Stat::Cosine | Stat::Pearson)
    }
}

impl fmt::Display for Stat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Stat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Stat::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown statistic {s:?}")))
    }
}

/// Statistics of one (layer, module) cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub layer: usize,
    pub module: Module,
    pub mean_abs: f64,
    pub mean_signed: f64,
    pub std: f64,
    pub p90: f64,
    pub p95: f64,
    pub p99: f64,
    pub cosine: f64,
    pub pearson: f64,
}

impl CellStats {
    pub fn compute(layer: usize, module: Module, before: &Matrix, after: &Matrix) -> Result<Self> {
        let delta = after.sub(before)?;
        let abs: Vec<f64> = delta.data().iter().map(|v| v.abs()).collect();
        let pct = numcore::percentiles(&abs, &[0.90, 0.95, 0.99])?;
        Ok(CellStats {
            layer,
            module,
            mean_abs: numcore::mean_abs(&delta)?,
            mean_signed: numcore::mean(delta.data())?,
            std: numcore::std(&delta)?,
            p90: pct[0],
            p95: pct[1],
            p99: pct[2],
            cosine: numcore::cosine_similarity(after.data(), before.data())?,
            pearson: numcore::pearson(after.data(), before.data())?,
        })
    }

    pub fn get(&self, stat: Stat) -> f64 {
        match stat {
            Stat::MeanAbs => self.mean_abs,
            Stat::MeanSigned => self.mean_signed,
            Stat::Std => self.std,
            Stat::P90 => self.p90,
            Stat::P95 => self.p95,
            Stat::P99 => self.p99,
            Stat::Cosine => self.cosine,
            Stat::Pearson => self.pearson,
        }
    }
}

/// Every scored cell of one probe, ordered by (layer, module).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiffRecord {
    pub sample_index: usize,
    pub probe_loss: f64,
    pub cells: Vec<CellStats>,
}

/// One line of a score file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScoreEntry {
    pub index: usize,
    pub score: f64,
    pub stat: Stat,
    pub module: Module,
    pub layer_window: LayerRange,
    pub probe_loss: f64,
    pub per_cell: Vec<CellStats>,
}

impl ScoreEntry {
    /// An entry carrying only an index and a score.
    pub fn bare(index: usize, score: f64) -> Self {
        ScoreEntry {
            index,
            score,
            stat: Stat::MeanAbs,
            module: Module::Wup,
            layer_window: LayerRange { first: 0, last: 0 },
            probe_loss: 0.0,
            per_cell: Vec::new(),
        }
    }
}

/// Probe options shared by every sample of a scoring run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    pub optimizer: OptimizerConfig,
    pub steps: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            optimizer: OptimizerConfig::default(),
            steps: 1,
        }
    }
}

pub fn score_sample(
    config: &ModelConfig,
    base: &ParamStore,
    sample: &TokenizedSample,
    spec: &FilterSpec,
    probe: &ProbeConfig,
) -> Result<DiffRecord> {
    spec.window(base.n_layers())?;
    let tuned = probe_step(config, base, sample, &probe.optimizer, probe.steps)?;
    let mut cells = Vec::with_capacity(base.n_layers() * Module::ALL.len());
    for (layer, (before, after)) in base.layers.iter().zip(&tuned.params.layers).enumerate() {
        for module in Module::ALL {
            cells.push(CellStats::compute(layer, module, before.module(module), after.module(module))?);
        }
    }
    Ok(DiffRecord {
        sample_index: sample.source_index,
        probe_loss: tuned.base_loss,
        cells,
    })
}

/// Mean of `stat` for `module` over `window`; `1 − mean` for similarities.
pub fn reduce_cells(cells: &[CellStats], module: Module, stat: Stat, window: LayerRange) -> Result<f64> {
    let mut values = Vec::with_capacity(window.len());
    for layer in window.first..=window.last {
        let cell = cells
            .iter()
            .find(|c| c.layer == layer && c.module == module)
            .ok_or_else(|| Error::Config(format!("no statistics for layer {layer} {module}")))?;
        values.push(cell.get(stat));
    }
    let m = numcore::mean(&values)?;
    Ok(if stat.is_similarity() { 1.0 - m } else { m })
}

fn depth_of(cells: &[CellStats]) -> usize {
    cells.iter().map(|c| c.layer + 1).max().unwrap_or(0)
}

pub fn reduce(record: DiffRecord, spec: &FilterSpec) -> Result<ScoreEntry> {
    let window = spec.window(depth_of(&record.cells))?;
    let score = reduce_cells(&record.cells, spec.module, spec.stat, window)?;
    Ok(ScoreEntry {
        index: record.sample_index,
        score,
        stat: spec.stat,
        module: spec.module,
        layer_window: window,
        probe_loss: record.probe_loss,
        per_cell: record.cells,
    })
}

/// Re-derives an entry's score under another statistic/module/window from
/// its stored per-cell statistics, without re-probing.
pub fn rereduce(entry: &ScoreEntry, spec: &FilterSpec) -> Result<ScoreEntry> {
    reduce(
        DiffRecord {
            sample_index: entry.index,
            probe_loss: entry.probe_loss,
            cells: entry.per_cell.clone(),
        },
        spec,
    )
}

/// Scores every sample on `workers` threads. Output is in input order and
/// identical for any worker count.
pub fn score_dataset(
    config: &ModelConfig,
    base: &ParamStore,
    data: &[TokenizedSample],
    spec: &FilterSpec,
    probe: &ProbeConfig,
    workers: usize,
) -> Result<Vec<ScoreEntry>> {
    if data.is_empty() {
        return Err(Error::Config("nothing to score".into()));
    }
    spec.window(base.n_layers())?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Internal(e.to_string()))?;
    let results: Vec<Result<ScoreEntry>> = pool.install(|| {
        data.par_iter()
            .map(|s| {
                score_sample(config, base, s, spec, probe)
                    .and_then(|r| reduce(r, spec))
                    .map_err(|e| e.at_sample(s.source_index))
            })
            .collect()
    });
    results.into_iter().collect()
}

pub fn scores_to_jsonl(scores: &[ScoreEntry]) -> Result<String> {
    let mut out = String::new();
    for s in scores {
        out.push_str(&serde_json::to_string(s)?);
        out.push('\n');
    }
    Ok(out)
}

pub fn save_scores(scores: &[ScoreEntry], path: &std::path::Path) -> Result<()> {
    fsutil::write_atomic(path, scores_to_jsonl(scores)?.as_bytes())
}

pub fn load_scores(path: &std::path::Path) -> Result<Vec<ScoreEntry>> {
    let bytes = fsutil::read(path)?;
    let text = String::from_utf8(bytes).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let entry: ScoreEntry = serde_json::from_str(line).map_err(|e| Error::Schema {
            line: n + 1,
            message: e.to_string(),
        })?;
        out.push(entry);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cell(layer: usize, module: Module, v: f64) -> CellStats {
        CellStats {
            layer,
            module,
            mean_abs: v,
            mean_signed: v,
            std: v,
            p90: v,
            p95: v,
            p99: v,
            cosine: v,
            pearson: v,
        }
    }

    fn record(values: &[f64]) -> DiffRecord {
        let cells = values
            .iter()
            .enumerate()
            .flat_map(|(l, &v)| Module::ALL.map(|m| cell(l, m, if m == Module::Wup { v } else { -7.0 })))
            .collect();
        DiffRecord {
            sample_index: 3,
            probe_loss: 1.0,
            cells,
        }
    }

    #[test]
    fn reduce_examples() {
        let spec = FilterSpec::default();
        let e = reduce(record(&[9.0, 0.1, 0.2, 0.3]), &spec).unwrap();
        assert!((e.score - 0.2).abs() < 1e-15);
        assert_eq!(e.layer_window, LayerRange { first: 1, last: 3 });
        assert_eq!(e.index, 3);

        let one = FilterSpec {
            layer_window: 1,
            ..Default::default()
        };
        assert_eq!(reduce(record(&[0.1, 0.2, 0.3]), &one).unwrap().score, 0.3);

        let cos = FilterSpec {
            stat: Stat::Cosine,
            ..Default::default()
        };
        let s = reduce(record(&[1.0, 1.0, 0.5]), &cos).unwrap().score;
        assert!((s - (1.0 - 2.5 / 3.0)).abs() < 1e-15);

        let deep = FilterSpec {
            layer_window: 5,
            ..Default::default()
        };
        assert!(matches!(reduce(record(&[0.1, 0.2]), &deep), Err(Error::Config(_))));
    }

    #[test]
    fn cell_stats_orientation() {
        let before = Matrix::from_rows(&[vec![1.0, -2.0, 0.5], vec![3.0, 0.25, -1.0]]).unwrap();
        let same = CellStats::compute(0, Module::Wq, &before, &before).unwrap();
        assert_eq!(same.mean_abs, 0.0);
        assert_eq!(same.cosine, 1.0);
        assert_eq!(same.pearson, 1.0);
        let mut after = before.clone();
        after.data_mut()[0] += 0.5;
        after.data_mut()[4] -= 0.1;
        let c = CellStats::compute(0, Module::Wq, &before, &after).unwrap();
        assert!((c.mean_abs - 0.6 / 6.0).abs() < 1e-15);
        assert!(c.cosine < 1.0 && c.cosine > -1.0);
        let abs: Vec<f64> = after.sub(&before).unwrap().data().iter().map(|v| v.abs()).collect();
        assert_eq!(c.p99, numcore::percentile(&abs, 0.99).unwrap());
    }

    #[test]
    fn stat_names_round_trip() {
        for st in Stat::ALL {
            assert_eq!(st.name().parse::<Stat>().unwrap(), st);
        }
        assert!("median".parse::<Stat>().is_err());
    }
}
