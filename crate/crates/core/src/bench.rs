//! End-to-end synthetic benchmark: build a clean/dirty corpus, pretrain a
//! base model on separate clean data, score every sample, keep the lowest
//! half by score versus a random half, fine-tune on each and compare
//! held-out clean loss.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::analysis;
use crate::dataio::{self, TemplateStyle, Vocab};
use crate::diffscore::{self, ProbeConfig, ScoreEntry};
use crate::error::{Error, Result};
use crate::filterpipe::{self, FilterSpec};
use crate::model::{ModelConfig, ParamStore};
use crate::numcore::Rng;
use crate::train::{self, OptimizerConfig, TrainConfig};

// offsets that derive the auxiliary seeds from the run seed
const PRETRAIN_SALT: u64 = 0x5eed_0001;
const HELDOUT_SALT: u64 = 0x5eed_0002;
const RANDOM_ARM_SALT: u64 = 0x5eed_0003;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchConfig {
    pub n_clean: usize,
    pub n_dirty: usize,
    pub n_pretrain: usize,
    pub n_heldout: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
    pub style: TemplateStyle,
    pub pretrain_optimizer: OptimizerConfig,
    pub pretrain_epochs: usize,
    pub probe: ProbeConfig,
    pub filter: FilterSpec,
    pub finetune_optimizer: OptimizerConfig,
    pub finetune_epochs: usize,
    pub batch_size: usize,
    pub analysis_fraction: f64,
    pub workers: usize,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            n_clean: 400,
            n_dirty: 100,
            n_pretrain: 200,
            n_heldout: 100,
            d_model: 64,
            n_heads: 4,
            n_layers: 4,
            d_ff: 128,
            max_seq_len: 96,
            style: TemplateStyle::TurnMarkers,
            pretrain_optimizer: OptimizerConfig::adamw(3e-3),
            pretrain_epochs: 2,
            probe: ProbeConfig {
                optimizer: OptimizerConfig::sgd(1e-2),
                steps: 1,
            },
            filter: FilterSpec::default(),
            finetune_optimizer: OptimizerConfig::adamw(1e-3),
            finetune_epochs: 1,
            batch_size: 8,
            analysis_fraction: 0.1,
            workers: 1,
        }
    }
}

/// Seeds used by one run, so any arm can be rerun in isolation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchSeeds {
    pub corpus: u64,
    pub pretrain_corpus: u64,
    pub heldout_corpus: u64,
    pub model_init: u64,
    pub random_arm: u64,
    pub shuffle: u64,
}

impl BenchSeeds {
    pub fn derive(seed: u64) -> Self {
        BenchSeeds {
            corpus: seed,
            pretrain_corpus: seed.wrapping_add(PRETRAIN_SALT),
            heldout_corpus: seed.wrapping_add(HELDOUT_SALT),
            model_init: seed,
            random_arm: seed.wrapping_add(RANDOM_ARM_SALT),
            shuffle: seed,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMeans {
    pub high_diff: f64,
    pub low_diff: f64,
    pub random: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchReport {
    pub seed: u64,
    pub seeds: BenchSeeds,
    pub retain: f64,
    pub auc: f64,
    pub loss_base: f64,
    pub loss_resofilter: f64,
    pub loss_random: f64,
    pub kept: usize,
    pub dirty_kept_resofilter: usize,
    pub dirty_kept_random: usize,
    pub token_length: ClassMeans,
    pub unique_token_ratio: ClassMeans,
    pub avg_token_frequency: ClassMeans,
    pub intra_class_similarity: ClassMeans,
    pub model_fingerprint: String,
    pub config: BenchConfig,
}

impl BenchReport {
    pub fn auc_passes(&self, threshold: f64) -> bool {
        self.auc >= threshold
    }

    pub fn loss_passes(&self) -> bool {
        self.loss_resofilter <= self.loss_random
    }

    pub fn features_pass(&self) -> bool {
        self.token_length.high_diff < self.token_length.low_diff
            && self.unique_token_ratio.high_diff > self.unique_token_ratio.low_diff
    }
}

/// Wall-clock seconds per stage. Kept out of the report so the report stays
/// byte-stable.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BenchTimings {
    pub pretrain: f64,
    pub score: f64,
    pub finetune: f64,
    pub total: f64,
}

fn means(report: &analysis::AnalysisReport, metric: &str) -> Result<ClassMeans> {
    let h = report
        .metric(metric)
        .ok_or_else(|| Error::Internal(format!("analysis lacks {metric}")))?;
    let get = |name: &str| {
        h.class(name)
            .map(|c| c.mean)
            .ok_or_else(|| Error::Internal(format!("analysis lacks class {name}")))
    };
    Ok(ClassMeans {
        high_diff: get("high_diff")?,
        low_diff: get("low_diff")?,
        random: get("random")?,
    })
}

/// AUC of scores for detecting dirty-labelled samples.
pub fn dirty_auc(samples: &[dataio::Sample], scores: &[ScoreEntry]) -> Result<f64> {
    let mut pos = Vec::new();
    let mut neg = Vec::new();
    for s in scores {
        let sample = samples
            .get(s.index)
            .ok_or_else(|| Error::Data(format!("score index {} outside the corpus", s.index)))?;
        if sample.is_dirty() {
            pos.push(s.score);
        } else {
            neg.push(s.score);
        }
    }
    analysis::auc(&pos, &neg)
}

pub fn run(cfg: &BenchConfig, seed: u64) -> Result<(BenchReport, BenchTimings)> {
    let t0 = Instant::now();
    cfg.filter.validate()?;
    let seeds = BenchSeeds::derive(seed);
    let corpus = dataio::synth_corpus(cfg.n_clean, cfg.n_dirty, seeds.corpus);
    let pretrain_corpus = dataio::synth_corpus(cfg.n_pretrain, 0, seeds.pretrain_corpus);
    let heldout_corpus = dataio::synth_corpus(cfg.n_heldout, 0, seeds.heldout_corpus);
    let vocab = Vocab::from_samples(
        corpus.iter().chain(&pretrain_corpus).chain(&heldout_corpus),
        cfg.style,
    );
    let model = ModelConfig {
        vocab_size: vocab.len(),
        d_model: cfg.d_model,
        n_heads: cfg.n_heads,
        n_layers: cfg.n_layers,
        d_ff: cfg.d_ff,
        max_seq_len: cfg.max_seq_len,
        seed: seeds.model_init,
    };
    model.validate()?;
    let data = dataio::encode_all(&corpus, &vocab, cfg.style, cfg.max_seq_len)?;
    let pretrain_data = dataio::encode_all(&pretrain_corpus, &vocab, cfg.style, cfg.max_seq_len)?;
    let heldout = dataio::encode_all(&heldout_corpus, &vocab, cfg.style, cfg.max_seq_len)?;

    let init = ParamStore::init(&model)?;
    let pretrain_tc = TrainConfig {
        epochs: cfg.pretrain_epochs,
        batch_size: cfg.batch_size,
        shuffle: true,
        seed: seeds.shuffle,
    };
    let (base, _) = train::train(&model, &init, &pretrain_data, &cfg.pretrain_optimizer, &pretrain_tc)?;
    let t_pretrain = t0.elapsed().as_secs_f64();

    let scores = diffscore::score_dataset(&model, &base, &data, &cfg.filter, &cfg.probe, cfg.workers)?;
    let auc = dirty_auc(&corpus, &scores)?;
    let t_score = t0.elapsed().as_secs_f64();

    let retain = cfg.filter.retain_fraction;
    let kept = filterpipe::select(&scores, retain)?;
    let mut random_kept = Rng::new(seeds.random_arm).sample_indices(data.len(), kept.len());
    random_kept.sort_unstable();

    let finetune_tc = TrainConfig {
        epochs: cfg.finetune_epochs,
        batch_size: cfg.batch_size,
        shuffle: true,
        seed: seeds.shuffle,
    };
    let finetune = |indices: &[usize]| -> Result<f64> {
        let subset: Vec<_> = indices.iter().map(|&i| data[i].clone()).collect();
        let (params, _) = train::train(&model, &base, &subset, &cfg.finetune_optimizer, &finetune_tc)?;
        train::eval_loss(&model, &params, &heldout)
    };
    let loss_resofilter = finetune(&kept)?;
    let loss_random = finetune(&random_kept)?;
    let loss_base = train::eval_loss(&model, &base, &heldout)?;
    let t_finetune = t0.elapsed().as_secs_f64();

    let analysis = analysis::report(&data, &scores, cfg.analysis_fraction, seeds.random_arm, &base)?;
    let dirty_in = |idx: &[usize]| idx.iter().filter(|&&i| corpus[i].is_dirty()).count();

    let report = BenchReport {
        seed,
        retain,
        auc,
        loss_base,
        loss_resofilter,
        loss_random,
        kept: kept.len(),
        dirty_kept_resofilter: dirty_in(&kept),
        dirty_kept_random: dirty_in(&random_kept),
        token_length: means(&analysis, "token_length")?,
        unique_token_ratio: means(&analysis, "unique_token_ratio")?,
        avg_token_frequency: means(&analysis, "avg_token_frequency")?,
        intra_class_similarity: means(&analysis, "intra_class_similarity")?,
        model_fingerprint: base.fingerprint(),
        seeds,
        config: cfg.clone(),
    };
    let timings = BenchTimings {
        pretrain: t_pretrain,
        score: t_score - t_pretrain,
        finetune: t_finetune - t_score,
        total: t0.elapsed().as_secs_f64(),
    };
    Ok((report, timings))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn auc_follows_labels() {
        let corpus = dataio::synth_corpus(6, 2, 1);
        let scores: Vec<ScoreEntry> = corpus
            .iter()
            .enumerate()
            .map(|(i, s)| ScoreEntry::bare(i, if s.is_dirty() { 2.0 } else { 1.0 }))
            .collect();
        assert_eq!(dirty_auc(&corpus, &scores).unwrap(), 1.0);
    }

    #[test]
    fn seeds_are_distinct_per_role() {
        let s = BenchSeeds::derive(7);
        assert_ne!(s.corpus, s.pretrain_corpus);
        assert_ne!(s.pretrain_corpus, s.heldout_corpus);
        assert_eq!(BenchSeeds::derive(7), s);
    }
}
