//! Feature comparison of the highest-change, lowest-change and random
//! samples: token length, corpus token frequency, unique-token ratio and
//! intra-class query similarity.

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataio::TokenizedSample;
use crate::diffscore::ScoreEntry;
use crate::error::{Error, Result};
use crate::model::ParamStore;
use crate::numcore::{self, Rng};

pub const BINS: usize = 20;
pub const CLASS_NAMES: [&str; 3] = ["high_diff", "low_diff", "random"];

/// Sample indices of the three compared classes, each ascending.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Classes {
    pub high: Vec<usize>,
    pub low: Vec<usize>,
    pub random: Vec<usize>,
}

impl Classes {
    pub fn as_array(&self) -> [&[usize]; 3] {
        [&self.high, &self.low, &self.random]
    }
}

/// Top and bottom `⌈|D|·fraction⌉` by score plus a seeded uniform sample of
/// the same size.
pub fn split_classes(scores: &[ScoreEntry], fraction: f64, seed: u64) -> Result<Classes> {
    if !(fraction > 0.0 && fraction <= 0.5) {
        return Err(Error::Config(format!("class fraction {fraction} outside (0, 0.5]")));
    }
    let n = scores.len();
    let m = ((n as f64 * fraction) * (1.0 - 1e-12)).ceil() as usize;
    if m == 0 || 2 * m > n {
        return Err(Error::Config(format!(
            "{n} samples are too few for two disjoint classes of fraction {fraction}"
        )));
    }
    let mut ranked: Vec<(f64, usize)> = scores.iter().map(|s| (s.score, s.index)).collect();
    ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut low: Vec<usize> = ranked[..m].iter().map(|&(_, i)| i).collect();
    ranked.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut high: Vec<usize> = ranked[..m].iter().map(|&(_, i)| i).collect();
    let mut rng = Rng::new(seed);
    let mut random: Vec<usize> = rng.sample_indices(n, m).into_iter().map(|p| scores[p].index).collect();
    low.sort_unstable();
    high.sort_unstable();
    random.sort_unstable();
    Ok(Classes { high, low, random })
}

pub fn token_length(sample: &TokenizedSample) -> usize {
    sample.token_ids.len()
}

/// Occurrences of each token over a corpus.
pub fn corpus_counts<'a>(corpus: impl IntoIterator<Item = &'a TokenizedSample>) -> BTreeMap<u32, u64> {
    let mut counts = BTreeMap::new();
    for s in corpus {
        for &t in &s.token_ids {
            *counts.entry(t).or_insert(0) += 1;
        }
    }
    counts
}

/// Sum of corpus counts of the sample's tokens over its length.
pub fn avg_token_frequency(sample: &TokenizedSample, counts: &BTreeMap<u32, u64>) -> Result<f64> {
    if sample.token_ids.is_empty() {
        return Err(Error::Domain("empty sample".into()));
    }
    let mut total = 0u64;
    for t in &sample.token_ids {
        total += counts
            .get(t)
            .ok_or_else(|| Error::Internal(format!("token {t} missing from corpus counts")))?;
    }
    Ok(total as f64 / sample.token_ids.len() as f64)
}

pub fn unique_token_ratio(sample: &TokenizedSample) -> Result<f64> {
    if sample.token_ids.is_empty() {
        return Err(Error::Domain("empty sample".into()));
    }
    let distinct: HashSet<u32> = sample.token_ids.iter().copied().collect();
    Ok(distinct.len() as f64 / sample.token_ids.len() as f64)
}

/// Mean of the token-embedding rows over the sample's query tokens.
pub fn query_embedding(params: &ParamStore, sample: &TokenizedSample) -> Result<Vec<f64>> {
    let ids = sample.query_ids();
    if ids.is_empty() {
        return Err(Error::Data(format!("sample {} has no query tokens", sample.source_index)));
    }
    let d = params.token_embedding.cols();
    let mut out = vec![0.0; d];
    for &t in ids {
        let row = params.token_embedding.row(t as usize);
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    for o in &mut out {
        *o /= ids.len() as f64;
    }
    Ok(out)
}

/// For each embedding, the mean cosine similarity to every other member of
/// its class (self excluded).
pub fn intra_class_similarity(embeddings: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n = embeddings.len();
    if n < 2 {
        return Err(Error::Config("intra-class similarity needs at least two samples".into()));
    }
    let mut sums = vec![0.0; n];
    for i in 0..n {
        for j in (i + 1)..n {
            let c = numcore::cosine_similarity(&embeddings[i], &embeddings[j])?;
            sums[i] += c;
            sums[j] += c;
        }
    }
    Ok(sums.into_iter().map(|s| s / (n - 1) as f64).collect())
}

/// Rank-based AUC (Mann–Whitney U / (n_pos·n_neg)) with ties counted half.
pub fn auc(positives: &[f64], negatives: &[f64]) -> Result<f64> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Domain("AUC needs both classes".into()));
    }
    let mut all: Vec<(f64, bool)> = positives
        .iter()
        .map(|&v| (v, true))
        .chain(negatives.iter().map(|&v| (v, false)))
        .collect();
    if all.iter().any(|(v, _)| !v.is_finite()) {
        return Err(Error::Domain("AUC of non-finite scores".into()));
    }
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        // average 1-based rank of the tie group
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg_rank * all[i..=j].iter().filter(|(_, p)| *p).count() as f64;
        i = j + 1;
    }
    let (np, nn) = (positives.len() as f64, negatives.len() as f64);
    Ok((rank_sum - np * (np + 1.0) / 2.0) / (np * nn))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassSummary {
    pub class: String,
    pub size: usize,
    pub counts: Vec<usize>,
    pub mean: f64,
    pub median: f64,
    #[serde(skip)]
    pub values: Vec<(usize, f64)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramReport {
    pub metric: String,
    pub edges: Vec<f64>,
    pub classes: Vec<ClassSummary>,
}

impl HistogramReport {
    /// `values[c]` holds (sample index, value) pairs of class `c`.
    pub fn build(metric: &str, values: [Vec<(usize, f64)>; 3]) -> Result<Self> {
        let pooled: Vec<f64> = values.iter().flatten().map(|&(_, v)| v).collect();
        if pooled.is_empty() {
            return Err(Error::Domain(format!("no values for {metric}")));
        }
        let mut lo = pooled.iter().copied().fold(f64::INFINITY, f64::min);
        let mut hi = pooled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi <= lo {
            lo -= 0.5;
            hi += 0.5;
        }
        let width = (hi - lo) / BINS as f64;
        let edges: Vec<f64> = (0..=BINS)
            .map(|i| if i == BINS { hi } else { lo + width * i as f64 })
            .collect();
        let mut classes = Vec::with_capacity(3);
        for (name, vals) in CLASS_NAMES.iter().zip(values) {
            let mut counts = vec![0usize; BINS];
            for &(_, v) in &vals {
                let bin = (((v - lo) / width).floor() as usize).min(BINS - 1);
                counts[bin] += 1;
            }
            let plain: Vec<f64> = vals.iter().map(|&(_, v)| v).collect();
            classes.push(ClassSummary {
                class: name.to_string(),
                size: vals.len(),
                counts,
                mean: numcore::mean(&plain)?,
                median: numcore::percentile(&plain, 0.5)?,
                values: vals,
            });
        }
        Ok(HistogramReport {
            metric: metric.to_string(),
            edges,
            classes,
        })
    }

    pub fn class(&self, name: &str) -> Option<&ClassSummary> {
        self.classes.iter().find(|c| c.class == name)
    }

    /// `class,index,value` rows.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("class,index,value\n");
        for c in &self.classes {
            for (i, v) in &c.values {
                out.push_str(&format!("{},{},{}\n", c.class, i, v));
            }
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnalysisReport {
    pub fraction: f64,
    pub seed: u64,
    pub classes: Classes,
    pub metrics: Vec<HistogramReport>,
}

impl AnalysisReport {
    pub fn metric(&self, name: &str) -> Option<&HistogramReport> {
        self.metrics.iter().find(|m| m.metric == name)
    }
}

/// The four feature histograms over the three classes. `data[i]` must be the
/// sample whose score entry has index `i`.
pub fn report(
    data: &[TokenizedSample],
    scores: &[ScoreEntry],
    fraction: f64,
    seed: u64,
    params: &ParamStore,
) -> Result<AnalysisReport> {
    if scores.iter().any(|s| s.index >= data.len()) {
        return Err(Error::Data("score index outside the dataset".into()));
    }
    let classes = split_classes(scores, fraction, seed)?;
    let counts = corpus_counts(data);

    let per_class = |f: &dyn Fn(&TokenizedSample) -> Result<f64>| -> Result<[Vec<(usize, f64)>; 3]> {
        let mut out: [Vec<(usize, f64)>; 3] = Default::default();
        for (slot, idx) in out.iter_mut().zip(classes.as_array()) {
            for &i in idx {
                slot.push((i, f(&data[i])?));
            }
        }
        Ok(out)
    };

    let lengths = per_class(&|s| Ok(token_length(s) as f64))?;
    let freqs = per_class(&|s| avg_token_frequency(s, &counts))?;
    let ratios = per_class(&unique_token_ratio)?;

    let mut sims: [Vec<(usize, f64)>; 3] = Default::default();
    for (slot, idx) in sims.iter_mut().zip(classes.as_array()) {
        let emb: Vec<Vec<f64>> = idx
            .iter()
            .map(|&i| query_embedding(params, &data[i]))
            .collect::<Result<_>>()?;
        let values = intra_class_similarity(&emb)?;
        *slot = idx.iter().copied().zip(values).collect();
    }

    Ok(AnalysisReport {
        fraction,
        seed,
        metrics: vec![
            HistogramReport::build("token_length", lengths)?,
            HistogramReport::build("avg_token_frequency", freqs)?,
            HistogramReport::build("unique_token_ratio", ratios)?,
            HistogramReport::build("intra_class_similarity", sims)?,
        ],
        classes,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(ids: &[u32]) -> TokenizedSample {
        TokenizedSample {
            token_ids: ids.to_vec(),
            loss_mask: vec![true; ids.len()],
            query: 0..ids.len(),
            source_index: 0,
        }
    }

    #[test]
    fn split_sizes_and_disjointness() {
        let scores: Vec<ScoreEntry> = (0..100).map(|i| ScoreEntry::bare(i, ((i * 37) % 100) as f64)).collect();
        let c = split_classes(&scores, 0.01, 1).unwrap();
        assert_eq!((c.high.len(), c.low.len(), c.random.len()), (1, 1, 1));
        assert_eq!(scores[c.high[0]].score, 99.0);
        assert_eq!(scores[c.low[0]].score, 0.0);

        let half = split_classes(&scores, 0.5, 1).unwrap();
        let mut union: Vec<usize> = half.high.iter().chain(&half.low).copied().collect();
        union.sort_unstable();
        assert_eq!(union, (0..100).collect::<Vec<_>>());
        assert_eq!(split_classes(&scores, 0.1, 5).unwrap().random, split_classes(&scores, 0.1, 5).unwrap().random);
        assert!(split_classes(&scores[..3], 0.5, 0).is_err());
        assert!(split_classes(&scores, 0.6, 0).is_err());
    }

    #[test]
    fn frequency_examples() {
        let s1 = sample(&[0, 0, 1]);
        let s2 = sample(&[1, 2]);
        let counts = corpus_counts([&s1, &s2]);
        assert_eq!(avg_token_frequency(&s1, &counts).unwrap(), 2.0);
        assert_eq!(avg_token_frequency(&s2, &counts).unwrap(), 1.5);
        let rep = sample(&[4; 6]);
        assert_eq!(avg_token_frequency(&rep, &corpus_counts([&rep])).unwrap(), 6.0);
        assert!(avg_token_frequency(&sample(&[9]), &counts).is_err());
    }

    #[test]
    fn unique_ratio_examples() {
        assert!((unique_token_ratio(&sample(&[0, 0, 1])).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(unique_token_ratio(&sample(&[3, 4, 5])).unwrap(), 1.0);
        assert!(unique_token_ratio(&sample(&[])).is_err());
    }

    #[test]
    fn similarity_examples() {
        let same = intra_class_similarity(&[vec![1.0, 2.0], vec![1.0, 2.0]]).unwrap();
        assert_eq!(same, vec![1.0, 1.0]);
        let orth = intra_class_similarity(&[vec![1.0, 0.0], vec![0.0, 3.0]]).unwrap();
        assert_eq!(orth, vec![0.0, 0.0]);
        assert!(intra_class_similarity(&[vec![1.0]]).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[3.0, 4.0], &[1.0, 2.0]).unwrap(), 1.0);
        assert_eq!(auc(&[1.0, 2.0], &[3.0, 4.0]).unwrap(), 0.0);
        assert_eq!(auc(&[1.0], &[1.0]).unwrap(), 0.5);
        assert!(auc(&[], &[1.0]).is_err());
    }

    #[test]
    fn histogram_counts_sum_to_class_size() {
        let vals = [
            vec![(0, 1.0), (1, 2.0), (2, 9.5)],
            vec![(3, 4.0)],
            vec![(4, 4.0), (5, 7.0)],
        ];
        let h = HistogramReport::build("m", vals).unwrap();
        assert_eq!(h.edges.len(), BINS + 1);
        assert!(h.edges.windows(2).all(|w| w[0] < w[1]));
        for c in &h.classes {
            assert_eq!(c.counts.iter().sum::<usize>(), c.size);
        }
        let flat = HistogramReport::build("m", [vec![(0, 1.0)], vec![(1, 1.0)], vec![(2, 1.0)]]).unwrap();
        assert!(flat.edges.windows(2).all(|w| w[0] < w[1]));
    }
}
