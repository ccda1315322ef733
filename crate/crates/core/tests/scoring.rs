use resofilter::dataio::{self, Sample, TemplateStyle, TokenizedSample, Vocab};
use resofilter::diffscore::{self, CellStats, ProbeConfig, Stat};
use resofilter::filterpipe::{self, FilterSpec, LayerRange};
use resofilter::model::{self, ModelConfig, Module, ParamStore};
use resofilter::numcore;
use resofilter::train::{self, OptimizerConfig};

struct Setup {
    config: ModelConfig,
    base: ParamStore,
    samples: Vec<Sample>,
    vocab: Vocab,
    data: Vec<TokenizedSample>,
}

fn setup(n_clean: usize, n_dirty: usize) -> Setup {
    let samples = dataio::synth_corpus(n_clean, n_dirty, 21);
    let vocab = Vocab::from_samples(&samples, TemplateStyle::TurnMarkers);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 3,
        d_ff: 32,
        max_seq_len: 96,
        seed: 2,
    };
    let base = ParamStore::init(&config).unwrap();
    let data = dataio::encode_all(&samples, &vocab, TemplateStyle::TurnMarkers, 96).unwrap();
    Setup {
        config,
        base,
        samples,
        vocab,
        data,
    }
}

fn sgd(lr: f64) -> ProbeConfig {
    ProbeConfig {
        optimizer: OptimizerConfig::sgd(lr),
        steps: 1,
    }
}

#[test]
fn score_files_are_identical_for_any_worker_count() {
    let s = setup(10, 4);
    let spec = FilterSpec::default();
    let probe = ProbeConfig::default();
    let files: Vec<String> = [1, 4, 8]
        .iter()
        .map(|&w| {
            let scores = diffscore::score_dataset(&s.config, &s.base, &s.data, &spec, &probe, w).unwrap();
            diffscore::scores_to_jsonl(&scores).unwrap()
        })
        .collect();
    assert_eq!(files[0], files[1]);
    assert_eq!(files[0], files[2]);
}

#[test]
fn permuting_the_dataset_permutes_the_scores() {
    let s = setup(8, 4);
    let spec = FilterSpec::default();
    let probe = sgd(0.05);
    let scores = diffscore::score_dataset(&s.config, &s.base, &s.data, &spec, &probe, 2).unwrap();
    let perm: Vec<usize> = (0..s.samples.len()).rev().collect();
    let permuted: Vec<Sample> = perm.iter().map(|&i| s.samples[i].clone()).collect();
    let pdata = dataio::encode_all(&permuted, &s.vocab, TemplateStyle::TurnMarkers, 96).unwrap();
    let pscores = diffscore::score_dataset(&s.config, &s.base, &pdata, &spec, &probe, 3).unwrap();
    for (j, &i) in perm.iter().enumerate() {
        assert_eq!(pscores[j].score, scores[i].score);
        assert_eq!(pscores[j].per_cell, scores[i].per_cell);
    }
}

#[test]
fn rescoring_a_filtered_dataset_reproduces_its_scores() {
    let s = setup(10, 6);
    let spec = FilterSpec::default();
    let probe = ProbeConfig::default();
    let scores = diffscore::score_dataset(&s.config, &s.base, &s.data, &spec, &probe, 1).unwrap();
    let kept = filterpipe::select(&scores, 0.5).unwrap();
    let filtered = filterpipe::apply(&s.samples, &kept).unwrap();
    let text = dataio::to_jsonl(&filtered).unwrap();
    let reloaded = dataio::parse_jsonl(&text).unwrap();
    let data = dataio::encode_all(&reloaded, &s.vocab, TemplateStyle::TurnMarkers, 96).unwrap();
    let rescored = diffscore::score_dataset(&s.config, &s.base, &data, &spec, &probe, 1).unwrap();
    for (j, &i) in kept.iter().enumerate() {
        assert_eq!(rescored[j].score, scores[i].score);
        assert_eq!(rescored[j].per_cell, scores[i].per_cell);
    }
}

#[test]
fn zero_learning_rate_means_no_change() {
    let s = setup(2, 1);
    let r = diffscore::score_sample(&s.config, &s.base, &s.data[0], &FilterSpec::default(), &sgd(0.0)).unwrap();
    for c in &r.cells {
        assert_eq!(c.mean_abs, 0.0);
        assert_eq!(c.cosine, 1.0);
    }
    let twin = diffscore::score_sample(&s.config, &s.base, &s.data[0], &FilterSpec::default(), &sgd(0.3)).unwrap();
    let again = diffscore::score_sample(&s.config, &s.base, &s.data[0], &FilterSpec::default(), &sgd(0.3)).unwrap();
    assert_eq!(twin, again);
}

#[test]
fn cell_statistics_match_materialized_matrices() {
    let s = setup(2, 1);
    let probe = OptimizerConfig::adamw(1e-2);
    let tuned = train::probe_step(&s.config, &s.base, &s.data[1], &probe, 1).unwrap();
    let record = diffscore::score_sample(
        &s.config,
        &s.base,
        &s.data[1],
        &FilterSpec::default(),
        &ProbeConfig {
            optimizer: probe,
            steps: 1,
        },
    )
    .unwrap();
    assert_eq!(record.cells.len(), 3 * Module::ALL.len());
    for cell in &record.cells {
        let before = s.base.lookup(cell.layer, cell.module).unwrap();
        let after = tuned.params.lookup(cell.layer, cell.module).unwrap();
        let delta: Vec<f64> = before.data().iter().zip(after.data()).map(|(b, a)| a - b).collect();
        let abs: Vec<f64> = delta.iter().map(|d| d.abs()).collect();
        let n = delta.len() as f64;
        let mut acc = 0.0;
        for a in &abs {
            acc += a;
        }
        assert!((cell.mean_abs - acc / n).abs() <= 1e-12 * (acc / n));
        assert!((cell.p99 - numcore::percentile(&abs, 0.99).unwrap()).abs() <= 1e-15);
        let cos = numcore::cosine_similarity(before.data(), after.data()).unwrap();
        assert_eq!(cell.cosine, cos);
        assert!(cell.mean_abs >= 0.0 && (-1.0..=1.0).contains(&cell.cosine) && (-1.0..=1.0).contains(&cell.pearson));
        assert_eq!(*cell, CellStats::compute(cell.layer, cell.module, before, after).unwrap());
    }
}

#[test]
fn rereduce_matches_scoring_with_the_other_spec() {
    let s = setup(4, 2);
    let probe = sgd(0.1);
    let scores = diffscore::score_dataset(&s.config, &s.base, &s.data, &FilterSpec::default(), &probe, 1).unwrap();
    let other = FilterSpec {
        module: Module::Wv,
        stat: Stat::Pearson,
        layer_range: Some(LayerRange { first: 0, last: 1 }),
        ..FilterSpec::default()
    };
    let direct = diffscore::score_dataset(&s.config, &s.base, &s.data, &other, &probe, 1).unwrap();
    for (e, d) in scores.iter().zip(&direct) {
        assert_eq!(&diffscore::rereduce(e, &other).unwrap(), d);
        assert!(d.score >= 0.0 && d.score <= 2.0);
    }
}

#[test]
fn sgd_mean_abs_tracks_gradient_mass() {
    let s = setup(3, 2);
    let lr = 0.25;
    let spec = FilterSpec {
        layer_window: 2,
        ..FilterSpec::default()
    };
    for sample in &s.data {
        let (_, g) = model::loss_and_grads(&s.config, &s.base, &sample.token_ids, &sample.loss_mask).unwrap();
        let oracle = lr * (numcore::mean_abs(&g.layers[1].w_up).unwrap() + numcore::mean_abs(&g.layers[2].w_up).unwrap()) / 2.0;
        let entry = diffscore::reduce(
            diffscore::score_sample(&s.config, &s.base, sample, &spec, &sgd(lr)).unwrap(),
            &spec,
        )
        .unwrap();
        assert!((entry.score - oracle).abs() <= 1e-12 * oracle);
    }
}

#[test]
fn score_file_round_trip_and_errors() {
    let s = setup(3, 1);
    let scores = diffscore::score_dataset(&s.config, &s.base, &s.data, &FilterSpec::default(), &sgd(0.1), 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.jsonl");
    diffscore::save_scores(&scores, &path).unwrap();
    assert_eq!(diffscore::load_scores(&path).unwrap(), scores);

    let too_deep = FilterSpec {
        layer_window: 4,
        ..FilterSpec::default()
    };
    assert!(diffscore::score_dataset(&s.config, &s.base, &s.data, &too_deep, &sgd(0.1), 1).is_err());
    assert!(diffscore::score_dataset(&s.config, &s.base, &[], &FilterSpec::default(), &sgd(0.1), 1).is_err());
}
