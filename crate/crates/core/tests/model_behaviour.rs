use resofilter::dataio::{self, TemplateStyle, TokenizedSample, Vocab};
use resofilter::model::{self, Checkpoint, ModelConfig, ParamStore};
use resofilter::numcore::{self, Rng};
use resofilter::train::{self, OptimizerConfig, TrainConfig};

fn config(vocab: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 32,
        max_seq_len: 96,
        seed: 11,
    }
}

fn random_tokens(n: usize, vocab: usize, seed: u64) -> Vec<u32> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| rng.below(vocab) as u32).collect()
}

#[test]
fn logits_have_one_row_per_token_and_attention_rows_are_distributions() {
    let c = config(40);
    let p = ParamStore::init(&c).unwrap();
    for len in [1, 5, 17] {
        let tokens = random_tokens(len, 40, len as u64);
        let (logits, trace) = model::forward(&c, &p, &tokens).unwrap();
        assert_eq!(logits.shape(), (len, 40));
        for layer in 0..c.n_layers {
            for head in 0..c.n_heads {
                let a = trace.attention(layer, head);
                for t in 0..len {
                    let row = a.row(t);
                    assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                    assert!(row[t + 1..].iter().all(|&v| v == 0.0));
                }
            }
        }
    }
}

#[test]
fn changing_the_last_token_leaves_earlier_logits_unchanged() {
    let c = config(40);
    let mut p = ParamStore::init(&c).unwrap();
    let mut rng = Rng::new(4);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.2 * rng.normal();
        }
    }
    let mut tokens = random_tokens(12, 40, 2);
    let (a, _) = model::forward(&c, &p, &tokens).unwrap();
    tokens[11] = (tokens[11] + 7) % 40;
    let (b, _) = model::forward(&c, &p, &tokens).unwrap();
    for t in 0..11 {
        assert_eq!(a.row(t), b.row(t), "row {t} changed");
    }
    assert_ne!(a.row(11), b.row(11));
}

#[test]
fn init_std_is_close_to_target() {
    let c = ModelConfig {
        vocab_size: 30,
        d_model: 64,
        n_heads: 4,
        n_layers: 1,
        d_ff: 256,
        max_seq_len: 8,
        seed: 1,
    };
    let p = ParamStore::init(&c).unwrap();
    let w = &p.layers[0].w_up;
    assert_eq!(w.shape(), (64, 256));
    let s = numcore::std(w).unwrap();
    assert!((s - 0.02).abs() < 0.2 * 0.02, "std {s}");
    assert!(p.layers[0].ln1_scale.data().iter().all(|&v| v == 1.0));
    assert_eq!(ParamStore::init(&c).unwrap().fingerprint(), p.fingerprint());
}

#[test]
fn forward_and_backward_leave_parameters_alone() {
    let c = config(40);
    let p = ParamStore::init(&c).unwrap();
    let before = p.fingerprint();
    let tokens = random_tokens(10, 40, 8);
    let mask: Vec<bool> = (0..10).map(|i| i >= 4).collect();
    model::forward(&c, &p, &tokens).unwrap();
    model::loss_and_grads(&c, &p, &tokens, &mask).unwrap();
    let sample = TokenizedSample {
        token_ids: tokens,
        loss_mask: mask,
        query: 0..4,
        source_index: 0,
    };
    train::probe_step(&c, &p, &sample, &OptimizerConfig::adamw(1e-2), 3).unwrap();
    assert_eq!(p.fingerprint(), before);
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let c = config(40);
    let mut p = ParamStore::init(&c).unwrap();
    let mut rng = Rng::new(99);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.normal() * 1e-3 + 1.0 / 3.0;
        }
    }
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("ck.json");
    let ck = Checkpoint {
        config: c.clone(),
        params: p.clone(),
    };
    ck.save(&path).unwrap();
    let back = Checkpoint::load(&path).unwrap();
    assert_eq!(back, ck);
    assert_eq!(back.params.fingerprint(), p.fingerprint());

    std::fs::write(&path, b"{\"config\": 1}").unwrap();
    assert!(Checkpoint::load(&path).is_err());
}

fn corpus(seed: u64, n: usize) -> (Vocab, Vec<TokenizedSample>, Vec<TokenizedSample>) {
    let train_set = dataio::synth_corpus(n, 0, seed);
    let held = dataio::synth_corpus(20, 0, seed + 1);
    let vocab = Vocab::from_samples(train_set.iter().chain(&held), TemplateStyle::TurnMarkers);
    let a = dataio::encode_all(&train_set, &vocab, TemplateStyle::TurnMarkers, 96).unwrap();
    let b = dataio::encode_all(&held, &vocab, TemplateStyle::TurnMarkers, 96).unwrap();
    (vocab, a, b)
}

#[test]
fn training_lowers_held_out_loss_and_is_reproducible() {
    let (vocab, data, held) = corpus(5, 50);
    let c = config(vocab.len());
    let init = ParamStore::init(&c).unwrap();
    // 50 samples, batch 1, 4 epochs: 200 updates
    let tc = TrainConfig {
        epochs: 4,
        batch_size: 1,
        shuffle: true,
        seed: 3,
    };
    let opt = OptimizerConfig::adamw(1e-3);
    let (trained, log) = train::train(&c, &init, &data, &opt, &tc).unwrap();
    assert_eq!(log.len(), 200);
    let before = train::eval_loss(&c, &init, &held).unwrap();
    let after = train::eval_loss(&c, &trained, &held).unwrap();
    eprintln!("held-out loss {before} -> {after}");
    assert!(after < before);

    let (again, _) = train::train(&c, &init, &data, &opt, &tc).unwrap();
    assert_eq!(again.fingerprint(), trained.fingerprint());
}

#[test]
fn eval_loss_matches_per_sample_loop() {
    let (vocab, data, _) = corpus(8, 12);
    let c = config(vocab.len());
    let p = ParamStore::init(&c).unwrap();
    let mut acc = 0.0;
    for s in &data {
        acc += model::loss_and_grads(&c, &p, &s.token_ids, &s.loss_mask).unwrap().0;
    }
    let oracle = acc / data.len() as f64;
    let got = train::eval_loss(&c, &p, &data).unwrap();
    assert!((got - oracle).abs() <= 1e-12 * oracle.abs());
    let single = train::eval_loss(&c, &p, &data[..1]).unwrap();
    assert_eq!(single, model::loss(&c, &p, &data[0].token_ids, &data[0].loss_mask).unwrap());
    let doubled: Vec<TokenizedSample> = data.iter().chain(&data).cloned().collect();
    assert!((train::eval_loss(&c, &p, &doubled).unwrap() - got).abs() <= 1e-12 * got.abs());
    assert!(train::eval_loss(&c, &p, &[]).is_err());
}
