use std::ffi::{CStr, CString};
use std::path::Path;
use std::ptr;

use resofilter::dataio::{self, TemplateStyle, Vocab};
use resofilter::diffscore::{self, ProbeConfig};
use resofilter::filterpipe::FilterSpec;
use resofilter::model::{Checkpoint, ModelConfig, ParamStore};
use resofilter::train::OptimizerConfig;
use resofilter_ffi::*;

fn cstr(p: &Path) -> CString {
    CString::new(p.to_str().unwrap()).unwrap()
}

fn last_error() -> String {
    unsafe { CStr::from_ptr(rf_last_error()) }.to_string_lossy().into_owned()
}

struct Fixture {
    _dir: tempfile::TempDir,
    ckpt: CString,
    vocab: CString,
    data: CString,
    config: ModelConfig,
    params: ParamStore,
    samples: Vec<resofilter::dataio::Sample>,
    vocab_table: Vocab,
}

fn fixture() -> Fixture {
    let dir = tempfile::tempdir().unwrap();
    let samples = dataio::synth_corpus(6, 2, 3);
    let vocab = Vocab::from_samples(&samples, TemplateStyle::TurnMarkers);
    let config = ModelConfig {
        vocab_size: vocab.len(),
        d_model: 16,
        n_heads: 2,
        n_layers: 3,
        d_ff: 32,
        max_seq_len: 96,
        seed: 5,
    };
    let params = ParamStore::init(&config).unwrap();
    let ckpt = dir.path().join("m.json");
    let vpath = dir.path().join("v.txt");
    let dpath = dir.path().join("d.jsonl");
    Checkpoint {
        config: config.clone(),
        params: params.clone(),
    }
    .save(&ckpt)
    .unwrap();
    vocab.save(&vpath).unwrap();
    dataio::save_jsonl(&samples, &dpath).unwrap();
    Fixture {
        ckpt: cstr(&ckpt),
        vocab: cstr(&vpath),
        data: cstr(&dpath),
        _dir: dir,
        config,
        params,
        samples,
        vocab_table: vocab,
    }
}

#[test]
fn scoring_through_the_c_api_matches_the_library() {
    let f = fixture();
    unsafe {
        let mut model = ptr::null_mut();
        assert_eq!(rf_model_load(f.ckpt.as_ptr(), f.vocab.as_ptr(), &mut model), RfStatus::Ok);
        assert_eq!(rf_model_num_layers(model), 3);

        let mut opts = rf_score_options_default();
        opts.probe_optimizer = RfOptimizer::Sgd;
        opts.probe_lr = 0.1;
        opts.workers = 2;
        let mut scores = ptr::null_mut();
        assert_eq!(rf_score_dataset(model, f.data.as_ptr(), &opts, &mut scores), RfStatus::Ok);
        assert_eq!(rf_scores_len(scores), f.samples.len());

        let data = dataio::encode_all(&f.samples, &f.vocab_table, TemplateStyle::TurnMarkers, 96).unwrap();
        let probe = ProbeConfig {
            optimizer: OptimizerConfig::sgd(0.1),
            steps: 1,
        };
        let expected = diffscore::score_dataset(&f.config, &f.params, &data, &FilterSpec::default(), &probe, 1).unwrap();
        for (i, e) in expected.iter().enumerate() {
            let (mut index, mut score) = (0usize, 0f64);
            assert_eq!(rf_scores_get(scores, i, &mut index, &mut score), RfStatus::Ok);
            assert_eq!((index, score), (e.index, e.score));
        }

        let mut kept = vec![0usize; 8];
        let mut n = 0usize;
        assert_eq!(rf_select(scores, 0.5, kept.as_mut_ptr(), kept.len(), &mut n), RfStatus::Ok);
        assert_eq!(n, 4);
        let lib = resofilter::filterpipe::select(&expected, 0.5).unwrap();
        assert_eq!(&kept[..n], &lib[..]);

        rf_scores_free(scores);
        rf_model_free(model);
    }
}

#[test]
fn scores_survive_a_save_load_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = cstr(&dir.path().join("s.jsonl"));
    let values = [0.3, 0.1, 0.2];
    unsafe {
        let mut s = ptr::null_mut();
        assert_eq!(rf_scores_from_values(values.as_ptr(), 3, &mut s), RfStatus::Ok);
        assert_eq!(rf_scores_save(s, path.as_ptr()), RfStatus::Ok);
        let mut back = ptr::null_mut();
        assert_eq!(rf_scores_load(path.as_ptr(), &mut back), RfStatus::Ok);
        assert_eq!(rf_scores_len(back), 3);
        let (mut i, mut v) = (0usize, 0f64);
        assert_eq!(rf_scores_get(back, 2, &mut i, &mut v), RfStatus::Ok);
        assert_eq!((i, v), (2, 0.2));
        rf_scores_free(s);
        rf_scores_free(back);
    }
}

#[test]
fn errors_come_back_as_codes_with_messages() {
    unsafe {
        let mut m = ptr::null_mut();
        assert_eq!(rf_model_load(ptr::null(), ptr::null(), &mut m), RfStatus::NullPointer);
        assert!(last_error().contains("checkpoint_path"));
        let missing = CString::new("/definitely/not/here.json").unwrap();
        assert_eq!(rf_model_load(missing.as_ptr(), missing.as_ptr(), &mut m), RfStatus::Io);
        assert!(m.is_null());

        let values = [1.0, 2.0, 3.0, 4.0];
        let mut s = ptr::null_mut();
        assert_eq!(rf_scores_from_values(values.as_ptr(), 4, &mut s), RfStatus::Ok);
        let mut n = 0usize;
        assert_eq!(rf_select(s, 0.0, ptr::null_mut(), 0, &mut n), RfStatus::InvalidArgument);
        let mut one = [0usize; 1];
        assert_eq!(rf_select(s, 0.5, one.as_mut_ptr(), 1, &mut n), RfStatus::BufferTooSmall);
        assert_eq!(n, 2);
        let (mut i, mut v) = (0usize, 0f64);
        assert_eq!(rf_scores_get(s, 9, &mut i, &mut v), RfStatus::InvalidArgument);
        rf_scores_free(s);

        let nan = [f64::NAN];
        assert_eq!(rf_scores_from_values(nan.as_ptr(), 1, &mut s), RfStatus::Domain);
        rf_scores_free(ptr::null_mut());
        rf_model_free(ptr::null_mut());
        assert_eq!(rf_scores_len(ptr::null()), 0);
    }
}

#[test]
fn numeric_helpers() {
    let v = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0, 10.0];
    let mut out = 0.0;
    unsafe {
        assert_eq!(rf_percentile(v.as_ptr(), v.len(), 0.5, &mut out), RfStatus::Ok);
        assert_eq!(out, 5.5);
        assert_eq!(rf_percentile(v.as_ptr(), v.len(), 0.9, &mut out), RfStatus::Ok);
        assert!((out - 9.1).abs() < 1e-12);
        assert_eq!(rf_percentile(v.as_ptr(), v.len(), 1.5, &mut out), RfStatus::Domain);
        assert_eq!(rf_richness(10, 0.1, &mut out), RfStatus::Ok);
        assert!((out - (1.0 - (-1.0f64).exp())).abs() < 1e-12);
        assert_eq!(rf_richness(10, 0.0, &mut out), RfStatus::InvalidArgument);
    }
}

#[test]
fn generated_header_is_valid_c() {
    let header = Path::new(env!("CARGO_MANIFEST_DIR")).join("include").join("resofilter.h");
    let text = std::fs::read_to_string(&header).unwrap();
    for name in ["rf_model_load", "rf_score_dataset", "rf_select", "rf_last_error", "RF_STATUS_OK"] {
        assert!(text.contains(name), "{name} missing from header");
    }
    let Ok(out) = std::process::Command::new("cc")
        .args(["-fsyntax-only", "-x", "c", "-std=c99"])
        .arg(&header)
        .output()
    else {
        eprintln!("no C compiler; skipped syntax check");
        return;
    };
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}
