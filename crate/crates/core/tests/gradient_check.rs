use resofilter::model::{loss, loss_and_grads, ModelConfig, ParamStore};
use resofilter::numcore::Rng;

fn config() -> ModelConfig {
    ModelConfig {
        vocab_size: 50,
        d_model: 16,
        n_heads: 4,
        n_layers: 2,
        d_ff: 32,
        max_seq_len: 24,
        seed: 3,
    }
}

/// Larger-than-init weights so every tensor carries a visible gradient.
fn perturbed(config: &ModelConfig, seed: u64) -> ParamStore {
    let mut p = ParamStore::init(config).unwrap();
    let mut rng = Rng::new(seed);
    for t in p.tensors_mut() {
        for v in t.data_mut() {
            *v += 0.3 * rng.normal();
        }
    }
    p
}

fn check(tokens: &[u32], mask: &[bool], samples: usize, seed: u64) -> (usize, f64) {
    let c = config();
    let params = perturbed(&c, seed);
    let (_, grads) = loss_and_grads(&c, &params, tokens, mask).unwrap();
    let grad_tensors: Vec<Vec<f64>> = grads.tensors().iter().map(|(_, m)| m.data().to_vec()).collect();
    let mut rng = Rng::new(seed + 1);
    let step = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..samples {
        let ti = rng.below(grad_tensors.len());
        let ei = rng.below(grad_tensors[ti].len());
        let mut plus = params.clone();
        plus.tensors_mut()[ti].data_mut()[ei] += step;
        let mut minus = params.clone();
        minus.tensors_mut()[ti].data_mut()[ei] -= step;
        let fd = (loss(&c, &plus, tokens, mask).unwrap() - loss(&c, &minus, tokens, mask).unwrap()) / (2.0 * step);
        let analytic = grad_tensors[ti][ei];
        let rel = (analytic - fd).abs() / (fd.abs() + 1e-8);
        worst = worst.max(rel);
    }
    eprintln!("worst relative error {worst:e}");
    (samples, worst)
}

#[test]
fn gradients_match_central_differences() {
    let tokens = [2u32, 7, 11, 3, 41, 19, 8, 8, 30, 49, 1, 5];
    let mask = [false, false, false, false, true, true, true, true, true, true, true, true];
    let (n, worst) = check(&tokens, &mask, 250, 17);
    assert!(worst < 1e-3, "worst relative error {worst} over {n} parameters");
}

#[test]
fn gradients_match_on_repeated_sequence() {
    let base = [2u32, 7, 11, 3, 41, 19];
    let tokens: Vec<u32> = base.iter().chain(base.iter()).copied().collect();
    let mask: Vec<bool> = (0..tokens.len()).map(|i| i % 6 >= 3).collect();
    let c = config();
    let p = perturbed(&c, 9);
    let short = loss(&c, &p, &base, &mask[..6]).unwrap();
    let long = loss(&c, &p, &tokens, &mask).unwrap();
    assert_ne!(short, long);
    let (n, worst) = check(&tokens, &mask, 120, 9);
    assert!(worst < 1e-3, "worst relative error {worst} over {n} parameters");
}
