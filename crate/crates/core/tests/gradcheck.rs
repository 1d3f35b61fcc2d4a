use igar_core::policy::{gradient_check, Arch, PolicySpec, Token};
use igar_core::tensor::Rng;

/// Random small policy with perturbed norm gains and biases, a random token
/// sequence and a random target.
fn config(seed: u64) -> (PolicySpec, Vec<Token>, usize) {
    let mut rng = Rng::new(seed);
    let heads = 1 + rng.below(2);
    let arch = Arch {
        layers: 1 + rng.below(2),
        heads,
        d: heads * (2 + rng.below(3)),
        vocab: 6,
        actions: 2 + rng.below(4),
        max_seq: 6,
        bos_as_text: rng.below(2) == 1,
    };
    let mut spec = PolicySpec::random(arch, &mut rng).unwrap();
    for p in spec.params_mut() {
        if p.iter().all(|&v| v == 1.0 || v == 0.0) {
            for v in p.iter_mut() {
                *v += rng.uniform(-0.3, 0.3);
            }
        }
    }
    let n = 1 + rng.below(arch.max_seq);
    let tokens = (0..n)
        .map(|_| {
            let k = 1 + rng.below(3);
            Token { features: (0..k).map(|_| rng.below(arch.vocab)).collect(), saliency: rng.uniform(0.0, 1.0) }
        })
        .collect();
    let target = rng.below(arch.actions);
    (spec, tokens, target)
}

#[test]
fn analytic_gradients_match_finite_differences() {
    for seed in 0..10 {
        let (spec, tokens, target) = config(seed);
        let worst = gradient_check(&spec, &tokens, target, 1e-5).unwrap();
        assert!(worst <= 1e-4, "config {seed}: worst relative error {worst}");
    }
}
