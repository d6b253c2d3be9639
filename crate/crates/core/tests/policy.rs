use genotrait::policy::{sample_token, PolicyShape, SamplingConfig, ToyPolicy};
use genotrait::scalar::log_softmax;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const FD_EPS: f64 = 1e-5;

struct Config {
    policy: ToyPolicy<f64>,
    context: Vec<u32>,
    gene: Vec<f64>,
    target: u32,
}

fn random_config(rng: &mut ChaCha8Rng) -> Config {
    let shape = PolicyShape {
        vocab: rng.gen_range(2..12),
        hidden: rng.gen_range(1..6),
        gene_dim: rng.gen_range(1..5),
        window: rng.gen_range(1..6),
    };
    let mut policy = ToyPolicy::random(shape, 1.0, rng);
    let bias: Vec<f64> = (0..shape.vocab).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut flat = policy.flat();
    let n = flat.len();
    flat[n - shape.vocab..].copy_from_slice(&bias);
    policy.set_flat(&flat);
    let len = rng.gen_range(0..10);
    let context = (0..len).map(|_| rng.gen_range(0..shape.vocab as u32)).collect();
    let gene = if rng.gen_bool(0.2) {
        vec![0.0; shape.gene_dim]
    } else {
        (0..shape.gene_dim).map(|_| rng.gen_range(-1.5..1.5)).collect()
    };
    let target = rng.gen_range(0..shape.vocab as u32);
    Config { policy, context, gene, target }
}

fn fd_gradient(c: &Config, f: impl Fn(&ToyPolicy<f64>) -> f64) -> Vec<f64> {
    let theta = c.policy.flat();
    let mut p = c.policy.clone();
    (0..theta.len())
        .map(|i| {
            let mut t = theta.clone();
            t[i] = theta[i] + FD_EPS;
            p.set_flat(&t);
            let up = f(&p);
            t[i] = theta[i] - FD_EPS;
            p.set_flat(&t);
            let down = f(&p);
            (up - down) / (2.0 * FD_EPS)
        })
        .collect()
}

fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic.iter().zip(numeric).map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-4)).fold(0.0, f64::max)
}

#[test]
fn logprob_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0_f64;
    for _ in 0..100 {
        let c = random_config(&mut rng);
        let analytic = c.policy.grad_logprob(&c.context, &c.gene, c.target).unwrap().flat();
        let numeric = fd_gradient(&c, |p| p.next_logprobs(&c.context, &c.gene).unwrap()[c.target as usize]);
        worst = worst.max(max_rel_error(&analytic, &numeric));
    }
    assert!(worst <= 1e-4, "max relative error {worst}");
}

#[test]
fn vjp_matches_finite_differences_of_weighted_logits() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for _ in 0..100 {
        let c = random_config(&mut rng);
        let w: Vec<f64> = (0..c.policy.shape.vocab).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut grad = c.policy.zeros_like();
        c.policy.accumulate_vjp(&c.context, &c.gene, &w, 0.7, &mut grad);
        let numeric = fd_gradient(&c, |p| {
            0.7 * p.logits(&c.context, &c.gene).unwrap().iter().zip(&w).map(|(l, w)| l * w).sum::<f64>()
        });
        assert!(max_rel_error(&grad.flat(), &numeric) <= 1e-4);
    }
}

#[test]
fn zero_gene_ignores_gene_projection() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let c = random_config(&mut rng);
    let zero = vec![0.0; c.policy.shape.gene_dim];
    let a = c.policy.next_logprobs(&c.context, &zero).unwrap();
    // Overwrite only the gene projection: output must be bit-identical.
    let mut other = c.policy.clone();
    let mut flat = other.flat();
    let PolicyShape { vocab: v, hidden: h, gene_dim: d, .. } = c.policy.shape;
    for x in &mut flat[v * h..v * h + h * d] {
        *x = 123.0;
    }
    other.set_flat(&flat);
    assert_eq!(a, other.next_logprobs(&c.context, &zero).unwrap());
}

#[test]
fn logprobs_are_normalized_in_both_precisions() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let shape = PolicyShape::default();
    let p64 = ToyPolicy::<f64>::random(shape, 0.5, &mut rng);
    let p32 = ToyPolicy::<f32>::random(shape, 0.5, &mut rng);
    let gene64 = vec![0.3; shape.gene_dim];
    let gene32 = vec![0.3_f32; shape.gene_dim];
    let s64: f64 = p64.next_logprobs(&[5, 6, 7], &gene64).unwrap().iter().map(|l| l.exp()).sum();
    let s32: f32 = p32.next_logprobs(&[5, 6, 7], &gene32).unwrap().iter().map(|l| l.exp()).sum();
    assert!((s64 - 1.0).abs() < 1e-12);
    assert!((s32 - 1.0).abs() < 1e-5);
}

#[test]
fn checkpoint_round_trip() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let p = ToyPolicy::<f64>::random(PolicyShape::default(), 0.5, &mut rng);
    let text = serde_json::to_string(&p.to_checkpoint()).unwrap();
    let back = ToyPolicy::<f64>::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
    assert_eq!(back, p);
}

#[test]
fn sampling_respects_top_k_and_greedy() {
    let lp = log_softmax(&[0.0, 3.0, 2.9, -5.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let greedy = SamplingConfig { greedy: true, ..Default::default() };
    assert_eq!(sample_token(&lp, &greedy, &mut rng), 1);
    let top2 = SamplingConfig { top_k: 2, top_p: 1.0, ..Default::default() };
    for _ in 0..500 {
        let t = sample_token(&lp, &top2, &mut rng);
        assert!(t == 1 || t == 2);
    }
}
