//! Gene-conditioned bag-of-context token policy with closed-form gradients.
//!
//! For a context `c` and gene vector `g`:
//!
//! ```text
//! z      = mean(E[c_{t-k..t}]) + W_g g
//! logits = W_o z + b
//! ```
//!
//! Feeding `g = 0` is the gene ablation; `W_g` then has no effect at all.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::{log_softmax, Scalar};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PolicyShape {
    pub vocab: usize,
    pub hidden: usize,
    pub gene_dim: usize,
    pub window: usize,
}

impl Default for PolicyShape {
    fn default() -> Self {
        PolicyShape { vocab: 32, hidden: 16, gene_dim: 8, window: 4 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplingConfig {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    /// Deterministic argmax decoding (the temperature → 0 limit).
    pub greedy: bool,
}

impl Default for SamplingConfig {
    fn default() -> Self {
        SamplingConfig { temperature: 1.0, top_p: 0.95, top_k: 50, greedy: false }
    }
}

impl SamplingConfig {
    pub fn validate(&self) -> Result<(), PolicyError> {
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(PolicyError::Sampling(format!("temperature must be > 0, got {}", self.temperature)));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(PolicyError::Sampling(format!("top_p must lie in (0, 1], got {}", self.top_p)));
        }
        if self.top_k == 0 {
            return Err(PolicyError::Sampling("top_k must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum PolicyError {
    #[error("token id {token} out of range for vocabulary of {vocab}")]
    TokenOutOfRange { token: u32, vocab: usize },
    #[error("gene has dimension {got}, policy expects {expected}")]
    GeneDim { expected: usize, got: usize },
    #[error("invalid sampling config: {0}")]
    Sampling(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
}

/// Parameters; the same layout doubles as a gradient record.
#[derive(Debug)]
pub struct ToyPolicy<T> {
    pub shape: PolicyShape,
    /// V × h, row per token.
    pub embed: Vec<T>,
    /// h × d.
    pub gene_proj: Vec<T>,
    /// V × h.
    pub out: Vec<T>,
    /// V.
    pub bias: Vec<T>,
    passes: AtomicUsize,
}

impl<T: Scalar> Clone for ToyPolicy<T> {
    fn clone(&self) -> Self {
        ToyPolicy {
            shape: self.shape,
            embed: self.embed.clone(),
            gene_proj: self.gene_proj.clone(),
            out: self.out.clone(),
            bias: self.bias.clone(),
            passes: AtomicUsize::new(0),
        }
    }
}

impl<T: Scalar> PartialEq for ToyPolicy<T> {
    fn eq(&self, other: &Self) -> bool {
        self.shape == other.shape
            && self.embed == other.embed
            && self.gene_proj == other.gene_proj
            && self.out == other.out
            && self.bias == other.bias
    }
}

impl<T: Scalar> ToyPolicy<T> {
    pub fn zeros(shape: PolicyShape) -> Self {
        let PolicyShape { vocab: v, hidden: h, gene_dim: d, .. } = shape;
        ToyPolicy {
            shape,
            embed: vec![T::zero(); v * h],
            gene_proj: vec![T::zero(); h * d],
            out: vec![T::zero(); v * h],
            bias: vec![T::zero(); v],
            passes: AtomicUsize::new(0),
        }
    }

    /// Uniform init in `[-scale, scale]` for every block except the bias.
    pub fn random(shape: PolicyShape, scale: f64, rng: &mut impl Rng) -> Self {
        let mut p = Self::zeros(shape);
        for v in p.embed.iter_mut().chain(p.gene_proj.iter_mut()).chain(p.out.iter_mut()) {
            *v = T::lit(rng.gen_range(-scale..=scale));
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.shape)
    }

    fn blocks(&self) -> [&Vec<T>; 4] {
        [&self.embed, &self.gene_proj, &self.out, &self.bias]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<T>; 4] {
        [&mut self.embed, &mut self.gene_proj, &mut self.out, &mut self.bias]
    }

    /// All parameters in block order (embed, gene_proj, out, bias).
    pub fn flat(&self) -> Vec<T> {
        self.blocks().into_iter().flatten().copied().collect()
    }

    pub fn set_flat(&mut self, values: &[T]) {
        let mut it = values.iter().copied();
        for b in self.blocks_mut() {
            for v in b.iter_mut() {
                *v = it.next().expect("flat parameter vector too short");
            }
        }
    }

    pub fn num_params(&self) -> usize {
        self.blocks().iter().map(|b| b.len()).sum()
    }

    /// `self += alpha * other`.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (a, b) in self.blocks_mut().into_iter().zip(other.blocks()) {
            a.iter_mut().zip(b).for_each(|(x, &y)| *x += alpha * y);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= alpha);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.blocks().iter().all(|b| b.iter().all(|v| v.is_finite()))
    }

    pub fn max_abs(&self) -> T {
        self.blocks().iter().flat_map(|b| b.iter()).fold(T::zero(), |m, v| m.max(v.abs()))
    }

    /// Number of teacher-forced sequence evaluations performed so far.
    pub fn teacher_forced_passes(&self) -> usize {
        self.passes.load(Ordering::Relaxed)
    }

    fn check(&self, context: &[u32], gene: &[T]) -> Result<(), PolicyError> {
        if gene.len() != self.shape.gene_dim {
            return Err(PolicyError::GeneDim { expected: self.shape.gene_dim, got: gene.len() });
        }
        if let Some(&t) = context.iter().find(|&&t| t as usize >= self.shape.vocab) {
            return Err(PolicyError::TokenOutOfRange { token: t, vocab: self.shape.vocab });
        }
        Ok(())
    }

    fn window<'a>(&self, context: &'a [u32]) -> &'a [u32] {
        &context[context.len().saturating_sub(self.shape.window)..]
    }

    /// Hidden state `z` for predicting the token after `context`.
    fn hidden(&self, context: &[u32], gene: &[T]) -> Vec<T> {
        let h = self.shape.hidden;
        let d = self.shape.gene_dim;
        let mut z = vec![T::zero(); h];
        let win = self.window(context);
        if !win.is_empty() {
            let inv = T::one() / T::lit(win.len() as f64);
            for &tok in win {
                let row = &self.embed[tok as usize * h..(tok as usize + 1) * h];
                z.iter_mut().zip(row).for_each(|(zi, &e)| *zi += e * inv);
            }
        }
        if gene.iter().any(|&g| g != T::zero()) {
            for (i, zi) in z.iter_mut().enumerate() {
                let row = &self.gene_proj[i * d..(i + 1) * d];
                *zi += row.iter().zip(gene).map(|(&w, &g)| w * g).sum::<T>();
            }
        }
        z
    }

    fn logits_from_hidden(&self, z: &[T]) -> Vec<T> {
        let h = self.shape.hidden;
        (0..self.shape.vocab)
            .map(|v| self.out[v * h..(v + 1) * h].iter().zip(z).map(|(&w, &x)| w * x).sum::<T>() + self.bias[v])
            .collect()
    }

    pub fn logits(&self, context: &[u32], gene: &[T]) -> Result<Vec<T>, PolicyError> {
        self.check(context, gene)?;
        Ok(self.logits_from_hidden(&self.hidden(context, gene)))
    }

    /// Log-distribution over the next token.
    pub fn next_logprobs(&self, context: &[u32], gene: &[T]) -> Result<Vec<T>, PolicyError> {
        Ok(log_softmax(&self.logits(context, gene)?))
    }

    /// Per-position log-distributions for every prefix of `tokens`:
    /// entry `t` conditions on `tokens[..t]`.
    pub fn logprobs(&self, tokens: &[u32], gene: &[T]) -> Result<Vec<Vec<T>>, PolicyError> {
        self.check(tokens, gene)?;
        Ok((0..tokens.len()).map(|t| log_softmax(&self.logits_from_hidden(&self.hidden(&tokens[..t], gene)))).collect())
    }

    /// One teacher-forced pass: `log π(tokens[t] | tokens[..t], gene)` at each
    /// requested position. Counted by [`Self::teacher_forced_passes`].
    pub fn teacher_forced(&self, tokens: &[u32], positions: &[usize], gene: &[T]) -> Result<Vec<T>, PolicyError> {
        self.check(tokens, gene)?;
        self.passes.fetch_add(1, Ordering::Relaxed);
        Ok(positions
            .iter()
            .map(|&t| {
                let lp = log_softmax(&self.logits_from_hidden(&self.hidden(&tokens[..t], gene)));
                lp[tokens[t] as usize]
            })
            .collect())
    }

    /// Accumulates `scale · (∂logits/∂θ)ᵀ dlogits` into `grad`.
    pub fn accumulate_vjp(&self, context: &[u32], gene: &[T], dlogits: &[T], scale: T, grad: &mut Self) {
        let h = self.shape.hidden;
        let d = self.shape.gene_dim;
        let z = self.hidden(context, gene);
        let mut dz = vec![T::zero(); h];
        for (v, &dl) in dlogits.iter().enumerate() {
            let g = dl * scale;
            if g == T::zero() {
                continue;
            }
            grad.bias[v] += g;
            let row = v * h..(v + 1) * h;
            for ((gw, &zi), (dzi, &w)) in
                grad.out[row.clone()].iter_mut().zip(&z).zip(dz.iter_mut().zip(&self.out[row]))
            {
                *gw += g * zi;
                *dzi += g * w;
            }
        }
        let win = self.window(context);
        if !win.is_empty() {
            let inv = T::one() / T::lit(win.len() as f64);
            for &tok in win {
                let row = &mut grad.embed[tok as usize * h..(tok as usize + 1) * h];
                row.iter_mut().zip(&dz).for_each(|(ge, &x)| *ge += x * inv);
            }
        }
        if gene.iter().any(|&g| g != T::zero()) {
            for (i, &dzi) in dz.iter().enumerate() {
                let row = &mut grad.gene_proj[i * d..(i + 1) * d];
                row.iter_mut().zip(gene).for_each(|(gw, &g)| *gw += dzi * g);
            }
        }
    }

    /// `∇θ log π(target | context, gene)`.
    pub fn grad_logprob(&self, context: &[u32], gene: &[T], target: u32) -> Result<Self, PolicyError> {
        let mut grad = self.zeros_like();
        self.accumulate_grad_logprob(context, gene, target, T::one(), &mut grad)?;
        Ok(grad)
    }

    /// `grad += scale · ∇θ log π(target | context, gene)`.
    pub fn accumulate_grad_logprob(
        &self,
        context: &[u32],
        gene: &[T],
        target: u32,
        scale: T,
        grad: &mut Self,
    ) -> Result<(), PolicyError> {
        self.check(context, gene)?;
        if target as usize >= self.shape.vocab {
            return Err(PolicyError::TokenOutOfRange { token: target, vocab: self.shape.vocab });
        }
        let lp = self.next_logprobs(context, gene)?;
        let dlogits: Vec<T> = lp
            .iter()
            .enumerate()
            .map(|(v, &l)| if v == target as usize { T::one() } else { T::zero() } - l.exp())
            .collect();
        self.accumulate_vjp(context, gene, &dlogits, scale, grad);
        Ok(())
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let PolicyShape { vocab: v, hidden: h, gene_dim: d, .. } = self.shape;
        let arr = |name: &str, shape: Vec<usize>, data: &[T]| NamedArray {
            name: name.into(),
            shape,
            data: data.iter().map(|x| x.to_f64_lossy()).collect(),
        };
        Checkpoint {
            shape: self.shape,
            arrays: vec![
                arr("embed", vec![v, h], &self.embed),
                arr("gene_proj", vec![h, d], &self.gene_proj),
                arr("out", vec![v, h], &self.out),
                arr("bias", vec![v], &self.bias),
            ],
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self, PolicyError> {
        let mut p = Self::zeros(ck.shape);
        for block in ["embed", "gene_proj", "out", "bias"] {
            let a = ck
                .arrays
                .iter()
                .find(|a| a.name == block)
                .ok_or_else(|| PolicyError::Checkpoint(format!("missing array `{block}`")))?;
            let dst = match block {
                "embed" => &mut p.embed,
                "gene_proj" => &mut p.gene_proj,
                "out" => &mut p.out,
                _ => &mut p.bias,
            };
            if a.data.len() != dst.len() || a.shape.iter().product::<usize>() != dst.len() {
                return Err(PolicyError::Checkpoint(format!("array `{block}` has the wrong size")));
            }
            dst.iter_mut().zip(&a.data).for_each(|(x, &y)| *x = T::lit(y));
        }
        Ok(p)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

/// JSON checkpoint of named arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub shape: PolicyShape,
    pub arrays: Vec<NamedArray>,
}

/// Draws a token from `logprobs` after temperature, top-k and top-p
/// truncation. Ties are broken towards the lower token id.
pub fn sample_token<T: Scalar>(logprobs: &[T], cfg: &SamplingConfig, rng: &mut impl Rng) -> u32 {
    let mut order: Vec<usize> = (0..logprobs.len()).collect();
    order.sort_by(|&a, &b| logprobs[b].partial_cmp(&logprobs[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b)));
    if cfg.greedy || cfg.top_k == 1 {
        return order[0] as u32;
    }
    let scaled: Vec<f64> = logprobs.iter().map(|&l| l.to_f64_lossy() / cfg.temperature).collect();
    let probs = log_softmax(&scaled).into_iter().map(f64::exp).collect::<Vec<_>>();
    order.truncate(cfg.top_k.min(order.len()));
    let mut kept = Vec::with_capacity(order.len());
    let mut cum = 0.0;
    for &i in &order {
        kept.push(i);
        cum += probs[i];
        if cum >= cfg.top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let mut u = rng.gen::<f64>() * total;
    for &i in &kept {
        u -= probs[i];
        if u < 0.0 {
            return i as u32;
        }
    }
    *kept.last().unwrap() as u32
}

/// Plain gradient step `θ −= lr · g`, with `g` rescaled to norm
/// `max_grad_norm` when it is longer (0 disables the cap). Returns the norm
/// of `g` before rescaling.
pub fn gradient_step<T: Scalar>(policy: &mut ToyPolicy<T>, grad: &ToyPolicy<T>, lr: f64, max_grad_norm: f64) -> f64 {
    let gnorm = crate::scalar::norm(&grad.flat()).to_f64_lossy();
    let k = if max_grad_norm > 0.0 && gnorm > max_grad_norm { max_grad_norm / gnorm } else { 1.0 };
    policy.add_scaled(grad, T::lit(-lr * k));
    gnorm
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_params_are_uniform() {
        let p = ToyPolicy::<f64>::zeros(PolicyShape::default());
        let lp = p.next_logprobs(&[1, 2, 3], &[0.5; 8]).unwrap();
        for l in lp {
            assert!((l + (32f64).ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_gradient_at_uniform() {
        let p = ToyPolicy::<f64>::zeros(PolicyShape::default());
        let g = p.grad_logprob(&[4, 5], &[1.0; 8], 7).unwrap();
        for (v, &b) in g.bias.iter().enumerate() {
            let want = if v == 7 { 1.0 } else { 0.0 } - 1.0 / 32.0;
            assert!((b - want).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_gene_ignores_gene_projection() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = ToyPolicy::<f64>::random(PolicyShape::default(), 0.5, &mut rng);
        let mut q = p.clone();
        q.gene_proj.iter_mut().for_each(|w| *w = 123.0);
        let zero = [0.0; 8];
        assert_eq!(p.next_logprobs(&[1, 9], &zero).unwrap(), q.next_logprobs(&[1, 9], &zero).unwrap());
        let g = p.grad_logprob(&[1, 9], &zero, 3).unwrap();
        assert!(g.gene_proj.iter().all(|&x| x == 0.0));
    }

    #[test]
    fn rejects_bad_inputs() {
        let p = ToyPolicy::<f32>::zeros(PolicyShape::default());
        assert!(matches!(p.next_logprobs(&[40], &[0.0; 8]), Err(PolicyError::TokenOutOfRange { .. })));
        assert!(matches!(p.next_logprobs(&[1], &[0.0; 3]), Err(PolicyError::GeneDim { .. })));
    }

    #[test]
    fn large_logits_stay_finite() {
        let mut p = ToyPolicy::<f64>::zeros(PolicyShape::default());
        p.bias[0] = 1000.0;
        p.bias[1] = -1000.0;
        let lp = p.next_logprobs(&[], &[0.0; 8]).unwrap();
        assert!(lp.iter().all(|l| l.is_finite()));
        let total: f64 = lp.iter().map(|l| l.exp()).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }

    #[test]
    fn greedy_and_top1_pick_argmax() {
        let lp = log_softmax(&[0.1, 2.0, 0.5]);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let greedy = SamplingConfig { greedy: true, ..Default::default() };
        let top1 = SamplingConfig { top_k: 1, top_p: 0.01, ..Default::default() };
        for _ in 0..10 {
            assert_eq!(sample_token(&lp, &greedy, &mut rng), 1);
            assert_eq!(sample_token(&lp, &top1, &mut rng), 1);
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = ToyPolicy::<f64>::random(PolicyShape::default(), 0.3, &mut rng);
        let text = serde_json::to_string(&p.to_checkpoint()).unwrap();
        let back = ToyPolicy::<f64>::from_checkpoint(&serde_json::from_str(&text).unwrap()).unwrap();
        assert_eq!(back, p);
    }

    #[test]
    fn sampling_config_validation() {
        assert!(SamplingConfig::default().validate().is_ok());
        assert!(SamplingConfig { temperature: 0.0, ..Default::default() }.validate().is_err());
        assert!(SamplingConfig { top_p: 1.5, ..Default::default() }.validate().is_err());
        assert!(SamplingConfig { top_k: 0, ..Default::default() }.validate().is_err());
    }
}
