//! The toy autoregressive policy: parameters (optionally behind low-rank
//! adapters), differentiable segment log-probabilities, sampling, SFT, and
//! checkpoints.

pub mod checkpoint;
pub mod model;
pub mod optim;
pub mod sample;
pub mod sft;
pub mod vocab;

use model::{backward, forward, logits_at, Layout, ModelDims};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};
use std::borrow::Cow;
use thiserror::Error;
use vocab::Vocabulary;

#[derive(Error)]
pub enum PolicyError {
    #[error("sequence of {len} tokens exceeds the context window of {max}")]
    Capacity { len: usize, max: usize },
    #[error("token {0:?} is not in the vocabulary")]
    UnknownToken(String),
    #[error("shape error: {0}")]
    Shape(String),
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error("training diverged (loss became non-finite) during {stage} epoch {epoch}")]
    Diverged {
        stage: String,
        epoch: usize,
        last_good: Box<PolicyParams>,
    },
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Serde(#[from] serde_json::Error),
}

impl std::fmt::Debug for PolicyError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{self}")
    }
}

/// Low-rank adapters over the attention projections (q, k, v per layer).
///
/// Factor layout in `flat`: for layer l and matrix m in {q,k,v}:
/// A (d_model x rank) followed by B (rank x d_model). The effective weight
/// is `W + (alpha/rank) * A * B`; B starts at zero so a fresh adapter is an
/// exact no-op.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterSet {
    pub rank: usize,
    pub alpha: f64,
    pub flat: Vec<f64>,
}

impl AdapterSet {
    pub fn init(dims: &ModelDims, rank: usize, alpha: f64, seed: u64) -> Self {
        let d = dims.d_model;
        let pair = 2 * d * rank;
        let mut flat = vec![0.0; dims.n_layers * 3 * pair];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let bound = 1.0 / (rank as f64).sqrt();
        for l in 0..dims.n_layers {
            for m in 0..3 {
                let off = (l * 3 + m) * pair;
                for x in flat[off..off + d * rank].iter_mut() {
                    *x = rng.gen_range(-bound..bound);
                }
                // B stays zero.
            }
        }
        Self { rank, alpha, flat }
    }

    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }

    fn pair_offset(&self, d: usize, l: usize, m: usize) -> usize {
        (l * 3 + m) * 2 * d * self.rank
    }

    /// (A, B) slices for layer l, matrix m in {0:q, 1:k, 2:v}.
    pub fn factors(&self, d: usize, l: usize, m: usize) -> (&[f64], &[f64]) {
        let off = self.pair_offset(d, l, m);
        let a_len = d * self.rank;
        (
            &self.flat[off..off + a_len],
            &self.flat[off + a_len..off + 2 * a_len],
        )
    }

    /// delta = scaling * A * B, accumulated into `w` (a d x d matrix slice).
    fn add_delta(&self, d: usize, l: usize, m: usize, w: &mut [f64]) {
        let (a, b) = self.factors(d, l, m);
        let s = self.scaling();
        let r = self.rank;
        for o in 0..d {
            for t in 0..r {
                let coef = s * a[o * r + t];
                if coef == 0.0 {
                    continue;
                }
                let brow = &b[t * d..(t + 1) * d];
                let wrow = &mut w[o * d..(o + 1) * d];
                for i in 0..d {
                    wrow[i] += coef * brow[i];
                }
            }
        }
    }
}

/// All trainable state of the policy.
#[derive(Clone, Serialize, Deserialize)]
pub struct PolicyParams {
    pub dims: ModelDims,
    pub vocab: Vocabulary,
    pub base: Vec<f64>,
    pub adapters: Option<AdapterSet>,
    /// Seeds that shaped these weights, e.g. "init:7", "sft:42".
    pub lineage: Vec<String>,
}

impl std::fmt::Debug for PolicyParams {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PolicyParams")
            .field("dims", &self.dims)
            .field("params", &self.base.len())
            .field("adapters", &self.adapters.as_ref().map(|a| a.flat.len()))
            .field("lineage", &self.lineage)
            .finish()
    }
}

impl PolicyParams {
    /// Fresh random initialization. Residual-output projections (wo, w2)
    /// get a depth-scaled smaller std so the stream starts calm while still
    /// passing gradient into the attention and MLP inputs.
    pub fn init(vocab: Vocabulary, dims: ModelDims, seed: u64) -> Result<Self, PolicyError> {
        dims.validate()?;
        if dims.vocab != vocab.len() {
            return Err(PolicyError::Shape(format!(
                "dims.vocab {} != vocabulary size {}",
                dims.vocab,
                vocab.len()
            )));
        }
        let layout = Layout::new(dims);
        let mut base = vec![0.0; layout.total()];
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let mut gauss = |std: f64, range: std::ops::Range<usize>, base: &mut Vec<f64>| {
            for x in base[range].iter_mut() {
                // Box-Muller.
                let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
                let u2: f64 = rng.gen();
                *x = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
            }
        };
        let residual_std = 0.02 / (2.0 * dims.n_layers.max(1) as f64).sqrt();
        gauss(0.02, layout.tok_emb(), &mut base);
        gauss(0.02, layout.pos_emb(), &mut base);
        for l in 0..dims.n_layers {
            gauss(0.02, layout.wq(l), &mut base);
            gauss(0.02, layout.wk(l), &mut base);
            gauss(0.02, layout.wv(l), &mut base);
            gauss(residual_std, layout.wo(l), &mut base);
            gauss(0.02, layout.w1(l), &mut base);
            gauss(residual_std, layout.w2(l), &mut base);
            // b1, b2 stay zero.
        }
        gauss(0.02, layout.w_out(), &mut base);
        Ok(Self {
            dims,
            vocab,
            base,
            adapters: None,
            lineage: vec![format!("init:{seed}")],
        })
    }

    pub fn toy(vocab: Vocabulary, seed: u64) -> Result<Self, PolicyError> {
        let dims = ModelDims::toy(vocab.len());
        Self::init(vocab, dims, seed)
    }

    pub fn param_count(&self) -> usize {
        self.base.len()
    }

    /// The vector gradients apply to: adapter factors when attached,
    /// otherwise the base weights.
    pub fn trainable(&self) -> &[f64] {
        match &self.adapters {
            Some(a) => &a.flat,
            None => &self.base,
        }
    }

    pub fn trainable_mut(&mut self) -> &mut Vec<f64> {
        match &mut self.adapters {
            Some(a) => &mut a.flat,
            None => &mut self.base,
        }
    }

    /// Effective weights with adapter deltas applied.
    pub fn materialized(&self) -> Cow<'_, [f64]> {
        match &self.adapters {
            None => Cow::Borrowed(&self.base),
            Some(ad) => {
                let layout = Layout::new(self.dims);
                let d = self.dims.d_model;
                let mut w = self.base.clone();
                for l in 0..self.dims.n_layers {
                    ad.add_delta(d, l, 0, &mut w[layout.wq(l)]);
                    ad.add_delta(d, l, 1, &mut w[layout.wk(l)]);
                    ad.add_delta(d, l, 2, &mut w[layout.wv(l)]);
                }
                Cow::Owned(w)
            }
        }
    }

    pub fn attach_adapters(&mut self, rank: usize, alpha: f64, seed: u64) {
        self.adapters = Some(AdapterSet::init(&self.dims, rank, alpha, seed));
        self.lineage.push(format!("adapters:{seed}"));
    }

    /// Fold adapter deltas into the base weights and drop the adapters.
    /// Returns false (no-op) when none are attached.
    pub fn merge_adapter(&mut self) -> bool {
        let Some(ad) = self.adapters.take() else {
            return false;
        };
        let layout = Layout::new(self.dims);
        let d = self.dims.d_model;
        for l in 0..self.dims.n_layers {
            ad.add_delta(d, l, 0, &mut self.base[layout.wq(l)]);
            ad.add_delta(d, l, 1, &mut self.base[layout.wk(l)]);
            ad.add_delta(d, l, 2, &mut self.base[layout.wv(l)]);
        }
        self.lineage.push("merge".to_string());
        true
    }

    /// Project a gradient over effective weights onto the adapter factors.
    pub fn project_adapter_grad(&self, dbase: &[f64]) -> Option<Vec<f64>> {
        let ad = self.adapters.as_ref()?;
        let layout = Layout::new(self.dims);
        let d = self.dims.d_model;
        let r = ad.rank;
        let s = ad.scaling();
        let mut out = vec![0.0; ad.flat.len()];
        for l in 0..self.dims.n_layers {
            for (m, range) in [layout.wq(l), layout.wk(l), layout.wv(l)]
                .into_iter()
                .enumerate()
            {
                let dw = &dbase[range];
                let (a, b) = ad.factors(d, l, m);
                let off = ad.pair_offset(d, l, m);
                let a_len = d * r;
                // dA[o,t] = s * sum_i dW[o,i] B[t,i is row-major t*d+i]
                for o in 0..d {
                    let dwrow = &dw[o * d..(o + 1) * d];
                    for t in 0..r {
                        out[off + o * r + t] = s * dot_slices(dwrow, &b[t * d..(t + 1) * d]);
                    }
                }
                // dB[t,i] = s * sum_o A[o,t] dW[o,i]
                for o in 0..d {
                    let dwrow = &dw[o * d..(o + 1) * d];
                    for t in 0..r {
                        let coef = s * a[o * r + t];
                        if coef == 0.0 {
                            continue;
                        }
                        let brow = &mut out[off + a_len + t * d..off + a_len + (t + 1) * d];
                        for i in 0..d {
                            brow[i] += coef * dwrow[i];
                        }
                    }
                }
            }
        }
        Some(out)
    }
}

fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Gradient of some scalar with respect to the policy's trainable vector.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub values: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(params: &PolicyParams) -> Self {
        Self {
            values: vec![0.0; params.trainable().len()],
        }
    }

    pub fn axpy(&mut self, coef: f64, other: &[f64]) {
        for (g, o) in self.values.iter_mut().zip(other) {
            *g += coef * o;
        }
    }

    pub fn scale(&mut self, coef: f64) {
        for g in self.values.iter_mut() {
            *g *= coef;
        }
    }
}

/// A forward evaluation of one segment under a prefix, keeping what the
/// backward pass needs.
pub struct SegmentEval {
    pub logp: f64,
    cache: model::ForwardCache,
    /// (position, softmax over vocab, target token) per segment token.
    steps: Vec<(usize, Vec<f64>, u32)>,
}

impl SegmentEval {
    /// Per-position softmax rows (position, probs, realized token).
    pub fn steps(&self) -> &[(usize, Vec<f64>, u32)] {
        &self.steps
    }

    /// dL/d(trainable) for L = coef * logp(segment | prefix), plus any extra
    /// per-position logit gradients (used to fuse KL terms into one pass).
    pub fn backward_scaled(
        &self,
        params: &PolicyParams,
        w: &[f64],
        coef: f64,
        extra_dlogits: &[(usize, Vec<f64>)],
    ) -> Vec<f64> {
        let mut dlogits: Vec<(usize, Vec<f64>)> = Vec::with_capacity(self.steps.len());
        for (pos, probs, target) in &self.steps {
            let mut dl: Vec<f64> = probs.iter().map(|p| -coef * p).collect();
            dl[*target as usize] += coef;
            dlogits.push((*pos, dl));
        }
        for (pos, extra) in extra_dlogits {
            match dlogits.iter_mut().find(|(p, _)| p == pos) {
                Some((_, dl)) => {
                    for (a, b) in dl.iter_mut().zip(extra) {
                        *a += b;
                    }
                }
                None => dlogits.push((*pos, extra.clone())),
            }
        }
        let dbase = backward(&params.dims, w, &self.cache, &dlogits);
        match params.project_adapter_grad(&dbase) {
            Some(da) => da,
            None => dbase,
        }
    }
}

/// Forward-evaluate log pi(segment | prefix) with materialized weights `w`.
pub fn eval_segment(
    params: &PolicyParams,
    w: &[f64],
    prefix: &[u32],
    segment: &[u32],
) -> Result<SegmentEval, PolicyError> {
    if prefix.is_empty() {
        return Err(PolicyError::Shape(
            "segment log-probability needs a non-empty prefix".into(),
        ));
    }
    let mut tokens = Vec::with_capacity(prefix.len() + segment.len());
    tokens.extend_from_slice(prefix);
    tokens.extend_from_slice(segment);
    let cache = forward(&params.dims, w, &tokens)?;
    let mut steps = Vec::with_capacity(segment.len());
    let mut logp = 0.0;
    let mut probs = vec![0.0; params.dims.vocab];
    for (j, &target) in segment.iter().enumerate() {
        let pos = prefix.len() + j - 1;
        let logits = logits_at(&params.dims, w, &cache, pos);
        model::softmax(&logits, &mut probs);
        logp += probs[target as usize].max(f64::MIN_POSITIVE).ln();
        steps.push((pos, probs.clone(), target));
    }
    Ok(SegmentEval { logp, cache, steps })
}

/// log pi(segment | prefix) under the policy's effective weights.
pub fn segment_logprob(
    params: &PolicyParams,
    prefix: &[u32],
    segment: &[u32],
) -> Result<f64, PolicyError> {
    if segment.is_empty() {
        return Ok(0.0);
    }
    let w = params.materialized();
    Ok(eval_segment(params, &w, prefix, segment)?.logp)
}

/// log pi(segment | prefix) and its gradient w.r.t. the trainable vector.
pub fn segment_logprob_with_grad(
    params: &PolicyParams,
    prefix: &[u32],
    segment: &[u32],
) -> Result<(f64, Gradients), PolicyError> {
    if segment.is_empty() {
        return Ok((0.0, Gradients::zeros_like(params)));
    }
    let w = params.materialized();
    let eval = eval_segment(params, &w, prefix, segment)?;
    let values = eval.backward_scaled(params, &w, 1.0, &[]);
    Ok((eval.logp, Gradients { values }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck;

    pub(crate) fn numbered_vocab(n: usize) -> Vocabulary {
        Vocabulary::new((0..n).map(|i| format!("a{i:02}")))
    }

    fn tiny_policy(seed: u64) -> PolicyParams {
        let vocab = numbered_vocab(8);
        let dims = ModelDims {
            vocab: vocab.len(),
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            max_context: 32,
        };
        PolicyParams::init(vocab, dims, seed).unwrap()
    }

    #[test]
    fn empty_segment_logprob_is_zero_with_zero_grad() {
        let p = tiny_policy(1);
        let (lp, g) = segment_logprob_with_grad(&p, &[1, 2], &[]).unwrap();
        assert_eq!(lp, 0.0);
        assert!(g.values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn zero_model_single_token_logprob_is_minus_ln_v() {
        let mut p = tiny_policy(2);
        p.base.iter_mut().for_each(|w| *w = 0.0);
        let lp = segment_logprob(&p, &[1], &[3]).unwrap();
        let v = p.vocab.len() as f64;
        assert!((lp + v.ln()).abs() < 1e-12);
    }

    #[test]
    fn factorization_identity() {
        // log p(a ++ b | prefix) = log p(a | prefix) + log p(b | prefix ++ a)
        let p = tiny_policy(3);
        let prefix = [1u32, 4, 2];
        let a = [3u32, 5];
        let b = [7u32, 0, 6];
        let ab: Vec<u32> = a.iter().chain(b.iter()).copied().collect();
        let lhs = segment_logprob(&p, &prefix, &ab).unwrap();
        let mut pa: Vec<u32> = prefix.to_vec();
        pa.extend_from_slice(&a);
        let rhs = segment_logprob(&p, &prefix, &a).unwrap() + segment_logprob(&p, &pa, &b).unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn segment_grad_matches_finite_differences() {
        let p = tiny_policy(4);
        let prefix = [1u32, 4];
        let segment = [3u32, 7, 2];
        let (_, g) = segment_logprob_with_grad(&p, &prefix, &segment).unwrap();
        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.base.copy_from_slice(x);
            segment_logprob(&q, &prefix, &segment).unwrap()
        };
        gradcheck::check_against_fd(&f, &p.base, &g.values, 40, 1e-4, 77).unwrap();
    }

    #[test]
    fn adapter_zero_b_is_identity_and_merge_matches() {
        let mut p = tiny_policy(5);
        let prefix = [1u32, 4];
        let seg = [3u32];
        let before = segment_logprob(&p, &prefix, &seg).unwrap();
        p.attach_adapters(4, 8.0, 11);
        let with_fresh = segment_logprob(&p, &prefix, &seg).unwrap();
        assert_eq!(before, with_fresh);

        // Randomize B so the adapter does something, then merge.
        if let Some(ad) = p.adapters.as_mut() {
            let n = ad.flat.len();
            for (i, x) in ad.flat[n / 2..].iter_mut().enumerate() {
                *x = ((i % 13) as f64 - 6.0) * 0.01;
            }
        }
        let adapted = segment_logprob(&p, &prefix, &seg).unwrap();
        let base_before = p.base.clone();
        assert!(p.merge_adapter());
        assert!(p.adapters.is_none());
        let merged = segment_logprob(&p, &prefix, &seg).unwrap();
        assert!((adapted - merged).abs() < 1e-6);
        assert_ne!(base_before, p.base);
        assert!(!p.merge_adapter());
    }

    #[test]
    fn adapter_grad_matches_finite_differences() {
        let mut p = tiny_policy(6);
        p.attach_adapters(3, 6.0, 21);
        // Give B nonzero values so gradients flow through both factors.
        if let Some(ad) = p.adapters.as_mut() {
            let n = ad.flat.len();
            for (i, x) in ad.flat[n / 2..].iter_mut().enumerate() {
                *x = ((i % 7) as f64 - 3.0) * 0.02;
            }
        }
        let prefix = [2u32, 5];
        let segment = [1u32, 6];
        let (_, g) = segment_logprob_with_grad(&p, &prefix, &segment).unwrap();
        assert_eq!(g.values.len(), p.adapters.as_ref().unwrap().flat.len());
        let f = |x: &[f64]| {
            let mut q = p.clone();
            q.adapters.as_mut().unwrap().flat.copy_from_slice(x);
            segment_logprob(&q, &prefix, &segment).unwrap()
        };
        gradcheck::check_against_fd(&f, &p.adapters.as_ref().unwrap().flat, &g.values, 40, 1e-4, 78)
            .unwrap();
    }

    #[test]
    fn adapter_scaling_is_alpha_over_rank() {
        // With A x B fixed, the effective delta must be (alpha/rank) A B.
        let mut p = tiny_policy(7);
        let layout = Layout::new(p.dims);
        p.attach_adapters(2, 8.0, 3);
        let d = p.dims.d_model;
        if let Some(ad) = p.adapters.as_mut() {
            ad.flat.iter_mut().for_each(|x| *x = 0.0);
            // A[0,0] = 1, B[0,0] = 1 for layer 0 wq.
            ad.flat[0] = 1.0;
            let a_len = d * ad.rank;
            ad.flat[a_len] = 1.0;
        }
        let w = p.materialized();
        let wq = &w[layout.wq(0)];
        let base_wq = &p.base[layout.wq(0)];
        let delta = wq[0] - base_wq[0];
        assert!((delta - 8.0 / 2.0).abs() < 1e-12);
    }
}
