//! The toy causal sequence model: a small pre-norm transformer over a flat
//! f64 parameter vector, with hand-written reverse-mode gradients and an
//! incremental KV-cache decoder.
//!
//! Everything is f64 so analytic gradients can be checked against central
//! finite differences to tight tolerances.

use serde::{Deserialize, Serialize};

use crate::policy::PolicyError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub vocab: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub max_context: usize,
}

impl ModelDims {
    pub fn toy(vocab: usize) -> Self {
        Self {
            vocab,
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 256,
            max_context: 1024,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<(), PolicyError> {
        if self.d_model % self.n_heads != 0 {
            return Err(PolicyError::Shape(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }
}

/// Offsets into the flat parameter vector. Matrices are row-major with
/// shape (out, in): y[o] = sum_i w[o*in + i] * x[i].
#[derive(Debug, Clone, Copy)]
pub struct Layout {
    dims: ModelDims,
    layer_stride: usize,
    layers_start: usize,
    out_start: usize,
    total: usize,
}

impl Layout {
    pub fn new(dims: ModelDims) -> Self {
        let d = dims.d_model;
        let f = dims.d_ff;
        // per layer: wq, wk, wv, wo (d*d each), w1 (f*d), b1 (f), w2 (d*f), b2 (d)
        let layer_stride = 4 * d * d + f * d + f + d * f + d;
        let layers_start = dims.vocab * d + dims.max_context * d;
        let out_start = layers_start + dims.n_layers * layer_stride;
        let total = out_start + dims.vocab * d;
        Self {
            dims,
            layer_stride,
            layers_start,
            out_start,
            total,
        }
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn tok_emb(&self) -> std::ops::Range<usize> {
        0..self.dims.vocab * self.dims.d_model
    }

    pub fn pos_emb(&self) -> std::ops::Range<usize> {
        let s = self.dims.vocab * self.dims.d_model;
        s..s + self.dims.max_context * self.dims.d_model
    }

    fn layer(&self, l: usize) -> usize {
        self.layers_start + l * self.layer_stride
    }

    pub fn wq(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let s = self.layer(l);
        s..s + d * d
    }

    pub fn wk(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let s = self.layer(l) + d * d;
        s..s + d * d
    }

    pub fn wv(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let s = self.layer(l) + 2 * d * d;
        s..s + d * d
    }

    pub fn wo(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let s = self.layer(l) + 3 * d * d;
        s..s + d * d
    }

    pub fn w1(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let f = self.dims.d_ff;
        let s = self.layer(l) + 4 * d * d;
        s..s + f * d
    }

    pub fn b1(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let f = self.dims.d_ff;
        let s = self.layer(l) + 4 * d * d + f * d;
        s..s + f
    }

    pub fn w2(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let f = self.dims.d_ff;
        let s = self.layer(l) + 4 * d * d + f * d + f;
        s..s + d * f
    }

    pub fn b2(&self, l: usize) -> std::ops::Range<usize> {
        let d = self.dims.d_model;
        let f = self.dims.d_ff;
        let s = self.layer(l) + 4 * d * d + f * d + f + d * f;
        s..s + d
    }

    pub fn w_out(&self) -> std::ops::Range<usize> {
        self.out_start..self.out_start + self.dims.vocab * self.dims.d_model
    }
}

const RMS_EPS: f64 = 1e-6;

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// out[o] = sum_i w[o*cols+i] * x[i]
#[inline]
fn matvec(w: &[f64], x: &[f64], out: &mut [f64], rows: usize, cols: usize) {
    for o in 0..rows {
        out[o] = dot(&w[o * cols..(o + 1) * cols], x);
    }
}

/// dx[i] += sum_o dy[o] * w[o*cols+i]
#[inline]
fn matvec_t_acc(w: &[f64], dy: &[f64], dx: &mut [f64], rows: usize, cols: usize) {
    for o in 0..rows {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        let row = &w[o * cols..(o + 1) * cols];
        for i in 0..cols {
            dx[i] += g * row[i];
        }
    }
}

/// dw[o*cols+i] += dy[o] * x[i]
#[inline]
fn outer_acc(dw: &mut [f64], dy: &[f64], x: &[f64], rows: usize, cols: usize) {
    for o in 0..rows {
        let g = dy[o];
        if g == 0.0 {
            continue;
        }
        let row = &mut dw[o * cols..(o + 1) * cols];
        for i in 0..cols {
            row[i] += g * x[i];
        }
    }
}

#[inline]
fn rmsnorm(x: &[f64], out: &mut [f64]) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + RMS_EPS).sqrt();
    for (o, v) in out.iter_mut().zip(x) {
        *o = v * inv;
    }
    inv
}

/// dx = inv*dy - (inv^3/n) * (dy . x) * x
#[inline]
fn rmsnorm_bwd_acc(dy: &[f64], x: &[f64], inv: f64, dx: &mut [f64]) {
    let n = x.len() as f64;
    let d = dot(dy, x) * inv * inv * inv / n;
    for i in 0..x.len() {
        dx[i] += inv * dy[i] - d * x[i];
    }
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

#[inline]
fn silu_grad(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// Numerically stable log-softmax written into `out`; returns logsumexp.
pub fn log_softmax(logits: &[f64], out: &mut [f64]) -> f64 {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    for (o, v) in out.iter_mut().zip(logits) {
        *o = v - lse;
    }
    lse
}

/// Stable softmax into `out`.
pub fn softmax(logits: &[f64], out: &mut [f64]) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, v) in out.iter_mut().zip(logits) {
        *o = (v - m).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

struct LayerCache {
    ln1_x: Vec<f64>,
    ln1_inv: Vec<f64>,
    q: Vec<f64>,
    k: Vec<f64>,
    v: Vec<f64>,
    attw: Vec<f64>, // n_heads * t * t, query-major, zeros above the diagonal
    att_mix: Vec<f64>,
    x_after_attn: Vec<f64>,
    ln2_x: Vec<f64>,
    ln2_inv: Vec<f64>,
    ff_pre: Vec<f64>,
    ff_act: Vec<f64>,
    x_after_ff: Vec<f64>,
}

/// Full-sequence forward activations, kept for the backward pass.
pub struct ForwardCache {
    pub tokens: Vec<u32>,
    t: usize,
    x0: Vec<f64>,
    layers: Vec<LayerCache>,
    final_x: Vec<f64>,
    final_inv: Vec<f64>,
}

impl ForwardCache {
    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Final normed hidden state at a position (the representation the
    /// output head and the value head read).
    pub fn hidden_at(&self, pos: usize, d: usize) -> &[f64] {
        &self.final_x[pos * d..(pos + 1) * d]
    }
}

/// Run the full forward pass, caching activations.
pub fn forward(dims: &ModelDims, w: &[f64], tokens: &[u32]) -> Result<ForwardCache, PolicyError> {
    let t_len = tokens.len();
    if t_len > dims.max_context {
        return Err(PolicyError::Capacity {
            len: t_len,
            max: dims.max_context,
        });
    }
    let layout = Layout::new(*dims);
    let d = dims.d_model;
    let f = dims.d_ff;
    let h = dims.n_heads;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let tok_emb = &w[layout.tok_emb()];
    let pos_emb = &w[layout.pos_emb()];

    let mut x0 = vec![0.0; t_len * d];
    for (t, &tok) in tokens.iter().enumerate() {
        let e = &tok_emb[tok as usize * d..(tok as usize + 1) * d];
        let p = &pos_emb[t * d..(t + 1) * d];
        for i in 0..d {
            x0[t * d + i] = e[i] + p[i];
        }
    }

    let mut layers = Vec::with_capacity(dims.n_layers);
    let mut x_in = x0.clone();
    for l in 0..dims.n_layers {
        let wq = &w[layout.wq(l)];
        let wk = &w[layout.wk(l)];
        let wv = &w[layout.wv(l)];
        let wo = &w[layout.wo(l)];
        let w1 = &w[layout.w1(l)];
        let b1 = &w[layout.b1(l)];
        let w2 = &w[layout.w2(l)];
        let b2 = &w[layout.b2(l)];

        let mut ln1_x = vec![0.0; t_len * d];
        let mut ln1_inv = vec![0.0; t_len];
        let mut q = vec![0.0; t_len * d];
        let mut k = vec![0.0; t_len * d];
        let mut v = vec![0.0; t_len * d];
        for t in 0..t_len {
            ln1_inv[t] = rmsnorm(&x_in[t * d..(t + 1) * d], &mut ln1_x[t * d..(t + 1) * d]);
            let xn = &ln1_x[t * d..(t + 1) * d];
            matvec(wq, xn, &mut q[t * d..(t + 1) * d], d, d);
            matvec(wk, xn, &mut k[t * d..(t + 1) * d], d, d);
            matvec(wv, xn, &mut v[t * d..(t + 1) * d], d, d);
        }

        let mut attw = vec![0.0; h * t_len * t_len];
        let mut att_mix = vec![0.0; t_len * d];
        let mut scores = vec![0.0; t_len];
        for head in 0..h {
            let off = head * dh;
            for t in 0..t_len {
                let qh = &q[t * d + off..t * d + off + dh];
                for j in 0..=t {
                    scores[j] = dot(qh, &k[j * d + off..j * d + off + dh]) * scale;
                }
                let row = &mut attw[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
                softmax(&scores[..=t], row);
                let mix = &mut att_mix[t * d + off..t * d + off + dh];
                for j in 0..=t {
                    let a = row[j];
                    let vh = &v[j * d + off..j * d + off + dh];
                    for i in 0..dh {
                        mix[i] += a * vh[i];
                    }
                }
            }
        }

        let mut x_after_attn = vec![0.0; t_len * d];
        let mut attn_out = vec![0.0; d];
        for t in 0..t_len {
            matvec(wo, &att_mix[t * d..(t + 1) * d], &mut attn_out, d, d);
            for i in 0..d {
                x_after_attn[t * d + i] = x_in[t * d + i] + attn_out[i];
            }
        }

        let mut ln2_x = vec![0.0; t_len * d];
        let mut ln2_inv = vec![0.0; t_len];
        let mut ff_pre = vec![0.0; t_len * f];
        let mut ff_act = vec![0.0; t_len * f];
        let mut x_after_ff = vec![0.0; t_len * d];
        let mut mlp_out = vec![0.0; d];
        for t in 0..t_len {
            ln2_inv[t] = rmsnorm(
                &x_after_attn[t * d..(t + 1) * d],
                &mut ln2_x[t * d..(t + 1) * d],
            );
            let pre = &mut ff_pre[t * f..(t + 1) * f];
            matvec(w1, &ln2_x[t * d..(t + 1) * d], pre, f, d);
            for i in 0..f {
                pre[i] += b1[i];
                ff_act[t * f + i] = silu(pre[i]);
            }
            matvec(w2, &ff_act[t * f..(t + 1) * f], &mut mlp_out, d, f);
            for i in 0..d {
                x_after_ff[t * d + i] = x_after_attn[t * d + i] + mlp_out[i] + b2[i];
            }
        }

        layers.push(LayerCache {
            ln1_x,
            ln1_inv,
            q,
            k,
            v,
            attw,
            att_mix,
            x_after_attn,
            ln2_x,
            ln2_inv,
            ff_pre,
            ff_act,
            x_after_ff: x_after_ff.clone(),
        });
        x_in = x_after_ff;
    }

    let mut final_x = vec![0.0; t_len * d];
    let mut final_inv = vec![0.0; t_len];
    for t in 0..t_len {
        final_inv[t] = rmsnorm(&x_in[t * d..(t + 1) * d], &mut final_x[t * d..(t + 1) * d]);
    }

    Ok(ForwardCache {
        tokens: tokens.to_vec(),
        t: t_len,
        x0,
        layers,
        final_x,
        final_inv,
    })
}

/// Logits at one position.
pub fn logits_at(dims: &ModelDims, w: &[f64], cache: &ForwardCache, pos: usize) -> Vec<f64> {
    let layout = Layout::new(*dims);
    let d = dims.d_model;
    let mut out = vec![0.0; dims.vocab];
    matvec(
        &w[layout.w_out()],
        cache.hidden_at(pos, d),
        &mut out,
        dims.vocab,
        d,
    );
    out
}

/// Backward pass from per-position logit gradients.
///
/// `dlogits` maps positions to dL/dlogits at that position; positions not
/// listed contribute nothing. Returns dL/dw over the whole flat vector.
pub fn backward(
    dims: &ModelDims,
    w: &[f64],
    cache: &ForwardCache,
    dlogits: &[(usize, Vec<f64>)],
) -> Vec<f64> {
    let layout = Layout::new(*dims);
    let d = dims.d_model;
    let f = dims.d_ff;
    let h = dims.n_heads;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();
    let t_len = cache.t;

    let mut grad = vec![0.0; layout.total()];

    // Output head and final norm.
    let w_out = &w[layout.w_out()];
    let mut d_final = vec![0.0; t_len * d];
    {
        let g_out = &mut grad[layout.w_out()];
        for (pos, dl) in dlogits {
            let hvec = cache.hidden_at(*pos, d);
            outer_acc(g_out, dl, hvec, dims.vocab, d);
            matvec_t_acc(w_out, dl, &mut d_final[pos * d..(pos + 1) * d], dims.vocab, d);
        }
    }

    // dx flowing into the top of the layer stack.
    let mut dx = vec![0.0; t_len * d];
    let top_x = if dims.n_layers == 0 {
        &cache.x0
    } else {
        &cache.layers[dims.n_layers - 1].x_after_ff
    };
    for t in 0..t_len {
        rmsnorm_bwd_acc(
            &d_final[t * d..(t + 1) * d],
            &top_x[t * d..(t + 1) * d],
            cache.final_inv[t],
            &mut dx[t * d..(t + 1) * d],
        );
    }

    for l in (0..dims.n_layers).rev() {
        let lc = &cache.layers[l];
        let x_in: &[f64] = if l == 0 {
            &cache.x0
        } else {
            &cache.layers[l - 1].x_after_ff
        };
        let wq = &w[layout.wq(l)];
        let wk = &w[layout.wk(l)];
        let wv = &w[layout.wv(l)];
        let wo = &w[layout.wo(l)];
        let w1 = &w[layout.w1(l)];
        let w2 = &w[layout.w2(l)];

        // MLP block. dx is dL/d(x_after_ff). Residual: dx flows to
        // x_after_attn directly plus through the MLP.
        let mut dx_attn = dx.clone();
        {
            let mut dff_act = vec![0.0; f];
            let mut dff_pre = vec![0.0; f];
            let mut dln2 = vec![0.0; d];
            for t in 0..t_len {
                let dmlp = &dx[t * d..(t + 1) * d];
                {
                    let gb2 = &mut grad[layout.b2(l)];
                    for i in 0..d {
                        gb2[i] += dmlp[i];
                    }
                }
                outer_acc(
                    &mut grad[layout.w2(l)],
                    dmlp,
                    &lc.ff_act[t * f..(t + 1) * f],
                    d,
                    f,
                );
                dff_act.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(w2, dmlp, &mut dff_act, d, f);
                for i in 0..f {
                    dff_pre[i] = dff_act[i] * silu_grad(lc.ff_pre[t * f + i]);
                }
                {
                    let gb1 = &mut grad[layout.b1(l)];
                    for i in 0..f {
                        gb1[i] += dff_pre[i];
                    }
                }
                outer_acc(
                    &mut grad[layout.w1(l)],
                    &dff_pre,
                    &lc.ln2_x[t * d..(t + 1) * d],
                    f,
                    d,
                );
                dln2.iter_mut().for_each(|v| *v = 0.0);
                matvec_t_acc(w1, &dff_pre, &mut dln2, f, d);
                rmsnorm_bwd_acc(
                    &dln2,
                    &lc.x_after_attn[t * d..(t + 1) * d],
                    lc.ln2_inv[t],
                    &mut dx_attn[t * d..(t + 1) * d],
                );
            }
        }

        // Attention block. dx_attn is dL/d(x_after_attn); residual splits
        // into the input and the attention output.
        let mut dxi = dx_attn.clone();
        let mut dmix = vec![0.0; t_len * d];
        for t in 0..t_len {
            outer_acc(
                &mut grad[layout.wo(l)],
                &dx_attn[t * d..(t + 1) * d],
                &lc.att_mix[t * d..(t + 1) * d],
                d,
                d,
            );
            matvec_t_acc(
                wo,
                &dx_attn[t * d..(t + 1) * d],
                &mut dmix[t * d..(t + 1) * d],
                d,
                d,
            );
        }

        let mut dq = vec![0.0; t_len * d];
        let mut dk = vec![0.0; t_len * d];
        let mut dv = vec![0.0; t_len * d];
        let mut da = vec![0.0; t_len];
        let mut dscore = vec![0.0; t_len];
        for head in 0..h {
            let off = head * dh;
            for t in 0..t_len {
                let row = &lc.attw[(head * t_len + t) * t_len..(head * t_len + t) * t_len + t + 1];
                let dm = &dmix[t * d + off..t * d + off + dh];
                let mut inner = 0.0;
                for j in 0..=t {
                    da[j] = dot(dm, &lc.v[j * d + off..j * d + off + dh]);
                    inner += row[j] * da[j];
                    let dvj = &mut dv[j * d + off..j * d + off + dh];
                    for i in 0..dh {
                        dvj[i] += row[j] * dm[i];
                    }
                }
                for j in 0..=t {
                    dscore[j] = row[j] * (da[j] - inner) * scale;
                }
                let qh = &lc.q[t * d + off..t * d + off + dh];
                let dqh = &mut dq[t * d + off..t * d + off + dh];
                for j in 0..=t {
                    let s = dscore[j];
                    if s == 0.0 {
                        continue;
                    }
                    let kh = &lc.k[j * d + off..j * d + off + dh];
                    for i in 0..dh {
                        dqh[i] += s * kh[i];
                    }
                    let dkh = &mut dk[j * d + off..j * d + off + dh];
                    for i in 0..dh {
                        dkh[i] += s * qh[i];
                    }
                }
            }
        }

        let mut dln1 = vec![0.0; d];
        for t in 0..t_len {
            let xn = &lc.ln1_x[t * d..(t + 1) * d];
            outer_acc(&mut grad[layout.wq(l)], &dq[t * d..(t + 1) * d], xn, d, d);
            outer_acc(&mut grad[layout.wk(l)], &dk[t * d..(t + 1) * d], xn, d, d);
            outer_acc(&mut grad[layout.wv(l)], &dv[t * d..(t + 1) * d], xn, d, d);
            dln1.iter_mut().for_each(|v| *v = 0.0);
            matvec_t_acc(wq, &dq[t * d..(t + 1) * d], &mut dln1, d, d);
            matvec_t_acc(wk, &dk[t * d..(t + 1) * d], &mut dln1, d, d);
            matvec_t_acc(wv, &dv[t * d..(t + 1) * d], &mut dln1, d, d);
            rmsnorm_bwd_acc(
                &dln1,
                &x_in[t * d..(t + 1) * d],
                lc.ln1_inv[t],
                &mut dxi[t * d..(t + 1) * d],
            );
        }
        dx = dxi;
    }

    // Embeddings.
    for (t, &tok) in cache.tokens.iter().enumerate() {
        let dxt = &dx[t * d..(t + 1) * d];
        let te = &mut grad[layout.tok_emb()][tok as usize * d..(tok as usize + 1) * d];
        for i in 0..d {
            te[i] += dxt[i];
        }
        let pe = &mut grad[layout.pos_emb()][t * d..(t + 1) * d];
        for i in 0..d {
            pe[i] += dxt[i];
        }
    }

    grad
}

/// Incremental decoder state: per-layer K/V caches.
pub struct DecodeState {
    t: usize,
    k: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl DecodeState {
    pub fn new(dims: &ModelDims) -> Self {
        Self {
            t: 0,
            k: vec![Vec::new(); dims.n_layers],
            v: vec![Vec::new(); dims.n_layers],
        }
    }

    pub fn len(&self) -> usize {
        self.t
    }

    pub fn is_empty(&self) -> bool {
        self.t == 0
    }

    /// Rewind to a shorter prefix. Used to fork candidate samples off a
    /// shared prefix without copying the cache.
    pub fn truncate(&mut self, dims: &ModelDims, len: usize) {
        assert!(len <= self.t);
        self.t = len;
        for l in 0..self.k.len() {
            self.k[l].truncate(len * dims.d_model);
            self.v[l].truncate(len * dims.d_model);
        }
    }
}

/// Advance the decoder by one token; returns the final normed hidden state.
/// Use [`head_logits`] to project it when logits are needed.
pub fn decode_step(
    dims: &ModelDims,
    w: &[f64],
    state: &mut DecodeState,
    token: u32,
) -> Result<Vec<f64>, PolicyError> {
    let t = state.t;
    if t >= dims.max_context {
        return Err(PolicyError::Capacity {
            len: t + 1,
            max: dims.max_context,
        });
    }
    let layout = Layout::new(*dims);
    let d = dims.d_model;
    let f = dims.d_ff;
    let h = dims.n_heads;
    let dh = dims.head_dim();
    let scale = 1.0 / (dh as f64).sqrt();

    let mut x = vec![0.0; d];
    {
        let te = &w[layout.tok_emb()][token as usize * d..(token as usize + 1) * d];
        let pe = &w[layout.pos_emb()][t * d..(t + 1) * d];
        for i in 0..d {
            x[i] = te[i] + pe[i];
        }
    }

    let mut xn = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut buf = vec![0.0; d.max(f)];
    for l in 0..dims.n_layers {
        rmsnorm(&x, &mut xn);
        matvec(&w[layout.wq(l)], &xn, &mut q, d, d);
        let klen = state.k[l].len();
        state.k[l].resize(klen + d, 0.0);
        state.v[l].resize(klen + d, 0.0);
        {
            let (ks, vs) = (&mut state.k[l], &mut state.v[l]);
            let mut kt = vec![0.0; d];
            let mut vt = vec![0.0; d];
            matvec(&w[layout.wk(l)], &xn, &mut kt, d, d);
            matvec(&w[layout.wv(l)], &xn, &mut vt, d, d);
            ks[klen..].copy_from_slice(&kt);
            vs[klen..].copy_from_slice(&vt);
        }

        let mut mix = vec![0.0; d];
        let mut scores = vec![0.0; t + 1];
        for head in 0..h {
            let off = head * dh;
            let qh = &q[off..off + dh];
            for j in 0..=t {
                scores[j] = dot(qh, &state.k[l][j * d + off..j * d + off + dh]) * scale;
            }
            let mut probs = vec![0.0; t + 1];
            softmax(&scores, &mut probs);
            for j in 0..=t {
                let a = probs[j];
                let vh = &state.v[l][j * d + off..j * d + off + dh];
                for i in 0..dh {
                    mix[off + i] += a * vh[i];
                }
            }
        }
        matvec(&w[layout.wo(l)], &mix, &mut buf[..d], d, d);
        for i in 0..d {
            x[i] += buf[i];
        }

        rmsnorm(&x, &mut xn);
        let mut pre = vec![0.0; f];
        matvec(&w[layout.w1(l)], &xn, &mut pre, f, d);
        let b1 = &w[layout.b1(l)];
        for i in 0..f {
            pre[i] = silu(pre[i] + b1[i]);
        }
        matvec(&w[layout.w2(l)], &pre, &mut buf[..d], d, f);
        let b2 = &w[layout.b2(l)];
        for i in 0..d {
            x[i] += buf[i] + b2[i];
        }
    }

    let mut y = vec![0.0; d];
    rmsnorm(&x, &mut y);
    state.t += 1;
    Ok(y)
}

/// Project a final hidden state to vocabulary logits.
pub fn head_logits(dims: &ModelDims, w: &[f64], hidden: &[f64]) -> Vec<f64> {
    let layout = Layout::new(*dims);
    let mut out = vec![0.0; dims.vocab];
    matvec(&w[layout.w_out()], hidden, &mut out, dims.vocab, dims.d_model);
    out
}

/// Feed a token span through the decoder, returning the last hidden state.
pub fn prime(
    dims: &ModelDims,
    w: &[f64],
    state: &mut DecodeState,
    tokens: &[u32],
) -> Result<Vec<f64>, PolicyError> {
    let mut last = Vec::new();
    for &tok in tokens {
        last = decode_step(dims, w, state, tok)?;
    }
    Ok(last)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    fn tiny_dims() -> ModelDims {
        ModelDims {
            vocab: 11,
            d_model: 16,
            n_heads: 2,
            n_layers: 2,
            d_ff: 24,
            max_context: 32,
        }
    }

    fn random_params(dims: &ModelDims, seed: u64) -> Vec<f64> {
        let layout = Layout::new(*dims);
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        (0..layout.total()).map(|_| rng.gen_range(-0.2..0.2)).collect()
    }

    #[test]
    fn zero_params_give_uniform_logits() {
        let dims = tiny_dims();
        let layout = Layout::new(dims);
        let w = vec![0.0; layout.total()];
        let cache = forward(&dims, &w, &[1, 2, 3]).unwrap();
        let logits = logits_at(&dims, &w, &cache, 2);
        assert!(logits.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn decode_matches_full_forward() {
        let dims = tiny_dims();
        let w = random_params(&dims, 3);
        let tokens = [4u32, 7, 1, 9, 2, 2, 5];
        let cache = forward(&dims, &w, &tokens).unwrap();

        let mut state = DecodeState::new(&dims);
        for (t, &tok) in tokens.iter().enumerate() {
            let hidden = decode_step(&dims, &w, &mut state, tok).unwrap();
            let full = cache.hidden_at(t, dims.d_model);
            for (a, b) in hidden.iter().zip(full) {
                assert!((a - b).abs() < 1e-12, "pos {t}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn decode_truncate_rewinds_exactly() {
        let dims = tiny_dims();
        let w = random_params(&dims, 5);
        let mut state = DecodeState::new(&dims);
        prime(&dims, &w, &mut state, &[1, 2, 3]).unwrap();
        let before = prime(&dims, &w, &mut state, &[4]).unwrap();
        state.truncate(&dims, 3);
        let again = prime(&dims, &w, &mut state, &[4]).unwrap();
        assert_eq!(before, again);
    }

    #[test]
    fn context_overflow_is_capacity_error() {
        let dims = ModelDims {
            max_context: 4,
            ..tiny_dims()
        };
        let w = random_params(&dims, 1);
        assert!(matches!(
            forward(&dims, &w, &[0, 1, 2, 3, 4]),
            Err(PolicyError::Capacity { .. })
        ));
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let dims = tiny_dims();
        let w = random_params(&dims, 8);
        let cache = forward(&dims, &w, &[1, 2, 3, 4, 5]).unwrap();
        for l in 0..dims.n_layers {
            let lc = &cache.layers[l];
            for head in 0..dims.n_heads {
                for t in 0..cache.t {
                    let row =
                        &lc.attw[(head * cache.t + t) * cache.t..(head * cache.t + t) * cache.t + t + 1];
                    let s: f64 = row.iter().sum();
                    assert!((s - 1.0).abs() < 1e-9);
                }
            }
        }
    }

    /// Backward against central finite differences on a scalar loss that
    /// touches several positions (sum of selected logits).
    #[test]
    fn backward_matches_finite_differences() {
        let dims = tiny_dims();
        let w = random_params(&dims, 13);
        let tokens = [3u32, 1, 4, 1, 5, 9];

        let loss = |w: &[f64]| -> f64 {
            let cache = forward(&dims, w, &tokens).unwrap();
            let l2 = logits_at(&dims, w, &cache, 2);
            let l5 = logits_at(&dims, w, &cache, 5);
            l2[7] + 2.0 * l5[0] - 0.5 * l5[10]
        };

        let cache = forward(&dims, &w, &tokens).unwrap();
        let mut d2 = vec![0.0; dims.vocab];
        d2[7] = 1.0;
        let mut d5 = vec![0.0; dims.vocab];
        d5[0] = 2.0;
        d5[10] = -0.5;
        let grad = backward(&dims, &w, &cache, &[(2, d2), (5, d5)]);

        let mut rng = ChaCha12Rng::seed_from_u64(99);
        let layout = Layout::new(dims);
        for _ in 0..60 {
            let i = rng.gen_range(0..layout.total());
            let h = 1e-5;
            let mut wp = w.clone();
            wp[i] += h;
            let fp = loss(&wp);
            wp[i] -= 2.0 * h;
            let fm = loss(&wp);
            let fd = (fp - fm) / (2.0 * h);
            let err = (grad[i] - fd).abs() / (grad[i].abs() + fd.abs()).max(1e-3);
            assert!(err < 1e-4, "param {i}: analytic {} vs fd {}", grad[i], fd);
        }
    }
}
