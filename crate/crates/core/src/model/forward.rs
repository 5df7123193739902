use serde::{Deserialize, Serialize};

use super::{TinyLM, NORM_EPS, ROPE_BASE};
use crate::linalg::{dot, vec_mat_into, Matrix, Vector};

/// Activations of the last input position, which is the one whose
/// next-token prediction can fail.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ForwardTrace {
    pub tokens: Vec<usize>,
    /// Embedding rows `X_i` of every input position.
    pub input_embeddings: Vec<Vector>,
    /// Normalized input to each FFN (the rows fed to `ffn_w1`).
    pub ffn_input: Vec<Vector>,
    /// Post-GELU FFN intermediate `v`, the input of `ffn_w2`.
    pub ffn_intermediate: Vec<Vector>,
    pub block_output: Vec<Vector>,
    /// Final-normalized representation `r`; `logits = r · lm_head`.
    pub representation: Vector,
    pub logits: Vector,
    pub probabilities: Vector,
    pub disabled_layer: Option<usize>,
    pub model_version: u64,
}

impl ForwardTrace {
    pub fn argmax(&self) -> usize {
        argmax(&self.probabilities)
    }

    pub fn prob(&self, token: usize) -> f64 {
        self.probabilities[token]
    }

    pub fn loss(&self, target: usize) -> f64 {
        -self.probabilities[target].max(f64::MIN_POSITIVE).ln()
    }

    /// `p_target − p_argmax`; zero exactly when the target is (tied for) argmax.
    pub fn gap(&self, target: usize) -> f64 {
        crate::evaluate::gap(&self.probabilities, target)
    }
}

/// First index of the maximum; ties resolve to the lowest id.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut p: Vec<f64> = logits.iter().map(|l| (l - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[inline]
pub(crate) fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

/// RMS normalization of one row; returns the reciprocal RMS.
#[inline]
pub(crate) fn rms_norm(x: &[f64], gain: &[f64], out: &mut [f64]) -> f64 {
    let ms = dot(x, x) / x.len() as f64;
    let inv = 1.0 / (ms + NORM_EPS).sqrt();
    for ((o, xi), g) in out.iter_mut().zip(x).zip(gain) {
        *o = xi * inv * g;
    }
    inv
}

/// Rotates coordinate pairs of every head in `row` by position `pos`.
/// `inverse` applies the transpose rotation (used by the backward pass).
pub(crate) fn rope(row: &mut [f64], pos: usize, head_dim: usize, inverse: bool) {
    let half = head_dim / 2;
    for head in row.chunks_mut(head_dim) {
        for i in 0..half {
            let theta = pos as f64 / ROPE_BASE.powf(2.0 * i as f64 / head_dim as f64);
            let (s, c) = theta.sin_cos();
            let s = if inverse { -s } else { s };
            let a = head[2 * i];
            let b = head[2 * i + 1];
            head[2 * i] = a * c - b * s;
            head[2 * i + 1] = a * s + b * c;
        }
    }
}

/// Per-layer activations for every position (row-major, T rows).
#[derive(Clone, Debug)]
pub(crate) struct LayerCache {
    pub disabled: bool,
    pub x_in: Matrix,
    pub inv_rms1: Vec<f64>,
    pub h1: Matrix,
    /// rotated queries and keys
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
    /// heads × T × T attention probabilities (causal, upper triangle zero)
    pub att: Vec<f64>,
    pub ctx: Matrix,
    pub x_mid: Matrix,
    pub inv_rms2: Vec<f64>,
    pub h2: Matrix,
    pub pre: Matrix,
    pub act: Matrix,
    pub x_out: Matrix,
}

#[derive(Clone, Debug)]
pub(crate) struct Cache {
    pub tokens: Vec<usize>,
    pub disabled: Option<usize>,
    pub layers: Vec<LayerCache>,
    pub x_final: Matrix,
    pub inv_rms_f: Vec<f64>,
    pub r: Matrix,
    pub logits: Matrix,
}

impl Cache {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn last_probs(&self) -> Vec<f64> {
        softmax(self.logits.row(self.len() - 1))
    }

    fn embedding_row(&self, model: &TinyLM, i: usize) -> Vector {
        model.params().embedding.row(self.tokens[i]).to_vec().into()
    }

    pub fn trace(&self, model: &TinyLM) -> ForwardTrace {
        let t = self.len() - 1;
        let probs = self.last_probs();
        ForwardTrace {
            tokens: self.tokens.clone(),
            input_embeddings: (0..self.len())
                .map(|i| self.embedding_row(model, i))
                .collect(),
            ffn_input: self.layers.iter().map(|l| l.h2.row(t).to_vec().into()).collect(),
            ffn_intermediate: self
                .layers
                .iter()
                .map(|l| l.act.row(t).to_vec().into())
                .collect(),
            block_output: self
                .layers
                .iter()
                .map(|l| l.x_out.row(t).to_vec().into())
                .collect(),
            representation: self.r.row(t).to_vec().into(),
            logits: self.logits.row(t).to_vec().into(),
            probabilities: probs.into(),
            disabled_layer: self.disabled,
            model_version: model.version(),
            }
    }
}

/// Full forward pass over `tokens`, caching everything the backward pass
/// needs. Callers validate tokens.
pub(crate) fn forward_cache(model: &TinyLM, tokens: &[usize], disabled: Option<usize>) -> Cache {
    let cfg = model.config();
    let p = model.params();
    let n = tokens.len();
    let d = cfg.d_model;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();

    let mut x = Matrix::zeros(n, d);
    for (t, &tok) in tokens.iter().enumerate() {
        x.row_mut(t).copy_from_slice(p.embedding.row(tok));
    }

    let mut layers = Vec::with_capacity(cfg.n_layers);
    for (li, b) in p.blocks.iter().enumerate() {
        if disabled == Some(li) {
            layers.push(LayerCache {
                disabled: true,
                x_in: x.clone(),
                inv_rms1: Vec::new(),
                h1: Matrix::zeros(0, 0),
                q: Matrix::zeros(0, 0),
                k: Matrix::zeros(0, 0),
                v: Matrix::zeros(0, 0),
                att: Vec::new(),
                ctx: Matrix::zeros(0, 0),
                x_mid: x.clone(),
                inv_rms2: Vec::new(),
                h2: Matrix::zeros(n, d),
                pre: Matrix::zeros(n, cfg.d_ffn),
                act: Matrix::zeros(n, cfg.d_ffn),
                x_out: x.clone(),
            });
            continue;
        }
        let x_in = x;
        let mut h1 = Matrix::zeros(n, d);
        let mut inv_rms1 = vec![0.0; n];
        let mut q = Matrix::zeros(n, d);
        let mut k = Matrix::zeros(n, d);
        let mut v = Matrix::zeros(n, d);
        for t in 0..n {
            inv_rms1[t] = rms_norm(x_in.row(t), &b.attn_norm, h1.row_mut(t));
            vec_mat_into(h1.row(t), &b.wq, q.row_mut(t));
            vec_mat_into(h1.row(t), &b.wk, k.row_mut(t));
            vec_mat_into(h1.row(t), &b.wv, v.row_mut(t));
            rope(q.row_mut(t), t, hd, false);
            rope(k.row_mut(t), t, hd, false);
        }

        let mut att = vec![0.0; cfg.n_heads * n * n];
        let mut ctx = Matrix::zeros(n, d);
        for h in 0..cfg.n_heads {
            let off = h * hd;
            for t in 0..n {
                let qt = &q.row(t)[off..off + hd];
                let row = &mut att[(h * n + t) * n..(h * n + t + 1) * n];
                let mut m = f64::NEG_INFINITY;
                for s in 0..=t {
                    row[s] = dot(qt, &k.row(s)[off..off + hd]) * scale;
                    m = m.max(row[s]);
                }
                let mut z = 0.0;
                for a in row.iter_mut().take(t + 1) {
                    *a = (*a - m).exp();
                    z += *a;
                }
                for a in row.iter_mut().take(t + 1) {
                    *a /= z;
                }
                let c = &mut ctx.row_mut(t)[off..off + hd];
                for s in 0..=t {
                    let a = row[s];
                    for (ci, vi) in c.iter_mut().zip(&v.row(s)[off..off + hd]) {
                        *ci += a * vi;
                    }
                }
            }
        }

        let mut x_mid = x_in.clone();
        let mut tmp = vec![0.0; d];
        for t in 0..n {
            vec_mat_into(ctx.row(t), &b.wo, &mut tmp);
            for (xm, o) in x_mid.row_mut(t).iter_mut().zip(&tmp) {
                *xm += o;
            }
        }

        let mut h2 = Matrix::zeros(n, d);
        let mut inv_rms2 = vec![0.0; n];
        let mut pre = Matrix::zeros(n, cfg.d_ffn);
        let mut act = Matrix::zeros(n, cfg.d_ffn);
        let mut x_out = x_mid.clone();
        for t in 0..n {
            inv_rms2[t] = rms_norm(x_mid.row(t), &b.ffn_norm, h2.row_mut(t));
            vec_mat_into(h2.row(t), &b.ffn_w1, pre.row_mut(t));
            for (a, z) in act.row_mut(t).iter_mut().zip(pre.row(t)) {
                *a = gelu(*z);
            }
            vec_mat_into(act.row(t), &b.ffn_w2, &mut tmp);
            for (xo, o) in x_out.row_mut(t).iter_mut().zip(&tmp) {
                *xo += o;
            }
        }
        x = x_out.clone();
        layers.push(LayerCache {
            disabled: false,
            x_in,
            inv_rms1,
            h1,
            q,
            k,
            v,
            att,
            ctx,
            x_mid,
            inv_rms2,
            h2,
            pre,
            act,
            x_out,
        });
    }

    let mut r = Matrix::zeros(n, d);
    let mut inv_rms_f = vec![0.0; n];
    let mut logits = Matrix::zeros(n, cfg.vocab_size);
    for t in 0..n {
        inv_rms_f[t] = rms_norm(x.row(t), &p.final_norm, r.row_mut(t));
        vec_mat_into(r.row(t), &p.lm_head, logits.row_mut(t));
    }
    Cache {
        tokens: tokens.to_vec(),
        disabled,
        layers,
        x_final: x,
        inv_rms_f,
        r,
        logits,
    }
}
