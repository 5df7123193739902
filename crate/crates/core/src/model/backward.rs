use serde::{Deserialize, Serialize};

use super::forward::{gelu_grad, rope, softmax, Cache};
use super::{Params, TinyLM};
use crate::linalg::{add_outer, dot, mat_vec_into, Matrix, Vector};

/// Which parameter gradients to accumulate. Repair only needs `ffn_w2`;
/// training needs everything. Activation gradients are always produced.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GradScope {
    Repair,
    All,
}

#[derive(Clone, Debug)]
pub(crate) struct Gradients {
    pub params: Params,
    /// gradient w.r.t. the input embedding rows, one row per position
    pub d_input: Matrix,
    /// per layer, gradient w.r.t. the FFN intermediate at every position
    pub d_act: Vec<Matrix>,
}

impl Gradients {
    /// `self += other`, tensor by tensor. Activation gradients are only
    /// summed when the sequences have the same length.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self
            .params
            .tensors_mut()
            .into_iter()
            .zip(other.params.tensors())
        {
            for (x, y) in a.iter_mut().zip(b.data) {
                *x += y;
            }
        }
    }
}

/// Last-position cross-entropy and its logit gradient `p − onehot(target)`.
pub(crate) fn loss_and_dlogits(cache: &Cache, target: usize) -> (f64, Matrix) {
    let n = cache.len();
    let probs = softmax(cache.logits.row(n - 1));
    let loss = -probs[target].max(f64::MIN_POSITIVE).ln();
    let mut dl = Matrix::zeros(n, cache.logits.cols());
    let row = dl.row_mut(n - 1);
    row.copy_from_slice(&probs);
    row[target] -= 1.0;
    (loss, dl)
}

#[inline]
fn rms_norm_backward(
    x: &[f64],
    gain: &[f64],
    inv: f64,
    dy: &[f64],
    dx: &mut [f64],
    dgain: Option<&mut [f64]>,
) {
    let d = x.len() as f64;
    let mut s = 0.0;
    for i in 0..x.len() {
        s += gain[i] * dy[i] * x[i];
    }
    let k = s * inv * inv * inv / d;
    for i in 0..x.len() {
        dx[i] += gain[i] * dy[i] * inv - x[i] * k;
    }
    if let Some(dg) = dgain {
        for i in 0..x.len() {
            dg[i] += dy[i] * x[i] * inv;
        }
    }
}

/// Reverse-mode pass for arbitrary per-position logit gradients.
pub(crate) fn backward_cache(
    model: &TinyLM,
    cache: &Cache,
    dlogits: &Matrix,
    scope: GradScope,
) -> Gradients {
    let cfg = model.config();
    let p = model.params();
    let n = cache.len();
    let d = cfg.d_model;
    let f = cfg.d_ffn;
    let hd = cfg.head_dim();
    let scale = 1.0 / (hd as f64).sqrt();
    let all = scope == GradScope::All;

    let mut g = Params::zeros(cfg);
    let mut d_act = vec![Matrix::zeros(n, f); cfg.n_layers];

    // head and final norm
    let mut dx = Matrix::zeros(n, d);
    let mut dr = vec![0.0; d];
    for t in 0..n {
        let dl = dlogits.row(t);
        if dl.iter().all(|&v| v == 0.0) {
            continue;
        }
        if all {
            add_outer(&mut g.lm_head, cache.r.row(t), dl);
        }
        mat_vec_into(&p.lm_head, dl, &mut dr);
        rms_norm_backward(
            cache.x_final.row(t),
            &p.final_norm,
            cache.inv_rms_f[t],
            &dr,
            dx.row_mut(t),
            all.then_some(&mut g.final_norm[..]),
        );
    }

    let mut tmp_d = vec![0.0; d];
    let mut dpre = vec![0.0; f];
    for li in (0..cfg.n_layers).rev() {
        let lc = &cache.layers[li];
        if lc.disabled {
            continue;
        }
        let b = &p.blocks[li];
        let gb = &mut g.blocks[li];

        // FFN: x_out = x_mid + gelu(norm(x_mid) W1) W2
        let mut dx_mid = dx.clone();
        for t in 0..n {
            let dout = dx.row(t);
            if dout.iter().all(|&v| v == 0.0) {
                continue;
            }
            add_outer(&mut gb.ffn_w2, lc.act.row(t), dout);
            let dact = d_act[li].row_mut(t);
            mat_vec_into(&b.ffn_w2, dout, dact);
            for ((dp, da), z) in dpre.iter_mut().zip(dact.iter()).zip(lc.pre.row(t)) {
                *dp = da * gelu_grad(*z);
            }
            if all {
                add_outer(&mut gb.ffn_w1, lc.h2.row(t), &dpre);
            }
            mat_vec_into(&b.ffn_w1, &dpre, &mut tmp_d);
            rms_norm_backward(
                lc.x_mid.row(t),
                &b.ffn_norm,
                lc.inv_rms2[t],
                &tmp_d,
                dx_mid.row_mut(t),
                if all { Some(&mut gb.ffn_norm[..]) } else { None },
            );
        }

        // attention: x_mid = x_in + softmax(q kᵀ) v Wo
        let mut dx_in = dx_mid.clone();
        let mut dctx = Matrix::zeros(n, d);
        for t in 0..n {
            let dm = dx_mid.row(t);
            if all {
                add_outer(&mut gb.wo, lc.ctx.row(t), dm);
            }
            mat_vec_into(&b.wo, dm, dctx.row_mut(t));
        }
        let mut dq = Matrix::zeros(n, d);
        let mut dk = Matrix::zeros(n, d);
        let mut dv = Matrix::zeros(n, d);
        let mut da = vec![0.0; n];
        for h in 0..cfg.n_heads {
            let off = h * hd;
            for t in 0..n {
                let a = &lc.att[(h * n + t) * n..(h * n + t) * n + t + 1];
                let dc = &dctx.row(t)[off..off + hd];
                let mut weighted = 0.0;
                for s in 0..=t {
                    da[s] = dot(dc, &lc.v.row(s)[off..off + hd]);
                    weighted += a[s] * da[s];
                    let dvs = &mut dv.row_mut(s)[off..off + hd];
                    for (x, c) in dvs.iter_mut().zip(dc) {
                        *x += a[s] * c;
                    }
                }
                for s in 0..=t {
                    let ds = a[s] * (da[s] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    for i in 0..hd {
                        dq[(t, off + i)] += ds * lc.k[(s, off + i)];
                        dk[(s, off + i)] += ds * lc.q[(t, off + i)];
                    }
                }
            }
        }
        let mut dh1 = vec![0.0; d];
        for t in 0..n {
            rope(dq.row_mut(t), t, hd, true);
            rope(dk.row_mut(t), t, hd, true);
            if all {
                add_outer(&mut gb.wq, lc.h1.row(t), dq.row(t));
                add_outer(&mut gb.wk, lc.h1.row(t), dk.row(t));
                add_outer(&mut gb.wv, lc.h1.row(t), dv.row(t));
            }
            mat_vec_into(&b.wq, dq.row(t), &mut dh1);
            mat_vec_into(&b.wk, dk.row(t), &mut tmp_d);
            for (x, y) in dh1.iter_mut().zip(&tmp_d) {
                *x += y;
            }
            mat_vec_into(&b.wv, dv.row(t), &mut tmp_d);
            for (x, y) in dh1.iter_mut().zip(&tmp_d) {
                *x += y;
            }
            rms_norm_backward(
                lc.x_in.row(t),
                &b.attn_norm,
                lc.inv_rms1[t],
                &dh1,
                dx_in.row_mut(t),
                if all { Some(&mut gb.attn_norm[..]) } else { None },
            );
        }
        dx = dx_in;
    }

    if all {
        for (t, &tok) in cache.tokens.iter().enumerate() {
            for (e, x) in g.embedding.row_mut(tok).iter_mut().zip(dx.row(t)) {
                *e += x;
            }
        }
    }
    Gradients {
        params: g,
        d_input: dx,
        d_act,
    }
}

/// Gradients of one (or a sum of) last-position cross-entropy losses.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct GradientTrace {
    pub loss: f64,
    /// ∂loss/∂ffn_w2 per layer (d_ffn × d_model).
    pub ffn_w2: Vec<Matrix>,
    /// ∂loss/∂v at the last position, per layer.
    pub ffn_intermediate: Vec<Vector>,
    /// ∂loss/∂X_i for each input position.
    pub input_embeddings: Vec<Vector>,
    pub model_version: u64,
}

impl GradientTrace {
    pub(crate) fn from_cache(model: &TinyLM, cache: &Cache, target: usize, scope: GradScope) -> Self {
        let (loss, dl) = loss_and_dlogits(cache, target);
        let grads = backward_cache(model, cache, &dl, scope);
        Self::from_gradients(model, cache, loss, &grads)
    }

    pub(crate) fn from_gradients(model: &TinyLM, cache: &Cache, loss: f64, g: &Gradients) -> Self {
        let last = cache.len() - 1;
        Self {
            loss,
            ffn_w2: g.params.blocks.iter().map(|b| b.ffn_w2.clone()).collect(),
            ffn_intermediate: g.d_act.iter().map(|m| m.row(last).to_vec().into()).collect(),
            input_embeddings: (0..cache.len())
                .map(|t| g.d_input.row(t).to_vec().into())
                .collect(),
            model_version: model.version(),
        }
    }

    /// Sum of several traces' losses and parameter gradients; used when a
    /// batch of failures shares one update. Per-position fields are taken
    /// from the first trace.
    pub fn sum(traces: &[GradientTrace]) -> Option<GradientTrace> {
        let (first, rest) = traces.split_first()?;
        let mut out = first.clone();
        for t in rest {
            out.loss += t.loss;
            for (a, b) in out.ffn_w2.iter_mut().zip(&t.ffn_w2) {
                for (x, y) in a.as_mut_slice().iter_mut().zip(b.as_slice()) {
                    *x += y;
                }
            }
        }
        Some(out)
    }

    pub fn ffn_w2_norm(&self) -> f64 {
        self.ffn_w2
            .iter()
            .map(|m| m.frobenius_norm().powi(2))
            .sum::<f64>()
            .sqrt()
    }
}
