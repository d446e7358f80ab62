//! Causal transformer decoder with a hand-written reverse-mode gradient
//! path. Pre-norm residual blocks, GELU MLPs, learned position embeddings,
//! a vocabulary head (`softmax(W h + b)`) and a scalar copy gate head.
//!
//! All parameters live in one flat `Vec<f64>`; `Layout` names the tensor
//! ranges inside it. That makes the optimizer, gradient checks, checksums
//! and checkpointing uniform: they all walk the same buffer.

// Index loops mirror the math here; iterator rewrites obscure it.
#![allow(clippy::needless_range_loop)]

use std::ops::Range;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::linalg::{axpy, dot, gelu, gelu_grad, softmax_in_place, Mat};
use crate::rng::substream;
use crate::templating::NameMap;
use crate::tokenizer::Vocab;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelConfig {
    pub layers: usize,
    pub heads: usize,
    pub hidden_dim: usize,
    pub context_window: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl ModelConfig {
    /// Desk-scale default: trains on a synthetic corpus in minutes on a
    /// small CPU.
    pub fn desk_default(vocab_size: usize, seed: u64) -> Self {
        ModelConfig {
            layers: 2,
            heads: 4,
            hidden_dim: 96,
            context_window: 128,
            vocab_size,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden_dim == 0 || !self.hidden_dim.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "hidden_dim {} must be a positive multiple of heads {}",
                self.hidden_dim, self.heads
            )));
        }
        if self.layers == 0 || self.context_window == 0 || self.vocab_size == 0 {
            return Err(Error::Config(
                "layers, context_window and vocab_size must be positive".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerRanges {
    pub ln1_g: Range<usize>,
    pub ln1_b: Range<usize>,
    pub wq: Range<usize>,
    pub bq: Range<usize>,
    pub wk: Range<usize>,
    pub bk: Range<usize>,
    pub wv: Range<usize>,
    pub bv: Range<usize>,
    pub wo: Range<usize>,
    pub bo: Range<usize>,
    pub ln2_g: Range<usize>,
    pub ln2_b: Range<usize>,
    pub w1: Range<usize>,
    pub b1: Range<usize>,
    pub w2: Range<usize>,
    pub b2: Range<usize>,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub te: Range<usize>,
    pub pe: Range<usize>,
    pub layers: Vec<LayerRanges>,
    pub lnf_g: Range<usize>,
    pub lnf_b: Range<usize>,
    pub head_w: Range<usize>,
    pub head_b: Range<usize>,
    pub copy_w: Range<usize>,
    pub copy_b: Range<usize>,
    pub total: usize,
}

impl Layout {
    fn new(cfg: &ModelConfig) -> Self {
        let d = cfg.hidden_dim;
        let ff = 4 * d;
        let mut at = 0usize;
        let mut take = |len: usize| {
            let r = at..at + len;
            at += len;
            r
        };
        let te = take(cfg.vocab_size * d);
        let pe = take(cfg.context_window * d);
        let layers = (0..cfg.layers)
            .map(|_| LayerRanges {
                ln1_g: take(d),
                ln1_b: take(d),
                wq: take(d * d),
                bq: take(d),
                wk: take(d * d),
                bk: take(d),
                wv: take(d * d),
                bv: take(d),
                wo: take(d * d),
                bo: take(d),
                ln2_g: take(d),
                ln2_b: take(d),
                w1: take(ff * d),
                b1: take(ff),
                w2: take(d * ff),
                b2: take(d),
            })
            .collect();
        let lnf_g = take(d);
        let lnf_b = take(d);
        let head_w = take(cfg.vocab_size * d);
        let head_b = take(cfg.vocab_size);
        let copy_w = take(d);
        let copy_b = take(1);
        Layout {
            te,
            pe,
            layers,
            lnf_g,
            lnf_b,
            head_w,
            head_b,
            copy_w,
            copy_b,
            total: at,
        }
    }

    /// Named tensor ranges with their weight-decay eligibility (matrices
    /// decay, biases and norm parameters do not).
    pub fn groups(&self) -> Vec<(String, Range<usize>, bool)> {
        let mut out = vec![
            ("tok_emb".to_string(), self.te.clone(), true),
            ("pos_emb".to_string(), self.pe.clone(), true),
        ];
        for (i, l) in self.layers.iter().enumerate() {
            let named = [
                ("ln1_g", &l.ln1_g, false),
                ("ln1_b", &l.ln1_b, false),
                ("wq", &l.wq, true),
                ("bq", &l.bq, false),
                ("wk", &l.wk, true),
                ("bk", &l.bk, false),
                ("wv", &l.wv, true),
                ("bv", &l.bv, false),
                ("wo", &l.wo, true),
                ("bo", &l.bo, false),
                ("ln2_g", &l.ln2_g, false),
                ("ln2_b", &l.ln2_b, false),
                ("w1", &l.w1, true),
                ("b1", &l.b1, false),
                ("w2", &l.w2, true),
                ("b2", &l.b2, false),
            ];
            for (name, r, decay) in named {
                out.push((format!("layer{i}.{name}"), r.clone(), decay));
            }
        }
        out.push(("lnf_g".to_string(), self.lnf_g.clone(), false));
        out.push(("lnf_b".to_string(), self.lnf_b.clone(), false));
        out.push(("head_w".to_string(), self.head_w.clone(), true));
        out.push(("head_b".to_string(), self.head_b.clone(), false));
        out.push(("copy_w".to_string(), self.copy_w.clone(), true));
        out.push(("copy_b".to_string(), self.copy_b.clone(), false));
        out
    }
}

/// Transformer parameters plus the copy-gate head. The copy head is always
/// allocated; whether it participates is a training/inference flag, which
/// keeps copy-off runs bit-compatible with copy-on model shapes.
pub struct Model {
    pub cfg: ModelConfig,
    pub params: Vec<f64>,
    pub(crate) layout: Layout,
}

/// Final-layer hidden state per input token.
pub struct HiddenStates {
    pub states: Mat,
}

impl HiddenStates {
    pub fn len(&self) -> usize {
        self.states.rows
    }

    pub fn is_empty(&self) -> bool {
        self.states.rows == 0
    }

    pub fn state(&self, pos: usize) -> &[f64] {
        self.states.row(pos)
    }
}

/// Deterministic scaled-normal init. Embeddings and linear weights use
/// std 0.02; residual-output projections are shrunk by 1/sqrt(2*layers);
/// norms start at identity and biases at zero.
pub fn init_model(cfg: &ModelConfig) -> Result<Model> {
    cfg.validate()?;
    let layout = Layout::new(cfg);
    let mut params = vec![0.0f64; layout.total];
    let mut rng = substream(cfg.seed, "init");
    let base_std = 0.02;
    let resid_std = base_std / (2.0 * cfg.layers as f64).sqrt();

    fill_normal(&mut params[layout.te.clone()], base_std, &mut rng);
    fill_normal(&mut params[layout.pe.clone()], base_std, &mut rng);
    for l in &layout.layers {
        params[l.ln1_g.clone()].fill(1.0);
        fill_normal(&mut params[l.wq.clone()], base_std, &mut rng);
        fill_normal(&mut params[l.wk.clone()], base_std, &mut rng);
        fill_normal(&mut params[l.wv.clone()], base_std, &mut rng);
        fill_normal(&mut params[l.wo.clone()], resid_std, &mut rng);
        params[l.ln2_g.clone()].fill(1.0);
        fill_normal(&mut params[l.w1.clone()], base_std, &mut rng);
        fill_normal(&mut params[l.w2.clone()], resid_std, &mut rng);
    }
    params[layout.lnf_g.clone()].fill(1.0);
    fill_normal(&mut params[layout.head_w.clone()], base_std, &mut rng);
    fill_normal(&mut params[layout.copy_w.clone()], base_std, &mut rng);
    // Gate starts open (sigma(1) ~ 0.73) so the copy path sees gradient
    // from the first step; the gate is free to close where copying is
    // wrong.
    params[layout.copy_b.clone()].fill(1.0);

    Ok(Model {
        cfg: *cfg,
        params,
        layout,
    })
}

fn fill_normal(slice: &mut [f64], std: f64, rng: &mut ChaCha8Rng) {
    for v in slice.iter_mut() {
        // Box-Muller keeps us off extra dependencies and is seed-stable.
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen();
        *v = std * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
    }
}

struct LnCache {
    xhat: Mat,
    rstd: Vec<f64>,
}

struct LayerCache {
    ln1: LnCache,
    a: Mat, // ln1 output
    q: Mat,
    k: Mat,
    v: Mat,
    /// Attention probabilities, row-major [query][head][key], zero above
    /// the diagonal.
    att: Vec<f64>,
    ctx: Mat,
    ln2: LnCache,
    bnorm: Mat, // ln2 output
    mlp_pre: Mat,
    mlp_act: Mat,
}

pub(crate) struct ForwardCache {
    layers: Vec<LayerCache>,
    lnf: LnCache,
    pub hfin: Mat,
}

fn layer_norm(x: &Mat, g: &[f64], b: &[f64]) -> (Mat, LnCache) {
    let (n, d) = (x.rows, x.cols);
    let mut out = Mat::zeros(n, d);
    let mut xhat = Mat::zeros(n, d);
    let mut rstd = vec![0.0; n];
    for i in 0..n {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / d as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        rstd[i] = r;
        let xh = xhat.row_mut(i);
        let o = out.row_mut(i);
        for j in 0..d {
            xh[j] = (row[j] - mean) * r;
            o[j] = xh[j] * g[j] + b[j];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// dx for a layer-norm given upstream dy; also accumulates dg/db.
fn layer_norm_backward(
    dy: &Mat,
    cache: &LnCache,
    g: &[f64],
    dg: &mut [f64],
    db: &mut [f64],
    dx: &mut Mat,
) {
    let (n, d) = (dy.rows, dy.cols);
    for i in 0..n {
        let dyr = dy.row(i);
        let xh = cache.xhat.row(i);
        let r = cache.rstd[i];
        let mut mean_dxhat = 0.0;
        let mut mean_dxhat_xhat = 0.0;
        for j in 0..d {
            dg[j] += dyr[j] * xh[j];
            db[j] += dyr[j];
            let dxh = dyr[j] * g[j];
            mean_dxhat += dxh;
            mean_dxhat_xhat += dxh * xh[j];
        }
        mean_dxhat /= d as f64;
        mean_dxhat_xhat /= d as f64;
        let dxr = dx.row_mut(i);
        for j in 0..d {
            let dxh = dyr[j] * g[j];
            dxr[j] += r * (dxh - mean_dxhat - xh[j] * mean_dxhat_xhat);
        }
    }
}

/// out[i] = W x[i] + b for each row, with W stored [out x in].
fn affine_rows(w: &[f64], b: &[f64], x: &Mat, out: &mut Mat) {
    let in_dim = x.cols;
    let out_dim = out.cols;
    debug_assert_eq!(w.len(), in_dim * out_dim);
    for i in 0..x.rows {
        let xr = x.row(i);
        let or = out.row_mut(i);
        for o in 0..out_dim {
            or[o] = dot(&w[o * in_dim..(o + 1) * in_dim], xr) + b[o];
        }
    }
}

impl Model {
    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    /// Named parameter groups (name, flat range, decays).
    pub fn param_groups(&self) -> Vec<(String, Range<usize>, bool)> {
        self.layout.groups()
    }

    pub(crate) fn p(&self, r: &Range<usize>) -> &[f64] {
        &self.params[r.clone()]
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    /// FNV-1a checksum over the raw parameter bytes; used by purity and
    /// determinism checks.
    pub fn param_checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in &self.params {
            for b in v.to_le_bytes() {
                h ^= b as u64;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    /// Full-sequence forward pass; `h_i` depends only on tokens `0..=i`.
    pub fn forward(&self, ids: &[u32]) -> Result<HiddenStates> {
        self.forward_cached(ids).map(|c| HiddenStates { states: c.hfin })
    }

    pub(crate) fn forward_cached(&self, ids: &[u32]) -> Result<ForwardCache> {
        let n = ids.len();
        let d = self.cfg.hidden_dim;
        if n == 0 {
            return Err(Error::Model("empty input sequence".into()));
        }
        if n > self.cfg.context_window {
            return Err(Error::Model(format!(
                "sequence length {n} exceeds context window {}",
                self.cfg.context_window
            )));
        }
        for &id in ids {
            if id as usize >= self.cfg.vocab_size {
                return Err(Error::Model(format!("token id {id} out of vocabulary")));
            }
        }
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ff = 4 * d;

        let te = self.p(&self.layout.te);
        let pe = self.p(&self.layout.pe);
        let mut x = Mat::zeros(n, d);
        for i in 0..n {
            let row = x.row_mut(i);
            let t = &te[ids[i] as usize * d..(ids[i] as usize + 1) * d];
            let p = &pe[i * d..(i + 1) * d];
            for j in 0..d {
                row[j] = t[j] + p[j];
            }
        }

        let mut layers = Vec::with_capacity(self.cfg.layers);
        for l in &self.layout.layers {
            let (a, ln1) = layer_norm(&x, self.p(&l.ln1_g), self.p(&l.ln1_b));
            let mut q = Mat::zeros(n, d);
            let mut k = Mat::zeros(n, d);
            let mut v = Mat::zeros(n, d);
            affine_rows(self.p(&l.wq), self.p(&l.bq), &a, &mut q);
            affine_rows(self.p(&l.wk), self.p(&l.bk), &a, &mut k);
            affine_rows(self.p(&l.wv), self.p(&l.bv), &a, &mut v);

            let mut att = vec![0.0f64; n * heads * n];
            let mut ctx = Mat::zeros(n, d);
            for i in 0..n {
                for h in 0..heads {
                    let qh = &q.row(i)[h * dh..(h + 1) * dh];
                    let row = &mut att[(i * heads + h) * n..(i * heads + h) * n + n];
                    for (j, slot) in row.iter_mut().enumerate().take(i + 1) {
                        *slot = dot(qh, &k.row(j)[h * dh..(h + 1) * dh]) * scale;
                    }
                    softmax_in_place(&mut row[..i + 1]);
                    let ctx_h = &mut ctx.row_mut(i)[h * dh..(h + 1) * dh];
                    for j in 0..=i {
                        axpy(ctx_h, row[j], &v.row(j)[h * dh..(h + 1) * dh]);
                    }
                }
            }

            let mut attn_out = Mat::zeros(n, d);
            affine_rows(self.p(&l.wo), self.p(&l.bo), &ctx, &mut attn_out);
            for i in 0..n {
                axpy(x.row_mut(i), 1.0, attn_out.row(i));
            }

            let (bnorm, ln2) = layer_norm(&x, self.p(&l.ln2_g), self.p(&l.ln2_b));
            let mut mlp_pre = Mat::zeros(n, ff);
            affine_rows(self.p(&l.w1), self.p(&l.b1), &bnorm, &mut mlp_pre);
            let mut mlp_act = Mat::zeros(n, ff);
            for i in 0..n * ff {
                mlp_act.data[i] = gelu(mlp_pre.data[i]);
            }
            let mut mlp_out = Mat::zeros(n, d);
            affine_rows(self.p(&l.w2), self.p(&l.b2), &mlp_act, &mut mlp_out);
            for i in 0..n {
                axpy(x.row_mut(i), 1.0, mlp_out.row(i));
            }

            layers.push(LayerCache {
                ln1,
                a,
                q,
                k,
                v,
                att,
                ctx,
                ln2,
                bnorm,
                mlp_pre,
                mlp_act,
            });
        }

        let (hfin, lnf) = layer_norm(&x, self.p(&self.layout.lnf_g), self.p(&self.layout.lnf_b));
        Ok(ForwardCache { layers, lnf, hfin })
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        let d = self.cfg.hidden_dim;
        let w = self.p(&self.layout.head_w);
        let b = self.p(&self.layout.head_b);
        (0..self.cfg.vocab_size)
            .map(|t| dot(&w[t * d..(t + 1) * d], h) + b[t])
            .collect()
    }

    /// `softmax(W h + b)`: the vocabulary distribution at one position.
    pub fn vocab_distribution(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.logits(h);
        softmax_in_place(&mut z);
        z
    }

    /// Scalar copy gate in (0,1).
    pub fn copy_gate(&self, h: &[f64]) -> f64 {
        let a = dot(self.p(&self.layout.copy_w), h) + self.p(&self.layout.copy_b)[0];
        1.0 / (1.0 + (-a).exp())
    }

    /// Backward pass through the transformer trunk given gradients w.r.t.
    /// the post-norm hidden states. Head/copy gradients are accumulated by
    /// the caller (they live above the trunk); `grad` uses the same flat
    /// layout as `params`.
    pub(crate) fn backward(
        &self,
        ids: &[u32],
        cache: &ForwardCache,
        dhfin: &Mat,
        grad: &mut [f64],
    ) {
        let n = ids.len();
        let d = self.cfg.hidden_dim;
        let heads = self.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let ff = 4 * d;

        let mut dx = Mat::zeros(n, d);
        {
            let (g_r, b_r) = (self.layout.lnf_g.clone(), self.layout.lnf_b.clone());
            let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
            layer_norm_backward(dhfin, &cache.lnf, self.p(&g_r), &mut dg, &mut db, &mut dx);
            axpy(&mut grad[g_r], 1.0, &dg);
            axpy(&mut grad[b_r], 1.0, &db);
        }

        for (li, l) in self.layout.layers.iter().enumerate().rev() {
            let lc = &cache.layers[li];

            // MLP block: x_out = x_mid + W2 gelu(W1 ln2(x_mid) + b1) + b2
            let dmlp_out = &dx; // residual: gradient flows to both branches
            let mut dact = Mat::zeros(n, ff);
            {
                let w2 = self.p(&l.w2);
                let gw2 = &mut grad[l.w2.clone()];
                for i in 0..n {
                    let dout = dmlp_out.row(i);
                    let act = lc.mlp_act.row(i);
                    for o in 0..d {
                        axpy(&mut gw2[o * ff..(o + 1) * ff], dout[o], act);
                    }
                    let da = dact.row_mut(i);
                    for o in 0..d {
                        axpy(da, dout[o], &w2[o * ff..(o + 1) * ff]);
                    }
                }
                let gb2 = &mut grad[l.b2.clone()];
                for i in 0..n {
                    axpy(gb2, 1.0, dmlp_out.row(i));
                }
            }
            let mut dpre = dact;
            for i in 0..n * ff {
                dpre.data[i] *= gelu_grad(lc.mlp_pre.data[i]);
            }
            let mut dbnorm = Mat::zeros(n, d);
            {
                let w1 = self.p(&l.w1);
                let gw1 = &mut grad[l.w1.clone()];
                for i in 0..n {
                    let dp = dpre.row(i);
                    let bn = lc.bnorm.row(i);
                    for o in 0..ff {
                        axpy(&mut gw1[o * d..(o + 1) * d], dp[o], bn);
                    }
                    let db = dbnorm.row_mut(i);
                    for o in 0..ff {
                        axpy(db, dp[o], &w1[o * d..(o + 1) * d]);
                    }
                }
                let gb1 = &mut grad[l.b1.clone()];
                for i in 0..n {
                    axpy(gb1, 1.0, dpre.row(i));
                }
            }
            {
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                layer_norm_backward(&dbnorm, &lc.ln2, self.p(&l.ln2_g), &mut dg, &mut db, &mut dx);
                axpy(&mut grad[l.ln2_g.clone()], 1.0, &dg);
                axpy(&mut grad[l.ln2_b.clone()], 1.0, &db);
            }

            // Attention block: x_mid = x_in + Wo ctx + bo
            let dattn_out = &dx;
            let mut dctx = Mat::zeros(n, d);
            {
                let wo = self.p(&l.wo);
                let gwo = &mut grad[l.wo.clone()];
                for i in 0..n {
                    let dout = dattn_out.row(i);
                    let ctx = lc.ctx.row(i);
                    for o in 0..d {
                        axpy(&mut gwo[o * d..(o + 1) * d], dout[o], ctx);
                    }
                    let dc = dctx.row_mut(i);
                    for o in 0..d {
                        axpy(dc, dout[o], &wo[o * d..(o + 1) * d]);
                    }
                }
                let gbo = &mut grad[l.bo.clone()];
                for i in 0..n {
                    axpy(gbo, 1.0, dattn_out.row(i));
                }
            }

            let mut dq = Mat::zeros(n, d);
            let mut dk = Mat::zeros(n, d);
            let mut dv = Mat::zeros(n, d);
            let mut datt = vec![0.0f64; n];
            for i in 0..n {
                for h in 0..heads {
                    let att_row = &lc.att[(i * heads + h) * n..(i * heads + h) * n + n];
                    let dctx_h = &dctx.row(i)[h * dh..(h + 1) * dh];
                    for j in 0..=i {
                        datt[j] = dot(dctx_h, &lc.v.row(j)[h * dh..(h + 1) * dh]);
                        axpy(
                            &mut dv.row_mut(j)[h * dh..(h + 1) * dh],
                            att_row[j],
                            dctx_h,
                        );
                    }
                    let dot_sum: f64 = (0..=i).map(|j| att_row[j] * datt[j]).sum();
                    let qh = lc.q.row(i)[h * dh..(h + 1) * dh].to_vec();
                    for j in 0..=i {
                        let ds = att_row[j] * (datt[j] - dot_sum) * scale;
                        axpy(
                            &mut dq.row_mut(i)[h * dh..(h + 1) * dh],
                            ds,
                            &lc.k.row(j)[h * dh..(h + 1) * dh],
                        );
                        axpy(&mut dk.row_mut(j)[h * dh..(h + 1) * dh], ds, &qh);
                    }
                }
            }

            let mut da = Mat::zeros(n, d);
            for (dmat, w_r, b_r) in [
                (&dq, &l.wq, &l.bq),
                (&dk, &l.wk, &l.bk),
                (&dv, &l.wv, &l.bv),
            ] {
                let w = self.p(w_r);
                {
                    let gw = &mut grad[w_r.clone()];
                    for i in 0..n {
                        let dm = dmat.row(i);
                        let ar = lc.a.row(i);
                        for o in 0..d {
                            axpy(&mut gw[o * d..(o + 1) * d], dm[o], ar);
                        }
                        let dar = da.row_mut(i);
                        for o in 0..d {
                            axpy(dar, dm[o], &w[o * d..(o + 1) * d]);
                        }
                    }
                }
                let gb = &mut grad[b_r.clone()];
                for i in 0..n {
                    axpy(gb, 1.0, dmat.row(i));
                }
            }
            {
                let (mut dg, mut db) = (vec![0.0; d], vec![0.0; d]);
                layer_norm_backward(&da, &lc.ln1, self.p(&l.ln1_g), &mut dg, &mut db, &mut dx);
                axpy(&mut grad[l.ln1_g.clone()], 1.0, &dg);
                axpy(&mut grad[l.ln1_b.clone()], 1.0, &db);
            }
        }

        // Embeddings.
        let gte = &mut grad[self.layout.te.clone()];
        for i in 0..n {
            let id = ids[i] as usize;
            axpy(&mut gte[id * d..(id + 1) * d], 1.0, dx.row(i));
        }
        let gpe = &mut grad[self.layout.pe.clone()];
        for i in 0..n {
            axpy(&mut gpe[i * d..(i + 1) * d], 1.0, dx.row(i));
        }
    }
}

/// Incremental decoding state: cached keys/values per layer plus every
/// post-norm hidden state produced so far (the copy head attends over
/// them).
pub struct IncrementalState<'m> {
    model: &'m Model,
    k: Vec<Mat>,
    v: Vec<Mat>,
    hidden: Mat,
    len: usize,
}

impl<'m> IncrementalState<'m> {
    pub fn new(model: &'m Model) -> Self {
        let t = model.cfg.context_window;
        let d = model.cfg.hidden_dim;
        IncrementalState {
            model,
            k: (0..model.cfg.layers).map(|_| Mat::zeros(t, d)).collect(),
            v: (0..model.cfg.layers).map(|_| Mat::zeros(t, d)).collect(),
            hidden: Mat::zeros(t, d),
            len: 0,
        }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn hidden_state(&self, pos: usize) -> &[f64] {
        self.hidden.row(pos)
    }

    /// All hidden states produced so far (rows beyond `len` are unused).
    pub fn hidden_matrix(&self) -> &Mat {
        &self.hidden
    }

    /// Feed one token, returning the new position's hidden state.
    pub fn push(&mut self, id: u32) -> Result<&[f64]> {
        let m = self.model;
        let d = m.cfg.hidden_dim;
        let heads = m.cfg.heads;
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let pos = self.len;
        if pos >= m.cfg.context_window {
            return Err(Error::Model(format!(
                "context window {} exhausted",
                m.cfg.context_window
            )));
        }
        if id as usize >= m.cfg.vocab_size {
            return Err(Error::Model(format!("token id {id} out of vocabulary")));
        }

        let te = m.p(&m.layout.te);
        let pe = m.p(&m.layout.pe);
        let mut x = vec![0.0f64; d];
        for j in 0..d {
            x[j] = te[id as usize * d + j] + pe[pos * d + j];
        }

        for (li, l) in m.layout.layers.iter().enumerate() {
            let a = ln_row(&x, m.p(&l.ln1_g), m.p(&l.ln1_b));
            let mut q = vec![0.0; d];
            let mut krow = vec![0.0; d];
            let mut vrow = vec![0.0; d];
            affine_vec(m.p(&l.wq), m.p(&l.bq), &a, &mut q);
            affine_vec(m.p(&l.wk), m.p(&l.bk), &a, &mut krow);
            affine_vec(m.p(&l.wv), m.p(&l.bv), &a, &mut vrow);
            self.k[li].row_mut(pos).copy_from_slice(&krow);
            self.v[li].row_mut(pos).copy_from_slice(&vrow);

            let mut ctx = vec![0.0; d];
            let mut att = vec![0.0; pos + 1];
            for h in 0..heads {
                let qh = &q[h * dh..(h + 1) * dh];
                for (j, slot) in att.iter_mut().enumerate() {
                    *slot = dot(qh, &self.k[li].row(j)[h * dh..(h + 1) * dh]) * scale;
                }
                softmax_in_place(&mut att);
                let ctx_h = &mut ctx[h * dh..(h + 1) * dh];
                for j in 0..=pos {
                    axpy(ctx_h, att[j], &self.v[li].row(j)[h * dh..(h + 1) * dh]);
                }
            }
            let mut attn_out = vec![0.0; d];
            affine_vec(m.p(&l.wo), m.p(&l.bo), &ctx, &mut attn_out);
            axpy(&mut x, 1.0, &attn_out);

            let bnorm = ln_row(&x, m.p(&l.ln2_g), m.p(&l.ln2_b));
            let ff = 4 * d;
            let mut pre = vec![0.0; ff];
            affine_vec(m.p(&l.w1), m.p(&l.b1), &bnorm, &mut pre);
            for v in pre.iter_mut() {
                *v = gelu(*v);
            }
            let mut mlp_out = vec![0.0; d];
            affine_vec(m.p(&l.w2), m.p(&l.b2), &pre, &mut mlp_out);
            axpy(&mut x, 1.0, &mlp_out);
        }

        let hf = ln_row(&x, m.p(&m.layout.lnf_g), m.p(&m.layout.lnf_b));
        self.hidden.row_mut(pos).copy_from_slice(&hf);
        self.len += 1;
        Ok(self.hidden.row(pos))
    }
}

fn ln_row(x: &[f64], g: &[f64], b: &[f64]) -> Vec<f64> {
    let d = x.len();
    let mean = x.iter().sum::<f64>() / d as f64;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
    let r = 1.0 / (var + LN_EPS).sqrt();
    (0..d).map(|j| (x[j] - mean) * r * g[j] + b[j]).collect()
}

fn affine_vec(w: &[f64], b: &[f64], x: &[f64], out: &mut [f64]) {
    let in_dim = x.len();
    for (o, slot) in out.iter_mut().enumerate() {
        *slot = dot(&w[o * in_dim..(o + 1) * in_dim], x) + b[o];
    }
}

// --- checkpoint io ---------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"GSFCKPT1";

/// Everything needed to run the pipeline later: config, tokenizer, name
/// map, training flags, parameters.
pub struct Checkpoint {
    pub model: Model,
    pub vocab: Vocab,
    pub names: NameMap,
    /// Whether the copy head was active during training.
    pub copy_trained: bool,
    /// Whether the model was trained on trivial `key =` templates.
    pub trivial_templates: bool,
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    let cfg = &ckpt.model.cfg;
    for v in [
        cfg.layers as u32,
        cfg.heads as u32,
        cfg.hidden_dim as u32,
        cfg.context_window as u32,
        cfg.vocab_size as u32,
    ] {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    buf.extend_from_slice(&cfg.seed.to_le_bytes());
    buf.push(ckpt.copy_trained as u8);
    buf.push(ckpt.trivial_templates as u8);
    let vocab_text = ckpt.vocab.to_text();
    buf.extend_from_slice(&(vocab_text.len() as u32).to_le_bytes());
    buf.extend_from_slice(vocab_text.as_bytes());
    let names_json = ckpt.names.to_json();
    buf.extend_from_slice(&(names_json.len() as u32).to_le_bytes());
    buf.extend_from_slice(names_json.as_bytes());
    buf.extend_from_slice(&(ckpt.model.params.len() as u64).to_le_bytes());
    for v in &ckpt.model.params {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    std::fs::write(path, buf).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    at: usize,
    path: String,
}

impl<'a> Reader<'a> {
    fn bad(&self, msg: &str) -> Error {
        Error::Checkpoint(format!("{}: {msg}", self.path))
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.at + n > self.buf.len() {
            return Err(self.bad("truncated file"));
        }
        let s = &self.buf[self.at..self.at + n];
        self.at += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, len: usize, what: &str) -> Result<String> {
        std::str::from_utf8(self.take(len)?)
            .map(|s| s.to_string())
            .map_err(|_| self.bad(&format!("{what} section is not utf-8")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let buf = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader {
        buf: &buf,
        at: 0,
        path: path.display().to_string(),
    };
    if r.take(8)? != CKPT_MAGIC {
        return Err(r.bad("not a checkpoint (bad magic)"));
    }
    let layers = r.u32()?;
    let heads = r.u32()?;
    let hidden_dim = r.u32()?;
    let context_window = r.u32()?;
    let vocab_size = r.u32()?;
    let seed = r.u64()?;
    let copy_trained = r.take(1)?[0] != 0;
    let trivial_templates = r.take(1)?[0] != 0;
    let vlen = r.u32()?;
    let vocab_text = r.str(vlen, "vocab")?;
    let nlen = r.u32()?;
    let names_json = r.str(nlen, "name-map")?;
    let pcount = r.u64()? as usize;
    let cfg = ModelConfig {
        layers,
        heads,
        hidden_dim,
        context_window,
        vocab_size,
        seed,
    };
    cfg.validate()?;
    let layout = Layout::new(&cfg);
    if pcount != layout.total {
        return Err(r.bad(&format!(
            "parameter count {pcount} does not match config ({})",
            layout.total
        )));
    }
    let mut params = Vec::with_capacity(pcount);
    for _ in 0..pcount {
        params.push(f64::from_le_bytes(r.take(8)?.try_into().unwrap()));
    }
    if r.at != buf.len() {
        return Err(r.bad("trailing bytes"));
    }
    Ok(Checkpoint {
        model: Model {
            cfg,
            params,
            layout,
        },
        vocab: Vocab::from_text(&vocab_text)?,
        names: NameMap::from_json_str(&names_json)?,
        copy_trained,
        trivial_templates,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_cfg() -> ModelConfig {
        ModelConfig {
            layers: 2,
            heads: 2,
            hidden_dim: 16,
            context_window: 24,
            vocab_size: 40,
            seed: 3,
        }
    }

    #[test]
    fn init_is_deterministic() {
        let cfg = tiny_cfg();
        let a = init_model(&cfg).unwrap();
        let b = init_model(&cfg).unwrap();
        assert_eq!(a.params, b.params);
        let c = init_model(&ModelConfig { seed: 4, ..cfg }).unwrap();
        assert_ne!(a.params, c.params);
    }

    #[test]
    fn init_rejects_bad_divisibility() {
        let cfg = ModelConfig {
            layers: 1,
            heads: 3,
            hidden_dim: 64,
            context_window: 8,
            vocab_size: 10,
            seed: 0,
        };
        assert!(init_model(&cfg).is_err());
    }

    #[test]
    fn param_count_matches_closed_form() {
        let cfg = ModelConfig {
            layers: 2,
            heads: 4,
            hidden_dim: 128,
            context_window: 64,
            vocab_size: 300,
            seed: 0,
        };
        let m = init_model(&cfg).unwrap();
        let (v, d, t, l) = (300usize, 128usize, 64usize, 2usize);
        let per_layer = 2 * d + 4 * (d * d + d) + 2 * d + (4 * d * d + 4 * d) + (4 * d * d + d);
        let expected = v * d + t * d + l * per_layer + 2 * d + (v * d + v) + (d + 1);
        assert_eq!(m.param_count(), expected);
    }

    #[test]
    fn forward_prefix_property() {
        let m = init_model(&tiny_cfg()).unwrap();
        let ids = [5u32, 9, 1, 30, 2, 17, 8];
        let full = m.forward(&ids).unwrap();
        for k in 1..ids.len() {
            let pre = m.forward(&ids[..k]).unwrap();
            for i in 0..k {
                assert_eq!(pre.state(i), full.state(i), "position {i} with prefix {k}");
            }
        }
    }

    #[test]
    fn single_token_forward() {
        let m = init_model(&tiny_cfg()).unwrap();
        let h = m.forward(&[7]).unwrap();
        assert_eq!(h.len(), 1);
    }

    #[test]
    fn perturbing_a_later_token_leaves_earlier_states() {
        let m = init_model(&tiny_cfg()).unwrap();
        let a = m.forward(&[1, 2, 3, 4, 5]).unwrap();
        let b = m.forward(&[1, 2, 3, 39, 5]).unwrap();
        for i in 0..3 {
            assert_eq!(a.state(i), b.state(i), "position {i}");
        }
        assert_ne!(a.state(3), b.state(3));
    }

    #[test]
    fn context_overflow_is_an_error() {
        let m = init_model(&tiny_cfg()).unwrap();
        let ids = vec![1u32; 25];
        assert!(m.forward(&ids).is_err());
    }

    #[test]
    fn vocab_distribution_normalizes_and_is_uniform_at_zero() {
        let mut m = init_model(&tiny_cfg()).unwrap();
        let h = m.forward(&[3, 4]).unwrap();
        let p = m.vocab_distribution(h.state(1));
        let sum: f64 = p.iter().sum();
        assert!((sum - 1.0).abs() < 1e-6);
        assert!(p.iter().all(|&v| v > 0.0));

        // Zero head gives the uniform distribution.
        let (hw, hb) = (m.layout.head_w.clone(), m.layout.head_b.clone());
        m.params[hw].fill(0.0);
        m.params[hb].fill(0.0);
        let p = m.vocab_distribution(h.state(0));
        for v in p {
            assert!((v - 1.0 / 40.0).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let m = init_model(&tiny_cfg()).unwrap();
        let h = m.forward(&[3]).unwrap();
        let mut z = m.logits(h.state(0));
        let mut p1 = z.clone();
        softmax_in_place(&mut p1);
        for v in z.iter_mut() {
            *v += 5.0;
        }
        softmax_in_place(&mut z);
        for (a, b) in z.iter().zip(&p1) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn incremental_matches_full_forward() {
        let m = init_model(&tiny_cfg()).unwrap();
        let ids = [5u32, 9, 1, 30, 2, 17, 8, 0];
        let full = m.forward(&ids).unwrap();
        let mut inc = IncrementalState::new(&m);
        for (i, &id) in ids.iter().enumerate() {
            let h = inc.push(id).unwrap().to_vec();
            for (a, b) in h.iter().zip(full.state(i)) {
                assert!((a - b).abs() < 1e-12, "position {i}");
            }
        }
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let vocab = crate::tokenizer::train_bpe(["table for two at 7pm"], 280).unwrap();
        let names = crate::templating::default_name_map("restaurants").unwrap();
        let cfg = ModelConfig {
            vocab_size: vocab.size(),
            ..tiny_cfg()
        };
        let model = init_model(&cfg).unwrap();
        let checksum = model.param_checksum();
        save_checkpoint(
            &Checkpoint {
                model,
                vocab: vocab.clone(),
                names: names.clone(),
                copy_trained: true,
                trivial_templates: false,
            },
            &path,
        )
        .unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.model.param_checksum(), checksum);
        assert_eq!(loaded.model.cfg, cfg);
        assert_eq!(loaded.vocab, vocab);
        assert_eq!(loaded.names, names);
        assert!(loaded.copy_trained);
        assert!(!loaded.trivial_templates);
    }

    #[test]
    fn checkpoint_rejects_garbage() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint at all").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
