//! Forward and backward passes of the pre-norm ViT.
//!
//! Samples are processed in fixed-size chunks whose tokens are stacked into
//! one `[n * T, D]` matrix, so the linear layers become single GEMMs. Chunk
//! boundaries never depend on the thread count and chunk results are
//! reduced in chunk order, which keeps batched results bitwise independent
//! of parallelism.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::level::Level;
use crate::scalar::Scalar;
use crate::tensor::{gemm, MatMut, MatRef, ParamSet, Tensor};

use super::config::{param_schema, validate_names, ModelConfig};

/// Samples stacked per GEMM.
pub(crate) const CHUNK: usize = 16;

const LN_EPS: f64 = 1e-6;

/// Output of a batched forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<S> {
    /// `[B, num_classes]`
    pub logits: Tensor<S>,
    /// Final-norm class-token rows, `[B, D]`.
    pub cls_features: Tensor<S>,
    /// Per layer `[B, heads, T, T]`, present only when requested.
    pub attention: Option<Vec<Tensor<S>>>,
    pub grid: usize,
}

impl<S: Scalar> ForwardTrace<S> {
    pub fn batch_size(&self) -> usize {
        self.logits.shape()[0]
    }

    /// Arg-max prediction per sample.
    pub fn predictions(&self) -> Vec<usize> {
        let k = self.logits.shape()[1];
        self.logits
            .data()
            .chunks(k)
            .map(|row| argmax(row))
            .collect()
    }
}

pub(crate) fn argmax<S: Scalar>(row: &[S]) -> usize {
    let mut best = 0;
    for (i, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = i;
        }
    }
    best
}

struct BlockRef<'a, S> {
    n1w: &'a [S],
    n1b: &'a [S],
    qkv_w: &'a [S],
    qkv_b: &'a [S],
    proj_w: &'a [S],
    proj_b: &'a [S],
    n2w: &'a [S],
    n2b: &'a [S],
    fc1_w: &'a [S],
    fc1_b: &'a [S],
    fc2_w: &'a [S],
    fc2_b: &'a [S],
}

/// Borrowed, shape-checked view of a parameter collection.
pub(crate) struct Weights<'a, S> {
    cfg: &'a ModelConfig,
    cls: &'a [S],
    pos: &'a [S],
    patch_w: &'a [S],
    patch_b: &'a [S],
    blocks: Vec<BlockRef<'a, S>>,
    norm_w: &'a [S],
    norm_b: &'a [S],
    head_w: &'a [S],
    head_b: &'a [S],
}

impl<'a, S: Scalar> Weights<'a, S> {
    pub fn bind(cfg: &'a ModelConfig, params: &'a ParamSet<S>) -> Result<Self> {
        cfg.validate()?;
        let report = validate_names(params, cfg);
        if !report.is_ok() {
            return Err(Error::NameMismatch(report.summary()));
        }
        let get = |n: &str| params.require(n).map(|t| t.data());
        let mut blocks = Vec::with_capacity(cfg.depth);
        for b in 0..cfg.depth {
            let g = |s: &str| get(&format!("blocks.{b}.{s}"));
            blocks.push(BlockRef {
                n1w: g("norm1.weight")?,
                n1b: g("norm1.bias")?,
                qkv_w: g("attn.qkv.weight")?,
                qkv_b: g("attn.qkv.bias")?,
                proj_w: g("attn.proj.weight")?,
                proj_b: g("attn.proj.bias")?,
                n2w: g("norm2.weight")?,
                n2b: g("norm2.bias")?,
                fc1_w: g("mlp.fc1.weight")?,
                fc1_b: g("mlp.fc1.bias")?,
                fc2_w: g("mlp.fc2.weight")?,
                fc2_b: g("mlp.fc2.bias")?,
            });
        }
        Ok(Self {
            cfg,
            cls: get("cls_token")?,
            pos: get("pos_embed")?,
            patch_w: get("patch_embed.weight")?,
            patch_b: get("patch_embed.bias")?,
            blocks,
            norm_w: get("norm.weight")?,
            norm_b: get("norm.bias")?,
            head_w: get("head.weight")?,
            head_b: get("head.bias")?,
        })
    }
}

#[derive(Clone)]
struct BlockGrads<S> {
    n1w: Vec<S>,
    n1b: Vec<S>,
    qkv_w: Vec<S>,
    qkv_b: Vec<S>,
    proj_w: Vec<S>,
    proj_b: Vec<S>,
    n2w: Vec<S>,
    n2b: Vec<S>,
    fc1_w: Vec<S>,
    fc1_b: Vec<S>,
    fc2_w: Vec<S>,
    fc2_b: Vec<S>,
}

impl<S: Scalar> BlockGrads<S> {
    fn fields(&self) -> [(&'static str, &Vec<S>); 12] {
        [
            ("norm1.weight", &self.n1w),
            ("norm1.bias", &self.n1b),
            ("attn.qkv.weight", &self.qkv_w),
            ("attn.qkv.bias", &self.qkv_b),
            ("attn.proj.weight", &self.proj_w),
            ("attn.proj.bias", &self.proj_b),
            ("norm2.weight", &self.n2w),
            ("norm2.bias", &self.n2b),
            ("mlp.fc1.weight", &self.fc1_w),
            ("mlp.fc1.bias", &self.fc1_b),
            ("mlp.fc2.weight", &self.fc2_w),
            ("mlp.fc2.bias", &self.fc2_b),
        ]
    }

    fn fields_mut(&mut self) -> [&mut Vec<S>; 12] {
        [
            &mut self.n1w,
            &mut self.n1b,
            &mut self.qkv_w,
            &mut self.qkv_b,
            &mut self.proj_w,
            &mut self.proj_b,
            &mut self.n2w,
            &mut self.n2b,
            &mut self.fc1_w,
            &mut self.fc1_b,
            &mut self.fc2_w,
            &mut self.fc2_b,
        ]
    }
}

/// Gradient buffers laid out like [`Weights`].
#[derive(Clone)]
struct Grads<S> {
    cls: Vec<S>,
    pos: Vec<S>,
    patch_w: Vec<S>,
    patch_b: Vec<S>,
    blocks: Vec<BlockGrads<S>>,
    norm_w: Vec<S>,
    norm_b: Vec<S>,
    head_w: Vec<S>,
    head_b: Vec<S>,
}

impl<S: Scalar> Grads<S> {
    fn zeros(cfg: &ModelConfig) -> Self {
        let z = |n: usize| vec![S::zero(); n];
        let d = cfg.embed_dim;
        let hd = cfg.hidden_dim();
        Self {
            cls: z(d),
            pos: z(cfg.num_tokens() * d),
            patch_w: z(d * cfg.patch_len()),
            patch_b: z(d),
            blocks: (0..cfg.depth)
                .map(|_| BlockGrads {
                    n1w: z(d),
                    n1b: z(d),
                    qkv_w: z(3 * d * d),
                    qkv_b: z(3 * d),
                    proj_w: z(d * d),
                    proj_b: z(d),
                    n2w: z(d),
                    n2b: z(d),
                    fc1_w: z(hd * d),
                    fc1_b: z(hd),
                    fc2_w: z(d * hd),
                    fc2_b: z(d),
                })
                .collect(),
            norm_w: z(d),
            norm_b: z(d),
            head_w: z(cfg.num_classes * d),
            head_b: z(cfg.num_classes),
        }
    }

    fn add_assign(&mut self, other: &Self) {
        fn add<S: Scalar>(a: &mut [S], b: &[S]) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += *y;
            }
        }
        add(&mut self.cls, &other.cls);
        add(&mut self.pos, &other.pos);
        add(&mut self.patch_w, &other.patch_w);
        add(&mut self.patch_b, &other.patch_b);
        for (a, b) in self.blocks.iter_mut().zip(&other.blocks) {
            for (x, (_, y)) in a.fields_mut().into_iter().zip(b.fields()) {
                add(x, y);
            }
        }
        add(&mut self.norm_w, &other.norm_w);
        add(&mut self.norm_b, &other.norm_b);
        add(&mut self.head_w, &other.head_w);
        add(&mut self.head_b, &other.head_b);
    }

    fn into_param_set(
        self,
        cfg: &ModelConfig,
        trainable: &dyn Fn(&str) -> bool,
    ) -> Result<ParamSet<S>> {
        let schema = param_schema(cfg);
        let shape_of = |name: &str| {
            schema
                .iter()
                .find(|(n, _)| n == name)
                .map(|(_, s)| s.clone())
                .expect("schema name")
        };
        let mut out = ParamSet::new();
        let mut put = |name: String, data: Vec<S>| -> Result<()> {
            if trainable(&name) {
                let t = Tensor::from_vec(&shape_of(&name), data)?;
                out.insert(name, t);
            }
            Ok(())
        };
        put("cls_token".into(), self.cls)?;
        put("pos_embed".into(), self.pos)?;
        put("patch_embed.weight".into(), self.patch_w)?;
        put("patch_embed.bias".into(), self.patch_b)?;
        for (b, g) in self.blocks.iter().enumerate() {
            for (suffix, data) in g.fields() {
                put(format!("blocks.{b}.{suffix}"), data.clone())?;
            }
        }
        put("norm.weight".into(), self.norm_w)?;
        put("norm.bias".into(), self.norm_b)?;
        put("head.weight".into(), self.head_w)?;
        put("head.bias".into(), self.head_b)?;
        Ok(out)
    }
}

/// Activations a block keeps for its backward pass.
struct BlockCache<S> {
    xhat1: Vec<S>,
    rstd1: Vec<S>,
    h1: Vec<S>,
    qkv: Vec<S>,
    /// `[n, heads, T, T]`
    probs: Vec<S>,
    ctx: Vec<S>,
    xhat2: Vec<S>,
    rstd2: Vec<S>,
    h2: Vec<S>,
    pre: Vec<S>,
    act: Vec<S>,
}

struct ChunkForward<S> {
    n: usize,
    patches: Vec<S>,
    blocks: Vec<BlockCache<S>>,
    xhatf: Vec<S>,
    rstdf: Vec<S>,
    /// `[n, D]`
    feats: Vec<S>,
    /// `[n, K]`
    logits: Vec<S>,
}

fn add_bias<S: Scalar>(y: &mut [S], bias: &[S]) {
    for row in y.chunks_mut(bias.len()) {
        for (v, b) in row.iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

fn col_sum_into<S: Scalar>(acc: &mut [S], m: &[S]) {
    for row in m.chunks(acc.len()) {
        for (a, v) in acc.iter_mut().zip(row) {
            *a += *v;
        }
    }
}

/// `y = x * w^T + b` for a row-major `[out, in]` weight.
fn linear<S: Scalar>(x: &[S], rows: usize, w: &[S], b: &[S], out: usize, inp: usize) -> Vec<S> {
    let mut y = vec![S::zero(); rows * out];
    gemm(
        S::one(),
        MatRef::new(x, rows, inp),
        MatRef::new(w, out, inp).t(),
        S::zero(),
        MatMut::new(&mut y, rows, out),
    );
    add_bias(&mut y, b);
    y
}

/// Accumulates the parameter gradients of [`linear`] and returns `dx`.
#[allow(clippy::too_many_arguments)]
fn linear_backward<S: Scalar>(
    dy: &[S],
    x: &[S],
    rows: usize,
    w: &[S],
    out: usize,
    inp: usize,
    dw: &mut [S],
    db: &mut [S],
    want_dx: bool,
) -> Vec<S> {
    gemm(
        S::one(),
        MatRef::new(dy, rows, out).t(),
        MatRef::new(x, rows, inp),
        S::one(),
        MatMut::new(dw, out, inp),
    );
    col_sum_into(db, dy);
    if !want_dx {
        return Vec::new();
    }
    let mut dx = vec![S::zero(); rows * inp];
    gemm(
        S::one(),
        MatRef::new(dy, rows, out),
        MatRef::new(w, out, inp),
        S::zero(),
        MatMut::new(&mut dx, rows, inp),
    );
    dx
}

/// Row-wise layer norm; returns `(y, xhat, rstd)`.
fn layer_norm<S: Scalar>(x: &[S], d: usize, w: &[S], b: &[S]) -> (Vec<S>, Vec<S>, Vec<S>) {
    let rows = x.len() / d;
    let mut y = vec![S::zero(); x.len()];
    let mut xhat = vec![S::zero(); x.len()];
    let mut rstd = vec![S::zero(); rows];
    let inv_d = S::one() / S::of(d as f64);
    let eps = S::of(LN_EPS);
    for r in 0..rows {
        let row = &x[r * d..(r + 1) * d];
        let mean = row.iter().copied().sum::<S>() * inv_d;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() * inv_d;
        let rs = S::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let xh = (row[j] - mean) * rs;
            xhat[r * d + j] = xh;
            y[r * d + j] = xh * w[j] + b[j];
        }
    }
    (y, xhat, rstd)
}

/// Accumulates `dw`, `db` and adds the input gradient into `dx`.
#[allow(clippy::too_many_arguments)]
fn layer_norm_backward<S: Scalar>(
    dy: &[S],
    xhat: &[S],
    rstd: &[S],
    d: usize,
    w: &[S],
    dw: &mut [S],
    db: &mut [S],
    dx: &mut [S],
) {
    let inv_d = S::one() / S::of(d as f64);
    let mut dxhat = vec![S::zero(); d];
    for r in 0..rstd.len() {
        let dyr = &dy[r * d..(r + 1) * d];
        let xr = &xhat[r * d..(r + 1) * d];
        let mut mean_dxhat = S::zero();
        let mut mean_dxhat_x = S::zero();
        for j in 0..d {
            dw[j] += dyr[j] * xr[j];
            db[j] += dyr[j];
            dxhat[j] = dyr[j] * w[j];
            mean_dxhat += dxhat[j];
            mean_dxhat_x += dxhat[j] * xr[j];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_x *= inv_d;
        let rs = rstd[r];
        for j in 0..d {
            dx[r * d + j] += rs * (dxhat[j] - mean_dxhat - xr[j] * mean_dxhat_x);
        }
    }
}

#[inline]
fn gelu<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    half * x * (S::one() + (x * S::FRAC_1_SQRT_2()).erf())
}

#[inline]
fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = S::of(0.5);
    let cdf = half * (S::one() + (x * S::FRAC_1_SQRT_2()).erf());
    let pdf = (-half * x * x).exp() * S::FRAC_1_SQRT_2() * S::FRAC_2_SQRT_PI() * half;
    cdf + x * pdf
}

/// In-place numerically stable softmax of one row.
pub(crate) fn softmax_row<S: Scalar>(row: &mut [S]) {
    let max = row.iter().copied().fold(S::neg_infinity(), S::max);
    let mut sum = S::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = S::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// Unfolds `[n, C, H, W]` images into `[n * G^2, C * P * P]` patch rows.
fn extract_patches<S: Scalar>(cfg: &ModelConfig, images: &[S], n: usize) -> Vec<S> {
    let (c, p, g, h) = (cfg.in_channels, cfg.patch_size, cfg.grid(), cfg.img_size);
    let plen = cfg.patch_len();
    let mut out = vec![S::zero(); n * g * g * plen];
    for s in 0..n {
        let img = &images[s * c * h * h..(s + 1) * c * h * h];
        for gy in 0..g {
            for gx in 0..g {
                let row = &mut out[((s * g + gy) * g + gx) * plen..][..plen];
                let mut i = 0;
                for ch in 0..c {
                    for py in 0..p {
                        let src = ch * h * h + (gy * p + py) * h + gx * p;
                        row[i..i + p].copy_from_slice(&img[src..src + p]);
                        i += p;
                    }
                }
            }
        }
    }
    out
}

fn forward_chunk<S: Scalar>(w: &Weights<'_, S>, images: &[S], n: usize) -> ChunkForward<S> {
    let cfg = w.cfg;
    let d = cfg.embed_dim;
    let t = cfg.num_tokens();
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let hd = cfg.hidden_dim();
    let rows = n * t;
    let np = cfg.num_patches();
    let scale = S::one() / S::of(dh as f64).sqrt();

    let patches = extract_patches(cfg, images, n);
    let emb = linear(&patches, n * np, w.patch_w, w.patch_b, d, cfg.patch_len());
    let mut x = vec![S::zero(); rows * d];
    for s in 0..n {
        for j in 0..d {
            x[s * t * d + j] = w.cls[j] + w.pos[j];
        }
        for p in 0..np {
            let dst = (s * t + 1 + p) * d;
            let src = (s * np + p) * d;
            for j in 0..d {
                x[dst + j] = emb[src + j] + w.pos[(1 + p) * d + j];
            }
        }
    }

    let mut caches = Vec::with_capacity(cfg.depth);
    for blk in &w.blocks {
        let (h1, xhat1, rstd1) = layer_norm(&x, d, blk.n1w, blk.n1b);
        let qkv = linear(&h1, rows, blk.qkv_w, blk.qkv_b, 3 * d, d);
        let mut probs = vec![S::zero(); n * heads * t * t];
        let mut ctx = vec![S::zero(); rows * d];
        for s in 0..n {
            let q_rows = &qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
            let ctx_rows = &mut ctx[s * t * d..(s + 1) * t * d];
            for hh in 0..heads {
                let a = &mut probs[(s * heads + hh) * t * t..][..t * t];
                gemm(
                    scale,
                    MatRef::columns(q_rows, t, 3 * d, hh * dh, dh),
                    MatRef::columns(q_rows, t, 3 * d, d + hh * dh, dh).t(),
                    S::zero(),
                    MatMut::new(a, t, t),
                );
                for row in a.chunks_mut(t) {
                    softmax_row(row);
                }
                gemm(
                    S::one(),
                    MatRef::new(a, t, t),
                    MatRef::columns(q_rows, t, 3 * d, 2 * d + hh * dh, dh),
                    S::zero(),
                    MatMut::columns(ctx_rows, t, d, hh * dh, dh),
                );
            }
        }
        let attn_out = linear(&ctx, rows, blk.proj_w, blk.proj_b, d, d);
        for (xv, a) in x.iter_mut().zip(&attn_out) {
            *xv += *a;
        }
        let (h2, xhat2, rstd2) = layer_norm(&x, d, blk.n2w, blk.n2b);
        let pre = linear(&h2, rows, blk.fc1_w, blk.fc1_b, hd, d);
        let act: Vec<S> = pre.iter().map(|&v| gelu(v)).collect();
        let mlp_out = linear(&act, rows, blk.fc2_w, blk.fc2_b, d, hd);
        for (xv, m) in x.iter_mut().zip(&mlp_out) {
            *xv += *m;
        }
        caches.push(BlockCache {
            xhat1,
            rstd1,
            h1,
            qkv,
            probs,
            ctx,
            xhat2,
            rstd2,
            h2,
            pre,
            act,
        });
    }

    let (out, xhatf, rstdf) = layer_norm(&x, d, w.norm_w, w.norm_b);
    let mut feats = vec![S::zero(); n * d];
    for s in 0..n {
        feats[s * d..(s + 1) * d].copy_from_slice(&out[s * t * d..s * t * d + d]);
    }
    let logits = linear(&feats, n, w.head_w, w.head_b, cfg.num_classes, d);
    ChunkForward {
        n,
        patches,
        blocks: caches,
        xhatf,
        rstdf,
        feats,
        logits,
    }
}

/// Mean-reduction-ready cross entropy: returns the summed loss over rows and
/// writes `(softmax - onehot) * grad_scale` into `dlogits`.
pub(crate) fn cross_entropy<S: Scalar>(
    logits: &[S],
    k: usize,
    labels: &[Level],
    grad_scale: S,
    dlogits: &mut [S],
) -> S {
    let mut total = S::zero();
    for (i, row) in logits.chunks(k).enumerate() {
        let target = labels[i].index();
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<S>().ln() + max;
        total += lse - row[target];
        let drow = &mut dlogits[i * k..(i + 1) * k];
        for j in 0..k {
            drow[j] = (row[j] - lse).exp() * grad_scale;
        }
        drow[target] -= grad_scale;
    }
    total
}

/// Backward pass of one chunk; only groups `>= lowest_group` are visited.
fn backward_chunk<S: Scalar>(
    w: &Weights<'_, S>,
    fwd: &ChunkForward<S>,
    dlogits: &[S],
    lowest_group: usize,
    grads: &mut Grads<S>,
) {
    let cfg = w.cfg;
    let d = cfg.embed_dim;
    let t = cfg.num_tokens();
    let n = fwd.n;
    let rows = n * t;
    let heads = cfg.num_heads;
    let dh = cfg.head_dim();
    let hd = cfg.hidden_dim();
    let np = cfg.num_patches();
    let k = cfg.num_classes;
    let scale = S::one() / S::of(dh as f64).sqrt();
    let depth = cfg.depth;

    let dfeat = linear_backward(
        dlogits,
        &fwd.feats,
        n,
        w.head_w,
        k,
        d,
        &mut grads.head_w,
        &mut grads.head_b,
        true,
    );
    // only class-token rows reach the head
    let mut dy_norm = vec![S::zero(); rows * d];
    for s in 0..n {
        dy_norm[s * t * d..s * t * d + d].copy_from_slice(&dfeat[s * d..(s + 1) * d]);
    }
    let mut dx = vec![S::zero(); rows * d];
    layer_norm_backward(
        &dy_norm,
        &fwd.xhatf,
        &fwd.rstdf,
        d,
        w.norm_w,
        &mut grads.norm_w,
        &mut grads.norm_b,
        &mut dx,
    );
    if lowest_group > depth {
        return;
    }

    for b in (0..depth).rev() {
        if b + 1 < lowest_group {
            return;
        }
        let blk = &w.blocks[b];
        let c = &fwd.blocks[b];
        let g = &mut grads.blocks[b];

        // MLP branch
        let dact = linear_backward(&dx, &c.act, rows, blk.fc2_w, d, hd, &mut g.fc2_w, &mut g.fc2_b, true);
        let dpre: Vec<S> = dact
            .iter()
            .zip(&c.pre)
            .map(|(&da, &p)| da * gelu_grad(p))
            .collect();
        let dh2 = linear_backward(&dpre, &c.h2, rows, blk.fc1_w, hd, d, &mut g.fc1_w, &mut g.fc1_b, true);
        layer_norm_backward(&dh2, &c.xhat2, &c.rstd2, d, blk.n2w, &mut g.n2w, &mut g.n2b, &mut dx);

        // attention branch
        let dctx = linear_backward(&dx, &c.ctx, rows, blk.proj_w, d, d, &mut g.proj_w, &mut g.proj_b, true);
        let mut dqkv = vec![S::zero(); rows * 3 * d];
        let mut da = vec![S::zero(); t * t];
        for s in 0..n {
            let qkv = &c.qkv[s * t * 3 * d..(s + 1) * t * 3 * d];
            let dctx_s = &dctx[s * t * d..(s + 1) * t * d];
            let dqkv_s = &mut dqkv[s * t * 3 * d..(s + 1) * t * 3 * d];
            for hh in 0..heads {
                let a = &c.probs[(s * heads + hh) * t * t..][..t * t];
                let d_out = MatRef::columns(dctx_s, t, d, hh * dh, dh);
                // dA = dO V^T
                gemm(
                    S::one(),
                    d_out,
                    MatRef::columns(qkv, t, 3 * d, 2 * d + hh * dh, dh).t(),
                    S::zero(),
                    MatMut::new(&mut da, t, t),
                );
                // dV = A^T dO
                gemm(
                    S::one(),
                    MatRef::new(a, t, t).t(),
                    d_out,
                    S::zero(),
                    MatMut::columns(dqkv_s, t, 3 * d, 2 * d + hh * dh, dh),
                );
                // softmax backward, in place on dA
                for (drow, arow) in da.chunks_mut(t).zip(a.chunks(t)) {
                    let dot = drow.iter().zip(arow).map(|(&x, &y)| x * y).sum::<S>();
                    for (dv, &av) in drow.iter_mut().zip(arow) {
                        *dv = av * (*dv - dot);
                    }
                }
                // dQ = scale dS K
                gemm(
                    scale,
                    MatRef::new(&da, t, t),
                    MatRef::columns(qkv, t, 3 * d, d + hh * dh, dh),
                    S::zero(),
                    MatMut::columns(dqkv_s, t, 3 * d, hh * dh, dh),
                );
                // dK = scale dS^T Q
                gemm(
                    scale,
                    MatRef::new(&da, t, t).t(),
                    MatRef::columns(qkv, t, 3 * d, hh * dh, dh),
                    S::zero(),
                    MatMut::columns(dqkv_s, t, 3 * d, d + hh * dh, dh),
                );
            }
        }
        let dh1 = linear_backward(&dqkv, &c.h1, rows, blk.qkv_w, 3 * d, d, &mut g.qkv_w, &mut g.qkv_b, true);
        layer_norm_backward(&dh1, &c.xhat1, &c.rstd1, d, blk.n1w, &mut g.n1w, &mut g.n1b, &mut dx);
    }

    if lowest_group > 0 {
        return;
    }
    let mut demb = vec![S::zero(); n * np * d];
    for s in 0..n {
        let base = s * t * d;
        for j in 0..d {
            grads.cls[j] += dx[base + j];
        }
        for (gp, v) in grads.pos.iter_mut().zip(&dx[base..base + t * d]) {
            *gp += *v;
        }
        demb[s * np * d..(s + 1) * np * d].copy_from_slice(&dx[base + d..base + t * d]);
    }
    linear_backward(
        &demb,
        &fwd.patches,
        n * np,
        w.patch_w,
        d,
        cfg.patch_len(),
        &mut grads.patch_w,
        &mut grads.patch_b,
        false,
    );
}

fn check_images<S: Scalar>(cfg: &ModelConfig, images: &Tensor<S>) -> Result<usize> {
    let s = images.shape();
    let want = [cfg.in_channels, cfg.img_size, cfg.img_size];
    if s.len() != 4 || s[1..] != want {
        return Err(Error::Shape(format!(
            "images have shape {:?}, model expects [B, {}, {}, {}]",
            s, want[0], want[1], want[2]
        )));
    }
    Ok(s[0])
}

fn chunk_ranges(b: usize) -> Vec<(usize, usize)> {
    (0..b)
        .step_by(CHUNK)
        .map(|start| (start, (start + CHUNK).min(b)))
        .collect()
}

/// Batched forward pass over `[B, C, H, W]` images.
pub fn forward<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    images: &Tensor<S>,
    capture_attention: bool,
) -> Result<ForwardTrace<S>> {
    let w = Weights::bind(cfg, params)?;
    let b = check_images(cfg, images)?;
    let per = cfg.in_channels * cfg.img_size * cfg.img_size;
    let chunks: Vec<ChunkForward<S>> = chunk_ranges(b)
        .into_par_iter()
        .map(|(lo, hi)| forward_chunk(&w, &images.data()[lo * per..hi * per], hi - lo))
        .collect();

    let d = cfg.embed_dim;
    let k = cfg.num_classes;
    let t = cfg.num_tokens();
    let heads = cfg.num_heads;
    let mut logits = Vec::with_capacity(b * k);
    let mut feats = Vec::with_capacity(b * d);
    let mut attention = capture_attention
        .then(|| vec![Vec::with_capacity(b * heads * t * t); cfg.depth]);
    for c in &chunks {
        logits.extend_from_slice(&c.logits);
        feats.extend_from_slice(&c.feats);
        if let Some(layers) = attention.as_mut() {
            for (layer, cache) in layers.iter_mut().zip(&c.blocks) {
                layer.extend_from_slice(&cache.probs);
            }
        }
    }
    let attention = match attention {
        Some(layers) => Some(
            layers
                .into_iter()
                .map(|data| Tensor::from_vec(&[b, heads, t, t], data))
                .collect::<Result<Vec<_>>>()?,
        ),
        None => None,
    };
    Ok(ForwardTrace {
        logits: Tensor::from_vec(&[b, k], logits)?,
        cls_features: Tensor::from_vec(&[b, d], feats)?,
        attention,
        grid: cfg.grid(),
    })
}

/// Layer group of a canonical name: 0 for the embeddings, `b + 1` for block
/// `b`, `depth + 1` for the final norm and the head.
pub fn layer_group(name: &str, depth: usize) -> Option<usize> {
    match name {
        "cls_token" | "pos_embed" => Some(0),
        n if n.starts_with("patch_embed.") => Some(0),
        n if n.starts_with("norm.") || n.starts_with("head.") => Some(depth + 1),
        n => {
            let rest = n.strip_prefix("blocks.")?;
            let idx: usize = rest.split('.').next()?.parse().ok()?;
            (idx < depth).then_some(idx + 1)
        }
    }
}

/// Mean softmax cross-entropy over the batch and its gradient with respect
/// to every parameter accepted by `trainable`.
pub fn loss_and_grads<S: Scalar>(
    cfg: &ModelConfig,
    params: &ParamSet<S>,
    images: &Tensor<S>,
    labels: &[Level],
    trainable: &(dyn Fn(&str) -> bool + Sync),
) -> Result<(S, ParamSet<S>)> {
    let w = Weights::bind(cfg, params)?;
    let b = check_images(cfg, images)?;
    if labels.len() != b {
        return Err(Error::Shape(format!("{} labels for {} images", labels.len(), b)));
    }
    if b == 0 {
        return Err(Error::Shape("empty batch".into()));
    }
    if labels.iter().any(|l| l.index() >= cfg.num_classes) {
        return Err(Error::Config("label exceeds num_classes".into()));
    }
    let lowest_group = param_schema(cfg)
        .iter()
        .filter(|(n, _)| trainable(n))
        .filter_map(|(n, _)| layer_group(n, cfg.depth))
        .min()
        .ok_or_else(|| Error::Config("no trainable parameters".into()))?;

    let per = cfg.in_channels * cfg.img_size * cfg.img_size;
    let k = cfg.num_classes;
    let grad_scale = S::one() / S::of(b as f64);
    let parts: Vec<(S, Grads<S>)> = chunk_ranges(b)
        .into_par_iter()
        .map(|(lo, hi)| {
            let n = hi - lo;
            let fwd = forward_chunk(&w, &images.data()[lo * per..hi * per], n);
            let mut dlogits = vec![S::zero(); n * k];
            let loss = cross_entropy(&fwd.logits, k, &labels[lo..hi], grad_scale, &mut dlogits);
            let mut g = Grads::zeros(cfg);
            backward_chunk(&w, &fwd, &dlogits, lowest_group, &mut g);
            (loss, g)
        })
        .collect();

    let mut iter = parts.into_iter();
    let (mut loss, mut total) = iter.next().expect("non-empty batch");
    for (l, g) in iter {
        loss += l;
        total.add_assign(&g);
    }
    let grads = total.into_param_set(cfg, trainable)?;
    Ok((loss * grad_scale, grads))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::vit::config::init_params;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny(depth: usize) -> ModelConfig {
        ModelConfig {
            img_size: 16,
            patch_size: 8,
            embed_dim: 8,
            depth,
            num_heads: 2,
            mlp_ratio: 4.0,
            num_classes: 4,
            in_channels: 3,
        }
    }

    fn random_images(cfg: &ModelConfig, b: usize, seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = b * cfg.in_channels * cfg.img_size * cfg.img_size;
        Tensor::from_vec(
            &[b, cfg.in_channels, cfg.img_size, cfg.img_size],
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn zero_head_weight_gives_bias_logits() {
        let cfg = tiny(1);
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        p.get_mut("head.bias")
            .unwrap()
            .data_mut()
            .copy_from_slice(&[0.1, -0.2, 0.3, 0.7]);
        let tr = forward(&cfg, &p, &random_images(&cfg, 3, 2), false).unwrap();
        for row in tr.logits.data().chunks(4) {
            assert_eq!(row, &[0.1, -0.2, 0.3, 0.7]);
        }
        assert!(tr.attention.is_none());
    }

    #[test]
    fn uniform_logits_give_ln4() {
        let cfg = tiny(1);
        let mut p = init_params::<f64>(&cfg, 1).unwrap();
        p.get_mut("head.weight").unwrap().data_mut().fill(0.0);
        let labels = [Level::new(1).unwrap(), Level::new(4).unwrap()];
        let (loss, _) =
            loss_and_grads(&cfg, &p, &random_images(&cfg, 2, 5), &labels, &|_| true).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let cfg = tiny(2);
        let p = init_params::<f32>(&cfg, 4).unwrap();
        let imgs = random_images(&cfg, 20, 9).cast::<f32>();
        let tr = forward(&cfg, &p, &imgs, true).unwrap();
        let att = tr.attention.as_ref().unwrap();
        assert_eq!(att.len(), 2);
        for layer in att {
            assert_eq!(layer.shape(), &[20, 2, 5, 5]);
            for row in layer.data().chunks(5) {
                let s: f32 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-5);
                assert!(row.iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn forward_is_bit_reproducible() {
        let cfg = tiny(2);
        let p = init_params::<f32>(&cfg, 4).unwrap();
        let imgs = random_images(&cfg, 33, 1).cast::<f32>();
        let a = forward(&cfg, &p, &imgs, false).unwrap();
        let b = forward(&cfg, &p, &imgs, false).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.cls_features, b.cls_features);
    }

    #[test]
    fn batch_results_do_not_depend_on_chunking() {
        let cfg = tiny(1);
        let p = init_params::<f64>(&cfg, 4).unwrap();
        let imgs = random_images(&cfg, 20, 1);
        let all = forward(&cfg, &p, &imgs, false).unwrap();
        let per = 3 * 16 * 16;
        let single = Tensor::from_vec(&[1, 3, 16, 16], imgs.data()[17 * per..18 * per].to_vec()).unwrap();
        let one = forward(&cfg, &p, &single, false).unwrap();
        assert_eq!(&all.logits.data()[17 * 4..18 * 4], one.logits.data());
    }

    #[test]
    fn wrong_image_shape_is_rejected() {
        let cfg = tiny(1);
        let p = init_params::<f32>(&cfg, 0).unwrap();
        let imgs = Tensor::<f32>::zeros(&[2, 3, 32, 32]);
        let err = forward(&cfg, &p, &imgs, false).unwrap_err();
        assert!(matches!(err, Error::Shape(_)));
        assert!(err.to_string().contains("[2, 3, 32, 32]"));
    }

    #[test]
    fn frozen_names_get_no_gradient() {
        let cfg = tiny(2);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let labels = [Level::new(2).unwrap()];
        let (_, g) = loss_and_grads(&cfg, &p, &random_images(&cfg, 1, 3), &labels, &|n: &str| {
            !n.starts_with("blocks.0.") && layer_group(n, 2) != Some(0)
        })
        .unwrap();
        assert!(!g.contains("blocks.0.attn.qkv.weight"));
        assert!(!g.contains("pos_embed"));
        assert!(g.contains("blocks.1.attn.qkv.weight"));
        assert!(g.contains("head.weight"));
    }

    #[test]
    fn no_trainable_parameters_is_an_error() {
        let cfg = tiny(1);
        let p = init_params::<f64>(&cfg, 0).unwrap();
        let labels = [Level::new(2).unwrap()];
        assert!(loss_and_grads(&cfg, &p, &random_images(&cfg, 1, 3), &labels, &|_| false).is_err());
    }

    #[test]
    fn layer_groups() {
        assert_eq!(layer_group("pos_embed", 12), Some(0));
        assert_eq!(layer_group("patch_embed.bias", 12), Some(0));
        assert_eq!(layer_group("blocks.11.mlp.fc1.weight", 12), Some(12));
        assert_eq!(layer_group("norm.weight", 12), Some(13));
        assert_eq!(layer_group("head.bias", 12), Some(13));
        assert_eq!(layer_group("blocks.12.norm1.weight", 12), None);
        assert_eq!(layer_group("bogus", 12), None);
    }

    #[test]
    fn gelu_derivative_matches_difference() {
        for &x in &[-3.0f64, -0.7, 0.0, 0.4, 2.5] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8);
        }
    }
}
