//! Packed forward and reverse-mode passes.
//!
//! Several sequences are packed side by side into one `d × N` matrix so the
//! dense projections run as a single product; attention is applied per
//! segment with a causal mask.

use nalgebra::{DMatrix, DVector};

use super::{Block, HiddenTrace, LayerNorm, PatchSite, PatchSpec, ToyLm};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// An additive patch addressed by segment index within a packed batch.
#[derive(Debug, Clone)]
pub struct SitePatch {
    pub segment: usize,
    pub position: usize,
    pub layer: usize,
    pub site: PatchSite,
    pub delta: DVector<f64>,
}

impl SitePatch {
    pub fn from_spec(segment: usize, spec: &PatchSpec) -> Self {
        SitePatch {
            segment,
            position: spec.position,
            layer: spec.layer,
            site: spec.site,
            delta: spec.delta.clone(),
        }
    }
}

/// Attention keys and values of leading positions that are held fixed, so a
/// pass can recompute only the trailing (live) columns of each segment.
#[derive(Debug, Clone)]
pub struct FrozenPrefix {
    pub start_layer: usize,
    /// Column range of each segment's frozen positions in `k` and `v`.
    pub cols: Vec<Segment>,
    k: Vec<DMatrix<f64>>,
    v: Vec<DMatrix<f64>>,
}

/// Selects the live columns `[split_i, len_i)` of every segment.
pub fn live_columns(m: &DMatrix<f64>, segments: &[Segment], split: &[usize]) -> (DMatrix<f64>, Vec<Segment>) {
    let n: usize = segments.iter().zip(split).map(|(s, &t)| s.len - t).sum();
    let mut out = DMatrix::zeros(m.nrows(), n);
    let mut live = Vec::with_capacity(segments.len());
    let mut col = 0;
    for (s, &t) in segments.iter().zip(split) {
        let len = s.len - t;
        out.columns_mut(col, len).copy_from(&m.columns(s.start + t, len));
        live.push(Segment { start: col, len });
        col += len;
    }
    (out, live)
}

fn gather_columns(m: &DMatrix<f64>, segments: &[Segment], split: &[usize]) -> (DMatrix<f64>, Vec<Segment>) {
    let n: usize = split.iter().sum();
    let mut out = DMatrix::zeros(m.nrows(), n);
    let mut cols = Vec::with_capacity(segments.len());
    let mut col = 0;
    for (s, &t) in segments.iter().zip(split) {
        out.columns_mut(col, t).copy_from(&m.columns(s.start, t));
        cols.push(Segment { start: col, len: t });
        col += t;
    }
    (out, cols)
}

/// Per-head `[frozen | live]` column block of a key or value matrix.
fn head_block(
    live: &DMatrix<f64>,
    frozen: Option<(&DMatrix<f64>, Segment)>,
    row: usize,
    dh: usize,
    seg: Segment,
) -> DMatrix<f64> {
    let o = frozen.map_or(0, |(_, c)| c.len);
    let mut out = DMatrix::zeros(dh, o + seg.len);
    if let Some((m, c)) = frozen {
        out.columns_mut(0, o).copy_from(&m.view((row, c.start), (dh, o)));
    }
    out.columns_mut(o, seg.len).copy_from(&live.view((row, seg.start), (dh, seg.len)));
    out
}

#[derive(Debug, Clone)]
struct LnCache {
    xhat: DMatrix<f64>,
    rstd: Vec<f64>,
    out: DMatrix<f64>,
}

#[derive(Debug, Clone)]
struct LayerCache {
    input: DMatrix<f64>,
    ln1: LnCache,
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// `probs[segment][head]` is `len × (frozen + len)`; live row i attends
    /// over columns j ≤ frozen + i.
    probs: Vec<Vec<DMatrix<f64>>>,
    concat: DMatrix<f64>,
    attn_out: DMatrix<f64>,
    ln2: LnCache,
    pre: DMatrix<f64>,
    act: DMatrix<f64>,
    mlp_out: DMatrix<f64>,
    output: DMatrix<f64>,
}

/// Everything a forward pass produced, kept for the reverse pass.
#[derive(Debug, Clone)]
pub struct Cache {
    pub segments: Vec<Segment>,
    pub tokens: Vec<Vec<usize>>,
    pub start_layer: usize,
    frozen: Option<FrozenPrefix>,
    layers: Vec<LayerCache>,
    ln_final: LnCache,
    /// `vocab × N`
    pub logits: DMatrix<f64>,
}

impl Cache {
    fn layer(&self, l: usize) -> &LayerCache {
        &self.layers[l - self.start_layer]
    }

    /// Block output of layer `l` for one segment (`d × len`).
    pub fn hidden(&self, l: usize, seg: usize) -> DMatrix<f64> {
        let s = self.segments[seg];
        self.layer(l).output.columns(s.start, s.len).into_owned()
    }

    pub fn hidden_at(&self, l: usize, seg: usize, pos: usize) -> DVector<f64> {
        let s = self.segments[seg];
        self.layer(l).output.column(s.start + pos).into_owned()
    }

    pub fn key_at(&self, l: usize, seg: usize, pos: usize) -> DVector<f64> {
        let s = self.segments[seg];
        self.layer(l).act.column(s.start + pos).into_owned()
    }

    pub fn mlp_out_at(&self, l: usize, seg: usize, pos: usize) -> DVector<f64> {
        let s = self.segments[seg];
        self.layer(l).mlp_out.column(s.start + pos).into_owned()
    }

    pub fn attn_at(&self, l: usize, seg: usize, pos: usize) -> DVector<f64> {
        let s = self.segments[seg];
        self.layer(l).attn_out.column(s.start + pos).into_owned()
    }

    /// Input to layer `l` (`d × N`).
    pub fn layer_input(&self, l: usize) -> &DMatrix<f64> {
        &self.layer(l).input
    }

    /// Output of layer `l` for all packed columns (`d × N`).
    pub fn layer_output(&self, l: usize) -> &DMatrix<f64> {
        &self.layer(l).output
    }

    /// Final-layer output for all packed columns.
    pub fn last_hidden(&self) -> &DMatrix<f64> {
        &self.layers.last().expect("at least one layer").output
    }

    /// All key activations at layer `l` (`d_mlp × N`).
    pub fn keys(&self, l: usize) -> &DMatrix<f64> {
        &self.layer(l).act
    }

    /// Freezes the first `split[i]` positions of every segment from `from_layer` up.
    pub fn freeze(&self, from_layer: usize, split: &[usize]) -> FrozenPrefix {
        assert!(self.frozen.is_none() && from_layer >= self.start_layer);
        let mut k = Vec::new();
        let mut v = Vec::new();
        let mut cols = Vec::new();
        for l in from_layer..self.start_layer + self.layers.len() {
            let c = self.layer(l);
            let (kk, cc) = gather_columns(&c.k, &self.segments, split);
            k.push(kk);
            v.push(gather_columns(&c.v, &self.segments, split).0);
            cols = cc;
        }
        if cols.is_empty() {
            cols = split.iter().map(|&t| Segment { start: 0, len: t }).collect();
        }
        FrozenPrefix {
            start_layer: from_layer,
            cols,
            k,
            v,
        }
    }

    pub fn logits_of(&self, seg: usize) -> DMatrix<f64> {
        let s = self.segments[seg];
        self.logits.columns(s.start, s.len).into_owned()
    }

    pub fn trace(&self, seg: usize) -> HiddenTrace {
        let s = self.segments[seg];
        let take = |m: &DMatrix<f64>| m.columns(s.start, s.len).into_owned();
        HiddenTrace {
            hidden: self.layers.iter().map(|c| take(&c.output)).collect(),
            attn: self.layers.iter().map(|c| take(&c.attn_out)).collect(),
            keys: self.layers.iter().map(|c| take(&c.act)).collect(),
            mlp_out: self.layers.iter().map(|c| take(&c.mlp_out)).collect(),
        }
    }
}

/// Gradients produced by the reverse pass, indexed by absolute layer.
#[derive(Debug, Clone)]
pub struct Backward {
    pub start_layer: usize,
    pub segments: Vec<Segment>,
    /// Gradient with respect to the input of `start_layer`.
    pub d_input: DMatrix<f64>,
    /// Gradient with respect to each layer's post-attention residual.
    d_mid: Vec<DMatrix<f64>>,
    /// Gradient with respect to each layer's block output.
    d_post: Vec<DMatrix<f64>>,
}

impl Backward {
    /// `∂loss/∂delta` for a patch at segment 0.
    pub fn site_grad(&self, site: PatchSite, layer: usize, position: usize) -> DVector<f64> {
        self.site_grad_seg(site, layer, 0, position)
    }

    pub fn site_grad_seg(
        &self,
        site: PatchSite,
        layer: usize,
        seg: usize,
        position: usize,
    ) -> DVector<f64> {
        let col = self.segments[seg].start + position;
        let i = layer - self.start_layer;
        match site {
            PatchSite::HiddenState | PatchSite::MlpOutput => self.d_post[i].column(col).into_owned(),
            PatchSite::AttnOutput => self.d_mid[i].column(col).into_owned(),
        }
    }

    pub fn check_finite(&self) -> Result<()> {
        for (i, m) in self.d_post.iter().enumerate() {
            if let Some(idx) = m.iter().position(|v| !v.is_finite()) {
                let pos = idx / m.nrows();
                return Err(Error::numeric(format!(
                    "non-finite gradient at layer {} column {pos}",
                    i + self.start_layer
                )));
            }
        }
        Ok(())
    }
}

fn add_bias(m: &mut DMatrix<f64>, b: &DMatrix<f64>) {
    let b = b.column(0);
    for mut c in m.column_iter_mut() {
        c += &b;
    }
}

fn row_sums_into(acc: &mut DMatrix<f64>, m: &DMatrix<f64>) {
    let mut a = acc.column_mut(0);
    for c in m.column_iter() {
        a += c;
    }
}

fn layer_norm(ln: &LayerNorm, x: &DMatrix<f64>) -> LnCache {
    let d = x.nrows();
    let mut xhat = x.clone();
    let mut rstd = Vec::with_capacity(x.ncols());
    for mut c in xhat.column_iter_mut() {
        let mean = c.sum() / d as f64;
        c.add_scalar_mut(-mean);
        let var = c.norm_squared() / d as f64;
        let r = 1.0 / (var + LN_EPS).sqrt();
        c *= r;
        rstd.push(r);
    }
    let mut out = xhat.clone();
    let g = ln.gamma.column(0);
    let b = ln.beta.column(0);
    for mut c in out.column_iter_mut() {
        c.component_mul_assign(&g);
        c += &b;
    }
    LnCache { xhat, rstd, out }
}

fn layer_norm_backward(
    ln: &LayerNorm,
    cache: &LnCache,
    dy: &DMatrix<f64>,
    grads: Option<&mut LayerNorm>,
) -> DMatrix<f64> {
    let d = dy.nrows() as f64;
    if let Some(g) = grads {
        for (dyc, xc) in dy.column_iter().zip(cache.xhat.column_iter()) {
            let mut gc = g.gamma.column_mut(0);
            gc += dyc.component_mul(&xc);
            let mut bc = g.beta.column_mut(0);
            bc += dyc;
        }
    }
    let gamma = ln.gamma.column(0);
    let mut dx = dy.clone();
    for (j, mut c) in dx.column_iter_mut().enumerate() {
        c.component_mul_assign(&gamma);
        let xh = cache.xhat.column(j);
        let m1 = c.sum() / d;
        let m2 = c.dot(&xh) / d;
        let r = cache.rstd[j];
        for i in 0..c.len() {
            c[i] = r * (c[i] - m1 - xh[i] * m2);
        }
    }
    dx
}

fn gelu(u: f64) -> f64 {
    0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh())
}

fn gelu_grad(u: f64) -> f64 {
    let th = (GELU_C * (u + 0.044715 * u * u * u)).tanh();
    0.5 * (1.0 + th) + 0.5 * u * (1.0 - th * th) * GELU_C * (1.0 + 3.0 * 0.044715 * u * u)
}

fn apply_patches(
    m: &mut DMatrix<f64>,
    patches: &[SitePatch],
    segments: &[Segment],
    layer: usize,
    site: PatchSite,
) {
    for p in patches.iter().filter(|p| p.layer == layer && p.site == site) {
        let col = segments[p.segment].start + p.position;
        let mut c = m.column_mut(col);
        c += &p.delta;
    }
}

impl ToyLm {
    /// Token + position embeddings for packed sequences.
    pub fn embed(&self, seqs: &[&[usize]]) -> (DMatrix<f64>, Vec<Segment>) {
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        let d = self.config.d_model;
        let mut x = DMatrix::zeros(d, n);
        let mut segments = Vec::with_capacity(seqs.len());
        let mut col = 0;
        for s in seqs {
            segments.push(Segment {
                start: col,
                len: s.len(),
            });
            for (p, &t) in s.iter().enumerate() {
                let mut c = x.column_mut(col);
                c += self.token_embedding.row(t).transpose();
                c += self.positional_embedding.row(p).transpose();
                col += 1;
            }
        }
        (x, segments)
    }

    /// Full forward over packed sequences; inputs must already be validated.
    pub fn run(&self, seqs: &[&[usize]], patches: &[SitePatch]) -> Cache {
        let (x, segments) = self.embed(seqs);
        let tokens = seqs.iter().map(|s| s.to_vec()).collect();
        self.run_from(0, x, segments, tokens, patches, None)
    }

    /// Forward starting at `start_layer` with the given residual input.
    ///
    /// With `frozen`, `input` holds only the live columns of each segment and
    /// attention also reads the frozen keys and values; patch positions are
    /// then relative to the first live column.
    pub fn run_from(
        &self,
        start_layer: usize,
        input: DMatrix<f64>,
        segments: Vec<Segment>,
        tokens: Vec<Vec<usize>>,
        patches: &[SitePatch],
        frozen: Option<&FrozenPrefix>,
    ) -> Cache {
        if let Some(f) = frozen {
            assert_eq!(f.start_layer, start_layer, "frozen prefix starts at another layer");
            assert_eq!(f.cols.len(), segments.len());
        }
        let mut layers = Vec::with_capacity(self.config.n_layers - start_layer);
        let mut x = input;
        for l in start_layer..self.config.n_layers {
            let c = self.layer_forward(l, x, &segments, patches, frozen);
            x = c.output.clone();
            layers.push(c);
        }
        let ln_final = layer_norm(&self.ln_final, &x);
        let logits = self.unembedding.tr_mul(&ln_final.out);
        Cache {
            segments,
            tokens,
            start_layer,
            frozen: frozen.cloned(),
            layers,
            ln_final,
            logits,
        }
    }

    fn layer_forward(
        &self,
        l: usize,
        input: DMatrix<f64>,
        segments: &[Segment],
        patches: &[SitePatch],
        frozen: Option<&FrozenPrefix>,
    ) -> LayerCache {
        let b: &Block = &self.blocks[l];
        let nh = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        let ln1 = layer_norm(&b.ln1, &input);
        let mut q = &b.w_q * &ln1.out;
        add_bias(&mut q, &b.b_q);
        let mut k = &b.w_k * &ln1.out;
        add_bias(&mut k, &b.b_k);
        let mut v = &b.w_v * &ln1.out;
        add_bias(&mut v, &b.b_v);

        let mut concat = DMatrix::zeros(self.config.d_model, input.ncols());
        let mut probs = Vec::with_capacity(segments.len());
        let fz = frozen.map(|f| (&f.k[l - f.start_layer], &f.v[l - f.start_layer], &f.cols));
        for (si, s) in segments.iter().enumerate() {
            let o = fz.map_or(0, |(_, _, c)| c[si].len);
            let mut seg_probs = Vec::with_capacity(nh);
            for h in 0..nh {
                let qh = q.view((h * dh, s.start), (dh, s.len));
                let kh = head_block(&k, fz.map(|(fk, _, c)| (fk, c[si])), h * dh, dh, *s);
                let vh = head_block(&v, fz.map(|(_, fv, c)| (fv, c[si])), h * dh, dh, *s);
                let mut p = qh.tr_mul(&kh) * scale;
                for i in 0..s.len {
                    let last = o + i;
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=last {
                        max = max.max(p[(i, j)]);
                    }
                    let mut sum = 0.0;
                    for j in 0..o + s.len {
                        if j <= last {
                            let e = (p[(i, j)] - max).exp();
                            p[(i, j)] = e;
                            sum += e;
                        } else {
                            p[(i, j)] = 0.0;
                        }
                    }
                    for j in 0..=last {
                        p[(i, j)] /= sum;
                    }
                }
                let out = vh * p.transpose();
                concat.view_mut((h * dh, s.start), (dh, s.len)).copy_from(&out);
                seg_probs.push(p);
            }
            probs.push(seg_probs);
        }
        let mut attn_out = &b.w_o * &concat;
        add_bias(&mut attn_out, &b.b_o);
        apply_patches(&mut attn_out, patches, segments, l, PatchSite::AttnOutput);
        let mid = &input + &attn_out;

        let ln2 = layer_norm(&b.ln2, &mid);
        let mut pre = &b.w_in * &ln2.out;
        add_bias(&mut pre, &b.b_in);
        let act = pre.map(gelu);
        let mut mlp_out = &b.w_out * &act;
        add_bias(&mut mlp_out, &b.b_out);
        apply_patches(&mut mlp_out, patches, segments, l, PatchSite::MlpOutput);
        let mut output = &mid + &mlp_out;
        apply_patches(&mut output, patches, segments, l, PatchSite::HiddenState);

        LayerCache {
            input,
            ln1,
            q,
            k,
            v,
            probs,
            concat,
            attn_out,
            ln2,
            pre,
            act,
            mlp_out,
            output,
        }
    }

    /// Reverse pass from `∂loss/∂logits` down to the cache's start layer.
    ///
    /// When `grads` is given, parameter gradients are accumulated into it
    /// (embedding gradients only when the cache starts at layer 0).
    pub fn backward(
        &self,
        cache: &Cache,
        dlogits: &DMatrix<f64>,
        mut grads: Option<&mut ToyLm>,
    ) -> Backward {
        let hf = &cache.ln_final.out;
        if let Some(g) = grads.as_deref_mut() {
            g.unembedding += hf * dlogits.transpose();
        }
        let d_hf = &self.unembedding * dlogits;
        let mut dx = layer_norm_backward(
            &self.ln_final,
            &cache.ln_final,
            &d_hf,
            grads.as_deref_mut().map(|g| &mut g.ln_final),
        );

        let n_run = cache.layers.len();
        let mut d_mid = vec![DMatrix::zeros(0, 0); n_run];
        let mut d_post = vec![DMatrix::zeros(0, 0); n_run];
        for i in (0..n_run).rev() {
            let l = cache.start_layer + i;
            d_post[i] = dx.clone();
            let (dm, dinp) = self.layer_backward(
                l,
                &cache.layers[i],
                &cache.segments,
                cache.frozen.as_ref(),
                dx,
                grads.as_deref_mut().map(|g| &mut g.blocks[l]),
            );
            d_mid[i] = dm;
            dx = dinp;
        }

        if cache.start_layer == 0 && cache.frozen.is_none() {
            if let Some(g) = grads {
                for (seg, toks) in cache.segments.iter().zip(&cache.tokens) {
                    for (p, &t) in toks.iter().enumerate() {
                        let c = dx.column(seg.start + p);
                        let mut row = g.token_embedding.row_mut(t);
                        row += c.transpose();
                        let mut prow = g.positional_embedding.row_mut(p);
                        prow += c.transpose();
                    }
                }
            }
        }

        Backward {
            start_layer: cache.start_layer,
            segments: cache.segments.clone(),
            d_input: dx,
            d_mid,
            d_post,
        }
    }

    fn layer_backward(
        &self,
        l: usize,
        c: &LayerCache,
        segments: &[Segment],
        frozen: Option<&FrozenPrefix>,
        d_out: DMatrix<f64>,
        mut g: Option<&mut Block>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let b = &self.blocks[l];
        let nh = self.config.n_heads;
        let dh = self.config.head_dim();
        let scale = 1.0 / (dh as f64).sqrt();

        // MLP branch
        let dz = &d_out;
        if let Some(g) = g.as_deref_mut() {
            g.w_out += dz * c.act.transpose();
            row_sums_into(&mut g.b_out, dz);
        }
        let d_act = b.w_out.tr_mul(dz);
        let mut d_pre = d_act;
        d_pre.zip_apply(&c.pre, |dp, u| *dp *= gelu_grad(u));
        if let Some(g) = g.as_deref_mut() {
            g.w_in += &d_pre * c.ln2.out.transpose();
            row_sums_into(&mut g.b_in, &d_pre);
        }
        let d_ln2 = b.w_in.tr_mul(&d_pre);
        let mut d_mid = d_out;
        d_mid += layer_norm_backward(&b.ln2, &c.ln2, &d_ln2, g.as_deref_mut().map(|g| &mut g.ln2));

        // attention branch
        let d_attn = &d_mid;
        if let Some(g) = g.as_deref_mut() {
            g.w_o += d_attn * c.concat.transpose();
            row_sums_into(&mut g.b_o, d_attn);
        }
        let d_concat = b.w_o.tr_mul(d_attn);
        let n = d_concat.ncols();
        let d = self.config.d_model;
        let mut dq = DMatrix::zeros(d, n);
        let mut dk = DMatrix::zeros(d, n);
        let mut dv = DMatrix::zeros(d, n);
        let fz = frozen.map(|f| (&f.k[l - f.start_layer], &f.v[l - f.start_layer], &f.cols));
        for (si, s) in segments.iter().enumerate() {
            let o = fz.map_or(0, |(_, _, c)| c[si].len);
            for h in 0..nh {
                let p = &c.probs[si][h];
                let qh = c.q.view((h * dh, s.start), (dh, s.len));
                let kh = head_block(&c.k, fz.map(|(fk, _, cc)| (fk, cc[si])), h * dh, dh, *s);
                let vh = head_block(&c.v, fz.map(|(_, fv, cc)| (fv, cc[si])), h * dh, dh, *s);
                let dout = d_concat.view((h * dh, s.start), (dh, s.len));
                // dP[i, j] = dout_i · v_j
                let dp = dout.tr_mul(&vh);
                let dvh = dout * p;
                let mut ds = DMatrix::zeros(s.len, o + s.len);
                for i in 0..s.len {
                    let last = o + i;
                    let mut dot = 0.0;
                    for j in 0..=last {
                        dot += dp[(i, j)] * p[(i, j)];
                    }
                    for j in 0..=last {
                        ds[(i, j)] = p[(i, j)] * (dp[(i, j)] - dot) * scale;
                    }
                }
                let dqh = kh * ds.transpose();
                let dkh = qh * &ds;
                dq.view_mut((h * dh, s.start), (dh, s.len)).copy_from(&dqh);
                dk.view_mut((h * dh, s.start), (dh, s.len)).copy_from(&dkh.columns(o, s.len));
                dv.view_mut((h * dh, s.start), (dh, s.len)).copy_from(&dvh.columns(o, s.len));
            }
        }
        if let Some(g) = g.as_deref_mut() {
            let lt = c.ln1.out.transpose();
            g.w_q += &dq * &lt;
            g.w_k += &dk * &lt;
            g.w_v += &dv * &lt;
            row_sums_into(&mut g.b_q, &dq);
            row_sums_into(&mut g.b_k, &dk);
            row_sums_into(&mut g.b_v, &dv);
        }
        let d_ln1 = b.w_q.tr_mul(&dq) + b.w_k.tr_mul(&dk) + b.w_v.tr_mul(&dv);
        let mut d_in = d_mid.clone();
        d_in += layer_norm_backward(&b.ln1, &c.ln1, &d_ln1, g.map(|g| &mut g.ln1));
        (d_mid, d_in)
    }
}
