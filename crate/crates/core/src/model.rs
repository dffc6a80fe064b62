//! Gated three-channel embedding fusion feeding a Pre-LN Transformer
//! encoder-decoder, with hand-written backpropagation.
//!
//! Each residue embedding concatenates a token channel, a projected
//! physicochemical channel and a fixed sinusoidal position channel into `z`;
//! a sigmoid gate rescales `z` elementwise before a linear projector:
//!
//! ```text
//! z = [E_tok(x); W_phys φ̂(x); pos(i)]
//! h = W_f (σ(W_g z + b_g) ⊙ z) + b_f
//! ```
//!
//! With `phys_enabled = false` the physicochemical channel is absent and the
//! descriptor table is never consulted.
//!
//! Sequences are processed one example at a time and only over their non-PAD
//! prefix. PAD keys are masked everywhere, so PAD rows never influence a
//! non-PAD row and skipping them is exact.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{self, LnCache, Mask, Mat};
use crate::params::{impl_parameters, LayerNorm, Linear, Parameters, Tensor};
use crate::physchem::{DescriptorTable, N_DESCRIPTORS};
use crate::vocab::{self, TokenId, TokenSeq, PAD, VOCAB_SIZE};

pub const INIT_STD: f64 = 0.02;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub d_tok: usize,
    pub d_phys: usize,
    pub d_pos: usize,
    pub n_head: usize,
    pub n_enc: usize,
    pub n_dec: usize,
    /// Feed-forward inner width; `None` means `4 * d_model`.
    pub d_ff: Option<usize>,
    pub max_src_len: usize,
    pub max_tgt_len: usize,
    pub phys_enabled: bool,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            d_tok: 64,
            d_phys: 32,
            d_pos: 32,
            n_head: 4,
            n_enc: 2,
            n_dec: 2,
            d_ff: None,
            max_src_len: vocab::SRC_LEN,
            max_tgt_len: vocab::MAX_TGT_LEN,
            phys_enabled: true,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Channel widths in the default 2:1:1 ratio for a total width `d`.
    pub fn with_width(d: usize, n_head: usize) -> Self {
        ModelConfig { d_tok: d / 2, d_phys: d / 4, d_pos: d - d / 2 - d / 4, n_head, ..Self::default() }
    }

    pub fn d_model(&self) -> usize {
        self.d_tok + self.d_pos + if self.phys_enabled { self.d_phys } else { 0 }
    }

    pub fn d_ff(&self) -> usize {
        self.d_ff.unwrap_or(4 * self.d_model())
    }

    pub fn d_head(&self) -> usize {
        self.d_model() / self.n_head
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(m.to_string()));
        if self.d_tok == 0 || self.d_pos == 0 || (self.phys_enabled && self.d_phys == 0) {
            return bad("channel widths must be positive");
        }
        if self.n_head == 0 || !self.d_model().is_multiple_of(self.n_head) {
            return bad("d_model must be divisible by n_head");
        }
        if self.n_enc == 0 || self.n_dec == 0 || self.d_ff() == 0 {
            return bad("layer counts and d_ff must be positive");
        }
        if self.max_src_len != vocab::SRC_LEN || self.max_tgt_len != vocab::MAX_TGT_LEN {
            return bad("sequence lengths are fixed at 55 (source) and 28 (target)");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Fusion {
    /// `[VOCAB_SIZE, d_tok]`
    pub tok_embed: Tensor,
    /// `[d_phys, 5]`; absent when the channel is disabled.
    pub phys_proj: Option<Tensor>,
    pub gate: Linear,
    pub proj: Linear,
}
impl_parameters!(Fusion { tok_embed, phys_proj, gate, proj });

#[derive(Debug, Clone, PartialEq)]
pub struct Attention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
}
impl_parameters!(Attention { q, k, v, o });

#[derive(Debug, Clone, PartialEq)]
pub struct FeedForward {
    pub up: Linear,
    pub down: Linear,
}
impl_parameters!(FeedForward { up, down });

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderLayer {
    pub ln_attn: LayerNorm,
    pub attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}
impl_parameters!(EncoderLayer { ln_attn, attn, ln_ffn, ffn });

#[derive(Debug, Clone, PartialEq)]
pub struct DecoderLayer {
    pub ln_self: LayerNorm,
    pub self_attn: Attention,
    pub ln_cross: LayerNorm,
    pub cross_attn: Attention,
    pub ln_ffn: LayerNorm,
    pub ffn: FeedForward,
}
impl_parameters!(DecoderLayer { ln_self, self_attn, ln_cross, cross_attn, ln_ffn, ffn });

/// Every learnable tensor of the network, plus the config that shaped it.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub config: ModelConfig,
    pub fusion: Fusion,
    pub encoder: Vec<EncoderLayer>,
    pub enc_norm: LayerNorm,
    pub decoder: Vec<DecoderLayer>,
    pub dec_norm: LayerNorm,
    pub head: Linear,
}
impl_parameters!(ModelParams { fusion, encoder, enc_norm, decoder, dec_norm, head });

fn attention_block(d: usize, rng: &mut ChaCha8Rng) -> Attention {
    Attention {
        q: Linear::new(d, d, INIT_STD, rng),
        k: Linear::new(d, d, INIT_STD, rng),
        v: Linear::new(d, d, INIT_STD, rng),
        o: Linear::new(d, d, INIT_STD, rng),
    }
}

fn ffn_block(d: usize, d_ff: usize, rng: &mut ChaCha8Rng) -> FeedForward {
    FeedForward { up: Linear::new(d, d_ff, INIT_STD, rng), down: Linear::new(d_ff, d, INIT_STD, rng) }
}

impl ModelParams {
    /// Seeded initialization: N(0, 0.02²) weights, zero biases, unit
    /// LayerNorm scales.
    pub fn init(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model();
        let d_ff = config.d_ff();
        let fusion = Fusion {
            tok_embed: Tensor::normal(&[VOCAB_SIZE, config.d_tok], INIT_STD, &mut rng),
            phys_proj: config
                .phys_enabled
                .then(|| Tensor::normal(&[config.d_phys, N_DESCRIPTORS], INIT_STD, &mut rng)),
            gate: Linear::new(d, d, INIT_STD, &mut rng),
            proj: Linear::new(d, d, INIT_STD, &mut rng),
        };
        let encoder = (0..config.n_enc)
            .map(|_| EncoderLayer {
                ln_attn: LayerNorm::new(d),
                attn: attention_block(d, &mut rng),
                ln_ffn: LayerNorm::new(d),
                ffn: ffn_block(d, d_ff, &mut rng),
            })
            .collect();
        let decoder = (0..config.n_dec)
            .map(|_| DecoderLayer {
                ln_self: LayerNorm::new(d),
                self_attn: attention_block(d, &mut rng),
                ln_cross: LayerNorm::new(d),
                cross_attn: attention_block(d, &mut rng),
                ln_ffn: LayerNorm::new(d),
                ffn: ffn_block(d, d_ff, &mut rng),
            })
            .collect();
        Ok(ModelParams {
            config: config.clone(),
            fusion,
            encoder,
            enc_norm: LayerNorm::new(d),
            decoder,
            dec_norm: LayerNorm::new(d),
            head: Linear::new(d, VOCAB_SIZE, INIT_STD, &mut rng),
        })
    }

    /// Same layout, all zeros; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.fill(0.0);
        z
    }
}

/// Fixed sinusoidal position code of width `width`.
pub fn sinusoid(pos: usize, width: usize) -> Vec<f64> {
    (0..width)
        .map(|k| {
            let i = (k / 2) as f64;
            let angle = pos as f64 / 10000f64.powf(2.0 * i / width as f64);
            if k % 2 == 0 {
                angle.sin()
            } else {
                angle.cos()
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Fusion

struct FusionRow {
    z: Vec<f64>,
    g: Vec<f64>,
    u: Vec<f64>,
    phi: Option<[f64; N_DESCRIPTORS]>,
}

fn fuse_row(p: &ModelParams, table: &DescriptorTable, id: TokenId, pos: usize, out: &mut [f64]) -> FusionRow {
    let cfg = &p.config;
    let d = cfg.d_model();
    let mut z = Vec::with_capacity(d);
    z.extend_from_slice(p.fusion.tok_embed.row(id));
    let phi = match &p.fusion.phys_proj {
        Some(w) if cfg.phys_enabled => {
            let phi = table.zscore(id);
            for r in 0..cfg.d_phys {
                z.push(nn::dot(w.row(r), &phi));
            }
            Some(phi)
        }
        _ => None,
    };
    z.extend(sinusoid(pos, cfg.d_pos));
    let mut g = vec![0.0; d];
    nn::linear_row(&z, &p.fusion.gate, &mut g);
    g.iter_mut().for_each(|a| *a = nn::sigmoid(*a));
    let u: Vec<f64> = g.iter().zip(&z).map(|(a, b)| a * b).collect();
    nn::linear_row(&u, &p.fusion.proj, out);
    FusionRow { z, g, u, phi }
}

struct FusionCache {
    ids: Vec<TokenId>,
    rows: Vec<FusionRow>,
}

fn fuse(p: &ModelParams, table: &DescriptorTable, ids: &[TokenId]) -> (Mat, FusionCache) {
    let mut h = Mat::zeros(ids.len(), p.config.d_model());
    let rows = ids.iter().enumerate().map(|(i, &id)| fuse_row(p, table, id, i, h.row_mut(i))).collect();
    (h, FusionCache { ids: ids.to_vec(), rows })
}

fn fuse_backward(p: &ModelParams, cache: &FusionCache, dh: &Mat, g: &mut ModelParams) {
    let cfg = &p.config;
    let d = cfg.d_model();
    let u = Mat::from_rows(&cache.rows.iter().map(|r| r.u.clone()).collect::<Vec<_>>());
    let du = nn::linear_backward(&u, &p.fusion.proj, dh, &mut g.fusion.proj);
    let mut da = Mat::zeros(dh.rows, d);
    let mut dz = Mat::zeros(dh.rows, d);
    for (i, row) in cache.rows.iter().enumerate() {
        for k in 0..d {
            let dui = du.get(i, k);
            let gk = row.g[k];
            da.row_mut(i)[k] = dui * row.z[k] * gk * (1.0 - gk);
            dz.row_mut(i)[k] = dui * gk;
        }
    }
    let z = Mat::from_rows(&cache.rows.iter().map(|r| r.z.clone()).collect::<Vec<_>>());
    let dz_gate = nn::linear_backward(&z, &p.fusion.gate, &da, &mut g.fusion.gate);
    dz.add_assign(&dz_gate);
    for (i, row) in cache.rows.iter().enumerate() {
        let dzi = dz.row(i);
        let id = cache.ids[i];
        for (t, v) in g.fusion.tok_embed.row_mut(id).iter_mut().zip(&dzi[..cfg.d_tok]) {
            *t += v;
        }
        if let (Some(phi), Some(gw)) = (row.phi, g.fusion.phys_proj.as_mut()) {
            for r in 0..cfg.d_phys {
                let gr = dzi[cfg.d_tok + r];
                for (w, x) in gw.row_mut(r).iter_mut().zip(&phi) {
                    *w += gr * x;
                }
            }
        }
    }
}

/// Fused embeddings `h_i` for every position of a token sequence.
pub fn fuse_embeddings(tokens: &TokenSeq, table: &DescriptorTable, params: &ModelParams) -> Mat {
    fuse(params, table, &tokens.ids).0
}

/// The chemistry term `φ̂_bᵀ W_physᵀ W_phys φ̂_a` of an attention logit for a
/// residue pair. Diagnostic only.
pub fn attn_phys_decomposition(
    params: &ModelParams,
    table: &DescriptorTable,
    a: char,
    b: char,
) -> Result<f64> {
    let w = match (&params.fusion.phys_proj, params.config.phys_enabled) {
        (Some(w), true) => w,
        _ => return Err(Error::DisabledChannel),
    };
    let ia = vocab::residue_id(a).ok_or(Error::UnknownResidue(a))?;
    let ib = vocab::residue_id(b).ok_or(Error::UnknownResidue(b))?;
    let (pa, pb) = (table.zscore(ia), table.zscore(ib));
    Ok((0..w.shape[0]).map(|r| nn::dot(w.row(r), &pa) * nn::dot(w.row(r), &pb)).sum())
}

// ---------------------------------------------------------------------------
// Blocks

struct AttnCache {
    xq: Mat,
    xkv: Option<Mat>,
    q: Mat,
    k: Mat,
    v: Mat,
    probs: Vec<Mat>,
    ctx: Mat,
}

fn mha(a: &Attention, xq: &Mat, xkv: Option<&Mat>, n_head: usize, mask: Mask) -> (Mat, AttnCache) {
    let kv_in = xkv.unwrap_or(xq);
    let q = nn::linear(xq, &a.q);
    let k = nn::linear(kv_in, &a.k);
    let v = nn::linear(kv_in, &a.v);
    let (ctx, probs) = nn::scaled_dot_product(&q, &k, &v, n_head, mask);
    let out = nn::linear(&ctx, &a.o);
    (out, AttnCache { xq: xq.clone(), xkv: xkv.cloned(), q, k, v, probs, ctx })
}

/// Returns `(d xq, d xkv)`; for self-attention both parts belong to one input.
fn mha_backward(a: &Attention, c: &AttnCache, dout: &Mat, g: &mut Attention) -> (Mat, Mat) {
    let dctx = nn::linear_backward(&c.ctx, &a.o, dout, &mut g.o);
    let (dq, dk, dv) = nn::scaled_dot_product_backward(&c.q, &c.k, &c.v, &c.probs, &dctx);
    let kv_in = c.xkv.as_ref().unwrap_or(&c.xq);
    let dxq = nn::linear_backward(&c.xq, &a.q, &dq, &mut g.q);
    let mut dkv = nn::linear_backward(kv_in, &a.k, &dk, &mut g.k);
    dkv.add_assign(&nn::linear_backward(kv_in, &a.v, &dv, &mut g.v));
    (dxq, dkv)
}

struct FfnCache {
    x: Mat,
    pre: Mat,
    act: Mat,
}

fn ffn(f: &FeedForward, x: &Mat) -> (Mat, FfnCache) {
    let pre = nn::linear(x, &f.up);
    let mut act = pre.clone();
    act.data.iter_mut().for_each(|v| *v = nn::gelu(*v));
    let out = nn::linear(&act, &f.down);
    (out, FfnCache { x: x.clone(), pre, act })
}

fn ffn_backward(f: &FeedForward, c: &FfnCache, dout: &Mat, g: &mut FeedForward) -> Mat {
    let mut dact = nn::linear_backward(&c.act, &f.down, dout, &mut g.down);
    for (d, &x) in dact.data.iter_mut().zip(&c.pre.data) {
        *d *= nn::gelu_grad(x);
    }
    nn::linear_backward(&c.x, &f.up, &dact, &mut g.up)
}

struct EncLayerCache {
    ln1: LnCache,
    attn: AttnCache,
    ln2: LnCache,
    ffn: FfnCache,
}

struct DecLayerCache {
    ln1: LnCache,
    self_attn: AttnCache,
    ln2: LnCache,
    cross: AttnCache,
    ln3: LnCache,
    ffn: FfnCache,
}

fn encoder_layer(l: &EncoderLayer, x: &mut Mat, n_head: usize, mask: Mask) -> EncLayerCache {
    let (n1, ln1) = nn::layer_norm(x, &l.ln_attn);
    let (a, attn) = mha(&l.attn, &n1, None, n_head, mask);
    x.add_assign(&a);
    let (n2, ln2) = nn::layer_norm(x, &l.ln_ffn);
    let (f, ffn_c) = ffn(&l.ffn, &n2);
    x.add_assign(&f);
    EncLayerCache { ln1, attn, ln2, ffn: ffn_c }
}

fn decoder_layer(l: &DecoderLayer, x: &mut Mat, memory: &Mat, n_head: usize, src_mask: Mask) -> DecLayerCache {
    let (n1, ln1) = nn::layer_norm(x, &l.ln_self);
    let (a, self_attn) = mha(&l.self_attn, &n1, None, n_head, Mask::Causal);
    x.add_assign(&a);
    let (n2, ln2) = nn::layer_norm(x, &l.ln_cross);
    let (c, cross) = mha(&l.cross_attn, &n2, Some(memory), n_head, src_mask);
    x.add_assign(&c);
    let (n3, ln3) = nn::layer_norm(x, &l.ln_ffn);
    let (f, ffn_c) = ffn(&l.ffn, &n3);
    x.add_assign(&f);
    DecLayerCache { ln1, self_attn, ln2, cross, ln3, ffn: ffn_c }
}

/// Pre-LN encoder stack plus final LayerNorm over `src_embed`. PAD keys
/// (marked `true` in `pad_mask`) receive zero attention weight.
pub fn encoder_forward(params: &ModelParams, src_embed: &Mat, pad_mask: &[bool]) -> Mat {
    let mut x = src_embed.clone();
    for l in &params.encoder {
        encoder_layer(l, &mut x, params.config.n_head, Mask::KeyPad(pad_mask));
    }
    nn::layer_norm(&x, &params.enc_norm).0
}

/// Causal decoder stack with cross-attention over `h_src`, final LayerNorm and
/// vocabulary head. Returns `[len, VOCAB_SIZE]` logits.
pub fn decoder_forward(params: &ModelParams, tgt_embed: &Mat, h_src: &Mat, src_pad_mask: &[bool]) -> Mat {
    let mut x = tgt_embed.clone();
    for l in &params.decoder {
        decoder_layer(l, &mut x, h_src, params.config.n_head, Mask::KeyPad(src_pad_mask));
    }
    let n = nn::layer_norm(&x, &params.dec_norm).0;
    nn::linear(&n, &params.head)
}

/// Attention weights of one forward pass, for diagnostics.
#[derive(Debug, Clone)]
pub struct ForwardTrace {
    /// `[layer][head]`, each `[src, src]`.
    pub encoder_self: Vec<Vec<Mat>>,
    /// `[layer][head]`, each `[tgt, tgt]`.
    pub decoder_self: Vec<Vec<Mat>>,
    /// `[layer][head]`, each `[tgt, src]`.
    pub decoder_cross: Vec<Vec<Mat>>,
    pub logits: Mat,
}

struct Forward {
    src_fusion: FusionCache,
    enc: Vec<EncLayerCache>,
    enc_ln: LnCache,
    memory: Mat,
    tgt_fusion: FusionCache,
    dec: Vec<DecLayerCache>,
    dec_ln: LnCache,
    dec_out: Mat,
    logits: Mat,
}

/// Full forward over the non-PAD source prefix and the target inputs.
fn forward(p: &ModelParams, table: &DescriptorTable, src: &[TokenId], tgt_in: &[TokenId]) -> Forward {
    let n_head = p.config.n_head;
    let (mut x, src_fusion) = fuse(p, table, src);
    let enc = p.encoder.iter().map(|l| encoder_layer(l, &mut x, n_head, Mask::None)).collect();
    let (memory, enc_ln) = nn::layer_norm(&x, &p.enc_norm);
    let (mut y, tgt_fusion) = fuse(p, table, tgt_in);
    let dec = p.decoder.iter().map(|l| decoder_layer(l, &mut y, &memory, n_head, Mask::None)).collect();
    let (dec_out, dec_ln) = nn::layer_norm(&y, &p.dec_norm);
    let logits = nn::linear(&dec_out, &p.head);
    Forward { src_fusion, enc, enc_ln, memory, tgt_fusion, dec, dec_ln, dec_out, logits }
}

fn backward(p: &ModelParams, f: &Forward, dlogits: &Mat, g: &mut ModelParams) {
    let dn = nn::linear_backward(&f.dec_out, &p.head, dlogits, &mut g.head);
    let mut dy = nn::layer_norm_backward(&f.dec_ln, &p.dec_norm, &dn, &mut g.dec_norm);
    let mut dmem = Mat::zeros(f.memory.rows, f.memory.cols);
    for (i, c) in f.dec.iter().enumerate().rev() {
        let (l, gl) = (&p.decoder[i], &mut g.decoder[i]);
        let d3 = ffn_backward(&l.ffn, &c.ffn, &dy, &mut gl.ffn);
        dy.add_assign(&nn::layer_norm_backward(&c.ln3, &l.ln_ffn, &d3, &mut gl.ln_ffn));
        let (dq, dkv) = mha_backward(&l.cross_attn, &c.cross, &dy, &mut gl.cross_attn);
        dmem.add_assign(&dkv);
        dy.add_assign(&nn::layer_norm_backward(&c.ln2, &l.ln_cross, &dq, &mut gl.ln_cross));
        let (mut d1, dkv) = mha_backward(&l.self_attn, &c.self_attn, &dy, &mut gl.self_attn);
        d1.add_assign(&dkv);
        dy.add_assign(&nn::layer_norm_backward(&c.ln1, &l.ln_self, &d1, &mut gl.ln_self));
    }
    fuse_backward(p, &f.tgt_fusion, &dy, g);

    let mut dx = nn::layer_norm_backward(&f.enc_ln, &p.enc_norm, &dmem, &mut g.enc_norm);
    for (i, c) in f.enc.iter().enumerate().rev() {
        let (l, gl) = (&p.encoder[i], &mut g.encoder[i]);
        let d2 = ffn_backward(&l.ffn, &c.ffn, &dx, &mut gl.ffn);
        dx.add_assign(&nn::layer_norm_backward(&c.ln2, &l.ln_ffn, &d2, &mut gl.ln_ffn));
        let (mut d1, dkv) = mha_backward(&l.attn, &c.attn, &dx, &mut gl.attn);
        d1.add_assign(&dkv);
        dx.add_assign(&nn::layer_norm_backward(&c.ln1, &l.ln_attn, &d1, &mut gl.ln_attn));
    }
    fuse_backward(p, &f.src_fusion, &dx, g);
}

/// Forward pass over padded sequences, keeping every attention map.
pub fn forward_trace(
    params: &ModelParams,
    table: &DescriptorTable,
    src: &TokenSeq,
    tgt_in: &[TokenId],
) -> ForwardTrace {
    let pad = src.pad_mask();
    let n_head = params.config.n_head;
    let (mut x, _) = fuse(params, table, &src.ids);
    let encoder_self = params
        .encoder
        .iter()
        .map(|l| encoder_layer(l, &mut x, n_head, Mask::KeyPad(&pad)).attn.probs)
        .collect();
    let memory = nn::layer_norm(&x, &params.enc_norm).0;
    let (mut y, _) = fuse(params, table, tgt_in);
    let (mut decoder_self, mut decoder_cross) = (Vec::new(), Vec::new());
    for l in &params.decoder {
        let c = decoder_layer(l, &mut y, &memory, n_head, Mask::KeyPad(&pad));
        decoder_self.push(c.self_attn.probs);
        decoder_cross.push(c.cross.probs);
    }
    let logits = nn::linear(&nn::layer_norm(&y, &params.dec_norm).0, &params.head);
    ForwardTrace { encoder_self, decoder_self, decoder_cross, logits }
}

// ---------------------------------------------------------------------------
// Training objective

/// A triple in token form: the non-PAD source prefix and `[SOS, .., EOS]`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncodedPair {
    pub src: Vec<TokenId>,
    pub tgt: Vec<TokenId>,
}

impl EncodedPair {
    pub fn new(mhc: &str, peptide: &str, tcr: &str) -> Result<Self> {
        let v = vocab::build_vocab();
        let src = vocab::encode_source(mhc, peptide, &v)?;
        let tgt = vocab::encode_target(tcr, &v)?;
        Ok(EncodedPair { src: src.ids[..src.active_len()].to_vec(), tgt: tgt.ids })
    }

    pub fn from_tokens(src: &TokenSeq, tgt: &TokenSeq) -> Self {
        EncodedPair { src: src.ids[..src.active_len()].to_vec(), tgt: tgt.ids.clone() }
    }
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|v| v - lse).collect()
}

/// Log-softmax of `logits / temperature`.
pub fn log_probs(logits: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        log_softmax(logits)
    } else {
        log_softmax(&logits.iter().map(|v| v / temperature).collect::<Vec<_>>())
    }
}

/// Label-smoothed cross-entropy summed over the example's target positions,
/// the number of positions, and the unscaled logit gradient.
fn token_losses(logits: &Mat, labels: &[TokenId], eps: f64) -> (f64, usize, Mat) {
    let mut dlogits = Mat::zeros(logits.rows, logits.cols);
    let mut loss = 0.0;
    let mut count = 0;
    let off = eps / VOCAB_SIZE as f64;
    for (i, &y) in labels.iter().enumerate() {
        if y == PAD {
            continue;
        }
        let lp = log_softmax(logits.row(i));
        let d = dlogits.row_mut(i);
        for c in 0..VOCAB_SIZE {
            let target = off + if c == y { 1.0 - eps } else { 0.0 };
            loss -= target * lp[c];
            d[c] = lp[c].exp() - target;
        }
        count += 1;
    }
    (loss, count, dlogits)
}

fn example_loss_grad(
    p: &ModelParams,
    table: &DescriptorTable,
    ex: &EncodedPair,
    eps: f64,
    g: &mut ModelParams,
) -> (f64, usize) {
    let n = ex.tgt.len();
    let f = forward(p, table, &ex.src, &ex.tgt[..n - 1]);
    let (loss, count, dlogits) = token_losses(&f.logits, &ex.tgt[1..], eps);
    backward(p, &f, &dlogits, g);
    (loss, count)
}

/// Examples per gradient accumulator. Fixed so the reduction order does not
/// depend on the thread count.
const GRAD_CHUNK: usize = 8;

/// Mean label-smoothed cross-entropy over every non-PAD target position of
/// the batch, and its exact gradient.
pub fn loss_and_grad(
    batch: &[EncodedPair],
    params: &ModelParams,
    table: &DescriptorTable,
    label_smoothing: f64,
) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let wave = GRAD_CHUNK * rayon::current_num_threads().max(1);
    let mut total = params.zeros_like();
    let (mut loss, mut count) = (0.0, 0usize);
    for group in batch.chunks(wave) {
        let parts: Vec<(f64, usize, ModelParams)> = group
            .par_chunks(GRAD_CHUNK)
            .map(|chunk| {
                let mut g = params.zeros_like();
                let (mut l, mut c) = (0.0, 0);
                for ex in chunk {
                    let (li, ci) = example_loss_grad(params, table, ex, label_smoothing, &mut g);
                    l += li;
                    c += ci;
                }
                (l, c, g)
            })
            .collect();
        for (l, c, g) in parts {
            loss += l;
            count += c;
            total.add_assign(&g);
        }
    }
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    total.scale(1.0 / count as f64);
    Ok((loss / count as f64, total))
}

/// Mean label-smoothed loss without gradients.
pub fn batch_loss(
    batch: &[EncodedPair],
    params: &ModelParams,
    table: &DescriptorTable,
    label_smoothing: f64,
) -> Result<f64> {
    let (sum, count) = nll_sum(batch, params, table, label_smoothing);
    if count == 0 {
        return Err(Error::EmptyBatch);
    }
    Ok(sum / count as f64)
}

/// Summed loss and token count, reduced in example order.
pub(crate) fn nll_sum(
    batch: &[EncodedPair],
    params: &ModelParams,
    table: &DescriptorTable,
    label_smoothing: f64,
) -> (f64, usize) {
    let parts: Vec<(f64, usize)> = batch
        .par_iter()
        .map(|ex| {
            let n = ex.tgt.len();
            let f = forward(params, table, &ex.src, &ex.tgt[..n - 1]);
            let (l, c, _) = token_losses(&f.logits, &ex.tgt[1..], label_smoothing);
            (l, c)
        })
        .collect();
    parts.into_iter().fold((0.0, 0), |(l, c), (li, ci)| (l + li, c + ci))
}

/// Teacher-forced logits `[len(tgt_in), VOCAB_SIZE]` for a non-PAD source
/// prefix.
pub fn teacher_forced_logits(
    params: &ModelParams,
    table: &DescriptorTable,
    src: &[TokenId],
    tgt_in: &[TokenId],
) -> Mat {
    forward(params, table, src, tgt_in).logits
}

// ---------------------------------------------------------------------------
// Incremental decoding

/// Encoded source plus cross-attention keys/values for every decoder layer.
#[derive(Debug, Clone)]
pub struct SourceMemory {
    pub memory: Mat,
    cross_k: Vec<Mat>,
    cross_v: Vec<Mat>,
}

pub fn encode_memory(params: &ModelParams, table: &DescriptorTable, src: &[TokenId]) -> SourceMemory {
    let (mut x, _) = fuse(params, table, src);
    for l in &params.encoder {
        encoder_layer(l, &mut x, params.config.n_head, Mask::None);
    }
    let memory = nn::layer_norm(&x, &params.enc_norm).0;
    let cross_k = params.decoder.iter().map(|l| nn::linear(&memory, &l.cross_attn.k)).collect();
    let cross_v = params.decoder.iter().map(|l| nn::linear(&memory, &l.cross_attn.v)).collect();
    SourceMemory { memory, cross_k, cross_v }
}

/// Self-attention keys and values of the prefix decoded so far.
#[derive(Debug, Clone)]
pub struct DecoderState {
    keys: Vec<Mat>,
    values: Vec<Mat>,
}

impl DecoderState {
    pub fn new(params: &ModelParams) -> Self {
        let d = params.config.d_model();
        let empty = || (0..params.config.n_dec).map(|_| Mat::zeros(0, d)).collect();
        DecoderState { keys: empty(), values: empty() }
    }

    /// Number of tokens consumed.
    pub fn len(&self) -> usize {
        self.keys.first().map_or(0, |k| k.rows)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn push_row(m: &mut Mat, row: &[f64]) {
    m.data.extend_from_slice(row);
    m.rows += 1;
}

/// Feeds one target token and returns the next-token logits. Bit-identical
/// to the matching row of [`teacher_forced_logits`].
pub fn decoder_step(
    params: &ModelParams,
    table: &DescriptorTable,
    mem: &SourceMemory,
    state: &mut DecoderState,
    token: TokenId,
) -> Vec<f64> {
    let cfg = &params.config;
    let (d, n_head) = (cfg.d_model(), cfg.n_head);
    let pos = state.len();
    let mut x = vec![0.0; d];
    fuse_row(params, table, token, pos, &mut x);
    let mut n = vec![0.0; d];
    let mut q = vec![0.0; d];
    let mut kv = vec![0.0; d];
    let mut ctx = vec![0.0; d];
    let mut out = vec![0.0; d];
    for (li, l) in params.decoder.iter().enumerate() {
        nn::layer_norm_row(&x, &l.ln_self, &mut n);
        nn::linear_row(&n, &l.self_attn.q, &mut q);
        nn::linear_row(&n, &l.self_attn.k, &mut kv);
        push_row(&mut state.keys[li], &kv);
        nn::linear_row(&n, &l.self_attn.v, &mut kv);
        push_row(&mut state.values[li], &kv);
        nn::attend_row(&q, &state.keys[li], &state.values[li], pos + 1, n_head, |_| true, &mut ctx);
        nn::linear_row(&ctx, &l.self_attn.o, &mut out);
        x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);

        nn::layer_norm_row(&x, &l.ln_cross, &mut n);
        nn::linear_row(&n, &l.cross_attn.q, &mut q);
        let (ck, cv) = (&mem.cross_k[li], &mem.cross_v[li]);
        nn::attend_row(&q, ck, cv, ck.rows, n_head, |_| true, &mut ctx);
        nn::linear_row(&ctx, &l.cross_attn.o, &mut out);
        x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);

        nn::layer_norm_row(&x, &l.ln_ffn, &mut n);
        let mut hidden = vec![0.0; l.ffn.up.d_out()];
        nn::linear_row(&n, &l.ffn.up, &mut hidden);
        hidden.iter_mut().for_each(|v| *v = nn::gelu(*v));
        nn::linear_row(&hidden, &l.ffn.down, &mut out);
        x.iter_mut().zip(&out).for_each(|(a, b)| *a += b);
    }
    nn::layer_norm_row(&x, &params.dec_norm, &mut n);
    let mut logits = vec![0.0; VOCAB_SIZE];
    nn::linear_row(&n, &params.head, &mut logits);
    logits
}
