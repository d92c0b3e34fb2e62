//! Fusion decoder: per-modality adaLN and FFN around a shared
//! scale-adaptive attention, a final plain self-attention layer and the
//! segment output head.
//!
//! Token streams are kept modality-major (`[lane | neighbor | ego]`, each
//! item-major inside). Attention runs per item, so the concatenated stream
//! is permuted to item-major order around it.

use numgrad::{Tensor, Var};

use crate::config::Config;
use crate::error::Result;
use crate::params::{Activation, Builder, Cx, Init, Linear, Mlp};

pub const MODALITIES: usize = 3;
pub const LANE: usize = 0;
pub const NEIGHBOR: usize = 1;
pub const EGO: usize = 2;
const MODALITY_NAMES: [&str; MODALITIES] = ["lane", "neighbor", "ego"];

/// Initial bias of the distance-scale projection; `softplus(−3) ≈ 0.049`.
pub const LAMBDA_BIAS_INIT: f64 = -3.0;

/// Query/key/value/output projections, optionally with the per-head
/// distance scale `λ = softplus(linear(token))`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttnParams {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub lambda: Option<Linear>,
    pub heads: usize,
}

impl AttnParams {
    pub fn new(b: &mut Builder<'_>, name: &str, d: usize, heads: usize, scale_adaptive: bool) -> Self {
        let mut s = b.scope(name);
        let q = s.linear("q", d, d, Init::Uniform);
        let k = s.linear("k", d, d, Init::Uniform);
        let v = s.linear("v", d, d, Init::Uniform);
        let o = s.linear("o", d, d, Init::Uniform);
        let lambda = scale_adaptive.then(|| {
            let l = s.linear("lambda", d, heads, Init::Uniform);
            s.store.get_mut(l.b).data_mut().fill(LAMBDA_BIAS_INIT);
            l
        });
        Self { q, k, v, o, lambda, heads }
    }
}

/// Per-item attention geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct AttnGeometry {
    pub items: usize,
    /// Tokens per item.
    pub tokens: usize,
    /// Pairwise metric anchor distances, one `tokens × tokens` matrix per item.
    pub dist: Vec<Tensor>,
    /// `1 × tokens` additive key masks (0 or −∞), one per item.
    pub mask: Vec<Tensor>,
}

impl AttnGeometry {
    pub fn new(anchors: &[Vec<[f64; 2]>], valid: &[Vec<bool>]) -> Self {
        let tokens = anchors.first().map_or(0, Vec::len);
        let dist = anchors
            .iter()
            .map(|a| {
                let mut d = Vec::with_capacity(tokens * tokens);
                for p in a {
                    d.extend(a.iter().map(|q| (p[0] - q[0]).hypot(p[1] - q[1])));
                }
                Tensor::matrix(tokens, tokens, d)
            })
            .collect();
        let mask =
            valid.iter().map(|v| Tensor::row(v.iter().map(|&ok| if ok { 0.0 } else { f64::NEG_INFINITY }).collect())).collect();
        Self { items: anchors.len(), tokens, dist, mask }
    }
}

/// Pre-softmax logits of one item and head: `QKᵀ/√d_h − λ·D + mask`.
fn head_logits(
    cx: &mut Cx<'_>,
    q: Var,
    k: Var,
    lam: Option<Var>,
    dist: Option<&Tensor>,
    mask: &Tensor,
) -> Result<Var> {
    let mut logits = cx.g.matmul_nt(q, k)?;
    if let (Some(lam), Some(dist)) = (lam, dist) {
        let d = cx.g.constant(dist.clone());
        let pen = cx.g.mul(lam, d)?;
        logits = cx.g.sub(logits, pen)?;
    }
    if mask.data().iter().any(|v| *v != 0.0) {
        let m = cx.g.constant(mask.clone());
        logits = cx.g.add(logits, m)?;
    }
    Ok(logits)
}

/// Multi-head attention over item-major rows.
///
/// `xq` holds `items × nq` query tokens, `xkv` holds `items × geo.tokens`
/// key/value tokens. When the queries are a subset of the keys,
/// `q_offset` is the position of the first query inside each item, used to
/// pick the matching distance rows.
pub fn attention(cx: &mut Cx<'_>, p: &AttnParams, xq: Var, xkv: Var, nq: usize, q_offset: usize, geo: &AttnGeometry) -> Result<Var> {
    attention_inner(cx, p, xq, xkv, nq, q_offset, geo, None)
}

#[allow(clippy::too_many_arguments)]
fn attention_inner(
    cx: &mut Cx<'_>,
    p: &AttnParams,
    xq: Var,
    xkv: Var,
    nq: usize,
    q_offset: usize,
    geo: &AttnGeometry,
    mut logits_out: Option<&mut Vec<Var>>,
) -> Result<Var> {
    let d = p.q.output;
    let dh = d / p.heads;
    let q = p.q.forward(cx, xq)?;
    let q = cx.g.scale(q, 1.0 / (dh as f64).sqrt())?;
    let k = p.k.forward(cx, xkv)?;
    let v = p.v.forward(cx, xkv)?;
    let lam = match &p.lambda {
        Some(l) => {
            let raw = l.forward(cx, xq)?;
            Some(cx.g.softplus(raw)?)
        }
        None => None,
    };
    let nk = geo.tokens;
    let mut items = Vec::with_capacity(geo.items);
    for b in 0..geo.items {
        let qb = cx.g.slice_rows(q, b * nq, nq)?;
        let kb = cx.g.slice_rows(k, b * nk, nk)?;
        let vb = cx.g.slice_rows(v, b * nk, nk)?;
        let lb = match lam {
            Some(l) => Some(cx.g.slice_rows(l, b * nq, nq)?),
            None => None,
        };
        let dist = if lam.is_some() {
            let full = &geo.dist[b];
            Some(if nq == nk {
                full.clone()
            } else {
                Tensor::matrix(nq, nk, full.data()[q_offset * nk..(q_offset + nq) * nk].to_vec())
            })
        } else {
            None
        };
        let mut heads = Vec::with_capacity(p.heads);
        for h in 0..p.heads {
            let qh = cx.g.slice_cols(qb, h * dh, dh)?;
            let kh = cx.g.slice_cols(kb, h * dh, dh)?;
            let vh = cx.g.slice_cols(vb, h * dh, dh)?;
            let lh = match lb {
                Some(l) => Some(cx.g.slice_cols(l, h, 1)?),
                None => None,
            };
            let logits = head_logits(cx, qh, kh, lh, dist.as_ref(), &geo.mask[b])?;
            if let Some(out) = logits_out.as_deref_mut() {
                out.push(logits);
            }
            let att = cx.g.softmax(logits)?;
            heads.push(cx.g.matmul(att, vh)?);
        }
        items.push(if heads.len() == 1 { heads[0] } else { cx.g.concat_cols(&heads)? });
    }
    let cat = if items.len() == 1 { items[0] } else { cx.g.concat_rows(&items)? };
    p.o.forward(cx, cat)
}

/// Scale-adaptive self-attention over one item's `M × d` tokens; also
/// returns every head's logits for inspection.
pub fn scale_adaptive_attention(
    cx: &mut Cx<'_>,
    p: &AttnParams,
    x: Var,
    anchors: &[[f64; 2]],
    valid: &[bool],
) -> Result<(Var, Vec<Var>)> {
    let geo = AttnGeometry::new(&[anchors.to_vec()], &[valid.to_vec()]);
    let mut logits = Vec::new();
    let out = attention_inner(cx, p, x, x, anchors.len(), 0, &geo, Some(&mut logits))?;
    Ok((out, logits))
}

/// `(1 + scale) ⊙ LayerNorm(x) + shift`.
pub fn modulate(cx: &mut Cx<'_>, x: Var, shift: Var, scale: Var) -> Result<Var> {
    let n = cx.g.layer_norm(x)?;
    let s1 = cx.g.add_scalar(scale, 1.0)?;
    let y = cx.g.mul(n, s1)?;
    Ok(cx.g.add(y, shift)?)
}

/// Per-modality parameters of one fusion block.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ModalityParams {
    /// `SiLU(c) → [shift₁, scale₁, gate₁, shift₂, scale₂, gate₂]`, zero-initialized.
    pub ada: Linear,
    pub ffn: Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FusionBlock {
    pub modality: [ModalityParams; MODALITIES],
    pub attn: AttnParams,
}

impl FusionBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, cfg: &Config) -> Self {
        let d = cfg.decoder_hidden;
        let mut s = b.scope(name);
        let modality = MODALITY_NAMES.map(|m| {
            let mut ms = s.scope(m);
            ModalityParams {
                ada: ms.linear("ada", d, 6 * d, Init::Zero),
                ffn: ms.mlp("ffn", d, d * cfg.ffn_ratio, d, Activation::Gelu),
            }
        });
        let attn = AttnParams::new(&mut s, "attn", d, cfg.num_heads, true);
        Self { modality, attn }
    }
}

/// Row bookkeeping for a batch of token streams.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamLayout {
    pub items: usize,
    /// Tokens per item in each modality.
    pub counts: [usize; MODALITIES],
    to_item_major: Vec<(usize, usize, f64)>,
    to_modality_major: Vec<(usize, usize, f64)>,
}

impl StreamLayout {
    pub fn new(items: usize, counts: [usize; MODALITIES]) -> Self {
        let per: usize = counts.iter().sum();
        let mut to_item = Vec::with_capacity(items * per);
        let mut to_mod = Vec::with_capacity(items * per);
        let mut base = 0;
        for (m, &n) in counts.iter().enumerate() {
            let before: usize = counts[..m].iter().sum();
            for b in 0..items {
                for i in 0..n {
                    let mm = base + b * n + i;
                    let im = b * per + before + i;
                    to_item.push((im, mm, 1.0));
                    to_mod.push((mm, im, 1.0));
                }
            }
            base += items * n;
        }
        Self { items, counts, to_item_major: to_item, to_modality_major: to_mod }
    }

    pub fn per_item(&self) -> usize {
        self.counts.iter().sum()
    }

    /// Repeats each item's row for every one of its `n` tokens.
    fn broadcast(&self, cx: &mut Cx<'_>, per_item: Var, n: usize) -> Result<Var> {
        let terms = (0..self.items).flat_map(|b| (0..n).map(move |i| (b * n + i, b, 1.0))).collect();
        Ok(cx.g.combine_rows(per_item, self.items * n, terms)?)
    }
}

/// One fusion block on modality-major streams. `c_act` is `SiLU(c)`,
/// one row per item.
pub fn fusion_block(
    cx: &mut Cx<'_>,
    blk: &FusionBlock,
    streams: [Var; MODALITIES],
    c_act: Var,
    lay: &StreamLayout,
    geo: &AttnGeometry,
) -> Result<[Var; MODALITIES]> {
    let d = blk.attn.q.output;
    let mut mods = Vec::with_capacity(MODALITIES);
    let mut normed = Vec::with_capacity(MODALITIES);
    for m in 0..MODALITIES {
        let per_item = blk.modality[m].ada.forward(cx, c_act)?;
        let rows = lay.broadcast(cx, per_item, lay.counts[m])?;
        let chunk: Vec<Var> = (0..6).map(|j| cx.g.slice_cols(rows, j * d, d)).collect::<numgrad::Result<_>>()?;
        normed.push(modulate(cx, streams[m], chunk[0], chunk[1])?);
        mods.push(chunk);
    }
    // Global concatenation, attention per item, then back to modalities.
    let cat = cx.g.concat_rows(&normed)?;
    let n_all = lay.items * lay.per_item();
    let xi = cx.g.combine_rows(cat, n_all, lay.to_item_major.clone())?;
    let a = attention(cx, &blk.attn, xi, xi, lay.per_item(), 0, geo)?;
    let a = cx.g.combine_rows(a, n_all, lay.to_modality_major.clone())?;

    let mut out = streams;
    let mut offset = 0;
    for m in 0..MODALITIES {
        let rows = lay.items * lay.counts[m];
        let am = cx.g.slice_rows(a, offset, rows)?;
        offset += rows;
        let gated = cx.g.mul(mods[m][2], am)?;
        let x = cx.g.add(streams[m], gated)?;
        let h = modulate(cx, x, mods[m][3], mods[m][4])?;
        let f = blk.modality[m].ffn.forward(cx, h)?;
        let gated = cx.g.mul(mods[m][5], f)?;
        out[m] = cx.g.add(x, gated)?;
    }
    Ok(out)
}

/// Everything after the encoder.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderParams {
    pub time_mlp: Mlp,
    pub ego_mlp: Mlp,
    pub segment_mlp: Mlp,
    pub blocks: Vec<FusionBlock>,
    pub final_attn: AttnParams,
    /// `SiLU(c) → [shift, scale]` for the output head, zero-initialized.
    pub head_ada: Linear,
    pub head: Linear,
}

impl DecoderParams {
    pub fn new(b: &mut Builder<'_>, cfg: &Config) -> Self {
        let d = cfg.decoder_hidden;
        let seg_width = cfg.seg_len * crate::scenario::STATE_DIM;
        let mut s = b.scope("decoder");
        Self {
            time_mlp: s.mlp("time_mlp", d, d, d, Activation::Silu),
            ego_mlp: s.mlp("ego_mlp", crate::scenario::EGO_DIM, d, d, Activation::Silu),
            segment_mlp: s.mlp("segment_mlp", seg_width, d, d, Activation::Gelu),
            blocks: (0..cfg.decoder_blocks).map(|i| FusionBlock::new(&mut s, &format!("block{i}"), cfg)).collect(),
            final_attn: AttnParams::new(&mut s, "final_attn", d, cfg.num_heads, false),
            head_ada: s.linear("head_ada", d, 2 * d, Init::Zero),
            head: s.linear("head", d, seg_width, Init::Uniform),
        }
    }
}

/// Final plain self-attention (queries restricted to the ego tokens, the
/// only ones read afterwards), then the modulated output head. Returns
/// `items·K × L_seg·C` segment rows.
pub fn decode_head(
    cx: &mut Cx<'_>,
    p: &DecoderParams,
    streams: [Var; MODALITIES],
    c_act: Var,
    lay: &StreamLayout,
    geo: &AttnGeometry,
) -> Result<Var> {
    let d = p.head.input;
    let n_all = lay.items * lay.per_item();
    let cat = cx.g.concat_rows(&streams)?;
    let xi = cx.g.combine_rows(cat, n_all, lay.to_item_major.clone())?;
    let normed = cx.g.layer_norm(xi)?;
    let k = lay.counts[EGO];
    let ego_offset = lay.per_item() - k;
    // Ego rows of the normalized, item-major stream.
    let pick: Vec<(usize, usize, f64)> =
        (0..lay.items).flat_map(|b| (0..k).map(move |i| (b * k + i, b * (ego_offset + k) + ego_offset + i, 1.0))).collect();
    let q = cx.g.combine_rows(normed, lay.items * k, pick)?;
    let a = attention(cx, &p.final_attn, q, normed, k, ego_offset, geo)?;
    let ego = cx.g.add(streams[EGO], a)?;

    let m = p.head_ada.forward(cx, c_act)?;
    let rows = lay.broadcast(cx, m, k)?;
    let shift = cx.g.slice_cols(rows, 0, d)?;
    let scale = cx.g.slice_cols(rows, d, d)?;
    let h = modulate(cx, ego, shift, scale)?;
    p.head.forward(cx, h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use numgrad::Graph;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn stream_layout_permutations_are_inverse() {
        let lay = StreamLayout::new(3, [2, 1, 2]);
        let n = 15;
        let x = Tensor::matrix(n, 1, (0..n).map(|v| v as f64).collect());
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let im = g.combine_rows(xv, n, lay.to_item_major.clone()).unwrap();
        // Item 1, first neighbor token: modality-major row 6 + 1.
        assert_eq!(g.value(im).get(5 + 2, 0), 7.0);
        let back = g.combine_rows(im, n, lay.to_modality_major.clone()).unwrap();
        assert_eq!(g.value(back), &x);
    }

    #[test]
    fn modulate_matches_formula() {
        let store = ParamStore::new();
        let mut g = Graph::new();
        let mut cx = Cx::new(&mut g, &store);
        let x = cx.g.constant(Tensor::row(vec![1.0, 2.0, 3.0, 6.0]));
        let shift = cx.g.constant(Tensor::row(vec![0.5, 0.0, 0.0, -1.0]));
        let scale = cx.g.constant(Tensor::row(vec![1.0, 0.0, -1.0, 0.5]));
        let y = modulate(&mut cx, x, shift, scale).unwrap();
        let sd = ((4.0 + 1.0 + 0.0 + 9.0) / 4.0 + numgrad::LAYER_NORM_EPS).sqrt();
        let want = [0.5 + 2.0 * (-2.0 / sd), -1.0 / sd, 0.0, -1.0 + 1.5 * (3.0 / sd)];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} {b}");
        }
    }

    #[test]
    fn far_keys_get_lower_logits() {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let p = AttnParams::new(&mut Builder::new(&mut store, &mut rng), "a", 8, 2, true);
        // Identical key content at increasing distances from token 0.
        let row: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::from_rows(&[row.clone(), row.clone(), row]);
        let anchors = [[0.0, 0.0], [1.0, 0.0], [5.0, 0.0]];
        let mut g = Graph::new();
        let mut cx = Cx::new(&mut g, &store);
        let xv = cx.g.constant(x);
        let (_, logits) = scale_adaptive_attention(&mut cx, &p, xv, &anchors, &[true; 3]).unwrap();
        for l in logits {
            let r = g.value(l).row_slice(0);
            assert!(r[0] > r[1] && r[1] > r[2], "{r:?}");
        }
    }
}
