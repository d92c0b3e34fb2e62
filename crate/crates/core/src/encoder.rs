//! Scene encoder: MLP-Mixer stacks for neighbors, lanes and navigation, a
//! plain MLP for static objects.
//!
//! Only valid entities are encoded. Their sequences are stacked across the
//! whole batch, so one matrix product serves every entity. Invalid slots
//! come out as zero tokens.

use numgrad::{Graph, Tensor, Var};

use crate::config::Config;
use crate::error::{Error, Result};
use crate::params::{Activation, Builder, Cx, Init, Linear, Mlp, ParamStore};
use crate::scenario::{ScenarioFrame, LANE_DIM, NEIGHBOR_DIM, STATIC_DIM};

/// `F ← F + MLP_seq(F)` along the sequence axis, then `F ← F + MLP_feat(F)`
/// along the feature axis.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixerBlock {
    pub seq: Mlp,
    pub feat: Mlp,
}

impl MixerBlock {
    pub fn new(b: &mut Builder<'_>, name: &str, seq_len: usize, hidden: usize) -> Self {
        let mut s = b.scope(name);
        let seq = s.mlp("seq", seq_len, seq_len, seq_len, Activation::Gelu);
        let feat = s.mlp("feat", hidden, hidden, hidden, Activation::Gelu);
        Self { seq, feat }
    }

    /// `x` holds `entities` stacked `S × H` sequences.
    pub fn forward(&self, cx: &mut Cx<'_>, x: Var, entities: usize) -> Result<Var> {
        let xt = cx.g.block_transpose(x, entities)?;
        let m = self.seq.forward(cx, xt)?;
        let m = cx.g.block_transpose(m, entities)?;
        let x = cx.g.add(x, m)?;
        let f = self.feat.forward(cx, x)?;
        Ok(cx.g.add(x, f)?)
    }
}

/// Input projection, mixer blocks and output projection for one modality.
#[derive(Debug, Clone, PartialEq)]
pub struct MixerEncoder {
    pub input: Linear,
    pub blocks: Vec<MixerBlock>,
    pub output: Linear,
    pub seq_len: usize,
}

impl MixerEncoder {
    fn new(b: &mut Builder<'_>, name: &str, in_dim: usize, seq_len: usize, cfg: &Config) -> Self {
        let mut s = b.scope(name);
        let h = cfg.encoder_hidden;
        let input = s.linear("input", in_dim, h, Init::Uniform);
        let blocks = (0..cfg.encoder_blocks).map(|i| MixerBlock::new(&mut s, &format!("block{i}"), seq_len, h)).collect();
        let output = s.linear("output", h, cfg.decoder_hidden, Init::Uniform);
        Self { input, blocks, output, seq_len }
    }

    /// Projects and mixes `entities` stacked sequences, returning the
    /// `entities·S × H` features before pooling.
    fn mix(&self, cx: &mut Cx<'_>, x: Var, entities: usize) -> Result<Var> {
        let mut h = self.input.forward(cx, x)?;
        for blk in &self.blocks {
            h = blk.forward(cx, h, entities)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub neighbor: MixerEncoder,
    pub lane: MixerEncoder,
    pub nav: MixerEncoder,
    pub statics: Mlp,
}

impl EncoderParams {
    pub fn new(b: &mut Builder<'_>, cfg: &Config) -> Self {
        let mut s = b.scope("encoder");
        Self {
            neighbor: MixerEncoder::new(&mut s, "neighbor", NEIGHBOR_DIM, cfg.num_past_steps, cfg),
            lane: MixerEncoder::new(&mut s, "lane", LANE_DIM, cfg.points_per_polyline, cfg),
            nav: MixerEncoder::new(&mut s, "nav", LANE_DIM, cfg.points_per_polyline, cfg),
            statics: s.mlp("statics", STATIC_DIM, cfg.encoder_hidden, cfg.decoder_hidden, Activation::Gelu),
        }
    }
}

/// Stacked inputs of the valid entities of one modality.
#[derive(Debug, Clone, PartialEq)]
struct Group {
    /// `count·S × F` rows, or `None` when nothing is valid.
    rows: Option<Tensor>,
    count: usize,
    /// Output row of each entity in the slot-padded token matrix.
    slots: Vec<usize>,
    /// `(entity, row, weight)` terms of the pooling mean.
    pool: Vec<(usize, usize, f64)>,
}

impl Group {
    fn new() -> Self {
        Self { rows: None, count: 0, slots: Vec::new(), pool: Vec::new() }
    }
}

struct GroupBuilder {
    data: Vec<f64>,
    width: usize,
    seq: usize,
    g: Group,
}

impl GroupBuilder {
    fn new(width: usize, seq: usize) -> Self {
        Self { data: Vec::new(), width, seq, g: Group::new() }
    }

    /// Adds one entity. `valid[t]` marks steps that count toward the mean.
    fn push<const N: usize>(&mut self, rows: &[[f64; N]], valid: &[bool], slot: usize) {
        debug_assert_eq!(N, self.width);
        let e = self.g.count;
        let n = valid.iter().filter(|&&v| v).count().max(1) as f64;
        for (t, (r, &ok)) in rows.iter().zip(valid).enumerate() {
            if ok {
                self.data.extend_from_slice(r);
                self.g.pool.push((e, e * self.seq + t, 1.0 / n));
            } else {
                self.data.extend(std::iter::repeat(0.0).take(N));
            }
        }
        self.g.slots.push(slot);
        self.g.count += 1;
    }

    fn finish(mut self) -> Group {
        if self.g.count > 0 {
            self.g.rows = Some(Tensor::matrix(self.g.count * self.seq, self.width, self.data));
        }
        self.g
    }
}

/// Per-item token layout shared by encoder and decoder: lanes then statics
/// (the lane modality), neighbors, and finally the ego segment tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TokenLayout {
    pub lanes: usize,
    pub statics: usize,
    pub neighbors: usize,
}

impl TokenLayout {
    pub fn from_config(cfg: &Config) -> Self {
        Self { lanes: cfg.num_lanes, statics: cfg.num_statics, neighbors: cfg.num_neighbors }
    }

    /// Tokens in the lane modality (lanes plus statics).
    pub fn lane_modality(&self) -> usize {
        self.lanes + self.statics
    }

    /// Scene tokens per item (everything but the ego tokens).
    pub fn scene(&self) -> usize {
        self.lane_modality() + self.neighbors
    }
}

/// Encoder inputs for a batch of normalized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderInput {
    pub items: usize,
    pub layout: TokenLayout,
    neighbors: Group,
    lanes: Group,
    statics: Group,
    nav: Group,
    /// Item index of every valid navigation lane, for the second mean.
    nav_items: Vec<(usize, f64)>,
    /// Metric anchors of the scene tokens, `items × scene()`.
    pub anchors: Vec<Vec<[f64; 2]>>,
    /// Validity of the scene tokens, `items × scene()`.
    pub valid: Vec<Vec<bool>>,
}

impl EncoderInput {
    pub fn new(frames: &[&ScenarioFrame], cfg: &Config) -> Result<Self> {
        let layout = TokenLayout::from_config(cfg);
        let (t_len, p_len) = (cfg.num_past_steps, cfg.points_per_polyline);
        let mut nb = GroupBuilder::new(NEIGHBOR_DIM, t_len);
        let mut ln = GroupBuilder::new(LANE_DIM, p_len);
        let mut st = GroupBuilder::new(STATIC_DIM, 1);
        let mut nv = GroupBuilder::new(LANE_DIM, p_len);
        let mut nav_items = Vec::new();
        let mut anchors = Vec::with_capacity(frames.len());
        let mut valid = Vec::with_capacity(frames.len());
        for (b, f) in frames.iter().enumerate() {
            if f.norm.is_none() {
                return Err(Error::NotNormalized);
            }
            check_counts(f, cfg)?;
            let mut anc = Vec::with_capacity(layout.scene());
            let mut ok = Vec::with_capacity(layout.scene());
            for (i, l) in f.lanes.iter().enumerate() {
                if l.valid {
                    ln.push(&l.points, &vec![true; p_len], b * layout.lane_modality() + i);
                    anc.push(f.metric_anchor(l.anchor()));
                } else {
                    anc.push([0.0; 2]);
                }
                ok.push(l.valid);
            }
            for (i, s) in f.statics.iter().enumerate() {
                if s.valid {
                    st.push(std::slice::from_ref(&s.features), &[true], b * layout.lane_modality() + layout.lanes + i);
                    anc.push(f.metric_anchor([s.features[0], s.features[1]]));
                } else {
                    anc.push([0.0; 2]);
                }
                ok.push(s.valid);
            }
            for (i, n) in f.neighbors.iter().enumerate() {
                match n.anchor() {
                    Some(a) => {
                        nb.push(&n.states, &n.valid, b * layout.neighbors + i);
                        anc.push(f.metric_anchor(a));
                        ok.push(true);
                    }
                    None => {
                        anc.push([0.0; 2]);
                        ok.push(false);
                    }
                }
            }
            let n_nav = f.navigation.iter().filter(|l| l.valid).count();
            for l in f.navigation.iter().filter(|l| l.valid) {
                nv.push(&l.points, &vec![true; p_len], b);
                nav_items.push((b, 1.0 / n_nav as f64));
            }
            anchors.push(anc);
            valid.push(ok);
        }
        Ok(Self {
            items: frames.len(),
            layout,
            neighbors: nb.finish(),
            lanes: ln.finish(),
            statics: st.finish(),
            nav: nv.finish(),
            nav_items,
            anchors,
            valid,
        })
    }

    pub fn valid_neighbors(&self) -> usize {
        self.neighbors.count
    }
}

fn check_counts(f: &ScenarioFrame, cfg: &Config) -> Result<()> {
    let ok = f.neighbors.len() == cfg.num_neighbors
        && f.lanes.len() == cfg.num_lanes
        && f.navigation.len() == cfg.num_nav_lanes
        && f.statics.len() == cfg.num_statics
        && f.neighbors.iter().all(|n| n.states.len() == cfg.num_past_steps && n.valid.len() == cfg.num_past_steps)
        && f.lanes.iter().chain(&f.navigation).all(|l| l.points.len() == cfg.points_per_polyline);
    if ok {
        Ok(())
    } else {
        Err(Error::Invalid("frame entity counts do not match the config".into()))
    }
}

/// Encoded scene on a graph.
#[derive(Debug, Clone, Copy)]
pub struct EncodedScene {
    /// `items·(lanes + statics) × d`, lanes then statics per item.
    pub lane: Var,
    /// `items·neighbors × d`.
    pub neighbor: Var,
    /// `items × d`.
    pub nav: Var,
}

fn pooled_mixer(cx: &mut Cx<'_>, enc: &MixerEncoder, g: &Group) -> Result<Option<Var>> {
    let Some(rows) = &g.rows else { return Ok(None) };
    let x = cx.g.constant(rows.clone());
    let h = enc.mix(cx, x, g.count)?;
    let pooled = cx.g.combine_rows(h, g.count, g.pool.clone())?;
    Ok(Some(pooled))
}

/// Scatters `count` entity rows into a zero-padded `rows × d` matrix.
fn scatter(g: &mut Graph, x: Option<Var>, slots: &[usize], rows: usize, d: usize) -> Result<Var> {
    match x {
        Some(x) => Ok(g.combine_rows(x, rows, slots.iter().enumerate().map(|(e, &s)| (s, e, 1.0)).collect())?),
        None => Ok(g.constant(Tensor::zeros(rows, d))),
    }
}

pub fn encode(cx: &mut Cx<'_>, p: &EncoderParams, input: &EncoderInput) -> Result<EncodedScene> {
    let d = p.lane.output.output;
    let (b, lay) = (input.items, input.layout);

    let neighbor = match pooled_mixer(cx, &p.neighbor, &input.neighbors)? {
        Some(h) => Some(p.neighbor.output.forward(cx, h)?),
        None => None,
    };
    let neighbor = scatter(cx.g, neighbor, &input.neighbors.slots, b * lay.neighbors, d)?;

    let lanes = match pooled_mixer(cx, &p.lane, &input.lanes)? {
        Some(h) => Some(p.lane.output.forward(cx, h)?),
        None => None,
    };
    let statics = match &input.statics.rows {
        Some(rows) => {
            let x = cx.g.constant(rows.clone());
            Some(p.statics.forward(cx, x)?)
        }
        None => None,
    };
    // Lane modality rows: item-major, lanes then statics.
    let rows = b * lay.lane_modality();
    let lane = match (lanes, statics) {
        (Some(l), Some(s)) => {
            let stacked = cx.g.concat_rows(&[l, s])?;
            let slots: Vec<usize> = input.lanes.slots.iter().chain(&input.statics.slots).copied().collect();
            scatter(cx.g, Some(stacked), &slots, rows, d)?
        }
        (Some(l), None) => scatter(cx.g, Some(l), &input.lanes.slots, rows, d)?,
        (None, s) => scatter(cx.g, s, &input.statics.slots, rows, d)?,
    };

    let nav = match pooled_mixer(cx, &p.nav, &input.nav)? {
        Some(h) => {
            let terms = input.nav_items.iter().enumerate().map(|(e, &(item, w))| (item, e, w)).collect();
            let per_item = cx.g.combine_rows(h, b, terms)?;
            p.nav.output.forward(cx, per_item)?
        }
        None => {
            let zero = cx.g.constant(Tensor::zeros(b, p.nav.output.input));
            p.nav.output.forward(cx, zero)?
        }
    };
    Ok(EncodedScene { lane, neighbor, nav })
}

/// Encoder output for one frame as plain tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTokens {
    pub lane_tokens: Tensor,
    pub lane_anchors: Vec<[f64; 2]>,
    pub lane_mask: Vec<bool>,
    pub neighbor_tokens: Tensor,
    pub neighbor_anchors: Vec<[f64; 2]>,
    pub neighbor_mask: Vec<bool>,
    pub static_tokens: Tensor,
    pub static_anchors: Vec<[f64; 2]>,
    pub static_mask: Vec<bool>,
    pub nav_vector: Tensor,
}

/// Encodes a single normalized frame.
pub fn encode_scene(frame: &ScenarioFrame, params: &ParamStore, enc: &EncoderParams, cfg: &Config) -> Result<SceneTokens> {
    let input = EncoderInput::new(&[frame], cfg)?;
    let mut g = Graph::new();
    let mut cx = Cx::new(&mut g, params);
    let out = encode(&mut cx, enc, &input)?;
    let lay = input.layout;
    let lane_all = g.value(out.lane).clone();
    let d = lane_all.cols();
    let rows = |t: &Tensor, a: usize, n: usize| Tensor::matrix(n, d, t.data()[a * d..(a + n) * d].to_vec());
    let (anc, ok) = (&input.anchors[0], &input.valid[0]);
    let (l, s) = (lay.lanes, lay.statics);
    Ok(SceneTokens {
        lane_tokens: rows(&lane_all, 0, l),
        lane_anchors: anc[..l].to_vec(),
        lane_mask: ok[..l].to_vec(),
        static_tokens: if s > 0 { rows(&lane_all, l, s) } else { Tensor::zeros(1, d) },
        static_anchors: anc[l..l + s].to_vec(),
        static_mask: ok[l..l + s].to_vec(),
        neighbor_tokens: g.value(out.neighbor).clone(),
        neighbor_anchors: anc[l + s..].to_vec(),
        neighbor_mask: ok[l + s..].to_vec(),
        nav_vector: g.value(out.nav).clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn gelu(x: f64) -> f64 {
        0.5 * x * (1.0 + (0.797_884_560_802_865_4 * (x + 0.044_715 * x * x * x)).tanh())
    }

    /// Loop-based reference for one mixer block on one `S × H` sequence.
    fn mixer_oracle(p: &ParamStore, blk: &MixerBlock, x: &[Vec<f64>]) -> Vec<Vec<f64>> {
        let mlp = |m: &Mlp, v: &[f64]| -> Vec<f64> {
            let lin = |l: &Linear, v: &[f64]| -> Vec<f64> {
                let (w, b) = (p.get(l.w), p.get(l.b));
                (0..l.output).map(|o| b.data()[o] + (0..l.input).map(|i| v[i] * w.get(i, o)).sum::<f64>()).collect()
            };
            let h: Vec<f64> = lin(&m.l1, v).into_iter().map(gelu).collect();
            lin(&m.l2, &h)
        };
        let (s, h) = (x.len(), x[0].len());
        let mut y = x.to_vec();
        for c in 0..h {
            let col: Vec<f64> = (0..s).map(|t| x[t][c]).collect();
            let m = mlp(&blk.seq, &col);
            for t in 0..s {
                y[t][c] += m[t];
            }
        }
        y.iter().map(|row| row.iter().zip(mlp(&blk.feat, row)).map(|(a, b)| a + b).collect()).collect()
    }

    fn block(seed: u64, s: usize, h: usize) -> (ParamStore, MixerBlock) {
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let blk = MixerBlock::new(&mut Builder::new(&mut store, &mut rng), "b", s, h);
        (store, blk)
    }

    #[test]
    fn mixer_matches_loop_oracle_on_two_stacked_entities() {
        let (store, blk) = block(3, 5, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let seqs: Vec<Vec<Vec<f64>>> =
            (0..2).map(|_| (0..5).map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect()).collect()).collect();
        let flat: Vec<f64> = seqs.iter().flatten().flatten().copied().collect();
        let mut g = Graph::new();
        let mut cx = Cx::new(&mut g, &store);
        let x = cx.g.constant(Tensor::matrix(10, 4, flat));
        let y = blk.forward(&mut cx, x, 2).unwrap();
        let out = g.value(y);
        for (e, seq) in seqs.iter().enumerate() {
            let want = mixer_oracle(&store, &blk, seq);
            for t in 0..5 {
                for c in 0..4 {
                    assert!((out.get(e * 5 + t, c) - want[t][c]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn zero_output_layers_make_the_block_an_identity() {
        let (mut store, blk) = block(5, 21, 11);
        for id in [blk.seq.l2.w, blk.seq.l2.b, blk.feat.l2.w, blk.feat.l2.b] {
            store.get_mut(id).data_mut().fill(0.0);
        }
        let x = Tensor::matrix(21, 11, (0..231).map(|v| (v as f64 * 0.1).sin()).collect());
        let mut g = Graph::new();
        let mut cx = Cx::new(&mut g, &store);
        let xv = cx.g.constant(x.clone());
        let y = blk.forward(&mut cx, xv, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[21, 11]);
        assert_eq!(g.value(y), &x);
    }
}
