//! Full network: encoder, trajectory tokens, fusion decoder and head.

use numgrad::{Graph, Tensor, Var};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::Config;
use crate::encoder::{encode, EncodedScene, EncoderInput, EncoderParams};
use crate::error::{Error, Result};
use crate::fusion::{decode_head, fusion_block, AttnGeometry, DecoderParams, StreamLayout, EGO, LANE, NEIGHBOR};
use crate::params::{Builder, Cx, ParamStore};
use crate::scenario::{NormStats, ScenarioFrame, EGO_DIM, STATE_DIM};
use crate::tokenizer::{sinusoid, SegmentLayout};

/// Flow time is multiplied by this before the sinusoidal embedding.
const TIME_EMBED_SCALE: f64 = 1000.0;

/// Parameter handles of the whole network.
#[derive(Debug, Clone, PartialEq)]
pub struct Arch {
    pub encoder: EncoderParams,
    pub decoder: DecoderParams,
}

/// Architecture plus the config it was built from. Parameter values live
/// in a separate [`ParamStore`], so online and EMA weights share one model.
#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub cfg: Config,
    pub segments: SegmentLayout,
    pub arch: Arch,
}

impl Model {
    /// Builds the architecture and freshly initialized parameters.
    pub fn init(cfg: &Config, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder::new(&mut store, &mut rng);
        let encoder = EncoderParams::new(&mut b, cfg);
        let decoder = DecoderParams::new(&mut b, cfg);
        let segments = SegmentLayout::new(cfg.traj_len, cfg.seg_len, cfg.seg_overlap)?;
        Ok((Self { cfg: cfg.clone(), segments, arch: Arch { encoder, decoder } }, store))
    }

    /// Architecture only, for loading saved parameters.
    pub fn new(cfg: &Config) -> Result<Self> {
        Ok(Self::init(cfg, 0)?.0)
    }

    /// Number of scalar parameters.
    pub fn num_params(&self, store: &ParamStore) -> usize {
        store.num_scalars()
    }
}

/// Everything the network conditions on, for a batch of normalized frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub encoder: EncoderInput,
    pub ego: Tensor,
    pub stats: Vec<NormStats>,
}

impl Conditioning {
    pub fn new(frames: &[&ScenarioFrame], cfg: &Config) -> Result<Self> {
        if frames.is_empty() {
            return Err(Error::Invalid("empty batch".into()));
        }
        let encoder = EncoderInput::new(frames, cfg)?;
        let mut ego = Vec::with_capacity(frames.len() * EGO_DIM);
        let mut stats = Vec::with_capacity(frames.len());
        for f in frames {
            let s = f.norm.clone().ok_or(Error::NotNormalized)?;
            ego.extend_from_slice(&f.ego_features(&s));
            stats.push(s);
        }
        Ok(Self { encoder, ego: Tensor::matrix(frames.len(), EGO_DIM, ego), stats })
    }

    pub fn items(&self) -> usize {
        self.stats.len()
    }
}

/// Graph handles produced by [`forward`].
#[derive(Debug, Clone, Copy)]
pub struct Output {
    /// Reassembled prediction of the clean trajectory, `items·L × 4`.
    pub pred: Var,
    /// Per-point segment predictions before averaging, `items·K·L_seg × 4`.
    pub segments: Var,
}

/// Ego segment anchors: mean metric `(x, y)` of each segment of `tau_t`.
fn ego_anchors(layout: &SegmentLayout, tau: &Tensor, item: usize, stats: &NormStats) -> Vec<[f64; 2]> {
    (0..layout.count)
        .map(|k| {
            let r = layout.range(k);
            let n = r.len() as f64;
            let (mut sx, mut sy) = (0.0, 0.0);
            for i in r {
                let [x, y] = stats.denorm_xy(i, tau.row_slice(item * layout.len + i));
                sx += x;
                sy += y;
            }
            let a = [sx / n, sy / n];
            if a[0].is_finite() && a[1].is_finite() {
                a
            } else {
                [0.0, 0.0]
            }
        })
        .collect()
}

/// Predicts `τ̂₁` for each item from the noisy `tau_t` (`items·L × 4`) at
/// flow times `t`.
pub fn forward(cx: &mut Cx<'_>, model: &Model, cond: &Conditioning, tau_t: &Tensor, t: &[f64]) -> Result<Output> {
    let enc = encode(cx, &model.arch.encoder, &cond.encoder)?;
    decode(cx, model, cond, enc, tau_t, t)
}

/// Encoder outputs of one conditioning, reusable across flow times.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCache {
    lane: Tensor,
    neighbor: Tensor,
    nav: Tensor,
}

impl SceneCache {
    pub fn new(model: &Model, store: &ParamStore, cond: &Conditioning) -> Result<Self> {
        let mut g = Graph::new();
        let mut cx = Cx::new(&mut g, store);
        let enc = encode(&mut cx, &model.arch.encoder, &cond.encoder)?;
        Ok(Self { lane: g.value(enc.lane).clone(), neighbor: g.value(enc.neighbor).clone(), nav: g.value(enc.nav).clone() })
    }
}

/// [`predict`] with the encoder outputs taken from `cache`; the result is
/// bitwise identical.
pub fn predict_cached(
    model: &Model,
    store: &ParamStore,
    cond: &Conditioning,
    cache: &SceneCache,
    tau_t: &Tensor,
    t: &[f64],
) -> Result<Tensor> {
    let mut g = Graph::new();
    let enc = EncodedScene {
        lane: g.constant(cache.lane.clone()),
        neighbor: g.constant(cache.neighbor.clone()),
        nav: g.constant(cache.nav.clone()),
    };
    let mut cx = Cx::new(&mut g, store);
    let out = decode(&mut cx, model, cond, enc, tau_t, t)?;
    Ok(g.value(out.pred).clone())
}

fn decode(cx: &mut Cx<'_>, model: &Model, cond: &Conditioning, enc: EncodedScene, tau_t: &Tensor, t: &[f64]) -> Result<Output> {
    let cfg = &model.cfg;
    let seg = &model.segments;
    let items = cond.items();
    let d = cfg.decoder_hidden;
    if t.len() != items || tau_t.rows() != items * seg.len || tau_t.cols() != STATE_DIM {
        return Err(Error::Invalid(format!(
            "forward: {} times and a {:?} state for {items} items",
            t.len(),
            tau_t.shape()
        )));
    }
    let p = &model.arch.decoder;

    // Conditioning vector c = time + navigation + ego state.
    let temb: Vec<f64> = t.iter().flat_map(|&ti| sinusoid(TIME_EMBED_SCALE * ti, d)).collect();
    let temb = cx.g.constant(Tensor::matrix(items, d, temb));
    let time = p.time_mlp.forward(cx, temb)?;
    let ego_in = cx.g.constant(cond.ego.clone());
    let ego_c = p.ego_mlp.forward(cx, ego_in)?;
    let c = cx.g.add(time, enc.nav)?;
    let c = cx.g.add(c, ego_c)?;
    let c_act = cx.g.silu(c)?;

    // Ego segment tokens.
    let rows = seg.segment_rows(tau_t, items)?;
    let rows = cx.g.constant(rows);
    let ego = p.segment_mlp.forward(cx, rows)?;
    let pe: Vec<f64> = (0..items).flat_map(|_| (0..seg.count).flat_map(|k| sinusoid(k as f64, d))).collect();
    let pe = cx.g.constant(Tensor::matrix(items * seg.count, d, pe));
    let ego = cx.g.add(ego, pe)?;

    // Attention geometry, scene tokens then ego tokens.
    let mut anchors = cond.encoder.anchors.clone();
    let mut valid = cond.encoder.valid.clone();
    for b in 0..items {
        anchors[b].extend(ego_anchors(seg, tau_t, b, &cond.stats[b]));
        valid[b].extend(std::iter::repeat(true).take(seg.count));
    }
    let geo = AttnGeometry::new(&anchors, &valid);
    let lay = cond.encoder.layout;
    let streams_layout = StreamLayout::new(items, [lay.lane_modality(), lay.neighbors, seg.count]);

    let mut streams = [enc.lane, enc.neighbor, ego];
    debug_assert_eq!((LANE, NEIGHBOR, EGO), (0, 1, 2));
    for blk in &p.blocks {
        streams = fusion_block(cx, blk, streams, c_act, &streams_layout, &geo)?;
    }
    let out = decode_head(cx, p, streams, c_act, &streams_layout, &geo)?;
    let segments = cx.g.reshape(out, vec![items * seg.count * seg.seg_len, STATE_DIM])?;
    let pred = cx.g.combine_rows(segments, items * seg.len, seg.reassemble_terms(items))?;
    Ok(Output { pred, segments })
}

/// Evaluates [`forward`] without keeping the graph; returns `items·L × 4`.
pub fn predict(model: &Model, store: &ParamStore, cond: &Conditioning, tau_t: &Tensor, t: &[f64]) -> Result<Tensor> {
    let mut g = Graph::new();
    let mut cx = Cx::new(&mut g, store);
    let out = forward(&mut cx, model, cond, tau_t, t)?;
    Ok(g.value(out.pred).clone())
}
