//! Parameter layout, input assembly, and the tape-level forward pass.
//!
//! The decoder output is symmetrized: logits(s) = 0.5 * (f(s) + P f(M(s)))
//! where M mirrors the scene about the x-axis and P permutes the vocabulary
//! by the yaw-rate sign flip. Since M and P are involutions, the model is
//! exactly mirror-equivariant for any parameter values.

use super::tensor::{linear, NodeId, ParamStore, Tape, Tensor};
use super::{ModelConfig, ModelError, TokenBatch};
use crate::scenario::preprocess::CenteredScenario;
use crate::scenario::MAX_POLYLINES;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub(crate) struct AttnIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub wq: usize,
    pub bq: usize,
    pub wk: usize,
    pub bk: usize,
    pub wv: usize,
    pub bv: usize,
    pub wo: usize,
    pub bo: usize,
}

pub(crate) struct FfIdx {
    pub ln_g: usize,
    pub ln_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

/// Shared per-family projections of Fourier relation features into keys and
/// values.
pub(crate) struct RelIdx {
    pub kw: usize,
    pub kb: usize,
    pub vw: usize,
    pub vb: usize,
}

pub(crate) struct EncLayerIdx {
    pub attn: AttnIdx,
    pub ff: FfIdx,
}

pub(crate) struct DecBlockIdx {
    pub a2t: AttnIdx,
    pub a2a: AttnIdx,
    pub a2s: AttnIdx,
    pub ff: FfIdx,
}

pub(crate) struct ParamIndex {
    pub seg_w: usize,
    pub seg_b: usize,
    pub poly_w: usize,
    pub poly_b: usize,
    pub light_w: usize,
    pub light_b: usize,
    pub scene_rel: RelIdx,
    pub enc_layers: Vec<EncLayerIdx>,
    pub enc_out_g: usize,
    pub enc_out_b: usize,

    pub token_embed: usize,
    pub special_embed: usize,
    pub type_embed: usize,
    pub shape_w: usize,
    pub shape_b: usize,
    pub id_embed: usize,
    pub dir_embed: usize,
    pub cont_w: usize,
    pub cont_b: usize,
    pub a2a_rel: RelIdx,
    pub a2t_rel: RelIdx,
    pub a2s_rel: RelIdx,
    pub dec_blocks: Vec<DecBlockIdx>,
    pub head_ln_g: usize,
    pub head_ln_b: usize,
    pub head_w1: usize,
    pub head_b1: usize,
    pub head_w2: usize,
    pub head_b2: usize,
}

/// Fixed seeded Gaussian frequency matrices, one per relation family.
/// `[band][input_dim]`, not trained.
pub(crate) struct FourierBanks {
    pub scene: Vec<Vec<f64>>,
    pub a2a: Vec<Vec<f64>>,
    pub a2t: Vec<Vec<f64>>,
    pub a2s: Vec<Vec<f64>>,
    pub cont: Vec<Vec<f64>>,
}

/// Relative pose feature in the query's frame: [dx, dy, sin dh, cos dh, dist]
/// with positions scaled by 1/50.
pub(crate) const REL_DIM: usize = 5;
/// A2T adds a signed time-offset feature.
pub(crate) const REL_T_DIM: usize = 6;
const POS_SCALE: f64 = 1.0 / 50.0;
const TIME_SCALE: f64 = 1.0 / 10.0;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

pub(crate) fn fourier_banks(cfg: &ModelConfig) -> FourierBanks {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut bank = |dim: usize| -> Vec<Vec<f64>> {
        (0..cfg.fourier_bands)
            .map(|_| (0..dim).map(|_| gaussian(&mut rng)).collect())
            .collect()
    };
    FourierBanks {
        scene: bank(REL_DIM),
        a2a: bank(REL_DIM),
        a2t: bank(REL_T_DIM),
        a2s: bank(REL_DIM),
        cont: bank(2),
    }
}

/// Map features through a fixed frequency bank to [cos, sin] pairs:
/// output row = [cos(2*pi*s*B_f . r)]_f ++ [sin(2*pi*s*B_f . r)]_f.
pub(crate) fn fourier_encode(bank: &[Vec<f64>], scale: f64, feats: &[Vec<f64>]) -> Tensor {
    let bands = bank.len();
    let mut out = Tensor::zeros(feats.len(), 2 * bands);
    for (r, feat) in feats.iter().enumerate() {
        for (f, freq) in bank.iter().enumerate() {
            let arg = 2.0 * std::f64::consts::PI
                * scale
                * freq.iter().zip(feat).map(|(a, b)| a * b).sum::<f64>();
            out.data[r * 2 * bands + f] = arg.cos();
            out.data[r * 2 * bands + bands + f] = arg.sin();
        }
    }
    out
}

fn rel5(from: (f64, f64, f64), to: (f64, f64, f64)) -> [f64; REL_DIM] {
    let (dx, dy) = (to.0 - from.0, to.1 - from.1);
    let (s, c) = from.2.sin_cos();
    let lx = c * dx + s * dy;
    let ly = -s * dx + c * dy;
    let dh = to.2 - from.2;
    [lx * POS_SCALE, ly * POS_SCALE, dh.sin(), dh.cos(), (dx * dx + dy * dy).sqrt() * POS_SCALE]
}

pub(crate) fn build_params(cfg: &ModelConfig) -> (ParamStore, ParamIndex) {
    let h = cfg.hidden_dim;
    let f2 = 2 * cfg.fourier_bands;
    let mut store = ParamStore::default();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let lin = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fi: usize, fo: usize| {
        let lim = (6.0 / (fi + fo) as f64).sqrt();
        let w = store.add(
            &format!("{name}.w"),
            fi,
            fo,
            (0..fi * fo).map(|_| rng.gen_range(-lim..lim)).collect(),
        );
        let b = store.add(&format!("{name}.b"), 1, fo, vec![0.0; fo]);
        (w, b)
    };
    let ln = |store: &mut ParamStore, name: &str, n: usize| {
        let g = store.add(&format!("{name}.gain"), 1, n, vec![1.0; n]);
        let b = store.add(&format!("{name}.bias"), 1, n, vec![0.0; n]);
        (g, b)
    };
    let table = |store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, n: usize, d: usize| {
        store.add(name, n, d, (0..n * d).map(|_| rng.gen_range(-0.05..0.05)).collect())
    };
    macro_rules! attn {
        ($prefix:expr) => {{
            let (ln_g, ln_b) = ln(&mut store, &format!("{}.ln", $prefix), h);
            let (wq, bq) = lin(&mut store, &mut rng, &format!("{}.q", $prefix), h, h);
            let (wk, bk) = lin(&mut store, &mut rng, &format!("{}.k", $prefix), h, h);
            let (wv, bv) = lin(&mut store, &mut rng, &format!("{}.v", $prefix), h, h);
            let (wo, bo) = lin(&mut store, &mut rng, &format!("{}.o", $prefix), h, h);
            AttnIdx { ln_g, ln_b, wq, bq, wk, bk, wv, bv, wo, bo }
        }};
    }
    macro_rules! ff {
        ($prefix:expr) => {{
            let (ln_g, ln_b) = ln(&mut store, &format!("{}.ln", $prefix), h);
            let (w1, b1) = lin(&mut store, &mut rng, &format!("{}.1", $prefix), h, 2 * h);
            let (w2, b2) = lin(&mut store, &mut rng, &format!("{}.2", $prefix), 2 * h, h);
            FfIdx { ln_g, ln_b, w1, b1, w2, b2 }
        }};
    }
    macro_rules! rel {
        ($prefix:expr) => {{
            let (kw, kb) = lin(&mut store, &mut rng, &format!("{}.key", $prefix), f2, h);
            let (vw, vb) = lin(&mut store, &mut rng, &format!("{}.value", $prefix), f2, h);
            RelIdx { kw, kb, vw, vb }
        }};
    }

    let (seg_w, seg_b) = lin(
        &mut store,
        &mut rng,
        "scene.segment",
        crate::scenario::preprocess::SEGMENT_FEATURE_DIM,
        h,
    );
    let (poly_w, poly_b) = lin(&mut store, &mut rng, "scene.polyline", h, h);
    let (light_w, light_b) = lin(
        &mut store,
        &mut rng,
        "scene.light",
        crate::scenario::preprocess::LIGHT_FEATURE_DIM,
        h,
    );
    let scene_rel = rel!("scene.rel");
    let enc_layers = (0..cfg.num_encoder_layers)
        .map(|l| EncLayerIdx { attn: attn!(format!("enc{l}.attn")), ff: ff!(format!("enc{l}.ff")) })
        .collect();
    let (enc_out_g, enc_out_b) = ln(&mut store, "scene.out_ln", h);

    let motion = cfg.token_space.num_tokens();
    let token_embed = table(&mut store, &mut rng, "dec.token_embed", motion, h);
    let special_embed = table(&mut store, &mut rng, "dec.special_embed", 3, h);
    let type_embed = table(&mut store, &mut rng, "dec.type_embed", 3, h);
    let (shape_w, shape_b) = lin(&mut store, &mut rng, "dec.shape", 3, h);
    let id_embed =
        table(&mut store, &mut rng, "dec.id_embed", crate::scenario::MAX_AGENTS, h);
    let dir_embed = table(&mut store, &mut rng, "dec.dir_embed", 2, h);
    let (cont_w, cont_b) = lin(&mut store, &mut rng, "dec.cont", f2, h);
    let a2a_rel = rel!("dec.a2a_rel");
    let a2t_rel = rel!("dec.a2t_rel");
    let a2s_rel = rel!("dec.a2s_rel");
    let dec_blocks = (0..cfg.num_decoder_blocks)
        .map(|b| DecBlockIdx {
            a2t: attn!(format!("dec{b}.a2t")),
            a2a: attn!(format!("dec{b}.a2a")),
            a2s: attn!(format!("dec{b}.a2s")),
            ff: ff!(format!("dec{b}.ff")),
        })
        .collect();
    let (head_ln_g, head_ln_b) = ln(&mut store, "head.ln", h);
    let (head_w1, head_b1) = lin(&mut store, &mut rng, "head.1", h, h);
    let (head_w2, head_b2) = lin(&mut store, &mut rng, "head.2", h, cfg.vocab_size());

    let idx = ParamIndex {
        seg_w,
        seg_b,
        poly_w,
        poly_b,
        light_w,
        light_b,
        scene_rel,
        enc_layers,
        enc_out_g,
        enc_out_b,
        token_embed,
        special_embed,
        type_embed,
        shape_w,
        shape_b,
        id_embed,
        dir_embed,
        cont_w,
        cont_b,
        a2a_rel,
        a2t_rel,
        a2s_rel,
        dec_blocks,
        head_ln_g,
        head_ln_b,
        head_w1,
        head_b1,
        head_w2,
        head_b2,
    };
    (store, idx)
}

/// Host-side scene features ready for the tape: per-polyline segment rows,
/// traffic-light rows, anchor poses, and the Fourier-encoded pairwise
/// relations between scene elements.
pub(crate) struct SceneInputs {
    pub seg_feats: Vec<Tensor>,
    pub light_feats: Option<Tensor>,
    pub anchors: Vec<(f64, f64, f64)>,
    pub rel: Option<Tensor>,
}

impl SceneInputs {
    pub fn build(
        cs: &CenteredScenario,
        cfg: &ModelConfig,
        banks: &FourierBanks,
    ) -> Result<Self, ModelError> {
        if cs.polylines.len() > MAX_POLYLINES {
            return Err(ModelError::Capacity(cs.polylines.len()));
        }
        let mut anchors: Vec<(f64, f64, f64)> = cs
            .polylines
            .iter()
            .map(|p| (p.anchor.0, p.anchor.1, p.heading))
            .collect();
        anchors.extend(cs.light_positions.iter().map(|&(x, y)| (x, y, 0.0)));

        let seg_feats = cs
            .polylines
            .iter()
            .map(|p| {
                let rows = p.segments.len();
                let cols = crate::scenario::preprocess::SEGMENT_FEATURE_DIM;
                let mut data = Vec::with_capacity(rows * cols);
                for s in &p.segments {
                    data.extend_from_slice(s);
                }
                Tensor::from_vec(rows, cols, data)
            })
            .collect();
        let light_feats = if cs.light_features.is_empty() {
            None
        } else {
            let rows = cs.light_features.len();
            let cols = crate::scenario::preprocess::LIGHT_FEATURE_DIM;
            let mut data = Vec::with_capacity(rows * cols);
            for l in &cs.light_features {
                data.extend_from_slice(l);
            }
            Some(Tensor::from_vec(rows, cols, data))
        };

        let s = anchors.len();
        let rel = if s == 0 {
            None
        } else {
            let mut feats = Vec::with_capacity(s * s);
            for &a in &anchors {
                for &b in &anchors {
                    feats.push(rel5(a, b).to_vec());
                }
            }
            Some(fourier_encode(&banks.scene, cfg.fourier_scale, &feats))
        };
        Ok(Self { seg_feats, light_feats, anchors, rel })
    }
}

/// Host-side decoder inputs for one token batch: embedding lookup indices,
/// continuous features, Fourier relation tensors, and attention masks.
/// Rows are agent-major: row = agent * P + position.
pub(crate) struct BatchInputs {
    pub n: usize,
    pub p: usize,
    pub token_rows: Vec<usize>,
    pub kind_rows: Vec<usize>,
    pub shape_feats: Tensor,
    pub id_rows: Vec<usize>,
    pub dir_row: usize,
    pub cont: Tensor,
    /// (N*P*P, 2F); block i covers agent i's position-pair relations.
    pub a2t_rel: Tensor,
    pub a2t_mask: Vec<Vec<bool>>,
    /// (P*N*N, 2F); block p covers the agent-pair relations at position p.
    pub a2a_rel: Tensor,
    pub a2a_mask: Vec<Vec<bool>>,
    /// (N*P*S, 2F) in row-major (row, scene element) order.
    pub a2s_rel: Option<Tensor>,
}

impl BatchInputs {
    pub fn build(
        batch: &TokenBatch,
        scene: &SceneInputs,
        cfg: &ModelConfig,
        banks: &FourierBanks,
    ) -> Result<Self, ModelError> {
        let n = batch.tokens.len();
        if n == 0 {
            return Err(ModelError::Shape("batch has no agents".into()));
        }
        let p = batch.tokens[0].len();
        if p == 0 {
            return Err(ModelError::Shape("batch has no positions".into()));
        }
        for i in 0..n {
            if batch.tokens[i].len() != p
                || batch.states[i].len() != p
                || batch.valid[i].len() != p
                || batch.targets[i].len() != p
                || batch.target_mask[i].len() != p
            {
                return Err(ModelError::Shape(format!(
                    "agent {i}: inconsistent sequence lengths"
                )));
            }
        }
        if batch.kinds.len() != n || batch.shapes.len() != n || batch.agent_slots.len() != n {
            return Err(ModelError::Shape("per-agent metadata length mismatch".into()));
        }
        let vocab = cfg.vocab_size();
        let motion = cfg.token_space.num_tokens();

        let np = n * p;
        let mut token_rows = Vec::with_capacity(np);
        let mut kind_rows = Vec::with_capacity(np);
        let mut id_rows = Vec::with_capacity(np);
        let mut shape_data = Vec::with_capacity(np * 3);
        let mut cont_feats = Vec::with_capacity(np);
        for i in 0..n {
            if batch.agent_slots[i] >= crate::scenario::MAX_AGENTS {
                return Err(ModelError::Shape(format!(
                    "agent slot {} out of range",
                    batch.agent_slots[i]
                )));
            }
            for q in 0..p {
                let tok = batch.tokens[i][q];
                if tok >= vocab || batch.targets[i][q] >= vocab {
                    return Err(ModelError::Shape(format!("token id out of vocabulary: {tok}")));
                }
                token_rows.push(tok);
                kind_rows.push(batch.kinds[i].index());
                id_rows.push(batch.agent_slots[i]);
                let (l, w, hh) = batch.shapes[i];
                shape_data.extend_from_slice(&[l, w, hh]);
                let c = if tok < motion {
                    let z = cfg.token_space.token(tok);
                    vec![z.accel / cfg.token_space.a_max, z.yaw_rate / cfg.token_space.omega_max]
                } else {
                    vec![0.0, 0.0]
                };
                cont_feats.push(c);
            }
        }
        let cont = fourier_encode(&banks.cont, cfg.fourier_scale, &cont_feats);

        let pose = |i: usize, q: usize| -> (f64, f64, f64) {
            let s = &batch.states[i][q];
            (s.x, s.y, s.heading)
        };

        // Per-agent temporal relations with causal + validity masking.
        // Self-attention to the own position is always allowed.
        let mut a2t_feats = Vec::with_capacity(n * p * p);
        let mut a2t_mask = Vec::with_capacity(n);
        for i in 0..n {
            let mut mask = Vec::with_capacity(p * p);
            for pq in 0..p {
                for pk in 0..p {
                    let mut f = rel5(pose(i, pq), pose(i, pk)).to_vec();
                    f.push((pq as f64 - pk as f64) * cfg.token_space.dt * TIME_SCALE);
                    a2t_feats.push(f);
                    mask.push(pk != pq && (pk > pq || !batch.valid[i][pk]));
                }
            }
            a2t_mask.push(mask);
        }
        let a2t_rel = fourier_encode(&banks.a2t, cfg.fourier_scale, &a2t_feats);

        // Per-position agent-to-agent relations.
        let mut a2a_feats = Vec::with_capacity(p * n * n);
        let mut a2a_mask = Vec::with_capacity(p);
        for q in 0..p {
            let mut mask = Vec::with_capacity(n * n);
            for i in 0..n {
                for j in 0..n {
                    a2a_feats.push(rel5(pose(i, q), pose(j, q)).to_vec());
                    mask.push(j != i && !batch.valid[j][q]);
                }
            }
            a2a_mask.push(mask);
        }
        let a2a_rel = fourier_encode(&banks.a2a, cfg.fourier_scale, &a2a_feats);

        let s = scene.anchors.len();
        let a2s_rel = if s == 0 {
            None
        } else {
            let mut feats = Vec::with_capacity(np * s);
            for i in 0..n {
                for q in 0..p {
                    for &a in &scene.anchors {
                        feats.push(rel5(pose(i, q), a).to_vec());
                    }
                }
            }
            Some(fourier_encode(&banks.a2s, cfg.fourier_scale, &feats))
        };

        Ok(Self {
            n,
            p,
            token_rows,
            kind_rows,
            shape_feats: Tensor::from_vec(np, 3, shape_data),
            id_rows,
            dir_row: match batch.direction {
                crate::kinematics::Direction::Forward => 0,
                crate::kinematics::Direction::Reverse => 1,
            },
            cont,
            a2t_rel,
            a2t_mask,
            a2a_rel,
            a2a_mask,
            a2s_rel,
        })
    }
}

/// Multi-head attention with relation-augmented keys and values. `q_in` and
/// `kv_in` are already layer-normed; `relk`/`relv` hold one projected row per
/// (query, key) edge. `mask` flags edges to exclude.
#[allow(clippy::too_many_arguments)]
fn attn_core(
    tape: &mut Tape,
    store: &ParamStore,
    ai: &AttnIdx,
    q_in: NodeId,
    kv_in: NodeId,
    relk: NodeId,
    relv: NodeId,
    mask: Option<&[bool]>,
    heads: usize,
) -> NodeId {
    let h = tape.value(q_in).cols;
    let dh = h / heads;
    let kcount = tape.value(kv_in).rows;
    let q = linear(tape, store, q_in, ai.wq, ai.bq);
    let k = linear(tape, store, kv_in, ai.wk, ai.bk);
    let v = linear(tape, store, kv_in, ai.wv, ai.bv);
    let mut ctxs = Vec::with_capacity(heads);
    for head in 0..heads {
        let qh = tape.slice_cols(q, head * dh, dh);
        let kh = tape.slice_cols(k, head * dh, dh);
        let vh = tape.slice_cols(v, head * dh, dh);
        let rkh = tape.slice_cols(relk, head * dh, dh);
        let rvh = tape.slice_cols(relv, head * dh, dh);
        let kt = tape.transpose(kh);
        let dot = tape.matmul(qh, kt);
        let edge = tape.edge_scores(qh, rkh, kcount);
        let scores = tape.add(dot, edge);
        let mut scores = tape.scale(scores, 1.0 / (dh as f64).sqrt());
        if let Some(m) = mask {
            scores = tape.mask_fill(scores, m.to_vec(), -1e9);
        }
        let p = tape.softmax_rows(scores);
        let mixed = tape.matmul(p, vh);
        let edge_v = tape.edge_mix(p, rvh);
        ctxs.push(tape.add(mixed, edge_v));
    }
    let ctx = tape.concat_cols(ctxs);
    linear(tape, store, ctx, ai.wo, ai.bo)
}

fn ff_block(tape: &mut Tape, store: &ParamStore, fi: &FfIdx, x: NodeId) -> NodeId {
    let g = tape.param(store, fi.ln_g);
    let b = tape.param(store, fi.ln_b);
    let xn = tape.layer_norm(x, g, b);
    let h1 = linear(tape, store, xn, fi.w1, fi.b1);
    let h1 = tape.gelu(h1);
    let delta = linear(tape, store, h1, fi.w2, fi.b2);
    tape.add(x, delta)
}

fn project_rel(tape: &mut Tape, store: &ParamStore, rel: &Tensor, ri: &RelIdx) -> (NodeId, NodeId) {
    let rn = tape.constant(rel.clone());
    let k = linear(tape, store, rn, ri.kw, ri.kb);
    let v = linear(tape, store, rn, ri.vw, ri.vb);
    (k, v)
}

/// Scene transformer encoder on the tape. Returns one row per polyline
/// followed by one row per traffic light, or `None` for an empty scene.
pub(crate) fn encode_scene_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    idx: &ParamIndex,
    cfg: &ModelConfig,
    scene: &SceneInputs,
) -> Option<NodeId> {
    if scene.anchors.is_empty() {
        return None;
    }
    let mut parts = Vec::with_capacity(scene.seg_feats.len() + 1);
    for seg in &scene.seg_feats {
        let sn = tape.constant(seg.clone());
        let h = linear(tape, store, sn, idx.seg_w, idx.seg_b);
        let h = tape.gelu(h);
        let pooled = tape.max_pool_rows(h);
        parts.push(linear(tape, store, pooled, idx.poly_w, idx.poly_b));
    }
    if let Some(lf) = &scene.light_feats {
        let ln_ = tape.constant(lf.clone());
        parts.push(linear(tape, store, ln_, idx.light_w, idx.light_b));
    }
    let mut x = tape.concat_rows(parts);
    let (relk, relv) = project_rel(tape, store, scene.rel.as_ref().unwrap(), &idx.scene_rel);
    for layer in &idx.enc_layers {
        let g = tape.param(store, layer.attn.ln_g);
        let b = tape.param(store, layer.attn.ln_b);
        let xa = tape.layer_norm(x, g, b);
        let delta =
            attn_core(tape, store, &layer.attn, xa, xa, relk, relv, None, cfg.num_heads);
        x = tape.add(x, delta);
        x = ff_block(tape, store, &layer.ff, x);
    }
    let g = tape.param(store, idx.enc_out_g);
    let b = tape.param(store, idx.enc_out_b);
    Some(tape.layer_norm(x, g, b))
}

/// One decoder pass: input embedding sum, alternating temporal / cross-agent /
/// scene attention blocks, and the 2-layer GELU head. Returns logits with one
/// row per (agent, position) in agent-major order.
fn decode_on_tape(
    tape: &mut Tape,
    store: &ParamStore,
    idx: &ParamIndex,
    cfg: &ModelConfig,
    scene_node: Option<NodeId>,
    inputs: &BatchInputs,
) -> NodeId {
    let (n, p) = (inputs.n, inputs.p);

    let tok_table = {
        let t = tape.param(store, idx.token_embed);
        let s = tape.param(store, idx.special_embed);
        tape.concat_rows(vec![t, s])
    };
    let tok = tape.gather_rows(tok_table, inputs.token_rows.clone());
    let type_table = tape.param(store, idx.type_embed);
    let typ = tape.gather_rows(type_table, inputs.kind_rows.clone());
    let shape_in = tape.constant(inputs.shape_feats.clone());
    let shp = linear(tape, store, shape_in, idx.shape_w, idx.shape_b);
    let id_table = tape.param(store, idx.id_embed);
    let ide = tape.gather_rows(id_table, inputs.id_rows.clone());
    let dir_table = tape.param(store, idx.dir_embed);
    let dir = tape.gather_rows(dir_table, vec![inputs.dir_row]);
    let cont_in = tape.constant(inputs.cont.clone());
    let cont = linear(tape, store, cont_in, idx.cont_w, idx.cont_b);

    let mut x = tape.add(tok, typ);
    x = tape.add(x, shp);
    x = tape.add(x, ide);
    x = tape.add(x, cont);
    x = tape.add_row(x, dir);

    let (a2t_k, a2t_v) = project_rel(tape, store, &inputs.a2t_rel, &idx.a2t_rel);
    let (a2a_k, a2a_v) = project_rel(tape, store, &inputs.a2a_rel, &idx.a2a_rel);
    let a2s_kv = inputs
        .a2s_rel
        .as_ref()
        .map(|rel| project_rel(tape, store, rel, &idx.a2s_rel));

    // Agent-major row r = i*p + q; step-major row r = q*n + i.
    let step_to_agent: Vec<usize> =
        (0..n * p).map(|r| (r % p) * n + r / p).collect();

    for block in &idx.dec_blocks {
        // Each agent attends over its own (causal) history.
        let g = tape.param(store, block.a2t.ln_g);
        let b = tape.param(store, block.a2t.ln_b);
        let xa = tape.layer_norm(x, g, b);
        let mut parts = Vec::with_capacity(n);
        for i in 0..n {
            let rows = tape.gather_rows(xa, (i * p..(i + 1) * p).collect());
            let rk = tape.gather_rows(a2t_k, (i * p * p..(i + 1) * p * p).collect());
            let rv = tape.gather_rows(a2t_v, (i * p * p..(i + 1) * p * p).collect());
            parts.push(attn_core(
                tape,
                store,
                &block.a2t,
                rows,
                rows,
                rk,
                rv,
                Some(&inputs.a2t_mask[i]),
                cfg.num_heads,
            ));
        }
        let delta = tape.concat_rows(parts);
        x = tape.add(x, delta);

        // Agents attend to each other within the same position.
        let g = tape.param(store, block.a2a.ln_g);
        let b = tape.param(store, block.a2a.ln_b);
        let xa = tape.layer_norm(x, g, b);
        let mut parts = Vec::with_capacity(p);
        for q in 0..p {
            let rows = tape.gather_rows(xa, (0..n).map(|i| i * p + q).collect());
            let rk = tape.gather_rows(a2a_k, (q * n * n..(q + 1) * n * n).collect());
            let rv = tape.gather_rows(a2a_v, (q * n * n..(q + 1) * n * n).collect());
            parts.push(attn_core(
                tape,
                store,
                &block.a2a,
                rows,
                rows,
                rk,
                rv,
                Some(&inputs.a2a_mask[q]),
                cfg.num_heads,
            ));
        }
        let step_major = tape.concat_rows(parts);
        let delta = tape.gather_rows(step_major, step_to_agent.clone());
        x = tape.add(x, delta);

        // Cross-attention into the scene embedding.
        if let (Some(scene_x), Some((rk, rv))) = (scene_node, &a2s_kv) {
            let g = tape.param(store, block.a2s.ln_g);
            let b = tape.param(store, block.a2s.ln_b);
            let xa = tape.layer_norm(x, g, b);
            let delta = attn_core(
                tape,
                store,
                &block.a2s,
                xa,
                scene_x,
                *rk,
                *rv,
                None,
                cfg.num_heads,
            );
            x = tape.add(x, delta);
        }

        x = ff_block(tape, store, &block.ff, x);
    }

    let g = tape.param(store, idx.head_ln_g);
    let b = tape.param(store, idx.head_ln_b);
    let xn = tape.layer_norm(x, g, b);
    let h1 = linear(tape, store, xn, idx.head_w1, idx.head_b1);
    let h1 = tape.gelu(h1);
    linear(tape, store, h1, idx.head_w2, idx.head_b2)
}

/// Vocabulary permutation induced by mirroring: motion tokens map to their
/// yaw-flipped counterpart, specials map to themselves.
pub(crate) fn mirror_vocab_perm(cfg: &ModelConfig) -> Vec<usize> {
    let motion = cfg.token_space.num_tokens();
    (0..cfg.vocab_size())
        .map(|j| if j < motion { cfg.token_space.flip_yaw(j) } else { j })
        .collect()
}

/// Mirror-symmetrized forward pass: average the plain logits with the
/// column-permuted logits of the mirrored inputs.
pub(crate) fn forward_sym(
    tape: &mut Tape,
    store: &ParamStore,
    idx: &ParamIndex,
    cfg: &ModelConfig,
    scene: &SceneInputs,
    inputs: &BatchInputs,
    scene_m: &SceneInputs,
    inputs_m: &BatchInputs,
) -> NodeId {
    let s1 = encode_scene_on_tape(tape, store, idx, cfg, scene);
    let l1 = decode_on_tape(tape, store, idx, cfg, s1, inputs);
    let s2 = encode_scene_on_tape(tape, store, idx, cfg, scene_m);
    let l2 = decode_on_tape(tape, store, idx, cfg, s2, inputs_m);
    let l2p = tape.permute_cols(l2, mirror_vocab_perm(cfg));
    let sum = tape.add(l1, l2p);
    tape.scale(sum, 0.5)
}
