//! Bidirectional motion-token transformer: scene encoder, relation-aware
//! autoregressive decoder, masked cross-entropy training with diagnostics,
//! nucleus sampling, and rollout in either time direction.

pub mod tensor;

mod checkpoint;
mod net;

pub use checkpoint::{load_model, save_model};

use crate::kinematics::{step, tokenize_track, Direction, MotionToken, TokenSpace};
use crate::scenario::preprocess::{mirror_centered, preprocess, CenteredScenario};
use crate::scenario::{normalize_angle, AgentKind, AgentState, Scenario, MAX_POLYLINES};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use tensor::{ParamStore, Tape};
use thiserror::Error;

/// Extra vocabulary slots appended after the motion tokens.
pub const NUM_SPECIAL_TOKENS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden_dim: usize,
    pub num_encoder_layers: usize,
    pub num_decoder_blocks: usize,
    pub num_heads: usize,
    pub fourier_bands: usize,
    pub fourier_scale: f64,
    pub top_p: f64,
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub train_steps: usize,
    pub batch_size: usize,
    /// Fraction of training spent on forward-only batches before mixing in
    /// reverse-direction batches 50/50.
    pub phase1_fraction: f64,
    /// Stop early once the running batch loss drops to this value.
    pub stop_loss: Option<f64>,
    pub log_interval: usize,
    pub token_space: TokenSpace,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden_dim: 64,
            num_encoder_layers: 2,
            num_decoder_blocks: 2,
            num_heads: 4,
            fourier_bands: 16,
            fourier_scale: 1.0,
            top_p: 0.95,
            temperature: 1.0,
            learning_rate: 3e-4,
            weight_decay: 0.01,
            seed: 0,
            train_steps: 2000,
            batch_size: 2,
            phase1_fraction: 0.4,
            stop_loss: None,
            log_interval: 50,
            token_space: TokenSpace::default(),
        }
    }
}

impl ModelConfig {
    pub fn vocab_size(&self) -> usize {
        self.token_space.num_tokens() + NUM_SPECIAL_TOKENS
    }

    pub fn start_id(&self) -> usize {
        self.token_space.num_tokens()
    }

    pub fn end_id(&self) -> usize {
        self.token_space.num_tokens() + 1
    }

    pub fn pad_id(&self) -> usize {
        self.token_space.num_tokens() + 2
    }

    /// Reduced configuration small enough for finite-difference gradient
    /// checking (< 10k parameters).
    pub fn tiny(seed: u64) -> Self {
        Self {
            hidden_dim: 8,
            num_encoder_layers: 1,
            num_decoder_blocks: 1,
            num_heads: 2,
            fourier_bands: 2,
            seed,
            token_space: TokenSpace { bins: 5, ..TokenSpace::default() },
            ..Self::default()
        }
    }
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("scene capacity exceeded: {0} polylines (max {MAX_POLYLINES})")]
    Capacity(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss mask is empty")]
    EmptyMask,
    #[error("training diverged at step {0}: loss is not finite")]
    Divergence(usize),
    #[error("gradient check failed for {} parameters: {}", .0.len(), .0.join(", "))]
    GradCheckFailure(Vec<String>),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Token sequences for every agent of one scenario, in decode order (for
/// `Reverse`, position 0 is the latest state and positions run backwards in
/// time). Each sequence starts with START; `states[i][q]` is the pose the
/// agent occupies after emitting `q` motion tokens from its anchor.
#[derive(Debug, Clone)]
pub struct TokenBatch {
    pub direction: Direction,
    /// Vocabulary ids, `[agent][position]`; position 0 is START.
    pub tokens: Vec<Vec<usize>>,
    pub states: Vec<Vec<AgentState>>,
    pub valid: Vec<Vec<bool>>,
    /// Next-token targets aligned with positions; the final position's target
    /// is END and carries zero mask.
    pub targets: Vec<Vec<usize>>,
    pub target_mask: Vec<Vec<f64>>,
    pub kinds: Vec<AgentKind>,
    pub shapes: Vec<(f64, f64, f64)>,
    /// Index of each agent in the centered ordering (drives the id embedding).
    pub agent_slots: Vec<usize>,
}

impl TokenBatch {
    /// Tokenize every agent of a preprocessed scenario. Agents whose tracks
    /// cannot be tokenized (invalid states) are skipped.
    pub fn from_scenario(
        cs: &CenteredScenario,
        dir: Direction,
        cfg: &ModelConfig,
    ) -> Result<Self, ModelError> {
        let ts = &cfg.token_space;
        let mut batch = Self::empty(dir);
        for (slot, track) in cs.scenario.agents.iter().enumerate() {
            let Ok(toks) = tokenize_track(track, dir, ts) else { continue };
            let anchor = match dir {
                Direction::Forward => track.states[0],
                Direction::Reverse => *track.states.last().unwrap(),
            };
            let motion: Vec<MotionToken> = toks.iter().map(|(z, _)| *z).collect();
            batch.push_agent(
                track.kind,
                (track.length, track.width, track.height),
                slot,
                anchor,
                &motion,
                cfg,
            );
        }
        if batch.tokens.is_empty() {
            return Err(ModelError::Shape("no tokenizable agents in scenario".into()));
        }
        Ok(batch)
    }

    fn empty(dir: Direction) -> Self {
        Self {
            direction: dir,
            tokens: Vec::new(),
            states: Vec::new(),
            valid: Vec::new(),
            targets: Vec::new(),
            target_mask: Vec::new(),
            kinds: Vec::new(),
            shapes: Vec::new(),
            agent_slots: Vec::new(),
        }
    }

    /// Append one agent's full sequence: START + the given motion tokens,
    /// with states reconstructed from the anchor.
    fn push_agent(
        &mut self,
        kind: AgentKind,
        shape: (f64, f64, f64),
        slot: usize,
        anchor: AgentState,
        motion: &[MotionToken],
        cfg: &ModelConfig,
    ) {
        let ts = &cfg.token_space;
        let p = motion.len() + 1;
        let mut tokens = Vec::with_capacity(p);
        let mut states = Vec::with_capacity(p);
        tokens.push(cfg.start_id());
        states.push(anchor);
        let mut cur = anchor;
        for z in motion {
            tokens.push(z.id);
            cur = step(&cur, z, self.direction, ts);
            states.push(cur);
        }
        let mut targets = Vec::with_capacity(p);
        let mut mask = Vec::with_capacity(p);
        for q in 0..p {
            if q + 1 < p {
                targets.push(tokens[q + 1]);
                mask.push(1.0);
            } else {
                targets.push(cfg.end_id());
                mask.push(0.0);
            }
        }
        self.tokens.push(tokens);
        self.states.push(states);
        self.valid.push(vec![true; p]);
        self.targets.push(targets);
        self.target_mask.push(mask);
        self.kinds.push(kind);
        self.shapes.push(shape);
        self.agent_slots.push(slot);
    }

    /// The batch reflected about the x-axis: token yaw rates flip sign and
    /// states mirror. Pairs with `mirror_centered` scene inputs.
    pub fn mirrored(&self, ts: &TokenSpace) -> Self {
        let motion = ts.num_tokens();
        let flip = |id: usize| if id < motion { ts.flip_yaw(id) } else { id };
        let mut out = self.clone();
        for seq in &mut out.tokens {
            for t in seq.iter_mut() {
                *t = flip(*t);
            }
        }
        for seq in &mut out.targets {
            for t in seq.iter_mut() {
                *t = flip(*t);
            }
        }
        for seq in &mut out.states {
            for s in seq.iter_mut() {
                s.y = -s.y;
                s.heading = normalize_angle(-s.heading);
            }
        }
        out
    }

    fn flat_targets(&self) -> (Vec<usize>, Vec<f64>) {
        let mut t = Vec::new();
        let mut m = Vec::new();
        for i in 0..self.tokens.len() {
            t.extend_from_slice(&self.targets[i]);
            m.extend_from_slice(&self.target_mask[i]);
        }
        (t, m)
    }
}

/// Training/evaluation diagnostics for one batch of logits.
#[derive(Debug, Clone, Default, Serialize)]
pub struct Diagnostics {
    pub accuracy_fwd: Option<f64>,
    pub accuracy_rev: Option<f64>,
    pub entropy_fwd: Option<f64>,
    pub entropy_rev: Option<f64>,
    /// exp(-sum p log(p+1e-8)) of the predicted-token histogram.
    pub perplexity: f64,
    /// Number of distinct predicted tokens.
    pub clusters: usize,
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for x in &mut out {
        *x /= sum;
    }
    out
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in row.iter().enumerate() {
        if x > row[best] {
            best = i;
        }
    }
    best
}

/// Masked mean cross-entropy in nats/token plus diagnostics over the masked
/// positions.
pub fn loss(
    logits: &[Vec<Vec<f64>>],
    batch: &TokenBatch,
) -> Result<(f64, Diagnostics), ModelError> {
    if logits.len() != batch.tokens.len() {
        return Err(ModelError::Shape(format!(
            "logits for {} agents, batch has {}",
            logits.len(),
            batch.tokens.len()
        )));
    }
    let vocab = logits
        .first()
        .and_then(|a| a.first())
        .map(|r| r.len())
        .ok_or_else(|| ModelError::Shape("empty logits".into()))?;

    let mut total = 0.0;
    let mut mask_sum = 0.0;
    let mut correct = 0.0;
    let mut entropy = 0.0;
    let mut pred_hist = vec![0.0f64; vocab];
    let mut pred_count = 0.0f64;
    for (i, agent) in logits.iter().enumerate() {
        if agent.len() != batch.targets[i].len() {
            return Err(ModelError::Shape(format!("agent {i}: position count mismatch")));
        }
        for (q, row) in agent.iter().enumerate() {
            let m = batch.target_mask[i][q];
            if m <= 0.0 {
                continue;
            }
            let p = softmax(row);
            total += m * -(p[batch.targets[i][q]].max(1e-300)).ln();
            mask_sum += m;
            entropy += m * -p.iter().filter(|&&x| x > 0.0).map(|&x| x * x.ln()).sum::<f64>();
            let pred = argmax(row);
            if pred == batch.targets[i][q] {
                correct += m;
            }
            pred_hist[pred] += 1.0;
            pred_count += 1.0;
        }
    }
    if mask_sum <= 0.0 {
        return Err(ModelError::EmptyMask);
    }
    let mut ppl_exp = 0.0;
    let mut clusters = 0;
    for &c in &pred_hist {
        if c > 0.0 {
            clusters += 1;
            let p = c / pred_count;
            ppl_exp += -p * (p + 1e-8).ln();
        }
    }
    let acc = correct / mask_sum;
    let ent = entropy / mask_sum;
    let mut diag = Diagnostics { perplexity: ppl_exp.exp(), clusters, ..Default::default() };
    match batch.direction {
        Direction::Forward => {
            diag.accuracy_fwd = Some(acc);
            diag.entropy_fwd = Some(ent);
        }
        Direction::Reverse => {
            diag.accuracy_rev = Some(acc);
            diag.entropy_rev = Some(ent);
        }
    }
    Ok((total / mask_sum, diag))
}

/// Nucleus sampling: apply temperature, keep the smallest probability-sorted
/// prefix with cumulative mass >= top_p (always at least one token),
/// renormalize, and draw. `pad_id` is excluded before truncation.
pub fn sample_tokens(
    logits_row: &[f64],
    top_p: f64,
    temperature: f64,
    rng: &mut ChaCha8Rng,
    pad_id: Option<usize>,
) -> usize {
    let temp = temperature.max(1e-6);
    let scaled: Vec<f64> = logits_row.iter().map(|&x| x / temp).collect();
    let mut probs = softmax(&scaled);
    if let Some(pad) = pad_id {
        probs[pad] = 0.0;
        let sum: f64 = probs.iter().sum();
        for p in &mut probs {
            *p /= sum;
        }
    }
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].partial_cmp(&probs[a]).unwrap().then(a.cmp(&b)));
    let mut kept = Vec::new();
    let mut cum = 0.0;
    for &i in &order {
        kept.push(i);
        cum += probs[i];
        if cum >= top_p {
            break;
        }
    }
    let total: f64 = kept.iter().map(|&i| probs[i]).sum();
    let u: f64 = rng.gen_range(0.0..1.0) * total;
    let mut acc = 0.0;
    for &i in &kept {
        acc += probs[i];
        if u < acc {
            return i;
        }
    }
    *kept.last().unwrap()
}

/// The motion model: learned parameters plus the fixed Fourier frequency
/// banks used for relation encoding.
pub struct MotionTransformer {
    pub cfg: ModelConfig,
    pub(crate) store: ParamStore,
    pub(crate) idx: net::ParamIndex,
    pub(crate) banks: net::FourierBanks,
}

impl MotionTransformer {
    pub fn new(cfg: ModelConfig) -> Self {
        assert!(
            cfg.hidden_dim % cfg.num_heads == 0,
            "hidden_dim must be divisible by num_heads"
        );
        assert!(cfg.token_space.bins % 2 == 1, "token bins must be odd");
        let (store, idx) = net::build_params(&cfg);
        let banks = net::fourier_banks(&cfg);
        Self { cfg, store, idx, banks }
    }

    pub fn num_parameters(&self) -> usize {
        self.store.num_scalars()
    }

    pub fn all_parameters_finite(&self) -> bool {
        self.store.params.iter().all(|p| p.value.iter().all(|v| v.is_finite()))
    }

    /// One embedding vector per map polyline followed by one per traffic
    /// light; empty for an empty scene.
    pub fn encode_scene(&self, cs: &CenteredScenario) -> Result<Vec<Vec<f64>>, ModelError> {
        let scene = net::SceneInputs::build(cs, &self.cfg, &self.banks)?;
        let mut tape = Tape::new();
        match net::encode_scene_on_tape(&mut tape, &self.store, &self.idx, &self.cfg, &scene) {
            None => Ok(Vec::new()),
            Some(node) => {
                let t = tape.value(node);
                Ok((0..t.rows).map(|r| t.row(r).to_vec()).collect())
            }
        }
    }

    /// Mirror-symmetrized logits for every (agent, position):
    /// `[agent][position][vocab]`.
    pub fn forward_logits(
        &self,
        batch: &TokenBatch,
        cs: &CenteredScenario,
    ) -> Result<Vec<Vec<Vec<f64>>>, ModelError> {
        let scene = net::SceneInputs::build(cs, &self.cfg, &self.banks)?;
        let mcs = mirror_centered(cs);
        let scene_m = net::SceneInputs::build(&mcs, &self.cfg, &self.banks)?;
        let batch_m = batch.mirrored(&self.cfg.token_space);
        let inputs = net::BatchInputs::build(batch, &scene, &self.cfg, &self.banks)?;
        let inputs_m = net::BatchInputs::build(&batch_m, &scene_m, &self.cfg, &self.banks)?;
        let mut tape = Tape::new();
        let node = net::forward_sym(
            &mut tape,
            &self.store,
            &self.idx,
            &self.cfg,
            &scene,
            &inputs,
            &scene_m,
            &inputs_m,
        );
        let t = tape.value(node);
        let (n, p) = (inputs.n, inputs.p);
        Ok((0..n)
            .map(|i| (0..p).map(|q| t.row(i * p + q).to_vec()).collect())
            .collect())
    }

    /// Next-token logits at the last position of every agent's sequence:
    /// `[agent][vocab]`.
    pub fn decode_step(
        &self,
        batch: &TokenBatch,
        cs: &CenteredScenario,
    ) -> Result<Vec<Vec<f64>>, ModelError> {
        let all = self.forward_logits(batch, cs)?;
        Ok(all.into_iter().map(|agent| agent.into_iter().last().unwrap()).collect())
    }
}

/// One agent entering a rollout.
#[derive(Debug, Clone)]
pub struct RolloutAgent {
    pub kind: AgentKind,
    pub shape: (f64, f64, f64),
    /// Slot in the centered agent ordering (id embedding index).
    pub slot: usize,
    pub anchor: AgentState,
    /// When set, this agent emits the given tokens instead of sampling but
    /// still participates in attention.
    pub teacher: Option<Vec<MotionToken>>,
}

#[derive(Debug, Clone)]
pub struct RolloutResult {
    /// Per-agent states in chronological order, `steps + 1` each.
    pub states: Vec<Vec<AgentState>>,
    /// Per-agent emitted motion tokens in decode order.
    pub tokens: Vec<Vec<MotionToken>>,
}

/// Autoregressive rollout from per-agent anchor states: repeatedly decode,
/// sample (or teacher-force) one token per agent, and integrate it.
pub fn rollout(
    model: &MotionTransformer,
    agents: &[RolloutAgent],
    dir: Direction,
    steps: usize,
    cs: &CenteredScenario,
    rng: &mut ChaCha8Rng,
) -> Result<RolloutResult, ModelError> {
    assert!(steps <= crate::scenario::NUM_STEPS - 1, "steps out of range");
    for a in agents {
        if !a.anchor.valid {
            return Err(ModelError::Shape(format!("agent slot {}: invalid anchor", a.slot)));
        }
        if let Some(t) = &a.teacher {
            if t.len() < steps {
                return Err(ModelError::Shape(format!(
                    "agent slot {}: {} teacher tokens for {} steps",
                    a.slot,
                    t.len(),
                    steps
                )));
            }
        }
    }
    let cfg = &model.cfg;
    let ts = &cfg.token_space;
    let motion = ts.num_tokens();

    let mut batch = TokenBatch::empty(dir);
    for a in agents {
        batch.push_agent(a.kind, a.shape, a.slot, a.anchor, &[], cfg);
    }
    let mut emitted: Vec<Vec<MotionToken>> = vec![Vec::new(); agents.len()];

    if steps > 0 {
        let scene = net::SceneInputs::build(cs, cfg, &model.banks)?;
        let mcs = mirror_centered(cs);
        let scene_m = net::SceneInputs::build(&mcs, cfg, &model.banks)?;
        for it in 0..steps {
            let batch_m = batch.mirrored(ts);
            let inputs = net::BatchInputs::build(&batch, &scene, cfg, &model.banks)?;
            let inputs_m = net::BatchInputs::build(&batch_m, &scene_m, cfg, &model.banks)?;
            let mut tape = Tape::new();
            let node = net::forward_sym(
                &mut tape,
                &model.store,
                &model.idx,
                cfg,
                &scene,
                &inputs,
                &scene_m,
                &inputs_m,
            );
            let t = tape.value(node);
            let p = inputs.p;
            for (i, a) in agents.iter().enumerate() {
                let z = match &a.teacher {
                    Some(toks) => toks[it],
                    None => {
                        let mut row = t.row(i * p + p - 1).to_vec();
                        for special in row.iter_mut().skip(motion) {
                            *special = f64::NEG_INFINITY;
                        }
                        let id = sample_tokens(&row, cfg.top_p, cfg.temperature, rng, None);
                        ts.token(id)
                    }
                };
                emitted[i].push(z);
                let cur = *batch.states[i].last().unwrap();
                batch.tokens[i].push(z.id);
                batch.states[i].push(step(&cur, &z, dir, ts));
                batch.valid[i].push(true);
                batch.targets[i].push(cfg.end_id());
                batch.target_mask[i].push(0.0);
            }
        }
    }

    let states = batch
        .states
        .iter()
        .map(|seq| {
            let mut s = seq.clone();
            if dir == Direction::Reverse {
                s.reverse();
            }
            s
        })
        .collect();
    Ok(RolloutResult { states, tokens: emitted })
}

/// One row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct TrainRecord {
    pub step: usize,
    pub loss: f64,
    pub accuracy_fwd: Option<f64>,
    pub accuracy_rev: Option<f64>,
    pub perplexity: f64,
    pub clusters: usize,
}

struct DirItem {
    batch: TokenBatch,
    inputs: net::BatchInputs,
    inputs_m: net::BatchInputs,
}

struct TrainItem {
    scene: net::SceneInputs,
    scene_m: net::SceneInputs,
    fwd: DirItem,
    rev: DirItem,
}

fn prepare_item(s: &Scenario, cfg: &ModelConfig, banks: &net::FourierBanks) -> Result<TrainItem, ModelError> {
    let cs = preprocess(s);
    let mcs = mirror_centered(&cs);
    let scene = net::SceneInputs::build(&cs, cfg, banks)?;
    let scene_m = net::SceneInputs::build(&mcs, cfg, banks)?;
    let mut dirs = Vec::with_capacity(2);
    for dir in [Direction::Forward, Direction::Reverse] {
        let batch = TokenBatch::from_scenario(&cs, dir, cfg)?;
        let batch_m = batch.mirrored(&cfg.token_space);
        let inputs = net::BatchInputs::build(&batch, &scene, cfg, banks)?;
        let inputs_m = net::BatchInputs::build(&batch_m, &scene_m, cfg, banks)?;
        dirs.push(DirItem { batch, inputs, inputs_m });
    }
    let rev = dirs.pop().unwrap();
    let fwd = dirs.pop().unwrap();
    Ok(TrainItem { scene, scene_m, fwd, rev })
}

/// Two-phase training: forward-only batches first, then mixed-direction
/// batches with the direction drawn 50/50 per batch. Deterministic in the
/// config seed; returns the trained model and the training log.
pub fn train(
    data: &[Scenario],
    cfg: &ModelConfig,
) -> Result<(MotionTransformer, Vec<TrainRecord>), ModelError> {
    if data.is_empty() {
        return Err(ModelError::Shape("training data is empty".into()));
    }
    let mut model = MotionTransformer::new(cfg.clone());
    let items: Vec<TrainItem> = data
        .iter()
        .map(|s| prepare_item(s, cfg, &model.banks))
        .collect::<Result<_, _>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let phase1 = (cfg.phase1_fraction * cfg.train_steps as f64).round() as usize;
    let mut log = Vec::new();
    for step_i in 0..cfg.train_steps {
        let dir = if step_i < phase1 || !rng.gen_bool(0.5) {
            Direction::Forward
        } else {
            Direction::Reverse
        };
        let picks: Vec<usize> =
            (0..cfg.batch_size).map(|_| rng.gen_range(0..items.len())).collect();

        let log_now = step_i % cfg.log_interval == 0 || step_i + 1 == cfg.train_steps;
        model.store.zero_grad();
        let mut batch_loss = 0.0;
        let mut diag_acc: Option<Diagnostics> = None;
        for &pi in &picks {
            let item = &items[pi];
            let di = match dir {
                Direction::Forward => &item.fwd,
                Direction::Reverse => &item.rev,
            };
            let mut tape = Tape::new();
            let logits = net::forward_sym(
                &mut tape,
                &model.store,
                &model.idx,
                cfg,
                &item.scene,
                &di.inputs,
                &item.scene_m,
                &di.inputs_m,
            );
            let (targets, mask) = di.batch.flat_targets();
            let ce = tape.cross_entropy(logits, targets, mask);
            batch_loss += tape.value(ce).data[0];
            if log_now {
                let t = tape.value(logits);
                let (n, p) = (di.inputs.n, di.inputs.p);
                let per_agent: Vec<Vec<Vec<f64>>> = (0..n)
                    .map(|i| (0..p).map(|q| t.row(i * p + q).to_vec()).collect())
                    .collect();
                let (_, d) = loss(&per_agent, &di.batch)?;
                diag_acc = Some(merge_diag(diag_acc.take(), d));
            }
            let root = tape.scale(ce, 1.0 / cfg.batch_size as f64);
            tape.backward(root, &mut model.store);
        }
        batch_loss /= cfg.batch_size as f64;
        if !batch_loss.is_finite() {
            return Err(ModelError::Divergence(step_i));
        }
        model.store.adamw_step(cfg.learning_rate, cfg.weight_decay);

        let stopping = cfg.stop_loss.is_some_and(|t| batch_loss <= t);
        if log_now || stopping {
            let d = diag_acc.unwrap_or_default();
            log.push(TrainRecord {
                step: step_i,
                loss: batch_loss,
                accuracy_fwd: d.accuracy_fwd,
                accuracy_rev: d.accuracy_rev,
                perplexity: d.perplexity,
                clusters: d.clusters,
            });
        }
        if stopping {
            break;
        }
    }
    Ok((model, log))
}

fn merge_diag(acc: Option<Diagnostics>, d: Diagnostics) -> Diagnostics {
    match acc {
        None => d,
        Some(a) => {
            let avg = |x: Option<f64>, y: Option<f64>| match (x, y) {
                (Some(x), Some(y)) => Some(0.5 * (x + y)),
                (Some(x), None) | (None, Some(x)) => Some(x),
                (None, None) => None,
            };
            Diagnostics {
                accuracy_fwd: avg(a.accuracy_fwd, d.accuracy_fwd),
                accuracy_rev: avg(a.accuracy_rev, d.accuracy_rev),
                entropy_fwd: avg(a.entropy_fwd, d.entropy_fwd),
                entropy_rev: avg(a.entropy_rev, d.entropy_rev),
                perplexity: 0.5 * (a.perplexity + d.perplexity),
                clusters: a.clusters.max(d.clusters),
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckEntry {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub fd: f64,
    pub rel_err: f64,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// Worst entries, sorted by descending relative error.
    pub worst: Vec<GradCheckEntry>,
}

/// Compare analytic gradients against central finite differences (h = 1e-4)
/// on >= `min_params` randomly selected parameters of a reduced-size model.
/// Errors below an absolute floor of 1e-7 always pass.
pub fn grad_check(
    cfg: &ModelConfig,
    tolerance: f64,
    min_params: usize,
) -> Result<GradCheckReport, ModelError> {
    let mut model = MotionTransformer::new(cfg.clone());
    if model.num_parameters() > 10_000 {
        return Err(ModelError::Shape(format!(
            "gradient check requires <= 10000 parameters, model has {}",
            model.num_parameters()
        )));
    }
    let scenario = crate::scenario::synth::synth_scenarios(1, cfg.seed)
        .map_err(|e| ModelError::Shape(e.to_string()))?
        .pop()
        .unwrap();
    let item = prepare_item(&scenario, cfg, &model.banks)?;
    let di = &item.fwd;
    let (targets, mask) = di.batch.flat_targets();

    let eval = |store: &ParamStore, idx: &net::ParamIndex| -> (Tape, usize) {
        let mut tape = Tape::new();
        let logits = net::forward_sym(
            &mut tape,
            store,
            idx,
            cfg,
            &item.scene,
            &di.inputs,
            &item.scene_m,
            &di.inputs_m,
        );
        let ce = tape.cross_entropy(logits, targets.clone(), mask.clone());
        (tape, ce)
    };

    model.store.zero_grad();
    let (mut tape, root) = eval(&model.store, &model.idx);
    tape.backward(root, &mut model.store);

    // Flat coordinate space over all parameter scalars.
    let offsets: Vec<usize> = model
        .store
        .params
        .iter()
        .scan(0usize, |acc, p| {
            let o = *acc;
            *acc += p.value.len();
            Some(o)
        })
        .collect();
    let total = model.num_parameters();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(7));
    let mut picked = std::collections::BTreeSet::new();
    while picked.len() < min_params.min(total) {
        picked.insert(rng.gen_range(0..total));
    }

    let h = 1e-4;
    let mut entries: Vec<GradCheckEntry> = Vec::with_capacity(picked.len());
    for flat in picked {
        let pi = match offsets.binary_search(&flat) {
            Ok(i) => i,
            Err(i) => i - 1,
        };
        let off = flat - offsets[pi];
        let orig = model.store.params[pi].value[off];
        model.store.params[pi].value[off] = orig + h;
        let (t1, r1) = eval(&model.store, &model.idx);
        let up = t1.value(r1).data[0];
        model.store.params[pi].value[off] = orig - h;
        let (t2, r2) = eval(&model.store, &model.idx);
        let down = t2.value(r2).data[0];
        model.store.params[pi].value[off] = orig;
        let fd = (up - down) / (2.0 * h);
        let an = model.store.params[pi].grad[off];
        let abs_err = (fd - an).abs();
        let rel_err =
            if abs_err <= 1e-7 { 0.0 } else { abs_err / fd.abs().max(an.abs()) };
        entries.push(GradCheckEntry {
            name: model.store.params[pi].name.clone(),
            index: off,
            analytic: an,
            fd,
            rel_err,
        });
    }
    entries.sort_by(|a, b| b.rel_err.partial_cmp(&a.rel_err).unwrap());
    let checked = entries.len();
    let max_rel_err = entries.first().map(|e| e.rel_err).unwrap_or(0.0);
    let failures: Vec<String> = entries
        .iter()
        .filter(|e| e.rel_err > tolerance)
        .map(|e| format!("{}[{}] rel_err={:.3e}", e.name, e.index, e.rel_err))
        .collect();
    entries.truncate(10);
    let report = GradCheckReport { checked, max_rel_err, worst: entries };
    if failures.is_empty() {
        Ok(report)
    } else {
        Err(ModelError::GradCheckFailure(failures))
    }
}

#[cfg(test)]
mod tests;
