//! Adversarial-agent construction: sample a collision state against the ego,
//! reconstruct the attacker's history by reverse rollout, optionally refine
//! traffic reactions forward, and reject implausible candidates by rule.

use crate::geometry::{box_overlap, contact_distance_along, OrientedBox};
use crate::kinematics::{tokenize_track, Direction, MotionToken};
use crate::model::{rollout, ModelError, MotionTransformer, RolloutAgent};
use crate::scenario::{
    normalize_angle, preprocess, AgentKind, AgentState, AgentTrack, CenteredScenario, Scenario,
    MAX_AGENTS,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Track id given to the appended adversarial agent.
pub const ADV_TRACK_ID: &str = "adv";
/// Penetration depth of the constructed collision contact, in meters.
pub const CONTACT_PENETRATION: f64 = 0.05;

const MIN_PATH_LENGTH: f64 = 5.0;
const MIN_MEAN_SPEED: f64 = 1.0;
const MAX_CURVATURE: f64 = 0.8;
const DS_FLOOR: f64 = 1e-6;

/// The sampled collision state of the adversarial agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CollisionSpec {
    /// Collision step index, in [2, num_steps - 1].
    pub t_c: usize,
    pub adv_heading: f64,
    pub adv_speed: f64,
    pub adv_position: (f64, f64),
    pub adv_shape: (f64, f64),
    pub adv_kind: AgentKind,
}

/// Partial overrides for `sample_collision`; unset fields are sampled.
#[derive(Debug, Clone, Default)]
pub struct CollisionOverrides {
    pub t_c: Option<usize>,
    pub adv_heading: Option<f64>,
    pub adv_speed: Option<f64>,
    pub adv_position: Option<(f64, f64)>,
    pub adv_kind: Option<AgentKind>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GenerationMode {
    /// Original agents replay their recorded motion; only the adversary is
    /// predicted.
    Replay,
    /// All agents are jointly reverse-predicted from their collision-step
    /// states.
    ClosedLoopReverse,
    /// Replay pass first, then a forward pass in which traffic reacts while
    /// the adversary is held to its reconstruction.
    ForwardRefine,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectionReason {
    TooShort,
    TooSlow,
    Curvature,
    EarlyCollision,
}

impl RejectionReason {
    /// Position in the filter order; later reasons passed more checks.
    fn rank(self) -> usize {
        match self {
            RejectionReason::TooShort => 0,
            RejectionReason::TooSlow => 1,
            RejectionReason::Curvature => 2,
            RejectionReason::EarlyCollision => 3,
        }
    }
}

/// An augmented scenario with the adversary appended as the last track.
#[derive(Debug, Clone, Serialize)]
pub struct AdvResult {
    pub scenario: Scenario,
    pub spec: CollisionSpec,
    pub mode: GenerationMode,
    pub accepted: bool,
    pub rejection_reason: Option<RejectionReason>,
}

fn adv_height(kind: AgentKind) -> f64 {
    match kind {
        AgentKind::Vehicle => 1.6,
        AgentKind::Pedestrian => 1.8,
        AgentKind::Cyclist => 1.2,
    }
}

/// Sample a collision state: step, heading, and speed are drawn (or taken
/// from overrides), and the position is constructed so the adversary's box
/// penetrates the ego box by exactly `CONTACT_PENETRATION` along the ray
/// opposite the adversary's heading.
pub fn sample_collision(
    s: &Scenario,
    rng: &mut ChaCha8Rng,
    overrides: Option<&CollisionOverrides>,
) -> CollisionSpec {
    let d = CollisionOverrides::default();
    let ov = overrides.unwrap_or(&d);
    let t_c = rng.gen_range(2..s.num_steps);
    let heading = rng.gen_range(0.0..2.0 * std::f64::consts::PI);
    let offset = rng.gen_range(-2.0..6.0);

    let t_c = ov.t_c.unwrap_or(t_c);
    let adv_heading = normalize_angle(ov.adv_heading.unwrap_or(heading));
    let adv_kind = ov.adv_kind.unwrap_or(AgentKind::Vehicle);
    let adv_shape = adv_kind.default_shape();

    let ego = s.ego();
    let ego_state = &ego.states[t_c];
    debug_assert!(ego_state.valid, "ego must be valid at the collision step");
    let adv_speed = ov
        .adv_speed
        .unwrap_or_else(|| (ego_state.speed + offset).clamp(0.5, 30.0));

    let adv_position = ov.adv_position.unwrap_or_else(|| {
        let ego_box =
            OrientedBox::new(ego_state.x, ego_state.y, ego_state.heading, ego.length, ego.width);
        let adv_at_center =
            OrientedBox::new(ego_state.x, ego_state.y, adv_heading, adv_shape.0, adv_shape.1);
        let dir = (-adv_heading.cos(), -adv_heading.sin());
        let d = contact_distance_along(&ego_box, &adv_at_center, dir) - CONTACT_PENETRATION;
        (ego_state.x + d * dir.0, ego_state.y + d * dir.1)
    });

    CollisionSpec { t_c, adv_heading, adv_speed, adv_position, adv_shape, adv_kind }
}

/// Teacher tokens for one original track truncated at the collision step, in
/// reverse decode order. None if the window contains invalid states.
fn reverse_teacher(
    track: &AgentTrack,
    t_c: usize,
    ts: &crate::kinematics::TokenSpace,
) -> Option<Vec<MotionToken>> {
    let truncated = AgentTrack { states: track.states[..=t_c].to_vec(), ..track.clone() };
    tokenize_track(&truncated, Direction::Reverse, ts)
        .ok()
        .map(|toks| toks.into_iter().map(|(z, _)| z).collect())
}

fn centered_adv_anchor(spec: &CollisionSpec, center: (f64, f64)) -> AgentState {
    AgentState::new(
        spec.adv_position.0 - center.0,
        spec.adv_position.1 - center.1,
        spec.adv_heading,
        spec.adv_speed,
    )
}

/// Write a chronological state sequence for steps `0..=t_c` into a track,
/// translating back from the centered frame; later steps become invalid.
fn track_from_states(
    template: &AgentTrack,
    states: &[AgentState],
    t_c: usize,
    center: (f64, f64),
    num_steps: usize,
    invalid_after: bool,
) -> AgentTrack {
    let mut out = template.clone();
    out.states = Vec::with_capacity(num_steps);
    for (t, s) in states.iter().enumerate().take(t_c + 1) {
        out.states.push(AgentState::new(s.x + center.0, s.y + center.1, s.heading, s.speed));
        let _ = t;
    }
    for t in t_c + 1..num_steps {
        if invalid_after {
            out.states.push(AgentState::invalid());
        } else {
            out.states.push(template.states[t]);
        }
    }
    out
}

struct ReversePass {
    /// Chronological centered states per rollout agent.
    states: Vec<Vec<AgentState>>,
    /// Emitted tokens per rollout agent (reverse decode order).
    tokens: Vec<Vec<MotionToken>>,
    /// cs-agent index per rollout agent; the adversary is last with index
    /// `cs.agents.len()`.
    members: Vec<usize>,
}

fn reverse_pass(
    cs: &CenteredScenario,
    spec: &CollisionSpec,
    mode: GenerationMode,
    model: &MotionTransformer,
    rng: &mut ChaCha8Rng,
) -> Result<ReversePass, ModelError> {
    let t_c = spec.t_c;
    let mut agents = Vec::new();
    let mut members = Vec::new();
    for (slot, track) in cs.scenario.agents.iter().enumerate() {
        match mode {
            GenerationMode::Replay | GenerationMode::ForwardRefine => {
                let Some(teacher) = reverse_teacher(track, t_c, &model.cfg.token_space) else {
                    continue;
                };
                agents.push(RolloutAgent {
                    kind: track.kind,
                    shape: (track.length, track.width, track.height),
                    slot,
                    anchor: track.states[t_c],
                    teacher: Some(teacher),
                });
            }
            GenerationMode::ClosedLoopReverse => {
                if !track.states[t_c].valid {
                    continue;
                }
                agents.push(RolloutAgent {
                    kind: track.kind,
                    shape: (track.length, track.width, track.height),
                    slot,
                    anchor: track.states[t_c],
                    teacher: None,
                });
            }
        }
        members.push(slot);
    }
    agents.push(RolloutAgent {
        kind: spec.adv_kind,
        shape: (spec.adv_shape.0, spec.adv_shape.1, adv_height(spec.adv_kind)),
        slot: cs.scenario.agents.len(),
        anchor: centered_adv_anchor(spec, cs.center),
        teacher: None,
    });
    members.push(cs.scenario.agents.len());

    let rr = rollout(model, &agents, Direction::Reverse, t_c, cs, rng)?;
    Ok(ReversePass { states: rr.states, tokens: rr.tokens, members })
}

/// Construct the adversarial scenario for one collision spec. The adversary
/// is appended as the last track (id `"adv"`) and is invalid after the
/// collision step.
pub fn build_adversary(
    s: &Scenario,
    spec: &CollisionSpec,
    mode: GenerationMode,
    model: &MotionTransformer,
    rng: &mut ChaCha8Rng,
) -> Result<AdvResult, ModelError> {
    assert!(spec.t_c >= 2 && spec.t_c < s.num_steps, "collision step out of range");
    assert!(s.agents.len() + 1 <= MAX_AGENTS, "no room for the adversary");
    let cs = preprocess(s);
    let t_c = spec.t_c;
    let pass = reverse_pass(&cs, spec, mode, model, rng)?;
    let adv_i = pass.members.len() - 1;

    let adv_template = AgentTrack {
        id: ADV_TRACK_ID.to_string(),
        kind: spec.adv_kind,
        length: spec.adv_shape.0,
        width: spec.adv_shape.1,
        height: adv_height(spec.adv_kind),
        is_ego: false,
        states: Vec::new(),
    };

    let mut out = s.clone();
    match mode {
        GenerationMode::Replay => {
            // Original tracks pass through untouched.
        }
        GenerationMode::ClosedLoopReverse => {
            for (ri, &slot) in pass.members[..adv_i].iter().enumerate() {
                let template = &cs.scenario.agents[slot];
                let rebuilt = track_from_states(
                    template,
                    &pass.states[ri],
                    t_c,
                    cs.center,
                    s.num_steps,
                    false,
                );
                let orig = out.agents.iter_mut().find(|a| a.id == template.id).unwrap();
                // Keep the recorded tail beyond the collision step.
                let mut states = rebuilt.states;
                states.truncate(t_c + 1);
                states.extend_from_slice(&orig.states[t_c + 1..]);
                orig.states = states;
            }
        }
        GenerationMode::ForwardRefine => {
            // Forward pass from step 0: the adversary is held to its
            // reconstruction (reverse tokens replayed backwards); traffic is
            // re-predicted from its recorded start states.
            let mut fwd_agents = Vec::new();
            for &slot in &pass.members[..adv_i] {
                let track = &cs.scenario.agents[slot];
                fwd_agents.push(RolloutAgent {
                    kind: track.kind,
                    shape: (track.length, track.width, track.height),
                    slot,
                    anchor: track.states[0],
                    teacher: None,
                });
            }
            let mut adv_fwd_tokens = pass.tokens[adv_i].clone();
            adv_fwd_tokens.reverse();
            fwd_agents.push(RolloutAgent {
                kind: spec.adv_kind,
                shape: (spec.adv_shape.0, spec.adv_shape.1, adv_height(spec.adv_kind)),
                slot: cs.scenario.agents.len(),
                anchor: pass.states[adv_i][0],
                teacher: Some(adv_fwd_tokens),
            });
            let fr = rollout(model, &fwd_agents, Direction::Forward, t_c, &cs, rng)?;
            for (ri, &slot) in pass.members[..adv_i].iter().enumerate() {
                let template = &cs.scenario.agents[slot];
                let rebuilt = track_from_states(
                    template,
                    &fr.states[ri],
                    t_c,
                    cs.center,
                    s.num_steps,
                    false,
                );
                let orig = out.agents.iter_mut().find(|a| a.id == template.id).unwrap();
                orig.states = rebuilt.states;
            }
            let adv_track = track_from_states(
                &adv_template,
                &fr.states[adv_i],
                t_c,
                cs.center,
                s.num_steps,
                true,
            );
            out.agents.push(adv_track);
            return Ok(AdvResult {
                scenario: out,
                spec: spec.clone(),
                mode,
                accepted: true,
                rejection_reason: None,
            });
        }
    }

    let adv_track =
        track_from_states(&adv_template, &pass.states[adv_i], t_c, cs.center, s.num_steps, true);
    out.agents.push(adv_track);
    Ok(AdvResult {
        scenario: out,
        spec: spec.clone(),
        mode,
        accepted: true,
        rejection_reason: None,
    })
}

/// Path length, mean speed, and maximum discrete curvature of a track's
/// states over steps `0..=t_c`.
pub fn track_motion_stats(track: &AgentTrack, t_c: usize, dt: f64) -> (f64, f64, f64) {
    let mut path = 0.0;
    let mut max_kappa = 0.0f64;
    let mut steps = 0;
    for t in 0..t_c.min(track.states.len() - 1) {
        let (a, b) = (&track.states[t], &track.states[t + 1]);
        if !a.valid || !b.valid {
            continue;
        }
        let ds = ((b.x - a.x).powi(2) + (b.y - a.y).powi(2)).sqrt();
        path += ds;
        let dtheta = normalize_angle(b.heading - a.heading).abs();
        max_kappa = max_kappa.max(dtheta / ds.max(DS_FLOOR));
        steps += 1;
    }
    let mean_speed = if steps > 0 { path / (steps as f64 * dt) } else { 0.0 };
    (path, mean_speed, max_kappa)
}

/// Rule-based plausibility filter. Trajectories are never modified; only the
/// accepted flag and rejection reason are set. Reasons are checked in order:
/// too_short, too_slow, curvature, early_collision.
pub fn filter_adversary(r: AdvResult) -> AdvResult {
    let adv = r.scenario.agents.last().expect("adversary track present");
    debug_assert_eq!(adv.id, ADV_TRACK_ID);
    let ego = r.scenario.ego();
    let t_c = r.spec.t_c;

    let (path, mean_speed, max_kappa) = track_motion_stats(adv, t_c, r.scenario.dt);
    let reason = if path < MIN_PATH_LENGTH {
        Some(RejectionReason::TooShort)
    } else if mean_speed < MIN_MEAN_SPEED {
        Some(RejectionReason::TooSlow)
    } else if max_kappa > MAX_CURVATURE {
        Some(RejectionReason::Curvature)
    } else if (0..t_c).any(|t| match (adv.box_at(t), ego.box_at(t)) {
        (Some(a), Some(e)) => box_overlap(&a, &e),
        _ => false,
    }) {
        Some(RejectionReason::EarlyCollision)
    } else {
        None
    };
    AdvResult { accepted: reason.is_none(), rejection_reason: reason, ..r }
}

/// Generate `num_modes` adversarial variants of one scenario, resampling each
/// slot up to `max_resamples` extra times until the filter accepts. Slots
/// draw from independent rng substreams of `seed`. A slot that never passes
/// the filter returns its best rejected candidate (the one that survived the
/// most filter stages), flagged `accepted = false`.
pub fn generate_batch(
    s: &Scenario,
    num_modes: usize,
    mode: GenerationMode,
    model: &MotionTransformer,
    seed: u64,
    max_resamples: usize,
) -> Result<Vec<AdvResult>, ModelError> {
    assert!(num_modes >= 1);
    let mut out = Vec::with_capacity(num_modes);
    for slot in 0..num_modes {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(slot as u64 + 1);
        let mut best: Option<AdvResult> = None;
        for _attempt in 0..=max_resamples {
            let spec = sample_collision(s, &mut rng, None);
            let candidate =
                filter_adversary(build_adversary(s, &spec, mode, model, &mut rng)?);
            if candidate.accepted {
                best = Some(candidate);
                break;
            }
            let better = match (&best, candidate.rejection_reason) {
                (None, _) => true,
                (Some(b), Some(reason)) => {
                    b.rejection_reason.map(|r| r.rank()).unwrap_or(0) < reason.rank()
                }
                _ => false,
            };
            if better {
                best = Some(candidate);
            }
        }
        out.push(best.expect("at least one candidate per slot"));
    }
    Ok(out)
}
