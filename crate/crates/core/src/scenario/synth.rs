//! Deterministic synthetic traffic scenarios.
//!
//! Each scenario lays out a straight or curved road with 2-4 lanes and 2-8
//! vehicles driven by a rule-based controller (pure-pursuit lane keeping,
//! IDM-style speed control, occasional lane changes). Controls are snapped
//! to token-space bin centers before integration, so every consecutive state
//! pair is exactly reachable by some motion token.

use super::{
    AgentKind, AgentState, AgentTrack, LightState, MapPolyline, PolylineKind, Scenario,
    TrafficLight, NUM_STEPS, SCENARIO_DT,
};
use crate::geometry::box_overlap;
use crate::kinematics::{step_forward, TokenSpace};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GenerationError {
    #[error("failed to produce a non-overlapping layout after {0} attempts")]
    LayoutRejected(usize),
}

const LANE_WIDTH: f64 = 3.5;
const MAX_LAYOUT_ATTEMPTS: usize = 1000;

enum RoadPath {
    Straight { origin: (f64, f64), heading: f64 },
    Arc { origin: (f64, f64), heading: f64, radius: f64, sign: f64 },
}

impl RoadPath {
    /// Pose on the path at arc length `s`, offset `lateral` to the left.
    fn pose(&self, s: f64, lateral: f64) -> (f64, f64, f64) {
        match *self {
            RoadPath::Straight { origin, heading } => {
                let (sh, ch) = heading.sin_cos();
                let (nx, ny) = (-sh, ch);
                (origin.0 + s * ch + lateral * nx, origin.1 + s * sh + lateral * ny, heading)
            }
            RoadPath::Arc { origin, heading, radius, sign } => {
                let (s0, c0) = heading.sin_cos();
                let n0 = (-s0, c0);
                let cx = origin.0 + sign * radius * n0.0;
                let cy = origin.1 + sign * radius * n0.1;
                let h = heading + sign * s / radius;
                let (sh, ch) = h.sin_cos();
                let n = (-sh, ch);
                let x = cx - sign * radius * n.0 + lateral * n.0;
                let y = cy - sign * radius * n.1 + lateral * n.1;
                (x, y, h)
            }
        }
    }
}

struct Driver {
    lane: usize,
    s: f64,
    speed_limit: f64,
    state: AgentState,
}

fn lane_offset(lane: usize, num_lanes: usize) -> f64 {
    (lane as f64 - (num_lanes as f64 - 1.0) * 0.5) * LANE_WIDTH
}

fn build_map(path: &RoadPath, num_lanes: usize, total_len: f64) -> Vec<MapPolyline> {
    let mut map = Vec::new();
    let samples = (total_len / 5.0).ceil() as usize + 1;
    let sample_points = |lateral: f64| -> Vec<(f64, f64)> {
        (0..=samples)
            .map(|i| {
                let s = total_len * i as f64 / samples as f64;
                let (x, y, _) = path.pose(s, lateral);
                (x, y)
            })
            .collect()
    };
    for lane in 0..num_lanes {
        map.push(MapPolyline {
            kind: PolylineKind::Lane,
            points: sample_points(lane_offset(lane, num_lanes)),
        });
    }
    let half = num_lanes as f64 * LANE_WIDTH * 0.5 + 0.25;
    for edge in [-half, half] {
        map.push(MapPolyline { kind: PolylineKind::RoadEdge, points: sample_points(edge) });
    }
    if num_lanes >= 2 {
        for b in 1..num_lanes {
            map.push(MapPolyline {
                kind: PolylineKind::BrokenLine,
                points: sample_points(lane_offset(b, num_lanes) - LANE_WIDTH * 0.5),
            });
        }
    }
    map
}

/// IDM-style longitudinal control toward `v0` with gap keeping.
fn idm_accel(v: f64, v0: f64, gap: Option<(f64, f64)>) -> f64 {
    let free = 1.0 - (v / v0).powi(4);
    let interaction = match gap {
        Some((g, v_lead)) => {
            let s_star = 4.0 + v * 1.5 + v * (v - v_lead) / (2.0 * (2.0_f64 * 3.0).sqrt());
            (s_star.max(0.0) / g.max(0.5)).powi(2)
        }
        None => 0.0,
    };
    (2.5 * (free - interaction)).clamp(-6.0, 3.0)
}

fn simulate(
    rng: &mut ChaCha8Rng,
    path: &RoadPath,
    num_lanes: usize,
    drivers: &mut [Driver],
    ts: &TokenSpace,
) -> Vec<Vec<AgentState>> {
    let mut tracks: Vec<Vec<AgentState>> = drivers.iter().map(|d| vec![d.state]).collect();
    for _ in 1..NUM_STEPS {
        // Per-lane leader lookup from current progress.
        let snapshot: Vec<(usize, f64, f64)> =
            drivers.iter().map(|d| (d.lane, d.s, d.state.speed)).collect();
        for (i, d) in drivers.iter_mut().enumerate() {
            // Occasional lane change.
            if num_lanes > 1 && rng.gen_bool(0.02) {
                let delta: i64 = if rng.gen_bool(0.5) { 1 } else { -1 };
                let target = d.lane as i64 + delta;
                if target >= 0 && (target as usize) < num_lanes {
                    d.lane = target as usize;
                }
            }
            let gap = snapshot
                .iter()
                .enumerate()
                .filter(|&(j, &(lane, s, _))| j != i && lane == d.lane && s > d.s)
                .map(|(_, &(_, s, v))| (s - d.s - 4.8, v))
                .min_by(|a, b| a.0.partial_cmp(&b.0).unwrap());
            let mut accel = idm_accel(d.state.speed.max(0.0), d.speed_limit, gap);
            // Keep speed from dipping below zero under quantization.
            accel = accel.max(-d.state.speed / ts.dt);

            // Pure-pursuit steering toward a lookahead point on the target lane.
            let lookahead = (d.state.speed.abs() * 1.2).max(6.0);
            let (tx, ty, _) = path.pose(d.s + lookahead, lane_offset(d.lane, num_lanes));
            let err = super::normalize_angle(
                (ty - d.state.y).atan2(tx - d.state.x) - d.state.heading,
            );
            let omega = (2.0 * d.state.speed * err.sin() / lookahead)
                .clamp(-0.8 * ts.omega_max, 0.8 * ts.omega_max);

            let z = ts.quantize(accel, omega);
            let next = step_forward(&d.state, &z, ts);
            d.s += (d.state.speed + next.speed) * 0.5 * ts.dt;
            d.state = next;
            tracks[i].push(next);
        }
    }
    tracks
}

fn any_overlap(tracks: &[AgentTrack]) -> bool {
    for t in 0..NUM_STEPS {
        for i in 0..tracks.len() {
            for j in (i + 1)..tracks.len() {
                if let (Some(a), Some(b)) = (tracks[i].box_at(t), tracks[j].box_at(t)) {
                    if box_overlap(&a, &b) {
                        return true;
                    }
                }
            }
        }
    }
    false
}

fn generate_one(
    rng: &mut ChaCha8Rng,
    scenario_id: String,
    ts: &TokenSpace,
) -> Result<Scenario, GenerationError> {
    for _attempt in 0..MAX_LAYOUT_ATTEMPTS {
        let num_lanes = rng.gen_range(2..=4usize);
        let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let path = if rng.gen_bool(0.5) {
            RoadPath::Straight { origin: (0.0, 0.0), heading }
        } else {
            RoadPath::Arc {
                origin: (0.0, 0.0),
                heading,
                radius: rng.gen_range(60.0..160.0),
                sign: if rng.gen_bool(0.5) { 1.0 } else { -1.0 },
            }
        };
        let num_agents = rng.gen_range(2..=8usize);

        // Place agents with longitudinal spacing per lane.
        let mut drivers: Vec<Driver> = Vec::new();
        let mut placements: Vec<(usize, f64)> = Vec::new();
        let mut ok = true;
        for _ in 0..num_agents {
            let mut placed = false;
            for _try in 0..50 {
                let lane = rng.gen_range(0..num_lanes);
                let s0 = rng.gen_range(5.0..90.0);
                if placements.iter().all(|&(l, s)| l != lane || (s - s0).abs() > 14.0) {
                    placements.push((lane, s0));
                    placed = true;
                    break;
                }
            }
            if !placed {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        for &(lane, s0) in &placements {
            let (x, y, h) = path.pose(s0, lane_offset(lane, num_lanes));
            let speed = rng.gen_range(4.0..14.0);
            drivers.push(Driver {
                lane,
                s: s0,
                speed_limit: rng.gen_range(8.0..16.0),
                state: AgentState::new(x, y, h, speed),
            });
        }

        let state_tracks = simulate(rng, &path, num_lanes, &mut drivers, ts);
        let agents: Vec<AgentTrack> = state_tracks
            .into_iter()
            .enumerate()
            .map(|(i, states)| AgentTrack {
                id: if i == 0 { "ego".to_string() } else { format!("veh{i}") },
                kind: AgentKind::Vehicle,
                length: 4.8,
                width: 2.0,
                height: 1.6,
                is_ego: i == 0,
                states,
            })
            .collect();

        if any_overlap(&agents) {
            continue;
        }

        let total_len = drivers.iter().map(|d| d.s).fold(100.0f64, f64::max) + 30.0;
        let map = build_map(&path, num_lanes, total_len);
        let traffic_lights = if rng.gen_bool(0.5) {
            let (x, y, _) = path.pose(total_len * 0.5, 0.0);
            vec![TrafficLight {
                position: (x, y),
                states: vec![LightState::Unknown; NUM_STEPS],
            }]
        } else {
            vec![]
        };

        let scenario = Scenario {
            scenario_id,
            dt: SCENARIO_DT,
            num_steps: NUM_STEPS,
            map,
            traffic_lights,
            agents,
        };
        debug_assert!(scenario.validate().is_ok());
        return Ok(scenario);
    }
    Err(GenerationError::LayoutRejected(MAX_LAYOUT_ATTEMPTS))
}

/// Generate `count` scenarios, a pure function of `(count, seed)`.
pub fn synth_scenarios(count: usize, seed: u64) -> Result<Vec<Scenario>, GenerationError> {
    assert!(count >= 1, "count must be >= 1");
    let ts = TokenSpace::default();
    let mut out = Vec::with_capacity(count);
    for i in 0..count {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(i as u64);
        out.push(generate_one(&mut rng, format!("synth-{seed}-{i:04}"), &ts)?);
    }
    Ok(out)
}
