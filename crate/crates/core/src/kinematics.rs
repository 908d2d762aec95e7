//! Discrete control-token space and exactly invertible midpoint dynamics.
//!
//! A motion token is a quantized (acceleration, yaw rate) command applied
//! over one 0.5 s interval. The same token space serves forward integration
//! (future states) and reverse integration (reconstructing history), and the
//! two directions are exact inverses of each other.

use crate::geometry::{contour_error, OrientedBox};
use crate::scenario::{normalize_angle, AgentState, AgentTrack};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Quantization grid over the control box [-a_max, a_max] x [-omega_max, omega_max].
///
/// Bin centers are endpoint-inclusive so the zero control and the extremes
/// are exactly representable; `bins` must be odd.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenSpace {
    pub a_max: f64,
    pub omega_max: f64,
    pub bins: usize,
    pub dt: f64,
}

impl Default for TokenSpace {
    fn default() -> Self {
        Self { a_max: 10.0, omega_max: std::f64::consts::FRAC_PI_2, bins: 33, dt: 0.5 }
    }
}

impl TokenSpace {
    pub fn num_tokens(&self) -> usize {
        self.bins * self.bins
    }

    fn bin_center(&self, max: f64, i: usize) -> f64 {
        -max + i as f64 * (2.0 * max / (self.bins - 1) as f64)
    }

    pub fn accel(&self, i_a: usize) -> f64 {
        self.bin_center(self.a_max, i_a)
    }

    pub fn yaw_rate(&self, i_w: usize) -> f64 {
        self.bin_center(self.omega_max, i_w)
    }

    pub fn token(&self, id: usize) -> MotionToken {
        debug_assert!(id < self.num_tokens());
        let (i_a, i_w) = (id / self.bins, id % self.bins);
        MotionToken { id, accel: self.accel(i_a), yaw_rate: self.yaw_rate(i_w) }
    }

    pub fn token_from_bins(&self, i_a: usize, i_w: usize) -> MotionToken {
        self.token(i_a * self.bins + i_w)
    }

    /// Nearest token to a continuous control pair.
    pub fn quantize(&self, accel: f64, yaw_rate: f64) -> MotionToken {
        let step_a = 2.0 * self.a_max / (self.bins - 1) as f64;
        let step_w = 2.0 * self.omega_max / (self.bins - 1) as f64;
        let i_a = (((accel + self.a_max) / step_a).round().max(0.0) as usize).min(self.bins - 1);
        let i_w = (((yaw_rate + self.omega_max) / step_w).round().max(0.0) as usize).min(self.bins - 1);
        self.token_from_bins(i_a, i_w)
    }

    /// Token id with the yaw-rate sign flipped (mirror image about the x-axis).
    pub fn flip_yaw(&self, id: usize) -> usize {
        let (i_a, i_w) = (id / self.bins, id % self.bins);
        i_a * self.bins + (self.bins - 1 - i_w)
    }
}

/// A discrete (acceleration, yaw-rate) command.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MotionToken {
    pub id: usize,
    pub accel: f64,
    pub yaw_rate: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Forward,
    Reverse,
}

#[derive(Debug, Error)]
pub enum TokenizeError {
    #[error("invalid agent state at step {0}")]
    InvalidState(usize),
}

/// Advance one step with midpoint integration.
///
/// The midpoint heading is `theta + omega*dt/2`, which equals the endpoint
/// average when no angle wrap occurs and stays exactly invertible across the
/// wrap.
pub fn step_forward(s: &AgentState, z: &MotionToken, ts: &TokenSpace) -> AgentState {
    let v_next = s.speed + z.accel * ts.dt;
    let theta_next = normalize_angle(s.heading + z.yaw_rate * ts.dt);
    let v_mid = s.speed + z.accel * ts.dt * 0.5;
    let theta_mid = s.heading + z.yaw_rate * ts.dt * 0.5;
    AgentState {
        valid: true,
        x: s.x + v_mid * theta_mid.cos() * ts.dt,
        y: s.y + v_mid * theta_mid.sin() * ts.dt,
        heading: theta_next,
        speed: v_next,
    }
}

/// Invert one step: recover the state whose forward step under `z` yields
/// `s_next`, exactly (within float round-off).
pub fn step_reverse(s_next: &AgentState, z: &MotionToken, ts: &TokenSpace) -> AgentState {
    let v_prev = s_next.speed - z.accel * ts.dt;
    let theta_prev = normalize_angle(s_next.heading - z.yaw_rate * ts.dt);
    let v_mid = s_next.speed - z.accel * ts.dt * 0.5;
    let theta_mid = s_next.heading - z.yaw_rate * ts.dt * 0.5;
    AgentState {
        valid: true,
        x: s_next.x - v_mid * theta_mid.cos() * ts.dt,
        y: s_next.y - v_mid * theta_mid.sin() * ts.dt,
        heading: theta_prev,
        speed: v_prev,
    }
}

pub fn step(s: &AgentState, z: &MotionToken, dir: Direction, ts: &TokenSpace) -> AgentState {
    match dir {
        Direction::Forward => step_forward(s, z, ts),
        Direction::Reverse => step_reverse(s, z, ts),
    }
}

fn footprint(s: &AgentState, shape: (f64, f64)) -> OrientedBox {
    OrientedBox::new(s.x, s.y, s.heading, shape.0, shape.1)
}

/// Exhaustive search over all tokens for the one whose simulated step best
/// matches the target pose by contour alignment. Ties break to the smallest
/// token id.
pub fn tokenize_pair(
    s_from: &AgentState,
    s_to: &AgentState,
    shape: (f64, f64),
    dir: Direction,
    ts: &TokenSpace,
) -> (MotionToken, f64) {
    let target = footprint(s_to, shape);
    let mut best = ts.token(0);
    let mut best_err = f64::INFINITY;
    for id in 0..ts.num_tokens() {
        let z = ts.token(id);
        let sim = step(s_from, &z, dir, ts);
        let err = contour_error(&footprint(&sim, shape), &target);
        if err < best_err {
            best_err = err;
            best = z;
        }
    }
    (best, best_err)
}

/// Tokenize a full track with rollout re-anchoring: each step's search starts
/// from the reconstructed previous state so quantization error does not
/// compound through the anchor. Returns one (token, contour error) per step.
pub fn tokenize_track(
    track: &AgentTrack,
    dir: Direction,
    ts: &TokenSpace,
) -> Result<Vec<(MotionToken, f64)>, TokenizeError> {
    let states = &track.states;
    let shape = (track.length, track.width);
    let order: Vec<usize> = match dir {
        Direction::Forward => (0..states.len()).collect(),
        Direction::Reverse => (0..states.len()).rev().collect(),
    };
    for &t in &order {
        if !states[t].valid {
            return Err(TokenizeError::InvalidState(t));
        }
    }
    let mut anchor = states[order[0]];
    let mut out = Vec::with_capacity(states.len() - 1);
    for &t in &order[1..] {
        let (tok, err) = tokenize_pair(&anchor, &states[t], shape, dir, ts);
        anchor = step(&anchor, &tok, dir, ts);
        out.push((tok, err));
    }
    Ok(out)
}

/// Integrate a token list from an anchor. Returns `tokens.len() + 1` states
/// including the anchor; for `Reverse`, the output is in chronological order
/// (earliest state first).
pub fn detokenize_track(
    s_anchor: &AgentState,
    tokens: &[MotionToken],
    dir: Direction,
    ts: &TokenSpace,
) -> Vec<AgentState> {
    let mut states = Vec::with_capacity(tokens.len() + 1);
    let mut cur = *s_anchor;
    states.push(cur);
    for z in tokens {
        cur = step(&cur, z, dir, ts);
        states.push(cur);
    }
    if dir == Direction::Reverse {
        states.reverse();
    }
    states
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn ts() -> TokenSpace {
        TokenSpace::default()
    }

    fn zero_token(ts: &TokenSpace) -> MotionToken {
        ts.quantize(0.0, 0.0)
    }

    #[test]
    fn token_space_shape() {
        let ts = ts();
        assert_eq!(ts.num_tokens(), 1089);
        assert_eq!(zero_token(&ts).accel, 0.0);
        assert_eq!(zero_token(&ts).yaw_rate, 0.0);
        assert_eq!(ts.token(0).accel, -10.0);
        assert_eq!(ts.token(1088).accel, 10.0);
        assert!((ts.token(1088).yaw_rate - std::f64::consts::FRAC_PI_2).abs() < 1e-15);
    }

    #[test]
    fn token_bijection_all_ids() {
        let ts = ts();
        for id in 0..ts.num_tokens() {
            let z = ts.token(id);
            assert_eq!(z.id, id);
            assert_eq!(ts.quantize(z.accel, z.yaw_rate).id, id);
        }
    }

    #[test]
    fn flip_yaw_is_involution() {
        let ts = ts();
        for id in 0..ts.num_tokens() {
            let f = ts.flip_yaw(id);
            assert_eq!(ts.flip_yaw(f), id);
            assert!((ts.token(f).yaw_rate + ts.token(id).yaw_rate).abs() < 1e-12);
            assert_eq!(ts.token(f).accel, ts.token(id).accel);
        }
    }

    #[test]
    fn straight_line_step() {
        let ts = ts();
        let s = AgentState::new(0.0, 0.0, 0.0, 10.0);
        let next = step_forward(&s, &zero_token(&ts), &ts);
        assert!((next.x - 5.0).abs() < 1e-12);
        assert_eq!(next.y, 0.0);
        assert_eq!(next.heading, 0.0);
        assert_eq!(next.speed, 10.0);
    }

    #[test]
    fn acceleration_step_hand_checked() {
        // v' = 0 + 10*0.5 = 5, v_mid = 2.5, x' = 2.5 * 0.5 = 1.25.
        let ts = ts();
        let s = AgentState::new(0.0, 0.0, 0.0, 0.0);
        let z = ts.quantize(10.0, 0.0);
        let next = step_forward(&s, &z, &ts);
        assert!((next.x - 1.25).abs() < 1e-12);
        assert!((next.speed - 5.0).abs() < 1e-12);

        let back = step_reverse(&next, &z, &ts);
        assert!(back.x.abs() < 1e-12 && back.speed.abs() < 1e-12);
    }

    #[test]
    fn turning_step_matches_fine_rk4() {
        let ts = ts();
        let s = AgentState::new(0.0, 0.0, 0.0, 10.0);
        let z = ts.quantize(0.0, std::f64::consts::FRAC_PI_2);
        let next = step_forward(&s, &z, &ts);
        assert!((next.heading - std::f64::consts::FRAC_PI_4).abs() < 1e-12);

        // Independent oracle: RK4 at 1e-4 s substeps of the continuous
        // bicycle flow x' = v cos(theta), y' = v sin(theta), theta' = omega.
        let (mut x, mut y, mut th, v) = (0.0f64, 0.0f64, 0.0f64, 10.0f64);
        let omega = std::f64::consts::FRAC_PI_2;
        let h = 1e-4;
        let n = (ts.dt / h).round() as usize;
        for _ in 0..n {
            let deriv = |theta: f64| (v * theta.cos(), v * theta.sin());
            let (k1x, k1y) = deriv(th);
            let (k2x, k2y) = deriv(th + 0.5 * h * omega);
            let (k3x, k3y) = deriv(th + 0.5 * h * omega);
            let (k4x, k4y) = deriv(th + h * omega);
            x += h / 6.0 * (k1x + 2.0 * k2x + 2.0 * k3x + k4x);
            y += h / 6.0 * (k1y + 2.0 * k2y + 2.0 * k3y + k4y);
            th += h * omega;
        }
        assert!(((next.x - x).powi(2) + (next.y - y).powi(2)).sqrt() < 0.2);
    }

    fn random_state(rng: &mut ChaCha8Rng) -> AgentState {
        AgentState::new(
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-100.0..100.0),
            rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI),
            rng.gen_range(-20.0..30.0),
        )
    }

    #[test]
    fn forward_reverse_identity_random() {
        let ts = ts();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..1000 {
            let s = random_state(&mut rng);
            let z = ts.token(rng.gen_range(0..ts.num_tokens()));
            let round = step_reverse(&step_forward(&s, &z, &ts), &z, &ts);
            assert!((round.x - s.x).abs() < 1e-9);
            assert!((round.y - s.y).abs() < 1e-9);
            assert!((round.speed - s.speed).abs() < 1e-9);
            let dh = normalize_angle(round.heading - s.heading).abs();
            assert!(dh < 1e-9);
            let round2 = step_forward(&step_reverse(&s, &z, &ts), &z, &ts);
            assert!((round2.x - s.x).abs() < 1e-9 && (round2.y - s.y).abs() < 1e-9);
        }
    }

    #[test]
    fn tokenize_pair_exact_case() {
        let ts = ts();
        let a = AgentState::new(0.0, 0.0, 0.0, 10.0);
        let b = AgentState::new(5.0, 0.0, 0.0, 10.0);
        let (z, err) = tokenize_pair(&a, &b, (4.8, 2.0), Direction::Forward, &ts);
        assert_eq!(z.id, zero_token(&ts).id);
        assert!(err < 1e-9);
        // Reverse with arguments swapped recovers the same token.
        let (zr, _) = tokenize_pair(&b, &a, (4.8, 2.0), Direction::Reverse, &ts);
        assert_eq!(zr.id, zero_token(&ts).id);
    }

    #[test]
    fn tokenize_pair_recovers_generating_token() {
        let ts = ts();
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..200 {
            let s = random_state(&mut rng);
            let z = ts.token(rng.gen_range(0..ts.num_tokens()));
            let next = step_forward(&s, &z, &ts);
            let (found, err) = tokenize_pair(&s, &next, (4.8, 2.0), Direction::Forward, &ts);
            assert_eq!(found.id, z.id);
            assert!(err < 1e-9);
        }
    }

    #[test]
    fn constant_velocity_track_all_zero_tokens() {
        let ts = ts();
        let track = AgentTrack {
            id: "a".into(),
            kind: crate::scenario::AgentKind::Vehicle,
            length: 4.8,
            width: 2.0,
            height: 1.6,
            is_ego: true,
            states: (0..19).map(|t| AgentState::new(t as f64 * 5.0, 0.0, 0.0, 10.0)).collect(),
        };
        let toks = tokenize_track(&track, Direction::Forward, &ts).unwrap();
        assert_eq!(toks.len(), 18);
        for (z, err) in &toks {
            assert_eq!(z.id, zero_token(&ts).id);
            assert!(*err < 1e-9);
        }
    }

    #[test]
    fn invalid_interior_state_reported() {
        let ts = ts();
        let mut states: Vec<AgentState> =
            (0..19).map(|t| AgentState::new(t as f64 * 5.0, 0.0, 0.0, 10.0)).collect();
        states[7] = AgentState::invalid();
        let track = AgentTrack {
            id: "a".into(),
            kind: crate::scenario::AgentKind::Vehicle,
            length: 4.8,
            width: 2.0,
            height: 1.6,
            is_ego: true,
            states,
        };
        match tokenize_track(&track, Direction::Forward, &ts) {
            Err(TokenizeError::InvalidState(7)) => {}
            other => panic!("expected InvalidState(7), got {other:?}"),
        }
    }

    #[test]
    fn detokenize_straight_chain() {
        let ts = ts();
        let anchor = AgentState::new(0.0, 0.0, 0.0, 10.0);
        let tokens = vec![zero_token(&ts); 18];
        let fwd = detokenize_track(&anchor, &tokens, Direction::Forward, &ts);
        assert_eq!(fwd.len(), 19);
        assert!((fwd[18].x - 90.0).abs() < 1e-9);

        let rev = detokenize_track(&fwd[18], &tokens, Direction::Reverse, &ts);
        assert!((rev[0].x - 0.0).abs() < 1e-9);
        assert!((rev[0].speed - 10.0).abs() < 1e-9);
    }

    #[test]
    fn detokenize_chained_inverse_random() {
        let ts = ts();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..500 {
            let anchor = random_state(&mut rng);
            let n = rng.gen_range(1..=18);
            let tokens: Vec<MotionToken> =
                (0..n).map(|_| ts.token(rng.gen_range(0..ts.num_tokens()))).collect();
            let fwd = detokenize_track(&anchor, &tokens, Direction::Forward, &ts);
            let mut rev_tokens = tokens.clone();
            rev_tokens.reverse();
            let rev = detokenize_track(&fwd[n], &rev_tokens, Direction::Reverse, &ts);
            assert_eq!(rev.len(), n + 1);
            for (a, b) in fwd.iter().zip(rev.iter()) {
                assert!((a.x - b.x).abs() < 1e-6);
                assert!((a.y - b.y).abs() < 1e-6);
                assert!((a.speed - b.speed).abs() < 1e-6);
            }
        }
    }
}
