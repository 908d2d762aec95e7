//! Centering, agent reordering, and feature assembly for model input.

use super::{MapPolyline, Scenario};

/// Width of the per-agent per-step state feature vector.
pub const STATE_VECTOR_DIM: usize = 16;

/// Per-segment polyline feature:
/// [sx, sy, ex, ey, dx, dy, sin_h, cos_h, len, kind one-hot (6)].
pub const SEGMENT_FEATURE_DIM: usize = 15;

/// Traffic-light feature: [x, y, state fraction (4)].
pub const LIGHT_FEATURE_DIM: usize = 6;

#[derive(Debug, Clone)]
pub struct PolylineFeature {
    pub kind_index: usize,
    /// One row of `SEGMENT_FEATURE_DIM` values per segment.
    pub segments: Vec<Vec<f64>>,
    /// Midpoint of the polyline's bounding box, used for scene relations.
    pub anchor: (f64, f64),
    /// Mean segment heading, used for scene relations.
    pub heading: f64,
}

/// A scenario translated so the map-bounds center is the origin, with the
/// ego track at index 0 and the remaining tracks ordered by distance to the
/// ego at step 0, plus the assembled model-input features.
#[derive(Debug, Clone)]
pub struct CenteredScenario {
    pub scenario: Scenario,
    /// The translation that was subtracted from every coordinate.
    pub center: (f64, f64),
    pub polylines: Vec<PolylineFeature>,
    pub light_features: Vec<Vec<f64>>,
    pub light_positions: Vec<(f64, f64)>,
    /// `[agent][step][STATE_VECTOR_DIM]`.
    pub agent_features: Vec<Vec<[f64; STATE_VECTOR_DIM]>>,
}

fn map_bounds_center(map: &[MapPolyline]) -> (f64, f64) {
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for pl in map {
        for &(x, y) in &pl.points {
            min.0 = min.0.min(x);
            min.1 = min.1.min(y);
            max.0 = max.0.max(x);
            max.1 = max.1.max(y);
        }
    }
    if min.0.is_finite() {
        ((min.0 + max.0) * 0.5, (min.1 + max.1) * 0.5)
    } else {
        (0.0, 0.0)
    }
}

fn polyline_feature(pl: &MapPolyline) -> PolylineFeature {
    let mut segments = Vec::with_capacity(pl.points.len() - 1);
    let mut heading_sum = (0.0, 0.0);
    for w in pl.points.windows(2) {
        let (sx, sy) = w[0];
        let (ex, ey) = w[1];
        let (dx, dy) = (ex - sx, ey - sy);
        let len = (dx * dx + dy * dy).sqrt();
        let (sin_h, cos_h) = (dy / len, dx / len);
        heading_sum.0 += sin_h;
        heading_sum.1 += cos_h;
        let mut f = vec![sx, sy, ex, ey, dx, dy, sin_h, cos_h, len];
        let mut kind = [0.0; 6];
        kind[pl.kind.index()] = 1.0;
        f.extend_from_slice(&kind);
        segments.push(f);
    }
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for &(x, y) in &pl.points {
        min.0 = min.0.min(x);
        min.1 = min.1.min(y);
        max.0 = max.0.max(x);
        max.1 = max.1.max(y);
    }
    PolylineFeature {
        kind_index: pl.kind.index(),
        segments,
        anchor: ((min.0 + max.0) * 0.5, (min.1 + max.1) * 0.5),
        heading: heading_sum.0.atan2(heading_sum.1),
    }
}

/// Mirror a centered scenario about the x-axis (negate y and heading
/// everywhere) and rebuild its features. Used for symmetry-equivariant
/// decoding.
pub fn mirror_centered(cs: &CenteredScenario) -> CenteredScenario {
    let mut sc = cs.scenario.clone();
    for pl in &mut sc.map {
        for p in &mut pl.points {
            p.1 = -p.1;
        }
    }
    for light in &mut sc.traffic_lights {
        light.position.1 = -light.position.1;
    }
    for track in &mut sc.agents {
        for st in &mut track.states {
            st.y = -st.y;
            st.heading = super::normalize_angle(-st.heading);
        }
    }
    assemble(sc, cs.center)
}

/// Translate the scenario to the map-bounds center, move the ego to index 0,
/// order the remaining tracks by distance to the ego at step 0, and assemble
/// the model-input features. Total for any valid scenario.
pub fn preprocess(s: &Scenario) -> CenteredScenario {
    let center = map_bounds_center(&s.map);
    let mut sc = s.clone();
    for pl in &mut sc.map {
        for p in &mut pl.points {
            p.0 -= center.0;
            p.1 -= center.1;
        }
    }
    for light in &mut sc.traffic_lights {
        light.position.0 -= center.0;
        light.position.1 -= center.1;
    }
    for track in &mut sc.agents {
        for st in &mut track.states {
            st.x -= center.0;
            st.y -= center.1;
        }
    }

    // Ego first, then by distance to ego at step 0 (stable for ties).
    let ego_idx = sc.agents.iter().position(|a| a.is_ego).expect("one ego");
    let ego0 = sc.agents[ego_idx].states[0];
    let mut order: Vec<usize> = (0..sc.agents.len()).collect();
    order.sort_by(|&a, &b| {
        let key = |i: usize| {
            if sc.agents[i].is_ego {
                return -1.0;
            }
            let st = sc.agents[i].states[0];
            ((st.x - ego0.x).powi(2) + (st.y - ego0.y).powi(2)).sqrt()
        };
        key(a).partial_cmp(&key(b)).unwrap().then(a.cmp(&b))
    });
    sc.agents = order.iter().map(|&i| sc.agents[i].clone()).collect();

    assemble(sc, center)
}

/// Build the model-input features for an already-centered, already-ordered
/// scenario.
fn assemble(sc: Scenario, center: (f64, f64)) -> CenteredScenario {
    let polylines = sc.map.iter().map(polyline_feature).collect();

    let mut light_features = Vec::new();
    let mut light_positions = Vec::new();
    for light in &sc.traffic_lights {
        let mut frac = [0.0; 4];
        for st in &light.states {
            frac[st.index()] += 1.0 / light.states.len() as f64;
        }
        let mut f = vec![light.position.0, light.position.1];
        f.extend_from_slice(&frac);
        light_features.push(f);
        light_positions.push(light.position);
    }

    let mut agent_features = Vec::with_capacity(sc.agents.len());
    for track in &sc.agents {
        let mut rows = Vec::with_capacity(track.states.len());
        for st in &track.states {
            let mut f = [0.0; STATE_VECTOR_DIM];
            f[0] = st.x;
            f[1] = st.y;
            f[2] = st.heading.sin();
            f[3] = st.heading.cos();
            f[4] = st.speed;
            f[5] = track.length;
            f[6] = track.width;
            f[7] = track.height;
            f[8 + track.kind.index()] = 1.0;
            f[11] = if st.valid { 1.0 } else { 0.0 };
            f[12] = if track.is_ego { 1.0 } else { 0.0 };
            // f[13..16] are zero padding.
            rows.push(f);
        }
        agent_features.push(rows);
    }

    CenteredScenario { scenario: sc, center, polylines, light_features, light_positions, agent_features }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scenario::{
        AgentKind, AgentState, AgentTrack, MapPolyline, PolylineKind, Scenario, NUM_STEPS,
        SCENARIO_DT,
    };

    fn track(id: &str, x0: f64, y0: f64, is_ego: bool) -> AgentTrack {
        AgentTrack {
            id: id.into(),
            kind: AgentKind::Vehicle,
            length: 4.8,
            width: 2.0,
            height: 1.6,
            is_ego,
            states: (0..NUM_STEPS)
                .map(|t| AgentState::new(x0 + t as f64 * 4.0, y0, 0.0, 8.0))
                .collect(),
        }
    }

    fn three_agent_scenario() -> Scenario {
        Scenario {
            scenario_id: "p".into(),
            dt: SCENARIO_DT,
            num_steps: NUM_STEPS,
            map: vec![MapPolyline {
                kind: PolylineKind::Lane,
                points: vec![(0.0, 0.0), (100.0, 0.0), (100.0, 50.0)],
            }],
            traffic_lights: vec![],
            agents: vec![
                track("far", 0.0, 30.0, false),
                track("near", 5.0, 3.0, false),
                track("ego", 0.0, 0.0, true),
            ],
        }
    }

    #[test]
    fn centering_shifts_by_bounds_center() {
        let s = three_agent_scenario();
        let cs = preprocess(&s);
        assert_eq!(cs.center, (50.0, 25.0));
        assert_eq!(cs.scenario.map[0].points[0], (-50.0, -25.0));
    }

    #[test]
    fn already_centered_is_fixed_point() {
        let mut s = three_agent_scenario();
        s.map[0].points = vec![(-50.0, -25.0), (50.0, -25.0), (50.0, 25.0)];
        let x_before = s.agents[2].states[0].x;
        let cs = preprocess(&s);
        assert_eq!(cs.center, (0.0, 0.0));
        let ego = cs.scenario.agents.iter().find(|a| a.is_ego).unwrap();
        assert_eq!(ego.states[0].x, x_before);
    }

    #[test]
    fn ego_moved_to_front_and_rest_by_distance() {
        let cs = preprocess(&three_agent_scenario());
        let ids: Vec<&str> = cs.scenario.agents.iter().map(|a| a.id.as_str()).collect();
        assert_eq!(ids, vec!["ego", "near", "far"]);
        assert!(cs.scenario.agents[0].is_ego);
    }

    #[test]
    fn preprocessing_preserves_pairwise_distances() {
        let s = three_agent_scenario();
        let cs = preprocess(&s);
        let dist = |a: &AgentState, b: &AgentState| ((a.x - b.x).powi(2) + (a.y - b.y).powi(2)).sqrt();
        let find = |sc: &Scenario, id: &str| {
            sc.agents.iter().find(|t| t.id == id).unwrap().clone()
        };
        for ids in [("ego", "near"), ("ego", "far"), ("near", "far")] {
            let (a0, b0) = (find(&s, ids.0), find(&s, ids.1));
            let (a1, b1) = (find(&cs.scenario, ids.0), find(&cs.scenario, ids.1));
            for t in 0..NUM_STEPS {
                let before = dist(&a0.states[t], &b0.states[t]);
                let after = dist(&a1.states[t], &b1.states[t]);
                assert!((before - after).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn state_vector_layout() {
        let cs = preprocess(&three_agent_scenario());
        let f = &cs.agent_features[0][0];
        assert_eq!(f.len(), STATE_VECTOR_DIM);
        assert_eq!(f[4], 8.0); // speed
        assert_eq!(f[8], 1.0); // vehicle one-hot
        assert_eq!(f[12], 1.0); // is_ego for the reordered index 0
        assert_eq!(&f[13..16], &[0.0, 0.0, 0.0]);
    }
}
