//! Scenario data model, JSON ingestion/serialization, and preprocessing.

pub mod preprocess;
pub mod synth;

pub use preprocess::{mirror_centered, preprocess, CenteredScenario, PolylineFeature, STATE_VECTOR_DIM};
pub use synth::{synth_scenarios, GenerationError};

use serde::{Deserialize, Serialize};
use std::fmt;
use std::path::Path;
use thiserror::Error;

pub const SCENARIO_DT: f64 = 0.5;
pub const NUM_STEPS: usize = 19;
pub const MAX_AGENTS: usize = 32;
pub const MAX_POLYLINES: usize = 256;
pub const MAX_SPEED: f64 = 60.0;

/// Normalize an angle to (-pi, pi].
pub fn normalize_angle(theta: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = theta.rem_euclid(two_pi);
    if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// One agent's pose at one timestep. Speed is scalar, signed along heading.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentState {
    pub valid: bool,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub speed: f64,
}

impl AgentState {
    pub fn new(x: f64, y: f64, heading: f64, speed: f64) -> Self {
        Self { valid: true, x, y, heading: normalize_angle(heading), speed }
    }

    pub fn invalid() -> Self {
        Self { valid: false, x: 0.0, y: 0.0, heading: 0.0, speed: 0.0 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AgentKind {
    Vehicle,
    Pedestrian,
    Cyclist,
}

impl AgentKind {
    pub fn index(self) -> usize {
        match self {
            AgentKind::Vehicle => 0,
            AgentKind::Pedestrian => 1,
            AgentKind::Cyclist => 2,
        }
    }

    /// Default footprint (length, width) per kind.
    pub fn default_shape(self) -> (f64, f64) {
        match self {
            AgentKind::Vehicle => (4.8, 2.0),
            AgentKind::Pedestrian => (0.5, 0.5),
            AgentKind::Cyclist => (1.8, 0.6),
        }
    }
}

impl fmt::Display for AgentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AgentKind::Vehicle => write!(f, "vehicle"),
            AgentKind::Pedestrian => write!(f, "pedestrian"),
            AgentKind::Cyclist => write!(f, "cyclist"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentTrack {
    pub id: String,
    pub kind: AgentKind,
    pub length: f64,
    pub width: f64,
    pub height: f64,
    pub is_ego: bool,
    pub states: Vec<AgentState>,
}

impl AgentTrack {
    /// Oriented footprint at a step, or None if the state is invalid.
    pub fn box_at(&self, step: usize) -> Option<crate::geometry::OrientedBox> {
        let s = self.states.get(step)?;
        if !s.valid {
            return None;
        }
        Some(crate::geometry::OrientedBox::new(s.x, s.y, s.heading, self.length, self.width))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PolylineKind {
    Lane,
    RoadEdge,
    BrokenLine,
    YellowLine,
    Crosswalk,
    StopSign,
}

impl PolylineKind {
    pub fn index(self) -> usize {
        match self {
            PolylineKind::Lane => 0,
            PolylineKind::RoadEdge => 1,
            PolylineKind::BrokenLine => 2,
            PolylineKind::YellowLine => 3,
            PolylineKind::Crosswalk => 4,
            PolylineKind::StopSign => 5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapPolyline {
    pub kind: PolylineKind,
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LightState {
    Red,
    Yellow,
    Green,
    Unknown,
}

impl LightState {
    pub fn index(self) -> usize {
        match self {
            LightState::Red => 0,
            LightState::Yellow => 1,
            LightState::Green => 2,
            LightState::Unknown => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficLight {
    pub position: (f64, f64),
    pub states: Vec<LightState>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub scenario_id: String,
    pub dt: f64,
    pub num_steps: usize,
    pub map: Vec<MapPolyline>,
    pub traffic_lights: Vec<TrafficLight>,
    pub agents: Vec<AgentTrack>,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("schema error in field `{field}`{}: {message}", index.map(|i| format!(" (index {i})")).unwrap_or_default())]
    Schema { field: String, index: Option<usize>, message: String },
}

fn schema_err(field: &str, index: Option<usize>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Schema { field: field.to_string(), index, message: message.into() }
}

impl Scenario {
    /// Index of the unique ego track.
    pub fn ego_index(&self) -> usize {
        self.agents.iter().position(|a| a.is_ego).expect("validated scenario has one ego")
    }

    pub fn ego(&self) -> &AgentTrack {
        &self.agents[self.ego_index()]
    }

    /// Check every structural invariant, naming the offending field.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        if (self.dt - SCENARIO_DT).abs() > 1e-12 {
            return Err(schema_err("dt", None, format!("expected {SCENARIO_DT}, got {}", self.dt)));
        }
        if self.num_steps != NUM_STEPS {
            return Err(schema_err(
                "num_steps",
                None,
                format!("expected {NUM_STEPS}, got {}", self.num_steps),
            ));
        }
        let ego_count = self.agents.iter().filter(|a| a.is_ego).count();
        if ego_count != 1 {
            return Err(schema_err("is_ego", None, format!("expected exactly 1 ego, got {ego_count}")));
        }
        if self.agents.len() > MAX_AGENTS {
            return Err(schema_err("agents", None, format!("more than {MAX_AGENTS} agents")));
        }
        if self.map.len() > MAX_POLYLINES {
            return Err(schema_err("map", None, format!("more than {MAX_POLYLINES} polylines")));
        }
        for (i, track) in self.agents.iter().enumerate() {
            if track.states.len() != self.num_steps {
                return Err(schema_err("states", Some(i), format!("expected {} states", self.num_steps)));
            }
            if !(track.length > 0.0) {
                return Err(schema_err("length", Some(i), "must be positive"));
            }
            if !(track.width > 0.0) {
                return Err(schema_err("width", Some(i), "must be positive"));
            }
            for (t, s) in track.states.iter().enumerate() {
                if !s.speed.is_finite() || s.speed.abs() > MAX_SPEED {
                    return Err(schema_err("speed", Some(i), format!("step {t}: out of range")));
                }
                if !s.x.is_finite() || !s.y.is_finite() || !s.heading.is_finite() {
                    return Err(schema_err("states", Some(i), format!("step {t}: non-finite value")));
                }
            }
        }
        for (i, pl) in self.map.iter().enumerate() {
            if pl.points.len() < 2 {
                return Err(schema_err("points", Some(i), "polyline needs at least 2 points"));
            }
            for w in pl.points.windows(2) {
                let (a, b) = (w[0], w[1]);
                if a.0 == b.0 && a.1 == b.1 {
                    return Err(schema_err("points", Some(i), "consecutive duplicate point"));
                }
            }
        }
        for (i, light) in self.traffic_lights.iter().enumerate() {
            if light.states.len() != self.num_steps {
                return Err(schema_err("traffic_lights", Some(i), "state list length mismatch"));
            }
        }
        Ok(())
    }
}

/// Load and validate a scenario from a JSON file. Headings are normalized on
/// load.
pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let text = std::fs::read_to_string(path)?;
    let mut s: Scenario =
        serde_json::from_str(&text).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    for track in &mut s.agents {
        for st in &mut track.states {
            st.heading = normalize_angle(st.heading);
        }
    }
    s.validate()?;
    Ok(s)
}

/// Serialize a scenario to pretty JSON. Round-trips through `load_scenario`
/// within 1e-9 per coordinate.
pub fn save_scenario(s: &Scenario, path: impl AsRef<Path>) -> Result<(), ScenarioError> {
    let json = serde_json::to_string_pretty(s).map_err(|e| ScenarioError::Parse(e.to_string()))?;
    std::fs::write(path, json)?;
    Ok(())
}
