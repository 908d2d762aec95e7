//! Deterministic bird's-eye SVG rendering of a scenario: map polylines
//! styled by kind, agent boxes at sampled steps with opacity fading over
//! time, the ego in red and the adversary in orange.

use crate::adversary::ADV_TRACK_ID;
use crate::scenario::{PolylineKind, Scenario};
use std::fmt::Write as _;

const MARGIN: f64 = 10.0;
const PIXELS_PER_METER: f64 = 4.0;
/// Every other step is drawn to keep the image readable.
const STEP_STRIDE: usize = 2;

fn polyline_style(kind: PolylineKind) -> (&'static str, &'static str, f64) {
    // (stroke color, dash pattern, width)
    match kind {
        PolylineKind::Lane => ("#9a9a9a", "", 1.5),
        PolylineKind::RoadEdge => ("#404040", "", 2.0),
        PolylineKind::BrokenLine => ("#d0d0d0", "6,4", 1.0),
        PolylineKind::YellowLine => ("#d0b030", "", 1.0),
        PolylineKind::Crosswalk => ("#7a7ad0", "2,3", 1.5),
        PolylineKind::StopSign => ("#c04040", "", 2.0),
    }
}

fn agent_color(is_ego: bool, is_adv: bool) -> &'static str {
    if is_ego {
        "#d62728"
    } else if is_adv {
        "#ff7f0e"
    } else {
        "#1f77b4"
    }
}

fn fmt(v: f64) -> String {
    // Fixed precision keeps output bytes stable and diffs readable.
    format!("{v:.2}")
}

/// Render a scenario as an SVG document. Pure and deterministic: equal
/// inputs produce identical bytes.
pub fn render_svg(s: &Scenario) -> String {
    // World bounds over map points and valid agent positions.
    let mut min = (f64::INFINITY, f64::INFINITY);
    let mut max = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    let mut grow = |x: f64, y: f64| {
        min.0 = min.0.min(x);
        min.1 = min.1.min(y);
        max.0 = max.0.max(x);
        max.1 = max.1.max(y);
    };
    for pl in &s.map {
        for &(x, y) in &pl.points {
            grow(x, y);
        }
    }
    for track in &s.agents {
        for st in &track.states {
            if st.valid {
                grow(st.x, st.y);
            }
        }
    }
    if !min.0.is_finite() {
        min = (0.0, 0.0);
        max = (1.0, 1.0);
    }
    let width = (max.0 - min.0).max(1.0) * PIXELS_PER_METER + 2.0 * MARGIN;
    let height = (max.1 - min.1).max(1.0) * PIXELS_PER_METER + 2.0 * MARGIN;
    // SVG y grows downward; flip so north stays up.
    let px = |x: f64| MARGIN + (x - min.0) * PIXELS_PER_METER;
    let py = |y: f64| MARGIN + (max.1 - y) * PIXELS_PER_METER;

    let mut out = String::new();
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{}\" height=\"{}\" \
         viewBox=\"0 0 {} {}\">",
        fmt(width),
        fmt(height),
        fmt(width),
        fmt(height)
    );
    let _ = writeln!(out, "<rect width=\"100%\" height=\"100%\" fill=\"#fafafa\"/>");

    for pl in &s.map {
        let (color, dash, w) = polyline_style(pl.kind);
        let points: Vec<String> = pl
            .points
            .iter()
            .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
            .collect();
        let dash_attr = if dash.is_empty() {
            String::new()
        } else {
            format!(" stroke-dasharray=\"{dash}\"")
        };
        let _ = writeln!(
            out,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{color}\" \
             stroke-width=\"{w}\"{dash_attr}/>",
            points.join(" ")
        );
    }

    for light in &s.traffic_lights {
        let _ = writeln!(
            out,
            "<circle cx=\"{}\" cy=\"{}\" r=\"4\" fill=\"#2ca02c\" stroke=\"#333\"/>",
            fmt(px(light.position.0)),
            fmt(py(light.position.1))
        );
    }

    for track in &s.agents {
        let color = agent_color(track.is_ego, track.id == ADV_TRACK_ID);
        for t in (0..s.num_steps).step_by(STEP_STRIDE) {
            let Some(bx) = track.box_at(t) else { continue };
            // Older steps are more transparent; the newest drawn step is
            // fully opaque.
            let opacity = 0.15 + 0.85 * t as f64 / (s.num_steps - 1) as f64;
            let corners: Vec<String> = bx
                .corners()
                .iter()
                .map(|&(x, y)| format!("{},{}", fmt(px(x)), fmt(py(y))))
                .collect();
            let _ = writeln!(
                out,
                "<polygon points=\"{}\" fill=\"{color}\" fill-opacity=\"{}\" \
                 stroke=\"{color}\" stroke-opacity=\"{}\"/>",
                corners.join(" "),
                fmt(opacity * 0.6),
                fmt(opacity)
            );
        }
    }

    out.push_str("</svg>\n");
    out
}
