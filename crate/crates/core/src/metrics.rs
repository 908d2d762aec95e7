//! Evaluation: collision checks, time-to-collision, displacement accuracy,
//! mode diversity, histogram divergence, and corpus-level report generation.

use crate::adversary::ADV_TRACK_ID;
use crate::geometry::box_overlap;
use crate::scenario::{load_scenario, AgentState, Scenario, ScenarioError};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;
use thiserror::Error;

/// Cap on time-to-collision values, in seconds.
pub const TTC_CAP: f64 = 10.0;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("histograms have different binning")]
    Binning,
    #[error("prediction/ground-truth mismatch: {0}")]
    Alignment(String),
    #[error("no matching scenario for id {0}")]
    MissingPair(String),
    #[error("scenario error: {0}")]
    Scenario(#[from] ScenarioError),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

/// Fixed-range histogram; out-of-range samples land in the edge bins.
#[derive(Debug, Clone, PartialEq)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(lo: f64, hi: f64, num_bins: usize) -> Self {
        assert!(num_bins > 0 && hi > lo);
        Histogram { lo, hi, counts: vec![0; num_bins] }
    }

    pub fn add(&mut self, value: f64) {
        let n = self.counts.len();
        let frac = (value - self.lo) / (self.hi - self.lo);
        let bin = ((frac * n as f64).floor() as i64).clamp(0, n as i64 - 1) as usize;
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Probability vector; all-zero counts normalize to all zeros.
    pub fn normalized(&self) -> Vec<f64> {
        let total = self.total();
        if total == 0 {
            return vec![0.0; self.counts.len()];
        }
        self.counts.iter().map(|&c| c as f64 / total as f64).collect()
    }
}

/// Base-2 Jensen-Shannon divergence between two histograms over the same
/// binning; always in [0, 1].
pub fn jsd(p: &Histogram, q: &Histogram) -> Result<f64, MetricsError> {
    if p.counts.len() != q.counts.len() || p.lo != q.lo || p.hi != q.hi {
        return Err(MetricsError::Binning);
    }
    let (pp, qq) = (p.normalized(), q.normalized());
    let mut out = 0.0;
    for (&a, &b) in pp.iter().zip(&qq) {
        let m = 0.5 * (a + b);
        if a > 0.0 {
            out += 0.5 * a * (a / m).log2();
        }
        if b > 0.0 {
            out += 0.5 * b * (b / m).log2();
        }
    }
    Ok(out.clamp(0.0, 1.0))
}

/// All pairwise box overlaps in a scenario, and the fraction of agents
/// involved in at least one overlap. Counts agents, not pairs.
#[derive(Debug, Clone)]
pub struct CollisionCheck {
    /// (step, agent index, agent index) for every overlapping valid pair.
    pub pairs: Vec<(usize, usize, usize)>,
    pub involved: Vec<bool>,
    pub agent_rate: f64,
}

pub fn check_collisions(s: &Scenario) -> CollisionCheck {
    let n = s.agents.len();
    let mut pairs = Vec::new();
    let mut involved = vec![false; n];
    for t in 0..s.num_steps {
        for i in 0..n {
            let Some(bi) = s.agents[i].box_at(t) else { continue };
            for j in i + 1..n {
                let Some(bj) = s.agents[j].box_at(t) else { continue };
                if box_overlap(&bi, &bj) {
                    pairs.push((t, i, j));
                    involved[i] = true;
                    involved[j] = true;
                }
            }
        }
    }
    let agent_rate = if n == 0 {
        0.0
    } else {
        involved.iter().filter(|&&b| b).count() as f64 / n as f64
    };
    CollisionCheck { pairs, involved, agent_rate }
}

fn disc_radius(length: f64, width: f64) -> f64 {
    0.5 * (length * length + width * width).sqrt()
}

/// Analytic time to collision for two constant-velocity discs: smallest
/// positive root of |d + u t| = R. None if they never close to contact.
fn disc_ttc(d: (f64, f64), u: (f64, f64), radius_sum: f64) -> Option<f64> {
    let a = u.0 * u.0 + u.1 * u.1;
    let b = 2.0 * (d.0 * u.0 + d.1 * u.1);
    let c = d.0 * d.0 + d.1 * d.1 - radius_sum * radius_sum;
    if c <= 0.0 {
        return Some(0.0);
    }
    if a == 0.0 {
        return None;
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return None;
    }
    let t = (-b - disc.sqrt()) / (2.0 * a);
    if t > 0.0 {
        Some(t.min(TTC_CAP))
    } else {
        None
    }
}

/// Minimum time to collision between `agent_i` and any other valid agent at
/// `step`, under constant-velocity extrapolation of disc-approximated
/// footprints (radius = half the box diagonal). Capped at `TTC_CAP` seconds.
pub fn ttc(s: &Scenario, agent_i: usize, step: usize) -> Option<f64> {
    let a = &s.agents[agent_i];
    let sa = &a.states[step];
    if !sa.valid {
        return None;
    }
    let va = (sa.speed * sa.heading.cos(), sa.speed * sa.heading.sin());
    let ra = disc_radius(a.length, a.width);
    let mut best: Option<f64> = None;
    for (j, b) in s.agents.iter().enumerate() {
        if j == agent_i {
            continue;
        }
        let sb = &b.states[step];
        if !sb.valid {
            continue;
        }
        let vb = (sb.speed * sb.heading.cos(), sb.speed * sb.heading.sin());
        let d = (sb.x - sa.x, sb.y - sa.y);
        let u = (vb.0 - va.0, vb.1 - va.1);
        if let Some(t) = disc_ttc(d, u, ra + disc_radius(b.length, b.width)) {
            best = Some(best.map_or(t, |cur: f64| cur.min(t)));
        }
    }
    best
}

/// One trajectory per agent per mode: `[mode][agent][step]`.
pub type ModeTrajectories = Vec<Vec<Vec<AgentState>>>;

#[derive(Debug, Clone, Copy, Default)]
pub struct Displacement {
    pub sfde_avg: f64,
    pub sfde_min: f64,
    pub sade_avg: f64,
    pub sade_min: f64,
}

/// Final and average displacement error over modes against ground truth.
/// Steps where either side is invalid are excluded.
pub fn displacement_metrics(
    preds: &ModeTrajectories,
    gt: &[Vec<AgentState>],
) -> Result<Displacement, MetricsError> {
    if preds.is_empty() {
        return Err(MetricsError::Alignment("no prediction modes".into()));
    }
    let mut sfde = Vec::with_capacity(preds.len());
    let mut sade = Vec::with_capacity(preds.len());
    for mode in preds {
        if mode.len() != gt.len() {
            return Err(MetricsError::Alignment(format!(
                "mode has {} agents, ground truth has {}",
                mode.len(),
                gt.len()
            )));
        }
        let mut fde_sum = 0.0;
        let mut ade_sum = 0.0;
        let mut agents = 0usize;
        for (pa, ga) in mode.iter().zip(gt) {
            if pa.len() != ga.len() {
                return Err(MetricsError::Alignment("horizon mismatch".into()));
            }
            let mut err_sum = 0.0;
            let mut last_err = None;
            let mut steps = 0usize;
            for (p, g) in pa.iter().zip(ga) {
                if !p.valid || !g.valid {
                    continue;
                }
                let e = ((p.x - g.x).powi(2) + (p.y - g.y).powi(2)).sqrt();
                err_sum += e;
                last_err = Some(e);
                steps += 1;
            }
            if let Some(fin) = last_err {
                fde_sum += fin;
                ade_sum += err_sum / steps as f64;
                agents += 1;
            }
        }
        if agents == 0 {
            return Err(MetricsError::Alignment("no jointly valid steps".into()));
        }
        sfde.push(fde_sum / agents as f64);
        sade.push(ade_sum / agents as f64);
    }
    let m = preds.len() as f64;
    Ok(Displacement {
        sfde_avg: sfde.iter().sum::<f64>() / m,
        sfde_min: sfde.iter().cloned().fold(f64::INFINITY, f64::min),
        sade_avg: sade.iter().sum::<f64>() / m,
        sade_min: sade.iter().cloned().fold(f64::INFINITY, f64::min),
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Diversity {
    pub fdd: f64,
    pub sdd: f64,
    pub add: f64,
}

/// Spread across modes at the first, last, and averaged steps, measured as
/// mean pairwise distance and averaged over agents. Zero for a single mode.
pub fn diversity_metrics(preds: &ModeTrajectories) -> Diversity {
    let m = preds.len();
    if m < 2 || preds[0].is_empty() {
        return Diversity::default();
    }
    let num_agents = preds[0].len();
    let num_steps = preds[0][0].len();
    let mut fdd_sum = 0.0;
    let mut sdd_sum = 0.0;
    let mut add_sum = 0.0;
    let mut agents = 0usize;
    for a in 0..num_agents {
        // Spread per step among the M mode positions, over steps valid in
        // every mode.
        let mut spreads = Vec::new();
        for t in 0..num_steps {
            if preds.iter().any(|mode| !mode[a][t].valid) {
                continue;
            }
            let mut sum = 0.0;
            let mut pairs = 0usize;
            for i in 0..m {
                for j in i + 1..m {
                    let (p, q) = (&preds[i][a][t], &preds[j][a][t]);
                    sum += ((p.x - q.x).powi(2) + (p.y - q.y).powi(2)).sqrt();
                    pairs += 1;
                }
            }
            spreads.push(sum / pairs as f64);
        }
        if spreads.is_empty() {
            continue;
        }
        sdd_sum += spreads[0];
        fdd_sum += *spreads.last().unwrap();
        add_sum += spreads.iter().sum::<f64>() / spreads.len() as f64;
        agents += 1;
    }
    if agents == 0 {
        return Diversity::default();
    }
    let n = agents as f64;
    Diversity { fdd: fdd_sum / n, sdd: sdd_sum / n, add: add_sum / n }
}

#[derive(Debug, Clone, Copy, Default, Serialize)]
pub struct EvalReport {
    pub sfde_avg: f64,
    pub sfde_min: f64,
    pub sade_avg: f64,
    pub sade_min: f64,
    pub fdd: f64,
    pub sdd: f64,
    pub add: f64,
    pub jsd_velocity: f64,
    pub jsd_accel: f64,
    pub jsd_ttc: f64,
    pub attack_success: f64,
    pub adv_traffic_coll: f64,
    pub agent_coll_avg: f64,
    pub agent_coll_min: f64,
    pub num_scenarios: usize,
    pub seed: u64,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "sfde_avg,sfde_min,sade_avg,sade_min,fdd,sdd,add,\
        jsd_velocity,jsd_accel,jsd_ttc,attack_success,adv_traffic_coll,\
        agent_coll_avg,agent_coll_min,num_scenarios,seed";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.sfde_avg,
            self.sfde_min,
            self.sade_avg,
            self.sade_min,
            self.fdd,
            self.sdd,
            self.add,
            self.jsd_velocity,
            self.jsd_accel,
            self.jsd_ttc,
            self.attack_success,
            self.adv_traffic_coll,
            self.agent_coll_avg,
            self.agent_coll_min,
            self.num_scenarios,
            self.seed
        )
    }

    /// CSV with a comment line documenting the agent-counting convention.
    pub fn to_csv(&self) -> String {
        format!(
            "# collision rates count agents involved in at least one overlap, not pairs\n{}\n{}\n",
            Self::CSV_HEADER,
            self.csv_row()
        )
    }
}

fn velocity_histogram() -> Histogram {
    Histogram::new(0.0, 30.0, 30)
}
fn accel_histogram() -> Histogram {
    Histogram::new(-10.0, 10.0, 40)
}
fn ttc_histogram() -> Histogram {
    Histogram::new(0.0, TTC_CAP, 20)
}

fn fill_histograms(
    s: &Scenario,
    vel: &mut Histogram,
    acc: &mut Histogram,
    ttc_h: &mut Histogram,
) {
    for (i, track) in s.agents.iter().enumerate() {
        for t in 0..s.num_steps {
            let st = &track.states[t];
            if !st.valid {
                continue;
            }
            vel.add(st.speed);
            if t + 1 < s.num_steps && track.states[t + 1].valid {
                acc.add((track.states[t + 1].speed - st.speed) / s.dt);
            }
            if let Some(t_coll) = ttc(s, i, t) {
                ttc_h.add(t_coll);
            }
        }
    }
}

/// Pairing key for matching a generated scenario to its source: the id up to
/// an optional `#` suffix (generation appends `#<mode>` to the source id).
pub fn pairing_key(scenario_id: &str) -> &str {
    scenario_id.split('#').next().unwrap()
}

fn load_dir(dir: &Path) -> Result<Vec<Scenario>, MetricsError> {
    let mut files: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .is_some_and(|n| n != "manifest.json" && !n.ends_with(".spec.json"))
        })
        .collect();
    files.sort();
    files.into_iter().map(|p| Ok(load_scenario(&p)?)).collect()
}

fn trajectory(track: &crate::scenario::AgentTrack) -> Vec<AgentState> {
    track.states.clone()
}

/// Corpus-level evaluation: predictions are paired with ground truth by
/// `pairing_key`; multiple predictions per key are treated as modes.
pub fn evaluate(pred_dir: &Path, gt_dir: &Path, seed: u64) -> Result<EvalReport, MetricsError> {
    let gt: BTreeMap<String, Scenario> = load_dir(gt_dir)?
        .into_iter()
        .map(|s| (s.scenario_id.clone(), s))
        .collect();
    let mut groups: BTreeMap<String, Vec<Scenario>> = BTreeMap::new();
    for s in load_dir(pred_dir)? {
        groups.entry(pairing_key(&s.scenario_id).to_string()).or_default().push(s);
    }
    if groups.is_empty() {
        return Err(MetricsError::MissingPair("<empty prediction corpus>".into()));
    }
    for key in groups.keys() {
        if !gt.contains_key(key) {
            return Err(MetricsError::MissingPair(key.clone()));
        }
    }
    for key in gt.keys() {
        if !groups.contains_key(key) {
            return Err(MetricsError::MissingPair(key.clone()));
        }
    }

    let mut disp_sum = Displacement::default();
    let mut div_sum = Diversity::default();
    let mut attack = 0usize;
    let mut adv_traffic = 0usize;
    let mut num_preds = 0usize;
    let mut coll_avg_sum = 0.0;
    let mut coll_min_sum = 0.0;
    let (mut vel_p, mut acc_p, mut ttc_p) = (velocity_histogram(), accel_histogram(), ttc_histogram());
    let (mut vel_g, mut acc_g, mut ttc_g) = (velocity_histogram(), accel_histogram(), ttc_histogram());

    for (key, modes) in &groups {
        let gts = &gt[key];
        fill_histograms(gts, &mut vel_g, &mut acc_g, &mut ttc_g);

        // Displacement against ground truth over the shared (non-ADV) agents.
        let gt_traj: Vec<Vec<AgentState>> = gts.agents.iter().map(trajectory).collect();
        let mut pred_traj: ModeTrajectories = Vec::with_capacity(modes.len());
        for mode in modes {
            let mut per_agent = Vec::with_capacity(gts.agents.len());
            for g in &gts.agents {
                let track = mode.agents.iter().find(|a| a.id == g.id).ok_or_else(|| {
                    MetricsError::Alignment(format!("{key}: prediction lacks agent {}", g.id))
                })?;
                per_agent.push(trajectory(track));
            }
            pred_traj.push(per_agent);
        }
        let disp = displacement_metrics(&pred_traj, &gt_traj)?;
        disp_sum.sfde_avg += disp.sfde_avg;
        disp_sum.sfde_min += disp.sfde_min;
        disp_sum.sade_avg += disp.sade_avg;
        disp_sum.sade_min += disp.sade_min;

        // Diversity over all tracks present in every mode (including the
        // adversary when it exists everywhere).
        let mut div_traj: ModeTrajectories = vec![Vec::new(); modes.len()];
        for track in &modes[0].agents {
            let everywhere: Option<Vec<_>> = modes
                .iter()
                .map(|m| m.agents.iter().find(|a| a.id == track.id).map(trajectory))
                .collect();
            if let Some(per_mode) = everywhere {
                for (m, tr) in per_mode.into_iter().enumerate() {
                    div_traj[m].push(tr);
                }
            }
        }
        let div = diversity_metrics(&div_traj);
        div_sum.fdd += div.fdd;
        div_sum.sdd += div.sdd;
        div_sum.add += div.add;

        let mut min_rate = f64::INFINITY;
        for mode in modes {
            fill_histograms(mode, &mut vel_p, &mut acc_p, &mut ttc_p);
            num_preds += 1;

            let check = check_collisions(mode);
            coll_avg_sum += check.agent_rate;
            min_rate = min_rate.min(check.agent_rate);

            if let Some(adv_i) = mode.agents.iter().position(|a| a.id == ADV_TRACK_ID) {
                let ego_i = mode.ego_index();
                let mut hits_ego = false;
                let mut hits_traffic = false;
                for &(_, i, j) in &check.pairs {
                    if !(i == adv_i || j == adv_i) {
                        continue;
                    }
                    let other = if i == adv_i { j } else { i };
                    if other == ego_i {
                        hits_ego = true;
                    } else {
                        hits_traffic = true;
                    }
                }
                attack += hits_ego as usize;
                adv_traffic += hits_traffic as usize;
            }
        }
        coll_min_sum += min_rate;
    }

    let n = groups.len() as f64;
    Ok(EvalReport {
        sfde_avg: disp_sum.sfde_avg / n,
        sfde_min: disp_sum.sfde_min / n,
        sade_avg: disp_sum.sade_avg / n,
        sade_min: disp_sum.sade_min / n,
        fdd: div_sum.fdd / n,
        sdd: div_sum.sdd / n,
        add: div_sum.add / n,
        jsd_velocity: jsd(&vel_p, &vel_g)?,
        jsd_accel: jsd(&acc_p, &acc_g)?,
        jsd_ttc: jsd(&ttc_p, &ttc_g)?,
        attack_success: attack as f64 / num_preds as f64,
        adv_traffic_coll: adv_traffic as f64 / num_preds as f64,
        agent_coll_avg: coll_avg_sum / num_preds as f64,
        agent_coll_min: coll_min_sum / n,
        num_scenarios: groups.len(),
        seed,
    })
}
