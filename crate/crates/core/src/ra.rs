//! Proportional-fair beam-hopping allocation.
//!
//! Each satellite splits `N_C * beams` OFDMA frames among its matched cells to
//! maximise `sum_c M_c log(1 + rate_c x_c / N_T)` with `0 <= x_c <= N_C`.
//! The continuous relaxation is solved exactly through its single budget
//! multiplier; the integer allocation follows by flooring, greedy completion
//! and single-frame exchanges. A centralised benchmark searches over assignments as well.

use std::collections::BTreeMap;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::ids::{CellId, SatId};
use crate::matching::Matching;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RaCell {
    pub cell_id: CellId,
    pub users: u32,
    /// Estimated per-user rate, bps.
    pub rate: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalRaInstance {
    pub sat_id: SatId,
    pub cells: Vec<RaCell>,
    pub n_c: u32,
    pub beams: u32,
    pub n_t: u32,
}

impl LocalRaInstance {
    pub fn budget(&self) -> u64 {
        self.n_c as u64 * self.beams as u64
    }

    fn slope(&self, i: usize) -> f64 {
        self.cells[i].rate / self.n_t as f64
    }

    fn active(&self, i: usize) -> bool {
        let c = &self.cells[i];
        c.rate > 0.0 && c.users > 0
    }

    /// Objective at a (possibly fractional) allocation.
    pub fn objective(&self, x: &[f64]) -> f64 {
        (0..self.cells.len())
            .filter(|&i| self.active(i))
            .map(|i| self.cells[i].users as f64 * (self.slope(i) * x[i]).ln_1p())
            .sum()
    }

    /// Gain from giving cell `i` one more frame on top of `x`.
    pub fn marginal_gain(&self, i: usize, x: f64) -> f64 {
        if !self.active(i) {
            return 0.0;
        }
        let a = self.slope(i);
        self.cells[i].users as f64 * (a / (1.0 + a * x)).ln_1p()
    }

    fn gradient(&self, i: usize, x: f64) -> f64 {
        let a = self.slope(i);
        self.cells[i].users as f64 * a / (1.0 + a * x)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RelaxedSolution {
    pub x: Vec<f64>,
    /// Budget multiplier.
    pub lambda: f64,
    pub objective: f64,
}

/// Optimal continuous allocation.
///
/// For a multiplier `lambda`, each cell's best response is
/// `clamp(M / lambda - N_T / rate, 0, N_C)`, which is piecewise linear in
/// `mu = 1 / lambda` with two breakpoints per cell. The total is bisected over
/// the sorted breakpoints and then solved exactly on the bracketing segment.
pub fn solve_local_relaxed(inst: &LocalRaInstance) -> RelaxedSolution {
    let n = inst.cells.len();
    let x_max = inst.n_c as f64;
    let budget = inst.budget() as f64;
    let active: Vec<usize> = (0..n).filter(|&i| inst.active(i)).collect();
    let mut x = vec![0.0; n];
    if active.is_empty() || x_max == 0.0 {
        return RelaxedSolution {
            objective: 0.0,
            x,
            lambda: 0.0,
        };
    }
    if active.len() as f64 * x_max <= budget {
        for &i in &active {
            x[i] = x_max;
        }
        return RelaxedSolution {
            objective: inst.objective(&x),
            x,
            lambda: 0.0,
        };
    }

    let m = |i: usize| inst.cells[i].users as f64;
    let inv_a = |i: usize| 1.0 / inst.slope(i);
    let response = |i: usize, mu: f64| (m(i) * mu - inv_a(i)).clamp(0.0, x_max);
    let total = |mu: f64| active.iter().map(|&i| response(i, mu)).sum::<f64>();

    let mut points: Vec<f64> = active
        .iter()
        .flat_map(|&i| [inv_a(i) / m(i), (x_max + inv_a(i)) / m(i)])
        .collect();
    points.sort_by(f64::total_cmp);
    // Largest breakpoint whose total does not exceed the budget. The first
    // breakpoint has total 0 and the last has total |active| * N_C > budget.
    let (mut lo, mut hi) = (0usize, points.len() - 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if total(points[mid]) <= budget {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let (mu_lo, mu_hi) = (points[lo], points[hi]);
    let probe = 0.5 * (mu_lo + mu_hi);
    let (mut slope, mut fixed) = (0.0, 0.0);
    for &i in &active {
        let start = inv_a(i) / m(i);
        let end = (x_max + inv_a(i)) / m(i);
        if probe >= end {
            fixed += x_max;
        } else if probe > start {
            slope += m(i);
            fixed -= inv_a(i);
        }
    }
    let mu = if slope > 0.0 {
        ((budget - fixed) / slope).clamp(mu_lo, mu_hi)
    } else {
        mu_hi
    };
    for &i in &active {
        x[i] = response(i, mu);
    }
    // Rounding in the sums can leave the total a hair above the budget.
    let j = (0..n).max_by(|&a, &b| x[a].total_cmp(&x[b])).unwrap();
    while x.iter().sum::<f64>() > budget {
        let excess = x.iter().sum::<f64>() - budget;
        x[j] = (x[j] - excess.max(x[j] * f64::EPSILON)).max(0.0);
    }
    RelaxedSolution {
        objective: inst.objective(&x),
        x,
        lambda: 1.0 / mu,
    }
}

/// Largest relative violation of the optimality conditions of a relaxed
/// solution: primal feasibility, complementary slackness and per-coordinate
/// stationarity against the returned multiplier.
pub fn kkt_residual(inst: &LocalRaInstance, sol: &RelaxedSolution) -> f64 {
    let x_max = inst.n_c as f64;
    let budget = inst.budget() as f64;
    let lam = sol.lambda;
    let sum: f64 = sol.x.iter().sum();
    let scale = budget.max(1.0);
    let mut r: f64 = 0.0;
    r = r.max((sum - budget).max(0.0) / scale);
    r = r.max(lam * (budget - sum).abs() / (lam * scale).max(f64::MIN_POSITIVE));
    if lam == 0.0 {
        r = 0.0f64.max(r.min((sum - budget).max(0.0) / scale));
    }
    let edge = 1e-9 * x_max.max(1.0);
    for (i, &xi) in sol.x.iter().enumerate() {
        if xi < 0.0 || xi > x_max {
            r = r.max((-xi).max(xi - x_max) / x_max.max(1.0));
        }
        if !inst.active(i) {
            r = r.max(xi.abs() / x_max.max(1.0));
            continue;
        }
        let g = inst.gradient(i, xi);
        let norm = g.max(lam);
        let v = if xi <= edge {
            (g - lam).max(0.0)
        } else if xi >= x_max - edge {
            (lam - g).max(0.0)
        } else {
            (g - lam).abs()
        };
        r = r.max(v / norm);
    }
    r
}

/// Integer allocation: floor the relaxed point, hand out the remaining budget
/// one frame at a time to the cell with the largest objective gain (ties to
/// the earlier cell), then move single frames between cells while that
/// raises the objective.
pub fn round_allocation(frac: &[f64], inst: &LocalRaInstance) -> Vec<u32> {
    let n_c = inst.n_c;
    let mut x: Vec<u32> = frac.iter().map(|&v| (v.max(0.0).floor() as u32).min(n_c)).collect();
    let mut left = inst.budget().saturating_sub(x.iter().map(|&v| v as u64).sum());
    while left > 0 {
        let mut best: Option<(usize, f64)> = None;
        for i in 0..x.len() {
            if x[i] >= n_c {
                continue;
            }
            let g = inst.marginal_gain(i, x[i] as f64);
            if g > 0.0 && best.is_none_or(|(_, b)| g > b) {
                best = Some((i, g));
            }
        }
        let Some((i, _)) = best else { break };
        x[i] += 1;
        left -= 1;
    }
    // Flooring can keep a frame that is worth less elsewhere, e.g. when the
    // first frame of a fast link carries most of its utility. Move single
    // frames while that helps; for a separable concave objective with one
    // budget, no improving move left means the integer optimum.
    loop {
        let loss = |i: usize| inst.marginal_gain(i, x[i] as f64 - 1.0);
        let from = (0..x.len()).filter(|&i| x[i] > 0).min_by(|&a, &b| loss(a).total_cmp(&loss(b)));
        let to = (0..x.len())
            .filter(|&j| x[j] < n_c)
            .max_by(|&a, &b| inst.marginal_gain(a, x[a] as f64).total_cmp(&inst.marginal_gain(b, x[b] as f64)).then(b.cmp(&a)));
        let (Some(i), Some(j)) = (from, to) else { break };
        let gain = inst.marginal_gain(j, x[j] as f64);
        if i == j || gain <= loss(i) * (1.0 + 1e-12) {
            break;
        }
        x[i] -= 1;
        x[j] += 1;
    }
    x
}

pub fn integer_objective(inst: &LocalRaInstance, x: &[u32]) -> f64 {
    let xf: Vec<f64> = x.iter().map(|&v| v as f64).collect();
    inst.objective(&xf)
}

/// Relax, solve and round one satellite's problem.
pub fn solve_local(inst: &LocalRaInstance) -> (Vec<u32>, f64, RelaxedSolution) {
    let rel = solve_local_relaxed(inst);
    let x = round_allocation(&rel.x, inst);
    let obj = integer_objective(inst, &x);
    (x, obj, rel)
}

/// OFDMA frames per (satellite, cell); only nonzero entries are stored.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BeamHoppingPattern {
    pub x: BTreeMap<(SatId, CellId), u32>,
}

impl BeamHoppingPattern {
    pub fn get(&self, sat: SatId, cell: CellId) -> u32 {
        self.x.get(&(sat, cell)).copied().unwrap_or(0)
    }

    /// Per-satellite budgets and matching support.
    pub fn check(&self, m: &Matching, n_c: u32, beams: &[u32]) -> std::result::Result<(), String> {
        let mut used = vec![0u64; beams.len()];
        for (&(s, c), &v) in &self.x {
            if v > n_c {
                return Err(format!("x[{s},{c}] = {v} exceeds N_C = {n_c}"));
            }
            if v > 0 && m.cell_to_sat[c.index()] != Some(s) {
                return Err(format!("x[{s},{c}] = {v} but cell {c} is not matched to {s}"));
            }
            used[s.index()] += v as u64;
        }
        for (s, (&u, &b)) in used.iter().zip(beams).enumerate() {
            if u > n_c as u64 * b as u64 {
                return Err(format!("satellite {s} uses {u} frames, budget {}", n_c as u64 * b as u64));
            }
        }
        Ok(())
    }
}

/// Append `frame,sat_id,cell_id,x` rows.
pub fn write_allocation_rows<W: Write>(w: &mut csv::Writer<W>, frame: u64, p: &BeamHoppingPattern) -> Result<()> {
    for (&(s, c), &v) in &p.x {
        w.write_record([frame.to_string(), s.to_string(), c.to_string(), v.to_string()])?;
    }
    Ok(())
}

/// Estimated rates, users and budgets shared by every satellite of a frame.
#[derive(Debug, Clone)]
pub struct RaInputs<'a> {
    /// Estimated per-user rate of each acceptable (satellite, cell) pair.
    pub rates: &'a BTreeMap<(SatId, CellId), f64>,
    /// Active users per cell.
    pub users: &'a [u32],
    pub beams: &'a [u32],
    pub n_c: u32,
    pub n_t: u32,
}

impl RaInputs<'_> {
    pub fn instance(&self, sat: SatId, cells: &[CellId]) -> LocalRaInstance {
        LocalRaInstance {
            sat_id: sat,
            cells: cells
                .iter()
                .map(|&c| RaCell {
                    cell_id: c,
                    users: self.users[c.index()],
                    rate: self.rates.get(&(sat, c)).copied().unwrap_or(0.0),
                })
                .collect(),
            n_c: self.n_c,
            beams: self.beams[sat.index()],
            n_t: self.n_t,
        }
    }
}

/// Local allocation on every satellite of a matching; returns the pattern
/// and the summed integer objective.
pub fn allocate(m: &Matching, inputs: &RaInputs) -> (BeamHoppingPattern, f64) {
    let mut pattern = BeamHoppingPattern::default();
    let mut total = 0.0;
    for (s, cells) in m.sat_to_cells.iter().enumerate() {
        if cells.is_empty() {
            continue;
        }
        let sat = SatId(s as u32);
        let inst = inputs.instance(sat, cells);
        let (x, obj, _) = solve_local(&inst);
        total += obj;
        for (c, v) in cells.iter().zip(x) {
            if v > 0 {
                pattern.x.insert((sat, *c), v);
            }
        }
    }
    (pattern, total)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CentralizedResult {
    pub matching: Matching,
    pub pattern: BeamHoppingPattern,
    pub objective: f64,
    /// Best integer objective after each outer iteration (index 0 is the
    /// starting point).
    pub history: Vec<f64>,
    /// False when the iteration limit was hit while moves were still being
    /// accepted; the best iterate is returned either way.
    pub converged: bool,
}

/// Centralised joint assignment and allocation benchmark ("CB-surrogate").
///
/// Block-coordinate local search: with the assignment fixed, every
/// satellite's allocation is solved as in the distributed scheme; with the
/// allocations fixed, each cell in turn is offered the satellites with room
/// in its quota, ranked by the contribution it could earn there at that
/// satellite's budget price, less what it earns now at its current price.
/// The best-ranked relocation is kept only if re-solving both satellites
/// raises the integer objective. The search starts from the best of the
/// given matchings.
pub fn solve_centralized(
    inputs: &RaInputs,
    quotas: &[u32],
    starts: &[&Matching],
    n_iter: u32,
) -> CentralizedResult {
    assert!(!starts.is_empty(), "at least one starting matching");
    let n_cells = inputs.users.len();
    let mut options: Vec<Vec<(SatId, f64)>> = vec![Vec::new(); n_cells];
    for (&(s, c), &r) in inputs.rates {
        if r > 0.0 {
            options[c.index()].push((s, r));
        }
    }

    let (mut best, mut best_obj) = starts
        .iter()
        .map(|m| ((*m).clone(), allocate(m, inputs).1))
        .fold(None::<(Matching, f64)>, |acc, (m, o)| match acc {
            Some((am, ao)) if ao >= o => Some((am, ao)),
            _ => Some((m, o)),
        })
        .unwrap();

    let sat_obj = |m: &Matching, s: usize| -> (f64, f64) {
        let cells = &m.sat_to_cells[s];
        if cells.is_empty() {
            return (0.0, 0.0);
        }
        let inst = inputs.instance(SatId(s as u32), cells);
        let (_, obj, rel) = solve_local(&inst);
        (obj, rel.lambda)
    };

    let mut history = vec![best_obj];
    let mut converged = false;
    for _ in 0..n_iter {
        let mut per_sat: Vec<(f64, f64)> = (0..quotas.len()).map(|s| sat_obj(&best, s)).collect();
        let mut moved = false;
        for c in 0..n_cells {
            let cell = CellId(c as u32);
            let m_c = inputs.users[c] as f64;
            let here = best.cell_to_sat[c];
            // Priced value of the cell at its current satellite.
            let now = here.map_or(0.0, |s| {
                let inst = inputs.instance(s, &best.sat_to_cells[s.index()]);
                let rel = solve_local_relaxed(&inst);
                let i = inst.cells.iter().position(|e| e.cell_id == cell).unwrap();
                let a = inst.cells[i].rate / inputs.n_t as f64;
                m_c * (a * rel.x[i]).ln_1p() - rel.lambda * rel.x[i]
            });
            let mut cands: Vec<(f64, SatId)> = options[c]
                .iter()
                .filter(|(s, _)| Some(*s) != here)
                .filter(|(s, _)| best.sat_to_cells[s.index()].len() < quotas[s.index()] as usize)
                .map(|&(s, r)| {
                    let a = r / inputs.n_t as f64;
                    let lam = per_sat[s.index()].1;
                    let x = if lam > 0.0 {
                        (m_c / lam - 1.0 / a).clamp(0.0, inputs.n_c as f64)
                    } else {
                        inputs.n_c as f64
                    };
                    (m_c * (a * x).ln_1p() - lam * x - now, s)
                })
                .collect();
            cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            let Some(&(_, target)) = cands.first() else { continue };

            let mut assign = best.cell_to_sat.clone();
            assign[c] = Some(target);
            let trial = Matching::from_assignment(assign, quotas);
            let old = here.map_or(0.0, |s| per_sat[s.index()].0) + per_sat[target.index()].0;
            let new_here = here.map(|s| sat_obj(&trial, s.index()));
            let new_target = sat_obj(&trial, target.index());
            let new = new_here.map_or(0.0, |v| v.0) + new_target.0;
            if new > old + 1e-12 * old.abs().max(1.0) {
                best_obj += new - old;
                best = trial;
                if let (Some(s), Some(v)) = (here, new_here) {
                    per_sat[s.index()] = v;
                }
                per_sat[target.index()] = new_target;
                moved = true;
            }
        }
        // Recompute from scratch so the reported objective carries no drift.
        best_obj = best_obj.max(allocate(&best, inputs).1);
        history.push(best_obj);
        if !moved {
            converged = true;
            break;
        }
    }
    if !converged {
        log::warn!("centralised benchmark stopped after {n_iter} iterations without reaching a fixed point");
    }
    let (pattern, objective) = allocate(&best, inputs);
    CentralizedResult {
        matching: best,
        pattern,
        objective,
        history,
        converged,
    }
}

/// How the estimates that drive matching and allocation are produced.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RaMode {
    /// Sensed estimates, distributed matching and local allocation.
    #[default]
    Proposed,
    /// Centralised benchmark on the same inputs as `proposed`.
    Cb,
    /// No satellite senses; every estimate is the clear-sky SNR.
    NoSensing,
    /// True SNR, without sensing overhead.
    FullCsi,
}

impl RaMode {
    /// Whether this mode spends OFDMA frames on sensing and feedback.
    pub fn has_sensing_overhead(self) -> bool {
        matches!(self, RaMode::Proposed | RaMode::Cb)
    }

    /// SNR estimate for one link. `sensed` is the pilot-based estimate when
    /// the serving shell senses.
    pub fn snr_estimate(self, true_snr: f64, clear_sky_snr: f64, sensed: Option<f64>) -> f64 {
        match self {
            RaMode::FullCsi => true_snr,
            RaMode::NoSensing => clear_sky_snr,
            RaMode::Proposed | RaMode::Cb => sensed.unwrap_or(clear_sky_snr),
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            RaMode::Proposed => "proposed",
            RaMode::Cb => "cb",
            RaMode::NoSensing => "no_sensing",
            RaMode::FullCsi => "full_csi",
        }
    }
}
