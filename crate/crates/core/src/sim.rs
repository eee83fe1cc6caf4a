//! Frame loop and metrics.
//!
//! Within frame `k` the simulator applies the matching and allocation that
//! were decided from frame `k - 1` estimates, measures what the users
//! actually get from the true rates at `k`, senses the links at `k`, and runs
//! the matching that will take effect at `k + 1`. Frame 0 bootstraps from a
//! cold-start matching on its own estimates.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cells::{BoundingBox, CellGrid, GridResolution, PopulationSource};
use crate::channel::{build_link_table, rate_per_user, GroundParams, LinkTable};
use crate::error::{Error, Result};
use crate::frame::{self, FrameLayout, FrameParams};
use crate::ids::{CellId, SatId};
use crate::matching::{build_preferences, cold_start, deferred_acceptance, DaOptions, Matching, PreferenceLists};
use crate::orbits::{build_constellation, propagate, visible_cells, Band, Constellation, OrbitalShell};
use crate::ra::{allocate, solve_centralized, BeamHoppingPattern, RaInputs, RaMode};
use crate::rain::{init_rain, step_rain, RainParams, RainProcess};
use crate::rng;
use crate::sensing::{sense_link, NmseSweepConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationConfig {
    pub shells: Vec<OrbitalShell>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridConfig {
    pub bbox: BoundingBox,
    pub resolution: GridResolution,
    #[serde(default)]
    pub population: PopulationSource,
    /// Fraction of the population active at once.
    pub active_fraction: f64,
}

/// Which shells take part in a run.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BandMode {
    SOnly,
    KOnly,
    #[default]
    Multi,
}

impl BandMode {
    pub fn keeps(self, band: Band) -> bool {
        match self {
            BandMode::Multi => true,
            BandMode::SOnly => band == Band::Sub6,
            BandMode::KOnly => band == Band::MmWave,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            BandMode::SOnly => "s_only",
            BandMode::KOnly => "k_only",
            BandMode::Multi => "multi",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchingConfig {
    /// Cells per satellite, q_s, shared by all satellites.
    pub quota: u32,
    pub orphan_rescue: bool,
    pub irrevocable_acceptance: bool,
    /// Leave out of the preference lists any satellite that the ephemeris
    /// says will not see the cell at the start of the next frame.
    pub predict_visibility: bool,
    pub bootstrap: Bootstrap,
}

/// How the first frame's matching is formed, before any broker exists.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bootstrap {
    /// Deferred acceptance with every cell taking part.
    #[default]
    DeferredAcceptance,
    /// Each cell in id order takes its best satellite if it still has room.
    Greedy,
}

impl Default for MatchingConfig {
    fn default() -> Self {
        Self {
            quota: 100,
            orphan_rescue: false,
            irrevocable_acceptance: false,
            predict_visibility: true,
            bootstrap: Bootstrap::DeferredAcceptance,
        }
    }
}

/// Rates fed to the centralised benchmark.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CbRates {
    #[default]
    Estimated,
    True,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RaConfig {
    pub mode: RaMode,
    /// Outer iterations of the centralised benchmark.
    pub n_iter: u32,
    pub cb_rates: CbRates,
}

impl Default for RaConfig {
    fn default() -> Self {
        Self {
            mode: RaMode::Proposed,
            n_iter: 20,
            cb_rates: CbRates::Estimated,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensingConfig {
    pub pilot_length: u32,
    /// Draw the sufficient statistics directly instead of every pilot symbol.
    pub fast_path: bool,
}

impl Default for SensingConfig {
    fn default() -> Self {
        Self {
            pilot_length: 256,
            fast_path: true,
        }
    }
}

/// Grid of the attenuation-curve experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttenuationConfig {
    pub carrier_hz: f64,
    pub polarization: crate::channel::Polarization,
    pub rain_mmh: Vec<f64>,
    pub elevation_deg: Vec<f64>,
}

impl Default for AttenuationConfig {
    fn default() -> Self {
        Self {
            carrier_hz: 20e9,
            polarization: Default::default(),
            rain_mmh: (0..=10).map(|i| 2.0 * i as f64).collect(),
            elevation_deg: vec![20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    /// Factor applied to the nominal quota values of a quota sweep, so that
    /// small scenarios keep the same quota-to-footprint ratio.
    pub quota_scale: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self { quota_scale: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimConfig {
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_horizon")]
    pub horizon_frames: u32,
    #[serde(default)]
    pub band_mode: BandMode,
    pub constellation: ConstellationConfig,
    pub grid: GridConfig,
    #[serde(default)]
    pub ground: GroundParams,
    pub rain: RainParams,
    #[serde(default)]
    pub frame: FrameParams,
    #[serde(default)]
    pub matching: MatchingConfig,
    #[serde(default)]
    pub ra: RaConfig,
    #[serde(default)]
    pub sensing: SensingConfig,
    #[serde(default)]
    pub nmse: NmseSweepConfig,
    #[serde(default)]
    pub attenuation: AttenuationConfig,
    #[serde(default)]
    pub sweep: SweepConfig,
}

fn default_horizon() -> u32 {
    200
}

impl SimConfig {
    /// Shells left after applying the band mode.
    pub fn active_shells(&self) -> Vec<OrbitalShell> {
        self.constellation
            .shells
            .iter()
            .filter(|s| self.band_mode.keeps(s.band()))
            .cloned()
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.horizon_frames < 1 {
            return Err(Error::InvalidParameter("horizon_frames must be at least 1".into()));
        }
        if self.sensing.pilot_length < 2 {
            return Err(Error::InvalidParameter("sensing.pilot_length must be at least 2".into()));
        }
        if !(self.grid.active_fraction > 0.0 && self.grid.active_fraction <= 1.0) {
            return Err(Error::InvalidParameter("grid.active_fraction must lie in (0, 1]".into()));
        }
        for s in &self.constellation.shells {
            s.validate()?;
        }
        self.grid.bbox.validate()?;
        self.rain.validate()?;
        self.frame.n_total()?;
        Ok(())
    }
}

/// Throughput of the users of one cell in one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct ThroughputSample {
    pub frame_k: u64,
    pub cell_id: CellId,
    /// Serving satellite, if the cell was served.
    pub sat_id: Option<SatId>,
    pub shell: Option<usize>,
    /// Number of users sharing this value (one sample per user).
    pub users: u32,
    pub throughput_bps: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameMetrics {
    pub frame_k: u64,
    /// Frame whose estimates drove this frame's matching and allocation.
    pub estimate_frame: u64,
    pub layout: FrameLayout,
    pub visible_sats: usize,
    pub served_cells: usize,
    /// Cells whose assigned satellite no longer sees them.
    pub broker_failures: usize,
    /// Share of users without a serving satellite.
    pub unmatched_fraction: f64,
    pub mean_user_throughput_bps: f64,
    /// Mean true per-user rate over served cells.
    pub mean_cell_utility: f64,
    /// Mean over serving satellites of the sum of inverse true rates.
    pub mean_sat_utility: f64,
    /// Messages of the matching run during this frame.
    pub broker_messages: u64,
    pub matching_rounds: u32,
    /// Estimated objective of the applied allocation.
    pub ra_objective: f64,
    pub mean_rain_mmh: f64,
    /// Only in centralised-benchmark runs.
    pub cb_converged: Option<bool>,
}

/// A matching decided at `decided_frame` and applied at `decided_frame + 1`,
/// with the footprint sizes it was decided against.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchingRecord {
    pub decided_frame: u64,
    pub matching: Matching,
    pub footprint: Vec<usize>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricsArchive {
    pub frames: Vec<FrameMetrics>,
    pub samples: Vec<ThroughputSample>,
    pub matchings: Vec<MatchingRecord>,
    /// Allocation applied in each frame.
    pub allocations: Vec<BeamHoppingPattern>,
    pub rain: Vec<Vec<f64>>,
}

/// Static part of a run.
pub struct Scenario {
    pub constellation: Constellation,
    pub grid: CellGrid,
}

impl Scenario {
    pub fn build(cfg: &SimConfig) -> Result<Self> {
        let grid = CellGrid::build(
            cfg.grid.bbox,
            cfg.grid.resolution,
            &cfg.grid.population,
            cfg.grid.active_fraction,
        )?;
        let constellation = build_constellation(&cfg.active_shells())?;
        Ok(Self { constellation, grid })
    }
}

/// Estimated per-user rate of every visible link at one frame.
fn estimate_rates(
    cfg: &SimConfig,
    sc: &Scenario,
    links: &LinkTable,
    sensed_mode: RaMode,
    frame_k: u64,
) -> BTreeMap<(SatId, CellId), f64> {
    let entries: Vec<_> = links.records.values().collect();
    let l_p = cfg.sensing.pilot_length;
    entries
        .par_iter()
        .map(|rec| {
            let shell = sc.constellation.shell_of(rec.sat_id);
            let sensed = (sensed_mode.has_sensing_overhead() && shell.sensing_enabled).then(|| {
                let mut r = rng::stream(
                    cfg.seed,
                    &[rng::tag::PILOTS, frame_k, rec.sat_id.0 as u64, rec.cell_id.0 as u64],
                );
                sense_link(rec.snr_linear, l_p, cfg.sensing.fast_path, &mut r).value
            });
            let snr_hat = sensed_mode.snr_estimate(rec.snr_linear, rec.snr_norain_linear, sensed);
            let users = sc.grid.cell(rec.cell_id).active_users;
            ((rec.sat_id, rec.cell_id), rate_per_user(snr_hat, shell.bandwidth_hz, users))
        })
        .collect::<Vec<_>>()
        .into_iter()
        .collect()
}

/// Sensing and feedback OFDMA frames for one frame.
fn overhead(
    cfg: &SimConfig,
    sc: &Scenario,
    links: &LinkTable,
    prefs: &PreferenceLists,
    mode: RaMode,
) -> Result<(u32, u32)> {
    if !mode.has_sensing_overhead() {
        return Ok((0, 0));
    }
    let mut times = Vec::new();
    for sat in links.sats() {
        let shell = sc.constellation.shell_of(sat);
        if !shell.sensing_enabled {
            continue;
        }
        let (count, d_max) = links
            .of_sat(sat)
            .fold((0usize, 0.0f64), |(n, d), r| (n + 1, d.max(r.distance_m)));
        let t_pil = frame::pilot_duration(cfg.sensing.pilot_length, shell)?;
        times.push(frame::sensing_time(count, shell.beams, d_max, t_pil));
    }
    let n_s = frame::sensing_frames(&times, cfg.frame.ofdma_frame_s);
    if n_s == 0 {
        return Ok((0, 0));
    }
    let n_fb = match cfg.frame.feedback_rate_bps {
        None => 1,
        Some(rate) => prefs
            .cell_prefs
            .iter()
            .map(|l| frame::feedback_frames(cfg.frame.tuple_bits, l.len(), rate, cfg.frame.ofdma_frame_s))
            .max()
            .unwrap_or(0)
            .max(1),
    };
    Ok((n_s, n_fb))
}

/// Run the configured horizon.
pub fn run(cfg: &SimConfig) -> Result<MetricsArchive> {
    cfg.validate()?;
    let sc = Scenario::build(cfg)?;
    run_scenario(cfg, &sc)
}

pub fn run_scenario(cfg: &SimConfig, sc: &Scenario) -> Result<MetricsArchive> {
    let mode = cfg.ra.mode;
    let n_sats = sc.constellation.len();
    let n_cells = sc.grid.len();
    let quotas = vec![cfg.matching.quota; n_sats];
    let beams: Vec<u32> = sc.constellation.satellites.iter().map(|s| sc.constellation.shells[s.shell_index].beams).collect();
    let users: Vec<u32> = sc.grid.cells.iter().map(|c| c.active_users).collect();
    let total_users: f64 = users.iter().map(|&u| u as f64).sum();
    let dt = cfg.frame.system_frame_s;
    // The benchmark may be fed the true rates instead of the sensed ones.
    let estimate_mode = match (mode, cfg.ra.cb_rates) {
        (RaMode::Cb, CbRates::True) => RaMode::FullCsi,
        _ => mode,
    };
    let da_opts = DaOptions {
        // A central controller needs no broker.
        orphan_rescue: cfg.matching.orphan_rescue || mode == RaMode::Cb,
        irrevocable_acceptance: cfg.matching.irrevocable_acceptance,
    };

    let mut archive = MetricsArchive::default();
    let mut rain = init_rain(&cfg.grid.bbox, &sc.grid, &cfg.rain, cfg.seed)?;
    let mut frozen_n_s = 0u32;
    // Matching and estimates decided in the previous frame.
    let mut carry: Option<(Matching, BTreeMap<(SatId, CellId), f64>, u64)> = None;

    for k in 0..cfg.horizon_frames as u64 {
        let states = propagate(&sc.constellation, k, dt);
        if k > 0 {
            rain = step_rain(rain, &sc.grid, dt);
        }
        let intensities = rain.intensities().to_vec();
        let links = build_link_table(k, &sc.constellation, &states, &sc.grid, &intensities, &cfg.ground);

        let est = estimate_rates(cfg, sc, &links, estimate_mode, k);
        let next_visible = cfg.matching.predict_visibility.then(|| {
            let next = propagate(&sc.constellation, k + 1, dt);
            visibility(&sc.constellation, &next, &sc.grid)
        });
        let prefs = build_preferences(
            est.iter()
                .filter(|(key, _)| next_visible.as_ref().is_none_or(|v| v.contains(key)))
                .map(|(&(s, c), &r)| (s, c, r)),
            n_cells,
            n_sats,
        );
        let (mut n_s, n_fb) = overhead(cfg, sc, &links, &prefs, mode)?;
        if cfg.frame.freeze_sensing_frames {
            frozen_n_s = frozen_n_s.max(n_s);
            n_s = frozen_n_s;
        }
        let layout = FrameLayout::new(&cfg.frame, n_s, n_fb)?;

        let (mut applied, used_est, estimate_frame) = match carry.take() {
            Some(c) => c,
            None => {
                let m = match cfg.matching.bootstrap {
                    Bootstrap::Greedy => cold_start(&prefs, &quotas),
                    Bootstrap::DeferredAcceptance => {
                        let opts = DaOptions {
                            orphan_rescue: true,
                            ..da_opts
                        };
                        deferred_acceptance(&prefs, &quotas, None, opts).0
                    }
                };
                (m, est.clone(), k)
            }
        };
        let inputs = RaInputs {
            rates: &used_est,
            users: &users,
            beams: &beams,
            n_c: layout.n_c,
            n_t: layout.n_t,
        };
        let mut cb_converged = None;
        if mode == RaMode::Cb {
            let cb = solve_centralized(&inputs, &quotas, &[&applied], cfg.ra.n_iter);
            cb_converged = Some(cb.converged);
            applied = cb.matching;
        }

        // Broker failure: the assigned satellite has moved out of view.
        let mut assign = applied.cell_to_sat.clone();
        let mut broker_failures = 0;
        for (c, slot) in assign.iter_mut().enumerate() {
            if let Some(s) = *slot {
                if links.get(s, CellId(c as u32)).is_none() {
                    *slot = None;
                    broker_failures += 1;
                }
            }
        }
        let served = Matching::from_assignment(assign, &quotas);
        let (pattern, ra_objective) = allocate(&served, &inputs);

        // Outcomes from the true rates.
        let mut sum_tp = 0.0;
        let mut unmatched_users = 0.0;
        let mut cell_util = Vec::new();
        for (c, slot) in served.cell_to_sat.iter().enumerate() {
            let cell = CellId(c as u32);
            let (sat, shell, tp) = match *slot {
                Some(s) => {
                    let rec = links.get(s, cell).expect("served links are visible");
                    cell_util.push(rec.rate_per_user_bps);
                    let x = pattern.get(s, cell);
                    let tp = rec.rate_per_user_bps * x as f64 / layout.n_t as f64;
                    (Some(s), Some(sc.constellation.satellites[s.index()].shell_index), tp)
                }
                None => {
                    unmatched_users += users[c] as f64;
                    (None, None, 0.0)
                }
            };
            sum_tp += users[c] as f64 * tp;
            archive.samples.push(ThroughputSample {
                frame_k: k,
                cell_id: cell,
                sat_id: sat,
                shell,
                users: users[c],
                throughput_bps: tp,
            });
        }
        let sat_util: Vec<f64> = served
            .sat_to_cells
            .iter()
            .enumerate()
            .filter(|(_, cells)| !cells.is_empty())
            .map(|(s, cells)| {
                cells
                    .iter()
                    .map(|&c| 1.0 / links.get(SatId(s as u32), c).unwrap().rate_per_user_bps)
                    .sum()
            })
            .collect();

        // Matching for the next frame, brokered by this frame's serving satellites.
        let (next, log) = deferred_acceptance(&prefs, &quotas, Some(&served), da_opts);
        let footprint: Vec<usize> = (0..n_sats).map(|s| links.of_sat(SatId(s as u32)).count()).collect();
        next.check(&footprint)
            .map_err(|e| Error::InvalidParameter(format!("matching decided at frame {k} is infeasible: {e}")))?;

        archive.frames.push(FrameMetrics {
            frame_k: k,
            estimate_frame,
            layout,
            visible_sats: links.sats().len(),
            served_cells: served.cell_to_sat.iter().filter(|s| s.is_some()).count(),
            broker_failures,
            unmatched_fraction: if total_users > 0.0 { unmatched_users / total_users } else { 0.0 },
            mean_user_throughput_bps: if total_users > 0.0 { sum_tp / total_users } else { 0.0 },
            mean_cell_utility: mean(&cell_util),
            mean_sat_utility: mean(&sat_util),
            broker_messages: log.messages,
            matching_rounds: log.rounds,
            ra_objective,
            mean_rain_mmh: mean(&intensities),
            cb_converged,
        });
        archive.matchings.push(MatchingRecord {
            decided_frame: k,
            matching: next.clone(),
            footprint,
        });
        archive.allocations.push(pattern);
        archive.rain.push(intensities);
        carry = Some((next, est, k));
    }
    Ok(archive)
}

/// Visible (satellite, cell) pairs for the given positions.
fn visibility(
    constellation: &Constellation,
    states: &[crate::orbits::SatelliteState],
    grid: &CellGrid,
) -> std::collections::BTreeSet<(SatId, CellId)> {
    states
        .iter()
        .flat_map(|st| {
            let min = constellation.shells[st.shell_index].min_elevation_deg;
            visible_cells(st, grid, min).into_iter().map(move |c| (st.sat_id, c))
        })
        .collect()
}

fn mean(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        0.0
    } else {
        xs.iter().sum::<f64>() / xs.len() as f64
    }
}

/// Weighted empirical CDF: sorted unique values with the cumulative share of
/// weight at or below each.
pub fn cdf(samples: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let total: f64 = samples.iter().map(|s| s.1).sum();
    if samples.is_empty() || total <= 0.0 {
        log::warn!("empty sample set, CDF is empty");
        return Vec::new();
    }
    let mut sorted = samples.to_vec();
    sorted.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut out: Vec<(f64, f64)> = Vec::new();
    let mut acc = 0.0;
    for (v, w) in sorted {
        acc += w;
        match out.last_mut() {
            Some(last) if last.0 == v => last.1 = acc / total,
            _ => out.push((v, acc / total)),
        }
    }
    if let Some(last) = out.last_mut() {
        last.1 = 1.0;
    }
    out
}

/// Smallest value whose CDF reaches `p`.
pub fn quantile(cdf: &[(f64, f64)], p: f64) -> Option<f64> {
    cdf.iter().find(|(_, f)| *f >= p - 1e-12).or(cdf.last()).map(|(v, _)| *v)
}

pub const SUMMARY_QUANTILES: [f64; 8] = [0.1, 0.2, 0.4, 0.5, 0.6, 0.8, 0.9, 0.95];

#[derive(Debug, Clone, PartialEq)]
pub struct Summary {
    pub mean_user_throughput_bps: f64,
    pub quantiles: Vec<(f64, f64)>,
    pub unmatched_fraction: f64,
    pub mean_cell_utility: f64,
    pub mean_sat_utility: f64,
    pub broker_messages: u64,
}

impl MetricsArchive {
    /// User-weighted throughput samples.
    pub fn weighted_samples(&self) -> Vec<(f64, f64)> {
        self.samples.iter().map(|s| (s.throughput_bps, s.users as f64)).collect()
    }

    pub fn summary(&self) -> Summary {
        let c = cdf(&self.weighted_samples());
        let (num, den) = self
            .samples
            .iter()
            .fold((0.0, 0.0), |(n, d), s| (n + s.users as f64 * s.throughput_bps, d + s.users as f64));
        let per_frame = |f: fn(&FrameMetrics) -> f64| mean(&self.frames.iter().map(f).collect::<Vec<_>>());
        Summary {
            mean_user_throughput_bps: if den > 0.0 { num / den } else { 0.0 },
            quantiles: SUMMARY_QUANTILES
                .iter()
                .map(|&p| (p, quantile(&c, p).unwrap_or(0.0)))
                .collect(),
            unmatched_fraction: per_frame(|m| m.unmatched_fraction),
            mean_cell_utility: per_frame(|m| m.mean_cell_utility),
            mean_sat_utility: per_frame(|m| m.mean_sat_utility),
            broker_messages: self.frames.iter().map(|m| m.broker_messages).sum(),
        }
    }
}
