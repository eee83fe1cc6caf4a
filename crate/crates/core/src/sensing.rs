//! Pilot-based SNR and rain-attenuation estimation at the anchor nodes.
//!
//! Received pilots are simulated with the noise normalised to unit power, so
//! the pilot amplitude is `sqrt(snr)`. The SNR estimator, its Cramer-Rao
//! bound and the bias-corrected attenuation estimator operate on these
//! samples; per-user rate estimates follow from the estimated SNR.

use std::io::Write;

use num_complex::Complex64;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::channel::{
    path_loss, rain_attenuation, rain_coefficients, rain_path_length, rate_per_user, snr, GroundParams, LinkRecord,
    TxParams,
};
use crate::error::{Error, Result};
use crate::geo::slant_range_m;
use crate::ids::{CellId, SatId};
use crate::orbits::OrbitalShell;
use crate::rng;

#[derive(Debug, Clone, PartialEq)]
pub struct PilotObservation {
    pub sat_id: SatId,
    pub cell_id: CellId,
    /// Known pilot, BPSK.
    pub pilot_symbols: Vec<Complex64>,
    pub received: Vec<Complex64>,
    /// Ground truth, kept for evaluation only.
    pub true_snr_linear: f64,
}

/// Outcome class of one SNR estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimateStatus {
    Ok,
    /// The residual energy vanished (noise-free input); the denominator was
    /// floored at machine precision, giving a very large estimate.
    Saturated,
    /// No received energy at all; the estimate is 0.
    Degenerate,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnrEstimate {
    pub value: f64,
    pub status: EstimateStatus,
}

fn bpsk(bits: &mut u64, left: &mut u32, rng: &mut ChaCha8Rng) -> f64 {
    if *left == 0 {
        *bits = rng.random();
        *left = 64;
    }
    let b = *bits & 1;
    *bits >>= 1;
    *left -= 1;
    if b == 1 {
        1.0
    } else {
        -1.0
    }
}

/// Receive `l_p` BPSK pilots at SNR `true_snr_linear` in unit-power complex
/// Gaussian noise.
pub fn simulate_pilot_rx(true_snr_linear: f64, l_p: u32, rng: &mut ChaCha8Rng) -> PilotObservation {
    let amp = true_snr_linear.max(0.0).sqrt();
    let mut pilot_symbols = Vec::with_capacity(l_p as usize);
    let mut received = Vec::with_capacity(l_p as usize);
    let (mut bits, mut left) = (0u64, 0u32);
    for _ in 0..l_p {
        let m = bpsk(&mut bits, &mut left, rng);
        let z = complex_noise(rng);
        pilot_symbols.push(Complex64::new(m, 0.0));
        received.push(Complex64::new(m * amp, 0.0) + z);
    }
    PilotObservation {
        sat_id: SatId(0),
        cell_id: CellId(0),
        pilot_symbols,
        received,
        true_snr_linear,
    }
}

fn complex_noise(rng: &mut ChaCha8Rng) -> Complex64 {
    let re: f64 = StandardNormal.sample(rng);
    let im: f64 = StandardNormal.sample(rng);
    Complex64::new(re, im) * std::f64::consts::FRAC_1_SQRT_2
}

/// Sufficient statistics of a pilot block: `sum Re{y* m}` and `sum |y|^2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PilotStats {
    pub correlation: f64,
    pub energy: f64,
    pub l_p: u32,
}

impl PilotObservation {
    pub fn stats(&self) -> PilotStats {
        let correlation = self
            .received
            .iter()
            .zip(&self.pilot_symbols)
            .map(|(y, m)| (y.conj() * m).re)
            .sum();
        let energy = self.received.iter().map(|y| y.norm_sqr()).sum();
        PilotStats {
            correlation,
            energy,
            l_p: self.received.len() as u32,
        }
    }
}

/// Same draws as [`simulate_pilot_rx`] in the same order, accumulated on the
/// fly instead of stored.
pub fn simulate_pilot_stats(true_snr_linear: f64, l_p: u32, rng: &mut ChaCha8Rng) -> PilotStats {
    let amp = true_snr_linear.max(0.0).sqrt();
    let (mut bits, mut left) = (0u64, 0u32);
    let (mut correlation, mut energy) = (0.0, 0.0);
    for _ in 0..l_p {
        let m = bpsk(&mut bits, &mut left, rng);
        let y = Complex64::new(m * amp, 0.0) + complex_noise(rng);
        correlation += (y.conj() * m).re;
        energy += y.norm_sqr();
    }
    PilotStats {
        correlation,
        energy,
        l_p,
    }
}

/// Draw the estimator's sufficient statistics directly from their exact
/// joint law instead of simulating samples: the normalised correlation is
/// `N(sqrt(snr), 1/(2 L))` and the residual energy is an independent
/// `Gamma((2L - 1)/2, 1)`.
pub fn draw_pilot_stats_fast(true_snr_linear: f64, l_p: u32, rng: &mut ChaCha8Rng) -> PilotStats {
    let l = l_p as f64;
    let mean = true_snr_linear.max(0.0).sqrt();
    let p = Normal::new(mean, (1.0 / (2.0 * l)).sqrt()).unwrap().sample(rng);
    let resid = Gamma::new((2.0 * l - 1.0) / 2.0, 1.0).unwrap().sample(rng);
    let correlation = p * l;
    PilotStats {
        correlation,
        energy: resid + correlation * correlation / l,
        l_p,
    }
}

/// Maximum-likelihood SNR estimate from a pilot block.
pub fn snr_mle(obs: &PilotObservation) -> SnrEstimate {
    snr_mle_from_stats(obs.stats())
}

pub fn snr_mle_from_stats(s: PilotStats) -> SnrEstimate {
    let l = s.l_p as f64;
    if s.energy <= 0.0 {
        return SnrEstimate {
            value: 0.0,
            status: EstimateStatus::Degenerate,
        };
    }
    let p = s.correlation / l;
    let mut denom = s.energy - s.correlation * s.correlation / l;
    let floor = s.energy * f64::EPSILON * l;
    let mut status = EstimateStatus::Ok;
    if denom <= floor {
        denom = floor;
        status = EstimateStatus::Saturated;
    }
    SnrEstimate {
        value: ((l - 1.5) * p * p / denom).max(0.0),
        status,
    }
}

/// Cramer-Rao lower bound on the variance of an unbiased SNR estimator.
pub fn crlb(snr_linear: f64, l_p: u32) -> f64 {
    (2.0 * snr_linear + snr_linear * snr_linear) / l_p as f64
}

/// Bias-corrected rain attenuation estimate, never below 1.
pub fn attenuation_estimate(snr_hat: f64, snr_norain: f64, l_p: u32) -> f64 {
    let l = l_p as f64;
    (snr_norain / (snr_hat * (1.0 + 1.0 / l) + 2.0 / l)).max(1.0)
}

pub fn estimated_rate(snr_hat: f64, bandwidth_hz: f64, active_users: u32) -> f64 {
    rate_per_user(snr_hat, bandwidth_hz, active_users)
}

/// Model-based estimate used by satellites that do not sense: the clear-sky SNR.
pub fn non_sensing_estimate(link: &LinkRecord) -> f64 {
    link.snr_norain_linear
}

/// Estimate the SNR of one link from `l_p` pilots.
pub fn sense_link(true_snr_linear: f64, l_p: u32, fast_path: bool, rng: &mut ChaCha8Rng) -> SnrEstimate {
    let stats = if fast_path {
        draw_pilot_stats_fast(true_snr_linear, l_p, rng)
    } else {
        simulate_pilot_stats(true_snr_linear, l_p, rng)
    };
    snr_mle_from_stats(stats)
}

/// Per-trial estimates of repeated independent pilot blocks. Trial `t`
/// draws from its own stream keyed by `(seed, t)`.
pub fn monte_carlo_estimates(snr_linear: f64, l_p: u32, trials: u32, seed: u64, fast_path: bool) -> Vec<f64> {
    (0..trials)
        .into_par_iter()
        .map(|t| {
            let mut r = rng::stream(seed, &[rng::tag::NMSE, t as u64]);
            sense_link(snr_linear, l_p, fast_path, &mut r).value
        })
        .collect()
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmseSweepConfig {
    pub rain_mmh: Vec<f64>,
    pub pilot_lengths: Vec<u32>,
    pub trials: u32,
    #[serde(default = "default_elevation")]
    pub elevation_deg: f64,
    #[serde(default)]
    pub fast_path: bool,
}

fn default_elevation() -> f64 {
    30.0
}

impl Default for NmseSweepConfig {
    fn default() -> Self {
        Self {
            rain_mmh: vec![0.0, 2.0, 4.0, 6.0, 8.0, 10.0, 12.0, 14.0],
            pilot_lengths: vec![4, 256, 1024, 4096],
            trials: 10_000,
            elevation_deg: 30.0,
            fast_path: false,
        }
    }
}

/// One point of the estimator-accuracy sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct NmseRow {
    pub rain_mmh: f64,
    pub l_p: u32,
    pub snr_linear: f64,
    pub atten_linear: f64,
    pub nmse_snr: f64,
    /// CRLB divided by the squared true SNR.
    pub crlb_norm: f64,
    pub nmse_att: f64,
    /// Mean and standard error of the per-trial difference of normalised
    /// squared errors (attenuation minus SNR).
    pub paired_diff_mean: f64,
    pub paired_diff_se: f64,
    /// Standard errors of the two NMSE values.
    pub nmse_snr_se: f64,
    pub nmse_att_se: f64,
}

/// Clear-sky SNR of a shell seen at `elevation_deg` from the ground.
pub fn clear_sky_snr(shell: &OrbitalShell, ground: &GroundParams, elevation_deg: f64) -> f64 {
    let d = slant_range_m(shell.altitude_m, elevation_deg);
    let tx = TxParams {
        tx_power_w: shell.tx_power_w,
        antenna_gain_db: shell.antenna_gain_db,
        pointing_loss_db: shell.pointing_loss_db,
        bandwidth_hz: shell.bandwidth_hz,
    };
    snr(&tx, ground, path_loss(d, shell.carrier_hz), 1.0)
}

/// Monte-Carlo accuracy of the SNR and attenuation estimators over a grid of
/// rain intensities and pilot lengths, for one shell at fixed elevation.
pub fn nmse_sweep(
    cfg: &NmseSweepConfig,
    shell: &OrbitalShell,
    ground: &GroundParams,
    seed: u64,
) -> Result<Vec<NmseRow>> {
    if cfg.trials < 2 {
        return Err(Error::InvalidParameter("nmse.trials must be at least 2".into()));
    }
    if let Some(l) = cfg.pilot_lengths.iter().find(|&&l| l < 2) {
        return Err(Error::InvalidParameter(format!("pilot length {l} is below 2")));
    }
    let snr0 = clear_sky_snr(shell, ground, cfg.elevation_deg);
    let coeffs = rain_coefficients(shell.carrier_hz, shell.polarization);
    let path = rain_path_length(cfg.elevation_deg, ground.rain_height_m)?;
    let mut rows = Vec::new();
    for (ri, &rain) in cfg.rain_mmh.iter().enumerate() {
        let a = rain_attenuation(rain, path, coeffs);
        let g = snr0 / a;
        for (li, &l_p) in cfg.pilot_lengths.iter().enumerate() {
            let point_seed = rng::mix(seed, &[ri as u64, li as u64]);
            let est = monte_carlo_estimates(g, l_p, cfg.trials, point_seed, cfg.fast_path);
            let e_snr: Vec<f64> = est.iter().map(|x| ((x - g) / g).powi(2)).collect();
            let e_att: Vec<f64> = est
                .iter()
                .map(|&x| ((attenuation_estimate(x, snr0, l_p) - a) / a).powi(2))
                .collect();
            let diff: Vec<f64> = e_att.iter().zip(&e_snr).map(|(x, y)| x - y).collect();
            let n = cfg.trials as f64;
            let (m_snr, v_snr) = mean_var(&e_snr);
            let (m_att, v_att) = mean_var(&e_att);
            let (m_d, v_d) = mean_var(&diff);
            rows.push(NmseRow {
                rain_mmh: rain,
                l_p,
                snr_linear: g,
                atten_linear: a,
                nmse_snr: m_snr,
                crlb_norm: crlb(g, l_p) / (g * g),
                nmse_att: m_att,
                paired_diff_mean: m_d,
                paired_diff_se: (v_d / n).sqrt(),
                nmse_snr_se: (v_snr / n).sqrt(),
                nmse_att_se: (v_att / n).sqrt(),
            });
        }
    }
    Ok(rows)
}

pub fn write_nmse_csv<W: Write>(w: W, rows: &[NmseRow]) -> Result<()> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["rain_mmh", "L_p", "nmse_snr", "crlb_norm", "nmse_att"])?;
    for r in rows {
        out.write_record([
            r.rain_mmh.to_string(),
            r.l_p.to_string(),
            r.nmse_snr.to_string(),
            r.crlb_norm.to_string(),
            r.nmse_att.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}
