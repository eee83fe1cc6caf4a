//! Split of a system frame into communication, sensing and feedback OFDMA
//! frames.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::SPEED_OF_LIGHT;
use crate::orbits::OrbitalShell;

/// `ceil` that ignores floating-point noise just above an integer.
pub fn ceil_tol(x: f64) -> u64 {
    let r = x.round();
    if (x - r).abs() <= 1e-9 * r.abs().max(1.0) {
        r as u64
    } else {
        x.ceil() as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FrameParams {
    /// System frame duration T, seconds.
    pub system_frame_s: f64,
    /// OFDMA frame duration T_F, seconds.
    pub ofdma_frame_s: f64,
    /// Bits per priority-list entry.
    pub tuple_bits: u32,
    /// Uplink feedback rate. Unset means the feedback always fits in one
    /// OFDMA frame.
    pub feedback_rate_bps: Option<f64>,
    /// Keep the largest sensing allocation seen so far instead of
    /// recomputing it every frame.
    pub freeze_sensing_frames: bool,
}

impl Default for FrameParams {
    fn default() -> Self {
        Self {
            system_frame_s: 10.0,
            ofdma_frame_s: 0.01,
            tuple_bits: 96,
            feedback_rate_bps: None,
            freeze_sensing_frames: false,
        }
    }
}

impl FrameParams {
    /// OFDMA frames per system frame, N_T.
    pub fn n_total(&self) -> Result<u32> {
        if !(self.system_frame_s > 0.0 && self.ofdma_frame_s > 0.0) {
            return Err(Error::FrameTiming("frame durations must be positive".into()));
        }
        let ratio = self.system_frame_s / self.ofdma_frame_s;
        let n = ratio.round();
        if (ratio - n).abs() > 1e-9 * n.max(1.0) || n < 1.0 {
            return Err(Error::FrameTiming(format!(
                "system frame {} s is not a whole number of {} s OFDMA frames",
                self.system_frame_s, self.ofdma_frame_s
            )));
        }
        Ok(n as u32)
    }
}

fn sensing_params(shell: &OrbitalShell) -> Result<(f64, f64)> {
    match (shell.sensing_enabled, shell.symbol_duration_s, shell.symbol_bandwidth_hz) {
        (true, Some(t), Some(d)) => Ok((t, d)),
        _ => Err(Error::NotSensingShell {
            shell: shell.shell_id.clone(),
        }),
    }
}

/// Symbol durations needed for one pilot of `l_p` symbols.
pub fn pilot_symbol_durations(l_p: u32, shell: &OrbitalShell) -> Result<u64> {
    let (_, delta) = sensing_params(shell)?;
    Ok(ceil_tol(l_p as f64 * delta / shell.bandwidth_hz))
}

/// Duration of one pilot of `l_p` symbols, seconds.
pub fn pilot_duration(l_p: u32, shell: &OrbitalShell) -> Result<f64> {
    let (t_sym, _) = sensing_params(shell)?;
    Ok(pilot_symbol_durations(l_p, shell)? as f64 * t_sym)
}

/// Time for one satellite to send a pilot to each of its `cells` by beam
/// hopping over `beams` beams, plus one propagation delay over `d_max_m`.
pub fn sensing_time(cells: usize, beams: u32, d_max_m: f64, pilot_duration_s: f64) -> f64 {
    let hops = (cells as u64).div_ceil(beams.max(1) as u64);
    d_max_m / SPEED_OF_LIGHT + hops as f64 * pilot_duration_s
}

/// OFDMA frames reserved for sensing: the slowest sensing satellite decides.
pub fn sensing_frames(sensing_times_s: &[f64], ofdma_frame_s: f64) -> u32 {
    sensing_times_s
        .iter()
        .map(|t| ceil_tol(t / ofdma_frame_s) as u32)
        .max()
        .unwrap_or(0)
}

/// OFDMA frames needed to send a list of `list_len` entries uplink.
pub fn feedback_frames(tuple_bits: u32, list_len: usize, rate_bps: f64, ofdma_frame_s: f64) -> u32 {
    ceil_tol(tuple_bits as f64 * list_len as f64 / (rate_bps * ofdma_frame_s)) as u32
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FrameLayout {
    pub system_frame_s: f64,
    pub ofdma_frame_s: f64,
    pub n_t: u32,
    pub n_c: u32,
    pub n_s: u32,
    pub n_fb: u32,
}

impl FrameLayout {
    pub fn new(params: &FrameParams, n_s: u32, n_fb: u32) -> Result<Self> {
        let n_t = params.n_total()?;
        if n_s as u64 + n_fb as u64 >= n_t as u64 {
            return Err(Error::FrameBudget {
                total: n_t,
                sensing: n_s,
                feedback: n_fb,
            });
        }
        Ok(Self {
            system_frame_s: params.system_frame_s,
            ofdma_frame_s: params.ofdma_frame_s,
            n_t,
            n_c: n_t - n_s - n_fb,
            n_s,
            n_fb,
        })
    }

    /// Layout without sensing overhead.
    pub fn no_overhead(params: &FrameParams) -> Result<Self> {
        Self::new(params, 0, 0)
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;
    use crate::channel::Polarization;
    use crate::orbits::WalkerPhasing;

    pub(crate) fn vleo() -> OrbitalShell {
        OrbitalShell {
            shell_id: "vleo".into(),
            altitude_m: 200e3,
            inclination_deg: 53.0,
            num_planes: 72,
            sats_per_plane: 22,
            total_satellites: Some(1584),
            carrier_hz: 20e9,
            bandwidth_hz: 400e6,
            tx_power_w: 75.0,
            antenna_gain_db: 38.5,
            beams: 19,
            sensing_enabled: true,
            symbol_duration_s: Some(71.35e-6),
            symbol_bandwidth_hz: Some(15e3),
            pointing_loss_db: 0.3,
            min_elevation_deg: 25.0,
            polarization: Polarization::Horizontal,
            phasing: WalkerPhasing::default(),
        }
    }

    #[test]
    fn short_pilot_takes_one_symbol_duration() {
        let s = vleo();
        assert_eq!(pilot_symbol_durations(256, &s).unwrap(), 1);
        assert!((pilot_duration(256, &s).unwrap() - 71.35e-6).abs() < 1e-15);
    }

    #[test]
    fn pilot_one_past_capacity_needs_two() {
        let s = vleo();
        // 400 MHz / 15 kHz = 26666.67 symbols per symbol duration.
        assert_eq!(pilot_symbol_durations(26_666, &s).unwrap(), 1);
        assert_eq!(pilot_symbol_durations(26_667, &s).unwrap(), 2);
    }

    #[test]
    fn very_long_pilot() {
        let s = vleo();
        let n = pilot_symbol_durations(1 << 22, &s).unwrap();
        assert_eq!(n, (4_194_304u64 * 15_000).div_ceil(400_000_000));
        assert_eq!(n, 158);
        assert!((pilot_duration(1 << 22, &s).unwrap() - 158.0 * 71.35e-6).abs() < 1e-12);
    }

    #[test]
    fn non_sensing_shell_is_rejected() {
        let mut s = vleo();
        s.sensing_enabled = false;
        assert!(matches!(pilot_duration(256, &s), Err(Error::NotSensingShell { .. })));
    }

    #[test]
    fn vleo_footprint_sensing_fits_one_frame() {
        let t = sensing_time(194, 19, 450e3, 71.35e-6);
        let oracle = 450e3 / 299_792_458.0 + 11.0 * 71.35e-6;
        assert!((t - oracle).abs() < 1e-15);
        assert!((t - 2.286e-3).abs() < 1e-5);
        assert_eq!(sensing_frames(&[t], 0.01), 1);
    }

    #[test]
    fn sensing_time_edge_cases() {
        assert_eq!(sensing_time(0, 19, 300e3, 1e-4), 300e3 / SPEED_OF_LIGHT);
        assert_eq!(sensing_frames(&[sensing_time(0, 19, 300e3, 1e-4)], 0.01), 1);
        assert_eq!(sensing_frames(&[], 0.01), 0);
        // Cells within the beam count: one hop regardless of extra beams.
        assert_eq!(sensing_time(5, 5, 0.0, 1.0), sensing_time(5, 10, 0.0, 1.0));
    }

    #[test]
    fn feedback_examples() {
        assert_eq!(feedback_frames(64, 0, 640e3, 0.01), 0);
        assert_eq!(feedback_frames(64, 100, 640e3, 0.01), 1);
        assert_eq!(feedback_frames(64, 100, 320e3, 0.01), 2);
        assert_eq!(feedback_frames(64, 150, 320e3, 0.01), 3);
    }

    #[test]
    fn default_frame_has_1000_ofdma_frames() {
        assert_eq!(FrameParams::default().n_total().unwrap(), 1000);
        let bad = FrameParams {
            ofdma_frame_s: 0.003,
            ..FrameParams::default()
        };
        assert!(bad.n_total().is_err());
    }

    #[test]
    fn overhead_beyond_budget_is_an_error() {
        let p = FrameParams::default();
        assert!(matches!(FrameLayout::new(&p, 999, 1), Err(Error::FrameBudget { .. })));
        let l = FrameLayout::no_overhead(&p).unwrap();
        assert_eq!((l.n_c, l.n_s, l.n_fb), (1000, 0, 0));
    }

    proptest! {
        #[test]
        fn budget_identity(n_s in 0u32..600, n_fb in 0u32..600) {
            let p = FrameParams::default();
            match FrameLayout::new(&p, n_s, n_fb) {
                Ok(l) => {
                    prop_assert_eq!(l.n_t, l.n_c + l.n_s + l.n_fb);
                    prop_assert!(l.n_c >= 1);
                    prop_assert!((l.n_t as f64 * l.ofdma_frame_s - l.system_frame_s).abs() < 1e-9);
                }
                Err(_) => prop_assert!(n_s + n_fb >= 1000),
            }
        }

        #[test]
        fn halving_feedback_rate_doubles_frames(len in 1usize..10_000, rate in 1e3f64..1e7) {
            let a = feedback_frames(96, len, rate, 0.01);
            let b = feedback_frames(96, len, rate / 2.0, 0.01);
            prop_assert!(b >= 2 * a - 1 && b <= 2 * a);
        }
    }
}
