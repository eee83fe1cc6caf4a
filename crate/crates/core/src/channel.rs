//! Link budget: free-space loss, rain attenuation, SNR and per-user rates.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::cells::CellGrid;
use crate::error::{Error, Result};
use crate::geo::SPEED_OF_LIGHT;
use crate::ids::{CellId, SatId};
use crate::orbits::{cell_edge_distance, visible_cells, Constellation, SatelliteState};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Polarization {
    #[default]
    Horizontal,
    Vertical,
}

/// Specific-attenuation power law `gamma_R = k * R^alpha` (dB/km, R in mm/h).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RainCoefficients {
    pub k: f64,
    pub alpha: f64,
}

// frequency GHz, k_H, k_V, alpha_H, alpha_V
const P838: [(f64, f64, f64, f64, f64); 14] = [
    (1.0, 0.0000387, 0.0000352, 0.912, 0.880),
    (2.0, 0.000154, 0.000138, 0.963, 0.923),
    (4.0, 0.000650, 0.000591, 1.121, 1.075),
    (6.0, 0.00175, 0.00155, 1.308, 1.265),
    (7.0, 0.00301, 0.00265, 1.332, 1.312),
    (8.0, 0.00454, 0.00395, 1.327, 1.310),
    (10.0, 0.0101, 0.00887, 1.276, 1.264),
    (12.0, 0.0188, 0.0168, 1.217, 1.200),
    (15.0, 0.0367, 0.0335, 1.154, 1.128),
    (20.0, 0.0751, 0.0691, 1.099, 1.065),
    (25.0, 0.124, 0.113, 1.061, 1.030),
    (30.0, 0.187, 0.167, 1.021, 1.000),
    (35.0, 0.263, 0.233, 0.979, 0.963),
    (40.0, 0.350, 0.310, 0.939, 0.929),
];

/// ITU-R P.838 coefficients for a carrier. Between tabulated frequencies
/// `log k` and `alpha` are interpolated linearly in `log f`; outside the
/// 1-40 GHz table the nearest entry is used.
pub fn rain_coefficients(carrier_hz: f64, pol: Polarization) -> RainCoefficients {
    let pick = |row: &(f64, f64, f64, f64, f64)| match pol {
        Polarization::Horizontal => (row.1, row.3),
        Polarization::Vertical => (row.2, row.4),
    };
    let f = carrier_hz / 1e9;
    let first = &P838[0];
    let last = &P838[P838.len() - 1];
    if f <= first.0 {
        let (k, alpha) = pick(first);
        return RainCoefficients { k, alpha };
    }
    if f >= last.0 {
        let (k, alpha) = pick(last);
        return RainCoefficients { k, alpha };
    }
    let i = P838.iter().position(|r| r.0 >= f).unwrap();
    if P838[i].0 == f {
        let (k, alpha) = pick(&P838[i]);
        return RainCoefficients { k, alpha };
    }
    let (lo, hi) = (&P838[i - 1], &P838[i]);
    let t = (f.ln() - lo.0.ln()) / (hi.0.ln() - lo.0.ln());
    let ((k0, a0), (k1, a1)) = (pick(lo), pick(hi));
    RainCoefficients {
        k: (k0.ln() + t * (k1.ln() - k0.ln())).exp(),
        alpha: a0 + t * (a1 - a0),
    }
}

pub fn db_to_linear(db: f64) -> f64 {
    10f64.powf(db / 10.0)
}

pub fn linear_to_db(lin: f64) -> f64 {
    10.0 * lin.log10()
}

/// Free-space path loss `(4 pi d f / c)^2`, linear.
pub fn path_loss(distance_m: f64, carrier_hz: f64) -> f64 {
    (4.0 * std::f64::consts::PI * distance_m * carrier_hz / SPEED_OF_LIGHT).powi(2)
}

/// Length of the line of sight inside a rain slab of height `rain_height_m`.
pub fn rain_path_length(elevation_deg: f64, rain_height_m: f64) -> Result<f64> {
    if !(elevation_deg > 0.0) {
        return Err(Error::BelowHorizon { elevation_deg });
    }
    Ok(rain_height_m / elevation_deg.to_radians().sin())
}

/// Rain attenuation as a linear factor (>= 1).
pub fn rain_attenuation(intensity_mmh: f64, rain_path_m: f64, coeffs: RainCoefficients) -> f64 {
    db_to_linear(rain_attenuation_db(intensity_mmh, rain_path_m, coeffs))
}

pub fn rain_attenuation_db(intensity_mmh: f64, rain_path_m: f64, coeffs: RainCoefficients) -> f64 {
    if intensity_mmh <= 0.0 {
        return 0.0;
    }
    coeffs.k * intensity_mmh.powf(coeffs.alpha) * rain_path_m / 1e3
}

/// Ground-segment parameters shared by all links.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GroundParams {
    pub antenna_gain_db: f64,
    pub noise_psd_dbm_hz: f64,
    pub rain_height_m: f64,
}

impl Default for GroundParams {
    fn default() -> Self {
        Self {
            antenna_gain_db: 0.0,
            noise_psd_dbm_hz: -176.31,
            rain_height_m: 4000.0,
        }
    }
}

impl GroundParams {
    /// Noise power over `bandwidth_hz`, watts.
    pub fn noise_power_w(&self, bandwidth_hz: f64) -> f64 {
        db_to_linear(self.noise_psd_dbm_hz - 30.0) * bandwidth_hz
    }
}

/// Transmit side of a link; a subset of the shell parameters.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TxParams {
    pub tx_power_w: f64,
    pub antenna_gain_db: f64,
    pub pointing_loss_db: f64,
    pub bandwidth_hz: f64,
}

/// Linear SNR `P G_s G_gnd / (L A phi sigma^2)`.
pub fn snr(tx: &TxParams, ground: &GroundParams, path_loss_linear: f64, atten_linear: f64) -> f64 {
    let gains = db_to_linear(tx.antenna_gain_db + ground.antenna_gain_db - tx.pointing_loss_db);
    tx.tx_power_w * gains / (path_loss_linear * atten_linear * ground.noise_power_w(tx.bandwidth_hz))
}

/// Per-user rate `(B / M) log2(1 + snr)`, bps.
pub fn rate_per_user(snr_linear: f64, bandwidth_hz: f64, active_users: u32) -> f64 {
    bandwidth_hz / active_users.max(1) as f64 * (1.0 + snr_linear.max(0.0)).log2()
}

/// Average user throughput when the cell gets `x` of the `n_t` OFDMA frames.
pub fn avg_throughput(rate_bps: f64, x: u32, n_t: u32) -> f64 {
    rate_bps * x as f64 / n_t as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinkRecord {
    pub sat_id: SatId,
    pub cell_id: CellId,
    /// Cell-edge distance.
    pub distance_m: f64,
    /// Elevation of the satellite from the cell centre.
    pub elevation_deg: f64,
    pub rain_path_m: f64,
    pub rain_mmh: f64,
    pub path_loss_linear: f64,
    pub atten_linear: f64,
    pub snr_linear: f64,
    /// SNR the same link would have without rain.
    pub snr_norain_linear: f64,
    pub rate_per_user_bps: f64,
}

/// Links of one frame, keyed by (satellite, cell), visible pairs only.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LinkTable {
    pub frame_k: u64,
    pub records: BTreeMap<(SatId, CellId), LinkRecord>,
}

impl LinkTable {
    pub fn get(&self, sat: SatId, cell: CellId) -> Option<&LinkRecord> {
        self.records.get(&(sat, cell))
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one satellite, in cell order.
    pub fn of_sat(&self, sat: SatId) -> impl Iterator<Item = &LinkRecord> {
        self.records
            .range((sat, CellId(0))..=(sat, CellId(u32::MAX)))
            .map(|(_, r)| r)
    }

    /// Satellites with at least one visible cell, ascending.
    pub fn sats(&self) -> Vec<SatId> {
        let mut v: Vec<SatId> = self.records.keys().map(|(s, _)| *s).collect();
        v.dedup();
        v
    }
}

/// Evaluate every visible (satellite, cell) link for frame `frame_k`.
///
/// `rain_mmh` is indexed by cell id.
pub fn build_link_table(
    frame_k: u64,
    constellation: &Constellation,
    sats: &[SatelliteState],
    grid: &CellGrid,
    rain_mmh: &[f64],
    ground: &GroundParams,
) -> LinkTable {
    let mut records = BTreeMap::new();
    for state in sats {
        let shell = &constellation.shells[state.shell_index];
        let coeffs = rain_coefficients(shell.carrier_hz, shell.polarization);
        let tx = TxParams {
            tx_power_w: shell.tx_power_w,
            antenna_gain_db: shell.antenna_gain_db,
            pointing_loss_db: shell.pointing_loss_db,
            bandwidth_hz: shell.bandwidth_hz,
        };
        for cell_id in visible_cells(state, grid, shell.min_elevation_deg) {
            let cell = grid.cell(cell_id);
            let geom = cell_edge_distance(state, cell);
            // Visible cells have positive elevation unless the configured
            // mask is below the horizon; those links are skipped.
            let Ok(rain_path_m) = rain_path_length(geom.elevation_deg, ground.rain_height_m) else {
                continue;
            };
            let rain = rain_mmh.get(cell_id.index()).copied().unwrap_or(0.0);
            let pl = path_loss(geom.edge_distance_m, shell.carrier_hz);
            let atten = rain_attenuation(rain, rain_path_m, coeffs);
            let snr_linear = snr(&tx, ground, pl, atten);
            records.insert(
                (state.sat_id, cell_id),
                LinkRecord {
                    sat_id: state.sat_id,
                    cell_id,
                    distance_m: geom.edge_distance_m,
                    elevation_deg: geom.elevation_deg,
                    rain_path_m,
                    rain_mmh: rain,
                    path_loss_linear: pl,
                    atten_linear: atten,
                    snr_linear,
                    snr_norain_linear: snr(&tx, ground, pl, 1.0),
                    rate_per_user_bps: rate_per_user(snr_linear, shell.bandwidth_hz, cell.active_users),
                },
            );
        }
    }
    LinkTable { frame_k, records }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    const LEO: TxParams = TxParams {
        tx_power_w: 75.0,
        antenna_gain_db: 30.0,
        pointing_loss_db: 0.3,
        bandwidth_hz: 30e6,
    };

    #[test]
    fn unit_loss_distance() {
        let f = 2e9;
        let d = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * f);
        assert!((path_loss(d, f) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn leo_zenith_path_loss() {
        // 20 log10(4 pi d f / c) evaluated term by term.
        let oracle = 20.0 * (4.0 * std::f64::consts::PI).log10() + 20.0 * 570e3f64.log10() + 20.0 * 2e9f64.log10()
            - 20.0 * 299_792_458f64.log10();
        let got = linear_to_db(path_loss(570e3, 2e9));
        assert!((got - oracle).abs() < 1e-9);
        assert!((got - 153.58).abs() < 0.01, "{got}");
    }

    #[test]
    fn doubling_distance_adds_six_db() {
        let a = linear_to_db(path_loss(1e5, 2e10));
        let b = linear_to_db(path_loss(2e5, 2e10));
        assert!((b - a - 20.0 * 2f64.log10()).abs() < 1e-9);
    }

    #[test]
    fn rain_slab_lengths() {
        assert!((rain_path_length(90.0, 4000.0).unwrap() - 4000.0).abs() < 1e-9);
        assert!((rain_path_length(30.0, 4000.0).unwrap() - 8000.0).abs() < 1e-9);
        assert!((rain_path_length(25.0, 4000.0).unwrap() - 9465.0).abs() < 1.0);
        assert!(rain_path_length(0.0, 4000.0).is_err());
        assert!(rain_path_length(-3.0, 4000.0).is_err());
    }

    #[test]
    fn tabulated_coefficients_are_returned_exactly() {
        let h20 = rain_coefficients(20e9, Polarization::Horizontal);
        assert_eq!((h20.k, h20.alpha), (0.0751, 1.099));
        let v20 = rain_coefficients(20e9, Polarization::Vertical);
        assert_eq!((v20.k, v20.alpha), (0.0691, 1.065));
        let h2 = rain_coefficients(2e9, Polarization::Horizontal);
        assert!((h2.k - 0.000154).abs() < 1e-15 && (h2.alpha - 0.963).abs() < 1e-12);
    }

    #[test]
    fn interpolated_coefficients_lie_between_neighbours() {
        let c = rain_coefficients(22e9, Polarization::Horizontal);
        assert!(c.k > 0.0751 && c.k < 0.124);
        assert!(c.alpha < 1.099 && c.alpha > 1.061);
    }

    #[test]
    fn k_band_spot_attenuation() {
        let c = rain_coefficients(20e9, Polarization::Horizontal);
        let oracle = 0.0751 * (1.099 * 8.77f64.ln()).exp() * 8.0;
        let got = rain_attenuation_db(8.77, 8000.0, c);
        assert!((got - oracle).abs() < 1e-12);
        assert!((got - 6.5).abs() < 0.1, "{got}");
        assert_eq!(rain_attenuation(0.0, 8000.0, c), 1.0);
    }

    #[test]
    fn s_band_is_nearly_rain_immune() {
        let c = rain_coefficients(2e9, Polarization::Horizontal);
        assert!(rain_attenuation_db(50.0, 9465.0, c) < 0.1);
    }

    #[test]
    fn leo_zenith_snr_matches_db_budget() {
        let g = GroundParams::default();
        // dBW budget: P + G_s + G_gnd - L - phi - (N0 + 10 log10 B).
        let oracle_db = 10.0 * 75f64.log10() + 30.0 + 0.0 - linear_to_db(path_loss(570e3, 2e9)) - 0.3
            - ((-176.31 - 30.0) + 10.0 * 30e6f64.log10());
        let got = linear_to_db(snr(&LEO, &g, path_loss(570e3, 2e9), 1.0));
        assert!((got - oracle_db).abs() < 1e-9);
        assert!((got - 26.41).abs() < 0.01, "{got}");
    }

    #[test]
    fn unit_composition_gives_unit_snr() {
        let g = GroundParams {
            antenna_gain_db: 0.0,
            noise_psd_dbm_hz: 30.0, // 1 W/Hz
            rain_height_m: 4000.0,
        };
        let tx = TxParams {
            tx_power_w: 1.0,
            antenna_gain_db: 0.0,
            pointing_loss_db: 0.0,
            bandwidth_hz: 1.0,
        };
        assert!((snr(&tx, &g, 1.0, 1.0) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn doubling_attenuation_halves_snr() {
        let g = GroundParams::default();
        let a = snr(&LEO, &g, 1e15, 1.0);
        let b = snr(&LEO, &g, 1e15, 2.0);
        assert!((a / b - 2.0).abs() < 1e-12);
    }

    #[test]
    fn rate_examples() {
        assert_eq!(rate_per_user(0.0, 30e6, 10), 0.0);
        assert!((rate_per_user(1.0, 30e6, 10) - 3e6).abs() < 1e-6);
        assert_eq!(avg_throughput(123.0, 1000, 1000), 123.0);
    }

    proptest! {
        #[test]
        fn db_round_trip(db in -300.0f64..300.0) {
            prop_assert!((linear_to_db(db_to_linear(db)) - db).abs() < 1e-9);
        }

        #[test]
        fn rate_increases_with_snr(g in 0.0f64..1e6, dg in 1e-6f64..1e3) {
            prop_assert!(rate_per_user(g + dg, 30e6, 7) > rate_per_user(g, 30e6, 7));
        }

        #[test]
        fn snr_decreases_with_distance_and_attenuation(d in 1e5f64..3e6, a in 1.0f64..100.0, f in 0.01f64..1.0) {
            let g = GroundParams::default();
            let base = snr(&LEO, &g, path_loss(d, 2e9), a);
            prop_assert!(snr(&LEO, &g, path_loss(d * (1.0 + f), 2e9), a) < base);
            prop_assert!(snr(&LEO, &g, path_loss(d, 2e9), a * (1.0 + f)) < base);
        }

        #[test]
        fn attenuation_monotone(r in 0.1f64..100.0, dr in 0.01f64..10.0, e in 5.0f64..89.0) {
            let c = rain_coefficients(20e9, Polarization::Horizontal);
            let p = rain_path_length(e, 4000.0).unwrap();
            let p_low = rain_path_length(e - 1.0, 4000.0).unwrap();
            prop_assert!(rain_attenuation_db(r + dr, p, c) > rain_attenuation_db(r, p, c));
            prop_assert!(rain_attenuation_db(r, p_low, c) > rain_attenuation_db(r, p, c));
        }
    }
}
