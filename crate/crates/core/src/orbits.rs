//! Multi-shell circular-orbit constellation.
//!
//! Each shell is a Walker-delta pattern: planes equally spaced in right
//! ascension, satellites equally spaced in argument of latitude, and an
//! inter-plane phase step of `F * 360 / T` degrees. Orbits are two-body
//! circular with no perturbations; positions are rotated into the Earth-fixed
//! frame using the sidereal rate, with the inertial and Earth-fixed frames
//! aligned at epoch (frame 0).

use serde::{Deserialize, Serialize};

use crate::cells::{Cell, CellGrid};
use crate::channel::Polarization;
use crate::error::{Error, Result};
use crate::geo::{self, Vec3, EARTH_MU, EARTH_RADIUS_M, EARTH_ROTATION_RAD_S};
use crate::ids::{CellId, SatId};

/// Configuration of one orbital shell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrbitalShell {
    pub shell_id: String,
    pub altitude_m: f64,
    pub inclination_deg: f64,
    pub num_planes: u32,
    pub sats_per_plane: u32,
    /// Declared shell size; checked against `num_planes * sats_per_plane`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub total_satellites: Option<u32>,
    pub carrier_hz: f64,
    pub bandwidth_hz: f64,
    pub tx_power_w: f64,
    pub antenna_gain_db: f64,
    pub beams: u32,
    #[serde(default)]
    pub sensing_enabled: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol_duration_s: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub symbol_bandwidth_hz: Option<f64>,
    pub pointing_loss_db: f64,
    pub min_elevation_deg: f64,
    #[serde(default)]
    pub polarization: Polarization,
    #[serde(default)]
    pub phasing: WalkerPhasing,
}

/// Placement of planes and satellites within a shell.
///
/// With both spans at 360 degrees this is a standard Walker-delta pattern.
/// Smaller spans describe a regional "train" of satellites, which is what the
/// desk-scale scenarios use to keep a small area covered with few satellites.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WalkerPhasing {
    /// Walker phase factor F.
    pub phase_factor: u32,
    pub raan_offset_deg: f64,
    pub arg_latitude_offset_deg: f64,
    pub raan_span_deg: f64,
    pub in_plane_span_deg: f64,
}

impl Default for WalkerPhasing {
    fn default() -> Self {
        Self {
            phase_factor: 0,
            raan_offset_deg: 0.0,
            arg_latitude_offset_deg: 0.0,
            raan_span_deg: 360.0,
            in_plane_span_deg: 360.0,
        }
    }
}

/// Carrier classes used to select sub-constellations.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Band {
    /// Sub-6 GHz (S-band in the reference scenario).
    Sub6,
    /// K-band and above; affected by rain.
    MmWave,
}

impl OrbitalShell {
    pub fn total(&self) -> u32 {
        self.num_planes * self.sats_per_plane
    }

    pub fn band(&self) -> Band {
        if self.carrier_hz < 6e9 {
            Band::Sub6
        } else {
            Band::MmWave
        }
    }

    pub fn orbit_radius_m(&self) -> f64 {
        EARTH_RADIUS_M + self.altitude_m
    }

    /// Angular rate of a circular orbit at this altitude, rad/s.
    pub fn mean_motion(&self) -> f64 {
        (EARTH_MU / self.orbit_radius_m().powi(3)).sqrt()
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |reason: &str| {
            Err(Error::InvalidShell {
                shell: self.shell_id.clone(),
                reason: reason.to_string(),
            })
        };
        if !(self.altitude_m > 0.0) {
            return bad("altitude_m must be positive");
        }
        if !(self.inclination_deg > 0.0 && self.inclination_deg <= 180.0) {
            return bad("inclination_deg must lie in (0, 180]");
        }
        if self.num_planes < 1 || self.sats_per_plane < 1 {
            return bad("num_planes and sats_per_plane must be at least 1");
        }
        if self.beams < 1 {
            return bad("beams must be at least 1");
        }
        if !(self.carrier_hz > 0.0 && self.bandwidth_hz > 0.0 && self.tx_power_w > 0.0) {
            return bad("carrier_hz, bandwidth_hz and tx_power_w must be positive");
        }
        if self.sensing_enabled {
            match (self.symbol_duration_s, self.symbol_bandwidth_hz) {
                (Some(t), Some(b)) if t > 0.0 && b > 0.0 => {}
                _ => return bad("sensing shells need positive symbol_duration_s and symbol_bandwidth_hz"),
            }
        }
        if let Some(declared) = self.total_satellites {
            if declared != self.total() {
                return Err(Error::ShellTotalMismatch {
                    shell: self.shell_id.clone(),
                    declared,
                    planes: self.num_planes,
                    per_plane: self.sats_per_plane,
                });
            }
        }
        Ok(())
    }
}

/// Static description of one satellite: which shell and where it starts.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteSlot {
    pub sat_id: SatId,
    pub shell_index: usize,
    pub plane: u32,
    pub slot_in_plane: u32,
    pub raan_rad: f64,
    pub arg_latitude0_rad: f64,
}

/// Per-frame satellite geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct SatelliteState {
    pub sat_id: SatId,
    pub shell_index: usize,
    pub position_ecef_m: Vec3,
}

#[derive(Debug, Clone)]
pub struct Constellation {
    pub shells: Vec<OrbitalShell>,
    pub satellites: Vec<SatelliteSlot>,
}

/// Lays out every shell. Satellite ids are assigned shell by shell, plane by
/// plane.
pub fn build_constellation(shells: &[OrbitalShell]) -> Result<Constellation> {
    let mut satellites = Vec::new();
    for (shell_index, shell) in shells.iter().enumerate() {
        shell.validate()?;
        let ph = &shell.phasing;
        let total = shell.total() as f64;
        for plane in 0..shell.num_planes {
            let raan = ph.raan_offset_deg + ph.raan_span_deg * plane as f64 / shell.num_planes as f64;
            let plane_phase = ph.phase_factor as f64 * 360.0 * plane as f64 / total;
            for slot in 0..shell.sats_per_plane {
                let u0 = ph.arg_latitude_offset_deg
                    + ph.in_plane_span_deg * slot as f64 / shell.sats_per_plane as f64
                    + plane_phase;
                satellites.push(SatelliteSlot {
                    sat_id: SatId(satellites.len() as u32),
                    shell_index,
                    plane,
                    slot_in_plane: slot,
                    raan_rad: raan.to_radians(),
                    arg_latitude0_rad: u0.to_radians(),
                });
            }
        }
    }
    Ok(Constellation {
        shells: shells.to_vec(),
        satellites,
    })
}

impl Constellation {
    pub fn len(&self) -> usize {
        self.satellites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.satellites.is_empty()
    }

    pub fn shell_of(&self, sat: SatId) -> &OrbitalShell {
        &self.shells[self.satellites[sat.index()].shell_index]
    }

    /// Inertial position `t` seconds after epoch.
    pub fn inertial_position(&self, sat: SatId, t: f64) -> Vec3 {
        let slot = &self.satellites[sat.index()];
        let shell = &self.shells[slot.shell_index];
        let r = shell.orbit_radius_m();
        let u = slot.arg_latitude0_rad + shell.mean_motion() * t;
        let (so, co) = slot.raan_rad.sin_cos();
        let (su, cu) = u.sin_cos();
        let (si, ci) = shell.inclination_deg.to_radians().sin_cos();
        Vec3::new(
            r * (co * cu - so * su * ci),
            r * (so * cu + co * su * ci),
            r * su * si,
        )
    }

    /// Earth-fixed position `t` seconds after epoch.
    pub fn ecef_position(&self, sat: SatId, t: f64) -> Vec3 {
        let p = self.inertial_position(sat, t);
        let (s, c) = (EARTH_ROTATION_RAD_S * t).sin_cos();
        // Rotate by -theta about z.
        Vec3::new(c * p.x + s * p.y, -s * p.x + c * p.y, p.z)
    }

    pub fn states_at(&self, t: f64) -> Vec<SatelliteState> {
        self.satellites
            .iter()
            .map(|slot| SatelliteState {
                sat_id: slot.sat_id,
                shell_index: slot.shell_index,
                position_ecef_m: self.ecef_position(slot.sat_id, t),
            })
            .collect()
    }
}

/// Satellite positions at the start of frame `frame_k`; geometry is held for
/// the whole frame.
pub fn propagate(constellation: &Constellation, frame_k: u64, frame_duration_s: f64) -> Vec<SatelliteState> {
    constellation.states_at(frame_k as f64 * frame_duration_s)
}

/// Cells whose centre sees the satellite at or above `min_elevation_deg`.
pub fn visible_cells(sat: &SatelliteState, grid: &CellGrid, min_elevation_deg: f64) -> Vec<CellId> {
    grid.cells
        .iter()
        .filter(|cell| geo::elevation_deg(&cell.anchor_position_ecef_m, &sat.position_ecef_m) >= min_elevation_deg)
        .map(|cell| cell.cell_id)
        .collect()
}

/// Worst-case geometry of a satellite-cell link.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EdgeGeometry {
    /// Largest distance from the satellite to the cell's corners and centre.
    pub edge_distance_m: f64,
    pub center_distance_m: f64,
    /// Elevation of the satellite seen from the cell centre.
    pub elevation_deg: f64,
}

pub fn cell_edge_distance(sat: &SatelliteState, cell: &Cell) -> EdgeGeometry {
    let p = &sat.position_ecef_m;
    let center_distance_m = (p - cell.anchor_position_ecef_m).norm();
    let edge_distance_m = cell
        .corner_positions_ecef_m
        .iter()
        .map(|c| (p - c).norm())
        .fold(center_distance_m, f64::max);
    EdgeGeometry {
        edge_distance_m,
        center_distance_m,
        elevation_deg: geo::elevation_deg(&cell.anchor_position_ecef_m, p),
    }
}
