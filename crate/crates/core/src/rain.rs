//! Clustered rain over the cell grid.
//!
//! Storms are static disks placed by a homogeneous Poisson point process over
//! the area of interest. Each storm alternates between raining and dormant
//! following a two-state Markov chain whose geometric holding times have the
//! configured mean episode length and mean gap. A cell's intensity is the
//! largest peak intensity among the raining storms that cover its centre.

use std::io::Write;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Poisson};
use serde::{Deserialize, Serialize};

use crate::cells::{BoundingBox, CellGrid};
use crate::error::{Error, Result};
use crate::geo::LatLon;
use crate::rng;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RainParams {
    /// Storm centres per km^2.
    pub storm_density_per_km2: f64,
    pub mean_diameter_km: f64,
    pub mean_intensity_mmh: f64,
    /// Mean duration of a rain episode, hours.
    pub mean_episode_h: f64,
    /// Mean dry period between episodes, hours.
    pub mean_gap_h: f64,
}

impl Default for RainParams {
    fn default() -> Self {
        Self {
            storm_density_per_km2: 8.4e-4,
            mean_diameter_km: 50.0,
            mean_intensity_mmh: 8.77,
            mean_episode_h: 1.886,
            mean_gap_h: 5.376,
        }
    }
}

impl RainParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.storm_density_per_km2 >= 0.0) {
            return Err(Error::InvalidParameter("rain.storm_density_per_km2 must be >= 0".into()));
        }
        if !(self.mean_diameter_km > 0.0 && self.mean_intensity_mmh >= 0.0) {
            return Err(Error::InvalidParameter(
                "rain.mean_diameter_km must be > 0 and rain.mean_intensity_mmh >= 0".into(),
            ));
        }
        if !(self.mean_episode_h > 0.0 && self.mean_gap_h > 0.0) {
            return Err(Error::InvalidParameter("rain episode and gap means must be positive".into()));
        }
        Ok(())
    }

    /// Long-run probability that a storm is raining.
    pub fn stationary_active(&self) -> f64 {
        if self.mean_episode_h.is_infinite() {
            return 1.0;
        }
        self.mean_episode_h / (self.mean_episode_h + self.mean_gap_h)
    }

    /// Per-frame probability that a raining storm stops.
    pub fn p_stop(&self, frame_duration_s: f64) -> f64 {
        (frame_duration_s / (self.mean_episode_h * 3600.0)).min(1.0)
    }

    /// Per-frame probability that a dormant storm starts raining.
    pub fn p_start(&self, frame_duration_s: f64) -> f64 {
        (frame_duration_s / (self.mean_gap_h * 3600.0)).min(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StormState {
    Active,
    Dormant,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RainStorm {
    pub center_latlon: LatLon,
    pub diameter_km: f64,
    pub peak_intensity_mmh: f64,
    pub state: StormState,
    /// Time spent in the current state.
    pub state_timer_s: f64,
}

impl RainStorm {
    pub fn covers(&self, p: &LatLon) -> bool {
        self.center_latlon.great_circle_m(p) <= 0.5 * self.diameter_km * 1e3
    }
}

/// Anything that can supply per-cell rain intensities frame by frame.
pub trait RainProcess {
    /// Intensity per cell, mm/h, indexed by cell id.
    fn intensities(&self) -> &[f64];
    /// Advance by one frame.
    fn advance(&mut self, grid: &CellGrid, frame_duration_s: f64);
}

#[derive(Debug, Clone)]
pub struct RainField {
    pub storms: Vec<RainStorm>,
    pub per_cell_intensity: Vec<f64>,
    pub params: RainParams,
    /// Storm index covering each cell centre, precomputed since storms do not move.
    coverage: Vec<Vec<usize>>,
    rng: ChaCha8Rng,
}

impl RainField {
    /// Field with the given storms; `seed` drives their state transitions.
    pub fn from_storms(storms: Vec<RainStorm>, params: RainParams, grid: &CellGrid, seed: u64) -> Self {
        let coverage = grid
            .cells
            .iter()
            .map(|c| {
                storms
                    .iter()
                    .enumerate()
                    .filter(|(_, s)| s.covers(&c.center_latlon))
                    .map(|(i, _)| i)
                    .collect()
            })
            .collect();
        let mut f = Self {
            storms,
            per_cell_intensity: vec![0.0; grid.len()],
            params,
            coverage,
            rng: rng::stream(seed, &[rng::tag::RAIN, 1]),
        };
        f.recompute();
        f
    }

    fn recompute(&mut self) {
        for (out, cover) in self.per_cell_intensity.iter_mut().zip(&self.coverage) {
            *out = cover
                .iter()
                .map(|&i| &self.storms[i])
                .filter(|s| s.state == StormState::Active)
                .map(|s| s.peak_intensity_mmh)
                .fold(0.0, f64::max);
        }
    }

    pub fn active_storms(&self) -> usize {
        self.storms.iter().filter(|s| s.state == StormState::Active).count()
    }
}

impl RainProcess for RainField {
    fn intensities(&self) -> &[f64] {
        &self.per_cell_intensity
    }

    fn advance(&mut self, _grid: &CellGrid, frame_duration_s: f64) {
        let p_stop = self.params.p_stop(frame_duration_s);
        let p_start = self.params.p_start(frame_duration_s);
        for s in &mut self.storms {
            let p = match s.state {
                StormState::Active => p_stop,
                StormState::Dormant => p_start,
            };
            if self.rng.random::<f64>() < p {
                s.state = match s.state {
                    StormState::Active => StormState::Dormant,
                    StormState::Dormant => StormState::Active,
                };
                s.state_timer_s = 0.0;
            } else {
                s.state_timer_s += frame_duration_s;
            }
        }
        self.recompute();
    }
}

/// Draw storms over `bbox` and evaluate the initial field on `grid`.
pub fn init_rain(bbox: &BoundingBox, grid: &CellGrid, params: &RainParams, seed: u64) -> Result<RainField> {
    params.validate()?;
    let mut rng = rng::stream(seed, &[rng::tag::RAIN, 0]);
    let storms = draw_storms(bbox, params, &mut rng);
    Ok(RainField::from_storms(storms, params.clone(), grid, seed))
}

/// Storm count for the box (Poisson) and their positions, sizes and states.
pub fn draw_storms(bbox: &BoundingBox, params: &RainParams, rng: &mut ChaCha8Rng) -> Vec<RainStorm> {
    let mean = params.storm_density_per_km2 * bbox.area_m2() / 1e6;
    let n = if mean > 0.0 {
        Poisson::new(mean).unwrap().sample(rng) as usize
    } else {
        0
    };
    let diam = Exp::new(1.0 / params.mean_diameter_km).unwrap();
    let intensity = (params.mean_intensity_mmh > 0.0).then(|| Exp::new(1.0 / params.mean_intensity_mmh).unwrap());
    let (s0, s1) = (bbox.sw.lat_deg.to_radians().sin(), bbox.ne.lat_deg.to_radians().sin());
    let p_active = params.stationary_active();
    (0..n)
        .map(|_| {
            // Uniform over the spherical patch: uniform in sin(lat) and lon.
            let lat = (s0 + rng.random::<f64>() * (s1 - s0)).asin().to_degrees();
            let lon = bbox.sw.lon_deg + rng.random::<f64>() * (bbox.ne.lon_deg - bbox.sw.lon_deg);
            RainStorm {
                center_latlon: LatLon::new(lat, lon),
                diameter_km: diam.sample(rng),
                peak_intensity_mmh: intensity.map_or(0.0, |d| d.sample(rng)),
                state: if rng.random::<f64>() < p_active {
                    StormState::Active
                } else {
                    StormState::Dormant
                },
                state_timer_s: 0.0,
            }
        })
        .collect()
}

/// Advance a field by one frame.
pub fn step_rain(mut field: RainField, grid: &CellGrid, frame_duration_s: f64) -> RainField {
    field.advance(grid, frame_duration_s);
    field
}

/// Append one frame of `frame,cell_id,intensity_mmh` rows.
pub fn write_intensity_rows<W: Write>(w: &mut csv::Writer<W>, frame: u64, intensities: &[f64]) -> Result<()> {
    for (cell, v) in intensities.iter().enumerate() {
        w.write_record([frame.to_string(), cell.to_string(), v.to_string()])?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cells::{GridResolution, PopulationSource};

    fn grid(bbox: BoundingBox, rows: u32, cols: u32) -> CellGrid {
        CellGrid::build(bbox, GridResolution { rows, cols }, &PopulationSource::Constant { population: 1000 }, 0.001)
            .unwrap()
    }

    fn bbox() -> BoundingBox {
        BoundingBox::new(LatLon::new(40.0, 0.0), LatLon::new(45.0, 6.0)).unwrap()
    }

    #[test]
    fn no_storms_means_dry() {
        let b = bbox();
        let g = grid(b, 5, 6);
        let params = RainParams {
            storm_density_per_km2: 0.0,
            ..RainParams::default()
        };
        let mut f = init_rain(&b, &g, &params, 3).unwrap();
        assert!(f.storms.is_empty());
        for _ in 0..10 {
            f = step_rain(f, &g, 10.0);
            assert!(f.per_cell_intensity.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn stationary_probability() {
        assert!((RainParams::default().stationary_active() - 0.2598).abs() < 1e-4);
    }

    #[test]
    fn permanent_storm_covers_only_its_cell() {
        let b = bbox();
        let g = grid(b, 5, 6);
        let target = &g.cells[7];
        let params = RainParams {
            mean_episode_h: f64::INFINITY,
            ..RainParams::default()
        };
        let storm = RainStorm {
            center_latlon: target.center_latlon,
            diameter_km: 20.0,
            peak_intensity_mmh: 8.77,
            state: StormState::Active,
            state_timer_s: 0.0,
        };
        let mut f = RainField::from_storms(vec![storm], params, &g, 1);
        for _ in 0..100 {
            f = step_rain(f, &g, 10.0);
            for c in &g.cells {
                let want = if c.cell_id == target.cell_id { 8.77 } else { 0.0 };
                assert_eq!(f.per_cell_intensity[c.cell_id.index()], want);
            }
        }
    }

    #[test]
    fn overlapping_storms_take_the_max() {
        let b = bbox();
        let g = grid(b, 5, 6);
        let c = g.cells[12].center_latlon;
        let mk = |v| RainStorm {
            center_latlon: c,
            diameter_km: 30.0,
            peak_intensity_mmh: v,
            state: StormState::Active,
            state_timer_s: 0.0,
        };
        let f = RainField::from_storms(vec![mk(3.0), mk(11.0), mk(5.0)], RainParams::default(), &g, 1);
        assert_eq!(f.per_cell_intensity[12], 11.0);
    }

    #[test]
    fn storm_count_is_poisson_with_area_mean() {
        // 1000 km x 1000 km at the equator is close to 9 x 9 degrees.
        let side_deg = 1000.0 / (crate::geo::EARTH_RADIUS_M / 1e3 * std::f64::consts::PI / 180.0);
        let b = BoundingBox::new(LatLon::new(-side_deg / 2.0, 0.0), LatLon::new(side_deg / 2.0, side_deg)).unwrap();
        let params = RainParams::default();
        let mean = params.storm_density_per_km2 * b.area_m2() / 1e6;
        assert!((mean - 840.0).abs() < 5.0, "{mean}");
        let trials = 400;
        let counts: Vec<f64> = (0..trials)
            .map(|t| draw_storms(&b, &params, &mut rng::stream(t, &[99])).len() as f64)
            .collect();
        let m = counts.iter().sum::<f64>() / trials as f64;
        let var = counts.iter().map(|c| (c - m).powi(2)).sum::<f64>() / (trials - 1) as f64;
        let se = (mean / trials as f64).sqrt();
        assert!((m - mean).abs() < 3.0 * se, "mean {m} vs {mean}");
        // Poisson: variance equals mean.
        assert!((var / mean - 1.0).abs() < 0.25, "var {var}");
    }

    #[test]
    fn long_run_active_fraction() {
        let b = bbox();
        let g = grid(b, 1, 1);
        let params = RainParams::default();
        let storms: Vec<RainStorm> = (0..100)
            .map(|i| RainStorm {
                center_latlon: LatLon::new(0.0, i as f64),
                diameter_km: 1.0,
                peak_intensity_mmh: 1.0,
                state: if i % 4 == 0 { StormState::Active } else { StormState::Dormant },
                state_timer_s: 0.0,
            })
            .collect();
        let mut f = RainField::from_storms(storms, params.clone(), &g, 11);
        let frames = 100_000;
        let mut active = 0usize;
        for _ in 0..frames {
            f.advance(&g, 10.0);
            active += f.active_storms();
        }
        let frac = active as f64 / (frames * 100) as f64;
        let pi = params.stationary_active();
        // Lag-1 autocorrelation of each storm's indicator is 1 - p_start - p_stop.
        let lam = 1.0 - params.p_start(10.0) - params.p_stop(10.0);
        let sigma = (pi * (1.0 - pi) * (1.0 + lam) / (1.0 - lam) / (frames * 100) as f64).sqrt();
        assert!((frac - pi).abs() < 3.0 * sigma + 0.005, "{frac} vs {pi}");
    }

    #[test]
    fn same_seed_same_trajectory() {
        let b = bbox();
        let g = grid(b, 8, 8);
        let params = RainParams {
            storm_density_per_km2: 5e-4,
            ..RainParams::default()
        };
        let run = |seed| {
            let mut f = init_rain(&b, &g, &params, seed).unwrap();
            let mut out = Vec::new();
            for _ in 0..50 {
                f = step_rain(f, &g, 60.0);
                out.extend_from_slice(&f.per_cell_intensity);
            }
            out
        };
        assert_eq!(run(5), run(5));
        assert_ne!(run(5), run(6));
    }

    #[test]
    fn nearby_cells_are_more_correlated_than_distant_ones() {
        // Probe points 10 km apart and 300 km apart (> 3 mean diameters).
        let b = BoundingBox::new(LatLon::new(40.0, 0.0), LatLon::new(50.0, 14.0)).unwrap();
        let a = LatLon::new(45.0, 7.0);
        let near = LatLon::new(45.09, 7.0);
        let far = LatLon::new(47.7, 7.0);
        let params = RainParams {
            mean_episode_h: f64::INFINITY,
            storm_density_per_km2: 2e-4,
            ..RainParams::default()
        };
        let (mut xa, mut xn, mut xf) = (Vec::new(), Vec::new(), Vec::new());
        for t in 0..3000 {
            let storms = draw_storms(&b, &params, &mut rng::stream(t, &[5]));
            let wet = |p: &LatLon| storms.iter().any(|s| s.covers(p)) as u8 as f64;
            xa.push(wet(&a));
            xn.push(wet(&near));
            xf.push(wet(&far));
        }
        let corr = |x: &[f64], y: &[f64]| {
            let n = x.len() as f64;
            let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
            let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
            let vx: f64 = x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n;
            let vy: f64 = y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n;
            cov / (vx * vy).sqrt()
        };
        let (cn, cf) = (corr(&xa, &xn), corr(&xa, &xf));
        assert!(cn > 0.5 && cn > cf + 0.3, "near {cn} far {cf}");
    }
}
