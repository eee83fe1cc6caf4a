//! Experiment drivers shared by the command line and the tests: attenuation
//! curves, estimator accuracy, single runs and parameter sweeps.

use std::path::Path;

use chrono::Utc;

use crate::channel::{rain_attenuation_db, rain_coefficients, rain_path_length, GroundParams};
use crate::error::{Error, Result};
use crate::output::{write_archive, write_with_manifest, RunManifest};
use crate::ra::RaMode;
use crate::sensing::{nmse_sweep, write_nmse_csv, NmseRow};
use crate::sim::{run, AttenuationConfig, BandMode, MetricsArchive, SimConfig, Summary, SUMMARY_QUANTILES};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttenuationRow {
    pub rain_mmh: f64,
    pub elevation_deg: f64,
    pub atten_db: f64,
}

/// Rain attenuation over the configured intensity and elevation grid.
pub fn attenuation_table(cfg: &AttenuationConfig, ground: &GroundParams) -> Result<Vec<AttenuationRow>> {
    let coeffs = rain_coefficients(cfg.carrier_hz, cfg.polarization);
    let mut rows = Vec::new();
    for &rain in &cfg.rain_mmh {
        for &elev in &cfg.elevation_deg {
            let path = rain_path_length(elev, ground.rain_height_m)?;
            rows.push(AttenuationRow {
                rain_mmh: rain,
                elevation_deg: elev,
                atten_db: rain_attenuation_db(rain, path, coeffs),
            });
        }
    }
    Ok(rows)
}

pub fn attenuation_csv(rows: &[AttenuationRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["rain_mmh", "elevation_deg", "atten_db"])?;
    for r in rows {
        w.write_record([r.rain_mmh.to_string(), r.elevation_deg.to_string(), r.atten_db.to_string()])?;
    }
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

pub fn write_attenuation(dir: &Path, cfg: &SimConfig) -> Result<RunManifest> {
    let started = Utc::now();
    let rows = attenuation_table(&cfg.attenuation, &cfg.ground)?;
    let files = vec![("attenuation.csv".to_string(), attenuation_csv(&rows)?)];
    write_with_manifest(dir, &files, RunManifest::new(cfg, started))
}

/// Estimator accuracy for the first sensing shell of the configuration.
pub fn nmse(cfg: &SimConfig) -> Result<Vec<NmseRow>> {
    let shell = cfg
        .constellation
        .shells
        .iter()
        .find(|s| s.sensing_enabled)
        .ok_or_else(|| Error::InvalidParameter("no sensing-enabled shell configured".into()))?;
    nmse_sweep(&cfg.nmse, shell, &cfg.ground, cfg.seed)
}

pub fn write_nmse(dir: &Path, cfg: &SimConfig) -> Result<RunManifest> {
    let started = Utc::now();
    let rows = nmse(cfg)?;
    let mut buf = Vec::new();
    write_nmse_csv(&mut buf, &rows)?;
    write_with_manifest(dir, &[("nmse.csv".to_string(), buf)], RunManifest::new(cfg, started))
}

/// Run the simulation and write its archive.
pub fn run_to_dir(dir: &Path, cfg: &SimConfig) -> Result<(MetricsArchive, RunManifest)> {
    let started = Utc::now();
    let archive = run(cfg)?;
    let manifest = write_archive(dir, cfg, &archive, started, &[])?;
    Ok((archive, manifest))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Quota,
    Pilot,
    BandMode,
    RaMode,
}

impl SweepAxis {
    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "quota" => Some(Self::Quota),
            "pilot" => Some(Self::Pilot),
            "band_mode" => Some(Self::BandMode),
            "ra_mode" => Some(Self::RaMode),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Quota => "quota",
            Self::Pilot => "pilot",
            Self::BandMode => "band_mode",
            Self::RaMode => "ra_mode",
        }
    }
}

pub const QUOTA_POINTS: [u32; 5] = [10, 25, 50, 100, 1000];
pub const PILOT_POINTS: [u32; 4] = [4, 256, 1024, 4096];
pub const BAND_POINTS: [BandMode; 3] = [BandMode::SOnly, BandMode::KOnly, BandMode::Multi];
pub const RA_POINTS: [RaMode; 4] = [RaMode::Proposed, RaMode::Cb, RaMode::NoSensing, RaMode::FullCsi];

/// Nominal quota scaled to the scenario, at least one cell.
pub fn scaled_quota(nominal: u32, scale: f64) -> u32 {
    ((nominal as f64 * scale).round() as u32).max(1)
}

/// One sweep point: its label, the configuration and the override that
/// produced it.
pub fn sweep_points(cfg: &SimConfig, axis: SweepAxis) -> Vec<(String, SimConfig, String)> {
    let mut out = Vec::new();
    match axis {
        SweepAxis::Quota => {
            for q in QUOTA_POINTS {
                let mut c = cfg.clone();
                c.matching.quota = scaled_quota(q, cfg.sweep.quota_scale);
                out.push((q.to_string(), c.clone(), format!("matching.quota={}", c.matching.quota)));
            }
        }
        SweepAxis::Pilot => {
            for l in PILOT_POINTS {
                let mut c = cfg.clone();
                c.sensing.pilot_length = l;
                out.push((l.to_string(), c, format!("sensing.pilot_length={l}")));
            }
        }
        SweepAxis::BandMode => {
            for b in BAND_POINTS {
                let mut c = cfg.clone();
                c.band_mode = b;
                out.push((b.name().into(), c, format!("band_mode={}", b.name())));
            }
        }
        SweepAxis::RaMode => {
            for m in RA_POINTS {
                let mut c = cfg.clone();
                c.ra.mode = m;
                out.push((m.name().into(), c, format!("ra.mode={}", m.name())));
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub axis: SweepAxis,
    pub points: Vec<(String, Summary)>,
}

/// Run every point of `axis` into `root/<axis>/<point>/` and write the
/// joined comparison files into `root/<axis>/`.
pub fn sweep(root: &Path, cfg: &SimConfig, axis: SweepAxis) -> Result<SweepResult> {
    let base = root.join(axis.name());
    let started = Utc::now();
    let mut points = Vec::new();
    let mut archives = Vec::new();
    for (label, c, set) in sweep_points(cfg, axis) {
        log::info!("sweep {} = {label}", axis.name());
        let t0 = Utc::now();
        let archive = run(&c)?;
        write_archive(&base.join(&label), &c, &archive, t0, &[("sweep_point".into(), set)])?;
        points.push((label.clone(), archive.summary()));
        archives.push((label, archive));
    }

    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec![
        axis.name().to_string(),
        "mean_user_throughput_bps".into(),
        "unmatched_fraction".into(),
        "mean_cell_utility".into(),
        "mean_sat_utility".into(),
        "broker_messages".into(),
    ];
    header.extend(SUMMARY_QUANTILES.iter().map(|p| format!("quantile_{p}")));
    w.write_record(&header)?;
    for (label, s) in &points {
        let mut row = vec![
            label.clone(),
            s.mean_user_throughput_bps.to_string(),
            s.unmatched_fraction.to_string(),
            s.mean_cell_utility.to_string(),
            s.mean_sat_utility.to_string(),
            s.broker_messages.to_string(),
        ];
        row.extend(s.quantiles.iter().map(|(_, v)| v.to_string()));
        w.write_record(&row)?;
    }
    let comparison = w.into_inner().map_err(|e| e.into_error())?;

    // Per-frame view with one column per point and metric.
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["frame".to_string()];
    for (label, _) in &archives {
        header.push(format!("unmatched_fraction_{label}"));
        header.push(format!("mean_user_throughput_bps_{label}"));
    }
    w.write_record(&header)?;
    let n = archives.iter().map(|(_, a)| a.frames.len()).min().unwrap_or(0);
    for k in 0..n {
        let mut row = vec![k.to_string()];
        for (_, a) in &archives {
            row.push(a.frames[k].unmatched_fraction.to_string());
            row.push(a.frames[k].mean_user_throughput_bps.to_string());
        }
        w.write_record(&row)?;
    }
    let joined = w.into_inner().map_err(|e| e.into_error())?;

    let mut manifest = RunManifest::new(cfg, started);
    manifest.notes.push(("sweep_axis".into(), axis.name().into()));
    write_with_manifest(
        &base,
        &[("comparison.csv".into(), comparison), ("joined_frames.csv".into(), joined)],
        manifest,
    )?;
    Ok(SweepResult { axis, points })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channel::{db_to_linear, Polarization};

    #[test]
    fn attenuation_table_shape() {
        let cfg = AttenuationConfig::default();
        let rows = attenuation_table(&cfg, &GroundParams::default()).unwrap();
        assert_eq!(rows.len(), cfg.rain_mmh.len() * cfg.elevation_deg.len());
        for r in rows.iter().filter(|r| r.rain_mmh == 0.0) {
            assert_eq!(r.atten_db, 0.0);
        }
        let n_e = cfg.elevation_deg.len();
        for i in 0..rows.len() {
            if i % n_e + 1 < n_e {
                assert!(rows[i].atten_db >= rows[i + 1].atten_db);
            }
            if i + n_e < rows.len() {
                assert!(rows[i + n_e].atten_db > rows[i].atten_db);
            }
        }
    }

    #[test]
    fn spot_value_by_hand() {
        let cfg = AttenuationConfig {
            carrier_hz: 20e9,
            polarization: Polarization::Horizontal,
            rain_mmh: vec![8.77],
            elevation_deg: vec![30.0],
        };
        let r = attenuation_table(&cfg, &GroundParams::default()).unwrap()[0];
        // k = 0.0751, alpha = 1.099, slant path 4 km / sin 30 = 8 km.
        let oracle = 0.0751 * 8.77f64.powf(1.099) * 8.0;
        assert!((r.atten_db - oracle).abs() < 1e-9 * oracle);
        assert!(db_to_linear(r.atten_db) > 1.0);
    }

    #[test]
    fn quota_scaling() {
        assert_eq!(scaled_quota(100, 0.2), 20);
        assert_eq!(scaled_quota(10, 0.01), 1);
    }
}
