//! CSV archive and run manifest.
//!
//! Every file is written to a temporary file in the target directory and
//! renamed into place, so a crashed run never leaves a half-written CSV
//! behind. All CSVs are byte-identical for identical configuration, seed and
//! version; only the manifest carries wall-clock timestamps.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use chrono::{DateTime, SecondsFormat, Utc};
use tempfile::NamedTempFile;
use toml::Value;

use crate::config::{canonical, config_hash};
use crate::error::Result;
use crate::matching::write_matching_rows;
use crate::ra::{write_allocation_rows, RaMode};
use crate::rain::write_intensity_rows;
use crate::sim::{cdf, MetricsArchive, SimConfig};

pub const TOOL_VERSION: &str = concat!("ntnsim-v", env!("CARGO_PKG_VERSION"));

/// Write `bytes` to `path` through a temporary file and an atomic rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|d| !d.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let mut tmp = NamedTempFile::new_in(dir)?;
    tmp.write_all(bytes)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

fn csv_bytes(header: &[&str], rows: impl FnOnce(&mut csv::Writer<Vec<u8>>) -> Result<()>) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    rows(&mut w)?;
    w.flush()?;
    Ok(w.into_inner().map_err(|e| e.into_error())?)
}

/// Render every CSV of an archive as `(file name, contents)`.
pub fn archive_files(archive: &MetricsArchive, shell_names: &[String]) -> Result<Vec<(String, Vec<u8>)>> {
    let mut files = Vec::new();

    files.push((
        "throughput_samples.csv".into(),
        csv_bytes(&["frame", "cell_id", "sat_id", "shell", "users", "throughput_bps"], |w| {
            for s in &archive.samples {
                w.write_record([
                    s.frame_k.to_string(),
                    s.cell_id.to_string(),
                    s.sat_id.map_or("-1".into(), |x| x.to_string()),
                    s.shell.map_or(String::new(), |i| shell_names[i].clone()),
                    s.users.to_string(),
                    s.throughput_bps.to_string(),
                ])?;
            }
            Ok(())
        })?,
    ));

    files.push((
        "frame_metrics.csv".into(),
        csv_bytes(
            &[
                "frame",
                "estimate_frame",
                "n_t",
                "n_c",
                "n_s",
                "n_fb",
                "visible_sats",
                "served_cells",
                "broker_failures",
                "unmatched_fraction",
                "mean_user_throughput_bps",
                "mean_cell_utility",
                "mean_sat_utility",
                "broker_messages",
                "matching_rounds",
                "ra_objective",
                "mean_rain_mmh",
                "cb_converged",
            ],
            |w| {
                for m in &archive.frames {
                    w.write_record([
                        m.frame_k.to_string(),
                        m.estimate_frame.to_string(),
                        m.layout.n_t.to_string(),
                        m.layout.n_c.to_string(),
                        m.layout.n_s.to_string(),
                        m.layout.n_fb.to_string(),
                        m.visible_sats.to_string(),
                        m.served_cells.to_string(),
                        m.broker_failures.to_string(),
                        m.unmatched_fraction.to_string(),
                        m.mean_user_throughput_bps.to_string(),
                        m.mean_cell_utility.to_string(),
                        m.mean_sat_utility.to_string(),
                        m.broker_messages.to_string(),
                        m.matching_rounds.to_string(),
                        m.ra_objective.to_string(),
                        m.mean_rain_mmh.to_string(),
                        m.cb_converged.map_or(String::new(), |b| b.to_string()),
                    ])?;
                }
                Ok(())
            },
        )?,
    ));

    files.push((
        "cdf.csv".into(),
        csv_bytes(&["throughput_bps", "cdf"], |w| {
            for (v, f) in cdf(&archive.weighted_samples()) {
                w.write_record([v.to_string(), f.to_string()])?;
            }
            Ok(())
        })?,
    ));

    let s = archive.summary();
    files.push((
        "summary.csv".into(),
        csv_bytes(&["metric", "value"], |w| {
            w.write_record(["mean_user_throughput_bps".to_string(), s.mean_user_throughput_bps.to_string()])?;
            for (p, v) in &s.quantiles {
                w.write_record([format!("quantile_{p}"), v.to_string()])?;
            }
            w.write_record(["unmatched_fraction".to_string(), s.unmatched_fraction.to_string()])?;
            w.write_record(["mean_cell_utility".to_string(), s.mean_cell_utility.to_string()])?;
            w.write_record(["mean_sat_utility".to_string(), s.mean_sat_utility.to_string()])?;
            w.write_record(["broker_messages".to_string(), s.broker_messages.to_string()])?;
            Ok(())
        })?,
    ));

    files.push((
        "matching.csv".into(),
        csv_bytes(&["frame", "cell_id", "sat_id"], |w| {
            for r in &archive.matchings {
                write_matching_rows(w, r.decided_frame + 1, &r.matching)?;
            }
            Ok(())
        })?,
    ));

    files.push((
        "allocation.csv".into(),
        csv_bytes(&["frame", "sat_id", "cell_id", "x"], |w| {
            for (k, p) in archive.allocations.iter().enumerate() {
                write_allocation_rows(w, k as u64, p)?;
            }
            Ok(())
        })?,
    ));

    files.push((
        "rain.csv".into(),
        csv_bytes(&["frame", "cell_id", "intensity_mmh"], |w| {
            for (k, r) in archive.rain.iter().enumerate() {
                write_intensity_rows(w, k as u64, r)?;
            }
            Ok(())
        })?,
    ));

    Ok(files)
}

/// Provenance of one run or experiment, written as `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub tool_version: String,
    pub started: DateTime<Utc>,
    pub finished: DateTime<Utc>,
    pub files: Vec<String>,
    /// Extra facts about the run, e.g. labels or the sweep point.
    pub notes: Vec<(String, String)>,
    /// Flattened configuration, `config.<dotted.key>` entries.
    pub config: Vec<(String, String)>,
}

fn flatten(prefix: &str, v: &Value, out: &mut Vec<(String, String)>) {
    match v {
        Value::Table(t) => {
            for (k, v) in t {
                flatten(&format!("{prefix}.{k}"), v, out);
            }
        }
        Value::Array(a) if a.iter().any(|x| x.is_table()) => {
            for (i, v) in a.iter().enumerate() {
                flatten(&format!("{prefix}.{i}"), v, out);
            }
        }
        other => out.push((prefix.to_string(), other.to_string())),
    }
}

impl RunManifest {
    pub fn new(cfg: &SimConfig, started: DateTime<Utc>) -> Self {
        let mut config = Vec::new();
        let table: Value = toml::from_str(&canonical(cfg)).expect("canonical config parses");
        flatten("config", &table, &mut config);
        let mut notes = vec![("sample_weighting".to_string(), "users".to_string())];
        if cfg.ra.mode == RaMode::Cb {
            notes.push(("ra_label".to_string(), "CB-surrogate".to_string()));
        }
        Self {
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            tool_version: TOOL_VERSION.to_string(),
            started,
            finished: started,
            files: Vec::new(),
            notes,
            config,
        }
    }

    pub fn render(&self) -> String {
        let ts = |t: &DateTime<Utc>| t.to_rfc3339_opts(SecondsFormat::Millis, true);
        let mut s = String::new();
        let mut kv = |k: &str, v: &str| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(v);
            s.push('\n');
        };
        kv("config_hash", &self.config_hash);
        kv("seed", &self.seed.to_string());
        kv("tool_version", &self.tool_version);
        kv("started", &ts(&self.started));
        kv("finished", &ts(&self.finished));
        kv("files", &self.files.join(","));
        for (k, v) in &self.notes {
            kv(k, v);
        }
        for (k, v) in &self.config {
            kv(k, v);
        }
        s
    }
}

pub const MANIFEST_FILE: &str = "manifest.txt";

/// Write named files plus the manifest into `dir`.
pub fn write_with_manifest(dir: &Path, files: &[(String, Vec<u8>)], mut manifest: RunManifest) -> Result<RunManifest> {
    fs::create_dir_all(dir)?;
    for (name, bytes) in files {
        write_atomic(&dir.join(name), bytes)?;
    }
    manifest.files = files.iter().map(|(n, _)| n.clone()).collect();
    manifest.finished = Utc::now();
    write_atomic(&dir.join(MANIFEST_FILE), manifest.render().as_bytes())?;
    Ok(manifest)
}

/// Write a simulation archive and its manifest into `dir`.
pub fn write_archive(
    dir: &Path,
    cfg: &SimConfig,
    archive: &MetricsArchive,
    started: DateTime<Utc>,
    notes: &[(String, String)],
) -> Result<RunManifest> {
    let names: Vec<String> = cfg.active_shells().iter().map(|s| s.shell_id.clone()).collect();
    let files = archive_files(archive, &names)?;
    let mut m = RunManifest::new(cfg, started);
    m.notes.extend_from_slice(notes);
    write_with_manifest(dir, &files, m)
}

/// Paths of the CSV files in a run directory, sorted.
pub fn csv_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "csv"))
        .collect();
    out.sort();
    Ok(out)
}
