//! Quasi-Earth-fixed cell grid over a latitude/longitude box.
//!
//! Cells form a uniform lat/lon grid. Each populated cell hosts one anchor
//! node at its centre on the Earth surface; cells with zero population are
//! left out of the grid entirely.

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geo::{patch_area_m2, LatLon, Vec3};
use crate::ids::CellId;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoundingBox {
    pub sw: LatLon,
    pub ne: LatLon,
}

impl BoundingBox {
    pub fn new(sw: LatLon, ne: LatLon) -> Result<Self> {
        let b = Self { sw, ne };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.sw.lat_deg < self.ne.lat_deg && self.sw.lon_deg < self.ne.lon_deg) {
            return Err(Error::InvalidGrid("south-west corner must lie south-west of the north-east corner".into()));
        }
        if self.sw.lat_deg < -90.0 || self.ne.lat_deg > 90.0 {
            return Err(Error::InvalidGrid("latitudes must lie within [-90, 90]".into()));
        }
        Ok(())
    }

    pub fn area_m2(&self) -> f64 {
        patch_area_m2(self.sw.lat_deg, self.ne.lat_deg, self.sw.lon_deg, self.ne.lon_deg)
    }

    pub fn contains(&self, p: &LatLon) -> bool {
        p.lat_deg >= self.sw.lat_deg
            && p.lat_deg <= self.ne.lat_deg
            && p.lon_deg >= self.sw.lon_deg
            && p.lon_deg <= self.ne.lon_deg
    }
}

/// Number of cell rows (latitude) and columns (longitude).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GridResolution {
    pub rows: u32,
    pub cols: u32,
}

/// Where per-cell populations come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum PopulationSource {
    /// Log-normal populations with the given median and log-space sigma.
    Synthetic { median: f64, sigma: f64, seed: u64 },
    /// `cell_row,cell_col,population`, one row per grid position.
    Csv { path: PathBuf },
    /// Every cell gets the same population.
    Constant { population: u64 },
}

impl Default for PopulationSource {
    fn default() -> Self {
        PopulationSource::Synthetic {
            median: 5e4,
            sigma: 1.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub cell_id: CellId,
    pub row: u32,
    pub col: u32,
    pub center_latlon: LatLon,
    /// South-west, south-east, north-east, north-west.
    pub corner_latlons: [LatLon; 4],
    pub population: u64,
    pub active_fraction: f64,
    pub active_users: u32,
    pub anchor_position_ecef_m: Vec3,
    pub corner_positions_ecef_m: [Vec3; 4],
}

impl Cell {
    pub fn area_m2(&self) -> f64 {
        let [sw, _, ne, _] = self.corner_latlons;
        patch_area_m2(sw.lat_deg, ne.lat_deg, sw.lon_deg, ne.lon_deg)
    }
}

/// Active users served in a cell: never zero, so per-user rates stay defined.
pub fn active_users(population: u64, active_fraction: f64) -> u32 {
    ((active_fraction * population as f64).round() as u32).max(1)
}

#[derive(Debug, Clone)]
pub struct CellGrid {
    pub cells: Vec<Cell>,
    pub bbox: BoundingBox,
    pub resolution: GridResolution,
}

#[derive(Debug, Deserialize)]
struct PopulationRow {
    cell_row: u32,
    cell_col: u32,
    population: u64,
}

impl CellGrid {
    pub fn build(
        bbox: BoundingBox,
        resolution: GridResolution,
        population: &PopulationSource,
        active_fraction: f64,
    ) -> Result<Self> {
        bbox.validate()?;
        if resolution.rows == 0 || resolution.cols == 0 {
            return Err(Error::InvalidGrid("rows and cols must be positive".into()));
        }
        if !(0.0..=1.0).contains(&active_fraction) {
            return Err(Error::InvalidGrid("active_fraction must lie in [0, 1]".into()));
        }
        let pops = populations(population, resolution)?;

        let mut cells = Vec::new();
        for row in 0..resolution.rows {
            for col in 0..resolution.cols {
                let pop = pops[(row * resolution.cols + col) as usize];
                if pop == 0 {
                    continue;
                }
                let (s, n) = lat_edges(&bbox, resolution, row);
                let (w, e) = lon_edges(&bbox, resolution, col);
                let corners = [
                    LatLon::new(s, w),
                    LatLon::new(s, e),
                    LatLon::new(n, e),
                    LatLon::new(n, w),
                ];
                let center = LatLon::new(0.5 * (s + n), 0.5 * (w + e));
                cells.push(Cell {
                    cell_id: CellId(cells.len() as u32),
                    row,
                    col,
                    center_latlon: center,
                    corner_latlons: corners,
                    population: pop,
                    active_fraction,
                    active_users: active_users(pop, active_fraction),
                    anchor_position_ecef_m: center.surface_ecef(),
                    corner_positions_ecef_m: corners.map(|c| c.surface_ecef()),
                });
            }
        }
        Ok(Self {
            cells,
            bbox,
            resolution,
        })
    }

    pub fn len(&self) -> usize {
        self.cells.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cells.is_empty()
    }

    pub fn cell(&self, id: CellId) -> &Cell {
        &self.cells[id.index()]
    }

    pub fn total_active_users(&self) -> u64 {
        self.cells.iter().map(|c| c.active_users as u64).sum()
    }

    /// Grid position `(row, col)` owning a point. Points on a shared edge
    /// belong to the cell on the south (or west) side of that edge.
    pub fn locate(&self, p: &LatLon) -> Option<(u32, u32)> {
        if !self.bbox.contains(p) {
            return None;
        }
        let row = edge_index(p.lat_deg, self.bbox.sw.lat_deg, self.bbox.ne.lat_deg, self.resolution.rows, |i| {
            lat_edges(&self.bbox, self.resolution, i)
        });
        let col = edge_index(p.lon_deg, self.bbox.sw.lon_deg, self.bbox.ne.lon_deg, self.resolution.cols, |i| {
            lon_edges(&self.bbox, self.resolution, i)
        });
        Some((row, col))
    }
}

pub(crate) fn lat_edges(b: &BoundingBox, r: GridResolution, row: u32) -> (f64, f64) {
    let span = b.ne.lat_deg - b.sw.lat_deg;
    (
        b.sw.lat_deg + span * row as f64 / r.rows as f64,
        b.sw.lat_deg + span * (row + 1) as f64 / r.rows as f64,
    )
}

pub(crate) fn lon_edges(b: &BoundingBox, r: GridResolution, col: u32) -> (f64, f64) {
    let span = b.ne.lon_deg - b.sw.lon_deg;
    (
        b.sw.lon_deg + span * col as f64 / r.cols as f64,
        b.sw.lon_deg + span * (col + 1) as f64 / r.cols as f64,
    )
}

// Interval (lo, hi] per index, with the first interval closed at its lower end.
fn edge_index(x: f64, lo: f64, hi: f64, n: u32, edges: impl Fn(u32) -> (f64, f64)) -> u32 {
    let guess = (((x - lo) / (hi - lo)) * n as f64).ceil() as i64 - 1;
    let mut i = guess.clamp(0, n as i64 - 1) as u32;
    // The division above can land one off near an edge; settle against the
    // exact edge values.
    loop {
        let (a, b) = edges(i);
        if i > 0 && x <= a {
            i -= 1;
        } else if i + 1 < n && x > b {
            i += 1;
        } else {
            return i;
        }
    }
}

fn populations(source: &PopulationSource, r: GridResolution) -> Result<Vec<u64>> {
    let n = (r.rows * r.cols) as usize;
    match source {
        PopulationSource::Constant { population } => Ok(vec![*population; n]),
        PopulationSource::Synthetic { median, sigma, seed } => {
            if !(*median > 0.0 && *sigma >= 0.0) {
                return Err(Error::InvalidGrid("synthetic population needs median > 0 and sigma >= 0".into()));
            }
            let dist = LogNormal::new(median.ln(), *sigma).map_err(|e| Error::InvalidGrid(e.to_string()))?;
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            Ok((0..n).map(|_| dist.sample(&mut rng).round() as u64).collect())
        }
        PopulationSource::Csv { path } => read_population_csv(path, r),
    }
}

fn read_population_csv(path: &Path, r: GridResolution) -> Result<Vec<u64>> {
    let file_err = |reason: String| Error::PopulationFile {
        path: path.to_path_buf(),
        reason,
    };
    let mut reader = csv::Reader::from_path(path)?;
    let mut pops = vec![None; (r.rows * r.cols) as usize];
    let mut found = 0;
    for rec in reader.deserialize() {
        let row: PopulationRow = rec?;
        found += 1;
        if row.cell_row >= r.rows || row.cell_col >= r.cols {
            return Err(file_err(format!("cell ({}, {}) lies outside the grid", row.cell_row, row.cell_col)));
        }
        let slot = &mut pops[(row.cell_row * r.cols + row.cell_col) as usize];
        if slot.is_some() {
            return Err(file_err(format!("duplicate cell ({}, {})", row.cell_row, row.cell_col)));
        }
        *slot = Some(row.population);
    }
    if found != pops.len() {
        return Err(Error::PopulationRowCount {
            path: path.to_path_buf(),
            expected: pops.len(),
            found,
        });
    }
    Ok(pops.into_iter().map(|p| p.unwrap_or(0)).collect())
}

#[cfg(test)]
mod tests {
    use std::io::Write;

    use proptest::prelude::*;

    use super::*;

    fn bbox() -> BoundingBox {
        BoundingBox::new(LatLon::new(30.0, -10.0), LatLon::new(65.0, 30.0)).unwrap()
    }

    #[test]
    fn reference_area_has_3960_cells() {
        let grid = CellGrid::build(
            bbox(),
            GridResolution { rows: 60, cols: 66 },
            &PopulationSource::Constant { population: 1 },
            0.001,
        )
        .unwrap();
        assert_eq!(grid.len(), 3960);
    }

    #[test]
    fn active_user_counts() {
        assert_eq!(active_users(10_000, 0.001), 10);
        assert_eq!(active_users(10_000, 0.0), 1);
        assert_eq!(active_users(400, 0.001), 1);
    }

    #[test]
    fn inverted_bbox_is_rejected() {
        assert!(BoundingBox::new(LatLon::new(50.0, 0.0), LatLon::new(40.0, 10.0)).is_err());
    }

    #[test]
    fn zero_population_cells_are_dropped() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pop.csv");
        let mut f = std::fs::File::create(&path).unwrap();
        writeln!(f, "cell_row,cell_col,population").unwrap();
        for (r, c, p) in [(0, 0, 100), (0, 1, 0), (1, 0, 5000), (1, 1, 20)] {
            writeln!(f, "{r},{c},{p}").unwrap();
        }
        drop(f);
        let grid = CellGrid::build(
            bbox(),
            GridResolution { rows: 2, cols: 2 },
            &PopulationSource::Csv { path: path.clone() },
            0.001,
        )
        .unwrap();
        assert_eq!(grid.len(), 3);
        assert_eq!(grid.cells[1].population, 5000);
        assert_eq!(grid.cells[1].active_users, 5);
        assert_eq!(grid.cells[1].cell_id, CellId(1));
        assert_eq!((grid.cells[1].row, grid.cells[1].col), (1, 0));
    }

    #[test]
    fn csv_row_count_mismatch_is_an_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("pop.csv");
        std::fs::write(&path, "cell_row,cell_col,population\n0,0,10\n").unwrap();
        let err = CellGrid::build(
            bbox(),
            GridResolution { rows: 2, cols: 2 },
            &PopulationSource::Csv { path },
            0.001,
        )
        .unwrap_err();
        assert!(matches!(err, Error::PopulationRowCount { expected: 4, found: 1, .. }));
    }

    #[test]
    fn synthetic_population_is_seeded() {
        let src = PopulationSource::Synthetic {
            median: 5e4,
            sigma: 1.0,
            seed: 9,
        };
        let r = GridResolution { rows: 10, cols: 10 };
        let a = CellGrid::build(bbox(), r, &src, 0.001).unwrap();
        let b = CellGrid::build(bbox(), r, &src, 0.001).unwrap();
        let pa: Vec<u64> = a.cells.iter().map(|c| c.population).collect();
        let pb: Vec<u64> = b.cells.iter().map(|c| c.population).collect();
        assert_eq!(pa, pb);
        let mut sorted = pa.clone();
        sorted.sort_unstable();
        // Median of 100 log-normal draws lands near the configured median.
        let med = sorted[50] as f64;
        assert!(med > 2.5e4 && med < 1e5, "median {med}");
    }

    #[test]
    fn cell_areas_sum_to_bbox_area() {
        let grid = CellGrid::build(
            bbox(),
            GridResolution { rows: 17, cols: 23 },
            &PopulationSource::Constant { population: 5 },
            0.5,
        )
        .unwrap();
        let total: f64 = grid.cells.iter().map(Cell::area_m2).sum();
        assert!((total / grid.bbox.area_m2() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn anchors_sit_on_the_surface_at_the_centre() {
        let grid = CellGrid::build(
            bbox(),
            GridResolution { rows: 3, cols: 3 },
            &PopulationSource::Constant { population: 5 },
            0.5,
        )
        .unwrap();
        for c in &grid.cells {
            assert!((c.anchor_position_ecef_m.norm() - crate::geo::EARTH_RADIUS_M).abs() < 1e-6);
            assert_eq!(c.anchor_position_ecef_m, c.center_latlon.surface_ecef());
        }
    }

    #[test]
    fn shared_edges_go_south_and_west() {
        let grid = CellGrid::build(
            bbox(),
            GridResolution { rows: 7, cols: 8 },
            &PopulationSource::Constant { population: 5 },
            0.5,
        )
        .unwrap();
        let c = &grid.cells[3 * 8 + 4];
        let [sw, _, ne, _] = c.corner_latlons;
        assert_eq!(grid.locate(&ne), Some((3, 4)));
        assert_eq!(grid.locate(&sw), Some((2, 3)));
        assert_eq!(grid.locate(&grid.bbox.sw), Some((0, 0)));
        assert_eq!(grid.locate(&grid.bbox.ne), Some((6, 7)));
        assert_eq!(grid.locate(&LatLon::new(0.0, 0.0)), None);
    }

    proptest! {
        #[test]
        fn every_point_belongs_to_exactly_one_cell(
            fy in 0.0f64..=1.0,
            fx in 0.0f64..=1.0,
            rows in 1u32..40,
            cols in 1u32..40,
            on_edge in any::<bool>(),
        ) {
            let b = bbox();
            let r = GridResolution { rows, cols };
            let grid = CellGrid::build(b, r, &PopulationSource::Constant { population: 1 }, 0.5).unwrap();
            // Snap to a grid line half of the time to exercise the edge rule.
            let (lat, lon) = if on_edge {
                let i = (fy * rows as f64).floor() as u32;
                let j = (fx * cols as f64).floor() as u32;
                (lat_edges(&b, r, i.min(rows - 1)).0, lon_edges(&b, r, j.min(cols - 1)).0)
            } else {
                (b.sw.lat_deg + fy * (b.ne.lat_deg - b.sw.lat_deg), b.sw.lon_deg + fx * (b.ne.lon_deg - b.sw.lon_deg))
            };
            let owners: Vec<_> = grid.cells.iter().filter(|c| {
                let (s, n) = lat_edges(&b, r, c.row);
                let (w, e) = lon_edges(&b, r, c.col);
                let in_lat = (lat > s || (c.row == 0 && lat == s)) && lat <= n;
                let in_lon = (lon > w || (c.col == 0 && lon == w)) && lon <= e;
                in_lat && in_lon
            }).collect();
            prop_assert_eq!(owners.len(), 1);
            prop_assert_eq!(grid.locate(&LatLon::new(lat, lon)), Some((owners[0].row, owners[0].col)));
        }
    }
}
