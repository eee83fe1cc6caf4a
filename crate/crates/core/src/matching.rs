//! Many-to-one matching of cells to satellites by deferred acceptance.
//!
//! Cells rank satellites by decreasing estimated per-user rate; satellites
//! rank cells by increasing estimated rate, which favours the cells that are
//! worst off. Cells propose, satellites hold the best proposers up to their
//! quota. Proposals of a cell are relayed by its current serving satellite
//! (the broker), so a cell without one stays out of the matching unless
//! orphan rescue is enabled.

use std::cmp::Ordering;
use std::io::Write;

use crate::error::Result;
use crate::ids::{CellId, SatId};

/// Ordered preference lists, indexed by cell id and satellite id.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct PreferenceLists {
    /// Most preferred first: decreasing rate, ties to the lower satellite id.
    pub cell_prefs: Vec<Vec<(SatId, f64)>>,
    /// Most preferred first: increasing rate, ties to the lower cell id.
    pub sat_prefs: Vec<Vec<(CellId, f64)>>,
    /// `sat_rank[s]`: (cell, position in `sat_prefs[s]`), sorted by cell.
    sat_rank: Vec<Vec<(CellId, u32)>>,
}

impl PreferenceLists {
    pub fn n_cells(&self) -> usize {
        self.cell_prefs.len()
    }

    pub fn n_sats(&self) -> usize {
        self.sat_prefs.len()
    }

    /// Position of `cell` in the satellite's list; `None` if unacceptable.
    pub fn sat_rank(&self, sat: SatId, cell: CellId) -> Option<u32> {
        let r = &self.sat_rank[sat.index()];
        r.binary_search_by_key(&cell, |e| e.0).ok().map(|i| r[i].1)
    }

    /// Position of `sat` in the cell's list; `None` if unacceptable.
    pub fn cell_rank(&self, cell: CellId, sat: SatId) -> Option<usize> {
        self.cell_prefs[cell.index()].iter().position(|e| e.0 == sat)
    }

    /// Keep only the cells for which `keep` holds.
    pub fn restricted(&self, keep: impl Fn(CellId) -> bool) -> Self {
        let mut entries = Vec::new();
        for (c, list) in self.cell_prefs.iter().enumerate() {
            let cell = CellId(c as u32);
            if keep(cell) {
                entries.extend(list.iter().map(|&(s, r)| (s, cell, r)));
            }
        }
        build_preferences(entries, self.n_cells(), self.n_sats())
    }
}

/// Preference lists from `(satellite, cell, estimated rate)` entries. Entries
/// with a non-positive rate are left out.
pub fn build_preferences(
    entries: impl IntoIterator<Item = (SatId, CellId, f64)>,
    n_cells: usize,
    n_sats: usize,
) -> PreferenceLists {
    let mut cell_prefs = vec![Vec::new(); n_cells];
    let mut sat_prefs = vec![Vec::new(); n_sats];
    for (s, c, rate) in entries {
        if rate > 0.0 && rate.is_finite() {
            cell_prefs[c.index()].push((s, rate));
            sat_prefs[s.index()].push((c, rate));
        }
    }
    for l in &mut cell_prefs {
        l.sort_by(|a: &(SatId, f64), b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    }
    for l in &mut sat_prefs {
        l.sort_by(|a: &(CellId, f64), b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    }
    let sat_rank = sat_prefs
        .iter()
        .map(|l| {
            let mut r: Vec<(CellId, u32)> = l.iter().enumerate().map(|(i, e)| (e.0, i as u32)).collect();
            r.sort_unstable();
            r
        })
        .collect();
    PreferenceLists {
        cell_prefs,
        sat_prefs,
        sat_rank,
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Matching {
    /// Serving satellite per cell; `None` is the virtual "no satellite" vertex.
    pub cell_to_sat: Vec<Option<SatId>>,
    /// Served cells per satellite, ascending.
    pub sat_to_cells: Vec<Vec<CellId>>,
    pub quotas: Vec<u32>,
}

impl Matching {
    pub fn empty(n_cells: usize, quotas: &[u32]) -> Self {
        Self {
            cell_to_sat: vec![None; n_cells],
            sat_to_cells: vec![Vec::new(); quotas.len()],
            quotas: quotas.to_vec(),
        }
    }

    pub fn from_assignment(cell_to_sat: Vec<Option<SatId>>, quotas: &[u32]) -> Self {
        let mut sat_to_cells = vec![Vec::new(); quotas.len()];
        for (c, s) in cell_to_sat.iter().enumerate() {
            if let Some(s) = s {
                sat_to_cells[s.index()].push(CellId(c as u32));
            }
        }
        Self {
            cell_to_sat,
            sat_to_cells,
            quotas: quotas.to_vec(),
        }
    }

    pub fn unmatched_cells(&self) -> usize {
        self.cell_to_sat.iter().filter(|s| s.is_none()).count()
    }

    /// Check the matching conditions: quota and footprint bounds, at most one
    /// satellite per cell, and agreement of both directions.
    /// `footprint[s]` is the number of cells satellite `s` covers.
    pub fn check(&self, footprint: &[usize]) -> std::result::Result<(), String> {
        for (s, cells) in self.sat_to_cells.iter().enumerate() {
            let cap = (self.quotas[s] as usize).min(footprint.get(s).copied().unwrap_or(0));
            if cells.len() > cap {
                return Err(format!("satellite {s} serves {} cells, bound is {cap}", cells.len()));
            }
            for c in cells {
                if self.cell_to_sat[c.index()] != Some(SatId(s as u32)) {
                    return Err(format!("satellite {s} lists cell {c}, which points elsewhere"));
                }
            }
            if cells.windows(2).any(|w| w[0] >= w[1]) {
                return Err(format!("satellite {s} lists a cell twice"));
            }
        }
        for (c, s) in self.cell_to_sat.iter().enumerate() {
            if let Some(s) = s {
                if self.sat_to_cells[s.index()].binary_search(&CellId(c as u32)).is_err() {
                    return Err(format!("cell {c} points to satellite {s}, which does not list it"));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct BrokerLog {
    pub rounds: u32,
    /// Relayed requests and responses (two per proposal) plus one rejection
    /// notice per displaced, previously held cell.
    pub messages: u64,
    /// Proposals received by each satellite.
    pub proposals_per_sat: Vec<u32>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DaOptions {
    /// Let cells without a broker propose directly.
    pub orphan_rescue: bool,
    /// Accepted cells are never released (no later displacement).
    pub irrevocable_acceptance: bool,
}

/// Cell-proposing deferred acceptance with satellite quotas.
///
/// With `prev` given, only cells served in `prev` take part (unless
/// `orphan_rescue`); without it every cell does.
pub fn deferred_acceptance(
    prefs: &PreferenceLists,
    quotas: &[u32],
    prev: Option<&Matching>,
    opts: DaOptions,
) -> (Matching, BrokerLog) {
    let n_cells = prefs.n_cells();
    let n_sats = prefs.n_sats();
    assert_eq!(quotas.len(), n_sats, "one quota per satellite");
    let participates = |c: usize| opts.orphan_rescue || prev.is_none_or(|m| m.cell_to_sat[c].is_some());

    let mut next = vec![0usize; n_cells];
    let mut held: Vec<Vec<CellId>> = vec![Vec::new(); n_sats];
    let mut cell_to_sat: Vec<Option<SatId>> = vec![None; n_cells];
    let mut log = BrokerLog {
        proposals_per_sat: vec![0; n_sats],
        ..BrokerLog::default()
    };
    let mut free: Vec<usize> = (0..n_cells)
        .filter(|&c| participates(c) && !prefs.cell_prefs[c].is_empty())
        .collect();
    let mut incoming: Vec<Vec<CellId>> = vec![Vec::new(); n_sats];

    while !free.is_empty() {
        log.rounds += 1;
        for &c in &free {
            let (s, _) = prefs.cell_prefs[c][next[c]];
            next[c] += 1;
            incoming[s.index()].push(CellId(c as u32));
            log.proposals_per_sat[s.index()] += 1;
            log.messages += 2;
        }
        let mut rejected = Vec::new();
        for s in 0..n_sats {
            if incoming[s].is_empty() {
                continue;
            }
            let sat = SatId(s as u32);
            let q = quotas[s] as usize;
            let rank = |c: &CellId| prefs.sat_rank(sat, *c).expect("proposal to a satellite that lists the cell");
            let mut new = std::mem::take(&mut incoming[s]);
            if opts.irrevocable_acceptance {
                new.sort_by_key(rank);
                let room = q.saturating_sub(held[s].len());
                let tail = new.split_off(room.min(new.len()));
                held[s].extend(new);
                rejected.extend(tail);
            } else {
                let before: Vec<CellId> = held[s].clone();
                let mut pool = std::mem::take(&mut held[s]);
                pool.extend(new);
                pool.sort_by_key(rank);
                let tail = pool.split_off(q.min(pool.len()));
                log.messages += tail.iter().filter(|c| before.contains(c)).count() as u64;
                held[s] = pool;
                rejected.extend(tail);
            }
            for c in &held[s] {
                cell_to_sat[c.index()] = Some(sat);
            }
        }
        for c in &rejected {
            cell_to_sat[c.index()] = None;
        }
        free = rejected
            .into_iter()
            .map(|c| c.index())
            .filter(|&c| next[c] < prefs.cell_prefs[c].len())
            .collect();
        free.sort_unstable();
    }

    for h in &mut held {
        h.sort_unstable();
    }
    (
        Matching {
            cell_to_sat,
            sat_to_cells: held,
            quotas: quotas.to_vec(),
        },
        log,
    )
}

/// Blocking pairs of a matching: a cell and a satellite that both list each
/// other, where the cell prefers the satellite to its current partner and the
/// satellite has spare quota or prefers the cell to one it serves.
pub fn blocking_pairs(m: &Matching, prefs: &PreferenceLists, quotas: &[u32]) -> Vec<(CellId, SatId)> {
    let mut out = Vec::new();
    for (c, list) in prefs.cell_prefs.iter().enumerate() {
        let cell = CellId(c as u32);
        let current = m.cell_to_sat[c].and_then(|s| prefs.cell_rank(cell, s));
        for (i, &(s, _)) in list.iter().enumerate() {
            if current.is_some_and(|r| i >= r) {
                break;
            }
            let Some(my_rank) = prefs.sat_rank(s, cell) else {
                continue;
            };
            let members = &m.sat_to_cells[s.index()];
            let slack = members.len() < quotas[s.index()] as usize;
            let worst = members.iter().filter_map(|&x| prefs.sat_rank(s, x)).max();
            if slack || worst.is_some_and(|w| my_rank < w) {
                out.push((cell, s));
            }
        }
    }
    out
}

pub fn is_stable(m: &Matching, prefs: &PreferenceLists, quotas: &[u32]) -> (bool, Vec<(CellId, SatId)>) {
    let b = blocking_pairs(m, prefs, quotas);
    (b.is_empty(), b)
}

/// Initial matching before any broker exists: cells, in id order, take their
/// most preferred satellite while it has room; cells that find it full stay
/// unmatched.
pub fn cold_start(prefs: &PreferenceLists, quotas: &[u32]) -> Matching {
    let mut load = vec![0u32; quotas.len()];
    let mut assign = vec![None; prefs.n_cells()];
    for (c, list) in prefs.cell_prefs.iter().enumerate() {
        if let Some(&(s, _)) = list.first() {
            if load[s.index()] < quotas[s.index()] {
                load[s.index()] += 1;
                assign[c] = Some(s);
            }
        }
    }
    Matching::from_assignment(assign, quotas)
}

/// Compare two outcomes for a cell: `Less` means `a` is better for it.
pub fn cell_compare(prefs: &PreferenceLists, cell: CellId, a: Option<SatId>, b: Option<SatId>) -> Ordering {
    let rank = |s: Option<SatId>| s.and_then(|s| prefs.cell_rank(cell, s)).unwrap_or(usize::MAX);
    rank(a).cmp(&rank(b))
}

/// Append `frame,cell_id,sat_id` rows (`-1` for unmatched cells).
pub fn write_matching_rows<W: Write>(w: &mut csv::Writer<W>, frame: u64, m: &Matching) -> Result<()> {
    for (c, s) in m.cell_to_sat.iter().enumerate() {
        let s = s.map_or(-1, |s| s.0 as i64);
        w.write_record([frame.to_string(), c.to_string(), s.to_string()])?;
    }
    Ok(())
}

#[cfg(test)]
pub(crate) mod tests {
    use proptest::prelude::*;
    use rand::Rng;

    use super::*;
    use crate::rng;

    fn prefs_from(entries: &[(u32, u32, f64)], n_cells: usize, n_sats: usize) -> PreferenceLists {
        build_preferences(entries.iter().map(|&(s, c, r)| (SatId(s), CellId(c), r)), n_cells, n_sats)
    }

    /// All stable matchings, by backtracking over the cells' acceptable options.
    pub(crate) fn all_stable(prefs: &PreferenceLists, quotas: &[u32]) -> Vec<Matching> {
        fn go(
            c: usize,
            prefs: &PreferenceLists,
            quotas: &[u32],
            assign: &mut Vec<Option<SatId>>,
            load: &mut Vec<u32>,
            out: &mut Vec<Matching>,
        ) {
            if c == prefs.n_cells() {
                let m = Matching::from_assignment(assign.clone(), quotas);
                if blocking_pairs(&m, prefs, quotas).is_empty() {
                    out.push(m);
                }
                return;
            }
            let options: Vec<Option<SatId>> =
                prefs.cell_prefs[c].iter().map(|e| Some(e.0)).chain(std::iter::once(None)).collect();
            for o in options {
                if let Some(s) = o {
                    if load[s.index()] >= quotas[s.index()] {
                        continue;
                    }
                    load[s.index()] += 1;
                }
                assign[c] = o;
                go(c + 1, prefs, quotas, assign, load, out);
                if let Some(s) = o {
                    load[s.index()] -= 1;
                }
            }
            assign[c] = None;
        }
        let mut out = Vec::new();
        go(
            0,
            prefs,
            quotas,
            &mut vec![None; prefs.n_cells()],
            &mut vec![0; quotas.len()],
            &mut out,
        );
        out
    }

    /// Random instance: acceptable pairs with probability `density`.
    pub(crate) fn random_instance(seed: u64, max_sats: u32, max_cells: u32) -> (PreferenceLists, Vec<u32>) {
        let mut r = rng::stream(seed, &[0xDA]);
        let n_sats = r.random_range(1..=max_sats) as usize;
        let n_cells = r.random_range(1..=max_cells) as usize;
        let density = r.random_range(0.2..0.9);
        let mut entries = Vec::new();
        for s in 0..n_sats {
            for c in 0..n_cells {
                if r.random::<f64>() < density {
                    // Coarse values so ties occur.
                    entries.push((SatId(s as u32), CellId(c as u32), r.random_range(1..6) as f64));
                }
            }
        }
        let quotas = (0..n_sats).map(|_| r.random_range(0..=4)).collect();
        (build_preferences(entries, n_cells, n_sats), quotas)
    }

    #[test]
    fn orderings() {
        let p = prefs_from(&[(0, 0, 5.0), (1, 0, 3.0), (2, 0, 7.0), (0, 1, 3.0), (0, 2, 7.0)], 3, 3);
        let cell0: Vec<u32> = p.cell_prefs[0].iter().map(|e| e.0 .0).collect();
        assert_eq!(cell0, [2, 0, 1]);
        let sat0: Vec<u32> = p.sat_prefs[0].iter().map(|e| e.0 .0).collect();
        assert_eq!(sat0, [1, 0, 2]);
    }

    #[test]
    fn ties_break_by_id() {
        let p = prefs_from(&[(2, 0, 4.0), (0, 0, 4.0), (1, 0, 4.0), (0, 2, 1.0), (0, 1, 1.0)], 3, 3);
        let cell0: Vec<u32> = p.cell_prefs[0].iter().map(|e| e.0 .0).collect();
        assert_eq!(cell0, [0, 1, 2]);
        let sat0: Vec<u32> = p.sat_prefs[0].iter().map(|e| e.0 .0).collect();
        assert_eq!(sat0, [1, 2, 0]);
    }

    #[test]
    fn zero_rates_are_unacceptable() {
        let p = prefs_from(&[(0, 0, 0.0), (1, 0, 2.0)], 1, 2);
        assert_eq!(p.cell_prefs[0].len(), 1);
        assert!(p.sat_prefs[0].is_empty());
    }

    #[test]
    fn single_pair_matches() {
        let p = prefs_from(&[(0, 0, 1.0)], 1, 1);
        let (m, log) = deferred_acceptance(&p, &[1], None, DaOptions::default());
        assert_eq!(m.cell_to_sat, vec![Some(SatId(0))]);
        assert_eq!(log.rounds, 1);
        assert_eq!(log.messages, 2);
    }

    #[test]
    fn two_cells_take_their_favourites() {
        let p = prefs_from(&[(0, 0, 5.0), (1, 0, 2.0), (0, 1, 3.0), (1, 1, 4.0)], 2, 2);
        let (m, _) = deferred_acceptance(&p, &[1, 1], None, DaOptions::default());
        assert_eq!(m.cell_to_sat, vec![Some(SatId(0)), Some(SatId(1))]);
    }

    #[test]
    fn contested_satellite_keeps_the_weaker_cell() {
        // Both cells rank s0 first; s0 (quota 1) prefers c1, whose rate is lower.
        let p = prefs_from(&[(0, 0, 5.0), (1, 0, 2.0), (0, 1, 4.0), (1, 1, 3.0)], 2, 2);
        let quotas = [1, 1];
        let (m, log) = deferred_acceptance(&p, &quotas, None, DaOptions::default());
        assert_eq!(m.cell_to_sat, vec![Some(SatId(1)), Some(SatId(0))]);
        assert!(is_stable(&m, &p, &quotas).0);
        assert_eq!(log.rounds, 2);
        let stable = all_stable(&p, &quotas);
        assert_eq!(stable, vec![m]);
    }

    #[test]
    fn zero_quotas_leave_everyone_unmatched() {
        let (p, _) = random_instance(3, 5, 10);
        let quotas = vec![0; p.n_sats()];
        let (m, log) = deferred_acceptance(&p, &quotas, None, DaOptions::default());
        assert_eq!(m.unmatched_cells(), p.n_cells());
        let longest = p.cell_prefs.iter().map(Vec::len).max().unwrap();
        assert!(log.rounds as usize <= longest);
        assert!(is_stable(&m, &p, &quotas).0);
    }

    #[test]
    fn swapping_partners_is_detected() {
        // Each cell strictly prefers its own satellite and each satellite its
        // own cell; swapping them creates two blocking pairs.
        let p = prefs_from(
            &[(0, 0, 9.0), (1, 0, 1.0), (0, 1, 8.0), (1, 1, 2.0), (2, 2, 5.0)],
            3,
            3,
        );
        let quotas = [1, 1, 1];
        let (good, _) = deferred_acceptance(&p, &quotas, None, DaOptions::default());
        assert!(is_stable(&good, &p, &quotas).0);
        let mut swapped = good.cell_to_sat.clone();
        swapped.swap(0, 1);
        let bad = Matching::from_assignment(swapped, &quotas);
        let (ok, pairs) = is_stable(&bad, &p, &quotas);
        assert!(!ok);
        assert!(!pairs.is_empty());
    }

    #[test]
    fn empty_matching_with_zero_quotas_is_stable() {
        let (p, _) = random_instance(4, 4, 6);
        let q = vec![0; p.n_sats()];
        assert!(is_stable(&Matching::empty(p.n_cells(), &q), &p, &q).0);
    }

    #[test]
    fn cells_without_broker_sit_out() {
        let p = prefs_from(&[(0, 0, 1.0), (0, 1, 2.0)], 2, 1);
        let prev = Matching::from_assignment(vec![Some(SatId(0)), None], &[2]);
        let (m, _) = deferred_acceptance(&p, &[2], Some(&prev), DaOptions::default());
        assert_eq!(m.cell_to_sat, vec![Some(SatId(0)), None]);
        let rescue = DaOptions {
            orphan_rescue: true,
            ..DaOptions::default()
        };
        let (m, _) = deferred_acceptance(&p, &[2], Some(&prev), rescue);
        assert_eq!(m.cell_to_sat, vec![Some(SatId(0)), Some(SatId(0))]);
    }

    #[test]
    fn irrevocable_acceptance_can_be_unstable() {
        // Round 1: c0 proposes to s0 and is held. Round 2: c1, rejected by s1,
        // reaches s0, which prefers it but cannot release c0.
        let p = prefs_from(&[(0, 0, 5.0), (1, 1, 9.0), (0, 1, 1.0), (1, 2, 1.0)], 3, 2);
        let quotas = [1, 1];
        let lit = DaOptions {
            irrevocable_acceptance: true,
            ..DaOptions::default()
        };
        let (m, _) = deferred_acceptance(&p, &quotas, None, lit);
        assert!(!is_stable(&m, &p, &quotas).0);
        let (m, _) = deferred_acceptance(&p, &quotas, None, DaOptions::default());
        assert!(is_stable(&m, &p, &quotas).0);
    }

    #[test]
    fn cold_start_respects_quota_in_id_order() {
        let p = prefs_from(&[(0, 0, 3.0), (0, 1, 3.0), (0, 2, 3.0), (1, 2, 1.0)], 3, 2);
        let m = cold_start(&p, &[2, 5]);
        assert_eq!(m.cell_to_sat, vec![Some(SatId(0)), Some(SatId(0)), None]);
        assert!(m.check(&[3, 1]).is_ok());
    }

    #[test]
    fn matching_dump() {
        let m = Matching::from_assignment(vec![Some(SatId(1)), None], &[1, 1]);
        let mut w = csv::Writer::from_writer(Vec::new());
        write_matching_rows(&mut w, 7, &m).unwrap();
        let s = String::from_utf8(w.into_inner().unwrap()).unwrap();
        assert_eq!(s, "7,0,1\n7,1,-1\n");
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(200))]
        #[test]
        fn outcome_is_feasible_stable_and_bounded(seed in any::<u64>()) {
            let (p, quotas) = random_instance(seed, 8, 20);
            let (m, log) = deferred_acceptance(&p, &quotas, None, DaOptions::default());
            let footprint: Vec<usize> = p.sat_prefs.iter().map(Vec::len).collect();
            prop_assert!(m.check(&footprint).is_ok());
            prop_assert!(is_stable(&m, &p, &quotas).0);
            let total: usize = p.cell_prefs.iter().map(Vec::len).sum();
            prop_assert!(log.rounds as usize <= total.max(1));
            if total > 0 {
                prop_assert!(log.rounds >= 1);
            }
            // Every match is an acceptable pair.
            for (c, s) in m.cell_to_sat.iter().enumerate() {
                if let Some(s) = s {
                    prop_assert!(p.cell_rank(CellId(c as u32), *s).is_some());
                }
            }
        }

        #[test]
        fn outcome_is_cell_optimal(seed in any::<u64>()) {
            let (p, quotas) = random_instance(seed, 4, 6);
            let (m, _) = deferred_acceptance(&p, &quotas, None, DaOptions::default());
            let stable = all_stable(&p, &quotas);
            prop_assert!(stable.contains(&m));
            for other in &stable {
                for c in 0..p.n_cells() {
                    let cell = CellId(c as u32);
                    prop_assert!(cell_compare(&p, cell, m.cell_to_sat[c], other.cell_to_sat[c]) != Ordering::Greater);
                }
            }
        }
    }
}
