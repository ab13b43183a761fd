//! The solution-improvement procedures: `improve(alpha)` lowers both norms
//! while repacking few bins, `reduce_components` trims the support after
//! deletions. Both work on the group-keyed pair but solve and reduce in the
//! merged size space.

use super::pair::{ConfigKey, PackedSolution};
use super::simplex::kernel_vector;
use super::solve::{approx_solve, ColumnPool, SizeLp};
use crate::params::Params;
use crate::rational::{ceil_int, one, rat_int, zero, Rational};
use crate::rounding::{GroupId, RoundingState};
use num_traits::{ToPrimitive, Zero};
use std::collections::{BTreeMap, BTreeSet};

#[derive(Debug, thiserror::Error)]
pub enum ImproveError {
    #[error("fractional norm {0} below the 2*alpha*(1/delta + 1) = {1} floor")]
    FractionalTooSmall(Rational, u64),
    #[error("integral norm {0} below the (m+2)(1/delta + 2) = {1} floor")]
    IntegralTooSmall(u64, u64),
}

#[derive(Debug, Clone, Default)]
pub struct ImproveStats {
    pub alpha: u64,
    pub x_before: Rational,
    pub x_after: Rational,
    pub y_before: u64,
    pub y_after: u64,
    /// `||y' - y||_1` over configurations.
    pub y_distance: u64,
    pub took_no_progress_branch: bool,
    pub residual_lp_value: Rational,
    /// Emergency coverage fixes (must stay zero in healthy runs).
    pub emergency_covers: u64,
}

#[derive(Debug, Clone, Default)]
pub struct ReduceStats {
    pub early_exit: bool,
    pub support_before: usize,
    pub support_after: usize,
    pub y_distance: u64,
    pub emergency_covers: u64,
}

/// Distinct rounded sizes (the LP rows), descending, with the groups backing
/// each size in id order.
fn size_rows(rounding: &RoundingState) -> Vec<(Rational, Vec<GroupId>)> {
    let mut by_size: BTreeMap<Rational, Vec<GroupId>> = BTreeMap::new();
    for gid in rounding.all_groups() {
        let size = rounding.group_rounded_size(gid).expect("live group");
        by_size.entry(size).or_default().push(gid);
    }
    let mut rows: Vec<(Rational, Vec<GroupId>)> = by_size.into_iter().collect();
    rows.reverse();
    for (_, gids) in rows.iter_mut() {
        gids.sort_unstable();
    }
    rows
}

pub fn row_count(rounding: &RoundingState) -> usize {
    size_rows(rounding).len()
}

fn size_of_group(rounding: &RoundingState, g: GroupId) -> Rational {
    rounding.group_rounded_size(g).expect("live group")
}

/// Projects a group-keyed configuration onto the size rows.
fn project(key: &ConfigKey, rounding: &RoundingState, index: &BTreeMap<Rational, usize>, rows: usize) -> Vec<Rational> {
    let mut dense = vec![zero(); rows + 1];
    for (g, count) in key {
        let row = index[&size_of_group(rounding, *g)];
        dense[row] += rat_int(*count as i64);
    }
    dense[rows] = one(); // unit cost row
    dense
}

/// Lifts a size-keyed configuration to groups: every slot goes to the first
/// (smallest-id) group of its size. Per-group coverage is reconciled later.
fn lift(cfg: &[(Rational, u64)], first_gid: &BTreeMap<Rational, GroupId>) -> ConfigKey {
    let mut slots: BTreeMap<GroupId, u32> = BTreeMap::new();
    for (size, count) in cfg {
        let g = first_gid[size];
        *slots.entry(g).or_insert(0) += *count as u32;
    }
    slots.into_iter().collect()
}

/// Reduces the support of a nonnegative combination to at most `target`
/// columns, preserving the size-row coverage and the total value exactly.
fn reduce_support(
    xs: &mut BTreeMap<ConfigKey, Rational>,
    rounding: &RoundingState,
    target: usize,
) {
    let rows: Vec<(Rational, Vec<GroupId>)> = size_rows(rounding);
    let index: BTreeMap<Rational, usize> =
        rows.iter().enumerate().map(|(i, (s, _))| (s.clone(), i)).collect();
    let m = rows.len();
    loop {
        xs.retain(|_, v| !v.is_zero());
        if xs.len() <= target {
            return;
        }
        let keys: Vec<ConfigKey> = xs.keys().cloned().collect();
        let cols: Vec<Vec<Rational>> =
            keys.iter().map(|k| project(k, rounding, &index, m)).collect();
        let Some(mut v) = kernel_vector(&cols) else { return };
        if v.iter().all(|c| *c <= zero()) {
            for c in v.iter_mut() {
                *c = -c.clone();
            }
        }
        // Step length: first zero reached moving along -v.
        let mut step: Option<Rational> = None;
        for (key, vc) in keys.iter().zip(v.iter()) {
            if *vc > zero() {
                let ratio = &xs[key] / vc;
                if step.as_ref().map_or(true, |s| ratio < *s) {
                    step = Some(ratio);
                }
            }
        }
        let step = step.expect("positive kernel component");
        for (key, vc) in keys.iter().zip(v.iter()) {
            if !vc.is_zero() {
                let entry = xs.get_mut(key).unwrap();
                *entry -= &step * vc;
                assert!(*entry >= zero());
            }
        }
    }
}

/// Trims integral slack `floor(y - x)` from the largest components first,
/// up to `budget` bins, refusing any trim that would push a size row below
/// its demand. Dominance survives because only whole units above `x` go.
fn handback(
    target: &mut BTreeMap<ConfigKey, (Rational, u64)>,
    rounding: &RoundingState,
    budget: u64,
) {
    let rows = size_rows(rounding);
    let index: BTreeMap<Rational, usize> =
        rows.iter().enumerate().map(|(i, (s, _))| (s.clone(), i)).collect();
    let demands = rounding.demands();
    let mut row_demand = vec![0i64; rows.len()];
    let mut row_cover = vec![0i64; rows.len()];
    for (i, (_, gids)) in rows.iter().enumerate() {
        row_demand[i] = gids.iter().map(|g| demands[g] as i64).sum();
    }
    let project_counts = |key: &ConfigKey| -> Vec<(usize, i64)> {
        key.iter()
            .map(|(g, c)| (index[&size_of_group(rounding, *g)], *c as i64))
            .collect()
    };
    for (key, (_, y)) in target.iter() {
        for (row, c) in project_counts(key) {
            row_cover[row] += c * *y as i64;
        }
    }
    let mut caps: Vec<(u64, ConfigKey)> = target
        .iter()
        .map(|(k, (x, y))| {
            let gap = rat_int(*y as i64) - x;
            (crate::rational::floor_int(&gap).to_u64().unwrap_or(0), k.clone())
        })
        .filter(|(cap, _)| *cap > 0)
        .collect();
    caps.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut remaining = budget;
    for (cap, key) in caps {
        if remaining == 0 {
            break;
        }
        let proj = project_counts(&key);
        // Largest whole-bin trim every row can absorb.
        let mut take = cap.min(remaining);
        for (row, c) in &proj {
            if *c > 0 {
                let slack = (row_cover[*row] - row_demand[*row]).max(0);
                take = take.min((slack / c) as u64);
            }
        }
        if take == 0 {
            continue;
        }
        remaining -= take;
        target.get_mut(&key).unwrap().1 -= take;
        for (row, c) in proj {
            row_cover[row] -= c * take as i64;
        }
    }
}

/// Moves integral coverage between groups of equal rounded size until every
/// group's demand is covered; sizes match so capacities are untouched.
/// Returns the number of emergency singleton configurations that had to be
/// opened because even the size row ran short (expected to stay zero).
pub(crate) fn reconcile_groups(
    target: &mut BTreeMap<ConfigKey, (Rational, u64)>,
    rounding: &RoundingState,
) -> u64 {
    let rows = size_rows(rounding);
    let demands = rounding.demands();
    let mut emergency = 0u64;
    let mut fuel = 100_000usize;
    loop {
        let mut coverage: BTreeMap<GroupId, i64> = demands.keys().map(|g| (*g, 0)).collect();
        for (key, (_, y)) in target.iter() {
            for (g, c) in key {
                if let Some(cov) = coverage.get_mut(g) {
                    *cov += (*c as i64) * (*y as i64);
                }
            }
        }
        let deficit = rows.iter().find_map(|(_, gids)| {
            gids.iter().find(|g| coverage[g] < demands[g] as i64).map(|g| (*g, gids.clone()))
        });
        let Some((needy, peers)) = deficit else { return emergency };
        fuel -= 1;
        assert!(fuel > 0, "group reconciliation failed to converge");
        // A donor group of the same size with surplus coverage, inside a
        // configuration with integral mass to spare.
        let mut moved = false;
        'outer: for donor in peers.iter().filter(|g| **g != needy) {
            if coverage[donor] <= demands[donor] as i64 {
                continue;
            }
            let keys: Vec<ConfigKey> = target
                .iter()
                .filter(|(k, (_, y))| *y > 0 && k.iter().any(|(g, _)| g == donor))
                .map(|(k, _)| k.clone())
                .collect();
            for key in keys {
                let (x, y) = target.get_mut(&key).unwrap();
                *y -= 1;
                let x_excess = (&*x - rat_int(*y as i64)).max(zero());
                *x -= &x_excess;
                if *y == 0 && x.is_zero() {
                    target.remove(&key);
                }
                let mut slots: BTreeMap<GroupId, u32> = key.iter().cloned().collect();
                let c = slots.get_mut(donor).unwrap();
                *c -= 1;
                if *c == 0 {
                    slots.remove(donor);
                }
                *slots.entry(needy).or_insert(0) += 1;
                let new_key: ConfigKey = slots.into_iter().collect();
                let entry = target.entry(new_key).or_insert((zero(), 0));
                entry.1 += 1;
                entry.0 += x_excess;
                moved = true;
                break 'outer;
            }
        }
        if !moved {
            if std::env::var_os("DYNBIN_DEBUG_RECONCILE").is_some() {
                let row: Vec<String> = peers
                    .iter()
                    .map(|g| format!("g{g}: d={} c={}", demands[g], coverage[g]))
                    .collect();
                eprintln!("reconcile emergency: needy {needy}; row [{}]", row.join(", "));
            }
            // The whole size row is short: cover the gap with singletons.
            emergency += 1;
            let key: ConfigKey = vec![(needy, 1)];
            target.entry(key).or_insert((zero(), 0)).1 += 1;
        }
    }
}

fn support_entries(sol: &PackedSolution) -> Vec<(ConfigKey, Rational, u64)> {
    sol.entries
        .iter()
        .filter(|(_, e)| e.y > 0 || !e.x.is_zero())
        .map(|(k, e)| (k.clone(), e.x.clone(), e.y))
        .collect()
}

/// One `improve(alpha)` call: re-solves a residual LP worth
/// `2 alpha (1/delta + 1)` of fractional mass, swaps the re-solved part in,
/// retightens the smallest integral components, and hands back `alpha` bins.
pub fn improve(
    sol: &mut PackedSolution,
    rounding: &RoundingState,
    params: &Params,
    alpha: u64,
    pool: &mut ColumnPool,
) -> Result<ImproveStats, ImproveError> {
    let e = params.e;
    let rows = size_rows(rounding);
    let m = rows.len() as u64;
    let x_norm = sol.norm_x();
    let y_norm = sol.norm_y();
    let x_floor = 2 * alpha * (e + 1);
    let y_floor = (m + 2) * (e + 2);
    if x_norm < rat_int(x_floor as i64) {
        return Err(ImproveError::FractionalTooSmall(x_norm, x_floor));
    }
    if y_norm < y_floor {
        return Err(ImproveError::IntegralTooSmall(y_norm, y_floor));
    }
    let mut stats = ImproveStats {
        alpha,
        x_before: x_norm.clone(),
        y_before: y_norm,
        ..Default::default()
    };
    let y_old: BTreeMap<ConfigKey, u64> =
        sol.entries.iter().map(|(k, e)| (k.clone(), e.y)).collect();

    let first_gid: BTreeMap<Rational, GroupId> =
        rows.iter().map(|(s, gids)| (s.clone(), gids[0])).collect();
    // Peel the variable mass off whole components, largest first; only the
    // boundary component splits. Any componentwise split with this total
    // supports the improvement analysis, and unlike a uniform rescale it
    // keeps denominators from compounding across events.
    let mut order: Vec<(Rational, ConfigKey)> = sol
        .entries
        .iter()
        .filter(|(_, e)| !e.x.is_zero())
        .map(|(k, e)| (e.x.clone(), k.clone()))
        .collect();
    order.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut x_fix: BTreeMap<ConfigKey, Rational> = BTreeMap::new();
    let mut budget = rat_int(x_floor as i64);
    for (x, key) in &order {
        if budget.is_zero() {
            x_fix.insert(key.clone(), x.clone());
        } else if *x <= budget {
            budget -= x;
        } else {
            x_fix.insert(key.clone(), x - &budget);
            budget = zero();
        }
    }
    assert!(budget.is_zero(), "norm precondition guarantees enough mass");

    // Residual demand per group under x_fix.
    let demands = rounding.demands();
    let mut fix_cov: BTreeMap<GroupId, Rational> = demands.keys().map(|g| (*g, zero())).collect();
    for (key, x) in &x_fix {
        for (g, c) in key {
            if let Some(cov) = fix_cov.get_mut(g) {
                *cov += x * rat_int(*c as i64);
            }
        }
    }
    let mut b_var_rows: Vec<(Rational, Rational)> = Vec::new();
    for (size, gids) in &rows {
        let mut need = zero();
        for g in gids {
            let short = rat_int(demands[g] as i64) - &fix_cov[g];
            if short > zero() {
                need += short;
            }
        }
        b_var_rows.push((size.clone(), need));
    }
    let ratio = one() + params.delta() / rat_int(2);
    let residual = approx_solve(&SizeLp::new(b_var_rows), &ratio, pool);
    stats.residual_lp_value = residual.value.clone();

    let fix_norm: Rational = x_fix.values().cloned().sum();
    let candidate_norm = &fix_norm + &residual.value;
    let support = support_entries(sol);

    let (x_prime, y_hat): (BTreeMap<ConfigKey, Rational>, BTreeMap<ConfigKey, u64>) =
        if candidate_norm >= x_norm {
            // No improvement: keep x and y, only the handback step runs.
            stats.took_no_progress_branch = true;
            let x_prime: BTreeMap<ConfigKey, Rational> =
                support.iter().map(|(k, x, _)| (k.clone(), x.clone())).collect();
            let y_hat: BTreeMap<ConfigKey, u64> =
                support.iter().map(|(k, _, y)| (k.clone(), *y)).collect();
            (x_prime, y_hat)
        } else {
            // Smallest integral components worth (m+2)(1/delta+2).
            let mut order: Vec<(u64, ConfigKey, Rational)> =
                support.iter().map(|(k, x, y)| (*y, k.clone(), x.clone())).collect();
            order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
            let mut zeroed: BTreeSet<ConfigKey> = BTreeSet::new();
            let mut prefix_sum = 0u64;
            for (y, key, _) in &order {
                if prefix_sum + y > y_floor {
                    break;
                }
                prefix_sum += y;
                zeroed.insert(key.clone());
            }
            // Pool the zeroed components' x mass with the residual solution
            // and reduce that bundle to at most m+1 columns.
            let mut bundle: BTreeMap<ConfigKey, Rational> = BTreeMap::new();
            for (cfg, v) in &residual.columns {
                let key = lift(cfg, &first_gid);
                *bundle.entry(key).or_insert_with(zero) += v.clone();
            }
            for (y, key, x) in &order {
                let _ = y;
                if zeroed.contains(key) && !x.is_zero() {
                    *bundle.entry(key.clone()).or_insert_with(zero) += x.clone();
                }
            }
            reduce_support(&mut bundle, rounding, (m + 1) as usize);
            // x' = the fixed part outside the zeroed set, plus the bundle.
            let mut x_prime: BTreeMap<ConfigKey, Rational> = BTreeMap::new();
            for (key, fix) in &x_fix {
                if !zeroed.contains(key) && !fix.is_zero() {
                    x_prime.insert(key.clone(), fix.clone());
                }
            }
            for (key, v) in bundle {
                if !v.is_zero() {
                    *x_prime.entry(key).or_insert_with(zero) += v;
                }
            }
            let mut y_hat: BTreeMap<ConfigKey, u64> = BTreeMap::new();
            for (key, _, y) in &support {
                if !zeroed.contains(key) {
                    y_hat.insert(key.clone(), *y);
                }
            }
            for (key, x) in &x_prime {
                let need = ceil_int(x).to_u64().unwrap_or(0);
                let slot = y_hat.entry(key.clone()).or_insert(0);
                if *slot < need {
                    *slot = need;
                }
            }
            (x_prime, y_hat)
        };

    // Hand back up to alpha (1/delta + 1) bins of slack, never letting any
    // size row drop below its demand.
    let budget = alpha * (e + 1);
    let mut target: BTreeMap<ConfigKey, (Rational, u64)> = y_hat
        .iter()
        .map(|(k, y)| (k.clone(), (x_prime.get(k).cloned().unwrap_or_else(zero), *y)))
        .collect();
    handback(&mut target, rounding, budget);
    target.retain(|_, (x, y)| *y > 0 || !x.is_zero());

    stats.emergency_covers = reconcile_groups(&mut target, rounding);
    let distance: u64 = {
        let keys: BTreeSet<ConfigKey> =
            target.keys().cloned().chain(y_old.keys().cloned()).collect();
        keys.iter()
            .map(|k| {
                let new = target.get(k).map(|(_, y)| *y).unwrap_or(0) as i64;
                let old = y_old.get(k).copied().unwrap_or(0) as i64;
                (new - old).unsigned_abs()
            })
            .sum()
    };
    sol.apply_target(target, rounding);
    stats.x_after = sol.norm_x();
    stats.y_after = sol.norm_y();
    stats.y_distance = distance;
    Ok(stats)
}

/// Trims the support after a deletion: the smallest `m+2` integral
/// components either certify the support is small already, or their
/// fractional mass is recombined into at most `m+1` columns.
pub fn reduce_components(
    sol: &mut PackedSolution,
    rounding: &RoundingState,
    params: &Params,
) -> ReduceStats {
    let rows = size_rows(rounding);
    let m = rows.len() as u64;
    let support = support_entries(sol);
    let mut stats = ReduceStats {
        support_before: support.len(),
        support_after: support.len(),
        ..Default::default()
    };
    if support.len() <= (m + 2) as usize {
        stats.early_exit = true;
        return stats;
    }
    let mut order: Vec<(u64, ConfigKey, Rational)> =
        support.iter().map(|(k, x, y)| (*y, k.clone(), x.clone())).collect();
    order.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.cmp(&b.1)));
    let chosen: Vec<(u64, ConfigKey, Rational)> =
        order.into_iter().take((m + 2) as usize).collect();
    let chosen_sum: u64 = chosen.iter().map(|(y, _, _)| y).sum();
    // (1/Delta + 2)(m + 2)
    let threshold = (one() / params.big_delta() + rat_int(2)) * rat_int((m + 2) as i64);
    if rat_int(chosen_sum as i64) >= threshold {
        stats.early_exit = true;
        return stats;
    }
    let y_old: BTreeMap<ConfigKey, u64> =
        sol.entries.iter().map(|(k, e)| (k.clone(), e.y)).collect();
    let mut bundle: BTreeMap<ConfigKey, Rational> = chosen
        .iter()
        .filter(|(_, _, x)| !x.is_zero())
        .map(|(_, k, x)| (k.clone(), x.clone()))
        .collect();
    reduce_support(&mut bundle, rounding, (m + 1) as usize);

    let chosen_keys: BTreeSet<ConfigKey> = chosen.iter().map(|(_, k, _)| k.clone()).collect();
    let mut target: BTreeMap<ConfigKey, (Rational, u64)> = BTreeMap::new();
    for (key, x, y) in &support {
        if !chosen_keys.contains(key) {
            target.insert(key.clone(), (x.clone(), *y));
        }
    }
    let mut budget = m + 1; // ||d||_1 cap from the handback step
    for (key, x) in bundle {
        let need = ceil_int(&x).to_u64().unwrap_or(0);
        target.insert(key, (x, need));
    }
    // Greedy handback, largest integral slack first.
    handback(&mut target, rounding, budget);
    budget = 0;
    let _ = budget;
    target.retain(|_, (x, y)| *y > 0 || !x.is_zero());
    stats.emergency_covers = reconcile_groups(&mut target, rounding);
    let distance: u64 = {
        let keys: BTreeSet<ConfigKey> =
            target.keys().cloned().chain(y_old.keys().cloned()).collect();
        keys.iter()
            .map(|k| {
                let new = target.get(k).map(|(_, y)| *y).unwrap_or(0) as i64;
                let old = y_old.get(k).copied().unwrap_or(0) as i64;
                (new - old).unsigned_abs()
            })
            .sum()
    };
    sol.apply_target(target, rounding);
    stats.support_after = sol.support_len();
    stats.y_distance = distance;
    stats
}
