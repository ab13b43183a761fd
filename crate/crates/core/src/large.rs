//! Event controller for large items: threshold-gated offline rebuilds, the
//! improve-then-operate dynamic path, and the block-balance loop keeping the
//! A fraction aligned with the fractional part of kappa.

use crate::lp::{
    improve, reduce_components, row_count, ColumnPool, ConfigKey, ImproveStats, PackedSolution,
};
use crate::model::{BinId, Item, ItemId, Packing};
use crate::params::Params;
use crate::rational::{ceil_int, floor_int, frac, one, rat_int, zero, Rational};
use crate::rounding::{Block, RoundingState};
use num_traits::{ToPrimitive, Zero};
use std::collections::BTreeMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Below the size thresholds: every event rebuilds from scratch.
    Offline,
    /// Above the thresholds: incremental operations with bounded repacking.
    Dynamic,
}

#[derive(Debug, Clone, Default)]
pub struct LargeEventReport {
    pub offline: bool,
    /// shiftA/shiftB operations performed by the balance loop.
    pub d: usize,
    pub improves: Vec<ImproveStats>,
    pub reduce_ran: bool,
    pub emergency_covers: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum LargeError {
    #[error(transparent)]
    Rounding(#[from] crate::rounding::RoundingError),
}

#[derive(Debug, Clone)]
pub struct LargeState {
    pub rounding: RoundingState,
    pub sol: PackedSolution,
    pub pool: ColumnPool,
    pub mode: Mode,
}

impl Default for LargeState {
    fn default() -> Self {
        Self::new()
    }
}

impl LargeState {
    pub fn new() -> Self {
        LargeState {
            rounding: RoundingState::new(1),
            sol: PackedSolution::new(),
            pool: ColumnPool::new(),
            mode: Mode::Offline,
        }
    }

    pub fn bins_used(&self) -> usize {
        self.sol.non_empty_bins()
    }

    pub fn norm_y(&self) -> u64 {
        self.sol.norm_y()
    }

    pub fn packing(&self) -> Packing {
        self.sol.to_packing(&self.rounding)
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.rounding.contains(id)
    }

    pub fn total_size(&self) -> Rational {
        self.rounding.total_size()
    }

    fn k_target(&self, params: &Params, size: &Rational) -> u64 {
        let kappa = params.kappa(size);
        floor_int(&kappa).to_u64().unwrap_or(0)
    }

    /// The offline/dynamic gate: both paper thresholds plus the structural
    /// floor `k >= 2` that the block machinery needs.
    fn use_offline(&self, params: &Params, post_size: &Rational, m: u64) -> bool {
        let e = params.e;
        *post_size < rat_int(((m + 2) * (e + 2)) as i64)
            || *post_size < rat_int((8 * (e + 1)) as i64)
            || self.k_target(params, post_size) < 2
    }

    pub fn on_insert(&mut self, item: &Item, params: &Params) -> Result<LargeEventReport, LargeError> {
        let post_size = self.rounding.total_size() + &item.size;
        let m = row_count(&self.rounding) as u64;
        if self.use_offline(params, &post_size, m) {
            let mut items = self.rounding.live_items();
            items.push(item.clone());
            self.rebuild_offline(&items, params)?;
            return Ok(LargeEventReport { offline: true, ..Default::default() });
        }
        let mut report = LargeEventReport::default();
        match improve(&mut self.sol, &self.rounding, params, 2, &mut self.pool) {
            Ok(stats) => {
                report.emergency_covers += stats.emergency_covers;
                report.improves.push(stats);
            }
            Err(_) => {
                let mut items = self.rounding.live_items();
                items.push(item.clone());
                self.rebuild_offline(&items, params)?;
                return Ok(LargeEventReport { offline: true, ..Default::default() });
            }
        }
        let out = self.rounding.insert_large(item, params)?;
        self.sol.apply_insert(&out, item, &self.rounding);
        self.mode = Mode::Dynamic;
        self.balance_blocks(params, &mut report)?;
        self.trim_support(params, &mut report);
        Ok(report)
    }

    pub fn on_delete(&mut self, id: ItemId, params: &Params) -> Result<LargeEventReport, LargeError> {
        let size = self
            .rounding
            .item_size(id)
            .cloned()
            .ok_or(crate::rounding::RoundingError::UnknownItem(id))?;
        let post_size = self.rounding.total_size() - &size;
        let m = row_count(&self.rounding) as u64;
        if self.use_offline(params, &post_size, m) {
            let items: Vec<Item> =
                self.rounding.live_items().into_iter().filter(|i| i.id != id).collect();
            self.rebuild_offline(&items, params)?;
            return Ok(LargeEventReport { offline: true, ..Default::default() });
        }
        let mut report = LargeEventReport::default();
        match improve(&mut self.sol, &self.rounding, params, 4, &mut self.pool) {
            Ok(stats) => {
                report.emergency_covers += stats.emergency_covers;
                report.improves.push(stats);
            }
            Err(_) => {
                let items: Vec<Item> =
                    self.rounding.live_items().into_iter().filter(|i| i.id != id).collect();
                self.rebuild_offline(&items, params)?;
                return Ok(LargeEventReport { offline: true, ..Default::default() });
            }
        }
        let out = self.rounding.delete_large(id)?;
        self.sol.apply_delete(id, &out, &self.rounding);
        let reduce = reduce_components(&mut self.sol, &self.rounding, params);
        report.emergency_covers += reduce.emergency_covers;
        report.reduce_ran = !reduce.early_exit;
        self.mode = Mode::Dynamic;
        self.balance_blocks(params, &mut report)?;
        Ok(report)
    }

    /// Keeps `k` and the A-block count aligned with kappa: renames blocks at
    /// integer crossings and moves one group per shiftA/shiftB, each preceded
    /// by an improve call as the event budget demands.
    fn balance_blocks(&mut self, params: &Params, report: &mut LargeEventReport) -> Result<(), LargeError> {
        let size = self.rounding.total_size();
        let kappa = params.kappa(&size);
        let k_target = floor_int(&kappa).to_u64().unwrap_or(0).max(2);
        let frac_part = frac(&kappa);
        let mut fuel = 64usize;
        loop {
            fuel -= 1;
            assert!(fuel > 0, "block balance loop diverged");
            let (a, b) = self.rounding.block_counts();
            let k = self.rounding.k();
            let dir = if k < k_target {
                if b == 0 {
                    let out = self.rounding.rename_blocks(k + 1);
                    self.sol.apply_rename(&out);
                    continue;
                }
                Block::A
            } else if k > k_target {
                if self.rename_down_ready() {
                    let out = self.rounding.rename_blocks(k - 1);
                    self.sol.apply_rename(&out);
                    continue;
                }
                Block::B
            } else {
                if a + b == 0 {
                    break;
                }
                let i = floor_int(&(&frac_part * rat_int((a + b) as i64)))
                    .to_u64()
                    .unwrap_or(0);
                if a < i {
                    Block::A
                } else if a > i {
                    if !self.any_shift_b() {
                        // Every category is down to its partial front group;
                        // the fraction cannot be lowered further.
                        break;
                    }
                    Block::B
                } else {
                    break;
                }
            };
            let alpha = match dir {
                Block::A => 1,
                Block::B => 3,
            };
            match improve(&mut self.sol, &self.rounding, params, alpha, &mut self.pool) {
                Ok(stats) => {
                    report.emergency_covers += stats.emergency_covers;
                    report.improves.push(stats);
                }
                Err(_) => {
                    let items = self.rounding.live_items();
                    self.rebuild_offline(&items, params)?;
                    return Ok(());
                }
            }
            match dir {
                Block::A => {
                    let ell = self.pick_shift_a();
                    let out = self.rounding.shift_a(ell)?;
                    self.sol.apply_block_shift(&out, &self.rounding);
                }
                Block::B => {
                    let ell = self.pick_shift_b();
                    let out = self.rounding.shift_b(ell)?;
                    self.sol.apply_block_shift(&out, &self.rounding);
                }
            }
            report.d += 1;
        }
        Ok(())
    }

    fn rename_down_ready(&self) -> bool {
        self.rounding
            .categories()
            .all(|ell| !self.rounding.shift_b_viable(ell))
    }

    fn any_shift_b(&self) -> bool {
        self.rounding.categories().any(|ell| self.rounding.shift_b_viable(ell))
    }

    /// Category with the most B groups (viable ones first, then smallest l).
    fn pick_shift_a(&self) -> u32 {
        let mut best: Option<(bool, usize, std::cmp::Reverse<u32>)> = None;
        let mut pick = 0;
        for ell in self.rounding.categories() {
            let b_groups = self
                .rounding
                .category_groups(ell)
                .into_iter()
                .filter(|g| {
                    matches!(self.rounding.key_of(*g), Some(k) if k.block == Block::B)
                })
                .count();
            if b_groups == 0 {
                continue;
            }
            let score = (self.rounding.shift_a_viable(ell), b_groups, std::cmp::Reverse(ell));
            if best.as_ref().map_or(true, |b| score > *b) {
                best = Some(score);
                pick = ell;
            }
        }
        pick
    }

    fn pick_shift_b(&self) -> u32 {
        let mut pick = 0;
        let mut best = 0usize;
        for ell in self.rounding.categories() {
            if !self.rounding.shift_b_viable(ell) {
                continue;
            }
            let a_groups = self
                .rounding
                .category_groups(ell)
                .into_iter()
                .filter(|g| {
                    matches!(self.rounding.key_of(*g), Some(k) if k.block == Block::A)
                })
                .count();
            if a_groups > best {
                best = a_groups;
                pick = ell;
            }
        }
        pick
    }

    /// Keeps the support within the advisory bound by extra reduce passes
    /// after inserts (the shift edits may add up to two components each).
    fn trim_support(&mut self, params: &Params, report: &mut LargeEventReport) {
        let m = row_count(&self.rounding) as u64;
        let size = self.rounding.total_size();
        let opt_lb = ceil_int(&size).to_u64().unwrap_or(0).max(1);
        let bound = ceil_int(&(params.big_delta() * rat_int(opt_lb as i64)))
            .to_u64()
            .unwrap_or(0)
            + m
            + 2;
        let mut guard = 8;
        while self.sol.support_len() as u64 > bound && guard > 0 {
            guard -= 1;
            let stats = reduce_components(&mut self.sol, &self.rounding, params);
            report.emergency_covers += stats.emergency_covers;
            if stats.early_exit {
                break;
            }
        }
    }

    /// Full rebuild: regroup per the rounding properties with blocks aligned
    /// to kappa's fractional part, solve the LP exactly, round up and trim,
    /// and reseat every item.
    pub fn rebuild_offline(&mut self, items: &[Item], params: &Params) -> Result<(), LargeError> {
        let size: Rational = items.iter().map(|i| i.size.clone()).sum();
        let kappa = params.kappa(&size);
        let k = floor_int(&kappa).to_u64().unwrap_or(0).max(1);
        let frac_part = frac(&kappa);
        self.rounding = RoundingState::rebuild(items, k, Some(&frac_part), params)?;
        let lp = crate::lp::build_lp(&self.rounding);
        let solution = crate::lp::approx_solve(&lp.to_size_lp(), &one(), &mut self.pool);
        // Lift size configurations onto the first group of each size.
        let mut first_gid = BTreeMap::new();
        for gid in self.rounding.all_groups() {
            let s = self.rounding.group_rounded_size(gid).expect("live group");
            first_gid.entry(s).or_insert(gid);
        }
        let mut target: BTreeMap<ConfigKey, (Rational, u64)> = BTreeMap::new();
        for (cfg, x) in &solution.columns {
            let mut slots: BTreeMap<crate::rounding::GroupId, u32> = BTreeMap::new();
            for (s, count) in cfg {
                *slots.entry(first_gid[s]).or_insert(0) += *count as u32;
            }
            let key: ConfigKey = slots.into_iter().collect();
            let entry = target.entry(key).or_insert((zero(), 0));
            entry.0 += x.clone();
        }
        // y = ceil(x) componentwise, then trim surplus bins that neither
        // dominance nor coverage needs.
        for (_, entry) in target.iter_mut() {
            entry.1 = ceil_int(&entry.0).to_u64().unwrap_or(0);
        }
        crate::lp::improve::reconcile_groups(&mut target, &self.rounding);
        self.trim_target(&mut target);
        let floor = self.sol.next_bin_id();
        self.sol = PackedSolution::with_bin_floor(floor.max(1));
        self.sol.apply_target(target, &self.rounding);
        self.sol.seat_all_items(&self.rounding);
        self.mode = Mode::Offline;
        Ok(())
    }

    fn trim_target(&self, target: &mut BTreeMap<ConfigKey, (Rational, u64)>) {
        let demands = self.rounding.demands();
        let mut coverage: BTreeMap<crate::rounding::GroupId, u64> =
            demands.keys().map(|g| (*g, 0)).collect();
        for (key, (_, y)) in target.iter() {
            for (g, c) in key {
                *coverage.get_mut(g).unwrap() += (*c as u64) * *y;
            }
        }
        let keys: Vec<ConfigKey> = target.keys().cloned().collect();
        for key in keys {
            loop {
                let (x, y) = target.get(&key).cloned().unwrap();
                if y == 0 || rat_int((y - 1) as i64) < x {
                    break;
                }
                let removable = key.iter().all(|(g, c)| {
                    coverage[g] >= demands[g] + *c as u64
                });
                if !removable {
                    break;
                }
                for (g, c) in &key {
                    *coverage.get_mut(g).unwrap() -= *c as u64;
                }
                target.get_mut(&key).unwrap().1 -= 1;
            }
        }
        target.retain(|_, (x, y)| *y > 0 || !x.is_zero());
    }

    /// Structural audit: rounding properties, pair/bin consistency, the k
    /// parameter, and (in dynamic mode) the block-fraction interval.
    pub fn verify(&self, params: &Params) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for v in self.rounding.verify(params) {
            out.push(v.0);
        }
        for v in self.sol.verify(&self.rounding) {
            out.push(v.0);
        }
        if self.rounding.is_empty() {
            return out;
        }
        let size = self.rounding.total_size();
        let kappa = params.kappa(&size);
        let k_target = floor_int(&kappa).to_u64().unwrap_or(0);
        match self.mode {
            Mode::Offline => {
                if self.rounding.k() != k_target.max(1) {
                    out.push(format!(
                        "offline k = {} but kappa floor is {}",
                        self.rounding.k(),
                        k_target.max(1)
                    ));
                }
            }
            Mode::Dynamic => {
                if self.rounding.k() != k_target.max(2) {
                    out.push(format!(
                        "dynamic k = {} but kappa floor is {k_target}",
                        self.rounding.k()
                    ));
                }
                let (a, b) = self.rounding.block_counts();
                if a + b > 0 {
                    let n = rat_int((a + b) as i64);
                    let lo = rat_int(a as i64) / &n;
                    let hi = rat_int((a + 1) as i64) / &n;
                    let f = frac(&kappa);
                    let interval_ok = f >= lo && f < hi;
                    let stalled_high = f < rat_int(a as i64) / &n && !self.any_shift_b();
                    if !interval_ok && !stalled_high {
                        out.push(format!(
                            "block fraction {a}/{} misses Delta(t) = {}",
                            a + b,
                            crate::rational::format_rational(&f)
                        ));
                    }
                }
            }
        }
        out
    }

    /// Bin capacities for packing validation (unit bins here).
    pub fn capacities(&self) -> BTreeMap<BinId, Rational> {
        BTreeMap::new()
    }
}

/// Standalone realization used by tests: bins exactly matching an integral
/// solution, items seated greedily by descending size.
pub fn realize_packing(
    target: BTreeMap<ConfigKey, (Rational, u64)>,
    rounding: &RoundingState,
) -> PackedSolution {
    let mut sol = PackedSolution::new();
    sol.apply_target(target, rounding);
    sol.seat_all_items(rounding);
    sol
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat;
    use rand::{Rng, SeedableRng};

    fn params() -> Params {
        Params::new(4).unwrap()
    }

    #[test]
    fn offline_small_instances() {
        let p = params();
        let mut st = LargeState::new();
        st.on_insert(&Item::new(1, rat(1, 2)), &p).unwrap();
        st.on_insert(&Item::new(2, rat(1, 2)), &p).unwrap();
        assert_eq!(st.mode, Mode::Offline);
        assert_eq!(st.bins_used(), 1);
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
    }

    #[test]
    fn offline_five_thirds() {
        let p = params();
        let mut st = LargeState::new();
        for i in 1..=5u64 {
            st.on_insert(&Item::new(i, rat(1, 3)), &p).unwrap();
        }
        // five thirds pack into 2 bins (3 + 2)
        assert_eq!(st.bins_used(), 2);
        assert!(st.verify(&p).is_empty());
    }

    #[test]
    fn empty_delete_cycle() {
        let p = params();
        let mut st = LargeState::new();
        st.on_insert(&Item::new(1, rat(2, 5)), &p).unwrap();
        st.on_delete(1, &p).unwrap();
        assert_eq!(st.bins_used(), 0);
        assert!(st.rounding.is_empty());
        assert!(st.on_delete(7, &p).is_err());
    }

    #[test]
    fn realize_respects_capacity() {
        let p = params();
        let items: Vec<Item> = (0..6).map(|i| Item::new(i + 1, rat(1, 2))).collect();
        let rounding = RoundingState::rebuild(&items, 1, None, &p).unwrap();
        // rebuild at k=1 chunks the six halves into three groups of two
        let mut target: BTreeMap<ConfigKey, (Rational, u64)> = BTreeMap::new();
        for gid in rounding.all_groups() {
            target.insert(vec![(gid, 2)], (rat_int(1), 1));
        }
        let sol = realize_packing(target, &rounding);
        assert!(sol.verify(&rounding).is_empty(), "{:?}", sol.verify(&rounding));
        assert_eq!(sol.non_empty_bins(), 3);
    }

    #[test]
    fn dynamic_stream_stays_consistent() {
        let p = params();
        let mut st = LargeState::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(13);
        let mut live: Vec<ItemId> = Vec::new();
        let mut next = 1u64;
        let mut seen_dynamic = false;
        for step in 0..600 {
            if live.len() < 40 || rng.gen_bool(0.7) {
                let size = rat(rng.gen_range(8..=28), 28);
                let item = Item::new(next, size);
                st.on_insert(&item, &p).unwrap();
                live.push(next);
                next += 1;
            } else {
                let idx = rng.gen_range(0..live.len());
                let id = live.swap_remove(idx);
                st.on_delete(id, &p).unwrap();
            }
            seen_dynamic |= st.mode == Mode::Dynamic;
            let report = st.verify(&p);
            assert!(report.is_empty(), "step {step}: {report:?}\n{}", st.rounding.dump());
        }
        assert!(seen_dynamic, "stream never left the offline regime");
    }

    #[test]
    fn dynamic_shift_budget_holds() {
        let p = params();
        let mut st = LargeState::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(21);
        let mut live: Vec<ItemId> = Vec::new();
        let mut next = 1u64;
        for _ in 0..500 {
            let report = if live.len() < 30 || rng.gen_bool(0.75) {
                let size = rat(rng.gen_range(15..=28), 28);
                let item = Item::new(next, size);
                live.push(next);
                next += 1;
                st.on_insert(&item, &p).unwrap()
            } else {
                let idx = rng.gen_range(0..live.len());
                let id = live.swap_remove(idx);
                st.on_delete(id, &p).unwrap()
            };
            assert!(report.d <= 11, "shift budget exceeded: {}", report.d);
            assert_eq!(report.emergency_covers, 0);
        }
    }
}
