//! The coupled fractional/integral solution pair and its realization as
//! concrete bins.
//!
//! Configurations are keyed by rounding-group identity: a slot of group `g`
//! has size `s^R(g)` (the group's current maximum), so re-rounding after a
//! chain shift never invalidates a configuration - slot sizes only shrink.
//! The integral solution `y` always equals the bin histogram; `x` rides
//! along under the dominance constraint `x_C <= y_C`.

use crate::model::{BinId, Item, ItemId, Packing};
use crate::rational::{one, zero, Rational};
use crate::rounding::{GroupId, InsertOutcome, Rekey, RoundingState, ShiftTrace};
use num_traits::Zero;
use std::collections::{BTreeMap, BTreeSet};

pub type ConfigKey = Vec<(GroupId, u32)>;

pub fn config_key(slots: &BTreeMap<GroupId, u32>) -> ConfigKey {
    slots.iter().filter(|(_, c)| **c > 0).map(|(g, c)| (*g, *c)).collect()
}

#[derive(Debug, Clone, Default)]
pub struct PairEntry {
    pub x: Rational,
    pub y: u64,
}

#[derive(Debug, Clone, Default)]
pub struct BinSlots {
    pub slots: BTreeMap<GroupId, u32>,
    pub items: BTreeMap<GroupId, BTreeSet<ItemId>>,
}

impl BinSlots {
    pub fn occupancy(&self, g: GroupId) -> (u32, u32) {
        let slots = self.slots.get(&g).copied().unwrap_or(0);
        let items = self.items.get(&g).map(|s| s.len() as u32).unwrap_or(0);
        (slots, items)
    }

    pub fn item_count(&self) -> usize {
        self.items.values().map(|s| s.len()).sum()
    }
}

#[derive(Debug, Clone)]
pub struct LpViolation(pub String);

#[derive(Debug, Clone, Default)]
pub struct PackedSolution {
    pub entries: BTreeMap<ConfigKey, PairEntry>,
    pub bins: BTreeMap<BinId, BinSlots>,
    item_bin: BTreeMap<ItemId, BinId>,
    next_bin: BinId,
    /// Fractional mass displaced by a dominance transfer, pending relocation
    /// onto the destination configuration of the same bin edit.
    spilled_x: Rational,
}

/// Accumulates the fresh bins of one composite block shift so its chain
/// shifts share destination bins instead of opening one each.
#[derive(Debug, Default)]
pub struct PooledBins {
    bins: Vec<BinId>,
}

impl PackedSolution {
    pub fn new() -> Self {
        PackedSolution { next_bin: 1, ..Default::default() }
    }

    pub fn with_bin_floor(first_bin: BinId) -> Self {
        PackedSolution { next_bin: first_bin, ..Default::default() }
    }

    pub fn next_bin_id(&self) -> BinId {
        self.next_bin
    }

    pub fn norm_x(&self) -> Rational {
        self.entries.values().map(|e| e.x.clone()).sum()
    }

    pub fn norm_y(&self) -> u64 {
        self.entries.values().map(|e| e.y).sum()
    }

    pub fn support_len(&self) -> usize {
        self.entries.values().filter(|e| e.y > 0 || !e.x.is_zero()).count()
    }

    pub fn bin_of(&self, item: ItemId) -> Option<BinId> {
        self.item_bin.get(&item).copied()
    }

    pub fn bin_load(&self, bin: BinId, rounding: &RoundingState) -> Rational {
        let Some(b) = self.bins.get(&bin) else { return zero() };
        b.items
            .values()
            .flatten()
            .map(|id| rounding.item_size(*id).cloned().unwrap_or_else(zero))
            .sum()
    }

    fn bump_y(&mut self, key: &ConfigKey, delta: i64) {
        if key.is_empty() {
            return;
        }
        let entry = self.entries.entry(key.clone()).or_default();
        if delta >= 0 {
            entry.y += delta as u64;
        } else {
            let d = (-delta) as u64;
            assert!(entry.y >= d, "y underflow on {key:?}");
            entry.y -= d;
            // A full unit of x migrates with the bin (clamped by what is
            // there), which keeps the fractional solution covering; the
            // dominance excess is contained in it.
            let transfer = entry.x.clone().min(one());
            if !transfer.is_zero() {
                entry.x -= &transfer;
                self.spilled_x += transfer;
            }
        }
        if entry.y == 0 && entry.x.is_zero() {
            self.entries.remove(key);
        }
    }

    pub fn bump_x(&mut self, key: &ConfigKey, delta: Rational) {
        if key.is_empty() || delta.is_zero() {
            return;
        }
        let entry = self.entries.entry(key.clone()).or_default();
        entry.x += delta;
        assert!(entry.x >= zero(), "x underflow on {key:?}");
        assert!(
            entry.x <= crate::rational::rat_int(entry.y as i64),
            "dominance violated on {key:?}"
        );
        if entry.y == 0 && entry.x.is_zero() {
            self.entries.remove(key);
        }
    }

    /// Opens a fresh bin with the given slots; `y` grows by one and `x` by
    /// `x_bump` (clamped by dominance).
    pub fn open_bin(&mut self, slots: BTreeMap<GroupId, u32>, x_bump: &Rational) -> BinId {
        let id = self.next_bin;
        self.next_bin += 1;
        let key = config_key(&slots);
        self.bins.insert(id, BinSlots { slots, items: BTreeMap::new() });
        self.bump_y(&key, 1);
        if !x_bump.is_zero() {
            let entry = self.entries.get(&key).unwrap();
            let room = crate::rational::rat_int(entry.y as i64) - &entry.x;
            let add = x_bump.clone().min(room);
            self.bump_x(&key, add);
        }
        id
    }

    /// Rewrites a bin's slots; the config histogram follows.
    fn set_bin_slots(&mut self, bin: BinId, new_slots: BTreeMap<GroupId, u32>) {
        let old_key = config_key(&self.bins[&bin].slots);
        let new_key = config_key(&new_slots);
        if old_key != new_key {
            self.bump_y(&old_key, -1);
            self.bump_y(&new_key, 1);
            // Spilled x mass follows the bin to its new configuration; a
            // bin stripped bare has nowhere for it and the mass is dropped
            // (x only ever shrinks this way, which is the safe direction).
            let spill = std::mem::take(&mut self.spilled_x);
            if !spill.is_zero() && !new_key.is_empty() {
                let entry = self.entries.get(&new_key).unwrap();
                let room = crate::rational::rat_int(entry.y as i64) - &entry.x;
                self.bump_x(&new_key, spill.min(room));
            }
        }
        self.bins.get_mut(&bin).unwrap().slots = new_slots;
    }

    pub fn place_item(&mut self, bin: BinId, item: ItemId, group: GroupId) {
        let b = self.bins.get_mut(&bin).unwrap_or_else(|| panic!("no bin {bin}"));
        let (slots, occupied) = {
            let slots = b.slots.get(&group).copied().unwrap_or(0);
            let occ = b.items.get(&group).map(|s| s.len() as u32).unwrap_or(0);
            (slots, occ)
        };
        assert!(occupied < slots, "no vacant slot of group {group} in bin {bin}");
        b.items.entry(group).or_default().insert(item);
        self.item_bin.insert(item, bin);
    }

    pub fn remove_item(&mut self, item: ItemId) -> (BinId, GroupId) {
        let bin = self.item_bin.remove(&item).unwrap_or_else(|| panic!("item {item} unpacked"));
        let b = self.bins.get_mut(&bin).unwrap();
        let group = *b
            .items
            .iter()
            .find(|(_, set)| set.contains(&item))
            .map(|(g, _)| g)
            .unwrap_or_else(|| panic!("item {item} missing from bin {bin}"));
        let set = b.items.get_mut(&group).unwrap();
        set.remove(&item);
        if set.is_empty() {
            b.items.remove(&group);
        }
        (bin, group)
    }

    /// Drops one (vacant) slot of `group` from `bin`.
    fn drop_slot(&mut self, bin: BinId, group: GroupId) {
        let b = &self.bins[&bin];
        let (slots, occupied) = b.occupancy(group);
        assert!(slots > occupied, "dropping an occupied slot of {group} in {bin}");
        let mut new_slots = b.slots.clone();
        if slots == 1 {
            new_slots.remove(&group);
        } else {
            new_slots.insert(group, slots - 1);
        }
        self.set_bin_slots(bin, new_slots);
        self.drop_bin_if_bare(bin);
    }

    fn drop_bin_if_bare(&mut self, bin: BinId) {
        if let Some(b) = self.bins.get(&bin) {
            if b.slots.values().all(|c| *c == 0) || b.slots.is_empty() {
                assert!(b.item_count() == 0);
                self.bins.remove(&bin);
            }
        }
    }

    /// Applies a chain shift: the first mover opens (or joins) a fresh bin
    /// keyed to the left endpoint, each later mover takes the slot its
    /// predecessor vacated, and the right endpoint loses one slot.
    pub fn apply_shift(
        &mut self,
        trace: &ShiftTrace,
        rounding: &RoundingState,
        mut pooled: Option<&mut PooledBins>,
    ) {
        if trace.moves.is_empty() {
            return;
        }
        let old_bins: Vec<BinId> = trace
            .moves
            .iter()
            .map(|mv| self.bin_of(mv.item).unwrap_or_else(|| panic!("mover {} unpacked", mv.item)))
            .collect();
        for (i, mv) in trace.moves.iter().enumerate() {
            self.remove_item(mv.item);
            if i == 0 {
                match pooled.as_deref_mut() {
                    Some(pool) => {
                        let bin = self.pooled_place(pool, mv.to, rounding);
                        self.place_item(bin, mv.item, mv.to);
                    }
                    None => {
                        let mut slots = BTreeMap::new();
                        slots.insert(mv.to, 1);
                        let bin = self.open_bin(slots, &one());
                        self.place_item(bin, mv.item, mv.to);
                    }
                }
            } else {
                self.place_item(old_bins[i - 1], mv.item, mv.to);
            }
        }
        if let Some(shrunk) = trace.shrunk {
            let donor = *old_bins.last().unwrap();
            self.drop_slot(donor, shrunk);
        }
    }

    /// Places a slot of `group` into one of the composite operation's shared
    /// fresh bins, opening another only when none has room.
    fn pooled_place(&mut self, pool: &mut PooledBins, group: GroupId, rounding: &RoundingState) -> BinId {
        let size = rounding.group_rounded_size(group).expect("live group");
        for &bin in &pool.bins {
            if !self.bins.contains_key(&bin) {
                continue;
            }
            let load: Rational = self.bins[&bin]
                .slots
                .iter()
                .map(|(g, c)| {
                    rounding.group_rounded_size(*g).unwrap_or_else(zero)
                        * crate::rational::rat_int(*c as i64)
                })
                .sum();
            if &load + &size <= one() {
                let mut new_slots = self.bins[&bin].slots.clone();
                *new_slots.entry(group).or_insert(0) += 1;
                self.set_bin_slots(bin, new_slots);
                return bin;
            }
        }
        let mut slots = BTreeMap::new();
        slots.insert(group, 1);
        let bin = self.open_bin(slots, &one());
        pool.bins.push(bin);
        bin
    }

    /// Group splits: each listed item re-keys its occupied slot in place.
    pub fn apply_rekey(&mut self, rekey: &Rekey) {
        for item in &rekey.items {
            let bin = self.bin_of(*item).unwrap_or_else(|| panic!("item {item} unpacked"));
            let b = self.bins.get_mut(&bin).unwrap();
            let set = b.items.get_mut(&rekey.old_group).expect("item set");
            assert!(set.remove(item));
            if set.is_empty() {
                b.items.remove(&rekey.old_group);
            }
            b.items.entry(rekey.new_group).or_default().insert(*item);
            let mut new_slots = b.slots.clone();
            let old = new_slots.get_mut(&rekey.old_group).expect("slot");
            *old -= 1;
            if *old == 0 {
                new_slots.remove(&rekey.old_group);
            }
            *new_slots.entry(rekey.new_group).or_insert(0) += 1;
            self.set_bin_slots(bin, new_slots);
        }
    }

    /// Strips now-dead groups' vacant slots from every bin and entry.
    pub fn purge_groups(&mut self, dead: &[GroupId]) {
        if dead.is_empty() {
            return;
        }
        let dead: BTreeSet<GroupId> = dead.iter().copied().collect();
        let bins: Vec<BinId> = self.bins.keys().copied().collect();
        for bin in bins {
            let b = &self.bins[&bin];
            if !b.slots.keys().any(|g| dead.contains(g)) {
                continue;
            }
            for g in &dead {
                assert!(
                    b.items.get(g).map_or(true, |s| s.is_empty()),
                    "dead group {g} still has items in bin {bin}"
                );
            }
            let new_slots: BTreeMap<GroupId, u32> = b
                .slots
                .iter()
                .filter(|(g, _)| !dead.contains(g))
                .map(|(g, c)| (*g, *c))
                .collect();
            self.set_bin_slots(bin, new_slots);
            self.drop_bin_if_bare(bin);
        }
        // Orphaned x mass on dead-group configs has nowhere meaningful to go.
        self.spilled_x = zero();
    }

    /// Inserts a large item per the paper's bookkeeping: fresh singleton bin
    /// for the newcomer, the chain shift, a possible front split, and the
    /// capacity repair when the item became a new category maximum.
    pub fn apply_insert(&mut self, out: &InsertOutcome, item: &Item, rounding: &RoundingState) {
        let mut slots = BTreeMap::new();
        slots.insert(out.group, 1);
        let bin = self.open_bin(slots, &one());
        self.place_item(bin, item.id, out.group);
        self.apply_shift(&out.shift, rounding, None);
        if let Some(split) = &out.front_split {
            self.apply_rekey(split);
        }
        if let Some(grown) = out.grew_group_max {
            self.repair_capacity(grown, rounding);
        }
    }

    pub fn apply_delete(
        &mut self,
        departed: ItemId,
        out: &crate::rounding::DeleteOutcome,
        rounding: &RoundingState,
    ) {
        // The departed item leaves its slot vacant; the chain and purges run
        // against the already-updated rounding.
        self.remove_item(departed);
        self.apply_shift(&out.shift, rounding, None);
        for rekey in &out.rekeys {
            self.apply_rekey(rekey);
        }
        self.purge_groups(&out.removed_groups);
    }

    pub fn apply_block_shift(
        &mut self,
        out: &crate::rounding::BlockShiftOutcome,
        rounding: &RoundingState,
    ) {
        let mut pool = PooledBins::default();
        for trace in &out.shifts {
            self.apply_shift(trace, rounding, Some(&mut pool));
        }
        for rekey in &out.front_splits {
            self.apply_rekey(rekey);
        }
        let removed: Vec<GroupId> =
            out.shifts.iter().flat_map(|t| t.removed_groups.clone()).collect();
        self.purge_groups(&removed);
    }

    pub fn apply_rename(&mut self, out: &crate::rounding::RenameOutcome) {
        for rekey in &out.rekeys {
            self.apply_rekey(rekey);
        }
    }

    /// Evicts slots from bins whose configuration no longer fits after a
    /// group's rounded size grew (a new category maximum arrived).
    pub fn repair_capacity(&mut self, grown: GroupId, rounding: &RoundingState) {
        let bins: Vec<BinId> = self.bins.keys().copied().collect();
        for bin in bins {
            loop {
                let Some(b) = self.bins.get(&bin) else { break };
                let load: Rational = b
                    .slots
                    .iter()
                    .map(|(g, c)| {
                        rounding.group_rounded_size(*g).unwrap_or_else(zero)
                            * crate::rational::rat_int(*c as i64)
                    })
                    .sum();
                if load <= one() {
                    break;
                }
                // Prefer dropping a vacant slot of the grown group, then of
                // any group; as a last resort move an item out.
                let vacant = b
                    .slots
                    .keys()
                    .copied()
                    .filter(|g| {
                        let (s, o) = b.occupancy(*g);
                        s > o
                    })
                    .max_by_key(|g| (*g == grown, *g));
                if let Some(g) = vacant {
                    self.drop_slot(bin, g);
                    continue;
                }
                // All slots occupied: relocate one item of the grown group
                // (or the largest-slot group) to a fresh singleton bin.
                let g = if b.slots.contains_key(&grown) { grown } else { *b.slots.keys().next().unwrap() };
                let victim = *self.bins[&bin].items[&g].iter().next().unwrap();
                self.remove_item(victim);
                self.drop_occupiable_slot(bin, g);
                let mut slots = BTreeMap::new();
                slots.insert(g, 1);
                let fresh = self.open_bin(slots, &zero());
                self.place_item(fresh, victim, g);
            }
        }
    }

    fn drop_occupiable_slot(&mut self, bin: BinId, group: GroupId) {
        let b = &self.bins[&bin];
        let mut new_slots = b.slots.clone();
        let c = new_slots.get_mut(&group).expect("slot");
        *c -= 1;
        if *c == 0 {
            new_slots.remove(&group);
        }
        self.set_bin_slots(bin, new_slots);
        self.drop_bin_if_bare(bin);
    }

    /// Coverage of one group by the integral solution.
    pub fn y_coverage(&self, g: GroupId) -> u64 {
        self.entries
            .iter()
            .map(|(key, e)| {
                key.iter().find(|(gid, _)| *gid == g).map(|(_, c)| *c as u64).unwrap_or(0) * e.y
            })
            .sum()
    }

    /// Rebuilds the physical bins to match explicit target entries. Excess
    /// bins close (largest ids first), missing bins open fresh, displaced
    /// items re-seat into vacant slots in bin order.
    pub fn apply_target(
        &mut self,
        target: BTreeMap<ConfigKey, (Rational, u64)>,
        rounding: &RoundingState,
    ) {
        let mut by_config: BTreeMap<ConfigKey, Vec<BinId>> = BTreeMap::new();
        for (id, b) in &self.bins {
            by_config.entry(config_key(&b.slots)).or_default().push(*id);
        }
        let mut staged: Vec<(GroupId, ItemId)> = Vec::new();
        let keys: BTreeSet<ConfigKey> =
            by_config.keys().cloned().chain(target.keys().cloned()).collect();
        for key in keys {
            let have = by_config.get(&key).cloned().unwrap_or_default();
            let want = target.get(&key).map(|(_, y)| *y).unwrap_or(0) as usize;
            if have.len() > want {
                for bin in have.iter().rev().take(have.len() - want) {
                    let b = self.bins.remove(bin).unwrap();
                    for (g, items) in b.items {
                        for item in items {
                            self.item_bin.remove(&item);
                            staged.push((g, item));
                        }
                    }
                }
            } else {
                for _ in 0..(want - have.len()) {
                    let slots: BTreeMap<GroupId, u32> = key.iter().cloned().collect();
                    let id = self.next_bin;
                    self.next_bin += 1;
                    self.bins.insert(id, BinSlots { slots, items: BTreeMap::new() });
                }
            }
        }
        self.entries = target
            .into_iter()
            .filter(|(_, (x, y))| *y > 0 || !x.is_zero())
            .map(|(k, (x, y))| (k, PairEntry { x, y }))
            .collect();
        self.spilled_x = zero();
        // Re-seat displaced items deterministically: per group, larger items
        // first into the lowest-numbered vacant slots.
        staged.sort_by(|a, b| {
            let sa = rounding.item_size(a.1).cloned().unwrap_or_else(zero);
            let sb = rounding.item_size(b.1).cloned().unwrap_or_else(zero);
            a.0.cmp(&b.0).then(sb.cmp(&sa)).then(a.1.cmp(&b.1))
        });
        let bin_ids: Vec<BinId> = self.bins.keys().copied().collect();
        for (g, item) in staged {
            let mut placed = false;
            for &bin in &bin_ids {
                let Some(b) = self.bins.get(&bin) else { continue };
                let (slots, occ) = b.occupancy(g);
                if slots > occ {
                    self.place_item(bin, item, g);
                    placed = true;
                    break;
                }
            }
            assert!(placed, "no vacant slot for displaced item {item} of group {g}");
        }
        let _ = rounding;
    }

    /// Assigns all of the rounding's items into the current slots from
    /// scratch; used by full rebuilds.
    pub fn seat_all_items(&mut self, rounding: &RoundingState) {
        self.item_bin.clear();
        for b in self.bins.values_mut() {
            b.items.clear();
        }
        let bin_ids: Vec<BinId> = self.bins.keys().copied().collect();
        for gid in rounding.all_groups() {
            let mut items = rounding.items_of(gid);
            items.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(&b.0)));
            let mut cursor = 0usize;
            for (item, _) in items {
                let mut placed = false;
                while cursor < bin_ids.len() {
                    let bin = bin_ids[cursor];
                    let (slots, occ) = self.bins[&bin].occupancy(gid);
                    if slots > occ {
                        self.place_item(bin, item, gid);
                        placed = true;
                        break;
                    }
                    cursor += 1;
                }
                assert!(placed, "insufficient coverage while seating group {gid}");
            }
        }
    }

    /// The packing view with true item sizes.
    pub fn to_packing(&self, rounding: &RoundingState) -> Packing {
        let mut packing = Packing::new();
        for (bin, b) in &self.bins {
            for items in b.items.values() {
                for id in items {
                    let size = rounding.item_size(*id).cloned().expect("live item");
                    packing.place(*bin, Item::new(*id, size));
                }
            }
        }
        packing
    }

    pub fn non_empty_bins(&self) -> usize {
        self.bins.values().filter(|b| b.item_count() > 0).count()
    }

    pub fn verify(&self, rounding: &RoundingState) -> Vec<LpViolation> {
        let mut out = Vec::new();
        // y equals the bin histogram.
        let mut hist: BTreeMap<ConfigKey, u64> = BTreeMap::new();
        for b in self.bins.values() {
            *hist.entry(config_key(&b.slots)).or_insert(0) += 1;
        }
        for (key, entry) in &self.entries {
            if hist.get(key).copied().unwrap_or(0) != entry.y {
                out.push(LpViolation(format!(
                    "y({key:?}) = {} but {} bins carry that configuration",
                    entry.y,
                    hist.get(key).copied().unwrap_or(0)
                )));
            }
            if entry.x < zero() || entry.x > crate::rational::rat_int(entry.y as i64) {
                out.push(LpViolation(format!(
                    "dominance: x = {} outside [0, {}] on {key:?}",
                    entry.x, entry.y
                )));
            }
        }
        for (key, n) in &hist {
            if self.entries.get(key).map(|e| e.y).unwrap_or(0) != *n {
                out.push(LpViolation(format!("untracked configuration {key:?} x{n}")));
            }
        }
        // Demand coverage per group, slot capacity per bin, item placement.
        let demands = rounding.demands();
        for (g, demand) in &demands {
            let cov = self.y_coverage(*g);
            if cov < *demand {
                out.push(LpViolation(format!("group {g}: coverage {cov} < demand {demand}")));
            }
        }
        let mut seen: BTreeSet<ItemId> = BTreeSet::new();
        for (bin, b) in &self.bins {
            let mut load = zero();
            for (g, count) in &b.slots {
                match rounding.group_rounded_size(*g) {
                    Some(size) => load += size * crate::rational::rat_int(*count as i64),
                    None => out.push(LpViolation(format!("bin {bin}: slot of dead group {g}"))),
                }
            }
            if load > one() {
                out.push(LpViolation(format!(
                    "bin {bin}: configured load {} exceeds capacity",
                    load
                )));
            }
            for (g, items) in &b.items {
                let (slots, occ) = b.occupancy(*g);
                if occ > slots {
                    out.push(LpViolation(format!("bin {bin}: {occ} items in {slots} slots of {g}")));
                }
                for id in items {
                    if !seen.insert(*id) {
                        out.push(LpViolation(format!("item {id} packed twice")));
                    }
                    if rounding.group_of(*id) != Some(*g) {
                        out.push(LpViolation(format!(
                            "item {id} seated in group {g} but belongs to {:?}",
                            rounding.group_of(*id)
                        )));
                    }
                }
            }
        }
        for (id, _) in rounding.demands().iter().flat_map(|(g, _)| rounding.items_of(*g)) {
            if !seen.contains(&id) {
                out.push(LpViolation(format!("large item {id} not packed")));
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::Params;
    use crate::rational::rat;

    fn params() -> Params {
        Params::new(4).unwrap()
    }

    #[test]
    fn insert_bookkeeping_round_trip() {
        let p = params();
        let mut rounding = RoundingState::new(2);
        let mut sol = PackedSolution::new();
        for i in 1..=6u64 {
            let item = Item::new(i, rat(40 + i as i64, 100));
            let out = rounding.insert_large(&item, &p).unwrap();
            sol.apply_insert(&out, &item, &rounding);
            let violations = sol.verify(&rounding);
            assert!(violations.is_empty(), "{violations:?}\n{}", rounding.dump());
        }
        assert_eq!(sol.to_packing(&rounding).assignment.len(), 6);
        // Delete a few and re-verify.
        for id in [3u64, 1, 6] {
            let out = rounding.delete_large(id).unwrap();
            sol.apply_delete(id, &out, &rounding);
            let violations = sol.verify(&rounding);
            assert!(violations.is_empty(), "{violations:?}\n{}", rounding.dump());
        }
        assert_eq!(sol.to_packing(&rounding).assignment.len(), 3);
    }

    #[test]
    fn random_mix_keeps_pair_consistent() {
        use rand::{Rng, SeedableRng};
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        let mut rounding = RoundingState::new(2);
        let mut sol = PackedSolution::new();
        let mut live: Vec<ItemId> = Vec::new();
        let mut next = 1u64;
        for step in 0..300 {
            if live.is_empty() || rng.gen_bool(0.6) {
                let size = rat(rng.gen_range(2..=56), 56);
                if !p.is_large(&size) {
                    continue;
                }
                let item = Item::new(next, size);
                let out = rounding.insert_large(&item, &p).unwrap();
                sol.apply_insert(&out, &item, &rounding);
                live.push(next);
                next += 1;
            } else {
                let idx = rng.gen_range(0..live.len());
                let id = live.swap_remove(idx);
                let out = rounding.delete_large(id).unwrap();
                sol.apply_delete(id, &out, &rounding);
            }
            let violations = sol.verify(&rounding);
            assert!(violations.is_empty(), "step {step}: {violations:?}");
        }
    }
}
