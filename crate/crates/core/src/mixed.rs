//! The general setting: large items packed by the LP engine, small items
//! flowing through queues that reuse the large bins' free capacity, coupled
//! by the potential over buffer fill ratios. Heap bins (only large items)
//! stand by to become buffer bins exactly when the potential demands.

use crate::large::{LargeEventReport, LargeState};
use crate::model::{BinId, Event, Item, ItemId, Packing};
use crate::params::Params;
use crate::rational::{ceil_int, floor_int, frac, one, rat_int, zero, Rational};
use crate::small::{Lifecycle, QueueStructure, SmallOnlyLifecycle};
use num_traits::{ToPrimitive, Zero};
use serde_json::json;
use std::collections::{BTreeMap, BTreeSet};

/// Region-2 (unit-capacity) bins live in their own id range so the two bin
/// allocators never collide.
const UNIT_BIN_FLOOR: BinId = 1 << 32;

#[derive(Debug, thiserror::Error)]
pub enum MixedError {
    #[error(transparent)]
    Large(#[from] crate::large::LargeError),
    #[error(transparent)]
    Small(#[from] crate::small::SmallError),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("duplicate item {0}")]
    DuplicateItem(ItemId),
}

#[derive(Debug, Clone, Default)]
pub struct MixedReport {
    pub large: Option<LargeEventReport>,
    pub staged_small_items: usize,
    pub flagged_draws: u64,
    pub reconcile_rounds: u64,
}

/// Heap/region bookkeeping plus the buffer lifecycle for the mixed setting.
#[derive(Debug, Clone, Default)]
pub struct MixedCore {
    pub heap: BTreeSet<BinId>,
    pub closed: BTreeSet<BinId>,
    pub capacity: BTreeMap<BinId, Rational>,
    /// Number of large-capacity queues (the paper's `l`).
    pub large_queues: usize,
    /// Fresh-bin draws where a heap bin was required; must stay zero.
    pub flagged_draws: u64,
    /// Items evicted by an on-demand heap replenishment, awaiting
    /// re-insertion at the end of the event.
    pending: Vec<Item>,
    small_only: SmallOnlyLifecycle,
}

impl MixedCore {
    fn draw_heap(&mut self, qs: &mut QueueStructure) -> Option<BinId> {
        let bin = *self.heap.iter().next()?;
        self.heap.remove(&bin);
        let cap = self.capacity.get(&bin).cloned().unwrap_or_else(one);
        qs.adopt_bin(bin, cap);
        Some(bin)
    }

    /// Draw a heap bin; with the heap dry, replenish it first by clearing
    /// the boundary buffer (its fill ratio is low exactly when the potential
    /// just rose, so this mirrors the per-item potential adjustment).
    fn draw_heap_or_flag(&mut self, qs: &mut QueueStructure, params: &Params) -> BinId {
        if let Some(b) = self.draw_heap(qs) {
            return b;
        }
        self.replenish_heap(qs, params);
        match self.draw_heap(qs) {
            Some(b) => b,
            None => {
                self.flagged_draws += 1;
                qs.fresh_bin(one())
            }
        }
    }

    fn replenish_heap(&mut self, qs: &mut QueueStructure, params: &Params) {
        if self.large_queues == 0 || qs.queue_count() < self.large_queues {
            return;
        }
        let bq = self.large_queues - 1;
        let bb = qs.buffer_of(bq);
        for id in qs.bin(bb).map(|b| b.item_ids()).unwrap_or_default() {
            let item = qs.take(bb, id);
            self.pending.push(item);
        }
        self.bin_drained(qs, bb, bq, params);
    }

    pub fn take_pending(&mut self) -> Vec<Item> {
        std::mem::take(&mut self.pending)
    }

    fn release_to_heap(&mut self, qs: &mut QueueStructure, bin: BinId) {
        let cap = qs.release_bin(bin);
        self.capacity.insert(bin, cap);
        self.heap.insert(bin);
    }

    /// `Lambda`: open bins containing large items (queued plus heap).
    pub fn lambda(&self, qs: &QueueStructure) -> u64 {
        let l: usize = (0..self.large_queues.min(qs.queue_count()))
            .map(|q| qs.queue_len(q))
            .sum();
        l as u64 + self.heap.len() as u64
    }

    /// `Phi = sum of the first l-1 buffer fill ratios + ceil(eps Lambda) - l`.
    pub fn phi(&self, qs: &QueueStructure, params: &Params) -> Rational {
        let lambda = self.lambda(qs);
        let ell = self.large_queues.min(qs.queue_count());
        let mut phi =
            rat_int(ceil_int(&(params.epsilon() * rat_int(lambda as i64))).to_i64().unwrap_or(0));
        phi -= rat_int(ell as i64);
        for q in 0..ell.saturating_sub(1) {
            let bb = qs.buffer_of(q);
            let b = qs.bin(bb).unwrap();
            if !b.capacity.is_zero() {
                phi += b.load() / &b.capacity;
            }
        }
        phi
    }

    fn region2_exists(&self, qs: &QueueStructure) -> bool {
        qs.queue_count() > self.large_queues
    }
}

fn trace(msg: &str) {
    if std::env::var_os("DYNBIN_TRACE").is_some() {
        eprintln!("  {msg}");
    }
}

impl Lifecycle for MixedCore {
    fn bootstrap(&mut self, qs: &mut QueueStructure, _params: &Params) -> usize {
        if qs.queue_count() == 0 {
            match self.draw_heap(qs) {
                Some(bin) => {
                    qs.new_queue_at_end(bin);
                    self.large_queues = 1;
                }
                None => {
                    let bin = qs.fresh_bin(one());
                    qs.new_queue_at_end(bin);
                    self.large_queues = 0;
                }
            }
        }
        0
    }

    fn buffer_filled(&mut self, qs: &mut QueueStructure, q: usize, params: &Params) -> usize {
        trace(&format!("buffer_filled q={q} ell={} count={}", self.large_queues, qs.queue_count()));
        let ell = self.large_queues;
        if ell > 0 && q + 1 < ell {
            // Inner large-capacity queue: the replacement buffer comes from
            // the heap, and a split consumes one more heap bin.
            let fresh = self.draw_heap_or_flag(qs, params);
            qs.queues[q].bins.push(fresh);
            if qs.queue_len(q) > params.queue_max() {
                let half = params.queue_min();
                let tail = qs.queues[q].bins.split_off(half);
                let extra = self.draw_heap_or_flag(qs, params);
                qs.queues[q].bins.push(extra);
                qs.queues.insert(q + 1, crate::small::Queue { bins: tail });
                self.large_queues += 1;
                return q + 1;
            }
            return q;
        }
        if ell > 0 && q + 1 == ell {
            // The boundary buffer filled: extend the large region while the
            // heap holds surplus, otherwise open the unit-capacity region.
            let h = self.heap.len() as u64;
            let phi_floor = floor_int(&self.phi(qs, params)).to_i64().unwrap_or(0).max(0) as u64;
            if h > phi_floor {
                let fresh = self.draw_heap_or_flag(qs, params);
                qs.queues[q].bins.push(fresh);
                if qs.queue_len(q) > params.queue_max() {
                    let half = params.queue_min();
                    let tail = qs.queues[q].bins.split_off(half);
                    let extra = self.draw_heap_or_flag(qs, params);
                    qs.queues[q].bins.push(extra);
                    qs.queues.insert(q + 1, crate::small::Queue { bins: tail });
                    self.large_queues += 1;
                    return q + 1;
                }
                return q;
            }
            if self.region2_exists(qs) {
                // The boundary buffer stays full; overflow continues into
                // the existing pinned queue on its right.
                return q + 1;
            }
            // The filled bin stays the (full) boundary buffer; a fresh unit
            // bin opens the pinned-length queue right of it.
            let fresh = qs.fresh_bin(one());
            qs.queues.insert(q + 1, crate::small::Queue { bins: vec![fresh] });
            return q + 1;
        }
        if ell > 0 && q == ell && self.region2_exists(qs) {
            // Pinned-length unit queue: the filled bin migrates right and a
            // fresh bin takes its place.
            let filled = qs.queues[q].bins.pop().expect("pinned queue has its bin");
            if qs.queue_count() > q + 1 {
                qs.queues[q + 1].bins.insert(0, filled);
                if qs.queue_len(q + 1) > params.queue_max() {
                    let half = qs.queue_len(q + 1) / 2;
                    let tail = qs.queues[q + 1].bins.split_off(half);
                    let extra = qs.fresh_bin(one());
                    qs.queues[q + 1].bins.push(extra);
                    qs.queues.insert(q + 2, crate::small::Queue { bins: tail });
                }
            } else {
                qs.queues.push(crate::small::Queue { bins: vec![filled] });
            }
            let fresh = qs.fresh_bin(one());
            qs.queues[q].bins.push(fresh);
            return q;
        }
        // Plain unit-capacity queue: standalone policy.
        self.small_only.buffer_filled(qs, q, params)
    }

    fn bin_drained(&mut self, qs: &mut QueueStructure, bin: BinId, q: usize, params: &Params) {
        trace(&format!("bin_drained q={q} bin={bin} ell={} count={}", self.large_queues, qs.queue_count()));
        let ell = self.large_queues;
        if ell > 0 && q < ell {
            // Large-capacity bin drained of small items: back to the heap.
            let was_buffer = qs.buffer_of(q) == bin;
            let len_before = qs.queue_len(q);
            self.release_to_heap(qs, bin);
            if qs.queue_count() <= q || len_before == 1 {
                // The queue vanished with its only bin.
                self.large_queues -= 1;
                return;
            }
            if !was_buffer {
                // Normal bin vanished mid-queue: lengths are repaired by the
                // caller's reconciliation pass.
                return;
            }
            if q + 1 == self.large_queues {
                // Boundary queue: its last remaining bin serves as buffer.
                return;
            }
            // Inner queue: re-balance with the right (large) neighbour.
            let nl = qs.queue_len(q + 1);
            if len_before > params.queue_min() && len_before >= nl {
                // Last bin of the queue is the buffer now.
            } else if nl > len_before && nl > params.queue_min() {
                let moved = qs.queues[q + 1].bins.remove(0);
                qs.queues[q].bins.push(moved);
            } else {
                let tail = qs.queues.remove(q + 1);
                qs.queues[q].bins.extend(tail.bins);
                self.large_queues -= 1;
            }
            return;
        }
        if q == ell && self.region2_exists(qs) {
            // Pinned queue emptied: pull the first bin of the next queue in,
            // or retire the region when nothing is left.
            let len_before = qs.queue_len(q);
            let _ = qs.release_bin(bin);
            if len_before == 1 {
                // the queue vanished with the release
                if qs.queue_count() > q {
                    // steal the first bin of the (shifted) next queue
                    let moved = qs.queues[q].bins.remove(0);
                    if qs.queues[q].bins.is_empty() {
                        qs.queues.remove(q);
                    }
                    qs.queues.insert(q, crate::small::Queue { bins: vec![moved] });
                }
            }
            return;
        }
        self.small_only.bin_drained(qs, bin, q, params);
    }
}

#[derive(Debug, Clone)]
pub struct MixedState {
    pub large: LargeState,
    pub qs: QueueStructure,
    pub core: MixedCore,
}

impl Default for MixedState {
    fn default() -> Self {
        Self::new()
    }
}

impl MixedState {
    pub fn new() -> Self {
        MixedState {
            large: LargeState::new(),
            qs: QueueStructure::with_bin_floor(UNIT_BIN_FLOOR),
            core: MixedCore::default(),
        }
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.large.contains(id) || self.qs.contains(id)
    }

    pub fn total_size(&self) -> Rational {
        self.large.total_size() + self.qs.total_size()
    }

    pub fn live_items(&self) -> Vec<Item> {
        let mut items = self.large.rounding.live_items();
        items.extend(self.qs.live_items());
        items
    }

    /// Non-empty bins over both regions (large bins double as queue members).
    pub fn bins_used(&self) -> usize {
        let large_bins: BTreeSet<BinId> = self
            .large
            .sol
            .bins
            .iter()
            .filter(|(_, b)| b.item_count() > 0)
            .map(|(id, _)| *id)
            .collect();
        let mut used = large_bins.len();
        for (id, b) in &self.qs.bins {
            if !b.is_empty() && !large_bins.contains(id) {
                used += 1;
            }
        }
        used
    }

    /// Combined packing with true item sizes; unit capacities apply.
    pub fn packing(&self) -> Packing {
        let mut packing = self.large.packing();
        for (id, b) in &self.qs.bins {
            for item_id in b.item_ids() {
                let size = self.qs.item_size_of(item_id).cloned().expect("live small");
                packing.place(*id, Item::new(item_id, size));
            }
        }
        packing
    }

    pub fn on_event(&mut self, ev: &Event, params: &Params) -> Result<MixedReport, MixedError> {
        match ev {
            Event::Insert { id, size } => {
                if self.contains(*id) {
                    return Err(MixedError::DuplicateItem(*id));
                }
                let item = Item::new(*id, size.clone());
                if params.is_large(size) {
                    self.on_large_event(|st, p| st.large.on_insert(&item, p), params)
                } else {
                    self.qs.insert_with(&mut self.core, item, params)?;
                    self.drain_pending(params)?;
                    let rounds = self.reconcile(params);
                    Ok(MixedReport {
                        reconcile_rounds: rounds,
                        flagged_draws: self.core.flagged_draws,
                        ..Default::default()
                    })
                }
            }
            Event::Delete { id } => {
                if self.large.contains(*id) {
                    let id = *id;
                    self.on_large_event(move |st, p| st.large.on_delete(id, p), params)
                } else if self.qs.contains(*id) {
                    self.qs.delete_with(&mut self.core, *id, params)?;
                    self.drain_pending(params)?;
                    let rounds = self.reconcile(params);
                    Ok(MixedReport {
                        reconcile_rounds: rounds,
                        flagged_draws: self.core.flagged_draws,
                        ..Default::default()
                    })
                } else {
                    Err(MixedError::UnknownItem(*id))
                }
            }
        }
    }

    /// The large branch: run the large engine, evict small items from every
    /// bin whose large content changed, re-admit bins, repair the queues and
    /// the potential coupling, then re-insert the staged items.
    fn on_large_event<F>(&mut self, run: F, params: &Params) -> Result<MixedReport, MixedError>
    where
        F: FnOnce(&mut Self, &Params) -> Result<LargeEventReport, crate::large::LargeError>,
    {
        let before = self.large_loads();
        let report = run(self, params)?;
        let after = self.large_loads();
        let mut changed: BTreeSet<BinId> = BTreeSet::new();
        for (bin, load) in &before {
            if after.get(bin) != Some(load) {
                changed.insert(*bin);
            }
        }
        for bin in after.keys() {
            if !before.contains_key(bin) {
                changed.insert(*bin);
            }
        }
        // Step 2: pull small items out of changed bins and detach the bins.
        let mut staged: Vec<Item> = Vec::new();
        for bin in &changed {
            self.core.heap.remove(bin);
            self.core.closed.remove(bin);
            self.core.capacity.remove(bin);
            if self.qs.bin(*bin).is_some() {
                let q = self.qs.queue_of(*bin);
                for id in self.qs.bin(*bin).unwrap().item_ids() {
                    staged.push(self.qs.take(*bin, id));
                }
                let emptied_queue = self.qs.queue_len(q) == 1;
                let _ = self.qs.release_bin(*bin);
                if emptied_queue && q < self.core.large_queues {
                    self.core.large_queues -= 1;
                }
            }
        }
        // Re-admit the changed bins that still exist, per capacity.
        for bin in &changed {
            let Some(load) = after.get(bin) else { continue };
            let cap = one() - load;
            self.core.capacity.insert(*bin, cap.clone());
            if cap < params.small_threshold() {
                self.core.closed.insert(*bin);
            } else {
                self.core.heap.insert(*bin);
            }
        }
        // Steps 3-5: queue lengths, heap count, heap equation.
        staged.extend(self.normalize_region1(params));
        let rounds = self.reconcile(params);
        // Step 6: the staged items rejoin through the normal insert path.
        staged.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
        let staged_n = staged.len();
        for item in staged {
            self.qs.insert_with(&mut self.core, item, params)?;
        }
        self.drain_pending(params)?;
        let rounds2 = self.reconcile(params);
        Ok(MixedReport {
            large: Some(report),
            staged_small_items: staged_n,
            flagged_draws: self.core.flagged_draws,
            reconcile_rounds: rounds + rounds2,
        })
    }

    fn drain_pending(&mut self, params: &Params) -> Result<(), MixedError> {
        let mut fuel = 10_000usize;
        loop {
            let batch = self.core.take_pending();
            if batch.is_empty() {
                return Ok(());
            }
            for item in batch {
                fuel -= 1;
                assert!(fuel > 0, "pending re-insertion diverged");
                self.qs.insert_with(&mut self.core, item, params)?;
            }
        }
    }

    fn large_loads(&self) -> BTreeMap<BinId, Rational> {
        self.large
            .sol
            .bins
            .keys()
            .map(|id| (*id, self.large.sol.bin_load(*id, &self.large.rounding)))
            .collect()
    }

    /// Queue-length repair for the large region after bins were detached:
    /// short inner queues merge with their right neighbour, financed by
    /// evicting the left queue's buffer to the heap.
    fn normalize_region1(&mut self, params: &Params) -> Vec<Item> {
        let mut staged = Vec::new();
        let mut q = 0usize;
        while q + 1 < self.core.large_queues.min(self.qs.queue_count()) {
            if self.qs.queue_len(q) >= params.queue_min() {
                q += 1;
                continue;
            }
            // Evict the buffer's small items, retire it to the heap, merge.
            let bb = self.qs.buffer_of(q);
            for id in self.qs.bin(bb).unwrap().item_ids() {
                staged.push(self.qs.take(bb, id));
            }
            self.core.release_to_heap(&mut self.qs, bb);
            if self.qs.queue_count() <= q || self.core.large_queues <= q {
                break;
            }
            if self.qs.queues[q].bins.is_empty() {
                self.qs.queues.remove(q);
                self.core.large_queues -= 1;
                continue;
            }
            if q + 1 < self.core.large_queues.min(self.qs.queue_count()) {
                let tail = self.qs.queues.remove(q + 1);
                self.qs.queues[q].bins.extend(tail.bins);
                self.core.large_queues -= 1;
            }
            if self.qs.queue_len(q) > params.queue_max() {
                let half = params.queue_min();
                let tail = self.qs.queues[q].bins.split_off(half);
                let extra = self.core.draw_heap_or_flag(&mut self.qs, params);
                self.qs.queues[q].bins.push(extra);
                self.qs.queues.insert(q + 1, crate::small::Queue { bins: tail });
                self.core.large_queues += 1;
                q += 1;
            }
        }
        staged
    }

    /// Fixed-point repair of property (4) and the Heap Equation.
    fn reconcile(&mut self, params: &Params) -> u64 {
        let mut rounds = 0u64;
        let mut fuel = 400usize;
        loop {
            fuel -= 1;
            assert!(fuel > 0, "mixed reconciliation diverged");
            rounds += 1;
            if !self.core.region2_exists(&self.qs) {
                // Build-up regime: the heap may hold surplus; nothing to do.
                break;
            }
            let phi = self.core.phi(&self.qs, params);
            let phi_floor = floor_int(&phi).to_i64().unwrap_or(0).max(0) as u64;
            let h = self.core.heap.len() as u64;
            if h > phi_floor {
                self.adjust_heap_down(params);
                continue;
            }
            if h < phi_floor {
                if self.core.large_queues == 0 {
                    // No boundary buffer to empty; the invariant is restored
                    // by growing the large region instead.
                    self.adjust_heap_down(params);
                    continue;
                }
                self.adjust_heap_up(params);
                continue;
            }
            if self.core.large_queues == 0 {
                break;
            }
            // Heap equation on the boundary buffer.
            let ell_q = self.core.large_queues - 1;
            let bb = self.qs.buffer_of(ell_q);
            let b = self.qs.bin(bb).unwrap();
            let cap = b.capacity.clone();
            if cap.is_zero() {
                break;
            }
            let r = b.load() / &cap;
            let gap = (one() - &r) - frac(&phi);
            let s_eff = b
                .biggest_size()
                .unwrap_or_else(|| params.small_threshold());
            let slack = &s_eff / &cap;
            if gap > slack {
                // Buffer too empty: pull the largest fitting unit-region
                // item in. Pulling raises the slack term with it, so one
                // fitting pull settles the equation.
                let source = self.qs.buffer_of(self.core.large_queues);
                if self.qs.bin(source).map_or(true, |sb| sb.is_empty()) {
                    // Unit-region buffer empty: recycle it and retry.
                    let q = self.core.large_queues;
                    self.core.bin_drained(&mut self.qs, source, q, params);
                    if !self.core.region2_exists(&self.qs) {
                        break;
                    }
                    continue;
                }
                let free = self.qs.bin(bb).unwrap().free();
                let Some(victim) = self.qs.bin(source).unwrap().largest_fitting(&free) else {
                    // Nothing movable fits; the gap is as tight as item
                    // granularity allows.
                    break;
                };
                let item = self.qs.take(source, victim);
                self.qs.place(bb, item);
                if self.qs.bin(source).unwrap().is_empty() {
                    let q = self.core.large_queues;
                    self.core.bin_drained(&mut self.qs, source, q, params);
                }
                continue;
            }
            if gap < -slack.clone() {
                // Buffer too full: push its smallest item right.
                let Some(victim) = self.qs.bin(bb).and_then(|sb| sb.smallest_id()) else {
                    break;
                };
                let item = self.qs.take(bb, victim);
                let emptied = self.qs.bin(bb).unwrap().is_empty();
                let dest_q = self.core.large_queues;
                let cat = QueueStructure::category_of(&item.size, params).expect("small");
                let dest = self.qs.buffer_of(dest_q);
                self.qs.insert_set(&mut self.core, vec![item], cat, dest, dest_q, params);
                if emptied {
                    let q = self.core.large_queues - 1;
                    self.core.bin_drained(&mut self.qs, bb, q, params);
                }
                continue;
            }
            break;
        }
        rounds
    }

    /// Heap surplus: grow the large region by one buffer bin (filling the
    /// previous boundary buffer first when a unit region exists).
    fn adjust_heap_down(&mut self, params: &Params) {
        trace(&format!("adjust_heap_down ell={} count={}", self.core.large_queues, self.qs.queue_count()));
        if self.core.large_queues == 0 {
            if let Some(bin) = self.core.draw_heap(&mut self.qs) {
                self.qs.queues.insert(0, crate::small::Queue { bins: vec![bin] });
                self.core.large_queues = 1;
            }
            return;
        }
        let ell_q = self.core.large_queues - 1;
        let bb = self.qs.buffer_of(ell_q);
        // Fill the boundary buffer completely from the unit region.
        let mut fuel = 100_000usize;
        while !self.qs.filled_completely(bb, params) && self.core.region2_exists(&self.qs) {
            fuel -= 1;
            assert!(fuel > 0, "heap adjustment diverged");
            let source = self.qs.buffer_of(self.core.large_queues);
            let Some(victim) = self.qs.bin(source).and_then(|sb| sb.biggest_id()) else {
                let q = self.core.large_queues;
                self.core.bin_drained(&mut self.qs, source, q, params);
                continue;
            };
            let item = self.qs.take(source, victim);
            if self.qs.bin(bb).unwrap().free() < item.size {
                self.qs.place(source, item);
                break;
            }
            self.qs.place(bb, item);
            if self.qs.bin(source).unwrap().is_empty() {
                let q = self.core.large_queues;
                self.core.bin_drained(&mut self.qs, source, q, params);
            }
        }
        // Append a heap bin as the new boundary buffer, but only when the
        // old buffer really reached completeness (the unit region may have
        // run out of items first).
        if !self.qs.filled_completely(bb, params) {
            return;
        }
        if let Some(bin) = self.core.draw_heap(&mut self.qs) {
            let ell_q = self.core.large_queues - 1;
            self.qs.queues[ell_q].bins.push(bin);
            if self.qs.queue_len(ell_q) > params.queue_min() {
                // The boundary queue reached 1/eps: a further heap bin opens
                // a fresh boundary queue of length one.
                if let Some(extra) = self.core.draw_heap(&mut self.qs) {
                    self.qs
                        .queues
                        .insert(ell_q + 1, crate::small::Queue { bins: vec![extra] });
                    self.core.large_queues += 1;
                }
            }
        }
    }

    /// Heap deficit: empty the boundary buffer into the unit region and
    /// retire it to the heap.
    fn adjust_heap_up(&mut self, params: &Params) {
        trace(&format!("adjust_heap_up ell={} count={}", self.core.large_queues, self.qs.queue_count()));
        let ell_q = self.core.large_queues - 1;
        let bb = self.qs.buffer_of(ell_q);
        let items: Vec<Item> = self
            .qs
            .bin(bb)
            .unwrap()
            .item_ids()
            .into_iter()
            .map(|id| self.qs.take(bb, id))
            .collect();
        let q = self.core.large_queues - 1;
        self.core.bin_drained(&mut self.qs, bb, q, params);
        for item in items {
            let cat = QueueStructure::category_of(&item.size, params).expect("small");
            if self.core.region2_exists(&self.qs) {
                let dest_q = self.core.large_queues;
                let dest = self.qs.buffer_of(dest_q);
                self.qs.insert_set(&mut self.core, vec![item], cat, dest, dest_q, params);
            } else {
                let _ = self.qs.insert_with(&mut self.core, item, params);
            }
        }
    }

    /// Full structural audit of the mixed setting.
    pub fn verify(&self, params: &Params) -> Vec<String> {
        let mut out: Vec<String> = self.large.verify(params);
        for v in self.qs.verify_order(params) {
            out.push(v.0);
        }
        for v in self.qs.verify_filled(params) {
            out.push(v.0);
        }
        for v in self.qs.verify_capacity() {
            out.push(v.0);
        }
        let ell = self.core.large_queues;
        let count = self.qs.queue_count();
        if ell > count {
            out.push(format!("large_queues {ell} exceeds queue count {count}"));
            return out;
        }
        // Queue lengths: inner large queues strict, boundary and pinned
        // queues special, unit region standard.
        for q in 0..count {
            let len = self.qs.queue_len(q);
            let desc = if ell > 0 && q + 1 < ell {
                (params.queue_min(), params.queue_max(), "inner large queue")
            } else if ell > 0 && q + 1 == ell {
                (1, params.queue_max(), "boundary queue")
            } else if ell > 0 && q == ell && count > ell {
                (1, 1, "pinned unit queue")
            } else if ell > 0 && q == ell + 1 {
                (1, params.queue_max(), "first unit queue")
            } else if q + 1 == count {
                (1, params.queue_max(), "last queue")
            } else if ell == 0 && q == 0 {
                (1, params.queue_max(), "first queue")
            } else {
                (params.queue_min(), params.queue_max(), "unit queue")
            };
            if len < desc.0 || len > desc.1 {
                out.push(format!("{} {q} has length {len} outside [{}, {}]", desc.2, desc.0, desc.1));
            }
        }
        // Region membership and capacities.
        let large_bins: BTreeSet<BinId> = self.large.sol.bins.keys().copied().collect();
        for q in 0..count {
            for bin in self.qs.queue_bins(q) {
                let b = self.qs.bin(*bin).unwrap();
                if q < ell {
                    if !large_bins.contains(bin) {
                        out.push(format!("queue {q} bin {bin} is not a large bin"));
                    } else {
                        let expect = one() - self.large.sol.bin_load(*bin, &self.large.rounding);
                        if b.capacity != expect {
                            out.push(format!(
                                "bin {bin} capacity {} but large load implies {}",
                                crate::rational::format_rational(&b.capacity),
                                crate::rational::format_rational(&expect)
                            ));
                        }
                    }
                } else if large_bins.contains(bin) {
                    out.push(format!("unit queue {q} holds large bin {bin}"));
                } else if b.capacity != one() {
                    out.push(format!("unit bin {bin} has capacity != 1"));
                }
            }
        }
        // Every large bin is queued, heaped, or closed; never two of them.
        let queued: BTreeSet<BinId> =
            (0..ell).flat_map(|q| self.qs.queue_bins(q).to_vec()).collect();
        for bin in &large_bins {
            let in_q = queued.contains(bin);
            let in_h = self.core.heap.contains(bin);
            let in_c = self.core.closed.contains(bin);
            let places = in_q as u8 + in_h as u8 + in_c as u8;
            if places != 1 {
                out.push(format!("large bin {bin} tracked {places} times (q={in_q} h={in_h} c={in_c})"));
            }
            if in_c {
                let cap = one() - self.large.sol.bin_load(*bin, &self.large.rounding);
                if cap >= params.small_threshold() {
                    out.push(format!("closed bin {bin} still has capacity {}", crate::rational::format_rational(&cap)));
                }
            }
        }
        for bin in self.core.heap.iter().chain(self.core.closed.iter()) {
            if !large_bins.contains(bin) {
                out.push(format!("heap/closed bin {bin} is not a large bin"));
            }
            if self.qs.bin(*bin).is_some() {
                out.push(format!("heap/closed bin {bin} also sits in a queue"));
            }
        }
        // Property (4) and the heap equation, in the saturated regime.
        let phi = self.core.phi(&self.qs, params);
        let h = self.core.heap.len() as i64;
        let phi_floor = floor_int(&phi).to_i64().unwrap_or(0);
        if self.core.region2_exists(&self.qs) {
            if h != phi_floor.max(0) {
                out.push(format!(
                    "heap count {h} != floor(phi) = {phi_floor} (phi = {})",
                    crate::rational::format_rational(&phi)
                ));
            }
            if ell > 0 {
                let bb = self.qs.buffer_of(ell - 1);
                let b = self.qs.bin(bb).unwrap();
                if !b.capacity.is_zero() {
                    let r = b.load() / &b.capacity;
                    let gap_signed = (one() - &r) - frac(&phi);
                    let too_empty = gap_signed > zero();
                    let gap = if gap_signed < zero() { -gap_signed.clone() } else { gap_signed.clone() };
                    let s_eff = b.biggest_size().unwrap_or_else(|| params.small_threshold());
                    let mut ok = gap <= &s_eff / &b.capacity;
                    if !ok && too_empty {
                        // Tolerated when no unit-region item fits the free
                        // space: the equation holds to item granularity.
                        let source = self.qs.buffer_of(ell);
                        let free = b.free();
                        ok = self
                            .qs
                            .bin(source)
                            .map_or(true, |sb| sb.largest_fitting(&free).is_none());
                    }
                    if !ok {
                        out.push(format!(
                            "heap equation violated: |(1-r) - frac(phi)| = {} > {}",
                            crate::rational::format_rational(&gap),
                            crate::rational::format_rational(&(&s_eff / &b.capacity))
                        ));
                    }
                }
            }
        }
        if self.core.flagged_draws > 0 {
            out.push(format!("{} emergency fresh-bin draws", self.core.flagged_draws));
        }
        // Global bin-count bound.
        let used = self.bins_used() as i64;
        let lb = crate::oracle::size_lower_bound_rat(&self.total_size()).max(1) as i64;
        let eps = params.epsilon();
        let lambda_branch = self.core.lambda(&self.qs) as i64 + self.core.closed.len() as i64;
        let ratio_branch =
            (one() + rat_int(5) * &eps) * rat_int(lb) + rat_int(4);
        if rat_int(used) > rat_int(lambda_branch).max(ratio_branch.clone()) && used > 0 {
            out.push(format!(
                "bin count {used} above max({lambda_branch}, {})",
                crate::rational::format_rational(&ratio_branch)
            ));
        }
        out
    }

    /// Engine snapshot for the harness's verify command.
    pub fn snapshot(&self, params: &Params) -> serde_json::Value {
        let phi = self.core.phi(&self.qs, params);
        let ell = self.core.large_queues;
        let r_ell = if ell > 0 && self.qs.queue_count() >= ell {
            let bb = self.qs.buffer_of(ell - 1);
            let b = self.qs.bin(bb).unwrap();
            if b.capacity.is_zero() {
                "0".to_string()
            } else {
                crate::rational::format_rational(&(b.load() / &b.capacity))
            }
        } else {
            "0".to_string()
        };
        let queues: Vec<serde_json::Value> = (0..self.qs.queue_count())
            .map(|q| {
                json!({
                    "index": q,
                    "large_capacity": q < ell,
                    "bins": self.qs.queue_bins(q),
                })
            })
            .collect();
        let bins: BTreeMap<String, serde_json::Value> = self
            .packing()
            .bins
            .iter()
            .map(|(id, items)| {
                let cap = self
                    .qs
                    .bin(*id)
                    .map(|b| b.capacity.clone())
                    .unwrap_or_else(one);
                (
                    id.to_string(),
                    json!({
                        "capacity": crate::rational::format_rational(&cap),
                        "items": items.iter().map(|i| json!({
                            "id": i.id,
                            "size": crate::rational::format_rational(&i.size),
                        })).collect::<Vec<_>>(),
                    }),
                )
            })
            .collect();
        json!({
            "epsilon_inv": params.e,
            "phi": crate::rational::format_rational(&phi),
            "phi_frac": crate::rational::format_rational(&frac(&phi)),
            "r_ell": r_ell,
            "heap": self.core.heap,
            "closed": self.core.closed,
            "large_queues": ell,
            "queues": queues,
            "bins": bins,
        })
    }
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
    fn small_insert_into_empty_engine_opens_one_bin() {
        let p = params();
        let mut st = MixedState::new();
        let ev = Event::Insert { id: 1, size: rat(1, 64) };
        st.on_event(&ev, &p).unwrap();
        assert_eq!(st.bins_used(), 1);
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
    }

    #[test]
    fn degenerates_to_small_structure_without_large_items() {
        let p = params();
        let mut st = MixedState::new();
        for i in 1..=200u64 {
            let ev = Event::Insert { id: i, size: rat(1, 64) };
            st.on_event(&ev, &p).unwrap();
            let rep = st.verify(&p);
            assert!(rep.is_empty(), "after {i}: {rep:?}\n{}", st.qs.dump());
        }
        assert_eq!(st.core.large_queues, 0);
    }

    #[test]
    fn smalls_reuse_large_bins_first() {
        let p = params();
        let mut st = MixedState::new();
        // a couple of large items, each leaving capacity
        for i in 1..=4u64 {
            st.on_event(&Event::Insert { id: i, size: rat(3, 5) }, &p).unwrap();
        }
        let large_bins = st.bins_used();
        // small items should flow into the large bins' free space
        for i in 10..=40u64 {
            st.on_event(&Event::Insert { id: i, size: rat(1, 100) }, &p).unwrap();
            let rep = st.verify(&p);
            assert!(rep.is_empty(), "after {i}: {rep:?}\n{}", st.qs.dump());
        }
        assert!(st.core.large_queues >= 1);
        assert_eq!(st.bins_used(), large_bins, "smalls fit into the large bins");
    }

    #[test]
    fn mixed_random_stream_keeps_invariants() {
        let p = params();
        let mut st = MixedState::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
        let mut live: Vec<ItemId> = Vec::new();
        let mut next = 1u64;
        for step in 0..400 {
            if live.is_empty() || rng.gen_bool(0.7) {
                let size = if rng.gen_bool(0.5) {
                    rat(rng.gen_range(2..=28), 28) // large
                } else {
                    rat(rng.gen_range(1..=31), 1792) // small
                };
                st.on_event(&Event::Insert { id: next, size }, &p).unwrap();
                live.push(next);
                next += 1;
            } else {
                let idx = rng.gen_range(0..live.len());
                let id = live.swap_remove(idx);
                st.on_event(&Event::Delete { id }, &p).unwrap();
            }
            if std::env::var_os("DYNBIN_TRACE").is_some() {
                let lens: Vec<usize> =
                    (0..st.qs.queue_count()).map(|q| st.qs.queue_len(q)).collect();
                eprintln!("step {step}: ell={} lens={:?}", st.core.large_queues, lens);
            }
            let rep = st.verify(&p);
            assert!(rep.is_empty(), "step {step}: {rep:?}\n{}", st.qs.dump());
        }
    }

    #[test]
    fn items_conserved_across_composite_operations() {
        let p = params();
        let mut st = MixedState::new();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(23);
        let mut expected: BTreeSet<ItemId> = BTreeSet::new();
        let mut next = 1u64;
        for _ in 0..300 {
            if expected.is_empty() || rng.gen_bool(0.65) {
                let size = if rng.gen_bool(0.4) {
                    rat(rng.gen_range(2..=28), 28)
                } else {
                    rat(rng.gen_range(1..=31), 1792)
                };
                st.on_event(&Event::Insert { id: next, size }, &p).unwrap();
                expected.insert(next);
                next += 1;
            } else {
                let pick = *expected.iter().nth(rng.gen_range(0..expected.len())).unwrap();
                st.on_event(&Event::Delete { id: pick }, &p).unwrap();
                expected.remove(&pick);
            }
            let packed: BTreeSet<ItemId> = st.packing().assignment.keys().copied().collect();
            assert_eq!(packed, expected);
            let violations =
                crate::model::validate_packing(&st.packing(), &st.live_items(), &BTreeMap::new());
            assert!(violations.is_empty(), "{violations:?}");
        }
    }
}
