//! Ground-truth providers: exact offline optimum via branch and bound,
//! SIZE / configuration-LP lower bounds, and FirstFit / FFD baselines.

use crate::model::{size_of, Event, Item, ItemId, Packing};
use crate::rational::{ceil_int, one, rat_int, zero, Rational};
use num_traits::{ToPrimitive, Zero};
use std::collections::BTreeMap;

pub const DEFAULT_EXACT_LIMIT: usize = 20;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum BoundKind {
    Exact,
    LpLower,
    SizeLower,
}

#[derive(Debug, Clone)]
pub struct Bound {
    pub kind: BoundKind,
    pub value: u64,
}

#[derive(Debug, thiserror::Error)]
pub enum OracleError {
    #[error("instance too large for exact solve: {0} items (limit {1})")]
    TooLarge(usize, usize),
}

/// Minimal bin count, branch and bound over items in descending size order.
///
/// Search state keeps open bin loads; an item may open a new bin only after
/// all existing bins were tried, and identical loads are tried once.
pub fn exact_opt(items: &[Item], limit: usize) -> Result<u64, OracleError> {
    if items.len() > limit {
        return Err(OracleError::TooLarge(items.len(), limit));
    }
    if items.is_empty() {
        return Ok(0);
    }
    let mut sizes: Vec<Rational> = items.iter().map(|i| i.size.clone()).collect();
    sizes.sort_by(|a, b| b.cmp(a));
    let incumbent = ffd_count(&sizes);
    let lb = lower_bound_l2(&sizes).max(size_lower_bound_sizes(&sizes));
    if incumbent == lb {
        return Ok(incumbent);
    }
    let mut best = incumbent;
    let mut bins: Vec<Rational> = Vec::new();
    let remaining_total = sizes.iter().cloned().sum::<Rational>();
    branch(&sizes, 0, &mut bins, remaining_total, &mut best);
    Ok(best)
}

fn branch(sizes: &[Rational], idx: usize, bins: &mut Vec<Rational>, remaining: Rational, best: &mut u64) {
    if bins.len() as u64 >= *best {
        return;
    }
    if idx == sizes.len() {
        *best = bins.len() as u64;
        return;
    }
    // Bins can absorb at most their total free space; the rest needs new bins.
    let free: Rational = bins.iter().map(|load| one() - load).sum();
    if remaining > free {
        let extra = ceil_int(&(&remaining - &free)).to_u64().unwrap_or(u64::MAX);
        if bins.len() as u64 + extra >= *best {
            return;
        }
    }
    let size = &sizes[idx];
    let next_remaining = &remaining - size;
    let mut tried: Vec<Rational> = Vec::new();
    for b in 0..bins.len() {
        let load = bins[b].clone();
        if &load + size > one() || tried.contains(&load) {
            continue;
        }
        tried.push(load.clone());
        bins[b] = &load + size;
        branch(sizes, idx + 1, bins, next_remaining.clone(), best);
        bins[b] = load;
    }
    bins.push(size.clone());
    branch(sizes, idx + 1, bins, next_remaining, best);
    bins.pop();
}

fn size_lower_bound_sizes(sizes: &[Rational]) -> u64 {
    let total: Rational = sizes.iter().cloned().sum();
    ceil_int(&total).to_u64().unwrap_or(0)
}

/// Martello-Toth style L2 bound, maximized over thresholds drawn from the
/// item sizes themselves.
fn lower_bound_l2(sizes: &[Rational]) -> u64 {
    let half = crate::rational::rat(1, 2);
    let mut best = 0u64;
    let mut alphas: Vec<Rational> = sizes.iter().filter(|s| **s <= half).cloned().collect();
    alphas.push(zero());
    alphas.dedup();
    for alpha in alphas {
        let big = one() - &alpha;
        let j1 = sizes.iter().filter(|s| **s > big).count() as u64;
        let j2: Vec<&Rational> = sizes.iter().filter(|s| **s > half && **s <= big).collect();
        let j3_sum: Rational = sizes
            .iter()
            .filter(|s| **s <= half && **s >= alpha && !alpha.is_zero())
            .cloned()
            .sum();
        let j2_free: Rational = j2.iter().map(|s| one() - *s).sum();
        let overflow = if j3_sum > j2_free {
            ceil_int(&(&j3_sum - &j2_free)).to_u64().unwrap_or(0)
        } else {
            0
        };
        best = best.max(j1 + j2.len() as u64 + overflow);
    }
    best
}

/// FFD bin count over raw sizes (descending first-fit).
fn ffd_count(sorted_desc: &[Rational]) -> u64 {
    let mut bins: Vec<Rational> = Vec::new();
    for s in sorted_desc {
        match bins.iter_mut().find(|load| &**load + s <= one()) {
            Some(load) => *load += s,
            None => bins.push(s.clone()),
        }
    }
    bins.len() as u64
}

/// Offline first-fit-decreasing packing of an item set.
pub fn ffd_pack(items: &[Item]) -> Packing {
    let mut sorted: Vec<Item> = items.to_vec();
    sorted.sort_by(|a, b| b.size.cmp(&a.size).then(a.id.cmp(&b.id)));
    let mut packing = Packing::new();
    let mut loads: Vec<(u64, Rational)> = Vec::new();
    for item in sorted {
        let slot = loads.iter_mut().find(|(_, load)| &*load + &item.size <= one());
        match slot {
            Some((bin, load)) => {
                *load += &item.size;
                packing.place(*bin, item);
            }
            None => {
                let bin = loads.len() as u64 + 1;
                loads.push((bin, item.size.clone()));
                packing.place(bin, item);
            }
        }
    }
    packing
}

/// Online FirstFit over an event stream: inserts go to the lowest-indexed
/// fitting bin, deletes remove in place, nothing else ever moves.
#[derive(Debug, Clone, Default)]
pub struct FirstFitState {
    pub packing: Packing,
    next_bin: BinCounter,
}

#[derive(Debug, Clone, Default)]
struct BinCounter(u64);

#[derive(Debug, Clone)]
pub struct FirstFitTrace {
    /// Non-empty bin count after each event.
    pub bins_after: Vec<usize>,
    /// A move would contradict FirstFit's no-repacking contract.
    pub moves_observed: usize,
}

impl FirstFitState {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, item: Item) {
        let target = self
            .packing
            .bins
            .iter()
            .filter(|(_, items)| !items.is_empty())
            .find(|(bin, _)| self.packing.load(**bin) + &item.size <= one())
            .map(|(bin, _)| *bin);
        match target {
            Some(bin) => self.packing.place(bin, item),
            None => {
                self.next_bin.0 += 1;
                let bin = self.next_bin.0;
                self.packing.place(bin, item);
            }
        }
    }

    pub fn delete(&mut self, id: ItemId) {
        if let Some(bin) = self.packing.assignment.remove(&id) {
            if let Some(items) = self.packing.bins.get_mut(&bin) {
                items.retain(|i| i.id != id);
                if items.is_empty() {
                    self.packing.bins.remove(&bin);
                }
            }
        }
    }

    pub fn bins(&self) -> usize {
        self.packing.non_empty_bins()
    }
}

pub fn first_fit(stream: &[Event]) -> (FirstFitState, FirstFitTrace) {
    let mut state = FirstFitState::new();
    let mut trace = FirstFitTrace { bins_after: Vec::new(), moves_observed: 0 };
    for ev in stream {
        let before = state.packing.assignment.clone();
        match ev {
            Event::Insert { id, size } => state.insert(Item::new(*id, size.clone())),
            Event::Delete { id } => state.delete(*id),
        }
        for (id, bin) in &before {
            if let Some(new_bin) = state.packing.assignment.get(id) {
                if new_bin != bin {
                    trace.moves_observed += 1;
                }
            }
        }
        trace.bins_after.push(state.bins());
    }
    (state, trace)
}

/// All computable lower bounds for an instance, plus the exact optimum when
/// the instance is small enough.
pub fn lower_bound_suite(items: &[Item], exact_limit: usize) -> Vec<Bound> {
    let mut bounds = Vec::new();
    let size_lb = ceil_int(&size_of(items)).to_u64().unwrap_or(0);
    bounds.push(Bound { kind: BoundKind::SizeLower, value: size_lb });
    if let Some(lin) = crate::lp::exact_lin_for_items(items) {
        bounds.push(Bound { kind: BoundKind::LpLower, value: ceil_int(&lin).to_u64().unwrap_or(0) });
    }
    if let Ok(opt) = exact_opt(items, exact_limit) {
        bounds.push(Bound { kind: BoundKind::Exact, value: opt });
    }
    bounds
}

/// `ceil(SIZE)` of a live item set, the universal cheap lower bound.
pub fn size_lower_bound(items: &[Item]) -> u64 {
    ceil_int(&size_of(items)).to_u64().unwrap_or(0)
}

pub fn size_lower_bound_rat(total: &Rational) -> u64 {
    if total <= &zero() {
        0
    } else {
        ceil_int(total).to_u64().unwrap_or(0)
    }
}

pub fn bound_value(bounds: &[Bound], kind: BoundKind) -> Option<u64> {
    bounds.iter().find(|b| b.kind == kind).map(|b| b.value)
}

/// Best available lower bound: exact when present, else LP, else SIZE.
pub fn best_lower_bound(bounds: &[Bound]) -> u64 {
    bound_value(bounds, BoundKind::Exact)
        .or_else(|| bound_value(bounds, BoundKind::LpLower))
        .or_else(|| bound_value(bounds, BoundKind::SizeLower))
        .unwrap_or(0)
}

pub fn items_from_sizes(sizes: &[Rational]) -> Vec<Item> {
    sizes
        .iter()
        .enumerate()
        .map(|(i, s)| Item::new(i as u64 + 1, s.clone()))
        .collect()
}

/// Exhaustive set-partition optimum; exponential, for cross-checking only.
pub fn exact_opt_enumerate(items: &[Item]) -> u64 {
    assert!(items.len() <= 10, "enumeration oracle is for tiny instances");
    if items.is_empty() {
        return 0;
    }
    let sizes: Vec<Rational> = items.iter().map(|i| i.size.clone()).collect();
    let mut best = items.len() as u64;
    let mut bins: Vec<Rational> = Vec::new();
    enumerate(&sizes, 0, &mut bins, &mut best);
    best
}

fn enumerate(sizes: &[Rational], idx: usize, bins: &mut Vec<Rational>, best: &mut u64) {
    if bins.len() as u64 >= *best {
        return;
    }
    if idx == sizes.len() {
        *best = bins.len() as u64;
        return;
    }
    let s = &sizes[idx];
    for b in 0..bins.len() {
        if &bins[b] + s <= one() {
            let old = bins[b].clone();
            bins[b] = &old + s;
            enumerate(sizes, idx + 1, bins, best);
            bins[b] = old;
        }
    }
    bins.push(s.clone());
    enumerate(sizes, idx + 1, bins, best);
    bins.pop();
}

/// Groups live items by exact size, useful for demand-style displays.
pub fn size_histogram(items: &[Item]) -> BTreeMap<Rational, u64> {
    let mut hist = BTreeMap::new();
    for i in items {
        *hist.entry(i.size.clone()).or_insert(0) += 1;
    }
    hist
}

pub fn size_lower_bound_int(items: &[Item]) -> Rational {
    rat_int(size_lower_bound(items) as i64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::rat;
    use rand::{Rng, SeedableRng};

    fn items(sizes: &[(i64, i64)]) -> Vec<Item> {
        sizes
            .iter()
            .enumerate()
            .map(|(i, (n, d))| Item::new(i as u64 + 1, rat(*n, *d)))
            .collect()
    }

    #[test]
    fn exact_small_cases() {
        assert_eq!(exact_opt(&items(&[(1, 2), (1, 2), (1, 2), (1, 2)]), 20).unwrap(), 2);
        assert_eq!(exact_opt(&items(&[(3, 5), (3, 5), (2, 5), (2, 5)]), 20).unwrap(), 2);
        // 0.7 0.6 0.5 0.4 0.3 -> 3 (e.g. {0.7,0.3},{0.6,0.4},{0.5})
        assert_eq!(
            exact_opt(&items(&[(7, 10), (6, 10), (5, 10), (4, 10), (3, 10)]), 20).unwrap(),
            3
        );
        assert_eq!(exact_opt(&[], 20).unwrap(), 0);
    }

    #[test]
    fn exact_rejects_large_instance() {
        let many = items(&[(1, 2); 25]);
        assert!(exact_opt(&many, 20).is_err());
    }

    #[test]
    fn exact_agrees_with_enumeration() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for _ in 0..60 {
            let n = rng.gen_range(1..=8);
            let instance: Vec<Item> = (0..n)
                .map(|i| Item::new(i + 1, rat(rng.gen_range(1..=12), 12)))
                .collect();
            assert_eq!(
                exact_opt(&instance, 20).unwrap(),
                exact_opt_enumerate(&instance),
                "instance: {instance:?}"
            );
        }
    }

    #[test]
    fn first_fit_basic() {
        // inserts 0.6, 0.7, 0.3, 0.4 -> bins {0.6,0.3},{0.7},{0.4}... first fit:
        // 0.6 -> b1; 0.7 -> b2; 0.3 -> b1 (0.9); 0.4 -> b3. three bins.
        let stream = vec![
            Event::Insert { id: 1, size: rat(3, 5) },
            Event::Insert { id: 2, size: rat(7, 10) },
            Event::Insert { id: 3, size: rat(3, 10) },
            Event::Insert { id: 4, size: rat(2, 5) },
        ];
        let (state, trace) = first_fit(&stream);
        assert_eq!(state.bins(), 3);
        assert_eq!(trace.moves_observed, 0);
        assert_eq!(trace.bins_after, vec![1, 2, 2, 3]);
    }

    #[test]
    fn first_fit_never_moves_packed_items() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut stream = Vec::new();
        let mut live: Vec<ItemId> = Vec::new();
        for id in 1..=200u64 {
            if !live.is_empty() && rng.gen_bool(0.3) {
                let pos = rng.gen_range(0..live.len());
                stream.push(Event::Delete { id: live.remove(pos) });
            } else {
                stream.push(Event::Insert { id, size: rat(rng.gen_range(1..=16), 16) });
                live.push(id);
            }
        }
        let (_, trace) = first_fit(&stream);
        assert_eq!(trace.moves_observed, 0);
    }

    #[test]
    fn bound_ordering_holds() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..25 {
            let n = rng.gen_range(0..=10);
            let instance: Vec<Item> = (0..n)
                .map(|i| Item::new(i + 1, rat(rng.gen_range(1..=20), 20)))
                .collect();
            let bounds = lower_bound_suite(&instance, 20);
            let size = bound_value(&bounds, BoundKind::SizeLower).unwrap();
            let exact = bound_value(&bounds, BoundKind::Exact).unwrap();
            assert!(size <= exact);
            if let Some(lp) = bound_value(&bounds, BoundKind::LpLower) {
                assert!(size <= lp && lp <= exact, "{size} {lp} {exact}");
            }
        }
    }

    #[test]
    fn suite_trivial_cases() {
        let four_halves = items(&[(1, 2), (1, 2), (1, 2), (1, 2)]);
        let bounds = lower_bound_suite(&four_halves, 20);
        assert_eq!(bound_value(&bounds, BoundKind::SizeLower), Some(2));
        assert_eq!(bound_value(&bounds, BoundKind::Exact), Some(2));
        assert!(lower_bound_suite(&[], 20).iter().all(|b| b.value == 0));
    }
}
