//! Items, events, packings and the migration ledger.

use crate::rational::{format_rational, serde_rational, to_f64, zero, Rational};
use num_traits::Zero;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

pub type ItemId = u64;
pub type BinId = u64;

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord)]
pub struct Item {
    pub id: ItemId,
    pub size: Rational,
}

impl Item {
    pub fn new(id: ItemId, size: Rational) -> Self {
        assert!(size > zero() && size <= crate::rational::one(), "item size must be in (0,1]");
        Item { id, size }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Event {
    Insert {
        id: ItemId,
        #[serde(with = "serde_rational")]
        size: Rational,
    },
    Delete {
        id: ItemId,
    },
}

impl Event {
    pub fn id(&self) -> ItemId {
        match self {
            Event::Insert { id, .. } | Event::Delete { id } => *id,
        }
    }
}

/// Reads a JSON-lines event stream. Blank lines are skipped.
pub fn read_stream<R: BufRead>(reader: R) -> Result<Vec<Event>, String> {
    let mut events = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if line.trim().is_empty() {
            continue;
        }
        let ev: Event =
            serde_json::from_str(&line).map_err(|e| format!("line {}: {e}", lineno + 1))?;
        if let Event::Insert { size, .. } = &ev {
            if *size <= zero() || *size > crate::rational::one() {
                return Err(format!(
                    "line {}: size {} outside (0,1]",
                    lineno + 1,
                    format_rational(size)
                ));
            }
        }
        events.push(ev);
    }
    Ok(events)
}

pub fn write_stream<W: Write>(writer: &mut W, events: &[Event]) -> std::io::Result<()> {
    for ev in events {
        let line = serde_json::to_string(ev).expect("event serializes");
        writeln!(writer, "{line}")?;
    }
    Ok(())
}

/// A concrete packing: ordered bins plus the item -> bin assignment.
/// Bin ids are stable over the lifetime of an engine; they are never reused.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Packing {
    pub bins: BTreeMap<BinId, Vec<Item>>,
    pub assignment: BTreeMap<ItemId, BinId>,
}

impl Packing {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn place(&mut self, bin: BinId, item: Item) {
        self.assignment.insert(item.id, bin);
        self.bins.entry(bin).or_default().push(item);
    }

    pub fn load(&self, bin: BinId) -> Rational {
        self.bins
            .get(&bin)
            .map(|items| items.iter().map(|i| i.size.clone()).sum())
            .unwrap_or_else(zero)
    }

    pub fn non_empty_bins(&self) -> usize {
        self.bins.values().filter(|items| !items.is_empty()).count()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum PackingViolation {
    Overload { bin: BinId, load: Rational, capacity: Rational },
    Unpacked { item: ItemId },
    DuplicatePlacement { item: ItemId },
}

impl std::fmt::Display for PackingViolation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            PackingViolation::Overload { bin, load, capacity } => {
                write!(f, "bin {bin}: load {} > {}", format_rational(load), format_rational(capacity))
            }
            PackingViolation::Unpacked { item } => write!(f, "item {item} unpacked"),
            PackingViolation::DuplicatePlacement { item } => {
                write!(f, "item {item} packed more than once")
            }
        }
    }
}

/// Checks the feasibility definition: every item packed exactly once and
/// every bin load within its capacity. `capacities` overrides the default
/// unit capacity per bin (the mixed setting uses reduced capacities).
pub fn validate_packing(
    packing: &Packing,
    items: &[Item],
    capacities: &BTreeMap<BinId, Rational>,
) -> Vec<PackingViolation> {
    let mut violations = Vec::new();
    let mut seen: BTreeSet<ItemId> = BTreeSet::new();
    for (bin, contents) in &packing.bins {
        let mut load = zero();
        for item in contents {
            if !seen.insert(item.id) {
                violations.push(PackingViolation::DuplicatePlacement { item: item.id });
            }
            load += &item.size;
        }
        let cap = capacities.get(bin).cloned().unwrap_or_else(crate::rational::one);
        if load > cap {
            violations.push(PackingViolation::Overload { bin: *bin, load, capacity: cap });
        }
    }
    for item in items {
        if !seen.contains(&item.id) {
            violations.push(PackingViolation::Unpacked { item: item.id });
        }
    }
    violations
}

/// One per-event migration record.
#[derive(Debug, Clone, Serialize)]
pub struct StepRecord {
    #[serde(with = "serde_rational")]
    pub event_size: Rational,
    #[serde(with = "serde_rational")]
    pub moved_size: Rational,
    pub repacked_bins: usize,
    pub shifting_moves: usize,
}

impl StepRecord {
    /// `moved / s(trigger)`; the trigger itself never counts as moved.
    pub fn migration_factor(&self) -> Rational {
        if self.event_size.is_zero() {
            zero()
        } else {
            &self.moved_size / &self.event_size
        }
    }

    pub fn migration_factor_f64(&self) -> f64 {
        to_f64(&self.migration_factor())
    }
}

#[derive(Debug, Clone, Default)]
pub struct MigrationLedger {
    pub steps: Vec<StepRecord>,
}

impl MigrationLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn max_migration_factor(&self) -> Rational {
        self.steps
            .iter()
            .map(|s| s.migration_factor())
            .max()
            .unwrap_or_else(zero)
    }

    pub fn total_moved(&self) -> Rational {
        self.steps.iter().map(|s| s.moved_size.clone()).sum()
    }
}

/// Diffs two assignments and appends one record. Items whose bin id changed
/// count toward `moved_size`, except the trigger item (its size is the
/// denominator of the migration factor, not part of the numerator).
pub fn record_step(
    ledger: &mut MigrationLedger,
    before: &Packing,
    after: &Packing,
    trigger: &Item,
) -> StepRecord {
    let mut moved_size = zero();
    let mut moved_items: Vec<(ItemId, Option<BinId>, Option<BinId>)> = Vec::new();
    for (item_id, old_bin) in &before.assignment {
        if *item_id == trigger.id {
            continue;
        }
        match after.assignment.get(item_id) {
            Some(new_bin) if new_bin != old_bin => {
                moved_items.push((*item_id, Some(*old_bin), Some(*new_bin)));
            }
            None => {
                // Item left the packing without being the trigger: counted as moved.
                moved_items.push((*item_id, Some(*old_bin), None));
            }
            _ => {}
        }
    }
    for (item_id, new_bin) in &after.assignment {
        if *item_id == trigger.id || before.assignment.contains_key(item_id) {
            continue;
        }
        moved_items.push((*item_id, None, Some(*new_bin)));
    }
    let size_of_item = |id: ItemId| -> Rational {
        after
            .assignment
            .get(&id)
            .and_then(|b| after.bins.get(b))
            .and_then(|items| items.iter().find(|i| i.id == id))
            .or_else(|| {
                before
                    .assignment
                    .get(&id)
                    .and_then(|b| before.bins.get(b))
                    .and_then(|items| items.iter().find(|i| i.id == id))
            })
            .map(|i| i.size.clone())
            .unwrap_or_else(zero)
    };
    let mut transfer_pairs: BTreeSet<(Option<BinId>, Option<BinId>)> = BTreeSet::new();
    for (id, from, to) in &moved_items {
        moved_size += size_of_item(*id);
        transfer_pairs.insert((*from, *to));
    }
    let mut changed_bins: BTreeSet<BinId> = BTreeSet::new();
    for (bin, contents) in &before.bins {
        if after.bins.get(bin).map(|c| sorted_ids(c)) != Some(sorted_ids(contents)) {
            changed_bins.insert(*bin);
        }
    }
    for (bin, contents) in &after.bins {
        if !before.bins.contains_key(bin) && !contents.is_empty() {
            changed_bins.insert(*bin);
        }
    }
    let record = StepRecord {
        event_size: trigger.size.clone(),
        moved_size,
        repacked_bins: changed_bins.len(),
        shifting_moves: transfer_pairs.len(),
    };
    ledger.steps.push(record.clone());
    record
}

fn sorted_ids(items: &[Item]) -> Vec<ItemId> {
    let mut ids: Vec<ItemId> = items.iter().map(|i| i.id).collect();
    ids.sort_unstable();
    ids
}

/// `SIZE(I) = sum of item sizes`, exact.
pub fn size_of<'a, I: IntoIterator<Item = &'a Item>>(items: I) -> Rational {
    items.into_iter().map(|i| i.size.clone()).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{rat, rat_int};

    fn item(id: ItemId, n: i64, d: i64) -> Item {
        Item::new(id, rat(n, d))
    }

    #[test]
    fn validate_exact_fit_ok() {
        let mut p = Packing::new();
        p.place(1, item(1, 1, 2));
        p.place(1, item(2, 1, 2));
        let items = vec![item(1, 1, 2), item(2, 1, 2)];
        assert!(validate_packing(&p, &items, &BTreeMap::new()).is_empty());
    }

    #[test]
    fn validate_reports_overflow() {
        let mut p = Packing::new();
        p.place(1, item(1, 3, 5));
        p.place(1, item(2, 1, 2));
        let items = vec![item(1, 3, 5), item(2, 1, 2)];
        let report = validate_packing(&p, &items, &BTreeMap::new());
        assert_eq!(report.len(), 1);
        assert!(matches!(&report[0], PackingViolation::Overload { load, .. } if *load == rat(11, 10)));
    }

    #[test]
    fn validate_reports_orphan() {
        let mut p = Packing::new();
        p.place(1, item(1, 3, 10));
        let items = vec![item(1, 3, 10), item(2, 2, 5)];
        let report = validate_packing(&p, &items, &BTreeMap::new());
        assert_eq!(report, vec![PackingViolation::Unpacked { item: 2 }]);
    }

    #[test]
    fn validation_stable_under_bin_reordering() {
        let mut a = Packing::new();
        a.place(1, item(1, 1, 2));
        a.place(2, item(2, 1, 3));
        let mut b = Packing::new();
        b.place(2, item(2, 1, 3));
        b.place(1, item(1, 1, 2));
        let items = vec![item(1, 1, 2), item(2, 1, 3)];
        assert_eq!(
            validate_packing(&a, &items, &BTreeMap::new()),
            validate_packing(&b, &items, &BTreeMap::new())
        );
    }

    #[test]
    fn record_step_no_moves() {
        let mut p = Packing::new();
        p.place(1, item(1, 1, 2));
        let mut ledger = MigrationLedger::new();
        let rec = record_step(&mut ledger, &p.clone(), &p, &item(1, 1, 2));
        assert_eq!(rec.moved_size, zero());
    }

    #[test]
    fn record_step_direct_ratio() {
        let mut before = Packing::new();
        before.place(1, item(1, 1, 8));
        before.place(2, item(2, 1, 4));
        let mut after = Packing::new();
        after.place(3, item(1, 1, 8));
        after.place(2, item(2, 1, 4));
        let mut ledger = MigrationLedger::new();
        let rec = record_step(&mut ledger, &before, &after, &item(2, 1, 4));
        assert_eq!(rec.migration_factor(), rat(1, 2));
    }

    #[test]
    fn record_step_hand_sum() {
        // items 1/8 and 1/16 moved, trigger 1/16 -> factor (1/8+1/16)/(1/16) = 3
        let mut before = Packing::new();
        before.place(1, item(1, 1, 8));
        before.place(1, item(2, 1, 16));
        before.place(2, item(3, 1, 16));
        let mut after = Packing::new();
        after.place(3, item(1, 1, 8));
        after.place(4, item(2, 1, 16));
        after.place(2, item(3, 1, 16));
        let mut ledger = MigrationLedger::new();
        let rec = record_step(&mut ledger, &before, &after, &item(3, 1, 16));
        assert_eq!(rec.migration_factor(), rat_int(3));
    }

    #[test]
    fn size_of_examples() {
        assert_eq!(size_of(&[]), zero());
        assert_eq!(size_of(&[item(1, 1, 2), item(2, 1, 3)]), rat(5, 6));
        let hundred: Vec<Item> = (0..100).map(|i| item(i, 1, 4)).collect();
        assert_eq!(size_of(&hundred), rat_int(25));
    }

    #[test]
    fn stream_round_trip() {
        let events = vec![
            Event::Insert { id: 1, size: rat(3, 10) },
            Event::Delete { id: 1 },
        ];
        let mut buf = Vec::new();
        write_stream(&mut buf, &events).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.contains(r#""op":"insert""#));
        assert!(text.contains(r#""size":"3/10""#));
        let back = read_stream(std::io::Cursor::new(buf)).unwrap();
        assert_eq!(back, events);
    }
}
