//! Dynamic rounding of large items into groups `(l, X, r)`.
//!
//! Groups of one size category form two blocks: `A` groups hold `2^l * k`
//! items, `B` groups hold `2^l * (k-1)`, with slack allowed only at the front
//! of `A` and the tail of `B`. Items inside a category are totally ordered by
//! (size desc, id asc) and groups are consecutive runs of that order, `A`
//! block first. All mutating operations report which items changed group so
//! the LP side can mirror the change.

use crate::model::{Item, ItemId};
use crate::params::Params;
use crate::rational::Rational;
use std::collections::{BTreeMap, BTreeSet, VecDeque};

pub type GroupId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, serde::Serialize)]
pub enum Block {
    A,
    B,
}

impl std::fmt::Display for Block {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Block::A => write!(f, "A"),
            Block::B => write!(f, "B"),
        }
    }
}

/// Address of a group: size category, block and position inside the block.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct GroupKey {
    pub ell: u32,
    pub block: Block,
    pub pos: usize,
}

impl std::fmt::Display for GroupKey {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "({},{},{})", self.ell, self.block, self.pos)
    }
}

/// Group member ordered by size descending, then id ascending.
#[derive(Debug, Clone, PartialEq, Eq)]
struct Entry {
    size: Rational,
    id: ItemId,
}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        other.size.cmp(&self.size).then(self.id.cmp(&other.id))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

#[derive(Debug, Clone, Default)]
struct Category {
    a: VecDeque<GroupId>,
    b: VecDeque<GroupId>,
}

impl Category {
    fn combined(&self) -> Vec<GroupId> {
        self.a.iter().chain(self.b.iter()).copied().collect()
    }

    fn is_empty(&self) -> bool {
        self.a.is_empty() && self.b.is_empty()
    }
}

#[derive(Debug, thiserror::Error, PartialEq, Eq)]
pub enum RoundingError {
    #[error("item of size {0} is small, not handled by the rounding structure")]
    SmallItem(String),
    #[error("unknown item {0}")]
    UnknownItem(ItemId),
    #[error("unknown group {0}")]
    UnknownGroup(String),
    #[error("{0} is not left of {1}")]
    NotLeftOf(String, String),
    #[error("shift source block is empty for category {0}")]
    EmptySource(u32),
    #[error("category {0} cannot supply {1} items for a block shift")]
    InsufficientTail(u32, u64),
    #[error("duplicate item id {0}")]
    DuplicateItem(ItemId),
}

/// One item changing its group assignment. Physical bin placement is the
/// LP layer's business; `to == from` never occurs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ItemMove {
    pub item: ItemId,
    pub from: GroupId,
    pub to: GroupId,
}

/// Moves of one chain shift, ordered left to right: the first mover enters
/// the left endpoint (a fresh bin on the LP side), each later mover takes the
/// slot vacated by its predecessor, and the right endpoint loses one slot.
#[derive(Debug, Clone, Default)]
pub struct ShiftTrace {
    pub moves: Vec<ItemMove>,
    /// Right endpoint group that lost an item (slot to drop), if any moved.
    pub shrunk: Option<GroupId>,
    /// Groups that became empty and were removed from the layout.
    pub removed_groups: Vec<GroupId>,
}

impl ShiftTrace {
    pub fn is_empty(&self) -> bool {
        self.moves.is_empty()
    }
}

/// Group split: `item`s leave `old_group` for `new_group` without moving
/// physically; their rounded size never grows, so slots just re-key.
#[derive(Debug, Clone)]
pub struct Rekey {
    pub old_group: GroupId,
    pub new_group: GroupId,
    pub items: Vec<ItemId>,
}

#[derive(Debug, Clone, Default)]
pub struct InsertOutcome {
    pub group: GroupId,
    pub shift: ShiftTrace,
    /// Overflow of the front group created a fresh front group.
    pub front_split: Option<Rekey>,
    /// The item became a new category maximum; other slots of its group grew.
    pub grew_group_max: Option<GroupId>,
}

#[derive(Debug, Clone, Default)]
pub struct DeleteOutcome {
    pub from_group: GroupId,
    pub size: Rational,
    pub shift: ShiftTrace,
    pub removed_groups: Vec<GroupId>,
    /// Splits caused by reshaping a partial A tail into B groups when the
    /// category had no B block to absorb the chain terminus.
    pub rekeys: Vec<Rekey>,
}

#[derive(Debug, Clone, Default)]
pub struct BlockShiftOutcome {
    pub ell: u32,
    /// Chain shifts executed (2^l of them, or the drain steps).
    pub shifts: Vec<ShiftTrace>,
    /// Group that changed block (none for a drain).
    pub converted: Option<GroupId>,
    pub front_splits: Vec<Rekey>,
    /// True when the literal block conversion was impossible and the lone
    /// partial B group was drained into the A block instead.
    pub drained: bool,
}

#[derive(Debug, Clone, Default)]
pub struct RenameOutcome {
    pub rekeys: Vec<Rekey>,
}

#[derive(Debug, Clone)]
pub struct RoundingViolation(pub String);

#[derive(Debug, Clone)]
pub struct RoundingState {
    cats: BTreeMap<u32, Category>,
    groups: BTreeMap<GroupId, BTreeSet<Entry>>,
    item_group: BTreeMap<ItemId, GroupId>,
    item_size: BTreeMap<ItemId, Rational>,
    next_group: GroupId,
    k: u64,
}

impl RoundingState {
    pub fn new(k: u64) -> Self {
        RoundingState {
            cats: BTreeMap::new(),
            groups: BTreeMap::new(),
            item_group: BTreeMap::new(),
            item_size: BTreeMap::new(),
            next_group: 1,
            k: k.max(1),
        }
    }

    pub fn k(&self) -> u64 {
        self.k
    }

    pub fn len(&self) -> usize {
        self.item_group.len()
    }

    pub fn is_empty(&self) -> bool {
        self.item_group.is_empty()
    }

    pub fn contains(&self, id: ItemId) -> bool {
        self.item_group.contains_key(&id)
    }

    pub fn item_size(&self, id: ItemId) -> Option<&Rational> {
        self.item_size.get(&id)
    }

    pub fn group_of(&self, id: ItemId) -> Option<GroupId> {
        self.item_group.get(&id).copied()
    }

    /// `2^l * k` for `A` groups, `2^l * (k-1)` for `B` groups.
    pub fn full_size(&self, ell: u32, block: Block) -> u64 {
        let base = 1u64 << ell;
        match block {
            Block::A => base * self.k,
            Block::B => base * (self.k - 1),
        }
    }

    pub fn group_len(&self, gid: GroupId) -> usize {
        self.groups.get(&gid).map(|g| g.len()).unwrap_or(0)
    }

    /// Size of the largest item of the group, which is what every member
    /// rounds up to.
    pub fn group_rounded_size(&self, gid: GroupId) -> Option<Rational> {
        self.groups.get(&gid).and_then(|g| g.iter().next()).map(|e| e.size.clone())
    }

    pub fn rounded_size(&self, id: ItemId) -> Result<Rational, RoundingError> {
        let gid = self.item_group.get(&id).ok_or(RoundingError::UnknownItem(id))?;
        Ok(self.group_rounded_size(*gid).expect("non-empty group"))
    }

    pub fn resolve(&self, key: GroupKey) -> Result<GroupId, RoundingError> {
        let cat = self.cats.get(&key.ell).ok_or(RoundingError::UnknownGroup(key.to_string()))?;
        let deque = match key.block {
            Block::A => &cat.a,
            Block::B => &cat.b,
        };
        deque.get(key.pos).copied().ok_or(RoundingError::UnknownGroup(key.to_string()))
    }

    pub fn key_of(&self, gid: GroupId) -> Option<GroupKey> {
        for (ell, cat) in &self.cats {
            if let Some(pos) = cat.a.iter().position(|g| *g == gid) {
                return Some(GroupKey { ell: *ell, block: Block::A, pos });
            }
            if let Some(pos) = cat.b.iter().position(|g| *g == gid) {
                return Some(GroupKey { ell: *ell, block: Block::B, pos });
            }
        }
        None
    }

    /// Non-empty group count per block, over all categories.
    pub fn block_counts(&self) -> (u64, u64) {
        let mut a = 0;
        let mut b = 0;
        for cat in self.cats.values() {
            a += cat.a.len() as u64;
            b += cat.b.len() as u64;
        }
        (a, b)
    }

    pub fn categories(&self) -> impl Iterator<Item = u32> + '_ {
        self.cats.keys().copied()
    }

    /// Groups of one category in left-to-right order.
    pub fn category_groups(&self, ell: u32) -> Vec<GroupId> {
        self.cats.get(&ell).map(|c| c.combined()).unwrap_or_default()
    }

    /// All groups in layout order: categories ascending, left to right within.
    pub fn all_groups(&self) -> Vec<GroupId> {
        self.cats.values().flat_map(|c| c.combined()).collect()
    }

    /// Demand per group: group id -> cardinality.
    pub fn demands(&self) -> BTreeMap<GroupId, u64> {
        self.all_groups()
            .into_iter()
            .map(|g| (g, self.group_len(g) as u64))
            .collect()
    }

    pub fn items_of(&self, gid: GroupId) -> Vec<(ItemId, Rational)> {
        self.groups
            .get(&gid)
            .map(|g| g.iter().map(|e| (e.id, e.size.clone())).collect())
            .unwrap_or_default()
    }

    pub fn total_size(&self) -> Rational {
        self.item_size.values().cloned().sum()
    }

    pub fn live_items(&self) -> Vec<Item> {
        self.item_size
            .iter()
            .map(|(id, s)| Item::new(*id, s.clone()))
            .collect()
    }

    fn fresh_group(&mut self) -> GroupId {
        let gid = self.next_group;
        self.next_group += 1;
        gid
    }

    fn lambda(&self, gid: GroupId) -> Entry {
        self.groups
            .get(&gid)
            .and_then(|g| g.iter().next())
            .cloned()
            .expect("lambda of empty group")
    }

    fn group_min(&self, gid: GroupId) -> Entry {
        self.groups
            .get(&gid)
            .and_then(|g| g.iter().next_back())
            .cloned()
            .expect("min of empty group")
    }

    fn remove_group_if_empty(&mut self, gid: GroupId, trace: &mut Vec<GroupId>) {
        if self.group_len(gid) > 0 {
            return;
        }
        self.groups.remove(&gid);
        for cat in self.cats.values_mut() {
            cat.a.retain(|g| *g != gid);
            cat.b.retain(|g| *g != gid);
        }
        self.cats.retain(|_, c| !c.is_empty());
        trace.push(gid);
    }

    /// The unique `l` with `2^-(l+1) < size <= 2^-l`; rejects small items.
    pub fn categorize(size: &Rational, params: &Params) -> Result<u32, RoundingError> {
        if !params.is_large(size) {
            return Err(RoundingError::SmallItem(crate::rational::format_rational(size)));
        }
        let mut ell = 0u32;
        loop {
            if *size > params.category_lower(ell) && *size <= params.category_upper(ell) {
                return Ok(ell);
            }
            ell += 1;
            assert!(ell <= params.max_category() + 1, "size {size} escaped categorization");
        }
    }

    /// Chain shift between two groups of one category, `g1` left of (or equal
    /// to) `g2`. Every group strictly between keeps its cardinality; `g1`
    /// grows by one, `g2` shrinks by one.
    pub fn shift_ids(&mut self, g1: GroupId, g2: GroupId) -> Result<ShiftTrace, RoundingError> {
        if g1 == g2 {
            return Ok(ShiftTrace::default());
        }
        let ell = self
            .key_of(g1)
            .ok_or_else(|| RoundingError::UnknownGroup(format!("#{g1}")))?
            .ell;
        let key2 = self
            .key_of(g2)
            .ok_or_else(|| RoundingError::UnknownGroup(format!("#{g2}")))?;
        if key2.ell != ell {
            return Err(RoundingError::NotLeftOf(format!("#{g1}"), format!("#{g2}")));
        }
        let combined = self.category_groups(ell);
        let p1 = combined.iter().position(|g| *g == g1).unwrap();
        let p2 = combined.iter().position(|g| *g == g2).unwrap();
        if p1 > p2 {
            return Err(RoundingError::NotLeftOf(format!("#{g1}"), format!("#{g2}")));
        }
        let mut trace = ShiftTrace { shrunk: Some(g2), ..Default::default() };
        for idx in (p1 + 1)..=p2 {
            let src = combined[idx];
            let dst = combined[idx - 1];
            let mover = self.lambda(src);
            self.groups.get_mut(&src).unwrap().remove(&mover);
            self.item_group.insert(mover.id, dst);
            trace.moves.push(ItemMove { item: mover.id, from: src, to: dst });
            self.groups.get_mut(&dst).unwrap().insert(mover);
        }
        self.remove_group_if_empty(g2, &mut trace.removed_groups);
        Ok(trace)
    }

    pub fn shift(&mut self, k1: GroupKey, k2: GroupKey) -> Result<ShiftTrace, RoundingError> {
        let g1 = self.resolve(k1)?;
        let g2 = self.resolve(k2)?;
        self.shift_ids(g1, g2)
    }

    /// Splits the category's front group when it exceeds `2^l * k`: the
    /// largest surplus items move to a fresh front group (position offsets
    /// shift by one, no physical moves).
    fn fix_front_overflow(&mut self, ell: u32) -> Option<Rekey> {
        let cap = self.full_size(ell, Block::A);
        let cat = self.cats.get(&ell)?;
        let front = *cat.combined().first()?;
        let len = self.group_len(front) as u64;
        if len <= cap {
            return None;
        }
        let surplus = (len - cap) as usize;
        let new_gid = self.fresh_group();
        let set = self.groups.get_mut(&front).unwrap();
        let mut moved = Vec::new();
        for _ in 0..surplus {
            let top = set.iter().next().cloned().unwrap();
            set.remove(&top);
            moved.push(top);
        }
        let mut new_set = BTreeSet::new();
        for e in moved.iter() {
            self.item_group.insert(e.id, new_gid);
            new_set.insert(e.clone());
        }
        self.groups.insert(new_gid, new_set);
        self.cats.get_mut(&ell).unwrap().a.push_front(new_gid);
        Some(Rekey {
            old_group: front,
            new_group: new_gid,
            items: moved.into_iter().map(|e| e.id).collect(),
        })
    }

    /// A category whose A block emptied keeps its front group on the B side;
    /// relabelling it as the partial front A group restores the shape every
    /// other operation expects. Cardinality is legal since any B group holds
    /// at most `2^l * (k-1) <= 2^l * k` items.
    fn adopt_b_front(&mut self, ell: u32) -> bool {
        let Some(cat) = self.cats.get_mut(&ell) else { return false };
        if !cat.a.is_empty() || cat.b.is_empty() {
            return false;
        }
        let g = cat.b.pop_front().unwrap();
        cat.a.push_front(g);
        true
    }

    /// Inserts a large item: it joins the group owning its sorted position,
    /// then the chain shift towards the category front restores cardinalities.
    pub fn insert_large(&mut self, item: &Item, params: &Params) -> Result<InsertOutcome, RoundingError> {
        if self.item_group.contains_key(&item.id) {
            return Err(RoundingError::DuplicateItem(item.id));
        }
        let ell = Self::categorize(&item.size, params)?;
        let entry = Entry { size: item.size.clone(), id: item.id };
        self.item_size.insert(item.id, item.size.clone());

        self.adopt_b_front(ell);
        let combined = self.category_groups(ell);
        if combined.is_empty() {
            let gid = self.fresh_group();
            let mut set = BTreeSet::new();
            set.insert(entry);
            self.groups.insert(gid, set);
            self.cats.entry(ell).or_default().a.push_back(gid);
            self.item_group.insert(item.id, gid);
            return Ok(InsertOutcome { group: gid, ..Default::default() });
        }

        // Last group holding an item of size >= s(i); ties sort before the
        // newcomer because existing ids are smaller.
        let mut target = combined[0];
        for gid in &combined {
            if self.lambda(*gid).size >= item.size {
                target = *gid;
            } else {
                break;
            }
        }
        let grew = self.lambda(target).size < item.size;
        self.groups.get_mut(&target).unwrap().insert(entry);
        self.item_group.insert(item.id, target);

        let front = combined[0];
        let shift = self.shift_ids(front, target)?;
        let front_split = self.fix_front_overflow(ell);
        Ok(InsertOutcome {
            group: target,
            shift,
            front_split,
            grew_group_max: if grew { Some(target) } else { None },
        })
    }

    /// Removes an item; the vacancy is filled by the rightward chain pulling
    /// group maxima leftward until the category's last group.
    pub fn delete_large(&mut self, id: ItemId) -> Result<DeleteOutcome, RoundingError> {
        let gid = *self.item_group.get(&id).ok_or(RoundingError::UnknownItem(id))?;
        let size = self.item_size.remove(&id).unwrap();
        let ell = self.key_of(gid).unwrap().ell;
        let entry = Entry { size: size.clone(), id };
        self.groups.get_mut(&gid).unwrap().remove(&entry);
        self.item_group.remove(&id);

        let mut outcome = DeleteOutcome { from_group: gid, size, ..Default::default() };
        let combined = self.category_groups(ell);
        let terminus = *combined.last().unwrap();
        if terminus == gid {
            // No groups to the right; the vacancy simply stays (the group may
            // disappear entirely if it was a singleton).
            self.remove_group_if_empty(gid, &mut outcome.removed_groups);
        } else {
            // The chain refills gid as well when the delete emptied it.
            let shift = self.shift_ids(gid, terminus)?;
            outcome.removed_groups.extend(shift.removed_groups.clone());
            outcome.shift = shift;
        }
        self.fix_partial_a_tail(ell, &mut outcome.rekeys);
        self.adopt_b_front(ell);
        Ok(outcome)
    }

    /// When the delete chain ends in the A block (no B groups), the last A
    /// group goes partial, which only the front position may be. The tail is
    /// reshaped into the B block: full B chunks plus at most one partial.
    fn fix_partial_a_tail(&mut self, ell: u32, rekeys: &mut Vec<Rekey>) {
        let Some(cat) = self.cats.get(&ell) else { return };
        if !cat.b.is_empty() || cat.a.len() < 2 {
            return;
        }
        let tail = *cat.a.back().unwrap();
        if self.group_len(tail) as u64 == self.full_size(ell, Block::A) {
            return;
        }
        let full_b = self.full_size(ell, Block::B);
        if full_b == 0 {
            // k = 1 has no legal B cardinality; only rebuilt states are kept
            // property-clean at that parameter.
            return;
        }
        let parts = self.split_group(tail, full_b, rekeys);
        let cat = self.cats.get_mut(&ell).unwrap();
        cat.a.pop_back();
        for p in parts.into_iter().rev() {
            cat.b.push_front(p);
        }
    }

    /// Whether the literal shiftA applies: the category needs a full front B
    /// group plus `2^l` items behind it.
    pub fn shift_a_viable(&self, ell: u32) -> bool {
        let Some(cat) = self.cats.get(&ell) else { return false };
        if cat.b.is_empty() {
            return false;
        }
        if cat.b.len() == 1 {
            return false;
        }
        let tail: u64 = cat.b.iter().skip(1).map(|g| self.group_len(*g) as u64).sum();
        tail >= (1u64 << ell)
    }

    pub fn shift_b_viable(&self, ell: u32) -> bool {
        self.cats.get(&ell).map(|c| c.a.len() >= 2).unwrap_or(false)
    }

    /// Moves one group from block B to block A by `2^l` chain shifts feeding
    /// the front B group, then relabelling it as the last A group.
    pub fn shift_a(&mut self, ell: u32) -> Result<BlockShiftOutcome, RoundingError> {
        assert!(self.k >= 2, "block shifts need k >= 2");
        let cat = self.cats.get(&ell).ok_or(RoundingError::EmptySource(ell))?;
        if cat.b.is_empty() {
            return Err(RoundingError::EmptySource(ell));
        }
        if !self.shift_a_viable(ell) {
            return self.drain_lone_b(ell);
        }
        let b0 = *self.cats[&ell].b.front().unwrap();
        let mut outcome = BlockShiftOutcome { ell, ..Default::default() };
        let reps = 1u64 << ell;
        for _ in 0..reps {
            let terminus = *self.cats[&ell].b.back().unwrap();
            let trace = self.shift_ids(b0, terminus)?;
            outcome.shifts.push(trace);
        }
        debug_assert_eq!(self.group_len(b0) as u64, self.full_size(ell, Block::A));
        let cat = self.cats.get_mut(&ell).unwrap();
        cat.b.pop_front();
        cat.a.push_back(b0);
        outcome.converted = Some(b0);
        Ok(outcome)
    }

    /// Fallback when the literal block conversion cannot feed the front B
    /// group: the last B group is drained leftward one chain shift at a time
    /// until it disappears, which also shrinks the B side by one group.
    fn drain_lone_b(&mut self, ell: u32) -> Result<BlockShiftOutcome, RoundingError> {
        let mut outcome = BlockShiftOutcome { ell, drained: true, ..Default::default() };
        let cat = self.cats.get(&ell).ok_or(RoundingError::EmptySource(ell))?;
        if cat.a.is_empty() {
            // Nothing to drain into; the front B group becomes the partial
            // front A group instead.
            let cat = self.cats.get_mut(&ell).unwrap();
            let g = cat.b.pop_front().unwrap();
            cat.a.push_front(g);
            outcome.converted = Some(g);
            return Ok(outcome);
        }
        let target = *cat.b.back().unwrap();
        loop {
            let front = *self.cats[&ell].combined().first().unwrap();
            let trace = self.shift_ids(front, target)?;
            let emptied = trace.removed_groups.contains(&target);
            outcome.shifts.push(trace);
            if let Some(split) = self.fix_front_overflow(ell) {
                outcome.front_splits.push(split);
            }
            if emptied {
                break;
            }
        }
        Ok(outcome)
    }

    /// Moves one group from block A to block B: `2^l` chain shifts inside the
    /// A block empty the tail group down to B cardinality, then it joins B.
    pub fn shift_b(&mut self, ell: u32) -> Result<BlockShiftOutcome, RoundingError> {
        assert!(self.k >= 2, "block shifts need k >= 2");
        if !self.shift_b_viable(ell) {
            return Err(RoundingError::EmptySource(ell));
        }
        let mut outcome = BlockShiftOutcome { ell, ..Default::default() };
        let reps = 1u64 << ell;
        let tail = *self.cats[&ell].a.back().unwrap();
        for _ in 0..reps {
            let front = *self.cats[&ell].a.front().unwrap();
            let trace = self.shift_ids(front, tail)?;
            outcome.shifts.push(trace);
            if let Some(split) = self.fix_front_overflow(ell) {
                outcome.front_splits.push(split);
            }
        }
        debug_assert_eq!(self.group_len(tail) as u64, self.full_size(ell, Block::B));
        let cat = self.cats.get_mut(&ell).unwrap();
        cat.a.retain(|g| *g != tail);
        cat.b.push_front(tail);
        outcome.converted = Some(tail);
        Ok(outcome)
    }

    /// Relabels blocks when `k` changes by one. On an increase the full A
    /// groups become the new B block (the partial front stays in A); on a
    /// decrease the full B groups become the new A block. Groups whose
    /// cardinality no longer fits any legal slot are split; splits only ever
    /// lower rounded sizes.
    pub fn rename_blocks(&mut self, new_k: u64) -> RenameOutcome {
        assert!(new_k >= 1);
        assert!(
            new_k == self.k + 1 || new_k + 1 == self.k,
            "rename handles k steps of one, got {} -> {new_k}",
            self.k
        );
        let increase = new_k > self.k;
        let mut outcome = RenameOutcome::default();
        let ells: Vec<u32> = self.cats.keys().copied().collect();
        self.k = new_k;
        for ell in ells {
            let cat = self.cats.get_mut(&ell).unwrap();
            if increase {
                // Requires an empty B block; full A groups of the old k are
                // exactly full B groups of the new k.
                assert!(cat.b.is_empty(), "rename up with non-empty B block");
                let full_old_a = self.full_size(ell, Block::B); // = 2^l * (k_new - 1)
                let mut a = std::mem::take(&mut self.cats.get_mut(&ell).unwrap().a);
                let mut keep_a = VecDeque::new();
                let mut new_b = VecDeque::new();
                while let Some(g) = a.pop_front() {
                    if (self.group_len(g) as u64) == full_old_a {
                        new_b.push_back(g);
                    } else {
                        // Partial front group stays on the A side.
                        assert!(keep_a.is_empty() && new_b.is_empty());
                        keep_a.push_back(g);
                    }
                }
                let cat = self.cats.get_mut(&ell).unwrap();
                cat.a = keep_a;
                cat.b = new_b;
            } else {
                // Requires at most the partial front on the A side.
                assert!(cat.a.len() <= 1, "rename down with multiple A groups");
                let leftover_a = cat.a.pop_front();
                let b = std::mem::take(&mut self.cats.get_mut(&ell).unwrap().b);
                let mut new_a = VecDeque::new();
                let mut new_b = VecDeque::new();
                let full_a = self.full_size(ell, Block::A);
                let full_b = self.full_size(ell, Block::B);
                for (i, g) in b.iter().enumerate() {
                    let len = self.group_len(*g) as u64;
                    if i + 1 < b.len() || len == full_a {
                        debug_assert_eq!(len, full_a, "full old-B group is a full new-A group");
                        new_a.push_back(*g);
                    } else if new_a.is_empty() && leftover_a.is_none() {
                        // A partial tail with nothing before it may serve as
                        // the partial front A group.
                        new_a.push_back(*g);
                    } else {
                        // Partial tail: split into full new-B chunks plus tail.
                        for part in self.split_group(*g, full_b, &mut outcome.rekeys) {
                            new_b.push_back(part);
                        }
                    }
                }
                if let Some(front) = leftover_a {
                    // The old partial front may exceed the new A cardinality.
                    let len = self.group_len(front) as u64;
                    if len > full_a {
                        let parts = self.split_front(front, full_a, &mut outcome.rekeys);
                        for p in parts.into_iter().rev() {
                            new_a.push_front(p);
                        }
                    } else {
                        new_a.push_front(front);
                    }
                }
                let cat = self.cats.get_mut(&ell).unwrap();
                cat.a = new_a;
                cat.b = new_b;
            }
        }
        outcome
    }

    /// Splits `gid` into chunks of `chunk` items (the last may be smaller),
    /// ordered left to right; returns the new layout order. The first chunk
    /// keeps the original id so existing slots stay valid.
    fn split_group(&mut self, gid: GroupId, chunk: u64, rekeys: &mut Vec<Rekey>) -> Vec<GroupId> {
        let len = self.group_len(gid) as u64;
        if chunk == 0 || len <= chunk {
            return vec![gid];
        }
        let entries: Vec<Entry> = self.groups[&gid].iter().cloned().collect();
        let mut order = vec![gid];
        let mut kept = BTreeSet::new();
        for e in entries.iter().take(chunk as usize) {
            kept.insert(e.clone());
        }
        let mut idx = chunk as usize;
        while idx < entries.len() {
            let new_gid = self.fresh_group();
            let mut set = BTreeSet::new();
            let mut moved = Vec::new();
            for e in entries.iter().skip(idx).take(chunk as usize) {
                self.item_group.insert(e.id, new_gid);
                set.insert(e.clone());
                moved.push(e.id);
            }
            self.groups.insert(new_gid, set);
            rekeys.push(Rekey { old_group: gid, new_group: new_gid, items: moved });
            order.push(new_gid);
            idx += chunk as usize;
        }
        self.groups.insert(gid, kept);
        order
    }

    /// Splits an oversized front group into a partial head plus full chunks.
    /// The head keeps the surplus (largest items); chunks follow in order.
    fn split_front(&mut self, gid: GroupId, full: u64, rekeys: &mut Vec<Rekey>) -> Vec<GroupId> {
        let len = self.group_len(gid) as u64;
        debug_assert!(len > full && full > 0);
        let head = len % full;
        let head = if head == 0 { full } else { head };
        // Keep the largest `head` items in gid, split the rest into fulls.
        let entries: Vec<Entry> = self.groups[&gid].iter().cloned().collect();
        let mut kept = BTreeSet::new();
        for e in entries.iter().take(head as usize) {
            kept.insert(e.clone());
        }
        let mut order = vec![gid];
        let mut idx = head as usize;
        while idx < entries.len() {
            let new_gid = self.fresh_group();
            let mut set = BTreeSet::new();
            let mut moved = Vec::new();
            for e in entries.iter().skip(idx).take(full as usize) {
                self.item_group.insert(e.id, new_gid);
                set.insert(e.clone());
                moved.push(e.id);
            }
            self.groups.insert(new_gid, set);
            rekeys.push(Rekey { old_group: gid, new_group: new_gid, items: moved });
            order.push(new_gid);
            idx += full as usize;
        }
        self.groups.insert(gid, kept);
        order
    }

    /// Checks properties (a)-(d), the combined ordering, and the group-count
    /// bound where it applies.
    pub fn verify(&self, params: &Params) -> Vec<RoundingViolation> {
        let mut out = Vec::new();
        let mut seen_items: BTreeSet<ItemId> = BTreeSet::new();
        for (ell, cat) in &self.cats {
            // (a): category membership.
            for gid in cat.combined() {
                let Some(set) = self.groups.get(&gid) else {
                    out.push(RoundingViolation(format!("group #{gid} missing item set")));
                    continue;
                };
                if set.is_empty() {
                    out.push(RoundingViolation(format!("empty group #{gid} in layout")));
                }
                for e in set {
                    if !(e.size > params.category_lower(*ell) && e.size <= params.category_upper(*ell)) {
                        out.push(RoundingViolation(format!(
                            "property (a): item {} size {} outside category {}",
                            e.id,
                            crate::rational::format_rational(&e.size),
                            ell
                        )));
                    }
                    if !seen_items.insert(e.id) {
                        out.push(RoundingViolation(format!("item {} in two groups", e.id)));
                    }
                }
            }
            // (b): combined order, non-increasing sizes across group borders.
            let combined = cat.combined();
            for w in combined.windows(2) {
                let left_min = self.group_min(w[0]);
                let right_max = self.lambda(w[1]);
                if left_min.size < right_max.size {
                    out.push(RoundingViolation(format!(
                        "property (b): group #{} min {} < group #{} max {}",
                        w[0],
                        crate::rational::format_rational(&left_min.size),
                        w[1],
                        crate::rational::format_rational(&right_max.size)
                    )));
                }
            }
            // (c): A cardinalities.
            let full_a = self.full_size(*ell, Block::A);
            for (pos, gid) in cat.a.iter().enumerate() {
                let len = self.group_len(*gid) as u64;
                if pos == 0 {
                    if len > full_a {
                        out.push(RoundingViolation(format!(
                            "property (c): ({ell},A,0) has {len} > {full_a}"
                        )));
                    }
                } else if len != full_a {
                    out.push(RoundingViolation(format!(
                        "property (c): ({ell},A,{pos}) has {len} != {full_a}"
                    )));
                }
            }
            // (d): B cardinalities.
            let full_b = self.full_size(*ell, Block::B);
            for (pos, gid) in cat.b.iter().enumerate() {
                let len = self.group_len(*gid) as u64;
                if pos + 1 < cat.b.len() {
                    if len != full_b {
                        out.push(RoundingViolation(format!(
                            "property (d): ({ell},B,{pos}) has {len} != {full_b}"
                        )));
                    }
                } else if len > full_b {
                    out.push(RoundingViolation(format!(
                        "property (d): ({ell},B,{pos}) has {len} > {full_b}"
                    )));
                }
            }
        }
        for id in self.item_group.keys() {
            if !seen_items.contains(id) {
                out.push(RoundingViolation(format!("item {id} assigned to no layout group")));
            }
        }
        // Group-count bound applies above the size threshold.
        let total = self.total_size();
        if total > params.group_bound_size_threshold() {
            let groups = self.all_groups().len() as u64;
            let bound = params.group_count_bound();
            if groups > bound {
                out.push(RoundingViolation(format!(
                    "group count {groups} exceeds bound {bound} at SIZE {}",
                    crate::rational::format_rational(&total)
                )));
            }
        }
        out
    }

    /// One line per group: `l=0,X=A,r=0: [3/4, 2/3]`.
    pub fn dump(&self) -> String {
        let mut lines = Vec::new();
        for (ell, cat) in &self.cats {
            for (block, deque) in [(Block::A, &cat.a), (Block::B, &cat.b)] {
                for (pos, gid) in deque.iter().enumerate() {
                    let sizes: Vec<String> = self.groups[gid]
                        .iter()
                        .map(|e| crate::rational::format_rational(&e.size))
                        .collect();
                    lines.push(format!("l={ell},X={block},r={pos}: [{}]", sizes.join(", ")));
                }
            }
        }
        lines.join("\n")
    }

    /// Rebuilds the structure from scratch for the given items, with the
    /// block split chosen so the global A fraction lands near `target_a`
    /// (the fractional part of kappa scaled by the group count).
    pub fn rebuild(items: &[Item], k: u64, target_frac: Option<&Rational>, params: &Params) -> Result<Self, RoundingError> {
        let k = k.max(1);
        let mut state = RoundingState::new(k);
        let mut by_cat: BTreeMap<u32, Vec<Entry>> = BTreeMap::new();
        for item in items {
            let ell = Self::categorize(&item.size, params)?;
            if state.item_size.insert(item.id, item.size.clone()).is_some() {
                return Err(RoundingError::DuplicateItem(item.id));
            }
            by_cat
                .entry(ell)
                .or_default()
                .push(Entry { size: item.size.clone(), id: item.id });
        }
        for (ell, mut entries) in by_cat {
            entries.sort();
            let full_a = state.full_size(ell, Block::A);
            let head = entries.len() as u64 % full_a;
            let mut cat = Category::default();
            let mut idx = 0usize;
            let mut chunks: Vec<(usize, usize)> = Vec::new();
            if head > 0 {
                chunks.push((0, head as usize));
                idx = head as usize;
            }
            while idx < entries.len() {
                chunks.push((idx, idx + full_a as usize));
                idx += full_a as usize;
            }
            for (lo, hi) in chunks {
                let gid = state.fresh_group();
                let mut set = BTreeSet::new();
                for e in &entries[lo..hi] {
                    state.item_group.insert(e.id, gid);
                    set.insert(e.clone());
                }
                state.groups.insert(gid, set);
                cat.a.push_back(gid);
            }
            state.cats.insert(ell, cat);
        }
        if let Some(frac) = target_frac {
            state.align_blocks(frac);
        }
        Ok(state)
    }

    /// Converts A tail groups to B until the global A fraction is within one
    /// interval of `frac`. Conversion re-chunks the category tail; used only
    /// during full rebuilds where the packing is rebuilt afterwards anyway.
    fn align_blocks(&mut self, frac: &Rational) {
        if self.k < 2 {
            return;
        }
        let mut fuel = self.all_groups().len() * 2 + 4;
        loop {
            let (a, b) = self.block_counts();
            let n = a + b;
            if n == 0 {
                return;
            }
            let i = crate::rational::floor_int(&(frac * crate::rational::rat_int(n as i64)));
            let i: u64 = i.try_into().unwrap_or(0);
            if a <= i || fuel == 0 {
                return;
            }
            fuel -= 1;
            // Demote the last full A group of the category with the most A groups.
            let mut pick: Option<u32> = None;
            let mut best = 1usize;
            for (ell, cat) in &self.cats {
                if cat.a.len() > best {
                    best = cat.a.len();
                    pick = Some(*ell);
                }
            }
            let Some(ell) = pick else { return };
            let tail = *self.cats[&ell].a.back().unwrap();
            let full_b = self.full_size(ell, Block::B);
            let mut rekeys = Vec::new();
            let parts = self.split_group(tail, full_b, &mut rekeys);
            let cat = self.cats.get_mut(&ell).unwrap();
            cat.a.pop_back();
            for p in parts.into_iter().rev() {
                cat.b.push_front(p);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rational::{rat, rat_int};

    fn params() -> Params {
        Params::new(4).unwrap()
    }

    fn item(id: ItemId, n: i64, d: i64) -> Item {
        Item::new(id, rat(n, d))
    }

    #[test]
    fn categorize_boundaries() {
        let p = params();
        assert_eq!(RoundingState::categorize(&rat(1, 2), &p).unwrap(), 1);
        assert_eq!(RoundingState::categorize(&rat(3, 10), &p).unwrap(), 1);
        assert_eq!(RoundingState::categorize(&rat(1, 4), &p).unwrap(), 2);
        assert_eq!(RoundingState::categorize(&rat_int(1), &p).unwrap(), 0);
        assert!(RoundingState::categorize(&rat(1, 100), &p).is_err());
    }

    #[test]
    fn bootstrap_insert_creates_front_group() {
        let p = params();
        let mut st = RoundingState::new(1);
        let out = st.insert_large(&item(1, 3, 10), &p).unwrap();
        assert!(out.shift.is_empty());
        let key = st.key_of(out.group).unwrap();
        assert_eq!(key, GroupKey { ell: 1, block: Block::A, pos: 0 });
        assert!(st.verify(&p).is_empty());
    }

    #[test]
    fn rounded_size_is_group_max_and_monotone() {
        let p = params();
        let mut st = RoundingState::new(2);
        st.insert_large(&item(1, 35, 100), &p).unwrap();
        st.insert_large(&item(2, 30, 100), &p).unwrap();
        assert_eq!(st.rounded_size(2).unwrap(), rat(35, 100));
        assert_eq!(st.rounded_size(1).unwrap(), rat(35, 100));
        // after deleting the 0.35 the max re-evaluates
        st.delete_large(1).unwrap();
        assert_eq!(st.rounded_size(2).unwrap(), rat(30, 100));
        assert!(st.verify(&p).is_empty());
    }

    #[test]
    fn shift_degenerate_is_noop() {
        let p = params();
        let mut st = RoundingState::new(1);
        st.insert_large(&item(1, 1, 2), &p).unwrap();
        let gid = st.group_of(1).unwrap();
        let trace = st.shift_ids(gid, gid).unwrap();
        assert!(trace.is_empty());
        assert_eq!(st.group_len(gid), 1);
    }

    #[test]
    fn shift_moves_chain_left() {
        let p = params();
        // category 1 sizes in (1/4,1/2]; k=2 so A groups hold 4... use k=1:
        // groups of 2. Build [A0]={0.5,0.45}, [A1]={0.4,0.35} via rebuild.
        let items = vec![item(1, 50, 100), item(2, 45, 100), item(3, 40, 100), item(4, 35, 100)];
        let mut st = RoundingState::rebuild(&items, 1, None, &p).unwrap();
        // k=1 => full A size 2 per group at ell=1
        let groups = st.category_groups(1);
        assert_eq!(groups.len(), 2);
        let (g0, g1) = (groups[0], groups[1]);
        let trace = st.shift_ids(g0, g1).unwrap();
        assert_eq!(trace.moves.len(), 1);
        assert_eq!(st.group_len(g0), 3);
        assert_eq!(st.group_len(g1), 1);
        // the mover is the max of g1 = 0.40
        assert_eq!(trace.moves[0].item, 3);
    }

    #[test]
    fn shift_cardinality_law_three_groups() {
        let p = params();
        let sizes: Vec<(i64, i64)> = vec![(50, 100), (48, 100), (46, 100), (44, 100), (42, 100), (40, 100)];
        let items: Vec<Item> = sizes.iter().enumerate().map(|(i, (n, d))| item(i as u64 + 1, *n, *d)).collect();
        let mut st = RoundingState::rebuild(&items, 1, None, &p).unwrap();
        let groups = st.category_groups(1);
        assert_eq!(groups.len(), 3);
        let lens_before: Vec<usize> = groups.iter().map(|g| st.group_len(*g)).collect();
        let trace = st.shift_ids(groups[0], groups[2]).unwrap();
        assert_eq!(trace.moves.len(), 2);
        let lens_after: Vec<usize> = groups.iter().map(|g| st.group_len(*g)).collect();
        assert_eq!(lens_after[0], lens_before[0] + 1);
        assert_eq!(lens_after[1], lens_before[1]);
        assert_eq!(lens_after[2], lens_before[2] - 1);
    }

    #[test]
    fn insert_tie_breaks_by_id() {
        let p = params();
        let mut st = RoundingState::new(1);
        st.insert_large(&item(1, 1, 2), &p).unwrap();
        st.insert_large(&item(2, 1, 2), &p).unwrap();
        // equal size: the newer item sorts after the older one
        let g1 = st.group_of(1).unwrap();
        let g2 = st.group_of(2).unwrap();
        let k1 = st.key_of(g1).unwrap();
        let k2 = st.key_of(g2).unwrap();
        assert!(k1.pos <= k2.pos, "older item stays left: {k1} vs {k2}");
        assert!(st.verify(&p).is_empty());
    }

    #[test]
    fn insert_overflow_creates_new_front() {
        let p = params();
        // ell=0 sizes in (1/2,1]; k=1 so A groups hold exactly 1.
        let mut st = RoundingState::new(1);
        st.insert_large(&item(1, 3, 5), &p).unwrap();
        let out = st.insert_large(&item(2, 7, 10), &p).unwrap();
        assert!(out.front_split.is_some() || st.category_groups(0).len() == 2);
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
        let groups = st.category_groups(0);
        assert_eq!(groups.len(), 2);
        for g in groups {
            assert_eq!(st.group_len(g), 1);
        }
    }

    #[test]
    fn delete_from_middle_keeps_properties() {
        let p = params();
        let items: Vec<Item> = (0..9)
            .map(|i| item(i as u64 + 1, 50 - i, 100))
            .collect();
        let mut st = RoundingState::rebuild(&items, 2, None, &p).unwrap();
        assert!(st.verify(&p).is_empty());
        let out = st.delete_large(4).unwrap();
        assert!(!out.shift.is_empty() || !out.removed_groups.is_empty() || !out.rekeys.is_empty());
        assert!(st.verify(&p).is_empty(), "{:?}\n{}", st.verify(&p), st.dump());
        assert_eq!(st.len(), 8);
    }

    #[test]
    fn delete_terminus_no_chain() {
        let p = params();
        let items: Vec<Item> = (0..4).map(|i| item(i as u64 + 1, 50 - i, 100)).collect();
        let mut st = RoundingState::rebuild(&items, 2, None, &p).unwrap();
        let groups = st.category_groups(1);
        assert_eq!(groups.len(), 1);
        let last = *groups.last().unwrap();
        let (victim, _) = *st.items_of(last).last().unwrap();
        let out = st.delete_large(victim).unwrap();
        assert!(out.shift.moves.is_empty());
        assert!(st.verify(&p).is_empty(), "{:?}\n{}", st.verify(&p), st.dump());
    }

    #[test]
    fn delete_only_item_empties_category() {
        let p = params();
        let mut st = RoundingState::new(1);
        st.insert_large(&item(7, 2, 5), &p).unwrap();
        let out = st.delete_large(7).unwrap();
        assert_eq!(out.removed_groups.len(), 1);
        assert!(st.is_empty());
        assert!(st.category_groups(1).is_empty());
    }

    #[test]
    fn shift_a_and_b_round_trip_cardinalities() {
        let p = params();
        // ell=0, k=3: A groups of 3, B groups of 2.
        let items: Vec<Item> = (0..13).map(|i| item(i as u64 + 1, 100 - i, 117)).collect();
        let mut st = RoundingState::rebuild(&items, 3, None, &p).unwrap();
        // Demote the last two A groups (6 items) into three full B groups.
        let mut rekeys = Vec::new();
        let t2 = st.cats.get_mut(&0).unwrap().a.pop_back().unwrap();
        let t1 = st.cats.get_mut(&0).unwrap().a.pop_back().unwrap();
        let moved: Vec<Entry> = st.groups.remove(&t2).unwrap().into_iter().collect();
        for e in moved {
            st.item_group.insert(e.id, t1);
            st.groups.get_mut(&t1).unwrap().insert(e);
        }
        let parts = st.split_group(t1, st.full_size(0, Block::B), &mut rekeys);
        for part in parts {
            st.cats.get_mut(&0).unwrap().b.push_back(part);
        }
        assert!(st.verify(&p).is_empty(), "{:?}\n{}", st.verify(&p), st.dump());
        let (a0, b0) = st.block_counts();
        assert_eq!((a0, b0), (3, 3));
        let out = st.shift_a(0).unwrap();
        assert!(!out.drained);
        assert!(st.verify(&p).is_empty(), "{:?}\n{}", st.verify(&p), st.dump());
        let (a1, b1) = st.block_counts();
        assert_eq!(a1, a0 + 1);
        assert_eq!(b1, b0 - 1);
        let out = st.shift_b(0).unwrap();
        assert!(out.converted.is_some());
        assert!(st.verify(&p).is_empty(), "{:?}\n{}", st.verify(&p), st.dump());
        let (a2, b2) = st.block_counts();
        assert_eq!((a2, b2), (a0, b0));
    }

    #[test]
    fn shift_a_with_ell_one_moves_two_items() {
        let p = params();
        // ell=1, k=2: A groups of 4, B groups of 2.
        let items: Vec<Item> = (0..14).map(|i| item(i as u64 + 1, 50 - i, 100)).collect();
        let mut st = RoundingState::rebuild(&items, 2, None, &p).unwrap();
        let mut rekeys = Vec::new();
        // demote the tail A group (4 items) into two B groups of 2
        let tail = *st.cats[&1].a.back().unwrap();
        let parts = st.split_group(tail, st.full_size(1, Block::B), &mut rekeys);
        let cat = st.cats.get_mut(&1).unwrap();
        cat.a.pop_back();
        for part in parts.into_iter().rev() {
            cat.b.push_front(part);
        }
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
        let out = st.shift_a(1).unwrap();
        assert_eq!(out.shifts.len(), 2);
        let converted = out.converted.unwrap();
        assert_eq!(st.group_len(converted) as u64, st.full_size(1, Block::A));
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
    }

    #[test]
    fn rename_up_then_down_preserves_properties() {
        let p = params();
        let items: Vec<Item> = (0..12).map(|i| item(i as u64 + 1, 90 - i, 100)).collect();
        let mut st = RoundingState::rebuild(&items, 2, None, &p).unwrap();
        assert!(st.verify(&p).is_empty());
        // drain B (rebuild has all-A) then rename up
        st.rename_blocks(3);
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
        assert_eq!(st.k(), 3);
        // every category now has at most a partial front in A
        let (a, _b) = st.block_counts();
        assert!(a <= st.cats.len() as u64);
        st.rename_blocks(2);
        assert!(st.verify(&p).is_empty(), "{:?}", st.verify(&p));
        assert_eq!(st.k(), 2);
    }

    #[test]
    fn random_ops_keep_invariants() {
        use rand::{Rng, SeedableRng};
        let p = params();
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(42);
        let mut st = RoundingState::new(2);
        let mut live: Vec<ItemId> = Vec::new();
        let mut next = 1u64;
        for _ in 0..400 {
            if live.is_empty() || rng.gen_bool(0.65) {
                let size = rat(rng.gen_range(2..=112), 112);
                if !p.is_large(&size) {
                    continue;
                }
                st.insert_large(&Item::new(next, size), &p).unwrap();
                live.push(next);
                next += 1;
            } else {
                let idx = rng.gen_range(0..live.len());
                let id = live.swap_remove(idx);
                st.delete_large(id).unwrap();
            }
            let report = st.verify(&p);
            assert!(report.is_empty(), "violations after op: {report:?}\n{}", st.dump());
        }
    }

    #[test]
    fn dump_format() {
        let p = params();
        let mut st = RoundingState::new(1);
        st.insert_large(&item(1, 1, 2), &p).unwrap();
        let dump = st.dump();
        assert_eq!(dump, "l=1,X=A,r=0: [1/2]");
    }
}
