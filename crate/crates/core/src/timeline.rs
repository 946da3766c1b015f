//! The annotated Timeline: one slice per (patch, layer) with neighbour masks,
//! per-qubit deadlines, lazily computed causal cones and online idle-layer
//! insertion.
//!
//! Layers are addressed two ways. A [`LayerKey`] is a stable handle that
//! survives idle insertion; the *position* (`t`) of a layer is its current
//! index and shifts by one for every idle layer inserted at or below it.
//! Deadlines are stored as layer keys so insertion never rewrites them.

use std::collections::HashSet;
use std::fmt::{self, Write as _};
use std::num::NonZeroUsize;

use lru::LruCache;
use thiserror::Error;

use crate::slice_graph::SliceState;
use crate::workload::{Coord, LogicalLayout, OpKind, Workload};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SliceId(pub u32);

impl SliceId {
    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl fmt::Display for SliceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Stable layer handle. Original workload layers keep their workload index as
/// key; inserted idle layers get fresh keys past the original count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerKey(pub u32);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Direction {
    Prev = 0,
    Next = 1,
    Up = 2,
    Down = 3,
    Left = 4,
    Right = 5,
}

impl Direction {
    pub const ALL: [Direction; 6] = [
        Direction::Prev,
        Direction::Next,
        Direction::Up,
        Direction::Down,
        Direction::Left,
        Direction::Right,
    ];

    pub fn mirror(self) -> Direction {
        match self {
            Direction::Prev => Direction::Next,
            Direction::Next => Direction::Prev,
            Direction::Up => Direction::Down,
            Direction::Down => Direction::Up,
            Direction::Left => Direction::Right,
            Direction::Right => Direction::Left,
        }
    }

    pub fn is_spatial(self) -> bool {
        !matches!(self, Direction::Prev | Direction::Next)
    }

    fn offset(self) -> (isize, isize) {
        match self {
            Direction::Up => (-1, 0),
            Direction::Down => (1, 0),
            Direction::Left => (0, -1),
            Direction::Right => (0, 1),
            _ => (0, 0),
        }
    }
}

/// 6-bit immediate-neighbour mask ordered `(t-1, t+1, up, down, left, right)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Hash)]
pub struct NeighborMask(u8);

impl NeighborMask {
    pub const EMPTY: NeighborMask = NeighborMask(0);

    pub fn has(self, d: Direction) -> bool {
        self.0 & (1 << d as u8) != 0
    }

    pub fn set(&mut self, d: Direction) {
        self.0 |= 1 << d as u8;
    }

    pub fn clear(&mut self, d: Direction) {
        self.0 &= !(1 << d as u8);
    }

    pub fn count(self) -> u32 {
        self.0.count_ones()
    }

    pub fn directions(self) -> impl Iterator<Item = Direction> {
        Direction::ALL.into_iter().filter(move |&d| self.has(d))
    }

    pub fn bits(self) -> u8 {
        self.0
    }
}

impl fmt::Display for NeighborMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for d in Direction::ALL {
            f.write_char(if self.has(d) { '1' } else { '0' })?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Slice {
    pub id: SliceId,
    pub layer: LayerKey,
    pub qubit: usize,
    pub pos: Coord,
    pub op: OpKind,
    /// Instruction instance this slice belongs to; merge partners share it.
    pub group: u32,
    /// Number of patches in the instruction.
    pub group_size: usize,
    pub mask: NeighborMask,
    pub critical: bool,
    /// Layer of the nearest critical instruction at or after this slice on the
    /// same qubit.
    pub deadline: Option<LayerKey>,
    pub state: SliceState,
    /// For inserted idle slices: the layer whose execution this idle delayed.
    pub stall_for: Option<LayerKey>,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TimelineError {
    #[error("unknown slice {0}")]
    UnknownSlice(SliceId),
    #[error("slice {0} is not critical")]
    NotCritical(SliceId),
    #[error("layer {layer} out of range 0..={len}")]
    LayerOutOfRange { layer: usize, len: usize },
}

#[derive(Debug, Clone)]
pub struct Timeline {
    layout: LogicalLayout,
    slices: Vec<Slice>,
    order: Vec<LayerKey>,
    layer_pos: Vec<usize>,
    layer_slices: Vec<Vec<SliceId>>,
    original_layer_count: usize,
    inserted_idle_count: usize,
    epoch: u64,
    completions: u64,
    next_group: u32,
    /// Non-COMPLETED slices per layer key.
    open: Vec<u32>,
    /// Lowest layer position holding a non-COMPLETED slice.
    floor: usize,
}

/// Single pass over the workload producing one slice per (qubit, layer).
pub fn build_timeline(w: &Workload) -> Timeline {
    let layout = w.layout().clone();
    let n = layout.n_qubits();
    let n_layers = w.n_layers();
    let mut slices = Vec::with_capacity(n * n_layers);
    let mut layer_slices = Vec::with_capacity(n_layers);
    let mut group = 0u32;
    for t in 0..n_layers {
        let mut ids = vec![SliceId(0); n];
        let mut group_of = vec![(0u32, 0usize, OpKind::Idle, false); n];
        for ins in w.layer(t) {
            for &q in &ins.patches {
                group_of[q] = (group, ins.patches.len(), ins.kind, ins.critical);
            }
            group += 1;
        }
        for q in 0..n {
            let id = SliceId((t * n + q) as u32);
            ids[q] = id;
            let (g, size, op, critical) = group_of[q];
            let mut mask = NeighborMask::EMPTY;
            if t > 0 {
                mask.set(Direction::Prev);
            }
            if t + 1 < n_layers {
                mask.set(Direction::Next);
            }
            if op == OpKind::Merge {
                let c = layout.coord(q);
                for d in [Direction::Up, Direction::Down, Direction::Left, Direction::Right] {
                    let (dr, dc) = d.offset();
                    if let Some(nq) = layout.at(c.row as isize + dr, c.col as isize + dc) {
                        if group_of[nq].0 == g {
                            mask.set(d);
                        }
                    }
                }
            }
            slices.push(Slice {
                id,
                layer: LayerKey(t as u32),
                qubit: q,
                pos: layout.coord(q),
                op,
                group: g,
                group_size: size,
                mask,
                critical,
                deadline: None,
                state: SliceState::Ungenerated,
                stall_for: None,
            });
        }
        layer_slices.push(ids);
    }
    for q in 0..n {
        let mut next: Option<LayerKey> = None;
        for t in (0..n_layers).rev() {
            let s = &mut slices[t * n + q];
            if s.critical {
                next = Some(s.layer);
            }
            s.deadline = next;
        }
    }
    Timeline {
        layout,
        slices,
        order: (0..n_layers as u32).map(LayerKey).collect(),
        layer_pos: (0..n_layers).collect(),
        layer_slices,
        original_layer_count: n_layers,
        inserted_idle_count: 0,
        epoch: 0,
        completions: 0,
        next_group: group,
        open: vec![n as u32; n_layers],
        floor: 0,
    }
}

impl Timeline {
    pub fn layout(&self) -> &LogicalLayout {
        &self.layout
    }

    pub fn n_qubits(&self) -> usize {
        self.layout.n_qubits()
    }

    pub fn n_slices(&self) -> usize {
        self.slices.len()
    }

    pub fn n_layers(&self) -> usize {
        self.order.len()
    }

    pub fn original_layer_count(&self) -> usize {
        self.original_layer_count
    }

    pub fn inserted_idle_count(&self) -> usize {
        self.inserted_idle_count
    }

    /// Bumped on every structural change (idle insertion).
    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    /// Number of slices that have reached COMPLETED so far.
    pub fn completions(&self) -> u64 {
        self.completions
    }

    pub fn slices(&self) -> &[Slice] {
        &self.slices
    }

    pub fn get(&self, id: SliceId) -> Result<&Slice, TimelineError> {
        self.slices.get(id.index()).ok_or(TimelineError::UnknownSlice(id))
    }

    pub fn slice(&self, id: SliceId) -> &Slice {
        &self.slices[id.index()]
    }

    pub fn state(&self, id: SliceId) -> SliceState {
        self.slices[id.index()].state
    }

    pub(crate) fn set_state(&mut self, id: SliceId, state: SliceState) {
        let s = &mut self.slices[id.index()];
        if state == SliceState::Completed && s.state != SliceState::Completed {
            self.completions += 1;
            self.open[s.layer.0 as usize] -= 1;
            while self.floor < self.order.len() && self.open[self.order[self.floor].0 as usize] == 0 {
                self.floor += 1;
            }
        }
        s.state = state;
    }

    /// Every layer below this position is fully COMPLETED.
    pub fn completed_floor(&self) -> usize {
        self.floor
    }

    /// Current layer index of a slice.
    pub fn t(&self, id: SliceId) -> usize {
        self.layer_pos[self.slices[id.index()].layer.0 as usize]
    }

    pub fn layer_position(&self, key: LayerKey) -> usize {
        self.layer_pos[key.0 as usize]
    }

    pub fn layer_key(&self, t: usize) -> LayerKey {
        self.order[t]
    }

    /// Slices of the layer currently at position `t`, indexed by qubit.
    pub fn layer(&self, t: usize) -> &[SliceId] {
        &self.layer_slices[self.order[t].0 as usize]
    }

    pub fn layer_by_key(&self, key: LayerKey) -> &[SliceId] {
        &self.layer_slices[key.0 as usize]
    }

    pub fn at(&self, t: usize, qubit: usize) -> SliceId {
        self.layer(t)[qubit]
    }

    /// `true` when the layer holds slices inserted as idle stalls.
    pub fn is_inserted(&self, key: LayerKey) -> bool {
        key.0 as usize >= self.original_layer_count
    }

    pub fn neighbor(&self, id: SliceId, d: Direction) -> Option<SliceId> {
        let s = &self.slices[id.index()];
        if !s.mask.has(d) {
            return None;
        }
        let t = self.t(id);
        match d {
            Direction::Prev => Some(self.at(t - 1, s.qubit)),
            Direction::Next => Some(self.at(t + 1, s.qubit)),
            _ => {
                let (dr, dc) = d.offset();
                let q = self.layout.at(s.pos.row as isize + dr, s.pos.col as isize + dc)?;
                Some(self.layer_by_key(s.layer)[q])
            }
        }
    }

    pub fn neighbors(&self, id: SliceId) -> impl Iterator<Item = SliceId> + '_ {
        let mask = self.slices[id.index()].mask;
        mask.directions().filter_map(move |d| self.neighbor(id, d))
    }

    pub fn are_adjacent(&self, a: SliceId, b: SliceId) -> bool {
        self.neighbors(a).any(|n| n == b)
    }

    /// Absolute layer index of the nearest upcoming critical point on the
    /// slice's qubit; `None` stands for infinity.
    pub fn compute_deadline(&self, id: SliceId) -> Result<Option<usize>, TimelineError> {
        let s = self.get(id)?;
        Ok(s.deadline.map(|k| self.layer_position(k)))
    }

    /// Inserts one idle layer at position `at`; layers at `t >= at` shift up by
    /// one. Returns the new slices, one per qubit.
    pub fn insert_idle_layer(&mut self, at: usize) -> Result<Vec<SliceId>, TimelineError> {
        let len = self.n_layers();
        if at > len {
            return Err(TimelineError::LayerOutOfRange { layer: at, len });
        }
        let n = self.n_qubits();
        let key = LayerKey(self.layer_slices.len() as u32);
        let below = (at > 0).then(|| self.layer(at - 1).to_vec());
        let above = (at < len).then(|| self.layer(at).to_vec());
        let stall_for = above.as_ref().map(|_| self.order[at]);
        let mut ids = Vec::with_capacity(n);
        for q in 0..n {
            let id = SliceId(self.slices.len() as u32);
            let mut mask = NeighborMask::EMPTY;
            if below.is_some() {
                mask.set(Direction::Prev);
            }
            if let Some(above) = &above {
                mask.set(Direction::Next);
                let mut succ = self.slices[above[q].index()].mask;
                succ.set(Direction::Prev);
                self.slices[above[q].index()].mask = succ;
            }
            if let Some(below) = &below {
                self.slices[below[q].index()].mask.set(Direction::Next);
            }
            let deadline = above.as_ref().and_then(|a| self.slices[a[q].index()].deadline);
            self.slices.push(Slice {
                id,
                layer: key,
                qubit: q,
                pos: self.layout.coord(q),
                op: OpKind::Idle,
                group: self.next_group,
                group_size: 1,
                mask,
                critical: false,
                deadline,
                state: SliceState::Ungenerated,
                stall_for,
            });
            self.next_group += 1;
            ids.push(id);
        }
        self.layer_slices.push(ids.clone());
        self.layer_pos.push(at);
        self.order.insert(at, key);
        for t in at + 1..self.order.len() {
            self.layer_pos[self.order[t].0 as usize] = t;
        }
        self.open.push(n as u32);
        if at <= self.floor {
            self.floor = at;
        }
        self.inserted_idle_count += 1;
        self.epoch += 1;
        Ok(ids)
    }

    /// One CSV row per slice: `id,t,r,c,op,mask,deadline,state`, ordered by
    /// layer then qubit.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,t,r,c,op,mask,deadline,state\n");
        for t in 0..self.n_layers() {
            for &id in self.layer(t) {
                let s = self.slice(id);
                let deadline = match s.deadline {
                    Some(k) => self.layer_position(k).to_string(),
                    None => "inf".to_string(),
                };
                let _ = writeln!(
                    out,
                    "{},{},{},{},{},{},{},{}",
                    id, t, s.pos.row, s.pos.col, s.op, s.mask, deadline, s.state
                );
            }
        }
        out
    }
}

// ---------------------------------------------------------------------------
// Causal cones
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CausalCone {
    pub root: SliceId,
    /// Non-COMPLETED members in BFS discovery order.
    pub members: Vec<SliceId>,
}

impl CausalCone {
    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }
}

#[derive(Debug, Clone)]
struct CachedCone {
    cone: CausalCone,
    epoch: u64,
    completions: u64,
}

/// Bounded LRU cache of causal cones keyed by their critical root.
///
/// An entry is reused only while the timeline structure is unchanged and none
/// of its members has completed since it was computed.
#[derive(Debug)]
pub struct ConeCache {
    entries: LruCache<SliceId, CachedCone>,
    traverse_completed: bool,
    hits: u64,
    misses: u64,
}

pub const DEFAULT_CONE_CACHE_CAPACITY: usize = 64;

impl Default for ConeCache {
    fn default() -> Self {
        Self::new(DEFAULT_CONE_CACHE_CAPACITY)
    }
}

impl ConeCache {
    pub fn new(capacity: usize) -> Self {
        Self {
            entries: LruCache::new(NonZeroUsize::new(capacity.max(1)).expect("capacity >= 1")),
            traverse_completed: false,
            hits: 0,
            misses: 0,
        }
    }

    /// When set, the BFS walks through COMPLETED slices (without keeping them)
    /// to reach older un-decoded history.
    pub fn with_traverse_completed(mut self, on: bool) -> Self {
        self.traverse_completed = on;
        self
    }

    pub fn traverse_completed(&self) -> bool {
        self.traverse_completed
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.entries.cap().get()
    }

    pub fn hits(&self) -> u64 {
        self.hits
    }

    pub fn misses(&self) -> u64 {
        self.misses
    }

    pub fn clear(&mut self) {
        self.entries.clear();
    }
}

/// Causal cone of a critical slice, served from `cache` when still valid.
pub fn causal_cone(tl: &Timeline, root: SliceId, cache: &mut ConeCache) -> Result<CausalCone, TimelineError> {
    let s = tl.get(root)?;
    if !s.critical {
        return Err(TimelineError::NotCritical(root));
    }
    if let Some(entry) = cache.entries.get(&root) {
        let fresh = entry.epoch == tl.epoch()
            && (entry.completions == tl.completions()
                || entry
                    .cone
                    .members
                    .iter()
                    .all(|&m| tl.state(m) != SliceState::Completed));
        if fresh {
            cache.hits += 1;
            let cone = entry.cone.clone();
            if let Some(e) = cache.entries.get_mut(&root) {
                e.completions = tl.completions();
            }
            return Ok(cone);
        }
    }
    cache.misses += 1;
    let cone = compute_cone(tl, root, cache.traverse_completed, usize::MAX);
    cache.entries.put(
        root,
        CachedCone {
            cone: cone.clone(),
            epoch: tl.epoch(),
            completions: tl.completions(),
        },
    );
    Ok(cone)
}

/// Patches participating in the root's instruction at the root layer.
fn root_group(tl: &Timeline, root: SliceId) -> Vec<SliceId> {
    let s = tl.slice(root);
    tl.layer_by_key(s.layer)
        .iter()
        .copied()
        .filter(|&id| tl.slice(id).group == s.group)
        .collect()
}

/// Backward BFS. Stops early (returning a partial cone) once more than `limit`
/// members are found.
pub(crate) fn compute_cone(tl: &Timeline, root: SliceId, traverse_completed: bool, limit: usize) -> CausalCone {
    let root_layer = tl.slice(root).layer;
    let floor = tl.completed_floor();
    // everything below the floor is COMPLETED and contributes no members
    let mut seen: HashSet<SliceId> = HashSet::new();
    let mut queue = std::collections::VecDeque::new();
    for p in root_group(tl, root) {
        seen.insert(p);
        // skip the stall block inserted directly below this critical layer
        let mut x = tl.neighbor(p, Direction::Prev);
        while let Some(id) = x {
            if tl.slice(id).stall_for == Some(root_layer) {
                x = tl.neighbor(id, Direction::Prev);
            } else {
                break;
            }
        }
        if let Some(id) = x {
            if tl.t(id) >= floor && seen.insert(id) {
                queue.push_back(id);
            }
        }
    }
    let mut members = Vec::new();
    while let Some(u) = queue.pop_front() {
        let completed = tl.state(u) == SliceState::Completed;
        if completed && !traverse_completed {
            continue;
        }
        if !completed {
            members.push(u);
            if members.len() > limit {
                break;
            }
        }
        let s = tl.slice(u);
        for d in s.mask.directions() {
            if d == Direction::Next {
                continue;
            }
            if let Some(v) = tl.neighbor(u, d) {
                if tl.t(v) >= floor && seen.insert(v) {
                    queue.push_back(v);
                }
            }
        }
    }
    CausalCone { root, members }
}
