//! Slice lifecycle automaton and the mutual-exclusion constraint graph.

use std::fmt;

use thiserror::Error;

use crate::timeline::{SliceId, Timeline, TimelineError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SliceState {
    Ungenerated,
    Pending,
    Occupied,
    Assigned,
    Completed,
}

impl SliceState {
    pub fn as_str(self) -> &'static str {
        match self {
            SliceState::Ungenerated => "UNGENERATED",
            SliceState::Pending => "PENDING",
            SliceState::Occupied => "OCCUPIED",
            SliceState::Assigned => "ASSIGNED",
            SliceState::Completed => "COMPLETED",
        }
    }
}

impl fmt::Display for SliceState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SliceEvent {
    Generated,
    NeighborStarted,
    NeighborFinished,
    Selected,
    Decoded,
    /// Speculative start next to exactly one assigned neighbour.
    Speculated,
    /// A speculative decode was found to be wrong and must be redone.
    Invalidated,
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("illegal transition: {event:?} on {state} slice {slice}")]
    IllegalTransition {
        slice: SliceId,
        state: SliceState,
        event: SliceEvent,
    },
    #[error("slice {slice} conflicts with assigned neighbour {neighbor}")]
    Conflict { slice: SliceId, neighbor: SliceId },
    #[error(transparent)]
    Timeline(#[from] TimelineError),
}

/// Pure transition function. `assigned_neighbors` is the number of ASSIGNED
/// neighbours after the event has been accounted for.
pub fn next_state(state: SliceState, event: SliceEvent, assigned_neighbors: u32) -> Option<SliceState> {
    use SliceEvent as E;
    use SliceState as S;
    let blocked = if assigned_neighbors > 0 { S::Occupied } else { S::Pending };
    match (state, event) {
        (S::Ungenerated, E::Generated) => Some(blocked),
        (S::Ungenerated | S::Completed, E::NeighborStarted | E::NeighborFinished) => Some(state),
        (S::Pending | S::Occupied, E::NeighborStarted) => Some(S::Occupied),
        (S::Occupied, E::NeighborFinished) => Some(blocked),
        (S::Pending, E::Selected) => Some(S::Assigned),
        (S::Occupied, E::Speculated) if assigned_neighbors == 1 => Some(S::Assigned),
        (S::Assigned, E::Decoded) => Some(S::Completed),
        (S::Assigned, E::Invalidated) => Some(blocked),
        _ => None,
    }
}

/// Lifecycle states and unresolved-degree counters over a [`Timeline`].
#[derive(Debug, Clone)]
pub struct ConstraintGraph {
    tl: Timeline,
    unresolved: Vec<u8>,
    assigned_nbrs: Vec<u8>,
    speculative: Vec<bool>,
}

impl ConstraintGraph {
    pub fn new(tl: Timeline) -> Self {
        let n = tl.n_slices();
        let mut g = Self {
            tl,
            unresolved: vec![0; n],
            assigned_nbrs: vec![0; n],
            speculative: vec![false; n],
        };
        for i in 0..n {
            g.recount(SliceId(i as u32));
        }
        g
    }

    pub fn timeline(&self) -> &Timeline {
        &self.tl
    }

    pub fn into_timeline(self) -> Timeline {
        self.tl
    }

    pub fn state(&self, s: SliceId) -> SliceState {
        self.tl.state(s)
    }

    pub fn unresolved_degree(&self, s: SliceId) -> u32 {
        u32::from(self.unresolved[s.index()])
    }

    pub fn assigned_neighbors(&self, s: SliceId) -> u32 {
        u32::from(self.assigned_nbrs[s.index()])
    }

    pub fn is_speculative(&self, s: SliceId) -> bool {
        self.speculative[s.index()]
    }

    /// Full-scan recount used after structural changes.
    fn recount(&mut self, s: SliceId) {
        let mut unresolved = 0u8;
        let mut assigned = 0u8;
        for n in self.tl.neighbors(s) {
            match self.tl.state(n) {
                SliceState::Completed => {}
                SliceState::Assigned => {
                    unresolved += 1;
                    assigned += 1;
                }
                _ => unresolved += 1,
            }
        }
        self.unresolved[s.index()] = unresolved;
        self.assigned_nbrs[s.index()] = assigned;
    }

    /// Applies `event` to a single slice without touching its neighbours.
    pub fn transition(&mut self, s: SliceId, event: SliceEvent) -> Result<SliceState, GraphError> {
        self.tl.get(s)?;
        let state = self.tl.state(s);
        let next = next_state(state, event, self.assigned_neighbors(s)).ok_or(GraphError::IllegalTransition {
            slice: s,
            state,
            event,
        })?;
        self.tl.set_state(s, next);
        Ok(next)
    }

    /// UNGENERATED → PENDING (or OCCUPIED when a neighbour is already busy).
    pub fn generate(&mut self, s: SliceId) -> Result<SliceState, GraphError> {
        self.transition(s, SliceEvent::Generated)
    }

    fn notify(&mut self, n: SliceId, event: SliceEvent) -> Result<(), GraphError> {
        match event {
            SliceEvent::NeighborStarted => self.assigned_nbrs[n.index()] += 1,
            SliceEvent::NeighborFinished => self.assigned_nbrs[n.index()] -= 1,
            _ => unreachable!("only neighbour events are broadcast"),
        }
        if self.tl.state(n) == SliceState::Assigned {
            // speculative pairs are legitimately both assigned
            return Ok(());
        }
        self.transition(n, event).map(|_| ())
    }

    /// Marks a task (one slice or a block of mutually adjacent slices) as
    /// ASSIGNED and occupies its outside neighbours.
    pub fn assign(&mut self, task: &[SliceId]) -> Result<(), GraphError> {
        for &s in task {
            if let Some(n) = self
                .tl
                .neighbors(s)
                .find(|n| !task.contains(n) && self.tl.state(*n) == SliceState::Assigned)
            {
                return Err(GraphError::Conflict { slice: s, neighbor: n });
            }
        }
        for &s in task {
            let state = self.tl.state(s);
            if state != SliceState::Pending {
                return Err(GraphError::IllegalTransition {
                    slice: s,
                    state,
                    event: SliceEvent::Selected,
                });
            }
        }
        for &s in task {
            self.tl.set_state(s, SliceState::Assigned);
        }
        for &s in task {
            let nbrs: Vec<SliceId> = self.tl.neighbors(s).filter(|n| !task.contains(n)).collect();
            for n in nbrs {
                self.notify(n, SliceEvent::NeighborStarted)?;
            }
        }
        Ok(())
    }

    /// Speculatively assigns an OCCUPIED slice whose only assigned neighbour is
    /// `awaited`.
    pub fn assign_speculative(&mut self, s: SliceId, awaited: SliceId) -> Result<(), GraphError> {
        let state = self.tl.state(s);
        let ok = state == SliceState::Occupied
            && self.assigned_neighbors(s) == 1
            && self.tl.state(awaited) == SliceState::Assigned
            && !self.speculative[awaited.index()]
            && self.tl.are_adjacent(s, awaited);
        if !ok {
            return Err(GraphError::IllegalTransition {
                slice: s,
                state,
                event: SliceEvent::Speculated,
            });
        }
        self.transition(s, SliceEvent::Speculated)?;
        self.speculative[s.index()] = true;
        let nbrs: Vec<SliceId> = self.tl.neighbors(s).collect();
        for n in nbrs {
            self.notify(n, SliceEvent::NeighborStarted)?;
        }
        Ok(())
    }

    /// Completes a task: members become COMPLETED, neighbour degrees drop and
    /// occupied neighbours are released.
    pub fn complete(&mut self, task: &[SliceId]) -> Result<(), GraphError> {
        for &s in task {
            self.transition(s, SliceEvent::Decoded)?;
            self.speculative[s.index()] = false;
        }
        for &s in task {
            let nbrs: Vec<SliceId> = self.tl.neighbors(s).collect();
            for n in nbrs {
                self.unresolved[n.index()] -= 1;
                if !task.contains(&n) {
                    self.notify(n, SliceEvent::NeighborFinished)?;
                }
            }
        }
        Ok(())
    }

    /// Returns a speculative slice to PENDING/OCCUPIED after a misprediction.
    pub fn invalidate(&mut self, s: SliceId) -> Result<SliceState, GraphError> {
        if !self.speculative[s.index()] {
            let state = self.tl.state(s);
            return Err(GraphError::IllegalTransition {
                slice: s,
                state,
                event: SliceEvent::Invalidated,
            });
        }
        self.speculative[s.index()] = false;
        let nbrs: Vec<SliceId> = self.tl.neighbors(s).collect();
        for n in nbrs {
            self.notify(n, SliceEvent::NeighborFinished)?;
        }
        self.transition(s, SliceEvent::Invalidated)
    }

    /// Inserts an idle layer and refreshes the counters it touches.
    pub fn insert_idle_layer(&mut self, at: usize) -> Result<Vec<SliceId>, GraphError> {
        let ids = self.tl.insert_idle_layer(at)?;
        let n = self.tl.n_slices();
        self.unresolved.resize(n, 0);
        self.assigned_nbrs.resize(n, 0);
        self.speculative.resize(n, false);
        let mut touched = ids.clone();
        for &id in &ids {
            touched.extend(self.tl.neighbors(id));
        }
        for s in touched {
            self.recount(s);
            let state = self.tl.state(s);
            let busy = self.assigned_nbrs[s.index()] > 0;
            if state == SliceState::Occupied && !busy {
                self.tl.set_state(s, SliceState::Pending);
            } else if state == SliceState::Pending && busy {
                self.tl.set_state(s, SliceState::Occupied);
            }
        }
        Ok(ids)
    }

    /// `true` when `s` could be dispatched alongside `taken` without breaking
    /// mutual exclusion.
    pub fn is_free_of(&self, s: SliceId, taken: &[SliceId]) -> bool {
        self.tl
            .neighbors(s)
            .all(|n| self.tl.state(n) != SliceState::Assigned && !taken.contains(&n))
    }
}

/// Greedy order-respecting independent-set selection.
pub fn select_conflict_free(
    candidates: impl IntoIterator<Item = SliceId>,
    limit: usize,
    g: &ConstraintGraph,
) -> Vec<SliceId> {
    let mut taken = Vec::new();
    if limit == 0 {
        return taken;
    }
    for s in candidates {
        if g.state(s) == SliceState::Pending && !taken.contains(&s) && g.is_free_of(s, &taken) {
            taken.push(s);
            if taken.len() == limit {
                break;
            }
        }
    }
    taken
}
