use crate::tensor::{Real, Result, Tape, Var};

/// One memory entry: the distribution and its collision term for a past frame.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct MemSlot {
    /// `[N,d]` distribution after the last layer.
    pub streaming: Var,
    /// `[N,d]` collision operator output at that frame's final position.
    pub collision: Var,
    pub frame: usize,
}

/// Fixed-capacity ring of [`MemSlot`]s. Empty slots stand for zero-filled,
/// invalid entries.
#[derive(Clone, Debug)]
pub struct Memory {
    slots: Vec<Option<MemSlot>>,
    next: usize,
}

impl Memory {
    pub fn new(capacity: usize) -> Self {
        Self { slots: vec![None; capacity], next: 0 }
    }

    pub fn capacity(&self) -> usize {
        self.slots.len()
    }

    /// Writes `slot`, evicting the oldest entry once full.
    pub fn push(&mut self, slot: MemSlot) {
        let cap = self.slots.len();
        self.slots[self.next] = Some(slot);
        self.next = (self.next + 1) % cap;
    }

    /// Validity flag of each physical slot.
    pub fn valid_mask(&self) -> Vec<bool> {
        self.slots.iter().map(Option::is_some).collect()
    }

    /// Physical slot indices of the valid entries, oldest first.
    pub fn chronological(&self) -> Vec<usize> {
        let cap = self.slots.len();
        (0..cap).map(|i| (self.next + i) % cap).filter(|&i| self.slots[i].is_some()).collect()
    }

    /// Valid entries, oldest first.
    pub fn entries(&self) -> Vec<MemSlot> {
        self.chronological().into_iter().filter_map(|i| self.slots[i]).collect()
    }

    pub fn len(&self) -> usize {
        self.slots.iter().filter(|s| s.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn map_vars(&self, mut f: impl FnMut(Var) -> Result<Var>) -> Result<Self> {
        let slots = self
            .slots
            .iter()
            .map(|s| {
                s.map(|s| Ok(MemSlot { streaming: f(s.streaming)?, collision: f(s.collision)?, frame: s.frame }))
                    .transpose()
            })
            .collect::<Result<_>>()?;
        Ok(Self { slots, next: self.next })
    }
}

/// Per-query tracking state carried from frame to frame.
#[derive(Clone, Debug)]
pub struct QueryState {
    pub n: usize,
    /// `[N,d]` features sampled at the query points; never updated.
    pub f_init: Var,
    /// `[N,d]` current distribution.
    pub f: Var,
    /// `[N,2]` current positions in feature-grid units.
    pub p: Var,
    pub memory: Memory,
    /// Number of frames stepped since initialization.
    pub t: usize,
    /// Feature grid `(height, width)`.
    pub grid: (usize, usize),
}

impl QueryState {
    /// Copies the state's values onto `to` as constants, dropping history.
    pub fn detach<F: Real>(&self, from: &Tape<F>, to: &mut Tape<F>) -> Result<Self> {
        let mut copy = |v: Var| to.constant(from.value(v).clone());
        let f_init = copy(self.f_init)?;
        let f = copy(self.f)?;
        let p = copy(self.p)?;
        let memory = self.memory.map_vars(copy)?;
        Ok(Self { n: self.n, f_init, f, p, memory, t: self.t, grid: self.grid })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn slot(i: usize) -> MemSlot {
        MemSlot { streaming: Var(2 * i), collision: Var(2 * i + 1), frame: i }
    }

    #[test]
    fn ring_evicts_oldest() {
        let mut m = Memory::new(3);
        assert!(m.is_empty());
        assert_eq!(m.valid_mask(), vec![false; 3]);
        for i in 0..5 {
            m.push(slot(i));
        }
        let frames: Vec<_> = m.entries().iter().map(|s| s.frame).collect();
        assert_eq!(frames, vec![2, 3, 4]);
        assert_eq!(m.len(), 3);
    }

    #[test]
    fn partial_ring_is_chronological() {
        let mut m = Memory::new(4);
        m.push(slot(0));
        m.push(slot(1));
        assert_eq!(m.valid_mask(), vec![true, true, false, false]);
        assert_eq!(m.entries().iter().map(|s| s.frame).collect::<Vec<_>>(), vec![0, 1]);
    }
}
