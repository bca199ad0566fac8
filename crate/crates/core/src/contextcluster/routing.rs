use std::cell::{Cell, RefCell};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Mode {
    Free,
    Record,
    Replay,
}

/// Source of the discrete cluster assignments used by a forward pass.
///
/// `Free` recomputes every argmax. `Record` computes and logs them in layer
/// order; replaying that log holds the routing fixed, which is what a
/// finite-difference probe must do to see the same piecewise-smooth function
/// the tape differentiates.
#[derive(Debug)]
pub struct Routing {
    mode: Mode,
    log: RefCell<Vec<Vec<usize>>>,
    cursor: Cell<usize>,
}

impl Routing {
    pub fn free() -> Self {
        Self::with_mode(Mode::Free)
    }

    pub fn recording() -> Self {
        Self::with_mode(Mode::Record)
    }

    fn with_mode(mode: Mode) -> Self {
        Routing {
            mode,
            log: RefCell::new(Vec::new()),
            cursor: Cell::new(0),
        }
    }

    /// Switches a recorded log to replay from its first entry.
    pub fn into_replay(self) -> Self {
        Routing {
            mode: Mode::Replay,
            log: self.log,
            cursor: Cell::new(0),
        }
    }

    /// Rewinds a replaying log so it can drive another forward pass.
    pub fn rewind(&self) {
        self.cursor.set(0);
    }

    pub fn recorded_layers(&self) -> usize {
        self.log.borrow().len()
    }

    pub(crate) fn route(&self, compute: impl FnOnce() -> Result<Vec<usize>>) -> Result<Vec<usize>> {
        match self.mode {
            Mode::Free => compute(),
            Mode::Record => {
                let a = compute()?;
                self.log.borrow_mut().push(a.clone());
                Ok(a)
            }
            Mode::Replay => {
                let i = self.cursor.get();
                let log = self.log.borrow();
                let a = log.get(i).cloned().ok_or_else(|| {
                    Error::contract(format!("routing log exhausted at layer {i}"))
                })?;
                self.cursor.set(i + 1);
                Ok(a)
            }
        }
    }
}

impl Default for Routing {
    fn default() -> Self {
        Self::free()
    }
}
