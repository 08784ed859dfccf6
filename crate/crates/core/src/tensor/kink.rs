//! Sign-pattern recorder for piecewise-linear ops.
//!
//! Finite differences are meaningless across a ReLU kink. While a recorder
//! is installed on the current thread, every `relu` forward logs the sign of
//! each input (record mode) or compares against the logged pattern (compare
//! mode). The gradient checker uses this to discard probes that crossed a
//! kink.

use std::cell::RefCell;

enum Mode {
    Record,
    Compare { cursor: usize, crossed: bool },
}

struct Recorder {
    mode: Mode,
    signs: Vec<bool>,
}

thread_local! {
    static RECORDER: RefCell<Option<Recorder>> = const { RefCell::new(None) };
}

pub(crate) fn observe(xs: &[f64]) {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        let Some(rec) = r.as_mut() else { return };
        match &mut rec.mode {
            Mode::Record => rec.signs.extend(xs.iter().map(|&v| v > 0.0)),
            Mode::Compare { cursor, crossed } => {
                for &v in xs {
                    match rec.signs.get(*cursor) {
                        Some(&s) if s == (v > 0.0) => {}
                        _ => *crossed = true,
                    }
                    *cursor += 1;
                }
            }
        }
    });
}

/// Starts recording the sign pattern of the next forward pass.
pub(crate) fn start_recording() {
    RECORDER.with(|r| {
        *r.borrow_mut() = Some(Recorder {
            mode: Mode::Record,
            signs: Vec::new(),
        })
    });
}

/// Switches to compare mode; subsequent forwards are checked against the
/// recorded pattern.
pub(crate) fn start_compare() {
    RECORDER.with(|r| {
        if let Some(rec) = r.borrow_mut().as_mut() {
            rec.mode = Mode::Compare {
                cursor: 0,
                crossed: false,
            };
        }
    });
}

/// Whether the forward since the last `start_compare` left the recorded
/// pattern. Resets the compare cursor.
pub(crate) fn take_crossed() -> bool {
    RECORDER.with(|r| {
        let mut r = r.borrow_mut();
        let Some(rec) = r.as_mut() else { return false };
        match &mut rec.mode {
            Mode::Compare { cursor, crossed } => {
                let out = *crossed || *cursor != rec.signs.len();
                *cursor = 0;
                *crossed = false;
                out
            }
            Mode::Record => false,
        }
    })
}

pub(crate) fn stop() {
    RECORDER.with(|r| *r.borrow_mut() = None);
}
