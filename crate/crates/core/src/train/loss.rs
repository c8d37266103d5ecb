use crate::error::{Error, Result};
use crate::tape::{Tape, Var};

/// Categorical cross-entropy `−ln p[label]` of one probability vector, with
/// the probability clamped at [`LOG_CLAMP`](crate::tape::LOG_CLAMP).
pub fn cross_entropy(tape: &mut Tape, probs: Var, label: usize) -> Result<Var> {
    let n = tape.value(probs).len();
    if label >= n {
        return Err(Error::LabelOutOfRange { label, n_classes: n });
    }
    tape.neg_log_pick(probs, label)
}
