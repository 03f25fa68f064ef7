use super::BehaviorEvent;

/// Keeps the `max_len` most recent events and pads to exactly `max_len`.
///
/// Real events come first in chronological order, followed by padding
/// events whose ids are all 0. The mask is true at real positions.
pub fn truncate_and_pad(seq: &[BehaviorEvent], max_len: usize) -> (Vec<BehaviorEvent>, Vec<bool>) {
    assert!(max_len >= 1, "max_len must be at least 1");
    let start = seq.len().saturating_sub(max_len);
    let kept = &seq[start..];
    let mut events = kept.to_vec();
    let mut mask = vec![true; kept.len()];
    events.resize(max_len, BehaviorEvent::padding());
    mask.resize(max_len, false);
    (events, mask)
}
