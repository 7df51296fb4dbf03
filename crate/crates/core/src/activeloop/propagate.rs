//! Weak-label transfer between structurally equivalent mentions.

use crate::corpus::LabelId;
use crate::structsig::Signature;

/// Labels for `target` derived from a labeled `source`, if the two are
/// structurally equivalent.
///
/// Identical per-token vectors copy labels position by position. When only
/// the collapsed signatures agree (run lengths differ), every source group
/// must carry a single label; each target group then takes that label.
pub fn transfer_labels(
    source_raw: &[u16],
    source_labels: &[LabelId],
    target_raw: &[u16],
) -> Option<Vec<LabelId>> {
    if source_raw == target_raw {
        return Some(source_labels.to_vec());
    }
    let source = Signature::from_raw(source_raw);
    let target = Signature::from_raw(target_raw);
    if !source.matches(&target) {
        return None;
    }
    let mut group_labels = Vec::with_capacity(source.groups.len());
    for span in source.spans() {
        let first = source_labels[span.start];
        if source_labels[span].iter().any(|&l| l != first) {
            return None;
        }
        group_labels.push(first);
    }
    Some(
        target
            .groups
            .iter()
            .zip(group_labels)
            .flat_map(|(g, l)| std::iter::repeat_n(l, g.run))
            .collect(),
    )
}
