//! Deterministic reductions.

/// Sum of `values` in iteration order, so results do not depend on how the
/// values were produced.
pub(crate) fn ordered_sum(values: impl Iterator<Item = f64>) -> f64 {
    values.fold(0.0, |acc, v| acc + v)
}
