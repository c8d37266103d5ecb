//! Plain-text accuracy tables.

use std::fmt::Write as _;

use hlfusion_core::train::Metrics;

fn percent(v: f64) -> String {
    if v.is_nan() {
        "-".into()
    } else {
        format!("{:.2}", 100.0 * v)
    }
}

/// Per-class accuracy rows (1-based class numbers) followed by an `OA` row,
/// percentages with two decimals. Classes absent from the split show `-`.
pub fn metrics_table(m: &Metrics) -> String {
    let mut s = format!("{:<8}{:>14}\n", "Class", "Accuracy (%)");
    for (c, &acc) in m.per_class_accuracy.iter().enumerate() {
        let _ = writeln!(s, "{:<8}{:>14}", c + 1, percent(acc));
    }
    let _ = writeln!(s, "{:<8}{:>14}", "OA", percent(m.overall_accuracy));
    s
}

/// Header line of an ablation table over `axis`.
pub fn ablation_header(axis: &str) -> String {
    format!("{:<8}{:>10}", axis, "OA (%)")
}

/// One ablation row.
pub fn ablation_row(value: usize, oa: f64) -> String {
    format!("{:<8}{:>10}", value, percent(oa))
}
