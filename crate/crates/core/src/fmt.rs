//! Fixed-width float rendering for CSV artifacts.

/// Renders `x` with 17 significant digits in scientific notation, which
/// round-trips every finite `f64` exactly.
pub fn float17(x: f64) -> String {
    if x == 0.0 {
        // drop the sign of negative zero so equal values print identically
        return format!("{:.16e}", 0.0_f64);
    }
    format!("{x:.16e}")
}

/// Like [`float17`] but renders `None` as an empty field.
pub fn opt_float17(x: Option<f64>) -> String {
    x.map(float17).unwrap_or_default()
}
