//! C ABI for the coagscale library (placeholder).
