//! Acceptance suite for `bitweight`. The checks live in `tests/acceptance.rs`
//! and print one PASS/FAIL/SKIP line per criterion:
//!
//! ```sh
//! cargo test -p bitweight-validation --test acceptance
//! ```
