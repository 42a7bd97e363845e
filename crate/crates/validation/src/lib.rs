//! Test-only crate. The acceptance suite lives in `tests/acceptance.rs`
//! and prints one PASS/FAIL line per criterion.
