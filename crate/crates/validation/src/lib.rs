//! Acceptance suite for the toolkit; the checks live in `tests/acceptance.rs`.
