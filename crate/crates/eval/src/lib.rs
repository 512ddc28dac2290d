//! Acceptance checks for modelserve live in `tests/acceptance.rs`; run them
//! with `cargo test -p modelserve-eval --test acceptance`.
