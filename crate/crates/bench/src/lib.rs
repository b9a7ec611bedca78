//! No library surface; this crate exists to host the criterion benches.
