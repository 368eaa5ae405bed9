//! Helpers shared by the integration tests: gradient-check cases and
//! brute-force reference implementations.

#![allow(dead_code)]

pub mod gradcases;
pub mod oracles;
