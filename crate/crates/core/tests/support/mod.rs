//! Independent oracles and the measurements built on them. Shared by the
//! property suites and the acceptance report, so both judge the library
//! against the same reference code.

#![allow(dead_code, clippy::needless_range_loop)]

pub mod dynamics;
pub mod learning;
pub mod rewards;
pub mod rotations;
