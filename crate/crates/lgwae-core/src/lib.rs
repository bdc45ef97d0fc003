#![cfg_attr(not(feature = "std"), no_std)]
extern crate alloc;
pub mod graph;
pub mod matcher;
pub mod rng;
pub mod tensor;
mod math;
