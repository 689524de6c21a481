#![allow(dead_code)]

pub use synthamt_neural::gradcheck::{random_tensor, rng, tiny_config};
