#![allow(dead_code)]

pub mod grad;
pub mod oracles;
pub mod runs;
pub mod criteria;
