#![allow(dead_code)]

pub mod criteria;
pub mod gradcheck;
pub mod oracles;
pub mod setups;
