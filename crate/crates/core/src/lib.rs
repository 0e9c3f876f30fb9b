//! Decentralized shape classification and damage recovery for simulated
//! modular bricks driven by a 3D neural cellular automaton.

pub mod damage;
pub mod engine;
pub mod protocol;
pub mod sim;
pub mod training;
pub mod rng;
pub mod voxel;
