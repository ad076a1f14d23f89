//! Simulator of an SGX-like enclave platform with page-table side-channel
//! attackers and proactive preloading defenses.

pub mod attacker;
pub mod config;
pub mod defense_hw;
pub mod defense_sw;
pub mod eval;
pub mod machine;
pub mod program;
pub mod scenario;
pub mod sim;
pub mod txsplit;
