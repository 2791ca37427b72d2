//! Oracles shared by the core tests and the acceptance harness.
#![allow(dead_code)]

pub mod composite;
pub mod grad_ops;
pub mod loss_ref;
