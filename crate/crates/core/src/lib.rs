//! Consensus ADMM with a smooth third operator, its federated variants, and
//! the baselines they are compared against, applied to binary logistic
//! regression.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod data;
pub mod fedsim;
pub mod numkit;
pub mod objectives;
pub mod prox;
pub mod topadmm;
