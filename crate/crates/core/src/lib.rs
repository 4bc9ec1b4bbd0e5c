// `!(x > 0.0)` is how NaN gets rejected alongside non-positive values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod attacker;
pub mod experiment;
pub mod geo;
pub mod hypergraph;
pub mod mlat;
pub mod report;
pub mod scenario;
pub mod service;
pub mod socialgraph;
pub mod world;
