//! Second-order BSDEs with a random default horizon: path simulation under
//! a family of volatility measures, default-time sampling, regression Monte
//! Carlo for the Brownian, jump and second-order equations, an explicit
//! finite-difference route for the Markovian case, and drift/volatility
//! control on top.

#![allow(clippy::neg_cmp_op_on_partial_ord)]
//!
//! Solvers are generic over [`Scalar`] (`f32` or `f64`); the aliases below
//! fix `f64`.

pub mod bsde_solver;
pub mod claims;
pub mod default_model;
pub mod erratic_control;
pub mod error;
pub mod oracles;
pub mod pde_solver;
pub mod regression;
pub mod scalar;
pub mod second_order;
pub mod sde_sim;

pub use error::{Error, Result};
pub use scalar::Scalar;
pub use second_order::Mode;

pub type TimeGrid64 = sde_sim::TimeGrid<f64>;
pub type MeasureFamily64 = sde_sim::MeasureFamily<f64>;
pub type PathBundle64 = sde_sim::PathBundle<f64>;
pub type IntensityModel64 = default_model::IntensityModel<f64>;
pub type DefaultSample64 = default_model::DefaultSample<f64>;
pub type ClaimSpec64 = claims::ClaimSpec<f64>;
pub type Claim64 = claims::Claim<f64>;
pub type Driver64 = bsde_solver::Driver<f64>;
pub type BsdeSolution64 = bsde_solver::BsdeSolution<f64>;
pub type JumpBsdeSolution64 = bsde_solver::JumpBsdeSolution<f64>;
pub type SecondOrderSolution64 = second_order::SecondOrderSolution<f64>;
pub type PdeGrid64 = pde_solver::PdeGrid<f64>;
pub type PdeSolution64 = pde_solver::PdeSolution<f64>;
pub type ControlSpec64 = erratic_control::ControlSpec<f64>;
pub type ControlField64 = erratic_control::ControlField<f64>;
pub type ControlSolution64 = erratic_control::ControlSolution<f64>;
