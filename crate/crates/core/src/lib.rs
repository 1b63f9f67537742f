//! Mean-variance hedging in markets with Lévy-driven OU stochastic volatility.
//!
//! The crate simulates the factor `dY = -ΛY dt + dL(λt)` and the asset
//! prices it drives, evaluates the opportunity process `P(t, y)` and the
//! variance-optimal martingale density, solves the jump BSDE for the
//! mean-value process of a claim and runs the optimal hedge.
//!
//! Every numerical type is generic over [`Real`]; `f64` aliases are exported
//! at the crate root.

pub mod blackscholes;
pub mod bsde;
pub mod error;
pub mod experiment;
pub mod hedge;
pub mod levy;
pub mod linalg;
pub mod market;
pub mod ngou;
pub mod opportunity;
pub mod rng;
pub mod scalar;

pub use error::{Error, Result};
pub use scalar::{McEstimate, Real};

pub type SubordinatorSpec64 = levy::SubordinatorSpec<f64>;
pub type JumpPath64 = levy::JumpPath<f64>;
pub type OuParams64 = ngou::OuParams<f64>;
pub type FactorPath64 = ngou::FactorPath<f64>;
pub type CoefficientModel64 = market::CoefficientModel<f64>;
pub type PathBundle64 = market::PathBundle<f64>;
pub type PathSimulator64 = market::PathSimulator<f64>;
pub type SubordinatorSpec32 = levy::SubordinatorSpec<f32>;
pub type CoefficientModel32 = market::CoefficientModel<f32>;
pub type PathSimulator32 = market::PathSimulator<f32>;
pub type BsdeSolution64 = bsde::BsdeSolution<f64>;
pub type Payoff64 = bsde::Payoff<f64>;
pub type HedgeReport64 = hedge::HedgeReport<f64>;
pub type ExperimentConfig64 = experiment::ExperimentConfig<f64>;
