//! Core of a multi-party chat room with cooperating conversational agents.
//!
//! Human turns and activity updates go through listeners, which annotate
//! them as events. Actors, LLM agents and an optional plan answer events
//! with proposals, and one coordinator per session decides what is said.
//!
//! Arbitration is generic over the [`Scalar`] used for priorities and
//! rates. The aliases below fix it to `f64`; the `Exact*` aliases use
//! rationals, which the tests rely on for tolerance-free checks.

pub mod actors;
pub mod config;
pub mod coordinator;
pub mod domain;
pub mod engine;
pub mod gateway;
pub mod history;
pub mod listeners;
pub mod llm;
pub mod plan;
pub mod replay;
pub mod scalar;
pub mod wire;

pub use scalar::Scalar;

/// Exact rational scalar.
pub type Rational = num_rational::Ratio<i64>;

pub type Proposal = domain::Proposal<f64>;
pub type Coordinator = coordinator::Coordinator<f64>;
pub type CoordinatorSettings = coordinator::CoordinatorSettings<f64>;
pub type SessionEngine = engine::SessionEngine<f64>;
pub type Room = gateway::Room<f64>;
pub type Hub = gateway::Hub<f64>;

pub type ExactProposal = domain::Proposal<Rational>;
pub type ExactCoordinator = coordinator::Coordinator<Rational>;
pub type ExactCoordinatorSettings = coordinator::CoordinatorSettings<Rational>;
pub type ExactSessionEngine = engine::SessionEngine<Rational>;
