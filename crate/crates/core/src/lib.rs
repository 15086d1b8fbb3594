//! Linear response of higher-order moments from data.
//!
//! The crate estimates the score function `s(x) = ∇ln ρ(x)` of a stochastic
//! system's stationary density, either by clustering Gaussian-perturbed
//! samples ([`score::kgmm`]) or by denoising score matching
//! ([`score::dsm`]), and turns it into impulse response functions of central
//! moments via the generalized fluctuation-dissipation relation
//! `R(t) = ⟨A(x(t)) B(x(0))⟩` ([`gfdt`]).
//!
//! Supporting pieces: a small neural-network engine ([`nn`]), reduced-order
//! SDE models with an Euler–Maruyama integrator ([`sde`]), a pseudospectral
//! 2-D vorticity solver ([`spectral`]), maximum-entropy density
//! reconstruction ([`maxent`]) and the experiment driver ([`experiment`]).

pub mod error;
pub mod experiment;
pub mod gfdt;
pub mod maxent;
pub mod nn;
pub mod rng;
pub mod score;
pub mod sde;
pub mod spectral;
pub mod stats;

pub use error::{Error, Result};
