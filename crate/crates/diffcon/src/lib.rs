//! diffcon: a desk-scale laboratory for diffusion fine-tuning viewed as
//! control of a linearly-solvable MDP.
//!
//! The passive dynamics is a pretrained DDPM-style reverse process on
//! synthetic low-dimensional data; control reweights its transitions against
//! an f-divergence cost. The crate provides:
//!
//! - exact tabular oracles for the optimality structure ([`lsmdp`]):
//!   Z-recursion, tilted kernels, terminal marginals, a general-f value
//!   recursion, trajectory-level brute force, and analytic Gaussian tilting;
//! - diffusion machinery ([`diffusion`], [`schedule`]): forward corruption,
//!   reverse sampling with classifier-free guidance, score-matching losses,
//!   and posterior diagnostics, all under reversed indexing (`x_T` clean,
//!   `x_1` noise);
//! - the f-divergence family ([`fdiv`]) shared by advantages, weightings, and
//!   oracles;
//! - frozen-core controller parameterizations ([`controller`]): gated and
//!   ungated side networks, LoRA adapters, joint and separate composition,
//!   and the random-Fourier kernel decomposition;
//! - RL fine-tuning ([`rlft`]): rollouts with dual log-density tracks, soft
//!   advantages (exact and Monte Carlo), f-regularized policy gradients, PPO,
//!   and reward-weighted regression with exponential, polynomial, and linear
//!   weightings;
//! - an experiment harness ([`harness`]) behind the `diffcon` CLI.
//!
//! Every numeric path is f64 and every stochastic operation takes an explicit
//! splittable stream ([`rng::Stream`]), so runs are byte-reproducible.
//!
//! The `examples/` directory is the front door: one runnable example per
//! major capability (`cargo run --example oracle_tables`, etc.).

pub mod controller;
pub mod diffusion;
pub mod error;
pub mod fdiv;
pub mod harness;
pub mod lsmdp;
pub mod numkit;
pub mod rlft;
pub mod rng;
pub mod schedule;

pub use error::{Error, Result};
