//! Generalization certificates for reinforcement learning on Markov data,
//! and a soft actor-critic variant trained against them.

pub mod autodiff;
pub mod certificate;
pub mod error;
pub mod exec;
pub mod mdp;
pub mod mixing;
pub mod pbsac;
pub mod posterior;
pub mod rng;
pub mod sac;
