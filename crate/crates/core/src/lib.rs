//! Multi-task robustness lab: differentiable branched models, gradient-balancing
//! adversarial attacks, robustness metrics and adversarial training.

pub mod advtrain;
pub mod attackkit;
pub mod diffcore;
pub mod metrics;
pub mod mtlnet;
