pub mod autodiff;
pub mod baselines;
pub mod channel;
pub mod harness;
pub mod link;
pub mod training;
