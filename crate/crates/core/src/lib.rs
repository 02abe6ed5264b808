//! Tree-search reinforcement learning at desk scale.
//!
//! MCTS with a perfect simulator (AlphaZero style) or a learned world model
//! (MuZero style), plus the Sampled, Gumbel and Stochastic search variants,
//! a prioritised replay buffer with reanalyse, exploration strategies
//! including random network distillation, and the collect/train/evaluate
//! pipeline that ties them together.

pub mod action;
pub mod diffnet;
pub mod envs;
pub mod explore;
pub mod model;
pub mod pipeline;
pub mod replay;
pub mod search;
pub mod trainer;
