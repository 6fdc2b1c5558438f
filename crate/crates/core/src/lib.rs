//! Differentiable sparsification on a small reverse-mode autodiff engine.
//!
//! Architecture parameters ("gates") are parameterized so that plain gradient
//! descent drives them to exact zeros. The crate provides the tape
//! ([`autodiff`]), the gate parameterizations ([`sparse_param`]), sparsity
//! penalties ([`regularizers`]), proximal baselines ([`proximal`]),
//! doubly-stochastic normalization ([`normalization`]), three model harnesses
//! ([`models`]) and optimizers ([`optim`]).
//!
//! Everything is generic over [`Scalar`] (`f32` or `f64`); the aliases at the
//! crate root fix `f64`, which the training harnesses use throughout.

pub mod autodiff;
pub mod error;
pub mod gradcheck;
pub mod models;
pub mod normalization;
pub mod optim;
pub mod proximal;
pub mod regularizers;
pub mod scalar;
pub mod sparse_param;
pub mod tensor;

pub use autodiff::{concat, BackwardRule, Gradients, Tape, Var};
pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor64 = tensor::Tensor<f64>;
pub type Tape64 = autodiff::Tape<f64>;
pub type GateGroup64 = sparse_param::GateGroup<f64>;
pub type AdjacencyParam64 = normalization::AdjacencyParam<f64>;
