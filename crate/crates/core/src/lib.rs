//! Relative-position bias in extractive question answering: measurement,
//! biased training subsets, bias-only models and product-of-experts
//! training of a small span-prediction model.

pub mod biased_models;
pub mod corpus;
pub mod debias;
pub mod error;
pub mod eval;
pub mod nn;
pub mod params;
pub mod qa_model;
pub mod relpos;
pub mod synthetic;
pub mod text;

pub use biased_models::TokenDistribution;
pub use corpus::{QAExample, SubsetCondition};
pub use error::{Error, Result};
pub use relpos::{relative_position, Bucket, RelPosLabel};
