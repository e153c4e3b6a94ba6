//! Temporal preference-data factory and evaluation harness for
//! video-language models.

pub mod benchgen;
pub mod corpus;
pub mod datasets;
pub mod digest;
pub mod eval;
pub mod jsonl;
pub mod llmclient;
pub mod media;
pub mod permute;
pub mod preprocess;
pub mod promptkit;
pub mod verify;

pub type LogProbs = verify::PolicyLogProbs<f64>;
pub type LogProbGrad = verify::LogProbGrad<f64>;
pub type Categorical = verify::CategoricalToy<f64>;
pub type RlhfTerms = verify::RlhfTerms<f64>;
