//! Steering text entities toward high-utility regions of a behavioral
//! embedding space.
//!
//! The pipeline fits user/item embeddings from ratings ([`embedding`]),
//! scores latent points with a content-gap utility ([`utility`]), builds
//! exploratory per-state action designs ([`design`]), rolls out episodes in a
//! simulated or LLM-backed environment ([`environment`]), and trains a
//! KL-regularized softmax policy by policy gradient ([`policy`], [`trainer`]).
//! [`harness`] holds configuration, persistence, ingestion and evaluation.

pub mod design;
pub mod embedding;
pub mod utility;
pub mod environment;
pub mod policy;
pub mod trainer;
pub mod harness;
