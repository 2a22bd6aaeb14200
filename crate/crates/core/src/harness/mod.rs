//! Operational shell: configuration, persistence, ingestion, evaluation and
//! the command implementations behind the CLI.

mod commands;
mod config;
mod eval;
mod ingest;
mod persist;

pub use commands::*;
pub use config::{
    config_doc, Backend, DataConfig, EncoderKind, EvalConfig, LlmConfig, RunConfig, TrainSection, API_KEY_VAR,
    CONFIG_KEYS,
};
pub use eval::{
    encoder_consistency_check, run_eval, EncoderCheck, EvalReport, EvalSettings, PolicyReport, Summary,
    MIN_HOLDOUT_PAIRS,
};
pub use ingest::{
    ingest_ratings, load_action_candidates, load_descriptions, load_profiles, read_action_candidates,
    read_ratings, ActionRecord, DescriptionRecord, IdMap, IngestError, LoadedActions, ProfileRecord,
    RATINGS_HEADER,
};
pub use persist::{
    load_state, read_header, save_state, sidecar_path, write_atomic, Persist, PersistError, StateHeader,
    FORMAT_VERSION,
};

use thiserror::Error;

use crate::design::DesignError;
use crate::embedding::EmbeddingError;
use crate::environment::EnvError;
use crate::policy::PolicyError;
use crate::trainer::TrainError;
use crate::utility::UtilityError;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("service error: {0}")]
    Service(String),
    #[error("infeasible design: {0}")]
    Infeasible(String),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Persist(#[from] PersistError),
}

impl HarnessError {
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Config(_) => 2,
            HarnessError::Data(_) | HarnessError::Ingest(_) | HarnessError::Persist(_) => 3,
            HarnessError::Service(_) => 4,
            HarnessError::Infeasible(_) => 5,
        }
    }
}

impl From<DesignError> for HarnessError {
    fn from(e: DesignError) -> Self {
        match e {
            DesignError::DesignInfeasible { .. } => HarnessError::Infeasible(e.to_string()),
            DesignError::InvalidConfig(m) => HarnessError::Config(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<EmbeddingError> for HarnessError {
    fn from(e: EmbeddingError) -> Self {
        match e {
            EmbeddingError::InvalidConfig(m) => HarnessError::Config(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<UtilityError> for HarnessError {
    fn from(e: UtilityError) -> Self {
        match e {
            UtilityError::InvalidConfig(m) => HarnessError::Config(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<EnvError> for HarnessError {
    fn from(e: EnvError) -> Self {
        match e {
            EnvError::Service(_) | EnvError::Encode(crate::environment::EncodeError::Service(_)) => {
                HarnessError::Service(e.to_string())
            }
            EnvError::Design(d) => d.into(),
            EnvError::InvalidConfig(m) => HarnessError::Config(m),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<PolicyError> for HarnessError {
    fn from(e: PolicyError) -> Self {
        match e {
            PolicyError::Design(d) => d.into(),
            PolicyError::InvalidTemperature(_) => HarnessError::Config(e.to_string()),
            other => HarnessError::Data(other.to_string()),
        }
    }
}

impl From<TrainError> for HarnessError {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Policy(p) => p.into(),
            TrainError::Env(x) => x.into(),
            TrainError::Design(d) => d.into(),
            TrainError::Utility(u) => u.into(),
            TrainError::InvalidConfig(m) => HarnessError::Config(m),
            TrainError::AllEpisodesDropped { .. } => HarnessError::Service(e.to_string()),
            TrainError::Aborted { source, .. } => (*source).into(),
            other => HarnessError::Data(other.to_string()),
        }
    }
}
