//! Command implementations. Every artifact goes under `data.out_dir`.

use std::collections::{BTreeMap, BTreeSet};
use std::io::BufRead;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::config::{Backend, EncoderKind, RunConfig};
use super::eval::{encoder_consistency_check, run_eval, EncoderCheck, EvalReport, EvalSettings};
use super::ingest::{ingest_ratings, load_action_candidates, load_descriptions, load_profiles, ActionRecord, IdMap};
use super::persist::{load_state, save_state, write_atomic};
use super::HarnessError;
use crate::design::{ActionTable, StateId};
use crate::embedding::{wals_fit, EmbeddingCatalog, EmbeddingVector, UserId};
use crate::environment::{
    CompletionClient, Encoder, Entity, Environment, HashingEncoder, HttpCompletionClient, HttpSettings,
    LlmEnvironment, LlmStepConfig, RecordingClient, ReplayClient, RetryPolicy, ServiceEncoder,
    SimDynamicsConfig, SimEnvironment, Trajectory,
};
use crate::policy::{PolicyParams, ReferenceKind, ReferencePolicy, SoftmaxAgent, ValueParams};
use crate::trainer::{
    build_reference, collect_rollouts, fit_reference_policy, policy_gradient, prepare_action_features,
    CloneFit, ContentGapReward, MetricsRow, RolloutContext, TrainError, WorkerPool,
};

pub const CATALOG_FILE: &str = "catalog.bin";
pub const ID_MAP_FILE: &str = "id_map.json";
pub const RESOLVED_ACTIONS_FILE: &str = "actions_resolved.jsonl";
pub const POLICY_FILE: &str = "policy.bin";
pub const VALUE_FILE: &str = "value.bin";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const TRAJECTORIES_FILE: &str = "trajectories.jsonl";
pub const EVAL_REPORT_FILE: &str = "eval_report.json";
pub const ENCODER_CHECK_FILE: &str = "encoder_check.json";
pub const ABORT_POLICY_FILE: &str = "policy_abort.bin";
pub const ABORT_VALUE_FILE: &str = "value_abort.bin";

pub fn design_file(kind: ReferenceKind) -> String {
    format!("design_{}.bin", kind.as_str())
}

pub fn reference_params_file(kind: ReferenceKind) -> String {
    format!("reference_{}.bin", kind.as_str())
}

fn required<'a>(value: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, HarnessError> {
    value
        .as_deref()
        .ok_or_else(|| HarnessError::Config(format!("{key} is not set")))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), HarnessError> {
    let mut text = serde_json::to_string_pretty(value).expect("serializable");
    text.push('\n');
    Ok(write_atomic(path, text.as_bytes())?)
}

fn write_jsonl<T: Serialize>(path: &Path, rows: &[T]) -> Result<(), HarnessError> {
    let mut text = String::new();
    for r in rows {
        text.push_str(&serde_json::to_string(r).expect("serializable"));
        text.push('\n');
    }
    Ok(write_atomic(path, text.as_bytes())?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbedFitSummary {
    pub users: usize,
    pub items: usize,
    pub sweeps_run: usize,
    pub final_objective: f64,
    pub dropped_users: usize,
    pub dropped_items: usize,
}

/// Ingests ratings, fits the catalog and stores it with its id map.
pub fn embed_fit(cfg: &RunConfig) -> Result<EmbedFitSummary, HarnessError> {
    let ratings = ingest_ratings(required(&cfg.data.ratings, "data.ratings")?, cfg.data.rating_scale)?;
    let fit = wals_fit(&ratings, &cfg.wals)?;
    save_state(&fit.catalog, &cfg.out_path(CATALOG_FILE), &cfg.hash())?;
    write_json(&cfg.out_path(ID_MAP_FILE), &IdMap::of(&ratings))?;
    Ok(EmbedFitSummary {
        users: fit.catalog.users().len(),
        items: fit.catalog.items().len(),
        sweeps_run: fit.sweeps_run,
        final_objective: *fit.objective_history.last().expect("initial objective"),
        dropped_users: fit.dropped_users.len(),
        dropped_items: fit.dropped_items.len(),
    })
}

/// Loaded inputs shared by the downstream commands.
pub struct Workspace {
    pub catalog: Arc<EmbeddingCatalog>,
    pub actions: ActionTable,
    pub anchors: Vec<Entity>,
    pub user_id: UserId,
}

impl Workspace {
    pub fn user(&self) -> &EmbeddingVector {
        self.catalog.user(self.user_id).expect("validated user")
    }

    pub fn reward(&self, cfg: &RunConfig) -> ContentGapReward {
        ContentGapReward {
            user: self.user().clone(),
            catalog: self.catalog.clone(),
            cfg: cfg.utility.clone(),
        }
    }
}

/// Loads the catalog, the action table (resolved features when present)
/// and the anchor entities.
pub fn load_workspace(cfg: &RunConfig) -> Result<Workspace, HarnessError> {
    let (catalog, _) = load_state::<EmbeddingCatalog>(&cfg.out_path(CATALOG_FILE), Some(cfg.wals.dim))?;
    let resolved = cfg.out_path(RESOLVED_ACTIONS_FILE);
    let actions_path = if resolved.exists() {
        resolved
    } else {
        required(&cfg.data.actions, "data.actions")?.to_path_buf()
    };
    let actions = load_action_candidates(&actions_path, catalog.dim())?.table;
    let descriptions = match &cfg.data.descriptions {
        Some(p) => load_descriptions(p)?,
        None => BTreeMap::new(),
    };
    let mut anchors = Vec::with_capacity(actions.len());
    for &state in actions.keys() {
        let z = catalog
            .item(state)
            .ok_or_else(|| HarnessError::Data(format!("state {state} has no catalog embedding")))?
            .clone();
        anchors.push(match descriptions.get(&state) {
            Some(text) => Entity::with_embedding(state, text.clone(), z),
            None => Entity::anchor(state, z),
        });
    }
    let user_id = match cfg.data.user_id {
        Some(u) if catalog.user(u).is_some() => u,
        Some(u) => return Err(HarnessError::Data(format!("user {u} is not in the catalog"))),
        None => *catalog
            .users()
            .keys()
            .next()
            .ok_or_else(|| HarnessError::Data("catalog has no users".into()))?,
    };
    Ok(Workspace {
        catalog: Arc::new(catalog),
        actions,
        anchors,
        user_id,
    })
}

fn build_encoder(cfg: &RunConfig, dim: usize) -> Arc<dyn Encoder> {
    match cfg.llm.encoder {
        EncoderKind::Hashing => Arc::new(HashingEncoder::new(dim, cfg.llm.encoder_seed)),
        EncoderKind::Service => Arc::new(ServiceEncoder::new(
            dim,
            HttpSettings::new(
                cfg.llm.encoder_endpoint.clone(),
                cfg.llm.credential.clone(),
                Duration::from_secs(cfg.llm.timeout_secs),
            ),
            retry_policy(cfg),
        )),
    }
}

fn retry_policy(cfg: &RunConfig) -> RetryPolicy {
    RetryPolicy {
        max_retries: cfg.llm.max_retries,
        base_delay: Duration::from_millis(cfg.llm.retry_base_ms),
    }
}

/// The configured transition function.
pub fn build_environment(cfg: &RunConfig, ws: &Workspace) -> Result<Box<dyn Environment>, HarnessError> {
    let llm = |client: Arc<dyn CompletionClient>| -> Box<dyn Environment> {
        Box::new(LlmEnvironment::new(
            client,
            build_encoder(cfg, ws.catalog.dim()),
            LlmStepConfig {
                temperature: cfg.episode.env_temperature,
                max_tokens: cfg.llm.max_tokens,
                retry: retry_policy(cfg),
            },
        ))
    };
    match cfg.llm.backend {
        Backend::Sim => {
            let sets = ws.anchors.iter().map(|a| (&a.embedding, &ws.actions[&a.id]));
            let dynamics = SimDynamicsConfig::from_action_features(sets, cfg.llm.sim_noise_sigma, cfg.llm.sim_seed)
                .map_err(|e| HarnessError::Data(format!("simulator needs every action feature: {e}")))?;
            Ok(Box::new(SimEnvironment::new(dynamics)))
        }
        Backend::Http => {
            if cfg.llm.endpoint.is_empty() {
                return Err(HarnessError::Config("llm.endpoint is not set".into()));
            }
            let http = HttpCompletionClient::new(HttpSettings::new(
                cfg.llm.endpoint.clone(),
                cfg.llm.credential.clone(),
                Duration::from_secs(cfg.llm.timeout_secs),
            ));
            if !cfg.llm.record_transcript {
                return Ok(llm(Arc::new(http)));
            }
            let path = cfg.transcript_path();
            if let Some(dir) = path.parent() {
                std::fs::create_dir_all(dir).map_err(|e| HarnessError::Data(format!("{}: {e}", dir.display())))?;
            }
            let rec = RecordingClient::to_file(http, &path)
                .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            Ok(llm(Arc::new(rec)))
        }
        Backend::Replay => {
            let path = cfg.llm.replay.clone().unwrap_or_else(|| cfg.transcript_path());
            let replay = ReplayClient::from_file(&path)
                .map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
            Ok(llm(Arc::new(replay)))
        }
    }
}

fn reference_kinds(cfg: &RunConfig) -> Vec<ReferenceKind> {
    let mut kinds: BTreeSet<ReferenceKind> = cfg.eval.references.iter().copied().collect();
    kinds.insert(cfg.train.reference);
    kinds.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DesignBuildSummary {
    pub states: usize,
    pub estimated_features: usize,
    pub references: Vec<ReferenceKind>,
}

/// Resolves missing action features and stores one design table per
/// reference kind in use.
pub fn design_build(cfg: &RunConfig) -> Result<DesignBuildSummary, HarnessError> {
    let mut ws = load_workspace(cfg)?;
    let estimated = if ws.actions.values().any(|s| s.candidates().iter().any(|c| c.feature.is_none())) {
        if cfg.llm.backend == Backend::Sim {
            return Err(HarnessError::Data(
                "actions without features need an llm backend to estimate them".into(),
            ));
        }
        let env = build_environment(cfg, &ws)?;
        prepare_action_features(&mut ws.actions, &ws.anchors, env.as_ref(), &cfg.design)?
    } else {
        0
    };
    let records: Vec<ActionRecord> = ws
        .actions
        .iter()
        .flat_map(|(&s, set)| {
            set.candidates().iter().map(move |c| ActionRecord {
                state_id: s,
                action_id: c.id,
                prompt_text: c.prompt_text.clone(),
                personalized: c.personalized,
                category: c.category,
                feature: c.feature.as_ref().map(|f| f.as_slice().to_vec()),
            })
        })
        .collect();
    write_jsonl(&cfg.out_path(RESOLVED_ACTIONS_FILE), &records)?;
    let reward = ws.reward(cfg);
    let kinds = reference_kinds(cfg);
    for &kind in &kinds {
        let reference = build_reference(kind, &ws.actions, &reward, &cfg.design)?;
        save_state(&reference, &cfg.out_path(&design_file(kind)), &cfg.hash())?;
    }
    Ok(DesignBuildSummary {
        states: ws.actions.len(),
        estimated_features: estimated,
        references: kinds,
    })
}

fn load_reference(cfg: &RunConfig, kind: ReferenceKind) -> Result<ReferencePolicy, HarnessError> {
    Ok(load_state::<ReferencePolicy>(&cfg.out_path(&design_file(kind)), None)?.0)
}

/// Clones the training reference into softmax parameters.
pub fn ref_fit(cfg: &RunConfig) -> Result<CloneFit, HarnessError> {
    let ws = load_workspace(cfg)?;
    let kind = cfg.train.reference;
    let reference = load_reference(cfg, kind)?;
    let fit = fit_reference_policy(
        &reference,
        &ws.anchors,
        &ws.actions,
        cfg.train.pg.features,
        cfg.episode.agent_temperature,
        &cfg.train.clone,
    )?;
    save_state(&fit.params, &cfg.out_path(&reference_params_file(kind)), &cfg.hash())?;
    write_json(&cfg.out_path(&format!("clone_{}.json", kind.as_str())), &fit)?;
    Ok(fit)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps: usize,
    pub dropped: usize,
    pub final_metrics: Option<MetricsRow>,
}

/// Policy-gradient training from the cloned reference. On failure the
/// parameters reached so far are written to the abort checkpoint files.
pub fn train_command(cfg: &RunConfig) -> Result<TrainSummary, HarnessError> {
    let ws = load_workspace(cfg)?;
    let kind = cfg.train.reference;
    let reference = load_reference(cfg, kind)?;
    let init = match load_state::<PolicyParams>(&cfg.out_path(&reference_params_file(kind)), Some(ws.catalog.dim())) {
        Ok((p, _)) => p,
        Err(super::PersistError::Io { .. }) => ref_fit(cfg)?.params,
        Err(e) => return Err(e.into()),
    };
    let env = build_environment(cfg, &ws)?;
    let reward = ws.reward(cfg);
    let pool = WorkerPool::new(cfg.train.pg.workers)?;
    let ctx = RolloutContext {
        env: env.as_ref(),
        anchors: &ws.anchors,
        actions: &ws.actions,
        reward: &reward,
        episode: &cfg.episode,
        pool: &pool,
    };
    let hash = cfg.hash();
    match policy_gradient(&ctx, &reference, init, ValueParams::zeros(ws.catalog.dim()), &cfg.train.pg) {
        Ok(out) => {
            save_state(&out.policy, &cfg.out_path(POLICY_FILE), &hash)?;
            save_state(&out.value, &cfg.out_path(VALUE_FILE), &hash)?;
            write_jsonl(&cfg.out_path(METRICS_FILE), &out.history)?;
            Ok(TrainSummary {
                steps: cfg.train.pg.training_steps,
                dropped: out.dropped,
                final_metrics: out.history.last().cloned(),
            })
        }
        Err(TrainError::Aborted {
            step,
            policy,
            value,
            source,
        }) => {
            save_state(policy.as_ref(), &cfg.out_path(ABORT_POLICY_FILE), &hash)?;
            save_state(value.as_ref(), &cfg.out_path(ABORT_VALUE_FILE), &hash)?;
            log::error!("training aborted at step {step}; checkpoint written");
            Err((*source).into())
        }
        Err(e) => Err(e.into()),
    }
}

fn load_policy(cfg: &RunConfig, dim: usize) -> Result<PolicyParams, HarnessError> {
    Ok(load_state::<PolicyParams>(&cfg.out_path(POLICY_FILE), Some(dim))?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutSummary {
    pub episodes: usize,
    pub dropped: usize,
    pub mean_terminal_utility: f64,
}

/// Rolls out the trained policy and writes every trajectory.
pub fn rollout_command(cfg: &RunConfig, episodes: usize) -> Result<RolloutSummary, HarnessError> {
    let ws = load_workspace(cfg)?;
    let params = load_policy(cfg, ws.catalog.dim())?;
    let env = build_environment(cfg, &ws)?;
    let reward = ws.reward(cfg);
    let pool = WorkerPool::new(cfg.train.pg.workers)?;
    let ctx = RolloutContext {
        env: env.as_ref(),
        anchors: &ws.anchors,
        actions: &ws.actions,
        reward: &reward,
        episode: &cfg.episode,
        pool: &pool,
    };
    let agent = SoftmaxAgent {
        params: &params,
        temperature: cfg.episode.agent_temperature,
    };
    let batch = collect_rollouts(&agent, &ctx, None, episodes, cfg.eval.seed, 0)?;
    write_jsonl::<Trajectory>(&cfg.out_path(TRAJECTORIES_FILE), &batch.trajectories)?;
    Ok(RolloutSummary {
        episodes: batch.trajectories.len(),
        dropped: batch.dropped,
        mean_terminal_utility: batch.mean_terminal_utility(),
    })
}

/// Evaluates the trained policy and the configured references on paired
/// episodes and writes the report.
pub fn eval_command(cfg: &RunConfig) -> Result<EvalReport, HarnessError> {
    let ws = load_workspace(cfg)?;
    let params = load_policy(cfg, ws.catalog.dim())?;
    let references = cfg
        .eval
        .references
        .iter()
        .map(|&k| load_reference(cfg, k))
        .collect::<Result<Vec<_>, _>>()?;
    let env = build_environment(cfg, &ws)?;
    let reward = ws.reward(cfg);
    let pool = WorkerPool::new(cfg.train.pg.workers)?;
    let ctx = RolloutContext {
        env: env.as_ref(),
        anchors: &ws.anchors,
        actions: &ws.actions,
        reward: &reward,
        episode: &cfg.episode,
        pool: &pool,
    };
    let agent = SoftmaxAgent {
        params: &params,
        temperature: cfg.episode.agent_temperature,
    };
    let settings = EvalSettings {
        episodes: cfg.eval.episodes,
        seed: cfg.eval.seed,
        user: ws.user(),
        bucket_threshold: cfg.eval.bucket_threshold,
    };
    let refs: Vec<&ReferencePolicy> = references.iter().collect();
    let report = run_eval(&agent, &refs, &ctx, &settings)?;
    write_json(&cfg.out_path(EVAL_REPORT_FILE), &report)?;
    Ok(report)
}

/// Runs the encoder consistency check on the configured profiles.
pub fn check_encoder(cfg: &RunConfig) -> Result<EncoderCheck, HarnessError> {
    let (catalog, _) = load_state::<EmbeddingCatalog>(&cfg.out_path(CATALOG_FILE), Some(cfg.wals.dim))?;
    let profiles = load_profiles(required(&cfg.data.profiles, "data.profiles")?)?;
    let encoder = build_encoder(cfg, catalog.dim());
    let check = encoder_consistency_check(&profiles, encoder.as_ref(), &catalog)?;
    write_json(&cfg.out_path(ENCODER_CHECK_FILE), &check)?;
    Ok(check)
}

/// Reads metrics rows written by training.
pub fn read_metrics(path: &Path) -> Result<Vec<MetricsRow>, HarnessError> {
    let file = std::fs::File::open(path).map_err(|e| HarnessError::Data(format!("{}: {e}", path.display())))?;
    std::io::BufReader::new(file)
        .lines()
        .map(|l| {
            let l = l.map_err(|e| HarnessError::Data(e.to_string()))?;
            serde_json::from_str(&l).map_err(|e| HarnessError::Data(e.to_string()))
        })
        .collect()
}

/// States in the workspace, for reporting.
pub fn workspace_states(ws: &Workspace) -> Vec<StateId> {
    ws.actions.keys().copied().collect()
}
