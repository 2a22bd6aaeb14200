//! The run configuration document, dotted-path overrides, and the generated
//! key reference.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::HarnessError;
use crate::design::DesignConfig;
use crate::embedding::WalsConfig;
use crate::environment::EpisodeConfig;
use crate::policy::ReferenceKind;
use crate::trainer::{CloneConfig, TrainConfig};
use crate::utility::UtilityConfig;

/// Environment variable that replaces `llm.credential`.
pub const API_KEY_VAR: &str = "EAGLE_LLM_API_KEY";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub ratings: Option<PathBuf>,
    pub actions: Option<PathBuf>,
    pub descriptions: Option<PathBuf>,
    pub profiles: Option<PathBuf>,
    pub out_dir: PathBuf,
    /// Target user; the smallest user id when unset.
    pub user_id: Option<u64>,
    /// Inclusive bounds accepted for ratings.
    pub rating_scale: (f64, f64),
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            ratings: None,
            actions: None,
            descriptions: None,
            profiles: None,
            out_dir: PathBuf::from("run"),
            user_id: None,
            rating_scale: (0.5, 5.0),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainSection {
    /// Reference the policy is cloned from and regularized toward.
    pub reference: ReferenceKind,
    pub pg: TrainConfig,
    pub clone: CloneConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            reference: ReferenceKind::GOptimal,
            pg: TrainConfig::default(),
            clone: CloneConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backend {
    /// Embedding-space simulator built from action features.
    Sim,
    Http,
    /// Serves recorded transcripts.
    Replay,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EncoderKind {
    Hashing,
    Service,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LlmConfig {
    pub backend: Backend,
    pub endpoint: String,
    pub credential: Option<String>,
    pub timeout_secs: u64,
    pub max_tokens: u32,
    pub max_retries: u32,
    pub retry_base_ms: u64,
    pub record_transcript: bool,
    /// Defaults to `transcript.jsonl` under the output directory.
    pub transcript: Option<PathBuf>,
    pub replay: Option<PathBuf>,
    pub encoder: EncoderKind,
    pub encoder_endpoint: String,
    pub encoder_seed: u64,
    pub sim_noise_sigma: f64,
    pub sim_seed: u64,
}

impl Default for LlmConfig {
    fn default() -> Self {
        Self {
            backend: Backend::Sim,
            endpoint: String::new(),
            credential: None,
            timeout_secs: 60,
            max_tokens: 1024,
            max_retries: 3,
            retry_base_ms: 1000,
            record_transcript: true,
            transcript: None,
            replay: None,
            encoder: EncoderKind::Hashing,
            encoder_endpoint: String::new(),
            encoder_seed: 0,
            sim_noise_sigma: 0.0,
            sim_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub episodes: usize,
    pub seed: u64,
    /// Anchors whose predicted rating is below this are in the low bucket.
    pub bucket_threshold: f64,
    pub references: Vec<ReferenceKind>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            episodes: 200,
            seed: 1,
            bucket_threshold: 3.5,
            references: vec![ReferenceKind::Uniform, ReferenceKind::Optimistic, ReferenceKind::GOptimal],
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub data: DataConfig,
    pub wals: WalsConfig,
    pub utility: UtilityConfig,
    pub design: DesignConfig,
    pub episode: EpisodeConfig,
    pub train: TrainSection,
    pub llm: LlmConfig,
    pub eval: EvalConfig,
}

fn config_err(e: impl std::fmt::Display) -> HarnessError {
    HarnessError::Config(e.to_string())
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self, HarnessError> {
        toml::from_str(text).map_err(config_err)
    }

    pub fn to_toml(&self) -> Result<String, HarnessError> {
        toml::to_string(self).map_err(config_err)
    }

    /// Reads `path` (defaults when `None`), applies `key=value` overrides in
    /// order, then the credential variable from `env`.
    pub fn load(
        path: Option<&Path>,
        overrides: &[String],
        env: impl Fn(&str) -> Option<String>,
    ) -> Result<Self, HarnessError> {
        let mut cfg = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| HarnessError::Config(format!("{}: {e}", p.display())))?;
                Self::from_toml(&text)?
            }
            None => Self::default(),
        };
        for o in overrides {
            let (key, value) = o
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override {o:?} is not key=value")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        if let Some(key) = env(API_KEY_VAR) {
            cfg.llm.credential = Some(key);
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.wals.validate().map_err(config_err)?;
        self.utility.validate().map_err(config_err)?;
        self.design.validate().map_err(config_err)?;
        self.episode.validate().map_err(config_err)?;
        self.train.pg.validate().map_err(config_err)?;
        self.train.clone.validate().map_err(config_err)?;
        let (lo, hi) = self.data.rating_scale;
        if !(lo.is_finite() && hi.is_finite() && lo < hi) {
            return Err(HarnessError::Config("data.rating_scale must be finite with low < high".into()));
        }
        if self.eval.episodes == 0 {
            return Err(HarnessError::Config("eval.episodes must be >= 1".into()));
        }
        Ok(())
    }

    fn tree(&self) -> Result<toml::Table, HarnessError> {
        toml::Table::try_from(self).map_err(config_err)
    }

    /// Value at a dotted path, rendered as TOML; `None` for unset optionals.
    pub fn get(&self, path: &str) -> Result<Option<String>, HarnessError> {
        if !doc_keys().contains(path) {
            return Err(HarnessError::Config(format!("unknown key {path:?}")));
        }
        let tree = self.tree()?;
        let mut node = &toml::Value::Table(tree);
        for part in path.split('.') {
            match node.get(part) {
                Some(next) => node = next,
                None => return Ok(None),
            }
        }
        Ok(Some(node.to_string()))
    }

    /// Sets the value at a dotted path. `raw` is parsed as a TOML value and
    /// taken as a bare string when that fails.
    pub fn set(&mut self, path: &str, raw: &str) -> Result<(), HarnessError> {
        if !doc_keys().contains(path) {
            return Err(HarnessError::Config(format!("unknown key {path:?}")));
        }
        let value = match toml::from_str::<toml::Table>(&format!("v = {raw}")) {
            Ok(mut t) => t.remove("v").expect("parsed key"),
            Err(_) => toml::Value::String(raw.to_string()),
        };
        let mut tree = self.tree()?;
        let parts: Vec<&str> = path.split('.').collect();
        let (leaf, parents) = parts.split_last().expect("nonempty path");
        let mut table = &mut tree;
        for p in parents {
            table = table
                .entry(p.to_string())
                .or_insert_with(|| toml::Value::Table(toml::Table::new()))
                .as_table_mut()
                .ok_or_else(|| HarnessError::Config(format!("{path:?} does not name a table")))?;
        }
        table.insert(leaf.to_string(), value);
        *self = toml::Value::Table(tree)
            .try_into()
            .map_err(|e| HarnessError::Config(format!("setting {path}: {e}")))?;
        Ok(())
    }

    /// Short hash of the configuration, credential excluded.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.llm.credential = None;
        let text = c.to_toml().unwrap_or_default();
        hex::encode(&Sha256::digest(text.as_bytes())[..8])
    }

    pub fn out_path(&self, name: &str) -> PathBuf {
        self.data.out_dir.join(name)
    }

    pub fn transcript_path(&self) -> PathBuf {
        self.llm
            .transcript
            .clone()
            .unwrap_or_else(|| self.out_path("transcript.jsonl"))
    }
}

/// Every recognized key with its description.
pub const CONFIG_KEYS: &[(&str, &str)] = &[
    ("data.ratings", "ratings CSV with header userId,movieId,rating,timestamp"),
    ("data.actions", "action candidates, one JSON object per line"),
    ("data.descriptions", "anchor texts, one {id, text} JSON object per line"),
    ("data.profiles", "encoder check pairs, one {text, embedding} JSON object per line"),
    ("data.out_dir", "directory for every artifact a command writes"),
    ("data.user_id", "target user id; smallest id when unset"),
    ("data.rating_scale", "inclusive [low, high] bounds for ratings"),
    ("wals.dim", "latent dimension n"),
    ("wals.sweeps", "maximum alternating sweeps"),
    ("wals.regularization", "ridge weight on both factor matrices"),
    ("wals.unobserved_weight", "weight on unobserved cells (target 0)"),
    ("wals.seed", "factor initialization seed"),
    ("wals.tolerance", "stop when one sweep lowers the objective by less"),
    ("utility.lambda", "weight on summed neighbor distances"),
    ("utility.neighbor_count", "neighbors in the distance term"),
    ("utility.normalize_affinity", "rescale affinity from affinity_scale to [0, 1]"),
    ("utility.affinity_scale", "[low, high] range of the raw affinity"),
    ("design.k", "support size of each sampled design"),
    ("design.approximation", "acceptance factor C; accept when max norm <= C n"),
    ("design.max_attempts", "sampled subsets before the design is infeasible"),
    ("design.ridge", "diagonal added to the design covariance"),
    ("design.seed", "base seed; each state derives its own"),
    ("design.feature_samples", "environment calls averaged per missing feature"),
    ("episode.horizon", "steps per episode H"),
    ("episode.gamma", "discount factor"),
    ("episode.agent_temperature", "softmax temperature of the trained policy"),
    ("episode.env_temperature", "sampling temperature sent to the environment service"),
    ("train.reference", "reference kind: uniform, optimistic or g_optimal"),
    ("train.pg.training_steps", "policy-gradient updates"),
    ("train.pg.alpha", "KL coefficient"),
    ("train.pg.policy_lr", "policy SGD step size"),
    ("train.pg.value_lr", "value SGD step size"),
    ("train.pg.gae_lambda", "advantage estimation lambda"),
    ("train.pg.batch_episodes", "episodes per update"),
    ("train.pg.seed", "rollout seed"),
    ("train.pg.eval_interval", "updates per metrics row"),
    ("train.pg.workers", "rollout threads"),
    ("train.pg.kl_epsilon", "mass given to zero-probability reference actions"),
    ("train.pg.features.action_feature", "score on the action feature"),
    ("train.pg.features.state_embedding", "score on the state embedding"),
    ("train.pg.features.product", "score on their elementwise product"),
    ("train.pg.features.personalized", "score on the personalized flag"),
    ("train.pg.features.bias", "constant feature"),
    ("train.clone.steps", "reference cloning updates"),
    ("train.clone.batch_size", "states per cloning update"),
    ("train.clone.lr", "cloning SGD step size"),
    ("train.clone.score_noise", "std of score noise while cloning; 0 disables"),
    ("train.clone.seed", "cloning batch seed"),
    ("train.clone.record_interval", "updates between recorded cross-entropy values"),
    ("llm.backend", "environment: sim, http or replay"),
    ("llm.endpoint", "completion service URL"),
    ("llm.credential", "bearer token; overridden by EAGLE_LLM_API_KEY"),
    ("llm.timeout_secs", "per-request timeout"),
    ("llm.max_tokens", "completion length limit"),
    ("llm.max_retries", "retries after a transient failure"),
    ("llm.retry_base_ms", "first backoff delay; doubles per retry"),
    ("llm.record_transcript", "append every completion to the transcript"),
    ("llm.transcript", "transcript path; out_dir/transcript.jsonl when unset"),
    ("llm.replay", "transcript served by the replay backend"),
    ("llm.encoder", "text encoder: hashing or service"),
    ("llm.encoder_endpoint", "embedding service URL"),
    ("llm.encoder_seed", "hashing encoder seed"),
    ("llm.sim_noise_sigma", "simulator transition noise"),
    ("llm.sim_seed", "simulator seed"),
    ("eval.episodes", "evaluation episodes per policy"),
    ("eval.seed", "evaluation rollout seed, shared by all policies"),
    ("eval.bucket_threshold", "predicted rating splitting the low and high buckets"),
    ("eval.references", "reference kinds evaluated alongside the policy"),
];

fn doc_keys() -> BTreeSet<&'static str> {
    CONFIG_KEYS.iter().map(|(k, _)| *k).collect()
}

/// Markdown reference of every key with its default.
pub fn config_doc() -> String {
    let defaults = RunConfig::default();
    let mut out = String::from("| key | default | description |\n|---|---|---|\n");
    for (key, desc) in CONFIG_KEYS {
        let default = defaults
            .get(key)
            .ok()
            .flatten()
            .unwrap_or_else(|| "unset".into());
        out.push_str(&format!("| `{key}` | `{default}` | {desc} |\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaves(prefix: &str, t: &toml::Table, out: &mut BTreeSet<String>) {
        for (k, v) in t {
            let path = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
            match v {
                toml::Value::Table(sub) => leaves(&path, sub, out),
                _ => {
                    out.insert(path);
                }
            }
        }
    }

    fn populated() -> RunConfig {
        let mut c = RunConfig::default();
        c.data.ratings = Some("r.csv".into());
        c.data.actions = Some("a.jsonl".into());
        c.data.descriptions = Some("d.jsonl".into());
        c.data.profiles = Some("p.jsonl".into());
        c.data.user_id = Some(4);
        c.llm.credential = Some("k".into());
        c.llm.transcript = Some("t.jsonl".into());
        c.llm.replay = Some("t.jsonl".into());
        c
    }

    #[test]
    fn reference_covers_every_key() {
        let mut found = BTreeSet::new();
        leaves("", &toml::Table::try_from(populated()).unwrap(), &mut found);
        let documented: BTreeSet<String> = doc_keys().into_iter().map(String::from).collect();
        assert_eq!(found, documented);
        let doc = config_doc();
        for (k, _) in CONFIG_KEYS {
            assert!(doc.contains(&format!("`{k}`")));
        }
    }

    #[test]
    fn defaults_round_trip() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml().unwrap()).unwrap(), c);
        assert_eq!(RunConfig::from_toml("").unwrap(), c);
        let p = populated();
        assert_eq!(RunConfig::from_toml(&p.to_toml().unwrap()).unwrap(), p);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("[train.pg]\nalhpa = 1.0\n").is_err());
        assert!(RunConfig::from_toml("[bogus]\n").is_err());
        let mut c = RunConfig::default();
        assert!(c.set("train.pg.alhpa", "1").is_err());
        assert!(c.get("nope").is_err());
    }

    #[test]
    fn dotted_get_and_set() {
        let mut c = RunConfig::default();
        assert_eq!(c.get("train.pg.alpha").unwrap().as_deref(), Some("0.1"));
        c.set("train.pg.alpha", "0.5").unwrap();
        assert_eq!(c.train.pg.alpha, 0.5);
        c.set("train.reference", "uniform").unwrap();
        assert_eq!(c.train.reference, ReferenceKind::Uniform);
        c.set("data.user_id", "7").unwrap();
        assert_eq!(c.data.user_id, Some(7));
        c.set("data.out_dir", "/tmp/x y").unwrap();
        assert_eq!(c.data.out_dir, PathBuf::from("/tmp/x y"));
        c.set("eval.references", "[\"uniform\"]").unwrap();
        assert_eq!(c.eval.references, vec![ReferenceKind::Uniform]);
        assert_eq!(c.get("llm.replay").unwrap(), None);
        assert!(c.set("episode.horizon", "\"five\"").is_err());
    }

    #[test]
    fn load_applies_overrides_then_env() {
        let c = RunConfig::load(None, &["episode.horizon=3".into()], |k| {
            (k == API_KEY_VAR).then(|| "secret".to_string())
        })
        .unwrap();
        assert_eq!(c.episode.horizon, 3);
        assert_eq!(c.llm.credential.as_deref(), Some("secret"));
        assert!(RunConfig::load(None, &["episode.horizon".into()], |_| None).is_err());
        assert!(RunConfig::load(None, &["episode.horizon=0".into()], |_| None).is_err());
    }

    #[test]
    fn hash_ignores_credential() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.llm.credential = Some("x".into());
        assert_eq!(a.hash(), b.hash());
        b.train.pg.alpha = 0.2;
        assert_ne!(a.hash(), b.hash());
        assert_eq!(a.hash().len(), 16);
    }
}
