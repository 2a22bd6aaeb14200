//! Acceptance runner: one PASS/FAIL line per criterion, non-zero exit on any
//! failure.

mod common;

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::time::{Duration, Instant};

use common::{exhaustive_optimum, toy, toy_at, v, Toy};
use eagle_core::design::{
    design_covariance, sample_g_optimal_design, uniform_design, verify_design, ActionCandidate, ActionSet,
    DesignConfig, DesignDistribution, DesignNormSolver,
};
use eagle_core::embedding::{wals_fit, EmbeddingCatalog, EmbeddingVector, RatingCell, RatingsMatrix, WalsConfig};
use eagle_core::environment::{
    parse_delimited, render_env_prompt, Description, EncodeError, Encoder, EpisodeConfig, Entity, LookupEncoder,
    SimDynamicsConfig, SimEnvironment, Trajectory, Transition,
};
use eagle_core::harness::{encoder_consistency_check, run_eval, save_state, EvalSettings};
use eagle_core::policy::{FeatureSpec, PolicyParams, ReferenceKind, ReferencePolicy, SoftmaxAgent};
use eagle_core::trainer::{
    collect_rollouts, compute_gae, reinforce_loss, returns_to_go, train, CloneConfig, PipelineConfig,
    PipelineOutcome, RewardModel, RolloutContext, TrainConfig, WorkerPool,
};
use nalgebra::{DMatrix, DVector};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        let holds: bool = $cond;
        if !holds {
            return Err(format!($($fmt)+));
        }
    };
}

fn wals_recovery() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let (users, items, rank) = (50, 80, 3);
    let u: Vec<Vec<f64>> = (0..users).map(|_| (0..rank).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let w: Vec<Vec<f64>> = (0..items).map(|_| (0..rank).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
    let truth = |i: usize, j: usize| u[i].iter().zip(&w[j]).map(|(a, b)| a * b).sum::<f64>();
    let (mut observed, mut held_out) = (Vec::new(), Vec::new());
    for i in 0..users {
        for j in 0..items {
            if rng.random_bool(0.3) {
                observed.push(RatingCell::new(i, j, truth(i, j)));
            } else {
                held_out.push((i, j));
            }
        }
    }
    let ratings = RatingsMatrix::new(users, items, observed).map_err(|e| e.to_string())?;
    let cfg = WalsConfig {
        dim: rank,
        sweeps: 100,
        regularization: 1e-6,
        unobserved_weight: 0.0,
        seed: 7,
        tolerance: 1e-14,
    };
    let start = Instant::now();
    let fit = wals_fit(&ratings, &cfg).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let sse: f64 = held_out
        .iter()
        .map(|&(i, j)| {
            let p = fit.catalog.user(i as u64).unwrap().dot(fit.catalog.item(j as u64).unwrap()).unwrap();
            (p - truth(i, j)).powi(2)
        })
        .sum();
    let rmse = (sse / held_out.len() as f64).sqrt();
    ensure!(rmse < 0.05, "held-out RMSE {rmse}");
    ensure!(fit.sweeps_run <= 100, "{} sweeps", fit.sweeps_run);
    ensure!(elapsed < Duration::from_secs(5), "fit took {elapsed:?}");

    // Monotone objective on a spread of configurations.
    for (seed, reg, unobserved) in [(0, 1e-6, 0.0), (1, 0.1, 0.0), (2, 1.0, 0.05), (3, 0.01, 0.5)] {
        let cfg = WalsConfig {
            dim: 4,
            sweeps: 30,
            regularization: reg,
            unobserved_weight: unobserved,
            seed,
            tolerance: 1e-14,
        };
        let fit = wals_fit(&ratings, &cfg).map_err(|e| e.to_string())?;
        for pair in fit.objective_history.windows(2) {
            ensure!(pair[1] <= pair[0] * (1.0 + 1e-12), "seed {seed}: objective rose {} -> {}", pair[0], pair[1]);
        }
    }
    Ok(format!("held-out RMSE {rmse:.2e} after {} sweeps in {elapsed:.2?}", fit.sweeps_run))
}

fn action_set(features: &[Vec<f64>]) -> ActionSet {
    ActionSet::new(
        0,
        features
            .iter()
            .enumerate()
            .map(|(i, f)| ActionCandidate::new(i as u64, format!("a{i}"), EmbeddingVector::new(f.clone()).unwrap()))
            .collect(),
    )
    .unwrap()
}

fn random_features(rng: &mut ChaCha8Rng, count: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..count).map(|_| (0..dim).map(|_| rng.random_range(-1.0..1.0)).collect()).collect()
}

fn design_soundness() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut returned = 0;
    for case in 0..200u64 {
        let n = rng.random_range(1..=5);
        let count = rng.random_range(n + 1..=30);
        let features = random_features(&mut rng, count, n);
        let actions = action_set(&features);
        let c = rng.random_range(1.0..2.5);
        let ridge = [0.0, 1e-8, 1e-4][case as usize % 3];
        let cfg = DesignConfig {
            k: rng.random_range(n..=count),
            approximation: c,
            max_attempts: 50,
            ridge,
            seed: case,
            ..Default::default()
        };
        let Ok(d) = sample_g_optimal_design(&actions, &cfg) else { continue };
        returned += 1;
        let inv = design_covariance(&d.design, &actions, ridge).unwrap().try_inverse().unwrap();
        for f in &features {
            let z = DVector::from_column_slice(f);
            let norm = (z.transpose() * &inv * &z)[(0, 0)];
            ensure!(norm <= c * n as f64 + 1e-8, "case {case}: norm {norm} > {}", c * n as f64);
        }
    }
    ensure!(returned >= 50, "only {returned} designs returned");
    let mut worst: f64 = 0.0;
    for n in 1..=8 {
        let q = DMatrix::from_fn(n, n, |_, _| rng.random_range(-1.0..1.0)).qr().q();
        let basis: Vec<Vec<f64>> = (0..n).map(|j| q.column(j).iter().copied().collect()).collect();
        let actions = action_set(&basis);
        let cfg = DesignConfig {
            k: n,
            ridge: 0.0,
            ..Default::default()
        };
        let check = verify_design(&uniform_design(&actions).unwrap(), &actions, &cfg).unwrap();
        worst = worst.max((check.max_norm - n as f64).abs());
        ensure!(check.accepted, "n {n}: basis design rejected at C = 1");
    }
    ensure!(worst <= 1e-9, "orthonormal basis deviates by {worst}");
    Ok(format!("{returned} sampled designs within C n; basis deviation {worst:.1e}"))
}

fn trace_identity() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut worst: f64 = 0.0;
    for case in 0..100 {
        let n = rng.random_range(2..=6);
        let count = rng.random_range(2..=12);
        let features = random_features(&mut rng, count, n);
        let actions = action_set(&features);
        let k = rng.random_range(1..=count);
        let mut picked = sample(&mut rng, count, k).into_vec();
        picked.sort_unstable();
        let raw: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let q = DesignDistribution::new(
            picked.iter().map(|&i| i as u64).collect(),
            raw.iter().map(|w| w / total).collect(),
        )
        .unwrap();
        let solver = DesignNormSolver::new(&design_covariance(&q, &actions, 0.0).unwrap()).unwrap();
        let sum: f64 = q
            .iter()
            .map(|(id, w)| w * solver.norm(actions.get(id).unwrap().feature().unwrap()).unwrap())
            .sum();
        let rank = DMatrix::from_fn(n, k, |i, j| features[picked[j]][i]).rank(1e-10);
        ensure!(solver.rank() == rank, "case {case}: rank {} vs {rank}", solver.rank());
        worst = worst.max((sum - rank as f64).abs());
    }
    ensure!(worst <= 1e-8, "max deviation {worst}");
    Ok(format!("100 designs, max deviation {worst:.1e}"))
}

fn trajectory(rewards: &[f64], values: &[f64]) -> Trajectory {
    let e = Entity::anchor(0, v(&[0.0]));
    let a = ActionCandidate::new(0, "a", v(&[0.0]));
    Trajectory {
        transitions: rewards
            .iter()
            .enumerate()
            .map(|(t, &r)| Transition {
                state: e.clone(),
                action: a.clone(),
                next_state: e.clone(),
                reward: r,
                step_index: t,
            })
            .collect(),
        log_probs: vec![0.0; rewards.len()],
        action_indices: vec![0; rewards.len()],
        values: values.to_vec(),
        return_: rewards.iter().sum(),
    }
}

fn gae_identities() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    // Multiples of 1/16 keep every partial sum exact.
    let mut dyadic = || rng.random_range(-32i32..=32) as f64 / 16.0;
    for case in 0..200 {
        let h = 1 + case % 6;
        let rewards: Vec<f64> = (0..h).map(|_| dyadic()).collect();
        let mut values: Vec<f64> = (0..h).map(|_| dyadic()).collect();
        values.push(0.0);
        let t = trajectory(&rewards, &values);
        let g = returns_to_go(&t, 1.0);
        let full = compute_gae(&t, 1.0, 1.0).map_err(|e| e.to_string())?;
        let td = compute_gae(&t, 1.0, 0.0).map_err(|e| e.to_string())?;
        for i in 0..h {
            ensure!(full[i] == g[i] - values[i], "case {case}: lambda 1 at {i}");
            ensure!(td[i] == rewards[i] + values[i + 1] - values[i], "case {case}: lambda 0 at {i}");
        }
    }
    // H = 3, gamma = 0.9, lambda = 0.5, unrolled by hand:
    // d = r_t + 0.9 V_{t+1} - V_t = (0.15, 0.22, 0.2); A_2 = 0.2,
    // A_1 = 0.22 + 0.45 * 0.2 = 0.31, A_0 = 0.15 + 0.45 * 0.31 = 0.2895.
    let t = trajectory(&[0.0, 0.0, 1.0], &[0.3, 0.5, 0.8, 0.0]);
    let a = compute_gae(&t, 0.9, 0.5).map_err(|e| e.to_string())?;
    for (got, want) in a.iter().zip([0.2895, 0.31, 0.2]) {
        ensure!((got - want).abs() < 1e-12, "fixture {a:?}");
    }
    Ok("exact at lambda 0 and 1 on 200 trajectories; hand fixture to 1e-12".into())
}

fn gradient_check() -> Check {
    let t = toy_at(0.7, &[[0.0, 0.0], [0.4, -0.3], [-0.6, 0.2]]);
    let ep = EpisodeConfig {
        horizon: 3,
        ..Default::default()
    };
    let pool = WorkerPool::sequential();
    let ctx = RolloutContext {
        env: &t.env,
        anchors: &t.anchors,
        actions: &t.actions,
        reward: &t.reward,
        episode: &ep,
        pool: &pool,
    };
    let g_ref = ReferencePolicy::g_optimal(
        &t.actions,
        &DesignConfig {
            k: 3,
            approximation: 2.0,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
        let mut params = PolicyParams::zeros(FeatureSpec::default(), 2);
        for w in &mut params.weights {
            *w = rng.random_range(-1.0..1.0);
        }
        let temperature = rng.random_range(0.3..1.5);
        let agent = SoftmaxAgent {
            params: &params,
            temperature,
        };
        let batch = collect_rollouts(&agent, &ctx, None, 6, seed, 0).map_err(|e| e.to_string())?;
        let advs: Vec<Vec<f64>> = batch
            .trajectories
            .iter()
            .map(|tr| (0..tr.horizon()).map(|_| rng.random_range(-1.0..1.0)).collect())
            .collect();
        let reference = if seed % 2 == 0 { g_ref.clone() } else { ReferencePolicy::uniform(&t.actions).unwrap() };
        let cfg = TrainConfig {
            alpha: rng.random_range(0.01..2.0),
            ..Default::default()
        };
        let loss = |p: &PolicyParams| {
            reinforce_loss(&batch.trajectories, &advs, p, &reference, &t.actions, temperature, &cfg).unwrap()
        };
        let analytic = loss(&params).grad;
        let h = 1e-5;
        let numeric: Vec<f64> = (0..params.weights.len())
            .map(|i| {
                let (mut up, mut down) = (params.clone(), params.clone());
                up.weights[i] += h;
                down.weights[i] -= h;
                (loss(&up).loss - loss(&down).loss) / (2.0 * h)
            })
            .collect();
        let norm = |x: &[f64]| x.iter().map(|a| a * a).sum::<f64>().sqrt();
        let diff: Vec<f64> = numeric.iter().zip(&analytic).map(|(a, b)| a - b).collect();
        let rel = norm(&diff) / norm(&numeric).max(norm(&analytic));
        ensure!(rel < 1e-4, "seed {seed}: relative error {rel}");
        worst = worst.max(rel);
    }
    Ok(format!("20 instances, worst relative error {worst:.1e}"))
}

const TOY_RADIUS: f64 = 0.5;

fn toy_pipeline(alpha: f64, workers: usize) -> PipelineConfig {
    PipelineConfig {
        clone: CloneConfig {
            steps: 1,
            ..Default::default()
        },
        train: TrainConfig {
            training_steps: 600,
            eval_interval: 60,
            policy_lr: 0.2,
            value_lr: 0.05,
            batch_episodes: 32,
            workers,
            alpha,
            ..Default::default()
        },
        episode: EpisodeConfig {
            horizon: 3,
            ..Default::default()
        },
        ..Default::default()
    }
}

fn train_toy(t: &Toy, cfg: &PipelineConfig) -> Result<PipelineOutcome, String> {
    train(&t.env, &t.anchors, t.actions.clone(), ReferenceKind::Uniform, &t.reward, cfg).map_err(|e| e.to_string())
}

fn end_to_end_steering() -> Check {
    let t = toy(TOY_RADIUS);
    let (optimum, sequences) = exhaustive_optimum(&t, 3);
    ensure!(sequences == 125, "{sequences} sequences");
    let cfg = toy_pipeline(0.1, 1);
    let start = Instant::now();
    let out = train_toy(&t, &cfg)?;
    let elapsed = start.elapsed();
    let pool = WorkerPool::sequential();
    let ctx = RolloutContext {
        env: &t.env,
        anchors: &t.anchors,
        actions: &out.actions,
        reward: &t.reward,
        episode: &cfg.episode,
        pool: &pool,
    };
    let agent = SoftmaxAgent {
        params: &out.outcome.policy,
        temperature: cfg.episode.agent_temperature,
    };
    let user = v(&[1.0, 0.0]);
    let settings = EvalSettings {
        episodes: 200,
        seed: 1,
        user: &user,
        bucket_threshold: 3.5,
    };
    let report = run_eval(&agent, &[&out.reference], &ctx, &settings).map_err(|e| e.to_string())?;
    let trained = report.policy.overall.mean;
    let uniform = report.references["uniform"].overall.mean;
    ensure!(trained >= 0.95 * optimum, "trained {trained} below 0.95 x {optimum}");
    ensure!(trained > uniform, "trained {trained} not above uniform {uniform}");
    ensure!(elapsed < Duration::from_secs(60), "training took {elapsed:?}");
    Ok(format!("trained {trained:.4} vs optimum {optimum:.4}, uniform {uniform:.4}; trained in {elapsed:.2?}"))
}

fn kl_control() -> Check {
    let t = toy(TOY_RADIUS);
    let mut finals = Vec::new();
    for alpha in [0.01, 0.1, 1.0, 10.0] {
        let out = train_toy(&t, &toy_pipeline(alpha, 1))?;
        finals.push(out.outcome.history.last().ok_or("no metrics")?.mean_kl);
    }
    ensure!(finals[0] >= finals[1] && finals[1] >= finals[2], "KL not monotone: {finals:?}");
    ensure!(finals[3] < 1e-2, "KL at alpha 10 is {}", finals[3]);
    Ok(format!("final KL {:.4} / {:.4} / {:.4}; {:.4} at alpha 10", finals[0], finals[1], finals[2], finals[3]))
}

fn reward_shape() -> Check {
    let noisy = {
        let mut t = toy_at(0.4, &[[0.0, 0.0], [1.0, -1.0]]);
        let disp = t.env.dynamics.displacement.clone();
        t.env = SimEnvironment::new(SimDynamicsConfig::new(disp, 0.2, 9));
        t
    };
    let mut checked = 0;
    for (toy, horizon, gamma) in [(toy(0.5), 3, 1.0), (noisy, 5, 0.9), (toy(1.0), 1, 1.0)] {
        let ep = EpisodeConfig {
            horizon,
            gamma,
            ..Default::default()
        };
        let pool = WorkerPool::new(2).map_err(|e| e.to_string())?;
        let ctx = RolloutContext {
            env: &toy.env,
            anchors: &toy.anchors,
            actions: &toy.actions,
            reward: &toy.reward,
            episode: &ep,
            pool: &pool,
        };
        let mut params = PolicyParams::zeros(FeatureSpec::default(), 2);
        params.weights.iter_mut().enumerate().for_each(|(i, w)| *w = (i as f64 * 0.37).sin());
        let agent = SoftmaxAgent {
            params: &params,
            temperature: 0.5,
        };
        let batch = collect_rollouts(&agent, &ctx, None, 64, 5, 0).map_err(|e| e.to_string())?;
        for tr in &batch.trajectories {
            let anchor = tr.transitions[0].state.id;
            let r = tr.rewards();
            ensure!(r.len() == horizon, "horizon {}", r.len());
            ensure!(r[..horizon - 1].iter().all(|&x| x == 0.0), "nonzero intermediate reward {r:?}");
            let u = toy.reward.terminal_utility(anchor, &tr.terminal().unwrap().embedding).unwrap();
            ensure!(r[horizon - 1] == u, "terminal reward {} vs utility {u}", r[horizon - 1]);
            ensure!(tr.return_ == gamma.powi(horizon as i32 - 1) * u, "return {}", tr.return_);
            checked += 1;
        }
    }
    Ok(format!("{checked} trajectories"))
}

fn prompt_round_trip() -> Check {
    const WORDS: &[&str] = &["heist", "{{ plot }}", "débâcle", "- bullet", "#", "END", "\t", "50%", "a\"q", "rain"];
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let text = |rng: &mut ChaCha8Rng| {
        let n = rng.random_range(1..30);
        (0..n)
            .map(|_| WORDS[rng.random_range(0..WORDS.len())])
            .collect::<Vec<_>>()
            .join(if rng.random_bool(0.3) { "\n" } else { " " })
    };
    for case in 0..50 {
        let d = Description {
            plot: text(&mut rng),
            reasons_to_like: text(&mut rng),
            reasons_to_dislike: text(&mut rng),
        };
        let action = text(&mut rng);
        let state = Entity::with_embedding(1, d.to_text(), EmbeddingVector::zeros(2));
        let prompt = render_env_prompt(&state, &action).map_err(|e| e.to_string())?;
        ensure!(parse_delimited(&prompt).map_err(|e| e.to_string())? == d, "case {case} did not round trip");
    }
    let golden_path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/env_prompt.golden.txt");
    let golden = std::fs::read(&golden_path).map_err(|e| e.to_string())?;
    let d = Description {
        plot: "A retired safecracker is pulled into one last job in a rain-soaked port city.\nThe crew is small and nobody trusts anybody.".into(),
        reasons_to_like: "- tight, clever plotting\n- a charismatic ensemble".into(),
        reasons_to_dislike: "- a slow first act\n- a predictable double-cross".into(),
    };
    let state = Entity::with_embedding(7, d.to_text(), EmbeddingVector::zeros(4));
    let rendered = render_env_prompt(&state, "Make the safecracker a teenager.").map_err(|e| e.to_string())?;
    ensure!(rendered.as_bytes() == golden.as_slice(), "golden file differs");
    Ok(format!("50 fixtures; golden file {} bytes", golden.len()))
}

fn run_once(dir: &Path) -> Result<(), String> {
    let t = toy(TOY_RADIUS);
    let mut cfg = toy_pipeline(0.1, 4);
    cfg.train.training_steps = 120;
    cfg.train.eval_interval = 40;
    let out = train_toy(&t, &cfg)?;
    save_state(&out.outcome.policy, &dir.join("policy.bin"), "h").map_err(|e| e.to_string())?;
    save_state(&out.outcome.value, &dir.join("value.bin"), "h").map_err(|e| e.to_string())?;
    save_state(&out.reference, &dir.join("reference.bin"), "h").map_err(|e| e.to_string())?;
    let pool = WorkerPool::new(4).map_err(|e| e.to_string())?;
    let ctx = RolloutContext {
        env: &t.env,
        anchors: &t.anchors,
        actions: &out.actions,
        reward: &t.reward,
        episode: &cfg.episode,
        pool: &pool,
    };
    let agent = SoftmaxAgent {
        params: &out.outcome.policy,
        temperature: cfg.episode.agent_temperature,
    };
    let user = v(&[1.0, 0.0]);
    let settings = EvalSettings {
        episodes: 64,
        seed: 2,
        user: &user,
        bucket_threshold: 3.5,
    };
    let report = run_eval(&agent, &[&out.reference], &ctx, &settings).map_err(|e| e.to_string())?;
    let write = |name: &str, bytes: Vec<u8>| std::fs::write(dir.join(name), bytes).map_err(|e| e.to_string());
    write("eval_report.json", serde_json::to_vec_pretty(&report).unwrap())?;
    write("metrics.json", serde_json::to_vec(&out.outcome.history).unwrap())?;
    Ok(())
}

fn determinism() -> Check {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_once(a.path())?;
    run_once(b.path())?;
    let mut names: Vec<_> = std::fs::read_dir(a.path())
        .unwrap()
        .map(|e| e.unwrap().file_name())
        .collect();
    names.sort();
    ensure!(names.len() >= 8, "only {} artifacts", names.len());
    for name in &names {
        let (x, y) = (std::fs::read(a.path().join(name)).unwrap(), std::fs::read(b.path().join(name)).unwrap());
        ensure!(x == y, "{name:?} differs between runs");
    }
    Ok(format!("{} artifacts byte-identical", names.len()))
}

struct Constant(EmbeddingVector);

impl Encoder for Constant {
    fn dim(&self) -> usize {
        self.0.dim()
    }

    fn encode(&self, _text: &str) -> Result<EmbeddingVector, EncodeError> {
        Ok(self.0.clone())
    }
}

fn encoder_check_fixtures() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let catalog = EmbeddingCatalog::from_items(
        3,
        (0..30u64).map(|i| (i, v(&(0..3).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<_>>()))),
    )
    .unwrap();
    let profiles: Vec<(String, EmbeddingVector)> =
        catalog.items().iter().map(|(id, z)| (format!("profile of {id}"), z.clone())).collect();
    let mut close = LookupEncoder::new(3);
    for (text, z) in &profiles {
        let jitter: Vec<f64> = z.as_slice().iter().map(|x| x + rng.random_range(-0.01..0.01)).collect();
        close.insert(text.clone(), v(&jitter)).unwrap();
    }
    let pass = encoder_consistency_check(&profiles, &close, &catalog).map_err(|e| e.to_string())?;
    ensure!(pass.passed, "near-exact encoder failed: {pass:?}");
    let fail = encoder_consistency_check(&profiles, &Constant(v(&[0.0, 0.0, 0.0])), &catalog)
        .map_err(|e| e.to_string())?;
    ensure!(!fail.passed, "constant encoder passed: {fail:?}");
    ensure!(pass.mean_nn_gap == fail.mean_nn_gap, "gap depends on the encoder");
    Ok(format!(
        "pass {:.4} < {:.4}; fail {:.4} >= {:.4}",
        pass.mean_holdout_error, pass.mean_nn_gap, fail.mean_holdout_error, fail.mean_nn_gap
    ))
}

fn main() {
    let criteria: [Criterion; 11] = [
        ("WALS recovery", wals_recovery),
        ("G-optimal design soundness", design_soundness),
        ("trace identity", trace_identity),
        ("GAE identities", gae_identities),
        ("gradient correctness", gradient_check),
        ("end-to-end steering", end_to_end_steering),
        ("KL control", kl_control),
        ("reward shape", reward_shape),
        ("prompt round trip", prompt_round_trip),
        ("determinism", determinism),
        ("encoder consistency", encoder_check_fixtures),
    ];
    // Criteria report through their return value; keep panics quiet.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().unwrap_or_else(|| "panicked".into()))
        });
        let elapsed = start.elapsed();
        match outcome {
            Ok(detail) => println!("criterion {:>2} {name}: PASS ({detail}) [{elapsed:.2?}]", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {:>2} {name}: FAIL ({why}) [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("{} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
