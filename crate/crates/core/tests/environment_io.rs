use std::collections::HashSet;
use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::path::Path;
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use eagle_core::design::ActionCandidate;
use eagle_core::embedding::EmbeddingVector;
use eagle_core::environment::{
    llm_step, parse_delimited, render_env_prompt, CompletionClient, CompletionRequest, CompletionResponse,
    Description, Encoder, EnvError, Entity, Environment, HashingEncoder, HttpCompletionClient, HttpSettings,
    LlmEnvironment, LlmStepConfig, RecordingClient, ReplayClient, RetryPolicy, ServiceError,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const WORDS: &[&str] = &[
    "heist", "dragon", "Paris", "{{ action }}", "#END", "débâcle", "quiet", "town", "- bullet", "  indent", "\t",
    "robot", "{{", "}}", "rain", "50%", "a\"quote", "ünïcödé", "#", "END_PLOT", "newline\n",
];

fn random_text(rng: &mut ChaCha8Rng) -> String {
    let words = rng.random_range(1..40);
    let mut out = String::new();
    for i in 0..words {
        if i > 0 {
            out.push(if rng.random_bool(0.2) { '\n' } else { ' ' });
        }
        out.push_str(WORDS[rng.random_range(0..WORDS.len())]);
    }
    // The template closes each block directly after the text, so one trailing
    // newline is indistinguishable from the block framing.
    while out.ends_with('\n') {
        out.pop();
    }
    out
}

fn random_description(rng: &mut ChaCha8Rng) -> Description {
    Description {
        plot: random_text(rng),
        reasons_to_like: random_text(rng),
        reasons_to_dislike: random_text(rng),
    }
}

fn state(d: &Description) -> Entity {
    Entity::with_embedding(7, d.to_text(), EmbeddingVector::zeros(4))
}

#[test]
fn rendered_prompts_parse_back_on_generated_fixtures() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let d = random_description(&mut rng);
        let action = random_text(&mut rng);
        let prompt = render_env_prompt(&state(&d), &action).unwrap();
        assert_eq!(parse_delimited(&prompt).unwrap(), d, "case {case}");
        assert!(prompt.matches(action.as_str()).count() >= 3, "case {case}");
        assert_eq!(parse_delimited(&d.to_text()).unwrap(), d, "case {case}");
    }
}

fn golden_fixture() -> (Entity, &'static str) {
    let d = Description {
        plot: "A retired safecracker is pulled into one last job in a rain-soaked port city.\nThe crew is small and nobody trusts anybody.".into(),
        reasons_to_like: "- tight, clever plotting\n- a charismatic ensemble".into(),
        reasons_to_dislike: "- a slow first act\n- a predictable double-cross".into(),
    };
    (state(&d), "Make the safecracker a teenager.")
}

#[test]
fn env_prompt_matches_golden_file() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/env_prompt.golden.txt");
    let (s, action) = golden_fixture();
    let rendered = render_env_prompt(&s, action).unwrap();
    if std::env::var_os("EAGLE_BLESS").is_some() {
        std::fs::write(&path, &rendered).unwrap();
    }
    let golden = std::fs::read(&path).expect("golden file present; regenerate with EAGLE_BLESS=1");
    assert_eq!(rendered.as_bytes(), golden.as_slice());
}

#[test]
fn hashing_encoder_has_no_collisions_on_a_corpus() {
    let enc = HashingEncoder::new(16, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let mut texts = HashSet::new();
    while texts.len() < 1000 {
        let n = rng.random_range(1..12);
        let t: Vec<String> = (0..n).map(|_| format!("w{}", rng.random_range(0..500))).collect();
        texts.insert(t.join(" "));
    }
    let mut seen = HashSet::new();
    for t in &texts {
        let z = enc.encode(t).unwrap();
        assert_eq!(z.dim(), 16);
        assert_eq!(enc.encode(t).unwrap(), z);
        let bits: Vec<u64> = z.as_slice().iter().map(|x| x.to_bits()).collect();
        assert!(seen.insert(bits), "collision on {t:?}");
    }
    // Whitespace-only differences tokenize the same.
    assert_eq!(enc.encode("a  b\n").unwrap(), enc.encode("a b").unwrap());
}

/// Answers every prompt with a fixed, well-formed description whose plot
/// names the requested change.
struct EchoStub;

impl CompletionClient for EchoStub {
    fn complete(&self, request: &CompletionRequest) -> Result<CompletionResponse, ServiceError> {
        let change = request.prompt.lines().nth(1).unwrap_or_default();
        Ok(CompletionResponse {
            text: format!("the plot, after: {change}\n#END_PLOT\n\n#BEGIN_REASONS_TO_LIKE\n- new\n#END_REASONS_TO_LIKE\n\n#BEGIN_REASONS_TO_DISLIKE\n- old\n#END_REASONS_TO_DISLIKE\n"),
        })
    }
}

struct Garbage;

impl CompletionClient for Garbage {
    fn complete(&self, _: &CompletionRequest) -> Result<CompletionResponse, ServiceError> {
        Ok(CompletionResponse {
            text: "I cannot help with that.".into(),
        })
    }
}

fn step_cfg() -> LlmStepConfig {
    LlmStepConfig {
        retry: RetryPolicy::no_delay(2),
        ..Default::default()
    }
}

#[test]
fn stub_step_encodes_the_new_description() {
    let (s, _) = golden_fixture();
    let before = s.clone();
    let action = ActionCandidate::new(3, "Set it on the moon", EmbeddingVector::zeros(4));
    let enc = HashingEncoder::new(4, 0);
    let next = llm_step(&s, &action, &EchoStub, &enc, &step_cfg()).unwrap();
    assert_eq!(s, before);
    assert_eq!(next.id, s.id);
    let d = parse_delimited(&next.text).unwrap();
    assert_eq!(d.plot, "the plot, after: Set it on the moon");
    assert_eq!(d.reasons_to_like, "- new");
    assert_eq!(next.embedding, enc.encode(&next.text).unwrap());

    match llm_step(&s, &action, &Garbage, &enc, &step_cfg()).unwrap_err() {
        EnvError::Parse { raw, .. } => assert_eq!(raw, "I cannot help with that."),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn recorded_transcript_replays_identical_entities() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("transcript.jsonl");
    let (s, _) = golden_fixture();
    let actions: Vec<_> = ["Add a twin", "Make it a musical", "Add a twin"]
        .iter()
        .enumerate()
        .map(|(i, t)| ActionCandidate::new(i as u64, *t, EmbeddingVector::zeros(4)))
        .collect();
    let enc: Arc<dyn Encoder> = Arc::new(HashingEncoder::new(4, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let live = LlmEnvironment::new(Arc::new(RecordingClient::to_file(EchoStub, &path).unwrap()), enc.clone(), step_cfg());
    let recorded: Vec<Entity> = actions.iter().map(|a| live.step(&s, a, &mut rng).unwrap()).collect();
    drop(live);

    let replay = LlmEnvironment::new(Arc::new(ReplayClient::from_file(&path).unwrap()), enc, step_cfg());
    let replayed: Vec<Entity> = actions.iter().map(|a| replay.step(&s, a, &mut rng).unwrap()).collect();
    assert_eq!(recorded, replayed);
    // The transcript is exhausted.
    assert!(matches!(replay.step(&s, &actions[0], &mut rng), Err(EnvError::Service(_))));
}

struct Captured {
    authorization: Option<String>,
    body: String,
}

/// Serves one connection per scripted status code, answering 2xx with `body`.
fn scripted_server(statuses: Vec<u16>, body: &'static str) -> (String, Arc<Mutex<Vec<Captured>>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = format!("http://{}/v1/complete", listener.local_addr().unwrap());
    let log = Arc::new(Mutex::new(Vec::new()));
    let sink = log.clone();
    thread::spawn(move || {
        for status in statuses {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let (mut len, mut authorization) = (0usize, None);
            loop {
                let mut line = String::new();
                reader.read_line(&mut line).unwrap();
                let line = line.trim_end();
                if line.is_empty() {
                    break;
                }
                if let Some((k, v)) = line.split_once(':') {
                    match k.to_ascii_lowercase().as_str() {
                        "content-length" => len = v.trim().parse().unwrap(),
                        "authorization" => authorization = Some(v.trim().to_string()),
                        _ => {}
                    }
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            sink.lock().unwrap().push(Captured {
                authorization,
                body: String::from_utf8(buf).unwrap(),
            });
            let payload = if status < 300 { body } else { "{}" };
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{payload}",
                payload.len()
            )
            .unwrap();
        }
    });
    (addr, log)
}

const OK_BODY: &str = r##"{"text":"#BEGIN_PLOT\nnew plot\n#END_PLOT\n#BEGIN_REASONS_TO_LIKE\nx\n#END_REASONS_TO_LIKE\n#BEGIN_REASONS_TO_DISLIKE\ny\n#END_REASONS_TO_DISLIKE"}"##;

#[test]
fn http_client_retries_transient_statuses_and_sends_bearer() {
    let (addr, log) = scripted_server(vec![503, 429, 200], OK_BODY);
    let client = HttpCompletionClient::new(HttpSettings::new(addr, Some("sekret".into()), Duration::from_secs(10)));
    let (s, action_text) = golden_fixture();
    let action = ActionCandidate::new(0, action_text, EmbeddingVector::zeros(4));
    let next = llm_step(&s, &action, &client, &HashingEncoder::new(4, 0), &step_cfg()).unwrap();
    assert_eq!(parse_delimited(&next.text).unwrap().plot, "new plot");

    let log = log.lock().unwrap();
    assert_eq!(log.len(), 3);
    for c in log.iter() {
        assert_eq!(c.authorization.as_deref(), Some("Bearer sekret"));
        let req: serde_json::Value = serde_json::from_str(&c.body).unwrap();
        assert_eq!(req["temperature"], 0.5);
        assert_eq!(req["max_tokens"], 1024);
        assert_eq!(req["prompt"].as_str().unwrap(), render_env_prompt(&s, action_text).unwrap());
    }
}

#[test]
fn http_client_gives_up_on_client_errors() {
    let (addr, log) = scripted_server(vec![400], OK_BODY);
    let client = HttpCompletionClient::new(HttpSettings::new(addr, None, Duration::from_secs(10)));
    let (s, action_text) = golden_fixture();
    let action = ActionCandidate::new(0, action_text, EmbeddingVector::zeros(4));
    let err = llm_step(&s, &action, &client, &HashingEncoder::new(4, 0), &step_cfg()).unwrap_err();
    assert!(!err.is_transient(), "{err:?}");
    let log = log.lock().unwrap();
    assert_eq!(log.len(), 1);
    assert_eq!(log[0].authorization, None);
}
