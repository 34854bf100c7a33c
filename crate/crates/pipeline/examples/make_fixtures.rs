//! Regenerates the committed fixtures under `fixtures/`:
//!
//! ```text
//! cargo run -p empathic --example make_fixtures -- fixtures
//! ```
//!
//! Output is deterministic apart from recording timestamps and latencies.
//! LLM recordings come from a scripted provider run in record mode; scorer
//! fixtures are rule-based stand-ins for the pretrained classifiers.

use std::collections::{BTreeMap, HashMap};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use anyhow::{Context, Result};
use empathic::config::{ExperimentConfig, Stage};
use empathic::harness::{run_experiment, RunLayout, Services};
use empathic::io;
use empathic::knowledge::FixtureRecord;
use empathic::llm::{ChatRequest, Mode, ScriptedProvider};
use empathic::records::GenerationRecord;
use empathic::scoring::{EmotionFixtureRecord, EpitomeFixtureRecord};
use empathic::synth::{self, Side};
use empathic::transport::{OfflineTransport, RetryPolicy};
use empathic_core::knowledge::Relation;
use empathic_core::prompting::format_reply;
use serde::Serialize;

const CORPUS_SIZE: usize = 300;
const CORPUS_SEED: u64 = 7;
const KNOWLEDGE_BACKEND: &str = "comet-synth-v1";

fn experiment_toml(id: &str, method: &str, scorer_suffix: &str) -> String {
    format!(
        r#"id = "{id}"
method = "{method}"
seed = 13
mode = "replay"
max_parallel = 4
k = 2

[data]
corpus = "../corpus/smoke.jsonl"
emotions = "../corpus/emotions.txt"
ratios = "8:1:1"
sample_mode = "single_turn"
samples = 20

[knowledge]
backend = {{ kind = "fixture", path = "../knowledge/smoke_comet.jsonl" }}

[embedding]
backend = {{ kind = "hashing", dim = 256 }}
field = "situation"

[llm]
model = "gpt-3.5-turbo"
temperature = 0.0
recordings = "../recordings/smoke_gpt35.jsonl"

[evaluate]
metrics = ["f1", "bleu", "distinct", "bertscore", "emoacc", "epitome", "coherence"]
bertscore = {{ kind = "hashing", dim = 64 }}
emotion = {{ kind = "fixture", id = "emo-rules-v1", path = "../scorers/emoacc_{scorer_suffix}.jsonl" }}
epitome = {{ kind = "fixture", id = "epitome-rules-v1", path = "../scorers/epitome_{scorer_suffix}.jsonl" }}
"#
    )
}

fn label_of_prompt(req: &ChatRequest, labels: &HashMap<String, &'static str>) -> (&'static str, String) {
    let text = req.messages.last().map(|m| m.content.as_str()).unwrap_or_default();
    let tail = text
        .lines()
        .rev()
        .find_map(|l| l.strip_prefix("user: "))
        .unwrap_or_default()
        .trim()
        .to_string();
    let label = labels.get(&tail).copied().unwrap_or("afraid");
    (label, tail)
}

fn scripted(labels: HashMap<String, &'static str>) -> ScriptedProvider {
    ScriptedProvider::new("scripted-v1", move |req| {
        let (label, tail) = label_of_prompt(req, &labels);
        let variant = tail.len();
        let response = synth::reply(label, variant);
        let causal = req.messages.iter().any(|m| m.content.contains("sys's intent:"));
        if causal {
            let (intent, reacts) = synth::sys_side(label);
            let rot = variant % intent.len();
            let intent: Vec<String> = intent[rot..].iter().chain(&intent[..rot]).cloned().collect();
            format_reply(&intent, &reacts, &response)
        } else {
            format!("sys: {response}")
        }
    })
}

fn write_knowledge(out: &Path, corpus: &synth::SynthCorpus) -> Result<usize> {
    let mut records: BTreeMap<String, FixtureRecord> = BTreeMap::new();
    for o in &corpus.origins {
        let relations = match o.side {
            Side::User => [Relation::XWant, Relation::XReact],
            Side::Sys => [Relation::XIntent, Relation::XReact],
        };
        for r in relations {
            let rec = FixtureRecord::new(&o.text, r, synth::phrases(o, r), KNOWLEDGE_BACKEND);
            records.entry(rec.key.clone()).or_insert(rec);
        }
    }
    let list: Vec<FixtureRecord> = records.into_values().collect();
    io::write_jsonl(&out.join("knowledge/smoke_comet.jsonl"), &list)?;
    Ok(list.len())
}

const EMOTION_WORDS: &[&str] = &[
    "scary", "scared", "frightening", "sorry", "glad", "proud", "happy", "sad", "awful", "terrible", "great",
    "amazing", "congratulations",
];

fn epitome_for(response: &str) -> (i64, i64, i64) {
    let lower = response.to_lowercase();
    let er = EMOTION_WORDS.iter().filter(|w| lower.contains(*w)).count().min(2) as i64;
    let ex = if response.contains('?') {
        if lower.contains("what") || lower.contains("how") || lower.contains("did you") {
            2
        } else {
            1
        }
    } else {
        0
    };
    let ip = if lower.contains("i would") || lower.contains("sounds") || lower.contains("i know") {
        2
    } else if lower.contains("that is") || lower.contains("that's") {
        1
    } else {
        0
    };
    (ip, ex, er)
}

fn write_scorers(out: &Path, suffix: &str, gens: &[GenerationRecord], labels: &[&str]) -> Result<()> {
    let emo: Vec<EmotionFixtureRecord> = gens
        .iter()
        .enumerate()
        .map(|(i, g)| {
            let predicted = if i % 4 == 0 {
                g.emotion.clone()
            } else {
                let j = labels.iter().position(|l| *l == g.emotion).unwrap_or(0);
                labels[(j + i) % labels.len()].to_string()
            };
            EmotionFixtureRecord {
                sample_id: g.sample_id.clone(),
                response: Some(g.response.clone()),
                predicted,
            }
        })
        .collect();
    io::write_jsonl(&out.join(format!("scorers/emoacc_{suffix}.jsonl")), &emo)?;
    let epi: Vec<EpitomeFixtureRecord> = gens
        .iter()
        .map(|g| {
            let (ip, ex, er) = epitome_for(&g.response);
            EpitomeFixtureRecord {
                sample_id: g.sample_id.clone(),
                response: Some(g.response.clone()),
                ip,
                ex,
                er,
            }
        })
        .collect();
    io::write_jsonl(&out.join(format!("scorers/epitome_{suffix}.jsonl")), &epi)?;
    Ok(())
}

#[derive(Serialize)]
struct ParserCase {
    id: String,
    style: &'static str,
    raw: String,
    response: String,
    intent: Vec<String>,
    reacts: Vec<String>,
}

fn parser_cases(recorded: &[String]) -> Vec<ParserCase> {
    let mut out = Vec::new();
    let mut n = 0;
    let mut push = |style: &'static str, raw: String, response: &str, intent: &[String], reacts: &[String]| {
        n += 1;
        out.push(ParserCase {
            id: format!("reply-{n:03}"),
            style,
            raw,
            response: response.to_string(),
            intent: intent.to_vec(),
            reacts: reacts.to_vec(),
        });
    };
    for (i, label) in synth::labels().into_iter().enumerate() {
        let (intent, reacts) = synth::sys_side(label);
        let intent = &intent[..2];
        let reacts = &reacts[..2];
        let resp = synth::reply(label, i);
        let (i0, i1, r0, r1) = (&intent[0], &intent[1], &reacts[0], &reacts[1]);
        push("canonical", format_reply(intent, reacts, &resp), &resp, intent, reacts);
        push(
            "markdown",
            format!("**sys's intent:** {i0}; {i1}\n**sys reacts to:** {r0}; {r1}\n**sys:** {resp}"),
            &resp,
            intent,
            reacts,
        );
        push(
            "prose-wrapped",
            format!(
                "Sure, here is my answer.\n\nsys's intent: {i0}. {i1}.\nsys reacts to: {r0}. {r1}.\nsys: {resp}\n\nLet me know if you need anything else."
            ),
            &resp,
            intent,
            reacts,
        );
        push(
            "reordered-capitalized",
            format!("Sys reacts to: {r0}; {r1}\nSYS'S INTENT: {i0}; {i1}\nSys: {resp}"),
            &resp,
            intent,
            reacts,
        );
        push(
            "curly-apostrophe",
            format!("sys\u{2019}s intent: {i0}; {i1}\nsys reacts to: {r0}; {r1}\nsys: {resp}"),
            &resp,
            intent,
            reacts,
        );
        push(
            "quoted-labels",
            format!("\"sys's intent\": {i0}; {i1}\n\"sys reacts to\": {r0}; {r1}\n\"sys\": {resp}"),
            &resp,
            intent,
            reacts,
        );
        let words: Vec<&str> = resp.split_whitespace().collect();
        let mid = words.len() / 2;
        push(
            "wrapped-response",
            format!(
                "sys's intent: {i0}; {i1}\nsys reacts to: {r0}; {r1}\nsys: {}\n{}",
                words[..mid].join(" "),
                words[mid..].join(" ")
            ),
            &resp,
            intent,
            reacts,
        );
        push(
            "label-synonyms",
            format!("sys's intentions: {i0}; {i1}\nsys's reaction: {r0}; {r1}\n\nsys: {resp}"),
            &resp,
            intent,
            reacts,
        );
    }
    for raw in recorded {
        if raw.contains("sys's intent:") {
            let p = empathic_core::prompting::parse_reasoned(raw).expect("recorded replies are well formed");
            push("recorded", raw.clone(), &p.response, &p.sys_intent, &p.sys_react);
        }
    }
    out
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let out = PathBuf::from(std::env::args().nth(1).unwrap_or_else(|| "fixtures".into()));
    let corpus = synth::corpus(CORPUS_SIZE, CORPUS_SEED, "smoke");
    io::write_jsonl(&out.join("corpus/smoke.jsonl"), &corpus.conversations)?;
    let n = write_knowledge(&out, &corpus)?;
    println!("knowledge fixture: {n} records");

    let experiments = [
        ("smoke-chatgpt-causality", "chatgpt_causality", "causality"),
        ("smoke-chatgpt-baseline", "chatgpt_baseline", "baseline"),
    ];
    for (id, method, suffix) in experiments {
        io::atomic_write(
            &out.join(format!("experiments/{suffix}.toml")),
            experiment_toml(id, method, suffix).as_bytes(),
        )?;
    }

    let recordings = out.join("recordings/smoke_gpt35.jsonl");
    if recordings.exists() {
        std::fs::remove_file(&recordings).context("clearing old recordings")?;
    }
    let labels: HashMap<String, &'static str> = corpus
        .origins
        .iter()
        .filter(|o| o.side == Side::User)
        .map(|o| (o.text.clone(), o.label))
        .collect();
    let provider = Arc::new(scripted(labels));
    let services = Services {
        transport: Arc::new(OfflineTransport),
        provider: Some(provider.clone()),
        retry: RetryPolicy::default(),
    };
    let scratch = tempfile::tempdir()?;
    let all_labels = synth::labels();
    for (_, _, suffix) in experiments {
        let path = out.join(format!("experiments/{suffix}.toml"));
        let mut cfg = ExperimentConfig::load(&path)?;
        cfg.mode = Mode::Record;
        cfg.stages.retain(|s| *s != Stage::Evaluate);
        cfg.evaluate = Default::default();
        let run = run_experiment(&cfg, &services, Some(scratch.path()))?;
        let gens: Vec<GenerationRecord> = io::read_jsonl(&RunLayout::new(&run.run_dir).generations())?;
        write_scorers(&out, suffix, &gens, &all_labels)?;
        println!("{suffix}: {} generations", gens.len());
    }
    println!("scripted provider answered {} requests", provider.calls());

    let recorded: Vec<String> = io::read_jsonl::<serde_json::Value>(&recordings)?
        .iter()
        .filter_map(|v| v.get("reply").and_then(|r| r.as_str()).map(str::to_string))
        .collect();
    let cases = parser_cases(&recorded);
    io::write_jsonl(&out.join("parser/replies.jsonl"), &cases)?;
    println!("parser corpus: {} replies", cases.len());
    Ok(())
}
