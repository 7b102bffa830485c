//! Builders for throwaway workspaces: datasets, scripts and config files.

#![allow(dead_code)]

use std::path::PathBuf;

use clap::Parser;
use crossexam::backend::ScriptedBackend;
use crossexam::dataset::{claim_prompt, ClaimMode, GeneratedClaim, QueryFormat};
use crossexam::prompts::{builtin_catalog, PromptKey};
use crossexam::{QAItem, Style};
use crossexam_cli::commands::Command;
use crossexam_cli::Cli;
use serde_json::{json, Value};

pub struct Workspace {
    pub dir: tempfile::TempDir,
}

impl Workspace {
    pub fn new() -> Self {
        Self {
            dir: tempfile::tempdir().unwrap(),
        }
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn arg(&self, name: &str) -> String {
        self.path(name).to_string_lossy().into_owned()
    }

    pub fn write_json(&self, name: &str, value: &Value) -> PathBuf {
        let path = self.path(name);
        std::fs::write(&path, serde_json::to_string_pretty(value).unwrap()).unwrap();
        path
    }

    pub fn write_jsonl<T: serde::Serialize>(&self, name: &str, rows: &[T]) -> PathBuf {
        let path = self.path(name);
        crossexam::jsonl::write_all(&path, rows).unwrap();
        path
    }

    /// Writes `config.json` with one scripted backend per (name, script
    /// file) pair, optionally behind a cache cassette.
    pub fn config(&self, backends: &[(&str, &str)], cache: bool, exam: Value) -> PathBuf {
        let mut map = serde_json::Map::new();
        for (name, script) in backends {
            let mut b = json!({"kind": "scripted", "script": script});
            if cache {
                b["cassette"] = json!({"path": format!("{name}.cassette.jsonl"), "mode": "cache"});
            }
            map.insert(name.to_string(), b);
        }
        self.write_json("config.json", &json!({"backends": map, "exam": exam}))
    }

    /// Parses a command line, prefixing the binary name and `--config`.
    pub fn cli(&self, args: &[&str]) -> Cli {
        let config = self.arg("config.json");
        let mut argv = vec!["crossexam", "--config", config.as_str()];
        argv.extend_from_slice(args);
        Cli::try_parse_from(argv).unwrap()
    }
}

pub fn config_of(cli: &Cli) -> crossexam_cli::config::Config {
    crossexam_cli::config::Config::load(cli.config.as_deref().unwrap()).unwrap()
}

pub fn examine(ws: &Workspace, args: &[&str]) -> crossexam_cli::commands::ExamineSummary {
    try_examine(ws, args).unwrap()
}

pub fn try_examine(
    ws: &Workspace,
    args: &[&str],
) -> Result<crossexam_cli::commands::ExamineSummary, crossexam_cli::CliError> {
    let cli = ws.cli(args);
    match &cli.command {
        Command::Examine(a) => crossexam_cli::commands::examine(&config_of(&cli), a),
        other => panic!("not examine: {other:?}"),
    }
}

pub fn item(i: usize) -> QAItem {
    QAItem {
        id: format!("q{i}"),
        dataset: "capitals".into(),
        query: format!("What is the capital of land {i}?"),
        query_format: QueryFormat::Question,
        gold_answer: format!("Town{i}"),
        aliases: vec![],
    }
}

pub fn claim_text(i: usize) -> String {
    format!("The capital of land {i} is Town{i}.")
}

pub fn claim(i: usize) -> GeneratedClaim {
    GeneratedClaim {
        item_id: format!("q{i}"),
        text: claim_text(i),
        generator_backend: "examinee".into(),
        mode: ClaimMode::Truthful,
        prompt_used: String::new(),
        token_logprobs: None,
    }
}

pub fn question(i: usize) -> String {
    format!("Is Town{i} the seat of government of land {i}?")
}

/// Even items are judged correct, odd ones incorrect.
pub fn decision(i: usize) -> &'static str {
    if i.is_multiple_of(2) {
        "The claim is correct."
    } else {
        "The claim is incorrect."
    }
}

/// Examiner script for claims `0..n`: one question, then (with follow-ups)
/// a "No" to the probe, then the decision.
pub fn examiner_script(n: usize, followups: bool) -> Value {
    let dialogues: Vec<Value> = (0..n)
        .map(|i| {
            let mut replies = vec![json!(question(i))];
            if followups {
                replies.push(json!("No"));
            }
            replies.push(json!(decision(i)));
            json!({"key": claim_text(i), "replies": replies})
        })
        .collect();
    json!({"dialogues": dialogues})
}

pub fn examinee_script(n: usize) -> Value {
    let dialogues: Vec<Value> = (0..n)
        .map(|i| json!({"key": question(i), "replies": [format!("Yes, Town{i} is the capital.")]}))
        .collect();
    json!({"dialogues": dialogues})
}

/// Workspace with `n` claims and scripted examiner/examinee backends.
pub fn exam_workspace(n: usize, followups: bool, cache: bool) -> Workspace {
    let ws = Workspace::new();
    ws.write_json("examiner.json", &examiner_script(n, followups));
    ws.write_json("examinee.json", &examinee_script(n));
    ws.config(&[("examiner", "examiner.json"), ("examinee", "examinee.json")], cache, json!({}));
    let claims: Vec<GeneratedClaim> = (0..n).map(claim).collect();
    ws.write_jsonl("claims.jsonl", &claims);
    let items: Vec<QAItem> = (0..n).map(item).collect();
    ws.write_jsonl("dataset.jsonl", &items);
    ws
}

pub fn examine_args<'a>(ws: &'a Workspace, store: &'a str, extra: &[&'a str]) -> Vec<String> {
    let mut v: Vec<String> = vec![
        "examine".into(),
        "--claims".into(),
        ws.arg("claims.jsonl"),
        "--examiner".into(),
        "examiner".into(),
        "--examinee".into(),
        "examinee".into(),
        "--detector".into(),
        "lmvlm".into(),
        "--store".into(),
        ws.arg(store),
    ];
    v.extend(extra.iter().map(|s| s.to_string()));
    v
}

pub fn strs(v: &[String]) -> Vec<&str> {
    v.iter().map(String::as_str).collect()
}

/// The prompt `generate-claims` sends for `item` to a chat backend.
pub fn generation_prompt(item: &QAItem) -> String {
    let dummy = ScriptedBackend::sequence(["unused"]).unwrap();
    claim_prompt(item, &builtin_catalog(), &dummy).unwrap()
}

/// The prompt `falsehoods` sends for a question item to a chat backend.
pub fn falsehood_prompt(item: &QAItem) -> String {
    let catalog = builtin_catalog();
    format!(
        "{} {}",
        catalog
            .get(PromptKey::FalsehoodQuestion, Style::Chat)
            .unwrap()
            .render([("question", item.query.as_str())])
            .unwrap(),
        catalog.text(PromptKey::FalsehoodPhraseSuffix, Style::Chat).unwrap()
    )
}
