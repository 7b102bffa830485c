mod common;

use std::collections::BTreeMap;
use std::io::Write;

use common::*;
use crossexam::dataset::{ClaimMode, GeneratedClaim};
use crossexam::evaluation::{emit_report, ReportFormat};
use crossexam::exam::TurnKind;
use crossexam::{GoldLabel, QAItem, Verdict};
use crossexam_cli::commands::{
    evaluate, falsehoods, generate_claims, replay, stats, sidecar, Command, GenerationSummary, LabelEntry,
};
use crossexam_cli::store::{StoredRecord, TranscriptStore, RECORDS_FILE, STORE_SCHEMA_VERSION, TRANSCRIPTS_FILE};
use crossexam_cli::CliError;
use serde_json::json;

fn generation_workspace(n: usize, reply: impl Fn(&QAItem) -> String, falsehood: bool) -> Workspace {
    let ws = Workspace::new();
    let items: Vec<QAItem> = (0..n).map(item).collect();
    ws.write_jsonl("dataset.jsonl", &items);
    let map: serde_json::Map<String, serde_json::Value> = items
        .iter()
        .map(|it| {
            let prompt = if falsehood { falsehood_prompt(it) } else { generation_prompt(it) };
            (prompt, json!(reply(it)))
        })
        .collect();
    ws.write_json("gen.json", &json!({ "map": map }));
    ws.config(&[("examinee", "gen.json")], false, json!({}));
    ws
}

fn run_generation(ws: &Workspace, sub: &str, extra: &[&str]) -> Result<GenerationSummary, CliError> {
    let dataset = ws.arg("dataset.jsonl");
    let out = ws.arg("claims.jsonl");
    let mut args = vec![sub, "--dataset", &dataset, "--examinee", "examinee", "--out", &out];
    args.extend_from_slice(extra);
    let cli = ws.cli(&args);
    let config = config_of(&cli);
    match &cli.command {
        Command::GenerateClaims(a) => generate_claims(&config, a),
        Command::Falsehoods(a) => falsehoods(&config, a),
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn generate_claims_writes_one_claim_per_item_and_resumes() {
    let ws = generation_workspace(5, |it| format!("The capital is {}.", it.gold_answer), false);
    let s = run_generation(&ws, "generate-claims", &["--seed", "1"]).unwrap();
    assert_eq!(s.counts.completed, 5);
    assert_eq!(s.counts.cached, 0);
    let claims: Vec<GeneratedClaim> = crossexam::jsonl::read_all(&ws.path("claims.jsonl")).unwrap();
    assert_eq!(claims.len(), 5);
    assert!(claims.iter().all(|c| c.mode == ClaimMode::Truthful && c.generator_backend == "examinee"));

    let again = run_generation(&ws, "generate-claims", &["--seed", "1"]).unwrap();
    assert_eq!(again.counts.cached, 5);
    assert_eq!(again.counts.completed, 0);
    assert_eq!(again.backend_calls, 0);

    match run_generation(&ws, "generate-claims", &["--seed", "2"]) {
        Err(CliError::RunMismatch(msg)) => assert!(msg.contains("seed"), "{msg}"),
        other => panic!("expected a run mismatch, got {other:?}"),
    }
}

#[test]
fn generate_claims_samples_n_items() {
    let ws = generation_workspace(8, |it| format!("It is {}.", it.gold_answer), false);
    let s = run_generation(&ws, "generate-claims", &["--n", "3", "--seed", "4"]).unwrap();
    assert_eq!(s.counts.completed, 3);
    assert!(sidecar(&ws.path("claims.jsonl"), ".manifest.json").exists());
}

#[test]
fn generate_claims_resumes_after_torn_line() {
    let ws = generation_workspace(4, |it| format!("It is {}.", it.gold_answer), false);
    run_generation(&ws, "generate-claims", &[]).unwrap();
    let path = ws.path("claims.jsonl");
    let text = std::fs::read_to_string(&path).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    let last = lines.pop().unwrap();
    std::fs::write(&path, format!("{}\n{}", lines.join("\n"), &last[..last.len() / 2])).unwrap();
    let s = run_generation(&ws, "generate-claims", &[]).unwrap();
    assert_eq!((s.counts.completed, s.counts.cached), (1, 3));
    let claims: Vec<GeneratedClaim> = crossexam::jsonl::read_all(&path).unwrap();
    assert_eq!(claims.len(), 4);
}

#[test]
fn falsehoods_keep_wrong_answers_and_discard_echoes() {
    let ws = generation_workspace(6, |_| "It is Atlantis.".to_string(), true);
    let s = run_generation(&ws, "falsehoods", &[]).unwrap();
    assert_eq!((s.kept(), s.discarded, s.attempted), (6, 0, 6));

    let ws = generation_workspace(6, |it| format!("It is {}.", it.gold_answer), true);
    let s = run_generation(&ws, "falsehoods", &[]).unwrap();
    assert_eq!((s.kept(), s.discarded, s.attempted), (0, 6, 6));
    assert!(crossexam::jsonl::read_all_or_empty::<GeneratedClaim>(&ws.path("claims.jsonl"))
        .unwrap()
        .is_empty());

    let ws = generation_workspace(
        7,
        |it| {
            if it.id.ends_with(['0', '2', '4', '6']) {
                "It is Atlantis.".to_string()
            } else {
                format!("Surely {}.", it.gold_answer)
            }
        },
        true,
    );
    let s = run_generation(&ws, "falsehoods", &[]).unwrap();
    assert_eq!(s.kept() + s.discarded, s.attempted);
    assert_eq!((s.kept(), s.discarded), (4, 3));
    let claims: Vec<GeneratedClaim> = crossexam::jsonl::read_all(&ws.path("claims.jsonl")).unwrap();
    assert!(claims.iter().all(|c| c.mode == ClaimMode::Falsehood));

    let again = run_generation(&ws, "falsehoods", &[]).unwrap();
    assert_eq!((again.attempted, again.counts.cached), (0, 7));
}

/// Item id, verdict, metadata and rendered transcripts of one record.
type Content = (String, Option<Verdict>, BTreeMap<String, String>, Vec<String>);

fn sorted_content(store: &std::path::Path) -> Vec<Content> {
    let store = TranscriptStore::open(store).unwrap();
    let records = store.committed().unwrap();
    let mut out: Vec<_> = records
        .iter()
        .map(|r| {
            let ts = store
                .transcripts_for(std::slice::from_ref(r))
                .unwrap()
                .into_iter()
                .map(|t| serde_json::to_string(&t.transcript).unwrap())
                .collect();
            (r.item_id.clone(), r.verdict, r.metadata.clone(), ts)
        })
        .collect();
    out.sort_by(|a, b| a.0.cmp(&b.0));
    out
}

#[test]
fn examine_writes_one_record_and_transcript_per_claim() {
    let ws = exam_workspace(3, true, false);
    let s = examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    assert!(s.failures.is_empty(), "{:?}", s.failures);
    assert_eq!(s.counts.completed, 3);
    assert!(s.failures.is_empty());
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    let records = store.records().unwrap();
    assert_eq!(records.len(), 3);
    assert_eq!(store.transcripts_for(&records).unwrap().len(), 3);
    let verdicts: BTreeMap<String, Verdict> = records.iter().map(|r| (r.item_id.clone(), r.verdict.unwrap())).collect();
    assert_eq!(verdicts["q0"], Verdict::Accept);
    assert_eq!(verdicts["q1"], Verdict::Reject);
    let manifests = store.manifests().unwrap();
    assert_eq!(manifests.len(), 1);
    assert_eq!(manifests[0].counts.completed, 3);
    assert_eq!(manifests[0].detector.as_deref(), Some("lmvlm"));
}

#[test]
fn examine_result_is_independent_of_jobs() {
    let ws = exam_workspace(8, true, false);
    examine(&ws, &strs(&examine_args(&ws, "one", &["--jobs", "1"])));
    examine(&ws, &strs(&examine_args(&ws, "four", &["--jobs", "4"])));
    let a = sorted_content(&ws.path("one"));
    assert_eq!(a.len(), 8);
    assert_eq!(a, sorted_content(&ws.path("four")));
}

#[test]
fn cached_second_run_makes_no_backend_calls() {
    let ws = exam_workspace(3, true, true);
    let first = examine(&ws, &strs(&examine_args(&ws, "a", &[])));
    assert_eq!(first.backend_calls, 3 * 4);
    let second = examine(&ws, &strs(&examine_args(&ws, "b", &["--max-backend-calls", "0"])));
    assert_eq!(second.backend_calls, 0);
    assert!(!second.budget_exhausted);
    assert_eq!(second.counts.completed, 3);
    assert_eq!(sorted_content(&ws.path("a")), sorted_content(&ws.path("b")));
}

#[test]
fn budget_stops_cleanly_and_resume_finishes_exactly_once() {
    let ws = exam_workspace(3, true, false);
    let s = examine(&ws, &strs(&examine_args(&ws, "store", &["--max-backend-calls", "5"])));
    assert!(s.budget_exhausted);
    assert_eq!(s.counts.completed, 1);
    assert!(s.failures.is_empty());
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    assert_eq!(store.records().unwrap().len(), 1);

    let s = examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    assert_eq!((s.counts.completed, s.counts.cached), (2, 1));
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    assert_eq!(store.records().unwrap().len(), 3);
    assert_eq!(store.manifests().unwrap().len(), 2);
}

#[test]
fn crash_mid_claim_is_redone_once_on_resume() {
    let ws = exam_workspace(3, true, false);
    examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    // Simulate a kill after q2's transcript was written but before its record
    // was complete.
    let records_path = ws.path("store").join(RECORDS_FILE);
    let text = std::fs::read_to_string(&records_path).unwrap();
    let kept: Vec<&str> = text.lines().filter(|l| !l.contains("\"item_id\":\"q2\"")).collect();
    let torn = text.lines().find(|l| l.contains("\"item_id\":\"q2\"")).unwrap();
    std::fs::write(&records_path, format!("{}\n{}", kept.join("\n"), &torn[..20])).unwrap();
    let mut f = std::fs::OpenOptions::new()
        .append(true)
        .open(ws.path("store").join(TRANSCRIPTS_FILE))
        .unwrap();
    f.write_all(b"{\"schema_version\":1,\"rec").unwrap();

    let s = examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    assert_eq!((s.counts.completed, s.counts.cached), (1, 2));
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    let committed = store.committed().unwrap();
    assert_eq!(committed.len(), 3);
    assert_eq!(store.transcripts_for(&committed).unwrap().len(), 3);
    let args = ws.cli(&["stats", "--store", &ws.arg("store")]);
    let Command::Stats(a) = &args.command else { unreachable!() };
    assert_eq!(stats(a).unwrap().exam_stats[0].stats.n, 3);
}

#[test]
fn failing_claims_are_recorded_as_aborted_and_retried() {
    let ws = exam_workspace(2, true, false);
    // A third claim the scripts know nothing about.
    let mut claims: Vec<GeneratedClaim> = (0..2).map(claim).collect();
    let mut stray = claim(7);
    stray.text = "An unscripted claim.".into();
    claims.push(stray);
    ws.write_jsonl("claims.jsonl", &claims);
    let s = examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    assert_eq!((s.counts.completed, s.counts.aborted), (2, 1));
    assert_eq!(s.failures[0].item_id, "q7");
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    let aborted: Vec<StoredRecord> = store.records().unwrap().into_iter().filter(|r| r.is_aborted()).collect();
    assert_eq!(aborted.len(), 1);
    assert_eq!(aborted[0].transcripts, 1);

    let s = examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    assert_eq!((s.counts.cached, s.counts.aborted), (2, 1));
}

#[test]
fn no_followups_flag_removes_probe_turns() {
    let ws = exam_workspace(3, false, false);
    examine(&ws, &strs(&examine_args(&ws, "store", &["--no-followups"])));
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    let ts = store.transcripts_for(&store.committed().unwrap()).unwrap();
    assert_eq!(ts.len(), 3);
    for t in &ts {
        assert_eq!(t.transcript.turns_of(TurnKind::FollowupProbe).count(), 0);
        assert_eq!(t.transcript.counters.followup_iterations, 0);
    }
    let manifest = &store.manifests().unwrap()[0];
    assert_eq!(manifest.config["exam"]["followups_enabled"], json!(false));
}

#[test]
fn majority_flag_stores_every_vote() {
    let ws = exam_workspace(2, true, false);
    examine(&ws, &strs(&examine_args(&ws, "store", &["--majority"])));
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    let records = store.committed().unwrap();
    assert!(records.iter().all(|r| r.detector == "lmvlm-majority" && r.transcripts == 3));
    let ts = store.transcripts_for(&records).unwrap();
    assert_eq!(ts.len(), 6);
    assert_eq!(ts.iter().map(|t| t.run_index).collect::<Vec<_>>(), vec![0, 1, 2, 0, 1, 2]);
}

#[test]
fn ays_requires_dataset() {
    let ws = exam_workspace(1, true, false);
    let mut args = examine_args(&ws, "store", &[]);
    let at = args.iter().position(|a| a == "lmvlm").unwrap();
    args[at] = "ays".into();
    assert!(matches!(try_examine(&ws, &strs(&args)), Err(CliError::Usage(_))));
}

fn record(i: usize, verdict: Verdict) -> StoredRecord {
    StoredRecord {
        schema_version: STORE_SCHEMA_VERSION,
        record_id: format!("rec{i}"),
        run_id: "run".into(),
        item_id: format!("r{i}"),
        dataset: "fixture".into(),
        detector: "lmvlm".into(),
        verdict: Some(verdict),
        score: None,
        metadata: BTreeMap::new(),
        aborted: None,
        transcripts: 0,
    }
}

/// Ten records: r0-r2 incorrect and rejected, r3 incorrect but accepted, r4
/// correct but rejected, r5-r8 correct and accepted, r9 excluded.
fn evaluation_workspace() -> Workspace {
    use GoldLabel::*;
    use Verdict::*;
    let rows = [
        (Incorrect, Reject),
        (Incorrect, Reject),
        (Incorrect, Reject),
        (Incorrect, Accept),
        (Correct, Reject),
        (Correct, Accept),
        (Correct, Accept),
        (Correct, Accept),
        (Correct, Accept),
        (Excluded, Reject),
    ];
    let ws = Workspace::new();
    ws.config(&[], false, json!({}));
    let store = TranscriptStore::open(&ws.path("store")).unwrap();
    let mut labels = Vec::new();
    for (i, (gold, verdict)) in rows.into_iter().enumerate() {
        store.commit(&[], &record(i, verdict)).unwrap();
        labels.push(LabelEntry {
            item_id: format!("r{i}"),
            label: gold,
        });
    }
    ws.write_jsonl("labels.jsonl", &labels);
    ws
}

fn run_evaluate(ws: &Workspace, extra: &[&str]) -> Result<crossexam::Report, CliError> {
    let store = ws.arg("store");
    let mut args = vec!["evaluate", "--store", &store];
    args.extend_from_slice(extra);
    let cli = ws.cli(&args);
    let Command::Evaluate(a) = &cli.command else { unreachable!() };
    evaluate(a)
}

#[test]
fn evaluate_matches_hand_count() {
    let ws = evaluation_workspace();
    let labels = ws.arg("labels.jsonl");
    let report = run_evaluate(&ws, &["--labels", &labels]).unwrap();
    let m = &report.metrics[0];
    // Rejection: TP 3, FP 1, FN 1. Acceptance: TP 4, FP 1, FN 1. r9 dropped.
    assert_eq!(m.n, 9);
    assert_eq!((m.counts.tp, m.counts.fp, m.counts.tn, m.counts.fn_), (3, 1, 4, 1));
    assert_eq!((m.rejection.precision, m.rejection.recall, m.rejection.f1), (0.75, 0.75, 0.75));
    assert!((m.acceptance.precision - 0.8).abs() < 1e-15);
    assert!((m.acceptance.recall - 0.8).abs() < 1e-15);
    assert!((m.acceptance.f1 - 0.8).abs() < 1e-15);
    let md = emit_report(&report, ReportFormat::Markdown);
    assert!(md.contains("| lmvlm | 75.0 | 75.0 | 75.0 |"), "{md}");
}

#[test]
fn evaluate_applies_overrides() {
    let ws = evaluation_workspace();
    ws.write_jsonl(
        "overrides.jsonl",
        &[crossexam::OverrideEntry {
            item_id: "r9".into(),
            label: GoldLabel::Incorrect,
            note: "checked by hand".into(),
        }],
    );
    let (labels, overrides) = (ws.arg("labels.jsonl"), ws.arg("overrides.jsonl"));
    let report = run_evaluate(&ws, &["--labels", &labels, "--overrides", &overrides]).unwrap();
    let m = &report.metrics[0];
    assert_eq!(m.n, 10);
    assert_eq!(m.counts.tp, 4);
    assert!((m.rejection.precision - 0.8).abs() < 1e-15);
}

#[test]
fn evaluate_rejects_unlabeled_records() {
    let ws = evaluation_workspace();
    let labels: Vec<LabelEntry> = crossexam::jsonl::read_all(&ws.path("labels.jsonl")).unwrap();
    let partial: Vec<LabelEntry> = labels.into_iter().filter(|l| l.item_id != "r5").collect();
    ws.write_jsonl("partial.jsonl", &partial);
    let labels = ws.arg("partial.jsonl");
    match run_evaluate(&ws, &["--labels", &labels]) {
        Err(CliError::Unlabeled(ids)) => assert_eq!(ids, vec!["lmvlm/r5".to_string()]),
        other => panic!("expected unlabeled error, got {other:?}"),
    }
}

#[test]
fn evaluate_reports_falsehood_accuracy_for_falsehood_claims() {
    let ws = exam_workspace(4, true, false);
    let mut claims: Vec<GeneratedClaim> = (0..4).map(claim).collect();
    for (i, c) in claims.iter_mut().enumerate() {
        c.mode = ClaimMode::Falsehood;
        c.text = format!("The capital of land {i} is Atlantis.");
    }
    ws.write_jsonl("claims.jsonl", &claims);
    // Scripts are keyed on the original claim text; rebuild them for these.
    let dialogues: Vec<serde_json::Value> = claims
        .iter()
        .enumerate()
        .map(|(i, c)| json!({"key": c.text, "replies": [question(i), "No", decision(i)]}))
        .collect();
    ws.write_json("examiner.json", &json!({ "dialogues": dialogues }));
    let dataset = ws.arg("dataset.jsonl");
    examine(&ws, &strs(&examine_args(&ws, "store", &["--dataset", &dataset])));
    let claims = ws.arg("claims.jsonl");
    let report = run_evaluate(&ws, &["--claims", &claims, "--dataset", &dataset]).unwrap();
    assert_eq!(report.falsehood.len(), 1);
    // Odd items are rejected.
    assert_eq!(report.falsehood[0].accuracy, 0.5);
    assert_eq!(report.metrics[0].dataset, "capitals");
}

#[test]
fn stats_cover_exactly_the_stored_transcripts() {
    let ws = exam_workspace(2, true, false);
    examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    let cli = ws.cli(&["stats", "--store", &ws.arg("store")]);
    let Command::Stats(a) = &cli.command else { unreachable!() };
    let report = stats(a).unwrap();
    let s = &report.exam_stats[0].stats;
    assert_eq!(s.n, 2);
    assert_eq!(s.questions_total.mean, 1.0);
    assert_eq!(s.inconclusive_rate, 0.0);
}

#[test]
fn replay_alternates_speakers_and_reports_unknown_items() {
    let ws = exam_workspace(2, true, false);
    examine(&ws, &strs(&examine_args(&ws, "store", &[])));
    let cli = ws.cli(&["replay", "--store", &ws.arg("store"), "--item", "q1"]);
    let Command::Replay(a) = &cli.command else { unreachable!() };
    let text = replay(a).unwrap();
    let speakers: Vec<&str> = text
        .lines()
        .filter_map(|l| l.split(':').next())
        .filter(|s| *s == "Examiner" || *s == "Examinee")
        .collect();
    assert_eq!(speakers, ["Examinee", "Examiner", "Examinee", "Examiner"]);
    assert!(speakers.windows(2).all(|w| w[0] != w[1]));
    assert!(text.contains(&claim_text(1)));
    assert!(text.contains("The claim is incorrect."));

    let cli = ws.cli(&["replay", "--store", &ws.arg("store"), "--item", "nope"]);
    let Command::Replay(a) = &cli.command else { unreachable!() };
    assert!(matches!(replay(a), Err(CliError::NotFound(_))));
}
