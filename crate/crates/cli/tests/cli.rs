use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use plugmem::dpm::load_memory;
use plugmem::experiments::{generate_domains, SyntheticDomainSpec};
use plugmem::model::load_checkpoint;
use plugmem::text::chunk_knowledge;
use plugmem::text::io::{write_lines, write_tasks};
use plugmem::util::sha256_hex;

fn plugmem(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_plugmem"))
        .args(args)
        .env_remove("PLUGMEM_THREADS")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> Output {
    assert!(o.status.success(), "command failed: {}", stderr(&o));
    o
}

fn assert_usage_error(o: &Output) {
    assert_eq!(o.status.code(), Some(2), "stderr: {}", stderr(o));
    assert!(stderr(o).starts_with("error:"), "stderr: {}", stderr(o));
}

fn hash(p: &Path) -> String {
    sha256_hex(&std::fs::read(p).unwrap())
}

fn small_spec() -> SyntheticDomainSpec {
    SyntheticDomainSpec {
        topic_words: 40,
        general_lines: 300,
        knowledge_lines_per_domain: 200,
        task_samples_per_domain: 100,
        general_entities: 60,
        ..SyntheticDomainSpec::default()
    }
}

/// Corpus, domain knowledge and task files in a fresh directory.
struct Workspace {
    dir: tempfile::TempDir,
}

impl Workspace {
    fn new() -> Workspace {
        let dir = tempfile::tempdir().unwrap();
        let data = generate_domains(&small_spec()).unwrap();
        let corpus = data.all_text();
        write_lines(&dir.path().join("corpus.txt"), &corpus).unwrap();
        write_lines(&dir.path().join("general.txt"), &data.general).unwrap();
        write_lines(&dir.path().join("domain.txt"), &data.domains[0].knowledge).unwrap();
        write_tasks(&dir.path().join("train.jsonl"), &data.domains[0].train).unwrap();
        write_tasks(&dir.path().join("test.jsonl"), &data.domains[0].test).unwrap();
        std::fs::write(dir.path().join("empty.jsonl"), "").unwrap();
        Workspace { dir }
    }

    fn p(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> String {
        self.p(name).display().to_string()
    }

    fn init(&self) {
        ok(plugmem(&["init", "--corpus", &self.s("corpus.txt"), "--out", &self.s("init.ckpt"), "--seed", "3"]));
    }

    fn memory(&self, corpus: &str, out: &str, offset: &str) -> Output {
        ok(plugmem(&[
            "build-memory",
            "--corpus",
            &self.s(corpus),
            "--checkpoint",
            &self.s("init.ckpt"),
            "--out",
            &self.s(out),
            "--id-offset",
            offset,
        ]))
    }

    fn pretrain(&self, out: &str, steps: &str) -> Output {
        plugmem(&[
            "pretrain",
            "--corpus",
            &self.s("corpus.txt"),
            "--memory",
            &self.s("general.dpm"),
            "--out",
            &self.s(out),
            "--steps",
            steps,
            "--seed",
            "3",
            "--batch-size",
            "4",
        ])
    }
}

#[test]
fn missing_corpus_is_a_usage_error_naming_the_path() {
    let ws = Workspace::new();
    let o = plugmem(&["init", "--corpus", &ws.s("nope.txt"), "--out", &ws.s("x.ckpt")]);
    assert_usage_error(&o);
    assert!(stderr(&o).contains("nope.txt"));
    assert_eq!(stderr(&o).lines().count(), 1);
}

#[test]
fn build_memory_counts_windows_and_round_trips() {
    let ws = Workspace::new();
    ws.init();
    let out = stdout(&ws.memory("general.txt", "general.dpm", "0"));
    let (_, vocab) = load_checkpoint(ws.p("init.ckpt")).unwrap();
    let lines: Vec<String> = std::fs::read_to_string(ws.p("general.txt")).unwrap().lines().map(String::from).collect();
    let expected = chunk_knowledge(&vocab.unwrap(), &lines, 32).len();
    assert!(out.starts_with(&format!("entries {expected} d_model 64")), "{out}");
    let store = load_memory(ws.p("general.dpm")).unwrap();
    assert_eq!(store.len(), expected);
    assert_eq!(plugmem::dpm::memory_bytes(&store), std::fs::read(ws.p("general.dpm")).unwrap());
}

#[test]
fn pretrain_is_deterministic_and_zero_steps_keeps_the_initialization() {
    let ws = Workspace::new();
    ws.init();
    ws.memory("general.txt", "general.dpm", "0");
    ok(ws.pretrain("zero.ckpt", "0"));
    assert_eq!(hash(&ws.p("zero.ckpt")), hash(&ws.p("init.ckpt")));
    ok(ws.pretrain("a.ckpt", "2"));
    ok(ws.pretrain("b.ckpt", "2"));
    assert_eq!(hash(&ws.p("a.ckpt")), hash(&ws.p("b.ckpt")));
    assert_ne!(hash(&ws.p("a.ckpt")), hash(&ws.p("init.ckpt")));
    for f in ["a.ckpt.report.json", "a.ckpt.manifest.json"] {
        assert!(ws.p(f).exists(), "{f} missing");
    }
}

#[test]
fn pretrain_rejects_a_memory_from_another_vocabulary() {
    let ws = Workspace::new();
    ws.init();
    ws.memory("general.txt", "general.dpm", "0");
    let o = plugmem(&[
        "pretrain",
        "--corpus",
        &ws.s("general.txt"),
        "--memory",
        &ws.s("general.dpm"),
        "--out",
        &ws.s("x.ckpt"),
        "--steps",
        "1",
        "--seed",
        "0",
    ]);
    assert_usage_error(&o);
    assert!(stderr(&o).contains("digest"));
}

#[test]
fn swaps_leave_the_checkpoint_alone() {
    let ws = Workspace::new();
    ws.init();
    let m = load_counts(&ws.memory("general.txt", "general.dpm", "0"));
    let k = load_counts(&ws.memory("domain.txt", "domain.dpm", "1000000"));
    let before = hash(&ws.p("init.ckpt"));
    let ckpt = ws.s("init.ckpt");
    let o = ok(plugmem(&[
        "swap-memory",
        "--checkpoint",
        &ckpt,
        "--memory",
        &ws.s("domain.dpm"),
        "--base",
        &ws.s("general.dpm"),
        "--mode",
        "daa",
        "--out",
        &ws.s("daa.dpm"),
    ]));
    assert_eq!(stdout(&o).trim(), format!("size {}", m + k));
    ok(plugmem(&[
        "swap-memory",
        "--checkpoint",
        &ckpt,
        "--memory",
        &ws.s("domain.dpm"),
        "--base",
        &ws.s("general.dpm"),
        "--mode",
        "dar",
        "--out",
        &ws.s("dar.dpm"),
    ]));
    assert_eq!(hash(&ws.p("init.ckpt")), before);
    let dar = load_memory(ws.p("dar.dpm")).unwrap();
    assert!(dar.entries().iter().all(|e| e.id >= 1_000_000));

    let o = ok(plugmem(&["retrieve", "--checkpoint", &ckpt, "--memory", &ws.s("dar.dpm"), "--query", "the", "--n", "5"]));
    let text = stdout(&o);
    let rows: Vec<&str> = text.lines().skip(1).collect();
    assert_eq!(rows.len(), 5);
    for r in rows {
        let idx: usize = r.split('\t').next().unwrap().parse().unwrap();
        assert!(dar.entries()[idx].id >= 1_000_000);
    }

    let o = plugmem(&["swap-memory", "--checkpoint", &ckpt, "--memory", &ws.s("domain.txt"), "--mode", "dar", "--out", &ws.s("bad.dpm")]);
    assert_usage_error(&o);
}

fn load_counts(o: &Output) -> usize {
    stdout(o).split_whitespace().nth(1).unwrap().parse().unwrap()
}

#[test]
fn finetune_then_eval_and_empty_tasks_fail() {
    let ws = Workspace::new();
    ws.init();
    ws.memory("general.txt", "general.dpm", "0");
    ok(plugmem(&[
        "finetune",
        "--checkpoint",
        &ws.s("init.ckpt"),
        "--memory",
        &ws.s("general.dpm"),
        "--train",
        &ws.s("train.jsonl"),
        "--out",
        &ws.s("ft.ckpt"),
        "--steps",
        "5",
        "--freeze",
        "emb.,knowledge.,layer.",
    ]));
    let eval = |tasks: &str| {
        plugmem(&[
            "eval",
            "--checkpoint",
            &ws.s("ft.ckpt"),
            "--memory",
            &ws.s("general.dpm"),
            "--tasks",
            &ws.s(tasks),
            "--out",
            &ws.s("eval.json"),
        ])
    };
    let o = ok(eval("test.jsonl"));
    assert!(stdout(&o).starts_with("accuracy "));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.p("eval.json")).unwrap()).unwrap();
    assert!(report["metrics"]["accuracy"].is_f64());
    assert_usage_error(&eval("empty.jsonl"));
}

#[test]
fn exploding_training_exits_with_the_numerics_code() {
    let ws = Workspace::new();
    ws.init();
    ws.memory("general.txt", "general.dpm", "0");
    let o = plugmem(&[
        "pretrain",
        "--corpus",
        &ws.s("corpus.txt"),
        "--memory",
        &ws.s("general.dpm"),
        "--out",
        &ws.s("x.ckpt"),
        "--steps",
        "5",
        "--seed",
        "3",
        "--batch-size",
        "2",
        "--lr",
        "1e300",
    ]);
    assert_eq!(o.status.code(), Some(3), "stderr: {}", stderr(&o));
    assert!(stderr(&o).starts_with("error:"));
}

#[test]
fn manifest_reruns_reproduce_outputs() {
    let ws = Workspace::new();
    ws.init();
    ws.memory("general.txt", "general.dpm", "0");
    ok(ws.pretrain("a.ckpt", "2"));
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(ws.p("a.ckpt.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "pretrain");
    assert_eq!(manifest["config"]["train"]["refresh_every"], 200);
    assert_eq!(manifest["inputs"].as_object().unwrap().len(), 2);
    let (ckpt, report) = (hash(&ws.p("a.ckpt")), hash(&ws.p("a.ckpt.report.json")));
    std::fs::remove_file(ws.p("a.ckpt")).unwrap();
    std::fs::remove_file(ws.p("a.ckpt.report.json")).unwrap();
    ok(plugmem(&["rerun", &ws.s("a.ckpt.manifest.json")]));
    assert_eq!(hash(&ws.p("a.ckpt")), ckpt);
    assert_eq!(hash(&ws.p("a.ckpt.report.json")), report);
}

#[test]
fn unknown_experiment_is_a_usage_error() {
    let o = plugmem(&["experiment", "frobnicate", "--out", "x"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).starts_with("error:"));
    assert!(stderr(&o).contains("Usage"));
}

#[test]
fn domain_adaptation_writes_four_condition_reports() {
    let ws = Workspace::new();
    let cfg = serde_json::json!({
        "spec": small_spec(),
        "model": { "d_model": 32, "d_ffn": 64 },
        "pretrain": { "steps": 5 },
        "finetune": { "steps": 5 },
    });
    std::fs::write(ws.p("cfg.json"), cfg.to_string()).unwrap();
    let out = ws.s("da");
    ok(plugmem(&["experiment", "domain-adaptation", "--out", &out, "--seeds", "5", "--config", &ws.s("cfg.json")]));
    let reports: serde_json::Value = serde_json::from_slice(&std::fs::read(ws.p("da/reports.json")).unwrap()).unwrap();
    let names: Vec<&str> = reports.as_array().unwrap().iter().map(|r| r["condition"].as_str().unwrap()).collect();
    assert_eq!(names, ["original", "daa", "dar", "not-daa"]);
    for r in reports.as_array().unwrap() {
        assert_eq!(r["metrics"].as_array().unwrap().len(), 5);
        for key in ["seeds", "mean", "sd", "retrieval_sources"] {
            assert!(r.get(key).is_some(), "{key} missing");
        }
    }
    assert!(ws.p("da/manifest.json").exists());
}
