use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use xlprompt_core::data::record::{records_to_jsonl, RawRecord};
use xlprompt_core::data::synthetic::{clone_pairs, unlabeled_programs, Dialect, ProgramShape};
use xlprompt_core::task::TaskKind;

fn xlprompt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_xlprompt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "exit {:?}\n{}", o.status.code(), stderr(&o));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// `n` positive pairs whose code fields are 150 and 160 tokens long.
fn long_positives(n: usize) -> Vec<RawRecord> {
    (0..n)
        .map(|i| {
            let x1: Vec<String> = (0..150).map(|j| format!("v{}", (i * 31 + j * 7) % 503)).collect();
            let x2: Vec<String> = (0..160).map(|j| format!("w{}", (i * 17 + j * 3) % 499)).collect();
            RawRecord::pair(format!("r{i}"), TaskKind::Cd, "go", x1.join(" "), x2.join(" "), 1)
        })
        .collect()
}

fn write_records(path: &Path, records: &[RawRecord]) {
    fs::write(path, records_to_jsonl(records).unwrap()).unwrap();
}

fn read_all(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let bytes = fs::read(&path).unwrap();
                out.push((path.strip_prefix(dir).unwrap().to_path_buf(), bytes));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn prepare_data_balances_and_is_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("cd.jsonl");
    write_records(&input, &long_positives(1000));
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    for out in [&a, &b] {
        let stdout = ok(xlprompt(&["prepare-data", "--input", p(&input), "--out", p(out), "--task", "cd", "--seed", "5"]));
        assert!(stdout.contains("1000 positive, 1000 negative"), "{stdout}");
    }
    let mut total = 0;
    let mut labels = [0usize; 2];
    for name in ["train.jsonl", "valid.jsonl", "test.jsonl"] {
        let text = fs::read_to_string(a.join(name)).unwrap();
        for line in text.lines() {
            let r: RawRecord = serde_json::from_str(line).unwrap();
            labels[r.label.unwrap() as usize] += 1;
            total += 1;
        }
    }
    assert_eq!(total, 2000);
    assert_eq!(labels, [1000, 1000]);
    assert_eq!(read_all(&a), read_all(&b));
}

#[test]
fn corrupt_line_is_reported_with_its_number() {
    let tmp = tempfile::tempdir().unwrap();
    let input = tmp.path().join("cd.jsonl");
    let mut lines: Vec<String> = records_to_jsonl(&long_positives(30)).unwrap().lines().map(String::from).collect();
    lines[16] = "{\"id\": \"broken\", \"task\": ".into();
    fs::write(&input, lines.join("\n")).unwrap();
    let out = xlprompt(&["prepare-data", "--input", p(&input), "--out", p(&tmp.path().join("o")), "--task", "cd"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(":17:"), "{}", stderr(&out));

    let mut records = long_positives(30);
    records[4] = RawRecord::generative("g", TaskKind::Cm, "go", "a b".into(), "c".into());
    write_records(&input, &records);
    let out = xlprompt(&["prepare-data", "--input", p(&input), "--out", p(&tmp.path().join("o")), "--task", "cd"]);
    assert_eq!(out.status.code(), Some(3));
    assert!(stderr(&out).contains(":5:"), "{}", stderr(&out));
}

const CONFIG: &str = r#"
output_dir = "OUT"

[model.config]
hidden_dim = 16
num_layers = 1
num_heads = 2
ffn_dim = 32
max_seq_len = 128

[vocab]
max_size = 512

[layout]
mode = "uniform"
m = 2

[verbalizer]
true = "yes"
false = "no"

[train]
base_lr = 0.001
batch_size = 8
epochs = 1

[experiment]
mode = "zero_shot"
task = "cd"
source_lang = "alpha"
target_lang = "beta"
seeds = [0, 1]

[data]
source = "DATA/alpha"
target = "DATA/beta"
pretrain = ["DATA/unlabeled.jsonl"]

[pretrain]
mask_rate = 0.15

[pretrain.train]
base_lr = 0.001
batch_size = 8
epochs = 1
trainable_set = "plm_only"

[prepare]
ratios = [0.6, 0.2, 0.2]
seed = 1

[prepare.window]
min_tokens = 1
max_tokens = 250
max_nl_tokens = 64
"#;

struct Workspace {
    _tmp: tempfile::TempDir,
    root: PathBuf,
    config: PathBuf,
}

fn workspace() -> Workspace {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path().to_path_buf();
    let data = root.join("data");
    fs::create_dir_all(&data).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let shape = ProgramShape::default();
    let mut unlabeled = Vec::new();
    for (dialect, n) in [(Dialect::alpha(), 40), (Dialect::beta(), 20)] {
        let raw = data.join(format!("{}.jsonl", dialect.name));
        write_records(&raw, &clone_pairs(&mut rng, &dialect, n, &shape, &format!("{}-", dialect.name)));
        for (i, code) in unlabeled_programs(&mut rng, &dialect, 30, &shape).into_iter().enumerate() {
            unlabeled.push(RawRecord::generative(
                format!("{}-u{i}", dialect.name),
                TaskKind::Cm,
                dialect.name,
                code,
                "unused".into(),
            ));
        }
    }
    write_records(&data.join("unlabeled.jsonl"), &unlabeled);
    let config = root.join("run.toml");
    let text = CONFIG
        .replace("OUT", p(&root.join("runs")))
        .replace("DATA", p(&data));
    fs::write(&config, text).unwrap();
    for lang in ["alpha", "beta"] {
        ok(xlprompt(&[
            "prepare-data",
            "--input",
            p(&data.join(format!("{lang}.jsonl"))),
            "--out",
            p(&data.join(lang)),
            "--task",
            "cd",
            "--config",
            p(&config),
        ]));
    }
    Workspace {
        _tmp: tmp,
        root,
        config,
    }
}

fn only_run_dir(root: &Path) -> PathBuf {
    let runs: Vec<PathBuf> = fs::read_dir(root.join("runs")).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(runs.len(), 1, "{runs:?}");
    runs[0].clone()
}

#[test]
fn train_eval_report_pipeline() {
    let ws = workspace();
    let cfg = p(&ws.config);
    let pre = ok(xlprompt(&["pretrain", "--config", cfg]));
    let backbone = pre.trim().strip_prefix("backbone saved to ").unwrap().to_string();
    assert!(Path::new(&backbone).join("manifest.json").exists());

    // Later commands start from the pre-trained backbone.
    let text = fs::read_to_string(&ws.config)
        .unwrap()
        .replace("[model.config]\nhidden_dim = 16\nnum_layers = 1\nnum_heads = 2\nffn_dim = 32\nmax_seq_len = 128\n", &format!("[model]\narchive = \"{backbone}\"\n"));
    let tuned = ws.root.join("tuned.toml");
    fs::write(&tuned, text).unwrap();
    let cfg = p(&tuned);
    let runs_before: usize = fs::read_dir(ws.root.join("runs")).unwrap().count();

    ok(xlprompt(&["train", "--config", cfg]));
    let run_dir = fs::read_dir(ws.root.join("runs"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .find(|d| d.join("train.json").exists())
        .unwrap();
    assert_eq!(fs::read_dir(ws.root.join("runs")).unwrap().count(), runs_before + 1);
    let first = read_all(&run_dir);
    ok(xlprompt(&["train", "--config", cfg]));
    assert_eq!(first, read_all(&run_dir), "train is not idempotent");

    let stdout = ok(xlprompt(&["eval", "--config", cfg]));
    assert!(stdout.contains("accuracy:"), "{stdout}");
    let log = fs::read_to_string(run_dir.join("eval.log.jsonl")).unwrap();
    let events: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let evals: Vec<_> = events.iter().filter(|e| e["event"] == "eval").collect();
    assert_eq!(evals.len(), 2);
    assert!(evals.iter().all(|e| e["optimizer_steps"] == 0), "{log}");
    assert!(!events.iter().any(|e| e["event"] == "step"), "{log}");
    let report = ok(xlprompt(&["report", "--run-dir", p(&run_dir)]));
    assert!(report.contains("accuracy"), "{report}");

    let missing = xlprompt(&["eval", "--config", cfg, "--set", "train.epochs=2"]);
    assert_eq!(missing.status.code(), Some(3), "{}", stderr(&missing));
    assert!(stderr(&missing).contains("run `train`"));
}

#[test]
fn ablate_reports_one_row_per_value_and_seed() {
    let ws = workspace();
    let cfg = p(&ws.config);
    let csv = ok(xlprompt(&["ablate", "--config", cfg, "--axis", "prompt_count", "--values", "1,2"]));
    assert_eq!(csv.lines().count(), 1 + 2 * 2, "{csv}");
    assert!(csv.lines().nth(1).unwrap().starts_with("1,0,"), "{csv}");
    let run_dir = only_run_dir(&ws.root);
    let report = ok(xlprompt(&["report", "--run-dir", p(&run_dir)]));
    let rows = report
        .lines()
        .filter(|l| {
            let f: Vec<&str> = l.split_whitespace().collect();
            f.len() >= 3 && ["1", "2"].contains(&f[0]) && f[1].parse::<u64>().is_ok()
        })
        .count();
    assert_eq!(rows, 4, "{report}");
}

#[test]
fn config_errors_exit_with_code_two() {
    let ws = workspace();
    let text = fs::read_to_string(&ws.config).unwrap();
    let no_verbalizer = ws.root.join("nv.toml");
    fs::write(&no_verbalizer, text.replace("[verbalizer]\ntrue = \"yes\"\nfalse = \"no\"\n", "")).unwrap();
    let out = xlprompt(&["train", "--config", p(&no_verbalizer)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("verbalizer"), "{}", stderr(&out));

    let typo = ws.root.join("typo.toml");
    fs::write(&typo, text.replace("epochs = 1\n\n[experiment]", "epochs = 1\nepoch = 2\n\n[experiment]")).unwrap();
    let out = xlprompt(&["train", "--config", p(&typo)]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("epoch"), "{}", stderr(&out));

    let out = xlprompt(&["train", "--config", p(&ws.config), "--set", "train.batch_size=many"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("train.batch_size"), "{}", stderr(&out));

    let out = xlprompt(&["train", "--config", p(&ws.config), "--set", "data.source=/nowhere"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("data.source"), "{}", stderr(&out));
}
