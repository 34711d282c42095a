//! Drives the `anchorframe` binary on a separable three-class fixture.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::{json, Value};

const CLASSES: [(&str, &str); 3] = [
    ("cooking", "pasta recipe bake sauce"),
    ("sports", "football tennis match goal"),
    ("weather", "rain storm cloud wind"),
];

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let mut lines = String::new();
        let mut descriptions = serde_json::Map::new();
        for (id, desc) in CLASSES {
            let words: Vec<&str> = desc.split_whitespace().collect();
            for i in 0..12 {
                let a = words[i % words.len()];
                let b = words[(i / words.len() + i + 1) % words.len()];
                lines += &json!({"text": format!("{a} {b}"), "label": id}).to_string();
                lines.push('\n');
            }
            descriptions.insert(id.into(), json!(desc));
        }
        fs::write(dir.path().join("synthetic.jsonl"), lines).unwrap();
        fs::write(
            dir.path().join("descriptions.json"),
            Value::Object(descriptions).to_string(),
        )
        .unwrap();
        fs::write(
            dir.path().join("templates.json"),
            json!({"synthetic": "Topic {description}: \""}).to_string(),
        )
        .unwrap();
        let f = Fixture { dir };
        f.write_config(|_| {});
        f
    }

    fn path(&self, rel: &str) -> PathBuf {
        self.dir.path().join(rel)
    }

    fn config() -> Value {
        json!({
            "dataset": {"path": "synthetic.jsonl", "format": "jsonl", "descriptions": "descriptions.json"},
            "templates": "templates.json",
            "backends": {
                "generator": {"name": "stub", "params": {"filler": []}},
                "encoder": {"name": "stub-hash", "params": {"dim": 16}},
                "scorer": {"name": "stub-logistic", "params": {"dim": 256}}
            },
            "pipeline": {
                "sampling": {"top_p": 1.0, "temperature": 3.0, "max_new_tokens": 8},
                "target_count": 40,
                "p_count": 10,
                "n_val": 20,
                "train": {
                    "learning_rate": 0.05,
                    "warmup_proportion": 0.0,
                    "max_epochs": 30,
                    "early_stop_patience": 10,
                    "batch_size": 16
                }
            },
            "episode": {"n_way": 3, "k_shot": 0, "n_query": 5, "tasks_per_partition": 2, "n_runs": 1},
            "output_dir": "out",
            "seed": 11
        })
    }

    fn write_config(&self, edit: impl FnOnce(&mut Value)) {
        let mut c = Self::config();
        edit(&mut c);
        fs::write(self.path("config.json"), serde_json::to_string_pretty(&c).unwrap()).unwrap();
    }

    fn run(&self, args: &[&str]) -> Output {
        self.run_env(args, &[])
    }

    fn run_env(&self, args: &[&str], env: &[(&str, &str)]) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_anchorframe"));
        cmd.arg("--config").arg(self.path("config.json")).args(args);
        for (k, v) in env {
            cmd.env(k, v);
        }
        cmd.output().unwrap()
    }

    fn manifest(&self) -> Value {
        read_json(&self.path("out/manifest.json"))
    }
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn files_under(root: &Path) -> BTreeSet<PathBuf> {
    let mut out = BTreeSet::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out
}

#[test]
fn generate_writes_one_file_per_class_and_replays_byte_identically() {
    let f = Fixture::new();
    f.write_config(|c| {
        c["split"] = json!({"train": ["weather"], "test": ["cooking", "sports"]});
        c["episode"]["n_way"] = json!(2);
        c["episode"]["tasks_per_partition"] = json!(1);
    });
    assert_ok(&f.run(&["generate"]));
    assert_ok(&f.run_env(&["generate"], &[("ANCHORFRAME_OUTPUT_DIR", "replay")]));

    let generated = f.path("out/run0/task0/generated");
    let names: BTreeSet<_> = fs::read_dir(&generated)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    assert_eq!(
        names,
        BTreeSet::from(["cooking.jsonl".to_string(), "sports.jsonl".to_string()])
    );
    for name in &names {
        let a = fs::read(generated.join(name)).unwrap();
        let b = fs::read(f.path("replay/run0/task0/generated").join(name)).unwrap();
        assert!(!a.is_empty());
        assert_eq!(a, b, "{name} differs between replays");
    }
    // generate stops after generation
    assert!(!f.path("out/run0/task0/anchors.jsonl").exists());
}

#[test]
fn validation_errors_are_listed_together_with_exit_code_1() {
    let f = Fixture::new();
    f.write_config(|c| {
        c["templates"] = json!("missing/templates.json");
        c["pipeline"]["p_count"] = json!(0);
    });
    let out = f.run(&["generate", "--backend", "scorer=gpt-9"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("missing/templates.json"), "{err}");
    assert!(err.contains("gpt-9"), "{err}");
    assert!(err.contains("p_count"), "{err}");
    assert!(!f.path("out").exists(), "nothing is written on invalid config");
}

#[test]
fn unknown_config_key_and_bad_flag_exit_1_help_exits_0() {
    let f = Fixture::new();
    f.write_config(|c| c["pipeline"]["p_cuont"] = json!(3));
    let out = f.run(&["run"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("p_cuont"));

    assert_eq!(f.run(&["run", "--rule", "median"]).status.code(), Some(1));
    assert_eq!(f.run(&["--help"]).status.code(), Some(0));
}

#[test]
fn run_with_both_rules_solves_the_fixture_and_lists_every_output() {
    let f = Fixture::new();
    let out = f.run(&["run", "--rule", "both"]);
    assert_ok(&out);

    for task in ["out/run0/task0", "out/run0/task1"] {
        for file in ["predictions_top.jsonl", "predictions_avg.jsonl"] {
            assert!(f.path(task).join(file).is_file(), "{task}/{file}");
        }
    }
    for rule in ["top", "avg"] {
        let report = read_json(&f.path(&format!("out/report_{rule}.json")));
        assert_eq!(report["mean_acc"], 1.0, "{rule}: {report}");
        assert_eq!(report["mean_f1"], 1.0);
        assert_eq!(report["per_task"].as_array().unwrap().len(), 2);
    }
    let summary = fs::read_to_string(f.path("out/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 3, "{summary}");

    // No orphan outputs.
    let manifest = f.manifest();
    let data: Vec<PathBuf> = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .flat_map(|e| e["outputs"].as_array().unwrap().iter())
        .chain(manifest["reports"].as_array().unwrap().iter().map(|r| &r["path"]))
        .map(|p| PathBuf::from(p.as_str().unwrap()))
        .collect();
    let listed: BTreeSet<PathBuf> = data.into_iter().collect();
    for file in files_under(&f.path("out")) {
        if file == Path::new("manifest.json") {
            continue;
        }
        assert!(listed.contains(&file), "{} is not in the manifest", file.display());
    }
    assert!(manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .all(|e| e["status"] == "complete"));
}

#[test]
fn resume_after_training_predicts_without_retraining() {
    let f = Fixture::new();
    f.write_config(|c| c["episode"]["tasks_per_partition"] = json!(1));
    assert_ok(&f.run(&["train"]));
    let state = f.path("out/run0/task0/scorer_state.json");
    let before = fs::read(&state).unwrap();
    let mtime = fs::metadata(&state).unwrap().modified().unwrap();
    assert!(!f.path("out/run0/task0/predictions_top.jsonl").exists());

    assert_ok(&f.run(&["run", "--resume"]));
    assert_eq!(fs::read(&state).unwrap(), before);
    assert_eq!(fs::metadata(&state).unwrap().modified().unwrap(), mtime);
    assert!(f.path("out/run0/task0/predictions_top.jsonl").is_file());

    let manifest = f.manifest();
    let invocations = manifest["invocations"].as_array().unwrap();
    assert_eq!(invocations.len(), 2);
    assert_eq!(invocations[1]["command"], "run");
    let rerun: BTreeSet<&str> = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["invocation"] == 1)
        .map(|e| e["stage"].as_str().unwrap())
        .collect();
    assert_eq!(rerun, BTreeSet::from(["episode", "prediction"]));
}

#[test]
fn changed_config_is_not_resumed() {
    let f = Fixture::new();
    f.write_config(|c| c["episode"]["tasks_per_partition"] = json!(1));
    assert_ok(&f.run(&["generate"]));
    assert_ok(&f.run(&["generate", "--resume", "--seed", "12"]));
    let manifest = f.manifest();
    let regenerated = manifest["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["invocation"] == 1 && e["stage"] == "generation")
        .count();
    assert_eq!(regenerated, 1);
}

#[test]
fn stage_failure_exits_2_and_is_recorded() {
    let f = Fixture::new();
    f.write_config(|c| c["episode"]["tasks_per_partition"] = json!(1));
    let out = f.run_env(
        &["run"],
        &[("ANCHORFRAME_BACKENDS__GENERATOR__PARAMS", r#"{"offline": true}"#)],
    );
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("generation"));
    let failed: Vec<_> = f.manifest()["entries"]
        .as_array()
        .unwrap()
        .iter()
        .filter(|e| e["status"] == "failed")
        .map(|e| e["stage"].clone())
        .collect();
    assert_eq!(failed, vec![json!("generation")]);
}

#[test]
fn sweep_csv_matches_per_count_reports() {
    let f = Fixture::new();
    f.write_config(|c| c["episode"]["tasks_per_partition"] = json!(1));
    let out = f.run(&["sweep", "--p-values", "2,5,2"]);
    assert_ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("duplicate anchor count 2"));

    let text = fs::read_to_string(f.path("out/sweep.csv")).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("p,rule,mean_acc,mean_f1"));
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    for row in rows {
        let report = read_json(&f.path(&format!("out/p{}/report_{}.json", row[0], row[1])));
        assert_eq!(row[2].parse::<f64>().unwrap(), report["mean_acc"].as_f64().unwrap());
        assert_eq!(row[3].parse::<f64>().unwrap(), report["mean_f1"].as_f64().unwrap());
        assert_eq!(report["p_count"].to_string(), row[0]);
    }
}

#[test]
fn replayed_runs_and_report_agree() {
    let f = Fixture::new();
    assert_ok(&f.run(&["run", "--jobs", "2"]));
    assert_ok(&f.run_env(&["run"], &[("ANCHORFRAME_OUTPUT_DIR", "replay")]));
    for rule in ["top", "avg"] {
        let a = fs::read(f.path(&format!("out/report_{rule}.json"))).unwrap();
        let b = fs::read(f.path(&format!("replay/report_{rule}.json"))).unwrap();
        assert_eq!(a, b);
    }

    let before = fs::read(f.path("out/report_avg.json")).unwrap();
    assert_ok(&f.run(&["report"]));
    assert_eq!(fs::read(f.path("out/report_avg.json")).unwrap(), before);
}
