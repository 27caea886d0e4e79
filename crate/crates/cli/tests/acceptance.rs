//! Acceptance gate: every criterion at its stated tolerance, one line each.
//! Runs without the libtest harness so the lines reach stdout uncaptured.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use cseg::verify::{self, Outcome};

/// Wall-clock limits stated with the criteria.
const BUDGETS: [(&str, f64); 2] = [("1", 120.0), ("7", 600.0)];

type Check = Box<dyn FnOnce() -> Outcome>;

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, f64) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed().as_secs_f64())
}

fn cseg(args: &[&str]) -> Result<(), String> {
    let o = Command::new(env!("CARGO_BIN_EXE_cseg"))
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if o.status.success() {
        Ok(())
    } else {
        Err(format!(
            "{args:?}: {}",
            String::from_utf8_lossy(&o.stderr).trim()
        ))
    }
}

/// Two identical `cseg train` invocations must write identical files.
fn cli_determinism() -> Outcome {
    let run = || -> Result<(bool, String), String> {
        let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
        let dir = tmp.path();
        let config = dir.join("config.json");
        let text = r#"{
          "seed": 11,
          "model": {"channels_per_level": [4, 6, 8, 10, 12], "transformer": {"patch": 8, "heads": 2, "layers": 1}},
          "train": {"epochs": 3, "batch_size": 4},
          "synthetic": {"spurious": {"confound": "tint-density", "strength": 0.8}}
        }"#;
        fs::write(&config, text).map_err(|e| e.to_string())?;
        let s = |p: &Path| p.to_str().expect("utf-8 path").to_string();
        let data = dir.join("data");
        cseg(&[
            "gen",
            "--config",
            &s(&config),
            "--out",
            &s(&data),
            "--count",
            "24",
        ])?;
        for run in ["a", "b"] {
            cseg(&[
                "train",
                "--config",
                &s(&config),
                "--data",
                &s(&data),
                "--out",
                &s(&dir.join(run)),
            ])?;
        }
        let mut compared = Vec::new();
        for file in ["metrics.json", "history.jsonl", "model.cseg"] {
            let a = fs::read(dir.join("a").join(file)).map_err(|e| e.to_string())?;
            let b = fs::read(dir.join("b").join(file)).map_err(|e| e.to_string())?;
            if a != b {
                return Ok((false, format!("{file} differs between identical runs")));
            }
            compared.push(format!("{file} {} B", a.len()));
        }
        Ok((true, format!("byte-identical: {}", compared.join(", "))))
    };
    match run() {
        Ok((passed, measured)) => Outcome {
            name: "cli determinism",
            passed,
            measured,
        },
        Err(e) => Outcome {
            name: "cli determinism",
            passed: false,
            measured: format!("error: {e}"),
        },
    }
}

fn main() -> ExitCode {
    let criteria: Vec<(&str, Check)> = vec![
        ("1", Box::new(|| verify::gradient_fidelity(None))),
        ("2", Box::new(verify::unit_weight_reduction)),
        ("3", Box::new(verify::weight_learner)),
        ("4", Box::new(verify::independence_signal)),
        ("5", Box::new(verify::metric_exactness)),
        ("6", Box::new(verify::loss_point_values)),
        ("7", Box::new(verify::overfit_smoke)),
        ("8", Box::new(verify::directional_ablation)),
        ("9", Box::new(cli_determinism)),
        ("10", Box::new(verify::schedule_identities)),
    ];
    let mut failed = Vec::new();
    for (id, check) in criteria {
        let (mut o, secs) = timed(check);
        if let Some((_, budget)) = BUDGETS.iter().find(|(b, _)| *b == id) {
            if secs > *budget {
                o.passed = false;
                o.measured
                    .push_str(&format!("; exceeded {budget} s budget"));
            }
        }
        println!("criterion {id:>2}: {o} [{secs:.1} s]");
        if !o.passed {
            failed.push(id);
        }
    }
    if failed.is_empty() {
        println!("acceptance: all criteria passed");
        ExitCode::SUCCESS
    } else {
        println!("acceptance: failed criteria {}", failed.join(", "));
        ExitCode::FAILURE
    }
}
