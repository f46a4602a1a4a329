//! Markdown summary of the JSON artifacts under one or more run directories.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{Context, Result};
use serde_json::Value;
use walkdir::WalkDir;

use crate::UsageError;

const EVAL_FILES: [&str; 2] = ["report.json", "test_report.json"];

fn read_json(path: &Path) -> Result<Value> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

fn task_label(task: &Value) -> String {
    let get = |k: &str| task.get(k).and_then(Value::as_u64).unwrap_or(0);
    format!("{}-way {}-shot", get("n_way"), get("k_shot"))
}

fn pct(v: &Value) -> String {
    v.as_f64().map_or("-".into(), |x| format!("{:.2}", 100.0 * x))
}

fn collect(dirs: &[PathBuf]) -> Result<Vec<PathBuf>> {
    let mut files = Vec::new();
    for d in dirs {
        if !d.is_dir() {
            return Err(UsageError(format!("{} is not a directory", d.display())).into());
        }
        for entry in WalkDir::new(d).sort_by_file_name() {
            let entry = entry.with_context(|| format!("walking {}", d.display()))?;
            if entry.file_type().is_file() {
                files.push(entry.into_path());
            }
        }
    }
    Ok(files)
}

pub fn render(dirs: &[PathBuf]) -> Result<String> {
    let files = collect(dirs)?;
    let named = |name: &'static str| files.iter().filter(move |f| f.file_name().is_some_and(|n| n == name));

    let mut out = String::from("# Results\n");
    let evals: Vec<&PathBuf> =
        files.iter().filter(|f| f.file_name().is_some_and(|n| EVAL_FILES.iter().any(|e| n == *e))).collect();
    if !evals.is_empty() {
        out.push_str("\n## Evaluations\n\n| run | task | dataset | episodes | accuracy (%) | 95% CI (%) |\n|---|---|---|---|---|---|\n");
        for f in evals {
            let v = read_json(f)?;
            let run = f.parent().map_or(String::new(), |p| p.display().to_string());
            let dataset = v.get("dataset").and_then(Value::as_str).unwrap_or("test split");
            writeln!(
                out,
                "| {run} | {} | {dataset} | {} | {} | {} |",
                task_label(&v["task"]),
                v["episodes"],
                pct(&v["accuracy"]),
                pct(&v["ci95"])
            )?;
        }
    }

    for f in named("summary.json") {
        let v = read_json(f)?;
        writeln!(
            out,
            "\n## Multi-seed summary ({})\n\n{} runs of {}, seeds {}: mean accuracy {} %",
            f.display(),
            v["runs"],
            v["task"].as_str().unwrap_or("?"),
            v["seeds"],
            pct(&v["mean_accuracy"])
        )?;
    }

    for f in named("ablation.json") {
        let v = read_json(f)?;
        let rows = v["rows"].as_array().cloned().unwrap_or_default();
        let tasks: Vec<String> = rows
            .first()
            .and_then(|r| r["reports"].as_array())
            .map(|rs| rs.iter().map(|r| task_label(&r["task"])).collect())
            .unwrap_or_default();
        writeln!(out, "\n## Ablation ({})\n", f.display())?;
        write!(out, "| multiscale | learnable weights | self-attention |")?;
        for t in &tasks {
            write!(out, " {t} (%) |")?;
        }
        out.push_str(" inference (ms/episode) | parameters |\n|---|---|---|");
        out.push_str(&"---|".repeat(tasks.len() + 2));
        out.push('\n');
        let mark = |b: &Value| if b.as_bool() == Some(true) { "✓" } else { "" };
        for r in rows {
            let c = &r["components"];
            write!(
                out,
                "| {} | {} | {} |",
                mark(&c["multiscale"]),
                mark(&c["learnable_weights"]),
                mark(&c["self_attention"])
            )?;
            for rep in r["reports"].as_array().into_iter().flatten() {
                write!(out, " {} |", pct(&rep["accuracy"]))?;
            }
            let ms = r["inference_time_s"].as_f64().map_or("-".into(), |s| format!("{:.1}", s * 1e3));
            writeln!(out, " {ms} | {} |", r["param_count"])?;
        }
    }
    if out == "# Results\n" {
        out.push_str("\nno reports found\n");
    }
    Ok(out)
}
