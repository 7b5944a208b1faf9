//! End-to-end command pipeline run in a scratch directory.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use paine_core::cli::log;
use paine_core::cli::main_with_args;

/// Everything a pipeline run leaves behind, with the run directory and log
/// timestamps removed so runs in different directories compare equal.
#[derive(Debug, PartialEq)]
pub struct GoldenRun {
    pub stdout: Vec<String>,
    pub files: BTreeMap<String, Vec<u8>>,
    pub log: Vec<log::LogRecord>,
}

pub const ORACLE: &str = r#"{
  "prompt_count": 12,
  "noises_per_prompt": 6,
  "prompt_streams": [{"tok": 3, "d_tok": 4}, {"tok": 2, "d_tok": 2}],
  "noise_shape": [1, 16, 16]
}"#;

pub const TRAIN: &str = r#"{
  "predictor": {"attn_blocks": 1, "heads": 2, "stage_channels": [4, 4, 8, 8], "mlp_hidden": [16]},
  "train": {"max_epochs": 3, "group_k": 4, "lr": 0.001}
}"#;

/// Runs one command in `dir`, returning its exit code, stdout and stderr.
pub fn run(dir: &Path, args: &[&str]) -> (i32, String, String) {
    let mut full = vec!["paine".to_string()];
    for a in args {
        full.push(a.replace("{dir}", &dir.display().to_string()));
    }
    let (mut out, mut err) = (Vec::new(), Vec::new());
    let code = main_with_args(full, &mut out, &mut err);
    (code, String::from_utf8(out).unwrap(), String::from_utf8(err).unwrap())
}

fn collect(root: &Path, dir: &Path, files: &mut BTreeMap<String, Vec<u8>>) {
    for e in fs::read_dir(dir).unwrap() {
        let p = e.unwrap().path();
        if p.is_dir() {
            collect(root, &p, files);
        } else if p.file_name().unwrap() != "log.jsonl" {
            let rel = p.strip_prefix(root).unwrap().display().to_string();
            files.insert(rel, fs::read(&p).unwrap());
        }
    }
}

pub fn golden_run(dir: &Path) -> Result<GoldenRun, String> {
    fs::write(dir.join("oracle.json"), ORACLE).unwrap();
    fs::write(dir.join("train.json"), TRAIN).unwrap();
    let steps: [&[&str]; 9] = [
        &["gen-data", "--config", "{dir}/oracle.json", "--seed", "3", "--out", "{dir}/data"],
        &["train", "--data", "{dir}/data", "--config", "{dir}/train.json", "--out", "{dir}/ckpt", "--log", "{dir}/log.jsonl"],
        &["eval", "--checkpoint", "{dir}/ckpt", "--data", "{dir}/data", "--split", "all", "--log", "{dir}/log.jsonl"],
        &["eval-prior", "--checkpoint", "{dir}/ckpt", "--data", "{dir}/data", "--split", "all", "--log", "{dir}/log.jsonl"],
        &["export-prompt", "--data", "{dir}/data", "--prompt-id", "0", "--out", "{dir}/prompt.pant"],
        &["select", "--checkpoint", "{dir}/ckpt", "--prompt", "{dir}/prompt.pant", "--n", "16", "--b", "2", "--seed", "1", "--out", "{dir}/sel"],
        &["prior", "--checkpoint", "{dir}/ckpt", "--prompt", "{dir}/prompt.pant"],
        &["stats", "--data", "{dir}/data", "--pcc-prompts", "4"],
        &["uplift", "--checkpoint", "{dir}/ckpt", "--oracle", "{dir}/oracle.json", "--prompts", "8", "--n", "6", "--log", "{dir}/log.jsonl"],
    ];
    let mut stdout = Vec::new();
    for args in steps {
        let (code, out, err) = run(dir, args);
        if code != 0 {
            return Err(format!("{} exited {code}: {err}", args[0]));
        }
        stdout.push(out.replace(&dir.display().to_string(), "{dir}"));
    }
    let mut files = BTreeMap::new();
    collect(dir, dir, &mut files);
    let log = log::read(&dir.join("log.jsonl"))
        .map_err(|e| e.to_string())?
        .iter()
        .map(|r| r.untimed())
        .collect();
    Ok(GoldenRun { stdout, files, log })
}
