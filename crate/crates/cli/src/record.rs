use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;

#[derive(Debug, Serialize)]
struct InputDigest {
    path: String,
    crc32: String,
}

#[derive(Debug, Serialize)]
struct RunRecord<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'a str,
    argv: &'a [String],
    seed: Option<u64>,
    threads: usize,
    inputs: Vec<InputDigest>,
}

/// Write `run.json` into `out`. Rerunning `deadnet` with `argv` on inputs
/// with the same digests reproduces the outputs.
pub fn write(out: &Path, command: &str, argv: &[String], seed: Option<u64>, inputs: &[&Path]) -> Result<()> {
    let inputs = inputs
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p).with_context(|| format!("reading {}", p.display()))?;
            Ok(InputDigest { path: p.display().to_string(), crc32: format!("{:08x}", crc32fast::hash(&bytes)) })
        })
        .collect::<Result<Vec<_>>>()?;
    let rec = RunRecord {
        tool: "deadnet",
        version: env!("CARGO_PKG_VERSION"),
        command,
        argv,
        seed,
        threads: rayon::current_num_threads(),
        inputs,
    };
    std::fs::write(out.join("run.json"), serde_json::to_string_pretty(&rec)? + "\n")?;
    Ok(())
}
