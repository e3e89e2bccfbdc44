//! Run manifests, model loading and file emission.

use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use exitlab::model::ModelInput;
use exitlab::presets;
use serde::Serialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use crate::error::CliError;

pub const SCHEMA: u32 = 1;

#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub command: String,
    /// SHA-256 of the model config in canonical JSON form.
    pub model_hash: Option<String>,
    pub seed: u64,
    pub version: &'static str,
    /// Seconds from start-up to emission.
    pub wall_time: f64,
    pub thread_count: usize,
    pub deterministic_reduce: bool,
}

/// A model config together with where it came from.
pub struct LoadedModel {
    pub input: ModelInput,
    pub source: String,
    pub hash: String,
}

/// Per-invocation settings shared by every subcommand.
pub struct Context {
    pub command: &'static str,
    pub seed: u64,
    pub deterministic_reduce: bool,
    pub out: Option<PathBuf>,
    pub model: Option<String>,
    pub start: Instant,
}

impl Context {
    pub fn manifest(&self, model: Option<&LoadedModel>) -> RunManifest {
        RunManifest {
            command: self.command.to_string(),
            model_hash: model.map(|m| m.hash.clone()),
            seed: self.seed,
            version: env!("CARGO_PKG_VERSION"),
            wall_time: self.start.elapsed().as_secs_f64(),
            thread_count: rayon::current_num_threads(),
            deterministic_reduce: self.deterministic_reduce,
        }
    }

    /// Reads `--model`, which is a file path or the name of a shipped preset.
    pub fn load_model(&self) -> Result<LoadedModel, CliError> {
        let arg = self
            .model
            .as_deref()
            .ok_or_else(|| CliError::Usage(format!("{} needs --model PATH", self.command)))?;
        let path = Path::new(arg);
        let text = if path.exists() {
            fs::read_to_string(path).map_err(|e| CliError::Usage(format!("cannot read model file {arg}: {e}")))?
        } else if let Some(text) = presets::preset(arg) {
            text.to_string()
        } else {
            return Err(CliError::Usage(format!(
                "cannot read model file {arg}: no such file and no preset of that name (presets: {})",
                presets::PRESETS.map(|(n, _)| n).join(", ")
            )));
        };
        let input = ModelInput::from_json(&text).map_err(|e| CliError::Usage(format!("invalid model JSON in {arg}: {e}")))?;
        let canonical = serde_json::to_string(&input).expect("model input serializes");
        Ok(LoadedModel {
            hash: hex::encode(Sha256::digest(canonical.as_bytes())),
            input,
            source: arg.to_string(),
        })
    }

    /// `{schema, manifest, params, units, result}`.
    pub fn envelope(&self, model: Option<&LoadedModel>, params: Value, units: Value, result: Value) -> Value {
        json!({
            "schema": SCHEMA,
            "manifest": self.manifest(model),
            "model": model.map(|m| json!({ "source": m.source, "config": m.input })),
            "params": params,
            "units": units,
            "result": result,
        })
    }

    /// Writes a JSON document to `--out` or stdout.
    pub fn emit_json(&self, doc: &Value) -> Result<(), CliError> {
        let text = serde_json::to_string_pretty(doc).expect("JSON values serialize");
        match &self.out {
            Some(path) => write_file(path, format!("{text}\n").as_bytes()),
            None => stdout_result(writeln!(io::stdout().lock(), "{text}")),
        }
    }

    /// Writes CSV rows to `--out` (with a `.manifest.json` sidecar) or to stdout
    /// (with the manifest document on stderr).
    pub fn emit_csv(&self, header: &[&str], rows: &[Vec<String>], doc: &Value) -> Result<(), CliError> {
        match &self.out {
            Some(path) => {
                write_csv(path, header, rows)?;
                let text = serde_json::to_string_pretty(doc).expect("JSON values serialize");
                write_file(&sidecar(path), format!("{text}\n").as_bytes())
            }
            None => {
                let mut w = csv::Writer::from_writer(io::stdout().lock());
                let written = header_and_rows(&mut w, header, rows).and_then(|_| w.flush().map_err(csv::Error::from));
                eprintln!("{}", serde_json::to_string(doc).expect("JSON values serialize"));
                match written {
                    Ok(()) => Ok(()),
                    Err(e) => match e.into_kind() {
                        csv::ErrorKind::Io(io) => stdout_result(Err(io)),
                        other => stdout_result(Err(io::Error::other(format!("{other:?}")))),
                    },
                }
            }
        }
    }
}

/// `<out>.manifest.json` next to a CSV output.
pub fn sidecar(path: &Path) -> PathBuf {
    let mut name = path.as_os_str().to_owned();
    name.push(".manifest.json");
    PathBuf::from(name)
}

pub fn write_file(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    fs::File::create(path)
        .and_then(|mut f| f.write_all(bytes))
        .map_err(|source| CliError::Write {
            path: path.to_path_buf(),
            source,
        })
}

/// A closed stdout (e.g. piped into `head`) is not an error.
fn stdout_result(r: io::Result<()>) -> Result<(), CliError> {
    match r {
        Err(e) if e.kind() != io::ErrorKind::BrokenPipe => Err(CliError::Write {
            path: PathBuf::from("<stdout>"),
            source: e,
        }),
        _ => Ok(()),
    }
}

fn header_and_rows<W: Write>(w: &mut csv::Writer<W>, header: &[&str], rows: &[Vec<String>]) -> csv::Result<()> {
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    Ok(())
}

pub fn write_csv(path: &Path, header: &[&str], rows: &[Vec<String>]) -> Result<(), CliError> {
    let err = |e: csv::Error| CliError::Write {
        path: path.to_path_buf(),
        source: io::Error::other(e),
    };
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    header_and_rows(&mut w, header, rows).map_err(err)?;
    w.flush().map_err(|source| CliError::Write {
        path: path.to_path_buf(),
        source,
    })
}

/// Shortest round-trip decimal form, so CSV values re-parse to the same `f64`.
pub fn num(v: f64) -> String {
    format!("{v:?}")
}
