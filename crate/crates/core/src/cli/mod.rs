//! The `h4d` command line: `gen`, `train`, `infer` and `eval`.
//!
//! Settings resolve as flags over an optional JSON config file over
//! defaults, and every command prints its effective configuration first.
//!
//! Exit codes: 0 success, 2 invalid configuration or input shape, 3 I/O or
//! file format error, 4 non-finite training loss, 5 strict evaluation
//! failure, 1 anything else.

mod commands;

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{Map, Value};

use crate::error::{Error, Result};
use crate::recurrence::UpdateMode;

pub use commands::{cmd_eval, cmd_gen, cmd_infer, cmd_train, model_config_for, EvalRun, GenRun, InferRun, InferSummary, TrainRun};

pub const EXIT_OK: i32 = 0;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_IO: i32 = 3;
pub const EXIT_NAN: i32 = 4;
pub const EXIT_STRICT: i32 = 5;

/// Environment variable for the worker count of `gen` and `eval`.
pub const WORKERS_ENV: &str = "H4D_WORKERS";

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) | Error::Contract(_) | Error::Shape { .. } | Error::Domain(_) => EXIT_CONFIG,
        Error::Io { .. } | Error::Json { .. } | Error::Format(_) => EXIT_IO,
        Error::NonFinite(_) => EXIT_NAN,
        Error::EstimationFailed(_) => EXIT_STRICT,
        Error::Degenerate(_) => 1,
    }
}

#[derive(Debug, Parser)]
#[command(name = "h4d", version, about = "Online 4D human-scene reconstruction at desk scale")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic dataset.
    Gen(GenArgs),
    /// Train a model on a generated dataset.
    Train(TrainArgs),
    /// Stream sequences through a checkpoint and write per-frame records.
    Infer(InferArgs),
    /// Score prediction streams against a dataset.
    Eval(EvalArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// JSON file with dataset settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub sequences: Option<usize>,
    #[arg(long)]
    pub val_sequences: Option<usize>,
    #[arg(long)]
    pub frames: Option<usize>,
    #[arg(long)]
    pub width: Option<usize>,
    #[arg(long)]
    pub height: Option<usize>,
    #[arg(long)]
    pub focal: Option<f64>,
    #[arg(long)]
    pub people_min: Option<usize>,
    #[arg(long)]
    pub people_max: Option<usize>,
    #[arg(long)]
    pub n_boxes: Option<usize>,
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory for checkpoints and metrics.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Continue from `<out>/checkpoint`.
    #[arg(long)]
    pub resume: bool,
    #[arg(long)]
    pub steps: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub warmup: Option<u64>,
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub freeze_backbone: bool,
    #[arg(long)]
    pub ckpt_every: Option<u64>,
    #[arg(long)]
    pub val_every: Option<u64>,
    #[arg(long)]
    pub grad_clip: Option<f64>,
    /// Disable the prior encoder.
    #[arg(long)]
    pub no_prior: bool,
    /// Prior pretraining steps (0 skips pretraining).
    #[arg(long)]
    pub prior_steps: Option<u64>,
    #[arg(long)]
    pub max_train: Option<usize>,
    #[arg(long)]
    pub max_val: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    /// Checkpoint directory.
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dataset directory to read sequences from.
    #[arg(long, conflicts_with = "images")]
    pub data: Option<PathBuf>,
    /// Directory of `.t4dr` frames, streamed in name order.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Output directory for `<sequence>.jsonl` and dumps.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `train`, `val` or `all`.
    #[arg(long)]
    pub split: Option<String>,
    /// Explicit sequence names (overrides the split).
    #[arg(long, num_args = 1..)]
    pub seqs: Vec<String>,
    #[arg(long)]
    pub mode: Option<UpdateMode>,
    /// Reset period in frames.
    #[arg(long)]
    pub reset: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub export_depth: bool,
    #[arg(long)]
    pub export_mask: bool,
    #[arg(long)]
    pub export_ply: bool,
    #[arg(long)]
    pub export_obj: bool,
    /// Body template directory for joint output with `--images`.
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Directory of prediction streams.
    #[arg(long)]
    pub pred: PathBuf,
    /// Where to write `report.json` and `report.txt`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<String>,
    #[arg(long)]
    pub strict: bool,
    /// Fit scale in the first-two-frames alignment.
    #[arg(long)]
    pub w_align_scale: bool,
    #[arg(long, env = WORKERS_ENV)]
    pub workers: Option<usize>,
}

impl clap::ValueEnum for UpdateMode {
    fn value_variants<'a>() -> &'a [Self] {
        &[UpdateMode::Vanilla, UpdateMode::Ttt]
    }

    fn to_possible_value(&self) -> Option<clap::builder::PossibleValue> {
        Some(clap::builder::PossibleValue::new(match self {
            UpdateMode::Vanilla => "vanilla",
            UpdateMode::Ttt => "ttt",
        }))
    }
}

/// Flag overrides as `(dotted key, value)`; `None` entries are skipped.
pub(crate) type Overrides = Vec<(&'static str, Option<Value>)>;

pub(crate) fn ov<T: Serialize>(key: &'static str, v: Option<T>) -> (&'static str, Option<Value>) {
    (key, v.map(|x| serde_json::to_value(x).expect("plain value")))
}

fn set_path(root: &mut Value, key: &str, v: Value) -> Result<()> {
    let mut cur = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, p) in parts.iter().enumerate() {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| Error::Config(format!("setting {key}: parent is not an object")))?;
        if i + 1 == parts.len() {
            obj.insert((*p).to_string(), v);
            return Ok(());
        }
        cur = obj.entry((*p).to_string()).or_insert_with(|| Value::Object(Map::new()));
    }
    Ok(())
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Resolves a configuration: `defaults`, then the JSON file, then flags.
/// Unknown keys in the file are rejected.
pub fn layered<T: Serialize + DeserializeOwned>(defaults: &T, file: Option<&Path>, flags: Overrides) -> Result<T> {
    let mut v = serde_json::to_value(defaults).map_err(|e| Error::Config(format!("defaults: {e}")))?;
    if let Some(path) = file {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let f: Value = serde_json::from_str(&s).map_err(|e| Error::json(path, e))?;
        if !f.is_object() {
            return Err(Error::Config(format!("{} must hold a JSON object", path.display())));
        }
        check_keys(&v, &f, "")?;
        merge(&mut v, f);
    }
    for (k, x) in flags {
        if let Some(x) = x {
            set_path(&mut v, k, x)?;
        }
    }
    serde_json::from_value(v).map_err(|e| Error::Config(format!("configuration: {e}")))
}

fn check_keys(base: &Value, over: &Value, prefix: &str) -> Result<()> {
    if let (Value::Object(b), Value::Object(o)) = (base, over) {
        for (k, v) in o {
            match b.get(k) {
                None => return Err(Error::Config(format!("unknown setting {prefix}{k}"))),
                Some(bv) => check_keys(bv, v, &format!("{prefix}{k}."))?,
            }
        }
    }
    Ok(())
}

/// Prints the effective configuration block.
pub fn echo<T: Serialize>(cmd: &str, cfg: &T) {
    let s = serde_json::to_string_pretty(cfg).unwrap_or_default();
    println!("# h4d {cmd} effective config\n{s}");
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, S>(args: I) -> i32
where
    I: IntoIterator<Item = S>,
    S: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_CONFIG } else { EXIT_OK };
        }
    };
    let res = match cli.command {
        Command::Gen(a) => cmd_gen(&a).map(|_| ()),
        Command::Train(a) => cmd_train(&a).map(|_| ()),
        Command::Infer(a) => cmd_infer(&a).map(|_| ()),
        Command::Eval(a) => cmd_eval(&a).map(|_| ()),
    };
    match res {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde::Deserialize;

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Inner {
        a: u32,
        b: f64,
    }

    #[derive(Debug, PartialEq, Serialize, Deserialize)]
    struct Outer {
        x: u32,
        inner: Inner,
    }

    #[test]
    fn flags_beat_file_beat_defaults() {
        let d = Outer {
            x: 1,
            inner: Inner { a: 2, b: 3.0 },
        };
        let dir = tempfile::tempdir().unwrap();
        let f = dir.path().join("c.json");
        std::fs::write(&f, r#"{"x": 10, "inner": {"a": 20}}"#).unwrap();
        let out: Outer = layered(&d, Some(&f), vec![ov("inner.a", Some(200)), ov("x", None::<u32>)]).unwrap();
        assert_eq!(out, Outer { x: 10, inner: Inner { a: 200, b: 3.0 } });
        std::fs::write(&f, r#"{"y": 1}"#).unwrap();
        assert!(matches!(layered(&d, Some(&f), vec![]), Err(Error::Config(_))));
    }

    #[test]
    fn exit_codes_are_stable() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::io("p", std::io::Error::other("x"))), 3);
        assert_eq!(exit_code(&Error::NonFinite("x".into())), 4);
        assert_eq!(exit_code(&Error::EstimationFailed("x".into())), 5);
        assert_eq!(main_with_args(["h4d", "bogus"]), 2);
    }
}
