use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use m6_core::patches::{load_and_resize, split_patches, ImageTensor, RawPatches};
use serde::{Deserialize, Serialize};
use serde_json::Value;

/// Exit status 1 for usage errors, 2 for everything about the data.
#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Data(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Usage(m) | CliError::Data(m) => f.write_str(m),
        }
    }
}

impl From<m6_core::Error> for CliError {
    fn from(e: m6_core::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

pub type CliResult<T> = std::result::Result<T, CliError>;

pub fn data_err(path: &Path, e: impl fmt::Display) -> CliError {
    CliError::Data(format!("{}: {e}", path.display()))
}

pub fn read_to_string(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| data_err(path, e))
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    serde_json::from_str(&read_to_string(path)?).map_err(|e| data_err(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| data_err(path, e))
}

pub fn read_jsonl<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<Vec<T>> {
    read_to_string(path)?
        .lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| data_err(path, format!("line {}: {e}", i + 1))))
        .collect()
}

pub fn ensure_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|e| data_err(dir, e))
}

/// Everything needed to rerun a command.
#[derive(Debug, Serialize)]
pub struct Manifest<'a, A: Serialize> {
    pub command: &'a str,
    pub version: &'a str,
    pub seed: Option<u64>,
    pub args: &'a A,
    /// Effective configuration after defaults and overrides.
    pub config: Value,
}

pub const VERSION: &str = concat!(env!("CARGO_PKG_VERSION"), "-", env!("M6_GIT_DESCRIBE"));

pub fn write_manifest<A: Serialize>(path: &Path, command: &str, seed: Option<u64>, args: &A, config: Value) -> CliResult<()> {
    write_json(path, &Manifest { command, version: VERSION, seed, args, config })
}

/// `out.jsonl` -> `out.manifest.json`.
pub fn manifest_beside(out: &Path) -> PathBuf {
    let stem = out.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    out.with_file_name(format!("{stem}.manifest.json"))
}

/// Passages from plain text (one per line) or cleaned-record JSONL, where
/// only accepted records with text count.
pub fn read_passages(path: &Path) -> CliResult<Vec<String>> {
    let mut out = Vec::new();
    for line in read_to_string(path)?.lines() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        match serde_json::from_str::<Value>(line) {
            Ok(Value::Object(obj)) => {
                let accepted = obj.get("reject_reason").is_none_or(Value::is_null);
                if let (true, Some(Value::String(t))) = (accepted, obj.get("text")) {
                    if !t.is_empty() {
                        out.push(t.clone());
                    }
                }
            }
            _ => out.push(line.to_string()),
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Deserialize)]
pub struct CaptionLine {
    pub image: String,
    pub caption: String,
}

/// Caption lines with images loaded at `side` and resolved against the
/// file's directory.
pub fn read_captions(path: &Path, side: usize) -> CliResult<Vec<(ImageTensor, String)>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_jsonl::<CaptionLine>(path)?
        .into_iter()
        .map(|c| {
            let img_path = base.join(&c.image);
            let img = load_and_resize(&img_path, side).map_err(|e| data_err(&img_path, e))?;
            Ok((img, c.caption))
        })
        .collect()
}

/// Patch side for a model whose patch features have `patch_dim` values.
pub fn patch_side(patch_dim: usize) -> CliResult<usize> {
    let side = ((patch_dim / 3) as f64).sqrt().round() as usize;
    if side == 0 || side * side * 3 != patch_dim {
        return Err(CliError::Data(format!("patch_dim {patch_dim} is not 3 x side^2")));
    }
    Ok(side)
}

pub fn image_patches(path: &Path, side: usize, patch_dim: usize) -> CliResult<RawPatches> {
    let img = load_and_resize(path, side).map_err(|e| data_err(path, e))?;
    Ok(split_patches(&img, patch_side(patch_dim)?)?)
}
