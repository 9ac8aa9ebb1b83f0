//! Config loading, result/manifest writing and CSV input.

use std::fmt;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::Value;

#[derive(Debug)]
pub enum CliError {
    /// Bad flags, config or input files. Exit code 2.
    Input(String),
    /// A fit finished without converging; results were still written. Exit code 1.
    NotConverged(String),
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Input(m) => write!(f, "error: {m}"),
            CliError::NotConverged(m) => write!(f, "fit did not converge: {m}"),
        }
    }
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Input(_) => 2,
            CliError::NotConverged(_) => 1,
        }
    }
}

pub fn input_err(e: impl fmt::Display) -> CliError {
    CliError::Input(e.to_string())
}

/// Global options shared by every subcommand.
pub struct Context {
    pub out: PathBuf,
    pub seed: u64,
    pub subcommand: &'static str,
}

/// Reads the JSON config file. A top-level `seed` is split off and returned
/// separately; the rest is the subcommand's parameter tree.
pub fn load_config(path: Option<&Path>) -> Result<(Value, Option<u64>), CliError> {
    let Some(path) = path else {
        return Ok((Value::Object(Default::default()), None));
    };
    let text =
        fs::read_to_string(path).map_err(|e| CliError::Input(format!("cannot read config {}: {e}", path.display())))?;
    let mut v: Value = serde_json::from_str(&text)
        .map_err(|e| CliError::Input(format!("malformed config {}: {e}", path.display())))?;
    let Value::Object(map) = &mut v else {
        return Err(CliError::Input(format!("malformed config {}: top level must be an object", path.display())));
    };
    let seed = match map.remove("seed") {
        None | Some(Value::Null) => None,
        Some(s) => Some(s.as_u64().ok_or_else(|| {
            CliError::Input(format!("malformed config {}: seed must be a non-negative integer", path.display()))
        })?),
    };
    Ok((v, seed))
}

pub fn parse_config<T: DeserializeOwned>(v: Value, name: &str) -> Result<T, CliError> {
    serde_json::from_value(v).map_err(|e| CliError::Input(format!("malformed {name} config: {e}")))
}

/// Rounds every float to 12 significant digits.
pub fn round_json(v: Value) -> Value {
    match v {
        Value::Number(n) if n.is_f64() => {
            let x = n.as_f64().unwrap_or(f64::NAN);
            let r: f64 = format!("{x:.11e}").parse().unwrap_or(x);
            serde_json::Number::from_f64(r).map(Value::Number).unwrap_or(Value::Null)
        }
        Value::Array(a) => Value::Array(a.into_iter().map(round_json).collect()),
        Value::Object(m) => Value::Object(m.into_iter().map(|(k, v)| (k, round_json(v))).collect()),
        other => other,
    }
}

pub fn to_rounded<T: Serialize>(value: &T) -> Result<Value, CliError> {
    serde_json::to_value(value).map(round_json).map_err(input_err)
}

pub fn ensure_out(ctx: &Context) -> Result<(), CliError> {
    fs::create_dir_all(&ctx.out)
        .map_err(|e| CliError::Input(format!("cannot create output directory {}: {e}", ctx.out.display())))
}

pub fn write_json(path: &Path, v: &Value) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(v).map_err(input_err)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

/// Writes `manifest.json` with the resolved config and tool version.
pub fn write_manifest<T: Serialize>(ctx: &Context, config: &T) -> Result<(), CliError> {
    let v = serde_json::json!({
        "tool": "emitterlab",
        "version": env!("CARGO_PKG_VERSION"),
        "subcommand": ctx.subcommand,
        "seed": ctx.seed,
        "config": to_rounded(config)?,
    });
    write_json(&ctx.out.join("manifest.json"), &v)
}

/// Prints the result to stdout and writes `result.json`.
pub fn emit_result(ctx: &Context, result: &Value) -> Result<(), CliError> {
    write_json(&ctx.out.join("result.json"), result)?;
    let text = serde_json::to_string_pretty(result).map_err(input_err)?;
    // A closed stdout (e.g. piped into `head`) must not abort the run.
    let _ = writeln!(std::io::stdout().lock(), "{text}");
    Ok(())
}

pub fn out_file(ctx: &Context, name: &str) -> PathBuf {
    ctx.out.join(name)
}

pub fn create_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::create(path).map_err(|e| CliError::Input(format!("cannot write {}: {e}", path.display())))
}

pub fn open_file(path: &Path) -> Result<fs::File, CliError> {
    fs::File::open(path).map_err(|e| CliError::Input(format!("cannot read input {}: {e}", path.display())))
}

/// Reads a headed CSV into typed rows.
pub fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, CliError> {
    let mut rd = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(open_file(path)?);
    let rows = rd
        .deserialize()
        .collect::<Result<Vec<T>, _>>()
        .map_err(|e| CliError::Input(format!("malformed CSV {}: {e}", path.display())))?;
    if rows.is_empty() {
        return Err(CliError::Input(format!("CSV {} has no data rows", path.display())));
    }
    Ok(rows)
}

pub fn require<T: Clone>(v: &Option<T>, what: &str) -> Result<T, CliError> {
    v.clone().ok_or_else(|| CliError::Input(format!("missing {what}")))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rounding_keeps_twelve_digits() {
        let v = round_json(serde_json::json!({"a": 0.1 + 0.2, "b": [1.0 / 3.0, 7], "c": "x"}));
        assert_eq!(v["a"], serde_json::json!(0.3));
        assert_eq!(v["b"][0].as_f64().unwrap(), 0.333333333333);
        assert_eq!(v["b"][1], serde_json::json!(7));
    }
}
