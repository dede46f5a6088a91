//! `key = value` config files, merged into argv ahead of explicit flags.

use std::fs;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error("cannot read config file {path}: {source}")]
    Read { path: String, source: std::io::Error },
    #[error("{path}:{line}: expected `key = value`, got {text:?}")]
    Syntax { path: String, line: usize, text: String },
}

/// Parses the file into `--key value` tokens. `true` becomes a bare flag and
/// `false` drops the key.
pub fn load(path: &Path) -> Result<Vec<String>, ConfigError> {
    let text = fs::read_to_string(path).map_err(|source| ConfigError::Read { path: path.display().to_string(), source })?;
    parse(&text, &path.display().to_string())
}

pub fn parse(text: &str, origin: &str) -> Result<Vec<String>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let syntax = || ConfigError::Syntax { path: origin.to_string(), line: i + 1, text: raw.to_string() };
        let (key, value) = line.split_once('=').ok_or_else(syntax)?;
        let (key, value) = (key.trim(), value.trim());
        if key.is_empty() || key.contains(char::is_whitespace) {
            return Err(syntax());
        }
        let flag = format!("--{}", key.trim_start_matches("--"));
        match value {
            "true" => out.push(flag),
            "false" => {}
            v => {
                out.push(flag);
                out.push(v.to_string());
            }
        }
    }
    Ok(out)
}

/// Pulls `--config FILE` (or `--config=FILE`) out of `args` and splices the
/// file's tokens right after the subcommand, so explicit flags still win.
pub fn merge(mut args: Vec<String>) -> Result<Vec<String>, ConfigError> {
    let mut file = None;
    let mut i = 1;
    while i < args.len() {
        if args[i] == "--config" && i + 1 < args.len() {
            file = Some(args.remove(i + 1));
            args.remove(i);
        } else if let Some(f) = args[i].strip_prefix("--config=") {
            file = Some(f.to_string());
            args.remove(i);
        } else {
            i += 1;
        }
    }
    let Some(file) = file else { return Ok(args) };
    let tokens = load(Path::new(&file))?;
    let Some(sub) = args.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Ok(args);
    };
    let mut at = sub + 1;
    if args[sub] == "trace" && at < args.len() && !args[at].starts_with('-') {
        at += 1;
    }
    args.splice(at..at, tokens);
    Ok(args)
}
