//! Flat `key = value` config files.
//!
//! Every key names a long flag of the chosen subcommand (`max_iter` and `max-iter` are
//! equivalent). Blank lines, `#` comments and `[section]` headers are ignored. A value
//! of `true` sets a switch; `false` leaves it unset.

use std::path::Path;

use crate::{CliError, CliResult};

fn parse_file(path: &Path) -> CliResult<Vec<String>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let mut args = Vec::new();
    for (n, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') || line.starts_with(';') || line.starts_with('[') {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(CliError::Usage(format!(
                "{}:{}: expected key = value",
                path.display(),
                n + 1
            )));
        };
        let key = key.trim().replace('_', "-");
        let value = value.trim().trim_matches('"');
        if key.is_empty() || key == "config" {
            return Err(CliError::Usage(format!("{}:{}: invalid key", path.display(), n + 1)));
        }
        match value {
            "true" => args.push(format!("--{key}")),
            "false" => {}
            v => {
                args.push(format!("--{key}"));
                args.push(v.to_string());
            }
        }
    }
    Ok(args)
}

/// Removes `--config FILE` from `argv` and splices the file's flags in right after the
/// subcommand, ahead of the user's own flags so that those override them.
pub fn expand_config(argv: Vec<String>) -> CliResult<Vec<String>> {
    let mut rest = Vec::with_capacity(argv.len());
    let mut config = None;
    let mut it = argv.into_iter();
    while let Some(a) = it.next() {
        if a == "--config" {
            let path = it
                .next()
                .ok_or_else(|| CliError::Usage("--config needs a file".into()))?;
            config = Some(path);
        } else if let Some(path) = a.strip_prefix("--config=") {
            config = Some(path.to_string());
        } else {
            rest.push(a);
        }
    }
    let Some(path) = config else {
        return Ok(rest);
    };
    let extra = parse_file(Path::new(&path))?;
    let Some(sub) = rest.iter().skip(1).position(|a| !a.starts_with('-')).map(|p| p + 1) else {
        return Err(CliError::Usage("missing subcommand".into()));
    };
    rest.splice(sub + 1..sub + 1, extra);
    Ok(rest)
}
