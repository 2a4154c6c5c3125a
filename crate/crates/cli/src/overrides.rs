//! `KEY=VALUE` command-line overrides and sweep grids.

use std::fmt;

/// Malformed command-line configuration. Reported with exit code 1.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// Short names for the keys swept most often.
pub fn resolve_alias(key: &str) -> &str {
    match key {
        "k" => "sampler.k",
        "n" => "mining.top_n",
        "N" => "mining.queue_capacity",
        other => other,
    }
}

pub fn parse_pair(arg: &str) -> Result<(String, String), UsageError> {
    match arg.split_once('=') {
        Some((k, v)) if !k.is_empty() => Ok((resolve_alias(k.trim()).to_string(), v.trim().to_string())),
        _ => Err(UsageError(format!("expected KEY=VALUE, got `{arg}`"))),
    }
}

pub fn parse_pairs(args: &[String]) -> Result<Vec<(String, String)>, UsageError> {
    args.iter().map(|a| parse_pair(a)).collect()
}

/// Pulls `key=<usize>` out of `pairs`, leaving the rest.
pub fn take_usize(pairs: &mut Vec<(String, String)>, key: &str) -> Result<Option<usize>, UsageError> {
    let Some(i) = pairs.iter().position(|(k, _)| k == key) else {
        return Ok(None);
    };
    let (_, v) = pairs.remove(i);
    v.parse()
        .map(Some)
        .map_err(|_| UsageError(format!("`{key}` must be a non-negative integer, got `{v}`")))
}

/// One swept key and its values.
#[derive(Debug, Clone, PartialEq)]
pub struct Axis {
    pub key: String,
    pub values: Vec<String>,
}

/// Splits sweep arguments into grid axes (`KEY=a,b,c`) and fixed overrides.
/// TOML arrays (`KEY=[..]`) are single values.
pub fn split_grid(pairs: Vec<(String, String)>) -> Result<(Vec<Axis>, Vec<(String, String)>), UsageError> {
    let mut axes: Vec<Axis> = Vec::new();
    let mut fixed = Vec::new();
    for (key, value) in pairs {
        if value.starts_with('[') || !value.contains(',') {
            fixed.push((key, value));
            continue;
        }
        if axes.iter().any(|a| a.key == key) {
            return Err(UsageError(format!("axis `{key}` given twice")));
        }
        let values: Vec<String> = value.split(',').map(|v| v.trim().to_string()).collect();
        if values.iter().any(String::is_empty) {
            return Err(UsageError(format!("empty value in `{key}={value}`")));
        }
        axes.push(Axis { key, values });
    }
    Ok((axes, fixed))
}

/// Cartesian product of the axes; the first axis varies slowest.
pub fn grid_points(axes: &[Axis]) -> Vec<Vec<(String, String)>> {
    axes.iter().fold(vec![Vec::new()], |points, axis| {
        points
            .iter()
            .flat_map(|p| {
                axis.values.iter().map(move |v| {
                    let mut q = p.clone();
                    q.push((axis.key.clone(), v.clone()));
                    q
                })
            })
            .collect()
    })
}
