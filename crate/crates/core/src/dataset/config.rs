//! `key = value` text format for generator specs. Lists are comma
//! separated; co-occurrence entries are written `a:b:boost`. Blank lines
//! and `#` comments are ignored, missing keys keep their defaults.

use std::fmt::Write;
use std::str::FromStr;

use super::GeneratorSpec;
use crate::error::{Error, Result};

fn parse_value<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<T> {
    raw.trim()
        .parse()
        .map_err(|_| Error::Config(format!("line {line}: cannot parse {key} value {raw:?}")))
}

fn parse_list<T: FromStr>(line: usize, key: &str, raw: &str) -> Result<Vec<T>> {
    if raw.trim().is_empty() {
        return Ok(Vec::new());
    }
    raw.split(',').map(|item| parse_value(line, key, item)).collect()
}

pub fn parse_generator_spec(text: &str) -> Result<GeneratorSpec> {
    let mut spec = GeneratorSpec::default();
    let mut prevalence_line = 0;
    for (idx, raw_line) in text.lines().enumerate() {
        let line = idx + 1;
        let content = raw_line.split('#').next().unwrap_or("").trim();
        if content.is_empty() {
            continue;
        }
        let (key, value) = content
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {line}: expected `key = value`, got {content:?}")))?;
        let key = key.trim();
        match key {
            "num_classes" => spec.num_classes = parse_value(line, key, value)?,
            "num_samples" => spec.num_samples = parse_value(line, key, value)?,
            "num_groups" => spec.num_groups = parse_value(line, key, value)?,
            "image_height" => spec.image_height = parse_value(line, key, value)?,
            "image_width" => spec.image_width = parse_value(line, key, value)?,
            "channels" => spec.channels = parse_value(line, key, value)?,
            "normal_fraction" => spec.normal_fraction = parse_value(line, key, value)?,
            "noise_sigma" => spec.noise_sigma = parse_value(line, key, value)?,
            "seed" => spec.seed = parse_value(line, key, value)?,
            "class_prevalence" => {
                spec.class_prevalence = parse_list(line, key, value)?;
                prevalence_line = line;
            }
            "cooccurrence" => {
                spec.cooccurrence = value
                    .split(',')
                    .filter(|s| !s.trim().is_empty())
                    .map(|entry| {
                        let parts: Vec<&str> = entry.split(':').collect();
                        if parts.len() != 3 {
                            return Err(Error::Config(format!(
                                "line {line}: co-occurrence entry {entry:?} is not a:b:boost"
                            )));
                        }
                        Ok((
                            parse_value(line, key, parts[0])?,
                            parse_value(line, key, parts[1])?,
                            parse_value(line, key, parts[2])?,
                        ))
                    })
                    .collect::<Result<_>>()?;
            }
            other => return Err(Error::Config(format!("line {line}: unknown key {other:?}"))),
        }
    }
    spec.validate().map_err(|e| match e {
        Error::Config(msg) if msg.contains("prevalence") && prevalence_line > 0 => {
            Error::Config(format!("line {prevalence_line}: {msg}"))
        }
        other => other,
    })?;
    Ok(spec)
}

/// Inverse of `parse_generator_spec`.
pub fn render_generator_spec(spec: &GeneratorSpec) -> String {
    let join = |v: Vec<String>| v.join(", ");
    let mut s = String::new();
    let _ = writeln!(s, "num_classes = {}", spec.num_classes);
    let _ = writeln!(s, "num_samples = {}", spec.num_samples);
    let _ = writeln!(s, "num_groups = {}", spec.num_groups);
    let _ = writeln!(s, "image_height = {}", spec.image_height);
    let _ = writeln!(s, "image_width = {}", spec.image_width);
    let _ = writeln!(s, "channels = {}", spec.channels);
    let _ = writeln!(
        s,
        "class_prevalence = {}",
        join(spec.class_prevalence.iter().map(|p| p.to_string()).collect())
    );
    let _ = writeln!(
        s,
        "cooccurrence = {}",
        join(
            spec.cooccurrence
                .iter()
                .map(|(a, b, x)| format!("{a}:{b}:{x}"))
                .collect()
        )
    );
    let _ = writeln!(s, "normal_fraction = {}", spec.normal_fraction);
    let _ = writeln!(s, "noise_sigma = {}", spec.noise_sigma);
    let _ = writeln!(s, "seed = {}", spec.seed);
    s
}
