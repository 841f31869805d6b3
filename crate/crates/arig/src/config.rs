//! Flat `key = value` configuration files.
//!
//! Every key of [`EngineConfig`] may appear at most once; missing keys keep
//! their defaults, unknown keys are rejected. An optional first entry
//! `preset = full|small` picks the defaults the rest of the file edits.
//! `#` starts a comment.

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use arig_core::EngineConfig;

use crate::error::{Error, Result};

macro_rules! fields {
    ($m:ident) => {
        $m! {
            chunk,
            context,
            heads,
            head_dim,
            d_model,
            d_ff,
            bidir_depth,
            integ_depth,
            context_depth,
            audio_dim,
            motion_dim,
            latent_dim,
            fps,
            audio_window,
            temporal_window,
            diffmlp_blocks,
            diffmlp_width,
            diffmlp_cond,
            time_embed_dim,
            train_steps,
            beta_start,
            beta_end,
            inference_steps,
            seed,
            keypoint_offset,
            keypoint_len
        }
    };
}

fn parse_value<T: FromStr>(key: &str, value: &str, line: usize) -> Result<T> {
    value.parse().map_err(|_| {
        Error::format(format!(
            "line {line}: `{value}` is not a valid value for `{key}`"
        ))
    })
}

fn set(cfg: &mut EngineConfig, key: &str, value: &str, line: usize) -> Result<()> {
    macro_rules! assign {
        ($($f:ident),*) => {
            match key {
                $(stringify!($f) => cfg.$f = parse_value(key, value, line)?,)*
                "vad.window" => cfg.vad.window = parse_value(key, value, line)?,
                "vad.threshold" => cfg.vad.threshold = parse_value(key, value, line)?,
                "vad.hangover" => cfg.vad.hangover = parse_value(key, value, line)?,
                _ => return Err(Error::format(format!("line {line}: unknown key `{key}`"))),
            }
        };
    }
    fields!(assign);
    Ok(())
}

pub fn preset(name: &str) -> Option<EngineConfig> {
    match name {
        "full" => Some(EngineConfig::default()),
        "small" => Some(EngineConfig::small()),
        _ => None,
    }
}

pub fn parse(text: &str) -> Result<EngineConfig> {
    let mut cfg = EngineConfig::default();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| Error::format(format!("line {line}: expected `key = value`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !seen.insert(key.to_string()) {
            return Err(Error::format(format!("line {line}: duplicate key `{key}`")));
        }
        if key == "preset" {
            if seen.len() != 1 {
                return Err(Error::format(format!(
                    "line {line}: `preset` must be the first entry"
                )));
            }
            cfg = preset(value)
                .ok_or_else(|| Error::format(format!("line {line}: unknown preset `{value}`")))?;
            continue;
        }
        set(&mut cfg, key, value, line)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

/// Every key with its current value, in a stable order.
pub fn to_text(cfg: &EngineConfig) -> String {
    let mut out = String::new();
    macro_rules! emit {
        ($($f:ident),*) => {
            $(let _ = writeln!(out, "{} = {}", stringify!($f), cfg.$f);)*
        };
    }
    fields!(emit);
    let _ = writeln!(out, "vad.window = {}", cfg.vad.window);
    let _ = writeln!(out, "vad.threshold = {}", cfg.vad.threshold);
    let _ = writeln!(out, "vad.hangover = {}", cfg.vad.hangover);
    out
}

pub fn load(path: &Path) -> Result<EngineConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse(&text).map_err(|e| match e {
        Error::Format(m) => Error::Format(format!("{}: {m}", path.display())),
        other => other,
    })
}
