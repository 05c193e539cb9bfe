//! `key = value` recipe files for `simulate`.
//!
//! ```text
//! # 2000 / 500 / 500 records
//! seed = 7
//! counts = 2000, 500, 500
//! noise_factors = 0.001, 0.15, 0.25, 0.5, 0.75, 1, 2, 5
//! af_cv = 0.15, 0.30
//! ```
//!
//! Keys not given keep their defaults.

use crate::error::{Error, Result};
use crate::sim::DatasetRecipe;

fn list(key: &str, v: &str) -> Result<Vec<f64>> {
    v.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| Error::Config(format!("{key}: `{}` is not a number ({e})", s.trim())))
        })
        .collect()
}

fn scalar(key: &str, v: &str) -> Result<f64> {
    match list(key, v)?.as_slice() {
        [x] => Ok(*x),
        other => Err(Error::Config(format!("{key} takes one value, got {}", other.len()))),
    }
}

fn count(key: &str, v: &str) -> Result<usize> {
    v.trim()
        .parse::<usize>()
        .map_err(|e| Error::Config(format!("{key}: `{}` is not a count ({e})", v.trim())))
}

fn range(key: &str, v: &str) -> Result<(f64, f64)> {
    match list(key, v)?.as_slice() {
        [lo, hi] => Ok((*lo, *hi)),
        [x] => Ok((*x, *x)),
        other => Err(Error::Config(format!("{key} takes `lo, hi`, got {} values", other.len()))),
    }
}

/// Apply the `key = value` lines of `text` on top of `base`.
pub fn parse_recipe(text: &str, base: DatasetRecipe) -> Result<DatasetRecipe> {
    let mut r = base;
    for (no, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("recipe line {}: expected `key = value`", no + 1)))?;
        let (key, value) = (key.trim(), value.trim());
        match key {
            "seed" => r.seed = value.parse().map_err(|e| Error::Config(format!("seed: {e}")))?,
            "bpm" => r.bpm = list(key, value)?,
            "noise_factors" => r.noise_factors = list(key, value)?,
            "af_fraction" => r.af_fraction = scalar(key, value)?,
            "counts" => {
                let c: Vec<usize> = value.split(',').map(|s| count(key, s)).collect::<Result<_>>()?;
                r.counts = c
                    .try_into()
                    .map_err(|c: Vec<usize>| Error::Config(format!("counts takes train, val, test; got {} values", c.len())))?;
            }
            "windows_per_subject" => r.windows_per_subject = count(key, value)?,
            "record_s" => r.record_s = scalar(key, value)?,
            "fs" => r.fs = scalar(key, value)?,
            "af_cv" => r.af_cv = range(key, value)?,
            "sinus_rsa_depth" => r.sinus_rsa_depth = scalar(key, value)?,
            "bw_amp" => r.bw_amp = range(key, value)?,
            "bw_freq" => r.bw_freq = range(key, value)?,
            "am_depth" => r.am_depth = range(key, value)?,
            "am_freq" => r.am_freq = range(key, value)?,
            "qa_excellent_max" => r.qa.excellent_max = scalar(key, value)?,
            "qa_acceptable_max" => r.qa.acceptable_max = scalar(key, value)?,
            other => return Err(Error::Config(format!("recipe line {}: unknown key `{other}`", no + 1))),
        }
    }
    r.validate()?;
    Ok(r)
}
