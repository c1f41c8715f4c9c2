//! Training configuration files.
//!
//! One `key = value` per line. Blank lines and lines starting with `#` are
//! ignored. `clean_dir` and `sigma` are required; everything else has a
//! default. A relative `clean_dir` is resolved against the directory of the
//! config file.
//!
//! | key | default |
//! |---|---|
//! | `clean_dir` | required |
//! | `sigma` | required (0..255 scale in both modes) |
//! | `mode` | `gray` (or `color`) |
//! | `crop` | 64 |
//! | `pairs` | 8 |
//! | `seed` | 0 |
//! | `stages` | 1 |
//! | `patch_rows`, `patch_cols` | 5, 5 |
//! | `window` | 17 |
//! | `group_size` | 8 |
//! | `greedy_iters` | 100 |
//! | `joint_iters` | 400 |
//! | `kernels` | 63 |
//! | `delta` | 100 (gray) or 0.4 (color) |
//! | `epsilon` | `ln 2 / h²` |
//! | `history` | 10 |

use std::collections::BTreeMap;
use std::path::Path;
use std::str::FromStr;

use nlnet::network::ColorMode;
use nlnet::patch::PatchGeometry;
use nlnet::train::schedule::TrainConfig;
use nlnet::{Error, Result};

const KEYS: &[&str] = &[
    "clean_dir",
    "sigma",
    "mode",
    "crop",
    "pairs",
    "seed",
    "stages",
    "patch_rows",
    "patch_cols",
    "window",
    "group_size",
    "greedy_iters",
    "joint_iters",
    "kernels",
    "delta",
    "epsilon",
    "history",
];

fn parse_value<T: FromStr>(
    map: &BTreeMap<String, (usize, String)>,
    key: &str,
) -> Result<Option<T>> {
    match map.get(key) {
        None => Ok(None),
        Some((line, raw)) => raw
            .parse()
            .map(Some)
            .map_err(|_| Error::Config(format!("line {line}: invalid value for `{key}`: {raw:?}"))),
    }
}

fn required<T: FromStr>(map: &BTreeMap<String, (usize, String)>, key: &str) -> Result<T> {
    parse_value(map, key)?.ok_or_else(|| Error::Config(format!("missing required key `{key}`")))
}

/// Parses config text. `base` is the directory relative paths are taken from.
pub fn parse_config(text: &str, base: &Path) -> Result<TrainConfig> {
    let mut map = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(Error::Config(format!(
                "line {}: expected key = value",
                i + 1
            )));
        };
        let (k, v) = (k.trim(), v.trim());
        if !KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        if map.insert(k.to_string(), (i + 1, v.to_string())).is_some() {
            return Err(Error::Config(format!(
                "line {}: duplicate key `{k}`",
                i + 1
            )));
        }
    }

    let dir: String = required(&map, "clean_dir")?;
    let sigma: f64 = required(&map, "sigma")?;
    let mode = match parse_value::<String>(&map, "mode")?.as_deref() {
        None | Some("gray") => ColorMode::Gray,
        Some("color") => ColorMode::Color,
        Some(other) => {
            return Err(Error::Config(format!(
                "mode must be `gray` or `color`, got `{other}`"
            )))
        }
    };
    let mut cfg = TrainConfig::new(base.join(dir), sigma, mode);
    macro_rules! opt {
        ($key:literal, $field:expr) => {
            if let Some(v) = parse_value(&map, $key)? {
                $field = v;
            }
        };
    }
    opt!("crop", cfg.crop);
    opt!("pairs", cfg.pairs);
    opt!("seed", cfg.seed);
    opt!("stages", cfg.stages);
    opt!("greedy_iters", cfg.greedy_iters);
    opt!("joint_iters", cfg.joint_iters);
    opt!("kernels", cfg.kernels);
    opt!("delta", cfg.delta);
    opt!("history", cfg.history);
    cfg.epsilon = parse_value(&map, "epsilon")?;
    let mut g = cfg.geom;
    opt!("patch_rows", g.patch_rows);
    opt!("patch_cols", g.patch_cols);
    opt!("window", g.window);
    opt!("group_size", g.group_size);
    cfg.geom = PatchGeometry::new(g.patch_rows, g.patch_cols, g.window, g.group_size)
        .map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<TrainConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })?;
    parse_config(&text, path.parent().unwrap_or(Path::new(".")))
}
