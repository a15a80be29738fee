//! Run configuration: a flat map of dotted keys resolved from defaults, an
//! optional JSON config file, the environment, and command-line flags — in
//! that order of increasing precedence.

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;

use crate::error::CliError;

/// Value shape a key accepts.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kind {
    U64,
    Usize,
    F64,
    Bool,
    Str,
    /// List of unsigned integers; flags accept `256,512`, files accept a
    /// JSON array or the same comma string.
    UsizeList,
}

/// One known configuration key.
pub struct KeySpec {
    pub key: &'static str,
    pub kind: Kind,
    /// JSON literal for the default, or `None` for optional keys.
    pub default: Option<&'static str>,
    /// Extra long flag for the common spellings.
    pub alias: Option<&'static str>,
    pub help: &'static str,
}

const fn key(
    key: &'static str,
    kind: Kind,
    default: Option<&'static str>,
    alias: Option<&'static str>,
    help: &'static str,
) -> KeySpec {
    KeySpec {
        key,
        kind,
        default,
        alias,
        help,
    }
}

/// Every key the CLI understands, with defaults. Flags use the same dotted
/// names; a JSON config file uses them as top-level field names.
pub const KEYS: &[KeySpec] = &[
    key("seed", Kind::U64, Some("0"), None, "master seed for every random stream"),
    key("layer", Kind::Usize, Some("4"), None, "1-based conv layer whose filters the generator models"),
    key("data.dir", Kind::Str, Some("\"data\""), Some("data"), "directory holding the four MNIST IDX files (env INVARIANCES_DATA)"),
    key("out", Kind::Str, Some("\"runs\""), None, "parent directory for timestamped run directories"),
    key("run.dir", Kind::Str, None, Some("run-dir"), "exact run directory to use (created if missing; lets stages share artifacts)"),
    key("cnn.checkpoint", Kind::Str, None, None, "classifier checkpoint to consume (default: <run dir>/cnn.ivf)"),
    key("gan.checkpoint", Kind::Str, None, None, "generator/critic checkpoint to consume (default: <run dir>/gan.ivf)"),
    key("cnn.epochs", Kind::Usize, Some("10"), Some("epochs"), "classifier training epochs"),
    key("cnn.batch", Kind::Usize, Some("128"), None, "classifier minibatch size"),
    key("cnn.lr", Kind::F64, Some("0.001"), None, "classifier RMSprop learning rate"),
    key("cnn.rho", Kind::F64, Some("0.9"), None, "classifier RMSprop decay"),
    key("cnn.eps", Kind::F64, Some("1e-8"), None, "classifier RMSprop epsilon"),
    key("cnn.eval_subset", Kind::Usize, Some("10000"), None, "training examples probed for the per-epoch accuracy line"),
    key("eval.batch", Kind::Usize, Some("256"), None, "batch size for accuracy evaluation passes"),
    key("gan.z_dim", Kind::Usize, Some("64"), None, "latent dimensionality of the generator"),
    key("gan.lambda", Kind::F64, Some("1.0"), None, "weight of the latent-recovery (information) term"),
    key("gan.batch", Kind::Usize, Some("64"), None, "images and codes per adversarial iteration"),
    key("gan.iters", Kind::Usize, Some("10000"), Some("iters"), "adversarial training iterations"),
    key("gan.lr", Kind::F64, Some("0.0001"), None, "RMSprop learning rate for G, D and Q"),
    key("gan.rho", Kind::F64, Some("0.99"), None, "RMSprop decay for G, D and Q"),
    key("gan.eps", Kind::F64, Some("1e-8"), None, "RMSprop epsilon for G, D and Q"),
    key("gan.g_hidden", Kind::UsizeList, Some("[256,512]"), None, "hidden widths of the generator MLP"),
    key("gan.d_channels", Kind::UsizeList, Some("[64,128]"), None, "channels of the critic's strided conv trunk"),
    key("gan.leaky_slope", Kind::F64, Some("0.2"), None, "negative slope of the leaky relu in G and the critic"),
    key("viz.grids", Kind::Usize, Some("10"), None, "number of traversal grids to invert and render"),
    key("viz.xi", Kind::F64, Some("2.0"), None, "half-width of the latent grid along each chosen coordinate"),
    key("viz.side", Kind::Usize, Some("5"), None, "cells per grid side (odd)"),
    key("viz.steps", Kind::Usize, Some("200"), None, "gradient-descent steps per cell inversion"),
    key("viz.step_size", Kind::F64, Some("0.05"), None, "inversion step size"),
    key("viz.alpha", Kind::F64, Some("6.0"), None, "exponent of the image prior's pixel-norm term"),
    key("viz.beta", Kind::F64, Some("2.0"), None, "exponent of the image prior's total-variation term"),
    key("viz.lambda_alpha", Kind::F64, Some("0.0001"), None, "weight of the pixel-norm prior term"),
    key("viz.lambda_tv", Kind::F64, Some("0.01"), None, "weight of the total-variation prior term"),
    key("viz.patience", Kind::Usize, Some("50"), None, "consecutive objective increases before an inversion is declared diverged"),
    key("viz.dims", Kind::Str, None, Some("dims"), "fixed latent pair `i,j` for every grid (default: a fresh seeded draw per grid)"),
    key("viz.png", Kind::Bool, Some("false"), Some("png"), "also write montages as PNG"),
    key("eval.draws", Kind::Usize, Some("10"), None, "latent draws averaged over for the filter-averaging evaluation"),
    key("eval.tail_epochs", Kind::Usize, Some("3"), None, "epochs of tail retraining"),
    key("eval.tail_batch", Kind::Usize, Some("128"), None, "tail-retraining minibatch size"),
    key("eval.tail_lr", Kind::F64, Some("0.001"), None, "tail-retraining RMSprop learning rate"),
    key("eval.tail_rho", Kind::F64, Some("0.9"), None, "tail-retraining RMSprop decay"),
    key("eval.tail_eps", Kind::F64, Some("1e-8"), None, "tail-retraining RMSprop epsilon"),
    key("eval.diversity_draws", Kind::Usize, Some("10"), None, "generated banks sampled for the diversity report"),
    key("eval.q_batches", Kind::Usize, Some("16"), None, "held-out batches for the latent-recovery MSE"),
];

fn spec(name: &str) -> Option<&'static KeySpec> {
    KEYS.iter().find(|k| k.key == name)
}

/// The resolved flat configuration.
#[derive(Debug, Clone)]
pub struct Config {
    map: BTreeMap<String, Value>,
}

impl Config {
    /// All defaults, optional keys absent.
    pub fn defaults() -> Config {
        let mut map = BTreeMap::new();
        for k in KEYS {
            if let Some(d) = k.default {
                let v: Value = serde_json::from_str(d).expect("default literals are valid JSON");
                map.insert(k.key.to_string(), v);
            }
        }
        Config { map }
    }

    /// Merge a JSON config file: one flat object, dotted keys, known keys
    /// only.
    pub fn apply_file(&mut self, path: &Path) -> Result<(), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            CliError::config(format!("cannot read config file {}: {e}", path.display()))
        })?;
        let parsed: Value = serde_json::from_str(&text).map_err(|e| {
            CliError::config(format!("config file {} is not valid JSON: {e}", path.display()))
        })?;
        let obj = parsed.as_object().ok_or_else(|| {
            CliError::config(format!(
                "config file {} must be a single JSON object with flat dotted keys",
                path.display()
            ))
        })?;
        for (name, value) in obj {
            let k = spec(name).ok_or_else(|| {
                CliError::config(format!("unknown config key `{name}` in {}", path.display()))
            })?;
            if value.is_null() {
                self.map.remove(name);
                continue;
            }
            let coerced = coerce_json(k, value)
                .map_err(|why| CliError::config(format!("config key `{name}`: {why}")))?;
            self.map.insert(name.clone(), coerced);
        }
        Ok(())
    }

    /// Environment overrides (currently the data directory).
    pub fn apply_env(&mut self) {
        if let Ok(dir) = std::env::var("INVARIANCES_DATA") {
            if !dir.is_empty() {
                self.map.insert("data.dir".into(), Value::String(dir));
            }
        }
    }

    /// Set one key from a flag's string value.
    pub fn set_flag(&mut self, name: &str, raw: &str) -> Result<(), CliError> {
        let k = spec(name)
            .ok_or_else(|| CliError::config(format!("unknown config key `{name}`")))?;
        let value = parse_flag(k, raw)
            .map_err(|why| CliError::config(format!("flag --{name} {raw}: {why}")))?;
        self.map.insert(name.to_string(), value);
        Ok(())
    }

    /// The fully resolved map, for embedding in a manifest.
    pub fn resolved(&self) -> &BTreeMap<String, Value> {
        &self.map
    }

    pub fn u64(&self, name: &str) -> u64 {
        self.map[name].as_u64().expect("typed at insert")
    }

    pub fn usize(&self, name: &str) -> usize {
        self.u64(name) as usize
    }

    pub fn f64(&self, name: &str) -> f64 {
        self.map[name].as_f64().expect("typed at insert")
    }

    pub fn bool(&self, name: &str) -> bool {
        self.map[name].as_bool().expect("typed at insert")
    }

    pub fn str(&self, name: &str) -> &str {
        self.map[name].as_str().expect("typed at insert")
    }

    pub fn opt_str(&self, name: &str) -> Option<&str> {
        self.map.get(name).and_then(|v| v.as_str())
    }

    pub fn usize_list(&self, name: &str) -> Vec<usize> {
        self.map[name]
            .as_array()
            .expect("typed at insert")
            .iter()
            .map(|v| v.as_u64().expect("typed at insert") as usize)
            .collect()
    }

    /// Validate cross-key constraints that individual parses cannot see.
    pub fn validate(&self) -> Result<(), CliError> {
        if !(1..=5).contains(&self.usize("layer")) {
            return Err(CliError::config("`layer` must be in 1..=5"));
        }
        if self.usize("viz.side") % 2 == 0 {
            return Err(CliError::config("`viz.side` must be odd"));
        }
        if let Some(dims) = self.opt_str("viz.dims") {
            let (i, j) = parse_dims(dims)?;
            let z = self.usize("gan.z_dim");
            if i == j || i >= z || j >= z {
                return Err(CliError::config(format!(
                    "`viz.dims` must name two distinct coordinates below gan.z_dim={z}"
                )));
            }
        }
        for list in ["gan.g_hidden", "gan.d_channels"] {
            if self.usize_list(list).is_empty() {
                return Err(CliError::config(format!("`{list}` must not be empty")));
            }
        }
        Ok(())
    }
}

/// Parse a `i,j` coordinate pair.
pub fn parse_dims(text: &str) -> Result<(usize, usize), CliError> {
    let parts: Vec<&str> = text.split(',').map(str::trim).collect();
    if parts.len() != 2 {
        return Err(CliError::config(format!("`{text}` is not of the form i,j")));
    }
    let parse = |s: &str| {
        s.parse::<usize>()
            .map_err(|_| CliError::config(format!("`{s}` is not a coordinate index")))
    };
    Ok((parse(parts[0])?, parse(parts[1])?))
}

fn coerce_json(k: &KeySpec, v: &Value) -> Result<Value, String> {
    match k.kind {
        Kind::U64 | Kind::Usize => v
            .as_u64()
            .map(Value::from)
            .ok_or_else(|| format!("expected an unsigned integer, got {v}")),
        Kind::F64 => v
            .as_f64()
            .map(Value::from)
            .ok_or_else(|| format!("expected a number, got {v}")),
        Kind::Bool => v
            .as_bool()
            .map(Value::from)
            .ok_or_else(|| format!("expected true or false, got {v}")),
        Kind::Str => v
            .as_str()
            .map(Value::from)
            .ok_or_else(|| format!("expected a string, got {v}")),
        Kind::UsizeList => {
            if let Some(arr) = v.as_array() {
                let items: Option<Vec<u64>> = arr.iter().map(|e| e.as_u64()).collect();
                return items
                    .map(Value::from)
                    .ok_or_else(|| format!("expected unsigned integers, got {v}"));
            }
            if let Some(s) = v.as_str() {
                return parse_usize_list(s).map_err(|e| e.message);
            }
            Err(format!("expected an array of unsigned integers, got {v}"))
        }
    }
}

fn parse_flag(k: &KeySpec, raw: &str) -> Result<Value, String> {
    match k.kind {
        Kind::U64 | Kind::Usize => raw
            .parse::<u64>()
            .map(Value::from)
            .map_err(|_| format!("`{raw}` is not an unsigned integer")),
        Kind::F64 => raw
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .and_then(serde_json::Number::from_f64)
            .map(Value::Number)
            .ok_or_else(|| format!("`{raw}` is not a finite number")),
        Kind::Bool => match raw {
            "true" => Ok(Value::Bool(true)),
            "false" => Ok(Value::Bool(false)),
            _ => Err(format!("`{raw}` is not `true` or `false`")),
        },
        Kind::Str => Ok(Value::String(raw.to_string())),
        Kind::UsizeList => parse_usize_list(raw).map_err(|e| e.message),
    }
}

fn parse_usize_list(raw: &str) -> Result<Value, CliError> {
    let items: Result<Vec<u64>, _> = raw
        .trim()
        .trim_start_matches('[')
        .trim_end_matches(']')
        .split(',')
        .map(|s| s.trim().parse::<u64>())
        .collect();
    items
        .map(Value::from)
        .map_err(|_| CliError::config(format!("`{raw}` is not a comma-separated list of unsigned integers")))
}
