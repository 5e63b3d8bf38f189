//! Flat key-value config files: one dotted-path key per line, `#` comments,
//! unknown keys rejected. `--override KEY=VALUE` entries are applied on top
//! using the same syntax; a bare key (no dot) is matched against the last
//! path segment of the known keys when unambiguous.

use std::collections::BTreeMap;
use std::path::PathBuf;

use basis_core::model::{LayerMode, ModelKind, Precision};
use basis_core::train::TrainConfig;

/// Keys understood by the parser, excluding the open `layer_mode.*` family.
const KNOWN_KEYS: &[&str] = &[
    "model.kind",
    "model.d_model",
    "model.n_heads",
    "model.n_layers",
    "model.vocab_size",
    "model.seq_len",
    "train.batch_size",
    "train.mode",
    "train.rank",
    "train.lambda",
    "train.epsilon",
    "train.lr",
    "train.momentum",
    "train.steps",
    "train.eval_interval",
    "train.seed",
    "train.precision",
    "train.eval_batches",
    "corpus.path",
    "corpus.split_fraction",
    "output.dir",
    "sweep.ranks",
    "sweep.jobs",
    "diag.sts_batch",
    "diag.sts_rank",
    "diag.sts_trials",
    "diag.var_trials",
    "diag.hashing",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DiagHashing {
    Both,
    Uniform,
}

#[derive(Debug, Clone)]
pub struct DiagConfig {
    pub sts_batch: usize,
    pub sts_rank: usize,
    pub sts_trials: usize,
    pub var_trials: usize,
    pub hashing: DiagHashing,
}

impl Default for DiagConfig {
    fn default() -> Self {
        DiagConfig {
            sts_batch: 8,
            sts_rank: 4,
            sts_trials: 20_000,
            var_trials: 10_000,
            hashing: DiagHashing::Both,
        }
    }
}

#[derive(Debug, Clone)]
pub struct AppConfig {
    pub train: TrainConfig,
    pub corpus_path: Option<PathBuf>,
    pub split_fraction: f64,
    pub out_dir: PathBuf,
    pub ranks: Vec<usize>,
    pub jobs: usize,
    pub diag: DiagConfig,
}

pub fn config_error(key: &str, reason: impl Into<String>) -> basis_core::Error {
    basis_core::Error::Config { key: key.to_string(), reason: reason.into() }
}

/// Parse file contents into an ordered key-value map, rejecting unknown keys
/// and malformed lines.
pub fn parse_key_values(text: &str) -> Result<BTreeMap<String, String>, basis_core::Error> {
    let mut map = BTreeMap::new();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line.split_once('=').ok_or_else(|| {
            config_error(&format!("line {}", lineno + 1), format!("expected KEY = VALUE, got {line:?}"))
        })?;
        let key = key.trim().to_string();
        let value = value.trim().to_string();
        validate_key(&key)?;
        map.insert(key, value);
    }
    Ok(map)
}

fn validate_key(key: &str) -> Result<(), basis_core::Error> {
    if key.starts_with("layer_mode.") && key.len() > "layer_mode.".len() {
        return Ok(());
    }
    if KNOWN_KEYS.contains(&key) {
        return Ok(());
    }
    Err(config_error(key, "unknown key"))
}

/// Apply one `--override KEY=VALUE`. Bare keys (no dot) resolve against the
/// last path segment of the known keys when the match is unique.
pub fn apply_override(
    map: &mut BTreeMap<String, String>,
    entry: &str,
) -> Result<(), basis_core::Error> {
    let (key, value) = entry
        .split_once('=')
        .ok_or_else(|| config_error(entry, "override must be KEY=VALUE"))?;
    let key = key.trim();
    let value = value.trim().to_string();
    if key.contains('.') {
        validate_key(key)?;
        map.insert(key.to_string(), value);
        return Ok(());
    }
    let matches: Vec<&&str> =
        KNOWN_KEYS.iter().filter(|k| k.rsplit('.').next() == Some(key)).collect();
    match matches.as_slice() {
        [full] => {
            map.insert(full.to_string(), value);
            Ok(())
        }
        [] => Err(config_error(key, "unknown key")),
        multiple => Err(config_error(
            key,
            format!(
                "ambiguous, matches {}",
                multiple.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(", ")
            ),
        )),
    }
}

fn parse<T: std::str::FromStr>(map: &BTreeMap<String, String>, key: &str, default: T) -> Result<T, basis_core::Error>
where
    T::Err: std::fmt::Display,
{
    match map.get(key) {
        None => Ok(default),
        Some(raw) => raw.parse().map_err(|e| config_error(key, format!("invalid value {raw:?}: {e}"))),
    }
}

pub fn parse_ranks(raw: &str) -> Result<Vec<usize>, basis_core::Error> {
    let ranks: Result<Vec<usize>, _> = raw
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse::<usize>().map_err(|e| config_error("sweep.ranks", format!("invalid rank {s:?}: {e}"))))
        .collect();
    let ranks = ranks?;
    if ranks.is_empty() {
        return Err(config_error("sweep.ranks", "must list at least one rank"));
    }
    if ranks.contains(&0) {
        return Err(config_error("sweep.ranks", "ranks must be >= 1"));
    }
    Ok(ranks)
}

/// Build the application config from a parsed key-value map.
pub fn build(map: &BTreeMap<String, String>) -> Result<AppConfig, basis_core::Error> {
    let mut train = TrainConfig::desk_default();

    if let Some(kind) = map.get("model.kind") {
        train.model = match kind.as_str() {
            "transformer" => ModelKind::Transformer,
            "mlp" => ModelKind::Mlp,
            other => return Err(config_error("model.kind", format!("expected transformer|mlp, got {other:?}"))),
        };
    }
    train.d_model = parse(map, "model.d_model", train.d_model)?;
    train.n_heads = parse(map, "model.n_heads", train.n_heads)?;
    train.n_layers = parse(map, "model.n_layers", train.n_layers)?;
    train.vocab_size = parse(map, "model.vocab_size", train.vocab_size)?;
    train.seq_len = parse(map, "model.seq_len", train.seq_len)?;
    train.batch_size = parse(map, "train.batch_size", train.batch_size)?;
    if let Some(mode) = map.get("train.mode") {
        train.mode = match mode.as_str() {
            "exact" => LayerMode::Exact,
            "basis" => LayerMode::Basis,
            other => return Err(config_error("train.mode", format!("expected exact|basis, got {other:?}"))),
        };
    }
    train.rank = parse(map, "train.rank", train.rank)?;
    train.lambda = parse(map, "train.lambda", train.lambda)?;
    train.epsilon = parse(map, "train.epsilon", train.epsilon)?;
    train.lr = parse(map, "train.lr", train.lr)?;
    train.momentum = parse(map, "train.momentum", train.momentum)?;
    train.steps = parse(map, "train.steps", train.steps)?;
    train.eval_interval = parse(map, "train.eval_interval", train.eval_interval)?;
    train.seed = parse(map, "train.seed", train.seed)?;
    if let Some(precision) = map.get("train.precision") {
        train.precision = match precision.as_str() {
            "f64" => Precision::F64,
            "f32" => Precision::F32,
            other => return Err(config_error("train.precision", format!("expected f64|f32, got {other:?}"))),
        };
    }
    train.eval_batches = parse(map, "train.eval_batches", train.eval_batches)?;
    for (key, value) in map.iter() {
        if let Some(layer) = key.strip_prefix("layer_mode.") {
            let mode = match value.as_str() {
                "exact" => LayerMode::Exact,
                "basis" => LayerMode::Basis,
                other => return Err(config_error(key, format!("expected exact|basis, got {other:?}"))),
            };
            train.layer_modes.insert(layer.to_string(), mode);
        }
    }

    let corpus_path = map.get("corpus.path").map(PathBuf::from);
    let split_fraction = parse(map, "corpus.split_fraction", 0.9)?;
    let out_dir = PathBuf::from(map.get("output.dir").cloned().unwrap_or_else(|| "out".into()));
    let ranks = match map.get("sweep.ranks") {
        Some(raw) => parse_ranks(raw)?,
        None => vec![1, 8, 16, 32, 64],
    };
    let jobs = parse(map, "sweep.jobs", 1usize)?;
    if jobs == 0 {
        return Err(config_error("sweep.jobs", "must be >= 1"));
    }

    let mut diag = DiagConfig::default();
    diag.sts_batch = parse(map, "diag.sts_batch", diag.sts_batch)?;
    diag.sts_rank = parse(map, "diag.sts_rank", diag.sts_rank)?;
    diag.sts_trials = parse(map, "diag.sts_trials", diag.sts_trials)?;
    diag.var_trials = parse(map, "diag.var_trials", diag.var_trials)?;
    if let Some(h) = map.get("diag.hashing") {
        diag.hashing = match h.as_str() {
            "both" => DiagHashing::Both,
            "uniform" => DiagHashing::Uniform,
            other => return Err(config_error("diag.hashing", format!("expected both|uniform, got {other:?}"))),
        };
    }

    Ok(AppConfig { train, corpus_path, split_fraction, out_dir, ranks, jobs, diag })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_applies_overrides() {
        let text = "\n# comment\nmodel.d_model = 32\ntrain.rank = 16 # trailing\n";
        let mut map = parse_key_values(text).unwrap();
        assert_eq!(map["model.d_model"], "32");
        apply_override(&mut map, "rank=8").unwrap();
        assert_eq!(map["train.rank"], "8");
        apply_override(&mut map, "train.lr=0.5").unwrap();
        let cfg = build(&map).unwrap();
        assert_eq!(cfg.train.d_model, 32);
        assert_eq!(cfg.train.rank, 8);
        assert_eq!(cfg.train.lr, 0.5);
    }

    #[test]
    fn rejects_unknown_keys() {
        assert!(parse_key_values("no.such.key = 1").is_err());
        let mut map = BTreeMap::new();
        assert!(apply_override(&mut map, "bogus=1").is_err());
    }

    #[test]
    fn layer_mode_family_is_open() {
        let map = parse_key_values("layer_mode.block0.fc1 = exact\ntrain.mode = basis\n").unwrap();
        let cfg = build(&map).unwrap();
        assert_eq!(cfg.train.layer_modes["block0.fc1"], LayerMode::Exact);
    }

    #[test]
    fn ranks_parse_and_reject_empty() {
        assert_eq!(parse_ranks("1, 8,16").unwrap(), vec![1, 8, 16]);
        assert!(parse_ranks("").is_err());
        assert!(parse_ranks("1,0").is_err());
    }

    #[test]
    fn bad_values_name_the_key() {
        let map = parse_key_values("train.steps = many").unwrap();
        let err = build(&map).unwrap_err().to_string();
        assert!(err.contains("train.steps"), "{err}");
    }

    #[test]
    fn malformed_line_is_rejected() {
        assert!(parse_key_values("just some words").is_err());
    }
}
