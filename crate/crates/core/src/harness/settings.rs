//! Flat `key = value` run settings. Keys are the command-line flag names
//! without the leading dashes, so a config file and flags share one parser.

use std::collections::BTreeMap;
use std::path::PathBuf;

use crate::attention::AttnKind;
use crate::data::BatchPlan;
use crate::error::{Error, Result};
use crate::feedforward::FfKind;
use crate::model::{BlockStyle, DropoutConfig};
use crate::optim::{LrSchedule, OptimConfig, OptimizerKind};
use crate::recurrent::CellKind;

use super::ExperimentSpec;

/// Recognized keys, in the order they are applied.
pub const SETTING_KEYS: &[&str] = &[
    "corpus",
    "tag",
    "out",
    "seed",
    "epochs",
    "d-model",
    "blocks",
    "block",
    "cell",
    "qrnn-w",
    "attn-layers",
    "attn",
    "ff",
    "boom-inner",
    "dropout",
    "bptt",
    "batch",
    "optimizer",
    "lr",
    "warmup",
    "clip",
];

/// Parses `key = value` lines. Blank lines and lines starting with `#` are
/// skipped; a later duplicate wins.
pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`, got `{line}`", i + 1)))?;
        let k = k.trim();
        if !SETTING_KEYS.contains(&k) {
            return Err(Error::Config(format!("line {}: unknown key `{k}`", i + 1)));
        }
        out.insert(k.to_string(), v.trim().to_string());
    }
    Ok(out)
}

fn num<N: std::str::FromStr>(key: &str, v: &str) -> Result<N> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn bad(key: &str, v: &str, allowed: &str) -> Error {
    Error::Config(format!("`{key}`: `{v}` is not one of {allowed}"))
}

/// Applies settings to `spec` in [`SETTING_KEYS`] order, so `cell` is seen
/// before `qrnn-w` and `d-model` before `boom-inner`. Changing `d-model`
/// without `boom-inner` keeps the inner width at four times the model width.
/// Returns the corpus path when one is given.
pub fn apply_settings(spec: &mut ExperimentSpec, settings: &BTreeMap<String, String>) -> Result<Option<PathBuf>> {
    if let Some(k) = settings.keys().find(|k| !SETTING_KEYS.contains(&k.as_str())) {
        return Err(Error::Config(format!("unknown key `{k}`")));
    }
    let mut corpus = None;
    let mut warmup = match spec.lr {
        LrSchedule::Warmup { steps, .. } => steps,
        LrSchedule::Constant { .. } => 0,
    };
    let mut lr = spec.lr.target();
    for &key in SETTING_KEYS {
        let Some(v) = settings.get(key) else { continue };
        let v = v.as_str();
        let m = &mut spec.model;
        match key {
            "corpus" => corpus = Some(PathBuf::from(v)),
            "tag" => spec.tag = v.to_string(),
            "out" => spec.out_dir = Some(PathBuf::from(v)),
            "seed" => spec.seed = num(key, v)?,
            "epochs" => spec.epochs = num(key, v)?,
            "d-model" => {
                m.d_model = num(key, v)?;
                m.d_inner = 4 * m.d_model;
            }
            "blocks" => m.n_blocks = num(key, v)?,
            "block" => {
                m.block = match v {
                    "sharnn" => BlockStyle::ShaRnn,
                    "shaq" => BlockStyle::Shaq,
                    _ => return Err(bad(key, v, "sharnn, shaq")),
                }
            }
            "cell" => {
                m.cell = match v {
                    "lstm" => CellKind::Lstm,
                    "qrnn" => match m.cell {
                        CellKind::Qrnn { window } => CellKind::Qrnn { window },
                        CellKind::Lstm => CellKind::Qrnn { window: 2 },
                    },
                    _ => return Err(bad(key, v, "lstm, qrnn")),
                }
            }
            "qrnn-w" => match m.cell {
                CellKind::Qrnn { .. } => m.cell = CellKind::Qrnn { window: num(key, v)? },
                CellKind::Lstm => return Err(Error::Config("`qrnn-w` requires cell = qrnn".into())),
            },
            "attn-layers" => {
                m.attn_layers = if v.is_empty() || v == "none" {
                    Vec::new()
                } else {
                    v.split(',').map(|s| num(key, s.trim())).collect::<Result<_>>()?
                }
            }
            "attn" => {
                m.attn = match v {
                    "gated" => AttnKind::Gated,
                    "ungated" => AttnKind::Ungated,
                    "mean" => AttnKind::Mean,
                    _ => return Err(bad(key, v, "gated, ungated, mean")),
                }
            }
            "ff" => {
                m.ff = match v {
                    "boom" => FfKind::Boom,
                    "fc" => FfKind::Fc,
                    "none" => FfKind::None,
                    _ => return Err(bad(key, v, "boom, fc, none")),
                }
            }
            "boom-inner" => m.d_inner = num(key, v)?,
            "dropout" => m.dropout = DropoutConfig::all(num(key, v)?),
            "bptt" => m.bptt = num(key, v)?,
            "batch" => spec.plan.batch = num(key, v)?,
            "optimizer" => {
                let kind = match v {
                    "lamb" => OptimizerKind::Lamb,
                    "adam" => OptimizerKind::Adam,
                    _ => return Err(bad(key, v, "lamb, adam")),
                };
                spec.optim = if kind == OptimizerKind::Adam { OptimConfig::adam() } else { OptimConfig::default() };
            }
            "lr" => lr = num(key, v)?,
            "warmup" => warmup = num(key, v)?,
            "clip" => spec.clip = num(key, v)?,
            _ => unreachable!("key list and match arms agree"),
        }
    }
    spec.lr = if warmup == 0 { LrSchedule::Constant { lr } } else { LrSchedule::Warmup { lr, steps: warmup } };
    spec.plan = BatchPlan { center: spec.model.bptt, ..spec.plan };
    spec.validate()?;
    Ok(corpus)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn map(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
    }

    #[test]
    fn parses_comments_blanks_and_spacing() {
        let m = parse_kv("# run\n\nepochs = 3\n  lr=0.001  \nattn-layers = 1, 2\n").unwrap();
        assert_eq!(m, map(&[("epochs", "3"), ("lr", "0.001"), ("attn-layers", "1, 2")]));
    }

    #[test]
    fn rejects_unknown_keys_and_bare_lines() {
        assert!(parse_kv("epochz = 3").unwrap_err().to_string().contains("epochz"));
        assert!(parse_kv("epochs 3").is_err());
    }

    #[test]
    fn applies_model_and_optimizer_keys() {
        let mut s = ExperimentSpec::default();
        let corpus = apply_settings(
            &mut s,
            &map(&[
                ("cell", "lstm"),
                ("d-model", "64"),
                ("blocks", "3"),
                ("block", "sharnn"),
                ("attn-layers", "2,3"),
                ("attn", "gated"),
                ("ff", "boom"),
                ("optimizer", "adam"),
                ("lr", "0.01"),
                ("warmup", "0"),
                ("bptt", "32"),
                ("corpus", "/data/x"),
            ]),
        )
        .unwrap();
        assert_eq!(corpus, Some(PathBuf::from("/data/x")));
        assert_eq!(s.model.cell, CellKind::Lstm);
        assert_eq!((s.model.d_model, s.model.d_inner, s.model.n_blocks), (64, 256, 3));
        assert_eq!(s.model.attn_layers, vec![2, 3]);
        assert_eq!(s.optim.kind, OptimizerKind::Adam);
        assert_eq!(s.lr, LrSchedule::Constant { lr: 0.01 });
        assert_eq!((s.plan.center, s.model.bptt), (32, 32));
    }

    #[test]
    fn qrnn_width_needs_qrnn_cell() {
        let mut s = ExperimentSpec::default();
        apply_settings(&mut s, &map(&[("qrnn-w", "3")])).unwrap();
        assert_eq!(s.model.cell, CellKind::Qrnn { window: 3 });
        let mut s = ExperimentSpec::default();
        assert!(apply_settings(&mut s, &map(&[("cell", "lstm"), ("qrnn-w", "3")])).is_err());
    }

    #[test]
    fn invalid_values_are_reported() {
        let mut s = ExperimentSpec::default();
        assert!(apply_settings(&mut s, &map(&[("attn", "sparse")])).unwrap_err().to_string().contains("sparse"));
        assert!(apply_settings(&mut s, &map(&[("epochs", "x")])).is_err());
        assert!(apply_settings(&mut s, &map(&[("attn-layers", "9")])).is_err());
    }
}
