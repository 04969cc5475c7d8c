//! Flat `key = value` configuration files: typed parsing over a fixed key
//! registry with unknown- and duplicate-key rejection, canonical rendering
//! (the exact text every run prints and every checkpoint embeds), an FNV-1a
//! hash of that text, and checkpoint → model restoration.

use std::collections::BTreeSet;
use std::path::Path;

use crate::checkpoint::{load_checkpoint, LoadedCheckpoint};
use crate::error::{Error, Result};
use crate::network::{FusionMode, Model, ModelConfig};
use crate::training::TrainConfig;

/// Everything a run needs: architecture plus training hyperparameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Settings {
    pub model: ModelConfig,
    pub train: TrainConfig,
}

fn parse_usize(key: &str, v: &str) -> Result<usize> {
    v.parse::<usize>()
        .map_err(|_| Error::Config(format!("{key}: `{v}` is not a nonnegative integer")))
}

fn parse_f64(key: &str, v: &str) -> Result<f64> {
    v.parse::<f64>().map_err(|_| Error::Config(format!("{key}: `{v}` is not a number")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        _ => Err(Error::Config(format!("{key}: `{v}` is not true/false"))),
    }
}

fn parse_list(key: &str, v: &str) -> Result<Vec<usize>> {
    v.split(',')
        .map(|part| {
            part.trim()
                .parse::<usize>()
                .map_err(|_| Error::Config(format!("{key}: `{part}` is not an integer")))
        })
        .collect()
}

/// Parses a config file's text on top of the defaults. Lines are
/// `key = value`; `#` starts a comment; unknown or repeated keys are
/// rejected. The result is validated before being returned.
pub fn parse_config(text: &str) -> Result<Settings> {
    let mut s = Settings::default();
    let mut seen: BTreeSet<String> = BTreeSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line = match raw.find('#') {
            Some(pos) => &raw[..pos],
            None => raw,
        }
        .trim();
        if line.is_empty() {
            continue;
        }
        let lineno = i + 1;
        let (key, value) = line.split_once('=').ok_or_else(|| {
            Error::Config(format!("line {lineno}: expected `key = value`, got `{line}`"))
        })?;
        let key = key.trim();
        let value = value.trim();
        if !seen.insert(key.to_string()) {
            return Err(Error::Config(format!("line {lineno}: duplicate key `{key}`")));
        }
        match key {
            "resolution" => {
                let r = parse_usize(key, value)?;
                s.model.resolution = (r, r);
            }
            "in_channels" => s.model.in_channels = parse_usize(key, value)?,
            "widths" => s.model.widths = parse_list(key, value)?,
            "blocks" => s.model.blocks = parse_list(key, value)?,
            "state_dim" => s.model.state_dim = parse_usize(key, value)?,
            "use_slstm" => s.model.use_slstm = parse_bool(key, value)?,
            "use_mlstm" => s.model.use_mlstm = parse_bool(key, value)?,
            "fusion" => {
                s.model.fusion = match value {
                    "learned" => FusionMode::Learned,
                    "fixed" => FusionMode::Fixed,
                    _ => {
                        return Err(Error::Config(format!(
                            "fusion: `{value}` is not `learned` or `fixed`"
                        )))
                    }
                }
            }
            "share_scan_projections" => s.model.share_scan_projections = parse_bool(key, value)?,
            "slstm_heads" => s.model.slstm_heads = parse_usize(key, value)?,
            "batch_size" => s.train.batch_size = parse_usize(key, value)?,
            "lr" => s.train.lr = parse_f64(key, value)?,
            "lr_min" => s.train.lr_min = parse_f64(key, value)?,
            "weight_decay" => s.train.weight_decay = parse_f64(key, value)?,
            "epochs" => s.train.epochs = parse_usize(key, value)?,
            "folds" => s.train.folds = parse_usize(key, value)?,
            "augment" => s.train.augment = parse_bool(key, value)?,
            _ => return Err(Error::Config(format!("line {lineno}: unknown key `{key}`"))),
        }
    }
    s.model.validate()?;
    s.train.validate()?;
    Ok(s)
}

fn list_text(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

/// Canonical one-key-per-line rendering; `parse_config(render_config(s))`
/// reproduces `s` exactly for square resolutions.
pub fn render_config(s: &Settings) -> String {
    debug_assert_eq!(s.model.resolution.0, s.model.resolution.1, "config files are square-only");
    let fusion = match s.model.fusion {
        FusionMode::Learned => "learned",
        FusionMode::Fixed => "fixed",
    };
    format!(
        "resolution = {}\n\
         in_channels = {}\n\
         widths = {}\n\
         blocks = {}\n\
         state_dim = {}\n\
         use_slstm = {}\n\
         use_mlstm = {}\n\
         fusion = {}\n\
         share_scan_projections = {}\n\
         slstm_heads = {}\n\
         batch_size = {}\n\
         lr = {}\n\
         lr_min = {}\n\
         weight_decay = {}\n\
         epochs = {}\n\
         folds = {}\n\
         augment = {}\n",
        s.model.resolution.0,
        s.model.in_channels,
        list_text(&s.model.widths),
        list_text(&s.model.blocks),
        s.model.state_dim,
        s.model.use_slstm,
        s.model.use_mlstm,
        fusion,
        s.model.share_scan_projections,
        s.model.slstm_heads,
        s.train.batch_size,
        s.train.lr,
        s.train.lr_min,
        s.train.weight_decay,
        s.train.epochs,
        s.train.folds,
        s.train.augment,
    )
}

/// 64-bit FNV-1a hash of arbitrary text (used to fingerprint configs).
pub fn fnv1a(text: &str) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Rebuilds a model from a loaded checkpoint: parses the embedded config,
/// constructs the architecture, and overwrites every parameter from the
/// tensor table. The table must cover the model's parameters exactly.
pub fn model_from_checkpoint(ckpt: &LoadedCheckpoint) -> Result<(Model, Settings)> {
    let settings = parse_config(&ckpt.config_text)?;
    let mut model = Model::new(settings.model.clone(), 0)?;
    let mut assigned: BTreeSet<String> = BTreeSet::new();
    for (name, tensor) in &ckpt.tensors {
        if !assigned.insert(name.clone()) {
            return Err(Error::Data(format!("checkpoint lists tensor {name} twice")));
        }
        model.assign(name, tensor)?;
    }
    for (name, _) in model.params().iter() {
        if !assigned.contains(name) {
            return Err(Error::Data(format!("checkpoint is missing tensor {name}")));
        }
    }
    Ok((model, settings))
}

/// Loads a checkpoint file and restores its model (see
/// [`model_from_checkpoint`]).
pub fn load_model(path: &Path) -> Result<(Model, Settings)> {
    let ckpt = load_checkpoint(path)?;
    model_from_checkpoint(&ckpt)
}
