//! Flat `key = value` run configuration covering the trainer and the
//! model geometry. Unknown and duplicate keys are rejected with their
//! line number, so a typo cannot silently fall back to a default.

use crate::error::{Error, Result};
use crate::model::{ArchMode, ModelConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum LossMode {
    Seu,
    Dice,
    Bce,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextMode {
    On,
    /// Train with text, evaluate with all-padding prompts.
    OffInference,
    /// Never build the fusion block; a purely visual model.
    OffTraining,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ArchChoice {
    Full,
    SsmixLinear,
    CrossattnAdd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr0: f64,
    pub lr_min: f64,
    pub t_max: usize,
    pub max_epochs: usize,
    pub min_epochs: usize,
    pub patience: usize,
    pub batch_size: usize,
    pub weight_decay: f64,
    pub seed: u64,
    pub loss: LossMode,
    pub text: TextMode,
    pub arch: ArchChoice,
    pub model: ModelConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 3e-4,
            lr_min: 1e-6,
            t_max: 200,
            max_epochs: 200,
            min_epochs: 20,
            patience: 20,
            batch_size: 8,
            weight_decay: 0.01,
            seed: 0,
            loss: LossMode::Seu,
            text: TextMode::On,
            arch: ArchChoice::Full,
            model: ModelConfig::default(),
        }
    }
}

impl TrainConfig {
    /// The model geometry with the text/architecture switches applied.
    pub fn model_config(&self) -> ModelConfig {
        let mut m = self.model;
        m.arch = match self.arch {
            ArchChoice::Full => ArchMode::Full,
            ArchChoice::SsmixLinear => ArchMode::LinearMixer,
            ArchChoice::CrossattnAdd => ArchMode::AdditiveFusion,
        };
        m.fuse_text = self.text != TextMode::OffTraining;
        m
    }

    pub fn validate(&self) -> Result<()> {
        if self.lr_min > self.lr0 {
            return Err(Error::Config(format!(
                "lr_min ({}) exceeds lr0 ({})",
                self.lr_min, self.lr0
            )));
        }
        if self.min_epochs > self.max_epochs {
            return Err(Error::Config(format!(
                "min_epochs ({}) exceeds max_epochs ({})",
                self.min_epochs, self.max_epochs
            )));
        }
        if self.batch_size == 0 || self.t_max == 0 || self.max_epochs == 0 {
            return Err(Error::Config("batch_size, t_max and max_epochs must be positive".into()));
        }
        if !(self.lr0.is_finite() && self.lr_min.is_finite() && self.weight_decay.is_finite())
            || self.lr0 <= 0.0
            || self.lr_min <= 0.0
            || self.weight_decay < 0.0
        {
            return Err(Error::Config("rates must be finite and positive".into()));
        }
        self.model_config().validate()
    }

    pub fn parse(text: &str) -> Result<TrainConfig> {
        let mut cfg = TrainConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (li, raw) in text.lines().enumerate() {
            let line_no = li + 1;
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {line_no}: expected `key = value`, got `{line}`"
                )));
            };
            let key = key.trim();
            let value = value.trim();
            if !seen.insert(key.to_string()) {
                return Err(Error::Config(format!("line {line_no}: duplicate key `{key}`")));
            }
            apply(&mut cfg, key, value)
                .map_err(|e| Error::Config(format!("line {line_no}: {e}")))?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Every key in a stable order; `parse` inverts it.
    pub fn to_text(&self) -> String {
        let m = &self.model;
        let channels =
            m.channels.iter().map(|c| c.to_string()).collect::<Vec<_>>().join(" ");
        format!(
            "lr0 = {}\nlr_min = {}\nt_max = {}\nmax_epochs = {}\nmin_epochs = {}\n\
             patience = {}\nbatch_size = {}\nweight_decay = {}\nseed = {}\n\
             loss = {}\ntext = {}\narch = {}\n\
             input_size = {}\nchannels = {channels}\nd_text = {}\nn_tokens = {}\n\
             heads = {}\nshuffle_r = {}\npool_o = {}\nclasses = {}\nd_state = {}\n\
             d_conv = {}\nexpand = {}\nmodab_all_stages = {}\nuse_batch_norm = {}\n",
            self.lr0,
            self.lr_min,
            self.t_max,
            self.max_epochs,
            self.min_epochs,
            self.patience,
            self.batch_size,
            self.weight_decay,
            self.seed,
            loss_name(self.loss),
            text_name(self.text),
            arch_name(self.arch),
            m.input_size,
            m.d_text,
            m.n_tokens,
            m.heads,
            m.shuffle_r,
            m.pool_o,
            m.classes,
            m.d_state,
            m.d_conv,
            m.expand,
            m.modab_all_stages,
            m.use_batch_norm,
        )
    }
}

pub fn loss_name(l: LossMode) -> &'static str {
    match l {
        LossMode::Seu => "seu",
        LossMode::Dice => "dice",
        LossMode::Bce => "bce",
    }
}

pub fn text_name(t: TextMode) -> &'static str {
    match t {
        TextMode::On => "on",
        TextMode::OffInference => "off_inference",
        TextMode::OffTraining => "off_training",
    }
}

pub fn arch_name(a: ArchChoice) -> &'static str {
    match a {
        ArchChoice::Full => "full",
        ArchChoice::SsmixLinear => "ssmix_linear",
        ArchChoice::CrossattnAdd => "crossattn_add",
    }
}

fn parse_num<T: std::str::FromStr>(kind: &str, v: &str) -> std::result::Result<T, String> {
    v.parse().map_err(|_| format!("`{v}` is not a valid {kind}"))
}

fn parse_bool(v: &str) -> std::result::Result<bool, String> {
    match v {
        "true" => Ok(true),
        "false" => Ok(false),
        other => Err(format!("`{other}` is not `true` or `false`")),
    }
}

fn apply(cfg: &mut TrainConfig, key: &str, value: &str) -> std::result::Result<(), String> {
    match key {
        "lr0" => cfg.lr0 = parse_num("number", value)?,
        "lr_min" => cfg.lr_min = parse_num("number", value)?,
        "t_max" => cfg.t_max = parse_num("integer", value)?,
        "max_epochs" => cfg.max_epochs = parse_num("integer", value)?,
        "min_epochs" => cfg.min_epochs = parse_num("integer", value)?,
        "patience" => cfg.patience = parse_num("integer", value)?,
        "batch_size" => cfg.batch_size = parse_num("integer", value)?,
        "weight_decay" => cfg.weight_decay = parse_num("number", value)?,
        "seed" => cfg.seed = parse_num("integer", value)?,
        "loss" => {
            cfg.loss = match value {
                "seu" => LossMode::Seu,
                "dice" => LossMode::Dice,
                "bce" => LossMode::Bce,
                other => return Err(format!("unknown loss `{other}` (seu, dice, bce)")),
            }
        }
        "text" => {
            cfg.text = match value {
                "on" => TextMode::On,
                "off_inference" => TextMode::OffInference,
                "off_training" => TextMode::OffTraining,
                other => {
                    return Err(format!(
                        "unknown text mode `{other}` (on, off_inference, off_training)"
                    ))
                }
            }
        }
        "arch" => {
            cfg.arch = match value {
                "full" => ArchChoice::Full,
                "ssmix_linear" => ArchChoice::SsmixLinear,
                "crossattn_add" => ArchChoice::CrossattnAdd,
                other => {
                    return Err(format!(
                        "unknown arch `{other}` (full, ssmix_linear, crossattn_add)"
                    ))
                }
            }
        }
        "input_size" => cfg.model.input_size = parse_num("integer", value)?,
        "channels" => {
            let parts: Vec<&str> = value.split_whitespace().collect();
            if parts.len() != 4 {
                return Err(format!("expected 4 channel widths, got {}", parts.len()));
            }
            for (i, p) in parts.iter().enumerate() {
                cfg.model.channels[i] = parse_num("integer", p)?;
            }
        }
        "d_text" => cfg.model.d_text = parse_num("integer", value)?,
        "n_tokens" => cfg.model.n_tokens = parse_num("integer", value)?,
        "heads" => cfg.model.heads = parse_num("integer", value)?,
        "shuffle_r" => cfg.model.shuffle_r = parse_num("integer", value)?,
        "pool_o" => cfg.model.pool_o = parse_num("integer", value)?,
        "classes" => cfg.model.classes = parse_num("integer", value)?,
        "d_state" => cfg.model.d_state = parse_num("integer", value)?,
        "d_conv" => cfg.model.d_conv = parse_num("integer", value)?,
        "expand" => cfg.model.expand = parse_num("integer", value)?,
        "modab_all_stages" => cfg.model.modab_all_stages = parse_bool(value)?,
        "use_batch_norm" => cfg.model.use_batch_norm = parse_bool(value)?,
        other => return Err(format!("unknown key `{other}`")),
    }
    Ok(())
}
