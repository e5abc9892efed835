//! Flat `key = value` run configuration. Lines starting with `#` are comments; list
//! values are comma separated.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{Error, Result};
use crate::synth::{LevelSpec, SynthSpec};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossKind {
    Margin,
    ProxyAnchor,
}

impl LossKind {
    pub fn name(self) -> &'static str {
        match self {
            LossKind::Margin => "margin",
            LossKind::ProxyAnchor => "proxy_anchor",
        }
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "margin" => Ok(LossKind::Margin),
            "proxy_anchor" | "proxyanchor" | "pa" => Ok(LossKind::ProxyAnchor),
            other => Err(Error::config(format!("unknown loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Config {
    pub levels: usize,
    pub r: usize,
    pub k: usize,
    pub gamma: f64,
    pub loss: LossKind,
    pub lr: f64,
    /// Learning rate of the gating parameters.
    pub lr_inference: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub classes_per_batch: usize,
    pub margin_alpha: f64,
    pub margin_beta: f64,
    pub pa_scale: f64,
    pub pa_beta: f64,
    pub pa_tau: f64,
    pub seed: u64,
    pub epochs: usize,
    /// Weight of each level's loss; unweighted sum by default.
    pub level_weights: Vec<f64>,
    pub synth: SynthSpec,
}

impl Default for Config {
    fn default() -> Self {
        let synth = SynthSpec::default();
        Self {
            levels: synth.num_levels(),
            r: 32,
            k: 8,
            gamma: 0.95,
            loss: LossKind::ProxyAnchor,
            lr: 1e-3,
            lr_inference: 1e-3,
            weight_decay: 1e-4,
            batch_size: 32,
            classes_per_batch: 8,
            margin_alpha: 0.2,
            margin_beta: 1.2,
            pa_scale: 16.0,
            pa_beta: 2.0,
            pa_tau: 0.2,
            seed: 0,
            epochs: 10,
            level_weights: vec![1.0; synth.num_levels()],
            synth,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::config(format!("{key}: cannot parse {v:?}")))
}

fn parse_list<T: std::str::FromStr>(key: &str, v: &str) -> Result<Vec<T>> {
    v.split(',').map(|x| parse_num(key, x.trim())).collect()
}

fn parse_size(key: &str, v: &str) -> Result<(usize, usize)> {
    let (h, w) = v
        .split_once('x')
        .ok_or_else(|| Error::config(format!("{key}: expected ROWSxCOLS, got {v:?}")))?;
    Ok((parse_num(key, h.trim())?, parse_num(key, w.trim())?))
}

fn join<T: std::fmt::Display>(xs: impl IntoIterator<Item = T>) -> String {
    xs.into_iter()
        .map(|x| x.to_string())
        .collect::<Vec<_>>()
        .join(",")
}

impl Config {
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Config::default();
        let mut levels_set = None;
        let mut level_lists: Vec<(String, String)> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::config(format!("line {}: expected `key = value`", n + 1))
            })?;
            let (key, value) = (key.trim(), value.trim());
            match key {
                "levels" => levels_set = Some(parse_num::<usize>(key, value)?),
                "r" => cfg.r = parse_num(key, value)?,
                "k" => cfg.k = parse_num(key, value)?,
                "gamma" => cfg.gamma = parse_num(key, value)?,
                "loss" => cfg.loss = value.parse()?,
                "lr" => cfg.lr = parse_num(key, value)?,
                "lr_inference" => cfg.lr_inference = parse_num(key, value)?,
                "weight_decay" => cfg.weight_decay = parse_num(key, value)?,
                "batch_size" => cfg.batch_size = parse_num(key, value)?,
                "classes_per_batch" => cfg.classes_per_batch = parse_num(key, value)?,
                "margin_alpha" => cfg.margin_alpha = parse_num(key, value)?,
                "margin_beta" => cfg.margin_beta = parse_num(key, value)?,
                "pa_scale" => cfg.pa_scale = parse_num(key, value)?,
                "pa_beta" => cfg.pa_beta = parse_num(key, value)?,
                "pa_tau" => cfg.pa_tau = parse_num(key, value)?,
                "seed" => cfg.seed = parse_num(key, value)?,
                "epochs" => cfg.epochs = parse_num(key, value)?,
                "classes" => cfg.synth.classes = parse_num(key, value)?,
                "samples_per_class" => cfg.synth.samples_per_class = parse_num(key, value)?,
                "parts_per_class" => cfg.synth.parts_per_class = parse_num(key, value)?,
                "superclass_size" => cfg.synth.superclass_size = parse_num(key, value)?,
                "blob_width" => cfg.synth.blob_width = parse_num(key, value)?,
                "level_weights" | "channels" | "sizes" | "noise" | "corruption" => {
                    level_lists.push((key.to_string(), value.to_string()))
                }
                other => return Err(Error::config(format!("unknown config key {other:?}"))),
            }
        }

        let list_len = level_lists
            .iter()
            .map(|(_, v)| v.split(',').count())
            .max();
        let levels = levels_set.or(list_len).unwrap_or(cfg.levels);
        if levels != cfg.synth.num_levels() {
            let template = cfg.synth.levels.last().cloned().unwrap();
            cfg.synth.levels = (0..levels)
                .map(|i| LevelSpec {
                    rows: (template.rows << (levels.saturating_sub(i + 1))).max(1),
                    cols: (template.cols << (levels.saturating_sub(i + 1))).max(1),
                    ..template.clone()
                })
                .collect();
            cfg.level_weights = vec![1.0; levels];
        }
        cfg.levels = levels;
        for (key, value) in level_lists {
            let n = value.split(',').count();
            if n != levels {
                return Err(Error::config(format!(
                    "{key} lists {n} values but levels = {levels}"
                )));
            }
            let key = key.as_str();
            match key {
                "level_weights" => cfg.level_weights = parse_list(key, &value)?,
                "channels" => {
                    for (l, c) in cfg.synth.levels.iter_mut().zip(parse_list(key, &value)?) {
                        l.channels = c;
                    }
                }
                "sizes" => {
                    for (l, s) in cfg.synth.levels.iter_mut().zip(value.split(',')) {
                        (l.rows, l.cols) = parse_size(key, s.trim())?;
                    }
                }
                "noise" => {
                    for (l, x) in cfg.synth.levels.iter_mut().zip(parse_list(key, &value)?) {
                        l.noise = x;
                    }
                }
                _ => {
                    for (l, x) in cfg.synth.levels.iter_mut().zip(parse_list(key, &value)?) {
                        l.corruption = x;
                    }
                }
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 || self.r == 0 {
            return Err(Error::config("levels and r must be positive"));
        }
        if !(1..=self.r).contains(&self.k) {
            return Err(Error::config(format!("k = {} outside [1, r = {}]", self.k, self.r)));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::config(format!("gamma = {} outside [0, 1]", self.gamma)));
        }
        if self.level_weights.len() != self.levels {
            return Err(Error::config("level_weights must list one weight per level"));
        }
        for (name, v) in [
            ("lr", self.lr),
            ("lr_inference", self.lr_inference),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!("{name} must be finite and >= 0")));
            }
        }
        if !(self.margin_alpha > 0.0) || !(self.pa_scale > 0.0) {
            return Err(Error::config("margin_alpha and pa_scale must be positive"));
        }
        if self.batch_size == 0 || self.classes_per_batch == 0 {
            return Err(Error::config("batch_size and classes_per_batch must be positive"));
        }
        self.synth.validate()?;
        if self.synth.num_levels() != self.levels {
            return Err(Error::config("synthetic level list disagrees with levels"));
        }
        Ok(())
    }

    /// Canonical text form; `parse(to_text())` reproduces the config.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let s_ = &mut s;
        let _ = writeln!(s_, "levels = {}", self.levels);
        let _ = writeln!(s_, "r = {}", self.r);
        let _ = writeln!(s_, "k = {}", self.k);
        let _ = writeln!(s_, "gamma = {}", self.gamma);
        let _ = writeln!(s_, "loss = {}", self.loss.name());
        let _ = writeln!(s_, "lr = {}", self.lr);
        let _ = writeln!(s_, "lr_inference = {}", self.lr_inference);
        let _ = writeln!(s_, "weight_decay = {}", self.weight_decay);
        let _ = writeln!(s_, "batch_size = {}", self.batch_size);
        let _ = writeln!(s_, "classes_per_batch = {}", self.classes_per_batch);
        let _ = writeln!(s_, "margin_alpha = {}", self.margin_alpha);
        let _ = writeln!(s_, "margin_beta = {}", self.margin_beta);
        let _ = writeln!(s_, "pa_scale = {}", self.pa_scale);
        let _ = writeln!(s_, "pa_beta = {}", self.pa_beta);
        let _ = writeln!(s_, "pa_tau = {}", self.pa_tau);
        let _ = writeln!(s_, "seed = {}", self.seed);
        let _ = writeln!(s_, "epochs = {}", self.epochs);
        let _ = writeln!(s_, "level_weights = {}", join(&self.level_weights));
        let sy = &self.synth;
        let _ = writeln!(s_, "classes = {}", sy.classes);
        let _ = writeln!(s_, "samples_per_class = {}", sy.samples_per_class);
        let _ = writeln!(s_, "parts_per_class = {}", sy.parts_per_class);
        let _ = writeln!(s_, "superclass_size = {}", sy.superclass_size);
        let _ = writeln!(s_, "blob_width = {}", sy.blob_width);
        let _ = writeln!(s_, "channels = {}", join(sy.levels.iter().map(|l| l.channels)));
        let _ = writeln!(
            s_,
            "sizes = {}",
            join(sy.levels.iter().map(|l| format!("{}x{}", l.rows, l.cols)))
        );
        let _ = writeln!(s_, "noise = {}", join(sy.levels.iter().map(|l| l.noise)));
        let _ = writeln!(
            s_,
            "corruption = {}",
            join(sy.levels.iter().map(|l| l.corruption))
        );
        s
    }

    /// FNV-1a over the canonical text, rendered as 16 hex digits.
    pub fn hash(&self) -> String {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for b in self.to_text().bytes() {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        format!("{h:016x}")
    }
}
