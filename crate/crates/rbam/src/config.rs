//! Flat `key = value` run configuration files with `#` comments.
//! Unknown keys are rejected with their line number; CLI flags override
//! file values, and the fully resolved config is echoed for provenance.

use std::path::{Path, PathBuf};

use crate::model::ModelConfig;
use crate::optim::TrainConfig;
use crate::{Error, Result};

#[derive(Clone, Debug, Default, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

fn parse_bool(v: &str, lineno: usize) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!(
            "line {lineno}: expected a boolean, got '{v}'"
        ))),
    }
}

fn parse_num<T: std::str::FromStr>(v: &str, lineno: usize) -> Result<T> {
    v.parse().map_err(|_| {
        Error::Config(format!("line {lineno}: cannot parse numeric value '{v}'"))
    })
}

impl RunConfig {
    pub fn apply(&mut self, key: &str, value: &str, lineno: usize) -> Result<()> {
        match key {
            "blocks" => self.model.blocks = parse_num(value, lineno)?,
            "channels" => self.model.channels = parse_num(value, lineno)?,
            "scale" => {
                let s: usize = parse_num(value, lineno)?;
                self.model.scale = s;
                self.train.scale = s;
            }
            "sa_pool" => self.model.sa_pool = parse_num(value, lineno)?,
            "ca_reduction" => self.model.ca_reduction = parse_num(value, lineno)?,
            "use_ca" => self.model.use_ca = parse_bool(value, lineno)?,
            "use_sa" => self.model.use_sa = parse_bool(value, lineno)?,
            "use_first_order" => self.model.use_first_order = parse_bool(value, lineno)?,
            "use_second_order" => self.model.use_second_order = parse_bool(value, lineno)?,
            "batch_size" => self.train.batch_size = parse_num(value, lineno)?,
            "patch_size" => self.train.patch_size = parse_num(value, lineno)?,
            "lr0" => self.train.lr0 = parse_num(value, lineno)?,
            "lr_halve_every" => self.train.lr_halve_every = parse_num(value, lineno)?,
            "epochs" => self.train.epochs = parse_num(value, lineno)?,
            "seed" => self.train.seed = parse_num(value, lineno)?,
            "checkpoint_every" => self.train.checkpoint_every = parse_num(value, lineno)?,
            "manifest" => self.manifest = Some(PathBuf::from(value)),
            "checkpoint" => self.checkpoint = Some(PathBuf::from(value)),
            "out_dir" => self.out_dir = Some(PathBuf::from(value)),
            _ => {
                return Err(Error::Config(format!("line {lineno}: unknown key '{key}'")));
            }
        }
        Ok(())
    }

    pub fn parse_str(text: &str) -> Result<RunConfig> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let lineno = i + 1;
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let Some((key, value)) = line.split_once('=') else {
                return Err(Error::Config(format!(
                    "line {lineno}: expected 'key = value'"
                )));
            };
            cfg.apply(key.trim(), value.trim(), lineno)?;
        }
        Ok(cfg)
    }

    pub fn parse_file(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        Self::parse_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()
    }

    /// Render the fully resolved config; parsing the result reproduces it.
    pub fn render(&self) -> String {
        let mut out = String::new();
        let m = &self.model;
        let t = &self.train;
        out.push_str(&format!("blocks = {}\n", m.blocks));
        out.push_str(&format!("channels = {}\n", m.channels));
        out.push_str(&format!("scale = {}\n", m.scale));
        out.push_str(&format!("sa_pool = {}\n", m.sa_pool));
        out.push_str(&format!("ca_reduction = {}\n", m.ca_reduction));
        out.push_str(&format!("use_ca = {}\n", m.use_ca));
        out.push_str(&format!("use_sa = {}\n", m.use_sa));
        out.push_str(&format!("use_first_order = {}\n", m.use_first_order));
        out.push_str(&format!("use_second_order = {}\n", m.use_second_order));
        out.push_str(&format!("batch_size = {}\n", t.batch_size));
        out.push_str(&format!("patch_size = {}\n", t.patch_size));
        out.push_str(&format!("lr0 = {:e}\n", t.lr0));
        out.push_str(&format!("lr_halve_every = {}\n", t.lr_halve_every));
        out.push_str(&format!("epochs = {}\n", t.epochs));
        out.push_str(&format!("seed = {}\n", t.seed));
        out.push_str(&format!("checkpoint_every = {}\n", t.checkpoint_every));
        if let Some(p) = &self.manifest {
            out.push_str(&format!("manifest = {}\n", p.display()));
        }
        if let Some(p) = &self.checkpoint {
            out.push_str(&format!("checkpoint = {}\n", p.display()));
        }
        if let Some(p) = &self.out_dir {
            out.push_str(&format!("out_dir = {}\n", p.display()));
        }
        out
    }
}
