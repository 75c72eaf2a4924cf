//! Checkpoint directories: `config.txt` (key=value), `params.manifest`
//! (`path<TAB>file` per line) and one RTD1 dump per parameter.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Backbone, BackboneConfig};
use crate::error::{Error, Result};
use crate::tensor::{rtd, Tensor};

const CONFIG_FILE: &str = "config.txt";
const MANIFEST_FILE: &str = "params.manifest";

fn config_text(cfg: &BackboneConfig) -> String {
    format!(
        "latent_channels={}\nbase_width={}\nnum_down_blocks={}\nup_layers={}\nattn_heads={}\n\
         frames={}\nheight={}\nwidth={}\ncond_tokens={}\ncond_dim={}\nseed={}\ntemporal_enabled={}\n",
        cfg.latent_channels,
        cfg.base_width,
        cfg.num_down_blocks,
        cfg.up_layers,
        cfg.attn_heads,
        cfg.frames,
        cfg.height,
        cfg.width,
        cfg.cond_tokens,
        cfg.cond_dim,
        cfg.seed,
        cfg.temporal_enabled,
    )
}

fn parse_config(text: &str) -> Result<BackboneConfig> {
    let mut cfg = BackboneConfig::default();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::Config(format!("{CONFIG_FILE}:{}: cannot parse `{line}`", n + 1));
        let (key, value) = line.split_once('=').ok_or_else(bad)?;
        let (key, value) = (key.trim(), value.trim());
        let num = || value.parse::<usize>().map_err(|_| bad());
        match key {
            "latent_channels" => cfg.latent_channels = num()?,
            "base_width" => cfg.base_width = num()?,
            "num_down_blocks" => cfg.num_down_blocks = num()?,
            "up_layers" => cfg.up_layers = num()?,
            "attn_heads" => cfg.attn_heads = num()?,
            "frames" => cfg.frames = num()?,
            "height" => cfg.height = num()?,
            "width" => cfg.width = num()?,
            "cond_tokens" => cfg.cond_tokens = num()?,
            "cond_dim" => cfg.cond_dim = num()?,
            "seed" => cfg.seed = value.parse().map_err(|_| bad())?,
            "temporal_enabled" => cfg.temporal_enabled = value.parse().map_err(|_| bad())?,
            _ => return Err(Error::Config(format!("{CONFIG_FILE}: unknown key `{key}`"))),
        }
    }
    Ok(cfg)
}

pub fn save_checkpoint(backbone: &Backbone<f32>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
    let cfg_path = dir.join(CONFIG_FILE);
    fs::write(&cfg_path, config_text(backbone.config())).map_err(|e| Error::io(cfg_path.clone(), e))?;
    let mut manifest = String::new();
    for (path, tensor) in backbone.params() {
        let file = format!("{path}.rtd");
        rtd::write(&dir.join(&file), tensor)?;
        manifest.push_str(&format!("{path}\t{file}\n"));
    }
    let man_path = dir.join(MANIFEST_FILE);
    fs::write(&man_path, manifest).map_err(|e| Error::io(man_path.clone(), e))
}

pub fn load_checkpoint(dir: &Path) -> Result<Backbone<f32>> {
    let cfg_path = dir.join(CONFIG_FILE);
    let cfg = parse_config(&fs::read_to_string(&cfg_path).map_err(|e| Error::io(cfg_path.clone(), e))?)?;
    let man_path = dir.join(MANIFEST_FILE);
    let manifest = fs::read_to_string(&man_path).map_err(|e| Error::io(man_path.clone(), e))?;
    let mut params: BTreeMap<String, Tensor> = BTreeMap::new();
    for line in manifest.lines().filter(|l| !l.trim().is_empty()) {
        let (path, file) = line
            .split_once('\t')
            .ok_or_else(|| Error::Config(format!("{MANIFEST_FILE}: malformed line `{line}`")))?;
        if file.contains('/') || file.contains('\\') {
            return Err(Error::Config(format!("{MANIFEST_FILE}: file `{file}` escapes the checkpoint")));
        }
        params.insert(path.to_string(), rtd::read(&dir.join(file))?);
    }
    Backbone::from_params(&cfg, &params)
}
