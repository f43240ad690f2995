//! Checkpoint directories: `weights.eptn` holds every tensor back to back,
//! `index.txt` records the model configuration and where each tensor starts.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use super::{EpanModel, ModelConfig, ModelState};
use crate::error::{Error, Result};
use crate::tensor::io;

pub const WEIGHTS_FILE: &str = "weights.eptn";
pub const INDEX_FILE: &str = "index.txt";

fn config_lines(c: &ModelConfig) -> String {
    let sc = c.stage_channels.map(|v| v.to_string()).join(",");
    format!(
        "input_channels={}\ninput_h={}\ninput_w={}\nstage_channels={sc}\nnum_classes={}\n\
         embed_dim={}\ngrid_channels={}\nibn_enabled={}\naffine_enabled={}\n",
        c.input_channels,
        c.input_h,
        c.input_w,
        c.num_classes,
        c.embed_dim,
        c.grid_channels,
        c.ibn_enabled,
        c.affine_enabled
    )
}

fn parse_config(fields: &BTreeMap<String, String>, path: &Path) -> Result<ModelConfig> {
    let bad = |k: &str| Error::Format {
        path: path.to_path_buf(),
        offset: 0,
        message: format!("missing or invalid `{k}` in checkpoint index"),
    };
    let get = |k: &str| fields.get(k).ok_or_else(|| bad(k));
    let num = |k: &str| get(k)?.parse::<usize>().map_err(|_| bad(k));
    let flag = |k: &str| get(k)?.parse::<bool>().map_err(|_| bad(k));
    let sc: Vec<usize> = get("stage_channels")?
        .split(',')
        .map(|v| v.parse().map_err(|_| bad("stage_channels")))
        .collect::<Result<_>>()?;
    Ok(ModelConfig {
        input_channels: num("input_channels")?,
        input_h: num("input_h")?,
        input_w: num("input_w")?,
        stage_channels: sc.try_into().map_err(|_| bad("stage_channels"))?,
        num_classes: num("num_classes")?,
        embed_dim: num("embed_dim")?,
        grid_channels: num("grid_channels")?,
        ibn_enabled: flag("ibn_enabled")?,
        affine_enabled: flag("affine_enabled")?,
    })
}

pub fn save(model: &EpanModel, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut weights = Vec::new();
    let mut index = config_lines(&model.config);
    for (kind, map) in [("param", &model.state.params), ("buffer", &model.state.buffers)] {
        for (name, t) in map {
            let shape = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
            writeln!(index, "{kind} {name} {shape} {}", weights.len()).unwrap();
            weights.extend_from_slice(&io::encode(t));
        }
    }
    let wp = dir.join(WEIGHTS_FILE);
    std::fs::write(&wp, weights).map_err(|e| Error::io(&wp, e))?;
    let ip = dir.join(INDEX_FILE);
    std::fs::write(&ip, index).map_err(|e| Error::io(&ip, e))
}

pub fn load(dir: &Path) -> Result<EpanModel> {
    let ip = dir.join(INDEX_FILE);
    let wp = dir.join(WEIGHTS_FILE);
    let index = std::fs::read_to_string(&ip).map_err(|e| Error::io(&ip, e))?;
    let weights = std::fs::read(&wp).map_err(|e| Error::io(&wp, e))?;
    let mut fields = BTreeMap::new();
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    let mut line_offset = 0;
    for line in index.lines() {
        let fmt_err = |message: String| Error::Format {
            path: ip.clone(),
            offset: line_offset,
            message,
        };
        let parts: Vec<&str> = line.split_whitespace().collect();
        match parts.as_slice() {
            [] => {}
            [kind @ ("param" | "buffer"), name, shape, offset] => {
                let offset: usize = offset
                    .parse()
                    .map_err(|_| fmt_err(format!("bad offset for {name}")))?;
                let tail = weights
                    .get(offset..)
                    .ok_or_else(|| fmt_err(format!("offset for {name} past end of weights")))?;
                let (t, _) = io::decode(tail, &wp, offset)?;
                let shape_str = t.shape().iter().map(|d| d.to_string()).collect::<Vec<_>>().join("x");
                if shape_str != *shape {
                    return Err(fmt_err(format!("shape mismatch for {name}")));
                }
                let map = if *kind == "param" { &mut params } else { &mut buffers };
                map.insert(name.to_string(), t);
            }
            [kv] if kv.contains('=') => {
                let (k, v) = kv.split_once('=').unwrap();
                fields.insert(k.to_string(), v.to_string());
            }
            _ => return Err(fmt_err(format!("unrecognized index line `{line}`"))),
        }
        line_offset += line.len() + 1;
    }
    let config = parse_config(&fields, &ip)?;
    config.validate()?;
    let expected = ModelState::init(&config, 0);
    for (name, t) in &expected.params {
        match params.get(name) {
            Some(p) if p.shape() == t.shape() => {}
            _ => {
                return Err(Error::Format {
                    path: ip.clone(),
                    offset: 0,
                    message: format!("parameter {name} missing or mis-shaped"),
                })
            }
        }
    }
    if params.len() != expected.params.len() || buffers.len() != expected.buffers.len() {
        return Err(Error::Format {
            path: ip,
            offset: 0,
            message: "checkpoint tensor set does not match the configuration".into(),
        });
    }
    Ok(EpanModel {
        config,
        state: ModelState { params, buffers },
    })
}
