//! Model checkpoints: one container entry per parameter plus `__config__`.

use std::path::Path;

use super::container::{Container, DType};
use crate::error::{Error, Result};
use crate::model::{AutrModel, ModelConfig};
use crate::numeric::Tensor;

pub const CONFIG_ENTRY: &str = "__config__";

const ARCH_FIELDS: [&str; 18] = [
    "image_size",
    "audio_bins",
    "audio_steps",
    "c_a",
    "c_av",
    "vis_channels[0]",
    "vis_channels[1]",
    "vis_channels[2]",
    "stem_channels",
    "audio_channels",
    "audio_depth",
    "n_q",
    "heads",
    "n_enc",
    "n_dec",
    "ffn_dim",
    "c_m",
    "audio_queries",
];

fn arch_values(cfg: &ModelConfig) -> [f64; 18] {
    let v = cfg.vis_channels;
    [
        cfg.image_size,
        cfg.audio_bins,
        cfg.audio_steps,
        cfg.c_a,
        cfg.c_av,
        v[0],
        v[1],
        v[2],
        cfg.stem_channels,
        cfg.audio_channels,
        cfg.audio_depth,
        cfg.n_q,
        cfg.heads,
        cfg.n_enc,
        cfg.n_dec,
        cfg.ffn_dim,
        cfg.c_m,
        usize::from(cfg.audio_queries),
    ]
    .map(|x| x as f64)
}

pub fn to_container(model: &AutrModel) -> Result<Container> {
    let mut c = Container::new();
    for (_, p) in model.params().iter() {
        c.insert_as(p.name(), p.tensor().clone().with_requires_grad(false), DType::F64)?;
    }
    c.insert(CONFIG_ENTRY, Tensor::new(&[ARCH_FIELDS.len()], arch_values(model.config()).to_vec())?)?;
    Ok(c)
}

pub fn save_checkpoint(model: &AutrModel, path: &Path) -> Result<()> {
    to_container(model)?.write(path)
}

fn config_from_entry(t: &Tensor) -> Result<ModelConfig> {
    if t.shape() != [ARCH_FIELDS.len()] {
        return Err(Error::Checkpoint(format!(
            "{CONFIG_ENTRY} has shape {:?}, expected [{}]",
            t.shape(),
            ARCH_FIELDS.len()
        )));
    }
    let mut v = [0usize; 18];
    for (i, (&x, name)) in t.data().iter().zip(ARCH_FIELDS).enumerate() {
        if !(x >= 0.0 && x.fract() == 0.0 && x < 1e9) {
            return Err(Error::Checkpoint(format!("{CONFIG_ENTRY}: {name} = {x} is not a size")));
        }
        v[i] = x as usize;
    }
    Ok(ModelConfig {
        image_size: v[0],
        audio_bins: v[1],
        audio_steps: v[2],
        c_a: v[3],
        c_av: v[4],
        vis_channels: [v[5], v[6], v[7]],
        stem_channels: v[8],
        audio_channels: v[9],
        audio_depth: v[10],
        n_q: v[11],
        heads: v[12],
        n_enc: v[13],
        n_dec: v[14],
        ffn_dim: v[15],
        c_m: v[16],
        audio_queries: v[17] != 0,
        init_seed: 0,
    })
}

/// Architecture recorded in a checkpoint. `init_seed` is not stored and
/// comes back as 0.
pub fn read_checkpoint_config(path: &Path) -> Result<ModelConfig> {
    config_from_entry(Container::read(path)?.require(CONFIG_ENTRY)?)
}

/// Builds a model for `cfg` and fills every parameter from `container`.
pub fn from_container(container: &Container, cfg: &ModelConfig) -> Result<AutrModel> {
    let mut model = AutrModel::new(cfg.clone())?;
    let ids: Vec<_> = model.params().iter().map(|(id, p)| (id, p.name().to_string())).collect();
    for (id, name) in &ids {
        let saved = container
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter `{name}`")))?;
        let param = model.params_mut().get_mut(*id).tensor_mut();
        if saved.shape() != param.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter `{name}` has shape {:?}, expected {:?}",
                saved.shape(),
                param.shape()
            )));
        }
        param.data_mut().copy_from_slice(saved.data());
    }
    if let Some(extra) = container
        .names()
        .find(|n| *n != CONFIG_ENTRY && !ids.iter().any(|(_, name)| name == n))
    {
        return Err(Error::Checkpoint(format!("unexpected parameter `{extra}`")));
    }
    let stored = arch_values(&config_from_entry(container.require(CONFIG_ENTRY)?)?);
    let wanted = arch_values(cfg);
    if let Some(i) = (0..stored.len()).find(|&i| stored[i] != wanted[i]) {
        return Err(Error::Checkpoint(format!(
            "architecture mismatch: checkpoint has {} = {}, config has {}",
            ARCH_FIELDS[i], stored[i], wanted[i]
        )));
    }
    Ok(model)
}

pub fn load_checkpoint(path: &Path, cfg: &ModelConfig) -> Result<AutrModel> {
    from_container(&Container::read(path)?, cfg)
}
