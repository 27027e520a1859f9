//! Checkpoint directories: one IFT1 file per tensor plus `manifest.txt`.

use std::path::Path;

use super::config::IffArchConfig;
use super::net::IffNet;
use super::params::{BufferStore, ParamLayout, ParamStore};
use crate::error::{Error, Result};
use crate::io::{load_tensor, save_tensor};
use crate::kv::KvMap;
use crate::scalar::Scalar;
use crate::tape::RunningStats;
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
pub const MANIFEST: &str = "manifest.txt";

/// Writes `model` into `dir` (created if missing). `extra` entries are
/// appended to the manifest.
pub fn save_checkpoint<T: Scalar>(model: &IffNet<T>, dir: &Path, extra: &KvMap) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layout = ParamLayout::new(&model.cfg);
    for spec in &layout.params {
        save_tensor(
            model.params.get(&spec.path)?,
            &dir.join(format!("{}.ift", spec.path)),
        )?;
    }
    for (path, c) in &layout.norms {
        let rs = model.buffers.get(path)?;
        let mean = Tensor::new(&[*c], rs.mean.clone())?;
        let var = Tensor::new(&[*c], rs.var.clone())?;
        save_tensor(&mean, &dir.join(format!("{path}.running_mean.ift")))?;
        save_tensor(&var, &dir.join(format!("{path}.running_var.ift")))?;
    }
    let mut kv = KvMap::new();
    kv.set("format_version", CHECKPOINT_VERSION);
    kv.set("kind", "iffnet-checkpoint");
    model.cfg.write_kv(&mut kv);
    kv.set("param_count", model.param_count());
    for (k, v) in extra.iter() {
        kv.set(k, v);
    }
    kv.write(&dir.join(MANIFEST))
}

/// Loads a checkpoint written by [`save_checkpoint`], returning the model and
/// its manifest.
pub fn load_checkpoint<T: Scalar>(dir: &Path) -> Result<(IffNet<T>, KvMap)> {
    let manifest_path = dir.join(MANIFEST);
    let kv = KvMap::read(&manifest_path)?;
    let version: u32 = kv.require("format_version", &manifest_path)?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::format(
            &manifest_path,
            format!("unsupported checkpoint version {version}"),
        ));
    }
    let cfg = IffArchConfig::from_kv(&kv, &manifest_path)?;
    let layout = ParamLayout::new(&cfg);
    let mut params = ParamStore::new();
    for spec in &layout.params {
        let file = dir.join(format!("{}.ift", spec.path));
        let t: Tensor<T> = load_tensor(&file)?;
        if t.shape() != spec.shape.as_slice() {
            return Err(Error::format(
                &file,
                format!("shape {:?}, expected {:?}", t.shape(), spec.shape),
            ));
        }
        params.insert(&spec.path, t);
    }
    let mut buffers = BufferStore::empty();
    for (path, c) in &layout.norms {
        let load = |suffix: &str| -> Result<Vec<T>> {
            let file = dir.join(format!("{path}.{suffix}.ift"));
            let t: Tensor<T> = load_tensor(&file)?;
            if t.shape() != [*c] {
                return Err(Error::format(&file, format!("expected {c} channels")));
            }
            Ok(t.into_data())
        };
        buffers.insert(
            path,
            RunningStats {
                mean: load("running_mean")?,
                var: load("running_var")?,
            },
        );
    }
    Ok((
        IffNet {
            cfg,
            params,
            buffers,
        },
        kv,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut model = IffNet::<f32>::init(IffArchConfig::sized(1, 3), 9).unwrap();
        model.buffers.get_mut("enh.up.bn").unwrap().mean[0] = 0.5;
        let mut extra = KvMap::new();
        extra.set("adam.beta1", 0.9);
        save_checkpoint(&model, dir.path(), &extra).unwrap();
        let (back, kv) = load_checkpoint::<f32>(dir.path()).unwrap();
        assert_eq!(back, model);
        assert_eq!(kv.get::<f64>("adam.beta1").unwrap(), Some(0.9));
        assert_eq!(
            kv.get::<usize>("param_count").unwrap(),
            Some(model.param_count())
        );
    }

    #[test]
    fn missing_tensor_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let model = IffNet::<f32>::init(IffArchConfig::sized(1, 2), 0).unwrap();
        save_checkpoint(&model, dir.path(), &KvMap::new()).unwrap();
        std::fs::remove_file(dir.path().join("merge.conv2.bias.ift")).unwrap();
        let err = load_checkpoint::<f32>(dir.path()).unwrap_err().to_string();
        assert!(err.contains("merge.conv2.bias"), "{err}");
    }
}
