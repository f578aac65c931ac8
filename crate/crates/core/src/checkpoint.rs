//! On-disk artifacts: model checkpoints and sample sets.
//!
//! Both are directories holding a `manifest.json` and a flat binary file of
//! little-endian `f32` values.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::RunConfig;
use crate::data::Scaling;
use crate::denoiser::Denoiser;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
pub const SAMPLES: &str = "samples.bin";
const FORMAT: u32 = 1;

pub fn write_f32_le(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn read_f32_le(path: &Path) -> Result<Vec<f64>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let bytes = std::fs::read(path)?;
    if bytes.len() % 4 != 0 {
        return Err(Error::Checkpoint(format!(
            "{} holds {} bytes, not a whole number of f32 values",
            path.display(),
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

fn read_manifest<T: for<'de> Deserialize<'de>>(dir: &Path) -> Result<T> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::MissingFile(path));
    }
    serde_json::from_str(&std::fs::read_to_string(&path)?)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

/// Data-side metadata stored alongside the weights.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct DataInfo {
    pub feature_names: Vec<String>,
    pub scaling: Option<Scaling>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub config_hash: String,
    pub config: RunConfig,
    pub channels: usize,
    pub step: usize,
    pub epoch: usize,
    pub data: DataInfo,
    /// In the order their values are concatenated in `params.bin`.
    pub params: Vec<ParamEntry>,
}

/// Write `manifest.json` and `params.bin` into `dir`, creating it.
pub fn save_checkpoint(dir: &Path, model: &Denoiser, data: &DataInfo, step: usize, epoch: usize) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let params = model
        .store
        .iter()
        .map(|p| ParamEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
        })
        .collect();
    let manifest = CheckpointManifest {
        format: FORMAT,
        config_hash: model.config.model_hash(),
        config: model.config.clone(),
        channels: model.channels,
        step,
        epoch,
        data: data.clone(),
        params,
    };
    let values: Vec<f64> = model.store.iter().flat_map(|p| p.value.data().iter().copied()).collect();
    write_f32_le(&dir.join(PARAMS), &values)?;
    std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

/// Rebuild the model from a checkpoint directory, validating that the
/// manifest, the configuration and the weights agree.
pub fn load_checkpoint(dir: &Path) -> Result<(Denoiser, CheckpointManifest)> {
    let manifest: CheckpointManifest = read_manifest(dir)?;
    if manifest.format != FORMAT {
        return Err(Error::Checkpoint(format!("unsupported checkpoint format {}", manifest.format)));
    }
    if manifest.config.model_hash() != manifest.config_hash {
        return Err(Error::Checkpoint("config hash does not match the stored config".into()));
    }
    let mut model = Denoiser::new(&manifest.config, manifest.channels)?;
    let values = read_f32_le(&dir.join(PARAMS))?;
    let ids: Vec<_> = model.store.ids().collect();
    if ids.len() != manifest.params.len() {
        return Err(Error::Checkpoint(format!(
            "manifest lists {} parameters, model has {}",
            manifest.params.len(),
            ids.len()
        )));
    }
    let expected: usize = manifest.params.iter().map(|p| p.shape.iter().product::<usize>()).sum();
    if expected != values.len() {
        return Err(Error::Checkpoint(format!(
            "{PARAMS} holds {} values, manifest expects {expected}",
            values.len()
        )));
    }
    let mut offset = 0;
    for (id, entry) in ids.into_iter().zip(&manifest.params) {
        if model.store.name(id) != entry.name || model.store.get(id).shape() != entry.shape.as_slice() {
            return Err(Error::Checkpoint(format!("parameter `{}` does not match the model", entry.name)));
        }
        let len: usize = entry.shape.iter().product();
        model
            .store
            .set(id, Tensor::new(entry.shape.clone(), values[offset..offset + len].to_vec()));
        offset += len;
    }
    Ok((model, manifest))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleManifest {
    pub shape: [usize; 3],
    pub dtype: String,
    pub feature_names: Vec<String>,
    pub scaling: Option<Scaling>,
    pub config_hash: String,
    pub seed: Option<u64>,
}

/// Windows in data units together with their manifest.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSet {
    pub manifest: SampleManifest,
    pub windows: Tensor,
}

impl SampleSet {
    pub fn save(&self, dir: &Path) -> Result<()> {
        if self.windows.shape() != self.manifest.shape {
            return Err(Error::Shape(format!(
                "windows {:?} but manifest says {:?}",
                self.windows.shape(),
                self.manifest.shape
            )));
        }
        std::fs::create_dir_all(dir)?;
        write_f32_le(&dir.join(SAMPLES), self.windows.data())?;
        std::fs::write(dir.join(MANIFEST), serde_json::to_string_pretty(&self.manifest)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: SampleManifest = read_manifest(dir)?;
        let values = read_f32_le(&dir.join(SAMPLES))?;
        let want: usize = manifest.shape.iter().product();
        if values.len() != want {
            return Err(Error::Checkpoint(format!(
                "{SAMPLES} holds {} values, manifest shape {:?} needs {want}",
                values.len(),
                manifest.shape
            )));
        }
        let windows = Tensor::new(manifest.shape.to_vec(), values);
        Ok(Self { manifest, windows })
    }

    /// Windows mapped to `[0, 1]` with the given scaling.
    pub fn scaled(&self, scaling: &Scaling) -> Result<Tensor> {
        if scaling.features() != self.manifest.shape[2] {
            return Err(Error::Shape(format!(
                "scaling has {} features, samples have {}",
                scaling.features(),
                self.manifest.shape[2]
            )));
        }
        Ok(Tensor::from_array3(&scaling.scale(&self.windows.to_array3())))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_model() -> Denoiser {
        let mut c = RunConfig::default();
        c.data.window = 8;
        c.model.width = 4;
        c.diffusion.steps = 10;
        c.lma.kernels = vec![3, 5];
        c.lma.hidden = 4;
        Denoiser::new(&c, 2).unwrap()
    }

    #[test]
    fn f32_roundtrip_and_layout() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("x.bin");
        write_f32_le(&p, &[1.0, -2.5]).unwrap();
        let bytes = std::fs::read(&p).unwrap();
        assert_eq!(bytes, [0, 0, 128, 63, 0, 0, 32, 192]);
        assert_eq!(read_f32_le(&p).unwrap(), vec![1.0, -2.5]);
        std::fs::write(&p, [0u8; 5]).unwrap();
        assert!(read_f32_le(&p).is_err());
    }

    #[test]
    fn checkpoint_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny_model();
        let info = DataInfo {
            feature_names: vec!["a".into(), "b".into()],
            scaling: Some(Scaling {
                min: vec![0.0, 1.0],
                max: vec![2.0, 3.0],
            }),
        };
        save_checkpoint(dir.path(), &model, &info, 7, 2).unwrap();
        let (back, m) = load_checkpoint(dir.path()).unwrap();
        assert_eq!((m.step, m.epoch, &m.data), (7, 2, &info));
        for (a, b) in model.store.iter().zip(back.store.iter()) {
            assert_eq!(a.name, b.name);
            let want: Vec<f64> = a.value.data().iter().map(|&v| v as f32 as f64).collect();
            assert_eq!(b.value.data(), want.as_slice());
        }
        // Saving the reloaded model reproduces the file bit for bit.
        let again = tempfile::tempdir().unwrap();
        save_checkpoint(again.path(), &back, &info, 7, 2).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join(PARAMS)).unwrap(),
            std::fs::read(again.path().join(PARAMS)).unwrap()
        );
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(dir.path(), &tiny_model(), &DataInfo::default(), 0, 0).unwrap();
        let params = dir.path().join(PARAMS);
        let bytes = std::fs::read(&params).unwrap();
        std::fs::write(&params, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
        std::fs::write(&params, &bytes).unwrap();
        let mpath = dir.path().join(MANIFEST);
        let text = std::fs::read_to_string(&mpath).unwrap();
        std::fs::write(&mpath, text.replace("\"width\": 4", "\"width\": 8")).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
        std::fs::write(&mpath, "{not json").unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_checkpoint(&dir.path().join("absent")),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn sample_set_roundtrip_and_empty() {
        let dir = tempfile::tempdir().unwrap();
        let set = SampleSet {
            manifest: SampleManifest {
                shape: [0, 8, 2],
                dtype: "f32".into(),
                feature_names: vec!["a".into(), "b".into()],
                scaling: None,
                config_hash: "h".into(),
                seed: Some(1),
            },
            windows: Tensor::zeros(&[0, 8, 2]),
        };
        set.save(dir.path()).unwrap();
        assert_eq!(std::fs::metadata(dir.path().join(SAMPLES)).unwrap().len(), 0);
        assert_eq!(SampleSet::load(dir.path()).unwrap(), set);

        let full = SampleSet {
            manifest: SampleManifest {
                shape: [1, 2, 1],
                ..set.manifest.clone()
            },
            windows: Tensor::new(vec![1, 2, 1], vec![0.5, -3.0]),
        };
        full.save(dir.path()).unwrap();
        assert_eq!(SampleSet::load(dir.path()).unwrap(), full);
        let scaled = full
            .scaled(&Scaling {
                min: vec![-3.0],
                max: vec![1.0],
            })
            .unwrap();
        assert_eq!(scaled.data(), &[0.875, 0.0]);
    }
}
