//! Parameter checkpoints: a TOML manifest naming every tensor plus one binary
//! file of concatenated tensor blobs, stored in a directory alongside any
//! module-specific metadata file.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{serialize, ParamSet, Scalar, Tensor};

const MANIFEST: &str = "params.toml";
const BLOBS: &str = "params.bin";

#[derive(Serialize, Deserialize)]
struct Manifest {
    version: u32,
    tensors: Vec<Entry>,
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    trainable: bool,
}

/// Write the parameter set under `dir` (created if missing).
pub fn save_params<S: Scalar>(dir: &Path, params: &ParamSet<S>) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let manifest = Manifest {
        version: 1,
        tensors: params
            .iter()
            .map(|(name, t)| Entry {
                name: name.to_string(),
                shape: t.shape().to_vec(),
                trainable: t.requires_grad(),
            })
            .collect(),
    };
    let text = toml::to_string(&manifest)
        .map_err(|e| Error::Checkpoint(format!("manifest serialization failed: {e}")))?;
    let mpath = dir.join(MANIFEST);
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;

    let bpath = dir.join(BLOBS);
    let f = File::create(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut w = BufWriter::new(f);
    for (_, t) in params.iter() {
        serialize::write_tensor(&mut w, t).map_err(|e| Error::io(&bpath, e))?;
    }
    w.flush().map_err(|e| Error::io(&bpath, e))
}

/// Read a parameter set previously written with `save_params`.
pub fn load_params<S: Scalar>(dir: &Path) -> Result<ParamSet<S>> {
    let mpath = dir.join(MANIFEST);
    let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
    let manifest: Manifest =
        toml::from_str(&text).map_err(|e| Error::parse(&mpath, e.to_string()))?;
    if manifest.version != 1 {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.version
        )));
    }
    let bpath = dir.join(BLOBS);
    let f = File::open(&bpath).map_err(|e| Error::io(&bpath, e))?;
    let mut r = BufReader::new(f);
    let mut params = ParamSet::new();
    for entry in &manifest.tensors {
        let (shape, data): (Vec<usize>, Vec<S>) =
            serialize::read_blob(&mut r).map_err(|e| Error::io(&bpath, e))?;
        if shape != entry.shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{}` has shape {:?} in blobs but {:?} in manifest",
                entry.name, shape, entry.shape
            )));
        }
        let t = if entry.trainable {
            Tensor::param(&shape, data)
        } else {
            Tensor::from_vec(&shape, data)
        };
        params.insert(entry.name.clone(), t);
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_preserves_order_values_and_trainability() {
        let dir = tempfile::tempdir().unwrap();
        let mut params = ParamSet::<f32>::new();
        params.insert("a.weight", Tensor::param(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]));
        params.insert("a.bias", Tensor::param(&[2], vec![-1.0, 0.5]));
        params.insert("bn.running_mean", Tensor::from_vec(&[2], vec![0.1, 0.2]));
        save_params(dir.path(), &params).unwrap();
        let back: ParamSet<f32> = load_params(dir.path()).unwrap();
        let names: Vec<_> = back.iter().map(|(n, _)| n.to_string()).collect();
        assert_eq!(names, ["a.weight", "a.bias", "bn.running_mean"]);
        assert_eq!(back.get("a.weight").to_vec(), vec![1.0, 2.0, 3.0, 4.0]);
        assert!(back.get("a.bias").requires_grad());
        assert!(!back.get("bn.running_mean").requires_grad());
    }

    #[test]
    fn missing_manifest_is_an_io_error() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_params::<f32>(dir.path()).is_err());
    }
}
