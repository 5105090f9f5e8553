//! Checkpoint directories: `manifest.json` describing each tensor plus
//! `params.bin` holding the little-endian f32 payload in manifest order.
//! `offset` and `length` in the manifest are byte counts into `params.bin`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernel::{ParamTree, Tensor};
use crate::scalar::Scalar;

use super::{AdapterModule, BaseModel, ModelConfig};

pub const MANIFEST: &str = "manifest.json";
pub const PARAMS: &str = "params.bin";
const CONFIG: &str = "config.json";
const ADAPTER_META: &str = "adapter.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: usize,
    pub length: usize,
}

#[derive(Serialize, Deserialize)]
struct AdapterMeta {
    domain_id: String,
}

fn write(path: &Path, bytes: impl AsRef<[u8]>) -> Result<()> {
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn corrupt(path: &Path, reason: impl std::fmt::Display) -> Error {
    Error::Data(format!("corrupted checkpoint file {}: {reason}", path.display()))
}

/// Writes `tree` as f32 regardless of its in-memory scalar type.
pub fn save_params<T: Scalar>(tree: &ParamTree<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut manifest = Vec::with_capacity(tree.len());
    let mut bin = Vec::with_capacity(tree.numel() * 4);
    for (name, t) in tree.iter() {
        let offset = bin.len();
        for &x in t.data() {
            bin.extend_from_slice(&(x.as_f64() as f32).to_le_bytes());
        }
        manifest.push(ManifestEntry {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            dtype: "f32".into(),
            offset,
            length: bin.len() - offset,
        });
    }
    let json = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    write(&dir.join(PARAMS), &bin)?;
    // manifest last: its presence marks a complete checkpoint
    write(&dir.join(MANIFEST), json)
}

pub fn read_manifest(dir: &Path) -> Result<Vec<ManifestEntry>> {
    let path = dir.join(MANIFEST);
    if !path.exists() {
        return Err(Error::missing(&path, "checkpoint manifest not found"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| corrupt(&path, e))
}

pub fn load_params(dir: &Path) -> Result<ParamTree<f32>> {
    let manifest = read_manifest(dir)?;
    let bin_path = dir.join(PARAMS);
    if !bin_path.exists() {
        return Err(Error::missing(&bin_path, "checkpoint payload not found"));
    }
    let bin = fs::read(&bin_path).map_err(|e| Error::io(&bin_path, e))?;
    let manifest_path = dir.join(MANIFEST);
    let mut tree = ParamTree::new();
    for e in manifest {
        if e.dtype != "f32" {
            return Err(corrupt(&manifest_path, format!("`{}` has dtype {}", e.name, e.dtype)));
        }
        let numel: usize = e.shape.iter().product();
        if e.length != numel * 4 || e.offset + e.length > bin.len() {
            return Err(corrupt(
                &manifest_path,
                format!(
                    "`{}` spans bytes {}..{} of {}",
                    e.name,
                    e.offset,
                    e.offset + e.length,
                    bin.len()
                ),
            ));
        }
        let data = bin[e.offset..e.offset + e.length]
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let t = Tensor::new(e.shape, data).map_err(|err| corrupt(&manifest_path, err))?;
        tree.insert(e.name, t);
    }
    Ok(tree)
}

/// Copies `tree` into `target`, which must have exactly the same structure.
pub fn load_into<T: Scalar>(target: &mut ParamTree<T>, tree: &ParamTree<f32>) -> Result<()> {
    target.check_same_structure(tree)?;
    for (name, t) in target.iter_mut() {
        *t = tree.get(name)?.cast::<T>().with_grad(t.requires_grad());
    }
    Ok(())
}

pub fn save_base<T: Scalar>(base: &BaseModel<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let cfg = serde_json::to_string_pretty(&base.config).expect("config serializes");
    write(&dir.join(CONFIG), cfg)?;
    save_params(&base.params, dir)
}

pub fn load_base(dir: &Path) -> Result<BaseModel<f32>> {
    let path = dir.join(CONFIG);
    if !path.exists() {
        return Err(Error::missing(&path, "base model config not found"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let config: ModelConfig = serde_json::from_str(&text).map_err(|e| corrupt(&path, e))?;
    let mut base = super::init_base::<f32>(&config, 0).map_err(|e| corrupt(&path, e))?;
    load_into(&mut base.params, &load_params(dir)?)?;
    Ok(base)
}

pub fn save_adapter<T: Scalar>(adapter: &AdapterModule<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = AdapterMeta {
        domain_id: adapter.domain_id.clone(),
    };
    write(
        &dir.join(ADAPTER_META),
        serde_json::to_string_pretty(&meta).expect("meta serializes"),
    )?;
    save_params(&adapter.params, dir)
}

/// Loads an adapter and checks it against the structure `base` expects.
pub fn load_adapter(dir: &Path, base: &BaseModel<f32>) -> Result<AdapterModule<f32>> {
    let meta_path = dir.join(ADAPTER_META);
    if !meta_path.exists() {
        return Err(Error::missing(&meta_path, "adapter metadata not found"));
    }
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: AdapterMeta = serde_json::from_str(&text).map_err(|e| corrupt(&meta_path, e))?;
    let mut params = base.adapter_template()?;
    load_into(&mut params, &load_params(dir)?)?;
    Ok(AdapterModule {
        domain_id: meta.domain_id,
        params,
    })
}
