//! Parameter blobs with a key-value manifest.
//!
//! `params.bin` holds every tensor of the backbone, then of the goal module:
//! magic, version, count, then per tensor its name, shape and little-endian
//! f64 values. `manifest.txt` records the model-defining configuration keys
//! and a SHA-256 of them.

use std::io::{Read, Write};
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::config::{parse_key_values, RunConfig};
use crate::error::{Error, Result};
use crate::model::{Forecaster, ModelKind};
use crate::nn::{ParamStore, Tensor};
use crate::raster::RasterConfig;

const MAGIC: &[u8; 8] = b"GSARPARM";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.txt";
pub const PARAMS_FILE: &str = "params.bin";

/// Keys that fix the architecture and its inputs.
pub fn model_keys(cfg: &RunConfig, raster: &RasterConfig) -> Vec<(String, String)> {
    let mut keys: Vec<(String, String)> = cfg
        .entries()
        .into_iter()
        .filter(|(k, _)| {
            *k == "model"
                || k.starts_with("sar.")
                || (cfg.model.goal_conditioned() && (*k == "fusion" || k.starts_with("unet.")))
        })
        .map(|(k, v)| (k.to_string(), v))
        .collect();
    if cfg.model.goal_conditioned() {
        keys.push(("raster.sigma_px".into(), raster.sigma_s.to_string()));
        keys.push(("raster.downsample_factor".into(), raster.downsample_factor.to_string()));
        keys.push(("raster.peak_normalize".into(), raster.peak_normalize.to_string()));
    }
    keys
}

pub fn config_hash(keys: &[(String, String)]) -> String {
    let mut h = Sha256::new();
    for (k, v) in keys {
        h.update(k.as_bytes());
        h.update(b"=");
        h.update(v.as_bytes());
        h.update(b"\n");
    }
    h.finalize().iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub keys: Vec<(String, String)>,
    pub hash: String,
    pub params: usize,
}

impl Manifest {
    pub fn new(keys: Vec<(String, String)>, params: usize) -> Self {
        let hash = config_hash(&keys);
        Manifest { keys, hash, params }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.keys.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("format_version = {VERSION}\nconfig_hash = {}\nparameters = {}\n", self.hash, self.params);
        for (k, v) in &self.keys {
            s.push_str(&format!("{k} = {v}\n"));
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut kv = parse_key_values(text)?;
        let mut take = |name: &str| -> Result<String> {
            let i = kv
                .iter()
                .position(|(k, _)| k == name)
                .ok_or_else(|| Error::Checkpoint(format!("manifest lacks {name}")))?;
            Ok(kv.remove(i).1)
        };
        let version = take("format_version")?;
        if version != VERSION.to_string() {
            return Err(Error::Checkpoint(format!("unsupported format version {version}")));
        }
        let hash = take("config_hash")?;
        let params = take("parameters")?
            .parse()
            .map_err(|_| Error::Checkpoint("bad parameter count".into()))?;
        let m = Manifest { keys: kv, hash, params };
        if config_hash(&m.keys) != m.hash {
            return Err(Error::Checkpoint("manifest hash does not match its keys".into()));
        }
        Ok(m)
    }

    /// Keys whose values differ between the two manifests, including keys
    /// present in only one.
    pub fn differing_keys(&self, other: &Manifest) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        for (k, v) in &self.keys {
            if other.get(k) != Some(v.as_str()) {
                out.push(k.clone());
            }
        }
        for (k, _) in &other.keys {
            if self.get(k).is_none() {
                out.push(k.clone());
            }
        }
        out
    }
}

fn write_store(out: &mut Vec<u8>, store: &ParamStore) {
    for (_, name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

/// Serializes the backbone and, if present, the goal module.
pub fn encode_params(model: &Forecaster) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let goal = model.goal.as_ref().map(|g| g.unet.store());
    let count = model.sar.store().len() + goal.map_or(0, |s| s.len());
    out.extend_from_slice(&(count as u32).to_le_bytes());
    write_store(&mut out, model.sar.store());
    if let Some(s) = goal {
        write_store(&mut out, s);
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.buf.len() < n {
            return Err(Error::Checkpoint("truncated parameter file".into()));
        }
        let (a, b) = self.buf.split_at(n);
        self.buf = b;
        Ok(a)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

/// Parses a parameter blob into named tensors.
pub fn decode_params(bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader { buf: bytes };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a parameter file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported parameter version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| Error::Checkpoint("parameter name is not utf-8".into()))?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let len: usize = shape.iter().product();
        let data = (0..len).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
        out.push((name, Tensor::new(shape, data)));
    }
    if !r.buf.is_empty() {
        return Err(Error::Checkpoint("trailing bytes after parameters".into()));
    }
    Ok(out)
}

fn fill_store(template: &ParamStore, tensors: &mut std::vec::IntoIter<(String, Tensor)>) -> Result<ParamStore> {
    let mut store = ParamStore::new();
    for (_, name, t) in template.iter() {
        let (n, v) = tensors
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("missing parameter {name}")))?;
        if n != name || v.shape() != t.shape() {
            return Err(Error::Checkpoint(format!(
                "parameter {n} {:?} where {name} {:?} was expected",
                v.shape(),
                t.shape()
            )));
        }
        store.add(n, v);
    }
    Ok(store)
}

/// Replaces the parameters of a freshly built model with those in `bytes`.
pub fn load_params(mut model: Forecaster, bytes: &[u8]) -> Result<Forecaster> {
    let mut it = decode_params(bytes)?.into_iter();
    let sar = fill_store(model.sar.store(), &mut it)?;
    model.sar = model.sar.with_store(sar)?;
    if let Some(gm) = model.goal.take() {
        let store = fill_store(gm.unet.store(), &mut it)?;
        model.goal = Some(crate::model::GoalModule {
            unet: gm.unet.with_store(store)?,
            ..gm
        });
    }
    if it.next().is_some() {
        return Err(Error::Checkpoint("more parameters than the model has".into()));
    }
    Ok(model)
}

/// Writes `params.bin` and `manifest.txt` into `dir`.
pub fn save(dir: &Path, model: &Forecaster, manifest: &Manifest) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let p = dir.join(PARAMS_FILE);
    let mut f = std::fs::File::create(&p).map_err(|e| Error::io(&p, e))?;
    f.write_all(&encode_params(model)).map_err(|e| Error::io(&p, e))?;
    let m = dir.join(MANIFEST_FILE);
    std::fs::write(&m, manifest.to_text()).map_err(|e| Error::io(&m, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let m = dir.join(MANIFEST_FILE);
    Manifest::parse(&std::fs::read_to_string(&m).map_err(|e| Error::io(&m, e))?)
}

/// Loads a checkpoint after checking that `expected` describes the same
/// model; otherwise fails with the differing keys.
pub fn load(dir: &Path, expected: &Manifest, build: impl FnOnce() -> Result<Forecaster>) -> Result<Forecaster> {
    let found = read_manifest(dir)?;
    let diff = found.differing_keys(expected);
    if !diff.is_empty() {
        return Err(Error::CheckpointMismatch(diff));
    }
    let p = dir.join(PARAMS_FILE);
    let mut bytes = Vec::new();
    std::fs::File::open(&p)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(&p, e))?;
    load_params(build()?, &bytes)
}

/// Model kind recorded in a manifest.
pub fn manifest_model(m: &Manifest) -> Result<ModelKind> {
    ModelKind::parse(m.get("model").ok_or_else(|| Error::Checkpoint("manifest lacks model".into()))?)
}
