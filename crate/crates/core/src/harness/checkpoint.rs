//! Checkpoint directories.
//!
//! ```text
//! checkpoint/
//!   manifest.toml   spec, seeds, epoch, metric snapshot and the run config
//!   net1.params     tensor archive of the first network
//!   net2.params     present when the run has a second network
//! ```
//!
//! A tensor archive is little-endian: magic `CSSP`, `u32` version, `u32`
//! tensor count, then per tensor `u32` name length, UTF-8 name, `u8` kind
//! (0 parameter, 1 buffer), `u32` rank, `u64` dims and `f64` values.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::metrics::MetricsRow;
use crate::error::{CssError, Result};
use crate::model::{build_network, ModelSpec, Network};
use crate::nn::{Param, Visitor};

const MAGIC: &[u8; 4] = b"CSSP";
const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.toml";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format_version: u32,
    pub epoch: usize,
    pub net1_seed: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub net2_seed: Option<u64>,
    pub spec: ModelSpec,
    pub metrics: MetricsRow,
    pub config: ExperimentConfig,
}

/// Networks restored from a checkpoint directory.
pub struct LoadedCheckpoint {
    pub manifest: Manifest,
    pub net1: Network,
    pub net2: Option<Network>,
}

pub fn save_checkpoint(
    dir: &Path,
    manifest: &Manifest,
    net1: &Network,
    net2: Option<&Network>,
) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| CssError::io(dir, e))?;
    write_params(&dir.join("net1.params"), net1)?;
    let net2_path = dir.join("net2.params");
    match net2 {
        Some(n) => write_params(&net2_path, n)?,
        None if net2_path.exists() => {
            std::fs::remove_file(&net2_path).map_err(|e| CssError::io(&net2_path, e))?
        }
        None => {}
    }
    let text = toml::to_string(manifest).map_err(|e| CssError::Checkpoint(e.to_string()))?;
    let path = dir.join(MANIFEST_FILE);
    std::fs::write(&path, text).map_err(|e| CssError::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| CssError::io(&path, e))?;
    let manifest: Manifest = toml::from_str(&text)
        .map_err(|e| CssError::Checkpoint(format!("{}: {}", path.display(), e.message())))?;
    if manifest.format_version != VERSION {
        return Err(CssError::Checkpoint(format!(
            "unsupported checkpoint version {}",
            manifest.format_version
        )));
    }
    Ok(manifest)
}

pub fn load_checkpoint(dir: &Path) -> Result<LoadedCheckpoint> {
    let manifest = read_manifest(dir)?;
    let load = |file: &str, seed: u64| -> Result<Network> {
        let mut net = build_network(&manifest.spec, seed)?;
        read_params(&dir.join(file), &mut net)?;
        Ok(net)
    };
    let net1 = load("net1.params", manifest.net1_seed)?;
    let net2 = manifest
        .net2_seed
        .map(|s| load("net2.params", s))
        .transpose()?;
    Ok(LoadedCheckpoint {
        manifest,
        net1,
        net2,
    })
}

pub fn checkpoint_version() -> u32 {
    VERSION
}

struct Collect(Vec<(String, u8, ArrayD<f64>)>);

impl Visitor for Collect {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.0.push((name.to_string(), 0, p.value.clone()));
    }
    fn buffer(&mut self, name: &str, b: &mut ArrayD<f64>) {
        self.0.push((name.to_string(), 1, b.clone()));
    }
}

pub fn write_params(path: &Path, net: &Network) -> Result<()> {
    // `visit` needs `&mut`; a clone keeps the caller's network untouched.
    let mut net = net.clone();
    let mut c = Collect(Vec::new());
    net.visit(&mut c);
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(c.0.len() as u32).to_le_bytes());
    for (name, kind, arr) in &c.0 {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.push(*kind);
        buf.extend_from_slice(&(arr.ndim() as u32).to_le_bytes());
        for &d in arr.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in arr.iter() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| CssError::io(path, e))?;
    f.write_all(&buf).map_err(|e| CssError::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CssError::Checkpoint("truncated tensor archive".into()));
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

fn parse_archive(bytes: &[u8]) -> Result<HashMap<String, (u8, ArrayD<f64>)>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(CssError::Checkpoint("not a tensor archive".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CssError::Checkpoint(format!(
            "unsupported archive version {version}"
        )));
    }
    let count = r.u32()? as usize;
    let mut out = HashMap::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CssError::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let kind = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let dims: Vec<usize> = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<_>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 8)?;
        let data: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let arr = ArrayD::from_shape_vec(IxDyn(&dims), data).expect("consistent dims");
        if out.insert(name.clone(), (kind, arr)).is_some() {
            return Err(CssError::Checkpoint(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(CssError::Checkpoint(
            "trailing bytes after tensor archive".into(),
        ));
    }
    Ok(out)
}

struct Assign {
    tensors: HashMap<String, (u8, ArrayD<f64>)>,
    error: Option<CssError>,
}

impl Assign {
    fn take(&mut self, name: &str, kind: u8, target: &mut ArrayD<f64>) {
        if self.error.is_some() {
            return;
        }
        match self.tensors.remove(name) {
            Some((k, arr)) if k == kind && arr.shape() == target.shape() => target.assign(&arr),
            Some((_, arr)) => {
                self.error = Some(CssError::Checkpoint(format!(
                    "tensor {name} has shape {:?}, network expects {:?}",
                    arr.shape(),
                    target.shape()
                )))
            }
            None => self.error = Some(CssError::Checkpoint(format!("tensor {name} missing"))),
        }
    }
}

impl Visitor for Assign {
    fn param(&mut self, name: &str, p: &mut Param) {
        self.take(name, 0, &mut p.value);
    }
    fn buffer(&mut self, name: &str, b: &mut ArrayD<f64>) {
        self.take(name, 1, b);
    }
}

/// Overwrites every parameter and buffer of `net` from the archive at `path`.
pub fn read_params(path: &Path, net: &mut Network) -> Result<()> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| CssError::io(path, e))?;
    let mut assign = Assign {
        tensors: parse_archive(&bytes)?,
        error: None,
    };
    net.visit(&mut assign);
    if let Some(e) = assign.error {
        return Err(e);
    }
    if let Some(extra) = assign.tensors.keys().next() {
        return Err(CssError::Checkpoint(format!("unexpected tensor {extra}")));
    }
    Ok(())
}
