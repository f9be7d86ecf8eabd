//! Named-array archive used for base models, multi-style models and
//! inverted codes.
//!
//! Layout: 8-byte magic, `u32` format version, `u64` manifest length, a JSON
//! manifest, then the concatenated little-endian `f32` payload. Every entry
//! records its shape, offset, length and SHA-256. Nothing time-dependent is
//! stored, so saving the same model twice yields identical bytes.

use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::latent::{RowSchedule, SCode, WCode};
use crate::model::{BaseConfig, BaseModel, MultiStyleModel, Provenance};
use crate::nets::ParamTree;
use crate::rng;
use crate::stn::{Stn, StnBank, StnInit};
use crate::trainer::{hex_digest, TrainConfig};

pub const MAGIC: &[u8; 8] = b"MSGANARC";
pub const FORMAT_VERSION: u32 = 1;
/// Largest pixel deviation tolerated when replaying the stored golden output.
pub const GOLDEN_TOLERANCE: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ArchiveKind {
    Base,
    Multistyle,
    Code,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EntryInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Offset into the payload, in elements.
    pub offset: usize,
    /// Element count.
    pub len: usize,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub format_version: u32,
    pub kind: ArchiveKind,
    pub metadata: Value,
    pub entries: Vec<EntryInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub info: EntryInfo,
    pub data: Vec<f32>,
}

/// Decoded archive.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub manifest: Manifest,
    pub entries: Vec<Entry>,
}

/// Accumulates arrays in insertion order and encodes them.
#[derive(Debug, Default)]
pub struct ArchiveWriter {
    entries: Vec<(String, Vec<usize>, Vec<f32>)>,
}

impl ArchiveWriter {
    pub fn push(&mut self, name: impl Into<String>, shape: &[usize], data: &[f32]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.entries.push((name.into(), shape.to_vec(), data.to_vec()));
    }

    pub fn push_tree<P: ParamTree<f32>>(&mut self, prefix: &str, tree: &P) {
        tree.visit(&mut |name, shape, v| self.push(format!("{prefix}/{name}"), shape, v));
    }

    pub fn encode(self, kind: ArchiveKind, metadata: Value) -> Vec<u8> {
        let mut offset = 0;
        let mut payload = Vec::new();
        let mut infos = Vec::with_capacity(self.entries.len());
        for (name, shape, data) in self.entries {
            let bytes: Vec<u8> = data.iter().flat_map(|v| v.to_le_bytes()).collect();
            infos.push(EntryInfo {
                name,
                shape,
                dtype: "f32".into(),
                offset,
                len: data.len(),
                sha256: hex_digest(&bytes),
            });
            offset += data.len();
            payload.extend_from_slice(&bytes);
        }
        let manifest = Manifest {
            format_version: FORMAT_VERSION,
            kind,
            metadata,
            entries: infos,
        };
        let text = serde_json::to_vec_pretty(&manifest).expect("manifest serializes");
        let mut out = Vec::with_capacity(20 + text.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(text.len() as u64).to_le_bytes());
        out.extend_from_slice(&text);
        out.extend_from_slice(&payload);
        out
    }
}

impl Archive {
    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = |reason: &str| Error::integrity("header", reason);
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(header("not a model archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(header(&format!("unsupported format version {version}")));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if mlen > body.len() {
            return Err(header("manifest length exceeds file size"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])
            .map_err(|e| Error::integrity("manifest", e.to_string()))?;
        if manifest.format_version != version {
            return Err(Error::integrity("manifest", "format version disagrees with header"));
        }
        let payload = &body[mlen..];
        let mut expected_offset = 0;
        let mut entries = Vec::with_capacity(manifest.entries.len());
        let mut seen = std::collections::BTreeSet::new();
        for info in &manifest.entries {
            let bad = |reason: String| Error::integrity(info.name.clone(), reason);
            if !seen.insert(info.name.as_str()) {
                return Err(bad("duplicate entry".into()));
            }
            if info.dtype != "f32" {
                return Err(bad(format!("unsupported dtype {}", info.dtype)));
            }
            if info.shape.iter().product::<usize>() != info.len {
                return Err(bad(format!("shape {:?} does not hold {} elements", info.shape, info.len)));
            }
            if info.offset != expected_offset {
                return Err(bad(format!("offset {} breaks contiguity (expected {expected_offset})", info.offset)));
            }
            let (start, end) = (info.offset * 4, (info.offset + info.len) * 4);
            if end > payload.len() {
                return Err(bad("data runs past end of file".into()));
            }
            let raw = &payload[start..end];
            if hex_digest(raw) != info.sha256 {
                return Err(bad("checksum mismatch".into()));
            }
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            entries.push(Entry {
                info: info.clone(),
                data,
            });
            expected_offset += info.len;
        }
        if expected_offset * 4 != payload.len() {
            return Err(Error::integrity("payload", "trailing bytes after last entry"));
        }
        Ok(Self { manifest, entries })
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn entry(&self, name: &str) -> Result<&Entry> {
        self.entries
            .iter()
            .find(|e| e.info.name == name)
            .ok_or_else(|| Error::integrity(name, "missing entry"))
    }

    pub fn kind(&self) -> ArchiveKind {
        self.manifest.kind
    }

    pub fn metadata<D: serde::de::DeserializeOwned>(&self, key: &str) -> Result<D> {
        let v = self
            .manifest
            .metadata
            .get(key)
            .ok_or_else(|| Error::integrity(format!("metadata.{key}"), "missing"))?;
        serde_json::from_value(v.clone()).map_err(|e| Error::integrity(format!("metadata.{key}"), e.to_string()))
    }

    /// Payload bytes of all entries whose name starts with `prefix`.
    pub fn bytes_with_prefix(&self, prefix: &str) -> u64 {
        self.entries
            .iter()
            .filter(|e| e.info.name.starts_with(prefix))
            .map(|e| 4 * e.info.len as u64)
            .sum()
    }

    /// Copies entries `{prefix}/{name}` into `tree`, checking shapes.
    pub fn fill_tree<P: ParamTree<f32>>(&self, prefix: &str, tree: &mut P) -> Result<()> {
        let mut expected = Vec::new();
        tree.visit(&mut |name, shape, _| expected.push((format!("{prefix}/{name}"), shape.to_vec())));
        let mut sources = Vec::with_capacity(expected.len());
        for (name, shape) in &expected {
            let e = self.entry(name)?;
            if &e.info.shape != shape {
                return Err(Error::integrity(
                    name.clone(),
                    format!("shape {:?}, expected {:?}", e.info.shape, shape),
                ));
            }
            sources.push(&e.data);
        }
        let mut it = sources.into_iter();
        tree.visit_mut(&mut |_, v| v.copy_from_slice(it.next().expect("counted")));
        Ok(())
    }

    /// Fails on entries matching `prefix` that no loader consumed.
    fn ensure_known(&self, known: &dyn Fn(&str) -> bool) -> Result<()> {
        match self.entries.iter().find(|e| !known(&e.info.name)) {
            Some(e) => Err(Error::integrity(e.info.name.clone(), "unexpected entry")),
            None => Ok(()),
        }
    }
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

const BASE_PREFIXES: [&str; 4] = ["map/", "style/", "base/gen/", "disc/"];

fn push_base(w: &mut ArchiveWriter, base: &BaseModel<f32>) {
    w.push_tree("map", &base.mapping);
    w.push_tree("style", &base.styler);
    w.push_tree("base/gen", &base.generator);
    w.push_tree("disc", &base.discriminator);
}

fn base_metadata(base: &BaseModel<f32>) -> Value {
    let cfg = serde_json::to_value(&base.config).expect("config serializes");
    json!({
        "base_config": cfg,
        "base_config_hash": hex_digest(cfg.to_string().as_bytes()),
    })
}

pub fn encode_base(base: &BaseModel<f32>) -> Vec<u8> {
    let mut w = ArchiveWriter::default();
    push_base(&mut w, base);
    w.encode(ArchiveKind::Base, base_metadata(base))
}

/// SHA-256 of the base archive encoding; identifies a base model.
pub fn base_hash<T: crate::real::Real>(base: &BaseModel<T>) -> Result<String> {
    Ok(hex_digest(&encode_base(&base.cast::<f32>())))
}

pub fn save_base(base: &BaseModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_base(base))
}

fn base_from_archive(a: &Archive) -> Result<BaseModel<f32>> {
    let cfg_value: Value = a.metadata("base_config")?;
    let stored: String = a.metadata("base_config_hash")?;
    if hex_digest(cfg_value.to_string().as_bytes()) != stored {
        return Err(Error::integrity("metadata.base_config_hash", "config hash mismatch"));
    }
    let config: BaseConfig = serde_json::from_value(cfg_value)
        .map_err(|e| Error::integrity("metadata.base_config", e.to_string()))?;
    config
        .generator
        .validate()
        .and_then(|_| config.discriminator.validate())
        .map_err(|e| Error::integrity("metadata.base_config", e.to_string()))?;
    let mut base = BaseModel::<f32>::init(&config, 0)?;
    a.fill_tree("map", &mut base.mapping)?;
    a.fill_tree("style", &mut base.styler)?;
    a.fill_tree("base/gen", &mut base.generator)?;
    a.fill_tree("disc", &mut base.discriminator)?;
    Ok(base)
}

pub fn decode_base(bytes: &[u8]) -> Result<BaseModel<f32>> {
    let a = Archive::decode(bytes)?;
    if a.kind() != ArchiveKind::Base {
        return Err(Error::integrity("manifest.kind", "expected a base model archive"));
    }
    let base = base_from_archive(&a)?;
    a.ensure_known(&|n| BASE_PREFIXES.iter().any(|p| n.starts_with(p)))?;
    Ok(base)
}

pub fn load_base(path: impl AsRef<Path>) -> Result<BaseModel<f32>> {
    let path = path.as_ref();
    decode_base(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Toy base pre-trained on the synthetic shape dataset, shipped with the crate.
pub const BUNDLED_BASE: &[u8] = include_bytes!("../assets/base_toy.msgan");

pub fn bundled_base() -> Result<BaseModel<f32>> {
    decode_base(BUNDLED_BASE)
}

/// Fixed probe code whose stylization is stored alongside the model.
fn golden_code(model: &MultiStyleModel<f32>) -> Result<SCode<f32>> {
    let mut r = rng::stream(0x90_1d, &[]);
    let z = rng::gaussian(&mut r, model.base.mapping.z_dim());
    model.base.styler.to_style(&model.base.mapping.map_noise(&z)?)
}

pub fn encode_model(model: &MultiStyleModel<f32>) -> Result<Vec<u8>> {
    let mut w = ArchiveWriter::default();
    push_base(&mut w, &model.base);
    w.push_tree("gen", &model.generator);
    for (name, stn) in model.bank.names().iter().zip(model.bank.stns()) {
        w.push_tree(&format!("stn/{name}"), stn);
    }
    let code = golden_code(model)?;
    let golden = model.synthesize(&code, 0)?;
    let (c, h, wd) = golden.dims();
    w.push("golden/code", &[code.schedule().total_width()], &code.flatten());
    w.push("golden/image", &[c, h, wd], golden.data().as_slice().expect("contiguous"));
    let mut meta = base_metadata(&model.base);
    let obj = meta.as_object_mut().expect("object");
    obj.insert("styles".into(), json!(model.names()));
    obj.insert("schedule".into(), json!(model.schedule().widths()));
    obj.insert("provenance".into(), serde_json::to_value(&model.provenance).expect("serializes"));
    Ok(w.encode(ArchiveKind::Multistyle, meta))
}

pub fn save_model(model: &MultiStyleModel<f32>, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &encode_model(model)?)
}

pub fn decode_model(bytes: &[u8]) -> Result<MultiStyleModel<f32>> {
    let a = Archive::decode(bytes)?;
    if a.kind() != ArchiveKind::Multistyle {
        return Err(Error::integrity("manifest.kind", "expected a multi-style model archive"));
    }
    let base = base_from_archive(&a)?;
    let names: Vec<String> = a.metadata("styles")?;
    let schedule: RowSchedule = a.metadata("schedule")?;
    if &schedule != base.generator.schedule() {
        return Err(Error::integrity("metadata.schedule", "disagrees with generator config"));
    }
    let provenance: Provenance = a.metadata("provenance")?;
    if !provenance.config.is_empty() {
        let cfg: TrainConfig = serde_json::from_str(&provenance.config)
            .map_err(|e| Error::integrity("metadata.provenance.config", e.to_string()))?;
        if cfg.hash() != provenance.config_hash {
            return Err(Error::integrity("metadata.provenance.config_hash", "config hash mismatch"));
        }
    }
    if !provenance.base_hash.is_empty() && base_hash(&base)? != provenance.base_hash {
        return Err(Error::integrity("metadata.provenance.base_hash", "base model hash mismatch"));
    }
    let mut generator = base.generator.clone();
    a.fill_tree("gen", &mut generator)?;
    let stns = names
        .iter()
        .map(|n| {
            let mut s = Stn::new(&schedule, StnInit::Identity, 0);
            a.fill_tree(&format!("stn/{n}"), &mut s).map(|_| s)
        })
        .collect::<Result<Vec<_>>>()?;
    let bank = StnBank::from_parts(names, stns).map_err(|e| Error::integrity("metadata.styles", e.to_string()))?;
    let model = MultiStyleModel {
        base,
        generator,
        bank,
        provenance,
    };
    a.ensure_known(&|n| {
        BASE_PREFIXES.iter().chain(&["gen/", "stn/", "golden/"]).any(|p| n.starts_with(p))
    })?;

    let code = golden_code(&model)?;
    if a.entry("golden/code")?.data != code.flatten() {
        return Err(Error::integrity("golden/code", "probe code does not match the stored one"));
    }
    let stored = &a.entry("golden/image")?.data;
    let replay = model.synthesize(&code, 0)?;
    let dev = replay
        .data()
        .iter()
        .zip(stored)
        .map(|(a, b)| (a - b).abs() as f64)
        .fold(0.0, f64::max);
    if stored.len() != replay.data().len() || dev >= GOLDEN_TOLERANCE {
        return Err(Error::integrity(
            "golden/image",
            format!("stored stylization not reproduced (max deviation {dev:e})"),
        ));
    }
    Ok(model)
}

pub fn load_model(path: impl AsRef<Path>) -> Result<MultiStyleModel<f32>> {
    let path = path.as_ref();
    decode_model(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}

/// Writes an inverted code (and its W+ origin when available).
pub fn save_code(code: &SCode<f32>, wplus: Option<&WCode<f32>>, path: impl AsRef<Path>) -> Result<()> {
    let mut w = ArchiveWriter::default();
    for (i, row) in code.rows().iter().enumerate() {
        w.push(format!("code/row{i:02}"), &[row.len()], row.as_slice().expect("contiguous"));
    }
    if let Some(wp) = wplus {
        for (i, row) in wp.rows().iter().enumerate() {
            w.push(format!("wplus/row{i:02}"), &[row.len()], row.as_slice().expect("contiguous"));
        }
    }
    let meta = json!({ "schedule": code.schedule().widths() });
    write_file(path.as_ref(), &w.encode(ArchiveKind::Code, meta))
}

pub fn load_code(path: impl AsRef<Path>) -> Result<SCode<f32>> {
    let a = Archive::read(path)?;
    if a.kind() != ArchiveKind::Code {
        return Err(Error::integrity("manifest.kind", "expected a code archive"));
    }
    let schedule: RowSchedule = a.metadata("schedule")?;
    let rows = (0..schedule.len())
        .map(|i| {
            let e = a.entry(&format!("code/row{i:02}"))?;
            Ok(ndarray::Array1::from(e.data.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    SCode::new(schedule, rows).map_err(|e| Error::integrity("code", e.to_string()))
}
