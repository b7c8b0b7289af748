//! Binary artifact container and the loaders built on it.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      b"VTSP"
//! version    u32
//! type tag   u8 length + ASCII
//! metadata   u32 length + UTF-8 TOML
//! entries    u32 count, then per entry:
//!              u16 name length + UTF-8 name
//!              u8 dtype (0 = f32, 1 = u8, 2 = u32)
//!              u8 rank, rank × u64 dims
//!              payload (product of dims elements)
//! crc32      u32 over every preceding byte
//! ```
//!
//! Loading checks the checksum first, then magic, version and type tag.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::ensemble::{AggregatorFA, Ensemble};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{ViTConfig, ViTModel};

pub const MAGIC: &[u8; 4] = b"VTSP";
pub const FORMAT_VERSION: u32 = 1;

pub const TAG_MODEL: &str = "vit-model";
pub const TAG_ENSEMBLE: &str = "ensemble";
pub const TAG_DATASET: &str = "dataset";

#[derive(Clone, Debug, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    U8(Vec<u8>),
    U32(Vec<u32>),
}

impl Payload {
    fn dtype(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::U8(_) => 1,
            Payload::U32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::U8(v) => v.len(),
            Payload::U32(v) => v.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<usize>,
    pub payload: Payload,
}

impl Entry {
    pub fn tensor(name: &str, t: &Tensor) -> Self {
        Entry { name: name.to_string(), dims: t.shape().to_vec(), payload: Payload::F32(t.data().to_vec()) }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        match &self.payload {
            Payload::F32(v) => Tensor::new(&self.dims, v.clone()),
            _ => Err(Error::format(format!("entry {} is not an f32 tensor", self.name))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub tag: String,
    pub meta: String,
    pub entries: Vec<Entry>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| Error::format(format!("truncated file at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::format("invalid UTF-8 string"))
    }
}

impl Container {
    pub fn new(tag: &str, meta: String) -> Self {
        Container { tag: tag.to_string(), meta, entries: Vec::new() }
    }

    pub fn push_tensor(&mut self, name: &str, t: &Tensor) {
        self.entries.push(Entry::tensor(name, t));
    }

    pub fn get(&self, name: &str) -> Option<&Entry> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn tensor(&self, name: &str) -> Option<Tensor> {
        self.get(name).and_then(|e| e.to_tensor().ok())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut b = Vec::new();
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        let tag = u8::try_from(self.tag.len()).map_err(|_| Error::contract("type tag too long"))?;
        b.push(tag);
        b.extend_from_slice(self.tag.as_bytes());
        let meta = u32::try_from(self.meta.len()).map_err(|_| Error::contract("metadata too long"))?;
        b.extend_from_slice(&meta.to_le_bytes());
        b.extend_from_slice(self.meta.as_bytes());
        b.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for e in &self.entries {
            let n = u16::try_from(e.name.len()).map_err(|_| Error::contract("entry name too long"))?;
            let want: usize = e.dims.iter().product();
            if want != e.payload.len() || e.dims.len() > u8::MAX as usize {
                return Err(Error::shape(format!("entry {}: dims {:?} do not match payload", e.name, e.dims)));
            }
            b.extend_from_slice(&n.to_le_bytes());
            b.extend_from_slice(e.name.as_bytes());
            b.push(e.payload.dtype());
            b.push(e.dims.len() as u8);
            for &d in &e.dims {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &e.payload {
                Payload::F32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
                Payload::U8(v) => b.extend_from_slice(v),
                Payload::U32(v) => v.iter().for_each(|x| b.extend_from_slice(&x.to_le_bytes())),
            }
        }
        let crc = crc32fast::hash(&b);
        b.extend_from_slice(&crc.to_le_bytes());
        Ok(b)
    }

    /// Parse and verify; `expected_tag` rejects other artifact types.
    pub fn from_bytes(bytes: &[u8], expected_tag: Option<&str>) -> Result<Self> {
        if bytes.len() < MAGIC.len() + 8 {
            return Err(Error::format("file too short"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format("not a vitsplit artifact (bad magic)"));
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(Error::Checksum { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u32()?;
        if version != FORMAT_VERSION {
            return Err(Error::Version { found: version, expected: FORMAT_VERSION });
        }
        let n = r.u8()? as usize;
        let tag = r.str(n)?;
        if let Some(want) = expected_tag {
            if tag != want {
                return Err(Error::TypeTag { expected: want.to_string(), found: tag });
            }
        }
        let n = r.u32()? as usize;
        let meta = r.str(n)?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u16()? as usize;
            let name = r.str(n)?;
            let dtype = r.u8()?;
            let rank = r.u8()? as usize;
            let mut dims = Vec::with_capacity(rank);
            for _ in 0..rank {
                dims.push(usize::try_from(r.u64()?).map_err(|_| Error::format("dimension overflow"))?);
            }
            let len = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| Error::format("dimension overflow"))?;
            let payload = match dtype {
                0 => Payload::F32(
                    r.take(len.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                1 => Payload::U8(r.take(len)?.to_vec()),
                2 => Payload::U32(
                    r.take(len.checked_mul(4).ok_or_else(|| Error::format("size overflow"))?)?
                        .chunks_exact(4)
                        .map(|c| u32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                d => return Err(Error::format(format!("entry {name}: unknown dtype {d}"))),
            };
            entries.push(Entry { name, dims, payload });
        }
        if r.pos != body.len() {
            return Err(Error::format(format!("{} trailing bytes before checksum", body.len() - r.pos)));
        }
        Ok(Container { tag, meta, entries })
    }

    pub fn write(&self, path: &Path, force: bool) -> Result<()> {
        write_bytes(path, &self.to_bytes()?, force)
    }

    pub fn read(path: &Path, expected_tag: Option<&str>) -> Result<Self> {
        Container::from_bytes(&read_bytes(path)?, expected_tag)
    }

    fn meta_as<T: DeserializeOwned>(&self) -> Result<T> {
        toml::from_str(&self.meta).map_err(|e| Error::format(format!("{} metadata: {e}", self.tag)))
    }
}

/// Read a whole file; a missing path is reported as a missing artifact.
pub fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingArtifact(path.to_path_buf()),
        _ => Error::Io(e),
    })
}

/// Write atomically (temp file + rename). Existing outputs are kept unless `force`.
pub fn write_bytes(path: &Path, bytes: &[u8], force: bool) -> Result<()> {
    if path.exists() && !force {
        return Err(Error::OutputExists(path.to_path_buf()));
    }
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    let mut tmp = PathBuf::from(path);
    tmp.as_mut_os_string().push(".tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn write_toml<T: Serialize>(path: &Path, value: &T, force: bool) -> Result<()> {
    let s = toml::to_string(value).map_err(|e| Error::contract(format!("serializing {}: {e}", path.display())))?;
    write_bytes(path, s.as_bytes(), force)
}

pub fn read_toml<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let b = read_bytes(path)?;
    let s = String::from_utf8(b).map_err(|_| Error::format(format!("{} is not UTF-8", path.display())))?;
    toml::from_str(&s).map_err(|e| Error::format(format!("{}: {e}", path.display())))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelMeta {
    config: ViTConfig,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EnsembleMeta {
    smalls: Vec<ViTConfig>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DatasetMeta {
    side: usize,
    channels: usize,
    num_classes: usize,
    records: usize,
}

fn toml_meta<T: Serialize>(v: &T) -> Result<String> {
    toml::to_string(v).map_err(|e| Error::contract(format!("serializing metadata: {e}")))
}

pub fn model_to_container(model: &ViTModel) -> Result<Container> {
    let mut c = Container::new(TAG_MODEL, toml_meta(&ModelMeta { config: model.config.clone() })?);
    for (n, t) in model.named_params() {
        c.push_tensor(&n, t);
    }
    Ok(c)
}

pub fn model_from_container(c: &Container) -> Result<ViTModel> {
    let meta: ModelMeta = c.meta_as()?;
    meta.config.validate().map_err(|e| Error::format(e.to_string()))?;
    ViTModel::from_named(&meta.config, |n| c.tensor(n))
}

pub fn save_model(path: &Path, model: &ViTModel, force: bool) -> Result<()> {
    model_to_container(model)?.write(path, force)
}

pub fn load_model(path: &Path) -> Result<ViTModel> {
    model_from_container(&Container::read(path, Some(TAG_MODEL))?)
}

pub fn ensemble_to_container(e: &Ensemble) -> Result<Container> {
    let meta = EnsembleMeta { smalls: e.smalls.iter().map(|s| s.config.clone()).collect() };
    let mut c = Container::new(TAG_ENSEMBLE, toml_meta(&meta)?);
    for (i, s) in e.smalls.iter().enumerate() {
        for (n, t) in s.named_params() {
            c.push_tensor(&format!("small.{i}.{n}"), t);
        }
    }
    for (n, t) in e.fa.named_params() {
        c.push_tensor(&n, t);
    }
    Ok(c)
}

pub fn ensemble_from_container(c: &Container) -> Result<Ensemble> {
    let meta: EnsembleMeta = c.meta_as()?;
    let mut smalls = Vec::with_capacity(meta.smalls.len());
    for (i, cfg) in meta.smalls.iter().enumerate() {
        cfg.validate().map_err(|e| Error::format(e.to_string()))?;
        smalls.push(ViTModel::from_named(cfg, |n| c.tensor(&format!("small.{i}.{n}")))?);
    }
    let need = |n: &str| c.tensor(n).ok_or_else(|| Error::format(format!("missing parameter {n}")));
    let fa = AggregatorFA {
        w1: need("fa.w1")?,
        b1: need("fa.b1")?,
        w2: need("fa.w2")?,
        b2: need("fa.b2")?,
        head_w: need("head.weight")?,
        head_b: need("head.bias")?,
        g: c.tensor("token_map.g"),
    };
    Ensemble::new(smalls, fa).map_err(|e| Error::format(e.to_string()))
}

pub fn save_ensemble(path: &Path, e: &Ensemble, force: bool) -> Result<()> {
    ensemble_to_container(e)?.write(path, force)
}

pub fn load_ensemble(path: &Path) -> Result<Ensemble> {
    ensemble_from_container(&Container::read(path, Some(TAG_ENSEMBLE))?)
}

pub fn dataset_to_container(d: &Dataset) -> Result<Container> {
    let meta = DatasetMeta { side: d.side, channels: d.channels, num_classes: d.num_classes, records: d.len() };
    let mut c = Container::new(TAG_DATASET, toml_meta(&meta)?);
    c.entries.push(Entry { name: "labels".into(), dims: vec![d.len()], payload: Payload::U32(d.labels.clone()) });
    c.entries.push(Entry {
        name: "pixels".into(),
        dims: vec![d.len(), d.channels, d.side, d.side],
        payload: Payload::U8(d.pixels.clone()),
    });
    Ok(c)
}

pub fn dataset_from_container(c: &Container) -> Result<Dataset> {
    let m: DatasetMeta = c.meta_as()?;
    let labels = match c.get("labels").map(|e| &e.payload) {
        Some(Payload::U32(v)) => v.clone(),
        _ => return Err(Error::format("dataset has no u32 labels entry")),
    };
    let pixels = match c.get("pixels").map(|e| &e.payload) {
        Some(Payload::U8(v)) => v.clone(),
        _ => return Err(Error::format("dataset has no u8 pixels entry")),
    };
    if labels.len() != m.records {
        return Err(Error::format(format!("metadata says {} records, found {}", m.records, labels.len())));
    }
    Dataset::new(m.side, m.channels, m.num_classes, labels, pixels)
}

pub fn save_dataset(path: &Path, d: &Dataset, force: bool) -> Result<()> {
    dataset_to_container(d)?.write(path, force)
}

pub fn load_dataset(path: &Path) -> Result<Dataset> {
    dataset_from_container(&Container::read(path, Some(TAG_DATASET))?)
}

/// CIFAR-style binary records: `label_bytes` label bytes (the last one is
/// used) followed by `channels·side²` channel-major pixel bytes.
pub fn ingest_cifar_binary(
    bytes: &[u8],
    side: usize,
    channels: usize,
    label_bytes: usize,
    num_classes: usize,
) -> Result<Dataset> {
    if label_bytes == 0 {
        return Err(Error::config("label_bytes must be at least 1"));
    }
    let rec = label_bytes + side * side * channels;
    if bytes.is_empty() || bytes.len() % rec != 0 {
        return Err(Error::format(format!("{} bytes is not a whole number of {rec}-byte records", bytes.len())));
    }
    let n = bytes.len() / rec;
    let mut labels = Vec::with_capacity(n);
    let mut pixels = Vec::with_capacity(n * (rec - label_bytes));
    for r in bytes.chunks_exact(rec) {
        labels.push(r[label_bytes - 1] as u32);
        pixels.extend_from_slice(&r[label_bytes..]);
    }
    Dataset::new(side, channels, num_classes, labels, pixels)
}

/// `root/<class>/<image>` with classes in lexicographic order. Images are
/// converted to `channels` (1 = luma, 3 = RGB) and resized to `side × side`.
/// Returns the dataset and the class names.
pub fn ingest_image_dir(root: &Path, side: usize, channels: usize) -> Result<(Dataset, Vec<String>)> {
    if channels != 1 && channels != 3 {
        return Err(Error::config("image directories support 1 or 3 channels"));
    }
    if !root.is_dir() {
        return Err(Error::MissingArtifact(root.to_path_buf()));
    }
    let mut classes: Vec<PathBuf> =
        fs::read_dir(root)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_dir()).collect();
    classes.sort();
    if classes.is_empty() {
        return Err(Error::format(format!("{} has no class directories", root.display())));
    }
    let mut labels = Vec::new();
    let mut pixels = Vec::new();
    let s = side as u32;
    for (ci, dir) in classes.iter().enumerate() {
        let mut files: Vec<PathBuf> =
            fs::read_dir(dir)?.filter_map(|e| e.ok().map(|e| e.path())).filter(|p| p.is_file()).collect();
        files.sort();
        for f in files {
            let img = image::open(&f).map_err(|e| Error::format(format!("{}: {e}", f.display())))?;
            let img = img.resize_exact(s, s, image::imageops::FilterType::Triangle);
            if channels == 1 {
                pixels.extend_from_slice(img.to_luma8().as_raw());
            } else {
                let rgb = img.to_rgb8();
                let raw = rgb.as_raw();
                for c in 0..3 {
                    pixels.extend(raw.iter().skip(c).step_by(3));
                }
            }
            labels.push(ci as u32);
        }
    }
    if labels.is_empty() {
        return Err(Error::format(format!("{} contains no images", root.display())));
    }
    let names = classes.iter().map(|p| p.file_name().unwrap().to_string_lossy().into_owned()).collect();
    Ok((Dataset::new(side, channels, classes.len(), labels, pixels)?, names))
}
