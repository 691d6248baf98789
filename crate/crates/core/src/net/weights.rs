//! Binary weight file. The byte layout is described in `docs/weight-format.md`.

use std::fs;
use std::io::Write;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::config::NetworkConfig;
use super::model::Model;
use crate::config::KvConfig;
use crate::error::{Error, Result};
use crate::ops::ConvSpec;
use crate::tensor::{DType, Scalar, Shape, Tensor};

pub const MAGIC: &[u8; 8] = b"RTCNETW\0";
pub const FORMAT_VERSION: u32 = 1;

fn checksum(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    u64::from_le_bytes(digest[..8].try_into().expect("8 bytes"))
}

fn encode<T: Scalar>(model: &Model<T>, appendix: &[u8]) -> Vec<u8> {
    let config = model.config().canonical_text();
    let mut payload = Vec::with_capacity(model.param_count() * T::DTYPE.byte_width());
    let mut table = Vec::new();
    for layer in model.layers() {
        let offset = payload.len() as u64;
        for &v in layer.spec.kernel.data() {
            v.write_le(&mut payload);
        }
        for &v in &layer.spec.bias {
            v.write_le(&mut payload);
        }
        let name = layer.info.name.as_bytes();
        table.extend_from_slice(&(name.len() as u16).to_le_bytes());
        table.extend_from_slice(name);
        for d in layer.spec.kernel.shape().0 {
            table.extend_from_slice(&(d as u32).to_le_bytes());
        }
        table.extend_from_slice(&(layer.spec.bias.len() as u32).to_le_bytes());
        table.extend_from_slice(&offset.to_le_bytes());
    }

    let mut out = Vec::with_capacity(payload.len() + table.len() + config.len() + appendix.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(T::DTYPE.tag());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(model.layers().len() as u32).to_le_bytes());
    out.extend_from_slice(&table);
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(&payload);
    out.extend_from_slice(&(appendix.len() as u64).to_le_bytes());
    out.extend_from_slice(appendix);
    let sum = checksum(&out);
    out.extend_from_slice(&sum.to_le_bytes());
    out
}

/// Writes via a sibling temp file and rename, so readers never see a
/// half-written file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let file_name = path.file_name().ok_or_else(|| Error::InvalidArgument(format!("{} is not a file path", path.display())))?;
    let tmp = path.with_file_name(format!(".{}.tmp", file_name.to_string_lossy()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub(crate) fn save_with_appendix<T: Scalar>(model: &Model<T>, appendix: &[u8], path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    write_atomic(path, &encode(model, appendix))
}

pub fn save_weights<T: Scalar>(model: &Model<T>, path: &Path) -> Result<()> {
    save_with_appendix(model, &[], path)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn fail(&self, message: impl Into<String>) -> Error {
        Error::WeightFile { path: self.path.to_path_buf(), message: message.into() }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.fail(format!("truncated while reading {what} at byte {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self, what: &str) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2, what)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, what: &str) -> Result<usize> {
        usize::try_from(self.u64(what)?).map_err(|_| self.fail(format!("{what} does not fit in memory")))
    }
}

struct Decoded<'a> {
    dtype: DType,
    config: NetworkConfig,
    /// (name, kernel shape, bias length, payload offset)
    table: Vec<(String, Shape, usize, usize)>,
    payload: &'a [u8],
    appendix: &'a [u8],
}

/// Checks magic, version and checksum, then parses the header.
/// Nothing is built until the whole file has been validated.
fn decode<'a>(bytes: &'a [u8], path: &'a Path) -> Result<Decoded<'a>> {
    let fail = |m: String| Error::WeightFile { path: path.to_path_buf(), message: m };
    if bytes.len() < MAGIC.len() + 4 + 8 {
        return Err(fail(format!("truncated: only {} bytes", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fail("not a weight file (bad magic)".into()));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(fail(format!("unsupported format version {version} (this build reads {FORMAT_VERSION})")));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().expect("8 bytes"));
    let actual = checksum(body);
    if stored != actual {
        return Err(fail(format!(
            "checksum mismatch (stored {stored:016x}, computed {actual:016x}); file is truncated or corrupt"
        )));
    }

    let mut r = Reader { bytes: body, pos: 12, path };
    let tag = r.take(1, "dtype tag")?[0];
    let dtype = DType::from_tag(tag).ok_or_else(|| r.fail(format!("unknown dtype tag {tag}")))?;
    let config_len = r.u32("config length")? as usize;
    let config_text = std::str::from_utf8(r.take(config_len, "config text")?)
        .map_err(|_| r.fail("config echo is not UTF-8"))?;
    let kv = KvConfig::parse(config_text).map_err(|e| r.fail(format!("config echo: {e}")))?;
    let config = NetworkConfig::from_kv(&kv).map_err(|e| r.fail(format!("config echo: {e}")))?;
    let layer_count = r.u32("layer count")? as usize;
    let mut table = Vec::with_capacity(layer_count.min(1024));
    for _ in 0..layer_count {
        let name_len = r.u16("layer name length")? as usize;
        let name = String::from_utf8(r.take(name_len, "layer name")?.to_vec())
            .map_err(|_| r.fail("layer name is not UTF-8"))?;
        let mut dims = [0usize; 4];
        for d in &mut dims {
            *d = r.u32("layer shape")? as usize;
        }
        let bias_len = r.u32("bias length")? as usize;
        let offset = r.len("layer offset")?;
        table.push((name, Shape(dims), bias_len, offset));
    }
    let payload_len = r.len("payload length")?;
    let payload = r.take(payload_len, "payload")?;
    let appendix_len = r.len("appendix length")?;
    let appendix = r.take(appendix_len, "appendix")?;
    if r.pos != body.len() {
        return Err(r.fail(format!("{} trailing bytes before checksum", body.len() - r.pos)));
    }
    Ok(Decoded { dtype, config, table, payload, appendix })
}

fn build<U: Scalar, T: Scalar>(d: &Decoded<'_>, path: &Path) -> Result<Model<T>> {
    let fail = |m: String| Error::WeightFile { path: path.to_path_buf(), message: m };
    let w = U::DTYPE.byte_width();
    let mut specs = Vec::with_capacity(d.table.len());
    for (name, shape, bias_len, offset) in &d.table {
        let count = shape.numel() + bias_len;
        let end = offset.checked_add(count * w).filter(|&e| e <= d.payload.len());
        let end = end.ok_or_else(|| fail(format!("layer {name} runs past the payload")))?;
        let vals: Vec<T> = d.payload[*offset..end]
            .chunks_exact(w)
            .map(|c| T::from_f64_lossy(U::read_le(c).to_f64_lossless()))
            .collect();
        let (k, b) = vals.split_at(shape.numel());
        specs.push(ConvSpec { kernel: Tensor::from_parts(*shape, k.to_vec()), bias: b.to_vec(), stride: 1, padding: 0 });
    }
    let model = Model::from_specs(d.config.clone(), specs).map_err(|e| fail(e.to_string()))?;
    for ((name, ..), layer) in d.table.iter().zip(model.layers()) {
        if *name != layer.info.name {
            return Err(fail(format!("layer `{name}` found where `{}` was expected", layer.info.name)));
        }
    }
    Ok(model)
}

pub(crate) fn load_with_appendix<T: Scalar>(path: &Path) -> Result<(Model<T>, Vec<u8>)> {
    let bytes = fs::read(path)?;
    let d = decode(&bytes, path)?;
    let model = match d.dtype {
        DType::F32 => build::<f32, T>(&d, path)?,
        DType::F64 => build::<f64, T>(&d, path)?,
    };
    Ok((model, d.appendix.to_vec()))
}

/// Loads a model, converting to `T` if the file was written in the other
/// precision. Loading into the precision it was saved in is bit-exact.
pub fn load_weights<T: Scalar>(path: &Path) -> Result<Model<T>> {
    Ok(load_with_appendix(path)?.0)
}

/// Element type a weight file was written with.
pub fn peek_dtype(path: &Path) -> Result<DType> {
    let bytes = fs::read(path)?;
    Ok(decode(&bytes, path)?.dtype)
}
