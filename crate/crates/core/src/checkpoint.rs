//! Versioned checkpoint container for codec and denoiser parameters.
//!
//! Layout: `GDCK` magic, `u32` format version, `u64` header length, a JSON
//! header (model kind, configs, tensor table), then every tensor's values as
//! little-endian `f64` in table order.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::codec::{Codec, CodecConfig};
use crate::denoiser::{Denoiser, DenoiserConfig};
use crate::error::{Error, Result};
use crate::nn::{ParamStore, SerializedParam};
use crate::training::TrainConfig;

const MAGIC: &[u8; 4] = b"GDCK";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    Codec,
    Denoiser,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub group: String,
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub kind: ModelKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec: Option<CodecConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub denoiser: Option<DenoiserConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train: Option<TrainConfig>,
    /// Parameter checksum of the codec the denoiser was trained against.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codec_checksum: Option<String>,
    pub checksum: String,
    pub tensors: Vec<TensorEntry>,
}

fn ck(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn write_container(path: &Path, header: &Header, ps: &ParamStore) -> Result<()> {
    let json = serde_json::to_vec(header)?;
    let mut buf = Vec::with_capacity(16 + json.len() + 8 * ps.count());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    for e in ps.entries() {
        for v in e.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir)?;
        }
    }
    let mut f = fs::File::create(path)?;
    f.write_all(&buf)?;
    Ok(())
}

fn read_container(path: &Path) -> Result<(Header, Vec<SerializedParam>)> {
    let bytes = match fs::read(path) {
        Ok(b) => b,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Err(Error::MissingInput(path.to_path_buf())),
        Err(e) => return Err(e.into()),
    };
    if bytes.len() < 16 || &bytes[..4] != MAGIC {
        return Err(ck(format!("{} is not a checkpoint", path.display())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(ck(format!(
            "{}: format version {version}, this build reads {FORMAT_VERSION}",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16usize.saturating_add(hlen))
        .ok_or_else(|| ck(format!("{}: truncated header", path.display())))?;
    let header: Header = serde_json::from_slice(body)?;
    let mut data = &bytes[16 + hlen..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for t in &header.tensors {
        let n: usize = t.shape.iter().product();
        if data.len() < 8 * n {
            return Err(ck(format!("{}: truncated data for tensor {}", path.display(), t.name)));
        }
        let values = data[..8 * n]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        data = &data[8 * n..];
        params.push(SerializedParam {
            name: t.name.clone(),
            shape: t.shape.clone(),
            data: values,
        });
    }
    if !data.is_empty() {
        return Err(ck(format!("{}: {} trailing bytes", path.display(), data.len())));
    }
    Ok((header, params))
}

fn tensor_table(ps: &ParamStore) -> Vec<TensorEntry> {
    ps.entries()
        .iter()
        .map(|e| TensorEntry {
            group: e.group.clone(),
            name: e.name.clone(),
            shape: e.value.shape().to_vec(),
        })
        .collect()
}

fn restore(ps: &mut ParamStore, params: &[SerializedParam], header: &Header) -> Result<()> {
    ps.load_from(params)?;
    if ps.checksum() != header.checksum {
        return Err(ck("parameter checksum does not match the header"));
    }
    Ok(())
}

pub fn save_codec(path: &Path, codec: &Codec) -> Result<()> {
    let header = Header {
        kind: ModelKind::Codec,
        codec: Some(codec.config().clone()),
        denoiser: None,
        train: None,
        codec_checksum: None,
        checksum: codec.params().checksum(),
        tensors: tensor_table(codec.params()),
    };
    write_container(path, &header, codec.params())
}

pub fn load_codec(path: &Path) -> Result<Codec> {
    let (header, params) = read_container(path)?;
    if header.kind != ModelKind::Codec {
        return Err(ck(format!("{} holds a {:?}, not a codec", path.display(), header.kind)));
    }
    let cfg = header.codec.as_ref().ok_or_else(|| ck("codec checkpoint without config"))?;
    let mut codec = Codec::new(cfg, 0)?;
    restore(codec.params_mut(), &params, &header)?;
    Ok(codec)
}

/// A loaded denoiser with the settings it was trained under.
pub struct DenoiserCheckpoint {
    pub denoiser: Denoiser,
    pub train: TrainConfig,
    pub codec_checksum: String,
}

pub fn save_denoiser(path: &Path, den: &Denoiser, train: &TrainConfig, codec: &Codec) -> Result<()> {
    let header = Header {
        kind: ModelKind::Denoiser,
        codec: None,
        denoiser: Some(den.config().clone()),
        train: Some(train.clone()),
        codec_checksum: Some(codec.params().checksum()),
        checksum: den.params().checksum(),
        tensors: tensor_table(den.params()),
    };
    write_container(path, &header, den.params())
}

pub fn load_denoiser(path: &Path) -> Result<DenoiserCheckpoint> {
    let (header, params) = read_container(path)?;
    if header.kind != ModelKind::Denoiser {
        return Err(ck(format!("{} holds a {:?}, not a denoiser", path.display(), header.kind)));
    }
    let cfg = header.denoiser.as_ref().ok_or_else(|| ck("denoiser checkpoint without config"))?;
    let train = header.train.clone().ok_or_else(|| ck("denoiser checkpoint without training config"))?;
    let mut den = Denoiser::new(cfg, train.horizon, 0)?;
    restore(den.params_mut(), &params, &header)?;
    Ok(DenoiserCheckpoint {
        denoiser: den,
        train,
        codec_checksum: header.codec_checksum.unwrap_or_default(),
    })
}

/// Reads only the header, e.g. to inspect a checkpoint's configs.
pub fn read_header(path: &Path) -> Result<Header> {
    read_container(path).map(|(h, _)| h)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn codec_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let codec = Codec::new(&CodecConfig::default(), 5).unwrap();
        let p = dir.path().join("codec.gdck");
        save_codec(&p, &codec).unwrap();
        let back = load_codec(&p).unwrap();
        assert_eq!(back.params().checksum(), codec.params().checksum());
        assert!(load_denoiser(&p).is_err());
    }

    #[test]
    fn denoiser_round_trip_and_corruption() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = DenoiserConfig {
            channels: 8,
            blocks: 1,
            ..DenoiserConfig::default()
        };
        let den = Denoiser::new(&cfg, 1000, 3).unwrap();
        let codec = Codec::new(&CodecConfig::default(), 0).unwrap();
        let p = dir.path().join("den.gdck");
        save_denoiser(&p, &den, &TrainConfig::default(), &codec).unwrap();
        let back = load_denoiser(&p).unwrap();
        assert_eq!(back.denoiser.params().checksum(), den.params().checksum());
        assert_eq!(back.codec_checksum, codec.params().checksum());

        let mut bytes = fs::read(&p).unwrap();
        let last = bytes.len() - 1;
        bytes[last] ^= 0x40;
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_denoiser(&p), Err(Error::Checkpoint(_))));
        bytes.truncate(last);
        fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_denoiser(&p), Err(Error::Checkpoint(_))));
        assert!(matches!(
            load_denoiser(&dir.path().join("absent")),
            Err(Error::MissingInput(_))
        ));
    }
}
