//! Binary checkpoint: `RGSM`, u32 version, a length-prefixed JSON header
//! (config, tracks, bounds, time range), then length-prefixed named arrays
//! of little-endian f32. Integers are little-endian.

use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Aabb, FieldConfig, FieldError, ModelLayout, SceneModel};
use crate::geometry::ActorTrack;
use crate::optimizer::ParamVector;

pub const MAGIC: &[u8; 4] = b"RGSM";
pub const VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("bad checkpoint header: {0}")]
    Header(#[from] serde_json::Error),
    #[error(transparent)]
    Field(#[from] FieldError),
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: FieldConfig,
    tracks: Vec<ActorTrack>,
    scene_aabb: Aabb,
    time_range: (f64, f64),
}

pub fn to_bytes(model: &SceneModel<f32>) -> Vec<u8> {
    let header = Header {
        config: model.config,
        tracks: model.tracks.clone(),
        scene_aabb: model.scene_aabb,
        time_range: model.time_range,
    };
    let meta = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(model.params.len() * 4 + meta.len() + 64);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    let segs = model.params.segments();
    out.extend_from_slice(&(segs.len() as u32).to_le_bytes());
    for s in segs {
        out.extend_from_slice(&(s.name.len() as u32).to_le_bytes());
        out.extend_from_slice(s.name.as_bytes());
        out.extend_from_slice(&(s.len as u64).to_le_bytes());
        for v in &model.params.values()[s.range()] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.data.len() - self.pos < n {
            return Err(CheckpointError::Malformed("unexpected end of data".into()));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn from_bytes(data: &[u8]) -> Result<SceneModel<f32>, CheckpointError> {
    let mut c = Cursor { data, pos: 0 };
    if c.take(4).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = c.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(meta_len)?)?;
    let mut params = ParamVector::<f32>::new();
    let layout = ModelLayout::build(&header.config, header.tracks.len(), &mut params, 0)?;
    let count = c.u32()? as usize;
    if count != params.segments().len() {
        return Err(CheckpointError::Malformed(format!(
            "{count} arrays, expected {}",
            params.segments().len()
        )));
    }
    let mut values = Vec::with_capacity(params.len());
    for seg in params.segments() {
        let name_len = c.u32()? as usize;
        let name = std::str::from_utf8(c.take(name_len)?)
            .map_err(|_| CheckpointError::Malformed("array name is not utf-8".into()))?;
        let len = c.u64()? as usize;
        if name != seg.name || len != seg.len {
            return Err(CheckpointError::Malformed(format!(
                "array `{name}` ({len}) where `{}` ({}) was expected",
                seg.name, seg.len
            )));
        }
        let raw = c.take(len.checked_mul(4).ok_or_else(|| CheckpointError::Malformed("array too long".into()))?)?;
        values.extend(raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())));
    }
    if c.pos != data.len() {
        return Err(CheckpointError::Malformed("trailing bytes".into()));
    }
    params
        .set_values(values)
        .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
    Ok(SceneModel {
        config: header.config,
        params,
        layout,
        tracks: header.tracks,
        scene_aabb: header.scene_aabb,
        time_range: header.time_range,
    })
}

pub fn save(model: &SceneModel<f32>, path: &Path) -> Result<(), CheckpointError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    std::fs::write(path, to_bytes(model))?;
    Ok(())
}

pub fn load(path: &Path) -> Result<SceneModel<f32>, CheckpointError> {
    let mut data = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut data)?;
    from_bytes(&data)
}
