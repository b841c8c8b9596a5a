//! Episode dataset file.
//!
//! ```text
//! magic "DMNDATA1" | version u32 | config block | episode count u32
//! per episode:
//!   environment seed u64 | episode seed u64
//!   grid side n u32 | n² × (wall u32, rgb 3×f64)
//!   landmark count u32 | per landmark (x, y, radius, r, g, b) 6×f64
//!   N_c + T observations: pose (x, y, yaw) 3×f64, image H·W·3 × f32
//!   T − 1 egomotions (dx, dy, dyaw) 3×f64
//! ```
//! Everything is little-endian; the config block is a u32 byte length followed
//! by UTF-8 `key=value` lines.

use std::fs;
use std::path::Path;

use super::episode::{Episode, Observation};
use super::{Cell, Environment, ImageSpec, Landmark, RenderedImage, Style};
use crate::error::{Error, Result};
use crate::geometry::{EnvironmentExtent, Egomotion, PlanarPose};
use crate::io_util::{read_config_block, write_config_block, ByteReader};

pub const DATA_MAGIC: &[u8; 8] = b"DMNDATA1";
pub const DATA_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetHeader {
    pub image: ImageSpec,
    pub contexts: usize,
    pub queries: usize,
    pub extent: EnvironmentExtent,
    pub style: Style,
}

impl DatasetHeader {
    pub fn to_config(&self) -> Vec<(String, String)> {
        [
            ("image_h", self.image.height.to_string()),
            ("image_w", self.image.width.to_string()),
            ("contexts", self.contexts.to_string()),
            ("queries", self.queries.to_string()),
            ("extent_m", self.extent.half_width.to_string()),
            ("style", self.style.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }

    fn from_config(pairs: &[(String, String)]) -> Result<Self> {
        let get = |key: &str| {
            pairs
                .iter()
                .find(|(k, _)| k == key)
                .map(|(_, v)| v.as_str())
                .ok_or_else(|| Error::Format(format!("dataset config lacks `{key}`")))
        };
        let num = |key: &str| -> Result<usize> {
            get(key)?.parse().map_err(|_| Error::Format(format!("bad `{key}` in dataset config")))
        };
        let half_width: f64 = get("extent_m")?.parse().map_err(|_| Error::Format("bad `extent_m`".into()))?;
        Ok(DatasetHeader {
            image: ImageSpec { height: num("image_h")?, width: num("image_w")? },
            contexts: num("contexts")?,
            queries: num("queries")?,
            extent: EnvironmentExtent::new(half_width).ok_or_else(|| Error::Format("non-positive extent".into()))?,
            style: get("style")?.parse().map_err(|e: Error| Error::Format(e.to_string()))?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub episodes: Vec<Episode>,
}

fn put_u32(out: &mut Vec<u8>, v: usize) {
    out.extend_from_slice(&(v as u32).to_le_bytes());
}

fn put_f64s(out: &mut Vec<u8>, vs: &[f64]) {
    for v in vs {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_dataset(data: &Dataset) -> Result<Vec<u8>> {
    let h = &data.header;
    let mut out = Vec::new();
    out.extend_from_slice(DATA_MAGIC);
    out.extend_from_slice(&DATA_VERSION.to_le_bytes());
    write_config_block(&mut out, &h.to_config());
    put_u32(&mut out, data.episodes.len());
    for ep in &data.episodes {
        if ep.contexts.len() != h.contexts || ep.queries.len() != h.queries || ep.egomotions.len() + 1 != h.queries {
            return Err(Error::Invalid(format!("episode {} does not match the dataset header counts", ep.seed)));
        }
        let env = &ep.environment;
        out.extend_from_slice(&env.seed.to_le_bytes());
        out.extend_from_slice(&ep.seed.to_le_bytes());
        put_u32(&mut out, env.n);
        for c in &env.cells {
            put_u32(&mut out, c.wall as usize);
            put_f64s(&mut out, &c.color);
        }
        put_u32(&mut out, env.landmarks.len());
        for l in &env.landmarks {
            put_f64s(&mut out, &[l.x, l.y, l.radius, l.color[0], l.color[1], l.color[2]]);
        }
        for obs in ep.contexts.iter().chain(&ep.queries) {
            if obs.image.spec() != h.image {
                return Err(Error::Invalid(format!("episode {} image size differs from header", ep.seed)));
            }
            put_f64s(&mut out, &obs.pose.to_array());
            for v in &obs.image.data {
                out.extend_from_slice(&(*v as f32).to_le_bytes());
            }
        }
        for m in &ep.egomotions {
            put_f64s(&mut out, &m.to_array());
        }
    }
    Ok(out)
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let mut r = ByteReader::new(bytes);
    if r.take(8)? != DATA_MAGIC {
        return Err(Error::Format("not a dataset file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != DATA_VERSION {
        return Err(Error::Format(format!("dataset version {version}, expected {DATA_VERSION}")));
    }
    let header = DatasetHeader::from_config(&read_config_block(&mut r)?)?;
    let count = r.u32()? as usize;
    let mut episodes = Vec::with_capacity(count);
    let pixels = header.image.height * header.image.width * 3;
    for _ in 0..count {
        let env_seed = r.u64()?;
        let seed = r.u64()?;
        let n = r.u32()? as usize;
        if !(3..=4096).contains(&n) {
            return Err(Error::Format(format!("implausible grid size {n}")));
        }
        let mut cells = Vec::with_capacity(n * n);
        for _ in 0..n * n {
            let wall = match r.u32()? {
                0 => false,
                1 => true,
                v => return Err(Error::Format(format!("wall flag {v}"))),
            };
            cells.push(Cell { wall, color: [r.f64()?, r.f64()?, r.f64()?] });
        }
        let nl = r.u32()? as usize;
        let mut landmarks = Vec::with_capacity(nl.min(1024));
        for _ in 0..nl {
            let (x, y, radius) = (r.f64()?, r.f64()?, r.f64()?);
            landmarks.push(Landmark { x, y, radius, color: [r.f64()?, r.f64()?, r.f64()?] });
        }
        let environment = Environment { seed: env_seed, style: header.style, extent: header.extent, n, cells, landmarks };
        let mut obs = Vec::with_capacity(header.contexts + header.queries);
        for _ in 0..header.contexts + header.queries {
            let pose = PlanarPose { x: r.f64()?, y: r.f64()?, yaw: r.f64()? };
            let data = (0..pixels).map(|_| r.f32().map(f64::from)).collect::<Result<Vec<_>>>()?;
            obs.push(Observation {
                image: RenderedImage { height: header.image.height, width: header.image.width, data },
                pose,
            });
        }
        let queries = obs.split_off(header.contexts);
        let egomotions = (0..header.queries.saturating_sub(1))
            .map(|_| Ok(Egomotion { dx: r.f64()?, dy: r.f64()?, dyaw: r.f64()? }))
            .collect::<Result<Vec<_>>>()?;
        episodes.push(Episode { seed, environment, contexts: obs, queries, egomotions });
    }
    if !r.is_empty() {
        return Err(Error::Format("trailing bytes after last episode".into()));
    }
    Ok(Dataset { header, episodes })
}

pub fn write_dataset(data: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    fs::write(path, encode_dataset(data)?)?;
    Ok(())
}

pub fn read_dataset(path: impl AsRef<Path>) -> Result<Dataset> {
    decode_dataset(&fs::read(path)?)
}
