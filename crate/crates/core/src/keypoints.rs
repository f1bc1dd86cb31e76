//! Detected keypoints and their on-disk forms.
//!
//! Binary layout (little endian, version 1):
//!
//! ```text
//! magic     8 bytes  "KPSET\0\0\0"
//! version   u32
//! count     u32
//! dim       u32
//! reserved  u32      always 0
//! points    count × (u f64, v f64, score f64)
//! desc      count × dim × f32
//! ```
//!
//! The text form has a header line `kpset v1 <count> <dim>` followed by one
//! line per point: `u v score d0 d1 …`.

use std::io::{BufRead, Read, Write};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"KPSET\0\0\0";
pub const FORMAT_VERSION: u32 = 1;

/// Keypoints of one image: pixel locations `(u, v)`, scores in `[0, 1]` and
/// row-major unit-norm descriptors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct KeypointSet {
    pub points: Vec<[f64; 2]>,
    pub scores: Vec<f64>,
    pub dim: usize,
    pub descriptors: Vec<f32>,
}

impl KeypointSet {
    pub fn new(points: Vec<[f64; 2]>, scores: Vec<f64>, dim: usize, descriptors: Vec<f32>) -> Result<Self> {
        if points.len() != scores.len() || descriptors.len() != points.len() * dim {
            return Err(Error::Shape(format!(
                "{} points, {} scores, {} descriptor values for dim {dim}",
                points.len(),
                scores.len(),
                descriptors.len()
            )));
        }
        Ok(Self { points, scores, dim, descriptors })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn descriptor(&self, i: usize) -> &[f32] {
        &self.descriptors[i * self.dim..(i + 1) * self.dim]
    }

    pub fn write_binary(&self, mut w: impl Write) -> std::io::Result<()> {
        w.write_all(MAGIC)?;
        for v in [FORMAT_VERSION, self.len() as u32, self.dim as u32, 0] {
            w.write_all(&v.to_le_bytes())?;
        }
        for (p, s) in self.points.iter().zip(&self.scores) {
            for v in [p[0], p[1], *s] {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        for v in &self.descriptors {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_binary(mut r: impl Read) -> Result<Self> {
        let io = |e: std::io::Error| Error::Format(format!("truncated keypoint file: {e}"));
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(io)?;
        if &magic != MAGIC {
            return Err(Error::Format("bad keypoint file magic".into()));
        }
        let mut word = [0u8; 4];
        let mut header = [0u32; 4];
        for h in header.iter_mut() {
            r.read_exact(&mut word).map_err(io)?;
            *h = u32::from_le_bytes(word);
        }
        let [version, count, dim, _] = header;
        if version != FORMAT_VERSION {
            return Err(Error::Format(format!("unsupported keypoint format version {version}")));
        }
        let (count, dim) = (count as usize, dim as usize);
        let mut f64buf = [0u8; 8];
        let mut read_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut f64buf).map_err(io)?;
            Ok(f64::from_le_bytes(f64buf))
        };
        let mut points = Vec::with_capacity(count);
        let mut scores = Vec::with_capacity(count);
        for _ in 0..count {
            let u = read_f64(&mut r)?;
            let v = read_f64(&mut r)?;
            points.push([u, v]);
            scores.push(read_f64(&mut r)?);
        }
        let mut descriptors = Vec::with_capacity(count * dim);
        for _ in 0..count * dim {
            r.read_exact(&mut word).map_err(io)?;
            descriptors.push(f32::from_le_bytes(word));
        }
        Self::new(points, scores, dim, descriptors)
    }

    pub fn write_text(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "kpset v{FORMAT_VERSION} {} {}", self.len(), self.dim)?;
        for i in 0..self.len() {
            write!(w, "{} {} {}", self.points[i][0], self.points[i][1], self.scores[i])?;
            for d in self.descriptor(i) {
                write!(w, " {d}")?;
            }
            writeln!(w)?;
        }
        Ok(())
    }

    pub fn read_text(r: impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let bad = |m: &str| Error::Format(m.to_string());
        let header = lines.next().ok_or_else(|| bad("empty keypoint text"))?.map_err(|e| bad(&e.to_string()))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        if fields.len() != 4 || fields[0] != "kpset" || fields[1] != format!("v{FORMAT_VERSION}") {
            return Err(bad("bad keypoint text header"));
        }
        let count: usize = fields[2].parse().map_err(|_| bad("bad count"))?;
        let dim: usize = fields[3].parse().map_err(|_| bad("bad dim"))?;
        let mut set = KeypointSet { dim, ..Default::default() };
        for line in lines.take(count) {
            let line = line.map_err(|e| bad(&e.to_string()))?;
            let vals: Vec<f64> =
                line.split_whitespace().map(str::parse).collect::<std::result::Result<_, _>>().map_err(|_| bad("bad number"))?;
            if vals.len() != 3 + dim {
                return Err(bad("wrong number of fields"));
            }
            set.points.push([vals[0], vals[1]]);
            set.scores.push(vals[2]);
            set.descriptors.extend(vals[3..].iter().map(|&v| v as f32));
        }
        if set.len() != count {
            return Err(bad("fewer records than declared"));
        }
        Ok(set)
    }
}
