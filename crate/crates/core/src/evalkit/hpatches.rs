//! HPatches-layout dataset reader.
//!
//! Each sequence directory holds a reference image `1.*`, targets `2.*` to
//! `6.*` and ground-truth files `H_1_2` to `H_1_6` with nine whitespace
//! separated numbers in row-major order. A leading `i_` marks the
//! illumination subset and `v_` the viewpoint subset.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Homography;

const IMAGE_EXTENSIONS: [&str; 5] = ["ppm", "png", "jpg", "jpeg", "pgm"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Subset {
    Illumination,
    Viewpoint,
}

impl Subset {
    pub fn from_name(name: &str) -> Option<Self> {
        if name.starts_with("i_") {
            Some(Subset::Illumination)
        } else if name.starts_with("v_") {
            Some(Subset::Viewpoint)
        } else {
            None
        }
    }
}

impl fmt::Display for Subset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Subset::Illumination => "illumination",
            Subset::Viewpoint => "viewpoint",
        })
    }
}

impl std::str::FromStr for Subset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "illumination" | "i" => Ok(Subset::Illumination),
            "viewpoint" | "v" => Ok(Subset::Viewpoint),
            _ => Err(Error::config("subset", format!("unknown subset `{s}`"))),
        }
    }
}

/// One sequence: reference image plus five targets and their homographies.
#[derive(Clone, Debug)]
pub struct Sequence {
    pub name: String,
    pub subset: Subset,
    pub reference: PathBuf,
    /// `(target image, H mapping reference pixels to target pixels)`.
    pub targets: Vec<(PathBuf, Homography)>,
}

/// A sequence directory that could not be used.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Skipped {
    pub sequence: String,
    pub reason: String,
}

fn find_image(dir: &Path, stem: &str) -> Option<PathBuf> {
    IMAGE_EXTENSIONS.iter().map(|e| dir.join(format!("{stem}.{e}"))).find(|p| p.is_file())
}

/// Parses a 3×3 row-major homography text file.
pub fn read_homography(path: &Path) -> Result<Homography> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let vals: Vec<f64> = text
        .split_whitespace()
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Dataset(format!("{}: non-numeric entry", path.display())))?;
    let arr: [f64; 9] =
        vals.try_into().map_err(|_| Error::Dataset(format!("{}: expected 9 numbers", path.display())))?;
    Homography::from_row_major(arr)
}

/// Writes a homography in the same text layout.
pub fn write_homography(path: &Path, h: &Homography) -> Result<()> {
    let m = h.to_row_major();
    let text = m.chunks(3).map(|r| format!("{:.12e} {:.12e} {:.12e}\n", r[0], r[1], r[2])).collect::<String>();
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn load_sequence(dir: &Path, name: &str, subset: Subset) -> Result<Sequence> {
    let reference = find_image(dir, "1").ok_or_else(|| Error::Dataset("missing reference image 1".into()))?;
    let mut targets = Vec::with_capacity(5);
    for k in 2..=6 {
        let img = find_image(dir, &k.to_string()).ok_or_else(|| Error::Dataset(format!("missing image {k}")))?;
        let h = read_homography(&dir.join(format!("H_1_{k}")))?;
        targets.push((img, h));
    }
    Ok(Sequence { name: name.to_string(), subset, reference, targets })
}

/// Lists usable sequences in name order, optionally restricted to a subset.
/// Directories that fail to parse are reported rather than aborting.
pub fn load_dataset(root: &Path, subset: Option<Subset>) -> Result<(Vec<Sequence>, Vec<Skipped>)> {
    let entries = std::fs::read_dir(root).map_err(|e| Error::io(root, e))?;
    let mut dirs: Vec<(String, PathBuf)> = entries
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .map(|e| (e.file_name().to_string_lossy().into_owned(), e.path()))
        .collect();
    dirs.sort();
    let mut sequences = Vec::new();
    let mut skipped = Vec::new();
    for (name, path) in dirs {
        let Some(kind) = Subset::from_name(&name) else {
            skipped.push(Skipped { sequence: name, reason: "name lacks i_ or v_ prefix".into() });
            continue;
        };
        if subset.is_some_and(|s| s != kind) {
            continue;
        }
        match load_sequence(&path, &name, kind) {
            Ok(seq) => sequences.push(seq),
            Err(e) => skipped.push(Skipped { sequence: name, reason: e.to_string() }),
        }
    }
    if sequences.is_empty() && skipped.is_empty() {
        return Err(Error::Dataset(format!("{}: no sequence directories", root.display())));
    }
    Ok((sequences, skipped))
}
