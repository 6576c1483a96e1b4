//! Dual-view cases and the on-disk manifest format.
//!
//! A dataset directory holds `{case_id}_cc.pgm`, `{case_id}_mlo.pgm` and
//! `manifest.csv` with the header `case_id,label,cc_path,mlo_path,bbox_cc,bbox_mlo`.
//! Image paths are relative to the manifest; boxes are `x0:y0:x1:y1`
//! (inclusive pixel bounds) or empty.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::image::{read_pgm, write_pgm, GrayImage};
use crate::seeding::fnv1a;

pub const MANIFEST_HEADER: &str = "case_id,label,cc_path,mlo_path,bbox_cc,bbox_mlo";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn contains(&self, row: usize, col: usize) -> bool {
        (self.y0..=self.y1).contains(&row) && (self.x0..=self.x1).contains(&col)
    }

    /// Mirror image under a horizontal flip of a `width` wide image.
    pub fn hflip(&self, width: usize) -> BBox {
        BBox {
            x0: width - 1 - self.x1,
            y0: self.y0,
            x1: width - 1 - self.x0,
            y1: self.y1,
        }
    }
}

impl fmt::Display for BBox {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}:{}:{}", self.x0, self.y0, self.x1, self.y1)
    }
}

impl FromStr for BBox {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        let parts: Vec<usize> = s
            .split(':')
            .map(|p| p.trim().parse::<usize>().map_err(|_| format!("bad box `{s}`")))
            .collect::<std::result::Result<_, _>>()?;
        match parts[..] {
            [x0, y0, x1, y1] if x0 <= x1 && y0 <= y1 => Ok(BBox { x0, y0, x1, y1 }),
            _ => Err(format!("bad box `{s}`, expected x0:y0:x1:y1")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DualViewCase {
    pub case_id: String,
    pub img_cc: GrayImage,
    pub img_mlo: GrayImage,
    pub label: u8,
    pub bbox_cc: Option<BBox>,
    pub bbox_mlo: Option<BBox>,
}

fn manifest_row(c: &DualViewCase) -> String {
    let b = |b: &Option<BBox>| b.map(|b| b.to_string()).unwrap_or_default();
    format!(
        "{id},{},{id}_cc.pgm,{id}_mlo.pgm,{},{}",
        c.label,
        b(&c.bbox_cc),
        b(&c.bbox_mlo),
        id = c.case_id
    )
}

pub fn manifest_text(cases: &[DualViewCase]) -> String {
    let mut s = String::from(MANIFEST_HEADER);
    s.push('\n');
    for c in cases {
        s.push_str(&manifest_row(c));
        s.push('\n');
    }
    s
}

/// Writes every image and the manifest; returns the manifest path.
pub fn write_dataset(cases: &[DualViewCase], dir: &Path) -> Result<PathBuf> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for c in cases {
        write_pgm(&c.img_cc, &dir.join(format!("{}_cc.pgm", c.case_id)))?;
        write_pgm(&c.img_mlo, &dir.join(format!("{}_mlo.pgm", c.case_id)))?;
    }
    let manifest = dir.join("manifest.csv");
    fs::write(&manifest, manifest_text(cases)).map_err(|e| Error::io(&manifest, e))?;
    Ok(manifest)
}

pub fn load_dataset(manifest: &Path) -> Result<Vec<DualViewCase>> {
    let text = fs::read_to_string(manifest).map_err(|e| Error::io(manifest, e))?;
    let dir = manifest.parent().unwrap_or(Path::new("."));
    let mut lines = text.lines();
    if lines.next().map(str::trim) != Some(MANIFEST_HEADER) {
        return Err(Error::format(manifest, "missing manifest header"));
    }
    let mut cases = Vec::new();
    for (i, line) in lines.enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let bad = |detail: String| Error::format(manifest, format!("line {}: {detail}", i + 2));
        let f: Vec<&str> = line.split(',').map(str::trim).collect();
        if f.len() != 6 {
            return Err(bad(format!("expected 6 fields, found {}", f.len())));
        }
        let label = match f[1] {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(format!("label `{other}` is not 0 or 1"))),
        };
        let bbox = |s: &str| -> Result<Option<BBox>> {
            if s.is_empty() {
                Ok(None)
            } else {
                s.parse().map(Some).map_err(bad)
            }
        };
        let (bbox_cc, bbox_mlo) = (bbox(f[4])?, bbox(f[5])?);
        if label == 1 && (bbox_cc.is_none() != bbox_mlo.is_none()) {
            return Err(bad("boxes must be given for both views or neither".into()));
        }
        if f[2].is_empty() || f[3].is_empty() {
            return Err(bad("both views are required".into()));
        }
        cases.push(DualViewCase {
            case_id: f[0].to_string(),
            img_cc: read_pgm(&dir.join(f[2]))?,
            img_mlo: read_pgm(&dir.join(f[3]))?,
            label,
            bbox_cc,
            bbox_mlo,
        });
    }
    Ok(cases)
}

/// Deterministic split by case id: a case goes to validation when its
/// hashed id falls below `val_fraction`.
pub fn split_by_id(cases: Vec<DualViewCase>, val_fraction: f64) -> (Vec<DualViewCase>, Vec<DualViewCase>) {
    cases
        .into_iter()
        .partition(|c| (fnv1a(c.case_id.as_bytes()) % 10_000) as f64 >= val_fraction * 10_000.0)
}
