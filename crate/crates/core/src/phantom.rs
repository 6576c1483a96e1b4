//! Synthetic dual-view phantoms.
//!
//! A half-ball of tissue sits on the chest wall (the `y = 0` plane). Both
//! views are parallel projections along directions with no `y` component,
//! so every image row collects exactly the mass of one slab at a fixed
//! distance from the chest wall: CC integrates along `z`, MLO along
//! `(x + z) / sqrt(2)`.
//!
//! The voxel grid spans `x, z` in `[-E, E]` and `y` in `[0, E]` with
//! `E = grid_n / 2`. Images cover the same ranges: columns span `[-E, E]`
//! and rows span `[0, E]`, with the chest wall along the bottom row.

use rand::seq::SliceRandom;
use rand::Rng;
use rayon::prelude::*;

use crate::dataset::{BBox, DualViewCase};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seeding::{self, SeededRng};

pub const LESION_TRIES: usize = 100;
const TEXTURE_WAVES: usize = 6;
/// Sub-samples per voxel along `x` and `z` when projecting; the diagonal
/// view aliases badly with one sample per voxel.
const SUBSAMPLES: usize = 4;
/// Chance that the misalignment walk takes a step between adjacent rows.
const SHIFT_STEP_PROB: f64 = 0.25;

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub grid_n: usize,
    /// Breast radius in voxel units along `x`.
    pub radius: f64,
    pub lesion_prob: f64,
    pub lesion_radius_range: (f64, f64),
    /// Density multiplier inside the lesion.
    pub lesion_intensity: f64,
    pub background_texture_scale: f64,
    /// Largest in-row shift, in pixels, applied to the MLO view.
    pub misalign_shift_max: usize,
    pub image_size: usize,
    pub seed: u64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            grid_n: 64,
            radius: 30.0,
            lesion_prob: 0.5,
            lesion_radius_range: (5.0, 7.0),
            lesion_intensity: 3.0,
            background_texture_scale: 0.3,
            misalign_shift_max: 0,
            image_size: 64,
            seed: 0,
        }
    }
}

impl PhantomConfig {
    pub fn extent(&self) -> f64 {
        self.grid_n as f64 / 2.0
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(format!("phantom: {m}")));
        if self.grid_n < 2 {
            return bad(format!("grid_n {} too small", self.grid_n));
        }
        if !(self.radius > 0.0 && self.radius <= self.extent()) {
            return bad(format!("radius {} must lie in (0, {}]", self.radius, self.extent()));
        }
        if !(0.0..=1.0).contains(&self.lesion_prob) {
            return bad(format!("lesion_prob {} outside [0, 1]", self.lesion_prob));
        }
        let (lo, hi) = self.lesion_radius_range;
        if !(lo > 0.0 && lo <= hi && 2.0 * hi <= self.radius) {
            return bad(format!("lesion radius range [{lo}, {hi}] does not fit the breast"));
        }
        if self.lesion_intensity <= 0.0 || self.background_texture_scale < 0.0 {
            return bad("lesion intensity must be positive and texture scale non-negative".into());
        }
        if self.image_size == 0 || self.image_size % 8 != 0 {
            return bad(format!("image_size {} must be a positive multiple of 8", self.image_size));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Lesion {
    pub center: [f64; 3],
    pub radius: f64,
}

/// Density on a `grid_n^3` lattice, indexed `[y][z][x]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Volume {
    pub n: usize,
    pub extent: f64,
    pub density: Vec<f64>,
    pub lesion: Option<Lesion>,
}

impl Volume {
    pub fn x(&self, i: usize) -> f64 {
        -self.extent + (i as f64 + 0.5) * 2.0 * self.extent / self.n as f64
    }

    pub fn y(&self, j: usize) -> f64 {
        (j as f64 + 0.5) * self.extent / self.n as f64
    }

    pub fn z(&self, k: usize) -> f64 {
        self.x(k)
    }

    pub fn at(&self, ix: usize, iy: usize, iz: usize) -> f64 {
        self.density[(iy * self.n + iz) * self.n + ix]
    }

    /// Total density of the slab at lattice height `iy`.
    pub fn slab_mass(&self, iy: usize) -> f64 {
        let n2 = self.n * self.n;
        self.density[iy * n2..(iy + 1) * n2].iter().sum()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum View {
    Cc,
    Mlo,
}

impl View {
    /// In-image horizontal coordinate of a point.
    pub fn column_coord(self, x: f64, z: f64) -> f64 {
        match self {
            View::Cc => x,
            View::Mlo => (x - z) / std::f64::consts::SQRT_2,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            View::Cc => "cc",
            View::Mlo => "mlo",
        }
    }
}

/// Draws malignancy from `lesion_prob`, then builds the volume.
pub fn generate_volume(cfg: &PhantomConfig, rng: &mut SeededRng) -> Result<Volume> {
    let malignant = rng.gen_bool(cfg.lesion_prob);
    generate_volume_with(cfg, rng, malignant)
}

pub fn generate_volume_with(cfg: &PhantomConfig, rng: &mut SeededRng, malignant: bool) -> Result<Volume> {
    cfg.validate()?;
    let n = cfg.grid_n;
    let r = cfg.radius;
    let base = 2.0 * std::f64::consts::PI / (2.0 * r);
    let waves: Vec<([f64; 3], f64)> = (0..TEXTURE_WAVES)
        .map(|_| {
            let cos_t: f64 = rng.gen_range(-1.0..1.0);
            let phi: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
            let sin_t = (1.0 - cos_t * cos_t).sqrt();
            let k = base * rng.gen_range(1.0..3.0);
            let dir = [sin_t * phi.cos(), sin_t * phi.sin(), cos_t];
            ([k * dir[0], k * dir[1], k * dir[2]], rng.gen_range(0.0..std::f64::consts::TAU))
        })
        .collect();
    let norm = (TEXTURE_WAVES as f64 / 2.0).sqrt();

    let lesion = if malignant { Some(place_lesion(cfg, rng)?) } else { None };

    let mut vol = Volume {
        n,
        extent: cfg.extent(),
        density: vec![0.0; n * n * n],
        lesion,
    };
    for iy in 0..n {
        let y = vol.y(iy);
        for iz in 0..n {
            let z = vol.z(iz);
            for ix in 0..n {
                let x = vol.x(ix);
                if x * x + y * y + z * z > r * r {
                    continue;
                }
                let texture: f64 = waves
                    .iter()
                    .map(|(k, ph)| (k[0] * x + k[1] * y + k[2] * z + ph).cos())
                    .sum::<f64>()
                    / norm;
                let mut d = (1.0 + cfg.background_texture_scale * texture).max(0.0);
                if let Some(l) = &lesion {
                    let [cx, cy, cz] = l.center;
                    if (x - cx).powi(2) + (y - cy).powi(2) + (z - cz).powi(2) <= l.radius * l.radius {
                        d *= cfg.lesion_intensity;
                    }
                }
                vol.density[(iy * n + iz) * n + ix] = d;
            }
        }
    }
    Ok(vol)
}

fn place_lesion(cfg: &PhantomConfig, rng: &mut SeededRng) -> Result<Lesion> {
    let (lo, hi) = cfg.lesion_radius_range;
    let r = cfg.radius;
    let rho = if hi > lo { rng.gen_range(lo..hi) } else { lo };
    for _ in 0..LESION_TRIES {
        let c = [rng.gen_range(-r..r), rng.gen_range(0.0..r), rng.gen_range(-r..r)];
        let dist = (c[0] * c[0] + c[1] * c[1] + c[2] * c[2]).sqrt();
        if dist + rho <= r && c[1] >= rho {
            return Ok(Lesion { center: c, radius: rho });
        }
    }
    Err(Error::LesionPlacement(LESION_TRIES))
}

/// Pixel geometry shared by projection and box computation.
#[derive(Clone, Copy, Debug)]
struct Raster {
    size: usize,
    extent: f64,
}

impl Raster {
    fn col_pos(&self, u: f64) -> f64 {
        (u + self.extent) / (2.0 * self.extent / self.size as f64) - 0.5
    }

    fn col_of(&self, u: f64) -> usize {
        ((u + self.extent) / (2.0 * self.extent / self.size as f64))
            .floor()
            .clamp(0.0, (self.size - 1) as f64) as usize
    }

    fn row_of(&self, y: f64) -> usize {
        let bin = (y / (self.extent / self.size as f64))
            .floor()
            .clamp(0.0, (self.size - 1) as f64) as usize;
        self.size - 1 - bin
    }
}

/// Parallel projection of `vol` onto an `image_size^2` raster. Each voxel
/// lands in the row of its height; its sub-samples are split linearly
/// between the two nearest columns, so every row holds exactly its slab's
/// mass.
pub fn project(vol: &Volume, view: View, image_size: usize) -> GrayImage {
    let raster = Raster {
        size: image_size,
        extent: vol.extent,
    };
    let mut img = GrayImage::new(image_size, image_size);
    let last = (image_size - 1) as f64;
    let pitch = 2.0 * vol.extent / vol.n as f64;
    let offsets: Vec<f64> = (0..SUBSAMPLES)
        .map(|s| ((s as f64 + 0.5) / SUBSAMPLES as f64 - 0.5) * pitch)
        .collect();
    let share = 1.0 / (SUBSAMPLES * SUBSAMPLES) as f64;
    for iy in 0..vol.n {
        let row = raster.row_of(vol.y(iy));
        let out = img.row_mut(row);
        for iz in 0..vol.n {
            let z = vol.z(iz);
            for ix in 0..vol.n {
                let d = vol.at(ix, iy, iz);
                if d == 0.0 {
                    continue;
                }
                let x = vol.x(ix);
                for dz in &offsets {
                    for dx in &offsets {
                        let pos = raster.col_pos(view.column_coord(x + dx, z + dz)).clamp(0.0, last);
                        let c0 = pos.floor();
                        let frac = pos - c0;
                        let c0 = c0 as usize;
                        out[c0] += d * share * (1.0 - frac);
                        if frac > 0.0 {
                            out[c0 + 1] += d * share * frac;
                        }
                    }
                }
            }
        }
    }
    img
}

/// Pixel box enclosing the projected lesion sphere.
pub fn lesion_bbox(lesion: &Lesion, view: View, extent: f64, image_size: usize) -> BBox {
    let raster = Raster {
        size: image_size,
        extent,
    };
    let [x, y, z] = lesion.center;
    let u = view.column_coord(x, z);
    BBox {
        x0: raster.col_of(u - lesion.radius),
        y0: raster.row_of(y + lesion.radius),
        x1: raster.col_of(u + lesion.radius),
        y1: raster.row_of(y - lesion.radius),
    }
}

/// Per-row integer shifts in `[-max, max]` drawn as a lazy bounded random
/// walk, so neighbouring rows differ by at most one pixel.
pub fn misalignment_shifts(rows: usize, shift_max: usize, rng: &mut SeededRng) -> Vec<i64> {
    let m = shift_max as i64;
    if m == 0 {
        return vec![0; rows];
    }
    let mut s = rng.gen_range(-m..=m);
    (0..rows)
        .map(|_| {
            let cur = s;
            if rng.gen_bool(SHIFT_STEP_PROB) {
                let step = if rng.gen_bool(0.5) { 1 } else { -1 };
                s = (s + step).clamp(-m, m);
            }
            cur
        })
        .collect()
}

/// Moves row `r` right by `shifts[r]` pixels, zero-filling at the edges.
pub fn shift_rows(img: &GrayImage, shifts: &[i64]) -> GrayImage {
    let w = img.width as i64;
    GrayImage::from_fn(img.width, img.height, |r, c| {
        let src = c as i64 - shifts[r];
        if (0..w).contains(&src) {
            img.get(r, src as usize)
        } else {
            0.0
        }
    })
}

pub fn apply_misalignment(img: &GrayImage, rng: &mut SeededRng, cfg: &PhantomConfig) -> GrayImage {
    let shifts = misalignment_shifts(img.height, cfg.misalign_shift_max, rng);
    shift_rows(img, &shifts)
}

/// One case from its own sub-seed; `malignant` fixes the label.
pub fn generate_case(cfg: &PhantomConfig, index: usize, malignant: bool) -> Result<DualViewCase> {
    let mut rng = seeding::rng(seeding::sub_seed(cfg.seed, index as u64));
    let vol = generate_volume_with(cfg, &mut rng, malignant)?;
    let mut cc = project(&vol, View::Cc, cfg.image_size);
    let mut mlo = project(&vol, View::Mlo, cfg.image_size);
    let peak = cc.max().max(mlo.max());
    if peak > 0.0 {
        cc.data.iter_mut().chain(mlo.data.iter_mut()).for_each(|v| *v /= peak);
    }
    let shifts = misalignment_shifts(cfg.image_size, cfg.misalign_shift_max, &mut rng);
    let mlo = shift_rows(&mlo, &shifts);
    let boxes = vol.lesion.map(|l| {
        let cc_box = lesion_bbox(&l, View::Cc, vol.extent, cfg.image_size);
        let mut mlo_box = lesion_bbox(&l, View::Mlo, vol.extent, cfg.image_size);
        let rows = &shifts[mlo_box.y0..=mlo_box.y1];
        let last = cfg.image_size as i64 - 1;
        let lo = rows.iter().min().copied().unwrap_or(0);
        let hi = rows.iter().max().copied().unwrap_or(0);
        mlo_box.x0 = (mlo_box.x0 as i64 + lo).clamp(0, last) as usize;
        mlo_box.x1 = (mlo_box.x1 as i64 + hi).clamp(0, last) as usize;
        (cc_box, mlo_box)
    });
    Ok(DualViewCase {
        case_id: format!("s{}_{index:04}", cfg.seed),
        img_cc: cc,
        img_mlo: mlo,
        label: u8::from(malignant),
        bbox_cc: boxes.map(|b| b.0),
        bbox_mlo: boxes.map(|b| b.1),
    })
}

/// `n` cases with `round(lesion_prob * n)` malignant ones at seeded
/// positions. Cases are generated in parallel and returned in index order.
pub fn generate_dataset(cfg: &PhantomConfig, n: usize) -> Result<Vec<DualViewCase>> {
    cfg.validate()?;
    if n == 0 {
        return Err(Error::InvalidConfig("phantom: need at least one case".into()));
    }
    let positives = (cfg.lesion_prob * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut seeding::rng(seeding::sub_seed(cfg.seed, u64::MAX)));
    let mut malignant = vec![false; n];
    for &i in &order[..positives] {
        malignant[i] = true;
    }
    (0..n)
        .into_par_iter()
        .map(|i| generate_case(cfg, i, malignant[i]))
        .collect()
}
