//! Input pipeline: background removal, chest-wall line fit, alignment of the
//! chest wall with the bottom edge, resizing and paired augmentation.

use std::collections::VecDeque;

use rand::Rng;

use crate::dataset::{BBox, DualViewCase};
use crate::error::{Error, Result};
use crate::image::GrayImage;
use crate::seeding::SeededRng;

#[derive(Clone, Debug, PartialEq)]
pub struct PreprocessConfig {
    pub target_size: usize,
    /// Gradient magnitudes at or above this quantile count as strong edges.
    pub bg_threshold_quantile: f64,
    pub rotation_max_deg: f64,
    pub hflip_prob: f64,
    /// Largest accepted RMS distance, in pixels, of wall points from the fit.
    pub fit_residual_limit: f64,
    /// Edge the chest wall rests on; detected from the mask when `None`.
    pub chest_wall_edge: Option<Edge>,
}

impl Default for PreprocessConfig {
    fn default() -> Self {
        Self {
            target_size: 256,
            bg_threshold_quantile: 0.9,
            rotation_max_deg: 10.0,
            hflip_prob: 0.5,
            fit_residual_limit: 2.0,
            chest_wall_edge: None,
        }
    }
}

impl PreprocessConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_size == 0 || self.target_size % 8 != 0 {
            return Err(Error::InvalidConfig(format!(
                "preprocess: target_size {} must be a positive multiple of 8",
                self.target_size
            )));
        }
        if !(0.0..1.0).contains(&self.bg_threshold_quantile) || !(0.0..=1.0).contains(&self.hflip_prob) {
            return Err(Error::InvalidConfig("preprocess: quantile must be in [0, 1) and hflip_prob in [0, 1]".into()));
        }
        if self.rotation_max_deg < 0.0 || self.fit_residual_limit <= 0.0 {
            return Err(Error::InvalidConfig("preprocess: rotation and residual limits must be non-negative".into()));
        }
        Ok(())
    }
}

/// Image edge the chest wall rests against.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Edge {
    Bottom,
    Top,
    Left,
    Right,
}

impl Edge {
    /// Quarter-turns the image so that this edge becomes the bottom one.
    pub fn to_bottom(self, img: &GrayImage) -> GrayImage {
        let (h, w) = (img.height, img.width);
        match self {
            Edge::Bottom => img.clone(),
            Edge::Top => GrayImage::from_fn(w, h, |r, c| img.get(h - 1 - r, w - 1 - c)),
            Edge::Left => GrayImage::from_fn(h, w, |r, c| img.get(c, w - 1 - r)),
            Edge::Right => GrayImage::from_fn(h, w, |r, c| img.get(h - 1 - c, r)),
        }
    }

    /// Where pixel `(r, c)` of a `h x w` image lands after [`Edge::to_bottom`].
    pub fn map_point(self, r: f64, c: f64, h: usize, w: usize) -> (f64, f64) {
        let (hm, wm) = ((h - 1) as f64, (w - 1) as f64);
        match self {
            Edge::Bottom => (r, c),
            Edge::Top => (hm - r, wm - c),
            Edge::Left => (wm - c, r),
            Edge::Right => (c, hm - r),
        }
    }
}

/// Fitted chest wall in the frame where it rests on the bottom edge.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ChestWallLine {
    /// Counter-clockwise angle from horizontal, radians.
    pub angle: f64,
    /// Height of the line above the bottom row at the centre column, pixels.
    pub offset: f64,
    pub edge: Edge,
}

impl ChestWallLine {
    pub fn identity() -> Self {
        Self {
            angle: 0.0,
            offset: 0.0,
            edge: Edge::Bottom,
        }
    }
}

/// Sobel gradient magnitude with replicated borders.
pub fn gradient_magnitude(img: &GrayImage) -> GrayImage {
    let (h, w) = (img.height as i64, img.width as i64);
    let at = |r: i64, c: i64| img.get(r.clamp(0, h - 1) as usize, c.clamp(0, w - 1) as usize);
    GrayImage::from_fn(img.width, img.height, |r, c| {
        let (r, c) = (r as i64, c as i64);
        let gx = (at(r - 1, c + 1) + 2.0 * at(r, c + 1) + at(r + 1, c + 1)) - (at(r - 1, c - 1) + 2.0 * at(r, c - 1) + at(r + 1, c - 1));
        let gy = (at(r + 1, c - 1) + 2.0 * at(r + 1, c) + at(r + 1, c + 1)) - (at(r - 1, c - 1) + 2.0 * at(r - 1, c) + at(r - 1, c + 1));
        (gx * gx + gy * gy).sqrt() / 8.0
    })
}

fn quantile(values: &[f64], q: f64) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v[((v.len() - 1) as f64 * q).floor() as usize]
}

fn border_pixels(img: &GrayImage) -> Vec<f64> {
    let (h, w) = (img.height, img.width);
    (0..h)
        .flat_map(|r| (0..w).map(move |c| (r, c)))
        .filter(|&(r, c)| r == 0 || c == 0 || r == h - 1 || c == w - 1)
        .map(|(r, c)| img.get(r, c))
        .collect()
}

/// Largest 4-connected component of `fg`; ties go to the first found in
/// row-major order.
fn largest_component(fg: &[bool], w: usize, h: usize) -> Vec<bool> {
    let mut label = vec![usize::MAX; fg.len()];
    let mut best = (0usize, usize::MAX);
    let mut queue = VecDeque::new();
    let mut next = 0;
    for start in 0..fg.len() {
        if !fg[start] || label[start] != usize::MAX {
            continue;
        }
        let mut size = 0;
        label[start] = next;
        queue.push_back(start);
        while let Some(i) = queue.pop_front() {
            size += 1;
            let (r, c) = (i / w, i % w);
            let mut visit = |j: usize| {
                if fg[j] && label[j] == usize::MAX {
                    label[j] = next;
                    queue.push_back(j);
                }
            };
            if r > 0 {
                visit(i - w);
            }
            if r + 1 < h {
                visit(i + w);
            }
            if c > 0 {
                visit(i - 1);
            }
            if c + 1 < w {
                visit(i + 1);
            }
        }
        if size > best.0 {
            best = (size, next);
        }
        next += 1;
    }
    label.iter().map(|&l| l == best.1).collect()
}

/// Keeps the largest bright region. The intensity cut sits just above the
/// border median, by a tenth of the mean strong-edge gradient.
pub fn remove_background(img: &GrayImage, cfg: &PreprocessConfig) -> Result<(GrayImage, Vec<bool>)> {
    if img.data.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let grad = gradient_magnitude(img);
    let cut = quantile(&grad.data, cfg.bg_threshold_quantile);
    let strong: Vec<f64> = grad.data.iter().copied().filter(|&g| g >= cut && g > 0.0).collect();
    if strong.is_empty() {
        return Err(Error::EmptyForeground);
    }
    let edge_level = strong.iter().sum::<f64>() / strong.len() as f64;
    let bg = quantile(&border_pixels(img), 0.5);
    let tau = bg + 0.1 * edge_level;
    let fg: Vec<bool> = img.data.iter().map(|&v| v > tau).collect();
    let mask = largest_component(&fg, img.width, img.height);
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyForeground);
    }
    let mut out = img.clone();
    for (v, &m) in out.data.iter_mut().zip(&mask) {
        if !m {
            *v = 0.0;
        }
    }
    Ok((out, mask))
}

fn mask_image(mask: &[bool], w: usize, h: usize) -> GrayImage {
    GrayImage {
        width: w,
        height: h,
        data: mask.iter().map(|&m| f64::from(u8::from(m))).collect(),
    }
}

fn contact(m: &GrayImage, edge: Edge) -> usize {
    let b = edge.to_bottom(m);
    b.row(b.height - 1).iter().filter(|&&v| v > 0.5).count()
}

/// Least-squares `row = a * col + b` through `pts`, dropping points far
/// from the fit twice over. Returns the coefficients and the RMS residual
/// of the kept points.
fn robust_line(pts: &[(f64, f64)]) -> (f64, f64, f64) {
    let fit = |p: &[(f64, f64)]| -> (f64, f64) {
        let n = p.len() as f64;
        let mc = p.iter().map(|q| q.0).sum::<f64>() / n;
        let mr = p.iter().map(|q| q.1).sum::<f64>() / n;
        let sxx: f64 = p.iter().map(|q| (q.0 - mc).powi(2)).sum();
        let sxy: f64 = p.iter().map(|q| (q.0 - mc) * (q.1 - mr)).sum();
        let a = if sxx > 0.0 { sxy / sxx } else { 0.0 };
        (a, mr - a * mc)
    };
    let mut kept = pts.to_vec();
    let (mut a, mut b) = fit(&kept);
    for _ in 0..2 {
        let res: Vec<f64> = pts.iter().map(|&(c, r)| (r - a * c - b).abs()).collect();
        let spread = 2.5 * quantile(&res, 0.5).max(0.5);
        let next: Vec<(f64, f64)> = pts.iter().zip(&res).filter(|(_, &e)| e <= spread).map(|(p, _)| *p).collect();
        if next.len() < 2 {
            break;
        }
        kept = next;
        (a, b) = fit(&kept);
    }
    let rms = (kept.iter().map(|&(c, r)| (r - a * c - b).powi(2)).sum::<f64>() / kept.len() as f64).sqrt();
    (a, b, rms)
}

/// Sub-pixel position of the lower tissue boundary in column `c`, given
/// the lowest foreground row `r`: the summed coverage of the pixels around
/// it, relative to the tissue two rows up.
fn wall_position(img: &GrayImage, r: usize, c: usize) -> f64 {
    let reference = img.get(r - 2, c);
    if reference <= 0.0 {
        return r as f64 + 0.5;
    }
    let cover: f64 = (r - 1..=r + 1).map(|k| (img.get(k, c) / reference).clamp(0.0, 1.0)).sum();
    r as f64 - 1.5 + cover
}

/// Fits the chest wall along the image edge with the most foreground
/// contact, or along `cfg.chest_wall_edge` when set. Wall points come from
/// the lowest foreground pixel of each column that does not itself touch
/// the edge and that continues its neighbours' boundary with slope at most
/// one. When those points cover under a tenth of the tissue width the
/// wall is the edge itself.
pub fn fit_chest_wall(img: &GrayImage, mask: &[bool], cfg: &PreprocessConfig) -> Result<ChestWallLine> {
    if !mask.iter().any(|&m| m) {
        return Err(Error::EmptyForeground);
    }
    let m = mask_image(mask, img.width, img.height);
    let edge = cfg.chest_wall_edge.unwrap_or_else(|| {
        [Edge::Bottom, Edge::Top, Edge::Left, Edge::Right]
            .into_iter()
            .max_by_key(|&e| (contact(&m, e), std::cmp::Reverse(e as u8)))
            .expect("four edges")
    });
    let b = edge.to_bottom(&m);
    let im = edge.to_bottom(img);
    let (h, w) = (b.height, b.width);
    let lowest: Vec<Option<usize>> = (0..w).map(|c| (0..h).rev().find(|&r| b.get(r, c) > 0.5)).collect();
    // a wall point's neighbours continue the boundary with slope at most one
    let smooth = |c: usize, r: usize| {
        let near = [c.checked_sub(1), Some(c + 1)]
            .into_iter()
            .flatten()
            .filter_map(|n| lowest.get(n).copied().flatten());
        let mut any = false;
        for n in near {
            if n.abs_diff(r) > 1 {
                return false;
            }
            any = true;
        }
        any
    };
    let mut pts = Vec::new();
    for (c, r) in lowest.iter().enumerate() {
        if let Some(r) = *r {
            if r + 1 < h && r >= 2 && smooth(c, r) {
                pts.push((c as f64, wall_position(&im, r, c)));
            }
        }
    }
    let cx = (w - 1) as f64 / 2.0;
    let occupied: Vec<usize> = (0..w).filter(|&c| lowest[c].is_some()).collect();
    let extent = occupied.last().map_or(0, |l| l - occupied[0] + 1) as f64;
    let span = pts.last().map_or(0.0, |l| l.0 - pts[0].0 + 1.0);
    if pts.len() < 2 || span < 0.1 * extent {
        return Ok(ChestWallLine {
            angle: 0.0,
            offset: 0.0,
            edge,
        });
    }
    let (a, b0, rms) = robust_line(&pts);
    if rms > cfg.fit_residual_limit {
        return Err(Error::ChestWallFit {
            residual: rms,
            limit: cfg.fit_residual_limit,
        });
    }
    let angle = -a.atan();
    if angle.abs() >= std::f64::consts::FRAC_PI_4 {
        return Err(Error::ChestWallAngle {
            angle_deg: angle.to_degrees(),
        });
    }
    // rows are pixel centres and the bottom boundary sits at h - 0.5
    let offset = (h as f64 - 0.5) - (a * cx + b0);
    Ok(ChestWallLine { angle, offset, edge })
}

/// Rigid map between the edge-normalised source frame and the aligned
/// frame, in `(row, col)` pixel coordinates.
struct Alignment {
    origin: (f64, f64),
    cos: f64,
    sin: f64,
    cx: f64,
    bottom: f64,
}

impl Alignment {
    fn new(line: &ChestWallLine, h: usize, w: usize) -> Self {
        let cx = (w - 1) as f64 / 2.0;
        let bottom = (h - 1) as f64;
        Self {
            origin: (bottom - line.offset, cx),
            cos: line.angle.cos(),
            sin: line.angle.sin(),
            cx,
            bottom,
        }
    }

    fn source(&self, r: f64, c: f64) -> (f64, f64) {
        let (dc, dr) = (c - self.cx, r - self.bottom);
        (
            self.origin.0 - dc * self.sin + dr * self.cos,
            self.origin.1 + dc * self.cos + dr * self.sin,
        )
    }

    fn target(&self, r: f64, c: f64) -> (f64, f64) {
        let (dr, dc) = (r - self.origin.0, c - self.origin.1);
        let along = dc * self.cos - dr * self.sin;
        let across = dc * self.sin + dr * self.cos;
        (self.bottom + across, self.cx + along)
    }
}

/// Places the chest wall on the bottom row, then resizes to
/// `target_size^2`. Values stay in `[0, 1]`.
pub fn align_and_resize(img: &GrayImage, line: &ChestWallLine, cfg: &PreprocessConfig) -> GrayImage {
    let base = line.edge.to_bottom(img);
    let al = Alignment::new(line, base.height, base.width);
    let aligned = GrayImage::from_fn(base.width, base.height, |r, c| {
        let (sr, sc) = al.source(r as f64, c as f64);
        base.bilinear(sr, sc)
    });
    let mut out = aligned.resize(cfg.target_size, cfg.target_size);
    out.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    out
}

/// Image of a box under [`align_and_resize`].
pub fn align_bbox(bbox: &BBox, line: &ChestWallLine, h: usize, w: usize, cfg: &PreprocessConfig) -> BBox {
    let (bh, bw) = match line.edge {
        Edge::Bottom | Edge::Top => (h, w),
        Edge::Left | Edge::Right => (w, h),
    };
    let al = Alignment::new(line, bh, bw);
    let corners = [
        (bbox.y0 as f64, bbox.x0 as f64),
        (bbox.y0 as f64, bbox.x1 as f64),
        (bbox.y1 as f64, bbox.x0 as f64),
        (bbox.y1 as f64, bbox.x1 as f64),
    ]
    .map(|(r, c)| {
        let (r, c) = line.edge.map_point(r, c, h, w);
        al.target(r, c)
    });
    let (sy, sx) = (cfg.target_size as f64 / bh as f64, cfg.target_size as f64 / bw as f64);
    enclose(&corners, sy, sx, cfg.target_size, cfg.target_size)
}

fn enclose(pts: &[(f64, f64)], sy: f64, sx: f64, h: usize, w: usize) -> BBox {
    let to_px = |v: f64, s: f64, n: usize| (((v + 0.5) * s - 0.5).round()).clamp(0.0, (n - 1) as f64) as usize;
    let rows = pts.iter().map(|p| p.0);
    let cols = pts.iter().map(|p| p.1);
    let (rmin, rmax) = rows.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    let (cmin, cmax) = cols.fold((f64::MAX, f64::MIN), |(a, b), v| (a.min(v), b.max(v)));
    BBox {
        x0: to_px(cmin, sx, w),
        y0: to_px(rmin, sy, h),
        x1: to_px(cmax, sx, w),
        y1: to_px(rmax, sy, h),
    }
}

/// Background removal, wall fit and alignment of one view.
pub fn preprocess_image(img: &GrayImage, cfg: &PreprocessConfig) -> Result<(GrayImage, ChestWallLine)> {
    let (clean, mask) = remove_background(img, cfg)?;
    let line = fit_chest_wall(&clean, &mask, cfg)?;
    Ok((align_and_resize(&clean, &line, cfg), line))
}

pub fn preprocess_case(case: &DualViewCase, cfg: &PreprocessConfig) -> Result<DualViewCase> {
    let (cc, line_cc) = preprocess_image(&case.img_cc, cfg)?;
    let (mlo, line_mlo) = preprocess_image(&case.img_mlo, cfg)?;
    let map = |b: &Option<BBox>, line: &ChestWallLine, img: &GrayImage| {
        b.map(|b| align_bbox(&b, line, img.height, img.width, cfg))
    };
    Ok(DualViewCase {
        case_id: case.case_id.clone(),
        bbox_cc: map(&case.bbox_cc, &line_cc, &case.img_cc),
        bbox_mlo: map(&case.bbox_mlo, &line_mlo, &case.img_mlo),
        img_cc: cc,
        img_mlo: mlo,
        label: case.label,
    })
}

/// One shared random rotation and flip for both views.
pub fn augment(case: &DualViewCase, rng: &mut SeededRng, cfg: &PreprocessConfig) -> DualViewCase {
    let max = cfg.rotation_max_deg.to_radians();
    let theta = if max > 0.0 { rng.gen_range(-max..=max) } else { 0.0 };
    let flip = cfg.hflip_prob > 0.0 && rng.gen_bool(cfg.hflip_prob);
    let view = |img: &GrayImage, b: &Option<BBox>| {
        let (mut img, mut b) = (img.clone(), *b);
        if theta != 0.0 {
            img = img.rotate(theta);
            b = b.map(|b| rotate_bbox(&b, theta, img.height, img.width));
        }
        if flip {
            img = img.hflip();
            b = b.map(|b| b.hflip(img.width));
        }
        img.data.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        (img, b)
    };
    let (img_cc, bbox_cc) = view(&case.img_cc, &case.bbox_cc);
    let (img_mlo, bbox_mlo) = view(&case.img_mlo, &case.bbox_mlo);
    DualViewCase {
        case_id: case.case_id.clone(),
        img_cc,
        img_mlo,
        label: case.label,
        bbox_cc,
        bbox_mlo,
    }
}

/// Box enclosing the corners of `b` after [`GrayImage::rotate`].
fn rotate_bbox(b: &BBox, theta: f64, h: usize, w: usize) -> BBox {
    let (cr, cc) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (s, co) = theta.sin_cos();
    let corners = [(b.y0, b.x0), (b.y0, b.x1), (b.y1, b.x0), (b.y1, b.x1)].map(|(r, c)| {
        let (dx, dy) = (c as f64 - cc, r as f64 - cr);
        // inverse of the sampling map used by `rotate`
        (cr - s * dx + co * dy, cc + co * dx + s * dy)
    });
    enclose(&corners, 1.0, 1.0, h, w)
}
