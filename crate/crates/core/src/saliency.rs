//! Gradient-weighted class activation maps over the reinvented feature map.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::dataset::DualViewCase;
use crate::error::{Error, Result};
use crate::image::{write_ppm, GrayImage};
use crate::model::{model_forward, DchaModel};
use crate::phantom::View;
use crate::tensor::Tensor;

pub const HITS_HEADER: &str = "case_id,view,peak_row,peak_col,hit";

#[derive(Clone, Debug, PartialEq)]
pub struct SaliencyMap {
    /// Feature-map resolution, values in `[0, 1]`.
    pub heatmap: GrayImage,
    /// Bilinear upsampling of `heatmap` to the input size, renormalised.
    /// Cell `(i, j)` lands on pixel `(i * out_h / h, j * out_w / w)`, the
    /// centre of its receptive field under the backbone's centred strided
    /// convolutions.
    pub upsampled: GrayImage,
    /// First row-major maximum of `upsampled`.
    pub peak: (usize, usize),
}

pub fn argmax_first(img: &GrayImage) -> (usize, usize) {
    let mut best = 0;
    for (i, &v) in img.data.iter().enumerate() {
        if v > img.data[best] {
            best = i;
        }
    }
    (best / img.width, best % img.width)
}

fn normalise(img: &mut GrayImage) {
    let m = img.max();
    if m > 0.0 {
        img.data.iter_mut().for_each(|v| *v /= m);
    }
}

/// Bilinear interpolation of `map` on a grid whose nodes sit on the
/// receptive-field centres, held constant past the last node.
fn upsample(map: &GrayImage, out_h: usize, out_w: usize) -> GrayImage {
    let sy = map.height as f64 / out_h as f64;
    let sx = map.width as f64 / out_w as f64;
    GrayImage::from_fn(out_w, out_h, |r, c| {
        let src_r = (r as f64 * sy).min((map.height - 1) as f64);
        let src_c = (c as f64 * sx).min((map.width - 1) as f64);
        map.bilinear(src_r, src_c)
    })
}

/// Combines a `[C, H, W]` feature map with its gradient into a map of
/// `out_h x out_w` pixels.
pub fn cam_from_gradient(r: &Tensor, grad: &Tensor, out_h: usize, out_w: usize) -> Result<SaliencyMap> {
    if r.shape() != grad.shape() || r.shape().len() != 3 {
        return Err(Error::ShapeMismatch {
            op: "grad_cam",
            expected: r.shape().to_vec(),
            got: grad.shape().to_vec(),
        });
    }
    let (c, h, w) = (r.shape()[0], r.shape()[1], r.shape()[2]);
    let hw = h * w;
    let weights: Vec<f64> = grad.data().chunks(hw).map(|g| g.iter().sum::<f64>() / hw as f64).collect();
    let mut heatmap = GrayImage::new(w, h);
    for (ch, wc) in weights.iter().enumerate().take(c) {
        let plane = &r.data()[ch * hw..(ch + 1) * hw];
        for (o, &v) in heatmap.data.iter_mut().zip(plane) {
            *o += wc * v;
        }
    }
    heatmap.data.iter_mut().for_each(|v| *v = v.max(0.0));
    normalise(&mut heatmap);
    let mut upsampled = upsample(&heatmap, out_h, out_w);
    normalise(&mut upsampled);
    let peak = argmax_first(&upsampled);
    Ok(SaliencyMap {
        heatmap,
        upsampled,
        peak,
    })
}

pub fn grad_cam(model: &DchaModel, case: &DualViewCase, view: View) -> Result<SaliencyMap> {
    let mut s = model.session();
    let a = s.tape.constant(model.input(&case.img_cc));
    let b = s.tape.constant(model.input(&case.img_mlo));
    let fp = model_forward(&mut s, &model.config, a, b)?;
    let (p, r, img) = match view {
        View::Cc => (fp.p_cc, fp.r_cc, &case.img_cc),
        View::Mlo => (fp.p_mlo, fp.r_mlo, &case.img_mlo),
    };
    s.tape.backward(p)?;
    let grad = s
        .tape
        .grad(r)
        .unwrap_or_else(|| Tensor::zeros(s.tape.shape(r).to_vec()));
    cam_from_gradient(s.tape.value(r), &grad, img.height, img.width)
}

/// Grayscale image with the heatmap blended into the red channel.
pub fn overlay(img: &GrayImage, heat: &GrayImage) -> Vec<[f64; 3]> {
    img.data
        .iter()
        .zip(&heat.data)
        .map(|(&g, &h)| {
            let a = 0.6 * h;
            let base = (1.0 - a) * g;
            [base + a, base, base]
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct HitRecord {
    pub case_id: String,
    pub view: &'static str,
    pub peak_row: usize,
    pub peak_col: usize,
    pub hit: bool,
}

/// Writes the overlay as a binary pixmap. Returns the peak record when the
/// view carries a lesion box.
pub fn overlay_and_save(case: &DualViewCase, view: View, map: &SaliencyMap, path: &Path) -> Result<Option<HitRecord>> {
    let (img, bbox) = match view {
        View::Cc => (&case.img_cc, case.bbox_cc),
        View::Mlo => (&case.img_mlo, case.bbox_mlo),
    };
    if (map.upsampled.width, map.upsampled.height) != (img.width, img.height) {
        return Err(Error::ShapeMismatch {
            op: "overlay_and_save",
            expected: vec![img.height, img.width],
            got: vec![map.upsampled.height, map.upsampled.width],
        });
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    write_ppm(img.width, img.height, &overlay(img, &map.upsampled), path)?;
    Ok(bbox.map(|b| HitRecord {
        case_id: case.case_id.clone(),
        view: view.name(),
        peak_row: map.peak.0,
        peak_col: map.peak.1,
        hit: b.contains(map.peak.0, map.peak.1),
    }))
}

pub fn hits_csv(records: &[HitRecord]) -> String {
    let mut s = format!("{HITS_HEADER}\n");
    for r in records {
        let _ = writeln!(s, "{},{},{},{},{}", r.case_id, r.view, r.peak_row, r.peak_col, u8::from(r.hit));
    }
    s
}

/// Overlays for both views of every case as `{case_id}_{view}.ppm`, plus
/// `hits.csv` for the views that carry a lesion box.
pub fn run_saliency(model: &DchaModel, cases: &[DualViewCase], dir: &Path) -> Result<Vec<HitRecord>> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let per_case: Vec<Vec<HitRecord>> = cases
        .par_iter()
        .map(|c| {
            let mut out = Vec::new();
            for view in [View::Cc, View::Mlo] {
                let map = grad_cam(model, c, view)?;
                let path = dir.join(format!("{}_{}.ppm", c.case_id, view.name()));
                out.extend(overlay_and_save(c, view, &map, &path)?);
            }
            Ok(out)
        })
        .collect::<Result<_>>()?;
    let records: Vec<HitRecord> = per_case.into_iter().flatten().collect();
    let p = dir.join("hits.csv");
    fs::write(&p, hits_csv(&records)).map_err(|e| Error::io(&p, e))?;
    Ok(records)
}
