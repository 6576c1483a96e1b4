//! End-to-end acceptance checks. Each criterion prints one PASS/FAIL line;
//! the process exits non-zero when any of them fails.

use std::fs;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use dcha_core::attention::{
    local_relation_forward, nonlocal_attention_forward, LocalRelationParams, NonLocalAttentionParams, Projection,
};
use dcha_core::dataset::{write_dataset, DualViewCase};
use dcha_core::gradcheck::{check_gradients, GradCheckOptions};
use dcha_core::losses::dual_view_corr_loss;
use dcha_core::metrics::compute_auc;
use dcha_core::model::{case_loss, model_forward, DchaModel, ModelConfig};
use dcha_core::params::uniform;
use dcha_core::phantom::{generate_case, generate_dataset, PhantomConfig, View};
use dcha_core::preprocess::{preprocess_case, PreprocessConfig};
use dcha_core::saliency::grad_cam;
use dcha_core::seeding::rng;
use dcha_core::train::{evaluate, mean_corr, train, TrainConfig};
use dcha_core::{Session, Tape, Tensor, Var, Window};

type Outcome = Result<String, String>;

fn random(shape: &[usize], seed: u64) -> Tensor {
    uniform(shape.to_vec(), 1.0, &mut rng(seed))
}

fn weighted_mean(tape: &mut Tape, x: Var) -> dcha_core::Result<Var> {
    let n = tape.value(x).numel();
    let w = tape.constant(Tensor::from_fn(tape.shape(x).to_vec(), |i| 0.3 + ((i * 37) % (n + 3)) as f64 / n as f64));
    let y = tape.mul(x, w)?;
    Ok(tape.mean(y))
}

// ---------------------------------------------------------------- gradients

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let opts = GradCheckOptions::default();
    type Case = (&'static str, Vec<Tensor>, Box<dyn Fn(&mut Tape, &[Var]) -> dcha_core::Result<Var>>);
    let mut cases: Vec<Case> = Vec::new();
    for seed in 0..3u64 {
        cases.push(("conv2d", vec![random(&[2, 9, 8], seed), random(&[3, 2, 3, 3], seed + 1), random(&[3], seed + 2)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 1)?;
            weighted_mean(t, y)
        })));
        cases.push(("conv2d_stem", vec![random(&[1, 10, 10], seed), random(&[2, 1, 7, 7], seed + 1), random(&[2], seed + 2)], Box::new(|t, v| {
            let y = t.conv2d(v[0], v[1], v[2], 2, 3)?;
            weighted_mean(t, y)
        })));
        cases.push(("softmax", vec![random(&[3, 5], seed).map(|x| 3.0 * x)], Box::new(|t, v| {
            let y = t.softmax_lastdim(v[0])?;
            weighted_mean(t, y)
        })));
        cases.push(("matmul", vec![random(&[4, 3], seed), random(&[3, 5], seed + 1)], Box::new(|t, v| {
            let y = t.matmul(v[0], v[1])?;
            weighted_mean(t, y)
        })));
        cases.push(("bmm_transpose", vec![random(&[2, 4, 3], seed), random(&[2, 3, 5], seed + 1)], Box::new(|t, v| {
            let y = t.bmm(v[0], v[1])?;
            let y = t.transpose_last2(y)?;
            weighted_mean(t, y)
        })));
        cases.push(("patches_square", vec![random(&[2, 5, 4], seed)], Box::new(|t, v| {
            let p = t.extract_patches(v[0], Window::Square(3))?;
            weighted_mean(t, p)
        })));
        cases.push(("patches_row_pack", vec![random(&[2, 5, 4], seed)], Box::new(|t, v| {
            let p = t.extract_patches(v[0], Window::Row)?;
            let q = t.pack(p, Window::Row, 5, 4)?;
            weighted_mean(t, q)
        })));
        cases.push(("pack_square", vec![random(&[20, 3], seed)], Box::new(|t, v| {
            let q = t.pack(v[0], Window::Square(3), 5, 4)?;
            weighted_mean(t, q)
        })));
        cases.push(("global_avg_pool", vec![random(&[3, 4, 5], seed)], Box::new(|t, v| {
            let y = t.global_avg_pool(v[0])?;
            weighted_mean(t, y)
        })));
        cases.push(("instance_norm", vec![random(&[3, 4, 5], seed), random(&[3], seed + 1), random(&[3], seed + 2)], Box::new(|t, v| {
            let y = t.instance_norm(v[0], v[1], v[2])?;
            weighted_mean(t, y)
        })));
        cases.push(("elementwise", vec![random(&[7], seed), random(&[7], seed + 3)], Box::new(|t, v| {
            let a = t.add(v[0], v[1])?;
            let b = t.sub(a, v[1])?;
            let c = t.mul(b, v[1])?;
            let d = t.relu(c);
            let e = t.sigmoid(d);
            let f = t.scale(e, -2.5);
            let g = t.add_scalar(f, 0.3);
            let h = t.neg(g);
            let h = t.reshape(h, vec![7, 1])?;
            let s = t.sum(h);
            let m = t.mean(v[0]);
            t.add(s, m)
        })));
        cases.push(("row_cosine", vec![random(&[3, 6], seed), random(&[3, 6], seed + 9)], Box::new(|t, v| {
            let y = t.row_cosine(v[0], v[1])?;
            weighted_mean(t, y)
        })));
        cases.push(("bce", vec![random(&[1], seed)], Box::new(move |t, v| {
            let p = t.sigmoid(v[0]);
            let p = t.reshape(p, Vec::<usize>::new())?;
            t.bce(p, (seed % 2) as f64)
        })));
    }
    let mut worst: (f64, &str) = (0.0, "");
    for (name, inputs, f) in &cases {
        let r = check_gradients(inputs, opts, f).map_err(|e| format!("{name}: {e}"))?;
        if r.max_rel_err > worst.0 {
            worst = (r.max_rel_err, name);
        }
    }

    // full toy model: both views, correlation and both cross-entropies
    let model = DchaModel::init(ModelConfig::toy(), 7).map_err(|e| e.to_string())?;
    let cfg = PhantomConfig {
        grid_n: 32,
        radius: 15.0,
        image_size: 32,
        lesion_radius_range: (2.0, 3.0),
        ..Default::default()
    };
    let case = generate_case(&cfg, 0, true).map_err(|e| e.to_string())?;
    let paths: Vec<String> = model.params.iter().map(|(k, _)| k.clone()).collect();
    let mut inputs: Vec<Tensor> = model.params.iter().map(|(_, v)| v.clone()).collect();
    inputs.push(model.input(&case.img_cc));
    inputs.push(model.input(&case.img_mlo));
    let model_opts = GradCheckOptions {
        max_entries_per_input: Some(6),
        ..opts
    };
    let np = paths.len();
    let r = check_gradients(&inputs, model_opts, |tape, vars| {
        let bindings = paths.iter().cloned().zip(vars[..np].iter().copied());
        let mut s = Session::from_bindings(std::mem::take(tape), bindings);
        let out = model_forward(&mut s, &model.config, vars[np], vars[np + 1])
            .and_then(|fp| case_loss(&mut s, &model.config, &fp, 1));
        *tape = s.into_tape();
        Ok(out?.0)
    })
    .map_err(|e| format!("toy model: {e}"))?;
    if r.max_rel_err > worst.0 {
        worst = (r.max_rel_err, "toy model");
    }
    let secs = start.elapsed().as_secs_f64();
    let detail = format!(
        "max rel err {:.2e} ({}), {} op checks + toy model ({} entries, {} across a ReLU kink skipped), {secs:.1}s",
        worst.0,
        worst.1,
        cases.len(),
        r.checked,
        r.skipped
    );
    let coverage = r.checked as f64 / (r.checked + r.skipped) as f64;
    if worst.0 < 1e-3 && coverage >= 0.75 && secs < 120.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- attention

fn projection(tape: &mut Tape, c: usize, seed: u64) -> Projection {
    Projection {
        weight: tape.constant(random(&[c, c, 1, 1], seed)),
        bias: tape.constant(random(&[c], seed + 1)),
    }
}

fn local_out(x: &Tensor, k: usize, seed: u64) -> Tensor {
    let mut tape = Tape::new();
    let c = x.shape()[0];
    let p = LocalRelationParams {
        query: projection(&mut tape, c, seed),
        key: projection(&mut tape, c, seed + 2),
        k,
    };
    let f = tape.constant(x.clone());
    let out = local_relation_forward(&mut tape, f, &p).expect("local block");
    tape.value(out).clone()
}

fn nonlocal_out(x: &Tensor, seed: u64) -> Tensor {
    let mut tape = Tape::new();
    let c = x.shape()[0];
    let p = NonLocalAttentionParams {
        query: projection(&mut tape, c, seed),
        key: projection(&mut tape, c, seed + 2),
    };
    let f = tape.constant(x.clone());
    let out = nonlocal_attention_forward(&mut tape, f, &p).expect("non-local block");
    tape.value(out).clone()
}

fn attention_invariants() -> Outcome {
    let trials = 100u64;
    for t in 0..trials {
        let (c, h, w) = (1 + t as usize % 3, 3 + t as usize % 5, 4 + (t as usize * 7) % 5);
        let x = random(&[c, h, w], t).map(|v| 4.0 * v);

        let doubled = local_out(&x, 1, t + 100);
        if doubled.data().iter().zip(x.data()).any(|(a, b)| *a != 2.0 * b) {
            return Err(format!("k=1 output differs from 2F (trial {t})"));
        }

        let half = 1 + t as usize % 2;
        let (pr, pc) = ((t as usize * 5) % h, (t as usize * 3) % w);
        let mut y = x.clone();
        for ch in 0..c {
            y.set(&[ch, pr, pc], x.at(&[ch, pr, pc]) - 1.5);
        }
        let (a, b) = (local_out(&x, 2 * half + 1, t + 200), local_out(&y, 2 * half + 1, t + 200));
        let mut changed_inside = false;
        for ch in 0..c {
            for r in 0..h {
                for col in 0..w {
                    let inside = r.abs_diff(pr) <= half && col.abs_diff(pc) <= half;
                    let same = a.at(&[ch, r, col]) == b.at(&[ch, r, col]);
                    if !inside && !same {
                        return Err(format!("local block k={} reached ({r},{col}) from ({pr},{pc})", 2 * half + 1));
                    }
                    changed_inside |= inside && !same;
                }
            }
        }
        if !changed_inside {
            return Err(format!("local block ignored a perturbation (trial {t})"));
        }

        let row = (t as usize * 11) % h;
        let mut z = x.clone();
        for ch in 0..c {
            for col in 0..w {
                z.set(&[ch, row, col], 0.5 - x.at(&[ch, row, col]));
            }
        }
        let (a, b) = (nonlocal_out(&x, t + 300), nonlocal_out(&z, t + 300));
        for ch in 0..c {
            for r in (0..h).filter(|&r| r != row) {
                for col in 0..w {
                    if a.at(&[ch, r, col]) != b.at(&[ch, r, col]) {
                        return Err(format!("non-local row {row} leaked into row {r}"));
                    }
                }
            }
        }

        // a rotation composed with a swap yields varied permutations
        let shift = 1 + t as usize % (w - 1);
        let perm: Vec<usize> = (0..w)
            .map(|j| (j + shift) % w)
            .map(|j| if j == 0 { 1 } else if j == 1 { 0 } else { j })
            .collect();
        let permute = |src: &Tensor| {
            let mut out = src.clone();
            for ch in 0..c {
                for r in 0..h {
                    for (dst, &s) in perm.iter().enumerate() {
                        out.set(&[ch, r, dst], src.at(&[ch, r, s]));
                    }
                }
            }
            out
        };
        let lhs = permute(&nonlocal_out(&x, t + 400));
        let rhs = nonlocal_out(&permute(&x), t + 400);
        let err = lhs.data().iter().zip(rhs.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        if err > 1e-9 {
            return Err(format!("column permutation error {err:.2e} (trial {t})"));
        }
    }
    Ok(format!("{trials} random maps: k=1 doubling, locality radius, row isolation, permutation equivariance"))
}

// ---------------------------------------------------------------- correlation

fn corr(a: &Tensor, b: &Tensor) -> f64 {
    let mut t = Tape::new();
    let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
    let l = dual_view_corr_loss(&mut t, x, y).expect("corr loss");
    t.value(l).item()
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    sxy / (sxx.sqrt() * syy.sqrt() + 1e-8)
}

fn map_row(m: &Tensor, i: usize) -> Vec<f64> {
    let (c, w) = (m.shape()[0], m.shape()[2]);
    (0..c).flat_map(|ch| (0..w).map(move |col| (ch, col))).map(|(ch, col)| m.at(&[ch, i, col])).collect()
}

fn correlation_loss() -> Outcome {
    let mut worst_oracle: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    let mut worst_self: f64 = 0.0;
    for t in 0..200u64 {
        let (c, h, w) = (1 + t as usize % 4, 1 + t as usize % 6, 2 + t as usize % 5);
        let a = random(&[c, h, w], t).map(|v| 5.0 * v);
        let b = random(&[c, h, w], t + 1000).map(|v| 5.0 * v);
        let ab = corr(&a, &b);
        if !(-1.0..=1.0).contains(&ab) {
            return Err(format!("value {ab} outside [-1, 1]"));
        }
        if ab != corr(&b, &a) {
            return Err(format!("asymmetric on trial {t}"));
        }
        let oracle = -(0..h).map(|i| pearson(&map_row(&a, i), &map_row(&b, i))).sum::<f64>() / h as f64;
        worst_oracle = worst_oracle.max((ab - oracle).abs());
        worst_self = worst_self.max((corr(&a, &a) + 1.0).abs());
        let mut a2 = a.clone();
        for (idx, v) in a2.data_mut().iter_mut().enumerate() {
            let r = (idx / w) % h;
            *v = *v * (0.2 + 1.7 * r as f64) + (r as f64 - 2.0) * 3.0;
        }
        worst_affine = worst_affine.max((corr(&a2, &b) - ab).abs());
    }
    let detail = format!("oracle {worst_oracle:.1e}, affine {worst_affine:.1e}, self {worst_self:.1e} over 200 maps");
    if worst_oracle <= 1e-12 && worst_affine <= 1e-6 && worst_self <= 1e-6 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- auc

fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn auc_oracle() -> Outcome {
    let mut tied = 0;
    for t in 0..1000u64 {
        let n = 2 + (t as usize * 7) % 60;
        let u = random(&[2 * n], t);
        // coarse scores every other instance so ties are common
        let levels = if t % 2 == 0 { 5.0 } else { 1e6 };
        let scores: Vec<f64> = u.data()[..n].iter().map(|v| (v * levels).round()).collect();
        let mut labels: Vec<u8> = u.data()[n..].iter().map(|v| u8::from(*v > 0.0)).collect();
        labels[0] = 1;
        labels[1] = 0;
        let got = compute_auc(&scores, &labels).map_err(|e| e.to_string())?;
        let want = brute_auc(&scores, &labels);
        if got != want {
            return Err(format!("instance {t}: {got} vs brute force {want}"));
        }
        let mut s = scores.clone();
        s.sort_by(f64::total_cmp);
        tied += usize::from(s.windows(2).any(|p| p[0] == p[1]));
    }
    Ok(format!("1000 instances exact, {tied} with tied scores"))
}

// ---------------------------------------------------------------- phantom

fn phantom_geometry() -> Outcome {
    let aligned = PhantomConfig {
        misalign_shift_max: 0,
        seed: 77,
        ..Default::default()
    };
    let mut worst_mass: f64 = 0.0;
    let mut worst_rows = 0usize;
    for i in 0..12 {
        let case = generate_case(&aligned, i, i % 2 == 0).map_err(|e| e.to_string())?;
        let (a, b) = (case.img_cc.row_sums(), case.img_mlo.row_sums());
        for (x, y) in a.iter().zip(&b) {
            let scale = x.abs().max(y.abs());
            if scale > 0.0 {
                worst_mass = worst_mass.max((x - y).abs() / scale);
            }
        }
        if let (Some(p), Some(q)) = (case.bbox_cc, case.bbox_mlo) {
            worst_rows = worst_rows.max(p.y0.abs_diff(q.y0)).max(p.y1.abs_diff(q.y1));
        }
    }
    let shifted = PhantomConfig {
        misalign_shift_max: 4,
        ..aligned.clone()
    };
    let mut malignant = 0;
    for case in generate_dataset(&shifted, 20).map_err(|e| e.to_string())? {
        if let (Some(p), Some(q)) = (case.bbox_cc, case.bbox_mlo) {
            malignant += 1;
            worst_rows = worst_rows.max(p.y0.abs_diff(q.y0)).max(p.y1.abs_diff(q.y1));
        }
    }
    let dirs = [tempfile::tempdir().map_err(|e| e.to_string())?, tempfile::tempdir().map_err(|e| e.to_string())?];
    for d in &dirs {
        let cases = generate_dataset(&shifted, 10).map_err(|e| e.to_string())?;
        write_dataset(&cases, d.path()).map_err(|e| e.to_string())?;
    }
    let mut names: Vec<_> = fs::read_dir(dirs[0].path())
        .map_err(|e| e.to_string())?
        .map(|e| e.expect("entry").file_name())
        .collect();
    names.sort();
    for name in &names {
        let x = fs::read(dirs[0].path().join(name)).map_err(|e| e.to_string())?;
        let y = fs::read(dirs[1].path().join(name)).map_err(|e| e.to_string())?;
        if x != y {
            return Err(format!("{} differs between generations", name.to_string_lossy()));
        }
    }
    let detail = format!(
        "row mass rel err {worst_mass:.1e}, lesion rows within {worst_rows} px ({malignant} shifted malignant cases), {} files identical",
        names.len()
    );
    if worst_mass <= 1e-6 && worst_rows <= 1 && malignant > 0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- experiment

struct Run {
    variant: &'static str,
    seed: u64,
    auc: f64,
    corr_aligned: f64,
    secs: f64,
    hits: usize,
    probed: usize,
}

fn phantoms(seed: u64, n: usize, shift: usize, pre: &PreprocessConfig) -> Vec<DualViewCase> {
    let cfg = PhantomConfig {
        misalign_shift_max: shift,
        seed,
        ..Default::default()
    };
    generate_dataset(&cfg, n)
        .expect("phantoms")
        .iter()
        .map(|c| preprocess_case(c, pre).expect("preprocess"))
        .collect()
}

fn experiment() -> Vec<Run> {
    let pre = PreprocessConfig {
        target_size: 64,
        ..Default::default()
    };
    let mut runs = Vec::new();
    for seed in 0..3u64 {
        let train_set = phantoms(1000 + seed, 200, 2, &pre);
        let test_set = phantoms(2000 + seed, 50, 2, &pre);
        let aligned_val = phantoms(3000 + seed, 50, 0, &pre);
        for variant in ["full", "corr_only", "baseline"] {
            let start = Instant::now();
            let config = ModelConfig::toy().with_variant(variant).expect("variant");
            let mut model = DchaModel::init(config, seed).expect("model");
            let cfg = TrainConfig {
                lr0: 1e-3,
                epochs: 12,
                seed,
                ..Default::default()
            };
            let trace = train(&mut model, &train_set, &cfg, &pre, None).expect("training");
            let report = evaluate(&model, &test_set, trace).expect("evaluation");
            let secs = start.elapsed().as_secs_f64();
            let corr_aligned = mean_corr(&model, &aligned_val).expect("corr");
            let (mut hits, mut probed) = (0, 0);
            if variant == "full" {
                for (case, pred) in test_set.iter().zip(&report.per_case) {
                    if case.label != 1 || pred.p_avg <= 0.5 {
                        continue;
                    }
                    for (view, bbox) in [(View::Cc, case.bbox_cc), (View::Mlo, case.bbox_mlo)] {
                        let map = grad_cam(&model, case, view).expect("grad-cam");
                        let b = bbox.expect("malignant cases carry boxes");
                        probed += 1;
                        hits += usize::from(b.contains(map.peak.0, map.peak.1));
                    }
                }
            }
            println!(
                "    {variant:<9} seed {seed}: test auc {:.4}, aligned L_corr {corr_aligned:.3}, {secs:.0}s",
                report.auc
            );
            runs.push(Run {
                variant,
                seed,
                auc: report.auc,
                corr_aligned,
                secs,
                hits,
                probed,
            });
        }
    }
    runs
}

fn mean_auc(runs: &[Run], variant: &str) -> f64 {
    let v: Vec<f64> = runs.iter().filter(|r| r.variant == variant).map(|r| r.auc).collect();
    v.iter().sum::<f64>() / v.len() as f64
}

fn synthetic_experiment(runs: &[Run]) -> Outcome {
    let full: Vec<&Run> = runs.iter().filter(|r| r.variant == "full").collect();
    let (m_full, m_corr, m_base) = (mean_auc(runs, "full"), mean_auc(runs, "corr_only"), mean_auc(runs, "baseline"));
    let min_full = full.iter().map(|r| r.auc).fold(f64::INFINITY, f64::min);
    let worst_corr = full.iter().map(|r| r.corr_aligned).fold(f64::NEG_INFINITY, f64::max);
    let slowest = runs.iter().map(|r| r.secs).fold(0.0, f64::max);
    let detail = format!(
        "a: min full auc {min_full:.4} (seeds {:?}); b: mean auc full {m_full:.4}, corr_only {m_corr:.4}, baseline {m_base:.4}; c: worst aligned L_corr {worst_corr:.3}; slowest run {slowest:.0}s",
        full.iter().map(|r| r.seed).collect::<Vec<_>>()
    );
    if min_full >= 0.85 && m_full >= m_corr && m_full >= m_base && worst_corr <= -0.5 && slowest <= 900.0 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn saliency_hits(runs: &[Run]) -> Outcome {
    let hits: usize = runs.iter().map(|r| r.hits).sum();
    let probed: usize = runs.iter().map(|r| r.probed).sum();
    let per_seed: Vec<String> = runs
        .iter()
        .filter(|r| r.variant == "full")
        .map(|r| format!("{}/{}", r.hits, r.probed))
        .collect();
    let rate = hits as f64 / probed.max(1) as f64;
    let detail = format!("peak inside lesion box in {hits}/{probed} views ({:.1}%), per seed {}", 100.0 * rate, per_seed.join(" "));
    if probed > 0 && rate >= 0.7 {
        Ok(detail)
    } else {
        Err(detail)
    }
}

// ---------------------------------------------------------------- cli

const SMOKE: &str = "\
phantom.grid_n = 32
phantom.image_size = 32
phantom.radius = 15
phantom.lesion_radius_min = 2
phantom.lesion_radius_max = 3
phantom.n_cases = 16
phantom.seed = 11
phantom.misalign_shift_max = 2
preprocess.target_size = 32
train.epochs = 2
train.lr0 = 1e-3
";

fn cli_pipeline(dir: &Path) -> Result<(), String> {
    let cfg = dir.join("run.cfg");
    let text = format!(
        "{SMOKE}paths.data_dir = {d}/data\npaths.checkpoint_dir = {d}/ckpt\npaths.report_dir = {d}/report\npaths.saliency_dir = {d}/sal\n",
        d = dir.display()
    );
    fs::write(&cfg, text).map_err(|e| e.to_string())?;
    for cmd in ["generate", "train", "eval", "saliency"] {
        let out = Command::new(env!("CARGO_BIN_EXE_dcha"))
            .args([cmd, "--config", cfg.to_str().expect("utf-8 path")])
            .output()
            .map_err(|e| e.to_string())?;
        if !out.status.success() {
            return Err(format!("{cmd} exited with {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr).trim()));
        }
    }
    Ok(())
}

fn pipeline_smoke() -> Outcome {
    let a = tempfile::tempdir().map_err(|e| e.to_string())?;
    let b = tempfile::tempdir().map_err(|e| e.to_string())?;
    cli_pipeline(a.path())?;
    cli_pipeline(b.path())?;
    let files = [
        "data/manifest.csv",
        "ckpt/last.ckpt",
        "ckpt/loss_trace.csv",
        "report/predictions.csv",
        "report/summary.txt",
        "sal/hits.csv",
    ];
    for f in files {
        let x = fs::read(a.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        let y = fs::read(b.path().join(f)).map_err(|e| format!("{f}: {e}"))?;
        if x != y {
            return Err(format!("{f} differs between runs"));
        }
    }
    Ok(format!("generate, train, eval, saliency exit 0; {} outputs byte-identical across two runs", files.len()))
}

fn main() -> ExitCode {
    // numeric arguments select criteria; everything else is ignored
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let wanted = |n: usize| only.is_empty() || only.contains(&n);
    let mut failed = 0;
    let mut report = |n: usize, name: &str, outcome: &dyn Fn() -> Outcome| {
        if !wanted(n) {
            return;
        }
        match outcome() {
            Ok(d) => println!("criterion {n} {name}: PASS ({d})"),
            Err(d) => {
                failed += 1;
                println!("criterion {n} {name}: FAIL ({d})");
            }
        }
    };
    report(1, "gradient suite", &gradient_suite);
    report(2, "attention invariants", &attention_invariants);
    report(3, "correlation loss", &correlation_loss);
    report(4, "auc oracle", &auc_oracle);
    report(5, "phantom geometry", &phantom_geometry);
    if wanted(6) || wanted(7) {
        println!("    training 3 seeds x {{full, corr_only, baseline}} on 200/50 phantoms");
        let runs = experiment();
        report(6, "synthetic experiment", &|| synthetic_experiment(&runs));
        report(7, "saliency", &|| saliency_hits(&runs));
    }
    report(8, "pipeline smoke", &pipeline_smoke);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    }
}
