//! Saliency evaluation metrics and dataset-level aggregation.
//!
//! Conventions, pinned once and tested against independent oracles:
//! - Threshold grid is `{i/255, i = 0..=255}`; predictions are quantized to
//!   8 bits first and binarized with a strict `>`.
//! - Degenerate ground truth: with an empty mask, the F score of a threshold
//!   is 1 when the binarized prediction is empty too, else 0; the E-measure
//!   uses the complement/identity fallback; the S-measure falls back to
//!   `1 − mean(p)` (empty) or `mean(p)` (full).
//! - Boundary accuracy bands use a square (8-connected) structuring element,
//!   radii evenly spaced from 1 px to 0.3 % of the diagonal.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use ndarray::ArrayD;

const EPS: f64 = f64::EPSILON;

fn to_2d<T: Scalar>(a: &ArrayD<T>, op: &'static str) -> Result<(usize, usize, Vec<f64>)> {
    let s = a.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[2] == 1 => (s[0], s[1]),
        _ => return Err(Error::dim(op, format!("expected [h,w], got {s:?}"))),
    };
    Ok((h, w, a.iter().map(|&v| v.to_f64()).collect()))
}

fn check_binary(g: &[f64], op: &'static str) -> Result<()> {
    if g.iter().any(|&v| v != 0.0 && v != 1.0) {
        return Err(Error::contract(op, "ground truth must be strictly binary"));
    }
    Ok(())
}

fn same_shape<T: Scalar>(p: &ArrayD<T>, g: &ArrayD<T>, op: &'static str) -> Result<()> {
    if p.shape() != g.shape() {
        return Err(Error::dim(
            op,
            format!("{:?} vs {:?}", p.shape(), g.shape()),
        ));
    }
    Ok(())
}

/// Mean absolute error.
pub fn mae<T: Scalar>(p: &ArrayD<T>, g: &ArrayD<T>) -> Result<f64> {
    same_shape(p, g, "mae")?;
    let (_, _, pv) = to_2d(p, "mae")?;
    let (_, _, gv) = to_2d(g, "mae")?;
    let mut acc = 0.0;
    for (&a, &b) in pv.iter().zip(gv.iter()) {
        acc += (a - b).abs();
    }
    Ok(acc / pv.len() as f64)
}

fn quantize(v: f64) -> usize {
    ((v * 255.0).round() as i64).clamp(0, 255) as usize
}

/// Maximum F-measure over the 256-threshold grid with β² = 0.3.
pub fn f_max<T: Scalar>(p: &ArrayD<T>, g: &ArrayD<T>) -> Result<f64> {
    same_shape(p, g, "f_max")?;
    let (_, _, pv) = to_2d(p, "f_max")?;
    let (_, _, gv) = to_2d(g, "f_max")?;
    check_binary(&gv, "f_max")?;
    let n_fg: usize = gv.iter().filter(|&&v| v == 1.0).count();
    // Joint histogram of (quantized level, ground truth).
    let mut pos = [0usize; 256];
    let mut neg = [0usize; 256];
    for (&pvv, &gvv) in pv.iter().zip(gv.iter()) {
        let q = quantize(pvv);
        if gvv == 1.0 {
            pos[q] += 1;
        } else {
            neg[q] += 1;
        }
    }
    let beta2 = 0.3;
    let mut best: f64 = 0.0;
    // Predicted-positive at threshold i: quantized level strictly above i.
    let mut tp: usize = 0;
    let mut fp: usize = 0;
    for i in (0..256usize).rev() {
        // Entering threshold i means levels i+1..=255 are positive.
        let f = if n_fg == 0 {
            // Degenerate: score 1 exactly when the prediction is empty too.
            if tp + fp == 0 {
                1.0
            } else {
                0.0
            }
        } else {
            let (tpf, fpf) = (tp as f64, fp as f64);
            let precision = if tp + fp == 0 { 0.0 } else { tpf / (tpf + fpf) };
            let recall = tpf / n_fg as f64;
            let denom = beta2 * precision + recall;
            if denom == 0.0 {
                0.0
            } else {
                (1.0 + beta2) * precision * recall / denom
            }
        };
        best = best.max(f);
        tp += pos[i];
        fp += neg[i];
    }
    Ok(best)
}

/// Enhanced-alignment measure, maximized over the threshold grid.
pub fn e_measure<T: Scalar>(p: &ArrayD<T>, g: &ArrayD<T>) -> Result<f64> {
    same_shape(p, g, "e_measure")?;
    let (_, _, pv) = to_2d(p, "e_measure")?;
    let (_, _, gv) = to_2d(g, "e_measure")?;
    check_binary(&gv, "e_measure")?;
    let n = gv.len() as f64;
    let n_fg: usize = gv.iter().filter(|&&v| v == 1.0).count();
    let mut pos = [0usize; 256];
    let mut neg = [0usize; 256];
    for (&pvv, &gvv) in pv.iter().zip(gv.iter()) {
        let q = quantize(pvv);
        if gvv == 1.0 {
            pos[q] += 1;
        } else {
            neg[q] += 1;
        }
    }
    let mu_g = n_fg as f64 / n;
    let mut best: f64 = 0.0;
    let mut tp = 0usize; // foreground pixels predicted positive
    let mut fp = 0usize;
    for i in (0..256usize).rev() {
        let score = if n_fg == 0 {
            // All-background truth: enhanced matrix is 1 − FM.
            (n - (tp + fp) as f64) / n
        } else if n_fg == gv.len() {
            (tp + fp) as f64 / n
        } else {
            let mu_f = (tp + fp) as f64 / n;
            let mut sum = 0.0;
            // Four (prediction, truth) combinations with known counts.
            let counts = [
                (tp as f64, 1.0, 1.0),
                (fp as f64, 1.0, 0.0),
                (n_fg as f64 - tp as f64, 0.0, 1.0),
                (n - n_fg as f64 - fp as f64, 0.0, 0.0),
            ];
            for (count, fmv, gvv) in counts {
                if count == 0.0 {
                    continue;
                }
                let phi_f = fmv - mu_f;
                let phi_g = gvv - mu_g;
                let align = 2.0 * phi_f * phi_g / (phi_f * phi_f + phi_g * phi_g + EPS);
                sum += count * (align + 1.0) * (align + 1.0) / 4.0;
            }
            sum / n
        };
        best = best.max(score);
        tp += pos[i];
        fp += neg[i];
    }
    Ok(best)
}

/// Structure measure (object and four-way region similarity, α = 0.5).
pub fn s_measure<T: Scalar>(p: &ArrayD<T>, g: &ArrayD<T>) -> Result<f64> {
    same_shape(p, g, "s_measure")?;
    let (h, w, pv) = to_2d(p, "s_measure")?;
    let (_, _, gv) = to_2d(g, "s_measure")?;
    check_binary(&gv, "s_measure")?;
    let n = pv.len() as f64;
    let mean_g: f64 = gv.iter().sum::<f64>() / n;
    let mean_p: f64 = pv.iter().sum::<f64>() / n;
    if mean_g == 0.0 {
        return Ok(1.0 - mean_p);
    }
    if mean_g == 1.0 {
        return Ok(mean_p);
    }
    let alpha = 0.5;
    let q = alpha * s_object(&pv, &gv) + (1.0 - alpha) * s_region(&pv, &gv, h, w);
    Ok(q.max(0.0))
}

fn region_score(values: &[f64]) -> (f64, f64, usize) {
    let n = values.len();
    if n == 0 {
        return (0.0, 0.0, 0);
    }
    let mean = values.iter().sum::<f64>() / n as f64;
    let var = if n > 1 {
        values.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (n as f64 - 1.0)
    } else {
        0.0
    };
    (mean, var.sqrt(), n)
}

fn s_object(p: &[f64], g: &[f64]) -> f64 {
    let fg: Vec<f64> = p
        .iter()
        .zip(g.iter())
        .filter(|(_, &gv)| gv == 1.0)
        .map(|(&pv, _)| pv)
        .collect();
    let bg: Vec<f64> = p
        .iter()
        .zip(g.iter())
        .filter(|(_, &gv)| gv == 0.0)
        .map(|(&pv, _)| 1.0 - pv)
        .collect();
    let object = |vals: &[f64]| -> f64 {
        let (x, sigma, n) = region_score(vals);
        if n == 0 {
            return 0.0;
        }
        2.0 * x / (x * x + 1.0 + sigma + EPS)
    };
    let u = g.iter().sum::<f64>() / g.len() as f64;
    u * object(&fg) + (1.0 - u) * object(&bg)
}

fn s_region(p: &[f64], g: &[f64], h: usize, w: usize) -> f64 {
    // Centroid of the mask, 1-based as in the reference construction.
    let total: f64 = g.iter().sum();
    let (cx, cy) = if total == 0.0 {
        ((w as f64 / 2.0).round() as usize, (h as f64 / 2.0).round() as usize)
    } else {
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..h {
            for x in 0..w {
                let v = g[y * w + x];
                sx += v * (x as f64 + 1.0);
                sy += v * (y as f64 + 1.0);
            }
        }
        ((sx / total).round() as usize, (sy / total).round() as usize)
    };
    let cx = cx.clamp(1, w);
    let cy = cy.clamp(1, h);
    let quad = |x0: usize, x1: usize, y0: usize, y1: usize| -> (Vec<f64>, Vec<f64>) {
        let mut ps = Vec::new();
        let mut gs = Vec::new();
        for y in y0..y1 {
            for x in x0..x1 {
                ps.push(p[y * w + x]);
                gs.push(g[y * w + x]);
            }
        }
        (ps, gs)
    };
    let parts = [
        quad(0, cx, 0, cy),
        quad(cx, w, 0, cy),
        quad(0, cx, cy, h),
        quad(cx, w, cy, h),
    ];
    let n = (h * w) as f64;
    let mut q = 0.0;
    for (ps, gs) in parts {
        let weight = ps.len() as f64 / n;
        q += weight * ssim_block(&ps, &gs);
    }
    q
}

fn ssim_block(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len();
    if n == 0 {
        return 1.0;
    }
    let nf = n as f64;
    let x = p.iter().sum::<f64>() / nf;
    let y = g.iter().sum::<f64>() / nf;
    let denom = nf - 1.0 + EPS;
    let mut sx2 = 0.0;
    let mut sy2 = 0.0;
    let mut sxy = 0.0;
    for (&pv, &gv) in p.iter().zip(g.iter()) {
        sx2 += (pv - x) * (pv - x);
        sy2 += (gv - y) * (gv - y);
        sxy += (pv - x) * (gv - y);
    }
    sx2 /= denom;
    sy2 /= denom;
    sxy /= denom;
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn binary_dilate_erode(g: &[f64], h: usize, w: usize, r: usize) -> (Vec<u8>, Vec<u8>) {
    let bin: Vec<u8> = g.iter().map(|&v| if v == 1.0 { 1 } else { 0 }).collect();
    let mut d = bin.clone();
    let mut e = bin;
    for _ in 0..r {
        let dc = d.clone();
        let ec = e.clone();
        for y in 0..h {
            for x in 0..w {
                let mut any = dc[y * w + x] == 1;
                let mut all = ec[y * w + x] == 1;
                for dy in -1i64..=1 {
                    for dx in -1i64..=1 {
                        let (ny, nx) = (y as i64 + dy, x as i64 + dx);
                        if ny < 0 || ny >= h as i64 || nx < 0 || nx >= w as i64 {
                            all = false;
                            continue;
                        }
                        let v = (ny as usize) * w + nx as usize;
                        any |= dc[v] == 1;
                        all &= ec[v] == 1;
                    }
                }
                d[y * w + x] = any as u8;
                e[y * w + x] = all as u8;
            }
        }
    }
    (d, e)
}

/// Radii of the boundary bands: five values evenly spaced from 1 px to 0.3 %
/// of the diagonal, each at least 1 px.
pub fn mba_radii(h: usize, w: usize) -> [usize; 5] {
    let diag = ((h * h + w * w) as f64).sqrt();
    let hi = (0.003 * diag).max(1.0);
    let mut out = [1usize; 5];
    for (i, slot) in out.iter_mut().enumerate() {
        let v = 1.0 + (hi - 1.0) * i as f64 / 4.0;
        *slot = (v.round() as usize).max(1);
    }
    out
}

/// Mean boundary accuracy: pixel accuracy of the binarized prediction inside
/// boundary bands of several radii, averaged over radii.
pub fn mba<T: Scalar>(p: &ArrayD<T>, g: &ArrayD<T>) -> Result<f64> {
    same_shape(p, g, "mba")?;
    let (h, w, pv) = to_2d(p, "mba")?;
    let (_, _, gv) = to_2d(g, "mba")?;
    check_binary(&gv, "mba")?;
    let pb: Vec<u8> = pv.iter().map(|&v| (v > 0.5) as u8).collect();
    let gb: Vec<u8> = gv.iter().map(|&v| (v == 1.0) as u8).collect();
    let mut acc_sum = 0.0;
    for r in mba_radii(h, w) {
        let (d, e) = binary_dilate_erode(&gv, h, w, r);
        let mut band_total = 0usize;
        let mut band_correct = 0usize;
        for i in 0..gv.len() {
            if d[i] > e[i] {
                band_total += 1;
                band_correct += (pb[i] == gb[i]) as usize;
            }
        }
        if band_total == 0 {
            // Uniform truth with no boundary: exact match counts as perfect,
            // otherwise fall back to full-frame accuracy.
            if pb == gb {
                acc_sum += 1.0;
            } else {
                let correct = pb.iter().zip(gb.iter()).filter(|(a, b)| a == b).count();
                acc_sum += correct as f64 / gv.len() as f64;
            }
        } else {
            acc_sum += band_correct as f64 / band_total as f64;
        }
    }
    Ok(acc_sum / 5.0)
}

/// All five metrics of one prediction/truth pair.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub name: String,
    pub mae: f64,
    pub f_max: f64,
    pub e_measure: f64,
    pub s_measure: f64,
    pub mba: f64,
}

pub fn all_metrics<T: Scalar>(name: &str, p: &ArrayD<T>, g: &ArrayD<T>) -> Result<MetricRow> {
    Ok(MetricRow {
        name: name.to_string(),
        mae: mae(p, g)?,
        f_max: f_max(p, g)?,
        e_measure: e_measure(p, g)?,
        s_measure: s_measure(p, g)?,
        mba: mba(p, g)?,
    })
}

/// Dataset-level evaluation report.
#[derive(Clone, Debug)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Unmatched or unreadable files, by name and reason.
    pub skipped: Vec<(String, String)>,
}

impl MetricReport {
    pub fn means(&self) -> Option<MetricRow> {
        if self.rows.is_empty() {
            return None;
        }
        let n = self.rows.len() as f64;
        Some(MetricRow {
            name: "mean".into(),
            mae: self.rows.iter().map(|r| r.mae).sum::<f64>() / n,
            f_max: self.rows.iter().map(|r| r.f_max).sum::<f64>() / n,
            e_measure: self.rows.iter().map(|r| r.e_measure).sum::<f64>() / n,
            s_measure: self.rows.iter().map(|r| r.s_measure).sum::<f64>() / n,
            mba: self.rows.iter().map(|r| r.mba).sum::<f64>() / n,
        })
    }

    /// CSV with one row per image plus the mean row:
    /// `filename,mae,fmax,em,sm,mba`.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("filename,mae,fmax,em,sm,mba\n");
        let fmt = |r: &MetricRow| {
            format!(
                "{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
                r.name, r.mae, r.f_max, r.e_measure, r.s_measure, r.mba
            )
        };
        for r in &self.rows {
            out.push_str(&fmt(r));
        }
        if let Some(m) = self.means() {
            out.push_str(&fmt(&m));
        }
        out
    }
}
