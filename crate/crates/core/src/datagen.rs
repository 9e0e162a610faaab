//! Deterministic synthetic image/mask pairs, augmentation, the input
//! pyramid, dataset statistics and a near-duplicate filter.
//!
//! Shapes are star-shaped regions defined by a perturbed polar radius ring:
//! an ellipse or star polygon base plus seeded multi-octave value noise whose
//! amplitude scales with the requested boundary complexity. Everything is a
//! pure function of `(seed, config)`.

use crate::error::{Error, Result};
use crate::losses::edge_ground_truth;
use crate::scalar::Scalar;
use crate::tape::resize_bilinear_array;
use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

/// Ring resolution of the polar contour.
const RING: usize = 256;

#[derive(Clone, Debug)]
pub struct SampleMeta {
    pub n_objects: usize,
    pub boundary_complexity: f64,
}

/// One synthetic training example.
#[derive(Clone, Debug)]
pub struct Sample<T: Scalar> {
    /// `[side, side, 3]` in `[0,1]`.
    pub image: ArrayD<T>,
    /// `[side, side]`, strictly binary.
    pub mask: ArrayD<T>,
    pub seed: u64,
    pub meta: SampleMeta,
}

/// Stable seed mixing for derived streams.
pub fn derive_seed(base: u64, a: u64, b: u64) -> u64 {
    let mut z = base
        .wrapping_add(a.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(b.wrapping_mul(0xBF58_476D_1CE4_E5B9));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Smooth periodic value noise over ring positions.
fn ring_noise(rng: &mut ChaCha12Rng, points: usize, amplitude: f64, out: &mut [f64]) {
    let ctrl: Vec<f64> = (0..points)
        .map(|_| rng.gen_range(-1.0..1.0) * amplitude)
        .collect();
    let n = out.len();
    for (i, slot) in out.iter_mut().enumerate() {
        let pos = i as f64 * points as f64 / n as f64;
        let i0 = pos.floor() as usize % points;
        let i1 = (i0 + 1) % points;
        let t = pos - pos.floor();
        let s = 0.5 - 0.5 * (std::f64::consts::PI * t).cos(); // cosine ease
        *slot += ctrl[i0] * (1.0 - s) + ctrl[i1] * s;
    }
}

struct Contour {
    cx: f64,
    cy: f64,
    rot: f64,
    radii: Vec<f64>,
}

impl Contour {
    fn contains(&self, px: f64, py: f64) -> bool {
        let dx = px - self.cx;
        let dy = py - self.cy;
        let dist = (dx * dx + dy * dy).sqrt();
        let theta = dy.atan2(dx) - self.rot;
        let two_pi = 2.0 * std::f64::consts::PI;
        let pos = (theta.rem_euclid(two_pi)) / two_pi * RING as f64;
        let i0 = pos.floor() as usize % RING;
        let i1 = (i0 + 1) % RING;
        let t = pos - pos.floor();
        let r = self.radii[i0] * (1.0 - t) + self.radii[i1] * t;
        dist <= r
    }
}

fn ellipse_ring(a: f64, b: f64) -> Vec<f64> {
    (0..RING)
        .map(|i| {
            let th = i as f64 / RING as f64 * 2.0 * std::f64::consts::PI;
            let (s, c) = th.sin_cos();
            a * b / ((b * c).powi(2) + (a * s).powi(2)).sqrt()
        })
        .collect()
}

fn polygon_ring(rng: &mut ChaCha12Rng, r_base: f64) -> Vec<f64> {
    let verts = rng.gen_range(3..=8usize);
    let vr: Vec<f64> = (0..verts).map(|_| r_base * rng.gen_range(0.55..1.0)).collect();
    (0..RING)
        .map(|i| {
            let pos = i as f64 * verts as f64 / RING as f64;
            let i0 = pos.floor() as usize % verts;
            let i1 = (i0 + 1) % verts;
            let t = pos - pos.floor();
            vr[i0] * (1.0 - t) + vr[i1] * t
        })
        .collect()
}

/// Analytic perimeter of an ellipse (Ramanujan's approximation).
pub fn ellipse_perimeter(a: f64, b: f64) -> f64 {
    std::f64::consts::PI * (3.0 * (a + b) - ((3.0 * a + b) * (a + 3.0 * b)).sqrt())
}

/// Boundary length estimate from a binary mask: crack counting with the
/// Cauchy–Crofton correction `π/4`, asymptotically unbiased on smooth shapes.
pub fn boundary_length_estimate<T: Scalar>(mask: &ArrayD<T>) -> f64 {
    let s = mask.shape();
    let (h, w) = (s[0], s[1]);
    let m = mask.as_slice().expect("contiguous");
    let at = |y: usize, x: usize| m[y * w + x] != T::zero();
    let mut cracks = 0usize;
    for y in 0..h {
        for x in 0..w {
            let v = at(y, x);
            if x + 1 < w && v != at(y, x + 1) {
                cracks += 1;
            }
            if y + 1 < h && v != at(y + 1, x) {
                cracks += 1;
            }
        }
    }
    std::f64::consts::FRAC_PI_4 * cracks as f64
}

/// Smooth 2-d value noise in `[-1,1]`, `grid`-cell control lattice.
fn field_noise(rng: &mut ChaCha12Rng, side: usize, grid: usize) -> Vec<f64> {
    let g = grid + 1;
    let ctrl: Vec<f64> = (0..g * g).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut out = vec![0.0; side * side];
    for y in 0..side {
        let fy = y as f64 / side as f64 * grid as f64;
        let y0 = fy.floor() as usize;
        let ty = fy - y0 as f64;
        for x in 0..side {
            let fx = x as f64 / side as f64 * grid as f64;
            let x0 = fx.floor() as usize;
            let tx = fx - x0 as f64;
            let v00 = ctrl[y0 * g + x0];
            let v01 = ctrl[y0 * g + x0 + 1];
            let v10 = ctrl[(y0 + 1) * g + x0];
            let v11 = ctrl[(y0 + 1) * g + x0 + 1];
            out[y * side + x] = v00 * (1.0 - ty) * (1.0 - tx)
                + v01 * (1.0 - ty) * tx
                + v10 * ty * (1.0 - tx)
                + v11 * ty * tx;
        }
    }
    out
}

/// Generate one sample. `complexity` in `[0,1]` scales boundary roughness; at
/// exactly zero the mask is a single clean ellipse (so its boundary length
/// has a closed form).
pub fn generate_sample<T: Scalar>(seed: u64, hr_side: usize, complexity: f64) -> Result<Sample<T>> {
    if hr_side < 16 || !hr_side.is_power_of_two() {
        return Err(Error::Config(format!(
            "hr side {hr_side} must be a power of two >= 16"
        )));
    }
    if !(0.0..=1.0).contains(&complexity) {
        return Err(Error::Config(format!(
            "complexity {complexity} outside [0,1]"
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xA11CE, hr_side as u64));
    let side = hr_side as f64;
    let n_objects = if complexity == 0.0 {
        1
    } else {
        rng.gen_range(1..=3usize)
    };
    let mut contours = Vec::with_capacity(n_objects);
    for _ in 0..n_objects {
        let cx = rng.gen_range(0.3..0.7) * side;
        let cy = rng.gen_range(0.3..0.7) * side;
        let r_base = rng.gen_range(0.12..0.28) * side;
        let use_polygon = complexity > 0.0 && rng.gen_bool(0.4);
        let mut radii = if use_polygon {
            polygon_ring(&mut rng, r_base)
        } else {
            // Aspect capped so the crack-count estimate stays close to the
            // analytic perimeter.
            let aspect = rng.gen_range(1.0..2.5);
            let b = (r_base / aspect.sqrt()).max(4.0);
            let a = r_base * aspect.sqrt();
            ellipse_ring(a, b)
        };
        if complexity > 0.0 {
            let mean_r = radii.iter().sum::<f64>() / RING as f64;
            for octave in 0..4 {
                let points = 8usize << octave;
                let amp = complexity * mean_r * 0.4 * 0.5f64.powi(octave);
                ring_noise(&mut rng, points, amp, &mut radii);
            }
        }
        for r in &mut radii {
            *r = r.max(2.0);
        }
        let rot = rng.gen_range(0.0..std::f64::consts::PI * 2.0);
        contours.push(Contour { cx, cy, rot, radii });
    }

    let mut mask = vec![T::zero(); hr_side * hr_side];
    for y in 0..hr_side {
        for x in 0..hr_side {
            let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
            if contours.iter().any(|c| c.contains(px, py)) {
                mask[y * hr_side + x] = T::one();
            }
        }
    }

    // Textured rendering: distinct base colors plus smooth and fine noise.
    let fg: [f64; 3] = [
        rng.gen_range(0.55..0.95),
        rng.gen_range(0.35..0.85),
        rng.gen_range(0.25..0.75),
    ];
    let bg: [f64; 3] = [
        rng.gen_range(0.05..0.45),
        rng.gen_range(0.1..0.5),
        rng.gen_range(0.2..0.6),
    ];
    let coarse = field_noise(&mut rng, hr_side, 8);
    let fine = field_noise(&mut rng, hr_side, 32);
    let mut image = vec![T::zero(); hr_side * hr_side * 3];
    for i in 0..hr_side * hr_side {
        let m = mask[i] != T::zero();
        let tex = 0.12 * coarse[i] + 0.05 * fine[i] + 0.015 * rng.gen_range(-1.0..1.0);
        for c in 0..3 {
            let base = if m { fg[c] } else { bg[c] };
            image[i * 3 + c] = T::cast((base + tex).clamp(0.0, 1.0));
        }
    }
    Ok(Sample {
        image: ArrayD::from_shape_vec(IxDyn(&[hr_side, hr_side, 3]), image).unwrap(),
        mask: ArrayD::from_shape_vec(IxDyn(&[hr_side, hr_side]), mask).unwrap(),
        seed,
        meta: SampleMeta {
            n_objects,
            boundary_complexity: complexity,
        },
    })
}

/// Augmentation parameters; `flip`/`crop` can be forced for tests.
#[derive(Clone, Copy, Debug)]
pub struct AugmentOptions {
    pub flip_prob: f64,
    /// Crop side as a fraction of the image side; 1.0 disables cropping.
    pub crop_fraction: f64,
}

impl Default for AugmentOptions {
    fn default() -> Self {
        AugmentOptions {
            flip_prob: 0.5,
            crop_fraction: 0.875,
        }
    }
}

/// Deterministic core: horizontal flip then crop-and-resize-back.
pub fn apply_augment<T: Scalar>(
    sample: &Sample<T>,
    flip: bool,
    crop: Option<(usize, usize, usize)>,
) -> Sample<T> {
    let side = sample.mask.shape()[0];
    let mut image = sample.image.clone();
    let mut mask = sample.mask.clone();
    if flip {
        let (im, mk) = (image.as_slice().unwrap(), mask.as_slice().unwrap());
        let mut fi = im.to_vec();
        let mut fm = mk.to_vec();
        for y in 0..side {
            for x in 0..side {
                let sx = side - 1 - x;
                for c in 0..3 {
                    fi[(y * side + x) * 3 + c] = im[(y * side + sx) * 3 + c];
                }
                fm[y * side + x] = mk[y * side + sx];
            }
        }
        image = ArrayD::from_shape_vec(IxDyn(&[side, side, 3]), fi).unwrap();
        mask = ArrayD::from_shape_vec(IxDyn(&[side, side]), fm).unwrap();
    }
    if let Some((y0, x0, cs)) = crop {
        assert!(y0 + cs <= side && x0 + cs <= side, "crop outside image");
        let im = image.as_slice().unwrap();
        let mk = mask.as_slice().unwrap();
        let mut ci = Vec::with_capacity(cs * cs * 3);
        let mut cm = Vec::with_capacity(cs * cs);
        for y in 0..cs {
            for x in 0..cs {
                let src = ((y0 + y) * side + x0 + x) * 3;
                ci.extend_from_slice(&im[src..src + 3]);
                cm.push(mk[(y0 + y) * side + x0 + x]);
            }
        }
        let ci = ArrayD::from_shape_vec(IxDyn(&[1, cs, cs, 3]), ci).unwrap();
        let cm = ArrayD::from_shape_vec(IxDyn(&[1, cs, cs, 1]), cm).unwrap();
        let ri = resize_bilinear_array(&ci, side, side);
        let rm = resize_bilinear_array(&cm, side, side);
        image = ri
            .into_shape_with_order(IxDyn(&[side, side, 3]))
            .unwrap()
            .mapv(|v| v.max(T::zero()).min(T::one()));
        mask = rm
            .into_shape_with_order(IxDyn(&[side, side]))
            .unwrap()
            .mapv(|v| if v.to_f64() > 0.5 { T::one() } else { T::zero() });
    }
    Sample {
        image,
        mask,
        seed: sample.seed,
        meta: sample.meta.clone(),
    }
}

/// Seeded flip/crop augmentation.
pub fn augment<T: Scalar>(sample: &Sample<T>, seed: u64, opts: &AugmentOptions) -> Result<Sample<T>> {
    if !(opts.crop_fraction > 0.0 && opts.crop_fraction <= 1.0) {
        return Err(Error::Config(format!(
            "crop fraction {} outside (0, 1]",
            opts.crop_fraction
        )));
    }
    let mut rng = ChaCha12Rng::seed_from_u64(derive_seed(seed, 0xF11F, sample.seed));
    let flip = rng.gen_bool(opts.flip_prob.clamp(0.0, 1.0));
    let side = sample.mask.shape()[0];
    let crop = if opts.crop_fraction < 1.0 {
        let cs = ((side as f64 * opts.crop_fraction).round() as usize).clamp(1, side);
        let y0 = rng.gen_range(0..=side - cs);
        let x0 = rng.gen_range(0..=side - cs);
        Some((y0, x0, cs))
    } else {
        None
    };
    Ok(apply_augment(sample, flip, crop))
}

/// Bilinear pyramid of one image over a doubling scale chain ending at the
/// image's own side.
pub fn resize_pyramid<T: Scalar>(image: &ArrayD<T>, scales: &[usize]) -> Result<Vec<ArrayD<T>>> {
    if scales.is_empty() {
        return Err(Error::Config("empty scale chain".into()));
    }
    for pair in scales.windows(2) {
        if pair[1] != 2 * pair[0] {
            return Err(Error::Config(format!(
                "pyramid scales must double: {} then {}",
                pair[0], pair[1]
            )));
        }
    }
    let s = image.shape().to_vec();
    if s.len() != 3 || s[0] != *scales.last().unwrap() || s[1] != *scales.last().unwrap() {
        return Err(Error::Config(format!(
            "image {s:?} does not match top scale {}",
            scales.last().unwrap()
        )));
    }
    let batched = image
        .clone()
        .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
        .unwrap();
    Ok(scales
        .iter()
        .map(|&sc| {
            resize_bilinear_array(&batched, sc, sc)
                .into_shape_with_order(IxDyn(&[sc, sc, s[2]]))
                .unwrap()
                .mapv(|v| v.max(T::zero()).min(T::one()))
        })
        .collect())
}

/// Histogram with equal-width bins; the top edge is inclusive.
#[derive(Clone, Debug)]
pub struct Histogram {
    pub lo: f64,
    pub hi: f64,
    pub counts: Vec<usize>,
}

impl Histogram {
    fn build(values: &[f64], bins: usize) -> Histogram {
        let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut counts = vec![0usize; bins];
        let span = hi - lo;
        for &v in values {
            let b = if span == 0.0 {
                0
            } else {
                (((v - lo) / span * bins as f64) as usize).min(bins - 1)
            };
            counts[b] += 1;
        }
        Histogram { lo, hi, counts }
    }

    pub fn total(&self) -> usize {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self, label: &str) -> String {
        let mut out = format!("{label}_lo,{label}_hi,count\n");
        let bins = self.counts.len();
        for (i, &c) in self.counts.iter().enumerate() {
            let w = if self.hi > self.lo {
                (self.hi - self.lo) / bins as f64
            } else {
                1.0
            };
            out.push_str(&format!(
                "{:.3},{:.3},{}\n",
                self.lo + w * i as f64,
                self.lo + w * (i + 1) as f64,
                c
            ));
        }
        out
    }
}

/// Diagonal-length and boundary-pixel-count statistics of a mask set.
#[derive(Clone, Debug)]
pub struct DatasetStats {
    pub diagonal: Histogram,
    pub edge_pixels: Histogram,
}

pub fn dataset_stats<T: Scalar>(masks: &[ArrayD<T>], bins: usize) -> Result<DatasetStats> {
    if masks.is_empty() {
        return Err(Error::contract("dataset_stats", "empty dataset"));
    }
    let mut diagonals = Vec::with_capacity(masks.len());
    let mut edges = Vec::with_capacity(masks.len());
    for m in masks {
        let s = m.shape();
        let (h, w) = (s[0], s[1]);
        diagonals.push(((h * h + w * w) as f64).sqrt());
        let edge = edge_ground_truth(m, 1)?;
        edges.push(edge.iter().filter(|&&v| v != T::zero()).count() as f64);
    }
    Ok(DatasetStats {
        diagonal: Histogram::build(&diagonals, bins),
        edge_pixels: Histogram::build(&edges, bins),
    })
}

/// Greedy near-duplicate filter over 16×16 grayscale thumbnails; returns the
/// kept indices in scan order.
pub fn near_duplicate_filter<T: Scalar>(images: &[ArrayD<T>], threshold: f64) -> Result<Vec<usize>> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Config(format!(
            "similarity threshold {threshold} outside [0,1]"
        )));
    }
    let thumb = |img: &ArrayD<T>| -> Vec<f64> {
        let s = img.shape();
        let batched = img
            .clone()
            .into_shape_with_order(IxDyn(&[1, s[0], s[1], s[2]]))
            .unwrap();
        let small = resize_bilinear_array(&batched, 16, 16);
        let sl = small.as_slice().unwrap();
        (0..256)
            .map(|i| {
                let base = i * s[2];
                (0..s[2]).map(|c| sl[base + c].to_f64()).sum::<f64>() / s[2] as f64
            })
            .collect()
    };
    let cosine = |a: &[f64], b: &[f64]| -> f64 {
        let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
        let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
        let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
        if na == 0.0 || nb == 0.0 {
            return if na == nb { 1.0 } else { 0.0 };
        }
        dot / (na * nb)
    };
    let mut kept: Vec<usize> = Vec::new();
    let mut kept_thumbs: Vec<Vec<f64>> = Vec::new();
    for (i, img) in images.iter().enumerate() {
        let t = thumb(img);
        if kept_thumbs.iter().all(|k| cosine(k, &t) <= threshold) {
            kept.push(i);
            kept_thumbs.push(t);
        }
    }
    Ok(kept)
}
