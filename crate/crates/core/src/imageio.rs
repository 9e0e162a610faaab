//! 8-bit PNG input/output for images, masks and saliency maps.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use image::{GrayImage, RgbImage};
use ndarray::{ArrayD, IxDyn};
use std::path::Path;

/// Load an RGB image as `[h,w,3]` in `[0,1]`.
pub fn load_rgb<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let mut data = Vec::with_capacity((w * h * 3) as usize);
    for px in img.pixels() {
        for c in 0..3 {
            data.push(T::cast(px.0[c] as f64 / 255.0));
        }
    }
    Ok(ArrayD::from_shape_vec(IxDyn(&[h as usize, w as usize, 3]), data).unwrap())
}

/// Load a grayscale map as `[h,w]` in `[0,1]`.
pub fn load_gray<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let img = image::open(path)
        .map_err(|e| Error::Image {
            path: path.display().to_string(),
            detail: e.to_string(),
        })?
        .to_luma8();
    let (w, h) = img.dimensions();
    let data: Vec<T> = img
        .pixels()
        .map(|p| T::cast(p.0[0] as f64 / 255.0))
        .collect();
    Ok(ArrayD::from_shape_vec(IxDyn(&[h as usize, w as usize]), data).unwrap())
}

/// Load a grayscale map and binarize it at one half.
pub fn load_mask<T: Scalar>(path: &Path) -> Result<ArrayD<T>> {
    let g = load_gray::<T>(path)?;
    Ok(g.mapv(|v| if v.to_f64() > 0.5 { T::one() } else { T::zero() }))
}

fn quantize_u8(v: f64) -> u8 {
    ((v * 255.0).round() as i64).clamp(0, 255) as u8
}

/// Save `[h,w]` or `[h,w,1]` values in `[0,1]` as an 8-bit grayscale PNG.
pub fn save_gray<T: Scalar>(path: &Path, map: &ArrayD<T>) -> Result<()> {
    let s = map.shape();
    let (h, w) = match s.len() {
        2 => (s[0], s[1]),
        3 if s[2] == 1 => (s[0], s[1]),
        _ => {
            return Err(Error::dim(
                "save_gray",
                format!("expected [h,w] map, got {s:?}"),
            ))
        }
    };
    let mut img = GrayImage::new(w as u32, h as u32);
    for (i, v) in map.iter().enumerate() {
        let (y, x) = (i / w, i % w);
        img.put_pixel(x as u32, y as u32, image::Luma([quantize_u8(v.to_f64())]));
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}

/// Save `[h,w,3]` values in `[0,1]` as an RGB PNG.
pub fn save_rgb<T: Scalar>(path: &Path, img_arr: &ArrayD<T>) -> Result<()> {
    let s = img_arr.shape();
    if s.len() != 3 || s[2] != 3 {
        return Err(Error::dim(
            "save_rgb",
            format!("expected [h,w,3], got {s:?}"),
        ));
    }
    let (h, w) = (s[0], s[1]);
    let mut img = RgbImage::new(w as u32, h as u32);
    let data = img_arr.as_slice().expect("contiguous");
    for y in 0..h {
        for x in 0..w {
            let base = (y * w + x) * 3;
            img.put_pixel(
                x as u32,
                y as u32,
                image::Rgb([
                    quantize_u8(data[base].to_f64()),
                    quantize_u8(data[base + 1].to_f64()),
                    quantize_u8(data[base + 2].to_f64()),
                ]),
            );
        }
    }
    img.save(path).map_err(|e| Error::Image {
        path: path.display().to_string(),
        detail: e.to_string(),
    })
}
