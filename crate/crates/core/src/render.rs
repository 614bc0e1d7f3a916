//! Heatmap display: normalization, bilinear upsampling, the five-point
//! colormap, overlay compositing and a Sobel edge map.
//!
//! Maps are rank-2 `[H, W]` tensors; images are `[1, 3, H, W]` in `[0, 1]`.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

/// Colormap control points: position in `[0, 1]` and an 8-bit RGB color.
pub const COLORMAP: [(f32, [u8; 3]); 5] = [
    (0.0, [0, 0, 255]),
    (0.25, [0, 255, 255]),
    (0.5, [0, 255, 0]),
    (0.75, [255, 255, 0]),
    (1.0, [255, 0, 0]),
];

/// Overlay opacity at heat 1.
pub const OVERLAY_ALPHA: f32 = 0.6;

/// Divides a nonnegative map by its maximum. An all-zero map stays zero.
pub fn normalize<T: Real>(raw: &Tensor<T>) -> Result<Tensor<T>> {
    raw.dims2("normalize")?;
    if let Some(&v) = raw.data().iter().find(|v| !(**v >= T::zero())) {
        return Err(Error::NegativeHeat(v.as_f64()));
    }
    let max = raw.max_value();
    if max == T::zero() {
        return Ok(raw.map(|_| T::zero()));
    }
    Ok(raw.map(|v| v / max))
}

/// `(v - min) / (max - min)`; a constant map becomes all zeros.
pub fn min_max_normalize<T: Real>(map: &Tensor<T>) -> Tensor<T> {
    let (lo, hi) = (map.min_value(), map.max_value());
    let range = hi - lo;
    if !(range > T::zero()) {
        return map.map(|_| T::zero());
    }
    map.map(|v| (v - lo) / range)
}

/// Align-corners bilinear resize of a `[U, V]` map to `[height, width]`.
pub fn upsample_bilinear<T: Real>(map: &Tensor<T>, height: usize, width: usize) -> Result<Tensor<T>> {
    let [u, v] = map.dims2("upsample_bilinear")?;
    if height == 0 || width == 0 {
        return Err(Error::InvalidShape("upsample target must be nonempty".into()));
    }
    let src = map.data();
    // source coordinate, lower index and fraction for each output index
    let axis = |out: usize, inp: usize| -> Vec<(usize, usize, T)> {
        (0..out)
            .map(|o| {
                if inp == 1 || out == 1 {
                    return (0, 0, T::zero());
                }
                let x = T::of((o * (inp - 1)) as f64 / (out - 1) as f64);
                let lo = (x.floor().as_f64() as usize).min(inp - 2);
                (lo, lo + 1, x - T::of(lo as f64))
            })
            .collect()
    };
    let rows = axis(height, u);
    let cols = axis(width, v);
    let mut out = Vec::with_capacity(height * width);
    for &(r0, r1, fy) in &rows {
        for &(c0, c1, fx) in &cols {
            let top = src[r0 * v + c0] * (T::one() - fx) + src[r0 * v + c1] * fx;
            let bottom = src[r1 * v + c0] * (T::one() - fx) + src[r1 * v + c1] * fx;
            out.push(top * (T::one() - fy) + bottom * fy);
        }
    }
    Tensor::new(&[height, width], out)
}

/// Colormap color in `[0, 1]^3` for a heat value, clamped to `[0, 1]`.
pub fn colormap(heat: f32) -> [f32; 3] {
    let t = if heat.is_nan() { 0.0 } else { heat.clamp(0.0, 1.0) };
    let seg = COLORMAP
        .windows(2)
        .find(|w| t <= w[1].0)
        .expect("control points cover [0, 1]");
    let ((p0, c0), (p1, c1)) = (seg[0], seg[1]);
    let f = (t - p0) / (p1 - p0);
    let mut rgb = [0.0; 3];
    for ch in 0..3 {
        let (a, b) = (c0[ch] as f32, c1[ch] as f32);
        rgb[ch] = (a + (b - a) * f) / 255.0;
    }
    rgb
}

fn image_dims(image: &Tensor<f32>, op: &'static str) -> Result<(usize, usize)> {
    let [n, c, h, w] = image.dims4(op)?;
    if n != 1 || c != 3 {
        return Err(Error::InvalidShape(format!(
            "{op}: expected a [1, 3, H, W] image, got {:?}",
            image.dims()
        )));
    }
    Ok((h, w))
}

/// `(1 - a) * image + a * colormap(heat)` with `a = 0.6 * heat` per pixel.
pub fn colorize_overlay(image: &Tensor<f32>, heat: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(image, "colorize_overlay")?;
    let [hh, hw] = heat.dims2("colorize_overlay")?;
    if (hh, hw) != (h, w) {
        return Err(Error::InvalidShape(format!(
            "heat {hh}x{hw} does not match image {h}x{w}"
        )));
    }
    let plane = h * w;
    let img = image.data();
    let mut out = vec![0.0f32; 3 * plane];
    for (p, &v) in heat.data().iter().enumerate() {
        let v = v.clamp(0.0, 1.0);
        let a = OVERLAY_ALPHA * v;
        let color = colormap(v);
        for ch in 0..3 {
            out[ch * plane + p] = ((1.0 - a) * img[ch * plane + p] + a * color[ch]).clamp(0.0, 1.0);
        }
    }
    Tensor::new(&[1, 3, h, w], out)
}

/// Paints a white dot centered on pixel `(i, j)`: the pixel itself plus its
/// four neighbours.
pub fn mark_pixel(image: &Tensor<f32>, i: usize, j: usize) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(image, "mark_pixel")?;
    if i >= h || j >= w {
        return Err(Error::PixelOutOfBounds {
            i,
            j,
            height: h,
            width: w,
        });
    }
    let plane = h * w;
    let mut data = image.to_vec();
    let spots = [(0, 0), (-1, 0), (1, 0), (0, -1), (0, 1)];
    for (di, dj) in spots {
        let (y, x) = (i as isize + di, j as isize + dj);
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            continue;
        }
        let p = y as usize * w + x as usize;
        for ch in 0..3 {
            data[ch * plane + p] = 1.0;
        }
    }
    Tensor::new(image.dims(), data)
}

/// Rec. 601 luminance `[H, W]` of an RGB image.
pub fn luminance(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let (h, w) = image_dims(image, "luminance")?;
    let plane = h * w;
    let d = image.data();
    Tensor::from_fn(&[h, w], |p| {
        0.299 * d[p] + 0.587 * d[plane + p] + 0.114 * d[2 * plane + p]
    })
}

/// Sobel gradient magnitude of the luminance, min-max normalized. Borders
/// replicate the nearest pixel so a constant image has no edges.
pub fn sobel_edges(image: &Tensor<f32>) -> Result<Tensor<f32>> {
    let lum = luminance(image)?;
    let [h, w] = lum.dims2("sobel_edges")?;
    let l = lum.data();
    let at = |y: isize, x: isize| -> f32 {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        l[y * w + x]
    };
    let mag = Tensor::from_fn(&[h, w], |p| {
        let (y, x) = ((p / w) as isize, (p % w) as isize);
        let gx = (at(y - 1, x + 1) + 2.0 * at(y, x + 1) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y, x - 1) + at(y + 1, x - 1));
        let gy = (at(y + 1, x - 1) + 2.0 * at(y + 1, x) + at(y + 1, x + 1))
            - (at(y - 1, x - 1) + 2.0 * at(y - 1, x) + at(y - 1, x + 1));
        (gx * gx + gy * gy).sqrt()
    })?;
    Ok(min_max_normalize(&mag))
}

/// Cosine similarity of two equally sized maps, 0 if either is all zero.
pub fn cosine_similarity<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::InvalidShape(format!(
            "cosine similarity of {:?} and {:?}",
            a.dims(),
            b.dims()
        )));
    }
    let (mut dot, mut na, mut nb) = (0.0f64, 0.0f64, 0.0f64);
    for (&x, &y) in a.data().iter().zip(b.data()) {
        let (x, y) = (x.as_f64(), y.as_f64());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if na == 0.0 || nb == 0.0 {
        return Ok(0.0);
    }
    Ok((dot / (na.sqrt() * nb.sqrt())).clamp(-1.0, 1.0))
}

/// Row-major RGBA8 bytes (alpha 255) of an RGB image, for canvas clients.
pub fn image_to_rgba8(image: &Tensor<f32>) -> Result<Vec<u8>> {
    let rgb = crate::pnm::image_to_rgb8(image)?;
    let mut out = Vec::with_capacity(rgb.len() / 3 * 4);
    for px in rgb.chunks_exact(3) {
        out.extend_from_slice(px);
        out.push(255);
    }
    Ok(out)
}

/// A distinct 8-bit color per class; background is black.
pub fn class_palette(num_classes: usize) -> Vec<[u8; 3]> {
    const BASE: [[u8; 3]; 8] = [
        [0, 0, 0],
        [230, 60, 60],
        [60, 200, 80],
        [70, 110, 240],
        [240, 200, 40],
        [200, 70, 220],
        [40, 210, 220],
        [250, 140, 40],
    ];
    (0..num_classes)
        .map(|c| {
            if c < BASE.len() {
                BASE[c]
            } else {
                // deterministic spread for larger class counts
                let x = (c as u32).wrapping_mul(2654435761);
                [(x >> 24) as u8, (x >> 16) as u8, (x >> 8) as u8]
            }
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(h: usize, w: usize, v: Vec<f32>) -> Tensor<f32> {
        Tensor::new(&[h, w], v).unwrap()
    }

    #[test]
    fn normalize_examples() {
        let n = normalize(&t2(2, 2, vec![0.0, 2.0, 4.0, 8.0])).unwrap();
        assert_eq!(n.data(), &[0.0, 0.25, 0.5, 1.0]);
        assert_eq!(normalize(&t2(1, 3, vec![0.0; 3])).unwrap().data(), &[0.0; 3]);
        assert_eq!(normalize(&t2(1, 3, vec![0.3; 3])).unwrap().data(), &[1.0; 3]);
        assert!(matches!(
            normalize(&t2(1, 2, vec![1.0, -0.5])),
            Err(Error::NegativeHeat(_))
        ));
    }

    #[test]
    fn upsample_examples() {
        let up = upsample_bilinear(&t2(1, 1, vec![0.7]), 3, 4).unwrap();
        assert!(up.data().iter().all(|&v| v == 0.7));
        let up = upsample_bilinear(&t2(2, 2, vec![0.0, 1.0, 0.0, 1.0]), 2, 3).unwrap();
        assert_eq!(up.data(), &[0.0, 0.5, 1.0, 0.0, 0.5, 1.0]);
    }

    #[test]
    fn colormap_control_points_exact() {
        for (p, rgb) in COLORMAP {
            let c = colormap(p);
            for ch in 0..3 {
                assert_eq!((c[ch] * 255.0).round() as u8, rgb[ch]);
            }
        }
        assert_eq!(colormap(0.125), [0.0, 0.5, 1.0]);
    }

    #[test]
    fn overlay_examples() {
        let img = Tensor::full(&[1, 3, 1, 2], 0.5f32).unwrap();
        let out = colorize_overlay(&img, &t2(1, 2, vec![0.0, 1.0])).unwrap();
        assert_eq!(out.at(&[0, 0, 0, 0]), 0.5);
        assert!((out.at(&[0, 0, 0, 1]) - (0.4 * 0.5 + 0.6)).abs() < 1e-6);
        assert!((out.at(&[0, 1, 0, 1]) - 0.2).abs() < 1e-6);
        assert!(colorize_overlay(&img, &t2(2, 1, vec![0.0, 0.0])).is_err());
    }

    #[test]
    fn sobel_vertical_step() {
        let w = 6;
        let img = Tensor::from_fn(&[1, 3, 5, w], |p| if p % w >= 3 { 1.0 } else { 0.0 }).unwrap();
        let e = sobel_edges(&img).unwrap();
        // interior row: strongest response on the two columns straddling the step
        let row: Vec<f32> = (0..w).map(|x| e.at(&[2, x])).collect();
        assert_eq!(row[2], row[3]);
        assert!(row[2] > row[1] && row[3] > row[4], "{row:?}");
        let flat = Tensor::full(&[1, 3, 4, 4], 0.3f32).unwrap();
        assert!(sobel_edges(&flat).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cosine_edge_cases() {
        let a = t2(1, 2, vec![1.0, 0.0]);
        assert_eq!(cosine_similarity(&a, &a).unwrap(), 1.0);
        assert_eq!(cosine_similarity(&a, &t2(1, 2, vec![0.0, 0.0])).unwrap(), 0.0);
        assert_eq!(cosine_similarity(&a, &t2(1, 2, vec![-2.0, 0.0])).unwrap(), -1.0);
    }

    #[test]
    fn mark_pixel_is_white_at_target() {
        let img = Tensor::zeros(&[1, 3, 4, 4]).unwrap();
        let m = mark_pixel(&img, 0, 3).unwrap();
        for ch in 0..3 {
            assert_eq!(m.at(&[0, ch, 0, 3]), 1.0);
            assert_eq!(m.at(&[0, ch, 3, 0]), 0.0);
        }
        assert!(mark_pixel(&img, 4, 0).is_err());
    }
}
