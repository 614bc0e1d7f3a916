use proptest::prelude::*;
use rand::Rng;

use segcam::render;
use segcam::rng::{self, Purpose};
use segcam::Tensor;

fn random(seed: u64, dims: &[usize]) -> Tensor<f32> {
    let mut r = rng::generator(seed, Purpose::Probe, 1);
    Tensor::from_fn(dims, |_| r.random::<f32>()).unwrap()
}

/// Align-corners bilinear sample of `m` at output `(y, x)`.
fn bilinear_oracle(m: &Tensor<f64>, h: usize, w: usize, y: usize, x: usize) -> f64 {
    let [u, v] = m.dims2("oracle").unwrap();
    let coord = |o: usize, n_out: usize, n_in: usize| {
        if n_out == 1 { 0.0 } else { o as f64 * (n_in - 1) as f64 / (n_out - 1) as f64 }
    };
    let (sy, sx) = (coord(y, h, u), coord(x, w, v));
    let (y0, x0) = (sy.floor() as usize, sx.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(u - 1), (x0 + 1).min(v - 1));
    let (fy, fx) = (sy - y0 as f64, sx - x0 as f64);
    let top = m.at(&[y0, x0]) * (1.0 - fx) + m.at(&[y0, x1]) * fx;
    let bottom = m.at(&[y1, x0]) * (1.0 - fx) + m.at(&[y1, x1]) * fx;
    top * (1.0 - fy) + bottom * fy
}

#[test]
fn bilinear_matches_oracle() {
    let m: Tensor<f64> = random(1, &[4, 4]).cast();
    for (h, w) in [(16, 16), (7, 9), (4, 4)] {
        let up = render::upsample_bilinear(&m, h, w).unwrap();
        for y in 0..h {
            for x in 0..w {
                assert!((up.at(&[y, x]) - bilinear_oracle(&m, h, w, y, x)).abs() < 1e-12);
            }
        }
    }
    let up = render::upsample_bilinear(&m, 16, 16).unwrap();
    for (a, b) in [(0, 0), (0, 15), (15, 0), (15, 15)] {
        assert_eq!(up.at(&[a, b]), m.at(&[a / 5, b / 5]));
    }
}

#[test]
fn sobel_matches_loop_oracle() {
    let img = random(2, &[1, 3, 9, 11]);
    let (h, w) = (9usize, 11usize);
    let lum = |y: isize, x: isize| {
        let y = y.clamp(0, h as isize - 1) as usize;
        let x = x.clamp(0, w as isize - 1) as usize;
        0.299 * f64::from(img.at(&[0, 0, y, x])) + 0.587 * f64::from(img.at(&[0, 1, y, x]))
            + 0.114 * f64::from(img.at(&[0, 2, y, x]))
    };
    let kx = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
    let mut mag = vec![0.0f64; h * w];
    for y in 0..h {
        for x in 0..w {
            let (mut gx, mut gy) = (0.0, 0.0);
            for a in 0..3 {
                for b in 0..3 {
                    let v = lum(y as isize + a as isize - 1, x as isize + b as isize - 1);
                    gx += kx[a][b] * v;
                    gy += kx[b][a] * v;
                }
            }
            mag[y * w + x] = (gx * gx + gy * gy).sqrt();
        }
    }
    let (lo, hi) = mag.iter().fold((f64::MAX, f64::MIN), |(l, u), &v| (l.min(v), u.max(v)));
    let got = render::sobel_edges(&img).unwrap();
    for (p, &m) in mag.iter().enumerate() {
        assert!((f64::from(got.data()[p]) - (m - lo) / (hi - lo)).abs() < 1e-4, "{p}");
    }
    let flat = Tensor::full(&[1, 3, 5, 5], 0.4f32).unwrap();
    assert!(render::sobel_edges(&flat).unwrap().data().iter().all(|&v| v == 0.0));
}

#[test]
fn normalize_is_idempotent_and_rejects_negatives() {
    let m: Tensor<f64> = random(3, &[5, 6]).cast();
    let once = render::normalize(&m).unwrap();
    assert_eq!(render::normalize(&once).unwrap(), once);
    assert!(render::normalize(&m.map(|v| v - 0.5)).is_err());
    let zero = Tensor::<f64>::zeros(&[2, 2]).unwrap();
    assert_eq!(render::normalize(&zero).unwrap(), zero);
}

#[test]
fn rgba_conversion_is_opaque() {
    let img = random(4, &[1, 3, 2, 3]);
    let rgba = render::image_to_rgba8(&img).unwrap();
    assert_eq!(rgba.len(), 2 * 3 * 4);
    assert!(rgba.chunks(4).all(|px| px[3] == 255));
    assert_eq!(render::class_palette(4).len(), 4);
}

proptest! {
    #[test]
    fn upsample_keeps_constants_and_range(u in 1usize..6, v in 1usize..6, h in 1usize..20, w in 1usize..20, c in 0.0f64..1.0, seed in any::<u64>()) {
        let flat = Tensor::full(&[u, v], c).unwrap();
        let up = render::upsample_bilinear(&flat, h, w).unwrap();
        prop_assert!(up.data().iter().all(|&x| (x - c).abs() < 1e-12));

        let m: Tensor<f64> = random(seed, &[u, v]).cast();
        let up = render::upsample_bilinear(&m, h, w).unwrap();
        let (lo, hi) = (m.min_value(), m.max_value());
        prop_assert!(up.data().iter().all(|&x| x >= lo - 1e-12 && x <= hi + 1e-12));
    }

    #[test]
    fn overlay_stays_in_unit_range(h in 1usize..8, w in 1usize..8, seed in any::<u64>()) {
        let img = random(seed, &[1, 3, h, w]);
        let heat = random(seed ^ 1, &[h, w]);
        let out = render::colorize_overlay(&img, &heat).unwrap();
        prop_assert_eq!(out.dims(), img.dims());
        prop_assert!(out.data().iter().all(|&x| (0.0..=1.0).contains(&x)));
    }
}
