//! Independent reference implementations shared by the integration and
//! acceptance tests. Nothing here calls into the metric or planning code it
//! is used to check.
#![allow(dead_code)]

use attnpost_core::ImageBuffer;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const K1: f64 = 0.01;
pub const K2: f64 = 0.03;
pub const WINDOW: usize = 11;
pub const SIGMA: f64 = 1.5;
pub const RAW_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_image(h: usize, w: usize, rng: &mut impl Rng) -> ImageBuffer {
    let px = (0..h * w * 3).map(|_| rng.gen::<f32>()).collect();
    ImageBuffer::new(h, w, px).unwrap()
}

/// Smooth-ish content plus a noisy, contrast-reduced copy of it.
pub fn related_pair(h: usize, w: usize, rng: &mut impl Rng) -> (ImageBuffer, ImageBuffer) {
    let fx: f32 = rng.gen_range(0.02..0.2);
    let fy: f32 = rng.gen_range(0.02..0.2);
    let mut a = Vec::with_capacity(h * w * 3);
    for r in 0..h {
        for c in 0..w {
            for ch in 0..3 {
                let base = 0.5 + 0.3 * ((r as f32 * fy + ch as f32).sin() * (c as f32 * fx).cos());
                a.push((base + 0.15 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0));
            }
        }
    }
    let b = a
        .iter()
        .map(|&v| (0.85 * v + 0.05 + 0.2 * (rng.gen::<f32>() - 0.5)).clamp(0.0, 1.0))
        .collect();
    (ImageBuffer::new(h, w, a).unwrap(), ImageBuffer::new(h, w, b).unwrap())
}

/// Row-major `h × w` channel plane.
pub type Grid = (usize, usize, Vec<f64>);

pub fn channel(im: &ImageBuffer, ch: usize) -> Grid {
    let (h, w) = im.dims();
    let mut v = Vec::with_capacity(h * w);
    for r in 0..h {
        for c in 0..w {
            v.push(im.get(r, c, ch) as f64);
        }
    }
    (h, w, v)
}

pub fn gaussian_2d() -> Vec<f64> {
    let half = (WINDOW / 2) as f64;
    let mut k = Vec::with_capacity(WINDOW * WINDOW);
    for i in 0..WINDOW {
        for j in 0..WINDOW {
            let (y, x) = (i as f64 - half, j as f64 - half);
            k.push((-(x * x + y * y) / (2.0 * SIGMA * SIGMA)).exp());
        }
    }
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Mean luminance, contrast, structure, contrast·structure and SSIM maps,
/// summed directly over every fully contained window with two-pass moments.
pub fn direct_components(a: &Grid, b: &Grid) -> [f64; 5] {
    let (h, w) = (a.0, a.1);
    let k = gaussian_2d();
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let c3 = c2 / 2.0;
    let mut acc = [0.0; 5];
    let mut n = 0usize;
    for top in 0..=h - WINDOW {
        for left in 0..=w - WINDOW {
            let at = |g: &Grid, i: usize, j: usize| g.2[(top + i) * w + left + j];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let q = k[i * WINDOW + j];
                    ma += q * at(a, i, j);
                    mb += q * at(b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..WINDOW {
                for j in 0..WINDOW {
                    let q = k[i * WINDOW + j];
                    let (da, db) = (at(a, i, j) - ma, at(b, i, j) - mb);
                    va += q * da * da;
                    vb += q * db * db;
                    cov += q * da * db;
                }
            }
            let (sa, sb) = (va.sqrt(), vb.sqrt());
            let l = (2.0 * ma * mb + c1) / (ma * ma + mb * mb + c1);
            let c = (2.0 * sa * sb + c2) / (va + vb + c2);
            let s = (cov + c3) / (sa * sb + c3);
            acc[0] += l;
            acc[1] += c;
            acc[2] += s;
            // the C3 = C2/2 identity, taken the long way round
            acc[3] += (2.0 * cov + c2) / (va + vb + c2);
            acc[4] += l * c * s;
            n += 1;
        }
    }
    acc.map(|v| v / n as f64)
}

pub fn halve(g: &Grid) -> Grid {
    let (h, w) = (g.0 / 2, g.1 / 2);
    let mut out = vec![0.0; h * w];
    for r in 0..h {
        for c in 0..w {
            let mut s = 0.0;
            for dr in 0..2 {
                for dc in 0..2 {
                    s += g.2[(2 * r + dr) * g.1 + 2 * c + dc];
                }
            }
            out[r * w + c] = s / 4.0;
        }
    }
    (h, w, out)
}

pub fn direct_ms_ssim_plane(a: &Grid, b: &Grid) -> f64 {
    let mut m = RAW_WEIGHTS.len();
    while a.0.min(a.1) < WINDOW * (1 << (m - 1)) {
        m -= 1;
    }
    let total: f64 = RAW_WEIGHTS[..m].iter().sum();
    let (mut a, mut b) = (a.clone(), b.clone());
    let mut value = 1.0;
    for j in 0..m {
        let wj = RAW_WEIGHTS[j] / total;
        let comps = direct_components(&a, &b);
        value *= comps[3].max(0.0).powf(wj);
        if j == m - 1 {
            value *= comps[0].max(0.0).powf(wj);
        } else {
            a = halve(&a);
            b = halve(&b);
        }
    }
    value
}

pub fn direct_ms_ssim(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    (0..3)
        .map(|ch| direct_ms_ssim_plane(&channel(a, ch), &channel(b, ch)))
        .sum::<f64>()
        / 3.0
}

/// `10·log10(peak² / MSE)` accumulated in f64.
pub fn direct_psnr(a: &ImageBuffer, b: &ImageBuffer) -> f64 {
    let n = a.pixels().len() as f64;
    let mse: f64 = a
        .pixels()
        .iter()
        .zip(b.pixels())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum::<f64>()
        / n;
    10.0 * (1.0 / mse).log10()
}

/// Size table for the planner oracle: per image, per qp (finest first),
/// `(bits, psnr)`.
pub struct Table {
    pub pixels: Vec<u64>,
    pub cells: Vec<Vec<(u64, f64)>>,
}

/// Sizes land around a 0.1 to 0.4 bpp operating point and shrink by 10 to
/// 30 % per qp step; the target is drawn between the coarsest and finest
/// dataset rates so it is always reachable.
pub fn random_monotone_table(images: usize, qps: usize, rng: &mut impl Rng) -> (Table, f64) {
    let mut pixels = Vec::with_capacity(images);
    let mut cells = Vec::with_capacity(images);
    for _ in 0..images {
        let px = rng.gen_range(64..=160u64) * rng.gen_range(64..=160u64);
        pixels.push(px);
        let mut bits = (px as f64 * rng.gen_range(0.1..0.4)) as u64;
        let mut psnr = rng.gen_range(30.0..40.0);
        let mut row = Vec::with_capacity(qps);
        for _ in 0..qps {
            row.push((bits, psnr));
            bits = (bits as f64 * rng.gen_range(0.7..0.9)) as u64;
            psnr -= rng.gen_range(0.2..1.5);
        }
        cells.push(row);
    }
    let total: u64 = pixels.iter().sum();
    let column = |j: usize| cells.iter().map(|r: &Vec<(u64, f64)>| r[j].0).sum::<u64>() as f64 / total as f64;
    let target = rng.gen_range(column(qps - 1)..column(0) * 1.05);
    (Table { pixels, cells }, target)
}

/// Exhaustive search over every assignment using at most `span` adjacent
/// qps. Returns the largest dataset bpp that fits the target and the best
/// mean PSNR that fits, or `None` when nothing fits.
pub fn brute_force_plan(t: &Table, target: f64, span: usize) -> Option<(f64, f64)> {
    let n = t.cells.len();
    let q = t.cells[0].len();
    let total_px: u64 = t.pixels.iter().sum();
    let mut best: Option<(f64, f64)> = None;
    let mut choice = vec![0usize; n];
    loop {
        let lo = *choice.iter().min().unwrap();
        let hi = *choice.iter().max().unwrap();
        if hi - lo < span {
            let bits: u64 = (0..n).map(|i| t.cells[i][choice[i]].0).sum();
            let bpp = bits as f64 / total_px as f64;
            if bpp <= target {
                let mean = (0..n).map(|i| t.cells[i][choice[i]].1).sum::<f64>() / n as f64;
                best = Some(match best {
                    None => (bpp, mean),
                    Some((b, m)) => (b.max(bpp), m.max(mean)),
                });
            }
        }
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            choice[i] += 1;
            if choice[i] < q {
                break;
            }
            choice[i] = 0;
            i += 1;
        }
    }
}
