//! A toy block-transform codec standing in for a real encoder at desk scale.
//!
//! Each channel is level-shifted to `[-128, 127]`, split into 8×8 blocks
//! (edges replicated), transformed with an orthonormal DCT-II and quantized
//! with a frequency-weighted step that grows geometrically with qp. The bit
//! count is that of an Exp-Golomb run-length code of the quantized blocks in
//! zigzag order, which shrinks whenever any coefficient magnitude shrinks.

use std::f64::consts::PI;
use std::sync::OnceLock;

use super::{Codec, Coded};
use crate::error::Result;
use crate::image::ImageBuffer;

pub const DCT_BLOCK: usize = 8;
pub const DCT_QP_MAX: i32 = 9;
const HEADER_BITS: u64 = 64;
const STEP_GROWTH: f64 = 1.7;

#[derive(Clone, Copy, Debug, Default)]
pub struct BuiltinDct;

struct Tables {
    basis: [[f64; DCT_BLOCK]; DCT_BLOCK],
    zigzag: [usize; DCT_BLOCK * DCT_BLOCK],
}

fn tables() -> &'static Tables {
    static TABLES: OnceLock<Tables> = OnceLock::new();
    TABLES.get_or_init(|| {
        let n = DCT_BLOCK as f64;
        let mut basis = [[0.0; DCT_BLOCK]; DCT_BLOCK];
        for (u, row) in basis.iter_mut().enumerate() {
            let a = if u == 0 { (1.0 / n).sqrt() } else { (2.0 / n).sqrt() };
            for (x, v) in row.iter_mut().enumerate() {
                *v = a * ((2 * x + 1) as f64 * u as f64 * PI / (2.0 * n)).cos();
            }
        }
        let mut zigzag = [0usize; DCT_BLOCK * DCT_BLOCK];
        let mut i = 0;
        for s in 0..(2 * DCT_BLOCK - 1) {
            let lo = s.saturating_sub(DCT_BLOCK - 1);
            let hi = s.min(DCT_BLOCK - 1);
            let rows: Vec<usize> = if s % 2 == 0 {
                (lo..=hi).rev().collect()
            } else {
                (lo..=hi).collect()
            };
            for r in rows {
                zigzag[i] = r * DCT_BLOCK + (s - r);
                i += 1;
            }
        }
        Tables { basis, zigzag }
    })
}

/// Quantizer step for coefficient `(u, v)` at `qp`; exactly 1 at qp 0.
pub(crate) fn step(qp: i32, u: usize, v: usize) -> f64 {
    1.0 + (STEP_GROWTH.powi(qp) - 1.0) * (1.0 + (u + v) as f64 / 4.0)
}

type Block = [f64; DCT_BLOCK * DCT_BLOCK];

fn forward_dct(block: &Block) -> Block {
    let b = &tables().basis;
    let mut tmp = [0.0; DCT_BLOCK * DCT_BLOCK];
    for u in 0..DCT_BLOCK {
        for x in 0..DCT_BLOCK {
            let mut acc = 0.0;
            for y in 0..DCT_BLOCK {
                acc += b[u][y] * block[y * DCT_BLOCK + x];
            }
            tmp[u * DCT_BLOCK + x] = acc;
        }
    }
    let mut out = [0.0; DCT_BLOCK * DCT_BLOCK];
    for u in 0..DCT_BLOCK {
        for v in 0..DCT_BLOCK {
            let mut acc = 0.0;
            for x in 0..DCT_BLOCK {
                acc += tmp[u * DCT_BLOCK + x] * b[v][x];
            }
            out[u * DCT_BLOCK + v] = acc;
        }
    }
    out
}

fn inverse_dct(coef: &Block) -> Block {
    let b = &tables().basis;
    let mut tmp = [0.0; DCT_BLOCK * DCT_BLOCK];
    for y in 0..DCT_BLOCK {
        for v in 0..DCT_BLOCK {
            let mut acc = 0.0;
            for u in 0..DCT_BLOCK {
                acc += b[u][y] * coef[u * DCT_BLOCK + v];
            }
            tmp[y * DCT_BLOCK + v] = acc;
        }
    }
    let mut out = [0.0; DCT_BLOCK * DCT_BLOCK];
    for y in 0..DCT_BLOCK {
        for x in 0..DCT_BLOCK {
            let mut acc = 0.0;
            for v in 0..DCT_BLOCK {
                acc += tmp[y * DCT_BLOCK + v] * b[v][x];
            }
            out[y * DCT_BLOCK + x] = acc;
        }
    }
    out
}

fn quantize(coef: &Block, qp: i32) -> [i64; DCT_BLOCK * DCT_BLOCK] {
    let mut q = [0i64; DCT_BLOCK * DCT_BLOCK];
    for (i, (out, &c)) in q.iter_mut().zip(coef).enumerate() {
        *out = (c / step(qp, i / DCT_BLOCK, i % DCT_BLOCK)).round() as i64;
    }
    q
}

fn dequantize(q: &[i64; DCT_BLOCK * DCT_BLOCK], qp: i32) -> Block {
    let mut c = [0.0; DCT_BLOCK * DCT_BLOCK];
    for (i, (out, &v)) in c.iter_mut().zip(q).enumerate() {
        *out = v as f64 * step(qp, i / DCT_BLOCK, i % DCT_BLOCK);
    }
    c
}

/// Length of the order-0 Exp-Golomb code of `n`.
fn ue_bits(n: u64) -> u64 {
    2 * (64 - (n + 1).leading_zeros() as u64 - 1) + 1
}

fn block_bits(q: &[i64; DCT_BLOCK * DCT_BLOCK]) -> u64 {
    let zz = &tables().zigzag;
    let nnz = q.iter().filter(|&&v| v != 0).count() as u64;
    let mut bits = ue_bits(nnz);
    let mut run = 0u64;
    for &i in zz {
        if q[i] == 0 {
            run += 1;
        } else {
            bits += ue_bits(run) + ue_bits(q[i].unsigned_abs() - 1) + 1;
            run = 0;
        }
    }
    bits
}

impl BuiltinDct {
    fn blocks(&self, image: &ImageBuffer) -> (usize, usize) {
        (
            image.height().div_ceil(DCT_BLOCK),
            image.width().div_ceil(DCT_BLOCK),
        )
    }

    /// Level-shifted 255-scale block at block position `(br, bc)` of one
    /// channel, with edge replication past the image border.
    fn gather(image: &ImageBuffer, ch: usize, br: usize, bc: usize) -> Block {
        let (h, w) = image.dims();
        let mut block = [0.0; DCT_BLOCK * DCT_BLOCK];
        for y in 0..DCT_BLOCK {
            let r = (br * DCT_BLOCK + y).min(h - 1);
            for x in 0..DCT_BLOCK {
                let c = (bc * DCT_BLOCK + x).min(w - 1);
                block[y * DCT_BLOCK + x] = image.get(r, c, ch) as f64 * 255.0 - 128.0;
            }
        }
        block
    }
}

impl Codec for BuiltinDct {
    fn name(&self) -> &str {
        "builtin"
    }

    fn qp_range(&self) -> (i32, i32) {
        (0, DCT_QP_MAX)
    }

    fn code(&self, image: &ImageBuffer, qp: i32) -> Result<Coded> {
        self.check_qp(qp)?;
        let (h, w) = image.dims();
        let (nbr, nbc) = self.blocks(image);
        let mut out = vec![0.0f32; h * w * ImageBuffer::CHANNELS];
        let mut bits = HEADER_BITS;
        for ch in 0..ImageBuffer::CHANNELS {
            for br in 0..nbr {
                for bc in 0..nbc {
                    let q = quantize(&forward_dct(&Self::gather(image, ch, br, bc)), qp);
                    bits += block_bits(&q);
                    let rec = inverse_dct(&dequantize(&q, qp));
                    for y in 0..DCT_BLOCK {
                        let r = br * DCT_BLOCK + y;
                        if r >= h {
                            break;
                        }
                        for x in 0..DCT_BLOCK {
                            let c = bc * DCT_BLOCK + x;
                            if c >= w {
                                break;
                            }
                            // decoders emit 8-bit samples
                            let v = (rec[y * DCT_BLOCK + x] + 128.0).round().clamp(0.0, 255.0);
                            out[(r * w + c) * ImageBuffer::CHANNELS + ch] = (v / 255.0) as f32;
                        }
                    }
                }
            }
        }
        Ok(Coded {
            decoded: ImageBuffer::new(h, w, out)?,
            bits,
        })
    }
}
