//! Deterministic input degradations for robustness sweeps: box blur, a
//! codec-free block-DCT quantization proxy for JPEG, low-light dimming, and
//! seeded rectangular occlusion. Severity 0 is always the bitwise identity.

use rand::Rng;

use crate::error::{CdiraError, Result};
use crate::rng::{stream_rng, Stream};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DegradeKind {
    Blur,
    Jpeg,
    Lowlight,
    Occlusion,
}

impl DegradeKind {
    pub fn tag(self) -> &'static str {
        match self {
            DegradeKind::Blur => "blur",
            DegradeKind::Jpeg => "jpeg",
            DegradeKind::Lowlight => "lowlight",
            DegradeKind::Occlusion => "occlusion",
        }
    }

    pub fn from_tag(tag: &str) -> Result<DegradeKind> {
        match tag {
            "blur" => Ok(DegradeKind::Blur),
            "jpeg" => Ok(DegradeKind::Jpeg),
            "lowlight" => Ok(DegradeKind::Lowlight),
            "occlusion" => Ok(DegradeKind::Occlusion),
            other => Err(CdiraError::invalid(format!("unknown degradation {other:?}"))),
        }
    }

    pub fn all() -> [DegradeKind; 4] {
        [
            DegradeKind::Blur,
            DegradeKind::Jpeg,
            DegradeKind::Lowlight,
            DegradeKind::Occlusion,
        ]
    }
}

#[derive(Debug, Clone, Copy)]
pub struct DegradeSpec {
    pub kind: DegradeKind,
    /// 0 = identity; interpretation is kind-specific:
    /// blur: box kernel 2s+1; jpeg: DCT quantization step 2s;
    /// lowlight: scale 1/(1+s); occlusion: covered fraction 0.1*s.
    pub severity: u32,
    /// Used by occlusion only (rectangle placement).
    pub seed: u64,
}

/// Apply a degradation to a [3, H, W] image in [0, 1].
pub fn degrade(image: &Tensor, spec: &DegradeSpec) -> Result<Tensor> {
    let shape = image.shape();
    if shape.len() != 3 || shape[0] != 3 {
        return Err(CdiraError::shape("degrade expects [3, H, W]".to_string()));
    }
    if spec.severity == 0 {
        return Ok(image.clone());
    }
    let (h, w) = (shape[1], shape[2]);
    match spec.kind {
        DegradeKind::Blur => Ok(box_blur(image, h, w, spec.severity as usize)),
        DegradeKind::Jpeg => Ok(dct_quantize(image, h, w, 2.0 * spec.severity as f32)),
        DegradeKind::Lowlight => {
            let scale = 1.0 / (1.0 + spec.severity as f32);
            let data = image.data().iter().map(|&v| (v * scale).clamp(0.0, 1.0)).collect();
            Tensor::from_vec(shape, data)
        }
        DegradeKind::Occlusion => occlude(image, h, w, spec.severity, spec.seed),
    }
}

fn box_blur(image: &Tensor, h: usize, w: usize, severity: usize) -> Tensor {
    let radius = severity as isize;
    let k = 2 * severity + 1;
    let norm = 1.0 / (k * k) as f32;
    let mut out = vec![0.0f32; image.len()];
    for c in 0..3 {
        let plane = &image.data()[c * h * w..(c + 1) * h * w];
        let dst = &mut out[c * h * w..(c + 1) * h * w];
        for y in 0..h as isize {
            for x in 0..w as isize {
                let mut acc = 0.0f32;
                for dy in -radius..=radius {
                    let sy = (y + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -radius..=radius {
                        let sx = (x + dx).clamp(0, w as isize - 1) as usize;
                        acc += plane[sy * w + sx];
                    }
                }
                dst[y as usize * w + x as usize] = acc * norm;
            }
        }
    }
    Tensor::from_vec(image.shape(), out).expect("same size")
}

/// Orthonormal 8-point DCT-II basis.
fn dct_basis() -> [[f32; 8]; 8] {
    let mut basis = [[0.0f32; 8]; 8];
    for (u, row) in basis.iter_mut().enumerate() {
        let alpha = if u == 0 {
            (1.0f64 / 8.0).sqrt()
        } else {
            (2.0f64 / 8.0).sqrt()
        };
        for (x, v) in row.iter_mut().enumerate() {
            *v = (alpha
                * ((2.0 * x as f64 + 1.0) * u as f64 * std::f64::consts::PI / 16.0).cos())
                as f32;
        }
    }
    basis
}

/// 8x8 block DCT, uniform quantization of every coefficient, inverse DCT.
/// Blocks extending past the image are padded by edge replication; only the
/// in-bounds region is written back.
fn dct_quantize(image: &Tensor, h: usize, w: usize, q_step: f32) -> Tensor {
    let basis = dct_basis();
    let mut out = image.data().to_vec();
    for c in 0..3 {
        let plane_off = c * h * w;
        for by in (0..h).step_by(8) {
            for bx in (0..w).step_by(8) {
                // load with edge replication, centered to [-128, 127]
                let mut block = [[0.0f32; 8]; 8];
                for (y, row) in block.iter_mut().enumerate() {
                    let sy = (by + y).min(h - 1);
                    for (x, v) in row.iter_mut().enumerate() {
                        let sx = (bx + x).min(w - 1);
                        *v = image.data()[plane_off + sy * w + sx] * 255.0 - 128.0;
                    }
                }
                // coef = C . block . C^T
                let mut tmp = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0f32;
                        for yv in 0..8 {
                            acc += basis[u][yv] * block[yv][x];
                        }
                        tmp[u][x] = acc;
                    }
                }
                let mut coef = [[0.0f32; 8]; 8];
                for u in 0..8 {
                    for v in 0..8 {
                        let mut acc = 0.0f32;
                        for xv in 0..8 {
                            acc += tmp[u][xv] * basis[v][xv];
                        }
                        coef[u][v] = (acc / q_step).round() * q_step;
                    }
                }
                // block = C^T . coef . C
                for u in 0..8 {
                    for x in 0..8 {
                        let mut acc = 0.0f32;
                        for yv in 0..8 {
                            acc += basis[yv][u] * coef[yv][x];
                        }
                        tmp[u][x] = acc;
                    }
                }
                for y in 0..8 {
                    if by + y >= h {
                        break;
                    }
                    for x in 0..8 {
                        if bx + x >= w {
                            break;
                        }
                        let mut acc = 0.0f32;
                        for v in 0..8 {
                            acc += tmp[y][v] * basis[v][x];
                        }
                        out[plane_off + (by + y) * w + bx + x] =
                            ((acc + 128.0) / 255.0).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
    Tensor::from_vec(image.shape(), out).expect("same size")
}

/// Gray rectangle covering 0.1 * severity of the image area, placed by the
/// seeded stream. Width is sqrt-proportioned so the patch stays square-ish.
fn occlude(image: &Tensor, h: usize, w: usize, severity: u32, seed: u64) -> Result<Tensor> {
    let frac = (0.1 * severity as f64).min(1.0);
    let target = frac * (h * w) as f64;
    let rect_w = ((w as f64 * frac.sqrt()).round() as usize).clamp(1, w);
    let rect_h = ((target / rect_w as f64).round() as usize).clamp(1, h);
    let mut rng = stream_rng(seed, Stream::Occlusion, severity as u64);
    let x0 = rng.random_range(0..=w - rect_w);
    let y0 = rng.random_range(0..=h - rect_h);
    let mut out = image.data().to_vec();
    for c in 0..3 {
        let plane_off = c * h * w;
        for y in y0..y0 + rect_h {
            for x in x0..x0 + rect_w {
                out[plane_off + y * w + x] = 0.5;
            }
        }
    }
    Tensor::from_vec(image.shape(), out)
}
