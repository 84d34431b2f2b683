//! PPM/PNG reading and writing, bilinear resize, and a minimal line-plot
//! renderer for the evaluation harness figures.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{CdiraError, Result};

/// Interleaved 8-bit RGB image.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub w: usize,
    pub h: usize,
    pub data: Vec<u8>,
}

impl RgbImage {
    pub fn new(w: usize, h: usize) -> RgbImage {
        RgbImage {
            w,
            h,
            data: vec![0; w * h * 3],
        }
    }

    pub fn fill(&mut self, rgb: [u8; 3]) {
        for px in self.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let off = (y * self.w + x) * 3;
        self.data[off..off + 3].copy_from_slice(&rgb);
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let off = (y * self.w + x) * 3;
        [self.data[off], self.data[off + 1], self.data[off + 2]]
    }
}

pub fn write_ppm(path: &Path, img: &RgbImage) -> Result<()> {
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "P6\n{} {}\n255\n", img.w, img.h)?;
    out.write_all(&img.data)?;
    Ok(())
}

pub fn read_ppm(path: &Path) -> Result<RgbImage> {
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // magic, width, height, maxval; comments allowed
    let mut fields = Vec::new();
    while fields.len() < 4 {
        let mut line = String::new();
        if reader.read_line(&mut line)? == 0 {
            return Err(CdiraError::Data(format!("{path:?}: truncated ppm header")));
        }
        header.push(line.clone());
        let clean = line.split('#').next().unwrap_or("");
        fields.extend(clean.split_whitespace().map(str::to_string));
    }
    if fields[0] != "P6" {
        return Err(CdiraError::Data(format!("{path:?}: not a P6 ppm")));
    }
    let w: usize = fields[1]
        .parse()
        .map_err(|_| CdiraError::Data("bad ppm width".into()))?;
    let h: usize = fields[2]
        .parse()
        .map_err(|_| CdiraError::Data("bad ppm height".into()))?;
    let maxval: usize = fields[3]
        .parse()
        .map_err(|_| CdiraError::Data("bad ppm maxval".into()))?;
    if maxval != 255 {
        return Err(CdiraError::Data("only maxval 255 ppm supported".into()));
    }
    let mut data = vec![0u8; w * h * 3];
    reader.read_exact(&mut data)?;
    Ok(RgbImage { w, h, data })
}

pub fn write_png(path: &Path, img: &RgbImage) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut encoder = png::Encoder::new(file, img.w as u32, img.h as u32);
    encoder.set_color(png::ColorType::Rgb);
    encoder.set_depth(png::BitDepth::Eight);
    let mut writer = encoder
        .write_header()
        .map_err(|e| CdiraError::Data(format!("png header: {e}")))?;
    writer
        .write_image_data(&img.data)
        .map_err(|e| CdiraError::Data(format!("png write: {e}")))?;
    Ok(())
}

pub fn read_png(path: &Path) -> Result<RgbImage> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder
        .read_info()
        .map_err(|e| CdiraError::Data(format!("png read: {e}")))?;
    let mut buf = vec![0u8; reader.output_buffer_size().unwrap_or(0)];
    let info = reader
        .next_frame(&mut buf)
        .map_err(|e| CdiraError::Data(format!("png frame: {e}")))?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = info.color_type.samples();
    let mut data = vec![0u8; w * h * 3];
    match channels {
        1 => {
            for (i, px) in buf[..w * h].iter().enumerate() {
                data[i * 3..i * 3 + 3].copy_from_slice(&[*px, *px, *px]);
            }
        }
        2 => {
            for i in 0..w * h {
                let v = buf[i * 2];
                data[i * 3..i * 3 + 3].copy_from_slice(&[v, v, v]);
            }
        }
        3 => data.copy_from_slice(&buf[..w * h * 3]),
        4 => {
            for i in 0..w * h {
                data[i * 3..i * 3 + 3].copy_from_slice(&buf[i * 4..i * 4 + 3]);
            }
        }
        n => return Err(CdiraError::Data(format!("unsupported png channels: {n}"))),
    }
    Ok(RgbImage { w, h, data })
}

/// Read a PPM or PNG by extension.
pub fn read_image(path: &Path) -> Result<RgbImage> {
    match path
        .extension()
        .and_then(|e| e.to_str())
        .map(|e| e.to_ascii_lowercase())
        .as_deref()
    {
        Some("ppm") => read_ppm(path),
        Some("png") => read_png(path),
        other => Err(CdiraError::Data(format!(
            "unsupported image extension {other:?} for {path:?}"
        ))),
    }
}

/// Bilinear resize with half-pixel centers.
pub fn resize_bilinear(src: &RgbImage, dw: usize, dh: usize) -> RgbImage {
    if src.w == dw && src.h == dh {
        return src.clone();
    }
    let mut dst = RgbImage::new(dw, dh);
    let sx = src.w as f32 / dw as f32;
    let sy = src.h as f32 / dh as f32;
    for y in 0..dh {
        let fy = ((y as f32 + 0.5) * sy - 0.5).clamp(0.0, (src.h - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(src.h - 1);
        let wy = fy - y0 as f32;
        for x in 0..dw {
            let fx = ((x as f32 + 0.5) * sx - 0.5).clamp(0.0, (src.w - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(src.w - 1);
            let wx = fx - x0 as f32;
            let mut px = [0u8; 3];
            for (c, out) in px.iter_mut().enumerate() {
                let p00 = src.get(x0, y0)[c] as f32;
                let p10 = src.get(x1, y0)[c] as f32;
                let p01 = src.get(x0, y1)[c] as f32;
                let p11 = src.get(x1, y1)[c] as f32;
                let top = p00 + (p10 - p00) * wx;
                let bot = p01 + (p11 - p01) * wx;
                *out = (top + (bot - top) * wy).round().clamp(0.0, 255.0) as u8;
            }
            dst.set(x, y, px);
        }
    }
    dst
}

/// One polyline of a plot.
pub struct PlotSeries {
    pub points: Vec<(f64, f64)>,
    pub color: [u8; 3],
}

/// Minimal line plot: framed axes, light gridlines, one polyline per series.
/// Intended for quick visual inspection, not publication.
pub fn line_plot(path: &Path, series: &[PlotSeries], width: usize, height: usize) -> Result<()> {
    let mut img = RgbImage::new(width, height);
    img.fill([255, 255, 255]);
    let margin = 24usize;
    let (x0, y0) = (margin, margin);
    let (x1, y1) = (width - margin, height - margin);

    let mut min_x = f64::INFINITY;
    let mut max_x = f64::NEG_INFINITY;
    let mut min_y = f64::INFINITY;
    let mut max_y = f64::NEG_INFINITY;
    for s in series {
        for &(x, y) in &s.points {
            min_x = min_x.min(x);
            max_x = max_x.max(x);
            min_y = min_y.min(y);
            max_y = max_y.max(y);
        }
    }
    if !min_x.is_finite() {
        min_x = 0.0;
        max_x = 1.0;
        min_y = 0.0;
        max_y = 1.0;
    }
    if (max_x - min_x).abs() < 1e-12 {
        max_x = min_x + 1.0;
    }
    if (max_y - min_y).abs() < 1e-12 {
        max_y = min_y + 1.0;
    }

    let to_px = |x: f64, y: f64| -> (i64, i64) {
        let px = x0 as f64 + (x - min_x) / (max_x - min_x) * (x1 - x0) as f64;
        let py = y1 as f64 - (y - min_y) / (max_y - min_y) * (y1 - y0) as f64;
        (px.round() as i64, py.round() as i64)
    };

    // gridlines
    for i in 1..4 {
        let gx = x0 + (x1 - x0) * i / 4;
        let gy = y0 + (y1 - y0) * i / 4;
        for y in y0..=y1 {
            img.set(gx, y, [225, 225, 225]);
        }
        for x in x0..=x1 {
            img.set(x, gy, [225, 225, 225]);
        }
    }
    // frame
    for x in x0..=x1 {
        img.set(x, y0, [0, 0, 0]);
        img.set(x, y1, [0, 0, 0]);
    }
    for y in y0..=y1 {
        img.set(x0, y, [0, 0, 0]);
        img.set(x1, y, [0, 0, 0]);
    }

    for s in series {
        let mut prev: Option<(i64, i64)> = None;
        for &(x, y) in &s.points {
            let p = to_px(x, y);
            if let Some(q) = prev {
                draw_line(&mut img, q, p, s.color);
            }
            // fat point marker
            for dy in -1i64..=1 {
                for dx in -1i64..=1 {
                    let (mx, my) = (p.0 + dx, p.1 + dy);
                    if mx >= 0 && my >= 0 && (mx as usize) < width && (my as usize) < height {
                        img.set(mx as usize, my as usize, s.color);
                    }
                }
            }
            prev = Some(p);
        }
    }
    write_png(path, &img)
}

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: [u8; 3]) {
    let (mut x, mut y) = from;
    let dx = (to.0 - from.0).abs();
    let dy = -(to.1 - from.1).abs();
    let sx = if from.0 < to.0 { 1 } else { -1 };
    let sy = if from.1 < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as usize) < img.w && (y as usize) < img.h {
            img.set(x as usize, y as usize, color);
        }
        if x == to.0 && y == to.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}
