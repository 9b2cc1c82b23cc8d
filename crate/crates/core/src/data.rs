//! Image sources: a procedural synthetic set and PNG directories.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};

use crate::error::{Error, Result};
use crate::rng::{stream, Stream};
use crate::tensor::Tensor;

/// Bilinear resize of an `[H,W,C]` image with half-pixel sampling centers.
pub fn resize_bilinear(img: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let [h, w, c] = img.shape()[..] else {
        return Err(Error::InvalidArgument(format!("resize expects [H,W,C], got {:?}", img.shape())));
    };
    if out_h == 0 || out_w == 0 || h == 0 || w == 0 {
        return Err(Error::InvalidArgument("resize to or from an empty image".into()));
    }
    let src = img.data();
    let coord = |o: usize, n_in: usize, n_out: usize| {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).max(0.0);
        let i0 = (x.floor() as usize).min(n_in - 1);
        let i1 = (i0 + 1).min(n_in - 1);
        (i0, i1, (x - i0 as f64) as f32)
    };
    let mut out = Vec::with_capacity(out_h * out_w * c);
    for oy in 0..out_h {
        let (y0, y1, fy) = coord(oy, h, out_h);
        for ox in 0..out_w {
            let (x0, x1, fx) = coord(ox, w, out_w);
            for ch in 0..c {
                let p = |y: usize, x: usize| src[(y * w + x) * c + ch];
                let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![out_h, out_w, c], out)
}

/// Centered square crop followed by a bilinear resize to `size×size`.
pub fn center_crop_resize(img: &Tensor, size: usize) -> Result<Tensor> {
    let [h, w, c] = img.shape()[..] else {
        return Err(Error::InvalidArgument(format!("crop expects [H,W,C], got {:?}", img.shape())));
    };
    let side = h.min(w);
    let (y0, x0) = ((h - side) / 2, (w - side) / 2);
    let cropped = if side == h && side == w {
        img.clone()
    } else {
        let mut data = Vec::with_capacity(side * side * c);
        for y in y0..y0 + side {
            let row = ((y * w) + x0) * c;
            data.extend_from_slice(&img.data()[row..row + side * c]);
        }
        Tensor::new(vec![side, side, c], data)?
    };
    if side == size {
        return Ok(cropped);
    }
    resize_bilinear(&cropped, size, size)
}

/// One procedural RGB image: per-channel linear gradient, band-limited
/// noise, 1 to 4 flat rectangles or ellipses and fine grain.
pub fn synthetic_image(size: usize, seed: u64, index: u64) -> Result<Tensor> {
    let mut rng = stream(seed, Stream::Dataset, index);
    let n = size as f32;
    let mut img = vec![0.0f32; size * size * 3];
    for ch in 0..3 {
        let (a, b, d): (f32, f32, f32) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        for y in 0..size {
            for x in 0..size {
                img[(y * size + x) * 3 + ch] = 0.5 + 0.3 * (a * x as f32 / n + b * y as f32 / n) + 0.1 * d;
            }
        }
    }
    let coarse = (size / 4).max(1);
    let low = Tensor::from_fn(&[coarse, coarse, 3], |_| StandardNormal.sample(&mut rng));
    let up = resize_bilinear(&low, size, size)?;
    let amp = 0.15 * rng.random_range(0.3f32..1.0);
    for (v, u) in img.iter_mut().zip(up.data()) {
        *v += amp * u;
    }
    for _ in 0..rng.random_range(1..5) {
        let col: [f32; 3] = [rng.random(), rng.random(), rng.random()];
        let (cx, cy): (f32, f32) = (rng.random(), rng.random());
        let (hw, hh) = (rng.random_range(0.05f32..0.25), rng.random_range(0.05f32..0.25));
        let ellipse = rng.random::<bool>();
        for y in 0..size {
            for x in 0..size {
                let (dx, dy) = (x as f32 / n - cx, y as f32 / n - cy);
                let inside = if ellipse {
                    (dx / hw).powi(2) + (dy / hh).powi(2) < 1.0
                } else {
                    dx.abs() < hw && dy.abs() < hh
                };
                if inside {
                    for ch in 0..3 {
                        let v = &mut img[(y * size + x) * 3 + ch];
                        *v = 0.7 * col[ch] + 0.3 * *v;
                    }
                }
            }
        }
    }
    let grain = Normal::new(0.0f32, 0.02).expect("valid std");
    for v in &mut img {
        *v = (*v + grain.sample(&mut rng)).clamp(0.0, 1.0);
    }
    Tensor::new(vec![size, size, 3], img)
}

/// `count` synthetic images; image `i` depends only on `(seed, offset + i)`.
pub fn generate_synthetic_dataset(count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    generate_synthetic_range(0, count, size, seed)
}

pub fn generate_synthetic_range(offset: usize, count: usize, size: usize, seed: u64) -> Result<Vec<Tensor>> {
    if count == 0 {
        return Err(Error::InvalidArgument("synthetic dataset count must be >= 1".into()));
    }
    (0..count).map(|i| synthetic_image(size, seed, (offset + i) as u64)).collect()
}

/// Decode an 8-bit PNG to an `[H,W,3]` tensor in `[0, 1]`.
pub fn read_png(path: &Path) -> Result<Tensor> {
    let mut dec = png::Decoder::new(BufReader::new(File::open(path)?));
    dec.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = dec.read_info()?;
    let size = reader
        .output_buffer_size()
        .ok_or_else(|| Error::InvalidArgument(format!("{}: image too large", path.display())))?;
    let mut buf = vec![0u8; size];
    let info = reader.next_frame(&mut buf)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => {
            return Err(Error::InvalidArgument(format!("{}: unexpanded palette", path.display())));
        }
    };
    let mut data = Vec::with_capacity(w * h * 3);
    for y in 0..h {
        let row = &buf[y * info.line_size..y * info.line_size + w * channels];
        for px in row.chunks(channels) {
            let rgb = if channels < 3 { [px[0]; 3] } else { [px[0], px[1], px[2]] };
            data.extend(rgb.iter().map(|&b| b as f32 / 255.0));
        }
    }
    Tensor::new(vec![h, w, 3], data)
}

/// Write an `[H,W,3]` tensor as an 8-bit RGB PNG (values rounded).
pub fn write_png(path: &Path, img: &Tensor) -> Result<()> {
    let [h, w, 3] = img.shape()[..] else {
        return Err(Error::InvalidArgument(format!("png output expects [H,W,3], got {:?}", img.shape())));
    };
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), w as u32, h as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let bytes: Vec<u8> = img.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
    enc.write_header()?.write_image_data(&bytes)?;
    Ok(())
}

/// Load every readable PNG in `dir` (sorted by file name), cropped and
/// resized to `size×size`. Files that fail to decode are skipped.
pub fn load_image_dir(dir: &Path, size: usize) -> Result<Vec<Tensor>> {
    let mut paths: Vec<PathBuf> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file())
        .collect();
    paths.sort();
    let mut out = Vec::new();
    for p in paths {
        match read_png(&p).and_then(|img| center_crop_resize(&img, size)) {
            Ok(img) => out.push(img),
            Err(e) => log::warn!("skipping {}: {e}", p.display()),
        }
    }
    if out.is_empty() {
        return Err(Error::EmptyImageDir(dir.to_path_buf()));
    }
    Ok(out)
}
