//! Image preprocessing and the two mask-level primitives of the
//! augmentation loop: Otsu binarization and diffusion inpainting.
//!
//! Images are planar RGB (`[3][h][w]`, values in `[0,1]`); every public
//! operation clamps back into that range.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Three-channel image, planar layout, values in `[0,1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Image {
    h: usize,
    w: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(h: usize, w: usize) -> Self {
        Image {
            h,
            w,
            data: vec![0.0; 3 * h * w],
        }
    }

    pub fn from_planar(h: usize, w: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * h * w {
            return Err(Error::Shape(format!(
                "planar RGB {h}x{w} needs {} values, got {}",
                3 * h * w,
                data.len()
            )));
        }
        Ok(Image { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f32 {
        self.data[(c * self.h + y) * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, c: usize, y: usize, x: usize, v: f32) {
        self.data[(c * self.h + y) * self.w + x] = v;
    }

    /// Mean over channels at one pixel.
    #[inline]
    pub fn mean_intensity(&self, y: usize, x: usize) -> f32 {
        (self.get(0, y, x) + self.get(1, y, x) + self.get(2, y, x)) / 3.0
    }

    pub fn plane(&self, c: usize) -> &[f32] {
        &self.data[c * self.h * self.w..(c + 1) * self.h * self.w]
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Copy into a `[3,H,W]` tensor.
    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::from_vec(&[3, self.h, self.w], self.data.clone()).unwrap()
    }

    pub fn from_tensor(t: &Tensor<f32>) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[0] != 3 {
            return Err(Error::Shape(format!("expected [3,H,W] tensor, got {s:?}")));
        }
        Image::from_planar(s[1], s[2], t.data().to_vec())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let img = image::open(path)?.to_rgb8();
        let (w, h) = (img.width() as usize, img.height() as usize);
        let mut out = Image::new(h, w);
        for y in 0..h {
            for x in 0..w {
                let p = img.get_pixel(x as u32, y as u32);
                for c in 0..3 {
                    out.set(c, y, x, p.0[c] as f32 / 255.0);
                }
            }
        }
        Ok(out)
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        let mut img = image::RgbImage::new(self.w as u32, self.h as u32);
        for y in 0..self.h {
            for x in 0..self.w {
                let px = [
                    (self.get(0, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(1, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                    (self.get(2, y, x).clamp(0.0, 1.0) * 255.0).round() as u8,
                ];
                img.put_pixel(x as u32, y as u32, image::Rgb(px));
            }
        }
        img.save(path)?;
        Ok(())
    }
}

/// Boolean pixel grid paired with an image or map of the same size.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryMask {
    h: usize,
    w: usize,
    data: Vec<bool>,
}

impl BinaryMask {
    pub fn new(h: usize, w: usize) -> Self {
        BinaryMask {
            h,
            w,
            data: vec![false; h * w],
        }
    }

    pub fn from_vec(h: usize, w: usize, data: Vec<bool>) -> Result<Self> {
        if data.len() != h * w {
            return Err(Error::Shape(format!("mask {h}x{w} needs {} bits", h * w)));
        }
        Ok(BinaryMask { h, w, data })
    }

    pub fn height(&self) -> usize {
        self.h
    }

    pub fn width(&self) -> usize {
        self.w
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize) -> bool {
        self.data[y * self.w + x]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, v: bool) {
        self.data[y * self.w + x] = v;
    }

    pub fn data(&self) -> &[bool] {
        &self.data
    }

    pub fn count(&self) -> usize {
        self.data.iter().filter(|&&b| b).count()
    }

    pub fn union_with(&mut self, other: &BinaryMask) {
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a |= b;
        }
    }

    /// Writes a 1-bit-per-pixel grayscale PNG.
    pub fn save_png(&self, path: &Path) -> Result<()> {
        let file = std::fs::File::create(path)?;
        let wbuf = std::io::BufWriter::new(file);
        let mut enc = png::Encoder::new(wbuf, self.w as u32, self.h as u32);
        enc.set_color(png::ColorType::Grayscale);
        enc.set_depth(png::BitDepth::One);
        let mut writer = enc.write_header().map_err(|e| Error::Png(e.to_string()))?;
        let row_bytes = self.w.div_ceil(8);
        let mut packed = vec![0u8; row_bytes * self.h];
        for y in 0..self.h {
            for x in 0..self.w {
                if self.get(y, x) {
                    packed[y * row_bytes + x / 8] |= 0x80 >> (x % 8);
                }
            }
        }
        writer
            .write_image_data(&packed)
            .map_err(|e| Error::Png(e.to_string()))?;
        Ok(())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        let mut decoder = png::Decoder::new(std::io::BufReader::new(file));
        decoder.set_transformations(png::Transformations::EXPAND);
        let mut reader = decoder.read_info().map_err(|e| Error::Png(e.to_string()))?;
        let mut buf = vec![0u8; reader.output_buffer_size()];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::Png(e.to_string()))?;
        let (w, h) = (info.width as usize, info.height as usize);
        if info.color_type != png::ColorType::Grayscale {
            return Err(Error::Png("mask PNG must be grayscale".into()));
        }
        let data: Vec<bool> = buf[..w * h].iter().map(|&v| v > 127).collect();
        BinaryMask::from_vec(h, w, data)
    }
}

/// Tight bounding box (inclusive corners) of the field of view.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FovBox {
    pub y0: usize,
    pub x0: usize,
    pub y1: usize,
    pub x1: usize,
}

impl FovBox {
    pub fn full(h: usize, w: usize) -> Self {
        FovBox {
            y0: 0,
            x0: 0,
            y1: h - 1,
            x1: w - 1,
        }
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }
}

/// Circular field of view in pixel-center coordinates.
#[derive(Debug, Clone, Copy)]
pub struct Fov {
    pub cy: f32,
    pub cx: f32,
    pub radius: f32,
}

impl Fov {
    /// Inscribed disc of a square image.
    pub fn inscribed(size: usize) -> Self {
        Fov {
            cy: (size as f32 - 1.0) / 2.0,
            cx: (size as f32 - 1.0) / 2.0,
            radius: size as f32 / 2.0,
        }
    }

    #[inline]
    pub fn dist(&self, y: usize, x: usize) -> f32 {
        let dy = y as f32 - self.cy;
        let dx = x as f32 - self.cx;
        (dy * dy + dx * dx).sqrt()
    }
}

/// Preprocessing parameters: FOV extraction threshold, target size and the
/// contrast-enhancement constants.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSpec {
    pub target_size: usize,
    pub fov_threshold: f32,
    pub graham_alpha: f32,
    pub graham_beta: f32,
    pub graham_gamma: f32,
    /// Blur sigma as a fraction of the FOV radius.
    pub blur_sigma_fraction: f32,
}

impl Default for PreprocessSpec {
    fn default() -> Self {
        PreprocessSpec {
            target_size: 128,
            fov_threshold: 0.06,
            graham_alpha: 4.0,
            graham_beta: -4.0,
            graham_gamma: 0.5,
            blur_sigma_fraction: 1.0 / 30.0,
        }
    }
}

impl PreprocessSpec {
    pub fn validate(&self) -> Result<()> {
        if self.target_size < 32 {
            return Err(Error::InvalidArgument(format!(
                "target_size must be >= 32, got {}",
                self.target_size
            )));
        }
        if self.blur_sigma_fraction <= 0.0 {
            return Err(Error::InvalidArgument("blur sigma fraction must be > 0".into()));
        }
        Ok(())
    }
}

/// Geometric transform applied by preprocessing: square crop at
/// `(y0, x0)` with side `side`, then rescale to `target`.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SpaceMap {
    pub y0: i64,
    pub x0: i64,
    pub side: usize,
    pub target: usize,
}

impl SpaceMap {
    pub fn is_identity_for(&self, h: usize, w: usize) -> bool {
        self.y0 == 0 && self.x0 == 0 && self.side == self.target && h == self.side && w == self.side
    }

    /// Maps preprocessed coordinates back to original pixel coordinates.
    pub fn to_original(&self, y: f32, x: f32) -> (f32, f32) {
        let s = self.side as f32 / self.target as f32;
        (
            self.y0 as f32 + (y + 0.5) * s - 0.5,
            self.x0 as f32 + (x + 0.5) * s - 0.5,
        )
    }
}

/// Tight bounding box of pixels whose mean-channel intensity exceeds the
/// threshold; whole frame when nothing does.
pub fn extract_fov_bbox(image: &Image, threshold: f32) -> FovBox {
    let (h, w) = (image.height(), image.width());
    let (mut y0, mut x0, mut y1, mut x1) = (usize::MAX, usize::MAX, 0usize, 0usize);
    let mut any = false;
    for y in 0..h {
        for x in 0..w {
            if image.mean_intensity(y, x) > threshold {
                any = true;
                y0 = y0.min(y);
                x0 = x0.min(x);
                y1 = y1.max(y);
                x1 = x1.max(x);
            }
        }
    }
    if any {
        FovBox { y0, x0, y1, x1 }
    } else {
        FovBox::full(h, w)
    }
}

/// Crop to the square centered on the box (side = max dimension); pixels
/// falling outside the source frame are black.
pub fn square_crop(image: &Image, bbox: &FovBox) -> (Image, i64, i64, usize) {
    let side = bbox.height().max(bbox.width());
    let cy = (bbox.y0 + bbox.y1) as i64 / 2;
    let cx = (bbox.x0 + bbox.x1) as i64 / 2;
    let y0 = cy - side as i64 / 2 + if side % 2 == 0 { 1 } else { 0 };
    let x0 = cx - side as i64 / 2 + if side % 2 == 0 { 1 } else { 0 };
    // Prefer the tight origin when the box is already square.
    let y0 = if bbox.height() == side { bbox.y0 as i64 } else { y0 };
    let x0 = if bbox.width() == side { bbox.x0 as i64 } else { x0 };
    let mut out = Image::new(side, side);
    for c in 0..3 {
        for y in 0..side {
            let sy = y0 + y as i64;
            if sy < 0 || sy >= image.height() as i64 {
                continue;
            }
            for x in 0..side {
                let sx = x0 + x as i64;
                if sx < 0 || sx >= image.width() as i64 {
                    continue;
                }
                out.set(c, y, x, image.get(c, sy as usize, sx as usize));
            }
        }
    }
    (out, y0, x0, side)
}

/// Bilinear resampling of one plane with half-pixel centers.
pub fn resample_bilinear_plane(src: &[f32], sh: usize, sw: usize, th: usize, tw: usize) -> Vec<f32> {
    let mut out = vec![0.0f32; th * tw];
    let sy_scale = sh as f32 / th as f32;
    let sx_scale = sw as f32 / tw as f32;
    for y in 0..th {
        let fy = ((y as f32 + 0.5) * sy_scale - 0.5).clamp(0.0, (sh - 1) as f32);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(sh - 1);
        let wy = fy - y0 as f32;
        for x in 0..tw {
            let fx = ((x as f32 + 0.5) * sx_scale - 0.5).clamp(0.0, (sw - 1) as f32);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(sw - 1);
            let wx = fx - x0 as f32;
            let v00 = src[y0 * sw + x0];
            let v01 = src[y0 * sw + x1];
            let v10 = src[y1 * sw + x0];
            let v11 = src[y1 * sw + x1];
            let top = v00 + (v01 - v00) * wx;
            let bot = v10 + (v11 - v10) * wx;
            out[y * tw + x] = top + (bot - top) * wy;
        }
    }
    out
}

/// Standard bilinear resize to a square target; resizing to the identical
/// size returns the input unchanged.
pub fn resize_bilinear(image: &Image, target: usize) -> Result<Image> {
    if target == 0 {
        return Err(Error::InvalidArgument("resize target must be >= 1".into()));
    }
    if image.height() == target && image.width() == target {
        return Ok(image.clone());
    }
    let mut data = Vec::with_capacity(3 * target * target);
    for c in 0..3 {
        data.extend(resample_bilinear_plane(
            image.plane(c),
            image.height(),
            image.width(),
            target,
            target,
        ));
    }
    Image::from_planar(target, target, data)
}

/// Separable Gaussian blur; border taps are renormalized over the in-frame
/// part of the kernel.
pub fn gaussian_blur(image: &Image, sigma: f32) -> Image {
    let (h, w) = (image.height(), image.width());
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    for i in 0..=2 * radius {
        let d = i as f32 - radius as f32;
        kernel.push((-d * d / (2.0 * sigma * sigma)).exp());
    }
    let mut out = Image::new(h, w);
    let mut tmp = vec![0.0f32; h * w];
    for c in 0..3 {
        let src = image.plane(c);
        // horizontal
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sx = x as isize + i as isize - radius as isize;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    acc += k * src[y * w + sx as usize];
                    norm += k;
                }
                tmp[y * w + x] = acc / norm;
            }
        }
        // vertical
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                let mut norm = 0.0;
                for (i, &k) in kernel.iter().enumerate() {
                    let sy = y as isize + i as isize - radius as isize;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    acc += k * tmp[sy as usize * w + x];
                    norm += k;
                }
                out.set(c, y, x, acc / norm);
            }
        }
    }
    out
}

/// Local-contrast enhancement: `clamp(alpha*I + beta*blur(I) + gamma)` with
/// the blur sigma tied to the FOV radius. The outer 5% of the FOV radius is
/// blended toward mid-gray and everything outside the FOV is set to
/// mid-gray, suppressing the rim artifact the blur would otherwise leave.
pub fn contrast_enhance(image: &Image, fov: &Fov, spec: &PreprocessSpec) -> Image {
    let sigma = (spec.blur_sigma_fraction * fov.radius).max(0.5);
    let blurred = gaussian_blur(image, sigma);
    let (h, w) = (image.height(), image.width());
    let mut out = Image::new(h, w);
    let ring_start = fov.radius * 0.95;
    for y in 0..h {
        for x in 0..w {
            let d = fov.dist(y, x);
            for c in 0..3 {
                let v = spec.graham_alpha * image.get(c, y, x)
                    + spec.graham_beta * blurred.get(c, y, x)
                    + spec.graham_gamma;
                let v = if d >= fov.radius {
                    0.5
                } else if d > ring_start {
                    let t = (d - ring_start) / (fov.radius - ring_start);
                    v * (1.0 - t) + 0.5 * t
                } else {
                    v
                };
                out.set(c, y, x, v.clamp(0.0, 1.0));
            }
        }
    }
    out
}

/// Full chain: FOV bounding box, square crop, rescale, contrast enhance.
/// Also returns the geometric transform for mapping results back.
pub fn preprocess_with_transform(image: &Image, spec: &PreprocessSpec) -> Result<(Image, SpaceMap)> {
    spec.validate()?;
    let bbox = extract_fov_bbox(image, spec.fov_threshold);
    let (cropped, y0, x0, side) = square_crop(image, &bbox);
    let resized = resize_bilinear(&cropped, spec.target_size)?;
    let fov = Fov::inscribed(spec.target_size);
    let enhanced = contrast_enhance(&resized, &fov, spec);
    Ok((
        enhanced,
        SpaceMap {
            y0,
            x0,
            side,
            target: spec.target_size,
        },
    ))
}

pub fn preprocess(image: &Image, spec: &PreprocessSpec) -> Result<Image> {
    preprocess_with_transform(image, spec).map(|(img, _)| img)
}

/// Otsu binarization result.
#[derive(Debug, Clone)]
pub struct OtsuResult {
    pub mask: BinaryMask,
    /// Threshold in min-max-normalized units; the mask is exactly
    /// `normalized >= th_bin`.
    pub th_bin: f32,
    /// Chosen histogram cut in `1..=255` (quantized units).
    pub cut: u8,
    /// Set when the map is constant and no threshold exists; the mask is
    /// empty in that case.
    pub degenerate: bool,
}

/// Binarizes a nonnegative map: min-max normalize, quantize to a 256-bin
/// histogram, pick the cut maximizing between-class variance (lowest cut
/// wins ties), mask = pixels at or above the cut.
pub fn binarize_otsu(values: &[f32], h: usize, w: usize) -> Result<OtsuResult> {
    if values.len() != h * w {
        return Err(Error::Shape(format!(
            "map {h}x{w} needs {} values, got {}",
            h * w,
            values.len()
        )));
    }
    let mut lo = f32::INFINITY;
    let mut hi = f32::NEG_INFINITY;
    for &v in values {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if !(hi > lo) {
        return Ok(OtsuResult {
            mask: BinaryMask::new(h, w),
            th_bin: 0.0,
            cut: 0,
            degenerate: true,
        });
    }
    let scale = 255.0 / (hi - lo);
    let quant: Vec<u8> = values.iter().map(|&v| ((v - lo) * scale).round() as u8).collect();
    let mut hist = [0u64; 256];
    for &q in &quant {
        hist[q as usize] += 1;
    }
    let cut = otsu_cut(&hist).ok_or(Error::Degenerate("otsu: single occupied bin".into()));
    let cut = match cut {
        Ok(c) => c,
        // All mass in one bin after quantization: treat as constant.
        Err(_) => {
            return Ok(OtsuResult {
                mask: BinaryMask::new(h, w),
                th_bin: 0.0,
                cut: 0,
                degenerate: true,
            })
        }
    };
    let mask_bits: Vec<bool> = quant.iter().map(|&q| q >= cut).collect();
    Ok(OtsuResult {
        mask: BinaryMask::from_vec(h, w, mask_bits)?,
        th_bin: (cut as f32 - 0.5) / 255.0,
        cut,
        degenerate: false,
    })
}

/// Between-class-variance-maximizing cut over a 256-bin histogram using
/// running moments. `None` when fewer than two bins are occupied.
pub fn otsu_cut(hist: &[u64; 256]) -> Option<u8> {
    let total: u64 = hist.iter().sum();
    let occupied = hist.iter().filter(|&&h| h > 0).count();
    if total == 0 || occupied < 2 {
        return None;
    }
    let sum_all: f64 = hist.iter().enumerate().map(|(i, &h)| i as f64 * h as f64).sum();
    let mut w0 = 0f64;
    let mut sum0 = 0f64;
    let mut best = (f64::NEG_INFINITY, 0u8);
    for t in 1..=255u16 {
        let bin = (t - 1) as usize;
        w0 += hist[bin] as f64;
        sum0 += bin as f64 * hist[bin] as f64;
        let w1 = total as f64 - w0;
        if w0 == 0.0 {
            continue;
        }
        if w1 == 0.0 {
            break;
        }
        let m0 = sum0 / w0;
        let m1 = (sum_all - sum0) / w1;
        let var = w0 * w1 * (m0 - m1) * (m0 - m1);
        if var > best.0 {
            best = (var, t as u8);
        }
    }
    Some(best.1)
}

/// Selectively fills masked pixels by anisotropic diffusion oriented along
/// isophotes, marching inward from the mask boundary; unmasked pixels are
/// left untouched. The sweep stops when the largest per-pixel update drops
/// below 1e-4 or after 500 sweeps.
pub fn inpaint(image: &Image, mask: &BinaryMask, r_inp: usize) -> Result<Image> {
    let (h, w) = (image.height(), image.width());
    if mask.height() != h || mask.width() != w {
        return Err(Error::Shape(format!(
            "mask {}x{} does not match image {h}x{w}",
            mask.height(),
            mask.width()
        )));
    }
    if r_inp < 1 {
        return Err(Error::InvalidArgument("inpainting radius must be >= 1".into()));
    }
    let masked_count = mask.count();
    if masked_count == 0 {
        return Ok(image.clone());
    }
    if masked_count == h * w {
        return Err(Error::FullCoverageMask);
    }

    // Neighborhood offsets within the radius, excluding the center.
    let r = r_inp as isize;
    let mut offsets: Vec<(isize, isize, f32)> = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if dy == 0 && dx == 0 {
                continue;
            }
            let d2 = (dy * dy + dx * dx) as f32;
            if d2 <= (r * r) as f32 {
                offsets.push((dy, dx, d2));
            }
        }
    }

    // Breadth-first distance from the unmasked region: fill order.
    let mut order: Vec<(usize, usize)> = Vec::with_capacity(masked_count);
    let mut level = vec![u32::MAX; h * w];
    let mut queue = std::collections::VecDeque::new();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y, x) {
                level[y * w + x] = 0;
                queue.push_back((y, x));
            }
        }
    }
    while let Some((y, x)) = queue.pop_front() {
        let l = level[y * w + x];
        for (dy, dx) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1)] {
            let (ny, nx) = (y as i64 + dy, x as i64 + dx);
            if ny < 0 || nx < 0 || ny >= h as i64 || nx >= w as i64 {
                continue;
            }
            let (ny, nx) = (ny as usize, nx as usize);
            if mask.get(ny, nx) && level[ny * w + nx] == u32::MAX {
                level[ny * w + nx] = l + 1;
                order.push((ny, nx));
                queue.push_back((ny, nx));
            }
        }
    }

    let mut out = image.clone();
    // Seed each masked pixel from already-known neighbors, marching inward.
    let mut known: Vec<bool> = mask.data().iter().map(|&m| !m).collect();
    for &(y, x) in &order {
        for c in 0..3 {
            let mut acc = 0.0f32;
            let mut norm = 0.0f32;
            for &(dy, dx, d2) in &offsets {
                let (ny, nx) = (y as isize + dy, x as isize + dx);
                if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                    continue;
                }
                let (ny, nx) = (ny as usize, nx as usize);
                if !known[ny * w + nx] {
                    continue;
                }
                let wgt = 1.0 / d2;
                acc += wgt * out.get(c, ny, nx);
                norm += wgt;
            }
            if norm > 0.0 {
                out.set(c, y, x, acc / norm);
            }
        }
        known[y * w + x] = true;
    }

    // Gauss-Seidel sweeps: weighted average over the neighborhood with
    // weights boosted along the local isophote direction. Opposite
    // neighbors share a weight, so linear fields are exact fixed points.
    const MAX_SWEEPS: usize = 500;
    const TOL: f32 = 1e-4;
    const DIR_FLOOR: f32 = 0.15;
    for _ in 0..MAX_SWEEPS {
        let mut max_update = 0.0f32;
        for &(y, x) in &order {
            for c in 0..3 {
                // Central-difference gradient on the working image.
                let xm = if x > 0 { out.get(c, y, x - 1) } else { out.get(c, y, x) };
                let xp = if x + 1 < w { out.get(c, y, x + 1) } else { out.get(c, y, x) };
                let ym = if y > 0 { out.get(c, y - 1, x) } else { out.get(c, y, x) };
                let yp = if y + 1 < h { out.get(c, y + 1, x) } else { out.get(c, y, x) };
                let gx = (xp - xm) * 0.5;
                let gy = (yp - ym) * 0.5;
                let gn = (gx * gx + gy * gy).sqrt();
                // Isophote direction = gradient rotated 90 degrees.
                let (ty, tx) = if gn > 1e-8 { (-gx / gn, gy / gn) } else { (0.0, 0.0) };
                let mut acc = 0.0f32;
                let mut norm = 0.0f32;
                for &(dy, dx, d2) in &offsets {
                    let (ny, nx) = (y as isize + dy, x as isize + dx);
                    if ny < 0 || nx < 0 || ny >= h as isize || nx >= w as isize {
                        continue;
                    }
                    let dlen = d2.sqrt();
                    let along = if gn > 1e-8 {
                        ((dy as f32 * ty + dx as f32 * tx) / dlen).abs()
                    } else {
                        0.0
                    };
                    let wgt = (DIR_FLOOR + along) / d2;
                    acc += wgt * out.get(c, ny as usize, nx as usize);
                    norm += wgt;
                }
                let next = (acc / norm).clamp(0.0, 1.0);
                let prev = out.get(c, y, x);
                let delta = (next - prev).abs();
                if delta > max_update {
                    max_update = delta;
                }
                out.set(c, y, x, next);
            }
        }
        if max_update < TOL {
            break;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn disc_image(size: usize, cy: f32, cx: f32, radius: f32, value: f32) -> Image {
        let mut img = Image::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f32 - cy).powi(2) + (x as f32 - cx).powi(2)).sqrt();
                if d <= radius {
                    for c in 0..3 {
                        img.set(c, y, x, value);
                    }
                }
            }
        }
        img
    }

    #[test]
    fn fov_bbox_of_centered_disc() {
        // Bright disc radius 40 at (64,64) in a 128x128 black frame:
        // brute-force scan puts the box at (24,24)-(104,104), +-1px.
        let img = disc_image(128, 64.0, 64.0, 40.0, 0.8);
        let bb = extract_fov_bbox(&img, 0.06);
        for (got, want) in [(bb.y0, 24), (bb.x0, 24), (bb.y1, 104), (bb.x1, 104)] {
            assert!((got as i64 - want as i64).abs() <= 1, "{bb:?}");
        }
    }

    #[test]
    fn fov_bbox_degenerate_frames() {
        let bright = Image::from_planar(4, 4, vec![0.9; 48]).unwrap();
        assert_eq!(extract_fov_bbox(&bright, 0.06), FovBox::full(4, 4));
        let black = Image::new(4, 4);
        assert_eq!(extract_fov_bbox(&black, 0.06), FovBox::full(4, 4));
    }

    #[test]
    fn resize_identity_and_constant() {
        let img = disc_image(16, 8.0, 8.0, 5.0, 0.7);
        let same = resize_bilinear(&img, 16).unwrap();
        assert_eq!(same.data(), img.data());

        let flat = Image::from_planar(7, 7, vec![0.42; 147]).unwrap();
        let resized = resize_bilinear(&flat, 13).unwrap();
        for &v in resized.data() {
            assert!((v - 0.42).abs() < 1e-6);
        }
        assert!(resize_bilinear(&flat, 0).is_err());
    }

    #[test]
    fn resize_checkerboard_center_is_half() {
        // 2x2 checkerboard {0,1;1,0} -> 3x3: the center lands exactly
        // between all four samples, hand evaluation gives 0.5.
        let mut img = Image::new(2, 2);
        for c in 0..3 {
            img.set(c, 0, 1, 1.0);
            img.set(c, 1, 0, 1.0);
        }
        let up = resize_bilinear(&img, 3).unwrap();
        for c in 0..3 {
            assert!((up.get(c, 1, 1) - 0.5).abs() < 1e-6);
        }
    }

    #[test]
    fn contrast_enhance_constant_is_mid_gray() {
        let img = Image::from_planar(32, 32, vec![0.3; 3 * 32 * 32]).unwrap();
        let fov = Fov::inscribed(32);
        let out = contrast_enhance(&img, &fov, &PreprocessSpec::default());
        for y in 0..32 {
            for x in 0..32 {
                for c in 0..3 {
                    assert!((out.get(c, y, x) - 0.5).abs() < 1e-5, "at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn contrast_enhance_sharpens_an_impulse() {
        // A bright impulse on a flat background must gain contrast
        // (unsharp-mask behavior), evaluated directly on a small patch.
        let mut img = Image::from_planar(33, 33, vec![0.4; 3 * 33 * 33]).unwrap();
        for c in 0..3 {
            img.set(c, 16, 16, 0.6);
        }
        let fov = Fov::inscribed(33);
        let out = contrast_enhance(&img, &fov, &PreprocessSpec::default());
        let in_contrast = 0.6 - 0.4;
        let out_contrast = out.get(0, 16, 16) - out.get(0, 16, 8);
        assert!(
            out_contrast > in_contrast,
            "expected sharpening: {out_contrast} vs {in_contrast}"
        );
        for &v in out.data() {
            assert!((0.0..=1.0).contains(&v));
        }
    }

    #[test]
    fn otsu_separates_a_bimodal_map() {
        let mut vals = vec![0.0f32; 64];
        for v in vals.iter_mut().skip(32) {
            *v = 1.0;
        }
        let res = binarize_otsu(&vals, 8, 8).unwrap();
        assert!(!res.degenerate);
        assert_eq!(res.mask.count(), 32);
        for (i, &v) in vals.iter().enumerate() {
            assert_eq!(res.mask.data()[i], v == 1.0);
        }
    }

    #[test]
    fn otsu_constant_map_is_degenerate() {
        let vals = vec![0.25f32; 100];
        let res = binarize_otsu(&vals, 10, 10).unwrap();
        assert!(res.degenerate);
        assert_eq!(res.mask.count(), 0);
    }

    /// Exhaustive per-cut recomputation, the independent oracle for the
    /// running-moments implementation.
    fn otsu_brute_force(hist: &[u64; 256]) -> Option<u8> {
        let total: u64 = hist.iter().sum();
        let mut best: Option<(f64, u8)> = None;
        for t in 0..=255u16 {
            let w0: u64 = hist[..t as usize].iter().sum();
            let w1 = total - w0;
            if w0 == 0 || w1 == 0 {
                continue;
            }
            let m0: f64 = hist[..t as usize]
                .iter()
                .enumerate()
                .map(|(i, &h)| i as f64 * h as f64)
                .sum::<f64>()
                / w0 as f64;
            let m1: f64 = hist[t as usize..]
                .iter()
                .enumerate()
                .map(|(i, &h)| (i + t as usize) as f64 * h as f64)
                .sum::<f64>()
                / w1 as f64;
            let var = w0 as f64 * w1 as f64 * (m0 - m1) * (m0 - m1);
            if best.map_or(true, |(bv, _)| var > bv) {
                best = Some((var, t as u8));
            }
        }
        best.map(|(_, t)| t)
    }

    #[test]
    fn otsu_matches_brute_force_on_random_histograms() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        for _ in 0..50 {
            let mut hist = [0u64; 256];
            let modes = rng.gen_range(1..4);
            for _ in 0..modes {
                let center = rng.gen_range(0..256) as i64;
                let spread = rng.gen_range(2..40) as i64;
                for _ in 0..rng.gen_range(50..400) {
                    let v = (center + rng.gen_range(-spread..=spread)).clamp(0, 255);
                    hist[v as usize] += 1;
                }
            }
            assert_eq!(otsu_cut(&hist), otsu_brute_force(&hist));
        }
    }

    #[test]
    fn inpaint_empty_mask_is_identity() {
        let img = disc_image(24, 12.0, 12.0, 8.0, 0.6);
        let mask = BinaryMask::new(24, 24);
        let out = inpaint(&img, &mask, 3).unwrap();
        assert_eq!(out.data(), img.data());
    }

    #[test]
    fn inpaint_constant_image_is_fixed_point() {
        let img = Image::from_planar(24, 24, vec![0.37; 3 * 24 * 24]).unwrap();
        let mut mask = BinaryMask::new(24, 24);
        for y in 8..16 {
            for x in 8..16 {
                mask.set(y, x, true);
            }
        }
        let out = inpaint(&img, &mask, 3).unwrap();
        for &v in out.data() {
            assert!((v - 0.37).abs() < 1e-5);
        }
    }

    #[test]
    fn inpaint_reconstructs_linear_ramp_inside_disc() {
        // Harmonic-style fill reproduces linear fields; the analytic ramp
        // is the oracle.
        let size = 64;
        let mut img = Image::new(size, size);
        let ramp = |y: usize, x: usize| 0.2 + 0.6 * (y + x) as f32 / (2.0 * (size - 1) as f32);
        for y in 0..size {
            for x in 0..size {
                for c in 0..3 {
                    img.set(c, y, x, ramp(y, x));
                }
            }
        }
        let mut mask = BinaryMask::new(size, size);
        for y in 0..size {
            for x in 0..size {
                let d = ((y as f32 - 32.0).powi(2) + (x as f32 - 32.0).powi(2)).sqrt();
                if d <= 10.0 {
                    mask.set(y, x, true);
                }
            }
        }
        let out = inpaint(&img, &mask, 3).unwrap();
        let mut max_err = 0.0f32;
        for y in 0..size {
            for x in 0..size {
                if mask.get(y, x) {
                    max_err = max_err.max((out.get(0, y, x) - ramp(y, x)).abs());
                }
            }
        }
        assert!(max_err < 0.02, "ramp reconstruction error {max_err}");
        // Locality: pixels outside the mask are bitwise untouched.
        for y in 0..size {
            for x in 0..size {
                if !mask.get(y, x) {
                    for c in 0..3 {
                        assert_eq!(out.get(c, y, x).to_bits(), img.get(c, y, x).to_bits());
                    }
                }
            }
        }
    }

    #[test]
    fn inpaint_rejects_full_coverage() {
        let img = Image::new(8, 8);
        let mask = BinaryMask::from_vec(8, 8, vec![true; 64]).unwrap();
        assert!(matches!(inpaint(&img, &mask, 3), Err(Error::FullCoverageMask)));
    }

    #[test]
    fn mask_png_roundtrip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let mut mask = BinaryMask::new(13, 9);
        for y in 0..13 {
            for x in 0..9 {
                mask.set(y, x, (y * 31 + x * 7) % 3 == 0);
            }
        }
        let path = dir.path().join("m.png");
        mask.save_png(&path).unwrap();
        let back = BinaryMask::load_png(&path).unwrap();
        assert_eq!(back, mask);
    }

    #[test]
    fn image_png_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let img = disc_image(20, 10.0, 10.0, 7.0, 0.63);
        let path = dir.path().join("i.png");
        img.save_png(&path).unwrap();
        let back = Image::load_png(&path).unwrap();
        for (a, b) in back.data().iter().zip(img.data()) {
            assert!((a - b).abs() <= 0.5 / 255.0 + 1e-6);
        }
    }
}
