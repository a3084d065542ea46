//! 8-bit RGB images, binary PPM (P6) IO and bilinear resampling.

use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use crate::bbox::BoundingBox;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    width: usize,
    height: usize,
    /// Interleaved RGB, row-major.
    data: Vec<u8>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize, data: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::InvalidArgument("image dimensions must be positive".into()));
        }
        if data.len() != width * height * 3 {
            return Err(Error::Shape(format!(
                "{width}x{height} RGB image needs {} bytes, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(RgbImage { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [u8; 3]) -> Self {
        let data = rgb.iter().copied().cycle().take(width * height * 3).collect();
        RgbImage { width, height, data }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn get(&self, x: usize, y: usize) -> [u8; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn put(&mut self, x: usize, y: usize, rgb: [u8; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn full_box(&self) -> BoundingBox {
        BoundingBox::new(0, 0, self.width, self.height).expect("image is nonempty")
    }

    pub fn flip_horizontal(&self) -> RgbImage {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.put(self.width - 1 - x, y, self.get(x, y));
            }
        }
        out
    }

    /// Planar `[3, H, W]` tensor with values in `[0, 255]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let plane = self.width * self.height;
        let mut out = vec![0f32; 3 * plane];
        for (i, px) in self.data.chunks_exact(3).enumerate() {
            for c in 0..3 {
                out[c * plane + i] = f32::from(px[c]);
            }
        }
        Tensor::new(vec![3, self.height, self.width], out).expect("sizes agree")
    }

    /// Channel-mean intensity as an `[H, W]` tensor.
    pub fn to_gray(&self) -> Tensor<f32> {
        let data = self
            .data
            .chunks_exact(3)
            .map(|p| (f32::from(p[0]) + f32::from(p[1]) + f32::from(p[2])) / 3.0)
            .collect();
        Tensor::new(vec![self.height, self.width], data).expect("sizes agree")
    }

    /// Bilinear resample of the `region` (clamped to its own pixels) into a
    /// `side_w x side_h` planar tensor with values in `[0, 255]`.
    pub fn crop_resize(&self, region: &BoundingBox, out_w: usize, out_h: usize) -> Result<Tensor<f32>> {
        if out_w == 0 || out_h == 0 {
            return Err(Error::InvalidArgument("resize target must be positive".into()));
        }
        let region = region.clip(self.width, self.height).ok_or_else(|| {
            Error::InvalidArgument(format!("crop {region:?} lies outside the image"))
        })?;
        let sx = region.w as f32 / out_w as f32;
        let sy = region.h as f32 / out_h as f32;
        let lo_x = region.x0 as f32;
        let hi_x = (region.x0 + region.w - 1) as f32;
        let lo_y = region.y0 as f32;
        let hi_y = (region.y0 + region.h - 1) as f32;
        let xs: Vec<(usize, usize, f32)> = (0..out_w)
            .map(|dx| {
                let fx = (lo_x + (dx as f32 + 0.5) * sx - 0.5).clamp(lo_x, hi_x);
                let x0 = fx.floor() as usize;
                let x1 = (x0 + 1).min(hi_x as usize);
                (x0, x1, fx - x0 as f32)
            })
            .collect();
        let plane = out_w * out_h;
        let mut out = vec![0f32; 3 * plane];
        for dy in 0..out_h {
            let fy = (lo_y + (dy as f32 + 0.5) * sy - 0.5).clamp(lo_y, hi_y);
            let y0 = fy.floor() as usize;
            let y1 = (y0 + 1).min(hi_y as usize);
            let ty = fy - y0 as f32;
            for (dx, &(x0, x1, tx)) in xs.iter().enumerate() {
                let p00 = self.get(x0, y0);
                let p01 = self.get(x1, y0);
                let p10 = self.get(x0, y1);
                let p11 = self.get(x1, y1);
                for c in 0..3 {
                    let top = f32::from(p00[c]) * (1.0 - tx) + f32::from(p01[c]) * tx;
                    let bot = f32::from(p10[c]) * (1.0 - tx) + f32::from(p11[c]) * tx;
                    out[c * plane + dy * out_w + dx] = top * (1.0 - ty) + bot * ty;
                }
            }
        }
        Tensor::new(vec![3, out_h, out_w], out)
    }

    /// Whole-image bilinear resize, rounded back to 8 bits.
    pub fn resize(&self, out_w: usize, out_h: usize) -> Result<RgbImage> {
        let t = self.crop_resize(&self.full_box(), out_w, out_h)?;
        Ok(RgbImage::from_tensor(&t))
    }

    /// Inverse of [`RgbImage::to_tensor`], rounding and clamping to `[0, 255]`.
    pub fn from_tensor(t: &Tensor<f32>) -> RgbImage {
        let (_, h, w) = t.dims3().expect("planar RGB tensor");
        let plane = w * h;
        let mut data = vec![0u8; plane * 3];
        for i in 0..plane {
            for c in 0..3 {
                data[i * 3 + c] = t.data()[c * plane + i].round().clamp(0.0, 255.0) as u8;
            }
        }
        RgbImage { width: w, height: h, data }
    }

    pub fn write_ppm<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        write!(out, "P6\n{} {}\n255\n", self.width, self.height)?;
        out.write_all(&self.data)
    }

    pub fn read_ppm<R: Read>(input: R) -> Result<Self> {
        let mut r = BufReader::new(input);
        let mut fields = Vec::new();
        while fields.len() < 4 {
            let mut line = String::new();
            if r.read_line(&mut line).map_err(|e| Error::format("ppm", e.to_string()))? == 0 {
                return Err(Error::format("ppm", "truncated header"));
            }
            let content = line.split('#').next().unwrap_or("");
            fields.extend(content.split_whitespace().map(str::to_owned));
        }
        if fields[0] != "P6" {
            return Err(Error::format("ppm", format!("expected P6, found {}", fields[0])));
        }
        let num = |s: &str| {
            s.parse::<usize>()
                .map_err(|_| Error::format("ppm", format!("bad header field {s:?}")))
        };
        let (w, h, max) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
        if max != 255 || fields.len() != 4 {
            return Err(Error::format("ppm", "only single-image 8-bit P6 is supported"));
        }
        let mut data = vec![0u8; w * h * 3];
        r.read_exact(&mut data)
            .map_err(|_| Error::format("ppm", "truncated pixel data"))?;
        RgbImage::new(w, h, data)
    }

    pub fn save_ppm(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = std::io::BufWriter::new(file);
        self.write_ppm(&mut w)
            .and_then(|_| w.flush())
            .map_err(|e| Error::io(path, e))
    }

    pub fn load_ppm(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_ppm(file)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ppm_roundtrip() {
        let mut img = RgbImage::filled(5, 3, [10, 20, 30]);
        img.put(4, 2, [255, 0, 7]);
        let mut buf = Vec::new();
        img.write_ppm(&mut buf).unwrap();
        assert!(buf.starts_with(b"P6\n5 3\n255\n"));
        assert_eq!(RgbImage::read_ppm(&buf[..]).unwrap(), img);
        assert!(RgbImage::read_ppm(&buf[..buf.len() - 1]).is_err());
        assert!(RgbImage::read_ppm(&b"P3\n1 1\n255\n"[..]).is_err());
    }

    #[test]
    fn identity_resize_is_exact() {
        let mut img = RgbImage::filled(4, 4, [0, 0, 0]);
        for y in 0..4 {
            for x in 0..4 {
                img.put(x, y, [(x * 40) as u8, (y * 40) as u8, 9]);
            }
        }
        assert_eq!(img.resize(4, 4).unwrap(), img);
    }

    #[test]
    fn crop_has_requested_extent_and_stays_inside_region() {
        let mut img = RgbImage::filled(10, 10, [0, 0, 0]);
        for y in 2..6 {
            for x in 3..8 {
                img.put(x, y, [200, 200, 200]);
            }
        }
        let b = BoundingBox::new(3, 2, 5, 4).unwrap();
        let t = img.crop_resize(&b, 16, 16).unwrap();
        assert_eq!(t.shape(), &[3, 16, 16]);
        assert!(t.data().iter().all(|&v| (v - 200.0).abs() < 1e-4));
    }

    #[test]
    fn two_to_one_downsample_averages_pairs() {
        // alternating rows of 0 and 200 collapse to a uniform 100
        let mut img = RgbImage::filled(8, 8, [0, 0, 0]);
        for y in (0..8).step_by(2) {
            for x in 0..8 {
                img.put(x, y, [200, 200, 200]);
            }
        }
        let t = img.crop_resize(&img.full_box(), 4, 4).unwrap();
        assert!(t.data().iter().all(|&v| (v - 100.0).abs() < 1e-4));
    }
}
