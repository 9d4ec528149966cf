//! RGB face images in `[-1, 1]` and their 8-bit PNG encoding.

use std::fs::File;
use std::io::{BufReader, BufWriter};
use std::path::Path;

use crate::error::{shape_err, Error, Result};
use crate::tensor::{Real, Tensor};

/// Square RGB image, channel-major `[3, size, size]`, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct FaceImage {
    pub size: usize,
    pub data: Vec<f32>,
}

pub fn to_byte(v: f32) -> u8 {
    ((v.clamp(-1.0, 1.0) + 1.0) * 127.5).round() as u8
}

pub fn from_byte(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

impl FaceImage {
    pub fn new(size: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != 3 * size * size || size == 0 {
            return shape_err("face_image", format!("{size}x{size} RGB needs {} values, got {}", 3 * size * size, data.len()));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("image pixels".into()));
        }
        Ok(FaceImage {
            size,
            data: data.into_iter().map(|v| v.clamp(-1.0, 1.0)).collect(),
        })
    }

    pub fn filled(size: usize, rgb: [f32; 3]) -> Self {
        let plane = size * size;
        FaceImage {
            size,
            data: (0..3 * plane).map(|i| rgb[i / plane]).collect(),
        }
    }

    pub fn at(&self, channel: usize, y: usize, x: usize) -> f32 {
        self.data[(channel * self.size + y) * self.size + x]
    }

    pub fn pixel(&self, y: usize, x: usize) -> [f32; 3] {
        [self.at(0, y, x), self.at(1, y, x), self.at(2, y, x)]
    }

    /// Rounds every value onto the 8-bit grid so that a PNG round trip is exact.
    pub fn quantized(&self) -> Self {
        FaceImage {
            size: self.size,
            data: self.data.iter().map(|&v| from_byte(to_byte(v))).collect(),
        }
    }

    pub fn mean_abs_diff(&self, other: &FaceImage) -> Result<f64> {
        if self.size != other.size {
            return shape_err("mean_abs_diff", format!("{} vs {}", self.size, other.size));
        }
        let s: f64 = self.data.iter().zip(&other.data).map(|(a, b)| (a - b).abs() as f64).sum();
        Ok(s / self.data.len() as f64)
    }

    pub fn to_tensor<T: Real>(&self) -> Tensor<T> {
        batch_tensor(&[self]).expect("a single image always forms a batch")
    }

    /// Splits a `[N, 3, R, R]` tensor into images.
    pub fn from_batch<T: Real>(t: &Tensor<T>) -> Result<Vec<FaceImage>> {
        let &[n, 3, h, w] = t.shape() else {
            return shape_err("from_batch", format!("expected [N,3,R,R], got {:?}", t.shape()));
        };
        if h != w {
            return shape_err("from_batch", format!("non-square {h}x{w}"));
        }
        let data = t.data();
        let per = 3 * h * w;
        (0..n)
            .map(|i| FaceImage::new(h, data[i * per..(i + 1) * per].iter().map(|v| v.as_f64() as f32).collect()))
            .collect()
    }

    pub fn save_png(&self, path: &Path) -> Result<()> {
        write_png(path, self.size, self.size, &self.to_rgb8())
    }

    pub fn load_png(path: &Path) -> Result<Self> {
        let (w, h, rgb) = read_png(path)?;
        if w != h {
            return Err(Error::Image(format!("{}: non-square image {w}x{h}", path.display())));
        }
        let plane = w * h;
        let mut data = vec![0.0; 3 * plane];
        for (p, px) in rgb.chunks_exact(3).enumerate() {
            for c in 0..3 {
                data[c * plane + p] = from_byte(px[c]);
            }
        }
        FaceImage::new(w, data)
    }

    /// Interleaved 8-bit RGB rows.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let plane = self.size * self.size;
        (0..plane).flat_map(|p| (0..3).map(move |c| (c, p))).map(|(c, p)| to_byte(self.data[c * plane + p])).collect()
    }
}

pub fn batch_tensor<T: Real>(images: &[&FaceImage]) -> Result<Tensor<T>> {
    let Some(first) = images.first() else {
        return shape_err("batch_tensor", "empty batch");
    };
    let r = first.size;
    if images.iter().any(|i| i.size != r) {
        return shape_err("batch_tensor", "images of different sizes");
    }
    let data = images.iter().flat_map(|i| i.data.iter()).map(|&v| T::of(v as f64)).collect();
    Tensor::from_vec(&[images.len(), 3, r, r], data)
}

/// Tiles equally sized images into rows; returns `(width, height, rgb)`.
pub fn grid(rows: &[Vec<&FaceImage>]) -> Result<(usize, usize, Vec<u8>)> {
    let Some(first) = rows.first().and_then(|r| r.first()) else {
        return shape_err("grid", "no images");
    };
    let r = first.size;
    let cols = rows.iter().map(|row| row.len()).max().unwrap_or(0);
    if rows.iter().flatten().any(|i| i.size != r) {
        return shape_err("grid", "images of different sizes");
    }
    let (w, h) = (r * cols, r * rows.len());
    let mut out = vec![0u8; w * h * 3];
    for (ri, row) in rows.iter().enumerate() {
        for (k, img) in row.iter().enumerate() {
            let rgb = img.to_rgb8();
            for y in 0..r {
                let dst = ((ri * r + y) * w + k * r) * 3;
                out[dst..dst + r * 3].copy_from_slice(&rgb[y * r * 3..(y + 1) * r * 3]);
            }
        }
    }
    Ok((w, h, out))
}

pub fn write_png(path: &Path, width: usize, height: usize, rgb: &[u8]) -> Result<()> {
    let file = BufWriter::new(File::create(path)?);
    let mut enc = png::Encoder::new(file, width as u32, height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    writer.write_image_data(rgb).map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    writer.finish().map_err(|e| Error::Image(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Reads an 8-bit RGB or RGBA PNG; returns `(width, height, rgb)`.
pub fn read_png(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let file = BufReader::new(File::open(path)?);
    let err = |e: png::DecodingError| Error::Image(format!("{}: {e}", path.display()));
    let mut reader = png::Decoder::new(file).read_info().map_err(err)?;
    let mut buf = vec![0; reader.output_buffer_size().ok_or_else(|| Error::Image("PNG too large".into()))?];
    let info = reader.next_frame(&mut buf).map_err(err)?;
    if info.bit_depth != png::BitDepth::Eight {
        return Err(Error::Image(format!("{}: only 8-bit PNGs are supported", path.display())));
    }
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let rgb = match info.color_type {
        png::ColorType::Rgb => buf.to_vec(),
        png::ColorType::Rgba => buf.chunks_exact(4).flat_map(|p| [p[0], p[1], p[2]]).collect(),
        other => return Err(Error::Image(format!("{}: unsupported color type {other:?}", path.display()))),
    };
    Ok((w, h, rgb))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_mapping_endpoints() {
        assert_eq!(to_byte(-1.0), 0);
        assert_eq!(to_byte(1.0), 255);
        assert_eq!(from_byte(0), -1.0);
        assert_eq!(from_byte(255), 1.0);
        for b in 0..=255u8 {
            assert_eq!(to_byte(from_byte(b)), b);
        }
    }

    #[test]
    fn png_round_trip_of_quantized_image_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let img = FaceImage::new(4, (0..48).map(|i| (i as f32 / 24.0) - 1.0).collect()).unwrap().quantized();
        let path = dir.path().join("a.png");
        img.save_png(&path).unwrap();
        assert_eq!(FaceImage::load_png(&path).unwrap(), img);
    }

    #[test]
    fn batch_layout() {
        let a = FaceImage::filled(2, [0.1, 0.2, 0.3]);
        let b = FaceImage::filled(2, [-0.1, -0.2, -0.3]);
        let t = batch_tensor::<f32>(&[&a, &b]).unwrap();
        assert_eq!(t.shape(), &[2, 3, 2, 2]);
        assert_eq!(FaceImage::from_batch(&t).unwrap(), vec![a, b]);
    }
}
