use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major float image with interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageF {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<f32>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ImageFormat {
    Png8,
    Pfm,
}

impl ImageF {
    pub fn zeros(width: usize, height: usize, channels: usize) -> Self {
        ImageF {
            width,
            height,
            channels,
            data: vec![0.0; width * height * channels],
        }
    }

    pub fn from_vec(width: usize, height: usize, channels: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != width * height * channels {
            return Err(Error::shape(
                format!("{width}x{height}x{channels} = {}", width * height * channels),
                data.len(),
            ));
        }
        Ok(ImageF {
            width,
            height,
            channels,
            data,
        })
    }

    pub fn num_pixels(&self) -> usize {
        self.width * self.height
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[f32] {
        let o = (y * self.width + x) * self.channels;
        &self.data[o..o + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [f32] {
        let o = (y * self.width + x) * self.channels;
        &mut self.data[o..o + self.channels]
    }

    pub fn same_shape(&self, other: &ImageF) -> bool {
        self.width == other.width && self.height == other.height && self.channels == other.channels
    }

    pub fn check_shape(&self, other: &ImageF) -> Result<()> {
        if self.same_shape(other) {
            Ok(())
        } else {
            Err(Error::shape(self.shape_string(), other.shape_string()))
        }
    }

    pub fn shape_string(&self) -> String {
        format!("{}x{}x{}", self.width, self.height, self.channels)
    }

    /// Extracts one channel as a single-channel image.
    pub fn channel(&self, c: usize) -> ImageF {
        let data = self.data.chunks(self.channels).map(|p| p[c]).collect();
        ImageF {
            width: self.width,
            height: self.height,
            channels: 1,
            data,
        }
    }
}

pub fn write_image(img: &ImageF, path: impl AsRef<Path>, format: ImageFormat) -> Result<()> {
    match format {
        ImageFormat::Png8 => write_png(img, path.as_ref()),
        ImageFormat::Pfm => write_pfm(img, path.as_ref()),
    }
}

/// Reads PNG (any bit depth, normalized to `[0, 1]`) or PFM, chosen by extension.
pub fn read_image(path: impl AsRef<Path>) -> Result<ImageF> {
    let path = path.as_ref();
    let is_pfm = path
        .extension()
        .is_some_and(|e| e.eq_ignore_ascii_case("pfm"));
    if is_pfm {
        read_pfm(path)
    } else {
        read_png(path)
    }
}

pub fn quantize(v: f32) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

fn write_png(img: &ImageF, path: &Path) -> Result<()> {
    use image::ExtendedColorType;
    let color = match img.channels {
        1 => ExtendedColorType::L8,
        3 => ExtendedColorType::Rgb8,
        4 => ExtendedColorType::Rgba8,
        c => {
            return Err(Error::UnsupportedChannels {
                format: "PNG",
                channels: c,
            })
        }
    };
    let bytes: Vec<u8> = img.data.iter().map(|&v| quantize(v)).collect();
    image::save_buffer_with_format(
        path,
        &bytes,
        img.width as u32,
        img.height as u32,
        color,
        image::ImageFormat::Png,
    )
    .map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Image(other.to_string()),
    })
}

fn read_png(path: &Path) -> Result<ImageF> {
    let dynimg = image::open(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::Io(io),
        other => Error::Image(other.to_string()),
    })?;
    let (w, h) = (dynimg.width() as usize, dynimg.height() as usize);
    let (channels, data): (usize, Vec<f32>) = match dynimg.color().channel_count() {
        1 | 2 => (1, dynimg.to_luma32f().into_raw()),
        3 => (3, dynimg.to_rgb32f().into_raw()),
        _ => (4, dynimg.to_rgba32f().into_raw()),
    };
    ImageF::from_vec(w, h, channels, data)
}

// PFM: "PF" (RGB) or "Pf" (grey), then "W H", then the scale whose sign
// selects endianness (negative = little-endian). Rows are stored bottom-up.
fn write_pfm(img: &ImageF, path: &Path) -> Result<()> {
    let tag = match img.channels {
        1 => "Pf",
        3 => "PF",
        c => {
            return Err(Error::UnsupportedChannels {
                format: "PFM",
                channels: c,
            })
        }
    };
    let mut out = BufWriter::new(File::create(path)?);
    write!(out, "{tag}\n{} {}\n-1.0\n", img.width, img.height)?;
    let row_len = img.width * img.channels;
    for y in (0..img.height).rev() {
        for v in &img.data[y * row_len..(y + 1) * row_len] {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    out.flush()?;
    Ok(())
}

fn read_pfm(path: &Path) -> Result<ImageF> {
    let bad = |message: &str| Error::Parse {
        path: path.to_path_buf(),
        line: 0,
        message: message.to_string(),
    };
    let mut reader = BufReader::new(File::open(path)?);
    let mut header = Vec::new();
    // Three whitespace-separated header fields after the tag; the scale line
    // ends with a single newline before the binary payload.
    let mut line = String::new();
    for _ in 0..3 {
        line.clear();
        if reader.read_line(&mut line)? == 0 {
            return Err(bad("truncated PFM header"));
        }
        header.push(line.trim().to_string());
    }
    let channels = match header[0].as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(bad("not a PFM file")),
    };
    let dims: Vec<usize> = header[1]
        .split_whitespace()
        .map(|t| t.parse().map_err(|_| bad("invalid PFM dimensions")))
        .collect::<Result<_>>()?;
    if dims.len() != 2 {
        return Err(bad("invalid PFM dimensions"));
    }
    let scale: f32 = header[2].parse().map_err(|_| bad("invalid PFM scale"))?;
    let little = scale < 0.0;
    let (w, h) = (dims[0], dims[1]);
    let mut raw = vec![0u8; w * h * channels * 4];
    reader.read_exact(&mut raw)?;
    let values: Vec<f32> = raw
        .chunks_exact(4)
        .map(|b| {
            let b = [b[0], b[1], b[2], b[3]];
            if little {
                f32::from_le_bytes(b)
            } else {
                f32::from_be_bytes(b)
            }
        })
        .collect();
    let row_len = w * channels;
    let mut data = Vec::with_capacity(values.len());
    for y in (0..h).rev() {
        data.extend_from_slice(&values[y * row_len..(y + 1) * row_len]);
    }
    ImageF::from_vec(w, h, channels, data)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn black_png() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("black.png");
        write_image(&ImageF::zeros(2, 2, 3), &p, ImageFormat::Png8).unwrap();
        let back = read_image(&p).unwrap();
        assert_eq!((back.width, back.height), (2, 2));
        assert!(back.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn pfm_is_bit_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("half.pfm");
        let img = ImageF::from_vec(1, 1, 1, vec![0.5]).unwrap();
        write_image(&img, &p, ImageFormat::Pfm).unwrap();
        assert_eq!(read_image(&p).unwrap(), img);

        let odd: Vec<f32> = (0..3 * 4 * 3).map(|i| (i as f32 * 0.37).sin() * 1e-7 - 3.0).collect();
        let img = ImageF::from_vec(3, 4, 3, odd).unwrap();
        let p = dir.path().join("rgb.pfm");
        write_image(&img, &p, ImageFormat::Pfm).unwrap();
        let back = read_image(&p).unwrap();
        assert!(img.data.iter().zip(&back.data).all(|(a, b)| a.to_bits() == b.to_bits()));
    }

    #[test]
    fn png_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.png");
        let data: Vec<f32> = (0..8 * 3).map(|i| i as f32 / 23.0).collect();
        let img = ImageF::from_vec(8, 1, 3, data.clone()).unwrap();
        write_image(&img, &p, ImageFormat::Png8).unwrap();
        let raw = image::open(&p).unwrap().to_rgb8().into_raw();
        for (v, b) in data.iter().zip(raw) {
            assert_eq!(b, (255.0 * v).round() as u8);
        }
    }

    #[test]
    fn unsupported_channels() {
        let dir = tempfile::tempdir().unwrap();
        let img = ImageF::zeros(2, 2, 2);
        assert!(matches!(
            write_image(&img, dir.path().join("x.pfm"), ImageFormat::Pfm),
            Err(Error::UnsupportedChannels { .. })
        ));
        assert!(matches!(
            write_image(&img, dir.path().join("x.png"), ImageFormat::Png8),
            Err(Error::UnsupportedChannels { .. })
        ));
    }
}
