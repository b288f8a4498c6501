//! Float image buffers and their on-disk forms (PFM, 8-bit PNG).

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major RGB image with channels in `[0, 1]` (not enforced).
#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<[f64; 3]>,
}

impl RgbImage {
    pub fn new(width: usize, height: usize) -> Self {
        RgbImage {
            width,
            height,
            data: vec![[0.0; 3]; width * height],
        }
    }

    pub fn filled(width: usize, height: usize, value: [f64; 3]) -> Self {
        RgbImage {
            width,
            height,
            data: vec![value; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> [f64; 3] {
        self.data[y * self.width + x]
    }

    #[inline]
    pub fn set(&mut self, x: usize, y: usize, v: [f64; 3]) {
        self.data[y * self.width + x] = v;
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self
                .data
                .iter()
                .map(|c| 0.299 * c[0] + 0.587 * c[1] + 0.114 * c[2])
                .collect(),
        }
    }

    pub fn channel(&self, c: usize) -> GrayImage {
        GrayImage {
            width: self.width,
            height: self.height,
            data: self.data.iter().map(|p| p[c]).collect(),
        }
    }
}

/// Row-major single-channel float image.
#[derive(Debug, Clone, PartialEq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize) -> Self {
        GrayImage {
            width,
            height,
            data: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> f64 {
        self.data[y * self.width + x]
    }
}

fn image_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    }
}

pub fn to_u8(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

pub fn write_png_rgb(path: &Path, img: &RgbImage) -> Result<()> {
    let buf: Vec<u8> = img.data.iter().flat_map(|c| c.map(to_u8)).collect();
    image::save_buffer(path, &buf, img.width as u32, img.height as u32, image::ColorType::Rgb8)
        .map_err(|e| image_err(path, e))
}

pub fn read_png_rgb(path: &Path) -> Result<RgbImage> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_rgb8();
    let (w, h) = img.dimensions();
    Ok(RgbImage {
        width: w as usize,
        height: h as usize,
        data: img
            .pixels()
            .map(|p| p.0.map(|v| v as f64 / 255.0))
            .collect(),
    })
}

/// 8-bit mask: 255 where `mask` is set.
pub fn write_png_mask(path: &Path, width: usize, height: usize, mask: &[bool]) -> Result<()> {
    let buf: Vec<u8> = mask.iter().map(|&m| if m { 255 } else { 0 }).collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::L8)
        .map_err(|e| image_err(path, e))
}

pub fn read_png_mask(path: &Path) -> Result<(usize, usize, Vec<bool>)> {
    let img = image::open(path).map_err(|e| image_err(path, e))?.to_luma8();
    let (w, h) = img.dimensions();
    Ok((w as usize, h as usize, img.pixels().map(|p| p.0[0] >= 128).collect()))
}

/// Grayscale heatmap scaled so `max` maps to white.
pub fn write_png_heatmap(path: &Path, width: usize, height: usize, values: &[f64]) -> Result<()> {
    let max = values.iter().copied().fold(0.0, f64::max);
    let buf: Vec<u8> = values
        .iter()
        .map(|&v| if max > 0.0 { to_u8(v / max) } else { 0 })
        .collect();
    image::save_buffer(path, &buf, width as u32, height as u32, image::ColorType::L8)
        .map_err(|e| image_err(path, e))
}

/// Write a PFM with little-endian float32 samples (scale -1.0). Rows go
/// bottom-to-top as the format requires; `data` is top-to-bottom.
pub fn write_pfm(path: &Path, width: usize, height: usize, channels: usize, data: &[f64]) -> Result<()> {
    assert!(channels == 1 || channels == 3);
    assert_eq!(data.len(), width * height * channels);
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    write!(w, "{}\n{} {}\n-1.0\n", if channels == 3 { "PF" } else { "Pf" }, width, height).map_err(io)?;
    let row = width * channels;
    for y in (0..height).rev() {
        for v in &data[y * row..(y + 1) * row] {
            w.write_all(&(*v as f32).to_le_bytes()).map_err(io)?;
        }
    }
    w.flush().map_err(io)
}

/// Read a PFM into top-to-bottom row order. Returns `(width, height, channels, data)`.
pub fn read_pfm(path: &Path) -> Result<(usize, usize, usize, Vec<f64>)> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = BufReader::new(file);
    let token = |r: &mut BufReader<File>| -> Result<String> {
        let mut s = String::new();
        loop {
            let mut b = [0u8; 1];
            r.read_exact(&mut b)
                .map_err(|_| Error::Pfm("unexpected end of header".into()))?;
            if b[0].is_ascii_whitespace() {
                if !s.is_empty() {
                    return Ok(s);
                }
            } else {
                s.push(b[0] as char);
            }
        }
    };
    let magic = token(&mut r)?;
    let channels = match magic.as_str() {
        "PF" => 3,
        "Pf" => 1,
        _ => return Err(Error::Pfm(format!("bad magic '{magic}'"))),
    };
    let width: usize = token(&mut r)?
        .parse()
        .map_err(|_| Error::Pfm("bad width".into()))?;
    let height: usize = token(&mut r)?
        .parse()
        .map_err(|_| Error::Pfm("bad height".into()))?;
    let scale: f64 = token(&mut r)?
        .parse()
        .map_err(|_| Error::Pfm("bad scale".into()))?;
    let little = scale < 0.0;
    let mut raw = Vec::new();
    r.fill_buf().map_err(|e| Error::io(path, e))?;
    r.read_to_end(&mut raw).map_err(|e| Error::io(path, e))?;
    let row = width * channels;
    if raw.len() != row * height * 4 {
        return Err(Error::Pfm(format!(
            "expected {} bytes of samples, found {}",
            row * height * 4,
            raw.len()
        )));
    }
    let mut data = vec![0.0; row * height];
    for (i, chunk) in raw.chunks_exact(4).enumerate() {
        let b = [chunk[0], chunk[1], chunk[2], chunk[3]];
        let v = if little { f32::from_le_bytes(b) } else { f32::from_be_bytes(b) };
        let file_row = i / row;
        let col = i % row;
        data[(height - 1 - file_row) * row + col] = v as f64;
    }
    Ok((width, height, channels, data))
}
