use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// An image with values in `[0, 1]`, stored row-major with interleaved
/// channels (1 = gray, 3 = RGB).
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    channels: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize, pixels: Vec<f64>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!("image must be non-empty, got {width}x{height}")));
        }
        if channels != 1 && channels != 3 {
            return Err(Error::invalid(format!("unsupported channel count {channels}")));
        }
        if pixels.len() != width * height * channels {
            return Err(Error::shape(
                "image",
                format!(
                    "{width}x{height}x{channels} needs {} values, got {}",
                    width * height * channels,
                    pixels.len()
                ),
            ));
        }
        if let Some(bad) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
            return Err(Error::invalid(format!("pixel value {bad} outside [0, 1]")));
        }
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }

    pub fn filled(width: usize, height: usize, channels: usize, value: f64) -> Self {
        Image {
            width,
            height,
            channels,
            pixels: vec![value.clamp(0.0, 1.0); width * height * channels],
        }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, c: usize) -> f64 {
        self.pixels[(y * self.width + x) * self.channels + c]
    }

    /// Writes a value, clamped to `[0, 1]`.
    #[inline]
    pub fn set(&mut self, x: usize, y: usize, c: usize, value: f64) {
        self.pixels[(y * self.width + x) * self.channels + c] = value.clamp(0.0, 1.0);
    }

    /// Replicates a gray image into three channels; RGB images are cloned.
    pub fn to_rgb(&self) -> Image {
        if self.channels == 3 {
            return self.clone();
        }
        Image {
            width: self.width,
            height: self.height,
            channels: 3,
            pixels: self.pixels.iter().flat_map(|&v| [v, v, v]).collect(),
        }
    }

    /// Channels-major `C x H x W` tensor view of the pixels.
    pub fn to_tensor(&self) -> Tensor {
        let (w, h, c) = (self.width, self.height, self.channels);
        let mut data = vec![0.0; c * h * w];
        for (i, px) in self.pixels.chunks(c).enumerate() {
            for (ch, &v) in px.iter().enumerate() {
                data[ch * h * w + i] = v;
            }
        }
        Tensor::new(vec![c, h, w], data).expect("image dims are consistent")
    }

    /// Crops `width x height` pixels starting at (`x`, `y`).
    pub fn crop(&self, x: usize, y: usize, width: usize, height: usize) -> Result<Image> {
        if width == 0 || height == 0 || x + width > self.width || y + height > self.height {
            return Err(Error::invalid(format!(
                "crop {width}x{height}+{x}+{y} outside {}x{} image",
                self.width, self.height
            )));
        }
        let mut pixels = Vec::with_capacity(width * height * self.channels);
        for row in y..y + height {
            let start = (row * self.width + x) * self.channels;
            pixels.extend_from_slice(&self.pixels[start..start + width * self.channels]);
        }
        Ok(Image {
            width,
            height,
            channels: self.channels,
            pixels,
        })
    }

    /// Encodes as binary PPM (P6) or PGM (P5) with maxval 255.
    pub fn to_pnm_bytes(&self) -> Vec<u8> {
        let magic = if self.channels == 3 { "P6" } else { "P5" };
        let mut out = format!("{magic}\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend(self.pixels.iter().map(|&v| (v * 255.0).round() as u8));
        out
    }

    pub fn from_pnm_bytes(bytes: &[u8]) -> Result<Image> {
        let mut parser = HeaderParser { bytes, pos: 0 };
        let channels = match parser.magic()? {
            b"P6" => 3,
            b"P5" => 1,
            other => {
                return Err(Error::Parse {
                    offset: 0,
                    reason: format!("bad magic {:?}, expected P6 or P5", String::from_utf8_lossy(other)),
                })
            }
        };
        let width = parser.number("width")?;
        let height = parser.number("height")?;
        let maxval_offset = parser.pos;
        let maxval = parser.number("maxval")?;
        if maxval != 255 {
            return Err(Error::Unsupported(format!(
                "maxval {maxval} at byte {maxval_offset}; only 8-bit maxval 255 is supported"
            )));
        }
        if width == 0 || height == 0 {
            return Err(Error::Parse {
                offset: maxval_offset,
                reason: format!("degenerate size {width}x{height}"),
            });
        }
        // exactly one whitespace byte separates the header from the payload
        match bytes.get(parser.pos) {
            Some(b) if b.is_ascii_whitespace() => parser.pos += 1,
            _ => {
                return Err(Error::Parse {
                    offset: parser.pos,
                    reason: "expected whitespace after maxval".into(),
                })
            }
        }
        let need = width * height * channels;
        let payload = &bytes[parser.pos..];
        if payload.len() < need {
            return Err(Error::Parse {
                offset: bytes.len(),
                reason: format!("truncated payload: {} of {need} bytes", payload.len()),
            });
        }
        let pixels = payload[..need].iter().map(|&b| b as f64 / 255.0).collect();
        Ok(Image {
            width,
            height,
            channels,
            pixels,
        })
    }
}

struct HeaderParser<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> HeaderParser<'a> {
    fn magic(&mut self) -> Result<&'a [u8]> {
        if self.bytes.len() < 2 {
            return Err(Error::Parse {
                offset: self.bytes.len(),
                reason: "file too short for magic".into(),
            });
        }
        self.pos = 2;
        Ok(&self.bytes[..2])
    }

    fn skip_separators(&mut self) {
        while let Some(&b) = self.bytes.get(self.pos) {
            if b == b'#' {
                while let Some(&c) = self.bytes.get(self.pos) {
                    self.pos += 1;
                    if c == b'\n' {
                        break;
                    }
                }
            } else if b.is_ascii_whitespace() {
                self.pos += 1;
            } else {
                break;
            }
        }
    }

    fn number(&mut self, field: &str) -> Result<usize> {
        self.skip_separators();
        let start = self.pos;
        while self.bytes.get(self.pos).is_some_and(u8::is_ascii_digit) {
            self.pos += 1;
        }
        if start == self.pos {
            return Err(Error::Parse {
                offset: start,
                reason: format!("expected {field}"),
            });
        }
        std::str::from_utf8(&self.bytes[start..self.pos])
            .ok()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| Error::Parse {
                offset: start,
                reason: format!("{field} out of range"),
            })
    }
}

pub fn load_image(path: impl AsRef<Path>) -> Result<Image> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Image::from_pnm_bytes(&bytes)
}

pub fn save_image(image: &Image, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, image.to_pnm_bytes()).map_err(|e| Error::io(path, e))
}
