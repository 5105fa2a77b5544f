//! RGB images with `f32` samples, plus PPM and PNG codecs.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use crate::error::{Error, Result};

/// Row-major interleaved RGB. Samples are nominally in `[0, 1]` but may leave
/// that range after jitter or mean subtraction.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    width: usize,
    height: usize,
    data: Vec<f32>,
}

impl Image {
    pub fn new(width: usize, height: usize, data: Vec<f32>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::image(format!("degenerate image {width}x{height}")));
        }
        if data.len() != width * height * 3 {
            return Err(Error::image(format!(
                "{width}x{height} RGB image needs {} samples, got {}",
                width * height * 3,
                data.len()
            )));
        }
        Ok(Image { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f32; 3]) -> Result<Self> {
        Image::new(width, height, rgb.iter().copied().cycle().take(width * height * 3).collect())
    }

    pub fn from_rgb8(width: usize, height: usize, bytes: &[u8]) -> Result<Self> {
        Image::new(width, height, bytes.iter().map(|&b| f32::from(b) / 255.0).collect())
    }

    /// Clamps to `[0, 1]` and rounds to 8 bits.
    pub fn to_rgb8(&self) -> Vec<u8> {
        self.data.iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect()
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn pixel(&self, x: usize, y: usize) -> [f32; 3] {
        let i = (y * self.width + x) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f32; 3]) {
        let i = (y * self.width + x) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    /// Copy of the `w x h` window whose top-left corner is `(x, y)`.
    pub fn crop(&self, x: usize, y: usize, w: usize, h: usize) -> Result<Image> {
        if x + w > self.width || y + h > self.height {
            return Err(Error::image(format!(
                "window {w}x{h}+{x}+{y} exceeds {}x{}",
                self.width, self.height
            )));
        }
        let mut data = Vec::with_capacity(w * h * 3);
        for row in y..y + h {
            let start = (row * self.width + x) * 3;
            data.extend_from_slice(&self.data[start..start + w * 3]);
        }
        Image::new(w, h, data)
    }

    /// Pastes `src` with its top-left corner at `(x, y)`; must fit.
    pub fn paste(&mut self, src: &Image, x: usize, y: usize) -> Result<()> {
        if x + src.width > self.width || y + src.height > self.height {
            return Err(Error::image("pasted image does not fit"));
        }
        for row in 0..src.height {
            let d = ((y + row) * self.width + x) * 3;
            let s = row * src.width * 3;
            self.data[d..d + src.width * 3].copy_from_slice(&src.data[s..s + src.width * 3]);
        }
        Ok(())
    }

    /// Per-channel mean.
    pub fn mean_pixel(&self) -> [f64; 3] {
        let mut sum = [0.0f64; 3];
        for px in self.data.chunks_exact(3) {
            for c in 0..3 {
                sum[c] += f64::from(px[c]);
            }
        }
        let n = (self.width * self.height) as f64;
        sum.map(|s| s / n)
    }
}

fn ppm_token<R: Read>(bytes: &mut std::iter::Peekable<std::io::Bytes<R>>) -> Result<String> {
    let mut token = String::new();
    loop {
        let b = match bytes.next() {
            Some(b) => b?,
            None if token.is_empty() => return Err(Error::image("truncated PPM header")),
            None => return Ok(token),
        };
        match b {
            b'#' if token.is_empty() => {
                for c in bytes.by_ref() {
                    if c? == b'\n' {
                        break;
                    }
                }
            }
            b if b.is_ascii_whitespace() => {
                if !token.is_empty() {
                    return Ok(token);
                }
            }
            b => token.push(char::from(b)),
        }
    }
}

/// Decodes binary (`P6`) and plain (`P3`) PPM with 8-bit samples.
pub fn decode_ppm<R: Read>(reader: R) -> Result<Image> {
    let mut bytes = BufReader::new(reader).bytes().peekable();
    let magic = ppm_token(&mut bytes)?;
    let mut field = |what: &str| -> Result<usize> {
        let t = ppm_token(&mut bytes)?;
        t.parse().map_err(|_| Error::image(format!("bad PPM {what} `{t}`")))
    };
    let (width, height, maxval) = (field("width")?, field("height")?, field("maxval")?);
    if maxval == 0 || maxval > 255 {
        return Err(Error::image(format!("unsupported PPM maxval {maxval}")));
    }
    let n = width * height * 3;
    let raw: Vec<u8> = match magic.as_str() {
        "P6" => {
            let raw: Vec<u8> = bytes.take(n).collect::<std::io::Result<_>>()?;
            if raw.len() != n {
                return Err(Error::image(format!("PPM raster has {} of {n} bytes", raw.len())));
            }
            raw
        }
        "P3" => {
            let mut raw = Vec::with_capacity(n);
            for _ in 0..n {
                let t = ppm_token(&mut bytes)?;
                let v: usize = t.parse().map_err(|_| Error::image(format!("bad PPM sample `{t}`")))?;
                if v > maxval {
                    return Err(Error::image(format!("PPM sample {v} above maxval {maxval}")));
                }
                raw.push(v as u8);
            }
            raw
        }
        other => return Err(Error::image(format!("not a PPM file (magic `{other}`)"))),
    };
    let maxval = maxval as f32;
    Image::new(width, height, raw.iter().map(|&b| f32::from(b) / maxval).collect())
}

pub fn encode_ppm<W: Write>(image: &Image, mut w: W) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", image.width, image.height)?;
    w.write_all(&image.to_rgb8())?;
    w.flush()?;
    Ok(())
}

fn png_err(e: impl std::fmt::Display) -> Error {
    Error::image(format!("png: {e}"))
}

pub fn decode_png(path: &Path) -> Result<Image> {
    let mut decoder = png::Decoder::new(BufReader::new(File::open(path)?));
    decoder.set_transformations(png::Transformations::EXPAND | png::Transformations::STRIP_16);
    let mut reader = decoder.read_info().map_err(png_err)?;
    let size = reader.output_buffer_size().ok_or_else(|| png_err("image too large"))?;
    let mut buf = vec![0; size];
    let info = reader.next_frame(&mut buf).map_err(png_err)?;
    let (w, h) = (info.width as usize, info.height as usize);
    let buf = &buf[..info.buffer_size()];
    let channels = match info.color_type {
        png::ColorType::Grayscale => 1,
        png::ColorType::GrayscaleAlpha => 2,
        png::ColorType::Rgb => 3,
        png::ColorType::Rgba => 4,
        png::ColorType::Indexed => return Err(png_err("palette was not expanded")),
    };
    let mut rgb = Vec::with_capacity(w * h * 3);
    for px in buf.chunks_exact(channels) {
        match channels {
            1 | 2 => rgb.extend_from_slice(&[px[0]; 3]),
            _ => rgb.extend_from_slice(&px[..3]),
        }
    }
    Image::from_rgb8(w, h, &rgb)
}

pub fn encode_png(image: &Image, path: &Path) -> Result<()> {
    let mut enc = png::Encoder::new(BufWriter::new(File::create(path)?), image.width as u32, image.height as u32);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut writer = enc.write_header().map_err(png_err)?;
    writer.write_image_data(&image.to_rgb8()).map_err(png_err)?;
    writer.finish().map_err(png_err)
}

fn is_png(path: &Path) -> bool {
    path.extension().and_then(|e| e.to_str()).is_some_and(|e| e.eq_ignore_ascii_case("png"))
}

/// Reads a `.png` file, or a PPM for any other extension.
pub fn read_image(path: &Path) -> Result<Image> {
    if is_png(path) {
        decode_png(path)
    } else {
        decode_ppm(BufReader::new(File::open(path)?))
    }
    .map_err(|e| match e {
        Error::Image(msg) => Error::image(format!("{}: {msg}", path.display())),
        e => e,
    })
}

/// Writes PNG for a `.png` path and binary PPM otherwise.
pub fn write_image(image: &Image, path: &Path) -> Result<()> {
    if is_png(path) {
        encode_png(image, path)
    } else {
        encode_ppm(image, BufWriter::new(File::create(path)?))
    }
}
