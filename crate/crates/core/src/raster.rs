//! Binary PPM/PGM raster I/O, bilinear sampling and MLS frame resampling.

use std::io::{BufRead, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::mls::{grid_warp_field, MlsConfig, NodePair};

/// An 8-bit raster with 1 (gray) or 3 (RGB) interleaved channels.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub width: usize,
    pub height: usize,
    pub channels: usize,
    pub data: Vec<u8>,
}

impl Image {
    pub fn new(width: usize, height: usize, channels: usize) -> Result<Self> {
        if channels != 1 && channels != 3 {
            return Err(Error::Param(format!("images must have 1 or 3 channels, got {channels}")));
        }
        Ok(Self { width, height, channels, data: vec![0; width * height * channels] })
    }

    pub fn pixel(&self, x: usize, y: usize) -> &[u8] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    pub fn pixel_mut(&mut self, x: usize, y: usize) -> &mut [u8] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Bilinear sample of one channel at a fractional coordinate; `None` when
    /// the coordinate leaves the valid sampling domain [0, w-1] x [0, h-1].
    /// A float-noise margin keeps reconstructed boundary coordinates inside.
    pub fn sample_bilinear(&self, x: f64, y: f64, channel: usize) -> Option<f64> {
        const EPS: f64 = 1e-9;
        if !(-EPS..=(self.width - 1) as f64 + EPS).contains(&x)
            || !(-EPS..=(self.height - 1) as f64 + EPS).contains(&y)
        {
            return None;
        }
        let x = x.clamp(0.0, (self.width - 1) as f64);
        let y = y.clamp(0.0, (self.height - 1) as f64);
        let x0 = if self.width == 1 { 0 } else { (x.floor() as usize).min(self.width - 2) };
        let y0 = if self.height == 1 { 0 } else { (y.floor() as usize).min(self.height - 2) };
        let x1 = (x0 + 1).min(self.width - 1);
        let y1 = (y0 + 1).min(self.height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        let v00 = self.pixel(x0, y0)[channel] as f64;
        let v10 = self.pixel(x1, y0)[channel] as f64;
        let v01 = self.pixel(x0, y1)[channel] as f64;
        let v11 = self.pixel(x1, y1)[channel] as f64;
        Some(
            v00 * (1.0 - fx) * (1.0 - fy)
                + v10 * fx * (1.0 - fy)
                + v01 * (1.0 - fx) * fy
                + v11 * fx * fy,
        )
    }
}

/// Read a binary PGM (P5) or PPM (P6) image.
pub fn read_pnm<R: BufRead>(reader: &mut R) -> Result<Image> {
    let magic = read_token(reader)?;
    let channels = match magic.as_str() {
        "P5" => 1,
        "P6" => 3,
        other => return Err(Error::Data(format!("unsupported raster magic {other:?}"))),
    };
    let width: usize = parse_token(reader, "width")?;
    let height: usize = parse_token(reader, "height")?;
    let maxval: usize = parse_token(reader, "maxval")?;
    if maxval != 255 {
        return Err(Error::Data(format!("only maxval 255 is supported, got {maxval}")));
    }
    let mut data = vec![0u8; width * height * channels];
    reader.read_exact(&mut data)?;
    Ok(Image { width, height, channels, data })
}

/// Write a binary PGM (1 channel) or PPM (3 channels) image.
pub fn write_pnm<W: Write>(writer: &mut W, image: &Image) -> Result<()> {
    let magic = if image.channels == 1 { "P5" } else { "P6" };
    write!(writer, "{magic}\n{} {}\n255\n", image.width, image.height)?;
    writer.write_all(&image.data)?;
    Ok(())
}

fn read_token<R: BufRead>(reader: &mut R) -> Result<String> {
    let mut tok = String::new();
    let mut byte = [0u8; 1];
    // Skip whitespace and `#` comments.
    loop {
        reader.read_exact(&mut byte)?;
        match byte[0] {
            b'#' => {
                let mut line = String::new();
                reader.read_line(&mut line)?;
            }
            b if b.is_ascii_whitespace() => {}
            b => {
                tok.push(b as char);
                break;
            }
        }
    }
    loop {
        match reader.read_exact(&mut byte) {
            Ok(()) => {
                if byte[0].is_ascii_whitespace() {
                    break;
                }
                tok.push(byte[0] as char);
            }
            Err(_) => break,
        }
    }
    Ok(tok)
}

fn parse_token<R: BufRead, T: std::str::FromStr>(reader: &mut R, what: &str) -> Result<T> {
    read_token(reader)?
        .parse()
        .map_err(|_| Error::Data(format!("invalid {what} in raster header")))
}

/// Render the warped frame. Backward mapping: the output grid is warped with
/// node roles swapped, W(v; Q̂, Q), giving each output pixel a source
/// coordinate in the input frame; samples falling outside the input are black.
pub fn resample_frame(
    image: &Image,
    nodes: &NodePair,
    grid_cols: usize,
    grid_rows: usize,
    cfg: &MlsConfig,
) -> Result<Image> {
    let (w, h) = (image.width, image.height);
    let backward = nodes.swapped();
    let field = grid_warp_field(w, h, &backward, grid_cols, grid_rows, cfg)?;

    let channels = image.channels;
    let data: Vec<u8> = (0..w * h)
        .into_par_iter()
        .flat_map_iter(|p| {
            let [sx, sy] = field[p];
            (0..channels).map(move |c| (p, c, sx, sy))
        })
        .map(|(p, c, sx, sy)| {
            let _ = p;
            match image.sample_bilinear(sx, sy, c) {
                Some(v) => v.round().clamp(0.0, 255.0) as u8,
                None => 0,
            }
        })
        .collect();
    Ok(Image { width: w, height: h, channels, data })
}

/// Dense-oracle variant of [`resample_frame`]: per-pixel backward MLS with no
/// grid approximation. Slow; used by tests and benchmarks.
pub fn resample_frame_dense(image: &Image, nodes: &NodePair, cfg: &MlsConfig) -> Result<Image> {
    let (w, h) = (image.width, image.height);
    let backward = nodes.swapped();
    let field = crate::mls::dense_warp_field(w, h, &backward, cfg)?;
    let channels = image.channels;
    let mut data = vec![0u8; w * h * channels];
    for p in 0..w * h {
        let [sx, sy] = field[p];
        for c in 0..channels {
            data[p * channels + c] = match image.sample_bilinear(sx, sy, c) {
                Some(v) => v.round().clamp(0.0, 255.0) as u8,
                None => 0,
            };
        }
    }
    Ok(Image { width: w, height: h, channels, data })
}

/// Checkerboard test pattern.
pub fn checkerboard(width: usize, height: usize, cell: usize) -> Image {
    let mut img = Image::new(width, height, 1).expect("1 channel is valid");
    for y in 0..height {
        for x in 0..width {
            let on = ((x / cell) + (y / cell)) % 2 == 0;
            img.pixel_mut(x, y)[0] = if on { 220 } else { 35 };
        }
    }
    img
}
