//! RGB image buffers with the resampling primitives the patchifier needs:
//! exact area-average downsampling, corner-aligned bilinear resizing, and
//! pixel-exact cropping. Binary PPM (P6, 8-bit) is the on-disk format.

use std::io::{BufRead, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::geometry::BBox;

pub const CHANNELS: usize = 3;

/// Row-major, channel-last RGB image with unit-interval values.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageBuffer {
    pub width: usize,
    pub height: usize,
    pub data: Vec<f64>,
}

impl ImageBuffer {
    pub fn new(width: usize, height: usize, data: Vec<f64>) -> Result<ImageBuffer> {
        if width == 0 || height == 0 {
            return Err(Error::Parameter {
                what: format!("image dimensions must be positive, got {width}x{height}"),
            });
        }
        if data.len() != width * height * CHANNELS {
            return Err(Error::Shape {
                op: "ImageBuffer::new",
                detail: format!(
                    "{width}x{height}x{CHANNELS} needs {} values, got {}",
                    width * height * CHANNELS,
                    data.len()
                ),
            });
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Validation {
                line: 0,
                detail: "image values must lie in [0, 1]".into(),
            });
        }
        Ok(ImageBuffer { width, height, data })
    }

    pub fn filled(width: usize, height: usize, rgb: [f64; 3]) -> Result<ImageBuffer> {
        let mut data = Vec::with_capacity(width * height * CHANNELS);
        for _ in 0..width * height {
            data.extend_from_slice(&rgb);
        }
        ImageBuffer::new(width, height, data)
    }

    #[inline]
    pub fn pixel(&self, x: usize, y: usize) -> [f64; 3] {
        let i = (y * self.width + x) * CHANNELS;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set_pixel(&mut self, x: usize, y: usize, rgb: [f64; 3]) {
        let i = (y * self.width + x) * CHANNELS;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn mean(&self) -> f64 {
        self.data.iter().sum::<f64>() / self.data.len() as f64
    }

    /// Horizontal mirror: pixel (x, y) maps to (width-1-x, y).
    pub fn mirror_horizontal(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(self.width - 1 - x, y, self.pixel(x, y));
            }
        }
        out
    }

    /// Vertical mirror: pixel (x, y) maps to (x, height-1-y).
    pub fn mirror_vertical(&self) -> ImageBuffer {
        let mut out = self.clone();
        for y in 0..self.height {
            for x in 0..self.width {
                out.set_pixel(x, self.height - 1 - y, self.pixel(x, y));
            }
        }
        out
    }
}

/// Exact area-average (box-filter) downsampling. Each output pixel averages
/// its fractional-coverage footprint in the input, so the global mean is
/// preserved and constant images stay constant. Upscaling is rejected; use
/// [`resize_bilinear`] for that.
pub fn downsample(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Parameter {
            what: "downsample target must be at least 1x1".into(),
        });
    }
    if out_w > img.width || out_h > img.height {
        return Err(Error::Contract {
            what: format!(
                "downsample from {}x{} to {out_w}x{out_h} would upscale; use resize_bilinear",
                img.width, img.height
            ),
        });
    }
    let sx = img.width as f64 / out_w as f64;
    let sy = img.height as f64 / out_h as f64;
    let cell_area = sx * sy;
    let mut data = vec![0.0; out_w * out_h * CHANNELS];
    for oy in 0..out_h {
        let y0 = oy as f64 * sy;
        let y1 = (oy + 1) as f64 * sy;
        for ox in 0..out_w {
            let x0 = ox as f64 * sx;
            let x1 = (ox + 1) as f64 * sx;
            let mut acc = [0.0f64; 3];
            let iy0 = y0.floor() as usize;
            let iy1 = (y1.ceil() as usize).min(img.height);
            let ix0 = x0.floor() as usize;
            let ix1 = (x1.ceil() as usize).min(img.width);
            for iy in iy0..iy1 {
                let cover_y = (y1.min((iy + 1) as f64) - y0.max(iy as f64)).max(0.0);
                if cover_y == 0.0 {
                    continue;
                }
                for ix in ix0..ix1 {
                    let cover_x = (x1.min((ix + 1) as f64) - x0.max(ix as f64)).max(0.0);
                    if cover_x == 0.0 {
                        continue;
                    }
                    let w = cover_x * cover_y;
                    let p = img.pixel(ix, iy);
                    acc[0] += w * p[0];
                    acc[1] += w * p[1];
                    acc[2] += w * p[2];
                }
            }
            let base = (oy * out_w + ox) * CHANNELS;
            for c in 0..CHANNELS {
                // Guard rounding drift out of the unit interval.
                data[base + c] = (acc[c] / cell_area).clamp(0.0, 1.0);
            }
        }
    }
    ImageBuffer::new(out_w, out_h, data)
}

/// Corner-aligned bilinear resize. Output pixel x maps to source coordinate
/// `x * (in - 1) / (out - 1)`; resizing to the same dimensions reproduces
/// the input bit-exactly.
pub fn resize_bilinear(img: &ImageBuffer, out_w: usize, out_h: usize) -> Result<ImageBuffer> {
    if out_w == 0 || out_h == 0 {
        return Err(Error::Parameter {
            what: "resize target must be at least 1x1".into(),
        });
    }
    let src_coord = |o: usize, out_n: usize, in_n: usize| -> f64 {
        if out_n == 1 {
            0.0
        } else {
            o as f64 * (in_n - 1) as f64 / (out_n - 1) as f64
        }
    };
    let mut data = vec![0.0; out_w * out_h * CHANNELS];
    for oy in 0..out_h {
        let fy = src_coord(oy, out_h, img.height);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(img.height - 1);
        let dy = fy - y0 as f64;
        for ox in 0..out_w {
            let fx = src_coord(ox, out_w, img.width);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(img.width - 1);
            let dx = fx - x0 as f64;
            let p00 = img.pixel(x0, y0);
            let p10 = img.pixel(x1, y0);
            let p01 = img.pixel(x0, y1);
            let p11 = img.pixel(x1, y1);
            let base = (oy * out_w + ox) * CHANNELS;
            for c in 0..CHANNELS {
                let top = p00[c] * (1.0 - dx) + p10[c] * dx;
                let bot = p01[c] * (1.0 - dx) + p11[c] * dx;
                data[base + c] = top * (1.0 - dy) + bot * dy;
            }
        }
    }
    ImageBuffer::new(out_w, out_h, data)
}

fn round_half_away(v: f64) -> f64 {
    // f64::round rounds half away from zero.
    v.round()
}

/// Pixel-exact crop. Box edges round half away from zero to integer pixel
/// boundaries; the box must already lie inside the image.
pub fn crop(img: &ImageBuffer, bbox: &BBox) -> Result<ImageBuffer> {
    let x1 = round_half_away(bbox.x1) as i64;
    let y1 = round_half_away(bbox.y1) as i64;
    let x2 = round_half_away(bbox.x2) as i64;
    let y2 = round_half_away(bbox.y2) as i64;
    if x1 < 0 || y1 < 0 || x2 > img.width as i64 || y2 > img.height as i64 {
        return Err(Error::Contract {
            what: format!(
                "crop box [{}, {}, {}, {}] exceeds {}x{} image; clamp first",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2, img.width, img.height
            ),
        });
    }
    if x2 <= x1 || y2 <= y1 {
        return Err(Error::EmptyRegion {
            detail: format!(
                "box [{}, {}, {}, {}] rounds to zero area",
                bbox.x1, bbox.y1, bbox.x2, bbox.y2
            ),
        });
    }
    let (w, h) = ((x2 - x1) as usize, (y2 - y1) as usize);
    let mut data = Vec::with_capacity(w * h * CHANNELS);
    for y in y1 as usize..y2 as usize {
        let start = (y * img.width + x1 as usize) * CHANNELS;
        data.extend_from_slice(&img.data[start..start + w * CHANNELS]);
    }
    ImageBuffer::new(w, h, data)
}

/// Write 8-bit binary PPM (P6). Unit-interval values map to bytes by
/// rounding `v * 255`.
pub fn write_ppm<W: Write>(w: &mut W, img: &ImageBuffer) -> Result<()> {
    write!(w, "P6\n{} {}\n255\n", img.width, img.height)?;
    let bytes: Vec<u8> = img
        .data
        .iter()
        .map(|v| (v * 255.0).round().clamp(0.0, 255.0) as u8)
        .collect();
    w.write_all(&bytes)?;
    Ok(())
}

pub fn save_ppm(path: &Path, img: &ImageBuffer) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_ppm(&mut f, img)
}

/// Read 8-bit binary PPM (P6); bytes map to unit interval by `/ 255`.
pub fn read_ppm<R: BufRead>(r: &mut R) -> Result<ImageBuffer> {
    fn token<R: BufRead>(r: &mut R, offset: &mut u64) -> Result<String> {
        let mut tok = Vec::new();
        let mut byte = [0u8; 1];
        // skip whitespace and comments
        loop {
            if r.read(&mut byte)? == 0 {
                return Err(Error::Format {
                    offset: *offset,
                    detail: "unexpected end of PPM header".into(),
                });
            }
            *offset += 1;
            if byte[0] == b'#' {
                loop {
                    if r.read(&mut byte)? == 0 {
                        break;
                    }
                    *offset += 1;
                    if byte[0] == b'\n' {
                        break;
                    }
                }
            } else if !byte[0].is_ascii_whitespace() {
                tok.push(byte[0]);
                break;
            }
        }
        loop {
            if r.read(&mut byte)? == 0 {
                break;
            }
            *offset += 1;
            if byte[0].is_ascii_whitespace() {
                break;
            }
            tok.push(byte[0]);
        }
        Ok(String::from_utf8_lossy(&tok).into_owned())
    }

    let mut offset = 0u64;
    let magic = token(r, &mut offset)?;
    if magic != "P6" {
        return Err(Error::Format {
            offset: 0,
            detail: format!("expected PPM magic P6, got {magic:?}"),
        });
    }
    let parse_dim = |s: String, offset: u64, what: &str| -> Result<usize> {
        s.parse::<usize>().map_err(|_| Error::Format {
            offset,
            detail: format!("invalid {what}: {s:?}"),
        })
    };
    let width = parse_dim(token(r, &mut offset)?, offset, "width")?;
    let height = parse_dim(token(r, &mut offset)?, offset, "height")?;
    let maxval = parse_dim(token(r, &mut offset)?, offset, "maxval")?;
    if maxval != 255 {
        return Err(Error::Format {
            offset,
            detail: format!("only maxval 255 is supported, got {maxval}"),
        });
    }
    let mut bytes = vec![0u8; width * height * CHANNELS];
    r.read_exact(&mut bytes).map_err(|_| Error::Format {
        offset,
        detail: format!("truncated pixel payload, expected {} bytes", bytes.len()),
    })?;
    let data: Vec<f64> = bytes.iter().map(|&b| b as f64 / 255.0).collect();
    ImageBuffer::new(width, height, data)
}

pub fn load_ppm(path: &Path) -> Result<ImageBuffer> {
    let mut f = std::io::BufReader::new(std::fs::File::open(path)?);
    read_ppm(&mut f)
}
