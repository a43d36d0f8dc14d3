//! Depth maps, RGB images, the 3-channel depth encoding fed to the depth
//! feature networks, and Netpbm/CSV file I/O.
//!
//! Depth files are 16-bit big-endian binary PGM (`P5`, maxval 65535) holding
//! millimetres, with 0 marking invalid pixels. RGB files are 8-bit binary PPM
//! (`P6`). Label maps are 8-bit PGM.

use std::io::{BufRead, Write};

use crate::error::{Error, Result};
use crate::netcore::FeatureMap;

/// Code given to every valid pixel when the depth range collapses to a point.
pub const DEGENERATE_CODE: u8 = 128;

/// Pixel value reserved for "do not score" in label maps.
pub const IGNORE_LABEL: u8 = 255;

#[derive(Debug, Clone, PartialEq)]
pub struct RgbImage {
    pub height: usize,
    pub width: usize,
    /// Interleaved RGB in `[0, 1]`, row-major.
    pub data: Vec<f64>,
}

impl RgbImage {
    pub fn new(height: usize, width: usize) -> Self {
        RgbImage {
            height,
            width,
            data: vec![0.0; height * width * 3],
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut img = Self::new(height, width);
        for px in img.data.chunks_exact_mut(3) {
            px.copy_from_slice(&rgb);
        }
        img
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> [f64; 3] {
        let i = (r * self.width + c) * 3;
        [self.data[i], self.data[i + 1], self.data[i + 2]]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, rgb: [f64; 3]) {
        let i = (r * self.width + c) * 3;
        self.data[i..i + 3].copy_from_slice(&rgb);
    }

    pub fn gray(&self, r: usize, c: usize) -> f64 {
        let [red, green, blue] = self.get(r, c);
        0.299 * red + 0.587 * green + 0.114 * blue
    }

    /// Planar `(1, 3, h, w)` copy for the networks.
    pub fn to_feature_map(&self) -> FeatureMap {
        let mut m = FeatureMap::zeros([1, 3, self.height, self.width]);
        for r in 0..self.height {
            for c in 0..self.width {
                let px = self.get(r, c);
                for (ch, v) in px.into_iter().enumerate() {
                    m.set(0, ch, r, c, v);
                }
            }
        }
        m
    }
}

/// Dense depth in metres with a validity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f64>,
    pub valid: Vec<bool>,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, values: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 || values.len() != height * width {
            return Err(Error::Shape(format!(
                "{} depth values for a {height}x{width} map",
                values.len()
            )));
        }
        let valid = values.iter().map(|&v| v.is_finite() && v > 0.0).collect();
        Ok(DepthMap {
            height,
            width,
            values,
            valid,
        })
    }

    pub fn constant(height: usize, width: usize, depth: f64) -> Result<Self> {
        Self::new(height, width, vec![depth; height * width])
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> Option<f64> {
        let i = r * self.width + c;
        self.valid[i].then(|| self.values[i])
    }

    pub fn valid_count(&self) -> usize {
        self.valid.iter().filter(|&&v| v).count()
    }

    /// Min and max over valid pixels.
    pub fn range(&self) -> Option<(f64, f64)> {
        self.values
            .iter()
            .zip(&self.valid)
            .filter(|(_, &ok)| ok)
            .fold(None, |acc, (&v, _)| match acc {
                None => Some((v, v)),
                Some((lo, hi)) => Some((f64::min(lo, v), f64::max(hi, v))),
            })
    }

    /// Natural-log depth as a `(1, 1, h, w)` map; invalid pixels hold 0.
    pub fn log_feature_map(&self) -> FeatureMap {
        let data = self
            .values
            .iter()
            .zip(&self.valid)
            .map(|(&v, &ok)| if ok { v.ln() } else { 0.0 })
            .collect();
        FeatureMap::from_vec([1, 1, self.height, self.width], data).expect("shape matches")
    }
}

/// Log-normalized depth duplicated into three identical 8-bit channels.
#[derive(Debug, Clone, PartialEq)]
pub struct EncodedDepthImage {
    pub height: usize,
    pub width: usize,
    /// Planar `(3, h, w)`.
    pub channels: Vec<u8>,
    /// Valid-pixel depth range the codes were normalized against.
    pub range: (f64, f64),
}

impl EncodedDepthImage {
    pub fn code(&self, r: usize, c: usize) -> u8 {
        self.channels[r * self.width + c]
    }

    pub fn channel(&self, k: usize) -> &[u8] {
        let plane = self.height * self.width;
        &self.channels[k * plane..(k + 1) * plane]
    }

    /// `(1, 3, h, w)` with codes scaled to `[0, 1]`.
    pub fn to_feature_map(&self) -> FeatureMap {
        let data = self.channels.iter().map(|&v| f64::from(v) / 255.0).collect();
        FeatureMap::from_vec([1, 3, self.height, self.width], data).expect("shape matches")
    }
}

/// Maps valid depths to `round(255 * (ln d - ln d_min) / (ln d_max - ln d_min))`
/// using the per-image valid range; invalid pixels get 0 and a constant map gets
/// [`DEGENERATE_CODE`] everywhere it is valid.
pub fn encode_depth(depth: &DepthMap) -> Result<EncodedDepthImage> {
    let (d_min, d_max) = depth
        .range()
        .ok_or_else(|| Error::Data("depth map has no valid pixels".into()))?;
    let (lo, hi) = (d_min.ln(), d_max.ln());
    let span = hi - lo;
    let plane: Vec<u8> = depth
        .values
        .iter()
        .zip(&depth.valid)
        .map(|(&d, &ok)| {
            if !ok {
                0
            } else if span <= f64::EPSILON * hi.abs().max(1.0) {
                DEGENERATE_CODE
            } else {
                (255.0 * (d.ln() - lo) / span).round().clamp(0.0, 255.0) as u8
            }
        })
        .collect();
    let mut channels = Vec::with_capacity(plane.len() * 3);
    for _ in 0..3 {
        channels.extend_from_slice(&plane);
    }
    Ok(EncodedDepthImage {
        height: depth.height,
        width: depth.width,
        channels,
        range: (d_min, d_max),
    })
}

/// Inverts [`encode_depth`] using the stored range; code 0 decodes to `d_min`.
pub fn decode_depth(encoded: &EncodedDepthImage) -> DepthMap {
    let (lo, hi) = (encoded.range.0.ln(), encoded.range.1.ln());
    let values = encoded
        .channel(0)
        .iter()
        .map(|&v| {
            if hi - lo <= f64::EPSILON * hi.abs().max(1.0) {
                encoded.range.0
            } else {
                (lo + f64::from(v) / 255.0 * (hi - lo)).exp()
            }
        })
        .collect();
    DepthMap::new(encoded.height, encoded.width, values).expect("shape matches")
}

// ---------------------------------------------------------------------------
// Netpbm

struct Header {
    magic: [u8; 2],
    width: usize,
    height: usize,
    maxval: usize,
    data_start: usize,
}

fn parse_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 2 {
        return Err(Error::parse(0, "file too short for a Netpbm header"));
    }
    let magic = [bytes[0], bytes[1]];
    let mut pos = 2;
    let mut fields = [0usize; 3];
    for field in &mut fields {
        // whitespace and comments
        loop {
            match bytes.get(pos) {
                Some(b) if b.is_ascii_whitespace() => pos += 1,
                Some(b'#') => {
                    while bytes.get(pos).is_some_and(|&b| b != b'\n') {
                        pos += 1;
                    }
                }
                _ => break,
            }
        }
        let start = pos;
        while bytes.get(pos).is_some_and(u8::is_ascii_digit) {
            pos += 1;
        }
        if start == pos {
            return Err(Error::parse(start, "expected an unsigned integer in header"));
        }
        *field = std::str::from_utf8(&bytes[start..pos])
            .expect("ascii digits")
            .parse()
            .map_err(|_| Error::parse(start, "header integer out of range"))?;
    }
    match bytes.get(pos) {
        Some(b) if b.is_ascii_whitespace() => pos += 1,
        _ => return Err(Error::parse(pos, "header must end with one whitespace byte")),
    }
    let [width, height, maxval] = fields;
    if width == 0 || height == 0 {
        return Err(Error::parse(2, "zero image dimension"));
    }
    Ok(Header {
        magic,
        width,
        height,
        maxval,
        data_start: pos,
    })
}

fn expect_payload(header: &Header, bytes: &[u8], bytes_per_pixel: usize) -> Result<()> {
    let need = header.width * header.height * bytes_per_pixel;
    let have = bytes.len() - header.data_start;
    if have < need {
        return Err(Error::parse(
            bytes.len(),
            format!("pixel data truncated: {have} of {need} bytes"),
        ));
    }
    Ok(())
}

pub fn read_ppm(bytes: &[u8]) -> Result<RgbImage> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P6" {
        return Err(Error::parse(0, "not a binary PPM (expected P6)"));
    }
    if header.maxval == 0 || header.maxval > 255 {
        return Err(Error::parse(2, format!("unsupported PPM maxval {}", header.maxval)));
    }
    expect_payload(&header, bytes, 3)?;
    let scale = header.maxval as f64;
    let n = header.width * header.height * 3;
    let data = bytes[header.data_start..header.data_start + n]
        .iter()
        .map(|&b| f64::from(b) / scale)
        .collect();
    Ok(RgbImage {
        height: header.height,
        width: header.width,
        data,
    })
}

pub fn write_ppm(mut out: impl Write, image: &RgbImage) -> Result<()> {
    write!(out, "P6\n{} {}\n255\n", image.width, image.height)?;
    let bytes: Vec<u8> = image
        .data
        .iter()
        .map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    out.write_all(&bytes)?;
    Ok(())
}

/// 16-bit PGM in millimetres; 0 means invalid.
pub fn read_depth_pgm(bytes: &[u8]) -> Result<DepthMap> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P5" {
        return Err(Error::parse(0, "not a binary PGM (expected P5)"));
    }
    if header.maxval < 256 || header.maxval > 65535 {
        return Err(Error::parse(
            2,
            format!("depth PGM needs 16-bit samples, maxval {}", header.maxval),
        ));
    }
    expect_payload(&header, bytes, 2)?;
    let payload = &bytes[header.data_start..];
    let values = (0..header.width * header.height)
        .map(|i| f64::from(u16::from_be_bytes([payload[2 * i], payload[2 * i + 1]])) / 1000.0)
        .collect();
    DepthMap::new(header.height, header.width, values)
}

pub fn write_depth_pgm(mut out: impl Write, depth: &DepthMap) -> Result<()> {
    write!(out, "P5\n{} {}\n65535\n", depth.width, depth.height)?;
    let mut bytes = Vec::with_capacity(depth.values.len() * 2);
    for (i, (&d, &ok)) in depth.values.iter().zip(&depth.valid).enumerate() {
        let mm = if ok { (d * 1000.0).round() } else { 0.0 };
        if mm > 65535.0 {
            return Err(Error::Argument(format!(
                "depth {d} m at pixel {i} exceeds the 16-bit millimetre range"
            )));
        }
        bytes.extend_from_slice(&(mm as u16).to_be_bytes());
    }
    out.write_all(&bytes)?;
    Ok(())
}

/// 8-bit label map (class ids, 255 = ignore).
pub fn read_label_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let header = parse_header(bytes)?;
    if &header.magic != b"P5" || header.maxval > 255 {
        return Err(Error::parse(0, "label map must be an 8-bit binary PGM"));
    }
    expect_payload(&header, bytes, 1)?;
    let n = header.width * header.height;
    Ok((
        header.height,
        header.width,
        bytes[header.data_start..header.data_start + n].to_vec(),
    ))
}

pub fn write_label_pgm(mut out: impl Write, height: usize, width: usize, labels: &[u8]) -> Result<()> {
    if labels.len() != height * width {
        return Err(Error::Shape(format!("{} labels for {height}x{width}", labels.len())));
    }
    write!(out, "P5\n{width} {height}\n255\n")?;
    out.write_all(labels)?;
    Ok(())
}

/// `r,c,value` lines (an optional `r,c,value` header is skipped). Dimensions are
/// one past the largest indices; cells never listed are invalid.
pub fn read_depth_csv(input: impl BufRead) -> Result<DepthMap> {
    let mut entries = Vec::new();
    let mut offset = 0usize;
    for line in input.lines() {
        let line = line?;
        let start = offset;
        offset += line.len() + 1;
        let trimmed = line.trim();
        if trimmed.is_empty() || trimmed.starts_with('#') || trimmed.starts_with('r') {
            continue;
        }
        let fields: Vec<&str> = trimmed.split(',').map(str::trim).collect();
        if fields.len() != 3 {
            return Err(Error::parse(start, format!("expected r,c,value but got {trimmed:?}")));
        }
        let r: usize = fields[0].parse().map_err(|_| Error::parse(start, "bad row index"))?;
        let c: usize = fields[1].parse().map_err(|_| Error::parse(start, "bad column index"))?;
        let v: f64 = fields[2].parse().map_err(|_| Error::parse(start, "bad depth value"))?;
        entries.push((r, c, v));
    }
    let height = entries.iter().map(|e| e.0 + 1).max().unwrap_or(0);
    let width = entries.iter().map(|e| e.1 + 1).max().unwrap_or(0);
    if height == 0 {
        return Err(Error::parse(offset, "no depth entries"));
    }
    let mut values = vec![0.0; height * width];
    for (r, c, v) in entries {
        values[r * width + c] = v;
    }
    DepthMap::new(height, width, values)
}

pub fn write_depth_csv(mut out: impl Write, depth: &DepthMap) -> Result<()> {
    writeln!(out, "r,c,value")?;
    for r in 0..depth.height {
        for c in 0..depth.width {
            if let Some(v) = depth.get(r, c) {
                writeln!(out, "{r},{c},{v}")?;
            }
        }
    }
    Ok(())
}
