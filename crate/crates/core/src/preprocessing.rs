//! CT slice transforms: HU windowing, 2.5D stacking and resizing.
//!
//! Slice files are little-endian: a 4-byte magic, `u32` width, `u32` height,
//! then row-major pixels. Raw slices use magic `HUS1` with `i16` Hounsfield
//! units; windowed slices use `WIN1` with `u8` intensities.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub const HU_MAGIC: &[u8; 4] = b"HUS1";
pub const WINDOWED_MAGIC: &[u8; 4] = b"WIN1";

/// Side length slices are resized to before detection.
pub const DETECTOR_INPUT_SIZE: u32 = 512;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct HuSlice {
    width: u32,
    height: u32,
    data: Vec<i16>,
}

impl HuSlice {
    pub fn new(width: u32, height: u32, data: Vec<i16>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self { width, height, data })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn data(&self) -> &[i16] {
        &self.data
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let (width, height) = read_header(&mut r, HU_MAGIC)?;
        let mut bytes = vec![0u8; pixel_count(width, height)? * 2];
        r.read_exact(&mut bytes)?;
        let data = bytes
            .chunks_exact(2)
            .map(|c| i16::from_le_bytes([c[0], c[1]]))
            .collect();
        Self::new(width, height, data)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        write_header(&mut w, HU_MAGIC, self.width, self.height)?;
        let mut bytes = Vec::with_capacity(self.data.len() * 2);
        for v in &self.data {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        w.write_all(&bytes)?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub center: f64,
    pub width: f64,
}

impl Window {
    pub fn new(center: f64, width: f64) -> Result<Self> {
        if !(width > 0.0) || !width.is_finite() || !center.is_finite() {
            return Err(Error::InvalidWindow(width));
        }
        Ok(Self { center, width })
    }

    pub fn lower(&self) -> f64 {
        self.center - self.width / 2.0
    }

    pub fn upper(&self) -> f64 {
        self.center + self.width / 2.0
    }

    /// Map one HU value into `0..=255`, rounding half away from zero.
    pub fn apply(&self, hu: f64) -> u8 {
        let scaled = 255.0 * (hu - self.lower()) / (self.upper() - self.lower());
        scaled.round().clamp(0.0, 255.0) as u8
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WindowedSlice {
    width: u32,
    height: u32,
    data: Vec<u8>,
    /// Window the intensities came from; unknown when read back from a file.
    pub window: Option<Window>,
}

impl WindowedSlice {
    pub fn new(width: u32, height: u32, data: Vec<u8>, window: Option<Window>) -> Result<Self> {
        check_len(width, height, data.len())?;
        Ok(Self {
            width,
            height,
            data,
            window,
        })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn data(&self) -> &[u8] {
        &self.data
    }

    pub fn dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let (width, height) = read_header(&mut r, WINDOWED_MAGIC)?;
        let mut data = vec![0u8; pixel_count(width, height)?];
        r.read_exact(&mut data)?;
        Self::new(width, height, data, None)
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        write_header(&mut w, WINDOWED_MAGIC, self.width, self.height)?;
        w.write_all(&self.data)?;
        Ok(())
    }
}

pub fn window_hu(s: &HuSlice, center: f64, width: f64) -> Result<WindowedSlice> {
    let window = Window::new(center, width)?;
    let data = s.data.iter().map(|&v| window.apply(v as f64)).collect();
    WindowedSlice::new(s.width, s.height, data, Some(window))
}

/// Three neighbouring windowed slices: below, key, above.
#[derive(Debug, Clone, PartialEq)]
pub struct Stack25D {
    pub slices: [WindowedSlice; 3],
    pub key_slice_index: i64,
}

impl Stack25D {
    pub fn below(&self) -> &WindowedSlice {
        &self.slices[0]
    }
    pub fn key(&self) -> &WindowedSlice {
        &self.slices[1]
    }
    pub fn above(&self) -> &WindowedSlice {
        &self.slices[2]
    }

    /// Concatenated `WIN1` records in below, key, above order.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        for s in &self.slices {
            s.write_to(&mut w)?;
        }
        Ok(())
    }
}

/// Stack a key slice with its neighbours. A missing neighbour at the volume
/// boundary is replaced by a copy of the key slice.
pub fn stack_25d(
    below: Option<&WindowedSlice>,
    key: &WindowedSlice,
    above: Option<&WindowedSlice>,
    key_slice_index: i64,
) -> Result<Stack25D> {
    for (name, s) in [("below", below), ("above", above)] {
        if let Some(s) = s {
            if s.dims() != key.dims() {
                return Err(Error::Dimension(format!(
                    "{name} slice is {}x{} but key slice is {}x{}",
                    s.width, s.height, key.width, key.height
                )));
            }
        }
    }
    Ok(Stack25D {
        slices: [
            below.unwrap_or(key).clone(),
            key.clone(),
            above.unwrap_or(key).clone(),
        ],
        key_slice_index,
    })
}

/// Bilinear resize with pixel-centre alignment; samples outside the source are
/// clamped to the border.
pub fn resize(s: &WindowedSlice, target_w: u32, target_h: u32) -> Result<WindowedSlice> {
    if target_w == 0 || target_h == 0 {
        return Err(Error::Dimension(format!(
            "target size {target_w}x{target_h} must be positive"
        )));
    }
    let (sw, sh) = (s.width as usize, s.height as usize);
    let sx = sw as f64 / target_w as f64;
    let sy = sh as f64 / target_h as f64;
    let taps = |dst: u32, scale: f64, len: usize| -> (usize, usize, f64) {
        let src = ((dst as f64 + 0.5) * scale - 0.5).clamp(0.0, (len - 1) as f64);
        let i0 = src.floor() as usize;
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, src - i0 as f64)
    };
    let cols: Vec<_> = (0..target_w).map(|x| taps(x, sx, sw)).collect();
    let mut data = Vec::with_capacity(target_w as usize * target_h as usize);
    for y in 0..target_h {
        let (y0, y1, fy) = taps(y, sy, sh);
        let (r0, r1) = (&s.data[y0 * sw..][..sw], &s.data[y1 * sw..][..sw]);
        for &(x0, x1, fx) in &cols {
            let top = r0[x0] as f64 * (1.0 - fx) + r0[x1] as f64 * fx;
            let bottom = r1[x0] as f64 * (1.0 - fx) + r1[x1] as f64 * fx;
            let v = top * (1.0 - fy) + bottom * fy;
            data.push(v.round().clamp(0.0, 255.0) as u8);
        }
    }
    WindowedSlice::new(target_w, target_h, data, s.window)
}

/// Scale box coordinates from one image size to another.
pub fn rescale_box(b: &BoundingBox, from_w: f64, from_h: f64, to_w: f64, to_h: f64) -> Result<BoundingBox> {
    if [from_w, from_h, to_w, to_h].iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
        return Err(Error::Dimension(format!(
            "image sizes must be positive: {from_w}x{from_h} -> {to_w}x{to_h}"
        )));
    }
    let (fx, fy) = (to_w / from_w, to_h / from_h);
    BoundingBox::new(b.x1() * fx, b.y1() * fy, b.x2() * fx, b.y2() * fy)
}

fn pixel_count(width: u32, height: u32) -> Result<usize> {
    (width as usize)
        .checked_mul(height as usize)
        .filter(|n| *n > 0)
        .ok_or_else(|| Error::Dimension(format!("invalid slice size {width}x{height}")))
}

fn check_len(width: u32, height: u32, len: usize) -> Result<()> {
    let expected = pixel_count(width, height)?;
    if len != expected {
        return Err(Error::Dimension(format!(
            "{width}x{height} slice needs {expected} pixels, got {len}"
        )));
    }
    Ok(())
}

fn read_header(r: &mut impl Read, magic: &[u8; 4]) -> Result<(u32, u32)> {
    let mut head = [0u8; 12];
    r.read_exact(&mut head)?;
    if &head[..4] != magic {
        return Err(Error::Dimension(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(&head[..4]),
            String::from_utf8_lossy(magic)
        )));
    }
    let width = u32::from_le_bytes(head[4..8].try_into().unwrap());
    let height = u32::from_le_bytes(head[8..12].try_into().unwrap());
    Ok((width, height))
}

fn write_header(w: &mut impl Write, magic: &[u8; 4], width: u32, height: u32) -> Result<()> {
    w.write_all(magic)?;
    w.write_all(&width.to_le_bytes())?;
    w.write_all(&height.to_le_bytes())?;
    Ok(())
}
