//! Binary greyscale netpbm (`P5`, maxval 255).

use std::fmt;
use std::path::Path;

use dragsaw_core::math::quantize_u8;
use dragsaw_core::sample::ClassMap;

use crate::error::{self, AppError, Result};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Pgm {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PgmError {
    pub offset: usize,
    pub message: String,
}

impl fmt::Display for PgmError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "byte {}: {}", self.offset, self.message)
    }
}

impl std::error::Error for PgmError {}

impl Pgm {
    pub fn new(width: usize, height: usize, pixels: Vec<u8>) -> Self {
        assert_eq!(pixels.len(), width * height, "pixel count");
        Self { width, height, pixels }
    }

    /// Quantize `[0, 1]` reals with `round(255·v)`, halves rounding up.
    pub fn from_unit(width: usize, height: usize, values: &[f64]) -> Self {
        Self::new(width, height, values.iter().map(|v| quantize_u8(*v)).collect())
    }

    pub fn from_mask(mask: &ClassMap) -> Self {
        Self::new(mask.width, mask.height, mask.labels.clone())
    }

    pub fn to_unit(&self) -> Vec<f64> {
        self.pixels.iter().map(|p| *p as f64 / 255.0).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = format!("P5\n{} {}\n255\n", self.width, self.height).into_bytes();
        out.extend_from_slice(&self.pixels);
        out
    }

    /// Strict parse: `P5`, whitespace-separated width, height and maxval 255
    /// (`#` comments allowed between fields), one whitespace byte, then
    /// exactly `width·height` bytes.
    pub fn decode(bytes: &[u8]) -> Result<Self, PgmError> {
        let err = |offset, message: &str| PgmError { offset, message: message.to_string() };
        if bytes.len() < 2 || &bytes[..2] != b"P5" {
            return Err(err(0, "expected magic P5"));
        }
        let mut pos = 2;
        let field = |pos: &mut usize, name: &str| -> Result<(usize, usize), PgmError> {
            let start = *pos;
            loop {
                match bytes.get(*pos) {
                    Some(b) if b.is_ascii_whitespace() => *pos += 1,
                    Some(b'#') => {
                        while bytes.get(*pos).is_some_and(|b| *b != b'\n') {
                            *pos += 1;
                        }
                    }
                    _ => break,
                }
            }
            if *pos == start {
                return Err(err(*pos, &format!("expected whitespace before {name}")));
            }
            let digits = *pos;
            while bytes.get(*pos).is_some_and(u8::is_ascii_digit) {
                *pos += 1;
            }
            if *pos == digits {
                return Err(err(*pos, &format!("expected decimal {name}")));
            }
            std::str::from_utf8(&bytes[digits..*pos])
                .ok()
                .and_then(|s| s.parse().ok())
                .map(|v| (v, digits))
                .ok_or_else(|| err(digits, &format!("{name} out of range")))
        };
        let (width, _) = field(&mut pos, "width")?;
        let (height, _) = field(&mut pos, "height")?;
        let (maxval, maxval_at) = field(&mut pos, "maxval")?;
        if maxval != 255 {
            return Err(err(maxval_at, &format!("maxval {maxval} unsupported, expected 255")));
        }
        if width == 0 || height == 0 {
            return Err(err(2, "zero width or height"));
        }
        match bytes.get(pos) {
            Some(b) if b.is_ascii_whitespace() => pos += 1,
            _ => return Err(err(pos, "expected single whitespace after maxval")),
        }
        let need = width.checked_mul(height).ok_or_else(|| err(2, "image too large"))?;
        let payload = &bytes[pos..];
        if payload.len() < need {
            return Err(err(bytes.len(), &format!("payload truncated: {} of {need} bytes", payload.len())));
        }
        if payload.len() > need {
            return Err(err(pos + need, &format!("{} trailing bytes after payload", payload.len() - need)));
        }
        Ok(Self { width, height, pixels: payload.to_vec() })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = error::read(path)?;
        Self::decode(&bytes).map_err(|e| AppError::format(path, e.to_string()))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        error::write(path, &self.encode())
    }

    pub fn to_mask(&self, num_classes: usize) -> dragsaw_core::Result<ClassMap> {
        let mask = ClassMap::new(self.height, self.width, self.pixels.clone())?;
        mask.check_classes(num_classes)?;
        Ok(mask)
    }
}
