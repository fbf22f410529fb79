//! Binary masks and the `R1` run-length text format used for mask files.
//!
//! `R1 <w> <h> <run>+` — runs alternate background/foreground in row-major
//! order, starting with the background count (which may be 0). Runs sum to
//! `w * h`; the encoder never emits an interior zero-length run.

use std::fs;
use std::path::Path;

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MaskBitmap {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum MaskError {
    #[error("mask dimensions must be positive (got {width}x{height})")]
    NonPositiveDimensions { width: i64, height: i64 },
    #[error("bit count {got} does not match {width}x{height}")]
    BitCount { width: u32, height: u32, got: usize },
    #[error("expected `R1` header, found {0:?}")]
    BadHeader(String),
    #[error("non-numeric token {0:?}")]
    NonNumeric(String),
    #[error("no runs after the header")]
    MissingRuns,
    #[error("runs sum to {got}, expected {expected}")]
    RunSumMismatch { expected: u64, got: u64 },
    #[error("mask io error for {path}: {message}")]
    Io { path: String, message: String },
}

impl MaskBitmap {
    pub fn new(width: u32, height: u32, bits: Vec<bool>) -> Result<Self, MaskError> {
        if width == 0 || height == 0 {
            return Err(MaskError::NonPositiveDimensions { width: width.into(), height: height.into() });
        }
        if bits.len() != width as usize * height as usize {
            return Err(MaskError::BitCount { width, height, got: bits.len() });
        }
        Ok(Self { width, height, bits })
    }

    pub fn empty(width: u32, height: u32) -> Result<Self, MaskError> {
        Self::new(width, height, vec![false; width as usize * height as usize])
    }

    pub fn from_fn(width: u32, height: u32, f: impl Fn(u32, u32) -> bool) -> Result<Self, MaskError> {
        let bits = (0..height).flat_map(|y| (0..width).map(move |x| (x, y))).map(|(x, y)| f(x, y)).collect();
        Self::new(width, height, bits)
    }

    /// Axis-aligned filled rectangle `[x0, x1) x [y0, y1)`, clipped to the frame.
    pub fn rect(width: u32, height: u32, x0: u32, y0: u32, x1: u32, y1: u32) -> Result<Self, MaskError> {
        Self::from_fn(width, height, |x, y| x >= x0 && x < x1 && y >= y0 && y < y1)
    }

    pub fn width(&self) -> u32 {
        self.width
    }

    pub fn height(&self) -> u32 {
        self.height
    }

    pub fn bits(&self) -> &[bool] {
        &self.bits
    }

    pub fn get(&self, x: u32, y: u32) -> bool {
        self.bits[y as usize * self.width as usize + x as usize]
    }

    pub fn count(&self) -> usize {
        self.bits.iter().filter(|b| **b).count()
    }

    pub fn same_shape(&self, other: &MaskBitmap) -> bool {
        self.width == other.width && self.height == other.height
    }
}

/// Encode a mask in the `R1` run-length grammar (no trailing newline).
pub fn rle_encode(mask: &MaskBitmap) -> String {
    let mut out = format!("R1 {} {}", mask.width, mask.height);
    let mut current = false;
    let mut run = 0u64;
    for &bit in &mask.bits {
        if bit == current {
            run += 1;
        } else {
            out.push_str(&format!(" {run}"));
            current = bit;
            run = 1;
        }
    }
    out.push_str(&format!(" {run}"));
    out
}

/// Decode `R1` text. Surrounding whitespace (e.g. the file's final newline)
/// is ignored.
pub fn rle_decode(text: &str) -> Result<MaskBitmap, MaskError> {
    let mut tokens = text.split_whitespace();
    match tokens.next() {
        Some("R1") => {}
        Some(other) => return Err(MaskError::BadHeader(other.to_owned())),
        None => return Err(MaskError::BadHeader(String::new())),
    }
    let number = |tok: Option<&str>| -> Result<i64, MaskError> {
        let tok = tok.ok_or(MaskError::MissingRuns)?;
        tok.parse::<i64>().map_err(|_| MaskError::NonNumeric(tok.to_owned()))
    };
    let width = number(tokens.next())?;
    let height = number(tokens.next())?;
    if width <= 0 || height <= 0 || width > u32::MAX as i64 || height > u32::MAX as i64 {
        return Err(MaskError::NonPositiveDimensions { width, height });
    }
    let expected = width as u64 * height as u64;
    let mut runs = Vec::new();
    for tok in tokens {
        let run: u64 = tok.parse().map_err(|_| MaskError::NonNumeric(tok.to_owned()))?;
        runs.push(run);
    }
    if runs.is_empty() {
        return Err(MaskError::MissingRuns);
    }
    let total = runs.iter().try_fold(0u64, |acc, r| acc.checked_add(*r)).unwrap_or(u64::MAX);
    if total != expected {
        return Err(MaskError::RunSumMismatch { expected, got: total });
    }
    let mut bits = Vec::with_capacity(expected as usize);
    for (i, run) in runs.iter().enumerate() {
        bits.extend(std::iter::repeat(i % 2 == 1).take(*run as usize));
    }
    MaskBitmap::new(width as u32, height as u32, bits)
}

/// Read an `R1` mask file.
pub fn read_mask_file(path: &Path) -> Result<MaskBitmap, MaskError> {
    let text = fs::read_to_string(path)
        .map_err(|e| MaskError::Io { path: path.display().to_string(), message: e.to_string() })?;
    rle_decode(&text)
}

/// Write an `R1` mask file (ASCII, newline-terminated).
pub fn write_mask_file(path: &Path, mask: &MaskBitmap) -> Result<(), MaskError> {
    let io = |e: std::io::Error| MaskError::Io { path: path.display().to_string(), message: e.to_string() };
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(io)?;
    }
    fs::write(path, format!("{}\n", rle_encode(mask))).map_err(io)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn small_cases() {
        assert_eq!(rle_encode(&MaskBitmap::empty(2, 2).unwrap()), "R1 2 2 4");
        assert_eq!(rle_encode(&MaskBitmap::new(2, 2, vec![true; 4]).unwrap()), "R1 2 2 0 4");
    }

    #[test]
    fn center_pixel_matches_row_major_scan() {
        let m = MaskBitmap::from_fn(3, 3, |x, y| x == 1 && y == 1).unwrap();
        // brute-force scan: collect row-major bits and count alternating runs
        let mut runs = vec![0u64];
        let mut cur = false;
        for y in 0..3 {
            for x in 0..3 {
                let b = m.get(x, y);
                if b != cur {
                    runs.push(0);
                    cur = b;
                }
                *runs.last_mut().unwrap() += 1;
            }
        }
        let expected = format!("R1 3 3 {}", runs.iter().map(|r| r.to_string()).collect::<Vec<_>>().join(" "));
        assert_eq!(expected, "R1 3 3 4 1 4");
        assert_eq!(rle_encode(&m), expected);
    }

    #[test]
    fn decode_errors() {
        assert!(matches!(rle_decode("R1 2 2 3"), Err(MaskError::RunSumMismatch { expected: 4, got: 3 })));
        assert!(matches!(rle_decode("R1 2 x 4"), Err(MaskError::NonNumeric(_))));
        assert!(matches!(rle_decode("R1 2 2 1 a"), Err(MaskError::NonNumeric(_))));
        assert!(matches!(rle_decode("R1 0 2 0"), Err(MaskError::NonPositiveDimensions { .. })));
        assert!(matches!(rle_decode("R1 -2 2 4"), Err(MaskError::NonPositiveDimensions { .. })));
        assert!(matches!(rle_decode("R2 2 2 4"), Err(MaskError::BadHeader(_))));
        assert!(matches!(rle_decode("R1 2 2"), Err(MaskError::MissingRuns)));
    }

    #[test]
    fn trailing_newline_accepted() {
        let m = rle_decode("R1 3 3 4 1 4\n").unwrap();
        assert_eq!(m.count(), 1);
        assert!(m.get(1, 1));
    }

    fn bitmap() -> impl Strategy<Value = MaskBitmap> {
        (1u32..=64, 1u32..=64).prop_flat_map(|(w, h)| {
            proptest::collection::vec(any::<bool>(), (w * h) as usize)
                .prop_map(move |bits| MaskBitmap::new(w, h, bits).unwrap())
        })
    }

    proptest! {
        #[test]
        fn rle_round_trip(m in bitmap()) {
            let text = rle_encode(&m);
            let back = rle_decode(&text).unwrap();
            prop_assert_eq!(&back, &m);
            prop_assert_eq!(rle_encode(&back), text.clone());
            // no interior zero runs
            let runs: Vec<u64> = text.split(' ').skip(3).map(|t| t.parse().unwrap()).collect();
            prop_assert!(runs.iter().skip(1).all(|r| *r > 0));
        }
    }
}
