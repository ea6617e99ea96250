use std::sync::LazyLock;

use regex::Regex;
use thiserror::Error;

use crate::types::{BoundingBox, InvariantError};

/// Failure kinds of [`parse_bbox`]. Only `NoMatch` is worth retrying with a
/// new sample; the others mean the model produced a box we cannot trust.
#[derive(Debug, Clone, PartialEq, Error)]
pub enum BboxError {
    #[error("no bracketed [x1,y1,x2,y2] quadruple in model output")]
    NoMatch,
    #[error("malformed number `{0}` in bounding box")]
    MalformedNumber(String),
    #[error("coordinate {0} > 1 looks like a pixel value and no resolution was given")]
    PixelCoordinates(f64),
    #[error(transparent)]
    Invariant(#[from] InvariantError),
}

static BRACKETED_QUAD: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"\[([^\[\],]*),([^\[\],]*),([^\[\],]*),([^\[\],]*)\]").unwrap());
static DECIMAL: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"^[+-]?(\d+(\.\d*)?|\.\d+)([eE][+-]?\d+)?$").unwrap());

/// Extracts the first `[a,b,c,d]` in `text`. Values above 1 are treated as
/// pixels and are only accepted when `resolution = (width, height)` is
/// supplied.
pub fn parse_bbox(text: &str, resolution: Option<(f64, f64)>) -> Result<BoundingBox, BboxError> {
    let caps = BRACKETED_QUAD.captures(text).ok_or(BboxError::NoMatch)?;
    let mut v = [0.0f64; 4];
    for (i, slot) in v.iter_mut().enumerate() {
        let raw = caps[i + 1].trim();
        if !DECIMAL.is_match(raw) {
            return Err(BboxError::MalformedNumber(raw.to_string()));
        }
        *slot = raw
            .parse()
            .map_err(|_| BboxError::MalformedNumber(raw.to_string()))?;
    }
    if let Some(&big) = v.iter().find(|x| **x > 1.0) {
        match resolution {
            Some((w, h)) if w > 0.0 && h > 0.0 => {
                v[0] /= w;
                v[2] /= w;
                v[1] /= h;
                v[3] /= h;
            }
            _ => return Err(BboxError::PixelCoordinates(big)),
        }
    }
    Ok(BoundingBox::from_array(v)?)
}
