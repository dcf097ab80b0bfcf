//! 8-bit binary PGM (P5) slice rendering for qualitative inspection.
//!
//! Volume slices are min-max normalized per image and the normalization is
//! recorded in a header comment; label slices map classes to evenly spaced
//! gray levels.

use std::path::Path;

use vafa_core::error::VolumeError;
use vafa_core::volume::{LabelField, Volume};

/// Extracts a 2D slice of a rank-3 field at `index` along `axis`
/// (0 = H, 1 = W, 2 = D) as (rows, cols, values).
fn slice_plane(
    extent: [usize; 3],
    axis: usize,
    index: usize,
    at: impl Fn(usize, usize, usize) -> f64,
) -> Result<(usize, usize, Vec<f64>), VolumeError> {
    assert!(axis < 3, "axis must be 0, 1, or 2");
    if index >= extent[axis] {
        return Err(VolumeError::BadShape(format!(
            "slice index {index} out of range for axis {axis} of extent {}",
            extent[axis]
        )));
    }
    let (rows, cols) = match axis {
        0 => (extent[1], extent[2]),
        1 => (extent[0], extent[2]),
        _ => (extent[0], extent[1]),
    };
    let mut values = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        for c in 0..cols {
            let v = match axis {
                0 => at(index, r, c),
                1 => at(r, index, c),
                _ => at(r, c, index),
            };
            values.push(v);
        }
    }
    Ok((rows, cols, values))
}

fn write_pgm(
    path: &Path,
    rows: usize,
    cols: usize,
    bytes: &[u8],
    comment: &str,
) -> std::io::Result<()> {
    let mut out = Vec::with_capacity(bytes.len() + 64);
    out.extend_from_slice(format!("P5\n# {comment}\n{cols} {rows}\n255\n").as_bytes());
    out.extend_from_slice(bytes);
    std::fs::write(path, out)
}

/// Renders a volume slice, min-max normalized per image.
pub fn render_volume_slice(
    volume: &Volume,
    axis: usize,
    index: usize,
    path: &Path,
) -> Result<(), VolumeError> {
    let extent = volume.extent();
    let t = volume.tensor();
    let [_, w, d] = extent;
    let (rows, cols, values) =
        slice_plane(extent, axis, index, |ih, iw, id| t.data()[(ih * w + iw) * d + id])?;
    let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let bytes: Vec<u8> =
        values.iter().map(|&v| (((v - lo) / span) * 255.0).round() as u8).collect();
    write_pgm(path, rows, cols, &bytes, &format!("min={lo} max={hi} (min-max normalized)"))
        .map_err(|e| VolumeError::BadShape(format!("write {}: {e}", path.display())))
}

/// Renders a label slice, classes mapped to evenly spaced gray levels.
pub fn render_label_slice(
    labels: &LabelField,
    axis: usize,
    index: usize,
    path: &Path,
) -> Result<(), VolumeError> {
    let extent = labels.extent();
    let [_, w, d] = extent;
    let cls = labels.classes();
    let (rows, cols, values) = slice_plane(extent, axis, index, |ih, iw, id| {
        cls[(ih * w + iw) * d + id] as f64
    })?;
    let denom = (labels.num_class() - 1).max(1) as f64;
    let bytes: Vec<u8> =
        values.iter().map(|&v| ((v / denom) * 255.0).round() as u8).collect();
    write_pgm(
        path,
        rows,
        cols,
        &bytes,
        &format!("labels 0..{} mapped to 0..255", labels.num_class() - 1),
    )
    .map_err(|e| VolumeError::BadShape(format!("write {}: {e}", path.display())))
}

/// Minimal P5 reader (round-trip checks and downstream tooling).
pub fn parse_pgm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>), String> {
    let mut pos = 0usize;
    let mut token = || -> Result<String, String> {
        // skip whitespace and comment lines
        loop {
            while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
                pos += 1;
            }
            if pos < bytes.len() && bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
                continue;
            }
            break;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("unexpected end of header".into());
        }
        Ok(String::from_utf8_lossy(&bytes[start..pos]).into_owned())
    };
    if token()? != "P5" {
        return Err("not a P5 graymap".into());
    }
    let cols: usize = token()?.parse().map_err(|_| "bad width")?;
    let rows: usize = token()?.parse().map_err(|_| "bad height")?;
    let maxval: usize = token()?.parse().map_err(|_| "bad maxval")?;
    if maxval != 255 {
        return Err(format!("unsupported maxval {maxval}"));
    }
    let data_start = pos + 1; // single whitespace after maxval
    let expected = rows * cols;
    if bytes.len() < data_start + expected {
        return Err(format!(
            "payload truncated: expected {expected} bytes, got {}",
            bytes.len().saturating_sub(data_start)
        ));
    }
    Ok((rows, cols, bytes[data_start..data_start + expected].to_vec()))
}
