//! Normalized `class cx cy w h` annotation lines, one box per line.

use std::fmt::Write as _;
use std::path::Path;

use super::geometry::{BoundingBox, GoldBox};
use crate::error::{Error, Result};

/// Parse annotation text. `source` is used in error locations.
pub fn parse_annotations(
    text: &str,
    source: &str,
    image_width: usize,
    image_height: usize,
    num_classes: Option<usize>,
) -> Result<Vec<GoldBox>> {
    let (w, h) = (image_width as f64, image_height as f64);
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            location: format!("{source}:{}", idx + 1),
            message,
        };
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 5 {
            return Err(err(format!("expected 5 fields, found {}", fields.len())));
        }
        let class_id: usize = fields[0]
            .parse()
            .map_err(|_| err(format!("invalid class id {:?}", fields[0])))?;
        let mut vals = [0.0f64; 4];
        for (v, f) in vals.iter_mut().zip(&fields[1..]) {
            *v = f
                .parse()
                .map_err(|_| err(format!("invalid coordinate {f:?}")))?;
            if !(0.0..=1.0).contains(v) {
                return Err(err(format!("coordinate {f} outside [0, 1]")));
            }
        }
        if let Some(n) = num_classes {
            if class_id >= n {
                return Err(Error::Validation(format!(
                    "{source}:{}: class id {class_id} out of range for {n} classes",
                    idx + 1
                )));
            }
        }
        let [cx, cy, bw, bh] = vals;
        let bbox = BoundingBox::from_center(cx * w, cy * h, bw * w, bh * h)
            .map_err(|e| err(e.to_string()))?;
        out.push(GoldBox { class_id, bbox });
    }
    Ok(out)
}

pub fn load_annotations(
    path: impl AsRef<Path>,
    image_width: usize,
    image_height: usize,
    num_classes: Option<usize>,
) -> Result<Vec<GoldBox>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_annotations(
        &text,
        &path.display().to_string(),
        image_width,
        image_height,
        num_classes,
    )
}

pub fn format_annotations(boxes: &[GoldBox], image_width: usize, image_height: usize) -> String {
    let (w, h) = (image_width as f64, image_height as f64);
    let mut s = String::new();
    for g in boxes {
        let (cx, cy) = g.bbox.center();
        let _ = writeln!(
            s,
            "{} {:.6} {:.6} {:.6} {:.6}",
            g.class_id,
            (cx / w).clamp(0.0, 1.0),
            (cy / h).clamp(0.0, 1.0),
            (g.bbox.width() / w).clamp(0.0, 1.0),
            (g.bbox.height() / h).clamp(0.0, 1.0)
        );
    }
    s
}

pub fn write_annotations(
    path: impl AsRef<Path>,
    boxes: &[GoldBox],
    image_width: usize,
    image_height: usize,
) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_annotations(boxes, image_width, image_height))
        .map_err(|e| Error::io(path, e))
}
