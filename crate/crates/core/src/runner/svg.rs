use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIZE: f64 = 480.0;
const PAD: f64 = 20.0;

fn color(i: usize, k: usize) -> String {
    let hue = 360.0 * i as f64 / k.max(1) as f64;
    format!("hsl({hue:.0},70%,45%)")
}

/// Scatter plot of the first two coordinates, one circle per row, colored
/// by `labels`.
pub fn scatter_svg(x: &Tensor, labels: &[usize], k: usize) -> Result<String> {
    if x.rows() != labels.len() || x.cols() < 2 {
        return Err(Error::invalid(
            "scatter needs one label per row and at least two columns",
        ));
    }
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for row in x.iter_rows() {
        for j in 0..2 {
            lo[j] = lo[j].min(row[j]);
            hi[j] = hi[j].max(row[j]);
        }
    }
    let span = (0..2).map(|j| hi[j] - lo[j]).fold(1e-9, f64::max);
    let scale = (SIZE - 2.0 * PAD) / span;
    let mut out = String::new();
    let _ = writeln!(
        out,
        r#"<?xml version="1.0" encoding="UTF-8"?>
<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">
<rect width="100%" height="100%" fill="white"/>"#
    );
    for (row, &l) in x.iter_rows().zip(labels) {
        let cx = PAD + (row[0] - lo[0]) * scale;
        let cy = SIZE - PAD - (row[1] - lo[1]) * scale;
        let _ = writeln!(
            out,
            r#"<circle cx="{cx:.2}" cy="{cy:.2}" r="2" fill="{}" fill-opacity="0.7"><title>mode {l}</title></circle>"#,
            color(l, k)
        );
    }
    out.push_str("</svg>\n");
    Ok(out)
}
