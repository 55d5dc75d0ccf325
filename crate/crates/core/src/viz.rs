//! Flow visualization with the Middlebury color wheel.

use crate::error::{ensure_same_shape, Result};
use crate::flow::FlowField;
use crate::image::Image;

const RY: usize = 15;
const YG: usize = 6;
const GC: usize = 4;
const CB: usize = 11;
const BM: usize = 13;
const MR: usize = 6;

fn color_wheel() -> Vec<[f64; 3]> {
    let mut wheel = Vec::with_capacity(RY + YG + GC + CB + BM + MR);
    for i in 0..RY {
        wheel.push([1.0, i as f64 / RY as f64, 0.0]);
    }
    for i in 0..YG {
        wheel.push([1.0 - i as f64 / YG as f64, 1.0, 0.0]);
    }
    for i in 0..GC {
        wheel.push([0.0, 1.0, i as f64 / GC as f64]);
    }
    for i in 0..CB {
        wheel.push([0.0, 1.0 - i as f64 / CB as f64, 1.0]);
    }
    for i in 0..BM {
        wheel.push([i as f64 / BM as f64, 0.0, 1.0]);
    }
    for i in 0..MR {
        wheel.push([1.0, 0.0, 1.0 - i as f64 / MR as f64]);
    }
    wheel
}

/// Scale used for visualization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum MaxMagnitude {
    Fixed(f64),
    /// 99th percentile of the flow magnitude.
    Auto,
}

/// Encodes a flow field as an RGB image: hue from the vector angle, saturation
/// from `min(|w| / max_magnitude, 1)`. Zero flow is white.
pub fn flow_to_color(flow: &FlowField, max_magnitude: MaxMagnitude) -> Image {
    let mags: Vec<f64> = flow.data().chunks_exact(2).map(|p| p[0].hypot(p[1])).collect();
    let max = match max_magnitude {
        MaxMagnitude::Fixed(m) if m > 0.0 => m,
        _ => {
            let mut sorted = mags.clone();
            sorted.sort_by(f64::total_cmp);
            let idx = ((sorted.len() - 1) as f64 * 0.99).round() as usize;
            let p99 = sorted[idx];
            if p99 > 0.0 {
                p99
            } else {
                1.0
            }
        }
    };
    let wheel = color_wheel();
    let ncols = wheel.len();
    let mut data = Vec::with_capacity(mags.len() * 3);
    for (px, &mag) in flow.data().chunks_exact(2).zip(&mags) {
        let (u, v) = (px[0], px[1]);
        let rad = (mag / max).min(1.0);
        let angle = (-v).atan2(-u) / std::f64::consts::PI;
        let fk = (angle + 1.0) / 2.0 * (ncols - 1) as f64;
        let k0 = fk.floor() as usize % ncols;
        let k1 = (k0 + 1) % ncols;
        let f = fk - fk.floor();
        for (a, b) in wheel[k0].iter().zip(&wheel[k1]) {
            let col = (1.0 - f) * a + f * b;
            data.push(1.0 - rad * (1.0 - col));
        }
    }
    Image::from_parts(flow.height(), flow.width(), 3, data)
}

/// Endpoint-error heat map, black at 0 and white at `max_error` or above.
pub fn error_map(flow: &FlowField, gt: &FlowField, max_error: f64) -> Result<Image> {
    ensure_same_shape("error_map", flow.shape(), gt.shape())?;
    let data = flow
        .data()
        .chunks_exact(2)
        .zip(gt.data().chunks_exact(2))
        .map(|(a, b)| ((a[0] - b[0]).hypot(a[1] - b[1]) / max_error).min(1.0))
        .collect();
    Ok(Image::from_parts(flow.height(), flow.width(), 1, data))
}

/// Places images left to right, padding shorter ones with black. Single
/// channel images are expanded to RGB.
pub fn side_by_side(images: &[&Image]) -> Result<Image> {
    let h = images.iter().map(|i| i.height()).max().unwrap_or(2);
    let w: usize = images.iter().map(|i| i.width()).sum();
    let mut out = Image::filled(h, w.max(2), 3, 0.0)?;
    let mut x0 = 0;
    for img in images {
        for y in 0..img.height() {
            for x in 0..img.width() {
                for c in 0..3 {
                    let v = img.get(x, y, if img.channels() == 3 { c } else { 0 });
                    out.set(x0 + x, y, c, v);
                }
            }
        }
        x0 += img.width();
    }
    Ok(out)
}
