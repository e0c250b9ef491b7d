//! Minimal raster charts: heatmap colours and a dual-axis line plot.

use std::path::Path;

use image::{Rgb, RgbImage};
use imageproc::drawing::{draw_filled_circle_mut, draw_hollow_rect_mut, draw_line_segment_mut};
use imageproc::rect::Rect;

use crate::error::{Error, Result};

const VIRIDIS: [[f64; 3]; 5] = [
    [0.267, 0.005, 0.329],
    [0.230, 0.322, 0.546],
    [0.128, 0.567, 0.551],
    [0.369, 0.789, 0.383],
    [0.993, 0.906, 0.144],
];

/// Viridis-style colour for `v` in `[0, 1]`.
pub fn heat_color(v: f64) -> [f64; 3] {
    let v = if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 };
    let pos = v * (VIRIDIS.len() - 1) as f64;
    let i = (pos.floor() as usize).min(VIRIDIS.len() - 2);
    let f = pos - i as f64;
    let (a, b) = (VIRIDIS[i], VIRIDIS[i + 1]);
    [
        a[0] + (b[0] - a[0]) * f,
        a[1] + (b[1] - a[1]) * f,
        a[2] + (b[2] - a[2]) * f,
    ]
}

fn range(v: &[f64]) -> (f64, f64) {
    let lo = v.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !lo.is_finite() || !hi.is_finite() {
        (0.0, 1.0)
    } else if hi - lo < 1e-12 {
        (lo - 0.5, hi + 0.5)
    } else {
        let pad = 0.05 * (hi - lo);
        (lo - pad, hi + pad)
    }
}

/// Two series over a shared x axis, each scaled to its own vertical range
/// (left series blue, right series orange). Axis ticks mark the x values.
pub fn dual_axis_plot(xs: &[f64], left: &[f64], right: &[f64], width: u32, height: u32) -> RgbImage {
    let mut img = RgbImage::from_pixel(width, height, Rgb([255, 255, 255]));
    let (m_l, m_r, m_t, m_b) = (40.0f32, 40.0f32, 20.0f32, 30.0f32);
    let (pw, ph) = (width as f32 - m_l - m_r, height as f32 - m_t - m_b);
    let axis = Rgb([60, 60, 60]);
    draw_hollow_rect_mut(
        &mut img,
        Rect::at(m_l as i32, m_t as i32).of_size(pw.max(1.0) as u32, ph.max(1.0) as u32),
        axis,
    );
    let (x_lo, x_hi) = range(xs);
    let sx = |x: f64| m_l + ((x - x_lo) / (x_hi - x_lo)) as f32 * pw;
    for &x in xs {
        let px = sx(x);
        draw_line_segment_mut(&mut img, (px, m_t + ph), (px, m_t + ph + 5.0), axis);
    }
    for (series, color, tick_x) in [
        (left, Rgb([31, 119, 180]), (m_l - 5.0, m_l)),
        (right, Rgb([255, 127, 14]), (m_l + pw, m_l + pw + 5.0)),
    ] {
        let (lo, hi) = range(series);
        let sy = |y: f64| m_t + ph - ((y - lo) / (hi - lo)) as f32 * ph;
        for k in 0..=4 {
            let ty = m_t + ph * k as f32 / 4.0;
            draw_line_segment_mut(&mut img, (tick_x.0, ty), (tick_x.1, ty), color);
        }
        let pts: Vec<(f32, f32)> = xs.iter().zip(series).map(|(&x, &y)| (sx(x), sy(y))).collect();
        for w in pts.windows(2) {
            draw_line_segment_mut(&mut img, w[0], w[1], color);
            draw_line_segment_mut(&mut img, (w[0].0, w[0].1 + 1.0), (w[1].0, w[1].1 + 1.0), color);
        }
        for &(x, y) in &pts {
            draw_filled_circle_mut(&mut img, (x.round() as i32, y.round() as i32), 3, color);
        }
    }
    img
}

pub fn save_rgb(img: &RgbImage, path: &Path) -> Result<()> {
    img.save(path).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::Image {
            path: path.to_path_buf(),
            message: other.to_string(),
        },
    })
}
