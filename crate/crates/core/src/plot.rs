//! Static figures: training curves (SVG), keypoint overlays and match
//! visualisations (PNG).

use std::path::Path;

use plotters::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::Homography;
use crate::keypoints::KeypointSet;
use crate::raster::Image;
use crate::trainer::StepReport;

fn plot_err(e: impl std::fmt::Display) -> Error {
    Error::Format(format!("plot: {e}"))
}

/// Per-component loss curves against the step index.
pub fn loss_curve_svg(reports: &[StepReport], path: &Path) -> Result<()> {
    let steps: Vec<&StepReport> = reports.iter().filter(|r| !r.skipped).collect();
    let root = SVGBackend::new(path, (900, 540)).into_drawing_area();
    root.fill(&WHITE).map_err(plot_err)?;
    let max_step = steps.iter().map(|r| r.step).max().unwrap_or(1).max(1) as f64;
    let series: [(&str, fn(&StepReport) -> f64, RGBColor); 5] = [
        ("total", |r| r.losses.total, BLACK),
        ("loc", |r| r.losses.loc, BLUE),
        ("desc", |r| r.losses.desc, RED),
        ("score", |r| r.losses.score, GREEN),
        ("io", |r| r.losses.io, MAGENTA),
    ];
    let (lo, hi) = steps.iter().flat_map(|r| series.iter().map(move |s| (s.1)(r))).fold((0.0f64, 1e-6f64), |(lo, hi), v| {
        if v.is_finite() {
            (lo.min(v), hi.max(v))
        } else {
            (lo, hi)
        }
    });
    let mut chart = ChartBuilder::on(&root)
        .caption("training losses", ("sans-serif", 22))
        .margin(12)
        .x_label_area_size(36)
        .y_label_area_size(56)
        .build_cartesian_2d(0.0..max_step, lo..hi * 1.05)
        .map_err(plot_err)?;
    chart.configure_mesh().x_desc("step").y_desc("loss").draw().map_err(plot_err)?;
    for (name, get, color) in series {
        let pts: Vec<(f64, f64)> = steps.iter().map(|r| (r.step as f64, get(r))).collect();
        if pts.iter().all(|p| p.1 == 0.0) {
            continue;
        }
        chart
            .draw_series(LineSeries::new(pts, color.stroke_width(1)))
            .map_err(plot_err)?
            .label(name)
            .legend(move |(x, y)| PathElement::new(vec![(x, y), (x + 18, y)], color));
    }
    chart.configure_series_labels().border_style(BLACK).background_style(WHITE.mix(0.8)).draw().map_err(plot_err)?;
    root.present().map_err(plot_err)
}

fn put(img: &mut Image, x: i64, y: i64, c: [f32; 3]) {
    if x >= 0 && y >= 0 && (x as usize) < img.width && (y as usize) < img.height {
        for (ch, v) in c.iter().enumerate().take(img.channels) {
            img.set(ch, y as usize, x as usize, *v);
        }
    }
}

fn ring(img: &mut Image, p: [f64; 2], r: f64, c: [f32; 3]) {
    let steps = (r * 8.0).ceil().max(8.0) as usize;
    for k in 0..steps {
        let a = k as f64 / steps as f64 * std::f64::consts::TAU;
        put(img, (p[0] + r * a.cos()).round() as i64, (p[1] + r * a.sin()).round() as i64, c);
    }
}

fn segment(img: &mut Image, a: [f64; 2], b: [f64; 2], c: [f32; 3]) {
    let n = ((b[0] - a[0]).abs().max((b[1] - a[1]).abs()).ceil() as usize).max(1);
    for k in 0..=n {
        let t = k as f64 / n as f64;
        put(img, (a[0] + t * (b[0] - a[0])).round() as i64, (a[1] + t * (b[1] - a[1])).round() as i64, c);
    }
}

/// Blue (low) to red (high) score colour.
fn score_color(s: f64) -> [f32; 3] {
    let s = s.clamp(0.0, 1.0) as f32;
    [s, 0.2, 1.0 - s]
}

/// The image with a ring at every keypoint coloured by score.
pub fn keypoint_overlay(image: &Image, keypoints: &KeypointSet) -> Image {
    let mut out = to_rgb(image);
    for (p, &s) in keypoints.points.iter().zip(&keypoints.scores) {
        ring(&mut out, *p, 2.5, score_color(s));
    }
    out
}

fn to_rgb(image: &Image) -> Image {
    if image.channels == 3 {
        image.clone()
    } else {
        Image::from_fn(3, image.height, image.width, |_, y, x| image.get(0, y, x))
    }
}

/// Side-by-side view with one line per match: green when the warped source
/// keypoint lands within `tau` of its match, red otherwise.
pub fn match_image(
    source: &Image,
    target: &Image,
    a: &KeypointSet,
    b: &KeypointSet,
    matches: &[(usize, usize)],
    h: &Homography,
    tau: f64,
) -> Image {
    let (s, t) = (to_rgb(source), to_rgb(target));
    let height = s.height.max(t.height);
    let width = s.width + t.width;
    let mut out = Image::from_fn(3, height, width, |c, y, x| {
        if x < s.width {
            if y < s.height { s.get(c, y, x) } else { 0.0 }
        } else if y < t.height {
            t.get(c, y, x - s.width)
        } else {
            0.0
        }
    });
    let dx = s.width as f64;
    for &(i, j) in matches {
        let pa = a.points[i];
        let pb = b.points[j];
        let ok = h.apply(pa).is_some_and(|q| ((q[0] - pb[0]).powi(2) + (q[1] - pb[1]).powi(2)).sqrt() <= tau);
        let c = if ok { [0.1, 0.9, 0.1] } else { [0.9, 0.1, 0.1] };
        segment(&mut out, pa, [pb[0] + dx, pb[1]], c);
    }
    out
}
