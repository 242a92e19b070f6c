//! Line charts of metrics series, one colour per run.

use std::path::Path;

use image::{Rgb, RgbImage};

use evolm::metrics::MetricsRecord;
use evolm::{Error, Result};

const WIDTH: u32 = 640;
const HEIGHT: u32 = 400;
const MARGIN: u32 = 32;
const PALETTE: [[u8; 3]; 6] = [
    [31, 119, 180],
    [255, 127, 14],
    [44, 160, 44],
    [214, 39, 40],
    [148, 103, 189],
    [140, 86, 75],
];

/// The value plotted for a record: training loss, else accuracy.
fn value(r: &MetricsRecord) -> Option<f64> {
    r.loss.or(r.accuracy).filter(|v| v.is_finite())
}

fn points(records: &[MetricsRecord]) -> Vec<(f64, f64)> {
    records.iter().filter_map(|r| Some((r.step as f64, value(r)?))).collect()
}

fn line(img: &mut RgbImage, (x0, y0): (f64, f64), (x1, y1): (f64, f64), color: Rgb<u8>) {
    let n = ((x1 - x0).abs().max((y1 - y0).abs()).ceil() as usize).max(1);
    for i in 0..=n {
        let t = i as f64 / n as f64;
        let (x, y) = (x0 + (x1 - x0) * t, y0 + (y1 - y0) * t);
        if x >= 0.0 && y >= 0.0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
    }
}

/// Draws every series on shared axes and writes a PNG to `path`.
pub fn render(series: &[(String, Vec<MetricsRecord>)], path: &Path) -> Result<()> {
    let all: Vec<Vec<(f64, f64)>> = series.iter().map(|(_, r)| points(r)).collect();
    let flat: Vec<&(f64, f64)> = all.iter().flatten().collect();
    if flat.is_empty() {
        return Err(Error::Data("no loss or accuracy values to plot".into()));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (x, y) in &flat {
        xmin = xmin.min(*x);
        xmax = xmax.max(*x);
        ymin = ymin.min(*y);
        ymax = ymax.max(*y);
    }
    if xmax == xmin {
        xmax = xmin + 1.0;
    }
    if ymax == ymin {
        ymax = ymin + 1.0;
    }
    let (w, h, m) = (WIDTH as f64, HEIGHT as f64, MARGIN as f64);
    let to_px = |(x, y): (f64, f64)| {
        (
            m + (x - xmin) / (xmax - xmin) * (w - 2.0 * m),
            h - m - (y - ymin) / (ymax - ymin) * (h - 2.0 * m),
        )
    };
    let mut img = RgbImage::from_pixel(WIDTH, HEIGHT, Rgb([255, 255, 255]));
    let axis = Rgb([0, 0, 0]);
    line(&mut img, (m, h - m), (w - m, h - m), axis);
    line(&mut img, (m, m), (m, h - m), axis);
    for (i, pts) in all.iter().enumerate() {
        let color = Rgb(PALETTE[i % PALETTE.len()]);
        for pair in pts.windows(2) {
            line(&mut img, to_px(pair[0]), to_px(pair[1]), color);
        }
        if let [only] = pts.as_slice() {
            let (x, y) = to_px(*only);
            line(&mut img, (x - 2.0, y), (x + 2.0, y), color);
        }
    }
    img.save_with_format(path, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))
}
