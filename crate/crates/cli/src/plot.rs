//! Bare-bones raster line charts: frame, quartile grid, one polyline per series.

use image::{Rgb, RgbImage};

pub const BACKGROUND: Rgb<u8> = Rgb([255, 255, 255]);
const FRAME: Rgb<u8> = Rgb([40, 40, 40]);
const GRID: Rgb<u8> = Rgb([225, 225, 225]);
const MARGIN: u32 = 12;

/// Series colors in order: blue, orange, green, red.
pub const PALETTE: [Rgb<u8>; 4] = [
    Rgb([31, 119, 180]),
    Rgb([255, 127, 14]),
    Rgb([44, 160, 44]),
    Rgb([214, 39, 40]),
];

pub const ID_ONLY: Rgb<u8> = Rgb([31, 119, 180]);
pub const COMBINED: Rgb<u8> = Rgb([255, 127, 14]);

pub struct Series {
    /// One value per iteration; `None` leaves a gap.
    pub values: Vec<Option<f64>>,
    pub color: Rgb<u8>,
}

pub struct LineChart {
    pub width: u32,
    pub height: u32,
    /// Plot `log10(max(v, floor))` instead of `v`.
    pub log_floor: Option<f64>,
    pub series: Vec<Series>,
}

impl LineChart {
    pub fn new(width: u32, height: u32) -> Self {
        LineChart {
            width,
            height,
            log_floor: None,
            series: Vec::new(),
        }
    }

    pub fn log_scale(mut self, floor: f64) -> Self {
        self.log_floor = Some(floor);
        self
    }

    pub fn series(mut self, values: Vec<Option<f64>>, color: Rgb<u8>) -> Self {
        self.series.push(Series { values, color });
        self
    }

    fn transform(&self, v: f64) -> Option<f64> {
        let v = match self.log_floor {
            Some(floor) => v.max(floor).log10(),
            None => v,
        };
        v.is_finite().then_some(v)
    }

    pub fn render(&self) -> RgbImage {
        let mut img = RgbImage::from_pixel(self.width, self.height, BACKGROUND);
        let (x0, y0) = (MARGIN as i64, MARGIN as i64);
        let (x1, y1) = ((self.width - MARGIN) as i64, (self.height - MARGIN) as i64);
        for q in 1..4 {
            let y = y0 + (y1 - y0) * q / 4;
            line(&mut img, (x0, y), (x1, y), GRID);
            let x = x0 + (x1 - x0) * q / 4;
            line(&mut img, (x, y0), (x, y1), GRID);
        }

        let points: Vec<Vec<Option<f64>>> = self
            .series
            .iter()
            .map(|s| s.values.iter().map(|v| v.and_then(|v| self.transform(v))).collect())
            .collect();
        let all = points.iter().flatten().flatten().copied();
        let (lo, hi) = all.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)));
        let len = self.series.iter().map(|s| s.values.len()).max().unwrap_or(0);
        if lo.is_finite() && len > 0 {
            let (lo, hi) = if hi - lo < 1e-12 { (lo - 0.5, hi + 0.5) } else { (lo, hi) };
            let px = |i: usize| x0 + ((x1 - x0) as f64 * i as f64 / (len.max(2) - 1) as f64).round() as i64;
            let py = |v: f64| y1 - ((y1 - y0) as f64 * (v - lo) / (hi - lo)).round() as i64;
            for (s, pts) in self.series.iter().zip(&points) {
                let mut prev: Option<(i64, i64)> = None;
                for (i, v) in pts.iter().enumerate() {
                    match v {
                        Some(v) => {
                            let p = (px(i), py(*v));
                            line(&mut img, prev.unwrap_or(p), p, s.color);
                            prev = Some(p);
                        }
                        None => prev = None,
                    }
                }
            }
        }

        line(&mut img, (x0, y0), (x1, y0), FRAME);
        line(&mut img, (x0, y1), (x1, y1), FRAME);
        line(&mut img, (x0, y0), (x0, y1), FRAME);
        line(&mut img, (x1, y0), (x1, y1), FRAME);
        img
    }
}

/// Bresenham segment, clipped to the image.
pub fn line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        if x >= 0 && y >= 0 && (x as u32) < img.width() && (y as u32) < img.height() {
            img.put_pixel(x as u32, y as u32, color);
        }
        if x == to.0 && y == to.1 {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

/// One block of `block` pixels per entry, colored by `colors[i]`.
pub fn timeline(colors: &[Rgb<u8>], block: u32, height: u32) -> RgbImage {
    let width = (colors.len() as u32 * block).max(1);
    let mut img = RgbImage::from_pixel(width, height, BACKGROUND);
    for (i, &c) in colors.iter().enumerate() {
        for x in i as u32 * block..(i as u32 + 1) * block {
            for y in 0..height {
                img.put_pixel(x, y, c);
            }
        }
    }
    img
}
