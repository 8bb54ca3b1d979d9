//! CSV and SVG artifacts.

use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::Path;

use anyhow::{bail, Context, Result};
use ndarray::Array2;

/// Writes a CSV whose first line is `# config-hash: <hash>`.
pub fn write_csv(path: &Path, hash: &str, header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> Result<()> {
    let mut file = BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?);
    writeln!(file, "# config-hash: {hash}")?;
    let mut w = csv::Writer::from_writer(file);
    w.write_record(header)?;
    for row in rows {
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_points(path: &Path, hash: &str, points: &Array2<f64>) -> Result<()> {
    let header: Vec<String> = (0..points.ncols()).map(|j| format!("x{j}")).collect();
    let header: Vec<&str> = header.iter().map(String::as_str).collect();
    let rows = points.rows().into_iter().map(|r| r.iter().map(|v| v.to_string()).collect());
    write_csv(path, hash, &header, rows)
}

/// Reads a numeric CSV with a header row, skipping `#` comment lines.
pub fn read_points(path: &Path) -> Result<Array2<f64>> {
    let mut r = csv::ReaderBuilder::new()
        .comment(Some(b'#'))
        .trim(csv::Trim::All)
        .from_path(path)
        .with_context(|| format!("reading {}", path.display()))?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut rows = 0;
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            bail!("{}: row {} has {} fields, expected {cols}", path.display(), i + 1, rec.len());
        }
        for field in rec.iter() {
            data.push(field.parse::<f64>().with_context(|| format!("{}: row {}: bad number {field:?}", path.display(), i + 1))?);
        }
        rows += 1;
    }
    if rows == 0 {
        bail!("{} has no data rows", path.display());
    }
    Ok(Array2::from_shape_vec((rows, cols), data)?)
}

const WIDTH: f64 = 640.0;
const HEIGHT: f64 = 480.0;
const MARGIN: f64 = 60.0;
const PALETTE: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#7f7f7f"];

/// Axis mapping from data to pixels, optionally logarithmic.
struct Axis {
    lo: f64,
    hi: f64,
    log: bool,
    px_lo: f64,
    px_hi: f64,
}

impl Axis {
    fn fit(values: impl Iterator<Item = f64>, log: bool, px_lo: f64, px_hi: f64) -> Self {
        let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
        for v in values.filter(|v| v.is_finite() && (!log || *v > 0.0)) {
            let v = if log { v.log10() } else { v };
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if !lo.is_finite() {
            (lo, hi) = (0.0, 1.0);
        }
        if hi - lo < 1e-12 {
            (lo, hi) = (lo - 0.5, hi + 0.5);
        }
        let pad = 0.03 * (hi - lo);
        Self { lo: lo - pad, hi: hi + pad, log, px_lo, px_hi }
    }

    fn map(&self, v: f64) -> Option<f64> {
        if !v.is_finite() || (self.log && v <= 0.0) {
            return None;
        }
        let v = if self.log { v.log10() } else { v };
        Some(self.px_lo + (v - self.lo) / (self.hi - self.lo) * (self.px_hi - self.px_lo))
    }

    /// Tick values in data units.
    fn ticks(&self) -> Vec<f64> {
        if self.log {
            (self.lo.ceil() as i32..=self.hi.floor() as i32).map(|e| 10f64.powi(e)).collect()
        } else {
            let raw = (self.hi - self.lo) / 5.0;
            let mag = 10f64.powf(raw.log10().floor());
            let step = [1.0, 2.0, 5.0, 10.0].iter().map(|m| m * mag).find(|s| *s >= raw).unwrap_or(raw);
            let first = (self.lo / step).ceil() as i64;
            let last = (self.hi / step).floor() as i64;
            (first..=last).map(|i| i as f64 * step).collect()
        }
    }
}

fn fmt_tick(v: f64) -> String {
    if v != 0.0 && (v.abs() >= 1e4 || v.abs() < 1e-2) {
        format!("{v:.0e}")
    } else {
        format!("{}", (v * 1e6).round() / 1e6)
    }
}

/// A named set of points drawn as a polyline or as dots.
pub struct Series {
    pub label: String,
    pub points: Vec<(f64, f64)>,
    pub line: bool,
    pub dashed: bool,
}

pub struct Plot {
    pub title: String,
    pub x_label: String,
    pub y_label: String,
    pub log_x: bool,
    pub log_y: bool,
    /// Draw `y = x` across the plotting area.
    pub diagonal: bool,
    pub series: Vec<Series>,
}

impl Plot {
    pub fn render(&self) -> String {
        let all = || self.series.iter().flat_map(|s| s.points.iter().copied());
        let mut xa = Axis::fit(all().map(|p| p.0), self.log_x, MARGIN, WIDTH - MARGIN / 2.0);
        let mut ya = Axis::fit(all().map(|p| p.1), self.log_y, HEIGHT - MARGIN, MARGIN / 2.0);
        if self.diagonal && !self.log_x && !self.log_y {
            let lo = xa.lo.min(ya.lo);
            let hi = xa.hi.max(ya.hi);
            (xa.lo, xa.hi, ya.lo, ya.hi) = (lo, hi, lo, hi);
        }
        let mut s = String::new();
        let _ = writeln!(
            s,
            r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" font-family="sans-serif" font-size="12">"#
        );
        let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
        let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle" font-size="14">{}</text>"#, WIDTH / 2.0, esc(&self.title));
        let (x0, x1, y0, y1) = (xa.px_lo, xa.px_hi, ya.px_lo, ya.px_hi);
        let _ = writeln!(s, r#"<rect x="{x0}" y="{y1}" width="{}" height="{}" fill="none" stroke="black"/>"#, x1 - x0, y0 - y1);
        for t in xa.ticks() {
            if let Some(px) = xa.map(t) {
                let _ = writeln!(s, r##"<line x1="{px:.1}" y1="{y0}" x2="{px:.1}" y2="{y1}" stroke="#ddd"/>"##);
                let _ = writeln!(s, r#"<text x="{px:.1}" y="{}" text-anchor="middle">{}</text>"#, y0 + 16.0, fmt_tick(t));
            }
        }
        for t in ya.ticks() {
            if let Some(py) = ya.map(t) {
                let _ = writeln!(s, r##"<line x1="{x0}" y1="{py:.1}" x2="{x1}" y2="{py:.1}" stroke="#ddd"/>"##);
                let _ = writeln!(s, r#"<text x="{}" y="{:.1}" text-anchor="end">{}</text>"#, x0 - 4.0, py + 4.0, fmt_tick(t));
            }
        }
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">{}</text>"#, (x0 + x1) / 2.0, HEIGHT - 16.0, esc(&self.x_label));
        let _ = writeln!(
            s,
            r#"<text x="16" y="{0}" text-anchor="middle" transform="rotate(-90 16 {0})">{1}</text>"#,
            (y0 + y1) / 2.0,
            esc(&self.y_label)
        );
        if self.diagonal {
            let lo = xa.lo.max(ya.lo);
            let hi = xa.hi.min(ya.hi);
            let unlog = |v: f64, log: bool| if log { 10f64.powf(v) } else { v };
            if let (Some(a), Some(b), Some(c), Some(d)) = (
                xa.map(unlog(lo, xa.log)),
                ya.map(unlog(lo, ya.log)),
                xa.map(unlog(hi, xa.log)),
                ya.map(unlog(hi, ya.log)),
            ) {
                let _ = writeln!(s, r#"<line x1="{a:.1}" y1="{b:.1}" x2="{c:.1}" y2="{d:.1}" stroke="black" stroke-dasharray="4 3"/>"#);
            }
        }
        for (i, series) in self.series.iter().enumerate() {
            let color = PALETTE[i % PALETTE.len()];
            let pts: Vec<(f64, f64)> =
                series.points.iter().filter_map(|&(x, y)| Some((xa.map(x)?, ya.map(y)?))).collect();
            if series.line {
                let path: Vec<String> = pts.iter().map(|(x, y)| format!("{x:.1},{y:.1}")).collect();
                let dash = if series.dashed { r#" stroke-dasharray="6 4""# } else { "" };
                let _ = writeln!(
                    s,
                    r#"<polyline fill="none" stroke="{color}" stroke-width="1.5"{dash} points="{}"/>"#,
                    path.join(" ")
                );
            } else {
                for (x, y) in pts {
                    let _ = writeln!(s, r#"<circle cx="{x:.1}" cy="{y:.1}" r="1.5" fill="{color}" fill-opacity="0.5"/>"#);
                }
            }
            let ly = MARGIN / 2.0 + 14.0 + 16.0 * i as f64;
            let _ = writeln!(s, r#"<rect x="{}" y="{}" width="10" height="10" fill="{color}"/>"#, x1 - 150.0, ly - 9.0);
            let _ = writeln!(s, r#"<text x="{}" y="{ly}">{}</text>"#, x1 - 135.0, esc(&series.label));
        }
        s.push_str("</svg>\n");
        s
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.render()).with_context(|| format!("writing {}", path.display()))
    }
}

fn esc(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_skips_the_hash_line() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        let pts = Array2::from_shape_vec((3, 2), vec![0.1, -2.0, 3.5, 1e-9, 0.0, 7.0]).unwrap();
        write_points(&path, "abc", &pts).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.starts_with("# config-hash: abc\nx0,x1\n"));
        assert_eq!(read_points(&path).unwrap(), pts);
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.csv");
        std::fs::write(&path, "a,b\n1,2\n3\n").unwrap();
        assert!(read_points(&path).is_err());
    }

    #[test]
    fn log_ticks_are_powers_of_ten() {
        let a = Axis::fit([1.0, 1000.0].into_iter(), true, 0.0, 100.0);
        assert_eq!(a.ticks(), vec![1.0, 10.0, 100.0, 1000.0]);
        assert!(a.map(-1.0).is_none());
    }

    #[test]
    fn svg_is_well_formed_enough() {
        let plot = Plot {
            title: "t <1>".into(),
            x_label: "k".into(),
            y_label: "err".into(),
            log_x: true,
            log_y: true,
            diagonal: false,
            series: vec![Series { label: "a".into(), points: vec![(1.0, 1.0), (10.0, 0.01)], line: true, dashed: false }],
        };
        let svg = plot.render();
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
        assert!(svg.contains("t &lt;1&gt;") && svg.contains("<polyline"));
    }
}
