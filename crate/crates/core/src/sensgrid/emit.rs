//! CSV, JSON and SVG output. Floats use Rust's shortest round-trip formatting.

use std::fmt::Write as _;
use std::io::{Read, Write};

use serde_json::{json, Value};

use super::contour::{field_grid, ContourSet, Field};
use super::{GridPoint, GridResult, PointStatus};
use crate::error::{Error, Result};

fn io_err(e: std::io::Error) -> Error {
    Error::Io {
        path: "<output>".into(),
        source: e,
    }
}

fn header(m: usize) -> Vec<String> {
    let mut h = vec!["zeta_z".to_string()];
    h.extend((1..=m).map(|j| format!("zeta_{j}")));
    for j in 1..=m {
        h.push(format!("tau_{j}"));
        h.push(format!("se_{j}"));
        h.push(format!("t_{j}"));
    }
    h.push("status".into());
    h
}

/// One row per lattice point: `zeta_z, zeta_1..zeta_m, tau_1, se_1, t_1, ..., status`.
pub fn write_grid_csv<W: Write>(grid: &GridResult, writer: W) -> Result<()> {
    let m = grid.n_causes();
    let mut w = csv::Writer::from_writer(writer);
    w.write_record(header(m))?;
    for p in &grid.points {
        let mut row = vec![p.zeta_z.to_string()];
        row.extend(p.zeta.iter().map(f64::to_string));
        for j in 0..m {
            row.push(p.tau[j].to_string());
            row.push(p.se[j].to_string());
            row.push(p.t[j].to_string());
        }
        row.push(p.status.to_string());
        w.write_record(row)?;
    }
    w.flush().map_err(io_err)
}

/// Parses [`write_grid_csv`] output. Metadata is not stored in CSV.
pub fn read_grid_csv<R: Read>(reader: R) -> Result<GridResult> {
    let mut r = csv::Reader::from_reader(reader);
    let head = r.headers()?.clone();
    let cols = head.len();
    if cols < 2 || (cols - 2) % 4 != 0 {
        return Err(Error::InvalidDataset(format!("grid CSV has {cols} columns")));
    }
    let m = (cols - 2) / 4;
    if head.iter().ne(header(m).iter().map(String::as_str)) {
        return Err(Error::InvalidDataset("grid CSV header does not match".into()));
    }
    let mut points = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        let num = |c: usize| -> Result<f64> {
            rec[c].parse().map_err(|_| Error::NonNumeric {
                row: i + 1,
                column: head[c].to_string(),
                value: rec[c].to_string(),
            })
        };
        let zeta = (1..=m).map(num).collect::<Result<Vec<_>>>()?;
        let mut tau = Vec::with_capacity(m);
        let mut se = Vec::with_capacity(m);
        let mut t = Vec::with_capacity(m);
        for j in 0..m {
            tau.push(num(1 + m + 3 * j)?);
            se.push(num(2 + m + 3 * j)?);
            t.push(num(3 + m + 3 * j)?);
        }
        points.push(GridPoint {
            zeta_z: num(0)?,
            zeta,
            tau,
            se,
            t,
            status: rec[cols - 1].parse::<PointStatus>()?,
        });
    }
    Ok(GridResult {
        points,
        metadata: None,
    })
}

fn num(v: f64) -> Value {
    if v.is_finite() {
        json!(v)
    } else {
        Value::Null
    }
}

fn nums(v: &[f64]) -> Value {
    Value::Array(v.iter().copied().map(num).collect())
}

/// `{"metadata": {...}, "points": [...]}`; non-finite numbers become `null`.
pub fn write_grid_json<W: Write>(grid: &GridResult, mut writer: W) -> Result<()> {
    let points: Vec<Value> = grid
        .points
        .iter()
        .map(|p| {
            json!({
                "zeta_z": num(p.zeta_z),
                "zeta": nums(&p.zeta),
                "tau": nums(&p.tau),
                "se": nums(&p.se),
                "t": nums(&p.t),
                "status": p.status.to_string(),
            })
        })
        .collect();
    let doc = json!({
        "metadata": grid.metadata.as_ref().map(serde_json::to_value).transpose()?,
        "points": points,
    });
    serde_json::to_writer_pretty(&mut writer, &doc)?;
    writer.write_all(b"\n").map_err(io_err)
}

pub fn write_contours_json<W: Write>(sets: &[ContourSet], mut writer: W) -> Result<()> {
    serde_json::to_writer_pretty(&mut writer, sets)?;
    writer.write_all(b"\n").map_err(io_err)
}

#[derive(Debug, Clone, PartialEq)]
pub struct SvgStyle {
    pub width: f64,
    pub height: f64,
    /// Stroke colour per contour set, cycled.
    pub colors: Vec<String>,
}

impl Default for SvgStyle {
    fn default() -> Self {
        SvgStyle {
            width: 640.0,
            height: 560.0,
            colors: vec!["#1f4fbf".into(), "#d62728".into(), "#2ca02c".into(), "#9467bd".into()],
        }
    }
}

fn heat(t: f64) -> String {
    // blue -> white -> red
    let t = t.clamp(0.0, 1.0);
    let (r, g, b) = if t < 0.5 {
        let s = t / 0.5;
        (255.0 * s, 255.0 * s, 255.0)
    } else {
        let s = (1.0 - t) / 0.5;
        (255.0, 255.0 * s, 255.0 * s)
    };
    format!("#{:02x}{:02x}{:02x}", r.round() as u8, g.round() as u8, b.round() as u8)
}

/// Heat map of `field` for `cause`, axes box with tick labels, and the
/// contour polylines with their level labels. Byte output depends only on
/// the inputs.
pub fn write_svg<W: Write>(
    grid: &GridResult,
    field: Field,
    cause: usize,
    contours: &[ContourSet],
    style: &SvgStyle,
    mut writer: W,
) -> Result<()> {
    let (xs, ys, v) = field_grid(grid, field, cause)?;
    let (ml, mr, mt, mb) = (70.0, 20.0, 30.0, 60.0);
    let pw = style.width - ml - mr;
    let ph = style.height - mt - mb;
    let (x0, x1) = (xs[0], xs[xs.len() - 1]);
    let (y0, y1) = (ys[0], ys[ys.len() - 1]);
    let sx = |x: f64| ml + (x - x0) / (x1 - x0) * pw;
    let sy = |y: f64| mt + ph - (y - y0) / (y1 - y0) * ph;
    let finite: Vec<f64> = v.iter().flatten().copied().filter(|x| x.is_finite()).collect();
    let lo = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#,
        w = style.width,
        h = style.height
    );
    let _ = writeln!(s, r#"<g id="heat">"#);
    let half = |a: &[f64], i: usize| -> (f64, f64) {
        let lo = if i == 0 { a[0] } else { 0.5 * (a[i - 1] + a[i]) };
        let hi = if i + 1 == a.len() { a[i] } else { 0.5 * (a[i] + a[i + 1]) };
        (lo, hi)
    };
    for (i, row) in v.iter().enumerate() {
        for (k, &val) in row.iter().enumerate() {
            let (xa, xb) = half(&xs, i);
            let (ya, yb) = half(&ys, k);
            let fill = if val.is_finite() {
                heat(if hi > lo { (val - lo) / (hi - lo) } else { 0.5 })
            } else {
                "#bbbbbb".to_string()
            };
            let _ = writeln!(
                s,
                r#"<rect x="{:.3}" y="{:.3}" width="{:.3}" height="{:.3}" fill="{}"/>"#,
                sx(xa),
                sy(yb),
                sx(xb) - sx(xa),
                sy(ya) - sy(yb),
                fill
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(
        s,
        r#"<rect x="{ml:.3}" y="{mt:.3}" width="{pw:.3}" height="{ph:.3}" fill="none" stroke="black"/>"#
    );
    let _ = writeln!(s, r#"<g id="axes" font-family="sans-serif" font-size="11">"#);
    for &x in &xs {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.3}" y1="{1:.3}" x2="{0:.3}" y2="{2:.3}" stroke="black"/><text x="{0:.3}" y="{3:.3}" text-anchor="middle">{4}</text>"#,
            sx(x),
            mt + ph,
            mt + ph + 5.0,
            mt + ph + 18.0,
            x
        );
    }
    for &y in &ys {
        let _ = writeln!(
            s,
            r#"<line x1="{0:.3}" y1="{1:.3}" x2="{2:.3}" y2="{1:.3}" stroke="black"/><text x="{3:.3}" y="{4:.3}" text-anchor="end">{5}</text>"#,
            ml - 5.0,
            sy(y),
            ml,
            ml - 8.0,
            sy(y) + 4.0,
            y
        );
    }
    let _ = writeln!(
        s,
        r#"<text x="{:.3}" y="{:.3}" text-anchor="middle">zeta_z</text>"#,
        ml + pw / 2.0,
        style.height - 15.0
    );
    let _ = writeln!(
        s,
        r#"<text x="15" y="{:.3}" text-anchor="middle" transform="rotate(-90 15 {:.3})">zeta_{}</text>"#,
        mt + ph / 2.0,
        mt + ph / 2.0,
        cause
    );
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, r#"<g id="contours" fill="none" stroke-width="2">"#);
    for (n, set) in contours.iter().enumerate() {
        let color = style.colors.get(n % style.colors.len().max(1)).map_or("black", String::as_str);
        let label = format!("{} = {}", set.field.name(), set.level);
        for line in &set.polylines {
            let pts: Vec<String> = line.iter().map(|&(x, y)| format!("{:.3},{:.3}", sx(x), sy(y))).collect();
            let _ = writeln!(
                s,
                r#"<polyline points="{}" stroke="{}"><title>{}</title></polyline>"#,
                pts.join(" "),
                color,
                label
            );
        }
        if let Some(&(x, y)) = set.polylines.first().and_then(|l| l.first()) {
            let _ = writeln!(
                s,
                r#"<text x="{:.3}" y="{:.3}" fill="{}" stroke="none" font-family="sans-serif" font-size="11">{}</text>"#,
                sx(x) + 3.0,
                sy(y) - 3.0,
                color,
                label
            );
        }
    }
    let _ = writeln!(s, "</g>");
    let _ = writeln!(s, "</svg>");
    writer.write_all(s.as_bytes()).map_err(io_err)
}
