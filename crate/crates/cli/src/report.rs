//! Median tables and error-versus-epsilon charts from a results file.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use ellipse_robust::Error;

use crate::commands::RESULTS_HEADER;
use crate::CliError;

pub const METRICS: [&str; 4] = ["rel_spectral", "rel_frobenius", "pca_projector_error", "scale_error"];

#[derive(Debug, Clone, PartialEq)]
pub struct Cell {
    pub epsilon: f64,
    pub estimator: String,
    pub rows: usize,
    /// Median over rows of each metric in [`METRICS`], ignoring blanks.
    pub medians: [Option<f64>; 4],
}

fn parse_err(line: usize, message: impl Into<String>) -> CliError {
    CliError::Parse(Error::Parse {
        line,
        message: message.into(),
    })
}

/// Parses a results file and groups it by `(epsilon, estimator)`.
pub fn summarize(text: &str) -> Result<Vec<Cell>, CliError> {
    let mut r = csv::ReaderBuilder::new().has_headers(true).from_reader(text.as_bytes());
    let header = r.headers().map_err(|e| parse_err(1, e.to_string()))?.clone();
    if header.iter().collect::<Vec<_>>() != RESULTS_HEADER {
        return Err(parse_err(1, format!("unexpected header; expected {}", RESULTS_HEADER.join(","))));
    }
    let mut groups: BTreeMap<(u64, String), (f64, Vec<[Option<f64>; 4]>)> = BTreeMap::new();
    for rec in r.records() {
        let rec = rec.map_err(|e| {
            let line = e.position().map(|p| p.line() as usize).unwrap_or(0);
            parse_err(line, e.to_string())
        })?;
        let line = rec.position().map(|p| p.line() as usize).unwrap_or(0);
        let num = |i: usize| -> Result<Option<f64>, CliError> {
            let f = rec.get(i).unwrap_or("").trim();
            if f.is_empty() {
                return Ok(None);
            }
            f.parse::<f64>()
                .map(Some)
                .map_err(|_| parse_err(line, format!("column {} is not a number: {f:?}", RESULTS_HEADER[i])))
        };
        let eps = num(1)?.ok_or_else(|| parse_err(line, "missing epsilon"))?;
        let estimator = rec.get(5).unwrap_or("").trim().to_string();
        if estimator.is_empty() {
            return Err(parse_err(line, "missing estimator"));
        }
        let vals = [num(6)?, num(7)?, num(8)?, num(9)?];
        groups
            .entry((eps.to_bits(), estimator))
            .or_insert_with(|| (eps, Vec::new()))
            .1
            .push(vals);
    }
    if groups.is_empty() {
        return Err(parse_err(1, "no data rows"));
    }
    let mut cells: Vec<Cell> = groups
        .into_iter()
        .map(|((_, estimator), (epsilon, vals))| {
            let mut medians = [None; 4];
            for (k, m) in medians.iter_mut().enumerate() {
                let col: Vec<f64> = vals.iter().filter_map(|v| v[k]).collect();
                *m = median(&col);
            }
            Cell {
                epsilon,
                estimator,
                rows: vals.len(),
                medians,
            }
        })
        .collect();
    cells.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon).then(a.estimator.cmp(&b.estimator)));
    Ok(cells)
}

pub fn median(v: &[f64]) -> Option<f64> {
    if v.is_empty() {
        return None;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let m = s.len() / 2;
    Some(if s.len() % 2 == 1 { s[m] } else { 0.5 * (s[m - 1] + s[m]) })
}

pub fn table(cells: &[Cell]) -> String {
    let mut out = format!("{:<10} {:<16} {:>5}", "epsilon", "estimator", "rows");
    for m in METRICS {
        let _ = write!(out, " {m:>20}");
    }
    out.push('\n');
    for c in cells {
        let _ = write!(out, "{:<10} {:<16} {:>5}", c.epsilon, c.estimator, c.rows);
        for m in c.medians {
            match m {
                Some(v) => {
                    let _ = write!(out, " {v:>20.6}");
                }
                None => {
                    let _ = write!(out, " {:>20}", "-");
                }
            }
        }
        out.push('\n');
    }
    out
}

const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"];

/// Log-log chart of one metric against epsilon, one polyline per estimator,
/// with a dashed `eps ln(1/eps)` reference scaled through the data.
pub fn svg_chart(cells: &[Cell], metric: usize) -> String {
    let (w, h, ml, mr, mt, mb) = (640.0, 440.0, 70.0, 160.0, 30.0, 50.0);
    let mut series: BTreeMap<&str, Vec<(f64, f64)>> = BTreeMap::new();
    for c in cells {
        if let Some(y) = c.medians[metric] {
            if c.epsilon > 0.0 && y > 0.0 && y.is_finite() {
                series.entry(c.estimator.as_str()).or_default().push((c.epsilon, y));
            }
        }
    }
    let name = METRICS[metric];
    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{}" y="18" text-anchor="middle">{name} vs epsilon (median over seeds)</text>"#, ml + (w - ml - mr) / 2.0);
    let pts: Vec<(f64, f64)> = series.values().flatten().copied().collect();
    if pts.is_empty() {
        let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">no positive data</text>"#, w / 2.0, h / 2.0);
        s.push_str("</svg>\n");
        return s;
    }
    let reference = |e: f64| e * (1.0 / e).ln();
    // Anchor the reference curve at the geometric mean of the data.
    let lx = pts.iter().map(|p| p.0.ln()).sum::<f64>() / pts.len() as f64;
    let ly = pts.iter().map(|p| p.1.ln()).sum::<f64>() / pts.len() as f64;
    let emin = pts.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
    let emax = pts.iter().map(|p| p.0).fold(0.0, f64::max);
    let scale = ly.exp() / reference(lx.exp()).max(f64::MIN_POSITIVE);
    let ref_pts: Vec<(f64, f64)> = (0..=40)
        .map(|i| {
            let e = (emin.ln() + (emax.ln() - emin.ln()) * i as f64 / 40.0).exp();
            (e, scale * reference(e))
        })
        .filter(|p| p.1 > 0.0 && p.1.is_finite())
        .collect();
    let all_y = pts.iter().chain(&ref_pts).map(|p| p.1);
    let (ymin, ymax) = all_y.fold((f64::INFINITY, 0.0_f64), |(a, b), y| (a.min(y), b.max(y)));
    let (x0, x1) = pad(emin.log10(), emax.log10());
    let (y0, y1) = pad(ymin.log10(), ymax.log10());
    let px = |e: f64| ml + (e.log10() - x0) / (x1 - x0) * (w - ml - mr);
    let py = |y: f64| h - mb - (y.log10() - y0) / (y1 - y0) * (h - mt - mb);
    let _ = writeln!(
        s,
        r#"<rect x="{ml}" y="{mt}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        w - ml - mr,
        h - mt - mb
    );
    for k in x0.ceil() as i32..=x1.floor() as i32 {
        let x = px(10f64.powi(k));
        let _ = writeln!(s, r#"<line x1="{x:.2}" y1="{}" x2="{x:.2}" y2="{}" stroke="black"/>"#, h - mb, h - mb + 5.0);
        let _ = writeln!(s, r#"<text x="{x:.2}" y="{}" text-anchor="middle">1e{k}</text>"#, h - mb + 18.0);
    }
    for k in y0.ceil() as i32..=y1.floor() as i32 {
        let y = py(10f64.powi(k));
        let _ = writeln!(s, r#"<line x1="{}" y1="{y:.2}" x2="{ml}" y2="{y:.2}" stroke="black"/>"#, ml - 5.0);
        let _ = writeln!(s, r#"<text x="{}" y="{:.2}" text-anchor="end">1e{k}</text>"#, ml - 8.0, y + 4.0);
    }
    let _ = writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">epsilon (log)</text>"#, ml + (w - ml - mr) / 2.0, h - 12.0);
    let _ = writeln!(
        s,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">{name} (log)</text>"#,
        mt + (h - mt - mb) / 2.0,
        mt + (h - mt - mb) / 2.0
    );
    let poly = |p: &[(f64, f64)]| p.iter().map(|&(e, y)| format!("{:.2},{:.2}", px(e), py(y))).collect::<Vec<_>>().join(" ");
    let _ = writeln!(
        s,
        r#"<polyline points="{}" fill="none" stroke="gray" stroke-dasharray="6,4"/>"#,
        poly(&ref_pts)
    );
    let mut legend_y = mt + 10.0;
    let lx0 = w - mr + 12.0;
    let _ = writeln!(s, r#"<line x1="{lx0}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="gray" stroke-dasharray="6,4"/>"#, lx0 + 20.0);
    let _ = writeln!(s, r#"<text x="{}" y="{}">eps ln(1/eps)</text>"#, lx0 + 26.0, legend_y + 4.0);
    for (i, (est, p)) in series.iter().enumerate() {
        let color = COLORS[i % COLORS.len()];
        let mut p = p.clone();
        p.sort_by(|a, b| a.0.total_cmp(&b.0));
        let _ = writeln!(s, r#"<polyline points="{}" fill="none" stroke="{color}" stroke-width="2"/>"#, poly(&p));
        for &(e, y) in &p {
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="3" fill="{color}"/>"#, px(e), py(y));
        }
        legend_y += 18.0;
        let _ = writeln!(s, r#"<line x1="{lx0}" y1="{legend_y}" x2="{}" y2="{legend_y}" stroke="{color}" stroke-width="2"/>"#, lx0 + 20.0);
        let _ = writeln!(s, r#"<text x="{}" y="{}">{est}</text>"#, lx0 + 26.0, legend_y + 4.0);
    }
    s.push_str("</svg>\n");
    s
}

fn pad(lo: f64, hi: f64) -> (f64, f64) {
    if hi - lo < 1e-9 {
        (lo - 0.5, hi + 0.5)
    } else {
        let m = 0.05 * (hi - lo);
        (lo - m, hi + m)
    }
}

/// Writes `summary.txt` and one SVG per metric into `out`; returns the
/// table.
pub fn report(results: &Path, out: &Path) -> Result<String, CliError> {
    let text = fs::read_to_string(results).map_err(|e| CliError::Io(format!("cannot read {}: {e}", results.display())))?;
    let cells = summarize(&text)?;
    fs::create_dir_all(out).map_err(|e| CliError::Io(format!("cannot create {}: {e}", out.display())))?;
    let t = table(&cells);
    let io = |p: &Path, c: &str| fs::write(p, c).map_err(|e| CliError::Io(format!("cannot write {}: {e}", p.display())));
    io(&out.join("summary.txt"), &t)?;
    for (k, m) in METRICS.iter().enumerate() {
        io(&out.join(format!("{m}.svg")), &svg_chart(&cells, k))?;
    }
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn csv_rows(rows: &[&str]) -> String {
        let mut s = RESULTS_HEADER.join(",");
        s.push('\n');
        for r in rows {
            s.push_str(r);
            s.push('\n');
        }
        s
    }

    #[test]
    fn medians_and_groups() {
        let text = csv_rows(&[
            "0,0.1,3,100,none,pipeline,0.1,0.2,,0.01,0,2",
            "1,0.1,3,100,none,pipeline,0.3,0.4,,0.03,0,1",
            "2,0.1,3,100,none,pipeline,0.2,0.9,,,0,1",
        ]);
        let cells = summarize(&text).unwrap();
        assert_eq!(cells.len(), 1);
        assert_eq!(cells[0].rows, 3);
        assert_eq!(cells[0].medians[0], Some(0.2));
        assert_eq!(cells[0].medians[1], Some(0.4));
        assert_eq!(cells[0].medians[2], None);
        assert_eq!(cells[0].medians[3], Some(0.02));
    }

    #[test]
    fn empty_body_is_an_error() {
        let err = summarize(&csv_rows(&[])).unwrap_err();
        match err {
            CliError::Parse(Error::Parse { message, .. }) => assert_eq!(message, "no data rows"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bad_number_reports_line() {
        let err = summarize(&csv_rows(&["0,0.1,3,100,none,pipeline,0.1,0.2,,,0,2", "1,0.1,3,100,none,pipeline,oops,0.2,,,0,2"]))
            .unwrap_err();
        match err {
            CliError::Parse(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn single_point_chart() {
        let cells = summarize(&csv_rows(&["0,0.1,3,100,none,pipeline,0.1,0.2,,,0,2"])).unwrap();
        let svg = svg_chart(&cells, 0);
        assert_eq!(svg.matches("<circle").count(), 1);
        assert!(svg.starts_with("<svg"));
        let empty = svg_chart(&cells, 2);
        assert!(empty.contains("no positive data"));
    }
}
