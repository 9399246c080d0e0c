//! Minimal SVG line charts for CSV columns.

use std::fmt::Write as _;

use voltstab::{Error, Result};

const W: f64 = 800.0;
const H: f64 = 480.0;
const PAD: f64 = 50.0;
const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

pub struct Table {
    pub headers: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// Numeric CSV; cells that do not parse become NaN and are skipped when drawn.
pub fn read_table(path: &std::path::Path) -> Result<Table> {
    let mut r = csv::Reader::from_path(path)?;
    let headers = r.headers()?.iter().map(|h| h.trim().to_string()).collect();
    let rows = r
        .records()
        .map(|rec| rec.map(|rec| rec.iter().map(|c| c.trim().parse().unwrap_or(f64::NAN)).collect()))
        .collect::<std::result::Result<_, _>>()?;
    Ok(Table { headers, rows })
}

fn column(t: &Table, name: &str) -> Result<usize> {
    t.headers
        .iter()
        .position(|h| h == name)
        .ok_or_else(|| Error::Config(format!("no column `{name}`; have {:?}", t.headers)))
}

fn bounds(vals: impl Iterator<Item = f64>) -> Option<(f64, f64)> {
    let (lo, hi) = vals
        .filter(|v| v.is_finite())
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    if lo > hi {
        return None;
    }
    Some(if hi > lo { (lo, hi) } else { (lo - 0.5, hi + 0.5) })
}

pub fn render_svg(t: &Table, x: &str, ys: &[String]) -> Result<String> {
    let xi = column(t, x)?;
    let y_cols: Vec<usize> = if ys.is_empty() {
        (0..t.headers.len()).filter(|&i| i != xi).collect()
    } else {
        ys.iter().map(|y| column(t, y)).collect::<Result<_>>()?
    };
    if y_cols.is_empty() || t.rows.is_empty() {
        return Err(Error::EmptyRequest("nothing to plot".into()));
    }
    let (x0, x1) = bounds(t.rows.iter().map(|r| r[xi]))
        .ok_or_else(|| Error::EmptyRequest(format!("column `{x}` has no numbers")))?;
    let (y0, y1) = bounds(y_cols.iter().flat_map(|&c| t.rows.iter().map(move |r| r[c])))
        .ok_or_else(|| Error::EmptyRequest("selected columns have no numbers".into()))?;
    let sx = |v: f64| PAD + (v - x0) / (x1 - x0) * (W - 2.0 * PAD);
    let sy = |v: f64| H - PAD - (v - y0) / (y1 - y0) * (H - 2.0 * PAD);

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(
        s,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    let _ = writeln!(s, r#"<text x="{}" y="{}" font-size="12" text-anchor="middle">{x}</text>"#, W / 2.0, H - 12.0);
    for (v, y) in [(y0, H - PAD), (y1, PAD)] {
        let _ = writeln!(s, r#"<text x="4" y="{y}" font-size="11">{v:.4}</text>"#);
    }
    for (v, xp) in [(x0, PAD), (x1, W - PAD)] {
        let _ = writeln!(s, r#"<text x="{xp}" y="{}" font-size="11" text-anchor="middle">{v:.4}</text>"#, H - PAD + 16.0);
    }
    for (k, &c) in y_cols.iter().enumerate() {
        let color = COLORS[k % COLORS.len()];
        let pts: Vec<String> = t
            .rows
            .iter()
            .filter(|r| r[xi].is_finite() && r[c].is_finite())
            .map(|r| format!("{:.2},{:.2}", sx(r[xi]), sy(r[c])))
            .collect();
        let _ = writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.2" points="{}"/>"#,
            pts.join(" ")
        );
        let _ = writeln!(
            s,
            r#"<text x="{}" y="{}" font-size="12" fill="{color}">{}</text>"#,
            W - PAD + 4.0,
            PAD + 14.0 * k as f64,
            t.headers[c]
        );
    }
    s.push_str("</svg>\n");
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn one_polyline_per_series() {
        let t = Table {
            headers: vec!["t".into(), "a".into(), "b".into()],
            rows: vec![vec![1.0, 0.0, 2.0], vec![2.0, 1.0, f64::NAN], vec![3.0, 4.0, 1.0]],
        };
        let svg = render_svg(&t, "t", &[]).unwrap();
        assert_eq!(svg.matches("<polyline").count(), 2);
        assert!(render_svg(&t, "missing", &[]).is_err());
    }
}
