//! Learning-curve artifacts: an SVG plot written by hand and a flat CSV.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::experiment::{aggregate_csv, ExperimentResult};

/// Mean mIoU per labeled count over every run sharing a label.
#[derive(Clone, Debug, PartialEq)]
pub struct Curve {
    pub label: String,
    pub points: Vec<(usize, f64)>,
}

/// Curves ordered by label.
pub fn learning_curves(results: &[ExperimentResult]) -> Result<Vec<Curve>> {
    if results.is_empty() {
        return Err(Error::Usage("no results to report".into()));
    }
    let mut acc: BTreeMap<&str, BTreeMap<usize, (f64, usize)>> = BTreeMap::new();
    for r in results {
        let per = acc.entry(r.label.as_str()).or_default();
        for m in &r.rounds {
            let e = per.entry(m.labeled_count).or_insert((0.0, 0));
            e.0 += m.miou;
            e.1 += 1;
        }
    }
    Ok(acc
        .into_iter()
        .map(|(label, per)| Curve {
            label: label.to_string(),
            points: per.into_iter().map(|(x, (s, n))| (x, s / n as f64)).collect(),
        })
        .collect())
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}

/// Line plot of mIoU against labeled count, one polyline per curve.
pub fn render_svg(curves: &[Curve]) -> String {
    let (w, h) = (640.0, 420.0);
    let (left, right, top, bottom) = (60.0, 150.0, 30.0, 50.0);
    let (pw, ph) = (w - left - right, h - top - bottom);

    let xs = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0));
    let (xmin, xmax) = xs.fold((usize::MAX, 0), |(lo, hi), x| (lo.min(x), hi.max(x)));
    let (xmin, xmax) = if xmin > xmax { (0, 1) } else { (xmin, xmax) };
    let span = (xmax - xmin).max(1) as f64;
    let sx = |x: usize| left + (x - xmin) as f64 / span * pw;
    let sy = |y: f64| top + (1.0 - y.clamp(0.0, 1.0)) * ph;

    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="18" text-anchor="middle">mIoU vs labeled samples</text>"#,
        left + pw / 2.0
    )
    .unwrap();
    for i in 0..=5 {
        let v = i as f64 / 5.0;
        let y = sy(v);
        writeln!(
            s,
            r##"<line x1="{left:.1}" y1="{y:.1}" x2="{:.1}" y2="{y:.1}" stroke="#dddddd"/>"##,
            left + pw
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#,
            left - 6.0,
            y + 4.0
        )
        .unwrap();
    }
    let mut ticks: Vec<usize> = curves.iter().flat_map(|c| c.points.iter().map(|p| p.0)).collect();
    ticks.sort_unstable();
    ticks.dedup();
    for x in ticks {
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{x}</text>"#,
            sx(x),
            top + ph + 18.0
        )
        .unwrap();
    }
    writeln!(
        s,
        r##"<rect x="{left:.1}" y="{top:.1}" width="{pw:.1}" height="{ph:.1}" fill="none" stroke="#333333"/>"##
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">labeled samples</text>"#,
        left + pw / 2.0,
        h - 12.0
    )
    .unwrap();
    writeln!(
        s,
        r#"<text x="16" y="{:.1}" text-anchor="middle" transform="rotate(-90 16 {:.1})">mIoU</text>"#,
        top + ph / 2.0,
        top + ph / 2.0
    )
    .unwrap();

    for (i, c) in curves.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let pts: Vec<String> = c.points.iter().map(|&(x, y)| format!("{:.2},{:.2}", sx(x), sy(y))).collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="2" points="{}"/>"#,
            pts.join(" ")
        )
        .unwrap();
        let ly = top + 10.0 + 18.0 * i as f64;
        let lx = left + pw + 12.0;
        writeln!(
            s,
            r#"<line x1="{lx:.1}" y1="{ly:.1}" x2="{:.1}" y2="{ly:.1}" stroke="{color}" stroke-width="2"/>"#,
            lx + 20.0
        )
        .unwrap();
        writeln!(
            s,
            r#"<text x="{:.1}" y="{:.1}">{}</text>"#,
            lx + 26.0,
            ly + 4.0,
            escape(&c.label)
        )
        .unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Per-run rows, same layout as the aggregate CSV.
pub fn render_csv(results: &[ExperimentResult]) -> String {
    aggregate_csv(results)
}
