//! Minimal SVG scatter plots over the first two coordinates.

use std::fmt::Write as _;

use crate::numeric::Tensor;

const PALETTE: [&str; 8] = [
    "#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
];
const SIZE: f64 = 600.0;
const MARGIN: f64 = 30.0;
const LEGEND_ROW: f64 = 16.0;

pub struct Series {
    pub name: String,
    pub points: Tensor,
}

fn bounds(series: &[Series]) -> ([f64; 2], [f64; 2]) {
    let mut lo = [f64::INFINITY; 2];
    let mut hi = [f64::NEG_INFINITY; 2];
    for s in series {
        for row in s.points.iter_rows() {
            for a in 0..2 {
                let v = row.get(a).copied().unwrap_or(0.0);
                lo[a] = lo[a].min(v);
                hi[a] = hi[a].max(v);
            }
        }
    }
    for a in 0..2 {
        if !(hi[a] > lo[a]) {
            lo[a] -= 1.0;
            hi[a] += 1.0;
        }
    }
    (lo, hi)
}

pub fn scatter_svg(title: &str, series: &[Series]) -> String {
    let (lo, hi) = bounds(series);
    // Same scale on both axes so shapes are not distorted.
    let span = (hi[0] - lo[0]).max(hi[1] - lo[1]);
    let scale = (SIZE - 2.0 * MARGIN) / span;
    let px = |x: f64| MARGIN + (x - lo[0]) * scale;
    let py = |y: f64| SIZE - MARGIN - (y - lo[1]) * scale;

    let mut s = String::new();
    let _ = writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#
    );
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);
    let _ = writeln!(s, r#"<text x="{MARGIN}" y="18" font-family="sans-serif" font-size="13">{title}</text>"#);
    for (i, ser) in series.iter().enumerate() {
        let color = PALETTE[i % PALETTE.len()];
        let _ = writeln!(s, r#"<g fill="{color}" fill-opacity="0.5">"#);
        for row in ser.points.iter_rows() {
            let x = row[0];
            let y = row.get(1).copied().unwrap_or(0.0);
            let _ = writeln!(s, r#"<circle cx="{:.2}" cy="{:.2}" r="1.6"/>"#, px(x), py(y));
        }
        s.push_str("</g>\n");
        let ly = 36.0 + LEGEND_ROW * i as f64;
        let _ = writeln!(
            s,
            r#"<circle cx="{}" cy="{}" r="4" fill="{color}"/><text x="{}" y="{}" font-family="sans-serif" font-size="11">{}</text>"#,
            SIZE - 150.0,
            ly - 4.0,
            SIZE - 140.0,
            ly,
            ser.name
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Long-format table `series,x,y` of everything plotted.
pub fn series_csv(series: &[Series], header: bool) -> String {
    let mut s = String::new();
    if header {
        s.push_str("series,x,y\n");
    }
    for ser in series {
        for row in ser.points.iter_rows() {
            let _ = writeln!(s, "{},{},{}", ser.name, row[0], row.get(1).copied().unwrap_or(0.0));
        }
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn svg_has_one_circle_per_point_plus_legend() {
        let series = vec![
            Series {
                name: "a".into(),
                points: Tensor::matrix(2, 2, vec![0., 0., 1., 1.]),
            },
            Series {
                name: "b".into(),
                points: Tensor::matrix(1, 2, vec![0.5, 0.5]),
            },
        ];
        let svg = scatter_svg("t", &series);
        assert_eq!(svg.matches("<circle").count(), 3 + 2);
        assert!(svg.starts_with("<svg") && svg.ends_with("</svg>\n"));
        assert_eq!(series_csv(&series, true).lines().count(), 4);
    }

    #[test]
    fn degenerate_bounds() {
        let series = vec![Series {
            name: "p".into(),
            points: Tensor::matrix(1, 2, vec![2., 2.]),
        }];
        assert!(!scatter_svg("t", &series).contains("NaN"));
    }
}
