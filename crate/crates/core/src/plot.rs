//! Minimal log-log SVG plots of a rate fit.

use std::io::Write;

use crate::verify::RateFit;

const WIDTH: f64 = 480.0;
const HEIGHT: f64 = 360.0;
const MARGIN: f64 = 56.0;

/// Axis range in log10 units, widened to whole decades.
fn decade_range(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let (lo, hi) = values.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| {
        let l = v.log10();
        (lo.min(l), hi.max(l))
    });
    let (lo, hi) = (lo.floor(), hi.ceil());
    if hi > lo {
        (lo, hi)
    } else {
        (lo - 1.0, hi + 1.0)
    }
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

/// Data points, the fitted power law and decade ticks on log-log axes.
pub fn write_rate_svg<W: Write>(fit: &RateFit, title: &str, mut out: W) -> std::io::Result<()> {
    let fitted = |e: f64| (fit.intercept + fit.slope * e.ln()).exp();
    let (x0, x1) = decade_range(fit.eps_grid.iter().copied());
    let (y0, y1) = decade_range(
        fit.observable
            .iter()
            .copied()
            .chain(fit.eps_grid.iter().map(|&e| fitted(e))),
    );
    let px = |e: f64| MARGIN + (e.log10() - x0) / (x1 - x0) * (WIDTH - 2.0 * MARGIN);
    let py = |v: f64| HEIGHT - MARGIN - (v.log10() - y0) / (y1 - y0) * (HEIGHT - 2.0 * MARGIN);

    writeln!(
        out,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">"#
    )?;
    writeln!(out, r#"<rect width="100%" height="100%" fill="white"/>"#)?;
    writeln!(
        out,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="13">{}</text>"#,
        WIDTH / 2.0,
        escape(title)
    )?;
    writeln!(
        out,
        r#"<rect x="{MARGIN}" y="{MARGIN}" width="{}" height="{}" fill="none" stroke="black"/>"#,
        WIDTH - 2.0 * MARGIN,
        HEIGHT - 2.0 * MARGIN
    )?;
    for k in x0 as i32..=x1 as i32 {
        let x = px(10f64.powi(k));
        writeln!(
            out,
            r##"<line x1="{x:.2}" y1="{MARGIN}" x2="{x:.2}" y2="{:.2}" stroke="#ddd"/><text x="{x:.2}" y="{:.2}" text-anchor="middle">1e{k}</text>"##,
            HEIGHT - MARGIN,
            HEIGHT - MARGIN + 16.0
        )?;
    }
    for k in y0 as i32..=y1 as i32 {
        let y = py(10f64.powi(k));
        writeln!(
            out,
            r##"<line x1="{MARGIN}" y1="{y:.2}" x2="{:.2}" y2="{y:.2}" stroke="#ddd"/><text x="{:.2}" y="{:.2}" text-anchor="end">1e{k}</text>"##,
            WIDTH - MARGIN,
            MARGIN - 6.0,
            y + 4.0
        )?;
    }
    writeln!(
        out,
        r#"<text x="{}" y="{}" text-anchor="middle">ε</text>"#,
        WIDTH / 2.0,
        HEIGHT - 14.0
    )?;

    let (first, last) = (fit.eps_grid[0], fit.eps_grid[fit.eps_grid.len() - 1]);
    writeln!(
        out,
        r##"<line x1="{:.2}" y1="{:.2}" x2="{:.2}" y2="{:.2}" stroke="#c0392b" stroke-width="1.5"/>"##,
        px(first),
        py(fitted(first)),
        px(last),
        py(fitted(last))
    )?;
    for (&e, &v) in fit.eps_grid.iter().zip(&fit.observable) {
        writeln!(
            out,
            r##"<circle cx="{:.2}" cy="{:.2}" r="3.5" fill="#2c3e50"/>"##,
            px(e),
            py(v)
        )?;
    }
    writeln!(
        out,
        r#"<text x="{:.2}" y="{:.2}">slope {:.4}, r² {:.4}</text>"#,
        MARGIN + 8.0,
        MARGIN + 16.0,
        fit.slope,
        fit.r_squared
    )?;
    writeln!(out, "</svg>")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::verify::fit_rate;

    #[test]
    fn svg_has_points_and_line() {
        let eps = [1e-1, 1e-2, 1e-3, 1e-4];
        let vals: Vec<f64> = eps.iter().map(|e: &f64| e.powf(0.25)).collect();
        let fit = fit_rate(&eps, &vals).unwrap();
        let mut buf = Vec::new();
        write_rate_svg(&fit, "width <grid>", &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.matches("<circle").count(), 4);
        assert!(text.contains("stroke=\"#c0392b\""));
        assert!(text.contains("width &lt;grid&gt;"));
        assert!(text.trim_end().ends_with("</svg>"));
    }
}
