//! CSV and SVG output for landscape slices and coefficient searches.

use std::fmt::Write as _;

use demerge_core::merging::{GridSearch, Landscape};

/// `a,b,score`, one line per grid point, `a` outermost.
pub fn landscape_csv(l: &Landscape) -> String {
    let mut out = String::from("a,b,score\n");
    for (i, &a) in l.a_values.iter().enumerate() {
        for (j, &b) in l.b_values.iter().enumerate() {
            let _ = writeln!(out, "{a},{b},{}", l.scores[i][j]);
        }
    }
    out
}

/// `value,score` in grid order.
pub fn search_csv(g: &GridSearch) -> String {
    let mut out = String::from("value,score\n");
    for (v, s) in &g.table {
        let _ = writeln!(out, "{v},{s}");
    }
    out
}

fn color(t: f64) -> String {
    // dark blue → yellow
    let t = if t.is_finite() {
        t.clamp(0.0, 1.0)
    } else {
        0.0
    };
    let lerp = |a: f64, b: f64| (a + (b - a) * t).round() as u8;
    format!(
        "#{:02x}{:02x}{:02x}",
        lerp(40.0, 250.0),
        lerp(30.0, 230.0),
        lerp(120.0, 40.0)
    )
}

/// Segments of the `level` iso-line over the unit-spaced cell grid, by
/// marching squares. Coordinates are in cell units.
fn iso_segments(scores: &[Vec<f64>], level: f64) -> Vec<[(f64, f64); 2]> {
    let mut segs = Vec::new();
    let rows = scores.len();
    let cols = scores.first().map_or(0, Vec::len);
    let cross = |p: (f64, f64, f64), q: (f64, f64, f64)| -> (f64, f64) {
        let t = if q.2 == p.2 {
            0.5
        } else {
            (level - p.2) / (q.2 - p.2)
        };
        (p.0 + t * (q.0 - p.0), p.1 + t * (q.1 - p.1))
    };
    for i in 0..rows.saturating_sub(1) {
        for j in 0..cols.saturating_sub(1) {
            let corners = [
                (i as f64, j as f64, scores[i][j]),
                (i as f64, j as f64 + 1.0, scores[i][j + 1]),
                (i as f64 + 1.0, j as f64 + 1.0, scores[i + 1][j + 1]),
                (i as f64 + 1.0, j as f64, scores[i + 1][j]),
            ];
            let mut hits = Vec::with_capacity(4);
            for k in 0..4 {
                let (p, q) = (corners[k], corners[(k + 1) % 4]);
                if (p.2 >= level) != (q.2 >= level) {
                    hits.push(cross(p, q));
                }
            }
            for pair in hits.chunks_exact(2) {
                segs.push([pair[0], pair[1]]);
            }
        }
    }
    segs
}

/// Heatmap of the slice with iso-lines at five evenly spaced levels. `a`
/// runs along the horizontal axis, `b` along the vertical.
pub fn landscape_svg(l: &Landscape, title: &str) -> String {
    const CELL: f64 = 40.0;
    const MARGIN: f64 = 60.0;
    let na = l.a_values.len();
    let nb = l.b_values.len();
    let width = MARGIN * 2.0 + CELL * na as f64;
    let height = MARGIN * 2.0 + CELL * nb as f64;
    let finite = l.scores.iter().flatten().copied().filter(|s| s.is_finite());
    let lo = finite.clone().fold(f64::INFINITY, f64::min);
    let hi = finite.fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    // cell (i, j) is drawn at column i, row (nb - 1 - j) so b grows upwards
    let x = |i: f64| MARGIN + CELL * (i + 0.5);
    let y = |j: f64| MARGIN + CELL * (nb as f64 - 1.0 - j + 0.5);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" font-family="sans-serif" font-size="11">"#
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="20" text-anchor="middle" font-size="14">{}</text>"#,
        width / 2.0,
        escape(title)
    );
    for i in 0..na {
        for j in 0..nb {
            let s = l.scores[i][j];
            let _ = writeln!(
                svg,
                r#"<rect x="{:.1}" y="{:.1}" width="{CELL}" height="{CELL}" fill="{}"><title>a={} b={} score={s:.4}</title></rect>"#,
                x(i as f64) - CELL / 2.0,
                y(j as f64) - CELL / 2.0,
                color((s - lo) / span),
                l.a_values[i],
                l.b_values[j]
            );
        }
    }
    for k in 1..=5 {
        let level = lo + span * k as f64 / 6.0;
        for [(i0, j0), (i1, j1)] in iso_segments(&l.scores, level) {
            let _ = writeln!(
                svg,
                r#"<line x1="{:.1}" y1="{:.1}" x2="{:.1}" y2="{:.1}" stroke="white" stroke-width="1"/>"#,
                x(i0),
                y(j0),
                x(i1),
                y(j1)
            );
        }
    }
    for (i, a) in l.a_values.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{a}</text>"#,
            x(i as f64),
            height - MARGIN + 15.0
        );
    }
    for (j, b) in l.b_values.iter().enumerate() {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{b}</text>"#,
            MARGIN - 5.0,
            y(j as f64) + 4.0
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">a</text>"#,
        width / 2.0,
        height - 15.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="15" y="{}" text-anchor="middle">b</text>"#,
        height / 2.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="end">min {lo:.4}  max {hi:.4}</text>"#,
        width - 5.0,
        height - 5.0
    );
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;")
        .replace('<', "&lt;")
        .replace('>', "&gt;")
}

/// `n` evenly spaced points from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n)
            .map(|k| lo + (hi - lo) * k as f64 / (n - 1) as f64)
            .collect(),
    }
}
