use std::fmt::Write;

use l2r::{Instance, ProblemKind};

const SIZE: f64 = 800.0;
const PAD: f64 = 20.0;
const ROUTE_COLORS: [&str; 8] = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2"];

/// Candidate overlay: the current node and the candidates it may move to.
pub struct Overlay {
    pub from: usize,
    pub candidates: Vec<usize>,
}

fn xy(p: [f64; 2]) -> (f64, f64) {
    let s = SIZE - 2.0 * PAD;
    (PAD + p[0] * s, SIZE - PAD - p[1] * s)
}

/// Static drawing of a solution; CVRP routes get cycling colours.
pub fn render(instance: &Instance, sequence: &[usize], overlay: Option<&Overlay>) -> String {
    let pts = instance.unit_coords();
    let n = pts.len();
    let r = if n > 2000 { 0.6 } else if n > 200 { 1.5 } else { 3.0 };
    let mut s = String::new();
    let _ = writeln!(s, r#"<svg xmlns="http://www.w3.org/2000/svg" width="{SIZE}" height="{SIZE}" viewBox="0 0 {SIZE} {SIZE}">"#);
    let _ = writeln!(s, r#"<rect width="100%" height="100%" fill="white"/>"#);

    let closed: Vec<usize> = match instance.kind {
        ProblemKind::Tsp if !sequence.is_empty() => sequence.iter().copied().chain(std::iter::once(sequence[0])).collect(),
        _ => sequence.to_vec(),
    };
    let mut route = 0;
    let mut d = String::new();
    for (i, &v) in closed.iter().enumerate() {
        let (x, y) = xy(pts[v]);
        let _ = write!(d, "{}{x:.2},{y:.2} ", if i == 0 { "M" } else { "L" });
        if instance.kind == ProblemKind::Cvrp && v == 0 && i > 0 {
            let _ = writeln!(s, r#"<path d="{d}" fill="none" stroke="{}" stroke-width="1.2"/>"#, ROUTE_COLORS[route % ROUTE_COLORS.len()]);
            route += 1;
            d = format!("M{x:.2},{y:.2} ");
        }
    }
    if instance.kind == ProblemKind::Tsp {
        let _ = writeln!(s, r##"<path d="{d}" fill="none" stroke="#1f77b4" stroke-width="1"/>"##);
    }

    if let Some(o) = overlay {
        let (fx, fy) = xy(pts[o.from]);
        for &c in &o.candidates {
            let (x, y) = xy(pts[c]);
            let _ = writeln!(s, r##"<line x1="{fx:.2}" y1="{fy:.2}" x2="{x:.2}" y2="{y:.2}" stroke="#ff7f0e" stroke-dasharray="4 3"/>"##);
        }
    }
    for (i, p) in pts.iter().enumerate() {
        let (x, y) = xy(*p);
        let fill = if instance.kind == ProblemKind::Cvrp && i == 0 { "#d62728" } else { "#333" };
        let rr = if instance.kind == ProblemKind::Cvrp && i == 0 { r * 2.5 } else { r };
        let _ = writeln!(s, r#"<circle cx="{x:.2}" cy="{y:.2}" r="{rr}" fill="{fill}"/>"#);
    }
    if let Some(o) = overlay {
        for &c in &o.candidates {
            let (x, y) = xy(pts[c]);
            let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="{}" fill="none" stroke="#ff7f0e" stroke-width="2"/>"##, r * 2.0);
        }
        let (x, y) = xy(pts[o.from]);
        let _ = writeln!(s, r##"<circle cx="{x:.2}" cy="{y:.2}" r="{}" fill="#2ca02c"/>"##, r * 2.0);
    }
    s.push_str("</svg>\n");
    s
}
