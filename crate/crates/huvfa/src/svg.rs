//! Hand-rolled SVG emission for the plot command.
//!
//! Three kinds of figures: per-cell value heatmaps with greedy-action
//! arrows and a single goal marker, side-by-side matrix intensity
//! images for decomposition-vs-truth comparisons, and per-option
//! policy panels with the meta-policy's selection region outlined.

use crate::env::{ActionId, FourRoomsWorld, GridPos};

const CELL: f64 = 40.0;
const MARGIN: f64 = 20.0;

/// One rendered cell of a value/policy field.
#[derive(Clone, Copy, Debug)]
pub struct FieldCell {
    pub pos: GridPos,
    pub value: f64,
    pub arrow: Option<ActionId>,
    /// Drawn with a highlighted outline (used for selection regions).
    pub selected: bool,
}

/// Low values map to blue, high to red, through white.
pub fn value_color(v01: f64) -> String {
    let v = v01.clamp(0.0, 1.0);
    let (r, g, b) = if v < 0.5 {
        let t = v / 0.5;
        (
            (255.0 * t) as u8,
            (255.0 * t) as u8,
            255u8,
        )
    } else {
        let t = (v - 0.5) / 0.5;
        (
            255u8,
            (255.0 * (1.0 - t)) as u8,
            (255.0 * (1.0 - t)) as u8,
        )
    };
    format!("#{r:02x}{g:02x}{b:02x}")
}

fn header(width: f64, height: f64, title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{width:.0}\" height=\"{height:.0}\" \
         viewBox=\"0 0 {width:.0} {height:.0}\">\n\
         <rect width=\"{width:.0}\" height=\"{height:.0}\" fill=\"white\"/>\n\
         <text x=\"{MARGIN}\" y=\"{:.0}\" font-family=\"monospace\" font-size=\"14\">{title}</text>\n",
        MARGIN - 5.0
    )
}

fn cell_origin(pos: GridPos) -> (f64, f64) {
    (
        MARGIN + pos.x as f64 * CELL,
        MARGIN + pos.y as f64 * CELL,
    )
}

fn arrow_path(pos: GridPos, a: ActionId) -> String {
    let (x0, y0) = cell_origin(pos);
    let cx = x0 + CELL / 2.0;
    let cy = y0 + CELL / 2.0;
    let (dx, dy) = a.delta();
    let (dx, dy) = (dx as f64, dy as f64);
    let len = CELL * 0.28;
    let (tx, ty) = (cx + dx * len, cy + dy * len);
    let (bx, by) = (cx - dx * len, cy - dy * len);
    // Shaft plus a small triangular head.
    let (px, py) = (-dy, dx); // perpendicular
    let head = CELL * 0.10;
    format!(
        "<line x1=\"{bx:.1}\" y1=\"{by:.1}\" x2=\"{tx:.1}\" y2=\"{ty:.1}\" stroke=\"black\" stroke-width=\"2\"/>\n\
         <polygon points=\"{:.1},{:.1} {:.1},{:.1} {:.1},{:.1}\" fill=\"black\"/>\n",
        tx + dx * head,
        ty + dy * head,
        tx + px * head - dx * head * 0.2,
        ty + py * head - dy * head * 0.2,
        tx - px * head - dx * head * 0.2,
        ty - py * head - dy * head * 0.2,
    )
}

/// Value heatmap with greedy arrows and exactly one circular goal
/// marker. Values are normalized to the min/max over the given cells.
pub fn value_field_svg(
    world: &FourRoomsWorld,
    cells: &[FieldCell],
    goal: GridPos,
    title: &str,
) -> String {
    let width = 2.0 * MARGIN + world.width as f64 * CELL;
    let height = 2.0 * MARGIN + world.height as f64 * CELL;
    let mut out = header(width, height, title);

    let lo = cells.iter().map(|c| c.value).fold(f64::INFINITY, f64::min);
    let hi = cells
        .iter()
        .map(|c| c.value)
        .fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };

    // Wall background.
    for y in 0..world.height {
        for x in 0..world.width {
            let p = GridPos::new(x, y);
            if world.is_wall(p) {
                let (x0, y0) = cell_origin(p);
                out.push_str(&format!(
                    "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"#444444\"/>\n"
                ));
            }
        }
    }
    for c in cells {
        let (x0, y0) = cell_origin(c.pos);
        let fill = value_color((c.value - lo) / span);
        let stroke = if c.selected {
            "stroke=\"#008800\" stroke-width=\"3\""
        } else {
            "stroke=\"#cccccc\" stroke-width=\"0.5\""
        };
        out.push_str(&format!(
            "<rect x=\"{x0:.1}\" y=\"{y0:.1}\" width=\"{CELL}\" height=\"{CELL}\" fill=\"{fill}\" {stroke}/>\n"
        ));
    }
    for c in cells {
        if c.pos == goal {
            continue;
        }
        if let Some(a) = c.arrow {
            out.push_str(&arrow_path(c.pos, a));
        }
    }
    let (gx, gy) = cell_origin(goal);
    out.push_str(&format!(
        "<circle cx=\"{:.1}\" cy=\"{:.1}\" r=\"{:.1}\" fill=\"orange\" stroke=\"black\"/>\n",
        gx + CELL / 2.0,
        gy + CELL / 2.0,
        CELL * 0.3
    ));
    out.push_str("</svg>\n");
    out
}

/// Two intensity images side by side, sharing one color scale: used to
/// compare a data matrix against its low-rank reconstruction. Inputs
/// are row-major `rows x cols` slices.
pub fn matrix_pair_svg(
    left: &[f64],
    right: &[f64],
    rows: usize,
    cols: usize,
    titles: (&str, &str),
) -> String {
    assert_eq!(left.len(), rows * cols);
    assert_eq!(right.len(), rows * cols);
    let px = (600.0 / cols as f64).clamp(1.0, 8.0);
    let py = (600.0 / rows as f64).clamp(1.0, 8.0);
    let gap = 30.0;
    let width = 2.0 * MARGIN + gap + 2.0 * (cols as f64 * px);
    let height = 2.0 * MARGIN + rows as f64 * py + 20.0;

    let lo = left
        .iter()
        .chain(right.iter())
        .fold(f64::INFINITY, |a, b| a.min(*b));
    let hi = left
        .iter()
        .chain(right.iter())
        .fold(f64::NEG_INFINITY, |a, b| a.max(*b));
    let span = if hi > lo { hi - lo } else { 1.0 };

    let mut out = header(width, height, &format!("{} | {}", titles.0, titles.1));
    for (pane, data) in [(0usize, left), (1, right)] {
        let x_off = MARGIN + pane as f64 * (cols as f64 * px + gap);
        let y_off = MARGIN + 10.0;
        for i in 0..rows {
            for j in 0..cols {
                let v = (data[i * cols + j] - lo) / span;
                out.push_str(&format!(
                    "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{px:.1}\" height=\"{py:.1}\" fill=\"{}\"/>\n",
                    x_off + j as f64 * px,
                    y_off + i as f64 * py,
                    value_color(v)
                ));
            }
        }
    }
    out.push_str("</svg>\n");
    out
}
