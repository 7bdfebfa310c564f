//! Data-only SVG figures: trajectory polylines over the goal layout, and the
//! reward landscape as filled contour bands. Every figure has a CSV twin.

use std::fmt::Write as _;
use std::io::Read;

use bmd_core::toyenv::GoalLayout;
use serde::{Deserialize, Serialize};

use crate::CliError;

const SIZE: f64 = 480.0;
const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#17becf", "#8c564b", "#e377c2",
];

/// One row of a trajectory dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    pub episode: usize,
    pub step: usize,
    pub x: f64,
    pub y: f64,
    pub z_code: usize,
    pub mode: Option<usize>,
}

pub fn read_trajectories<R: Read>(reader: R) -> Result<Vec<TrajPoint>, CliError> {
    let mut r = csv::Reader::from_reader(reader);
    Ok(r.deserialize().collect::<Result<_, _>>()?)
}

/// Maps workspace coordinates in `[-bound, bound]^2` to pixels, y up.
fn to_px(p: f64, bound: f64, flip: bool) -> f64 {
    let u = (p + bound) / (2.0 * bound) * SIZE;
    if flip {
        SIZE - u
    } else {
        u
    }
}

fn header(title: &str) -> String {
    format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{SIZE}\" height=\"{SIZE}\" viewBox=\"0 0 {SIZE} {SIZE}\">\n<title>{title}</title>\n<rect width=\"{SIZE}\" height=\"{SIZE}\" fill=\"white\"/>\n"
    )
}

fn goals(layout: &GoalLayout, bound: f64) -> String {
    let mut s = String::new();
    let r = layout.success_radius() / (2.0 * bound) * SIZE;
    for (i, c) in layout.centers().iter().enumerate() {
        let _ = writeln!(
            s,
            "<circle cx=\"{:.2}\" cy=\"{:.2}\" r=\"{r:.2}\" fill=\"none\" stroke=\"black\" stroke-dasharray=\"4 3\"><title>goal {i}</title></circle>",
            to_px(c[0], bound, false),
            to_px(c[1], bound, true),
        );
    }
    s
}

/// One polyline per episode, coloured by latent code.
pub fn trajectory_svg(points: &[TrajPoint], layout: &GoalLayout, bound: f64) -> String {
    let mut s = header("trajectories");
    s.push_str(&goals(layout, bound));
    let mut i = 0;
    while i < points.len() {
        let ep = points[i].episode;
        let start = i;
        while i < points.len() && points[i].episode == ep {
            i += 1;
        }
        let run = &points[start..i];
        let coords: Vec<String> = run
            .iter()
            .map(|p| format!("{:.2},{:.2}", to_px(p.x, bound, false), to_px(p.y, bound, true)))
            .collect();
        let colour = PALETTE[run[0].z_code % PALETTE.len()];
        let _ = writeln!(
            s,
            "<polyline points=\"{}\" fill=\"none\" stroke=\"{colour}\" stroke-width=\"1\" stroke-opacity=\"0.5\"/>",
            coords.join(" ")
        );
    }
    s.push_str("</svg>\n");
    s
}

/// Reward on an `n x n` grid of cell centres, row-major from the bottom.
pub fn reward_grid(layout: &GoalLayout, bound: f64, n: usize) -> Vec<(f64, f64, f64)> {
    let h = 2.0 * bound / n as f64;
    let mut out = Vec::with_capacity(n * n);
    for j in 0..n {
        for i in 0..n {
            let p = [-bound + (i as f64 + 0.5) * h, -bound + (j as f64 + 0.5) * h];
            out.push((p[0], p[1], layout.reward(p)));
        }
    }
    out
}

/// Band index of `v` among `levels` equal bands of `[lo, hi]`.
pub fn band(v: f64, lo: f64, hi: f64, levels: usize) -> usize {
    if hi <= lo {
        return 0;
    }
    (((v - lo) / (hi - lo) * levels as f64).floor() as usize).min(levels - 1)
}

/// Filled contour bands of a grid from [`reward_grid`]. Adjacent cells of one
/// band within a row merge into a single rectangle.
pub fn landscape_svg(grid: &[(f64, f64, f64)], n: usize, levels: usize, layout: &GoalLayout, bound: f64) -> String {
    let lo = grid.iter().map(|g| g.2).fold(f64::INFINITY, f64::min);
    let hi = grid.iter().map(|g| g.2).fold(f64::NEG_INFINITY, f64::max);
    let cell = SIZE / n as f64;
    let mut s = header("reward landscape");
    for j in 0..n {
        let mut i = 0;
        while i < n {
            let b = band(grid[j * n + i].2, lo, hi, levels);
            let start = i;
            while i < n && band(grid[j * n + i].2, lo, hi, levels) == b {
                i += 1;
            }
            let shade = 255 - (b * 200 / levels.max(1)) as u8;
            let _ = writeln!(
                s,
                "<rect x=\"{:.2}\" y=\"{:.2}\" width=\"{:.2}\" height=\"{:.2}\" fill=\"rgb({shade},{shade},255)\"/>",
                start as f64 * cell,
                SIZE - (j + 1) as f64 * cell,
                (i - start) as f64 * cell,
                cell
            );
        }
    }
    s.push_str(&goals(layout, bound));
    s.push_str("</svg>\n");
    s
}

pub fn grid_csv(grid: &[(f64, f64, f64)], out: &mut Vec<u8>) -> Result<(), CliError> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["x", "y", "reward"])?;
    for (x, y, r) in grid {
        w.write_record([x.to_string(), y.to_string(), r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bands_cover_the_range() {
        assert_eq!(band(0.0, 0.0, 1.0, 4), 0);
        assert_eq!(band(0.26, 0.0, 1.0, 4), 1);
        assert_eq!(band(1.0, 0.0, 1.0, 4), 3);
        assert_eq!(band(5.0, 1.0, 1.0, 4), 0);
    }

    #[test]
    fn one_polyline_per_episode() {
        let pts: Vec<TrajPoint> = (0..3)
            .flat_map(|e| {
                (0..4).map(move |t| TrajPoint {
                    episode: e,
                    step: t,
                    x: 0.1 * t as f64,
                    y: -0.1 * t as f64,
                    z_code: e,
                    mode: None,
                })
            })
            .collect();
        let svg = trajectory_svg(&pts, &GoalLayout::diagonal(), 1.5);
        assert_eq!(svg.matches("<polyline").count(), 3);
        assert_eq!(svg.matches("<circle").count(), 4);
    }

    #[test]
    fn landscape_peaks_at_goals() {
        let layout = GoalLayout::diagonal();
        let grid = reward_grid(&layout, 1.5, 30);
        let best = grid.iter().cloned().fold((0.0, 0.0, f64::NEG_INFINITY), |a, b| if b.2 > a.2 { b } else { a });
        let near = layout
            .centers()
            .iter()
            .any(|c| (c[0] - best.0).hypot(c[1] - best.1) < 0.1);
        assert!(near);
        let svg = landscape_svg(&grid, 30, 8, &layout, 1.5);
        assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    }
}
