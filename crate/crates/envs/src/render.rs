use mosaic_protocol::RgbImage;

use crate::corridor;
use crate::state::{EnvState, Task};

/// Pixel edge length of one grid cell in RGB renders.
pub const TILE: u32 = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RenderMode {
    Ascii,
    Rgb,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Rendered {
    Ascii(String),
    Rgb(RgbImage),
}

pub fn render(state: &EnvState, mode: RenderMode) -> Rendered {
    match mode {
        RenderMode::Ascii => Rendered::Ascii(render_ascii(state)),
        RenderMode::Rgb => Rendered::Rgb(render_rgb(state)),
    }
}

const TEAMTAG_GLYPHS: [char; 4] = ['B', 'C', 'G', 'H'];

/// One character per cell, one line per row, each line ending in `\n`.
pub fn render_ascii(state: &EnvState) -> String {
    let mut out = String::new();
    for y in 0..state.height {
        for x in 0..state.width {
            let c = match (state.task, state.occupant((x, y))) {
                (Task::Corridor, Some(_)) => 'A',
                (Task::Corridor, None) if x == corridor::goal() => 'G',
                (Task::TeamTag, Some(i)) => TEAMTAG_GLYPHS[i],
                _ => '.',
            };
            out.push(c);
        }
        out.push('\n');
    }
    out
}

const FLOOR: [u8; 3] = [40, 40, 40];
const GOAL: [u8; 3] = [0, 160, 0];
const CORRIDOR_AGENT: [u8; 3] = [220, 40, 40];
const TEAMTAG_COLORS: [[u8; 3]; 4] = [[40, 80, 255], [90, 160, 255], [30, 170, 60], [120, 220, 120]];

/// `(height * TILE) x (width * TILE)` frame with a fixed palette.
pub fn render_rgb(state: &EnvState) -> RgbImage {
    let w = state.width as u32 * TILE;
    let h = state.height as u32 * TILE;
    let mut data = vec![0u8; (w * h * 3) as usize];
    for y in 0..state.height {
        for x in 0..state.width {
            let background = if state.task == Task::Corridor && x == corridor::goal() { GOAL } else { FLOOR };
            let body = state.occupant((x, y)).map(|i| match state.task {
                Task::Corridor => CORRIDOR_AGENT,
                Task::TeamTag => TEAMTAG_COLORS[i],
            });
            for py in 0..TILE {
                for px in 0..TILE {
                    let inner = (2..TILE - 2).contains(&px) && (2..TILE - 2).contains(&py);
                    let color = match body {
                        Some(c) if inner => c,
                        _ => background,
                    };
                    let row = y as u32 * TILE + py;
                    let col = x as u32 * TILE + px;
                    let at = ((row * w + col) * 3) as usize;
                    data[at..at + 3].copy_from_slice(&color);
                }
            }
        }
    }
    RgbImage { height: h, width: w, data }
}
