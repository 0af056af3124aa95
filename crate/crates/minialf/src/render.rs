//! Symbolic-pixel renderer and template captions.
//!
//! Layout of the 32×32 image: a 5×5 map of 6×6 cells in rows 0..30 and
//! columns 1..31, then a two-row strip whose left half shows the held object
//! and right half the colour of the receptacle the agent faces.
//!
//! A receptacle cell has a ring in the receptacle colour. Its 4×4 interior
//! is a solid "door" while the receptacle is closed; otherwise it shows up
//! to four 2×2 object swatches on black. Heated, cooled and cleaned objects
//! carry a one-pixel tint. The agent's cell has white corners.

use vp2_core::vision::Observation;

use crate::types::Recep;
use crate::world::{Object, WorldState, START_CELL};

const CELL: usize = 6;
const MAP_COL0: usize = 1;
const STRIP_ROW: usize = 30;
const WHITE: [u8; 3] = [255, 255, 255];
const HEAT_TINT: [u8; 3] = [255, 90, 0];
const COOL_TINT: [u8; 3] = [0, 210, 255];
const CLEAN_TINT: [u8; 3] = [255, 255, 255];
const LAMP_ON: [u8; 3] = [255, 255, 160];
const LAMP_OFF: [u8; 3] = [60, 50, 10];

fn darken(c: [u8; 3]) -> [u8; 3] {
    [c[0] / 2, c[1] / 2, c[2] / 2]
}

fn cell_origin(cell: (usize, usize)) -> (usize, usize) {
    (cell.0 * CELL, MAP_COL0 + cell.1 * CELL)
}

fn swatch(img: &mut Observation, row: usize, col: usize, o: &Object) {
    let c = o.kind.color();
    for (dr, dc) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
        img.set(row + dr, col + dc, c);
    }
    let tint = if o.heated {
        Some(HEAT_TINT)
    } else if o.cooled {
        Some(COOL_TINT)
    } else if o.cleaned {
        Some(CLEAN_TINT)
    } else {
        None
    };
    if let Some(t) = tint {
        img.set(row + 1, col + 1, t);
    }
}

/// Pure function of the state; closed contents are never drawn.
pub fn render(state: &WorldState) -> Observation {
    let mut img = Observation::blank();
    for (idx, r) in state.receptacles.iter().enumerate() {
        let (r0, c0) = cell_origin(r.cell);
        let color = r.kind.color();
        for i in 0..CELL {
            for j in 0..CELL {
                if i == 0 || j == 0 || i == CELL - 1 || j == CELL - 1 {
                    img.set(r0 + i, c0 + j, color);
                }
            }
        }
        let inner = |img: &mut Observation, c: [u8; 3]| {
            for i in 1..CELL - 1 {
                for j in 1..CELL - 1 {
                    img.set(r0 + i, c0 + j, c);
                }
            }
        };
        if r.kind == Recep::Desklamp {
            inner(&mut img, if state.lamp_on { LAMP_ON } else { LAMP_OFF });
        } else if !state.contents_visible(idx) {
            inner(&mut img, darken(color));
        } else {
            for (slot, oi) in state.contents(idx).take(4).enumerate() {
                swatch(
                    &mut img,
                    r0 + 1 + 2 * (slot / 2),
                    c0 + 1 + 2 * (slot % 2),
                    &state.objects[oi],
                );
            }
        }
    }
    match state.facing() {
        Some(r) => {
            let (r0, c0) = cell_origin(r.cell);
            for (i, j) in [(0, 0), (0, CELL - 1), (CELL - 1, 0), (CELL - 1, CELL - 1)] {
                img.set(r0 + i, c0 + j, WHITE);
            }
        }
        None => {
            let (r0, c0) = cell_origin(START_CELL);
            for (i, j) in [(2, 2), (2, 3), (3, 2), (3, 3)] {
                img.set(r0 + i, c0 + j, WHITE);
            }
        }
    }
    if let Some(h) = state.held() {
        let o = &state.objects[h];
        for row in STRIP_ROW..STRIP_ROW + 2 {
            for col in 0..14 {
                img.set(row, col, o.kind.color());
            }
        }
        swatch(&mut img, STRIP_ROW, 14, o);
    }
    if let Some(r) = state.facing() {
        for row in STRIP_ROW..STRIP_ROW + 2 {
            for col in 16..32 {
                img.set(row, col, r.kind.color());
            }
        }
    }
    img
}

/// Template description of what the agent faces.
pub fn caption(state: &WorldState) -> String {
    match state.agent {
        Some(idx) => describe(state, idx),
        None => "you are in the middle of the room.".to_string(),
    }
}

/// Template description of receptacle `idx`, listing contents only when
/// they are visible.
pub fn describe(state: &WorldState, idx: usize) -> String {
    let r = &state.receptacles[idx];
    let mut s = format!("you see a {}.", r.kind.name());
    if r.kind == Recep::Desklamp {
        s.push_str(if state.lamp_on {
            " it is on."
        } else {
            " it is off."
        });
        return s;
    }
    if r.kind.openable() {
        s.push_str(if r.open {
            " it is open."
        } else {
            " it is closed."
        });
    }
    if state.contents_visible(idx) {
        let items: Vec<String> = state
            .contents(idx)
            .map(|i| format!("a {}", state.objects[i].kind.name()))
            .collect();
        if items.is_empty() {
            s.push_str(" in it you see nothing.");
        } else {
            s.push_str(&format!(" in it you see {}.", items.join(", ")));
        }
    }
    s
}

/// Every word captions can produce, for vocabulary construction.
pub fn caption_lexicon() -> Vec<String> {
    let mut out: Vec<String> = [
        "you are in the middle of the room.",
        "it is on.",
        "it is off.",
        "it is open.",
        "it is closed.",
        "in it you see nothing.",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    for r in Recep::ALL {
        out.push(format!("you see a {}.", r.name()));
    }
    for o in crate::types::Obj::ALL {
        out.push(format!("in it you see a {0}, a {0}.", o.name()));
    }
    out
}
