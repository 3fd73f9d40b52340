//! Token grids and the 3×3 neighbourhood tables used by the grid convolutions.

use crate::error::{Error, Result};

/// A `h × w` patch grid whose tokens are stored contiguously in raster order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Grid {
    pub h: usize,
    pub w: usize,
}

impl Grid {
    pub const fn new(h: usize, w: usize) -> Self {
        Self { h, w }
    }

    pub const fn len(&self) -> usize {
        self.h * self.w
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub(crate) const NO_NEIGHBOUR: u32 = u32::MAX;

/// For every row of a sequence made of the given grids back to back, the row
/// indices of its 3×3 neighbourhood (`ky*3+kx` order), or [`NO_NEIGHBOUR`]
/// where the window leaves the grid. Neighbourhoods never cross grids.
pub(crate) fn neighbour_table(grids: &[Grid], rows: usize) -> Result<Vec<[u32; 9]>> {
    let total: usize = grids.iter().map(Grid::len).sum();
    if total != rows {
        return Err(Error::Geometry(format!(
            "grids {grids:?} cover {total} tokens but the sequence has {rows}"
        )));
    }
    let mut table = Vec::with_capacity(rows);
    let mut base = 0usize;
    for g in grids {
        for y in 0..g.h {
            for x in 0..g.w {
                let mut nb = [NO_NEIGHBOUR; 9];
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (yy, xx) = (y + ky, x + kx);
                        if yy >= 1 && yy <= g.h && xx >= 1 && xx <= g.w {
                            nb[ky * 3 + kx] = (base + (yy - 1) * g.w + (xx - 1)) as u32;
                        }
                    }
                }
                table.push(nb);
            }
        }
        base += g.len();
    }
    Ok(table)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn corner_has_four_neighbours() {
        let t = neighbour_table(&[Grid::new(3, 3)], 9).unwrap();
        let valid = t[0].iter().filter(|&&v| v != NO_NEIGHBOUR).count();
        assert_eq!(valid, 4);
        assert_eq!(t[4].iter().filter(|&&v| v != NO_NEIGHBOUR).count(), 9);
        assert_eq!(t[4][4], 4);
    }

    #[test]
    fn grids_do_not_touch() {
        let t = neighbour_table(&[Grid::new(2, 2), Grid::new(2, 2)], 8).unwrap();
        for (r, nb) in t.iter().enumerate() {
            for &n in nb.iter().filter(|&&v| v != NO_NEIGHBOUR) {
                assert_eq!(r / 4, n as usize / 4);
            }
        }
    }

    #[test]
    fn mismatch_is_geometry_error() {
        assert!(matches!(neighbour_table(&[Grid::new(2, 2)], 5), Err(Error::Geometry(_))));
    }
}
