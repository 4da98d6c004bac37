//! Fixed-radius neighbor queries over particle sets, backed by a uniform
//! spatial hash grid with cell size equal to the query radius.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::math::Vec3;

/// Immutable fixed-radius neighbor index. Membership uses the closed ball:
/// a particle at distance exactly `radius` is included, and a particle at
/// the query point itself is included with zero offset.
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    cell_size: f64,
    cells: HashMap<(i64, i64, i64), Vec<u32>>,
    positions: Vec<Vec3>,
}

fn cell_of(p: Vec3, cell_size: f64) -> (i64, i64, i64) {
    // Clamp so extreme (but finite) coordinates cannot overflow the
    // neighbor-window offsets; such particles land in far-away cells and
    // simply have no neighbors.
    const LIMIT: f64 = 4.0e18;
    let coord = |v: f64| (v / cell_size).floor().clamp(-LIMIT, LIMIT) as i64;
    (coord(p.x), coord(p.y), coord(p.z))
}

impl NeighborIndex {
    pub fn build(positions: &[Vec3], radius: f64) -> Result<NeighborIndex> {
        if !(radius > 0.0) {
            return Err(Error::RejectedInput(format!(
                "neighbor radius must be positive, got {radius}"
            )));
        }
        let mut cells: HashMap<(i64, i64, i64), Vec<u32>> = HashMap::new();
        for (i, &p) in positions.iter().enumerate() {
            if !p.is_finite() {
                return Err(Error::RejectedInput(format!(
                    "non-finite position at particle {i}"
                )));
            }
            cells.entry(cell_of(p, radius)).or_default().push(i as u32);
        }
        Ok(NeighborIndex {
            cell_size: radius,
            cells,
            positions: positions.to_vec(),
        })
    }

    pub fn radius(&self) -> f64 {
        self.cell_size
    }

    pub fn source_positions(&self) -> &[Vec3] {
        &self.positions
    }

    /// All particles within the closed ball of the index radius around `x`,
    /// with their offsets `x_i - x`. Results are sorted by particle id so
    /// they do not depend on hash iteration order.
    pub fn query(&self, x: Vec3) -> Vec<(u32, Vec3)> {
        let mut out = Vec::new();
        self.query_into(x, &mut out);
        out
    }

    pub fn query_into(&self, x: Vec3, out: &mut Vec<(u32, Vec3)>) {
        out.clear();
        let r2 = self.cell_size * self.cell_size;
        let (cx, cy, cz) = cell_of(x, self.cell_size);
        for dx in -1..=1 {
            for dy in -1..=1 {
                for dz in -1..=1 {
                    let Some(ids) = self.cells.get(&(cx + dx, cy + dy, cz + dz)) else {
                        continue;
                    };
                    for &i in ids {
                        let offset = self.positions[i as usize] - x;
                        if offset.norm_sq() <= r2 {
                            out.push((i, offset));
                        }
                    }
                }
            }
        }
        out.sort_unstable_by_key(|(i, _)| *i);
    }

    /// Neighbor count per query position, excluding a particle located
    /// exactly at the query point (the self term when queries are the
    /// indexed particles themselves).
    pub fn neighbor_counts(&self, queries: &[Vec3]) -> Vec<usize> {
        let mut scratch = Vec::new();
        queries
            .iter()
            .map(|&q| {
                self.query_into(q, &mut scratch);
                scratch
                    .iter()
                    .filter(|(_, off)| off.norm_sq() > 0.0)
                    .count()
            })
            .collect()
    }
}
