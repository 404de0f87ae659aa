//! Fixed-radius neighbor search over a hash grid, with a linear-scan twin.
//!
//! Both queries share one selection rule: collect every point whose squared
//! distance to the center is `<= radius²`, keep the first `k` in ascending
//! point-index order, and pad a short list by repeating its first entry.

use std::collections::HashMap;

use crate::geometry::Vec3;

type Cell = [i64; 3];

/// Result of a ball query.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Neighbors {
    /// No point lies within the radius.
    Empty,
    /// Exactly `k` indices; entries past `found` repeat `indices[0]`.
    Found { indices: Vec<usize>, found: usize },
}

impl Neighbors {
    fn from_hits(mut hits: Vec<usize>, k: usize) -> Self {
        if hits.is_empty() {
            return Neighbors::Empty;
        }
        hits.truncate(k);
        let found = hits.len();
        let first = hits[0];
        hits.resize(k, first);
        Neighbors::Found { indices: hits, found }
    }

    /// All `k` slots, padding included. Empty for [`Neighbors::Empty`].
    pub fn indices(&self) -> &[usize] {
        match self {
            Neighbors::Empty => &[],
            Neighbors::Found { indices, .. } => indices,
        }
    }

    /// The distinct in-radius hits, without padding.
    pub fn distinct(&self) -> &[usize] {
        match self {
            Neighbors::Empty => &[],
            Neighbors::Found { indices, found } => &indices[..*found],
        }
    }

    pub fn is_empty(&self) -> bool {
        matches!(self, Neighbors::Empty)
    }
}

#[inline]
fn within(p: &Vec3, center: &Vec3, r2: f64) -> bool {
    let dx = p[0] - center[0];
    let dy = p[1] - center[1];
    let dz = p[2] - center[2];
    dx * dx + dy * dy + dz * dz <= r2
}

/// Uniform hash grid over a fixed point set.
#[derive(Debug, Clone)]
pub struct GridHashIndex {
    cell_size: f64,
    buckets: HashMap<Cell, Vec<usize>>,
    positions: Vec<Vec3>,
}

impl GridHashIndex {
    pub fn cell_size(&self) -> f64 {
        self.cell_size
    }

    pub fn positions(&self) -> &[Vec3] {
        &self.positions
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    pub fn bucket_count(&self) -> usize {
        self.buckets.len()
    }

    pub fn cell_of(&self, p: &Vec3) -> Cell {
        p.map(|c| (c / self.cell_size).floor() as i64)
    }

    pub fn bucket(&self, cell: &Cell) -> &[usize] {
        self.buckets.get(cell).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Same contract as [`ball_query`].
    pub fn query(&self, center: &Vec3, radius: f64, k: usize) -> Neighbors {
        assert!(radius > 0.0 && k >= 1, "ball query needs radius > 0 and k >= 1");
        let r2 = radius * radius;
        // Slightly widened so that rounding in `c ± r` never skips a cell.
        let slack = 1e-9 * (1.0 + radius);
        let lo = center.map(|c| ((c - radius - slack) / self.cell_size).floor() as i64);
        let hi = center.map(|c| ((c + radius + slack) / self.cell_size).floor() as i64);
        let mut hits = Vec::new();
        for cz in lo[2]..=hi[2] {
            for cy in lo[1]..=hi[1] {
                for cx in lo[0]..=hi[0] {
                    if let Some(bucket) = self.buckets.get(&[cx, cy, cz]) {
                        hits.extend(bucket.iter().copied().filter(|&i| within(&self.positions[i], center, r2)));
                    }
                }
            }
        }
        hits.sort_unstable();
        Neighbors::from_hits(hits, k)
    }
}

pub fn build_index(positions: &[Vec3], cell_size: f64) -> GridHashIndex {
    assert!(cell_size > 0.0, "cell_size must be positive");
    let mut index = GridHashIndex {
        cell_size,
        buckets: HashMap::new(),
        positions: positions.to_vec(),
    };
    for (i, p) in positions.iter().enumerate() {
        let cell = index.cell_of(p);
        index.buckets.entry(cell).or_default().push(i);
    }
    index
}

pub fn ball_query(index: &GridHashIndex, center: &Vec3, radius: f64, k: usize) -> Neighbors {
    index.query(center, radius, k)
}

/// Linear-scan reference for [`ball_query`].
pub fn ball_query_bruteforce(positions: &[Vec3], center: &Vec3, radius: f64, k: usize) -> Neighbors {
    assert!(radius > 0.0 && k >= 1, "ball query needs radius > 0 and k >= 1");
    let r2 = radius * radius;
    let hits: Vec<usize> = positions
        .iter()
        .enumerate()
        .filter(|(_, p)| within(p, center, r2))
        .map(|(i, _)| i)
        .take(k)
        .collect();
    Neighbors::from_hits(hits, k)
}
