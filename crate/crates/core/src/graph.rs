//! Static reduction: prune each node's out-edges to its closest
//! `ceil((1 - gamma) * (n - 1))` neighbours, once per instance.
//!
//! Ranking is by squared Euclidean distance over the unit-square coordinates,
//! ties broken by the lower node index. Three storage layouts share that
//! ranking:
//!
//! * `Full` when nothing is pruned,
//! * `Lists` (flat index/distance arrays built with a uniform grid) when the
//!   retained degree is small enough to materialise,
//! * `Cutoff` (per-node rank threshold) when materialising would cost O(n^2)
//!   memory, e.g. gamma = 0.1 on 100k nodes. Membership of `j` in `E'(i)` is
//!   then a single comparison against node `i`'s threshold.

use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::instances::Instance;

/// Materialise neighbour lists only below this many stored entries.
pub const LIST_BUDGET: usize = 1 << 24;

const MAGIC: &[u8; 4] = b"L2RG";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
enum Repr {
    Full,
    Lists { idx: Vec<u32>, dist: Vec<f64> },
    Cutoff { d2: Vec<f64>, tie: Vec<u32> },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SparseGraph {
    n: usize,
    gamma: f64,
    keep: usize,
    coords: Vec<[f64; 2]>,
    repr: Repr,
}

/// Retained out-degree for `n` nodes at pruning rate `gamma`.
pub fn keep_count(n: usize, gamma: f64) -> usize {
    if n < 2 {
        return 0;
    }
    let others = (n - 1) as f64;
    // Guard against 0.9 * 9 = 8.100000000000001 style round-up.
    let raw = (1.0 - gamma) * others;
    let k = (raw - 1e-9).ceil().max(0.0) as usize;
    k.clamp(usize::from(gamma < 1.0), n - 1)
}

#[inline]
fn d2(a: [f64; 2], b: [f64; 2]) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    dx * dx + dy * dy
}

#[inline]
fn rank_less(a: (f64, u32), b: (f64, u32)) -> bool {
    a.0 < b.0 || (a.0 == b.0 && a.1 < b.1)
}

fn rank_cmp(a: &(f64, u32), b: &(f64, u32)) -> std::cmp::Ordering {
    a.0.total_cmp(&b.0).then(a.1.cmp(&b.1))
}

pub fn build_sparse_graph(instance: &Instance, gamma: f64) -> Result<SparseGraph> {
    build_with_budget(instance, gamma, LIST_BUDGET)
}

/// As [`build_sparse_graph`] with an explicit materialisation budget.
pub fn build_with_budget(instance: &Instance, gamma: f64, budget: usize) -> Result<SparseGraph> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidGamma(gamma));
    }
    let coords = instance.unit_coords().to_vec();
    let n = coords.len();
    let keep = keep_count(n, gamma);
    let repr = if keep + 1 >= n {
        Repr::Full
    } else if n.saturating_mul(keep) <= budget {
        lists_by_grid(&coords, keep)
    } else {
        cutoffs(&coords, keep)
    };
    Ok(SparseGraph { n, gamma, keep, coords, repr })
}

struct Grid {
    cells: usize,
    start: Vec<u32>,
    items: Vec<u32>,
}

impl Grid {
    fn new(coords: &[[f64; 2]], per_cell: usize) -> Self {
        let n = coords.len();
        let cells = (((n / per_cell.max(1)) as f64).sqrt().ceil() as usize).clamp(1, 2048);
        let cell_of = |p: [f64; 2]| {
            let cx = ((p[0] * cells as f64) as usize).min(cells - 1);
            let cy = ((p[1] * cells as f64) as usize).min(cells - 1);
            cy * cells + cx
        };
        let mut count = vec![0u32; cells * cells + 1];
        for p in coords {
            count[cell_of(*p) + 1] += 1;
        }
        for c in 1..count.len() {
            count[c] += count[c - 1];
        }
        let mut fill = count.clone();
        let mut items = vec![0u32; n];
        for (i, p) in coords.iter().enumerate() {
            let c = cell_of(*p);
            items[fill[c] as usize] = i as u32;
            fill[c] += 1;
        }
        Self { cells, start: count, items }
    }

    fn cell(&self, cx: usize, cy: usize) -> &[u32] {
        let c = cy * self.cells + cx;
        &self.items[self.start[c] as usize..self.start[c + 1] as usize]
    }
}

/// Exact k-nearest lists by expanding square rings of grid cells until the
/// k-th best distance is closer than the unexplored ring.
fn lists_by_grid(coords: &[[f64; 2]], keep: usize) -> Repr {
    let n = coords.len();
    let grid = Grid::new(coords, 2);
    let cells = grid.cells;
    let width = 1.0 / cells as f64;
    let rows: Vec<Vec<(f64, u32)>> = (0..n)
        .into_par_iter()
        .map(|i| {
            let p = coords[i];
            let cx = ((p[0] * cells as f64) as usize).min(cells - 1) as isize;
            let cy = ((p[1] * cells as f64) as usize).min(cells - 1) as isize;
            let mut cand: Vec<(f64, u32)> = Vec::with_capacity(keep * 2);
            let mut ring = 0isize;
            loop {
                for y in (cy - ring)..=(cy + ring) {
                    for x in (cx - ring)..=(cx + ring) {
                        let on_ring = (y - cy).abs() == ring || (x - cx).abs() == ring;
                        if !on_ring || x < 0 || y < 0 || x >= cells as isize || y >= cells as isize {
                            continue;
                        }
                        for &j in grid.cell(x as usize, y as usize) {
                            if j as usize != i {
                                cand.push((d2(p, coords[j as usize]), j));
                            }
                        }
                    }
                }
                let exhausted = ring as usize >= cells;
                if cand.len() >= keep {
                    cand.select_nth_unstable_by(keep - 1, rank_cmp);
                    cand.truncate(keep);
                    let worst = cand.iter().map(|c| c.0).fold(0.0f64, f64::max);
                    // Anything outside the explored rings is at least `ring * width` away.
                    let safe = ring as f64 * width;
                    if exhausted || worst < safe * safe {
                        break;
                    }
                }
                if exhausted {
                    break;
                }
                ring += 1;
            }
            cand.sort_unstable_by(rank_cmp);
            cand
        })
        .collect();
    let mut idx = Vec::with_capacity(n * keep);
    let mut dist = Vec::with_capacity(n * keep);
    for row in rows {
        debug_assert_eq!(row.len(), keep);
        for (d, j) in row {
            idx.push(j);
            dist.push(d.sqrt());
        }
    }
    Repr::Lists { idx, dist }
}

/// Per-node rank threshold: the `keep`-th smallest `(d2, index)` pair.
fn cutoffs(coords: &[[f64; 2]], keep: usize) -> Repr {
    let n = coords.len();
    let pairs: Vec<(f64, u32)> = (0..n)
        .into_par_iter()
        .map_init(
            || Vec::with_capacity(n),
            |buf, i| {
                buf.clear();
                let p = coords[i];
                for (j, q) in coords.iter().enumerate() {
                    if j != i {
                        buf.push((d2(p, *q), j as u32));
                    }
                }
                let (_, nth, _) = buf.select_nth_unstable_by(keep - 1, rank_cmp);
                *nth
            },
        )
        .collect();
    let (d2, tie) = pairs.into_iter().unzip();
    Repr::Cutoff { d2, tie }
}

impl SparseGraph {
    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// True when this graph was built from exactly this instance and ratio.
    pub fn built_for(&self, instance: &Instance, gamma: f64) -> bool {
        self.gamma.to_bits() == gamma.to_bits() && self.coords.as_slice() == instance.unit_coords()
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// Retained out-degree (uniform across nodes).
    pub fn keep_count(&self) -> usize {
        self.keep
    }

    pub fn is_materialized(&self) -> bool {
        !matches!(self.repr, Repr::Cutoff { .. })
    }

    /// Whether the directed edge `from -> to` survived pruning.
    #[inline]
    pub fn contains(&self, from: usize, to: usize) -> bool {
        if from == to {
            return false;
        }
        match &self.repr {
            Repr::Full => true,
            Repr::Lists { idx, .. } => idx[from * self.keep..(from + 1) * self.keep].contains(&(to as u32)),
            Repr::Cutoff { d2: cut, tie } => {
                let key = (d2(self.coords[from], self.coords[to]), to as u32);
                !rank_less((cut[from], tie[from]), key)
            }
        }
    }

    /// Out-neighbours of `i` ordered by ascending distance, as `(node, distance)`.
    pub fn neighbors(&self, i: usize) -> Vec<(usize, f64)> {
        match &self.repr {
            Repr::Lists { idx, dist } => {
                let r = i * self.keep..(i + 1) * self.keep;
                idx[r.clone()].iter().zip(&dist[r]).map(|(&j, &d)| (j as usize, d)).collect()
            }
            _ => {
                let p = self.coords[i];
                let mut all: Vec<(f64, u32)> = (0..self.n)
                    .filter(|&j| self.contains(i, j))
                    .map(|j| (d2(p, self.coords[j]), j as u32))
                    .collect();
                all.sort_unstable_by(rank_cmp);
                all.into_iter().map(|(d, j)| (j as usize, d.sqrt())).collect()
            }
        }
    }

    /// Borrowed neighbour indices when the lists are materialised.
    pub fn neighbor_slice(&self, i: usize) -> Option<&[u32]> {
        match &self.repr {
            Repr::Lists { idx, .. } => Some(&idx[i * self.keep..(i + 1) * self.keep]),
            _ => None,
        }
    }

    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        w.write_all(MAGIC)?;
        w.write_all(&[VERSION])?;
        w.write_all(&(self.n as u64).to_le_bytes())?;
        w.write_all(&self.gamma.to_le_bytes())?;
        w.write_all(&(self.keep as u64).to_le_bytes())?;
        match &self.repr {
            Repr::Full => w.write_all(&[0])?,
            Repr::Lists { idx, dist } => {
                w.write_all(&[1])?;
                for (j, d) in idx.iter().zip(dist) {
                    w.write_all(&j.to_le_bytes())?;
                    w.write_all(&d.to_le_bytes())?;
                }
            }
            Repr::Cutoff { d2, tie } => {
                w.write_all(&[2])?;
                for (c, t) in d2.iter().zip(tie) {
                    w.write_all(&c.to_le_bytes())?;
                    w.write_all(&t.to_le_bytes())?;
                }
            }
        }
        for p in &self.coords {
            w.write_all(&p[0].to_le_bytes())?;
            w.write_all(&p[1].to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let bad = |m: &str| Error::Parse { line: 0, msg: format!("graph cache: {m}") };
        let mut head = [0u8; 5];
        r.read_exact(&mut head).map_err(|_| bad("truncated header"))?;
        if &head[..4] != MAGIC || head[4] != VERSION {
            return Err(bad("bad magic or version"));
        }
        let mut u64b = [0u8; 8];
        let mut read_u64 = |r: &mut dyn Read| -> Result<u64> {
            r.read_exact(&mut u64b).map_err(|_| bad("truncated"))?;
            Ok(u64::from_le_bytes(u64b))
        };
        let n = read_u64(&mut r)? as usize;
        let gamma = f64::from_bits(read_u64(&mut r)?);
        let keep = read_u64(&mut r)? as usize;
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag).map_err(|_| bad("truncated"))?;
        let mut u32b = [0u8; 4];
        let mut f64b = [0u8; 8];
        let mut next_u32 = |r: &mut dyn Read| -> Result<u32> {
            r.read_exact(&mut u32b).map_err(|_| bad("truncated"))?;
            Ok(u32::from_le_bytes(u32b))
        };
        let mut next_f64 = |r: &mut dyn Read| -> Result<f64> {
            r.read_exact(&mut f64b).map_err(|_| bad("truncated"))?;
            Ok(f64::from_le_bytes(f64b))
        };
        let repr = match tag[0] {
            0 => Repr::Full,
            1 => {
                let mut idx = Vec::with_capacity(n * keep);
                let mut dist = Vec::with_capacity(n * keep);
                for _ in 0..n * keep {
                    idx.push(next_u32(&mut r)?);
                    dist.push(next_f64(&mut r)?);
                }
                Repr::Lists { idx, dist }
            }
            2 => {
                let mut d2 = Vec::with_capacity(n);
                let mut tie = Vec::with_capacity(n);
                for _ in 0..n {
                    d2.push(next_f64(&mut r)?);
                    tie.push(next_u32(&mut r)?);
                }
                Repr::Cutoff { d2, tie }
            }
            t => return Err(bad(&format!("unknown layout tag {t}"))),
        };
        let mut coords = Vec::with_capacity(n);
        for _ in 0..n {
            coords.push([next_f64(&mut r)?, next_f64(&mut r)?]);
        }
        Ok(Self { n, gamma, keep, coords, repr })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{generate_uniform, ProblemKind};

    fn full_sort(inst: &Instance, i: usize, keep: usize) -> Vec<usize> {
        let c = inst.unit_coords();
        let mut others: Vec<(f64, usize)> =
            (0..inst.len()).filter(|&j| j != i).map(|j| (d2(c[i], c[j]), j)).collect();
        others.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        others.into_iter().take(keep).map(|x| x.1).collect()
    }

    #[test]
    fn keep_count_arithmetic() {
        assert_eq!(keep_count(10, 0.0), 9);
        assert_eq!(keep_count(10, 0.1), 9);
        assert_eq!(keep_count(100, 0.1), 90);
        assert_eq!(keep_count(100, 0.5), 50);
        assert_eq!(keep_count(100, 0.999), 1);
    }

    #[test]
    fn no_pruning_keeps_all() {
        let inst = generate_uniform(ProblemKind::Tsp, 10, None, 1).unwrap();
        for gamma in [0.0, 0.1] {
            let g = build_sparse_graph(&inst, gamma).unwrap();
            for i in 0..10 {
                let nb = g.neighbors(i);
                assert_eq!(nb.len(), 9);
                assert!(nb.iter().all(|&(j, _)| j != i));
            }
        }
    }

    #[test]
    fn invalid_gamma() {
        let inst = generate_uniform(ProblemKind::Tsp, 10, None, 1).unwrap();
        assert!(matches!(build_sparse_graph(&inst, 1.0), Err(Error::InvalidGamma(_))));
        assert!(matches!(build_sparse_graph(&inst, -0.1), Err(Error::InvalidGamma(_))));
    }

    #[test]
    fn grid_lists_match_full_sort() {
        let inst = generate_uniform(ProblemKind::Tsp, 100, None, 5).unwrap();
        let g = build_sparse_graph(&inst, 0.1).unwrap();
        assert!(g.is_materialized());
        for i in 0..100 {
            let got: Vec<usize> = g.neighbors(i).into_iter().map(|x| x.0).collect();
            assert_eq!(got, full_sort(&inst, i, 90));
        }
        let g = build_sparse_graph(&inst, 0.93).unwrap();
        for i in 0..100 {
            let got: Vec<usize> = g.neighbors(i).into_iter().map(|x| x.0).collect();
            assert_eq!(got, full_sort(&inst, i, 7), "node {i}");
        }
    }

    #[test]
    fn cutoff_layout_agrees_with_lists() {
        let inst = generate_uniform(ProblemKind::Tsp, 300, None, 8).unwrap();
        let lists = build_sparse_graph(&inst, 0.2).unwrap();
        let cut = build_with_budget(&inst, 0.2, 0).unwrap();
        assert!(!cut.is_materialized());
        for i in 0..300 {
            assert_eq!(lists.neighbors(i), cut.neighbors(i));
            for j in 0..300 {
                assert_eq!(lists.contains(i, j), cut.contains(i, j));
            }
        }
    }

    #[test]
    fn ties_prefer_lower_index() {
        // Nodes 1..=4 are all at distance 1 from node 0.
        let inst = Instance::tsp(
            "ties",
            vec![[0.5, 0.5], [0.5, 0.0], [1.0, 0.5], [0.5, 1.0], [0.0, 0.5]],
        )
        .unwrap();
        let g = build_sparse_graph(&inst, 0.5).unwrap();
        let nb: Vec<usize> = g.neighbors(0).into_iter().map(|x| x.0).collect();
        assert_eq!(nb, vec![1, 2]);
        let g = build_with_budget(&inst, 0.5, 0).unwrap();
        let nb: Vec<usize> = g.neighbors(0).into_iter().map(|x| x.0).collect();
        assert_eq!(nb, vec![1, 2]);
    }

    #[test]
    fn cache_round_trip() {
        let inst = generate_uniform(ProblemKind::Tsp, 60, None, 2).unwrap();
        for budget in [0, LIST_BUDGET] {
            let g = build_with_budget(&inst, 0.3, budget).unwrap();
            let mut buf = Vec::new();
            g.write_to(&mut buf).unwrap();
            assert_eq!(&buf[..4], b"L2RG");
            let back = SparseGraph::read_from(buf.as_slice()).unwrap();
            assert_eq!(back, g);
            assert!(SparseGraph::read_from(&buf[..buf.len() - 3]).is_err());
        }
    }
}
