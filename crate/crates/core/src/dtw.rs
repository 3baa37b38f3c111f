//! Dynamic time warping over multivariate sequences.
//!
//! Cells hold the pair (accumulated cost, path length) and are reduced with a
//! lexicographic minimum, so the path length is that of the shortest
//! minimum-cost warping path. The cost itself is the classic recurrence
//! `D(i,j) = d(a_i, b_j) + min(D(i-1,j), D(i,j-1), D(i-1,j-1))` with
//! `D(0,0) = 0` and an infinite boundary. Because every cell is a pure
//! function of its neighbours, the row orientation of the table does not
//! change a single bit of the result.

use std::ops::Range;

use crate::error::{Error, Result};
use crate::types::FeatureVector;

/// Euclidean distance between two equal-length vectors.
pub fn pointwise_distance(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::DimensionMismatch {
            expected: u.len(),
            got: v.len(),
        });
    }
    Ok(euclidean(u, v))
}

#[inline]
fn euclidean(u: &[f64], v: &[f64]) -> f64 {
    let mut acc = 0.0;
    for (x, y) in u.iter().zip(v) {
        let d = x - y;
        acc += d * d;
    }
    acc.sqrt()
}

/// How an alignment cost is reported.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum CostNormalization {
    /// Raw cumulative distance along the optimal path.
    #[default]
    None,
    /// Cumulative distance divided by the warping-path length.
    PathLength,
}

/// Cost of the optimal warping path and the number of cells on it.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Alignment {
    pub cost: f64,
    pub path_len: usize,
}

impl Alignment {
    pub fn value(&self, norm: CostNormalization) -> f64 {
        match norm {
            CostNormalization::None => self.cost,
            CostNormalization::PathLength => self.cost / self.path_len as f64,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Cell {
    cost: f64,
    len: usize,
}

const ORIGIN: Cell = Cell { cost: 0.0, len: 0 };
const UNREACHABLE: Cell = Cell {
    cost: f64::INFINITY,
    len: 0,
};

#[inline]
fn better(a: Cell, b: Cell) -> Cell {
    if b.cost < a.cost || (b.cost == a.cost && b.len < a.len) {
        b
    } else {
        a
    }
}

/// Fills one DP row. `prev` is the row above (with its boundary cell at 0).
#[inline]
fn fill_row(prev: &[Cell], cur: &mut [Cell], step: &[f64], reference: &[FeatureVector]) {
    cur[0] = UNREACHABLE;
    for j in 1..cur.len() {
        let best = better(better(prev[j - 1], prev[j]), cur[j - 1]);
        cur[j] = Cell {
            cost: euclidean(step, &reference[j - 1]) + best.cost,
            len: best.len + 1,
        };
    }
}

fn check_pair(a: &[FeatureVector], b: &[FeatureVector]) -> Result<()> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Empty("DTW needs two non-empty sequences".into()));
    }
    let dim = a[0].len();
    for v in a.iter().chain(b) {
        if v.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: v.len(),
            });
        }
    }
    Ok(())
}

/// Optimal alignment of `a` and `b` in `O(|a||b|)` time and
/// `O(min(|a|,|b|))` memory.
pub fn dtw_alignment(a: &[FeatureVector], b: &[FeatureVector]) -> Result<Alignment> {
    check_pair(a, b)?;
    let (rows, cols) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let mut prev = vec![UNREACHABLE; cols.len() + 1];
    prev[0] = ORIGIN;
    let mut cur = vec![UNREACHABLE; cols.len() + 1];
    for step in rows {
        fill_row(&prev, &mut cur, step, cols);
        std::mem::swap(&mut prev, &mut cur);
    }
    let last = prev[cols.len()];
    Ok(Alignment {
        cost: last.cost,
        path_len: last.len,
    })
}

/// Unnormalized DTW alignment cost.
pub fn dtw_cost(a: &[FeatureVector], b: &[FeatureVector]) -> Result<f64> {
    dtw_alignment(a, b).map(|al| al.cost)
}

pub fn dtw(a: &[FeatureVector], b: &[FeatureVector], norm: CostNormalization) -> Result<f64> {
    dtw_alignment(a, b).map(|al| al.value(norm))
}

/// Alignment of a growing sequence against a fixed reference.
///
/// Each [`PrefixDtw::push`] adds one element to the query and returns the
/// alignment of the whole query so far, bit-identical to [`dtw_alignment`]
/// on the same inputs, at `O(|reference|)` cost per push.
#[derive(Debug, Clone)]
pub struct PrefixDtw<'a> {
    reference: &'a [FeatureVector],
    prev: Vec<Cell>,
    cur: Vec<Cell>,
    pushed: usize,
}

impl<'a> PrefixDtw<'a> {
    pub fn new(reference: &'a [FeatureVector]) -> Result<Self> {
        if reference.is_empty() {
            return Err(Error::Empty("DTW reference sequence".into()));
        }
        let mut prev = vec![UNREACHABLE; reference.len() + 1];
        prev[0] = ORIGIN;
        Ok(Self {
            reference,
            cur: prev.clone(),
            prev,
            pushed: 0,
        })
    }

    pub fn push(&mut self, step: &[f64]) -> Result<Alignment> {
        let dim = self.reference[0].len();
        if step.len() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                got: step.len(),
            });
        }
        fill_row(&self.prev, &mut self.cur, step, self.reference);
        std::mem::swap(&mut self.prev, &mut self.cur);
        self.pushed += 1;
        let last = self.prev[self.reference.len()];
        Ok(Alignment {
            cost: last.cost,
            path_len: last.len,
        })
    }

    /// Number of query elements pushed so far.
    pub fn len(&self) -> usize {
        self.pushed
    }

    pub fn is_empty(&self) -> bool {
        self.pushed == 0
    }
}

/// Pairwise distances between a query and a reference, row-major by query
/// index. Alignments of any pair of contiguous windows can then be computed
/// without touching the feature vectors again.
#[derive(Debug, Clone, Default)]
pub struct DistanceMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DistanceMatrix {
    pub fn new(query: &[FeatureVector], reference: &[FeatureVector]) -> Result<Self> {
        let mut m = Self::default();
        m.fill(query, reference)?;
        Ok(m)
    }

    /// Recomputes in place, reusing the allocation.
    pub fn fill(&mut self, query: &[FeatureVector], reference: &[FeatureVector]) -> Result<()> {
        check_pair(query, reference)?;
        self.rows = query.len();
        self.cols = reference.len();
        self.data.clear();
        for q in query {
            self.data.extend(reference.iter().map(|r| euclidean(q, r)));
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    fn row(&self, i: usize, cols: &Range<usize>) -> &[f64] {
        &self.data[i * self.cols + cols.start..i * self.cols + cols.end]
    }

    /// Alignment of `query[rows]` with `reference[cols]`, bit-identical to
    /// [`dtw_alignment`] on the same slices. Both ranges must be non-empty.
    pub fn window_alignment(
        &self,
        rows: Range<usize>,
        cols: Range<usize>,
        scratch: &mut WindowScratch,
    ) -> Alignment {
        debug_assert!(!rows.is_empty() && !cols.is_empty());
        debug_assert!(rows.end <= self.rows && cols.end <= self.cols);
        let width = cols.len() + 1;
        let (prev, cur) = (&mut scratch.prev, &mut scratch.cur);
        prev.clear();
        prev.resize(width, UNREACHABLE);
        prev[0] = ORIGIN;
        cur.clear();
        cur.resize(width, UNREACHABLE);
        for i in rows {
            fill_row_dist(prev, cur, self.row(i, &cols));
            std::mem::swap(prev, cur);
        }
        let last = prev[width - 1];
        Alignment {
            cost: last.cost,
            path_len: last.len,
        }
    }
}

/// Reusable DP rows for [`DistanceMatrix::window_alignment`].
#[derive(Debug, Clone, Default)]
pub struct WindowScratch {
    prev: Vec<Cell>,
    cur: Vec<Cell>,
}

/// Growing query prefix against a fixed reference window, over a [`DistanceMatrix`].
#[derive(Debug, Clone)]
pub struct MatrixPrefix {
    cols: Range<usize>,
    prev: Vec<Cell>,
    cur: Vec<Cell>,
    next_row: usize,
}

impl MatrixPrefix {
    pub fn new(cols: Range<usize>) -> Self {
        let mut prev = vec![UNREACHABLE; cols.len() + 1];
        prev[0] = ORIGIN;
        Self {
            cur: prev.clone(),
            prev,
            cols,
            next_row: 0,
        }
    }

    /// Consumes the next query row; same result as [`PrefixDtw::push`].
    pub fn push(&mut self, m: &DistanceMatrix) -> Alignment {
        fill_row_dist(&self.prev, &mut self.cur, m.row(self.next_row, &self.cols));
        std::mem::swap(&mut self.prev, &mut self.cur);
        self.next_row += 1;
        let last = self.prev[self.cols.len()];
        Alignment {
            cost: last.cost,
            path_len: last.len,
        }
    }
}

#[inline]
fn fill_row_dist(prev: &[Cell], cur: &mut [Cell], dist: &[f64]) {
    cur[0] = UNREACHABLE;
    let mut left = UNREACHABLE;
    let mut diag = prev[0];
    for ((c, &up), &d) in cur[1..].iter_mut().zip(&prev[1..]).zip(dist) {
        let best = better(better(diag, up), left);
        left = Cell {
            cost: d + best.cost,
            len: best.len + 1,
        };
        *c = left;
        diag = up;
    }
}
