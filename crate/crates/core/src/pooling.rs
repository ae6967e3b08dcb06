//! Space-time grid cells, average pooling of per-descriptor encodings into
//! cells, and the representation-size calculator.
//!
//! Cells of one grid are ordered x-fastest, then y, then t. Grids of a
//! pyramid are concatenated in the order they are listed.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::Location;
use crate::error::{Error, Result};

/// One `kx × ky × l` partition of the unit cube.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct GridSpec {
    pub kx: usize,
    pub ky: usize,
    pub l: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIndex {
    pub ix: usize,
    pub iy: usize,
    pub it: usize,
}

fn axis_cell(coord: f64, divisions: usize) -> usize {
    // Truncation saturates negatives at 0; the upper boundary clamps into the last cell.
    ((coord * divisions as f64).floor() as usize).min(divisions - 1)
}

impl GridSpec {
    pub fn new(kx: usize, ky: usize, l: usize) -> Result<Self> {
        if kx == 0 || ky == 0 || l == 0 {
            return Err(Error::InvalidConfig(format!(
                "grid {kx}x{ky}x{l} needs positive divisions"
            )));
        }
        Ok(Self { kx, ky, l })
    }

    pub const fn trivial() -> Self {
        Self { kx: 1, ky: 1, l: 1 }
    }

    pub fn cells(&self) -> usize {
        self.kx * self.ky * self.l
    }

    pub fn cell_of(&self, loc: Location) -> CellIndex {
        CellIndex {
            ix: axis_cell(loc.u, self.kx),
            iy: axis_cell(loc.v, self.ky),
            it: axis_cell(loc.w, self.l),
        }
    }

    pub fn cell_linear_index(&self, c: CellIndex) -> Result<usize> {
        if c.ix >= self.kx || c.iy >= self.ky || c.it >= self.l {
            return Err(Error::InvalidConfig(format!(
                "cell ({}, {}, {}) outside grid {self}",
                c.ix, c.iy, c.it
            )));
        }
        Ok(c.ix + self.kx * (c.iy + self.ky * c.it))
    }

    fn linear_cell_of(&self, loc: Location) -> usize {
        let c = self.cell_of(loc);
        c.ix + self.kx * (c.iy + self.ky * c.it)
    }
}

impl fmt::Display for GridSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.kx, self.ky, self.l)
    }
}

impl FromStr for GridSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(['x', 'X']).collect();
        let bad = || Error::InvalidConfig(format!("grid {s:?} is not of the form KXxKYxL"));
        if parts.len() != 3 {
            return Err(bad());
        }
        let n: Vec<usize> = parts
            .iter()
            .map(|p| p.trim().parse::<usize>().map_err(|_| bad()))
            .collect::<Result<_>>()?;
        GridSpec::new(n[0], n[1], n[2])
    }
}

/// Ordered list of grids; pooled cells are the union of all grid cells.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct PyramidSpec {
    grids: Vec<GridSpec>,
}

impl PyramidSpec {
    pub fn new(grids: Vec<GridSpec>) -> Result<Self> {
        if grids.is_empty() {
            return Err(Error::InvalidConfig("pyramid needs at least one grid".into()));
        }
        Ok(Self { grids })
    }

    /// The single whole-video cell.
    pub fn trivial() -> Self {
        Self {
            grids: vec![GridSpec::trivial()],
        }
    }

    /// `{1x1xl, 2x2xl}`: the one- and two-by-two spatial layouts at one temporal level.
    pub fn stp_single(l: usize) -> Result<Self> {
        Self::new(vec![GridSpec::new(1, 1, l)?, GridSpec::new(2, 2, l)?])
    }

    /// Union of [`stp_single`](Self::stp_single) over temporal levels 1, 2, 4, … up to `l`.
    pub fn stp_pyramid(l: usize) -> Result<Self> {
        if !l.is_power_of_two() {
            return Err(Error::InvalidConfig(format!(
                "temporal pyramid depth {l} must be a power of two"
            )));
        }
        let mut grids = Vec::new();
        let mut level = 1;
        while level <= l {
            grids.extend(Self::stp_single(level)?.grids);
            level *= 2;
        }
        Self::new(grids)
    }

    pub fn grids(&self) -> &[GridSpec] {
        &self.grids
    }

    pub fn total_cells(&self) -> usize {
        self.grids.iter().map(GridSpec::cells).sum()
    }

    pub fn is_trivial(&self) -> bool {
        self.total_cells() == 1
    }

    /// Pyramid-wide index of the cell `loc` falls into, one per grid.
    pub fn cells_of(&self, loc: Location) -> impl Iterator<Item = usize> + '_ {
        self.grids.iter().scan(0usize, move |offset, g| {
            let idx = *offset + g.linear_cell_of(loc);
            *offset += g.cells();
            Some(idx)
        })
    }
}

impl fmt::Display for PyramidSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let items: Vec<String> = self.grids.iter().map(GridSpec::to_string).collect();
        f.write_str(&items.join(","))
    }
}

impl FromStr for PyramidSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let grids = s
            .split(',')
            .filter(|p| !p.trim().is_empty())
            .map(str::parse)
            .collect::<Result<Vec<GridSpec>>>()?;
        Self::new(grids)
    }
}

impl TryFrom<String> for PyramidSpec {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<PyramidSpec> for String {
    fn from(p: PyramidSpec) -> String {
        p.to_string()
    }
}

/// Running per-cell sums for average pooling.
#[derive(Debug, Clone)]
pub struct CellAccumulator<'a> {
    pyramid: &'a PyramidSpec,
    block_len: usize,
    sums: Vec<f64>,
    counts: Vec<usize>,
}

impl<'a> CellAccumulator<'a> {
    pub fn new(pyramid: &'a PyramidSpec, block_len: usize) -> Self {
        let cells = pyramid.total_cells();
        Self {
            pyramid,
            block_len,
            sums: vec![0.0; cells * block_len],
            counts: vec![0; cells],
        }
    }

    pub fn add(&mut self, loc: Location, block: &[f64]) -> Result<()> {
        if block.len() != self.block_len {
            return Err(Error::DimensionMismatch {
                expected: self.block_len,
                actual: block.len(),
            });
        }
        for cell in self.pyramid.cells_of(loc) {
            self.counts[cell] += 1;
            let dst = &mut self.sums[cell * self.block_len..(cell + 1) * self.block_len];
            for (d, &b) in dst.iter_mut().zip(block) {
                *d += b;
            }
        }
        Ok(())
    }

    /// Divides every cell by its member count; empty cells stay zero.
    pub fn finish(mut self) -> PooledCells {
        for (cell, &n) in self.counts.iter().enumerate() {
            if n > 0 {
                let inv = n as f64;
                for v in &mut self.sums[cell * self.block_len..(cell + 1) * self.block_len] {
                    *v /= inv;
                }
            }
        }
        PooledCells {
            values: self.sums,
            counts: self.counts,
            block_len: self.block_len,
        }
    }
}

/// Average-pooled cells before normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct PooledCells {
    /// Cell blocks concatenated in canonical cell order.
    pub values: Vec<f64>,
    /// Member count per cell.
    pub counts: Vec<usize>,
    pub block_len: usize,
}

impl PooledCells {
    pub fn cell(&self, j: usize) -> &[f64] {
        &self.values[j * self.block_len..(j + 1) * self.block_len]
    }
}

/// Averages `contributions` into the cells of `pyramid` by descriptor location.
pub fn pooled_encode<B: AsRef<[f64]>>(
    contributions: &[B],
    locations: &[Location],
    pyramid: &PyramidSpec,
) -> Result<PooledCells> {
    if contributions.len() != locations.len() {
        return Err(Error::DimensionMismatch {
            expected: contributions.len(),
            actual: locations.len(),
        });
    }
    let block_len = contributions.first().map_or(0, |b| b.as_ref().len());
    let mut acc = CellAccumulator::new(pyramid, block_len);
    for (b, &loc) in contributions.iter().zip(locations) {
        acc.add(loc, b.as_ref())?;
    }
    Ok(acc.finish())
}

/// Shape of an encoding: what was pooled and how wide each cell is.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncodingLayout {
    pub pyramid: PyramidSpec,
    /// Mixture components per channel.
    pub k: usize,
    /// Descriptor dimension entering the mixture, per channel (includes the
    /// appended location when `sted` is set).
    pub dim: usize,
    pub channels: usize,
    pub sted: bool,
}

impl EncodingLayout {
    pub fn len(&self) -> usize {
        self.channels * self.pyramid.total_cells() * 2 * self.k * self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Fixed-length video representation.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoding {
    pub values: Vec<f64>,
    pub layout: EncodingLayout,
}

impl VideoEncoding {
    pub fn new(values: Vec<f64>, layout: EncodingLayout) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                expected: layout.len(),
                actual: values.len(),
            });
        }
        Ok(Self { values, layout })
    }
}

/// Length of the encoding: `channels · cells · 2 · K · (dim + 3·sted)`.
///
/// With `sted` the pyramid does not enter: location is encoded per descriptor
/// and the video is pooled into one cell.
pub fn representation_dim(
    dim: u64,
    k: u64,
    pyramid: &PyramidSpec,
    sted: bool,
    channels: u64,
) -> u64 {
    let (cells, dim) = if sted {
        (1, dim + 3)
    } else {
        (pyramid.total_cells() as u64, dim)
    };
    channels * cells * 2 * k * dim
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn loc(u: f64, v: f64, w: f64) -> Location {
        Location::new(u, v, w)
    }

    #[test]
    fn cell_of_examples() {
        let g = GridSpec::new(2, 2, 2).unwrap();
        assert_eq!(g.cell_of(loc(0.6, 0.2, 0.9)), CellIndex { ix: 1, iy: 0, it: 1 });
        assert_eq!(g.cell_of(loc(1.0, 1.0, 1.0)), CellIndex { ix: 1, iy: 1, it: 1 });
        let g = GridSpec::new(3, 5, 7).unwrap();
        assert_eq!(g.cell_of(loc(1.0, 1.0, 1.0)), CellIndex { ix: 2, iy: 4, it: 6 });
        let t = GridSpec::trivial();
        for l in [loc(0.0, 0.0, 0.0), loc(0.3, 0.99, 1.0)] {
            assert_eq!(t.cell_of(l), CellIndex { ix: 0, iy: 0, it: 0 });
        }
    }

    #[test]
    fn linear_index_examples() {
        let g = GridSpec::new(2, 2, 2).unwrap();
        assert_eq!(g.cell_linear_index(CellIndex { ix: 0, iy: 0, it: 0 }).unwrap(), 0);
        assert_eq!(g.cell_linear_index(CellIndex { ix: 1, iy: 0, it: 1 }).unwrap(), 5);
        let g = GridSpec::new(3, 4, 5).unwrap();
        assert_eq!(
            g.cell_linear_index(CellIndex { ix: 2, iy: 3, it: 4 }).unwrap(),
            59
        );
        assert!(g.cell_linear_index(CellIndex { ix: 3, iy: 0, it: 0 }).is_err());
    }

    #[test]
    fn pyramid_offsets_concatenate_grids() {
        let p: PyramidSpec = "1x1x1,2x2x2".parse().unwrap();
        let cells: Vec<usize> = p.cells_of(loc(0.6, 0.2, 0.9)).collect();
        assert_eq!(cells, vec![0, 1 + 5]);
    }

    #[test]
    fn pyramid_text_form() {
        let p: PyramidSpec = "1x1x1,2x2x1,1x1x2,2x2x2".parse().unwrap();
        assert_eq!(p.total_cells(), 1 + 4 + 2 + 8);
        assert_eq!(p.to_string(), "1x1x1,2x2x1,1x1x2,2x2x2");
        assert!("".parse::<PyramidSpec>().is_err());
        assert!("2x2".parse::<PyramidSpec>().is_err());
        assert!("0x1x1".parse::<PyramidSpec>().is_err());
        let json = serde_json::to_string(&p).unwrap();
        assert_eq!(json, "\"1x1x1,2x2x1,1x1x2,2x2x2\"");
    }

    #[test]
    fn stp_constructors() {
        assert_eq!(PyramidSpec::stp_single(1).unwrap().total_cells(), 5);
        assert_eq!(PyramidSpec::stp_single(8).unwrap().total_cells(), 40);
        assert_eq!(PyramidSpec::stp_pyramid(1).unwrap().total_cells(), 5);
        assert_eq!(PyramidSpec::stp_pyramid(2).unwrap().total_cells(), 15);
        assert_eq!(PyramidSpec::stp_pyramid(8).unwrap().total_cells(), 75);
        assert!(PyramidSpec::stp_pyramid(3).is_err());
    }

    #[test]
    fn pooled_single_cell_is_mean() {
        let blocks = vec![vec![1.0, 2.0], vec![3.0, -2.0], vec![2.0, 3.0]];
        let locs = vec![loc(0.1, 0.1, 0.1), loc(0.9, 0.9, 0.9), loc(0.5, 0.5, 0.5)];
        let pooled = pooled_encode(&blocks, &locs, &PyramidSpec::trivial()).unwrap();
        assert_eq!(pooled.values, vec![2.0, 1.0]);
        assert_eq!(pooled.counts, vec![3]);
    }

    #[test]
    fn pooled_separate_cells_and_empty_cells() {
        let blocks = vec![vec![1.0], vec![5.0]];
        let locs = vec![loc(0.1, 0.5, 0.5), loc(0.9, 0.5, 0.5)];
        let p: PyramidSpec = "2x1x1".parse().unwrap();
        let pooled = pooled_encode(&blocks, &locs, &p).unwrap();
        assert_eq!(pooled.values, vec![1.0, 5.0]);

        let p: PyramidSpec = "4x1x1".parse().unwrap();
        let pooled = pooled_encode(&blocks, &locs, &p).unwrap();
        assert_eq!(pooled.values, vec![1.0, 0.0, 0.0, 5.0]);
        assert_eq!(pooled.counts, vec![1, 0, 0, 1]);

        assert!(pooled_encode(&blocks, &locs[..1], &p).is_err());
    }

    #[test]
    fn representation_dim_examples() {
        let stp: PyramidSpec = "1x1x1,1x1x3,2x2x1,2x2x3".parse().unwrap();
        assert_eq!(stp.total_cells(), 20);
        assert_eq!(representation_dim(426, 256, &stp, false, 1), 4_362_240);
        let sted = representation_dim(426, 256, &PyramidSpec::trivial(), true, 1);
        assert_eq!(sted, 219_648);
        assert!((4_362_240.0 / sted as f64 - 19.86).abs() < 0.005);
        assert_eq!(representation_dim(1, 1, &PyramidSpec::trivial(), false, 1), 2);
        assert_eq!(representation_dim(1, 1, &PyramidSpec::trivial(), false, 3), 6);
    }

    fn arb_grid() -> impl Strategy<Value = GridSpec> {
        (1usize..5, 1usize..5, 1usize..9).prop_map(|(kx, ky, l)| GridSpec { kx, ky, l })
    }

    proptest! {
        #[test]
        fn cell_of_is_in_range_and_monotone(
            g in arb_grid(),
            u in 0.0f64..=1.0, v in 0.0f64..=1.0, w in 0.0f64..=1.0,
            du in 0.0f64..=1.0,
        ) {
            let c = g.cell_of(loc(u, v, w));
            prop_assert!(c.ix < g.kx && c.iy < g.ky && c.it < g.l);
            let j = g.cell_linear_index(c).unwrap();
            prop_assert!(j < g.cells());
            let u2 = (u + du).min(1.0);
            prop_assert!(g.cell_of(loc(u2, v, w)).ix >= c.ix);
        }

        #[test]
        fn pooling_is_permutation_invariant(
            g in arb_grid(),
            pts in prop::collection::vec((0.0f64..=1.0, 0.0f64..=1.0, 0.0f64..=1.0, -3.0f64..3.0), 1..30),
        ) {
            let p = PyramidSpec::new(vec![g]).unwrap();
            let locs: Vec<Location> = pts.iter().map(|&(u, v, w, _)| loc(u, v, w)).collect();
            let blocks: Vec<Vec<f64>> = pts.iter().map(|&(_, _, _, b)| vec![b, b * b]).collect();
            let fwd = pooled_encode(&blocks, &locs, &p).unwrap();
            let rl: Vec<Location> = locs.iter().rev().copied().collect();
            let rb: Vec<Vec<f64>> = blocks.iter().rev().cloned().collect();
            let rev = pooled_encode(&rb, &rl, &p).unwrap();
            prop_assert_eq!(fwd.counts.iter().sum::<usize>(), pts.len());
            prop_assert_eq!(&fwd.counts, &rev.counts);
            for (a, b) in fwd.values.iter().zip(&rev.values) {
                prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
            }
        }
    }
}
