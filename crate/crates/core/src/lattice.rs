//! Torus geometry, site indexing and binary opinion configurations.
//!
//! Sites of the `L x L x L` torus are indexed x-fastest:
//! `index = x + L*y + L*L*z`. Neighbor tables are precomputed for every site
//! so that the simulation loops never do modular arithmetic.

use std::fmt::Write as _;
use std::sync::Arc;

use num_rational::Ratio;
use thiserror::Error;

/// An integer displacement on the lattice.
pub type Offset = [i32; 3];

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LatticeError {
    #[error("side length must be at least 2, got {0}")]
    SideTooSmall(usize),
    #[error("neighborhood needs at least 3 offsets, got {0}")]
    TooFewOffsets(usize),
    #[error("the zero vector cannot be a neighbor offset")]
    ZeroOffset,
    #[error("duplicate neighbor offset {0:?}")]
    DuplicateOffset(Offset),
    #[error("neighbor offsets span a rank-{0} sublattice; rank 3 is required")]
    RankDeficient(usize),
    #[error("site index {site} out of range for a lattice with {n} sites")]
    SiteOutOfRange { site: usize, n: usize },
    #[error("configuration length {got} does not match lattice size {expected}")]
    SizeMismatch { expected: usize, got: usize },
    #[error("malformed snapshot: {0}")]
    Snapshot(String),
}

/// The six nearest-neighbor offsets `±e1, ±e2, ±e3`.
pub fn nearest_neighbor_offsets() -> Vec<Offset> {
    vec![
        [1, 0, 0],
        [-1, 0, 0],
        [0, 1, 0],
        [0, -1, 0],
        [0, 0, 1],
        [0, 0, -1],
    ]
}

/// The three unit vectors `e1, e2, e3`.
pub fn unit_offsets() -> Vec<Offset> {
    vec![[1, 0, 0], [0, 1, 0], [0, 0, 1]]
}

/// Rank of the integer span of `vectors`, by fraction-free elimination.
pub fn integer_rank(vectors: &[Offset]) -> usize {
    let mut rows: Vec<[i64; 3]> = vectors
        .iter()
        .map(|v| [v[0] as i64, v[1] as i64, v[2] as i64])
        .collect();
    let mut rank = 0;
    for col in 0..3 {
        let Some(pivot) = (rank..rows.len()).find(|&r| rows[r][col] != 0) else {
            continue;
        };
        rows.swap(rank, pivot);
        let p = rows[rank];
        for r in (rank + 1)..rows.len() {
            let f = rows[r][col];
            if f != 0 {
                for c in 0..3 {
                    rows[r][c] = rows[r][c] * p[col] - p[c] * f;
                }
                // keep entries small
                let g = rows[r].iter().fold(0i64, |g, &x| gcd(g, x.abs()));
                if g > 1 {
                    rows[r].iter_mut().for_each(|x| *x /= g);
                }
            }
        }
        rank += 1;
    }
    rank
}

fn gcd(a: i64, b: i64) -> i64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Geometry of the periodic 3-d lattice together with a neighborhood.
///
/// The neighborhood must generate all of `Z^3` for the voter-model theory to
/// apply. Only rank 3 is checked here; unimodularity of the span is left to
/// the caller.
#[derive(Debug, Clone)]
pub struct TorusLattice {
    side: usize,
    n: usize,
    offsets: Vec<Offset>,
    neighbors: Vec<u32>,
    in_neighbors: Vec<u32>,
    symmetric: bool,
}

impl TorusLattice {
    pub fn new(side: usize, offsets: Vec<Offset>) -> Result<Self, LatticeError> {
        if side < 2 {
            return Err(LatticeError::SideTooSmall(side));
        }
        if offsets.len() < 3 {
            return Err(LatticeError::TooFewOffsets(offsets.len()));
        }
        if offsets.contains(&[0, 0, 0]) {
            return Err(LatticeError::ZeroOffset);
        }
        for (i, o) in offsets.iter().enumerate() {
            if offsets[..i].contains(o) {
                return Err(LatticeError::DuplicateOffset(*o));
            }
        }
        let rank = integer_rank(&offsets);
        if rank < 3 {
            return Err(LatticeError::RankDeficient(rank));
        }

        let n = side * side * side;
        let k = offsets.len();
        let l = side as i64;
        let mut neighbors = Vec::with_capacity(n * k);
        let mut in_neighbors = Vec::with_capacity(n * k);
        for site in 0..n {
            let c = coords_of(side, site);
            for sign in [1i64, -1] {
                let table = if sign == 1 {
                    &mut neighbors
                } else {
                    &mut in_neighbors
                };
                for o in &offsets {
                    let mut idx = 0usize;
                    let mut stride = 1usize;
                    for d in 0..3 {
                        let v = (c[d] as i64 + sign * o[d] as i64).rem_euclid(l) as usize;
                        idx += v * stride;
                        stride *= side;
                    }
                    table.push(idx as u32);
                }
            }
        }
        let symmetric = offsets
            .iter()
            .all(|o| offsets.contains(&[-o[0], -o[1], -o[2]]));
        Ok(Self {
            side,
            n,
            offsets,
            neighbors,
            in_neighbors,
            symmetric,
        })
    }

    /// Standard `±e` nearest-neighbor torus (`k = 6`).
    pub fn nearest_neighbor(side: usize) -> Result<Self, LatticeError> {
        Self::new(side, nearest_neighbor_offsets())
    }

    pub fn side(&self) -> usize {
        self.side
    }

    /// Number of sites, `L^3`.
    pub fn n(&self) -> usize {
        self.n
    }

    /// Neighborhood size.
    pub fn k(&self) -> usize {
        self.offsets.len()
    }

    pub fn offsets(&self) -> &[Offset] {
        &self.offsets
    }

    /// True when the offset set is closed under negation.
    pub fn is_symmetric(&self) -> bool {
        self.symmetric
    }

    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        debug_assert!(x < self.side && y < self.side && z < self.side);
        x + self.side * (y + self.side * z)
    }

    pub fn coords(&self, site: usize) -> [usize; 3] {
        coords_of(self.side, site)
    }

    /// Neighbor sites of `site` in offset order, with range checking.
    pub fn neighbors(&self, site: usize) -> Result<&[u32], LatticeError> {
        if site >= self.n {
            return Err(LatticeError::SiteOutOfRange { site, n: self.n });
        }
        Ok(self.neighbor_slice(site))
    }

    /// Unchecked-by-contract variant of [`neighbors`](Self::neighbors) for hot loops.
    /// Panics if `site` is out of range.
    #[inline]
    pub fn neighbor_slice(&self, site: usize) -> &[u32] {
        let k = self.offsets.len();
        &self.neighbors[site * k..(site + 1) * k]
    }

    /// Sites `w` whose neighborhood contains `site`, i.e. `site - offset` for
    /// each offset. Equal to the neighbor list for symmetric neighborhoods
    /// up to ordering.
    #[inline]
    pub fn in_neighbor_slice(&self, site: usize) -> &[u32] {
        let k = self.offsets.len();
        &self.in_neighbors[site * k..(site + 1) * k]
    }

    /// Site reached from `site` by the offset with index `j`.
    #[inline]
    pub fn step(&self, site: usize, j: usize) -> usize {
        self.neighbors[site * self.offsets.len() + j] as usize
    }

    /// Sites lying in the plane `axis = level`, scanned with the remaining
    /// two axes in increasing order (first remaining axis fastest).
    pub fn slice_sites(&self, axis: usize, level: usize) -> Vec<usize> {
        let l = self.side;
        let (a, b) = match axis {
            0 => (1, 2),
            1 => (0, 2),
            _ => (0, 1),
        };
        let mut out = Vec::with_capacity(l * l);
        for j in 0..l {
            for i in 0..l {
                let mut c = [0usize; 3];
                c[axis] = level;
                c[a] = i;
                c[b] = j;
                out.push(self.index(c[0], c[1], c[2]));
            }
        }
        out
    }
}

fn coords_of(side: usize, site: usize) -> [usize; 3] {
    [site % side, (site / side) % side, site / (side * side)]
}

/// A binary opinion field on a torus, bit-packed, with a cached count of ones.
#[derive(Debug, Clone)]
pub struct Configuration {
    lattice: Arc<TorusLattice>,
    words: Vec<u64>,
    ones: usize,
}

impl PartialEq for Configuration {
    fn eq(&self, other: &Self) -> bool {
        self.words == other.words && self.lattice.n == other.lattice.n
    }
}

impl Eq for Configuration {}

impl Configuration {
    pub fn zeros(lattice: Arc<TorusLattice>) -> Self {
        let words = vec![0; lattice.n.div_ceil(64)];
        Self {
            lattice,
            words,
            ones: 0,
        }
    }

    pub fn ones(lattice: Arc<TorusLattice>) -> Self {
        let mut c = Self::zeros(lattice);
        for i in 0..c.lattice.n {
            c.set(i, true);
        }
        c
    }

    pub fn from_fn(lattice: Arc<TorusLattice>, mut f: impl FnMut(usize) -> bool) -> Self {
        let mut c = Self::zeros(lattice);
        for i in 0..c.lattice.n {
            if f(i) {
                c.set(i, true);
            }
        }
        c
    }

    /// Indicator configuration of a site set.
    pub fn indicator(lattice: Arc<TorusLattice>, sites: &[usize]) -> Self {
        let mut c = Self::zeros(lattice);
        for &s in sites {
            c.set(s, true);
        }
        c
    }

    pub fn from_bits(lattice: Arc<TorusLattice>, bits: &[u8]) -> Result<Self, LatticeError> {
        if bits.len() != lattice.n {
            return Err(LatticeError::SizeMismatch {
                expected: lattice.n,
                got: bits.len(),
            });
        }
        Ok(Self::from_fn(lattice, |i| bits[i] != 0))
    }

    pub fn lattice(&self) -> &Arc<TorusLattice> {
        &self.lattice
    }

    #[inline]
    pub fn get(&self, site: usize) -> bool {
        debug_assert!(site < self.lattice.n);
        (self.words[site >> 6] >> (site & 63)) & 1 == 1
    }

    #[inline]
    pub fn set(&mut self, site: usize, value: bool) {
        let old = self.get(site);
        if old != value {
            self.words[site >> 6] ^= 1 << (site & 63);
            if value {
                self.ones += 1;
            } else {
                self.ones -= 1;
            }
        }
    }

    #[inline]
    pub fn flip(&mut self, site: usize) {
        let v = self.get(site);
        self.set(site, !v);
    }

    pub fn ones_count(&self) -> usize {
        self.ones
    }

    /// Recount set bits from scratch.
    pub fn count_ones_raw(&self) -> usize {
        self.words.iter().map(|w| w.count_ones() as usize).sum()
    }

    pub fn density(&self) -> f64 {
        self.ones as f64 / self.lattice.n as f64
    }

    pub fn to_bits(&self) -> Vec<u8> {
        (0..self.lattice.n).map(|i| self.get(i) as u8).collect()
    }

    /// Number of neighbors of `site` holding the opposite opinion.
    #[inline]
    pub fn discordant_count(&self, site: usize) -> usize {
        let me = self.get(site);
        self.lattice
            .neighbor_slice(site)
            .iter()
            .filter(|&&y| self.get(y as usize) != me)
            .count()
    }

    /// Fraction `f_x` of neighbors with the opposite opinion, as an exact rational.
    pub fn discordant_fraction(&self, site: usize) -> Result<Ratio<usize>, LatticeError> {
        if site >= self.lattice.n {
            return Err(LatticeError::SiteOutOfRange {
                site,
                n: self.lattice.n,
            });
        }
        Ok(Ratio::new(self.discordant_count(site), self.lattice.k()))
    }

    /// Pointwise `self <= other`.
    pub fn le(&self, other: &Configuration) -> bool {
        self.words
            .iter()
            .zip(&other.words)
            .all(|(a, b)| a & !b == 0)
    }

    /// Pointwise maximum.
    pub fn or(&self, other: &Configuration) -> Configuration {
        let words: Vec<u64> = self
            .words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| a | b)
            .collect();
        let ones = words.iter().map(|w| w.count_ones() as usize).sum();
        Configuration {
            lattice: self.lattice.clone(),
            words,
            ones,
        }
    }

    /// Number of sites where the two configurations differ.
    pub fn hamming(&self, other: &Configuration) -> usize {
        self.words
            .iter()
            .zip(&other.words)
            .map(|(a, b)| (a ^ b).count_ones() as usize)
            .sum()
    }

    /// `0 <-> 1` relabeling.
    pub fn complement(&self) -> Configuration {
        Configuration::from_fn(self.lattice.clone(), |i| !self.get(i))
    }
}

/// Header fields of a snapshot file.
#[derive(Debug, Clone, PartialEq)]
pub struct SnapshotHeader {
    pub side: usize,
    pub time: f64,
    pub q: f64,
    pub seed: u64,
}

impl SnapshotHeader {
    fn line(&self) -> String {
        format!("L={} t={} q={} seed={}", self.side, self.time, self.q, self.seed)
    }

    fn parse(line: &str) -> Result<Self, LatticeError> {
        let bad = || LatticeError::Snapshot(format!("bad header {line:?}"));
        let mut side = None;
        let mut time = None;
        let mut q = None;
        let mut seed = None;
        for field in line.split_whitespace() {
            let (key, val) = field.split_once('=').ok_or_else(bad)?;
            match key {
                "L" => side = Some(val.parse().map_err(|_| bad())?),
                "t" => time = Some(val.parse().map_err(|_| bad())?),
                "q" => q = Some(val.parse().map_err(|_| bad())?),
                "seed" => seed = Some(val.parse().map_err(|_| bad())?),
                _ => return Err(bad()),
            }
        }
        Ok(Self {
            side: side.ok_or_else(bad)?,
            time: time.ok_or_else(bad)?,
            q: q.ok_or_else(bad)?,
            seed: seed.ok_or_else(bad)?,
        })
    }
}

/// Render the whole configuration: one line per row of each z-slice
/// (x varies along the line), slices separated by blank lines.
pub fn write_snapshot(config: &Configuration, header: &SnapshotHeader) -> String {
    let l = config.lattice.side;
    let mut out = header.line();
    out.push('\n');
    for z in 0..l {
        if z > 0 {
            out.push('\n');
        }
        for y in 0..l {
            for x in 0..l {
                out.push(if config.get(config.lattice.index(x, y, z)) {
                    '1'
                } else {
                    '0'
                });
            }
            out.push('\n');
        }
    }
    out
}

/// Render a single plane of the configuration in the snapshot format.
pub fn write_slice(config: &Configuration, axis: usize, level: usize, header: &SnapshotHeader) -> String {
    let l = config.lattice.side;
    let sites = config.lattice.slice_sites(axis, level);
    let mut out = String::with_capacity((l + 1) * l + 64);
    let _ = writeln!(out, "{}", header.line());
    for row in sites.chunks(l) {
        for &s in row {
            out.push(if config.get(s) { '1' } else { '0' });
        }
        out.push('\n');
    }
    out
}

/// Parse a full snapshot written by [`write_snapshot`].
pub fn read_snapshot(
    text: &str,
    lattice: Arc<TorusLattice>,
) -> Result<(SnapshotHeader, Configuration), LatticeError> {
    let mut lines = text.lines();
    let header = SnapshotHeader::parse(
        lines
            .next()
            .ok_or_else(|| LatticeError::Snapshot("empty input".into()))?,
    )?;
    let l = lattice.side;
    if header.side != l {
        return Err(LatticeError::Snapshot(format!(
            "header says L={}, lattice has L={l}",
            header.side
        )));
    }
    let rows: Vec<&str> = lines.filter(|s| !s.is_empty()).collect();
    if rows.len() != l * l {
        return Err(LatticeError::Snapshot(format!(
            "expected {} rows, found {}",
            l * l,
            rows.len()
        )));
    }
    let mut config = Configuration::zeros(lattice.clone());
    for (r, row) in rows.iter().enumerate() {
        let (y, z) = (r % l, r / l);
        if row.len() != l {
            return Err(LatticeError::Snapshot(format!("row {r} has wrong length")));
        }
        for (x, ch) in row.chars().enumerate() {
            match ch {
                '0' => {}
                '1' => config.set(lattice.index(x, y, z), true),
                _ => return Err(LatticeError::Snapshot(format!("bad character {ch:?}"))),
            }
        }
    }
    Ok((header, config))
}
