//! Quasi-cyclic LDPC codes.
//!
//! A code is a small protograph (base matrix) whose non-zero entries are
//! replaced by `lift x lift` circulant permutation matrices. Row `r * lift + i`
//! of the expanded parity-check matrix has a one in column
//! `c * lift + (i + shift) % lift` for every base entry `(r, c, shift)`.
//!
//! The family used for reconciliation is built deterministically, so both nodes
//! derive bit-identical parity-check matrices from the same construction seed.
//! It can also be written to and read from a plain-text shift-index file.

use std::fmt::Write as _;
use std::str::FromStr;

use rand::{RngExt, SeedableRng};
use rand_pcg::Pcg64Mcg;

use crate::bits::BitVec;

use super::EcError;

/// One circulant block of the protograph.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BaseEntry {
    pub row: usize,
    pub col: usize,
    pub shift: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LdpcCode {
    rate: f64,
    lift: usize,
    base_rows: usize,
    base_cols: usize,
    /// Sorted by (row, col).
    entries: Vec<BaseEntry>,
    /// Index range into `entries` for each base row.
    row_ranges: Vec<(usize, usize)>,
    /// Fixed pseudo-random order in which codeword positions are shortened.
    shorten_order: Vec<u32>,
}

impl LdpcCode {
    /// Builds a code from explicit protograph entries.
    pub fn from_entries(
        base_rows: usize,
        base_cols: usize,
        lift: usize,
        mut entries: Vec<BaseEntry>,
    ) -> Result<Self, EcError> {
        if lift == 0 || base_rows == 0 || base_cols <= base_rows {
            return Err(EcError::InvalidCode(format!(
                "degenerate dimensions {base_rows}x{base_cols} lift {lift}"
            )));
        }
        entries.sort_by_key(|e| (e.row, e.col));
        for w in entries.windows(2) {
            if w[0].row == w[1].row && w[0].col == w[1].col {
                return Err(EcError::InvalidCode(format!(
                    "duplicate circulant at ({}, {})",
                    w[0].row, w[0].col
                )));
            }
        }
        for e in &entries {
            if e.row >= base_rows || e.col >= base_cols || e.shift >= lift {
                return Err(EcError::InvalidCode(format!("entry out of range: {e:?}")));
            }
        }
        let mut row_ranges = Vec::with_capacity(base_rows);
        let mut start = 0;
        for r in 0..base_rows {
            let end = start + entries[start..].iter().take_while(|e| e.row == r).count();
            if end == start {
                return Err(EcError::InvalidCode(format!("base row {r} is empty")));
            }
            row_ranges.push((start, end));
            start = end;
        }
        let n = base_cols * lift;
        let mut order: Vec<u32> = (0..n as u32).collect();
        // Deterministic Fisher-Yates; the seed only depends on the dimensions.
        let mut rng =
            Pcg64Mcg::seed_from_u64(0x5157_4f52_u64 ^ ((base_rows as u64) << 32) ^ n as u64);
        for i in (1..n).rev() {
            let j = rng.random_range(0..=i);
            order.swap(i, j);
        }
        Ok(LdpcCode {
            rate: 1.0 - base_rows as f64 / base_cols as f64,
            lift,
            base_rows,
            base_cols,
            entries,
            row_ranges,
            shorten_order: order,
        })
    }

    /// Design rate `1 - rows/cols` of the unshortened code.
    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn lift(&self) -> usize {
        self.lift
    }

    pub fn base_rows(&self) -> usize {
        self.base_rows
    }

    pub fn base_cols(&self) -> usize {
        self.base_cols
    }

    /// Codeword length.
    pub fn n(&self) -> usize {
        self.base_cols * self.lift
    }

    /// Syndrome length.
    pub fn m(&self) -> usize {
        self.base_rows * self.lift
    }

    pub fn entries(&self) -> &[BaseEntry] {
        &self.entries
    }

    pub fn row_entries(&self, base_row: usize) -> &[BaseEntry] {
        let (a, b) = self.row_ranges[base_row];
        &self.entries[a..b]
    }

    pub fn edge_count(&self) -> usize {
        self.entries.len() * self.lift
    }

    /// Rate after shortening `shortened` positions: `1 - m / (n - shortened)`.
    pub fn shortened_rate(&self, shortened: usize) -> f64 {
        1.0 - self.m() as f64 / (self.n() - shortened) as f64
    }

    /// Marks the first `count` positions of the shortening order; shortened
    /// positions carry a known zero on both sides.
    pub fn shortening_mask(&self, count: usize) -> BitVec {
        assert!(count <= self.n());
        let mut mask = BitVec::zeros(self.n());
        for &p in &self.shorten_order[..count] {
            mask.set(p as usize, true);
        }
        mask
    }

    /// Scatters `payload` into the unshortened positions of a length-`n` word.
    pub fn embed(&self, payload: &BitVec, mask: &BitVec) -> BitVec {
        assert_eq!(payload.len() + mask.count_ones(), self.n());
        let mut word = BitVec::zeros(self.n());
        let mut k = 0;
        for i in 0..self.n() {
            if !mask.get(i) {
                if payload.get(k) {
                    word.set(i, true);
                }
                k += 1;
            }
        }
        word
    }

    /// Inverse of [`embed`](Self::embed).
    pub fn extract(&self, word: &BitVec, mask: &BitVec) -> BitVec {
        let mut out = BitVec::with_capacity(self.n() - mask.count_ones());
        for i in 0..self.n() {
            if !mask.get(i) {
                out.push(word.get(i));
            }
        }
        out
    }

    /// `H * word` over GF(2).
    pub fn syndrome(&self, word: &BitVec) -> Result<BitVec, EcError> {
        if word.len() != self.n() {
            return Err(EcError::LengthMismatch {
                expected: self.n(),
                actual: word.len(),
            });
        }
        let l = self.lift;
        let mut syn = BitVec::zeros(self.m());
        if l % 64 == 0 {
            let wpb = l / 64;
            let mut rotated = vec![0u64; wpb];
            let mut acc = vec![0u64; wpb];
            for r in 0..self.base_rows {
                acc.iter_mut().for_each(|w| *w = 0);
                for e in self.row_entries(r) {
                    rotate_block(word, e.col * l, l, e.shift, &mut rotated);
                    for (a, b) in acc.iter_mut().zip(&rotated) {
                        *a ^= b;
                    }
                }
                for (k, w) in acc.iter().enumerate() {
                    for b in 0..64 {
                        if (w >> b) & 1 == 1 {
                            syn.set(r * l + k * 64 + b, true);
                        }
                    }
                }
            }
        } else {
            for r in 0..self.base_rows {
                for i in 0..l {
                    let mut parity = false;
                    for e in self.row_entries(r) {
                        parity ^= word.get(e.col * l + (i + e.shift) % l);
                    }
                    if parity {
                        syn.set(r * l + i, true);
                    }
                }
            }
        }
        Ok(syn)
    }

    /// Serialises the protograph as a shift-index table: a header line
    /// `rows cols lift` followed by one line per base row, `-1` marking zero blocks.
    pub fn to_shift_file(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "{} {} {}", self.base_rows, self.base_cols, self.lift);
        for r in 0..self.base_rows {
            let mut row = vec![-1i64; self.base_cols];
            for e in self.row_entries(r) {
                row[e.col] = e.shift as i64;
            }
            let line: Vec<String> = row.iter().map(|v| v.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }
}

impl FromStr for LdpcCode {
    type Err = EcError;

    fn from_str(text: &str) -> Result<Self, Self::Err> {
        let mut lines = text
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'));
        let bad = |msg: &str| EcError::InvalidCode(msg.to_string());
        let header: Vec<usize> = lines
            .next()
            .ok_or_else(|| bad("missing header"))?
            .split_whitespace()
            .map(|t| t.parse().map_err(|_| bad("bad header field")))
            .collect::<Result<_, _>>()?;
        let [rows, cols, lift] = header[..] else {
            return Err(bad("header must be `rows cols lift`"));
        };
        let mut entries = Vec::new();
        for r in 0..rows {
            let line = lines.next().ok_or_else(|| bad("missing base row"))?;
            let vals: Vec<i64> = line
                .split_whitespace()
                .map(|t| t.parse().map_err(|_| bad("bad shift index")))
                .collect::<Result<_, _>>()?;
            if vals.len() != cols {
                return Err(bad("base row has wrong width"));
            }
            for (c, &v) in vals.iter().enumerate() {
                if v >= 0 {
                    entries.push(BaseEntry {
                        row: r,
                        col: c,
                        shift: v as usize,
                    });
                } else if v != -1 {
                    return Err(bad("negative shift other than -1"));
                }
            }
        }
        LdpcCode::from_entries(rows, cols, lift, entries)
    }
}

/// Writes `word[start + (i + shift) % lift]` for `i in 0..lift` into `out`
/// (packed), i.e. the column block rotated left by `shift`.
fn rotate_block(word: &BitVec, start: usize, lift: usize, shift: usize, out: &mut [u64]) {
    for (k, o) in out.iter_mut().enumerate() {
        let i = k * 64;
        let pos = (i + shift) % lift;
        if pos + 64 <= lift {
            *o = word.word_at(start + pos);
        } else {
            let first = lift - pos;
            let lo = word.word_at(start + pos) & ((1u64 << first) - 1);
            let hi = word.word_at(start);
            *o = lo | (hi << first);
        }
    }
}

/// Column-degree profile of a protograph: `deg2` weight-2 columns arranged as
/// a staircase, `spine` columns touching every row, `heavy` columns of weight
/// `heavy_degree`, the rest weight 3.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DegreeProfile {
    pub deg2: usize,
    pub heavy: usize,
    pub heavy_degree: usize,
    pub spine: usize,
}

impl DegreeProfile {
    /// Default profile for a protograph with `rows` base rows.
    pub fn for_rows(rows: usize) -> Self {
        DegreeProfile {
            deg2: rows - 1,
            heavy: (rows / 4).max(1),
            heavy_degree: 7.min(rows),
            spine: 0,
        }
    }
}

/// Construction parameters for a code in the rate-adaptive family.
#[derive(Debug, Clone, Copy)]
pub struct CodeDesign {
    pub base_rows: usize,
    pub base_cols: usize,
    pub lift: usize,
    pub profile: DegreeProfile,
    pub seed: u64,
}

/// Builds the protograph by progressive edge growth, then picks circulant
/// shifts greedily to avoid 4-cycles and as many 6-cycles as possible.
pub fn construct(design: &CodeDesign) -> Result<LdpcCode, EcError> {
    let CodeDesign {
        base_rows: mb,
        base_cols: nb,
        lift,
        profile,
        seed,
    } = *design;
    if profile.deg2 >= mb
        || profile.deg2 + profile.heavy + profile.spine > nb
        || profile.heavy_degree > mb
    {
        return Err(EcError::InvalidCode(format!(
            "profile {profile:?} does not fit {mb}x{nb}"
        )));
    }
    let mut rng = Pcg64Mcg::seed_from_u64(seed);

    // Column degrees: spine and heavy columns first, then weight 3, then the staircase.
    let n_deg2 = profile.deg2;
    let mut degrees = vec![3usize.min(mb); nb];
    for (c, d) in degrees
        .iter_mut()
        .take(profile.spine + profile.heavy)
        .enumerate()
    {
        *d = if c < profile.spine {
            mb
        } else {
            profile.heavy_degree
        };
    }
    let stair_start = nb - n_deg2;
    let mut adj = vec![vec![false; nb]; mb];
    // Staircase: column stair_start + k connects rows k and k + 1.
    for k in 0..n_deg2 {
        adj[k][stair_start + k] = true;
        adj[k + 1][stair_start + k] = true;
    }

    // PEG over the remaining columns, in decreasing degree order.
    let mut row_deg: Vec<usize> = (0..mb)
        .map(|r| adj[r].iter().filter(|&&x| x).count())
        .collect();
    for c in 0..stair_start {
        for _ in 0..degrees[c] {
            let reach = bfs_depths(&adj, c, mb, nb);
            // Prefer rows not yet reachable, otherwise the farthest; break ties by
            // current row degree, then randomly.
            let mut best: Vec<usize> = Vec::new();
            let mut best_key = (0usize, usize::MAX);
            for r in 0..mb {
                if adj[r][c] {
                    continue;
                }
                let depth = reach[r].unwrap_or(usize::MAX / 2);
                let key = (depth, row_deg[r]);
                if best.is_empty()
                    || key.0 > best_key.0
                    || (key.0 == best_key.0 && key.1 < best_key.1)
                {
                    best.clear();
                    best.push(r);
                    best_key = key;
                } else if key == best_key {
                    best.push(r);
                }
            }
            let r = best[rng.random_range(0..best.len())];
            adj[r][c] = true;
            row_deg[r] += 1;
        }
    }

    // Lifting.
    let mut shifts: Vec<Vec<Option<usize>>> = vec![vec![None; nb]; mb];
    for c in 0..nb {
        for r in 0..mb {
            if !adj[r][c] {
                continue;
            }
            let mut best_shift = 0;
            let mut best_cost = usize::MAX;
            for attempt in 0..64 {
                let s = if attempt == 0 && c >= stair_start {
                    0
                } else {
                    rng.random_range(0..lift)
                };
                let cost = cycle_cost(&shifts, r, c, s, lift);
                if cost < best_cost {
                    best_cost = cost;
                    best_shift = s;
                    if cost == 0 {
                        break;
                    }
                }
            }
            shifts[r][c] = Some(best_shift);
        }
    }

    let mut entries = Vec::new();
    for (r, row) in shifts.iter().enumerate() {
        for (c, s) in row.iter().enumerate() {
            if let Some(shift) = *s {
                entries.push(BaseEntry {
                    row: r,
                    col: c,
                    shift,
                });
            }
        }
    }
    LdpcCode::from_entries(mb, nb, lift, entries)
}

/// BFS depth (in check-node hops) from column `c` to every row.
fn bfs_depths(adj: &[Vec<bool>], c: usize, mb: usize, nb: usize) -> Vec<Option<usize>> {
    let mut row_depth = vec![None; mb];
    let mut col_seen = vec![false; nb];
    col_seen[c] = true;
    let mut frontier_cols = vec![c];
    let mut depth = 0;
    while !frontier_cols.is_empty() {
        let mut next_rows = Vec::new();
        for &cc in &frontier_cols {
            for r in 0..mb {
                if adj[r][cc] && row_depth[r].is_none() {
                    row_depth[r] = Some(depth);
                    next_rows.push(r);
                }
            }
        }
        let mut next_cols = Vec::new();
        for &r in &next_rows {
            for cc in 0..nb {
                if adj[r][cc] && !col_seen[cc] {
                    col_seen[cc] = true;
                    next_cols.push(cc);
                }
            }
        }
        frontier_cols = next_cols;
        depth += 1;
    }
    row_depth
}

/// Weighted count of 4- and 6-cycles that placing shift `s` at `(r, c)` closes.
fn cycle_cost(shifts: &[Vec<Option<usize>>], r: usize, c: usize, s: usize, lift: usize) -> usize {
    let l = lift as i64;
    let md = |x: i64| x.rem_euclid(l);
    let mb = shifts.len();
    let nb = shifts[0].len();
    let mut cost = 0;
    // 4-cycles: (r,c) - (r,c2) - (r2,c2) - (r2,c).
    for c2 in 0..nb {
        let Some(a) = shifts[r][c2] else { continue };
        if c2 == c {
            continue;
        }
        for r2 in 0..mb {
            if r2 == r {
                continue;
            }
            let (Some(b), Some(d)) = (shifts[r2][c2], shifts[r2][c]) else {
                continue;
            };
            if md(s as i64 - a as i64 + b as i64 - d as i64) == 0 {
                cost += 1000;
            }
        }
    }
    // 6-cycles: (r,c) - (r,c2) - (r2,c2) - (r2,c3) - (r3,c3) - (r3,c).
    for c2 in 0..nb {
        if c2 == c {
            continue;
        }
        let Some(a) = shifts[r][c2] else { continue };
        for r2 in 0..mb {
            if r2 == r {
                continue;
            }
            let Some(b) = shifts[r2][c2] else { continue };
            for c3 in 0..nb {
                if c3 == c || c3 == c2 {
                    continue;
                }
                let Some(d) = shifts[r2][c3] else { continue };
                for r3 in 0..mb {
                    if r3 == r || r3 == r2 {
                        continue;
                    }
                    let (Some(e), Some(f)) = (shifts[r3][c3], shifts[r3][c]) else {
                        continue;
                    };
                    let sum = s as i64 - a as i64 + b as i64 - d as i64 + e as i64 - f as i64;
                    if md(sum) == 0 {
                        cost += 1;
                    }
                }
            }
        }
    }
    cost
}
