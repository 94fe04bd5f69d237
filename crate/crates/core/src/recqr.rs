//! Recursive thin QR of the free-column submatrix `J_F` with a predicted
//! nonzero pattern.
//!
//! With `F` ascending, column `j` of `Q` can only be nonzero on the isolated
//! top rows of `F_1..F_j` and on the equality rows `nbar(F_1)..B_j`, where
//! `B_j = max(B_{j-1}, end(F_j))`. Gram-Schmidt arithmetic is restricted to
//! those rows, and an inner product `Q_j . J_t` is skipped outright when the
//! two patterns are disjoint. Insertions append by modified Gram-Schmidt and
//! rotate the new column into place; deletions restore triangularity with
//! Givens rotations.

use crate::error::{check_len, Error, Result};
use crate::jac_ops::{ColumnOperator, Support};
use crate::scalar::Scalar;

/// Predicted nonzero pattern of the `Q` factor for a free set.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct StructureSets {
    free: Vec<usize>,
    bmax: Vec<usize>,
    nbar_first: usize,
}

impl StructureSets {
    pub fn empty() -> Self {
        Self::default()
    }

    /// Pattern of an ascending free set `free` (1-based columns).
    pub fn for_free_set<T: Scalar, O: ColumnOperator<T> + ?Sized>(
        op: &O,
        free: &[usize],
    ) -> Result<Self> {
        let n = op.ncols();
        for (k, &c) in free.iter().enumerate() {
            if c == 0 || c > n {
                return Err(Error::ColumnOutOfRange { index: c, n });
            }
            if k > 0 && free[k - 1] >= c {
                return Err(Error::Config("free set must be strictly ascending".into()));
            }
        }
        let supports: Vec<Support> = free.iter().map(|&c| op.support(c)).collect();
        Ok(Self::from_supports(free.to_vec(), &supports))
    }

    fn from_supports(free: Vec<usize>, supports: &[Support]) -> Self {
        let nbar_first = supports.iter().map(|s| s.lo).min().unwrap_or(0);
        let mut bmax = Vec::with_capacity(free.len());
        let mut running = 0;
        for s in supports {
            running = running.max(s.hi);
            bmax.push(running);
        }
        Self {
            free,
            bmax,
            nbar_first,
        }
    }

    /// Ascending free columns (1-based).
    pub fn free(&self) -> &[usize] {
        &self.free
    }

    /// `bmax[j]` is the exclusive end (equivalently the last 1-based row) of
    /// the predicted equality rows of `Q_j`.
    pub fn bmax(&self) -> &[usize] {
        &self.bmax
    }

    /// First equality row covered by any free column, 0-based.
    pub fn nbar_first(&self) -> usize {
        self.nbar_first
    }

    pub fn len(&self) -> usize {
        self.free.len()
    }

    pub fn is_empty(&self) -> bool {
        self.free.is_empty()
    }

    pub fn contains(&self, t: usize) -> bool {
        self.free.binary_search(&t).is_ok()
    }

    /// Pattern after adding column `t`.
    pub fn predict_insert<T: Scalar, O: ColumnOperator<T> + ?Sized>(
        &self,
        op: &O,
        t: usize,
    ) -> Result<Self> {
        let n = op.ncols();
        if t == 0 || t > n {
            return Err(Error::ColumnOutOfRange { index: t, n });
        }
        let pos = match self.free.binary_search(&t) {
            Ok(_) => return Err(Error::AlreadyFree(t)),
            Err(p) => p,
        };
        let mut free = self.free.clone();
        free.insert(pos, t);
        let supports: Vec<Support> = free.iter().map(|&c| op.support(c)).collect();
        Ok(Self::from_supports(free, &supports))
    }

    /// Pattern after removing column `t`.
    pub fn predict_delete<T: Scalar, O: ColumnOperator<T> + ?Sized>(
        &self,
        op: &O,
        t: usize,
    ) -> Result<Self> {
        let pos = self.free.binary_search(&t).map_err(|_| Error::NotFree(t))?;
        let mut free = self.free.clone();
        free.remove(pos);
        let supports: Vec<Support> = free.iter().map(|&c| op.support(c)).collect();
        Ok(Self::from_supports(free, &supports))
    }
}

/// Work counters of a factorization.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct QrStats {
    /// `R` entries set to zero from the pattern alone.
    pub skipped: u64,
    /// `R` entries computed by an inner product.
    pub computed: u64,
    /// Second Gram-Schmidt passes.
    pub reorthogonalizations: u64,
    /// Givens rotations applied.
    pub rotations: u64,
    /// Largest `|Q|` entry found outside the predicted pattern after a
    /// rotation sweep (then cleared).
    pub max_structure_leak: f64,
    /// Entries outside the pattern above roundoff level.
    pub structure_violations: u64,
}

/// Thin QR factors of `J_F` plus `Q' b` for a stored right-hand side.
#[derive(Debug, Clone)]
pub struct ThinQr<T> {
    m: usize,
    s: StructureSets,
    supports: Vec<Support>,
    toprows: Vec<usize>,
    ntop: Vec<usize>,
    q: Vec<Vec<T>>,
    r: Vec<Vec<T>>,
    b: Vec<T>,
    qtb: Vec<T>,
    max_norm: T,
    /// A second Gram-Schmidt pass runs when the norm drops below this
    /// fraction of its value before orthogonalization.
    pub reorth_threshold: T,
    /// Columns whose orthogonal component falls below this multiple of the
    /// largest column norm are rejected as rank deficient.
    pub rank_tol: T,
    stats: QrStats,
}

impl<T: Scalar> ThinQr<T> {
    /// Empty factorization for matrices with `m` rows.
    pub fn new(m: usize) -> Self {
        Self {
            m,
            s: StructureSets::empty(),
            supports: Vec::new(),
            toprows: Vec::new(),
            ntop: Vec::new(),
            q: Vec::new(),
            r: Vec::new(),
            b: vec![T::zero(); m],
            qtb: Vec::new(),
            max_norm: T::zero(),
            reorth_threshold: T::lit(0.5),
            rank_tol: T::lit(1e-13),
            stats: QrStats::default(),
        }
    }

    /// Factorizes `J_F` from scratch, columns in ascending order.
    pub fn factorize<O: ColumnOperator<T> + ?Sized>(op: &O, free: &[usize]) -> Result<Self> {
        StructureSets::for_free_set(op, free)?;
        let mut qr = Self::new(op.nrows());
        for &c in free {
            qr.insert(op, c)?;
        }
        Ok(qr)
    }

    /// Empties the factorization, keeping allocations and counters.
    pub fn clear(&mut self) {
        self.s = StructureSets::empty();
        self.supports.clear();
        self.toprows.clear();
        self.ntop.clear();
        self.q.clear();
        self.r.clear();
        self.qtb.clear();
        self.max_norm = T::zero();
    }

    pub fn nrows(&self) -> usize {
        self.m
    }

    pub fn len(&self) -> usize {
        self.q.len()
    }

    pub fn is_empty(&self) -> bool {
        self.q.is_empty()
    }

    pub fn structure(&self) -> &StructureSets {
        &self.s
    }

    pub fn free(&self) -> &[usize] {
        self.s.free()
    }

    pub fn stats(&self) -> QrStats {
        self.stats
    }

    pub fn reset_stats(&mut self) {
        self.stats = QrStats::default();
    }

    /// Column `j` (0-based position) of `Q`, full length.
    pub fn q_col(&self, j: usize) -> &[T] {
        &self.q[j]
    }

    /// Column `j` of `R`, entries `0..=j`.
    pub fn r_col(&self, j: usize) -> &[T] {
        &self.r[j]
    }

    /// `Q' b` for the stored right-hand side.
    pub fn qtb(&self) -> &[T] {
        &self.qtb
    }

    /// Dense column-major copy of `Q` (`m x |F|`).
    pub fn dense_q(&self) -> Vec<T> {
        self.q.iter().flat_map(|c| c.iter().copied()).collect()
    }

    /// Dense row-major copy of `R` (`|F| x |F|`).
    pub fn dense_r(&self) -> Vec<T> {
        let k = self.len();
        let mut out = vec![T::zero(); k * k];
        for (j, col) in self.r.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                out[i * k + j] = v;
            }
        }
        out
    }

    /// `max |Q'Q - I|`.
    pub fn orthogonality_error(&self) -> T {
        let k = self.len();
        let mut worst = T::zero();
        for i in 0..k {
            for j in i..k {
                let d: T = self.q[i].iter().zip(&self.q[j]).map(|(&a, &b)| a * b).sum();
                let e = if i == j { d - T::one() } else { d };
                worst = worst.max(e.abs());
            }
        }
        worst
    }

    /// Whether 0-based `row` lies in the predicted pattern of `Q_j`.
    pub fn in_pattern(&self, j: usize, row: usize) -> bool {
        (row >= self.s.nbar_first && row < self.s.bmax[j])
            || self.toprows[..self.ntop[j]].binary_search(&row).is_ok()
    }

    /// Number of `Q` entries outside the predicted pattern that are nonzero.
    pub fn count_pattern_violations(&self) -> usize {
        let mut count = 0;
        for j in 0..self.len() {
            for (row, v) in self.q[j].iter().enumerate() {
                if *v != T::zero() && !self.in_pattern(j, row) {
                    count += 1;
                }
            }
        }
        count
    }

    fn qdot(&self, j: usize, v: &[T]) -> T {
        let q = &self.q[j];
        let mut acc = T::zero();
        for &row in &self.toprows[..self.ntop[j]] {
            acc = acc + q[row] * v[row];
        }
        for row in self.s.nbar_first..self.s.bmax[j] {
            acc = acc + q[row] * v[row];
        }
        acc
    }

    fn qaxpy(&self, j: usize, alpha: T, v: &mut [T]) {
        let q = &self.q[j];
        for &row in &self.toprows[..self.ntop[j]] {
            v[row] = v[row] - alpha * q[row];
        }
        for row in self.s.nbar_first..self.s.bmax[j] {
            v[row] = v[row] - alpha * q[row];
        }
    }

    fn disjoint(&self, j: usize, sup: &Support) -> bool {
        let (lo, hi) = (self.s.nbar_first, self.s.bmax[j]);
        let ranges_apart = sup.lo >= sup.hi || hi <= sup.lo || sup.hi <= lo;
        let top_apart = sup.top.map_or(true, |t| t < lo || t >= hi);
        ranges_apart && top_apart
    }

    fn rebuild_layout(&mut self, s: StructureSets) {
        self.s = s;
        self.toprows.clear();
        self.ntop.clear();
        for sup in &self.supports {
            if let Some(t) = sup.top {
                self.toprows.push(t);
            }
            self.ntop.push(self.toprows.len());
        }
    }

    /// Adds column `t` (1-based) of `op` to the free set.
    pub fn insert<O: ColumnOperator<T> + ?Sized>(&mut self, op: &O, t: usize) -> Result<()> {
        if op.nrows() != self.m {
            return Err(Error::Dimension {
                what: "operator rows",
                expected: self.m,
                got: op.nrows(),
            });
        }
        let new_s = self.s.predict_insert(op, t)?;
        let pos = new_s.free.binary_search(&t).unwrap();
        let sup = op.support(t);
        let k = self.len();

        let mut v = vec![T::zero(); self.m];
        op.scatter(t, T::one(), &mut v);
        let norm0 = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        let mut coef = vec![T::zero(); k + 1];

        let mut skipping = true;
        for j in 0..k {
            if skipping && self.disjoint(j, &sup) {
                self.stats.skipped += 1;
                continue;
            }
            skipping = false;
            let c = self.qdot(j, &v);
            self.qaxpy(j, c, &mut v);
            coef[j] = c;
            self.stats.computed += 1;
        }
        let mut norm = v.iter().map(|&x| x * x).sum::<T>().sqrt();
        if norm < self.reorth_threshold * norm0 {
            self.stats.reorthogonalizations += 1;
            for j in 0..k {
                let c = self.qdot(j, &v);
                self.qaxpy(j, c, &mut v);
                coef[j] = coef[j] + c;
            }
            let norm2 = v.iter().map(|&x| x * x).sum::<T>().sqrt();
            if norm2 < self.reorth_threshold * norm {
                return Err(Error::RankDeficient { column: t });
            }
            norm = norm2;
        }
        let scale = self.max_norm.max(norm0);
        if !(norm > self.rank_tol * scale) {
            return Err(Error::RankDeficient { column: t });
        }
        self.max_norm = scale;
        let inv = T::one() / norm;
        v.iter_mut().for_each(|x| *x = *x * inv);
        coef[k] = norm;
        let qb = v.iter().zip(&self.b).map(|(&a, &b)| a * b).sum::<T>();

        self.q.push(v);
        self.r.push(coef);
        self.qtb.push(qb);

        if pos < k {
            self.move_last_to(pos, &sup);
        }
        self.supports.insert(pos, sup);
        self.rebuild_layout(new_s);
        if pos < k {
            self.clear_outside_pattern(pos..k + 1);
        }
        Ok(())
    }

    /// Rotates the freshly appended last column into position `pos`.
    fn move_last_to(&mut self, pos: usize, sup: &Support) {
        let k = self.len() - 1;
        // R with its last column moved to `pos`; shifted columns gain a zero row
        let last = self.r.pop().unwrap();
        self.r.insert(pos, last);
        for c in pos + 1..=k {
            self.r[c].push(T::zero());
        }
        let rows = self.rotation_rows_after_append(sup);
        for a in (pos..k).rev() {
            let (x, y) = (self.r[pos][a], self.r[pos][a + 1]);
            let Some((cs, sn, h)) = givens(x, y) else {
                continue;
            };
            self.stats.rotations += 1;
            self.r[pos][a] = h;
            self.r[pos][a + 1] = T::zero();
            for c in a + 1..=k {
                let (ra, rb) = (self.r[c][a], self.r[c][a + 1]);
                self.r[c][a] = cs * ra + sn * rb;
                self.r[c][a + 1] = cs * rb - sn * ra;
            }
            self.rotate_q(a, cs, sn, &rows);
        }
        for c in pos..=k {
            if self.r[c][c] < T::zero() {
                for cc in c..=k {
                    self.r[cc][c] = -self.r[cc][c];
                }
                self.q[c].iter_mut().for_each(|x| *x = -*x);
                self.qtb[c] = -self.qtb[c];
            }
        }
    }

    fn rotation_rows_after_append(&self, sup: &Support) -> Vec<usize> {
        let mut rows: Vec<usize> = self.toprows.clone();
        if let Some(t) = sup.top {
            rows.push(t);
        }
        let lo = if self.s.is_empty() {
            sup.lo
        } else {
            self.s.nbar_first.min(sup.lo)
        };
        let hi = self.s.bmax.last().copied().unwrap_or(0).max(sup.hi);
        rows.extend(lo..hi);
        rows.sort_unstable();
        rows.dedup();
        rows
    }

    fn rotate_q(&mut self, a: usize, cs: T, sn: T, rows: &[usize]) {
        let (left, right) = self.q.split_at_mut(a + 1);
        let (qa, qb) = (&mut left[a], &mut right[0]);
        for &row in rows {
            let (x, y) = (qa[row], qb[row]);
            qa[row] = cs * x + sn * y;
            qb[row] = cs * y - sn * x;
        }
        let (x, y) = (self.qtb[a], self.qtb[a + 1]);
        self.qtb[a] = cs * x + sn * y;
        self.qtb[a + 1] = cs * y - sn * x;
    }

    fn clear_outside_pattern(&mut self, cols: std::ops::Range<usize>) {
        let tol = T::epsilon() * T::lit(1e4);
        for j in cols {
            let (lo, hi) = (self.s.nbar_first, self.s.bmax[j]);
            let tops = &self.toprows[..self.ntop[j]];
            for (row, x) in self.q[j].iter_mut().enumerate() {
                if *x == T::zero() || (row >= lo && row < hi) || tops.binary_search(&row).is_ok() {
                    continue;
                }
                let leak = x.abs();
                let lf = leak.to_f64().unwrap_or(f64::INFINITY);
                if lf > self.stats.max_structure_leak {
                    self.stats.max_structure_leak = lf;
                }
                if leak > tol {
                    self.stats.structure_violations += 1;
                }
                *x = T::zero();
            }
        }
    }

    /// Removes column `t` (1-based) from the free set.
    pub fn delete(&mut self, t: usize) -> Result<()> {
        let pos = self
            .s
            .free
            .binary_search(&t)
            .map_err(|_| Error::NotFree(t))?;
        let k = self.len();
        let removed = self.supports[pos];
        let mut rows: Vec<usize> = self
            .toprows
            .iter()
            .copied()
            .filter(|&r| Some(r) != removed.top)
            .collect();
        rows.extend(self.s.nbar_first..self.s.bmax[k - 1]);

        self.r.remove(pos);
        for c in pos..k - 1 {
            let (x, y) = (self.r[c][c], self.r[c][c + 1]);
            if let Some((cs, sn, h)) = givens(x, y) {
                self.stats.rotations += 1;
                self.r[c][c] = h;
                self.r[c][c + 1] = T::zero();
                for cc in c + 1..k - 1 {
                    let (ra, rb) = (self.r[cc][c], self.r[cc][c + 1]);
                    self.r[cc][c] = cs * ra + sn * rb;
                    self.r[cc][c + 1] = cs * rb - sn * ra;
                }
                self.rotate_q(c, cs, sn, &rows);
            }
        }
        for (c, col) in self.r.iter_mut().enumerate() {
            col.truncate(c + 1);
        }
        self.q.pop();
        self.qtb.pop();
        if let Some(top) = removed.top {
            for col in &mut self.q[pos..] {
                col[top] = T::zero();
            }
        }
        self.supports.remove(pos);
        let free: Vec<usize> = self.s.free.iter().copied().filter(|&c| c != t).collect();
        let s = StructureSets::from_supports(free, &self.supports);
        self.rebuild_layout(s);
        self.clear_outside_pattern(pos..k - 1);
        Ok(())
    }

    /// Stores a new right-hand side `b` and recomputes `Q' b`.
    pub fn set_rhs(&mut self, b: &[T]) -> Result<()> {
        check_len("right-hand side", self.m, b.len())?;
        self.b.copy_from_slice(b);
        for j in 0..self.len() {
            self.qtb[j] = self.qdot(j, b);
        }
        Ok(())
    }

    /// `argmin ||J_F x + b||` for the stored `b`, ordered like the free set.
    pub fn solve_ls(&self) -> Result<Vec<T>> {
        let k = self.len();
        let tol = self.rank_tol * self.max_norm;
        let mut x: Vec<T> = self.qtb.iter().map(|&v| -v).collect();
        for i in (0..k).rev() {
            let d = self.r[i][i];
            if !(d.abs() > tol) {
                return Err(Error::SingularFactor { position: i });
            }
            let xi = x[i] / d;
            x[i] = xi;
            for (row, &rv) in self.r[i][..i].iter().enumerate() {
                x[row] = x[row] - rv * xi;
            }
        }
        Ok(x)
    }
}

/// `(c, s, h)` with `c x + s y = h >= 0` and `c y - s x = 0`; `None` when
/// both inputs vanish.
fn givens<T: Scalar>(x: T, y: T) -> Option<(T, T, T)> {
    if y == T::zero() {
        if x >= T::zero() {
            return None;
        }
        return Some((-T::one(), T::zero(), -x));
    }
    let h = x.hypot(y);
    Some((x / h, y / h, h))
}
