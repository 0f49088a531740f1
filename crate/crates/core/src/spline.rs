//! Clamped B-spline basis on `[0, 1]` with uniform interior knots.
//!
//! A basis of order `m` (degree `m - 1`) with `k_n - 1` interior knots
//! `l / k_n` has dimension `k_n + m - 1`. Boundary knots are repeated `m`
//! times. Evaluation follows the de Boor / Cox recursion and its derivative
//! formula; at an interior knot the right-continuous piece is used, and at
//! `t = 1` the left limit.

use nalgebra::{DMatrix, DVector};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Knot sequence of a clamped uniform B-spline basis.
#[derive(Debug, Clone, PartialEq)]
pub struct KnotVector<T> {
    order: usize,
    segments: usize,
    knots: Vec<T>,
}

impl<T: Real> KnotVector<T> {
    /// Builds the clamped knot vector with `segments - 1` uniform interior knots.
    pub fn uniform(segments: usize, order: usize) -> Result<Self> {
        if segments == 0 {
            return Err(Error::invalid("k_n (number of knot intervals) must be >= 1"));
        }
        if order == 0 {
            return Err(Error::invalid("spline order m must be >= 1"));
        }
        let mut knots = Vec::with_capacity(segments - 1 + 2 * order);
        knots.extend(std::iter::repeat_n(T::zero(), order));
        let k = T::from_index(segments);
        for l in 1..segments {
            knots.push(T::from_index(l) / k);
        }
        knots.extend(std::iter::repeat_n(T::one(), order));
        Ok(Self {
            order,
            segments,
            knots,
        })
    }

    /// Spline order `m` (polynomial degree `m - 1`).
    pub fn order(&self) -> usize {
        self.order
    }

    /// Number of knot intervals `k_n`.
    pub fn segments(&self) -> usize {
        self.segments
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Number of basis functions, `k_n + m - 1`.
    pub fn dim(&self) -> usize {
        self.segments + self.order - 1
    }

    /// Mesh width `1 / k_n`.
    pub fn meshwidth(&self) -> T {
        T::one() / T::from_index(self.segments)
    }

    pub fn interior_knots(&self) -> &[T] {
        &self.knots[self.order..self.order + self.segments - 1]
    }

    /// Breakpoints `0, 1/k_n, ..., 1` (the distinct knot values).
    pub fn breakpoints(&self) -> Vec<T> {
        let k = T::from_index(self.segments);
        (0..=self.segments).map(|l| T::from_index(l) / k).collect()
    }

    /// Index `mu` of the knot span `[knots[mu], knots[mu + 1])` containing `t`.
    fn span(&self, t: T) -> usize {
        let m = self.order;
        let k = self.segments;
        let guess = (t * T::from_index(k)).floor().to_usize().unwrap_or(0);
        let mut l = guess.min(k - 1);
        while l + 1 < k && self.knots[m + l] <= t {
            l += 1;
        }
        while l > 0 && self.knots[m - 1 + l] > t {
            l -= 1;
        }
        m - 1 + l
    }

    fn check_point(&self, t: T) -> Result<()> {
        if !(t >= T::zero() && t <= T::one()) {
            return Err(Error::Domain(format!("evaluation point {t} outside [0, 1]")));
        }
        Ok(())
    }

    /// Values and derivatives up to order `nderiv` of the `m` basis functions
    /// that can be nonzero at `t`.
    ///
    /// Returns the index of the first such function and a table
    /// `ders[r][j] = N_{first + j}^{(r)}(t)`.
    pub fn eval_local(&self, t: T, nderiv: usize) -> Result<(usize, Vec<Vec<T>>)> {
        self.check_point(t)?;
        if nderiv >= self.order {
            return Err(Error::invalid(format!(
                "derivative order {nderiv} must be below the spline order {}",
                self.order
            )));
        }
        let mu = self.span(t);
        let ders = local_derivatives(&self.knots, mu, self.order - 1, t, nderiv);
        Ok((mu + 1 - self.order, ders))
    }

    /// Full vector `N^{(r)}(t)` of length `k_n + m - 1`.
    pub fn eval_basis(&self, t: T, deriv_order: usize) -> Result<DVector<T>> {
        let (first, ders) = self.eval_local(t, deriv_order)?;
        let mut out = DVector::zeros(self.dim());
        for (j, v) in ders[deriv_order].iter().enumerate() {
            out[first + j] = *v;
        }
        Ok(out)
    }
}

/// De Boor's triangular table with derivatives, for degree `p` on span `mu`.
fn local_derivatives<T: Real>(knots: &[T], mu: usize, p: usize, t: T, nderiv: usize) -> Vec<Vec<T>> {
    let mut ndu = vec![vec![T::zero(); p + 1]; p + 1];
    let mut left = vec![T::zero(); p + 1];
    let mut right = vec![T::zero(); p + 1];
    ndu[0][0] = T::one();
    for j in 1..=p {
        left[j] = t - knots[mu + 1 - j];
        right[j] = knots[mu + j] - t;
        let mut saved = T::zero();
        for r in 0..j {
            // lower triangle holds knot differences
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }

    let mut ders = vec![vec![T::zero(); p + 1]; nderiv + 1];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    if nderiv == 0 {
        return ders;
    }

    let p_i = p as isize;
    let mut a = [vec![T::zero(); p + 1], vec![T::zero(); p + 1]];
    for r in 0..=p_i {
        let (mut s1, mut s2) = (0usize, 1usize);
        a[0][0] = T::one();
        for k in 1..=nderiv as isize {
            let mut d = T::zero();
            let rk = r - k;
            let pk = p_i - k;
            if r >= k {
                a[s2][0] = a[s1][0] / ndu[(pk + 1) as usize][rk as usize];
                d = a[s2][0] * ndu[rk as usize][pk as usize];
            }
            let j1 = if rk >= -1 { 1 } else { -rk };
            let j2 = if r - 1 <= pk { k - 1 } else { p_i - r };
            for j in j1..=j2 {
                a[s2][j as usize] = (a[s1][j as usize] - a[s1][(j - 1) as usize])
                    / ndu[(pk + 1) as usize][(rk + j) as usize];
                d += a[s2][j as usize] * ndu[(rk + j) as usize][pk as usize];
            }
            if r <= pk {
                a[s2][k as usize] = -a[s1][(k - 1) as usize] / ndu[(pk + 1) as usize][r as usize];
                d += a[s2][k as usize] * ndu[r as usize][pk as usize];
            }
            ders[k as usize][r as usize] = d;
            std::mem::swap(&mut s1, &mut s2);
        }
    }
    let mut factor = T::from_index(p);
    for (k, row) in ders.iter_mut().enumerate().skip(1) {
        for v in row.iter_mut() {
            *v *= factor;
        }
        factor *= T::from_index(p.saturating_sub(k));
    }
    ders
}

/// Design matrix `X_n = (N_j(x_i))` on ascending design points.
#[derive(Debug, Clone)]
pub struct DesignMatrix<T: Real> {
    knots: KnotVector<T>,
    x: Vec<T>,
    matrix: DMatrix<T>,
}

impl<T: Real> DesignMatrix<T> {
    pub fn new(knots: &KnotVector<T>, x: &[T]) -> Result<Self> {
        if x.is_empty() {
            return Err(Error::invalid("design needs at least one point"));
        }
        for (i, &xi) in x.iter().enumerate() {
            if !(xi >= T::zero() && xi <= T::one()) {
                return Err(Error::invalid(format!("design point x[{i}] = {xi} outside [0, 1]")));
            }
            if i > 0 && xi < x[i - 1] {
                return Err(Error::invalid(format!("design points not ascending at index {i}")));
            }
        }
        let mut matrix = DMatrix::zeros(x.len(), knots.dim());
        for (i, &xi) in x.iter().enumerate() {
            let (first, ders) = knots.eval_local(xi, 0)?;
            for (j, v) in ders[0].iter().enumerate() {
                matrix[(i, first + j)] = *v;
            }
        }
        let design = Self {
            knots: knots.clone(),
            x: x.to_vec(),
            matrix,
        };
        Ok(design)
    }

    pub fn knots(&self) -> &KnotVector<T> {
        &self.knots
    }

    /// `sup |Q_n(t) - t| * k_n > 1/2`: the design leaves knot intervals thinly covered.
    pub fn is_coarse(&self) -> bool {
        self.ecdf_discrepancy() * T::from_index(self.knots.segments()) > T::lit(0.5)
    }

    pub fn points(&self) -> &[T] {
        &self.x
    }

    pub fn matrix(&self) -> &DMatrix<T> {
        &self.matrix
    }

    pub fn nrows(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.matrix.ncols()
    }

    /// `X^T X`.
    pub fn gram(&self) -> DMatrix<T> {
        self.matrix.tr_mul(&self.matrix)
    }

    /// `sup_t |Q_n(t) - t|` for the empirical CDF `Q_n` of the design points.
    pub fn ecdf_discrepancy(&self) -> T {
        let n = T::from_index(self.x.len());
        self.x
            .iter()
            .enumerate()
            .map(|(i, &xi)| {
                let below = T::from_index(i) / n;
                let above = T::from_index(i + 1) / n;
                (xi - below).abs().max((above - xi).abs())
            })
            .fold(T::zero(), |acc, v| acc.max(v))
    }
}

/// Equispaced midpoint design `x_i = (2i - 1) / (2n)`.
pub fn midpoint_design<T: Real>(n: usize) -> Vec<T> {
    let two_n = T::from_index(2 * n);
    (1..=n).map(|i| T::from_index(2 * i - 1) / two_n).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    #[test]
    fn knots_example_dimensions() {
        let kv = KnotVector::<f64>::uniform(4, 4).unwrap();
        assert_eq!(kv.interior_knots(), &[0.25, 0.5, 0.75]);
        assert_eq!(kv.dim(), 7);

        let kv = KnotVector::<f64>::uniform(10, 5).unwrap();
        assert_eq!(kv.dim(), 14);
        assert_eq!(kv.knots().len(), 19);
        assert_eq!(&kv.knots()[..5], &[0.0; 5]);
        assert_eq!(&kv.knots()[14..], &[1.0; 5]);
        assert!(kv.knots().windows(2).all(|w| w[0] <= w[1]));
        assert_relative_eq!(kv.meshwidth(), 0.1);
    }

    #[test]
    fn single_interval_indicator() {
        let kv = KnotVector::<f64>::uniform(1, 1).unwrap();
        assert_eq!(kv.dim(), 1);
        assert!(kv.interior_knots().is_empty());
        for t in [0.0, 0.3, 1.0] {
            assert_eq!(kv.eval_basis(t, 0).unwrap()[0], 1.0);
        }
    }

    #[test]
    fn rejects_bad_arguments() {
        assert!(matches!(KnotVector::<f64>::uniform(0, 3), Err(Error::InvalidArgument(_))));
        assert!(matches!(KnotVector::<f64>::uniform(3, 0), Err(Error::InvalidArgument(_))));
        let kv = KnotVector::<f64>::uniform(3, 3).unwrap();
        assert!(matches!(kv.eval_basis(1.2, 0), Err(Error::Domain(_))));
        assert!(matches!(kv.eval_basis(-0.1, 0), Err(Error::Domain(_))));
        assert!(matches!(kv.eval_basis(0.5, 3), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn piecewise_constant() {
        let kv = KnotVector::<f64>::uniform(2, 1).unwrap();
        let v = kv.eval_basis(0.3, 0).unwrap();
        assert_eq!(v.as_slice(), &[1.0, 0.0]);
        // right-continuous at the interior knot, left limit at 1
        assert_eq!(kv.eval_basis(0.5, 0).unwrap().as_slice(), &[0.0, 1.0]);
        assert_eq!(kv.eval_basis(1.0, 0).unwrap().as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn partition_of_unity_at_037() {
        for k in 1..8 {
            for m in 1..7 {
                let kv = KnotVector::<f64>::uniform(k, m).unwrap();
                let s: f64 = kv.eval_basis(0.37, 0).unwrap().sum();
                assert!((s - 1.0).abs() < 1e-12, "k={k} m={m} sum={s}");
            }
        }
    }

    #[test]
    fn first_derivative_matches_central_difference() {
        let h = 1e-6;
        for (k, m) in [(4, 4), (6, 5), (3, 2), (10, 6)] {
            let kv = KnotVector::<f64>::uniform(k, m).unwrap();
            let d = kv.eval_basis(0.4, 1).unwrap();
            let fd = (kv.eval_basis(0.4 + h, 0).unwrap() - kv.eval_basis(0.4 - h, 0).unwrap()) / (2.0 * h);
            for j in 0..kv.dim() {
                assert!((d[j] - fd[j]).abs() < 1e-5, "k={k} m={m} j={j}");
            }
        }
    }

    #[test]
    fn higher_derivatives_match_differences_of_lower() {
        let kv = KnotVector::<f64>::uniform(5, 5).unwrap();
        let h = 1e-6;
        for t in [0.13, 0.47, 0.71, 0.93] {
            for r in 1..5 {
                let d = kv.eval_basis(t, r).unwrap();
                let fd = (kv.eval_basis(t + h, r - 1).unwrap() - kv.eval_basis(t - h, r - 1).unwrap()) / (2.0 * h);
                let scale = d.amax().max(1.0);
                assert!((d - fd).amax() / scale < 1e-5, "t={t} r={r}");
            }
        }
    }

    #[test]
    fn derivative_sums_vanish() {
        let kv = KnotVector::<f64>::uniform(7, 5).unwrap();
        for t in [0.0, 0.21, 0.5, 0.999, 1.0] {
            for r in 1..5 {
                assert!(kv.eval_basis(t, r).unwrap().sum().abs() < 1e-8);
            }
        }
    }

    #[test]
    fn generic_f32_evaluation() {
        let kv = KnotVector::<f32>::uniform(4, 4).unwrap();
        let s: f32 = kv.eval_basis(0.37, 0).unwrap().sum();
        assert!((s - 1.0).abs() < 1e-6);
    }

    #[test]
    fn design_matrix_examples() {
        let kv = KnotVector::<f64>::uniform(1, 1).unwrap();
        let x = [1.0 / 6.0, 0.5, 5.0 / 6.0];
        let dm = DesignMatrix::new(&kv, &x).unwrap();
        assert_eq!(dm.matrix(), &DMatrix::from_element(3, 1, 1.0));

        let kv = KnotVector::<f64>::uniform(6, 5).unwrap();
        let x = midpoint_design::<f64>(50);
        let dm = DesignMatrix::new(&kv, &x).unwrap();
        for i in 0..50 {
            let row = dm.matrix().row(i);
            assert!((row.sum() - 1.0).abs() < 1e-12);
            assert!(row.iter().filter(|v| **v != 0.0).count() <= 5);
        }
    }

    #[test]
    fn design_matrix_rejects_bad_points() {
        let kv = KnotVector::<f64>::uniform(3, 3).unwrap();
        assert!(matches!(DesignMatrix::new(&kv, &[0.5, 0.2]), Err(Error::InvalidArgument(_))));
        assert!(matches!(DesignMatrix::new(&kv, &[0.5, 1.2]), Err(Error::InvalidArgument(_))));
        assert!(matches!(DesignMatrix::new(&kv, &[]), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn midpoint_design_n4() {
        assert_eq!(midpoint_design::<f64>(4), vec![0.125, 0.375, 0.625, 0.875]);
    }

    #[test]
    fn ecdf_discrepancy_of_midpoints_is_half_spacing() {
        let kv = KnotVector::<f64>::uniform(4, 3).unwrap();
        let dm = DesignMatrix::new(&kv, &midpoint_design::<f64>(100)).unwrap();
        assert_relative_eq!(dm.ecdf_discrepancy(), 0.005, epsilon = 1e-12);
    }

    #[test]
    fn spline_reproduction_by_least_squares() {
        let kv = KnotVector::<f64>::uniform(5, 4).unwrap();
        let coef = DVector::from_fn(kv.dim(), |j, _| ((j as f64) * 0.7).sin() + 0.3 * j as f64);
        let x = midpoint_design::<f64>(60);
        let dm = DesignMatrix::new(&kv, &x).unwrap();
        let y = dm.matrix() * &coef;
        let gram = dm.gram();
        let fit = gram.cholesky().unwrap().solve(&dm.matrix().tr_mul(&y));
        let yhat = dm.matrix() * fit;
        assert!((yhat - y).amax() < 1e-10);
    }

    proptest! {
        #[test]
        fn prop_partition_and_local_support(k in 1usize..15, m in 1usize..8, t in 0.0f64..=1.0) {
            let kv = KnotVector::<f64>::uniform(k, m).unwrap();
            let v = kv.eval_basis(t, 0).unwrap();
            prop_assert!((v.sum() - 1.0).abs() < 1e-12);
            prop_assert!(v.iter().all(|x| *x >= -1e-15));
            let nz: Vec<usize> = (0..v.len()).filter(|&j| v[j] != 0.0).collect();
            prop_assert!(nz.len() <= m);
            if let (Some(a), Some(b)) = (nz.first(), nz.last()) {
                prop_assert!(b - a < m);
            }
        }
    }
}
