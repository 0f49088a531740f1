//! Composite Gauss-Legendre quadrature on panels of `[0, 1]`.

use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::spline::KnotVector;

/// Default number of Gauss-Legendre nodes per panel.
pub const DEFAULT_ORDER: usize = 10;

/// Nodes and weights of the `q`-point Gauss-Legendre rule on `[-1, 1]`.
pub fn gauss_legendre(q: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; q];
    let mut weights = vec![0.0; q];
    let qf = q as f64;
    for i in 0..q.div_ceil(2) {
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (qf + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // three-term recurrence for P_q and its derivative
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=q {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let pq = if q == 1 { x } else { p1 };
            let pq_1 = if q == 1 { 1.0 } else { p0 };
            dp = qf * (x * pq - pq_1) / (x * x - 1.0);
            let dx = pq / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[q - 1 - i] = x;
        weights[i] = w;
        weights[q - 1 - i] = w;
    }
    (nodes, weights)
}

/// Composite rule with one Gauss-Legendre block per panel.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadratureRule<T> {
    order: usize,
    breakpoints: Vec<T>,
    nodes: Vec<T>,
    weights: Vec<T>,
}

impl<T: Real> QuadratureRule<T> {
    /// Rule on the panels delimited by `breakpoints` (ascending, covering `[0, 1]`).
    pub fn new(breakpoints: &[T], order: usize) -> Result<Self> {
        if order == 0 {
            return Err(Error::invalid("quadrature order must be >= 1"));
        }
        if breakpoints.len() < 2 || breakpoints.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(Error::invalid("quadrature breakpoints must be strictly ascending"));
        }
        let (ref_nodes, ref_weights) = gauss_legendre(order);
        let mut nodes = Vec::with_capacity(order * (breakpoints.len() - 1));
        let mut weights = Vec::with_capacity(nodes.capacity());
        let half = T::lit(0.5);
        for panel in breakpoints.windows(2) {
            let (a, b) = (panel[0], panel[1]);
            let mid = (a + b) * half;
            let rad = (b - a) * half;
            for (x, w) in ref_nodes.iter().zip(&ref_weights) {
                nodes.push(mid + rad * T::lit(*x));
                weights.push(rad * T::lit(*w));
            }
        }
        Ok(Self {
            order,
            breakpoints: breakpoints.to_vec(),
            nodes,
            weights,
        })
    }

    /// Panels aligned with the knot intervals of a basis.
    pub fn for_basis(knots: &KnotVector<T>, order: usize) -> Result<Self> {
        Self::new(&knots.breakpoints(), order)
    }

    /// `panels` equal panels on `[0, 1]`.
    pub fn uniform(panels: usize, order: usize) -> Result<Self> {
        if panels == 0 {
            return Err(Error::invalid("need at least one quadrature panel"));
        }
        let bp: Vec<T> = (0..=panels)
            .map(|i| T::from_index(i) / T::from_index(panels))
            .collect();
        Self::new(&bp, order)
    }

    pub fn order(&self) -> usize {
        self.order
    }

    pub fn breakpoints(&self) -> &[T] {
        &self.breakpoints
    }

    pub fn nodes(&self) -> &[T] {
        &self.nodes
    }

    pub fn weights(&self) -> &[T] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn integrate(&self, f: impl Fn(T) -> T) -> T {
        self.nodes
            .iter()
            .zip(&self.weights)
            .fold(T::zero(), |acc, (x, w)| acc + *w * f(*x))
    }
}
