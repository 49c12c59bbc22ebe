//! B-spline function bases: Cox-de Boor evaluation, least-squares
//! coefficient fitting, and grid extension onto finer or wider knot grids.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::{Element, Tensor};

/// Clamped uniform B-spline basis of degree `k` over `grid_size` intervals.
///
/// The knot vector has `grid_size + 2k + 1` entries: the domain endpoints
/// repeated `k+1` times plus `grid_size - 1` uniform interior breakpoints,
/// giving `grid_size + k` basis functions that sum to one on the domain.
#[derive(Clone, Debug, PartialEq)]
pub struct SplineBasis<T: Element> {
    degree: usize,
    grid_size: usize,
    lo: T,
    hi: T,
    knots: Vec<T>,
}

impl<T: Element> SplineBasis<T> {
    pub fn uniform(grid_size: usize, degree: usize, lo: T, hi: T) -> Result<Self> {
        if grid_size == 0 {
            return Err(Error::InvalidBasis("grid_size must be >= 1".into()));
        }
        if !(lo.is_finite() && hi.is_finite()) || !(lo < hi) {
            return Err(Error::InvalidBasis(format!(
                "domain [{lo}, {hi}] must be finite and increasing"
            )));
        }
        let g = grid_size;
        let k = degree;
        let step = (hi - lo) / T::from_f64(g as f64);
        let mut knots = Vec::with_capacity(g + 2 * k + 1);
        for i in 0..(g + 2 * k + 1) {
            let v = if i <= k {
                lo
            } else if i >= g + k {
                hi
            } else {
                lo + step * T::from_f64((i - k) as f64)
            };
            knots.push(v);
        }
        Ok(SplineBasis {
            degree,
            grid_size,
            lo,
            hi,
            knots,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn grid_size(&self) -> usize {
        self.grid_size
    }

    pub fn domain(&self) -> (T, T) {
        (self.lo, self.hi)
    }

    pub fn knots(&self) -> &[T] {
        &self.knots
    }

    /// Number of basis functions, `grid_size + degree`.
    pub fn num_basis(&self) -> usize {
        self.grid_size + self.degree
    }

    /// Clamp a point into the domain.
    pub fn clamp(&self, x: T) -> T {
        x.clamp_to(self.lo, self.hi)
    }

    /// Index of the knot span containing `x`, valid for in-domain `x`.
    /// The right endpoint closes the last span.
    fn span(&self, x: T) -> usize {
        let g = self.grid_size;
        let k = self.degree;
        let rel = (x - self.lo).to_f64() / (self.hi - self.lo).to_f64();
        let j = ((rel * g as f64).floor() as isize).clamp(0, g as isize - 1) as usize;
        k + j
    }

    /// The `degree + 1` basis values that can be non-zero at in-domain `x`,
    /// returned with the index of the first one.
    pub fn eval_nonzero(&self, x: T) -> (usize, Vec<T>) {
        let k = self.degree;
        let span = self.span(x);
        let mut values = vec![T::ZERO; k + 1];
        values[0] = T::ONE;
        let mut left = vec![T::ZERO; k + 1];
        let mut right = vec![T::ZERO; k + 1];
        for j in 1..=k {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = T::ZERO;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        (span - k, values)
    }

    /// Non-zero basis values and their first derivatives at in-domain `x`.
    pub fn eval_nonzero_with_deriv(&self, x: T) -> (usize, Vec<T>, Vec<T>) {
        let k = self.degree;
        let span = self.span(x);
        let start = span - k;
        let (_, values) = self.eval_nonzero(x);
        if k == 0 {
            return (start, values, vec![T::ZERO]);
        }
        // derivative from the degree (k-1) basis:
        // B'_{i,k} = k * (B_{i,k-1} / (t_{i+k} - t_i) - B_{i+1,k-1} / (t_{i+k+1} - t_{i+1}))
        let lower = self.lower_degree_nonzero(x, span);
        let kf = T::from_f64(k as f64);
        let mut derivs = vec![T::ZERO; k + 1];
        for (offset, d) in derivs.iter_mut().enumerate() {
            let i = start + offset;
            let mut acc = T::ZERO;
            // lower[j] holds B_{span-k+1+j, k-1}; B_{i,k-1} sits at j = i - (span-k+1)
            let li = i as isize - (span as isize - k as isize + 1);
            if (0..k as isize).contains(&li) {
                let denom = self.knots[i + k] - self.knots[i];
                if denom > T::ZERO {
                    acc += lower[li as usize] / denom;
                }
            }
            let li = li + 1;
            if (0..k as isize).contains(&li) {
                let denom = self.knots[i + k + 1] - self.knots[i + 1];
                if denom > T::ZERO {
                    acc -= lower[li as usize] / denom;
                }
            }
            *d = kf * acc;
        }
        (start, values, derivs)
    }

    /// Degree `k-1` non-zero basis values at `x` for the given span.
    fn lower_degree_nonzero(&self, x: T, span: usize) -> Vec<T> {
        let k = self.degree - 1;
        let mut values = vec![T::ZERO; k + 1];
        values[0] = T::ONE;
        let mut left = vec![T::ZERO; k + 1];
        let mut right = vec![T::ZERO; k + 1];
        for j in 1..=k {
            left[j] = x - self.knots[span + 1 - j];
            right[j] = self.knots[span + j] - x;
            let mut saved = T::ZERO;
            for r in 0..j {
                let temp = values[r] / (right[r + 1] + left[j - r]);
                values[r] = saved + right[r + 1] * temp;
                saved = left[j - r] * temp;
            }
            values[j] = saved;
        }
        values
    }

    /// All `grid_size + degree` basis values at `x`. Outside the knot range
    /// the recurrence yields all zeros.
    pub fn eval(&self, x: T) -> Vec<T> {
        let mut out = vec![T::ZERO; self.num_basis()];
        if x < self.lo || x > self.hi {
            return out;
        }
        let (start, values) = self.eval_nonzero(x);
        out[start..start + values.len()].copy_from_slice(&values);
        out
    }

    /// Greville abscissae: the coefficient locations at which linear
    /// functions are reproduced exactly. Degree 0 falls back to span
    /// midpoints.
    pub fn greville(&self) -> Vec<T> {
        let k = self.degree;
        let n = self.num_basis();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            if k == 0 {
                let mid = (self.knots[i] + self.knots[i + 1]) / T::from_f64(2.0);
                out.push(mid);
            } else {
                let mut acc = T::ZERO;
                for j in 1..=k {
                    acc += self.knots[i + j];
                }
                out.push(acc / T::from_f64(k as f64));
            }
        }
        out
    }
}

/// A spline `x -> sum_i c_i B_i(x)` over a [`SplineBasis`].
#[derive(Clone, Debug)]
pub struct SplineFunction<T: Element> {
    pub basis: SplineBasis<T>,
    pub coefficients: Vec<T>,
}

impl<T: Element> SplineFunction<T> {
    pub fn new(basis: SplineBasis<T>, coefficients: Vec<T>) -> Result<Self> {
        if coefficients.len() != basis.num_basis() {
            return Err(Error::DimensionMismatch(format!(
                "{} coefficients for a basis of {} functions",
                coefficients.len(),
                basis.num_basis()
            )));
        }
        Ok(SplineFunction {
            basis,
            coefficients,
        })
    }

    /// Evaluate at raw `x` (zero outside the knot range).
    pub fn eval(&self, x: T) -> T {
        if x < self.basis.lo || x > self.basis.hi {
            return T::ZERO;
        }
        let (start, values) = self.basis.eval_nonzero(x);
        let mut acc = T::ZERO;
        for (offset, &b) in values.iter().enumerate() {
            acc += self.coefficients[start + offset] * b;
        }
        acc
    }

    /// Evaluate with the input clamped into the domain, the total forward
    /// used by the layers.
    pub fn eval_clamped(&self, x: T) -> T {
        self.eval(self.basis.clamp(x))
    }
}

/// Differentiable spline evaluation on the tape, elementwise over `x`.
/// `coefficients` is a 1-D leaf of length `basis.num_basis()`.
pub fn spline_eval<T: Element>(
    tape: &mut Tape<T>,
    basis: &SplineBasis<T>,
    coefficients: Var,
    x: Var,
) -> Result<Var> {
    let c = tape.value(coefficients);
    if c.shape() != [basis.num_basis()] {
        return Err(Error::ShapeMismatch {
            op: "spline_eval",
            lhs: c.shape().to_vec(),
            rhs: vec![basis.num_basis()],
        });
    }
    let xs = tape.value(x).clone();
    let cdata = c.data().to_vec();
    let b = basis.clone();
    let out = xs.map(|xv| {
        if xv < b.lo || xv > b.hi {
            return T::ZERO;
        }
        let (start, values) = b.eval_nonzero(xv);
        let mut acc = T::ZERO;
        for (offset, &bv) in values.iter().enumerate() {
            acc += cdata[start + offset] * bv;
        }
        acc
    });
    let b = basis.clone();
    Ok(tape.push_op(out, &[coefficients, x], move || {
        Box::new(move |g, tape, sink| {
            let xv = tape.value(x);
            let cv = tape.value(coefficients);
            let gd = g.data();
            if tape.requires_grad(coefficients) {
                let mut dc = Tensor::zeros(&[b.num_basis()]);
                let dcd = dc.data_mut();
                for (j, &xj) in xv.data().iter().enumerate() {
                    if xj < b.lo || xj > b.hi {
                        continue;
                    }
                    let (start, values) = b.eval_nonzero(xj);
                    for (offset, &bv) in values.iter().enumerate() {
                        dcd[start + offset] += gd[j] * bv;
                    }
                }
                sink.accum(coefficients, dc);
            }
            if tape.requires_grad(x) {
                let cd = cv.data();
                let mut dx = Tensor::zeros(xv.shape());
                let dxd = dx.data_mut();
                for (j, &xj) in xv.data().iter().enumerate() {
                    if xj < b.lo || xj > b.hi {
                        continue;
                    }
                    let (start, _, derivs) = b.eval_nonzero_with_deriv(xj);
                    let mut acc = T::ZERO;
                    for (offset, &db) in derivs.iter().enumerate() {
                        acc += cd[start + offset] * db;
                    }
                    dxd[j] = gd[j] * acc;
                }
                sink.accum(x, dx);
            }
        })
    }))
}

/// Least-squares fit of spline coefficients to samples `(xs, ys)` using
/// ridge-regularized normal equations solved in `f64`.
pub fn fit_least_squares<T: Element>(
    basis: &SplineBasis<T>,
    xs: &[T],
    ys: &[T],
) -> Result<SplineFunction<T>> {
    if xs.len() != ys.len() {
        return Err(Error::DimensionMismatch(format!(
            "{} sample points vs {} values",
            xs.len(),
            ys.len()
        )));
    }
    let n = basis.num_basis();
    if xs.len() < n {
        return Err(Error::RankDeficient);
    }
    // Accumulate A^T A and A^T y through the non-zero basis window.
    let mut ata = vec![0.0f64; n * n];
    let mut aty = vec![0.0f64; n];
    for (&x, &y) in xs.iter().zip(ys) {
        if x < basis.lo || x > basis.hi {
            continue;
        }
        let (start, values) = basis.eval_nonzero(x);
        for (i_off, &bi) in values.iter().enumerate() {
            let i = start + i_off;
            let bi = bi.to_f64();
            aty[i] += bi * y.to_f64();
            for (j_off, &bj) in values.iter().enumerate() {
                ata[i * n + (start + j_off)] += bi * bj.to_f64();
            }
        }
    }
    let trace: f64 = (0..n).map(|i| ata[i * n + i]).sum();
    let tau = 1e-8 * trace / n as f64;
    for i in 0..n {
        ata[i * n + i] += tau;
    }
    let coeffs = cholesky_solve(&mut ata, &aty, n)?;
    SplineFunction::new(basis.clone(), coeffs.iter().map(|&c| T::from_f64(c)).collect())
}

/// Refit a spline onto a grid of `new_g` intervals, widening the domain to
/// cover any samples that fall outside it. The old spline is evaluated with
/// clamping, so the refit matches the total forward seen by callers.
pub fn grid_extend<T: Element>(
    f: &SplineFunction<T>,
    new_g: usize,
    samples: &[T],
) -> Result<SplineFunction<T>> {
    if new_g < f.basis.grid_size {
        return Err(Error::InvalidBasis(format!(
            "new grid size {} below current {}",
            new_g, f.basis.grid_size
        )));
    }
    if samples.is_empty() {
        return Err(Error::RankDeficient);
    }
    let (mut lo, mut hi) = f.basis.domain();
    for &s in samples {
        lo = lo.minimum(s);
        hi = hi.maximum(s);
    }
    let new_basis = SplineBasis::uniform(new_g, f.basis.degree, lo, hi)?;
    let ys: Vec<T> = samples.iter().map(|&x| f.eval_clamped(x)).collect();
    fit_least_squares(&new_basis, samples, &ys)
}

/// In-place Cholesky solve of the SPD system stored row-major in `a`.
fn cholesky_solve(a: &mut [f64], b: &[f64], n: usize) -> Result<Vec<f64>> {
    // decompose A = L L^T in the lower triangle
    for i in 0..n {
        for j in 0..=i {
            let mut sum = a[i * n + j];
            for p in 0..j {
                sum -= a[i * n + p] * a[j * n + p];
            }
            if i == j {
                if sum <= 0.0 || !sum.is_finite() {
                    return Err(Error::RankDeficient);
                }
                a[i * n + i] = sum.sqrt();
            } else {
                a[i * n + j] = sum / a[j * n + j];
            }
        }
    }
    // forward then backward substitution
    let mut y = b.to_vec();
    for i in 0..n {
        for p in 0..i {
            y[i] -= a[i * n + p] * y[p];
        }
        y[i] /= a[i * n + i];
    }
    for i in (0..n).rev() {
        for p in i + 1..n {
            y[i] -= a[p * n + i] * y[p];
        }
        y[i] /= a[i * n + i];
    }
    Ok(y)
}
