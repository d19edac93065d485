//! Scalar numerics shared by both solver levels: low-degree polynomials in a
//! local time variable, bracketed root finding and 1-D minimization.

use serde::{Deserialize, Serialize};

/// Absolute tolerance on junction and crossing times (s).
pub const TIME_TOL: f64 = 1e-10;

/// Cubic in local time `s = t - t_ref`: `x(s) = c0 + c1 s + c2 s² + c3 s³`.
///
/// Positions on polynomial arcs are stored this way so that evaluation stays
/// well conditioned far from `t = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cubic {
    pub t_ref: f64,
    pub c: [f64; 4],
}

impl Cubic {
    pub fn new(t_ref: f64, c: [f64; 4]) -> Self {
        Self { t_ref, c }
    }

    /// Position cubic from state at `t_ref` with affine control `u + jerk·s`.
    pub fn from_state(t_ref: f64, p: f64, v: f64, u: f64, jerk: f64) -> Self {
        Self::new(t_ref, [p, v, u / 2.0, jerk / 6.0])
    }

    pub fn value(&self, t: f64) -> f64 {
        let s = t - self.t_ref;
        ((self.c[3] * s + self.c[2]) * s + self.c[1]) * s + self.c[0]
    }

    pub fn d1(&self, t: f64) -> f64 {
        let s = t - self.t_ref;
        (3.0 * self.c[3] * s + 2.0 * self.c[2]) * s + self.c[1]
    }

    pub fn d2(&self, t: f64) -> f64 {
        let s = t - self.t_ref;
        6.0 * self.c[3] * s + 2.0 * self.c[2]
    }

    pub fn d3(&self) -> f64 {
        6.0 * self.c[3]
    }

    /// Same polynomial expanded around a new reference time.
    pub fn rebase(&self, t_ref: f64) -> Self {
        Self::new(
            t_ref,
            [
                self.value(t_ref),
                self.d1(t_ref),
                self.d2(t_ref) / 2.0,
                self.c[3],
            ],
        )
    }

    pub fn derivative(&self) -> Self {
        Self::new(self.t_ref, [self.c[1], 2.0 * self.c[2], 3.0 * self.c[3], 0.0])
    }

    pub fn scale(&self, k: f64) -> Self {
        Self::new(self.t_ref, self.c.map(|x| x * k))
    }

    /// `self + k·other`, expressed around `self.t_ref`.
    pub fn add_scaled(&self, other: &Cubic, k: f64) -> Self {
        let o = other.rebase(self.t_ref);
        let mut c = self.c;
        for (ci, oi) in c.iter_mut().zip(o.c) {
            *ci += k * oi;
        }
        Self::new(self.t_ref, c)
    }

    pub fn add_constant(&self, k: f64) -> Self {
        let mut c = self.c;
        c[0] += k;
        Self::new(self.t_ref, c)
    }

    /// Real roots in `[a, b]`, ascending.
    pub fn roots_in(&self, a: f64, b: f64) -> Vec<f64> {
        if b < a {
            return Vec::new();
        }
        let scale = self.c.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
        if scale == 0.0 {
            return Vec::new();
        }
        let mut knots = vec![a];
        knots.extend(self.derivative_roots_inside(a, b));
        knots.push(b);
        let mut roots: Vec<f64> = Vec::new();
        let f = |t: f64| self.value(t);
        for w in knots.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            let (flo, fhi) = (f(lo), f(hi));
            let push = |r: f64, roots: &mut Vec<f64>| {
                if roots.last().is_none_or(|&x| (r - x).abs() > 1e-12) {
                    roots.push(r);
                }
            };
            if flo == 0.0 {
                push(lo, &mut roots);
            }
            if flo * fhi < 0.0 {
                if let Some(r) = newton_bisect(|t| (self.value(t), self.d1(t)), lo, hi, TIME_TOL * 1e-2)
                {
                    push(r, &mut roots);
                }
            }
            if fhi == 0.0 {
                push(hi, &mut roots);
            }
        }
        roots
    }

    /// Critical points strictly inside `(a, b)`, ascending.
    pub fn derivative_roots_inside(&self, a: f64, b: f64) -> Vec<f64> {
        let (qa, qb, qc) = (3.0 * self.c[3], 2.0 * self.c[2], self.c[1]);
        quadratic_roots(qa, qb, qc)
            .into_iter()
            .map(|s| s + self.t_ref)
            .filter(|&t| t > a && t < b)
            .collect()
    }

    /// Maximum over `[a, b]` and where it is attained.
    pub fn max_on(&self, a: f64, b: f64) -> (f64, f64) {
        let mut best = (a, self.value(a));
        for t in self
            .derivative_roots_inside(a, b)
            .into_iter()
            .chain(std::iter::once(b))
        {
            let v = self.value(t);
            if v > best.1 {
                best = (t, v);
            }
        }
        best
    }
}

/// Real roots of `a x² + b x + c`, ascending; degenerates to the linear case.
pub fn quadratic_roots(a: f64, b: f64, c: f64) -> Vec<f64> {
    let scale = b.abs().max(c.abs()).max(1e-300);
    if a.abs() <= 1e-14 * scale {
        if b == 0.0 {
            return Vec::new();
        }
        return vec![-c / b];
    }
    let disc = b * b - 4.0 * a * c;
    if disc < 0.0 {
        return Vec::new();
    }
    if disc == 0.0 {
        return vec![-b / (2.0 * a)];
    }
    // Numerically stable pair.
    let q = -0.5 * (b + b.signum() * disc.sqrt());
    let mut r = if q == 0.0 {
        vec![0.0, -b / a]
    } else {
        vec![q / a, c / q]
    };
    r.sort_by(f64::total_cmp);
    r
}

/// Safeguarded Newton iteration on a sign-changing bracket; falls back to
/// bisection whenever the Newton step leaves the bracket or stalls.
pub fn newton_bisect<F>(fdf: F, lo: f64, hi: f64, tol: f64) -> Option<f64>
where
    F: Fn(f64) -> (f64, f64),
{
    let (mut a, mut b) = (lo, hi);
    let (fa, fb) = (fdf(a).0, fdf(b).0);
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    if fa * fb > 0.0 {
        return None;
    }
    let rising = fb > 0.0;
    let mut x = 0.5 * (a + b);
    for _ in 0..200 {
        let (fx, dfx) = fdf(x);
        if fx == 0.0 {
            return Some(x);
        }
        if (fx > 0.0) == rising {
            b = x;
        } else {
            a = x;
        }
        let newton = x - fx / dfx;
        let next = if dfx != 0.0 && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if (next - x).abs() <= tol || (b - a) <= tol {
            return Some(next);
        }
        x = next;
    }
    Some(x)
}

/// Brent's method on a sign-changing bracket.
pub fn brent<F>(f: F, lo: f64, hi: f64, tol: f64) -> Option<f64>
where
    F: Fn(f64) -> f64,
{
    let (mut a, mut b) = (lo, hi);
    let (mut fa, mut fb) = (f(a), f(b));
    if !fa.is_finite() || !fb.is_finite() || fa * fb > 0.0 {
        return None;
    }
    if fa == 0.0 {
        return Some(a);
    }
    if fb == 0.0 {
        return Some(b);
    }
    let (mut c, mut fc) = (a, fa);
    let mut d = b - a;
    let mut e = d;
    for _ in 0..300 {
        if fb * fc > 0.0 {
            c = a;
            fc = fa;
            d = b - a;
            e = d;
        }
        if fc.abs() < fb.abs() {
            a = b;
            b = c;
            c = a;
            fa = fb;
            fb = fc;
            fc = fa;
        }
        let tol1 = 2.0 * f64::EPSILON * b.abs() + 0.5 * tol;
        let xm = 0.5 * (c - b);
        if xm.abs() <= tol1 || fb == 0.0 {
            return Some(b);
        }
        if e.abs() >= tol1 && fa.abs() > fb.abs() {
            let s = fb / fa;
            let (mut p, mut q);
            if a == c {
                p = 2.0 * xm * s;
                q = 1.0 - s;
            } else {
                let qq = fa / fc;
                let r = fb / fc;
                p = s * (2.0 * xm * qq * (qq - r) - (b - a) * (r - 1.0));
                q = (qq - 1.0) * (r - 1.0) * (s - 1.0);
            }
            if p > 0.0 {
                q = -q;
            }
            p = p.abs();
            let min1 = 3.0 * xm * q - (tol1 * q).abs();
            let min2 = (e * q).abs();
            if 2.0 * p < min1.min(min2) {
                e = d;
                d = p / q;
            } else {
                d = xm;
                e = d;
            }
        } else {
            d = xm;
            e = d;
        }
        a = b;
        fa = fb;
        b += if d.abs() > tol1 { d } else { tol1.copysign(xm) };
        fb = f(b);
        if !fb.is_finite() {
            return None;
        }
    }
    Some(b)
}

/// Golden-section search for a minimum of a unimodal function on `[a, b]`.
pub fn golden_min<F>(f: F, a: f64, b: f64, tol: f64) -> (f64, f64)
where
    F: Fn(f64) -> f64,
{
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let (mut a, mut b) = (a, b);
    let mut x1 = b - g * (b - a);
    let mut x2 = a + g * (b - a);
    let (mut f1, mut f2) = (f(x1), f(x2));
    while (b - a) > tol {
        if f1 <= f2 {
            b = x2;
            x2 = x1;
            f2 = f1;
            x1 = b - g * (b - a);
            f1 = f(x1);
        } else {
            a = x1;
            x1 = x2;
            f1 = f2;
            x2 = a + g * (b - a);
            f2 = f(x2);
        }
    }
    if f1 <= f2 {
        (x1, f1)
    } else {
        (x2, f2)
    }
}

/// Grid scan followed by golden refinement around the best grid cell; robust
/// against infeasible (infinite) regions that break unimodality.
pub fn scan_min<F>(f: F, a: f64, b: f64, cells: usize, tol: f64) -> Option<(f64, f64)>
where
    F: Fn(f64) -> f64,
{
    if b <= a {
        let v = f(a);
        return v.is_finite().then_some((a, v));
    }
    let h = (b - a) / cells as f64;
    let mut best: Option<(usize, f64)> = None;
    for k in 0..=cells {
        let v = f(a + h * k as f64);
        if v.is_finite() && best.is_none_or(|(_, bv)| v < bv) {
            best = Some((k, v));
        }
    }
    let (k, v) = best?;
    let lo = a + h * (k.saturating_sub(1)) as f64;
    let hi = (a + h * (k + 1) as f64).min(b);
    let (x, fx) = golden_min(&f, lo, hi, tol);
    if fx.is_finite() && fx <= v {
        Some((x, fx))
    } else {
        Some((a + h * k as f64, v))
    }
}

/// Adaptive Simpson quadrature.
pub fn integrate<F>(f: F, a: f64, b: f64, tol: f64) -> f64
where
    F: Fn(f64) -> f64,
{
    fn rec<F: Fn(f64) -> f64>(
        f: &F,
        a: f64,
        b: f64,
        fa: f64,
        fm: f64,
        fb: f64,
        whole: f64,
        tol: f64,
        depth: u32,
    ) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            return left + right + delta / 15.0;
        }
        rec(f, a, m, fa, flm, fm, left, tol / 2.0, depth - 1)
            + rec(f, m, b, fm, frm, fb, right, tol / 2.0, depth - 1)
    }
    if b <= a {
        return 0.0;
    }
    let (fa, fm, fb) = (f(a), f(0.5 * (a + b)), f(b));
    let whole = (b - a) / 6.0 * (fa + 4.0 * fm + fb);
    rec(&f, a, b, fa, fm, fb, whole, tol, 40)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_rebase_preserves_values() {
        let q = Cubic::new(1.0, [2.0, -1.0, 0.5, 0.25]);
        let r = q.rebase(7.5);
        for t in [-3.0, 0.0, 1.0, 4.2, 9.0] {
            assert!((q.value(t) - r.value(t)).abs() < 1e-9);
            assert!((q.d1(t) - r.d1(t)).abs() < 1e-9);
        }
    }

    #[test]
    fn cubic_roots_match_factors() {
        // (t-1)(t-2)(t-4)
        let q = Cubic::new(0.0, [-8.0, 14.0, -7.0, 1.0]);
        let r = q.roots_in(0.0, 5.0);
        assert_eq!(r.len(), 3);
        for (x, e) in r.iter().zip([1.0, 2.0, 4.0]) {
            assert!((x - e).abs() < 1e-11);
        }
        assert_eq!(q.roots_in(2.5, 3.5).len(), 0);
    }

    #[test]
    fn quadratic_handles_linear_and_cancellation() {
        assert_eq!(quadratic_roots(0.0, 2.0, -4.0), vec![2.0]);
        let r = quadratic_roots(1.0, -1e8, 1.0);
        assert!((r[0] - 1e-8).abs() < 1e-20);
    }

    #[test]
    fn brent_and_golden() {
        let r = brent(|x| x * x - 2.0, 0.0, 2.0, 1e-14).unwrap();
        assert!((r - 2f64.sqrt()).abs() < 1e-12);
        let (x, _) = golden_min(|x| (x - 0.3).powi(2), -1.0, 1.0, 1e-9);
        assert!((x - 0.3).abs() < 1e-6);
        assert!(brent(|x| x * x + 1.0, -1.0, 1.0, 1e-12).is_none());
    }

    #[test]
    fn simpson_is_exact_enough() {
        let v = integrate(|t| (t.sin()).powi(2), 0.0, 3.0, 1e-12);
        let exact = 1.5 - (6f64).sin() / 4.0;
        assert!((v - exact).abs() < 1e-10);
    }
}
