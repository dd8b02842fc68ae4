//! Small numerical helpers: quadrature and 1-D minimization.

/// Composite Simpson rule with `panels` (even) subintervals.
pub fn simpson(f: impl Fn(f64) -> f64, lo: f64, hi: f64, panels: usize) -> f64 {
    let panels = panels.max(2) + panels % 2;
    let h = (hi - lo) / panels as f64;
    let mut acc = f(lo) + f(hi);
    for k in 1..panels {
        let w = if k % 2 == 1 { 4.0 } else { 2.0 };
        acc += w * f(lo + h * k as f64);
    }
    acc * h / 3.0
}

/// Golden-section search for a minimizer of a unimodal `f` on `[lo, hi]`.
/// Stops once the bracket is narrower than `tol`; returns `(x, f(x))`.
pub fn golden_section(f: impl Fn(f64) -> f64, lo: f64, hi: f64, tol: f64) -> (f64, f64) {
    let inv_phi = (5.0_f64.sqrt() - 1.0) / 2.0;
    let (mut a, mut b) = (lo, hi);
    let mut c = b - inv_phi * (b - a);
    let mut d = a + inv_phi * (b - a);
    let mut fc = f(c);
    let mut fd = f(d);
    while (b - a).abs() > tol {
        if fc <= fd {
            b = d;
            d = c;
            fd = fc;
            c = b - inv_phi * (b - a);
            fc = f(c);
        } else {
            a = c;
            c = d;
            fc = fd;
            d = a + inv_phi * (b - a);
            fd = f(d);
        }
    }
    let x = 0.5 * (a + b);
    let fx = f(x);
    // the bracket endpoints may beat the midpoint when the minimum sits on the boundary
    [(x, fx), (lo, f(lo)), (hi, f(hi))]
        .into_iter()
        .filter(|(_, v)| v.is_finite())
        .min_by(|p, q| p.1.total_cmp(&q.1))
        .unwrap_or((x, fx))
}
