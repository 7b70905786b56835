//! Row-wise exp/log maps at the manifold origin, in the origin tangent
//! chart: a tangent vector at the origin of a curved space always has a zero
//! first ambient slot, so it is stored as its `d` spatial coordinates only.
//! Each map comes with its vector-Jacobian product for backpropagation.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis, Zip};

use super::special::{asinhc, asinhc_dz, atanc, sinc, sinc_dz, sinhc, sinhc_dz};
use super::{Geometry, ManifoldSpec};

fn row_dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.dot(&b)
}

/// `exp_o` applied to each row of `u` (n x d). Returns n x d for Euclidean
/// and n x (d+1) ambient coordinates otherwise.
pub fn exp0_rows(spec: &ManifoldSpec, u: &Array2<f64>) -> Array2<f64> {
    let (n, d) = u.dim();
    match spec.kind() {
        Geometry::Euclidean => u.clone(),
        kind => {
            let sk = spec.sqrt_abs_c();
            let mut out = Array2::zeros((n, d + 1));
            Zip::from(out.rows_mut()).and(u.rows()).for_each(|mut o, r| {
                let z = sk * r.dot(&r).sqrt();
                let (head, f) = match kind {
                    Geometry::Hyperbolic => (z.cosh() / sk, sinhc(z)),
                    _ => (z.cos() / sk, sinc(z)),
                };
                o[0] = head;
                o.slice_mut(ndarray::s![1..]).zip_mut_with(&r, |a, &b| *a = f * b);
            });
            out
        }
    }
}

/// Gradient of `sum(g * exp0_rows(u))` with respect to `u`.
pub fn exp0_rows_vjp(spec: &ManifoldSpec, u: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    match spec.kind() {
        Geometry::Euclidean => g.clone(),
        kind => {
            let sk = spec.sqrt_abs_c();
            let k = spec.curvature().abs();
            let mut out = Array2::zeros(u.dim());
            Zip::from(out.rows_mut())
                .and(u.rows())
                .and(g.rows())
                .for_each(|mut o, r, gr| {
                    let z = sk * r.dot(&r).sqrt();
                    let g0 = gr[0];
                    let gs = gr.slice(ndarray::s![1..]);
                    let gu = row_dot(gs, r);
                    let (f, head_coef, fdz) = match kind {
                        Geometry::Hyperbolic => (sinhc(z), g0 * sk * sinhc(z), sinhc_dz(z)),
                        _ => (sinc(z), -g0 * sk * sinc(z), sinc_dz(z)),
                    };
                    let radial = head_coef + gu * k * fdz;
                    fill(&mut o, |j| f * gs[j] + radial * r[j]);
                });
            out
        }
    }
}

fn fill(o: &mut ArrayViewMut1<f64>, f: impl Fn(usize) -> f64) {
    for (j, v) in o.iter_mut().enumerate() {
        *v = f(j);
    }
}

/// `log_o` applied to each row of `x` (ambient coordinates), returning
/// origin-chart tangent coordinates.
pub fn log0_rows(spec: &ManifoldSpec, x: &Array2<f64>) -> Array2<f64> {
    match spec.kind() {
        Geometry::Euclidean => x.clone(),
        kind => {
            let sk = spec.sqrt_abs_c();
            let spatial = x.slice(ndarray::s![.., 1..]);
            let mut out = spatial.to_owned();
            Zip::from(out.rows_mut()).and(x.column(0)).for_each(|mut o, &x0| {
                let s = o.dot(&o).sqrt();
                let f = match kind {
                    Geometry::Hyperbolic => asinhc(sk * s),
                    _ => sphere_log_factor(sk, x0, s),
                };
                o.mapv_inplace(|v| f * v);
            });
            out
        }
    }
}

/// `theta / (sqrt(c) s)` with `theta = atan2(s, x0)`.
fn sphere_log_factor(sk: f64, x0: f64, s: f64) -> f64 {
    if x0 > 0.0 {
        atanc(s / x0) / (sk * x0)
    } else if s > 0.0 {
        s.atan2(x0) / (sk * s)
    } else {
        0.0
    }
}

/// Gradient of `sum(g * log0_rows(x))` with respect to `x` (ambient).
pub fn log0_rows_vjp(spec: &ManifoldSpec, x: &Array2<f64>, g: &Array2<f64>) -> Array2<f64> {
    match spec.kind() {
        Geometry::Euclidean => g.clone(),
        kind => {
            let sk = spec.sqrt_abs_c();
            let k = spec.curvature().abs();
            let mut out = Array2::zeros(x.dim());
            for ((mut o, xr), gr) in out.axis_iter_mut(Axis(0)).zip(x.rows()).zip(g.rows()) {
                let x0 = xr[0];
                let xs = xr.slice(ndarray::s![1..]);
                let s = xs.dot(&xs).sqrt();
                let gx = row_dot(gr, xs);
                let (f, radial, g0) = match kind {
                    Geometry::Hyperbolic => {
                        let z = sk * s;
                        (asinhc(z), gx * k * asinhc_dz(z), 0.0)
                    }
                    _ => {
                        let f = sphere_log_factor(sk, x0, s);
                        let r2 = s * s + x0 * x0;
                        let dphi_dx0 = -1.0 / (sk * r2);
                        let dphi_ds_over_s = if x0 > 0.0 && s < 1e-3 * x0 {
                            let t2 = (s / x0) * (s / x0);
                            (-2.0 / 3.0 + 0.8 * t2 - 6.0 / 7.0 * t2 * t2) / (sk * x0 * x0 * x0)
                        } else if s > 0.0 {
                            (x0 * s / r2 - s.atan2(x0)) / (sk * s * s * s)
                        } else {
                            0.0
                        };
                        (f, gx * dphi_ds_over_s, gx * dphi_dx0)
                    }
                };
                o[0] = g0;
                for j in 0..xs.len() {
                    o[j + 1] = f * gr[j] + radial * xs[j];
                }
            }
            out
        }
    }
}
