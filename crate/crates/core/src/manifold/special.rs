//! Removable-singularity helpers: `f(z)/z` style functions and the
//! `f'(z)/z` factors their gradients need, with Taylor branches near zero.

const SERIES_CUTOFF: f64 = 1e-4;
const DERIV_CUTOFF: f64 = 1e-3;

/// sinh(z) / z
pub fn sinhc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 + z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sinh() / z
    }
}

/// sin(z) / z
pub fn sinc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 - z2 / 6.0 + z2 * z2 / 120.0
    } else {
        z.sin() / z
    }
}

/// tanh(z) / z
pub fn tanhc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 - z2 / 3.0 + 2.0 * z2 * z2 / 15.0
    } else {
        z.tanh() / z
    }
}

/// asinh(z) / z
pub fn asinhc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 - z2 / 6.0 + 3.0 * z2 * z2 / 40.0
    } else {
        z.asinh() / z
    }
}

/// atanh(z) / z, defined for |z| < 1.
pub fn atanhc(z: f64) -> f64 {
    if z.abs() < SERIES_CUTOFF {
        let z2 = z * z;
        1.0 + z2 / 3.0 + z2 * z2 / 5.0
    } else {
        z.atanh() / z
    }
}

/// atan(t) / t
pub fn atanc(t: f64) -> f64 {
    if t.abs() < SERIES_CUTOFF {
        let t2 = t * t;
        1.0 - t2 / 3.0 + t2 * t2 / 5.0
    } else {
        t.atan() / t
    }
}

/// sinhc'(z) / z
pub fn sinhc_dz(z: f64) -> f64 {
    if z.abs() < DERIV_CUTOFF {
        let z2 = z * z;
        1.0 / 3.0 + z2 / 30.0 + z2 * z2 / 840.0
    } else {
        (z * z.cosh() - z.sinh()) / (z * z * z)
    }
}

/// sinc'(z) / z
pub fn sinc_dz(z: f64) -> f64 {
    if z.abs() < DERIV_CUTOFF {
        let z2 = z * z;
        -1.0 / 3.0 + z2 / 30.0 - z2 * z2 / 840.0
    } else {
        (z * z.cos() - z.sin()) / (z * z * z)
    }
}

/// tanhc'(z) / z
pub fn tanhc_dz(z: f64) -> f64 {
    if z.abs() < DERIV_CUTOFF {
        let z2 = z * z;
        -2.0 / 3.0 + 8.0 * z2 / 15.0 - 34.0 * z2 * z2 / 105.0
    } else {
        let sech = 1.0 / z.cosh();
        (z * sech * sech - z.tanh()) / (z * z * z)
    }
}

/// asinhc'(z) / z
pub fn asinhc_dz(z: f64) -> f64 {
    if z.abs() < DERIV_CUTOFF {
        let z2 = z * z;
        -1.0 / 3.0 + 3.0 * z2 / 10.0 - 15.0 * z2 * z2 / 56.0
    } else {
        (z / (1.0 + z * z).sqrt() - z.asinh()) / (z * z * z)
    }
}

/// atanhc'(z) / z
pub fn atanhc_dz(z: f64) -> f64 {
    if z.abs() < DERIV_CUTOFF {
        let z2 = z * z;
        2.0 / 3.0 + 4.0 * z2 / 5.0 + 6.0 * z2 * z2 / 7.0
    } else {
        (z / (1.0 - z * z) - z.atanh()) / (z * z * z)
    }
}
