//! Matrix exponential by scaling and squaring with Padé approximants.
//!
//! Degree selection and theta thresholds follow Higham (2005), "The scaling
//! and squaring method for the matrix exponential revisited".

use nalgebra::DMatrix;

use crate::error::{Error, Result};

const THETA_3: f64 = 1.495585217958292e-2;
const THETA_5: f64 = 2.539398330063230e-1;
const THETA_7: f64 = 9.504178996162932e-1;
const THETA_9: f64 = 2.097847961257068;
const THETA_13: f64 = 5.371920351148152;

const PADE_3: [f64; 4] = [120.0, 60.0, 12.0, 1.0];
const PADE_5: [f64; 6] = [30240.0, 15120.0, 3360.0, 420.0, 30.0, 1.0];
const PADE_7: [f64; 8] = [
    17297280.0, 8648640.0, 1995840.0, 277200.0, 25200.0, 1512.0, 56.0, 1.0,
];
const PADE_9: [f64; 10] = [
    17643225600.0,
    8821612800.0,
    2075673600.0,
    302702400.0,
    30270240.0,
    2162160.0,
    110880.0,
    3960.0,
    90.0,
    1.0,
];
const PADE_13: [f64; 14] = [
    64764752532480000.0,
    32382376266240000.0,
    7771770303897600.0,
    1187353796428800.0,
    129060195264000.0,
    10559470521600.0,
    670442572800.0,
    33522128640.0,
    1323241920.0,
    40840800.0,
    960960.0,
    16380.0,
    182.0,
    1.0,
];

fn one_norm(m: &DMatrix<f64>) -> f64 {
    m.column_iter()
        .map(|c| c.iter().map(|v| v.abs()).sum::<f64>())
        .fold(0.0, f64::max)
}

/// `exp(m)` for a square matrix with finite entries.
pub fn matrix_exponential(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    if m.ncols() != n {
        return Err(Error::Dimension(format!(
            "exponential of non-square {}x{} matrix",
            n,
            m.ncols()
        )));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidArgument(
            "matrix exponential input has non-finite entries".into(),
        ));
    }
    if n == 0 {
        return Ok(DMatrix::zeros(0, 0));
    }

    let norm = one_norm(m);
    let ident = DMatrix::<f64>::identity(n, n);
    let (u, v, squarings) = if norm <= THETA_3 {
        let (u, v) = pade_low(m, &ident, &PADE_3);
        (u, v, 0)
    } else if norm <= THETA_5 {
        let (u, v) = pade_low(m, &ident, &PADE_5);
        (u, v, 0)
    } else if norm <= THETA_7 {
        let (u, v) = pade_low(m, &ident, &PADE_7);
        (u, v, 0)
    } else if norm <= THETA_9 {
        let (u, v) = pade_low(m, &ident, &PADE_9);
        (u, v, 0)
    } else {
        let s = (norm / THETA_13).log2().ceil().max(0.0) as i32;
        let scaled = m * 2f64.powi(-s);
        let (u, v) = pade_13(&scaled, &ident);
        (u, v, s as u32)
    };

    // r = (v - u)^{-1} (v + u)
    let numer = &v + &u;
    let denom = v - u;
    let lu = denom.lu();
    let mut r = lu
        .solve(&numer)
        .ok_or_else(|| Error::Numerical("singular Padé denominator".into()))?;
    for _ in 0..squarings {
        r = &r * &r;
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("matrix exponential overflowed".into()));
    }
    Ok(r)
}

/// Odd/even split for degrees 3..9: u = m * sum(odd), v = sum(even).
fn pade_low(m: &DMatrix<f64>, ident: &DMatrix<f64>, b: &[f64]) -> (DMatrix<f64>, DMatrix<f64>) {
    let m2 = m * m;
    let mut powers = vec![ident.clone(), m2.clone()];
    while 2 * powers.len() < b.len() {
        let next = powers.last().unwrap() * &m2;
        powers.push(next);
    }
    let mut odd = DMatrix::zeros(m.nrows(), m.ncols());
    let mut even = DMatrix::zeros(m.nrows(), m.ncols());
    for (k, p) in powers.iter().enumerate() {
        if 2 * k + 1 < b.len() {
            odd += p * b[2 * k + 1];
        }
        even += p * b[2 * k];
    }
    (m * odd, even)
}

fn pade_13(m: &DMatrix<f64>, ident: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let b = &PADE_13;
    let m2 = m * m;
    let m4 = &m2 * &m2;
    let m6 = &m4 * &m2;
    let inner_u = &m6 * (&m6 * b[13] + &m4 * b[11] + &m2 * b[9]);
    let u = m * (inner_u + &m6 * b[7] + &m4 * b[5] + &m2 * b[3] + ident * b[1]);
    let inner_v = &m6 * (&m6 * b[12] + &m4 * b[10] + &m2 * b[8]);
    let v = inner_v + &m6 * b[6] + &m4 * b[4] + &m2 * b[2] + ident * b[0];
    (u, v)
}
