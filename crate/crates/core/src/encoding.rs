//! Positional encoding of sample positions and real spherical-harmonics
//! encoding of view directions.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct EncodingConfig {
    /// Number of octaves L.
    pub pe_frequencies: usize,
    /// Highest spherical-harmonics degree, 0..=4.
    pub sh_degree: usize,
}

impl Default for EncodingConfig {
    fn default() -> Self {
        Self {
            pe_frequencies: 6,
            sh_degree: 2,
        }
    }
}

impl EncodingConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sh_degree > 4 {
            return Err(Error::Config(format!(
                "spherical-harmonics degree {} exceeds 4",
                self.sh_degree
            )));
        }
        Ok(())
    }

    pub fn pe_len(&self) -> usize {
        3 + 6 * self.pe_frequencies
    }

    pub fn sh_len(&self) -> usize {
        (self.sh_degree + 1) * (self.sh_degree + 1)
    }
}

/// `[x ‖ sin(2^j π x) ‖ cos(2^j π x)]` for `j = 0..L`, written into `out` (length `3 + 6L`).
pub fn positional_encoding_into(x: [f64; 3], frequencies: usize, out: &mut [f64]) {
    out[..3].copy_from_slice(&x);
    if frequencies == 0 {
        return;
    }
    // Higher octaves via the double-angle identities.
    let mut sc = x.map(|v| (PI * v).sin_cos());
    for j in 0..frequencies {
        let base = 3 + 6 * j;
        for a in 0..3 {
            let (s, c) = sc[a];
            out[base + a] = s;
            out[base + 3 + a] = c;
            sc[a] = (2.0 * s * c, c * c - s * s);
        }
    }
}

pub fn positional_encoding(x: [f64; 3], frequencies: usize) -> Vec<f64> {
    let mut out = vec![0.0; 3 + 6 * frequencies];
    positional_encoding_into(x, frequencies, &mut out);
    out
}

/// Real spherical harmonics `Y_ℓm(d)` for `ℓ = 0..=degree`, ordered by ℓ then
/// `m = −ℓ..=ℓ` (degree 1 is `(y, z, x)`).
pub fn sh_encoding(d: [f64; 3], degree: usize) -> Result<Vec<f64>> {
    let n = (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt();
    if !((n - 1.0).abs() <= 1e-6) {
        return Err(Error::NonUnitDirection(n));
    }
    if degree > 4 {
        return Err(Error::Config(format!("spherical-harmonics degree {degree} exceeds 4")));
    }
    let mut out = vec![0.0; (degree + 1) * (degree + 1)];
    sh_encoding_into(d, degree, &mut out);
    Ok(out)
}

/// Unchecked variant of [`sh_encoding`] for pre-validated unit directions.
pub fn sh_encoding_into(d: [f64; 3], degree: usize, out: &mut [f64]) {
    let [x, y, z] = d;
    out[0] = 0.5 * (1.0 / PI).sqrt();
    if degree == 0 {
        return;
    }
    let c1 = (3.0 / (4.0 * PI)).sqrt();
    out[1] = c1 * y;
    out[2] = c1 * z;
    out[3] = c1 * x;
    if degree == 1 {
        return;
    }
    let (xx, yy, zz) = (x * x, y * y, z * z);
    let c2 = 0.5 * (15.0 / PI).sqrt();
    out[4] = c2 * x * y;
    out[5] = c2 * y * z;
    out[6] = 0.25 * (5.0 / PI).sqrt() * (3.0 * zz - 1.0);
    out[7] = c2 * x * z;
    out[8] = 0.25 * (15.0 / PI).sqrt() * (xx - yy);
    if degree == 2 {
        return;
    }
    out[9] = 0.25 * (35.0 / (2.0 * PI)).sqrt() * y * (3.0 * xx - yy);
    out[10] = 0.5 * (105.0 / PI).sqrt() * x * y * z;
    out[11] = 0.25 * (21.0 / (2.0 * PI)).sqrt() * y * (5.0 * zz - 1.0);
    out[12] = 0.25 * (7.0 / PI).sqrt() * (5.0 * zz * z - 3.0 * z);
    out[13] = 0.25 * (21.0 / (2.0 * PI)).sqrt() * x * (5.0 * zz - 1.0);
    out[14] = 0.25 * (105.0 / PI).sqrt() * (xx - yy) * z;
    out[15] = 0.25 * (35.0 / (2.0 * PI)).sqrt() * x * (xx - 3.0 * yy);
    if degree == 3 {
        return;
    }
    out[16] = 0.75 * (35.0 / PI).sqrt() * x * y * (xx - yy);
    out[17] = 0.75 * (35.0 / (2.0 * PI)).sqrt() * y * z * (3.0 * xx - yy);
    out[18] = 0.75 * (5.0 / PI).sqrt() * x * y * (7.0 * zz - 1.0);
    out[19] = 0.75 * (5.0 / (2.0 * PI)).sqrt() * y * z * (7.0 * zz - 3.0);
    out[20] = 3.0 / 16.0 * (1.0 / PI).sqrt() * (35.0 * zz * zz - 30.0 * zz + 3.0);
    out[21] = 0.75 * (5.0 / (2.0 * PI)).sqrt() * x * z * (7.0 * zz - 3.0);
    out[22] = 3.0 / 8.0 * (5.0 / PI).sqrt() * (xx - yy) * (7.0 * zz - 1.0);
    out[23] = 0.75 * (35.0 / (2.0 * PI)).sqrt() * x * z * (xx - 3.0 * yy);
    out[24] = 3.0 / 16.0 * (35.0 / PI).sqrt() * (xx * (xx - 3.0 * yy) - yy * (3.0 * xx - yy));
}
