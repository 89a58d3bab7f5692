//! Separable orthonormal block transforms: 8×8 DCT-II and 2×2 Haar.
//!
//! Both are written as `C = M · B · Mᵀ` for an orthonormal basis matrix `M`,
//! so the inverse is `B = Mᵀ · C · M`.

use std::f64::consts::PI;
use std::sync::OnceLock;

use crate::error::{Error, Result};

/// Orthonormal basis of an `n`-point separable block transform, row `u`
/// holding the `u`-th basis vector.
#[derive(Debug, Clone)]
pub struct BlockBasis {
    n: usize,
    m: Vec<f64>,
}

impl BlockBasis {
    fn dct(n: usize) -> Self {
        let mut m = vec![0.0; n * n];
        for u in 0..n {
            let alpha = if u == 0 {
                (1.0 / n as f64).sqrt()
            } else {
                (2.0 / n as f64).sqrt()
            };
            for i in 0..n {
                m[u * n + i] = alpha * ((2 * i + 1) as f64 * u as f64 * PI / (2 * n) as f64).cos();
            }
        }
        Self { n, m }
    }

    fn haar2() -> Self {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        Self {
            n: 2,
            m: vec![s, s, s, -s],
        }
    }

    pub fn dct8() -> &'static BlockBasis {
        static B: OnceLock<BlockBasis> = OnceLock::new();
        B.get_or_init(|| BlockBasis::dct(8))
    }

    pub fn haar() -> &'static BlockBasis {
        static B: OnceLock<BlockBasis> = OnceLock::new();
        B.get_or_init(BlockBasis::haar2)
    }

    pub fn size(&self) -> usize {
        self.n
    }

    /// `out = M · block · Mᵀ`. Both buffers are `n*n`, row-major.
    pub fn forward_into(&self, block: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut tmp = [0.0f64; 64];
        // tmp = M · block
        for u in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for i in 0..n {
                    acc += self.m[u * n + i] * block[i * n + j];
                }
                tmp[u * n + j] = acc;
            }
        }
        // out = tmp · Mᵀ
        for u in 0..n {
            for v in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += tmp[u * n + j] * self.m[v * n + j];
                }
                out[u * n + v] = acc;
            }
        }
    }

    /// `out = Mᵀ · coeffs · M`.
    pub fn inverse_into(&self, coeffs: &[f64], out: &mut [f64]) {
        let n = self.n;
        let mut tmp = [0.0f64; 64];
        // tmp = Mᵀ · coeffs
        for i in 0..n {
            for v in 0..n {
                let mut acc = 0.0;
                for u in 0..n {
                    acc += self.m[u * n + i] * coeffs[u * n + v];
                }
                tmp[i * n + v] = acc;
            }
        }
        for i in 0..n {
            for j in 0..n {
                let mut acc = 0.0;
                for v in 0..n {
                    acc += tmp[i * n + v] * self.m[v * n + j];
                }
                out[i * n + j] = acc;
            }
        }
    }

    fn checked(&self, input: &[f32], forward: bool) -> Result<Vec<f32>> {
        let nn = self.n * self.n;
        if input.len() != nn {
            return Err(Error::invalid(format!(
                "expected a {0}x{0} block ({nn} values), got {1}",
                self.n,
                input.len()
            )));
        }
        let block: Vec<f64> = input.iter().map(|&v| v as f64).collect();
        let mut out = vec![0.0; nn];
        if forward {
            self.forward_into(&block, &mut out);
        } else {
            self.inverse_into(&block, &mut out);
        }
        Ok(out.into_iter().map(|v| v as f32).collect())
    }
}

/// Orthonormal 2-D DCT-II of one 8×8 block (64 values, row-major).
pub fn dct8_forward(block: &[f32]) -> Result<Vec<f32>> {
    BlockBasis::dct8().checked(block, true)
}

/// Inverse of [`dct8_forward`].
pub fn dct8_inverse(coeffs: &[f32]) -> Result<Vec<f32>> {
    BlockBasis::dct8().checked(coeffs, false)
}

/// Single-level orthonormal 2-D Haar transform of a 2×2 block.
///
/// For `[[a, b], [c, d]]` the outputs are, in order,
/// `LL = (a+b+c+d)/2`, `LH = (a-b+c-d)/2`, `HL = (a+b-c-d)/2`, `HH = (a-b-c+d)/2`.
pub fn haar2_forward(block: &[f32]) -> Result<Vec<f32>> {
    BlockBasis::haar().checked(block, true)
}

pub fn haar2_inverse(coeffs: &[f32]) -> Result<Vec<f32>> {
    BlockBasis::haar().checked(coeffs, false)
}
