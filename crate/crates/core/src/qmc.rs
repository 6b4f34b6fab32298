//! Base-2 Sobol' points with optional Owen-style nested scrambling.
//!
//! Direction numbers are the first 32 dimensions of the Joe–Kuo
//! `new-joe-kuo-6.21201` table. Points are produced in natural (not Gray
//! code) index order, so dimension 0 is the van der Corput sequence.

use ndarray::Array2;

use crate::error::{MagtError, Result};

pub const MAX_DIM: usize = 32;
const BITS: usize = 32;

/// `(degree s, coefficient a, initial m_1..m_s)` for dimensions 2..=32.
const JOE_KUO: [(u32, u32, &[u32]); MAX_DIM - 1] = [
    (1, 0, &[1]),
    (2, 1, &[1, 3]),
    (3, 1, &[1, 3, 1]),
    (3, 2, &[1, 1, 1]),
    (4, 1, &[1, 1, 3, 3]),
    (4, 4, &[1, 3, 5, 13]),
    (5, 2, &[1, 1, 5, 5, 17]),
    (5, 4, &[1, 1, 5, 5, 5]),
    (5, 7, &[1, 1, 7, 11, 19]),
    (5, 11, &[1, 1, 5, 1, 1]),
    (5, 13, &[1, 1, 1, 3, 11]),
    (5, 14, &[1, 3, 5, 5, 31]),
    (6, 1, &[1, 3, 3, 9, 7, 49]),
    (6, 13, &[1, 1, 1, 15, 21, 21]),
    (6, 16, &[1, 3, 1, 13, 27, 49]),
    (6, 19, &[1, 1, 1, 15, 7, 5]),
    (6, 22, &[1, 3, 1, 15, 13, 25]),
    (6, 25, &[1, 1, 5, 5, 19, 61]),
    (7, 1, &[1, 3, 7, 11, 23, 15, 103]),
    (7, 4, &[1, 3, 7, 13, 13, 15, 69]),
    (7, 7, &[1, 1, 3, 13, 7, 35, 63]),
    (7, 8, &[1, 3, 5, 9, 1, 25, 53]),
    (7, 14, &[1, 3, 1, 13, 9, 35, 107]),
    (7, 19, &[1, 3, 1, 5, 27, 61, 31]),
    (7, 21, &[1, 1, 5, 11, 19, 41, 61]),
    (7, 28, &[1, 3, 5, 3, 3, 13, 69]),
    (7, 31, &[1, 1, 7, 13, 1, 19, 1]),
    (7, 32, &[1, 3, 7, 5, 13, 19, 59]),
    (7, 37, &[1, 1, 3, 9, 25, 29, 41]),
    (7, 41, &[1, 3, 5, 13, 23, 1, 55]),
    (7, 42, &[1, 3, 7, 3, 13, 59, 17]),
];

fn direction_vectors(dim: usize) -> [u32; BITS] {
    let mut v = [0u32; BITS];
    if dim == 0 {
        for (i, vi) in v.iter_mut().enumerate() {
            *vi = 1 << (31 - i);
        }
        return v;
    }
    let (s, a, m) = JOE_KUO[dim - 1];
    let s = s as usize;
    for i in 0..s.min(BITS) {
        v[i] = m[i] << (31 - i);
    }
    for i in s..BITS {
        let mut x = v[i - s] ^ (v[i - s] >> s);
        for k in 1..s {
            if (a >> (s - 1 - k)) & 1 == 1 {
                x ^= v[i - k];
            }
        }
        v[i] = x;
    }
    v
}

/// Generator for the first points of a `d`-dimensional Sobol' sequence.
#[derive(Debug, Clone)]
pub struct Sobol {
    vectors: Vec<[u32; BITS]>,
    scramble: Option<u32>,
}

impl Sobol {
    pub fn new(dim: usize, scramble: Option<u64>) -> Result<Self> {
        if dim == 0 || dim > MAX_DIM {
            return Err(MagtError::UnsupportedDimension(format!(
                "Sobol' points support 1..={MAX_DIM} dimensions, got {dim}"
            )));
        }
        Ok(Sobol {
            vectors: (0..dim).map(direction_vectors).collect(),
            scramble: scramble.map(|s| (s ^ (s >> 32)) as u32),
        })
    }

    pub fn dim(&self) -> usize {
        self.vectors.len()
    }

    /// 32-bit digits of point `index` in dimension `dim`.
    pub fn point_bits(&self, index: u32, dim: usize) -> u32 {
        let v = &self.vectors[dim];
        let mut x = 0u32;
        let mut i = index;
        let mut bit = 0;
        while i != 0 {
            if i & 1 == 1 {
                x ^= v[bit];
            }
            i >>= 1;
            bit += 1;
        }
        match self.scramble {
            Some(seed) => owen_scramble(x, hash(seed ^ (dim as u32).wrapping_mul(0x9c8f_2d3b))),
            None => x,
        }
    }

    /// First `n` points as rows of an `n x d` matrix in `[0, 1)`.
    pub fn points(&self, n: usize) -> Array2<f64> {
        Array2::from_shape_fn((n, self.dim()), |(i, j)| {
            self.point_bits(i as u32, j) as f64 / 4_294_967_296.0
        })
    }
}

/// Nested uniform digit scramble: every output digit depends only on the
/// more significant input digits and the seed.
fn owen_scramble(x: u32, seed: u32) -> u32 {
    let mut n = x.reverse_bits();
    n ^= n.wrapping_mul(0x3d20_adea);
    n = n.wrapping_add(seed);
    n = n.wrapping_mul((seed >> 16) | 1);
    n ^= n.wrapping_mul(0x0552_6c56);
    n ^= n.wrapping_mul(0x53a2_2864);
    n.reverse_bits()
}

fn hash(n: u32) -> u32 {
    let mut h = n ^ 0x79c6_8e4a;
    h ^= h >> 16;
    h = h.wrapping_mul(0x7feb_352d);
    h ^= h >> 15;
    h = h.wrapping_mul(0x846c_a68b);
    h ^= h >> 16;
    h
}

/// Warnock's closed form for the squared L2-star discrepancy of a point set
/// in `[0, 1]^d`.
pub fn l2_star_discrepancy_sq(points: &Array2<f64>) -> f64 {
    let (n, d) = points.dim();
    let nf = n as f64;
    let term1 = (1.0f64 / 3.0).powi(d as i32);
    let mut term2 = 0.0;
    for row in points.rows() {
        term2 += row.iter().map(|&x| (1.0 - x * x) / 2.0).product::<f64>();
    }
    let mut term3 = 0.0;
    for a in points.rows() {
        for b in points.rows() {
            term3 += a
                .iter()
                .zip(b.iter())
                .map(|(&x, &y)| 1.0 - x.max(y))
                .product::<f64>();
        }
    }
    term1 - 2.0 / nf * term2 + term3 / (nf * nf)
}
