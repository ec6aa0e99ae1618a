use ndarray::{Array2, ArrayViewMut2};

use super::{ModelConfig, Scalar};
use crate::pack::RopeIndex;

/// Which axis drives each channel pair of a head, and its frequency.
#[derive(Debug, Clone, PartialEq)]
pub struct RopeTable {
    axis: Vec<u8>,
    freq: Vec<f64>,
}

impl RopeTable {
    pub fn new(config: &ModelConfig) -> Self {
        let pairs = config.head_dim() / 2;
        let [n_t, n_r, n_c] = config.rope_pairs();
        debug_assert_eq!(n_t + n_r + n_c, pairs);
        let mut axis = Vec::with_capacity(pairs);
        let mut freq = Vec::with_capacity(pairs);
        for (a, n) in [n_t, n_r, n_c].into_iter().enumerate() {
            let d_axis = (2 * n) as f64;
            for k in 0..n {
                axis.push(a as u8);
                freq.push(config.rope_base.powf(-2.0 * k as f64 / d_axis));
            }
        }
        Self { axis, freq }
    }

    pub fn pairs(&self) -> usize {
        self.axis.len()
    }

    /// Per-token (cos, sin) of every pair, `N × pairs` each.
    pub fn angles<T: Scalar>(&self, index: &[RopeIndex]) -> (Array2<T>, Array2<T>) {
        let (n, p) = (index.len(), self.pairs());
        let mut cos = Array2::zeros((n, p));
        let mut sin = Array2::zeros((n, p));
        for (i, idx) in index.iter().enumerate() {
            for k in 0..p {
                let pos = match self.axis[k] {
                    0 => idx.t,
                    1 => idx.r,
                    _ => idx.c,
                } as f64;
                let (s, c) = (self.freq[k] * pos).sin_cos();
                cos[[i, k]] = T::from_f64(c).unwrap();
                sin[[i, k]] = T::from_f64(s).unwrap();
            }
        }
        (cos, sin)
    }
}

/// Rotates adjacent channel pairs `(2k, 2k+1)` of every row in place;
/// `inverse` applies the transpose rotation.
pub fn rotate_rows<T: Scalar>(mut x: ArrayViewMut2<T>, cos: &Array2<T>, sin: &Array2<T>, inverse: bool) {
    for (mut row, (c, s)) in x.rows_mut().into_iter().zip(cos.rows().into_iter().zip(sin.rows())) {
        for k in 0..c.len() {
            let (a, b) = (row[2 * k], row[2 * k + 1]);
            let (ck, sk) = (c[k], if inverse { -s[k] } else { s[k] });
            row[2 * k] = a * ck - b * sk;
            row[2 * k + 1] = a * sk + b * ck;
        }
    }
}

/// Rotary embedding of one per-head vector at one position.
pub fn rope_rotate(v: &[f64], index: RopeIndex, config: &ModelConfig) -> Vec<f64> {
    assert_eq!(v.len(), config.head_dim(), "vector width must equal the head width");
    let table = RopeTable::new(config);
    let (cos, sin) = table.angles::<f64>(&[index]);
    let mut m = Array2::from_shape_vec((1, v.len()), v.to_vec()).unwrap();
    rotate_rows(m.view_mut(), &cos, &sin, false);
    m.into_raw_vec_and_offset().0
}
