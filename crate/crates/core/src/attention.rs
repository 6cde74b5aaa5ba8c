//! Single-head scaled dot-product attention with an optional binary mask.

use ndarray::{Array2, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Logit assigned to masked positions in additive mode.
pub const MASKED_LOGIT: f64 = -1e9;

/// How a binary mask acts on the attention logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    /// Masked logits are replaced with [`MASKED_LOGIT`], so they get no weight.
    #[default]
    Additive,
    /// Logits are multiplied by the mask; masked logits become 0, not excluded.
    Multiplicative,
}

impl std::str::FromStr for MaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "additive" => Ok(Self::Additive),
            "multiplicative" => Ok(Self::Multiplicative),
            other => Err(Error::Config(format!("unknown mask mode `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionInputs<'a> {
    pub q: ArrayView2<'a, f64>,
    pub k: ArrayView2<'a, f64>,
    pub v: ArrayView2<'a, f64>,
    pub scale: f64,
}

impl<'a> AttentionInputs<'a> {
    /// Inputs with the usual `1 / sqrt(d)` scale.
    pub fn new(q: ArrayView2<'a, f64>, k: ArrayView2<'a, f64>, v: ArrayView2<'a, f64>) -> Self {
        let scale = 1.0 / (q.ncols().max(1) as f64).sqrt();
        Self { q, k, v, scale }
    }

    fn check(&self) -> Result<()> {
        let (l, d) = self.q.dim();
        let (lk, dk) = self.k.dim();
        if d == 0 || l == 0 || lk == 0 {
            return Err(Error::shape("attention inputs", "non-empty Q and K", format!("Q {l}x{d}, K {lk}x{dk}")));
        }
        if dk != d {
            return Err(Error::shape("attention keys", format!("width {d}"), format!("width {dk}")));
        }
        if self.v.nrows() != lk {
            return Err(Error::shape("attention values", format!("{lk} rows"), format!("{} rows", self.v.nrows())));
        }
        Ok(())
    }
}

/// Masked and unmasked outputs computed from the same `Q`, `K`, `V`.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionPair {
    pub masked: Array2<f64>,
    pub unmasked: Array2<f64>,
}

pub(crate) fn softmax_rows_inplace(logits: &mut Array2<f64>) {
    for mut row in logits.axis_iter_mut(Axis(0)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        row.mapv_inplace(|x| {
            let e = (x - max).exp();
            sum += e;
            e
        });
        row.mapv_inplace(|x| x / sum);
    }
}

/// Row-stochastic attention weights `softmax(Q K^T * scale [masked])`.
pub fn attention_weights(inputs: &AttentionInputs<'_>, mask: Option<ArrayView2<'_, u8>>, mode: MaskMode) -> Result<Array2<f64>> {
    inputs.check()?;
    let mut logits = inputs.q.dot(&inputs.k.t());
    logits.mapv_inplace(|x| x * inputs.scale);
    if let Some(mask) = mask {
        if mask.dim() != logits.dim() {
            return Err(Error::shape("attention mask", format!("{:?}", logits.dim()), format!("{:?}", mask.dim())));
        }
        match mode {
            MaskMode::Additive => {
                for (i, (mut row, mrow)) in logits.axis_iter_mut(Axis(0)).zip(mask.axis_iter(Axis(0))).enumerate() {
                    if mrow.iter().all(|&m| m == 0) {
                        return Err(Error::Degenerate(format!("attention mask row {i} excludes every key")));
                    }
                    row.zip_mut_with(&mrow, |x, &m| {
                        if m == 0 {
                            *x = MASKED_LOGIT;
                        }
                    });
                }
            }
            MaskMode::Multiplicative => logits.zip_mut_with(&mask, |x, &m| *x *= f64::from(m)),
        }
    }
    softmax_rows_inplace(&mut logits);
    Ok(logits)
}

pub fn attention(inputs: &AttentionInputs<'_>, mask: Option<ArrayView2<'_, u8>>, mode: MaskMode) -> Result<Array2<f64>> {
    Ok(attention_weights(inputs, mask, mode)?.dot(&inputs.v))
}

pub fn attention_pair(inputs: &AttentionInputs<'_>, mask: ArrayView2<'_, u8>, mode: MaskMode) -> Result<AttentionPair> {
    Ok(AttentionPair {
        masked: attention(inputs, Some(mask), mode)?,
        unmasked: attention(inputs, None, mode)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, Array2};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-2.0..2.0))
    }

    #[test]
    fn all_ones_mask_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (q, k, v) = (random(&mut rng, 5, 3), random(&mut rng, 7, 3), random(&mut rng, 7, 2));
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view());
        let ones = Array2::<u8>::ones((5, 7));
        let plain = attention(&inputs, None, MaskMode::Additive).unwrap();
        for mode in [MaskMode::Additive, MaskMode::Multiplicative] {
            assert_eq!(attention(&inputs, Some(ones.view()), mode).unwrap(), plain);
        }
        let pair = attention_pair(&inputs, ones.view(), MaskMode::Additive).unwrap();
        assert_eq!(pair.masked, pair.unmasked);
        assert_eq!(pair.unmasked, plain);
    }

    #[test]
    fn single_query_single_key_returns_value_row() {
        let q = array![[0.3, -1.0]];
        let v = array![[4.0, 5.0, 6.0]];
        let inputs = AttentionInputs::new(q.view(), q.view(), v.view());
        let out = attention(&inputs, Some(array![[1u8]].view()), MaskMode::Additive).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn diagonal_mask_selects_own_value() {
        let c = 3.0;
        let q = array![[c, 0.0], [0.0, c]];
        let v = array![[1.0, 0.0], [0.0, 1.0]];
        let inputs = AttentionInputs::new(q.view(), q.view(), v.view());
        let out = attention(&inputs, Some(array![[1u8, 0], [0, 1]].view()), MaskMode::Additive).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn block_mask_matches_explicit_neg_infinity_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let (q, k, v) = (random(&mut rng, 4, 4), random(&mut rng, 4, 4), random(&mut rng, 4, 4));
        let mask = array![[1u8, 1, 0, 0], [1, 1, 0, 0], [0, 0, 1, 1], [0, 0, 1, 1]];
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view());
        let w = attention_weights(&inputs, Some(mask.view()), MaskMode::Additive).unwrap();
        let out = attention(&inputs, Some(mask.view()), MaskMode::Additive).unwrap();
        for i in 0..4 {
            let logits: Vec<f64> = (0..4)
                .map(|j| {
                    if mask[[i, j]] == 1 {
                        q.row(i).dot(&k.row(j)) / 2.0
                    } else {
                        f64::NEG_INFINITY
                    }
                })
                .collect();
            let z: f64 = logits.iter().map(|l| l.exp()).sum();
            for j in 0..4 {
                let expect = logits[j].exp() / z;
                assert!((w[[i, j]] - expect).abs() < 1e-12);
                if mask[[i, j]] == 0 {
                    assert!(w[[i, j]] < 1e-20);
                }
            }
            for c in 0..4 {
                let expect: f64 = (0..4).map(|j| logits[j].exp() / z * v[[j, c]]).sum();
                assert!((out[[i, c]] - expect).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn multiplicative_zeroes_rather_than_excludes() {
        let q = array![[1.0], [1.0]];
        let k = array![[2.0], [-2.0]];
        let v = array![[1.0], [0.0]];
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view());
        let mask = array![[1u8, 0], [0, 0]];
        let w = attention_weights(&inputs, Some(mask.view()), MaskMode::Multiplicative).unwrap();
        // row 0: logits (2, 0) -> masked key still gets weight
        assert!((w[[0, 1]] - 1.0 / (1.0 + 2f64.exp())).abs() < 1e-12);
        // row 1: everything zeroed -> uniform
        assert!((w[[1, 0]] - 0.5).abs() < 1e-12);
        assert!(matches!(
            attention_weights(&inputs, Some(mask.view()), MaskMode::Additive),
            Err(Error::Degenerate(_))
        ));
    }

    #[test]
    fn rows_are_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let l = rng.random_range(1..9);
            let lk = rng.random_range(1..9);
            let (q, k, v) = (random(&mut rng, l, 3), random(&mut rng, lk, 3), random(&mut rng, lk, 2));
            let mut mask = Array2::from_shape_fn((l, lk), |_| u8::from(rng.random_bool(0.6)));
            for mut row in mask.rows_mut() {
                row[0] = 1;
            }
            let inputs = AttentionInputs::new(q.view(), k.view(), v.view());
            for m in [None, Some(mask.view())] {
                let w = attention_weights(&inputs, m, MaskMode::Additive).unwrap();
                for row in w.rows() {
                    assert!((row.sum() - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn shape_errors() {
        let q = Array2::<f64>::zeros((2, 3));
        let k = Array2::<f64>::zeros((4, 2));
        let v = Array2::<f64>::zeros((4, 1));
        assert!(attention(&AttentionInputs::new(q.view(), k.view(), v.view()), None, MaskMode::Additive).is_err());
        let k = Array2::<f64>::zeros((4, 3));
        let bad = Array2::<u8>::ones((2, 3));
        let inputs = AttentionInputs::new(q.view(), k.view(), v.view());
        assert!(matches!(attention(&inputs, Some(bad.view()), MaskMode::Additive), Err(Error::Shape { .. })));
    }
}
