//! Mask normalization: exact feature distribution matching (sort matching)
//! of masked attention outputs onto their unmasked counterparts.
//!
//! Each element of the masked output is replaced by the unmasked value of the
//! same rank. The result keeps the unmasked multiset exactly and the masked
//! ordering. This is the sorted-to-sorted assignment of discrete 1D optimal
//! transport under quadratic cost.

use ndarray::{Array2, ArrayView1, ArrayViewMut1, Axis, Zip};

use crate::attention::AttentionPair;
use crate::error::{Error, Result};

/// How equal values in the rank source are ordered.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum RankMatchPolicy {
    /// Ties keep their original position order.
    #[default]
    StableIndex,
}

/// Indices that sort `values` ascending; ties keep position order.
pub fn stable_argsort(values: ArrayView1<'_, f64>) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    idx
}

fn check_finite(v: ArrayView1<'_, f64>, what: &str) -> Result<()> {
    if v.iter().all(|x| x.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite entry in {what}")))
    }
}

fn match_into(a_m: ArrayView1<'_, f64>, a_u: ArrayView1<'_, f64>, mut out: ArrayViewMut1<'_, f64>) {
    let order = stable_argsort(a_m);
    let mut sorted_u = a_u.to_vec();
    sorted_u.sort_by(f64::total_cmp);
    for (rank, &pos) in order.iter().enumerate() {
        out[pos] = sorted_u[rank];
    }
}

/// Rearranges `a_u` so that its ranking follows `a_m`.
pub fn efdm_match(a_m: ArrayView1<'_, f64>, a_u: ArrayView1<'_, f64>, policy: RankMatchPolicy) -> Result<Vec<f64>> {
    let RankMatchPolicy::StableIndex = policy;
    if a_m.len() != a_u.len() {
        return Err(Error::shape("efdm_match", a_m.len(), a_u.len()));
    }
    if a_m.is_empty() {
        return Err(Error::shape("efdm_match", "length >= 1", 0));
    }
    check_finite(a_m, "masked output")?;
    check_finite(a_u, "unmasked output")?;
    let mut out = ndarray::Array1::zeros(a_m.len());
    match_into(a_m, a_u, out.view_mut());
    Ok(out.to_vec())
}

/// Row-wise sort matching along the last dimension of an attention output.
pub fn mask_normalize(pair: &AttentionPair) -> Result<Array2<f64>> {
    if pair.masked.dim() != pair.unmasked.dim() {
        return Err(Error::shape(
            "mask_normalize",
            format!("{:?}", pair.unmasked.dim()),
            format!("{:?}", pair.masked.dim()),
        ));
    }
    if !pair.masked.iter().chain(pair.unmasked.iter()).all(|x| x.is_finite()) {
        return Err(Error::Numeric("non-finite attention output in mask_normalize".into()));
    }
    let mut out = Array2::zeros(pair.masked.dim());
    Zip::from(out.axis_iter_mut(Axis(0)))
        .and(pair.masked.axis_iter(Axis(0)))
        .and(pair.unmasked.axis_iter(Axis(0)))
        .for_each(|o, m, u| match_into(m, u, o));
    Ok(out)
}
