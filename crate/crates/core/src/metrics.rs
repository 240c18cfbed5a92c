//! Overlap metrics on binary masks.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

fn counts(op: &'static str, pred: &Tensor, gt: &Tensor) -> Result<(f64, f64, f64)> {
    if pred.shape() != gt.shape() {
        return Err(Error::shape(
            op,
            format!("prediction {:?} vs target {:?}", pred.shape(), gt.shape()),
        ));
    }
    let mut inter = 0.0;
    let mut p = 0.0;
    let mut g = 0.0;
    for (a, b) in pred.data().iter().zip(gt.data()) {
        if *a != 0.0 && *a != 1.0 {
            return Err(Error::Data(format!("{op}: prediction value {a} is not binary")));
        }
        if *b != 0.0 && *b != 1.0 {
            return Err(Error::Data(format!("{op}: target value {b} is not binary")));
        }
        inter += a * b;
        p += a;
        g += b;
    }
    Ok((inter, p, g))
}

/// 2|P∩G| / (|P|+|G|); two empty masks agree perfectly.
pub fn dice_score(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (inter, p, g) = counts("dice_score", pred, gt)?;
    if p + g == 0.0 {
        return Ok(1.0);
    }
    Ok(2.0 * inter / (p + g))
}

/// Mean IoU over the foreground and background classes; a class empty in
/// both masks scores 1.
pub fn miou(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    let (inter, p, g) = counts("miou", pred, gt)?;
    let n = pred.numel() as f64;
    let fg_union = p + g - inter;
    let fg = if fg_union == 0.0 { 1.0 } else { inter / fg_union };
    // Complement counts give the background overlap directly.
    let bg_inter = n - p - g + inter;
    let bg_union = n - inter;
    let bg = if bg_union == 0.0 { 1.0 } else { bg_inter / bg_union };
    Ok((fg + bg) / 2.0)
}
