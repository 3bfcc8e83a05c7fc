//! Training objective: binary cross-entropy minus soft Dice.
//!
//! Loss values are accumulated and returned in `f64`; gradients come back in
//! the tensor's own precision.

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor4};

/// Probability clamp applied before taking logarithms.
pub const PROB_CLAMP: f64 = 1e-7;

/// Additive smoothing of the soft Dice ratio.
pub const DICE_SMOOTH: f64 = 1.0;

fn check_dims<T>(p: &Tensor4<T>, g: &Tensor4<T>) -> Result<()> {
    if p.dims() != g.dims() {
        return Err(Error::Shape(format!(
            "prediction {:?} and ground truth {:?} differ",
            p.dims(),
            g.dims()
        )));
    }
    Ok(())
}

fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Mean over pixels of `−(g·ln p + (1−g)·ln(1−p))`.
pub fn bce_loss<T: Real>(p: &Tensor4<T>, g: &Tensor4<T>) -> Result<f64> {
    check_dims(p, g)?;
    let sum: f64 = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&p, &g)| {
            let (p, g) = (clamp_prob(p.as_f64()), g.as_f64());
            -(g * p.ln() + (1.0 - g) * (1.0 - p).ln())
        })
        .sum();
    Ok(sum / p.len() as f64)
}

/// `(2·Σ p·g + smooth) / (Σ p + Σ g + smooth)` over the whole batch.
pub fn soft_dice<T: Real>(p: &Tensor4<T>, g: &Tensor4<T>, smooth: f64) -> Result<f64> {
    check_dims(p, g)?;
    let (num, den) = dice_terms(p, g, smooth);
    Ok(num / den)
}

fn dice_terms<T: Real>(p: &Tensor4<T>, g: &Tensor4<T>, smooth: f64) -> (f64, f64) {
    let (mut inter, mut sp, mut sg) = (0.0f64, 0.0f64, 0.0f64);
    for (&p, &g) in p.data().iter().zip(g.data()) {
        let (p, g) = (p.as_f64(), g.as_f64());
        inter += p * g;
        sp += p;
        sg += g;
    }
    (2.0 * inter + smooth, sp + sg + smooth)
}

/// `BCE − soft Dice` when `use_dice`, else BCE alone.
pub fn combined_loss<T: Real>(p: &Tensor4<T>, g: &Tensor4<T>, use_dice: bool) -> Result<f64> {
    let bce = bce_loss(p, g)?;
    if use_dice {
        Ok(bce - soft_dice(p, g, DICE_SMOOTH)?)
    } else {
        Ok(bce)
    }
}

/// Loss value together with ∂loss/∂p.
pub struct LossGrad<T> {
    pub loss: f64,
    pub grad: Tensor4<T>,
}

/// [`combined_loss`] and its gradient with respect to the probabilities.
///
/// The BCE derivative is evaluated at the clamped probability, so saturated
/// wrong predictions still receive a gradient.
pub fn combined_loss_grad<T: Real>(
    p: &Tensor4<T>,
    g: &Tensor4<T>,
    use_dice: bool,
) -> Result<LossGrad<T>> {
    let loss = combined_loss(p, g, use_dice)?;
    let m = p.len() as f64;
    let (num, den) = dice_terms(p, g, DICE_SMOOTH);
    let grad: Vec<T> = p
        .data()
        .iter()
        .zip(g.data())
        .map(|(&pv, &gv)| {
            let (pc, gv) = (clamp_prob(pv.as_f64()), gv.as_f64());
            let mut d = (-gv / pc + (1.0 - gv) / (1.0 - pc)) / m;
            if use_dice {
                d -= (2.0 * gv * den - num) / (den * den);
            }
            T::lit(d)
        })
        .collect();
    Ok(LossGrad {
        loss,
        grad: Tensor4::from_vec(p.dims(), grad)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(v: &[f64]) -> Tensor4<f64> {
        Tensor4::from_vec([1, 1, 1, v.len()], v.to_vec()).unwrap()
    }

    #[test]
    fn bce_values() {
        let g = t(&[1.0, 0.0, 1.0]);
        assert!(bce_loss(&g, &g).unwrap() <= 1e-6);
        assert!((bce_loss(&t(&[0.5]), &t(&[1.0])).unwrap() - std::f64::consts::LN_2).abs() < 1e-6);
        let v = bce_loss(&t(&[0.8, 0.2]), &t(&[1.0, 0.0])).unwrap();
        assert!((v - 0.223144).abs() < 1e-6, "{v}");
    }

    #[test]
    fn soft_dice_values() {
        let g = t(&[1.0, 1.0, 0.0, 1.0]);
        assert_eq!(soft_dice(&g, &g, 1.0).unwrap(), 1.0);
        let z = t(&[0.0; 4]);
        assert_eq!(soft_dice(&z, &z, 1.0).unwrap(), 1.0);
        let v = soft_dice(&t(&[0.5; 4]), &t(&[1.0, 1.0, 0.0, 0.0]), 1.0).unwrap();
        assert!((v - 0.6).abs() < 1e-15);
    }

    #[test]
    fn combined_perfect_prediction_is_minus_one() {
        let g = t(&[1.0, 0.0, 0.0, 1.0, 1.0]);
        let v = combined_loss(&g, &g, true).unwrap();
        assert!((v + 1.0).abs() < 1e-5, "{v}");
        let p = t(&[0.3, 0.6, 0.1, 0.9, 0.5]);
        assert_eq!(combined_loss(&p, &g, false).unwrap(), bce_loss(&p, &g).unwrap());
    }

    #[test]
    fn dims_must_match() {
        assert!(bce_loss(&t(&[0.5]), &t(&[1.0, 0.0])).is_err());
        assert!(soft_dice(&t(&[0.5]), &t(&[1.0, 0.0]), 1.0).is_err());
    }

    #[test]
    fn gradient_length_and_value_agree_with_loss() {
        let p = t(&[0.3, 0.6]);
        let g = t(&[1.0, 0.0]);
        let lg = combined_loss_grad(&p, &g, true).unwrap();
        assert_eq!(lg.loss, combined_loss(&p, &g, true).unwrap());
        assert_eq!(lg.grad.dims(), p.dims());
    }
}
