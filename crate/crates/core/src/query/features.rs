//! Per-sample valuation: masked class prototypes, the cosine uncertainty
//! score, the pooled image-level feature, and pixel entropy.

use crate::autodiff::{Tape, Tensor, Var, COSINE_EPS};
use crate::error::{dim_err, Error, Result};

/// Segmentation class index: 1 is the lesion, 0 the background.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Class {
    Background = 0,
    Foreground = 1,
}

impl TryFrom<usize> for Class {
    type Error = Error;

    fn try_from(c: usize) -> Result<Self> {
        match c {
            0 => Ok(Class::Background),
            1 => Ok(Class::Foreground),
            other => Err(Error::Usage(format!("class must be 0 or 1, got {other}"))),
        }
    }
}

/// Downsampled foreground probability at feature resolution.
fn foreground_mask(tape: &mut Tape, features: Var, pred: Var) -> Result<Var> {
    let fs = tape.value(features).shape().to_vec();
    if fs.len() != 3 {
        return dim_err(format!("feature map must be [d,h,w], got {fs:?}"));
    }
    tape.downsample_avg(pred, fs[1], fs[2])
}

/// Class prototype on the tape: `mean_{i,j}(mask_c ⊙ features)` per channel,
/// where `mask_1` is the prediction averaged down to feature resolution and
/// `mask_0 = 1 - mask_1`.
pub fn class_feature_var(tape: &mut Tape, features: Var, pred: Var, class: Class) -> Result<Var> {
    let fg = foreground_mask(tape, features, pred)?;
    let mask = match class {
        Class::Foreground => fg,
        Class::Background => tape.complement(fg),
    };
    let masked = tape.mask_channels(features, mask)?;
    tape.spatial_mean(masked)
}

/// Both prototypes `(F_1, F_0)` sharing a single downsampled mask.
pub fn class_feature_pair_var(tape: &mut Tape, features: Var, pred: Var) -> Result<(Var, Var)> {
    let fg = foreground_mask(tape, features, pred)?;
    let bg = tape.complement(fg);
    let m1 = tape.mask_channels(features, fg)?;
    let m0 = tape.mask_channels(features, bg)?;
    Ok((tape.spatial_mean(m1)?, tape.spatial_mean(m0)?))
}

/// Cosine between the two class prototypes, on the tape.
pub fn uncertainty_var(tape: &mut Tape, features: Var, pred: Var) -> Result<Var> {
    let (f1, f0) = class_feature_pair_var(tape, features, pred)?;
    tape.cosine_similarity(f1, f0, COSINE_EPS)
}

pub fn class_feature(features: &Tensor, pred: &Tensor, class: usize) -> Result<Vec<f64>> {
    let class = Class::try_from(class)?;
    let mut tape = Tape::new();
    let (f, p) = (tape.constant(features.clone()), tape.constant(pred.clone()));
    let out = class_feature_var(&mut tape, f, p, class)?;
    Ok(tape.value(out).data().to_vec())
}

/// Uncertainty score `cos(F_1, F_0)`; high means the two classes look alike.
pub fn uncertainty_score(features: &Tensor, pred: &Tensor) -> Result<f64> {
    let mut tape = Tape::new();
    let (f, p) = (tape.constant(features.clone()), tape.constant(pred.clone()));
    let out = uncertainty_var(&mut tape, f, p)?;
    Ok(tape.value(out).item())
}

/// Image-level descriptor: spatial mean of the encoder feature map.
pub fn image_feature(features: &Tensor) -> Result<Vec<f64>> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone());
    let out = tape.spatial_mean(f)?;
    Ok(tape.value(out).data().to_vec())
}

/// Mean binary entropy of a probability map, with `0 ln 0 = 0`.
pub fn entropy_score(pred: &Tensor) -> f64 {
    let xlnx = |p: f64| if p <= 0.0 { 0.0 } else { p * p.ln() };
    let total: f64 = pred.data().iter().map(|&p| -(xlnx(p) + xlnx(1.0 - p))).sum();
    total / pred.len().max(1) as f64
}
