//! Training objectives: supervised BCE + Dice on labeled samples plus the
//! feature discrepancy hinge on unlabeled samples.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model;
use crate::query::uncertainty_var;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Hinge margin on the prototype cosine.
    pub delta: f64,
    /// Weight of the discrepancy term in the total loss.
    pub lambda_c: f64,
    pub dice_smooth: f64,
    pub bce_clamp_eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            delta: 0.2,
            lambda_c: 0.1,
            dice_smooth: 1.0,
            bce_clamp_eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let mut bad = Vec::new();
        if !(0.0..1.0).contains(&self.delta) {
            bad.push(format!("loss.delta must be in [0, 1), got {}", self.delta));
        }
        if self.lambda_c.is_nan() || self.lambda_c < 0.0 {
            bad.push(format!("loss.lambda_c must be >= 0, got {}", self.lambda_c));
        }
        if self.dice_smooth.is_nan() || self.dice_smooth <= 0.0 {
            bad.push(format!("loss.dice_smooth must be > 0, got {}", self.dice_smooth));
        }
        if !(self.bce_clamp_eps > 0.0 && self.bce_clamp_eps < 0.5) {
            bad.push(format!("loss.bce_clamp_eps must be in (0, 0.5), got {}", self.bce_clamp_eps));
        }
        if bad.is_empty() {
            Ok(())
        } else {
            Err(Error::Validation(bad))
        }
    }
}

pub fn bce_loss(tape: &mut Tape, pred: Var, target: &[f64], cfg: &LossConfig) -> Result<Var> {
    tape.bce(pred, target, cfg.bce_clamp_eps)
}

pub fn dice_loss(tape: &mut Tape, pred: Var, target: &[f64], smooth: f64) -> Result<Var> {
    tape.dice(pred, target, smooth)
}

/// BCE + Dice for one prediction.
pub fn seg_loss(tape: &mut Tape, pred: Var, target: &[f64], cfg: &LossConfig) -> Result<Var> {
    let b = bce_loss(tape, pred, target, cfg)?;
    let d = dice_loss(tape, pred, target, cfg.dice_smooth)?;
    tape.add(b, d)
}

/// `max(0, cos(F_1, F_0) - delta)` for one unlabeled sample.
pub fn fdl_loss(tape: &mut Tape, features: Var, pred: Var, cfg: &LossConfig) -> Result<Var> {
    let cos = uncertainty_var(tape, features, pred)?;
    let shifted = tape.affine(cos, 1.0, -cfg.delta);
    Ok(tape.relu(shifted))
}

/// Mean of scalar vars; `None` for an empty list.
pub fn batch_mean(tape: &mut Tape, terms: &[Var]) -> Result<Option<Var>> {
    let Some((&first, rest)) = terms.split_first() else {
        return Ok(None);
    };
    let mut acc = first;
    for &t in rest {
        acc = tape.add(acc, t)?;
    }
    Ok(Some(tape.scale(acc, 1.0 / terms.len() as f64)))
}

/// One labeled training pair as seen by the loss.
#[derive(Clone, Copy, Debug)]
pub struct LabeledRef<'a> {
    pub image: &'a Tensor,
    pub target: &'a [f64],
}

/// Breakdown of a [`total_loss`] evaluation.
#[derive(Clone, Copy, Debug)]
pub struct TotalLoss {
    pub total: Var,
    pub seg: Var,
    pub fdl: Option<Var>,
}

/// `mean seg_loss(labeled) + lambda_c * mean fdl_loss(unlabeled)` through
/// the model whose parameters are `params` on `tape`.
///
/// The unlabeled forward passes are skipped entirely when `lambda_c == 0`.
pub fn total_loss(
    tape: &mut Tape,
    params: &[Var],
    labeled: &[LabeledRef<'_>],
    unlabeled: &[&Tensor],
    cfg: &LossConfig,
) -> Result<TotalLoss> {
    if labeled.is_empty() {
        return Err(Error::Usage("total_loss needs at least one labeled sample".into()));
    }
    let mut seg_terms = Vec::with_capacity(labeled.len());
    for item in labeled {
        let out = model::forward(tape, params, item.image)?;
        seg_terms.push(seg_loss(tape, out.prediction, item.target, cfg)?);
    }
    let seg = batch_mean(tape, &seg_terms)?.expect("non-empty");

    if cfg.lambda_c == 0.0 || unlabeled.is_empty() {
        return Ok(TotalLoss {
            total: seg,
            seg,
            fdl: None,
        });
    }
    let mut fdl_terms = Vec::with_capacity(unlabeled.len());
    for image in unlabeled {
        let out = model::forward(tape, params, image)?;
        fdl_terms.push(fdl_loss(tape, out.features, out.prediction, cfg)?);
    }
    let fdl = batch_mean(tape, &fdl_terms)?.expect("non-empty");
    let weighted = tape.scale(fdl, cfg.lambda_c);
    let total = tape.add(seg, weighted)?;
    Ok(TotalLoss {
        total,
        seg,
        fdl: Some(fdl),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::{cosine_value, finite_difference_check};
    use crate::model::{ArchConfig, ModelParams};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn eval(build: impl FnOnce(&mut Tape) -> Result<Var>) -> f64 {
        let mut t = Tape::new();
        let v = build(&mut t).unwrap();
        t.value(v).item()
    }

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(lo..hi)).collect()
    }

    fn binary(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| if rng.random_bool(0.4) { 1.0 } else { 0.0 }).collect()
    }

    #[test]
    fn config_validation_lists_fields() {
        assert!(LossConfig::default().validate().is_ok());
        let bad = LossConfig {
            delta: 1.0,
            lambda_c: -1.0,
            dice_smooth: 0.0,
            bce_clamp_eps: 0.7,
        };
        match bad.validate() {
            Err(Error::Validation(v)) => assert_eq!(v.len(), 4),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn bce_examples() {
        let cfg = LossConfig::default();
        let y = [1.0, 0.0, 1.0, 0.0];
        let perfect = eval(|t| {
            let p = t.constant(Tensor::from_vec(y.to_vec()));
            bce_loss(t, p, &y, &cfg)
        });
        assert!(perfect <= -(1.0 - cfg.bce_clamp_eps).ln() + 1e-15);
        let half = eval(|t| {
            let p = t.constant(Tensor::full(&[4], 0.5));
            bce_loss(t, p, &y, &cfg)
        });
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = rand_vec(&mut rng, 16, 0.01, 0.99);
        let y = binary(&mut rng, 16);
        let direct: f64 = p
            .iter()
            .zip(&y)
            .map(|(p, y)| -(y * p.ln() + (1.0 - y) * (1.0 - p).ln()))
            .sum::<f64>()
            / 16.0;
        let got = eval(|t| {
            let pv = t.constant(Tensor::new(vec![4, 4], p.clone()).unwrap());
            bce_loss(t, pv, &y, &cfg)
        });
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn dice_examples() {
        let y = [1.0, 0.0, 1.0, 1.0];
        let perfect = eval(|t| {
            let p = t.constant(Tensor::from_vec(y.to_vec()));
            dice_loss(t, p, &y, 1.0)
        });
        assert_eq!(perfect, 0.0);
        let n = 25;
        let miss = eval(|t| {
            let p = t.constant(Tensor::zeros(&[n]));
            dice_loss(t, p, &vec![1.0; n], 1.0)
        });
        assert!((miss - (1.0 - 1.0 / (n as f64 + 1.0))).abs() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = rand_vec(&mut rng, 16, 0.0, 1.0);
        let y = binary(&mut rng, 16);
        let inter: f64 = p.iter().zip(&y).map(|(a, b)| a * b).sum();
        let direct = 1.0 - (2.0 * inter + 1.0) / (p.iter().sum::<f64>() + y.iter().sum::<f64>() + 1.0);
        let got = eval(|t| {
            let pv = t.constant(Tensor::from_vec(p.clone()));
            dice_loss(t, pv, &y, 1.0)
        });
        assert!((got - direct).abs() < 1e-12);
    }

    #[test]
    fn seg_loss_is_additive() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let p = rand_vec(&mut rng, 9, 0.05, 0.95);
        let y = binary(&mut rng, 9);
        let mut t = Tape::new();
        let pv = t.constant(Tensor::from_vec(p));
        let s = seg_loss(&mut t, pv, &y, &cfg).unwrap();
        let b = bce_loss(&mut t, pv, &y, &cfg).unwrap();
        let d = dice_loss(&mut t, pv, &y, cfg.dice_smooth).unwrap();
        assert_eq!(t.value(s).item(), t.value(b).item() + t.value(d).item());

        let perfect = eval(|t| {
            let p = t.constant(Tensor::from_vec(y.clone()));
            seg_loss(t, p, &y, &cfg)
        });
        assert!(perfect < 1e-6);
    }

    #[test]
    fn fdl_on_half_prediction_is_one_minus_delta() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = Tensor::new(vec![4, 2, 2], rand_vec(&mut rng, 16, 0.0, 2.0)).unwrap();
        let v = eval(|t| {
            let fv = t.constant(f.clone());
            let p = t.constant(Tensor::full(&[8, 8], 0.5));
            fdl_loss(t, fv, p, &cfg)
        });
        assert_eq!(v, 1.0 - 0.2);
        assert_eq!(v, 0.8);
    }

    #[test]
    fn fdl_hinge_inactive_for_orthogonal_prototypes() {
        // Foreground (top row) lights channel 0, background (bottom row) channel 1.
        let f = Tensor::new(vec![2, 2, 1], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let p = Tensor::new(vec![8, 4], [[1.0; 16], [0.0; 16]].concat()).unwrap();
        let v = eval(|t| {
            let fv = t.constant(f);
            let pv = t.constant(p);
            fdl_loss(t, fv, pv, &LossConfig::default())
        });
        assert_eq!(v, 0.0);
    }

    #[test]
    fn fdl_matches_composed_oracle() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let (d, h, w) = (5, 2, 3);
            let f = rand_vec(&mut rng, d * h * w, 0.0, 1.0);
            let p = rand_vec(&mut rng, 4 * h * 4 * w, 0.0, 1.0);
            // mask -> pool -> cosine -> hinge by hand.
            let mut f1 = vec![0.0; d];
            let mut f0 = vec![0.0; d];
            for i in 0..h {
                for j in 0..w {
                    let mut m = 0.0;
                    for y in 0..4 {
                        for x in 0..4 {
                            m += p[(i * 4 + y) * 4 * w + j * 4 + x];
                        }
                    }
                    m /= 16.0;
                    for c in 0..d {
                        f1[c] += m * f[(c * h + i) * w + j] / (h * w) as f64;
                        f0[c] += (1.0 - m) * f[(c * h + i) * w + j] / (h * w) as f64;
                    }
                }
            }
            let expect = (cosine_value(&f1, &f0, 1e-12) - cfg.delta).max(0.0);
            let got = eval(|t| {
                let fv = t.constant(Tensor::new(vec![d, h, w], f.clone()).unwrap());
                let pv = t.constant(Tensor::new(vec![4 * h, 4 * w], p.clone()).unwrap());
                fdl_loss(t, fv, pv, &cfg)
            });
            assert!((got - expect).abs() < 1e-12);
        }
    }

    #[test]
    fn total_loss_arithmetic_and_ablation() {
        let params = ModelParams::init(&ArchConfig::default(), 9);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let img = Tensor::new(vec![3, 8, 8], rand_vec(&mut rng, 192, 0.0, 1.0)).unwrap();
        let un = Tensor::new(vec![3, 8, 8], rand_vec(&mut rng, 192, 0.0, 1.0)).unwrap();
        let y = binary(&mut rng, 64);
        let labeled = [LabeledRef { image: &img, target: &y }];

        let cfg = LossConfig::default();
        let mut t = Tape::new();
        let vars = params.register(&mut t, true);
        let out = total_loss(&mut t, &vars, &labeled, &[&un], &cfg).unwrap();
        let (total, seg, fdl) = (
            t.value(out.total).item(),
            t.value(out.seg).item(),
            t.value(out.fdl.unwrap()).item(),
        );
        assert_eq!(total, seg + 0.1 * fdl);

        let off = LossConfig { lambda_c: 0.0, ..cfg };
        let mut t = Tape::new();
        let vars = params.register(&mut t, true);
        let out = total_loss(&mut t, &vars, &labeled, &[&un], &off).unwrap();
        assert_eq!(t.value(out.total).item(), seg);

        let mut t = Tape::new();
        let vars = params.register(&mut t, true);
        assert!(matches!(total_loss(&mut t, &vars, &[], &[&un], &cfg), Err(Error::Usage(_))));
        let only_seg = total_loss(&mut t, &vars, &labeled, &[], &cfg).unwrap();
        assert!(only_seg.fdl.is_none());
    }

    #[test]
    fn dice_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let logits = Tensor::from_vec(rand_vec(&mut rng, 16, -2.0, 2.0));
        let y = binary(&mut rng, 16);
        let r = finite_difference_check(
            |t, v| {
                let p = t.sigmoid(v[0]);
                dice_loss(t, p, &y, 1.0)
            },
            &[logits],
            1e-5,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
    }

    #[test]
    fn fdl_gradient_matches_finite_differences() {
        let cfg = LossConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let mut checked = 0;
        while checked < 5 {
            let f = Tensor::new(vec![4, 2, 2], rand_vec(&mut rng, 16, 0.0, 1.0)).unwrap();
            let logits = Tensor::new(vec![8, 8], rand_vec(&mut rng, 64, -1.0, 1.0)).unwrap();
            let build = |t: &mut Tape, v: &[Var]| {
                let p = t.sigmoid(v[1]);
                fdl_loss(t, v[0], p, &cfg)
            };
            let value = eval(|t| {
                let v = [t.constant(f.clone()), t.constant(logits.clone())];
                build(t, &v)
            });
            if value <= 0.0 {
                continue;
            }
            let r = finite_difference_check(build, &[f, logits], 1e-5).unwrap();
            assert!(r.max_rel_error < 1e-4, "{r:?}");
            checked += 1;
        }
    }

    proptest! {
        #[test]
        fn fdl_bounded_and_scale_invariant(
            f in prop::collection::vec(0.0f64..3.0, 12),
            p in prop::collection::vec(0.0f64..1.0, 48),
            scale in 1e-3f64..1e3,
        ) {
            let cfg = LossConfig::default();
            let run = |feat: Vec<f64>| eval(|t| {
                let fv = t.constant(Tensor::new(vec![3, 2, 2], feat).unwrap());
                let pv = t.constant(Tensor::new(vec![8, 6], p.clone()).unwrap());
                fdl_loss(t, fv, pv, &cfg)
            });
            let base = run(f.clone());
            prop_assert!((0.0..=1.0 - cfg.delta).contains(&base));
            let scaled = run(f.iter().map(|v| v * scale).collect());
            prop_assert!((base - scaled).abs() < 1e-9);
        }

        #[test]
        fn dice_and_bce_ranges(
            p in prop::collection::vec(0.0f64..1.0, 10),
            y in prop::collection::vec(prop::bool::ANY, 10),
        ) {
            let cfg = LossConfig::default();
            let y: Vec<f64> = y.into_iter().map(|b| b as u8 as f64).collect();
            let d = eval(|t| { let v = t.constant(Tensor::from_vec(p.clone())); dice_loss(t, v, &y, 1.0) });
            let b = eval(|t| { let v = t.constant(Tensor::from_vec(p.clone())); bce_loss(t, v, &y, &cfg) });
            prop_assert!((0.0..1.0).contains(&d));
            prop_assert!(b >= 0.0);
        }
    }
}
