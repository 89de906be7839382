//! Training objectives over `[n, 1, h, w]` predictions `P` and targets `E`.
//!
//! Each loss is summed over the pixels of a scene and averaged over the
//! batch unless `per_pixel_mean` is set. Targets and masks are constants.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Graph, Real, Var};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Sharpness of the smooth step.
    pub beta: f64,
    pub hard_weight: f64,
    pub unseen_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { beta: 100.0, hard_weight: 1000.0, unseen_weight: 1000.0 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if !(self.beta > 0.0 && self.beta.is_finite()) {
            return Err(Error::Config("beta must be positive".into()));
        }
        if !(self.hard_weight >= 0.0 && self.unseen_weight >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        Ok(())
    }
}

/// Which terms enter the total; disabled terms are still evaluated for logging.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LossTerms {
    pub hard: bool,
    pub soft: bool,
    pub unseen: bool,
    /// Divide by the pixel count as well as the batch size.
    pub per_pixel_mean: bool,
}

impl Default for LossTerms {
    fn default() -> Self {
        Self { hard: true, soft: true, unseen: true, per_pixel_mean: false }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LossParts {
    pub rec: Var,
    pub hard: Var,
    pub soft: Var,
    pub unseen: Var,
    pub total: Var,
}

#[inline]
pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn normalize<T: Real>(g: &mut Graph<T>, sum: Var, like: Var, per_pixel: bool) -> Var {
    let [n, c, h, w] = g.shape(like);
    let denom = if per_pixel { n * c * h * w } else { n };
    g.scale(sum, T::one() / T::from_usize(denom).unwrap())
}

fn check<T: Real>(g: &Graph<T>, a: Var, b: Var, what: &str) -> Result<()> {
    if g.shape(a) != g.shape(b) {
        return Err(Error::Shape(format!("{what}: {:?} vs {:?}", g.shape(a), g.shape(b))));
    }
    Ok(())
}

/// `Σ (P − E)²`.
pub fn rec_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, per_pixel: bool) -> Result<Var> {
    check(g, pred, target, "rec_loss")?;
    let d = g.sub(pred, target)?;
    let sq = g.mul(d, d)?;
    let s = g.sum(sq);
    Ok(normalize(g, s, pred, per_pixel))
}

fn smooth_late<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, beta: f64) -> Result<Var> {
    let d = g.sub(pred, target)?;
    let z = g.scale(d, T::lit(beta));
    Ok(g.sigmoid(z))
}

/// `Σ σ(β (P − E))`, the smooth count of late pixels.
pub fn hard_smooth<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, beta: f64, per_pixel: bool) -> Result<Var> {
    check(g, pred, target, "hard_smooth")?;
    let s = smooth_late(g, pred, target, beta)?;
    let s = g.sum(s);
    Ok(normalize(g, s, pred, per_pixel))
}

/// `−Σ P`.
pub fn soft_loss<T: Real>(g: &mut Graph<T>, pred: Var, per_pixel: bool) -> Var {
    let s = g.sum(pred);
    let s = g.scale(s, -T::one());
    normalize(g, s, pred, per_pixel)
}

/// `Σ M · σ(β (P − E))`.
pub fn unseen_loss<T: Real>(g: &mut Graph<T>, pred: Var, target: Var, mask: Var, beta: f64, per_pixel: bool) -> Result<Var> {
    check(g, pred, target, "unseen_loss")?;
    check(g, pred, mask, "unseen_loss mask")?;
    let s = smooth_late(g, pred, target, beta)?;
    let s = g.mul(s, mask)?;
    let s = g.sum(s);
    Ok(normalize(g, s, pred, per_pixel))
}

/// `L_rec + γ_h L_h + L_s + γ_u L_u` with the smooth forms of `L_h` and `L_u`.
pub fn total_loss<T: Real>(
    g: &mut Graph<T>,
    pred: Var,
    target: Var,
    mask: Var,
    weights: &LossWeights,
    terms: &LossTerms,
) -> Result<LossParts> {
    weights.validate()?;
    let pp = terms.per_pixel_mean;
    let rec = rec_loss(g, pred, target, pp)?;
    let hard = hard_smooth(g, pred, target, weights.beta, pp)?;
    let soft = soft_loss(g, pred, pp);
    let unseen = unseen_loss(g, pred, target, mask, weights.beta, pp)?;
    let mut total = rec;
    if terms.hard {
        let h = g.scale(hard, T::lit(weights.hard_weight));
        total = g.add(total, h)?;
    }
    if terms.soft {
        total = g.add(total, soft)?;
    }
    if terms.unseen {
        let u = g.scale(unseen, T::lit(weights.unseen_weight));
        total = g.add(total, u)?;
    }
    Ok(LossParts { rec, hard, soft, unseen, total })
}

/// Number of pixels with `P > E`.
pub fn hard_exact(pred: &[f32], target: &[f32]) -> Result<usize> {
    if pred.len() != target.len() {
        return Err(Error::Shape(format!("hard_exact: {} vs {} pixels", pred.len(), target.len())));
    }
    Ok(pred.iter().zip(target).filter(|(p, e)| p > e).count())
}

/// Number of masked pixels with `P > E`.
pub fn unseen_exact(pred: &[f32], target: &[f32], mask: &[u8]) -> Result<usize> {
    if pred.len() != target.len() || pred.len() != mask.len() {
        return Err(Error::Shape("unseen_exact: mismatched lengths".into()));
    }
    Ok(pred.iter().zip(target).zip(mask).filter(|((p, e), &m)| m != 0 && p > e).count())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradient_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn consts(g: &mut Graph<f64>, v: Vec<f64>, h: usize, w: usize) -> Var {
        g.constant(v, [1, 1, h, w]).unwrap()
    }

    #[test]
    fn logistic_values() {
        assert!((logistic(10.0) - 0.9999546).abs() < 1e-6);
        assert!((logistic(-10.0) - 4.54e-5).abs() < 1e-7);
        assert_eq!(logistic(0.0), 0.5);
    }

    #[test]
    fn rec_and_soft_hand_cases() {
        let mut g = Graph::<f64>::new();
        let e = consts(&mut g, vec![3.0; 12], 3, 4);
        let p = g.add_scalar(e, 1.0);
        let r = rec_loss(&mut g, p, e, false).unwrap();
        assert_eq!(g.scalar(r), 12.0);
        let r = rec_loss(&mut g, e, e, false).unwrap();
        assert_eq!(g.scalar(r), 0.0);
        let t = consts(&mut g, vec![30.0; 12], 3, 4);
        let s = soft_loss(&mut g, t, false);
        assert_eq!(g.scalar(s), -360.0);

        let pv = vec![0.5, -1.0, 2.0, 4.0, 0.0, 1.5, -0.5, 3.0, 2.5];
        let ev = vec![1.0, 1.0, 1.0, 2.0, 2.0, 2.0, 0.0, 0.0, 0.0];
        let want: f64 = pv.iter().zip(&ev).map(|(p, e)| (p - e) * (p - e)).sum();
        let p = consts(&mut g, pv, 3, 3);
        let e = consts(&mut g, ev, 3, 3);
        let r = rec_loss(&mut g, p, e, false).unwrap();
        assert_eq!(g.scalar(r), want);
    }

    #[test]
    fn soft_gradient_is_minus_one() {
        let mut g = Graph::<f64>::new();
        let p = g.param(vec![0.3, 7.0, 29.0, 12.0], [1, 1, 2, 2]).unwrap();
        let s = soft_loss(&mut g, p, false);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(p).unwrap().iter().all(|&d| d == -1.0));
    }

    #[test]
    fn hard_smooth_hand_cases() {
        let mut g = Graph::<f64>::new();
        let e = consts(&mut g, vec![5.0; 6], 2, 3);
        let h = hard_smooth(&mut g, e, e, 100.0, false).unwrap();
        assert_eq!(g.scalar(h), 3.0);
        let p = consts(&mut g, vec![5.1], 1, 1);
        let e1 = consts(&mut g, vec![5.0], 1, 1);
        let h = hard_smooth(&mut g, p, e1, 100.0, false).unwrap();
        assert!((g.scalar(h) - 0.9999546).abs() < 1e-6);
        let p = consts(&mut g, vec![4.9], 1, 1);
        let h = hard_smooth(&mut g, p, e1, 100.0, false).unwrap();
        assert!((g.scalar(h) - 4.54e-5).abs() < 1e-7);
    }

    #[test]
    fn hard_exact_counts() {
        let e = vec![3.0f32; 100];
        assert_eq!(hard_exact(&e, &e).unwrap(), 0);
        let p: Vec<f32> = e.iter().map(|v| v + 0.5).collect();
        assert_eq!(hard_exact(&p, &e).unwrap(), 100);
        let p = [1.0, 5.0, 2.0, 9.0, 0.0, 4.0];
        let e = [1.0, 4.0, 3.0, 8.0, 0.0, 3.5];
        assert_eq!(hard_exact(&p, &e).unwrap(), 3);
        assert!(hard_exact(&p, &e[..2]).is_err());
    }

    #[test]
    fn unseen_masking() {
        let mut g = Graph::<f64>::new();
        let pv = vec![2.0, 2.0, 2.0, 2.0, 0.0, 0.0];
        let ev = vec![1.0, 1.0, 1.0, 1.0, 1.0, 1.0];
        let p = consts(&mut g, pv, 2, 3);
        let e = consts(&mut g, ev, 2, 3);
        let zero = consts(&mut g, vec![0.0; 6], 2, 3);
        let u = unseen_loss(&mut g, p, e, zero, 100.0, false).unwrap();
        assert_eq!(g.scalar(u), 0.0);
        let ones = consts(&mut g, vec![1.0; 6], 2, 3);
        let u = unseen_loss(&mut g, p, e, ones, 100.0, false).unwrap();
        let h = hard_smooth(&mut g, p, e, 100.0, false).unwrap();
        assert_eq!(g.scalar(u), g.scalar(h));
        // mask covers two of the four late pixels
        let half = consts(&mut g, vec![1.0, 0.0, 1.0, 0.0, 0.0, 0.0], 2, 3);
        let u = unseen_loss(&mut g, p, e, half, 100.0, false).unwrap();
        let late = 4.0 * logistic(100.0);
        assert!((g.scalar(u) - late / 2.0).abs() < 1e-12);
    }

    #[test]
    fn total_composition() {
        let mut g = Graph::<f64>::new();
        let e = consts(&mut g, vec![4.0; 20], 4, 5);
        let m = consts(&mut g, vec![0.0; 20], 4, 5);
        let w = LossWeights::default();
        let parts = total_loss(&mut g, e, e, m, &w, &LossTerms::default()).unwrap();
        // rec 0, hard 10, soft -80, unseen 0
        assert_eq!(g.scalar(parts.total), 0.5 * 1000.0 * 20.0 - 80.0);

        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..10 {
            let pv: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(0.0..30.0)).collect();
            let ev: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(0..=30) as f64).collect();
            let mv: Vec<f64> = (0..2 * 9).map(|_| rng.gen_range(0..2) as f64).collect();
            let mut g = Graph::<f64>::new();
            let p = g.constant(pv.clone(), [2, 1, 3, 3]).unwrap();
            let e = g.constant(ev.clone(), [2, 1, 3, 3]).unwrap();
            let m = g.constant(mv.clone(), [2, 1, 3, 3]).unwrap();
            let parts = total_loss(&mut g, p, e, m, &w, &LossTerms::default()).unwrap();
            let mut want = 0.0;
            for i in 0..18 {
                let late = logistic(100.0 * (pv[i] - ev[i]));
                want += (pv[i] - ev[i]).powi(2) + 1000.0 * late - pv[i] + 1000.0 * mv[i] * late;
            }
            want /= 2.0;
            assert!((g.scalar(parts.total) - want).abs() < 1e-9);

            let no_hard = LossTerms { hard: false, ..LossTerms::default() };
            let parts2 = total_loss(&mut g, p, e, m, &w, &no_hard).unwrap();
            let dropped = g.scalar(parts.total) - g.scalar(parts2.total);
            assert!((dropped - 1000.0 * g.scalar(parts.hard)).abs() < 1e-6);
        }
    }

    #[test]
    fn total_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let ev: Vec<f64> = (0..8).map(|_| rng.gen_range(0..=30) as f64).collect();
        let mv: Vec<f64> = (0..8).map(|_| rng.gen_range(0..2) as f64).collect();
        // keep |P − E| away from zero so the steep step stays resolvable
        let pv: Vec<f64> = ev.iter().map(|e| e + if rng.gen() { 0.03 } else { -0.04 }).collect();
        let r = gradient_check(&[(pv, [2, 1, 2, 2])], 1e-5, |g, v| {
            let e = g.constant(ev.clone(), [2, 1, 2, 2])?;
            let m = g.constant(mv.clone(), [2, 1, 2, 2])?;
            Ok(total_loss(g, v[0], e, m, &LossWeights::default(), &LossTerms::default())?.total)
        })
        .unwrap();
        assert!(r.max_rel_error < 1e-4, "{r:?}");
    }
}
