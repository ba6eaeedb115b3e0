//! Scale-invariant SNR and frame-averaged cross-entropy, in double precision.

use crate::error::{Error, Result};

pub const SI_SNR_EPS: f64 = 1e-8;
const DB: f64 = 10.0 / std::f64::consts::LN_10;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SiSnrOptions {
    pub eps: f64,
    /// Remove the mean of both signals first.
    pub zero_mean: bool,
}

impl Default for SiSnrOptions {
    fn default() -> Self {
        Self { eps: SI_SNR_EPS, zero_mean: true }
    }
}

/// Projection of the estimate onto the reference and the residual.
#[derive(Clone, Debug, PartialEq)]
pub struct SiSnrBreakdown {
    pub s_target: Vec<f64>,
    pub e_noise: Vec<f64>,
    pub value_db: f64,
}

/// Sample types the metric accepts; all arithmetic is in `f64`.
pub trait Sample: Copy + Into<f64> {}
impl Sample for f32 {}
impl Sample for f64 {}

fn prepared<T: Sample>(x: &[T], zero_mean: bool) -> Vec<f64> {
    let mean = if zero_mean { x.iter().map(|&v| v.into()).sum::<f64>() / x.len() as f64 } else { 0.0 };
    x.iter().map(|&v| v.into() - mean).collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn check<T: Sample>(s: &[T], est: &[T]) -> Result<()> {
    if s.len() != est.len() {
        return Err(Error::Shape(format!("reference has {} samples, estimate {}", s.len(), est.len())));
    }
    if s.is_empty() {
        return Err(Error::Shape("empty signals".into()));
    }
    Ok(())
}

/// SI-SNR of `est` against the reference `s`, in dB, with its breakdown.
pub fn si_snr_with<T: Sample>(s: &[T], est: &[T], opts: SiSnrOptions) -> Result<(f64, SiSnrBreakdown)> {
    check(s, est)?;
    let s = prepared(s, opts.zero_mean);
    let x = prepared(est, opts.zero_mean);
    let ss = dot(&s, &s);
    if ss == 0.0 {
        return Err(Error::ZeroEnergy);
    }
    let alpha = dot(&x, &s) / ss;
    let s_target: Vec<f64> = s.iter().map(|v| alpha * v).collect();
    let e_noise: Vec<f64> = x.iter().zip(&s_target).map(|(a, b)| a - b).collect();
    let value_db = 10.0 * ((dot(&s_target, &s_target) + opts.eps) / (dot(&e_noise, &e_noise) + opts.eps)).log10();
    Ok((value_db, SiSnrBreakdown { s_target, e_noise, value_db }))
}

pub fn si_snr<T: Sample>(s: &[T], est: &[T]) -> Result<f64> {
    Ok(si_snr_with(s, est, SiSnrOptions::default())?.0)
}

/// Loss `-SI-SNR` and its gradient with respect to `est`.
pub fn si_snr_loss_grad<T: Sample>(s: &[T], est: &[T], opts: SiSnrOptions) -> Result<(f64, Vec<f64>)> {
    let (value, b) = si_snr_with(s, est, opts)?;
    let a = dot(&b.s_target, &b.s_target) + opts.eps;
    let e = dot(&b.e_noise, &b.e_noise) + opts.eps;
    // d value / d x = DB * (2 s_target / a - 2 e_noise / e) for the prepared estimate x.
    let mut g: Vec<f64> = b.s_target.iter().zip(&b.e_noise).map(|(st, en)| -DB * (2.0 * st / a - 2.0 * en / e)).collect();
    if opts.zero_mean {
        let m = g.iter().sum::<f64>() / g.len() as f64;
        g.iter_mut().for_each(|v| *v -= m);
    }
    Ok((-value, g))
}

/// Mean over frames of `-log softmax(logits_l)[label]` for an `L × C` matrix.
pub fn ce_loss(logits: &[f32], n_classes: usize, label: usize) -> Result<f64> {
    Ok(ce_loss_grad(logits, n_classes, label)?.0)
}

/// Frame-averaged cross-entropy and its gradient with respect to the logits.
pub fn ce_loss_grad(logits: &[f32], n_classes: usize, label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= n_classes {
        return Err(Error::Label { label, classes: n_classes });
    }
    if n_classes == 0 || logits.len() % n_classes != 0 || logits.is_empty() {
        return Err(Error::Shape(format!("{} logits do not form rows of {n_classes}", logits.len())));
    }
    let frames = logits.len() / n_classes;
    let mut loss = 0.0;
    let mut grad = vec![0f64; logits.len()];
    for (row, g) in logits.chunks(n_classes).zip(grad.chunks_mut(n_classes)) {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v as f64));
        let z: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
        loss += z.ln() + max - row[label] as f64;
        for (k, gk) in g.iter_mut().enumerate() {
            let p = (row[k] as f64 - max).exp() / z;
            *gk = (p - if k == label { 1.0 } else { 0.0 }) / frames as f64;
        }
    }
    Ok((loss / frames as f64, grad))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn worked_values() {
        let s = [1.0f32, -1.0];
        assert!((si_snr(&s, &s).unwrap() - 10.0 * ((2.0f64 + 1e-8) / 1e-8).log10()).abs() < 1e-9);
        assert!(si_snr(&s, &[-1.0, 1.0]).unwrap() > 80.0);
        let v = si_snr(&[1.0, -1.0, 0.0, 0.0], &[0.0, 0.0, 1.0, -1.0]).unwrap();
        assert!((v - 10.0 * (1e-8f64 / (2.0 + 1e-8)).log10()).abs() < 1e-9);
        assert!(v < -80.0);
        let (v, b) = si_snr_with(&[1.0, -1.0], &[1.0, 0.0], SiSnrOptions::default()).unwrap();
        assert_eq!(b.s_target, vec![0.5, -0.5]);
        assert_eq!(b.e_noise, vec![0.0, 0.0]);
        assert!((v - 10.0 * ((0.5f64 + 1e-8) / 1e-8).log10()).abs() < 1e-9);
        let unit = [0.5f32, -0.5, 0.5, -0.5];
        assert!((si_snr(&unit, &unit).unwrap() - 80.0).abs() < 1e-6);
    }

    #[test]
    fn errors() {
        assert!(matches!(si_snr(&[1.0, 2.0], &[1.0]), Err(Error::Shape(_))));
        assert!(matches!(si_snr(&[0.3, 0.3], &[1.0, 0.0]), Err(Error::ZeroEnergy)));
        assert!(matches!(ce_loss(&[0.0; 4], 4, 4), Err(Error::Label { .. })));
    }

    #[test]
    fn cross_entropy_values() {
        assert!((ce_loss(&[0.0; 8], 4, 2).unwrap() - 4f64.ln()).abs() < 1e-12);
        assert!(ce_loss(&[0.0, 30.0, 0.0], 3, 1).unwrap() < 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let logits: Vec<f32> = (0..15).map(|_| rng.random_range(-3.0..3.0)).collect();
        let label = 3;
        let mut oracle = 0.0;
        for row in logits.chunks(5) {
            let z: f64 = row.iter().map(|&v| (v as f64).exp()).sum();
            oracle += -((row[label] as f64).exp() / z).ln();
        }
        assert!((ce_loss(&logits, 5, label).unwrap() - oracle / 3.0).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let logits: Vec<f32> = (0..12).map(|_| rng.random_range(-2.0..2.0)).collect();
        let (_, g) = ce_loss_grad(&logits, 4, 1).unwrap();
        for i in 0..12 {
            let h = 1e-2f32;
            let mut p = logits.clone();
            p[i] += h;
            let mut m = logits.clone();
            m[i] -= h;
            let fd = (ce_loss(&p, 4, 1).unwrap() - ce_loss(&m, 4, 1).unwrap()) / (2.0 * h as f64);
            assert!((fd - g[i]).abs() < 1e-4, "{i}: {fd} vs {}", g[i]);
        }
    }

    proptest! {
        #[test]
        fn breakdown_decomposes_the_estimate(
            s in proptest::collection::vec(-1.0f32..1.0, 8..64),
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let est: Vec<f32> = s.iter().map(|_| rng.random_range(-1.0..1.0)).collect();
            let sm = s.iter().map(|&v| v as f64).sum::<f64>() / s.len() as f64;
            prop_assume!(s.iter().map(|&v| (v as f64 - sm).powi(2)).sum::<f64>() > 1e-3);
            let (_, b) = si_snr_with(&s, &est, SiSnrOptions::default()).unwrap();
            let em = est.iter().map(|&v| v as f64).sum::<f64>() / est.len() as f64;
            for i in 0..s.len() {
                prop_assert!((b.s_target[i] + b.e_noise[i] - (est[i] as f64 - em)).abs() < 1e-12);
            }
            // Colinearity: s_target is a multiple of the centred reference.
            let r: Vec<f64> = s.iter().map(|&v| v as f64 - sm).collect();
            let k = dot(&b.s_target, &r) / dot(&r, &r);
            for i in 0..s.len() {
                prop_assert!((b.s_target[i] - k * r[i]).abs() < 1e-12);
            }
        }

        #[test]
        fn positive_rescaling_of_the_estimate_is_invisible(
            s in proptest::collection::vec(-1.0f64..1.0, 16..64),
            est in proptest::collection::vec(-1.0f64..1.0, 64),
            alpha in 0.05f64..20.0,
        ) {
            let est = &est[..s.len()];
            let exact = SiSnrOptions { eps: 0.0, zero_mean: true };
            let scaled: Vec<f64> = est.iter().map(|v| v * alpha).collect();
            let (Ok((a, _)), Ok((b, _))) = (si_snr_with(&s, est, exact), si_snr_with(&s, &scaled, exact)) else {
                return Ok(());
            };
            prop_assert!((a - b).abs() < 1e-9, "{a} vs {b}");
        }

        #[test]
        fn epsilon_bounds_the_rescaling_drift(
            s in proptest::collection::vec(-1.0f64..1.0, 16..64),
            est in proptest::collection::vec(-1.0f64..1.0, 64),
            alpha in 0.05f64..20.0,
        ) {
            let est = &est[..s.len()];
            prop_assume!(si_snr(&s, est).is_ok());
            let scaled: Vec<f64> = est.iter().map(|v| v * alpha).collect();
            let (_, b) = si_snr_with(&s, est, SiSnrOptions::default()).unwrap();
            let (st, en) = (dot(&b.s_target, &b.s_target), dot(&b.e_noise, &b.e_noise));
            prop_assume!(st > 1e-6 && en > 1e-6);
            // First-order effect of eps on 10·log10((S+eps)/(N+eps)) under S,N -> a²S,a²N.
            let bound = 10.0 / std::f64::consts::LN_10 * SI_SNR_EPS * (1.0 / st + 1.0 / en) * (1.0 / (alpha * alpha) - 1.0).abs() * 1.01 + 1e-12;
            prop_assert!((si_snr(&s, est).unwrap() - si_snr(&s, &scaled).unwrap()).abs() <= bound);
        }
    }
}
