//! Differential-privacy mechanism for feature batches: noise calibration from
//! the privacy budget, sensitivity enforcement by per-row norm clipping, and
//! elementwise perturbation.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NoiseKind {
    Gaussian,
    Laplace,
}

impl std::fmt::Display for NoiseKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            NoiseKind::Gaussian => write!(f, "gaussian"),
            NoiseKind::Laplace => write!(f, "laplace"),
        }
    }
}

/// (epsilon, delta, sensitivity, kind). Delta only applies to the Gaussian
/// mechanism.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PrivacyBudget {
    pub epsilon: f64,
    pub delta: Option<f64>,
    pub sensitivity: f64,
    pub kind: NoiseKind,
}

impl PrivacyBudget {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0) {
            return Err(Error::Config(format!(
                "epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        if !(self.sensitivity > 0.0) {
            return Err(Error::Config(format!(
                "sensitivity must be positive, got {}",
                self.sensitivity
            )));
        }
        if self.kind == NoiseKind::Gaussian {
            match self.delta {
                Some(d) if d > 0.0 && d < 1.0 => {}
                Some(d) => {
                    return Err(Error::Config(format!(
                        "delta must be in (0,1), got {}",
                        d
                    )))
                }
                None => {
                    return Err(Error::Config(
                        "the Gaussian mechanism requires delta".into(),
                    ))
                }
            }
        }
        Ok(())
    }
}

/// Calibrated noise magnitude, remembering where it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseScale {
    Gaussian { sigma: f64 },
    Laplace { lambda: f64 },
}

impl NoiseScale {
    pub fn magnitude(&self) -> f64 {
        match self {
            NoiseScale::Gaussian { sigma } => *sigma,
            NoiseScale::Laplace { lambda } => *lambda,
        }
    }

    pub fn is_zero(&self) -> bool {
        self.magnitude() == 0.0
    }
}

/// sigma = sqrt(2 Delta^2 ln(1/delta)) / epsilon for Gaussian,
/// lambda = Delta / epsilon for Laplace.
pub fn noise_scale(budget: &PrivacyBudget) -> Result<NoiseScale> {
    budget.validate()?;
    match budget.kind {
        NoiseKind::Gaussian => {
            let delta = budget.delta.expect("validated above");
            let var = 2.0 * budget.sensitivity * budget.sensitivity * (1.0 / delta).ln()
                / (budget.epsilon * budget.epsilon);
            Ok(NoiseScale::Gaussian { sigma: var.sqrt() })
        }
        NoiseKind::Laplace => Ok(NoiseScale::Laplace {
            lambda: budget.sensitivity / budget.epsilon,
        }),
    }
}

fn row_norm(row: &[f64], kind: NoiseKind) -> f64 {
    match kind {
        NoiseKind::Gaussian => row.iter().map(|v| v * v).sum::<f64>().sqrt(),
        NoiseKind::Laplace => row.iter().map(|v| v.abs()).sum(),
    }
}

/// What the backward pass needs to differentiate through the clipping map.
pub struct ClipCache {
    kind: NoiseKind,
    sensitivity: f64,
    norms: Vec<f64>,
    original: Tensor,
}

/// Per-row norm clipping: row <- row * min(1, Delta / ||row||), L2 norm for
/// the Gaussian mechanism, L1 for Laplace. Rows already inside the ball are
/// returned bit-exactly.
pub fn clip_features(features: &Tensor, sensitivity: f64, kind: NoiseKind) -> Tensor {
    clip_features_with_cache(features, sensitivity, kind).0
}

pub fn clip_features_with_cache(
    features: &Tensor,
    sensitivity: f64,
    kind: NoiseKind,
) -> (Tensor, ClipCache) {
    let mut out = features.clone();
    let mut norms = Vec::with_capacity(features.rows());
    for r in 0..features.rows() {
        let norm = row_norm(features.row(r), kind);
        norms.push(norm);
        if norm > sensitivity {
            let scale = sensitivity / norm;
            for v in out.row_mut(r) {
                *v *= scale;
            }
        }
    }
    (
        out,
        ClipCache {
            kind,
            sensitivity,
            norms,
            original: features.clone(),
        },
    )
}

/// Pull a gradient back through [`clip_features`]. Inside the ball the map is
/// the identity; on a clipped row the Jacobian of r * Delta/||r|| applies.
pub fn clip_backward(grad: &Tensor, cache: &ClipCache) -> Tensor {
    let mut out = grad.clone();
    for r in 0..grad.rows() {
        let norm = cache.norms[r];
        if norm <= cache.sensitivity {
            continue;
        }
        let row = cache.original.row(r);
        let g = grad.row(r);
        let dot: f64 = row.iter().zip(g).map(|(a, b)| a * b).sum();
        let scale = cache.sensitivity / norm;
        let orow = out.row_mut(r);
        match cache.kind {
            NoiseKind::Gaussian => {
                // d/dr [Delta r / ||r||2] = Delta/||r|| (I - r r^T / ||r||^2)
                let corr = dot / (norm * norm);
                for (o, (gv, rv)) in orow.iter_mut().zip(g.iter().zip(row)) {
                    *o = scale * (gv - rv * corr);
                }
            }
            NoiseKind::Laplace => {
                // d/dr_k [s r], s = Delta/||r||1: s g_k - (Delta sign(r_k)/||r||1^2) (r . g)
                let corr = cache.sensitivity * dot / (norm * norm);
                for (o, (gv, rv)) in orow.iter_mut().zip(g.iter().zip(row)) {
                    *o = scale * gv - rv.signum() * corr;
                }
            }
        }
    }
    out
}

/// Add i.i.d. noise per element. A zero scale returns the input bit-exactly
/// and draws nothing from the generator.
pub fn perturb_features<R: Rng>(features: &Tensor, scale: &NoiseScale, rng: &mut R) -> Tensor {
    if scale.is_zero() {
        return features.clone();
    }
    let mut out = features.clone();
    match scale {
        NoiseScale::Gaussian { sigma } => {
            let dist = Normal::new(0.0, *sigma).expect("sigma finite");
            for v in out.data_mut() {
                *v += dist.sample(rng);
            }
        }
        NoiseScale::Laplace { lambda } => {
            // Inverse-CDF sampling from a uniform stream keeps the draw
            // reproducible across platforms.
            for v in out.data_mut() {
                let u: f64 = rng.gen::<f64>() - 0.5;
                let mag = -lambda * (1.0 - 2.0 * u.abs()).ln();
                *v += if u < 0.0 { -mag } else { mag };
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian(eps: f64, delta: f64) -> PrivacyBudget {
        PrivacyBudget {
            epsilon: eps,
            delta: Some(delta),
            sensitivity: 1.0,
            kind: NoiseKind::Gaussian,
        }
    }

    #[test]
    fn laplace_scale_is_sensitivity_over_epsilon() {
        let b = PrivacyBudget {
            epsilon: 1.0,
            delta: None,
            sensitivity: 1.0,
            kind: NoiseKind::Laplace,
        };
        match noise_scale(&b).unwrap() {
            NoiseScale::Laplace { lambda } => assert_eq!(lambda, 1.0),
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn gaussian_scale_matches_hand_evaluation() {
        // eps=2, delta=1e-5, Delta=1: sigma^2 = 2 ln(1e5) / 4
        match noise_scale(&gaussian(2.0, 1e-5)).unwrap() {
            NoiseScale::Gaussian { sigma } => {
                assert!((sigma * sigma - 5.756462732485115).abs() < 1e-9);
                assert!((sigma - 2.399263).abs() < 1e-6);
            }
            _ => panic!("wrong kind"),
        }
        // eps=1.5 is the MNIST/FMNIST setting.
        match noise_scale(&gaussian(1.5, 1e-5)).unwrap() {
            NoiseScale::Gaussian { sigma } => {
                assert!((sigma * sigma - 10.233711524418).abs() < 1e-6);
            }
            _ => panic!("wrong kind"),
        }
    }

    #[test]
    fn gaussian_without_delta_is_config_error() {
        let b = PrivacyBudget {
            epsilon: 1.0,
            delta: None,
            sensitivity: 1.0,
            kind: NoiseKind::Gaussian,
        };
        assert!(matches!(noise_scale(&b), Err(crate::error::Error::Config(_))));
    }

    #[test]
    fn row_inside_ball_unchanged_bit_exactly() {
        let t = Tensor::from_vec(&[1, 2], vec![0.3, 0.4]).unwrap();
        let c = clip_features(&t, 1.0, NoiseKind::Gaussian);
        assert_eq!(c, t);
    }

    #[test]
    fn l2_clip_scales_to_the_ball() {
        let t = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let c = clip_features(&t, 1.0, NoiseKind::Gaussian);
        assert!((c.data()[0] - 0.6).abs() < 1e-12);
        assert!((c.data()[1] - 0.8).abs() < 1e-12);
    }

    #[test]
    fn l1_clip_scales_to_the_ball() {
        let t = Tensor::from_vec(&[1, 2], vec![2.0, 2.0]).unwrap();
        let c = clip_features(&t, 1.0, NoiseKind::Laplace);
        assert!((c.data()[0] - 0.5).abs() < 1e-12);
        assert!((c.data()[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_scale_perturbation_is_identity() {
        let t = Tensor::from_vec(&[2, 2], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = perturb_features(&t, &NoiseScale::Gaussian { sigma: 0.0 }, &mut rng);
        assert_eq!(p, t);
    }

    #[test]
    fn perturbation_deterministic_under_same_seed() {
        let t = Tensor::zeros(&[8, 8]);
        let s = NoiseScale::Laplace { lambda: 0.7 };
        let a = perturb_features(&t, &s, &mut ChaCha8Rng::seed_from_u64(42));
        let b = perturb_features(&t, &s, &mut ChaCha8Rng::seed_from_u64(42));
        assert_eq!(a, b);
    }

    #[test]
    fn gaussian_sample_moments_match_scale() {
        let sigma = 2.399263;
        let t = Tensor::zeros(&[1000, 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = perturb_features(&t, &NoiseScale::Gaussian { sigma }, &mut rng);
        let n = p.len() as f64;
        let mean = p.data().iter().sum::<f64>() / n;
        let var = p.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        assert!(mean.abs() < 4.0 * sigma / 1000.0, "mean {}", mean);
        assert!((var.sqrt() - sigma).abs() / sigma < 0.01, "std {}", var.sqrt());
    }

    #[test]
    fn laplace_sample_moments_match_scale() {
        let lambda = 1.3;
        let t = Tensor::zeros(&[1000, 1000]);
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let p = perturb_features(&t, &NoiseScale::Laplace { lambda }, &mut rng);
        let n = p.len() as f64;
        let mean = p.data().iter().sum::<f64>() / n;
        let var = p.data().iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let want_std = lambda * 2f64.sqrt();
        assert!(mean.abs() < 0.01);
        assert!((var.sqrt() - want_std).abs() / want_std < 0.01);
    }

    #[test]
    fn clip_is_idempotent() {
        let t = Tensor::from_vec(&[2, 3], vec![3.0, -4.0, 1.0, 0.1, 0.1, 0.1]).unwrap();
        for kind in [NoiseKind::Gaussian, NoiseKind::Laplace] {
            let once = clip_features(&t, 1.0, kind);
            let twice = clip_features(&once, 1.0, kind);
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn clipped_rows_satisfy_the_bound() {
        let t = Tensor::from_vec(&[2, 3], vec![30.0, -40.0, 12.0, 5.0, 5.0, 5.0]).unwrap();
        for kind in [NoiseKind::Gaussian, NoiseKind::Laplace] {
            let c = clip_features(&t, 1.0, kind);
            for r in 0..c.rows() {
                assert!(row_norm(c.row(r), kind) <= 1.0 + 1e-12);
            }
        }
    }
}
