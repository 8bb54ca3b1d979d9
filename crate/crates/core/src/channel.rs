//! Black-box stochastic corruption channels `x -> y`.
//!
//! The trainer only ever calls [`ChannelSpec::apply`]; nothing about a
//! channel's internals is used for learning. Outputs live in the same space as
//! the input. Channels that draw an observable auxiliary variable (the mask of
//! [`ChannelSpec::RandomMask`]) report it as a latent vector.

use rand::Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};

/// What masked coordinates are replaced with.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MaskFill {
    Zero,
    #[default]
    StandardGaussian,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ChannelSpec {
    /// `y = x + sigma * xi`.
    Awgn { sigma: f64 },
    /// Each coordinate is independently masked with probability `rho`; the
    /// latent is the mask with 1 marking a masked coordinate.
    RandomMask {
        rho: f64,
        #[serde(default)]
        fill: MaskFill,
    },
    /// Deterministic convolution with a normalized discrete Gaussian of width
    /// `sigma`, truncated at radius `ceil(3 sigma)`, with reflecting
    /// boundaries.
    GaussianBlur1d { sigma: f64 },
    /// `y = Poisson(lambda * softplus(x + shift)) / lambda`; the mean of `y`
    /// is `softplus(x + shift)`.
    Poisson {
        lambda: f64,
        #[serde(default)]
        shift: f64,
    },
    /// `outer` applied to the output of `inner`.
    Compose {
        outer: Box<ChannelSpec>,
        inner: Box<ChannelSpec>,
    },
}

/// One draw from the channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ChannelOutput {
    pub y: Vec<f64>,
    /// Empty when the channel has no observable latent.
    pub latent: Vec<f64>,
}

/// `apply(compose(a, b), x)` is distributed as `apply(a, apply(b, x).y)`.
/// The latent is `a`'s latent followed by `b`'s.
pub fn compose(a: ChannelSpec, b: ChannelSpec) -> ChannelSpec {
    ChannelSpec::Compose {
        outer: Box::new(a),
        inner: Box::new(b),
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

/// Symmetric reflection of an out-of-range index into `0..n`.
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Normalized truncated Gaussian kernel, indexed `-radius..=radius`.
pub fn blur_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let mut k: Vec<f64> = (-radius..=radius)
        .map(|j| (-(j * j) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = k.iter().sum();
    k.iter_mut().for_each(|w| *w /= total);
    k
}

fn blur(x: &[f64], sigma: f64) -> Vec<f64> {
    let kernel = blur_kernel(sigma);
    let radius = (kernel.len() / 2) as isize;
    let n = x.len();
    (0..n as isize)
        .map(|i| {
            kernel
                .iter()
                .enumerate()
                .map(|(j, w)| w * x[reflect(i + j as isize - radius, n)])
                .sum()
        })
        .collect()
}

impl ChannelSpec {
    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(invalid(msg)) };
        match self {
            ChannelSpec::Awgn { sigma } => check(sigma.is_finite() && *sigma >= 0.0, "awgn sigma must be >= 0"),
            ChannelSpec::RandomMask { rho, .. } => check((0.0..=1.0).contains(rho), "mask rho must lie in [0, 1]"),
            ChannelSpec::GaussianBlur1d { sigma } => {
                check(sigma.is_finite() && *sigma > 0.0, "blur sigma must be > 0")
            }
            ChannelSpec::Poisson { lambda, shift } => {
                check(lambda.is_finite() && *lambda > 0.0, "poisson lambda must be > 0")?;
                check(shift.is_finite(), "poisson shift must be finite")
            }
            ChannelSpec::Compose { outer, inner } => {
                outer.validate()?;
                inner.validate()
            }
        }
    }

    /// Length of the latent emitted for a `d`-dimensional input.
    pub fn latent_dim(&self, d: usize) -> usize {
        match self {
            ChannelSpec::RandomMask { .. } => d,
            ChannelSpec::Compose { outer, inner } => outer.latent_dim(d) + inner.latent_dim(d),
            _ => 0,
        }
    }

    /// One fresh draw from `P(dy | x)`.
    pub fn apply<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> Result<ChannelOutput> {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        self.validate()?;
        Ok(self.draw(x, rng))
    }

    fn draw<R: Rng + ?Sized>(&self, x: &[f64], rng: &mut R) -> ChannelOutput {
        match self {
            ChannelSpec::Awgn { sigma } => ChannelOutput {
                y: x
                    .iter()
                    .map(|v| v + sigma * rng.sample::<f64, _>(StandardNormal))
                    .collect(),
                latent: Vec::new(),
            },
            ChannelSpec::RandomMask { rho, fill } => {
                let mut y = x.to_vec();
                let mut latent = vec![0.0; x.len()];
                for (yi, mi) in y.iter_mut().zip(latent.iter_mut()) {
                    if rng.random::<f64>() < *rho {
                        *mi = 1.0;
                        *yi = match fill {
                            MaskFill::Zero => 0.0,
                            MaskFill::StandardGaussian => rng.sample(StandardNormal),
                        };
                    }
                }
                ChannelOutput { y, latent }
            }
            ChannelSpec::GaussianBlur1d { sigma } => ChannelOutput {
                y: blur(x, *sigma),
                latent: Vec::new(),
            },
            ChannelSpec::Poisson { lambda, shift } => ChannelOutput {
                y: x
                    .iter()
                    .map(|v| {
                        let rate = lambda * softplus(v + shift);
                        // rate is strictly positive and finite for finite input
                        let counts = Poisson::new(rate).map(|p| p.sample(rng)).unwrap_or(0.0);
                        counts / lambda
                    })
                    .collect(),
                latent: Vec::new(),
            },
            ChannelSpec::Compose { outer, inner } => {
                let first = inner.draw(x, rng);
                let second = outer.draw(&first.y, rng);
                let mut latent = second.latent;
                latent.extend(first.latent);
                ChannelOutput { y: second.y, latent }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn zero_noise_awgn_is_identity() {
        let x = [1.5, -2.0, 0.25];
        let out = ChannelSpec::Awgn { sigma: 0.0 }.apply(&x, &mut rng(0)).unwrap();
        assert_eq!(out.y, x);
        assert!(out.latent.is_empty());
        let id = compose(ChannelSpec::Awgn { sigma: 0.0 }, ChannelSpec::Awgn { sigma: 0.0 });
        assert_eq!(id.apply(&x, &mut rng(1)).unwrap().y, x);
    }

    #[test]
    fn full_mask_with_zero_fill() {
        let spec = ChannelSpec::RandomMask { rho: 1.0, fill: MaskFill::Zero };
        let out = spec.apply(&[3.0, 4.0, 5.0], &mut rng(0)).unwrap();
        assert_eq!(out.y, vec![0.0; 3]);
        assert_eq!(out.latent, vec![1.0; 3]);
        assert_eq!(spec.latent_dim(3), 3);
    }

    #[test]
    fn mask_latent_marks_replaced_coordinates() {
        let spec = ChannelSpec::RandomMask { rho: 0.5, fill: MaskFill::StandardGaussian };
        let x: Vec<f64> = (0..200).map(|i| 10.0 + i as f64).collect();
        let out = spec.apply(&x, &mut rng(4)).unwrap();
        for ((xi, yi), m) in x.iter().zip(&out.y).zip(&out.latent) {
            if *m == 0.0 {
                assert_eq!(xi, yi);
            } else {
                assert!(yi.abs() < 6.0);
            }
        }
        let frac = out.latent.iter().sum::<f64>() / 200.0;
        assert!((frac - 0.5).abs() < 0.15);
    }

    #[test]
    fn awgn_chi_square_concentration() {
        let d = 10_000;
        let out = ChannelSpec::Awgn { sigma: 1.0 }.apply(&vec![0.0; d], &mut rng(7)).unwrap();
        let m = out.y.iter().map(|v| v * v).sum::<f64>() / d as f64;
        assert!((0.94..=1.06).contains(&m), "{m}");
    }

    #[test]
    fn awgn_covariance_matches() {
        let d = 5;
        let sigma = 0.7;
        let n = 100_000;
        let spec = ChannelSpec::Awgn { sigma };
        let x = [1.0, -2.0, 0.5, 3.0, 0.0];
        let mut r = rng(11);
        let mut cov = nalgebra::DMatrix::<f64>::zeros(d, d);
        for _ in 0..n {
            let y = spec.apply(&x, &mut r).unwrap().y;
            let e = nalgebra::DVector::from_iterator(d, y.iter().zip(&x).map(|(a, b)| a - b));
            cov += &e * e.transpose();
        }
        cov /= n as f64;
        let diff = cov - nalgebra::DMatrix::<f64>::identity(d, d) * sigma * sigma;
        let op = diff.symmetric_eigen().eigenvalues.amax();
        assert!(op < 0.05, "{op}");
    }

    #[test]
    fn composed_awgn_variances_add() {
        let spec = compose(ChannelSpec::Awgn { sigma: 0.6 }, ChannelSpec::Awgn { sigma: 0.8 });
        let n = 50_000;
        let mut r = rng(3);
        let v = (0..n)
            .map(|_| spec.apply(&[2.0], &mut r).unwrap().y[0] - 2.0)
            .map(|e| e * e)
            .sum::<f64>()
            / n as f64;
        // variance of the sample variance of N(0, 1): 2 / n
        let se = (2.0f64 / n as f64).sqrt();
        assert!((v - 1.0).abs() < 4.0 * se, "{v}");
    }

    #[test]
    fn blur_preserves_constants() {
        let spec = compose(ChannelSpec::Awgn { sigma: 0.3 }, ChannelSpec::GaussianBlur1d { sigma: 1.7 });
        let d = 16;
        let n = 20_000;
        let mut r = rng(5);
        let mut mean = vec![0.0; d];
        for _ in 0..n {
            let y = spec.apply(&vec![2.5; d], &mut r).unwrap().y;
            mean.iter_mut().zip(&y).for_each(|(m, v)| *m += v / n as f64);
        }
        let se = 0.3 / (n as f64).sqrt();
        for m in mean {
            assert!((m - 2.5).abs() < 4.0 * se, "{m}");
        }
        let exact = ChannelSpec::GaussianBlur1d { sigma: 0.9 }.apply(&[1.0; 5], &mut r).unwrap().y;
        exact.iter().for_each(|v| assert!((v - 1.0).abs() < 1e-14));
    }

    #[test]
    fn blur_kernel_shape() {
        let k = blur_kernel(1.0);
        assert_eq!(k.len(), 7);
        assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-15);
        assert_eq!(k[0], k[6]);
        // radius wider than the signal still reflects into range
        let y = ChannelSpec::GaussianBlur1d { sigma: 4.0 }.apply(&[0.0, 1.0, 0.0], &mut rng(0)).unwrap().y;
        assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn reflect_indices() {
        assert_eq!(reflect(-1, 4), 0);
        assert_eq!(reflect(-2, 4), 1);
        assert_eq!(reflect(4, 4), 3);
        assert_eq!(reflect(5, 4), 2);
        assert_eq!(reflect(9, 4), 1);
    }

    #[test]
    fn poisson_mean_is_softplus_of_blurred_input() {
        let blur_sigma = 1.0;
        let spec = compose(
            ChannelSpec::Poisson { lambda: 20.0, shift: 0.5 },
            ChannelSpec::GaussianBlur1d { sigma: blur_sigma },
        );
        let x = [-1.0, 0.0, 2.0, 0.5, -0.3, 1.2];
        let blurred = blur(&x, blur_sigma);
        let n = 20_000;
        let mut r = rng(9);
        let mut sum = vec![0.0; x.len()];
        let mut sq = vec![0.0; x.len()];
        for _ in 0..n {
            let y = spec.apply(&x, &mut r).unwrap().y;
            for i in 0..x.len() {
                sum[i] += y[i];
                sq[i] += y[i] * y[i];
            }
        }
        for i in 0..x.len() {
            let mean = sum[i] / n as f64;
            let var = sq[i] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            let expected = softplus(blurred[i] + 0.5);
            assert!((mean - expected).abs() < 3.0 * se, "coord {i}: {mean} vs {expected}");
        }
    }

    #[test]
    fn seeded_determinism() {
        let spec = compose(
            ChannelSpec::RandomMask { rho: 0.3, fill: MaskFill::StandardGaussian },
            ChannelSpec::Awgn { sigma: 1.0 },
        );
        let x = [0.1, 0.2, 0.3, 0.4];
        assert_eq!(spec.apply(&x, &mut rng(42)).unwrap(), spec.apply(&x, &mut rng(42)).unwrap());
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(matches!(
            ChannelSpec::Awgn { sigma: 1.0 }.apply(&[f64::NAN], &mut rng(0)),
            Err(Error::NonFinite)
        ));
        assert!(ChannelSpec::Awgn { sigma: -1.0 }.validate().is_err());
        assert!(ChannelSpec::RandomMask { rho: 1.5, fill: MaskFill::Zero }.validate().is_err());
        assert!(ChannelSpec::GaussianBlur1d { sigma: 0.0 }.validate().is_err());
        assert!(ChannelSpec::Poisson { lambda: 0.0, shift: 0.0 }.validate().is_err());
    }

    #[test]
    fn spec_deserializes() {
        let spec: ChannelSpec = parse(r#"{"kind":"random-mask","rho":0.5}"#);
        assert_eq!(spec, ChannelSpec::RandomMask { rho: 0.5, fill: MaskFill::StandardGaussian });
        let nested: ChannelSpec = parse(
            r#"{"kind":"compose","outer":{"kind":"awgn","sigma":0.1},"inner":{"kind":"gaussian-blur1d","sigma":2.0}}"#,
        );
        assert_eq!(nested.latent_dim(4), 0);
    }

    fn parse(s: &str) -> ChannelSpec {
        serde_json::from_str(s).unwrap()
    }
}
