//! Similarity-weighted triplet loss on foreground pairs and the adversarial
//! background loss with its domain discriminator.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{
    affine_backward, affine_forward, relu, relu_backward, squared_distance, AffineCache, GradSet,
    ParamSet, RngStream, Tensor,
};
use crate::retrieval::AlignmentPair;

pub const DISC_HIDDEN: usize = 32;
pub const PROB_EPS: f64 = 1e-6;

pub fn grad_reverse(grad: &[f64], lambda: f64) -> Vec<f64> {
    grad.iter().map(|g| -lambda * g).collect()
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct FgReport {
    pub value: f64,
    pub pairs: usize,
    /// `∂L_fg/∂g^T` per pair, in input order.
    pub target_grads: Vec<Vec<f64>>,
}

/// `(1/N) Σ w·[d⁺ − min d⁻ + α]₊` with `w` clamped to [0, 1] and held
/// constant. A pair without negatives contributes `w·d⁺`.
pub fn loss_fg(pairs: &[AlignmentPair], alpha: f64) -> FgReport {
    if pairs.is_empty() {
        return FgReport::default();
    }
    let n = pairs.len() as f64;
    let mut value = 0.0;
    let mut target_grads = Vec::with_capacity(pairs.len());
    for p in pairs {
        let w = p.w.clamp(0.0, 1.0);
        let d_pos = squared_distance(&p.target, &p.positive);
        let nearest = p
            .negatives
            .iter()
            .map(|neg| squared_distance(&p.target, neg))
            .enumerate()
            .fold(None, |acc: Option<(usize, f64)>, (i, d)| match acc {
                Some((_, b)) if b <= d => acc,
                _ => Some((i, d)),
            });
        let hinge = match nearest {
            Some((_, d_neg)) => d_pos - d_neg + alpha,
            None => d_pos,
        };
        let mut grad = vec![0.0; p.target.len()];
        if hinge > 0.0 && w > 0.0 {
            value += w * hinge / n;
            let scale = 2.0 * w / n;
            for (k, g) in grad.iter_mut().enumerate() {
                *g = scale * (p.target[k] - p.positive[k]);
            }
            if let Some((i, _)) = nearest {
                let neg = &p.negatives[i];
                for (k, g) in grad.iter_mut().enumerate() {
                    *g -= scale * (p.target[k] - neg[k]);
                }
            }
        }
        target_grads.push(grad);
    }
    FgReport {
        value,
        pairs: pairs.len(),
        target_grads,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscriminatorParams {
    pub params: ParamSet,
}

impl DiscriminatorParams {
    pub fn init(dim: usize, rng: &mut RngStream) -> Result<Self> {
        let mut params = ParamSet::new();
        params.insert_affine("d1", dim, DISC_HIDDEN, rng)?;
        params.insert_affine("d2", DISC_HIDDEN, 1, rng)?;
        Ok(Self { params })
    }

    /// Random hidden layer and a zero output layer, so every input starts
    /// at p = 0.5 and the first loss is exactly 2 ln 2.
    pub fn init_neutral(dim: usize, rng: &mut RngStream) -> Result<Self> {
        let mut params = ParamSet::new();
        params.insert_affine("d1", dim, DISC_HIDDEN, rng)?;
        params.insert("d2.w", Tensor::zeros(&[DISC_HIDDEN, 1]))?;
        params.insert("d2.b", Tensor::zeros(&[1]))?;
        Ok(Self { params })
    }

    pub fn zeros(dim: usize) -> Self {
        let mut params = ParamSet::new();
        for (name, shape) in [
            ("d1.w", vec![dim, DISC_HIDDEN]),
            ("d1.b", vec![DISC_HIDDEN]),
            ("d2.w", vec![DISC_HIDDEN, 1]),
            ("d2.b", vec![1]),
        ] {
            params.insert(name, Tensor::zeros(&shape)).expect("distinct names");
        }
        Self { params }
    }
}

fn logistic(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

struct DiscForward {
    c1: AffineCache,
    h: Tensor,
    c2: AffineCache,
    z: Vec<f64>,
}

fn disc_forward_batch(rows: &[&[f64]], disc: &DiscriminatorParams) -> Result<DiscForward> {
    let dim = disc.params.get("d1.w")?.shape()[0];
    let mut data = Vec::with_capacity(rows.len() * dim);
    for r in rows {
        if r.len() != dim {
            return Err(Error::Dimension(format!(
                "discriminator expects {dim}-d input, got {}",
                r.len()
            )));
        }
        data.extend_from_slice(r);
    }
    let x = Tensor::matrix(rows.len(), dim, data)?;
    let (z1, c1) = affine_forward(&x, disc.params.get("d1.w")?, disc.params.get("d1.b")?)?;
    let h = relu(&z1);
    let (z2, c2) = affine_forward(&h, disc.params.get("d2.w")?, disc.params.get("d2.b")?)?;
    Ok(DiscForward {
        c1,
        h,
        c2,
        z: z2.into_data(),
    })
}

/// Source-domain probability, clamped to `[ε, 1 − ε]`.
pub fn discriminator_forward(v: &[f64], disc: &DiscriminatorParams) -> Result<f64> {
    let f = disc_forward_batch(&[v], disc)?;
    Ok(logistic(f.z[0]).clamp(PROB_EPS, 1.0 - PROB_EPS))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct BgReport {
    pub value: f64,
    pub n_source: usize,
    pub n_target: usize,
    /// Set when either side was empty and nothing was computed.
    pub skipped: bool,
    /// Descent direction for the discriminator.
    pub disc_grads: GradSet,
    /// Reversed, `grl_lambda`-scaled gradient per target feature.
    pub target_grads: Vec<Vec<f64>>,
}

/// `−mean log d(bg^S) − mean log(1 − d(bg^T))`. Source features are
/// constants; target features receive the reversed gradient.
pub fn loss_bg(
    source: &[Vec<f64>],
    target: &[Vec<f64>],
    disc: &DiscriminatorParams,
    grl_lambda: f64,
) -> Result<BgReport> {
    if source.is_empty() || target.is_empty() {
        return Ok(BgReport {
            skipped: true,
            disc_grads: disc.params.zero_grads(),
            target_grads: vec![Vec::new(); target.len()],
            n_source: source.len(),
            n_target: target.len(),
            ..BgReport::default()
        });
    }
    let rows: Vec<&[f64]> = source.iter().chain(target).map(Vec::as_slice).collect();
    let f = disc_forward_batch(&rows, disc)?;
    let (ns, nt) = (source.len() as f64, target.len() as f64);
    let mut value = 0.0;
    let mut grad_z = Vec::with_capacity(rows.len());
    for (i, &z) in f.z.iter().enumerate() {
        let p = logistic(z);
        let is_source = i < source.len();
        let (weight, q, dq) = if is_source {
            (1.0 / ns, p, p * (1.0 - p))
        } else {
            (1.0 / nt, 1.0 - p, -p * (1.0 - p))
        };
        // −log(clamp(q)); the clamp is flat, so its gradient is zero there
        let clamped = q.clamp(PROB_EPS, 1.0 - PROB_EPS);
        value -= weight * clamped.ln();
        let g = if clamped == q { -weight * dq / q } else { 0.0 };
        grad_z.push(g);
    }
    let gz = Tensor::matrix(rows.len(), 1, grad_z)?;
    let mut disc_grads = GradSet::new();
    let (gh, gw2, gb2) = affine_backward(&gz, &f.c2, disc.params.get("d2.w")?)?;
    disc_grads.insert("d2.w".into(), gw2);
    disc_grads.insert("d2.b".into(), gb2);
    let gh = relu_backward(&gh, &f.h)?;
    let (gx, gw1, gb1) = affine_backward(&gh, &f.c1, disc.params.get("d1.w")?)?;
    disc_grads.insert("d1.w".into(), gw1);
    disc_grads.insert("d1.b".into(), gb1);
    let target_grads = (source.len()..rows.len())
        .map(|r| grad_reverse(gx.row(r), grl_lambda))
        .collect();
    Ok(BgReport {
        value,
        n_source: source.len(),
        n_target: target.len(),
        skipped: false,
        disc_grads,
        target_grads,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_grad, relative_error, sgd_step};

    fn randv(rng: &mut RngStream, d: usize) -> Vec<f64> {
        (0..d).map(|_| rng.normal()).collect()
    }

    fn pair(t: Vec<f64>, p: Vec<f64>, negs: Vec<Vec<f64>>) -> AlignmentPair {
        AlignmentPair::new(t, p, negs, 0, "test")
    }

    /// Direct formula evaluation with `w` frozen at the given values.
    fn fg_formula(pairs: &[AlignmentPair], ws: &[f64], alpha: f64) -> f64 {
        let n = pairs.len() as f64;
        pairs
            .iter()
            .zip(ws)
            .map(|(p, &w)| {
                let dp: f64 = p.target.iter().zip(&p.positive).map(|(a, b)| (a - b) * (a - b)).sum();
                let hinge = if p.negatives.is_empty() {
                    dp
                } else {
                    let dn = p
                        .negatives
                        .iter()
                        .map(|q| p.target.iter().zip(q).map(|(a, b)| (a - b) * (a - b)).sum::<f64>())
                        .fold(f64::INFINITY, f64::min);
                    dp - dn + alpha
                };
                w.clamp(0.0, 1.0) * hinge.max(0.0) / n
            })
            .sum()
    }

    #[test]
    fn grad_reverse_examples() {
        assert_eq!(grad_reverse(&[1.0, -2.0], 1.0), vec![-1.0, 2.0]);
        assert_eq!(grad_reverse(&[1.0, -2.0], 0.0), vec![0.0, 0.0]);
        assert_eq!(grad_reverse(&grad_reverse(&[1.0, -2.0], 1.0), 1.0), vec![1.0, -2.0]);
    }

    #[test]
    fn fg_hand_examples() {
        let inactive = pair(vec![1.0, 0.0], vec![1.0, 0.0], vec![vec![-1.0, 0.0]]);
        assert_eq!(loss_fg(&[inactive], 1.5).value, 0.0);

        let t = vec![1.0, 1.0];
        let equal = pair(t.clone(), vec![2.0, 1.0], vec![vec![1.0, 2.0]]);
        let w = equal.w;
        assert!((loss_fg(&[equal], 1.5).value - w * 1.5).abs() < 1e-12);
        assert_eq!(loss_fg(&[], 1.5), FgReport::default());
    }

    #[test]
    fn fg_value_and_gradient_match_oracles() {
        let mut rng = RngStream::new(1, 0);
        for _ in 0..10 {
            let pairs: Vec<AlignmentPair> = (0..5)
                .map(|_| {
                    let t = randv(&mut rng, 6);
                    let p: Vec<f64> = t.iter().map(|v| v + 0.7 * rng.normal()).collect();
                    let negs = (0..1 + rng.index(2)).map(|_| randv(&mut rng, 6)).collect();
                    pair(t, p, negs)
                })
                .collect();
            let ws: Vec<f64> = pairs.iter().map(|p| p.w).collect();
            let r = loss_fg(&pairs, 1.5);
            assert!((r.value - fg_formula(&pairs, &ws, 1.5)).abs() < 1e-12);
            for (i, g) in r.target_grads.iter().enumerate() {
                let x = Tensor::from_vec(pairs[i].target.clone());
                let numeric = finite_diff_grad(
                    |t| {
                        let mut q = pairs.clone();
                        q[i].target = t.data().to_vec();
                        Ok(fg_formula(&q, &ws, 1.5))
                    },
                    &x,
                    1e-3,
                )
                .unwrap();
                assert!(relative_error(g, numeric.data()) <= 1e-3);
            }
        }
    }

    #[test]
    fn fg_is_nonnegative_and_scales_as_documented() {
        let mut rng = RngStream::new(2, 0);
        for _ in 0..50 {
            let t = randv(&mut rng, 4);
            let p = randv(&mut rng, 4);
            let negs = vec![randv(&mut rng, 4)];
            let a = pair(t.clone(), p.clone(), negs.clone());
            assert!(loss_fg(std::slice::from_ref(&a), 1.5).value >= 0.0);
            let s = 3.0;
            let scaled = pair(t.iter().map(|v| v * s).collect(), p.iter().map(|v| v * s).collect(), negs);
            assert!((scaled.w - a.w).abs() < 1e-12);
            let d = squared_distance(&a.target, &a.positive);
            let ds = squared_distance(&scaled.target, &scaled.positive);
            assert!((ds - s * s * d).abs() < 1e-9 * ds.max(1.0));
        }
        let opposed = pair(vec![1.0, 0.0], vec![-1.0, 0.0], vec![vec![1.0, 0.0]]);
        assert_eq!(loss_fg(&[opposed], 1.5).value, 0.0);
    }

    #[test]
    fn missing_negatives_fall_back_to_attraction() {
        let p = pair(vec![1.0, 1.0], vec![1.0, 2.0], vec![]);
        let w = p.w;
        let r = loss_fg(&[p], 1.5);
        assert!((r.value - w * 1.0).abs() < 1e-12);
        assert!((r.target_grads[0][1] - (-2.0 * w)).abs() < 1e-12);
    }

    #[test]
    fn discriminator_examples() {
        let zero = DiscriminatorParams::zeros(4);
        assert_eq!(discriminator_forward(&[3.0, -1.0, 2.0, 0.5], &zero).unwrap(), 0.5);

        let mut rng = RngStream::new(3, 0);
        let d = DiscriminatorParams::init(4, &mut rng).unwrap();
        let v = randv(&mut rng, 4);
        let p = discriminator_forward(&v, &d).unwrap();
        assert_eq!(p, discriminator_forward(&v, &d).unwrap());

        let w1 = d.params.get("d1.w").unwrap();
        let b1 = d.params.get("d1.b").unwrap();
        let w2 = d.params.get("d2.w").unwrap();
        let b2 = d.params.get("d2.b").unwrap();
        let mut z = b2.data()[0];
        for j in 0..DISC_HIDDEN {
            let mut h = b1.data()[j];
            for (i, vi) in v.iter().enumerate() {
                h += vi * w1.data()[i * DISC_HIDDEN + j];
            }
            z += h.max(0.0) * w2.data()[j];
        }
        assert!((p - 1.0 / (1.0 + (-z).exp())).abs() < 1e-12);
    }

    #[test]
    fn bg_hand_examples() {
        let zero = DiscriminatorParams::zeros(3);
        let r = loss_bg(&[vec![1.0, 2.0, 3.0]], &[vec![0.0, 1.0, 0.0]], &zero, 1.0).unwrap();
        assert!((r.value - 2.0 * 2f64.ln()).abs() < 1e-12);

        let mut sep = DiscriminatorParams::zeros(1);
        sep.params.get_mut("d1.w").unwrap().data_mut()[0] = 1.0;
        sep.params.get_mut("d2.w").unwrap().data_mut()[0] = 1.0;
        sep.params.get_mut("d2.b").unwrap().data_mut()[0] = -20.0;
        let r = loss_bg(&[vec![60.0]], &[vec![0.0]], &sep, 1.0).unwrap();
        assert!(r.value < 1e-5);

        let skipped = loss_bg(&[], &[vec![0.0, 0.0, 0.0]], &zero, 1.0).unwrap();
        assert!(skipped.skipped);
        assert_eq!(skipped.value, 0.0);
    }

    /// True when a central-difference step of `eps` on any input or
    /// parameter could flip the sign of a hidden pre-activation.
    fn near_kink(src: &[Vec<f64>], tgt: &[Vec<f64>], d: &DiscriminatorParams, eps: f64) -> bool {
        let w = d.params.get("d1.w").unwrap();
        let b = d.params.get("d1.b").unwrap();
        let (dim, hidden) = (w.shape()[0], w.shape()[1]);
        let w_max = w.data().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        src.iter().chain(tgt).any(|x| {
            let x_max = x.iter().fold(1.0f64, |m, v| m.max(v.abs()));
            let margin = 2.0 * eps * w_max.max(x_max);
            (0..hidden).any(|j| {
                let z: f64 = b.data()[j] + (0..dim).map(|k| x[k] * w.data()[k * hidden + j]).sum::<f64>();
                z.abs() < margin
            })
        })
    }

    #[test]
    fn bg_gradients_match_finite_differences_with_reversal() {
        let mut rng = RngStream::new(4, 0);
        let mut checked = 0;
        let mut drawn = 0;
        while checked < 10 {
            drawn += 1;
            assert!(drawn < 100, "too many instances near a ReLU kink");
            let d = DiscriminatorParams::init(5, &mut rng).unwrap();
            let src: Vec<Vec<f64>> = (0..3).map(|_| randv(&mut rng, 5)).collect();
            let tgt: Vec<Vec<f64>> = (0..2).map(|_| randv(&mut rng, 5)).collect();
            let lambda = rng.uniform_range(0.2, 2.0);
            if near_kink(&src, &tgt, &d, 1e-3) {
                continue;
            }
            checked += 1;
            let r = loss_bg(&src, &tgt, &d, lambda).unwrap();
            for (i, g) in r.target_grads.iter().enumerate() {
                let numeric = finite_diff_grad(
                    |t| {
                        let mut q = tgt.clone();
                        q[i] = t.data().to_vec();
                        Ok(loss_bg(&src, &q, &d, lambda)?.value)
                    },
                    &Tensor::from_vec(tgt[i].clone()),
                    1e-3,
                )
                .unwrap();
                let reversed = grad_reverse(numeric.data(), lambda);
                assert!(relative_error(g, &reversed) <= 1e-3, "{g:?} vs {reversed:?}");
            }
            for name in ["d1.w", "d1.b", "d2.w", "d2.b"] {
                let numeric = finite_diff_grad(
                    |t| {
                        let mut q = d.clone();
                        *q.params.get_mut(name)? = t.clone();
                        Ok(loss_bg(&src, &tgt, &q, lambda)?.value)
                    },
                    d.params.get(name).unwrap(),
                    1e-3,
                )
                .unwrap();
                assert!(relative_error(r.disc_grads[name].data(), numeric.data()) <= 1e-3, "{name}");
            }
        }
    }

    #[test]
    fn bg_is_symmetric_under_label_swap() {
        let mut rng = RngStream::new(5, 0);
        let mut d = DiscriminatorParams::init(3, &mut rng).unwrap();
        let src = vec![randv(&mut rng, 3), randv(&mut rng, 3)];
        let tgt = vec![randv(&mut rng, 3)];
        let a = loss_bg(&src, &tgt, &d, 1.0).unwrap().value;
        // negating the output layer maps p to 1 − p
        for name in ["d2.w", "d2.b"] {
            for v in d.params.get_mut(name).unwrap().data_mut() {
                *v = -*v;
            }
        }
        let b = loss_bg(&tgt, &src, &d, 1.0).unwrap().value;
        assert!((a - b).abs() < 1e-12);
    }

    #[test]
    fn discriminator_learns_separable_features() {
        let mut rng = RngStream::new(6, 0);
        let mut d = DiscriminatorParams::init(8, &mut rng).unwrap();
        let sample = |rng: &mut RngStream, shift: f64| -> Vec<f64> {
            (0..8).map(|k| rng.normal() * 0.5 + if k == 0 { shift } else { 0.0 }).collect()
        };
        for _ in 0..200 {
            let src: Vec<_> = (0..8).map(|_| sample(&mut rng, 2.0)).collect();
            let tgt: Vec<_> = (0..8).map(|_| sample(&mut rng, -2.0)).collect();
            let r = loss_bg(&src, &tgt, &d, 1.0).unwrap();
            sgd_step(&mut d.params, &r.disc_grads, 0.01, 0.9).unwrap();
        }
        let mut correct = 0;
        for _ in 0..200 {
            correct += (discriminator_forward(&sample(&mut rng, 2.0), &d).unwrap() > 0.5) as usize;
            correct += (discriminator_forward(&sample(&mut rng, -2.0), &d).unwrap() < 0.5) as usize;
        }
        assert!(correct as f64 / 400.0 >= 0.95, "{correct}");
    }
}
