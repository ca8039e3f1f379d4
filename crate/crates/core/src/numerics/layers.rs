//! Affine, ReLU, softmax cross-entropy and vector similarity primitives.
//!
//! Forward passes return a cache value that the matching backward consumes.
//! Reductions accumulate in `f64`.

use super::tensor::{dot, matmul, norm, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Debug)]
pub struct AffineCache {
    x: Tensor,
    w_shape: (usize, usize),
}

impl AffineCache {
    pub fn input(&self) -> &Tensor {
        &self.x
    }
}

/// `y = x·W + b` for `x: [rows × in]`, `W: [in × out]`, `b: [out]`.
pub fn affine_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<(Tensor, AffineCache)> {
    let (_, cols) = w.dims2()?;
    if b.len() != cols {
        return Err(Error::Dimension(format!(
            "bias has {} entries, weight has {cols} outputs",
            b.len()
        )));
    }
    let mut y = matmul(x, w)?;
    let bias = b.data();
    for row in y.data_mut().chunks_mut(cols) {
        for (v, &bv) in row.iter_mut().zip(bias) {
            *v += bv;
        }
    }
    let cache = AffineCache {
        x: x.clone().reshape(vec![x.dims2()?.0, x.dims2()?.1])?,
        w_shape: w.dims2()?,
    };
    Ok((y, cache))
}

/// Gradients of [`affine_forward`] w.r.t. input, weight and bias.
pub fn affine_backward(
    grad_y: &Tensor,
    cache: &AffineCache,
    w: &Tensor,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (rows, inputs) = cache.x.dims2()?;
    if w.dims2()? != cache.w_shape {
        return Err(Error::Usage(format!(
            "cache was built for weight {:?}, got {:?}",
            cache.w_shape,
            w.shape()
        )));
    }
    let outputs = cache.w_shape.1;
    let (gr, gc) = grad_y.dims2()?;
    if gr != rows || gc != outputs {
        return Err(Error::Usage(format!(
            "gradient {:?} does not match cached forward [{rows}, {outputs}]",
            grad_y.shape()
        )));
    }
    let xd = cache.x.data();
    let gy = grad_y.data();
    let wd = w.data();

    let mut gw = vec![0.0f64; inputs * outputs];
    let mut gb = vec![0.0f64; outputs];
    let mut gx = vec![0.0f64; rows * inputs];
    for r in 0..rows {
        let grow = &gy[r * outputs..(r + 1) * outputs];
        for (acc, &g) in gb.iter_mut().zip(grow) {
            *acc += g;
        }
        let xrow = &xd[r * inputs..(r + 1) * inputs];
        let gxrow = &mut gx[r * inputs..(r + 1) * inputs];
        for i in 0..inputs {
            let wrow = &wd[i * outputs..(i + 1) * outputs];
            gxrow[i] = dot(grow, wrow);
            let a = xrow[i];
            if a != 0.0 {
                let gwrow = &mut gw[i * outputs..(i + 1) * outputs];
                for (o, &g) in gwrow.iter_mut().zip(grow) {
                    *o += a * g;
                }
            }
        }
    }
    Ok((
        Tensor::matrix(rows, inputs, gx)?,
        Tensor::matrix(inputs, outputs, gw)?,
        Tensor::from_vec(gb.into_iter().collect()),
    ))
}

pub fn relu(x: &Tensor) -> Tensor {
    let mut y = x.clone();
    for v in y.data_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    y
}

/// Backward of [`relu`]; `activation` is either the input or the output.
pub fn relu_backward(grad_y: &Tensor, activation: &Tensor) -> Result<Tensor> {
    if grad_y.len() != activation.len() {
        return Err(Error::Dimension(format!(
            "relu backward {:?} vs {:?}",
            grad_y.shape(),
            activation.shape()
        )));
    }
    let mut g = grad_y.clone();
    for (gv, &a) in g.data_mut().iter_mut().zip(activation.data()) {
        if a <= 0.0 {
            *gv = 0.0;
        }
    }
    Ok(g)
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.iter().map(|e| e / total).collect()
}

/// Returns `(-log softmax(logits)[label], softmax - onehot)`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<(f64, Vec<f64>)> {
    if label >= logits.len() {
        return Err(Error::Argument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let shifted: Vec<f64> = logits.iter().map(|&z| z - max).collect();
    let log_total = shifted.iter().map(|s| s.exp()).sum::<f64>().ln();
    let loss = log_total - shifted[label];
    let mut grad: Vec<f64> = shifted
        .iter()
        .map(|s| (s - log_total).exp())
        .collect();
    grad[label] -= 1.0;
    Ok((loss.max(0.0), grad))
}

pub fn l2_normalize(v: &[f64]) -> Result<Vec<f64>> {
    let n = norm(v);
    if n <= 0.0 || !n.is_finite() {
        return Err(Error::Degenerate("cannot normalize a zero vector".into()));
    }
    Ok(v.iter().map(|&x| x / n).collect())
}

pub fn cosine_similarity(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!(
            "cosine of {}-d and {}-d vectors",
            a.len(),
            b.len()
        )));
    }
    let na = norm(a);
    let nb = norm(b);
    if na.is_nan() || nb.is_nan() || na <= 0.0 || nb <= 0.0 {
        return Err(Error::Degenerate("cosine with a zero vector".into()));
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::fd::finite_diff_grad;
    use crate::numerics::rng::RngStream;
    use approx::assert_relative_eq;

    fn random_tensor(rng: &mut RngStream, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.normal()).collect()).unwrap()
    }

    fn rel_err(a: f64, b: f64) -> f64 {
        (a - b).abs() / a.abs().max(b.abs()).max(1e-2)
    }

    #[test]
    fn affine_identity_and_bias() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let x = Tensor::matrix(1, 2, vec![1.0, 0.0]).unwrap();
        let (y, _) = affine_forward(&x, &eye, &Tensor::zeros(&[2])).unwrap();
        assert_eq!(y.data(), &[1.0, 0.0]);

        let w = Tensor::matrix(2, 2, vec![0.3, -2.0, 7.0, 1.5]).unwrap();
        let zero = Tensor::zeros(&[1, 2]);
        let (y, _) = affine_forward(&zero, &w, &Tensor::from_vec(vec![3.0, -1.0])).unwrap();
        assert_eq!(y.data(), &[3.0, -1.0]);
    }

    #[test]
    fn affine_matches_hand_matmul() {
        let mut rng = RngStream::new(7, 0);
        let x = random_tensor(&mut rng, &[3, 4]);
        let w = random_tensor(&mut rng, &[4, 5]);
        let b = random_tensor(&mut rng, &[5]);
        let (y, _) = affine_forward(&x, &w, &b).unwrap();
        for r in 0..3 {
            for c in 0..5 {
                let mut acc = b.data()[c];
                for k in 0..4 {
                    acc += x.data()[r * 4 + k] * w.data()[k * 5 + c];
                }
                assert_relative_eq!(y.data()[r * 5 + c], { acc }, epsilon = 1e-5);
            }
        }
    }

    #[test]
    fn affine_shape_errors() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[4, 2]);
        assert!(matches!(
            affine_forward(&x, &w, &Tensor::zeros(&[2])),
            Err(Error::Dimension(_))
        ));
        let w = Tensor::zeros(&[3, 2]);
        assert!(matches!(
            affine_forward(&x, &w, &Tensor::zeros(&[3])),
            Err(Error::Dimension(_))
        ));
    }

    #[test]
    fn affine_backward_zero_and_scalar() {
        let x = Tensor::matrix(1, 1, vec![2.5]).unwrap();
        let w = Tensor::matrix(1, 1, vec![-0.7]).unwrap();
        let (_, cache) = affine_forward(&x, &w, &Tensor::zeros(&[1])).unwrap();
        let (gx, gw, gb) = affine_backward(&Tensor::zeros(&[1, 1]), &cache, &w).unwrap();
        assert_eq!((gx.data()[0], gw.data()[0], gb.data()[0]), (0.0, 0.0, 0.0));

        let (_, gw, _) = affine_backward(&Tensor::matrix(1, 1, vec![3.0]).unwrap(), &cache, &w)
            .unwrap();
        assert_relative_eq!(gw.data()[0], 3.0 * 2.5);
    }

    #[test]
    fn affine_backward_rejects_stale_cache() {
        let x = Tensor::zeros(&[2, 3]);
        let w = Tensor::zeros(&[3, 2]);
        let (_, cache) = affine_forward(&x, &w, &Tensor::zeros(&[2])).unwrap();
        let other = Tensor::zeros(&[3, 4]);
        assert!(matches!(
            affine_backward(&Tensor::zeros(&[2, 4]), &cache, &other),
            Err(Error::Usage(_))
        ));
        assert!(matches!(
            affine_backward(&Tensor::zeros(&[5, 2]), &cache, &w),
            Err(Error::Usage(_))
        ));
    }

    #[test]
    fn affine_backward_matches_finite_differences() {
        let mut rng = RngStream::new(11, 0);
        for _ in 0..10 {
            let x = random_tensor(&mut rng, &[3, 4]);
            let w = random_tensor(&mut rng, &[4, 2]);
            let b = random_tensor(&mut rng, &[2]);
            let probe = random_tensor(&mut rng, &[3, 2]);
            // scalar objective: <probe, xW + b>
            let objective = |x: &Tensor, w: &Tensor, b: &Tensor| {
                let (y, _) = affine_forward(x, w, b).unwrap();
                dot(y.data(), probe.data())
            };
            let (_, cache) = affine_forward(&x, &w, &b).unwrap();
            let (gx, gw, gb) = affine_backward(&probe, &cache, &w).unwrap();
            let fx = finite_diff_grad(|t| Ok(objective(t, &w, &b)), &x, 1e-3).unwrap();
            let fw = finite_diff_grad(|t| Ok(objective(&x, t, &b)), &w, 1e-3).unwrap();
            let fb = finite_diff_grad(|t| Ok(objective(&x, &w, t)), &b, 1e-3).unwrap();
            for (a, n) in [(gx, fx), (gw, fw), (gb, fb)] {
                for (&u, &v) in a.data().iter().zip(n.data()) {
                    assert!(rel_err(u, v) < 1e-3, "{u} vs {v}");
                }
            }
        }
    }

    #[test]
    fn relu_examples() {
        let y = relu(&Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        assert_eq!(y.data(), &[0.0, 0.0, 2.0]);

        let neg = Tensor::from_vec(vec![-3.0, -0.5, -1e-3]);
        let y = relu(&neg);
        assert!(y.data().iter().all(|&v| v == 0.0));
        let g = relu_backward(&Tensor::filled(&[3], 1.0), &neg).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_away_from_kink() {
        let mut rng = RngStream::new(5, 0);
        for _ in 0..10 {
            let mut x = random_tensor(&mut rng, &[12]);
            for v in x.data_mut() {
                if v.abs() < 1e-2 {
                    *v += 0.05;
                }
            }
            let probe = random_tensor(&mut rng, &[12]);
            let analytic = relu_backward(&probe, &x).unwrap();
            let numeric =
                finite_diff_grad(|t| Ok(dot(relu(t).data(), probe.data())), &x, 1e-3).unwrap();
            for (i, (&a, &n)) in analytic.data().iter().zip(numeric.data()).enumerate() {
                if x.data()[i].abs() < 1e-4 {
                    continue;
                }
                assert!(rel_err(a, n) < 1e-3, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn cross_entropy_uniform_and_saturation() {
        let (loss, _) = softmax_cross_entropy(&[0.5; 4], 2).unwrap();
        assert_relative_eq!(loss, 4f64.ln(), epsilon = 1e-6);

        let mut prev = f64::INFINITY;
        for margin in [1.0f64, 5.0, 10.0, 30.0] {
            let (loss, _) = softmax_cross_entropy(&[0.0, margin, 0.0], 1).unwrap();
            assert!(loss < prev);
            prev = loss;
        }
        assert!(prev < 1e-9);
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn cross_entropy_matches_explicit_softmax() {
        let mut rng = RngStream::new(3, 0);
        for _ in 0..10 {
            let logits: Vec<f64> = (0..3).map(|_| 2.0 * rng.normal()).collect();
            let label = rng.index(3);
            let exps: Vec<f64> = logits.iter().map(|&z| z.exp()).collect();
            let total: f64 = exps.iter().sum();
            let expected = -(exps[label] / total).ln();
            let (loss, grad) = softmax_cross_entropy(&logits, label).unwrap();
            assert_relative_eq!(loss, expected, epsilon = 1e-6);

            let t = Tensor::from_vec(logits.clone());
            let numeric = finite_diff_grad(
                |t| Ok(softmax_cross_entropy(t.data(), label).unwrap().0),
                &t,
                1e-3,
            )
            .unwrap();
            for (&a, &n) in grad.iter().zip(numeric.data()) {
                assert!(rel_err(a, n) < 1e-3, "{a} vs {n}");
            }
        }
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(l2_normalize(&[3.0, 4.0]).unwrap(), vec![0.6, 0.8]);
        let unit = [0.0, 1.0, 0.0];
        assert_eq!(l2_normalize(&unit).unwrap(), unit.to_vec());
        assert!(matches!(l2_normalize(&[0.0, 0.0]), Err(Error::Degenerate(_))));

        let mut rng = RngStream::new(1, 0);
        for _ in 0..20 {
            let v: Vec<f64> = (0..64).map(|_| rng.normal() * 10.0).collect();
            let n = norm(&l2_normalize(&v).unwrap());
            assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn cosine_examples() {
        let a = [0.3, -1.2, 2.0];
        assert_relative_eq!(cosine_similarity(&a, &a).unwrap(), 1.0, epsilon = 1e-12);
        assert_eq!(cosine_similarity(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        let neg: Vec<f64> = a.iter().map(|v| -v).collect();
        assert_relative_eq!(cosine_similarity(&a, &neg).unwrap(), -1.0, epsilon = 1e-12);
        assert!(cosine_similarity(&a, &[0.0; 3]).is_err());
    }
}
