//! Functional-mechanism logistic regression trained per protected group.
//!
//! Each group's mean logistic loss is replaced by its second-order Taylor
//! polynomial around `θ = 0`, the polynomial coefficients are perturbed with
//! Laplace noise once, and training then runs gradient descent on the noisy
//! polynomials only, averaging the group iterates every round.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{GroupPartition, TabularDataset};
use crate::error::{Error, Result};
use crate::fairdp::{stream_id, SITE_INIT, SITE_NOISE};
use crate::linalg::{l2_norm, laplace, Mat, RngStream};
use crate::model::{order_free_mean, ModelParams};

pub const DIVERGENCE_NORM: f64 = 1e6;

/// `L(θ) = θᵀ λ2 θ + θᵀ λ1 + λ0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolyObjective {
    pub lambda2: Mat,
    pub lambda1: Vec<f64>,
    pub lambda0: f64,
}

impl PolyObjective {
    pub fn dim(&self) -> usize {
        self.lambda1.len()
    }

    pub fn value(&self, theta: &[f64]) -> Result<f64> {
        let q = self.lambda2.matvec(theta)?;
        let quad: f64 = theta.iter().zip(&q).map(|(a, b)| a * b).sum();
        let lin: f64 = theta.iter().zip(&self.lambda1).map(|(a, b)| a * b).sum();
        Ok(quad + lin + self.lambda0)
    }

    /// `2 λ2 θ + λ1`, the exact gradient when `λ2` is symmetric.
    pub fn gradient(&self, theta: &[f64]) -> Result<Vec<f64>> {
        let q = self.lambda2.matvec(theta)?;
        Ok(q.iter().zip(&self.lambda1).map(|(a, b)| 2.0 * a + b).collect())
    }
}

/// Taylor coefficients at `θ = 0` of the mean logistic loss over `rows`:
/// `λ2 = mean(x xᵀ)/8`, `λ1 = mean((½ − y) x)`, `λ0 = ln 2`.
pub fn taylor_coefficients(ds: &TabularDataset, rows: &[usize]) -> Result<PolyObjective> {
    if rows.is_empty() {
        return Err(Error::invalid("rows", "cannot expand the loss of an empty group"));
    }
    let d = ds.dim();
    let n = rows.len() as f64;
    let mut l2 = Mat::zeros(d, d);
    let mut l1 = vec![0.0; d];
    for &i in rows {
        let x = ds.x(i);
        let c = 0.5 - f64::from(ds.y(i));
        for a in 0..d {
            l1[a] += c * x[a];
            let row = l2.row_mut(a);
            for b in 0..d {
                row[b] += x[a] * x[b] / 8.0;
            }
        }
    }
    for v in l2.as_mut_slice() {
        *v /= n;
    }
    for v in &mut l1 {
        *v /= n;
    }
    Ok(PolyObjective {
        lambda2: l2,
        lambda1: l1,
        lambda0: std::f64::consts::LN_2,
    })
}

/// Coefficient sensitivity `Δ = d²/4 + 3d`.
pub fn sensitivity(d: usize) -> f64 {
    let d = d as f64;
    d * d / 4.0 + 3.0 * d
}

/// Add i.i.d. `Laplace(Δ/ε)` noise to every coefficient, then symmetrize `λ2`.
pub fn perturb(obj: &PolyObjective, epsilon: f64, rng: &mut RngStream) -> Result<PolyObjective> {
    if !(epsilon > 0.0) {
        return Err(Error::invalid("epsilon", format!("must be > 0, got {epsilon}")));
    }
    let d = obj.dim();
    let scale = sensitivity(d) / epsilon;
    let mut out = obj.clone();
    if scale == 0.0 {
        return Ok(out);
    }
    let n2 = laplace(rng, scale, d * d)?;
    for (v, e) in out.lambda2.as_mut_slice().iter_mut().zip(n2) {
        *v += e;
    }
    for (v, e) in out.lambda1.iter_mut().zip(laplace(rng, scale, d)?) {
        *v += e;
    }
    out.lambda0 += laplace(rng, scale, 1)?[0];
    for a in 0..d {
        for b in a + 1..d {
            let m = 0.5 * (out.lambda2.get(a, b) + out.lambda2.get(b, a));
            out.lambda2.set(a, b, m);
            out.lambda2.set(b, a, m);
        }
    }
    Ok(out)
}

/// Gradient descent on group objectives with per-round averaging.
/// Touches nothing but the objectives.
pub fn optimize(objectives: &[PolyObjective], theta0: Vec<f64>, eta: f64, steps: usize) -> Result<Vec<f64>> {
    if objectives.is_empty() {
        return Err(Error::invalid("objectives", "need at least one group"));
    }
    if !(eta > 0.0) {
        return Err(Error::invalid("eta", format!("must be > 0, got {eta}")));
    }
    let d = theta0.len();
    if let Some(o) = objectives.iter().find(|o| o.dim() != d) {
        return Err(Error::DimensionMismatch {
            expected: d,
            actual: o.dim(),
        });
    }
    let mut theta = theta0;
    for t in 1..=steps {
        let locals: Vec<Vec<f64>> = objectives
            .par_iter()
            .map(|o| {
                let g = o.gradient(&theta)?;
                Ok(theta.iter().zip(&g).map(|(p, gi)| p - eta * gi).collect())
            })
            .collect::<Result<_>>()?;
        let cols: Vec<&[f64]> = locals.iter().map(Vec::as_slice).collect();
        order_free_mean(&cols, &mut theta);
        let norm = l2_norm(&theta);
        if !(norm <= DIVERGENCE_NORM) {
            return Err(Error::Divergence {
                round: t,
                detail: format!(
                    "parameter norm {norm} exceeds {DIVERGENCE_NORM}; a perturbed quadratic term is likely indefinite"
                ),
            });
        }
    }
    Ok(theta)
}

/// Build one perturbed objective per group. `epsilon = ∞` skips the noise.
pub fn group_objectives(
    ds: &TabularDataset,
    part: &GroupPartition,
    epsilon: f64,
    seed: u64,
) -> Result<Vec<PolyObjective>> {
    (0..part.num_groups())
        .into_par_iter()
        .map(|k| {
            let exact = taylor_coefficients(ds, part.group(k))?;
            if epsilon.is_infinite() && epsilon > 0.0 {
                return Ok(exact);
            }
            let mut rng = RngStream::new(seed, stream_id(k, SITE_NOISE));
            perturb(&exact, epsilon, &mut rng)
        })
        .collect()
}

/// Train a bias-free logistic regression on perturbed group objectives.
/// `epsilon = ∞` trains on the exact polynomials.
pub fn train_fairfm(
    ds: &TabularDataset,
    part: &GroupPartition,
    epsilon: f64,
    eta: f64,
    steps: usize,
    seed: u64,
) -> Result<ModelParams> {
    let objectives = group_objectives(ds, part, epsilon, seed)?;
    let mut init_rng = RngStream::new(seed, stream_id(0, SITE_INIT));
    let init = ModelParams::init(ds.dim(), &[], &mut init_rng)?;
    let theta = optimize(&objectives, init.as_flat().to_vec(), eta, steps)?;
    ModelParams::from_flat(init.shapes().to_vec(), theta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::partition_by_group;
    use crate::model::{bce_from_logit, Classifier};

    fn single_point() -> TabularDataset {
        TabularDataset::new(Mat::from_vec(1, 1, vec![1.0]).unwrap(), vec![0], vec![1], 1).unwrap()
    }

    fn random_ds(n: usize, d: usize, seed: u64) -> TabularDataset {
        let mut rng = RngStream::new(seed, 0);
        let x: Vec<f64> = (0..n * d).map(|_| rng.uniform()).collect();
        let y: Vec<u8> = (0..n).map(|i| u8::from(x[i * d] > 0.4)).collect();
        let a: Vec<usize> = (0..n).map(|i| i % 2).collect();
        TabularDataset::new(Mat::from_vec(n, d, x).unwrap(), a, y, 2).unwrap()
    }

    fn mean_loss(ds: &TabularDataset, theta: &[f64]) -> f64 {
        (0..ds.len())
            .map(|i| {
                let z: f64 = ds.x(i).iter().zip(theta).map(|(a, b)| a * b).sum();
                bce_from_logit(z, ds.y(i))
            })
            .sum::<f64>()
            / ds.len() as f64
    }

    #[test]
    fn single_point_coefficients() {
        let o = taylor_coefficients(&single_point(), &[0]).unwrap();
        assert_eq!(o.lambda2.as_slice(), &[0.125]);
        assert_eq!(o.lambda1, vec![-0.5]);
        assert_eq!(o.lambda0, std::f64::consts::LN_2);
    }

    #[test]
    fn anchor_and_gradient_match_logistic_loss() {
        let ds = random_ds(200, 3, 1);
        let rows: Vec<usize> = (0..ds.len()).collect();
        let o = taylor_coefficients(&ds, &rows).unwrap();
        // every sample's loss at θ = 0 is exactly ln 2, and so is the polynomial
        assert_eq!(o.value(&[0.0; 3]).unwrap(), std::f64::consts::LN_2);
        for i in 0..ds.len() {
            assert_eq!(bce_from_logit(0.0, ds.y(i)), std::f64::consts::LN_2);
        }

        let theta = [6e-4, -5e-4, 6e-4];
        let h = 1e-6;
        let g = o.gradient(&theta).unwrap();
        for j in 0..3 {
            let mut p = theta;
            let mut m = theta;
            p[j] += h;
            m[j] -= h;
            let fd = (mean_loss(&ds, &p) - mean_loss(&ds, &m)) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-5, "coord {j}: {fd} vs {}", g[j]);
        }
    }

    #[test]
    fn gradient_matches_finite_differences_of_polynomial() {
        let mut rng = RngStream::new(2, 0);
        let ds = random_ds(50, 4, 2);
        let rows: Vec<usize> = (0..ds.len()).collect();
        let o = perturb(&taylor_coefficients(&ds, &rows).unwrap(), 1.0, &mut rng).unwrap();
        let theta: Vec<f64> = (0..4).map(|_| rng.uniform() - 0.5).collect();
        let g = o.gradient(&theta).unwrap();
        let h = 1e-5;
        for j in 0..4 {
            let mut p = theta.clone();
            let mut m = theta.clone();
            p[j] += h;
            m[j] -= h;
            let fd = (o.value(&p).unwrap() - o.value(&m).unwrap()) / (2.0 * h);
            assert!((fd - g[j]).abs() < 1e-6 * fd.abs().max(1.0));
        }
    }

    #[test]
    fn sensitivity_examples() {
        assert_eq!(sensitivity(2), 7.0);
        assert_eq!(sensitivity(1), 3.25);
    }

    #[test]
    fn perturbation_scale_and_symmetry() {
        let zero = PolyObjective {
            lambda2: Mat::zeros(2, 2),
            lambda1: vec![0.0; 2],
            lambda0: 0.0,
        };
        let mut rng = RngStream::new(3, 0);
        let reps = 100_000;
        let mut abs_sum = 0.0;
        for _ in 0..reps {
            let p = perturb(&zero, 1.0, &mut rng).unwrap();
            assert_eq!(p.lambda2.get(0, 1), p.lambda2.get(1, 0));
            abs_sum += p.lambda1[0].abs();
        }
        let mean = abs_sum / reps as f64;
        assert!((mean - 7.0).abs() < 0.02 * 7.0, "{mean}");

        let ds = random_ds(20, 2, 4);
        let rows: Vec<usize> = (0..20).collect();
        let o = taylor_coefficients(&ds, &rows).unwrap();
        let p = perturb(&o, 1e12, &mut rng).unwrap();
        for (a, b) in o.lambda2.as_slice().iter().zip(p.lambda2.as_slice()) {
            assert!((a - b).abs() < 1e-9);
        }
        assert!(perturb(&o, 0.0, &mut rng).is_err());
    }

    #[test]
    fn identical_groups_follow_single_group() {
        let ds = random_ds(60, 3, 5);
        let rows: Vec<usize> = (0..60).collect();
        let o = taylor_coefficients(&ds, &rows).unwrap();
        let t0 = vec![0.1, -0.2, 0.3];
        let one = optimize(std::slice::from_ref(&o), t0.clone(), 0.5, 200).unwrap();
        let two = optimize(&[o.clone(), o], t0, 0.5, 200).unwrap();
        assert_eq!(one, two);
    }

    #[test]
    fn indefinite_objective_diverges() {
        let o = PolyObjective {
            lambda2: Mat::from_vec(1, 1, vec![-1.0]).unwrap(),
            lambda1: vec![0.0],
            lambda0: 0.0,
        };
        assert!(matches!(
            optimize(&[o], vec![1.0], 1.0, 100),
            Err(Error::Divergence { .. })
        ));
    }

    #[test]
    fn noiseless_training_fits() {
        let ds = random_ds(400, 3, 6);
        let part = partition_by_group(&ds).unwrap();
        let m = train_fairfm(&ds, &part, f64::INFINITY, 2.0, 500, 0).unwrap();
        assert_eq!(m.num_layers(), 1);
        let acc = (0..ds.len())
            .filter(|&i| u8::from(m.predict_proba(ds.x(i)) > 0.5) == ds.y(i))
            .count() as f64
            / ds.len() as f64;
        assert!(acc > 0.6, "{acc}");
    }
}
