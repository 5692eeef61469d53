//! Exact (O(n^2)) t-SNE to two dimensions.
//!
//! Frozen settings: perplexity min(30, (n-1)/3), seeded N(0, 1e-4) init,
//! 1000 gradient iterations, early exaggeration x12 for the first 250,
//! learning rate 200 with adaptive per-parameter gains, momentum 0.5 then
//! 0.8 from iteration 250.

use crate::error::{Error, Result};
use crate::seeds;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;
use rand_distr::{Distribution, Normal};

const ITERATIONS: usize = 1000;
const EXAGGERATION: f64 = 12.0;
const EXAGGERATION_ITERS: usize = 250;
const LEARNING_RATE: f64 = 200.0;
const MOMENTUM_SWITCH: usize = 250;
const P_FLOOR: f64 = 1e-12;

pub fn reduce_2d(matrix: &Array2<f64>, seed: u64) -> Result<Array2<f64>> {
    let n = matrix.nrows();
    if n < 3 {
        return Err(Error::InvalidArgument(format!(
            "2-d reduction needs at least 3 points, got {n}"
        )));
    }
    let perplexity = 30.0f64.min((n - 1) as f64 / 3.0);
    let d2 = squared_distances(matrix);
    let p = joint_probabilities(&d2, perplexity);

    let mut rng = ChaCha12Rng::seed_from_u64(seeds::derive(seed, "tsne-init", &[]));
    let init = Normal::new(0.0, 1e-4).expect("valid std");
    let mut y = vec![[0.0f64; 2]; n];
    for point in y.iter_mut() {
        point[0] = init.sample(&mut rng);
        point[1] = init.sample(&mut rng);
    }

    let mut velocity = vec![[0.0f64; 2]; n];
    let mut gains = vec![[1.0f64; 2]; n];
    let mut grad = vec![[0.0f64; 2]; n];
    let mut q_unnorm = vec![0.0f64; n * n];

    for iter in 0..ITERATIONS {
        let exaggeration = if iter < EXAGGERATION_ITERS { EXAGGERATION } else { 1.0 };
        let momentum = if iter < MOMENTUM_SWITCH { 0.5 } else { 0.8 };

        let mut q_sum = 0.0;
        for i in 0..n {
            q_unnorm[i * n + i] = 0.0;
            for j in i + 1..n {
                let dx = y[i][0] - y[j][0];
                let dy = y[i][1] - y[j][1];
                let w = 1.0 / (1.0 + dx * dx + dy * dy);
                q_unnorm[i * n + j] = w;
                q_unnorm[j * n + i] = w;
                q_sum += 2.0 * w;
            }
        }

        for g in grad.iter_mut() {
            *g = [0.0, 0.0];
        }
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                let w = q_unnorm[i * n + j];
                let q = (w / q_sum).max(P_FLOOR);
                let coeff = 4.0 * (exaggeration * p[i * n + j] - q) * w;
                grad[i][0] += coeff * (y[i][0] - y[j][0]);
                grad[i][1] += coeff * (y[i][1] - y[j][1]);
            }
        }

        let mut mean = [0.0f64; 2];
        for i in 0..n {
            for k in 0..2 {
                // Gain grows when the gradient keeps pointing against the
                // velocity and shrinks when they agree (van der Maaten's
                // update rule).
                gains[i][k] = if (grad[i][k] > 0.0) != (velocity[i][k] > 0.0) {
                    gains[i][k] + 0.2
                } else {
                    (gains[i][k] * 0.8).max(0.01)
                };
                velocity[i][k] =
                    momentum * velocity[i][k] - LEARNING_RATE * gains[i][k] * grad[i][k];
                y[i][k] += velocity[i][k];
                mean[k] += y[i][k];
            }
        }
        for k in 0..2 {
            mean[k] /= n as f64;
        }
        for point in y.iter_mut() {
            point[0] -= mean[0];
            point[1] -= mean[1];
        }
    }

    let mut out = Array2::zeros((n, 2));
    for (i, point) in y.iter().enumerate() {
        out[[i, 0]] = point[0];
        out[[i, 1]] = point[1];
    }
    Ok(out)
}

fn squared_distances(matrix: &Array2<f64>) -> Vec<f64> {
    let n = matrix.nrows();
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        let ri = matrix.row(i);
        for j in i + 1..n {
            let rj = matrix.row(j);
            let dist: f64 = ri
                .iter()
                .zip(rj.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            d2[i * n + j] = dist;
            d2[j * n + i] = dist;
        }
    }
    d2
}

/// Per-point binary search for the kernel width matching the target
/// perplexity, then symmetrized joint probabilities.
fn joint_probabilities(d2: &[f64], perplexity: f64) -> Vec<f64> {
    let n = (d2.len() as f64).sqrt() as usize;
    let target_entropy = perplexity.ln();
    let mut cond = vec![0.0; n * n];

    for i in 0..n {
        let mut beta = 1.0;
        let (mut beta_min, mut beta_max) = (f64::NEG_INFINITY, f64::INFINITY);
        let mut row = vec![0.0; n];
        for _ in 0..50 {
            let mut sum_p = 0.0;
            let mut sum_dp = 0.0;
            for j in 0..n {
                if j == i {
                    row[j] = 0.0;
                    continue;
                }
                let pj = (-beta * d2[i * n + j]).exp();
                row[j] = pj;
                sum_p += pj;
                sum_dp += d2[i * n + j] * pj;
            }
            if sum_p <= 0.0 {
                // Beta ran away (isolated point); fall back to uniform.
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if j == i { 0.0 } else { 1.0 };
                }
                break;
            }
            let entropy = sum_p.ln() + beta * sum_dp / sum_p;
            let diff = entropy - target_entropy;
            if diff.abs() < 1e-5 {
                break;
            }
            if diff > 0.0 {
                beta_min = beta;
                beta = if beta_max.is_finite() { (beta + beta_max) / 2.0 } else { beta * 2.0 };
            } else {
                beta_max = beta;
                beta = if beta_min.is_finite() { (beta + beta_min) / 2.0 } else { beta / 2.0 };
            }
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            for j in 0..n {
                cond[i * n + j] = row[j] / total;
            }
        }
    }

    let mut joint = vec![0.0; n * n];
    let scale = 1.0 / (2.0 * n as f64);
    for i in 0..n {
        for j in 0..n {
            joint[i * n + j] = ((cond[i * n + j] + cond[j * n + i]) * scale).max(P_FLOOR);
        }
        joint[i * n + i] = P_FLOOR;
    }
    joint
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn two_gaussian_clusters(per_cluster: usize, dim: usize, seed: u64) -> (Array2<f64>, Vec<usize>) {
        let mut rng = ChaCha12Rng::seed_from_u64(seed);
        let n = per_cluster * 2;
        let mut data = Array2::zeros((n, dim));
        let mut labels = vec![0usize; n];
        for i in 0..n {
            let cluster = i / per_cluster;
            labels[i] = cluster;
            let center = if cluster == 0 { 5.0 } else { -5.0 };
            for k in 0..dim {
                let mu = if k == 0 { center } else { 0.0 };
                data[[i, k]] = mu + rng.gen_range(-1.0..1.0);
            }
        }
        (data, labels)
    }

    fn mean_silhouette(points: &Array2<f64>, labels: &[usize]) -> f64 {
        let n = points.nrows();
        let dist = |a: usize, b: usize| -> f64 {
            let dx = points[[a, 0]] - points[[b, 0]];
            let dy = points[[a, 1]] - points[[b, 1]];
            (dx * dx + dy * dy).sqrt()
        };
        let mut total = 0.0;
        for i in 0..n {
            let (mut same_sum, mut same_n) = (0.0, 0usize);
            let (mut other_sum, mut other_n) = (0.0, 0usize);
            for j in 0..n {
                if j == i {
                    continue;
                }
                if labels[j] == labels[i] {
                    same_sum += dist(i, j);
                    same_n += 1;
                } else {
                    other_sum += dist(i, j);
                    other_n += 1;
                }
            }
            let a = same_sum / same_n as f64;
            let b = other_sum / other_n as f64;
            total += (b - a) / a.max(b);
        }
        total / n as f64
    }

    #[test]
    fn separated_clusters_stay_separated_in_2d() {
        let (data, labels) = two_gaussian_clusters(20, 64, 11);
        let projected = reduce_2d(&data, 3).unwrap();
        assert_eq!(projected.shape(), &[40, 2]);
        let s = mean_silhouette(&projected, &labels);
        assert!(s > 0.5, "silhouette {s} too low; clusters merged");
    }

    #[test]
    fn reduction_is_deterministic() {
        let (data, _) = two_gaussian_clusters(6, 16, 2);
        let a = reduce_2d(&data, 9).unwrap();
        let b = reduce_2d(&data, 9).unwrap();
        assert_eq!(a, b);
        let c = reduce_2d(&data, 10).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn rejects_fewer_than_three_points() {
        let data = Array2::zeros((2, 8));
        assert!(reduce_2d(&data, 0).is_err());
    }

    #[test]
    fn identical_points_do_not_blow_up() {
        let data = Array2::from_elem((5, 4), 1.5);
        let out = reduce_2d(&data, 1).unwrap();
        assert!(out.iter().all(|v| v.is_finite()));
    }
}
