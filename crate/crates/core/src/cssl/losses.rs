//! The contrastive objectives, each in two forms: a plain function of
//! matrices (the contract, used by oracles) and a graph builder used during
//! training. The graph forms add tiny epsilons inside square roots so
//! gradients stay finite; the plain forms are exact.

use super::ContrastiveBatch;
use crate::error::{Error, Result};
use crate::nn::{Graph, NodeId};
use ndarray::{Array1, Array2, ArrayD, Axis};

/// Mean InfoNCE over anchors. Explicit negatives are shared across the
/// batch; without them the other positives serve as negatives.
pub fn nce_loss(batch: &ContrastiveBatch) -> Result<f64> {
    batch.validate()?;
    let tau = batch.temperature;
    let b = batch.anchors.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let anchor = batch.anchors.row(i);
        let mut logits = Vec::new();
        let target = match &batch.negatives {
            Some(neg) => {
                logits.push(anchor.dot(&batch.positives.row(i)) / tau);
                for j in 0..neg.nrows() {
                    logits.push(anchor.dot(&neg.row(j)) / tau);
                }
                0
            }
            None => {
                for j in 0..b {
                    logits.push(anchor.dot(&batch.positives.row(j)) / tau);
                }
                i
            }
        };
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logits.iter().map(|&l| (l - max).exp()).sum::<f64>().ln();
        total += lse - logits[target];
    }
    Ok(total / b as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VicregTerms {
    pub invariance: f64,
    /// Hinge `mean_d max(0, gamma - std_d)` for each view, before weighting.
    pub variance_a: f64,
    pub variance_b: f64,
    /// Off-diagonal covariance energy per view, before weighting.
    pub covariance_a: f64,
    pub covariance_b: f64,
    pub total: f64,
}

/// `lambda * MSE + mu * (hinge_a + hinge_b) + nu * (cov_a + cov_b)`, with
/// unbiased column statistics. The per-view terms are reported unweighted.
pub fn vicreg_loss(
    z_a: &Array2<f64>,
    z_b: &Array2<f64>,
    lambda: f64,
    mu: f64,
    nu: f64,
    gamma: f64,
) -> Result<VicregTerms> {
    check_pair(z_a, z_b)?;
    let b = z_a.nrows();
    if b < 2 {
        return Err(Error::InvalidArgument(format!(
            "standard deviation over a batch of {b} is undefined"
        )));
    }
    let d = z_a.ncols();
    let invariance =
        z_a.iter().zip(z_b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / (b * d) as f64;

    let variance_hinge = |z: &Array2<f64>| -> f64 {
        let mut acc = 0.0;
        for col in z.columns() {
            let mean = col.sum() / b as f64;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / (b - 1) as f64;
            acc += (gamma - var.sqrt()).max(0.0);
        }
        acc / d as f64
    };
    let covariance_energy = |z: &Array2<f64>| -> f64 {
        let mean = z.mean_axis(Axis(0)).expect("nonempty");
        let centered = z - &mean;
        let cov = centered.t().dot(&centered) / (b - 1) as f64;
        let mut acc = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    acc += cov[[i, j]] * cov[[i, j]];
                }
            }
        }
        acc / d as f64
    };

    let variance_a = variance_hinge(z_a);
    let variance_b = variance_hinge(z_b);
    let covariance_a = covariance_energy(z_a);
    let covariance_b = covariance_energy(z_b);
    Ok(VicregTerms {
        invariance,
        variance_a,
        variance_b,
        covariance_a,
        covariance_b,
        total: lambda * invariance
            + mu * (variance_a + variance_b)
            + nu * (covariance_a + covariance_b),
    })
}

/// Redundancy-reduction loss over the cross-correlation of column-
/// standardized views: `sum_d (1 - C_dd)^2 + lambda * sum_{d!=e} C_de^2`.
pub fn barlow_twins_loss(z_a: &Array2<f64>, z_b: &Array2<f64>, lambda: f64) -> Result<f64> {
    check_pair(z_a, z_b)?;
    let b = z_a.nrows();
    if b < 2 {
        return Err(Error::InvalidArgument("need at least 2 rows to standardize".into()));
    }
    let standardize = |z: &Array2<f64>| -> Result<Array2<f64>> {
        let mut out = z.clone();
        for (idx, mut col) in out.columns_mut().into_iter().enumerate() {
            let mean = col.sum() / b as f64;
            let var = col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
            if var == 0.0 {
                return Err(Error::InvalidArgument(format!(
                    "column {idx} has zero variance; correlation undefined"
                )));
            }
            let std = var.sqrt();
            col.mapv_inplace(|v| (v - mean) / std);
        }
        Ok(out)
    };
    let za = standardize(z_a)?;
    let zb = standardize(z_b)?;
    let c = za.t().dot(&zb) / b as f64;
    let d = c.nrows();
    let mut loss = 0.0;
    for i in 0..d {
        for j in 0..d {
            if i == j {
                loss += (1.0 - c[[i, j]]) * (1.0 - c[[i, j]]);
            } else {
                loss += lambda * c[[i, j]] * c[[i, j]];
            }
        }
    }
    Ok(loss)
}

/// Mean of `-cos(p_i, z_i)`. The caller is responsible for not letting
/// gradients flow into `z`; the graph form applies the stop-gradient itself.
pub fn negative_cosine_loss(p: &Array2<f64>, z: &Array2<f64>) -> Result<f64> {
    check_pair(p, z)?;
    let mut total = 0.0;
    for (pi, zi) in p.rows().into_iter().zip(z.rows()) {
        let np = pi.dot(&pi).sqrt();
        let nz = zi.dot(&zi).sqrt();
        if np == 0.0 || nz == 0.0 {
            return Err(Error::InvalidArgument("zero vector row in cosine loss".into()));
        }
        total -= pi.dot(&zi) / (np * nz);
    }
    Ok(total / p.nrows() as f64)
}

/// Cross-entropy from the centered, sharpened teacher distribution to the
/// student's log-softmax. Teacher logits are treated as constants.
pub fn dino_loss(
    student_logits: &Array2<f64>,
    teacher_logits: &Array2<f64>,
    teacher_temp: f64,
    student_temp: f64,
    center: &Array1<f64>,
) -> Result<f64> {
    check_pair(student_logits, teacher_logits)?;
    if center.len() != teacher_logits.ncols() {
        return Err(Error::ShapeMismatch(format!(
            "center has {} entries for {} prototypes",
            center.len(),
            teacher_logits.ncols()
        )));
    }
    if teacher_temp <= 0.0 || student_temp <= 0.0 || teacher_temp >= student_temp {
        return Err(Error::InvalidArgument(format!(
            "need 0 < teacher_temp < student_temp, got {teacher_temp} and {student_temp}"
        )));
    }
    if !center.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite center".into()));
    }
    let b = student_logits.nrows();
    let mut total = 0.0;
    for i in 0..b {
        let t_row: Vec<f64> = teacher_logits
            .row(i)
            .iter()
            .zip(center.iter())
            .map(|(&l, &c)| (l - c) / teacher_temp)
            .collect();
        let t = softmax(&t_row);
        let s_row: Vec<f64> = student_logits.row(i).iter().map(|&l| l / student_temp).collect();
        let logs = log_softmax(&s_row);
        total -= t.iter().zip(&logs).map(|(&ti, &li)| ti * li).sum::<f64>();
    }
    Ok(total / b as f64)
}

/// EMA update of the prototype center from a batch of raw teacher logits.
pub fn update_center(center: &mut Array1<f64>, teacher_logits: &Array2<f64>, momentum: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("center momentum {momentum} outside [0,1]")));
    }
    if center.len() != teacher_logits.ncols() || teacher_logits.nrows() == 0 {
        return Err(Error::ShapeMismatch("center/logit shapes incompatible".into()));
    }
    let batch_mean = teacher_logits.mean_axis(Axis(0)).expect("nonempty");
    center.zip_mut_with(&batch_mean, |c, &m| *c = momentum * *c + (1.0 - momentum) * m);
    Ok(())
}

fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
    row.iter().map(|&v| v - lse).collect()
}

fn check_pair(a: &Array2<f64>, b: &Array2<f64>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::ShapeMismatch(format!("{:?} vs {:?}", a.dim(), b.dim())));
    }
    if a.nrows() == 0 {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    if !a.iter().all(|v| v.is_finite()) || !b.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidArgument("non-finite values".into()));
    }
    Ok(())
}

// ---- graph builders -------------------------------------------------------

/// Rowwise L2 normalization, guarded for training stability.
pub(crate) fn normalize_rows(g: &mut Graph, x: NodeId) -> NodeId {
    let sq = g.square(x);
    let sum = g.sum_axes(sq, &[1]);
    let guarded = g.add_scalar(sum, 1e-12);
    let norm = g.sqrt(guarded);
    g.div(x, norm)
}

pub(crate) fn nce_graph(
    g: &mut Graph,
    anchors: NodeId,
    positives: NodeId,
    negatives: Option<NodeId>,
    tau: f64,
) -> NodeId {
    let b = g.value(anchors).shape()[0];
    let (logits, targets) = match negatives {
        Some(neg) => {
            let prod = g.mul(anchors, positives);
            let pos = g.sum_axes(prod, &[1]);
            let neg_t = g.permute(neg, &[1, 0]);
            let negl = g.matmul(anchors, neg_t);
            (g.concat(1, &[pos, negl]), vec![0usize; b])
        }
        None => {
            let pos_t = g.permute(positives, &[1, 0]);
            (g.matmul(anchors, pos_t), (0..b).collect())
        }
    };
    let scaled = g.scale(logits, 1.0 / tau);
    let logp = g.log_softmax(scaled, 1);
    g.nll_loss(logp, &targets)
}

pub(crate) fn vicreg_graph(
    g: &mut Graph,
    z_a: NodeId,
    z_b: NodeId,
    lambda: f64,
    mu: f64,
    nu: f64,
    gamma: f64,
) -> NodeId {
    let diff = g.sub(z_a, z_b);
    let sq = g.square(diff);
    let invariance = g.mean_all(sq);

    let mut hinges = Vec::new();
    let mut covs = Vec::new();
    for z in [z_a, z_b] {
        let (b, d) = {
            let shape = g.value(z).shape();
            (shape[0], shape[1])
        };
        let mean = g.mean_axes(z, &[0]);
        let centered = g.sub(z, mean);
        let centered_sq = g.square(centered);
        let sums = g.sum_axes(centered_sq, &[0]);
        let var = g.scale(sums, 1.0 / (b - 1) as f64);
        let var_guarded = g.add_scalar(var, 1e-4);
        let std = g.sqrt(var_guarded);
        let neg_std = g.neg(std);
        let gap = g.add_scalar(neg_std, gamma);
        let hinge = g.relu(gap);
        hinges.push(g.mean_all(hinge));

        let centered_t = g.permute(centered, &[1, 0]);
        let cov_full = g.matmul(centered_t, centered);
        let cov = g.scale(cov_full, 1.0 / (b - 1) as f64);
        let cov_sq = g.square(cov);
        let total = g.sum_all(cov_sq);
        let eye = g.constant(identity(d));
        let diag = g.mul(cov_sq, eye);
        let diag_sum = g.sum_all(diag);
        let off = g.sub(total, diag_sum);
        covs.push(g.scale(off, 1.0 / d as f64));
    }

    let inv_term = g.scale(invariance, lambda);
    let hinge_sum = g.add(hinges[0], hinges[1]);
    let hinge_term = g.scale(hinge_sum, mu);
    let cov_sum = g.add(covs[0], covs[1]);
    let cov_term = g.scale(cov_sum, nu);
    let partial = g.add(inv_term, hinge_term);
    g.add(partial, cov_term)
}

pub(crate) fn barlow_graph(g: &mut Graph, z_a: NodeId, z_b: NodeId, lambda: f64) -> NodeId {
    let (b, d) = {
        let shape = g.value(z_a).shape();
        (shape[0], shape[1])
    };
    let standardize = |g: &mut Graph, z: NodeId| -> NodeId {
        let mean = g.mean_axes(z, &[0]);
        let centered = g.sub(z, mean);
        let centered_sq = g.square(centered);
        let var = g.mean_axes(centered_sq, &[0]);
        let var_guarded = g.add_scalar(var, 1e-5);
        let std = g.sqrt(var_guarded);
        g.div(centered, std)
    };
    let za = standardize(g, z_a);
    let zb = standardize(g, z_b);
    let za_t = g.permute(za, &[1, 0]);
    let cross = g.matmul(za_t, zb);
    let c = g.scale(cross, 1.0 / b as f64);
    let eye = g.constant(identity(d));
    let diag_gap = g.sub(eye, c);
    let eye2 = g.constant(identity(d));
    let diag_only = g.mul(diag_gap, eye2);
    let diag_sq = g.square(diag_only);
    let on_diag = g.sum_all(diag_sq);

    let c_sq = g.square(c);
    let eye3 = g.constant(identity(d));
    let diag_c_sq = g.mul(c_sq, eye3);
    let total = g.sum_all(c_sq);
    let diag_sum = g.sum_all(diag_c_sq);
    let off_diag = g.sub(total, diag_sum);
    let off_term = g.scale(off_diag, lambda);
    g.add(on_diag, off_term)
}

/// `-mean cos(p_i, z_i)` with a stop-gradient on `z`.
pub(crate) fn negcos_graph(g: &mut Graph, p: NodeId, z: NodeId) -> NodeId {
    let z_const = g.detach(z);
    let pn = normalize_rows(g, p);
    let zn = normalize_rows(g, z_const);
    let prod = g.mul(pn, zn);
    let per_row = g.sum_axes(prod, &[1]);
    let mean = g.mean_all(per_row);
    g.neg(mean)
}

/// Student-side DINO term against fixed teacher probabilities.
pub(crate) fn dino_student_graph(
    g: &mut Graph,
    student_logits: NodeId,
    teacher_probs: &Array2<f64>,
    student_temp: f64,
) -> NodeId {
    let scaled = g.scale(student_logits, 1.0 / student_temp);
    let logs = g.log_softmax(scaled, 1);
    let t = g.constant(teacher_probs.clone().into_dyn());
    let prod = g.mul(t, logs);
    let per_row = g.sum_axes(prod, &[1]);
    let mean = g.mean_all(per_row);
    g.neg(mean)
}

fn identity(d: usize) -> ArrayD<f64> {
    let mut eye = Array2::zeros((d, d));
    for i in 0..d {
        eye[[i, i]] = 1.0;
    }
    eye.into_dyn()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients_at;
    use ndarray::arr2;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;

    fn random_rows(rng: &mut ChaCha12Rng, b: usize, d: usize, normalize: bool) -> Array2<f64> {
        let mut m = Array2::<f64>::zeros((b, d));
        for i in 0..b {
            for j in 0..d {
                m[[i, j]] = rng.gen_range(-1.0..1.0);
            }
            if normalize {
                let n: f64 = m.row(i).dot(&m.row(i)).sqrt();
                for j in 0..d {
                    m[[i, j]] /= n;
                }
            }
        }
        m
    }

    #[test]
    fn nce_equal_similarities_give_log2() {
        // One negative with the same similarity as the positive.
        let batch = ContrastiveBatch {
            anchors: arr2(&[[1.0, 0.0]]),
            positives: arr2(&[[0.0, 1.0]]),
            negatives: Some(arr2(&[[0.0, 1.0]])),
            temperature: 0.7,
        };
        let loss = nce_loss(&batch).unwrap();
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn nce_orthogonal_negative_matches_closed_form() {
        let batch = ContrastiveBatch {
            anchors: arr2(&[[1.0, 0.0]]),
            positives: arr2(&[[1.0, 0.0]]),
            negatives: Some(arr2(&[[0.0, 1.0]])),
            temperature: 1.0,
        };
        let loss = nce_loss(&batch).unwrap();
        let expected = -(std::f64::consts::E / (std::f64::consts::E + 1.0)).ln();
        assert!((loss - expected).abs() < 1e-12);
        assert!((expected - 0.3133).abs() < 1e-4);
    }

    #[test]
    fn nce_matches_softmax_cross_entropy_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        for trial in 0..20 {
            let b = rng.gen_range(2..6);
            let d = rng.gen_range(2..8);
            let n = rng.gen_range(1..6);
            let explicit = trial % 2 == 0;
            let anchors = random_rows(&mut rng, b, d, true);
            let positives = random_rows(&mut rng, b, d, true);
            let negatives = explicit.then(|| random_rows(&mut rng, n, d, true));
            let tau = rng.gen_range(0.05..1.0);
            let batch = ContrastiveBatch {
                anchors: anchors.clone(),
                positives: positives.clone(),
                negatives: negatives.clone(),
                temperature: tau,
            };
            let loss = nce_loss(&batch).unwrap();

            // Oracle: explicit logit table, plain softmax cross-entropy.
            let mut oracle = 0.0;
            for i in 0..b {
                let (logits, target): (Vec<f64>, usize) = match &negatives {
                    Some(neg) => {
                        let mut l = vec![anchors.row(i).dot(&positives.row(i)) / tau];
                        l.extend(neg.rows().into_iter().map(|r| anchors.row(i).dot(&r) / tau));
                        (l, 0)
                    }
                    None => (
                        (0..b).map(|j| anchors.row(i).dot(&positives.row(j)) / tau).collect(),
                        i,
                    ),
                };
                let z: f64 = logits.iter().map(|l| l.exp()).sum();
                oracle -= (logits[target].exp() / z).ln();
            }
            oracle /= b as f64;
            assert!((loss - oracle).abs() < 1e-6, "trial {trial}: {loss} vs {oracle}");
        }
    }

    #[test]
    fn nce_is_invariant_to_joint_rescaling_and_monotone_in_negatives() {
        let mut rng = ChaCha12Rng::seed_from_u64(77);
        let anchors = random_rows(&mut rng, 3, 4, true);
        let positives = random_rows(&mut rng, 3, 4, true);
        let negatives = random_rows(&mut rng, 2, 4, true);
        let tau = 0.3;
        let base = nce_loss(&ContrastiveBatch {
            anchors: anchors.clone(),
            positives: positives.clone(),
            negatives: Some(negatives.clone()),
            temperature: tau,
        })
        .unwrap();

        // h -> c h (both sides of every product), tau -> c^2 tau keeps
        // every logit fixed.
        let c = 3.7;
        let rescaled = nce_loss(&ContrastiveBatch {
            anchors: anchors.clone() * c,
            positives: positives.clone() * c,
            negatives: Some(negatives.clone() * c),
            temperature: tau * c * c,
        })
        .unwrap();
        assert!((base - rescaled).abs() < 1e-9);

        // Pushing a negative away from every anchor strictly lowers the loss.
        let farther = nce_loss(&ContrastiveBatch {
            anchors,
            positives,
            negatives: Some(negatives * 0.5),
            temperature: tau,
        })
        .unwrap();
        assert!(farther < base);
    }

    #[test]
    fn nce_graph_matches_plain_and_gradchecks() {
        let mut rng = ChaCha12Rng::seed_from_u64(5);
        let anchors = random_rows(&mut rng, 3, 4, true);
        let positives = random_rows(&mut rng, 3, 4, true);
        let negatives = random_rows(&mut rng, 2, 4, true);
        let tau = 0.4;

        let plain = nce_loss(&ContrastiveBatch {
            anchors: anchors.clone(),
            positives: positives.clone(),
            negatives: Some(negatives.clone()),
            temperature: tau,
        })
        .unwrap();
        let mut g = Graph::new();
        let a = g.leaf(anchors.clone().into_dyn());
        let p = g.leaf(positives.clone().into_dyn());
        let n = g.leaf(negatives.clone().into_dyn());
        let loss = nce_graph(&mut g, a, p, Some(n), tau);
        assert!((g.scalar_value(loss) - plain).abs() < 1e-10);

        check_gradients_at(
            &[anchors.into_dyn(), positives.into_dyn(), negatives.into_dyn()],
            |g, leaves| nce_graph(g, leaves[0], leaves[1], Some(leaves[2]), tau),
            1e-4,
        );

        // Batch-negative form.
        let anchors = random_rows(&mut rng, 4, 3, true);
        let positives = random_rows(&mut rng, 4, 3, true);
        let plain = nce_loss(&ContrastiveBatch {
            anchors: anchors.clone(),
            positives: positives.clone(),
            negatives: None,
            temperature: tau,
        })
        .unwrap();
        let mut g = Graph::new();
        let a = g.leaf(anchors.clone().into_dyn());
        let p = g.leaf(positives.clone().into_dyn());
        let loss = nce_graph(&mut g, a, p, None, tau);
        assert!((g.scalar_value(loss) - plain).abs() < 1e-10);
        check_gradients_at(
            &[anchors.into_dyn(), positives.into_dyn()],
            |g, leaves| nce_graph(g, leaves[0], leaves[1], None, tau),
            1e-4,
        );
    }

    #[test]
    fn vicreg_terms_hit_their_fixed_points() {
        let mut rng = ChaCha12Rng::seed_from_u64(9);
        let z = random_rows(&mut rng, 5, 4, false);
        let terms = vicreg_loss(&z, &z, 25.0, 25.0, 1.0, 1.0).unwrap();
        assert_eq!(terms.invariance, 0.0);

        // Constant batch: std is 0 in every dimension, hinge = gamma per view.
        let constant = Array2::from_elem((4, 6), 0.3);
        let gamma = 1.0;
        let terms = vicreg_loss(&constant, &constant, 25.0, 25.0, 1.0, gamma).unwrap();
        assert!((terms.variance_a - gamma).abs() < 1e-12);
        assert!((terms.variance_b - gamma).abs() < 1e-12);

        // Orthogonal centered columns: covariance exactly zero.
        let decorrelated = arr2(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        let terms = vicreg_loss(&decorrelated, &decorrelated, 25.0, 25.0, 1.0, 1.0).unwrap();
        assert_eq!(terms.covariance_a, 0.0);
        assert_eq!(terms.covariance_b, 0.0);

        assert!(vicreg_loss(&random_rows(&mut rng, 1, 4, false), &random_rows(&mut rng, 1, 4, false), 25.0, 25.0, 1.0, 1.0).is_err());
    }

    #[test]
    fn vicreg_graph_matches_plain_and_gradchecks() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let z_a = random_rows(&mut rng, 6, 5, false);
        let z_b = random_rows(&mut rng, 6, 5, false);
        let (l, m, n, gam) = (25.0, 25.0, 1.0, 1.0);
        let plain = vicreg_loss(&z_a, &z_b, l, m, n, gam).unwrap().total;
        let mut g = Graph::new();
        let a = g.leaf(z_a.clone().into_dyn());
        let b = g.leaf(z_b.clone().into_dyn());
        let loss = vicreg_graph(&mut g, a, b, l, m, n, gam);
        // The graph form guards the std with +1e-4 inside the sqrt.
        assert!((g.scalar_value(loss) - plain).abs() < 2e-2 * plain.abs().max(1.0));

        check_gradients_at(
            &[z_a.into_dyn(), z_b.into_dyn()],
            |g, leaves| vicreg_graph(g, leaves[0], leaves[1], l, m, n, gam),
            1e-4,
        );
    }

    #[test]
    fn barlow_twins_identity_and_negation_cases() {
        // Standardized, exactly decorrelated columns: C = I, loss 0.
        let z = arr2(&[[1.0, 1.0], [1.0, -1.0], [-1.0, 1.0], [-1.0, -1.0]]);
        let loss = barlow_twins_loss(&z, &z, 5e-3).unwrap();
        assert!(loss.abs() < 1e-12);

        // Negated view: every diagonal entry is -1, so each contributes 4.
        let d = z.ncols() as f64;
        let loss = barlow_twins_loss(&z, &(-z.clone()), 5e-3).unwrap();
        assert!(loss >= 4.0 * d - 1e-9);

        let mut flat = z.clone();
        flat.column_mut(0).fill(2.0);
        assert!(barlow_twins_loss(&flat, &z, 5e-3).is_err());
    }

    #[test]
    fn barlow_twins_matches_correlation_oracle() {
        let mut rng = ChaCha12Rng::seed_from_u64(41);
        for _ in 0..10 {
            let b = rng.gen_range(3..8);
            let d = rng.gen_range(2..6);
            let z_a = random_rows(&mut rng, b, d, false);
            let z_b = random_rows(&mut rng, b, d, false);
            let lambda = 5e-3;
            let loss = barlow_twins_loss(&z_a, &z_b, lambda).unwrap();

            // Oracle: explicit per-entry correlation of standardized columns.
            let stdize = |z: &Array2<f64>| {
                let mut out = z.clone();
                for mut col in out.columns_mut() {
                    let mean = col.sum() / b as f64;
                    let var =
                        col.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / b as f64;
                    col.mapv_inplace(|v| (v - mean) / var.sqrt());
                }
                out
            };
            let (za, zb) = (stdize(&z_a), stdize(&z_b));
            let mut oracle = 0.0;
            for i in 0..d {
                for j in 0..d {
                    let mut c = 0.0;
                    for r in 0..b {
                        c += za[[r, i]] * zb[[r, j]];
                    }
                    c /= b as f64;
                    oracle += if i == j { (1.0 - c) * (1.0 - c) } else { lambda * c * c };
                }
            }
            assert!((loss - oracle).abs() < 1e-6);
        }
    }

    #[test]
    fn barlow_graph_matches_plain_and_gradchecks() {
        let mut rng = ChaCha12Rng::seed_from_u64(55);
        let z_a = random_rows(&mut rng, 6, 4, false);
        let z_b = random_rows(&mut rng, 6, 4, false);
        let lambda = 5e-3;
        let plain = barlow_twins_loss(&z_a, &z_b, lambda).unwrap();
        let mut g = Graph::new();
        let a = g.leaf(z_a.clone().into_dyn());
        let b = g.leaf(z_b.clone().into_dyn());
        let loss = barlow_graph(&mut g, a, b, lambda);
        assert!((g.scalar_value(loss) - plain).abs() < 1e-3 * plain.abs().max(1.0));

        check_gradients_at(
            &[z_a.into_dyn(), z_b.into_dyn()],
            |g, leaves| barlow_graph(g, leaves[0], leaves[1], lambda),
            1e-4,
        );
    }

    #[test]
    fn negative_cosine_endpoints() {
        let p = arr2(&[[0.6, 0.8], [1.0, 0.0]]);
        assert!((negative_cosine_loss(&p, &p).unwrap() + 1.0).abs() < 1e-12);
        let orth = arr2(&[[-0.8, 0.6], [0.0, 1.0]]);
        assert!(negative_cosine_loss(&p, &orth).unwrap().abs() < 1e-12);
        let zero = arr2(&[[0.0, 0.0], [1.0, 0.0]]);
        assert!(negative_cosine_loss(&p, &zero).is_err());
    }

    #[test]
    fn stop_gradient_blocks_target_branch_exactly() {
        let mut rng = ChaCha12Rng::seed_from_u64(88);
        let p = random_rows(&mut rng, 3, 4, false);
        let z = random_rows(&mut rng, 3, 4, false);
        let mut g = Graph::new();
        let p_id = g.leaf(p.clone().into_dyn());
        let z_id = g.leaf(z.clone().into_dyn());
        let loss = negcos_graph(&mut g, p_id, z_id);
        let base = g.scalar_value(loss);
        let grads = g.backward(loss);
        assert!(grads.get(z_id).is_none(), "gradient leaked through stop-gradient");
        assert!(grads.get(p_id).is_some());

        // Numerical probe: perturbing z moves the loss, but the analytic
        // gradient is identically zero (the definition of stop-gradient).
        let mut z_shift = z.clone();
        z_shift[[0, 0]] += 1e-3;
        let mut g2 = Graph::new();
        let p2 = g2.leaf(p.into_dyn());
        let z2 = g2.leaf(z_shift.into_dyn());
        let loss2 = negcos_graph(&mut g2, p2, z2);
        assert!((g2.scalar_value(loss2) - base).abs() > 0.0);
    }

    #[test]
    fn dino_loss_closed_forms() {
        let k = 5;
        let b = 3;
        let teacher = Array2::from_shape_fn((b, k), |(i, j)| (i as f64 * 0.3) + (j as f64 * 0.7));
        let center = Array1::zeros(k);
        let (t_temp, s_temp) = (0.04, 0.1);

        // Student matching the teacher distribution: loss = teacher entropy.
        let student = teacher.mapv(|l| l / t_temp * s_temp);
        let loss = dino_loss(&student, &teacher, t_temp, s_temp, &center).unwrap();
        let mut entropy = 0.0;
        for i in 0..b {
            let row: Vec<f64> = teacher.row(i).iter().map(|&l| l / t_temp).collect();
            let probs = softmax(&row);
            entropy -= probs.iter().map(|&p| p * p.ln()).sum::<f64>();
        }
        entropy /= b as f64;
        assert!((loss - entropy).abs() < 1e-9);

        // Uniform teacher, uniform student: log K.
        let teacher = Array2::zeros((b, k));
        let student = Array2::zeros((b, k));
        let loss = dino_loss(&student, &teacher, t_temp, s_temp, &center).unwrap();
        assert!((loss - (k as f64).ln()).abs() < 1e-12);

        assert!(dino_loss(&student, &teacher, 0.2, 0.1, &center).is_err());
    }

    #[test]
    fn center_ema_endpoints() {
        let logits = arr2(&[[1.0, 3.0], [3.0, 5.0]]);
        let mut center = Array1::from_vec(vec![10.0, 10.0]);
        update_center(&mut center, &logits, 1.0).unwrap();
        assert_eq!(center.to_vec(), vec![10.0, 10.0]);

        update_center(&mut center, &logits, 0.0).unwrap();
        assert_eq!(center.to_vec(), vec![2.0, 4.0]);

        let mut center = Array1::from_vec(vec![0.0, 0.0]);
        update_center(&mut center, &logits, 0.9).unwrap();
        assert!((center[0] - 0.2).abs() < 1e-12);
        assert!((center[1] - 0.4).abs() < 1e-12);
    }

    #[test]
    fn dino_student_graph_matches_plain_loss() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        let b = 3;
        let k = 4;
        let student = random_rows(&mut rng, b, k, false);
        let teacher = random_rows(&mut rng, b, k, false);
        let center = Array1::from_vec(vec![0.1, -0.2, 0.3, 0.0]);
        let (t_temp, s_temp) = (0.04, 0.1);
        let plain = dino_loss(&student, &teacher, t_temp, s_temp, &center).unwrap();

        let mut teacher_probs = Array2::zeros((b, k));
        for i in 0..b {
            let row: Vec<f64> = teacher
                .row(i)
                .iter()
                .zip(center.iter())
                .map(|(&l, &c)| (l - c) / t_temp)
                .collect();
            let p = softmax(&row);
            for j in 0..k {
                teacher_probs[[i, j]] = p[j];
            }
        }
        let mut g = Graph::new();
        let s = g.leaf(student.clone().into_dyn());
        let loss = dino_student_graph(&mut g, s, &teacher_probs, s_temp);
        assert!((g.scalar_value(loss) - plain).abs() < 1e-10);

        check_gradients_at(
            &[student.into_dyn()],
            |g, leaves| dino_student_graph(g, leaves[0], &teacher_probs, s_temp),
            1e-4,
        );
    }
}
