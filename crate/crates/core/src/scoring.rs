//! OOD scoring functions and training losses.
//!
//! Scores follow one convention: higher means more ID-like. Losses return
//! their value split into the ID and outlier terms together with the
//! gradient of the total with respect to both logit matrices, which is what
//! [`crate::model::MlpModel::backward`] consumes.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numeric::{logsumexp_unchecked, softmax_unchecked, Matrix};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// `1 − p(K+1|x)`.
    Absent,
    /// Max softmax probability over the first `K` classes.
    Msp,
    /// Negative free energy, `logsumexp` of the first `K` logits.
    Energy,
}

impl std::str::FromStr for ScoreKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "absent" => Ok(Self::Absent),
            "msp" => Ok(Self::Msp),
            "energy" => Ok(Self::Energy),
            other => Err(Error::Config(format!(
                "unknown score '{other}' (expected absent, msp or energy)"
            ))),
        }
    }
}

fn check_logits(logits: &[f64], min_len: usize, what: &str) -> Result<()> {
    if logits.len() < min_len {
        return Err(Error::Shape(format!(
            "{what}: {} logits, need at least {min_len}",
            logits.len()
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!("{what}: non-finite logit")));
    }
    Ok(())
}

/// Inverse absent-category probability, `1 − p(K+1|x)`.
pub fn absent_category_score(logits: &[f64], k: usize) -> Result<f64> {
    if logits.len() != k + 1 {
        return Err(Error::Shape(format!(
            "absent-category score needs K+1 = {} logits, got {}",
            k + 1,
            logits.len()
        )));
    }
    check_logits(logits, k + 1, "absent-category score")?;
    let p = softmax_unchecked(logits);
    // Summing the K class probabilities keeps precision when p(K+1) ≈ 1.
    Ok(p[..k].iter().sum::<f64>().clamp(0.0, 1.0))
}

/// Softmax over all logits, maximum over the first `K`.
pub fn msp_score(logits: &[f64], k: usize) -> Result<f64> {
    check_logits(logits, k.max(1), "msp score")?;
    let p = softmax_unchecked(logits);
    Ok(p[..k].iter().copied().fold(0.0, f64::max))
}

/// `logsumexp` over the first `K` logits.
pub fn energy_score(logits: &[f64], k: usize) -> Result<f64> {
    check_logits(logits, k.max(1), "energy score")?;
    Ok(logsumexp_unchecked(&logits[..k]))
}

/// Scores every row of a logit matrix.
pub fn score_rows(kind: ScoreKind, logits: &Matrix, k: usize) -> Result<Vec<f64>> {
    logits
        .row_iter()
        .map(|row| match kind {
            ScoreKind::Absent => absent_category_score(row, k),
            ScoreKind::Msp => msp_score(row, k),
            ScoreKind::Energy => energy_score(row, k),
        })
        .collect()
}

/// `p(K+1|x)` for every row; the uncertainty logged for selected outliers.
pub fn absent_probabilities(logits: &Matrix) -> Vec<f64> {
    logits
        .row_iter()
        .map(|row| *softmax_unchecked(row).last().unwrap())
        .collect()
}

/// Loss split into its terms: `total = id_term + λ·ood_term`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossValue {
    pub total: f64,
    pub id_term: f64,
    pub ood_term: f64,
}

/// A loss value and `d total / d logits` for both batches.
#[derive(Debug, Clone)]
pub struct LossOutput {
    pub value: LossValue,
    pub id_grad: Matrix,
    pub ood_grad: Matrix,
}

fn check_batches(id_logits: &Matrix, labels: &[u32], ood_logits: &Matrix, k: usize) -> Result<()> {
    if id_logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} ID logit rows but {} labels",
            id_logits.rows(),
            labels.len()
        )));
    }
    for (what, m) in [("ID", id_logits), ("OOD", ood_logits)] {
        if m.rows() > 0 && m.cols() != k + 1 {
            return Err(Error::Shape(format!(
                "{what} logits have {} columns, expected K+1 = {}",
                m.cols(),
                k + 1
            )));
        }
        if !m.is_finite() {
            return Err(Error::InvalidInput(format!("{what} logits are not finite")));
        }
    }
    if let Some(&bad) = labels.iter().find(|&&y| y == 0 || y as usize > k) {
        return Err(Error::InvalidLabel {
            label: bad,
            classes: k,
        });
    }
    Ok(())
}

fn infer_k(id_logits: &Matrix, ood_logits: &Matrix) -> Result<usize> {
    let cols = if id_logits.rows() > 0 {
        id_logits.cols()
    } else {
        ood_logits.cols()
    };
    if cols < 2 {
        return Err(Error::Shape(format!("need K+1 >= 2 logit columns, got {cols}")));
    }
    Ok(cols - 1)
}

/// Mean cross-entropy over the first `classes` logits; accumulates the
/// gradient into `grad`.
fn cross_entropy(logits: &Matrix, labels: &[u32], classes: usize, grad: &mut Matrix) -> f64 {
    let n = logits.rows();
    if n == 0 {
        return 0.0;
    }
    let inv = 1.0 / n as f64;
    let mut total = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        let z = &logits.row(i)[..classes];
        let y = y as usize - 1;
        let lse = logsumexp_unchecked(z);
        total += lse - z[y];
        let g = grad.row_mut(i);
        for (j, &zj) in z.iter().enumerate() {
            g[j] += ((zj - lse).exp() - if j == y { 1.0 } else { 0.0 }) * inv;
        }
    }
    total * inv
}

/// ID cross-entropy over all `K+1` logits plus the mean outlier term
/// `−log p(K+1|x)`. An empty outlier batch contributes zero.
pub fn absent_category_loss(
    id_logits: &Matrix,
    id_labels: &[u32],
    ood_logits: &Matrix,
    lambda: f64,
) -> Result<LossOutput> {
    let k = infer_k(id_logits, ood_logits)?;
    check_batches(id_logits, id_labels, ood_logits, k)?;
    let mut id_grad = Matrix::zeros(id_logits.rows(), k + 1);
    let mut ood_grad = Matrix::zeros(ood_logits.rows(), k + 1);
    let id_term = cross_entropy(id_logits, id_labels, k + 1, &mut id_grad);

    let mut ood_term = 0.0;
    let n = ood_logits.rows();
    if n > 0 {
        let scale = lambda / n as f64;
        for i in 0..n {
            let z = ood_logits.row(i);
            let lse = logsumexp_unchecked(z);
            ood_term += lse - z[k];
            for (j, (g, &zj)) in ood_grad.row_mut(i).iter_mut().zip(z).enumerate() {
                *g = ((zj - lse).exp() - if j == k { 1.0 } else { 0.0 }) * scale;
            }
        }
        ood_term /= n as f64;
    }
    Ok(LossOutput {
        value: LossValue {
            total: id_term + lambda * ood_term,
            id_term,
            ood_term,
        },
        id_grad,
        ood_grad,
    })
}

/// Outlier exposure: K-way cross-entropy on ID data plus cross-entropy from
/// the uniform distribution over the `K` classes on outliers. The absent
/// logit is not used.
pub fn oe_uniform_loss(
    id_logits: &Matrix,
    id_labels: &[u32],
    ood_logits: &Matrix,
    lambda: f64,
) -> Result<LossOutput> {
    let k = infer_k(id_logits, ood_logits)?;
    check_batches(id_logits, id_labels, ood_logits, k)?;
    let mut id_grad = Matrix::zeros(id_logits.rows(), k + 1);
    let mut ood_grad = Matrix::zeros(ood_logits.rows(), k + 1);
    let id_term = cross_entropy(id_logits, id_labels, k, &mut id_grad);

    let mut ood_term = 0.0;
    let n = ood_logits.rows();
    if n > 0 {
        let scale = lambda / n as f64;
        let uniform = 1.0 / k as f64;
        for i in 0..n {
            let z = &ood_logits.row(i)[..k];
            let lse = logsumexp_unchecked(z);
            ood_term += lse - z.iter().sum::<f64>() * uniform;
            for (g, &zj) in ood_grad.row_mut(i).iter_mut().zip(z) {
                *g = ((zj - lse).exp() - uniform) * scale;
            }
        }
        ood_term /= n as f64;
    }
    Ok(LossOutput {
        value: LossValue {
            total: id_term + lambda * ood_term,
            id_term,
            ood_term,
        },
        id_grad,
        ood_grad,
    })
}

/// K-way cross-entropy plus squared-hinge energy regularization with
/// `E = −logsumexp(z[..K])`:
/// `ood_term = mean_out max(0, m_out − E)² + mean_in max(0, E − m_in)²`.
pub fn energy_reg_loss(
    id_logits: &Matrix,
    id_labels: &[u32],
    ood_logits: &Matrix,
    m_in: f64,
    m_out: f64,
    lambda: f64,
) -> Result<LossOutput> {
    let k = infer_k(id_logits, ood_logits)?;
    check_batches(id_logits, id_labels, ood_logits, k)?;
    let mut id_grad = Matrix::zeros(id_logits.rows(), k + 1);
    let mut ood_grad = Matrix::zeros(ood_logits.rows(), k + 1);
    let id_term = cross_entropy(id_logits, id_labels, k, &mut id_grad);

    let mut ood_term = 0.0;
    // dE/dz_j = −softmax_K(z)_j.
    let n_in = id_logits.rows();
    if n_in > 0 {
        let mut acc = 0.0;
        let scale = lambda / n_in as f64;
        for i in 0..n_in {
            let z = &id_logits.row(i)[..k];
            let lse = logsumexp_unchecked(z);
            let gap = (-lse - m_in).max(0.0);
            acc += gap * gap;
            if gap > 0.0 {
                for (g, &zj) in id_grad.row_mut(i).iter_mut().zip(z) {
                    *g -= 2.0 * gap * (zj - lse).exp() * scale;
                }
            }
        }
        ood_term += acc / n_in as f64;
    }
    let n_out = ood_logits.rows();
    if n_out > 0 {
        let mut acc = 0.0;
        let scale = lambda / n_out as f64;
        for i in 0..n_out {
            let z = &ood_logits.row(i)[..k];
            let lse = logsumexp_unchecked(z);
            let gap = (m_out + lse).max(0.0);
            acc += gap * gap;
            if gap > 0.0 {
                for (g, &zj) in ood_grad.row_mut(i).iter_mut().zip(z) {
                    *g = 2.0 * gap * (zj - lse).exp() * scale;
                }
            }
        }
        ood_term += acc / n_out as f64;
    }
    Ok(LossOutput {
        value: LossValue {
            total: id_term + lambda * ood_term,
            id_term,
            ood_term,
        },
        id_grad,
        ood_grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numeric::Rng;

    fn m(rows: usize, cols: usize, v: &[f64]) -> Matrix {
        Matrix::from_vec(rows, cols, v.to_vec()).unwrap()
    }

    /// Direct softmax without max-subtraction; fine for moderate logits.
    fn naive_softmax(z: &[f64]) -> Vec<f64> {
        let s: f64 = z.iter().map(|v| v.exp()).sum();
        z.iter().map(|v| v.exp() / s).collect()
    }

    #[test]
    fn absent_score_examples() {
        assert!((absent_category_score(&[0.0; 4], 3).unwrap() - 0.75).abs() < 1e-15);
        assert!(absent_category_score(&[0.0, 0.0, 1000.0], 2).unwrap() < 1e-9);
        // mpmath, 50 digits: 1 − e³/(e + e² + e³)
        let reference = 0.334_759_044_225_178_1;
        assert!((absent_category_score(&[1.0, 2.0, 3.0], 2).unwrap() - reference).abs() < 1e-15);
        assert!(matches!(absent_category_score(&[1.0, 2.0], 2), Err(Error::Shape(_))));
    }

    #[test]
    fn msp_examples() {
        assert!((msp_score(&[0.0, 50.0, 0.0, 0.0], 3).unwrap() - 1.0).abs() < 1e-12);
        assert!((msp_score(&[0.0; 4], 3).unwrap() - 0.25).abs() < 1e-15);
        let mut rng = Rng::new(3);
        for _ in 0..50 {
            let z: Vec<f64> = (0..5).map(|_| 3.0 * rng.normal()).collect();
            let p = naive_softmax(&z);
            let want = p[..4].iter().copied().fold(0.0, f64::max);
            assert!((msp_score(&z, 4).unwrap() - want).abs() < 1e-12);
        }
        assert!(msp_score(&[1.0], 2).is_err());
    }

    #[test]
    fn energy_examples() {
        assert!((energy_score(&[0.0, 0.0, 9.0], 2).unwrap() - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(energy_score(&[-4.5, 100.0], 1).unwrap(), -4.5);
        // mpmath, 50 digits: log(e + e² + e³)
        let reference = 3.407_605_964_444_380_3;
        assert!((energy_score(&[1.0, 2.0, 3.0, -1.0], 3).unwrap() - reference).abs() < 1e-14);
    }

    #[test]
    fn absent_loss_examples() {
        let id = m(2, 4, &[1000.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1000.0, 0.0]);
        let ood = m(1, 4, &[0.0, 0.0, 0.0, 1000.0]);
        let out = absent_category_loss(&id, &[1, 3], &ood, 1.0).unwrap();
        assert!(out.value.id_term < 1e-6);
        assert!(out.value.ood_term < 1e-6);

        let uniform = m(2, 4, &[0.0; 8]);
        let out = absent_category_loss(&uniform, &[1, 2], &uniform, 1.0).unwrap();
        let ln4 = 4f64.ln();
        assert!((out.value.id_term - ln4).abs() < 1e-15);
        assert!((out.value.ood_term - ln4).abs() < 1e-15);
        assert!((out.value.total - 2.0 * ln4).abs() < 1e-15);

        let empty = Matrix::zeros(0, 4);
        let out = absent_category_loss(&uniform, &[1, 2], &empty, 1.0).unwrap();
        assert_eq!(out.value.ood_term, 0.0);

        assert!(matches!(
            absent_category_loss(&uniform, &[0, 1], &empty, 1.0),
            Err(Error::InvalidLabel { label: 0, .. })
        ));
        assert!(matches!(
            absent_category_loss(&uniform, &[4, 1], &empty, 1.0),
            Err(Error::InvalidLabel { label: 4, .. })
        ));
    }

    #[test]
    fn oe_loss_examples() {
        let id = m(1, 4, &[2.0, 0.0, 0.0, 0.0]);
        let ood = m(2, 4, &[0.5, 0.5, 0.5, -3.0, 7.0, 7.0, 7.0, 2.0]);
        let out = oe_uniform_loss(&id, &[1], &ood, 0.7).unwrap();
        assert!((out.value.ood_term - 3f64.ln()).abs() < 1e-15);
        let out0 = oe_uniform_loss(&id, &[1], &ood, 0.0).unwrap();
        assert_eq!(out0.value.total, out0.value.id_term);

        let mut rng = Rng::new(12);
        let id: Vec<f64> = (0..12).map(|_| rng.normal()).collect();
        let ood: Vec<f64> = (0..8).map(|_| 2.0 * rng.normal()).collect();
        let out = oe_uniform_loss(&m(3, 4, &id), &[1, 2, 3], &m(2, 4, &ood), 0.5).unwrap();
        let mut want_id = 0.0;
        for (i, y) in [0usize, 1, 2].into_iter().enumerate() {
            want_id -= naive_softmax(&id[i * 4..i * 4 + 3])[y].ln();
        }
        want_id /= 3.0;
        let mut want_ood = 0.0;
        for i in 0..2 {
            let p = naive_softmax(&ood[i * 4..i * 4 + 3]);
            want_ood -= p.iter().map(|v| v.ln()).sum::<f64>() / 3.0;
        }
        want_ood /= 2.0;
        assert!((out.value.id_term - want_id).abs() < 1e-12);
        assert!((out.value.ood_term - want_ood).abs() < 1e-12);
        assert!((out.value.total - (want_id + 0.5 * want_ood)).abs() < 1e-12);
    }

    #[test]
    fn energy_loss_examples() {
        // ID energies −10 < m_in, OOD energies ≈ 10 > m_out: hinges inactive.
        let id = m(1, 3, &[10.0, -50.0, 0.0]);
        let ood = m(1, 3, &[-10.0, -60.0, 0.0]);
        let out = energy_reg_loss(&id, &[1], &ood, -1.0, 1.0, 1.0).unwrap();
        assert!(out.value.ood_term < 1e-20);
        let out0 = energy_reg_loss(&id, &[1], &ood, -1.0, 1.0, 0.0).unwrap();
        assert_eq!(out0.value.total, out0.value.id_term);

        // Direct formula on a fixed case.
        let id = m(2, 3, &[0.3, -0.2, 5.0, 1.0, 0.4, -1.0]);
        let ood = m(2, 3, &[0.1, 0.2, 0.0, -2.0, -1.5, 3.0]);
        let (m_in, m_out, lambda) = (-1.0, 1.0, 0.1);
        let out = energy_reg_loss(&id, &[2, 1], &ood, m_in, m_out, lambda).unwrap();
        let e = |a: f64, b: f64| -((a.exp() + b.exp()).ln());
        let e_in = [e(0.3, -0.2), e(1.0, 0.4)];
        let e_out = [e(0.1, 0.2), e(-2.0, -1.5)];
        let want = e_out.iter().map(|&x| (m_out - x).max(0.0).powi(2)).sum::<f64>() / 2.0
            + e_in.iter().map(|&x| (x - m_in).max(0.0).powi(2)).sum::<f64>() / 2.0;
        assert!((out.value.ood_term - want).abs() < 1e-12);
        let ce = (-(naive_softmax(&[0.3, -0.2])[1]).ln() - naive_softmax(&[1.0, 0.4])[0].ln()) / 2.0;
        assert!((out.value.id_term - ce).abs() < 1e-12);
    }

    #[test]
    fn loss_gradients_match_finite_differences_on_logits() {
        let mut rng = Rng::new(99);
        let h = 1e-6;
        for trial in 0..3 {
            let k = 2 + trial;
            let id: Vec<f64> = (0..3 * (k + 1)).map(|_| rng.normal()).collect();
            let ood: Vec<f64> = (0..2 * (k + 1)).map(|_| rng.normal()).collect();
            let labels: Vec<u32> = (0..3).map(|i| 1 + (i % k) as u32).collect();
            type LossFn = Box<dyn Fn(&Matrix, &Matrix) -> LossOutput>;
            let l2 = labels.clone();
            let l3 = labels.clone();
            let l4 = labels.clone();
            let fns: Vec<LossFn> = vec![
                Box::new(move |a, b| absent_category_loss(a, &l2, b, 0.8).unwrap()),
                Box::new(move |a, b| oe_uniform_loss(a, &l3, b, 0.5).unwrap()),
                Box::new(move |a, b| energy_reg_loss(a, &l4, b, 0.5, -0.5, 0.3).unwrap()),
            ];
            for f in &fns {
                let a = m(3, k + 1, &id);
                let b = m(2, k + 1, &ood);
                let out = f(&a, &b);
                for (which, base) in [(0, &id), (1, &ood)] {
                    for j in 0..base.len() {
                        let mut plus = base.clone();
                        let mut minus = base.clone();
                        plus[j] += h;
                        minus[j] -= h;
                        let (fp, fm) = if which == 0 {
                            (f(&m(3, k + 1, &plus), &b), f(&m(3, k + 1, &minus), &b))
                        } else {
                            (f(&a, &m(2, k + 1, &plus)), f(&a, &m(2, k + 1, &minus)))
                        };
                        let numeric = (fp.value.total - fm.value.total) / (2.0 * h);
                        let analytic = if which == 0 { &out.id_grad } else { &out.ood_grad }.as_slice()[j];
                        assert!((numeric - analytic).abs() < 1e-7, "{numeric} vs {analytic}");
                    }
                }
            }
        }
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn absent_score_bounded_and_monotone(z in prop::collection::vec(-30f64..30.0, 2..7), bump in 0.01f64..5.0) {
                let k = z.len() - 1;
                let s = absent_category_score(&z, k).unwrap();
                prop_assert!((0.0..=1.0).contains(&s));
                let mut up = z.clone();
                up[k] += bump;
                prop_assert!(absent_category_score(&up, k).unwrap() <= s);
            }

            #[test]
            fn energy_shift_equivariant(z in prop::collection::vec(-30f64..30.0, 2..7), c in -50f64..50.0) {
                let k = z.len() - 1;
                let mut shifted = z.clone();
                for v in &mut shifted[..k] {
                    *v += c;
                }
                let a = energy_score(&z, k).unwrap();
                let b = energy_score(&shifted, k).unwrap();
                prop_assert!((b - a - c).abs() < 1e-9);
            }

            #[test]
            fn scores_match_naive_reference(z in prop::collection::vec(-20f64..20.0, 2..7)) {
                let k = z.len() - 1;
                let p = naive_softmax(&z);
                prop_assert!((absent_category_score(&z, k).unwrap() - (1.0 - p[k])).abs() < 1e-9);
                let msp = p[..k].iter().copied().fold(0.0, f64::max);
                prop_assert!((msp_score(&z, k).unwrap() - msp).abs() < 1e-9);
                let lse = z[..k].iter().map(|v| v.exp()).sum::<f64>().ln();
                prop_assert!((energy_score(&z, k).unwrap() - lse).abs() < 1e-9);
            }

            #[test]
            fn msp_bounds(z in prop::collection::vec(-30f64..30.0, 2..7)) {
                let k = z.len() - 1;
                let msp = msp_score(&z, k).unwrap();
                let absent = absent_category_score(&z, k).unwrap();
                // Max over K is at least the mean of the K class probabilities.
                prop_assert!(msp <= 1.0);
                prop_assert!(msp >= absent / k as f64 - 1e-15);
            }
        }
    }
}
