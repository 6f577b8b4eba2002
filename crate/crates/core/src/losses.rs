//! Stage-one training losses with analytic gradients.
//!
//! Every loss returns the value together with its gradient with respect to the
//! student scores. All exponentials go through max-subtracted log-sum-exp or a
//! stable softplus, so scores of magnitude up to 1e4 saturate instead of
//! overflowing.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub loss: f64,
    pub grad: Vec<f64>,
}

/// Logistic function, evaluated without overflow for either sign.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x) without overflow or cancellation.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    log_softmax(xs).into_iter().map(f64::exp).collect()
}

fn check_finite(name: &str, xs: &[f64]) -> Result<()> {
    match xs.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(Error::invalid(format!("{name}[{i}] = {} is not finite", xs[i]))),
        None => Ok(()),
    }
}

fn check_len(expected: usize, got: usize, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::invalid(format!(
            "shape mismatch: {expected} scores but {got} {what}"
        )));
    }
    Ok(())
}

/// Binary relevance labels for one query's candidates.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<u8>", into = "Vec<u8>")]
pub struct LabelVector(Vec<u8>);

impl LabelVector {
    /// Exactly one positive.
    pub fn one_hot(labels: Vec<u8>) -> Result<Self> {
        let v = Self::multi_positive(labels)?;
        if v.positives() != 1 {
            return Err(Error::invalid(format!(
                "expected exactly one positive label, found {}",
                v.positives()
            )));
        }
        Ok(v)
    }

    /// Relaxed form: at least one positive.
    pub fn multi_positive(labels: Vec<u8>) -> Result<Self> {
        if labels.iter().any(|&l| l > 1) {
            return Err(Error::invalid("labels must be 0 or 1"));
        }
        if !labels.contains(&1) {
            return Err(Error::invalid("label vector has no positive"));
        }
        Ok(LabelVector(labels))
    }

    /// Positive at `index`, negatives elsewhere.
    pub fn positive_at(len: usize, index: usize) -> Result<Self> {
        if index >= len {
            return Err(Error::invalid(format!("positive index {index} out of range for {len}")));
        }
        let mut v = vec![0; len];
        v[index] = 1;
        Ok(LabelVector(v))
    }

    pub fn as_slice(&self) -> &[u8] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.0.iter().filter(|&&l| l == 1).count()
    }

    pub fn to_ranks(&self) -> RankVector {
        RankVector(self.0.iter().map(|&l| if l == 1 { 1 } else { 2 }).collect())
    }
}

impl TryFrom<Vec<u8>> for LabelVector {
    type Error = Error;

    fn try_from(v: Vec<u8>) -> Result<Self> {
        LabelVector::multi_positive(v)
    }
}

impl From<LabelVector> for Vec<u8> {
    fn from(v: LabelVector) -> Self {
        v.0
    }
}

/// Relevance ranks, lower is better. Equal ranks are ties.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector(Vec<u32>);

impl RankVector {
    pub fn new(ranks: Vec<u32>) -> Result<Self> {
        if ranks.contains(&0) {
            return Err(Error::invalid("ranks must be positive"));
        }
        Ok(RankVector(ranks))
    }

    /// Dense ranks from graded relevance: the highest grade gets rank 1.
    pub fn from_grades(grades: &[u32]) -> Self {
        let mut distinct: Vec<u32> = grades.to_vec();
        distinct.sort_unstable_by(|a, b| b.cmp(a));
        distinct.dedup();
        RankVector(
            grades
                .iter()
                .map(|g| distinct.iter().position(|d| d == g).unwrap() as u32 + 1)
                .collect(),
        )
    }

    pub fn as_slice(&self) -> &[u32] {
        &self.0
    }
}

/// Pointwise binary cross-entropy summed over candidates:
/// `-sum_{y=1} ln sigma(s) - sum_{y=0} ln(1 - sigma(s))`.
pub fn point_ce(scores: &[f64], labels: &LabelVector) -> Result<LossGrad> {
    check_len(scores.len(), labels.len(), "labels")?;
    check_finite("scores", scores)?;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(scores.len());
    for (&s, &y) in scores.iter().zip(labels.as_slice()) {
        // -ln sigma(s) = softplus(-s); -ln(1 - sigma(s)) = softplus(s)
        loss += if y == 1 { softplus(-s) } else { softplus(s) };
        grad.push(sigmoid(s) - f64::from(y));
    }
    Ok(LossGrad { loss, grad })
}

/// Pairwise logistic loss over every ordered pair with strictly better rank.
pub fn ranknet(scores: &[f64], ranks: &RankVector) -> Result<LossGrad> {
    check_len(scores.len(), ranks.0.len(), "ranks")?;
    check_finite("scores", scores)?;
    let m = scores.len();
    let mut loss = 0.0;
    let mut grad = vec![0.0; m];
    for j in 0..m {
        for k in 0..m {
            if ranks.0[j] < ranks.0[k] {
                let diff = scores[k] - scores[j];
                loss += softplus(diff);
                let g = sigmoid(diff);
                grad[k] += g;
                grad[j] -= g;
            }
        }
    }
    Ok(LossGrad { loss, grad })
}

/// Which way the divergence between the softened distributions is taken.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KdDirection {
    /// KL(student || teacher).
    #[default]
    StudentTeacher,
    /// KL(teacher || student), the usual distillation direction.
    TeacherStudent,
}

/// Temperature-scaled KL between softmax(student/tau) and softmax(teacher/tau),
/// multiplied by tau squared.
pub fn kd_loss(student: &[f64], teacher: &[f64], tau: f64) -> Result<LossGrad> {
    kd_loss_directed(student, teacher, tau, KdDirection::StudentTeacher)
}

pub fn kd_loss_directed(
    student: &[f64],
    teacher: &[f64],
    tau: f64,
    direction: KdDirection,
) -> Result<LossGrad> {
    if !(tau > 0.0 && tau.is_finite()) {
        return Err(Error::invalid(format!("temperature must be positive, got {tau}")));
    }
    check_len(student.len(), teacher.len(), "teacher scores")?;
    check_finite("student", student)?;
    check_finite("teacher", teacher)?;
    if student.is_empty() {
        return Ok(LossGrad { loss: 0.0, grad: Vec::new() });
    }
    let ls = log_softmax(&student.iter().map(|s| s / tau).collect::<Vec<_>>());
    let lt = log_softmax(&teacher.iter().map(|t| t / tau).collect::<Vec<_>>());
    let ps: Vec<f64> = ls.iter().map(|l| l.exp()).collect();
    let t2 = tau * tau;
    match direction {
        KdDirection::StudentTeacher => {
            let u: Vec<f64> = ls.iter().zip(&lt).map(|(a, b)| a - b).collect();
            let kl: f64 = ps.iter().zip(&u).map(|(p, u)| p * u).sum();
            let grad = ps.iter().zip(&u).map(|(p, u)| tau * p * (u - kl)).collect();
            Ok(LossGrad {
                loss: t2 * kl.max(0.0),
                grad,
            })
        }
        KdDirection::TeacherStudent => {
            let kl: f64 = lt
                .iter()
                .zip(&ls)
                .map(|(t, s)| t.exp() * (t - s))
                .sum();
            let grad = ps.iter().zip(&lt).map(|(p, t)| tau * (p - t.exp())).collect();
            Ok(LossGrad {
                loss: t2 * kl.max(0.0),
                grad,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankLoss {
    #[default]
    PointCe,
    Ranknet,
}

impl std::str::FromStr for RankLoss {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "point_ce" | "pointce" | "ce" => Ok(RankLoss::PointCe),
            "ranknet" => Ok(RankLoss::Ranknet),
            other => Err(Error::Config(format!("unknown rank loss {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    pub alpha: f64,
    pub tau: f64,
    pub rank_loss: RankLoss,
    pub kd_direction: KdDirection,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            alpha: 0.1,
            tau: 1.0,
            rank_loss: RankLoss::PointCe,
            kd_direction: KdDirection::StudentTeacher,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Config(format!("alpha {} outside [0, 1]", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::Config(format!("tau {} must be positive", self.tau)));
        }
        Ok(())
    }

    pub fn rank_loss(&self, scores: &[f64], labels: &LabelVector) -> Result<LossGrad> {
        match self.rank_loss {
            RankLoss::PointCe => point_ce(scores, labels),
            RankLoss::Ranknet => ranknet(scores, &labels.to_ranks()),
        }
    }

    pub fn kd(&self, student: &[f64], teacher: &[f64]) -> Result<LossGrad> {
        kd_loss_directed(student, teacher, self.tau, self.kd_direction)
    }
}

/// Student (and optionally teacher) scores for a batch of B queries with m
/// candidates each, stored row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    rows: usize,
    cols: usize,
    student: Vec<f64>,
    teacher: Option<Vec<f64>>,
}

impl ScoreMatrix {
    pub fn new(student: Vec<Vec<f64>>, teacher: Option<Vec<Vec<f64>>>) -> Result<Self> {
        let (rows, cols, student) = flatten(student, "student")?;
        let teacher = match teacher {
            Some(t) => {
                let (r, c, flat) = flatten(t, "teacher")?;
                if (r, c) != (rows, cols) {
                    return Err(Error::invalid(format!(
                        "teacher shape {r}x{c} differs from student {rows}x{cols}"
                    )));
                }
                Some(flat)
            }
            None => None,
        };
        Ok(ScoreMatrix {
            rows,
            cols,
            student,
            teacher,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn student_row(&self, i: usize) -> &[f64] {
        &self.student[i * self.cols..(i + 1) * self.cols]
    }

    pub fn teacher_row(&self, i: usize) -> Option<&[f64]> {
        self.teacher
            .as_ref()
            .map(|t| &t[i * self.cols..(i + 1) * self.cols])
    }

    pub fn has_teacher(&self) -> bool {
        self.teacher.is_some()
    }
}

fn flatten(rows: Vec<Vec<f64>>, name: &str) -> Result<(usize, usize, Vec<f64>)> {
    let r = rows.len();
    let c = rows.first().map_or(0, Vec::len);
    if rows.iter().any(|row| row.len() != c) {
        return Err(Error::invalid(format!("{name} rows have unequal lengths")));
    }
    let flat: Vec<f64> = rows.into_iter().flatten().collect();
    check_finite(name, &flat)?;
    Ok((r, c, flat))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchLoss {
    /// Mean over queries of `(1 - alpha) * rank + alpha * kd`.
    pub loss: f64,
    /// Mean ranking-loss component (before weighting).
    pub rank: f64,
    /// Mean KD component (before weighting); zero when alpha is zero and no teacher is given.
    pub kd: f64,
    /// Gradient of `loss` with respect to each student score, B x m.
    pub grad: Vec<Vec<f64>>,
}

/// Alpha-weighted combination of ranking and KD losses, averaged over the batch.
pub fn total_loss(batch: &ScoreMatrix, labels: &[LabelVector], cfg: &LossConfig) -> Result<BatchLoss> {
    cfg.validate()?;
    if labels.len() != batch.rows() {
        return Err(Error::invalid(format!(
            "{} label vectors for {} queries",
            labels.len(),
            batch.rows()
        )));
    }
    if cfg.alpha > 0.0 && !batch.has_teacher() {
        return Err(Error::invalid("alpha > 0 requires teacher scores"));
    }
    let b = batch.rows();
    if b == 0 {
        return Ok(BatchLoss { loss: 0.0, rank: 0.0, kd: 0.0, grad: Vec::new() });
    }
    let scale = 1.0 / b as f64;
    let (mut loss, mut rank_sum, mut kd_sum) = (0.0, 0.0, 0.0);
    let mut grad = Vec::with_capacity(b);
    for (i, y) in labels.iter().enumerate() {
        let s = batch.student_row(i);
        let rank = cfg.rank_loss(s, y)?;
        let mut row: Vec<f64> = rank.grad.iter().map(|g| (1.0 - cfg.alpha) * g * scale).collect();
        let mut li = (1.0 - cfg.alpha) * rank.loss;
        rank_sum += rank.loss;
        if let Some(t) = batch.teacher_row(i) {
            let kd = cfg.kd(s, t)?;
            li += cfg.alpha * kd.loss;
            kd_sum += kd.loss;
            for (r, g) in row.iter_mut().zip(&kd.grad) {
                *r += cfg.alpha * g * scale;
            }
        }
        loss += li;
        grad.push(row);
    }
    Ok(BatchLoss {
        loss: loss * scale,
        rank: rank_sum * scale,
        kd: kd_sum * scale,
        grad,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn point_ce_at_zero() {
        let lg = point_ce(&[0.0, 0.0], &LabelVector::one_hot(vec![1, 0]).unwrap()).unwrap();
        assert_abs_diff_eq!(lg.loss, 2.0 * 2f64.ln(), epsilon = 1e-15);
        assert_eq!(lg.grad, vec![-0.5, 0.5]);
    }

    #[test]
    fn point_ce_saturated_correct() {
        let lg = point_ce(&[30.0, -30.0], &LabelVector::one_hot(vec![1, 0]).unwrap()).unwrap();
        assert!(lg.loss < 1e-12 && lg.loss >= 0.0);
        assert!(lg.grad.iter().all(|g| g.abs() < 1e-12));
    }

    #[test]
    fn point_ce_rejects_non_finite() {
        let y = LabelVector::one_hot(vec![1, 0]).unwrap();
        assert!(point_ce(&[f64::NAN, 0.0], &y).is_err());
        assert!(point_ce(&[0.0], &y).is_err());
    }

    #[test]
    fn ranknet_single_pair_and_tie() {
        let lg = ranknet(&[0.0, 0.0], &RankVector::new(vec![1, 2]).unwrap()).unwrap();
        assert_abs_diff_eq!(lg.loss, 2f64.ln(), epsilon = 1e-15);
        let lg = ranknet(&[0.3, -2.0], &RankVector::new(vec![1, 1]).unwrap()).unwrap();
        assert_eq!(lg.loss, 0.0);
        assert_eq!(lg.grad, vec![0.0, 0.0]);
    }

    #[test]
    fn kd_identical_is_zero() {
        let s = [0.4, -1.2, 3.0];
        for tau in [0.5, 1.0, 2.0] {
            let lg = kd_loss(&s, &s, tau).unwrap();
            assert!(lg.loss.abs() < 1e-12);
            assert!(lg.grad.iter().all(|g| g.abs() < 1e-12));
        }
        assert!(kd_loss(&s, &s, 0.0).is_err());
        assert!(kd_loss(&s, &s, -1.0).is_err());
    }

    #[test]
    fn kd_two_point_value() {
        let lg = kd_loss(&[1.0, 0.0], &[0.0, 1.0], 1.0).unwrap();
        let expected = sigmoid(1.0) - sigmoid(-1.0);
        assert_abs_diff_eq!(lg.loss, expected, epsilon = 1e-12);
        assert_abs_diff_eq!(lg.loss, 0.462117, epsilon = 1e-6);
    }

    #[test]
    fn kd_reverse_direction_differs_but_vanishes_at_equality() {
        let a = kd_loss_directed(&[2.0, 0.0, -1.0], &[0.0, 1.0, 0.5], 1.0, KdDirection::StudentTeacher).unwrap();
        let b = kd_loss_directed(&[2.0, 0.0, -1.0], &[0.0, 1.0, 0.5], 1.0, KdDirection::TeacherStudent).unwrap();
        assert!((a.loss - b.loss).abs() > 1e-3);
        let c = kd_loss_directed(&[1.0, 2.0], &[1.0, 2.0], 3.0, KdDirection::TeacherStudent).unwrap();
        assert!(c.loss.abs() < 1e-12);
    }

    #[test]
    fn losses_saturate_for_huge_scores() {
        let s = [1e4, -1e4, 0.0];
        let y = LabelVector::one_hot(vec![0, 1, 0]).unwrap();
        assert!(point_ce(&s, &y).unwrap().loss.is_finite());
        assert!(ranknet(&s, &y.to_ranks()).unwrap().loss.is_finite());
        let kd = kd_loss(&s, &[-1e4, 1e4, 0.0], 0.5).unwrap();
        assert!(kd.loss.is_finite() && kd.grad.iter().all(|g| g.is_finite()));
    }

    #[test]
    fn total_requires_teacher_when_alpha_positive() {
        let batch = ScoreMatrix::new(vec![vec![0.0, 1.0]], None).unwrap();
        let y = [LabelVector::one_hot(vec![1, 0]).unwrap()];
        let cfg = LossConfig { alpha: 0.1, ..Default::default() };
        assert!(total_loss(&batch, &y, &cfg).is_err());
        let cfg = LossConfig { alpha: 0.0, ..Default::default() };
        assert!(total_loss(&batch, &y, &cfg).is_ok());
    }

    #[test]
    fn shape_mismatch_rejected() {
        assert!(ScoreMatrix::new(vec![vec![0.0, 1.0], vec![0.0]], None).is_err());
        assert!(ScoreMatrix::new(vec![vec![0.0, 1.0]], Some(vec![vec![0.0]])).is_err());
    }

    #[test]
    fn label_rules() {
        assert!(LabelVector::one_hot(vec![1, 1, 0]).is_err());
        assert!(LabelVector::multi_positive(vec![1, 1, 0]).is_ok());
        assert!(LabelVector::multi_positive(vec![0, 0]).is_err());
        assert_eq!(RankVector::from_grades(&[0, 3, 1, 3]).as_slice(), &[3, 1, 2, 1]);
    }

    #[test]
    fn ranknet_shift_invariant_point_ce_not() {
        let s = [0.2, -0.4, 1.1];
        let shifted: Vec<f64> = s.iter().map(|x| x + 2.5).collect();
        let y = LabelVector::one_hot(vec![0, 1, 0]).unwrap();
        let r1 = ranknet(&s, &y.to_ranks()).unwrap().loss;
        let r2 = ranknet(&shifted, &y.to_ranks()).unwrap().loss;
        assert_abs_diff_eq!(r1, r2, epsilon = 1e-12);
        let p1 = point_ce(&s, &y).unwrap().loss;
        let p2 = point_ce(&shifted, &y).unwrap().loss;
        assert!((p1 - p2).abs() > 1e-3);
    }

    proptest! {
        #[test]
        fn losses_nonnegative(
            s in prop::collection::vec(-50.0f64..50.0, 2..10),
            seed in 0usize..100,
            tau in 0.1f64..5.0,
        ) {
            let m = s.len();
            let t: Vec<f64> = s.iter().rev().map(|x| x * 0.5 + 1.0).collect();
            let y = LabelVector::positive_at(m, seed % m).unwrap();
            prop_assert!(point_ce(&s, &y).unwrap().loss >= 0.0);
            prop_assert!(ranknet(&s, &y.to_ranks()).unwrap().loss >= 0.0);
            prop_assert!(kd_loss(&s, &t, tau).unwrap().loss >= 0.0);
        }

        #[test]
        fn kd_shift_invariant(
            s in prop::collection::vec(-10.0f64..10.0, 2..10),
            c in -100.0f64..100.0,
            tau in 0.25f64..5.0,
        ) {
            let t: Vec<f64> = s.iter().map(|x| (x * 1.7).sin() * 3.0).collect();
            let base = kd_loss(&s, &t, tau).unwrap().loss;
            let s2: Vec<f64> = s.iter().map(|x| x + c).collect();
            let t2: Vec<f64> = t.iter().map(|x| x + c).collect();
            let shifted = kd_loss(&s2, &t2, tau).unwrap().loss;
            prop_assert!((base - shifted).abs() < 1e-10, "{} vs {}", base, shifted);
        }
    }
}
