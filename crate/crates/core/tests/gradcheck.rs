use duorank_core::losses::{
    kd_loss, kd_loss_directed, point_ce, ranknet, total_loss, KdDirection, LabelVector, LossConfig, RankLoss,
    RankVector, ScoreMatrix,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const H: f64 = 1e-5;

fn central_diff(f: impl Fn(&[f64]) -> f64, x: &[f64]) -> Vec<f64> {
    (0..x.len())
        .map(|i| {
            let mut up = x.to_vec();
            let mut down = x.to_vec();
            up[i] += H;
            down[i] -= H;
            (f(&up) - f(&down)) / (2.0 * H)
        })
        .collect()
}

/// Norm-wise relative error with a tiny floor so exact zeros compare cleanly.
fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(1e-6)
}

fn scores(rng: &mut ChaCha8Rng, m: usize) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-3.0..3.0)).collect()
}

#[test]
fn point_ce_matches_finite_differences() {
    let s = [1.2, -0.7, 0.3];
    let labels = LabelVector::one_hot(vec![0, 1, 0]).unwrap();
    let lg = point_ce(&s, &labels).unwrap();
    let fd = central_diff(|x| point_ce(x, &labels).unwrap().loss, &s);
    assert!(rel_err(&lg.grad, &fd) < 1e-6);
}

#[test]
fn ranknet_with_ties_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let ranks = RankVector::new(vec![1, 2, 2, 2]).unwrap();
    for _ in 0..20 {
        let s = scores(&mut rng, 4);
        let lg = ranknet(&s, &ranks).unwrap();
        let fd = central_diff(|x| ranknet(x, &ranks).unwrap().loss, &s);
        assert!(rel_err(&lg.grad, &fd) < 1e-6);
    }
}

#[test]
fn both_kd_directions_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for dir in [KdDirection::StudentTeacher, KdDirection::TeacherStudent] {
        for tau in [0.5, 1.0, 2.0, 5.0] {
            let s = scores(&mut rng, 5);
            let t = scores(&mut rng, 5);
            let lg = kd_loss_directed(&s, &t, tau, dir).unwrap();
            let fd = central_diff(|x| kd_loss_directed(x, &t, tau, dir).unwrap().loss, &s);
            assert!(rel_err(&lg.grad, &fd) < 1e-6, "{dir:?} tau {tau}");
        }
    }
}

#[test]
fn total_loss_composes_component_losses() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let student: Vec<Vec<f64>> = (0..2).map(|_| scores(&mut rng, 3)).collect();
    let teacher: Vec<Vec<f64>> = (0..2).map(|_| scores(&mut rng, 3)).collect();
    let labels = vec![
        LabelVector::one_hot(vec![1, 0, 0]).unwrap(),
        LabelVector::one_hot(vec![0, 0, 1]).unwrap(),
    ];
    let cfg = LossConfig { alpha: 0.1, ..Default::default() };
    let batch = ScoreMatrix::new(student.clone(), Some(teacher.clone())).unwrap();
    let total = total_loss(&batch, &labels, &cfg).unwrap();
    let mut expect = 0.0;
    for i in 0..2 {
        let r = point_ce(&student[i], &labels[i]).unwrap().loss;
        let k = kd_loss(&student[i], &teacher[i], cfg.tau).unwrap().loss;
        expect += (0.9 * r + 0.1 * k) / 2.0;
    }
    assert!((total.loss - expect).abs() < 1e-12);
}

#[test]
fn total_loss_gradient_matches_finite_differences_for_ranknet() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let m = 6;
    let labels: Vec<LabelVector> = (0..3)
        .map(|i| LabelVector::positive_at(m, i % m).unwrap())
        .collect();
    let teacher: Vec<Vec<f64>> = (0..3).map(|_| scores(&mut rng, m)).collect();
    let cfg = LossConfig { alpha: 0.5, tau: 2.0, rank_loss: RankLoss::Ranknet, ..Default::default() };
    let flat = scores(&mut rng, 3 * m);
    let eval = |x: &[f64]| {
        let rows: Vec<Vec<f64>> = x.chunks(m).map(<[f64]>::to_vec).collect();
        total_loss(&ScoreMatrix::new(rows, Some(teacher.clone())).unwrap(), &labels, &cfg).unwrap()
    };
    let analytic: Vec<f64> = eval(&flat).grad.concat();
    let fd = central_diff(|x| eval(x).loss, &flat);
    assert!(rel_err(&analytic, &fd) < 1e-6);
}

proptest! {
    #[test]
    fn kd_gradient_sums_to_zero(s in prop::collection::vec(-5.0f64..5.0, 2..10), shift in -3.0f64..3.0, tau in 0.5f64..5.0) {
        // softmax is shift invariant, so the gradient is orthogonal to the all-ones direction
        let t: Vec<f64> = s.iter().rev().map(|x| x + shift).collect();
        let lg = kd_loss(&s, &t, tau).unwrap();
        prop_assert!(lg.grad.iter().sum::<f64>().abs() < 1e-9);
        prop_assert!(lg.loss >= 0.0);
    }

    #[test]
    fn ranknet_gradient_sums_to_zero(s in prop::collection::vec(-5.0f64..5.0, 2..10)) {
        let grades: Vec<u32> = (0..s.len() as u32).map(|i| i % 3).collect();
        let lg = ranknet(&s, &RankVector::from_grades(&grades)).unwrap();
        prop_assert!(lg.grad.iter().sum::<f64>().abs() < 1e-9);
    }

    #[test]
    fn random_instances_pass_gradcheck(seed in any::<u64>(), m in 2usize..10) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let s = scores(&mut rng, m);
        let t = scores(&mut rng, m);
        let pos = rng.random_range(0..m);
        let labels = LabelVector::positive_at(m, pos).unwrap();
        let g = point_ce(&s, &labels).unwrap().grad;
        prop_assert!(rel_err(&g, &central_diff(|x| point_ce(x, &labels).unwrap().loss, &s)) < 1e-6);
        let g = kd_loss(&s, &t, 1.5).unwrap().grad;
        prop_assert!(rel_err(&g, &central_diff(|x| kd_loss(x, &t, 1.5).unwrap().loss, &s)) < 1e-6);
    }
}
