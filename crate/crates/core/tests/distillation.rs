use duorank_core::distiller::{
    alpha_sweep, build_training_set, kendall_tau_b, sweep_csv, train_student, BuildOptions, QueryGroup, TrainConfig,
};
use duorank_core::losses::{LabelVector, LossConfig, RankLoss};
use duorank_core::scorers::{FeatureVector, LinearModel, LinearScorer, PlantedTeacher, PointwiseScorer, ScoreRequest};
use duorank_core::synthetic::{SyntheticBenchmark, SyntheticConfig};
use duorank_core::{Error, Execution};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

const PLANTED: [f64; 5] = [1.0, -0.5, 2.0, 0.7, 0.0];

/// Groups of eight candidates whose positive is the argmax of a planted linear score;
/// the teacher is that same score.
fn separable_groups(n: usize, seed: u64) -> Vec<QueryGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|q| {
            let features: Vec<FeatureVector> = (0..8)
                .map(|_| {
                    let mut x = [1.0; 5];
                    for v in x.iter_mut().take(4) {
                        *v = StandardNormal.sample(&mut rng);
                    }
                    FeatureVector(x)
                })
                .collect();
            let teacher: Vec<f64> = features.iter().map(|f| f.0.iter().zip(PLANTED).map(|(a, b)| a * b).sum()).collect();
            let pos = (0..8).max_by(|&a, &b| teacher[a].total_cmp(&teacher[b])).unwrap();
            QueryGroup {
                query_id: format!("q{q}"),
                doc_ids: (0..8).map(|i| format!("q{q}d{i}")).collect(),
                features,
                labels: LabelVector::positive_at(8, pos).unwrap(),
                grades: (0..8).map(|i| u32::from(i == pos)).collect(),
                teacher,
            }
        })
        .collect()
}

fn cfg(alpha: f64, rank_loss: RankLoss) -> TrainConfig {
    TrainConfig {
        loss: LossConfig { alpha, rank_loss, ..Default::default() },
        learning_rate: 0.05,
        epochs: 40,
        batch_size: 8,
        weight_decay: 0.0,
        ..Default::default()
    }
}

fn heldout<'a>(data: &'a [QueryGroup], ids: &[String]) -> Vec<&'a QueryGroup> {
    data.iter().filter(|g| ids.contains(&g.query_id)).collect()
}

#[test]
fn ranking_loss_alone_learns_separable_labels() {
    let data = separable_groups(120, 1);
    for loss in [RankLoss::PointCe, RankLoss::Ranknet] {
        let report = train_student(&data, &cfg(0.0, loss)).unwrap();
        assert!(report.epoch_losses.last().unwrap() < &report.initial_loss);
        let held = heldout(&data, &report.heldout_queries);
        let (mut tau, mut best_tau) = (0.0, 0.0);
        let mut top1 = 0;
        for g in &held {
            let s: Vec<f64> = g.features.iter().map(|f| report.model.score(f)).collect();
            let labels: Vec<f64> = g.labels.as_slice().iter().map(|&l| f64::from(l)).collect();
            tau += kendall_tau_b(&s, &labels).unwrap();
            // one-hot labels cap tau-b below 1; the planted scorer attains the cap
            best_tau += kendall_tau_b(&g.teacher, &labels).unwrap();
            let best = (0..s.len()).max_by(|&a, &b| s[a].total_cmp(&s[b])).unwrap();
            top1 += usize::from(g.labels.as_slice()[best] == 1);
        }
        assert!(tau > 0.8 * best_tau, "{loss:?}: tau {tau} of {best_tau}");
        assert!(top1 as f64 / held.len() as f64 >= 0.8, "{loss:?}: top1 {top1}/{}", held.len());
    }
}

#[test]
fn kd_only_recovers_a_realizable_teacher() {
    let data = separable_groups(100, 2);
    let mut c = cfg(1.0, RankLoss::PointCe);
    c.epochs = 60;
    let report = train_student(&data, &c).unwrap();
    let tau = report.heldout_kendall.last().unwrap().unwrap();
    assert!(tau >= 0.9, "tau {tau}");
}

#[test]
fn full_batch_kd_loss_never_increases() {
    let data = separable_groups(40, 3);
    let c = TrainConfig {
        loss: LossConfig { alpha: 1.0, ..Default::default() },
        learning_rate: 1e-3,
        epochs: 25,
        batch_size: 1000,
        weight_decay: 0.0,
        holdout_fraction: 0.0,
        ..Default::default()
    };
    let report = train_student(&data, &c).unwrap();
    let mut prev = report.initial_loss;
    for &l in &report.epoch_losses {
        assert!(l <= prev + 1e-6, "{l} after {prev}");
        prev = l;
    }
    assert!(prev < report.initial_loss);
}

#[test]
fn zero_learning_rate_changes_nothing() {
    let data = separable_groups(20, 4);
    let mut c = cfg(0.5, RankLoss::PointCe);
    c.learning_rate = 0.0;
    c.epochs = 3;
    let report = train_student(&data, &c).unwrap();
    assert!(report.epoch_losses.iter().all(|&l| l == report.initial_loss));
    assert_eq!(report.model.weights, [0.0; 5]);
}

#[test]
fn invalid_training_configs_are_rejected() {
    let data = separable_groups(5, 5);
    for bad in [
        TrainConfig { learning_rate: -1.0, ..Default::default() },
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { holdout_fraction: 1.0, ..Default::default() },
        TrainConfig { loss: LossConfig { alpha: 1.5, ..Default::default() }, ..Default::default() },
    ] {
        assert!(matches!(train_student(&data, &bad), Err(Error::Config(_))));
    }
    assert!(train_student(&[], &TrainConfig::default()).is_err());
}

#[test]
fn huge_learning_rate_reports_divergence() {
    let data = separable_groups(20, 6);
    let mut c = cfg(0.0, RankLoss::Ranknet);
    c.learning_rate = 1e308;
    let out = train_student(&data, &c);
    assert!(matches!(out, Err(Error::Diverged { .. })), "{out:?}");
}

fn fixture() -> SyntheticBenchmark {
    SyntheticBenchmark::generate(&SyntheticConfig::default()).unwrap()
}

#[test]
fn training_set_shapes() {
    let bench = fixture();
    let corpus = bench.corpus().unwrap();
    let teacher = PlantedTeacher::new(bench.qrels.clone(), 0.5, 1.0, 0).unwrap();
    let (groups, report) =
        build_training_set(&corpus, &bench.queries, &bench.qrels, &teacher, &BuildOptions::default(), Execution::Parallel)
            .unwrap();
    assert_eq!((report.queries, report.built), (20, groups.len()));
    assert!(groups.iter().all(|g| g.len() == 8 && g.labels.positives() == 1));
    assert!(groups.iter().all(|g| g.grades[g.labels.as_slice().iter().position(|&l| l == 1).unwrap()] == 3));

    let none = BuildOptions { negatives_per_query: 0, ..Default::default() };
    let (single, _) = build_training_set(&corpus, &bench.queries, &bench.qrels, &teacher, &none, Execution::Sequential).unwrap();
    assert!(single.iter().all(|g| g.labels.as_slice() == [1]));

    let (again, _) =
        build_training_set(&corpus, &bench.queries, &bench.qrels, &teacher, &BuildOptions::default(), Execution::Sequential)
            .unwrap();
    assert_eq!(groups, again);
}

#[test]
fn teacher_is_frozen_during_training() {
    let bench = fixture();
    let corpus = bench.corpus().unwrap();
    let teacher = LinearScorer::new(LinearModel::new(PLANTED), corpus.index()).unwrap();
    let q = &bench.queries[0];
    let docs = corpus.documents().iter().take(10).collect();
    let req = ScoreRequest::new(q, docs).unwrap();
    let before = teacher.score_batch(&req).unwrap();
    let (groups, _) =
        build_training_set(&corpus, &bench.queries, &bench.qrels, &teacher, &BuildOptions::default(), Execution::Parallel)
            .unwrap();
    let snapshot: Vec<Vec<f64>> = groups.iter().map(|g| g.teacher.clone()).collect();
    train_student(&groups, &cfg(0.5, RankLoss::PointCe)).unwrap();
    let after = teacher.score_batch(&req).unwrap();
    assert_eq!(before.iter().map(|x| x.to_bits()).collect::<Vec<_>>(), after.iter().map(|x| x.to_bits()).collect::<Vec<_>>());
    assert_eq!(snapshot, groups.iter().map(|g| g.teacher.clone()).collect::<Vec<_>>());
}

#[test]
fn sweep_rows_follow_the_alpha_list() {
    let data = separable_groups(30, 7);
    let c = cfg(0.0, RankLoss::PointCe);
    let one = alpha_sweep(&data, &[0.3], &c, Execution::Sequential).unwrap();
    assert_eq!(one.len(), 1);
    let dup = alpha_sweep(&data, &[0.2, 0.2, 0.4], &c, Execution::Parallel).unwrap();
    assert_eq!(dup.iter().map(|r| r.alpha).collect::<Vec<_>>(), [0.2, 0.2, 0.4]);
    assert_eq!(dup[0].ndcg10, dup[1].ndcg10);
    let csv = sweep_csv(&dup);
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.starts_with("alpha,ndcg10\n"));
    assert!(matches!(alpha_sweep(&data, &[1.2], &c, Execution::Sequential), Err(Error::Config(_))));
    let seq = alpha_sweep(&data, &[0.1, 0.5], &c, Execution::Sequential).unwrap();
    let par = alpha_sweep(&data, &[0.1, 0.5], &c, Execution::Parallel).unwrap();
    assert_eq!(seq, par);
}
