mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lrdiff::diffusion::{forward_diffuse, sample_cfg, BetaSchedule, Schedule, ScheduleConfig};
use lrdiff::score::{
    analytic_score, average_blocks, extract_attention, load_checkpoint, save_checkpoint, train_toy_score,
    AttentionMap, OracleDomain, ScoreEstimator, TemplateDistribution, TokenSequence, TrainConfig, Vocabulary,
};
use lrdiff::{Error, Grid, Shape};

use common::{fd_gradient, log_density, rel_l2};

fn schedule() -> Schedule {
    Schedule::new(&ScheduleConfig::new(50, BetaSchedule::Linear, 15)).unwrap()
}

fn blob_template(shape: Shape) -> Grid {
    Grid::from_fn(shape, |j, k, l| {
        if (2..6).contains(&j) && (2..6).contains(&k) {
            [0.9, 0.2, 0.1][l]
        } else {
            0.1
        }
    })
}

fn single_template_dataset(shape: Shape) -> (TemplateDistribution, Vocabulary) {
    let n = shape.pixels();
    let support = (0..n).map(|p| (2..6).contains(&(p / shape.width)) && (2..6).contains(&(p % shape.width))).collect();
    let dist = TemplateDistribution::new(
        vec![blob_template(shape)],
        vec![1.0],
        vec![vec![0, 1]],
        vec![support],
        BTreeSet::from([1]),
    )
    .unwrap();
    (dist, Vocabulary::new(["blob", "scene"]).unwrap())
}

/// Score estimator without attention support.
struct Blind(lrdiff::score::AnalyticEstimator);

impl ScoreEstimator for Blind {
    fn shape(&self) -> Shape {
        self.0.shape()
    }
    fn vocabulary(&self) -> &Vocabulary {
        self.0.vocabulary()
    }
    fn score(&self, x: &Grid, t: usize, cond: &TokenSequence, sched: &Schedule) -> lrdiff::Result<Grid> {
        self.0.score(x, t, cond, sched)
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn four_template_score_matches_finite_differences(seed in any::<u64>(), t in 1usize..=50) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let shape = Shape::new(2, 2, 3);
        let templates: Vec<Grid> = (0..4).map(|_| Grid::randn(shape, &mut rng)).collect();
        let raw: Vec<f64> = (0..4).map(|_| rng.random_range(0.1..1.0)).collect();
        let total: f64 = raw.iter().sum();
        let weights: Vec<f64> = raw.iter().map(|w| w / total).collect();
        let tags = vec![vec![0], vec![0], vec![1], vec![1]];
        let dist = TemplateDistribution::new(templates.clone(), weights, tags, vec![vec![true; 4]; 4], BTreeSet::new());
        // renormalisation may leave the sum a few ulps from one
        let dist = match dist {
            Ok(d) => d,
            Err(_) => return Ok(()),
        };
        let sched = schedule();
        let ab = sched.alpha_bar(t);
        let m = rng.random_range(0..4);
        let x = forward_diffuse(&templates[m], t, &Grid::randn(shape, &mut rng), &sched).unwrap();
        for cond in [TokenSequence::null(), TokenSequence::new(vec![0]).unwrap()] {
            let s = analytic_score(&dist, &x, t, &cond, &sched).unwrap();
            let fd = fd_gradient(&x, 1e-4 * (1.0 - ab).sqrt(), |p| log_density(&dist, p, ab, &cond));
            prop_assert!(rel_l2(s.data(), &fd) <= 1e-5);
        }
    }

    #[test]
    fn extracted_attention_is_row_stochastic(seed in any::<u64>()) {
        let domain = OracleDomain::default();
        let est = domain.estimator().unwrap();
        let vocab = domain.vocabulary();
        let x = Grid::randn(domain.shape(), &mut ChaCha8Rng::seed_from_u64(seed));
        for words in [&["red", "plain"][..], &["blue", "cell3", "plain"], &["empty"]] {
            let a = extract_attention(&est, &x, &vocab.encode(words).unwrap(), &schedule()).unwrap();
            prop_assert_eq!(a.rows(), words.len());
            for i in 0..a.rows() {
                prop_assert!((a.row(i).iter().sum::<f64>() - 1.0).abs() <= 1e-9);
                prop_assert!(a.row(i).iter().all(|&v| v >= 0.0));
            }
        }
    }

    #[test]
    fn block_average_matches_brute_force_upsampling(seed in any::<u64>(), coarse in 1usize..4, factor in 1usize..4) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (coarse * factor, (coarse + 1) * factor);
        let fine_vals: Vec<f64> = (0..2 * h * w).map(|_| rng.random::<f64>()).collect();
        let coarse_vals: Vec<f64> = (0..2 * coarse * (coarse + 1)).map(|_| rng.random::<f64>()).collect();
        let fine = AttentionMap::from_rows(2, h, w, fine_vals).unwrap();
        let small = AttentionMap::from_rows(2, coarse, coarse + 1, coarse_vals).unwrap();
        let avg = average_blocks(&[fine.clone(), small.clone()], h, w).unwrap();
        for i in 0..2 {
            // nearest-neighbour upsample by explicit block replication
            let mut up = vec![0.0; h * w];
            for j in 0..coarse {
                for k in 0..coarse + 1 {
                    for dj in 0..factor {
                        for dk in 0..factor {
                            up[(j * factor + dj) * w + k * factor + dk] = small.row(i)[j * (coarse + 1) + k];
                        }
                    }
                }
            }
            let total: f64 = up.iter().sum();
            for p in 0..h * w {
                let want = 0.5 * (fine.row(i)[p] + up[p] / total);
                prop_assert!((avg.row(i)[p] - want).abs() <= 1e-12);
            }
        }
    }
}

#[test]
fn extraction_needs_attention_capability() {
    let domain = OracleDomain::default();
    let blind = Blind(domain.estimator().unwrap());
    let caption = domain.vocabulary().encode(&["red"]).unwrap();
    let err = extract_attention(&blind, &Grid::zeros(domain.shape()), &caption, &schedule()).unwrap_err();
    assert!(matches!(err, Error::Capability(_)));
}

#[test]
fn zero_step_training_gives_a_working_estimator() {
    let shape = Shape::new(8, 8, 3);
    let (dist, vocab) = single_template_dataset(shape);
    let hyper = TrainConfig {
        steps: 0,
        ..TrainConfig::default()
    };
    let (net, report) = train_toy_score(&dist, &vocab, &schedule(), &hyper, 0).unwrap();
    assert!(report.losses.is_empty());
    assert!(net.attention_capable());
    let s = net.score(&Grid::zeros(shape), 10, &TokenSequence::null(), &schedule()).unwrap();
    assert!(s.is_finite());
}

#[test]
fn training_on_one_template_lands_on_it() {
    let shape = Shape::new(8, 8, 3);
    let (dist, vocab) = single_template_dataset(shape);
    let sched = schedule();
    let hyper = TrainConfig {
        steps: 1500,
        ..TrainConfig::default()
    };
    let (net, report) = train_toy_score(&dist, &vocab, &sched, &hyper, 1).unwrap();
    assert!(report.final_validation_loss < report.initial_validation_loss);
    let caption = vocab.encode(&["blob", "scene"]).unwrap();
    let template = blob_template(shape);
    for seed in 0..3 {
        let x = sample_cfg(&net, &caption, 1.0, &sched, seed).unwrap();
        let err = x.max_abs_diff(&template).unwrap();
        assert!(err <= 0.15, "seed {seed}: L-inf error {err:.3}");
    }

    // gradient check after training
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let batch = vec![lrdiff::score::Example {
        x_t: Grid::randn(shape, &mut rng).into_vec(),
        t_frac: 0.5,
        tokens: vec![0, 1],
        target: template.data().to_vec(),
    }];
    let network = net.network();
    let (_, grads) = network.loss_and_grad(&batch);
    for (ti, g) in grads.tensors().iter().enumerate() {
        let idx = (ti * 31) % g.len();
        let h = 1e-5;
        let mut plus = network.clone();
        plus.tensors_mut()[ti][idx] += h;
        let mut minus = network.clone();
        minus.tensors_mut()[ti][idx] -= h;
        let fd = (plus.loss(&batch) - minus.loss(&batch)) / (2.0 * h);
        let rel = (g[idx] - fd).abs() / g[idx].abs().max(fd.abs()).max(1e-8);
        assert!(rel < 1e-4, "tensor {ti}: relative error {rel:.2e}");
    }
}

#[test]
fn checkpoint_round_trip_preserves_scores() {
    let shape = Shape::new(8, 8, 3);
    let (dist, vocab) = single_template_dataset(shape);
    let sched = schedule();
    let hyper = TrainConfig {
        steps: 20,
        ..TrainConfig::default()
    };
    let (net, _) = train_toy_score(&dist, &vocab, &sched, &hyper, 3).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("toy.json");
    save_checkpoint(&net, &path).unwrap();
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, net);
    let x = Grid::randn(shape, &mut ChaCha8Rng::seed_from_u64(4));
    let caption = vocab.encode(&["blob"]).unwrap();
    assert_eq!(
        net.score(&x, 20, &caption, &sched).unwrap(),
        loaded.score(&x, 20, &caption, &sched).unwrap()
    );

    let text = std::fs::read_to_string(&path).unwrap();
    for (from, to) in [("\"version\":1", "\"version\":9"), ("conv1.weight", "conv9.weight")] {
        assert!(text.contains(from), "checkpoint lacks `{from}`");
        std::fs::write(&path, text.replacen(from, to, 1)).unwrap();
        assert!(matches!(load_checkpoint(&path), Err(Error::Format { .. })));
    }
}
