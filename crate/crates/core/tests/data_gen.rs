mod common;

use common::*;
use msll_core::data_gen::*;
use msll_core::model::*;
use msll_core::{Matrix, Vector};

fn hh_truth(model: &dyn OdeModel) -> TruthTrajectory<'_> {
    simulate_truth(model, &Vector::from_vec(vec![0.0, 0.0, 0.3, -0.4]), &Vector::from_vec(vec![1.0, 1.0, -1.0]), 0.0, 10.0, TRUTH_STEP).unwrap()
}

#[test]
fn noise_has_zero_mean_and_unit_variance() {
    let mut s = NormalStream::new(stream_rng("noise", 42));
    let n = 10_000;
    let xs: Vec<f64> = (0..n).map(|_| s.next()).collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
    assert!(mean.abs() <= 4.0 / (n as f64).sqrt(), "mean {mean}");
    // sample variance of N(0,1) has SD √(2/(n−1))
    assert!((var - 1.0).abs() <= 4.0 * (2.0 / (n - 1) as f64).sqrt(), "variance {var}");
}

#[test]
fn observation_errors_match_the_noise_scale() {
    let model = henon_heiles();
    let truth = hh_truth(&model);
    let sigma = 0.1;
    let ds = sample_observations(&truth, sigma, 2500, 7).unwrap();
    let mut errs = Vec::new();
    for (t, z) in ds.times.iter().zip(&ds.observations) {
        let x = truth.state_at(*t).unwrap();
        errs.extend((z - model.g(*t, &x, truth.params())).iter().copied());
    }
    let n = errs.len() as f64;
    let mean = errs.iter().sum::<f64>() / n;
    let sd = (errs.iter().map(|e| (e - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() <= 4.0 * sigma / n.sqrt(), "mean {mean}");
    assert!((sd / sigma - 1.0).abs() < 0.05, "sd {sd}");
}

#[test]
fn realizations_have_uncorrelated_noise() {
    let model = fitzhugh_nagumo();
    let truth = simulate_truth(&model, &Vector::from_vec(vec![-1.0, 1.0]), &Vector::from_vec(vec![0.2, 0.2, 3.0]), 0.0, 20.0, TRUTH_STEP).unwrap();
    let proto = BatchProtocol { batches: 1, realizations: 3, master_seed: 5 };
    let sets = batch_generate(&truth, 1.0, 200, &proto).unwrap();
    let noise: Vec<Vec<f64>> = sets[0]
        .iter()
        .map(|ds| {
            ds.times
                .iter()
                .zip(&ds.observations)
                .map(|(t, z)| z[0] - model.g(*t, &truth.state_at(*t).unwrap(), truth.params())[0])
                .collect()
        })
        .collect();
    let corr = |a: &[f64], b: &[f64]| {
        let (ma, mb) = (a.iter().sum::<f64>() / a.len() as f64, b.iter().sum::<f64>() / b.len() as f64);
        let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
        let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
        let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
        cov / (va * vb).sqrt()
    };
    for i in 0..3 {
        for j in i + 1..3 {
            let c = corr(&noise[i], &noise[j]);
            assert!(c.abs() < 0.2, "realizations {i},{j}: correlation {c}");
        }
    }
}

#[test]
fn generation_is_deterministic() {
    let model = rikitake();
    let truth = simulate_truth(&model, &Vector::from_vec(vec![-2.0, -2.0, 0.0]), &Vector::from_vec(vec![0.5, 0.46125]), 0.0, 40.0, TRUTH_STEP).unwrap();
    let proto = BatchProtocol { batches: 2, realizations: 2, master_seed: 99 };
    let a = batch_generate(&truth, 0.1, 50, &proto).unwrap();
    let b = batch_generate(&truth, 0.1, 50, &proto).unwrap();
    for (ba, bb) in a.iter().zip(&b) {
        for (da, db) in ba.iter().zip(bb) {
            assert_eq!(da.to_text(), db.to_text());
        }
    }
    assert_ne!(a[0][0].to_text(), a[0][1].to_text());
}

#[test]
fn benchmark_truths_stay_bounded() {
    let hh = henon_heiles();
    let truth = hh_truth(&hh);
    assert!(truth.states().iter().all(|x| x.amax() < 10.0));
    let rk = rikitake();
    let truth = simulate_truth(&rk, &Vector::from_vec(vec![-2.0, -2.0, 0.0]), &Vector::from_vec(vec![0.5, 0.46125]), 0.0, 40.0, TRUTH_STEP).unwrap();
    assert!(truth.states().iter().all(|x| x.amax() < 10.0));
}

#[test]
fn linear_truth_matches_the_exponential() {
    let mut rng = rng(3);
    let a = random_matrix(&mut rng, 3, 3, 1.0);
    let b = random_vector(&mut rng, 3, 1.0);
    let x0 = random_vector(&mut rng, 3, 1.0);
    let model = LinearModel::new(a.clone(), Matrix::zeros(3, 0), b.clone(), Matrix::identity(3, 3));
    let truth = simulate_truth(&model, &x0, &Vector::zeros(0), 0.0, 2.0, TRUTH_STEP).unwrap();
    for t in [0.0, 0.123456, 1.0, 1.9999, 2.0] {
        let exact = affine_flow(&a, &b, &x0, t);
        let err = (truth.state_at(t).unwrap() - &exact).amax();
        assert!(err <= 1e-10 * (1.0 + exact.amax()), "t={t}: error {err:e}");
    }
}

#[test]
fn batches_have_their_own_time_grids() {
    let model = henon_heiles();
    let truth = hh_truth(&model);
    let proto = BatchProtocol { batches: 3, realizations: 2, master_seed: 1 };
    let sets = batch_generate(&truth, 0.1, 40, &proto).unwrap();
    for batch in &sets {
        assert_eq!(batch[0].times, batch[1].times);
        assert!(batch[0].times.windows(2).all(|w| w[0] < w[1]));
        assert!(batch[0].times.iter().all(|&t| (0.0..10.0).contains(&t)));
    }
    assert_ne!(sets[0][0].times, sets[1][0].times);
    assert_ne!(sets[1][0].times, sets[2][0].times);
}

#[test]
fn single_realization_protocol_is_plain_sampling() {
    let model = henon_heiles();
    let truth = hh_truth(&model);
    let proto = BatchProtocol { batches: 1, realizations: 1, master_seed: 12 };
    let sets = batch_generate(&truth, 0.1, 30, &proto).unwrap();
    let direct = sample_observations(&truth, 0.1, 30, proto.seed(0, 0)).unwrap();
    assert_eq!(sets[0][0], direct);
}

#[test]
fn dataset_text_round_trips() {
    let model = henon_heiles();
    let truth = hh_truth(&model);
    let ds = sample_observations(&truth, 0.1, 25, 4).unwrap();
    let back = Dataset::parse(&ds.to_text()).unwrap();
    assert_eq!(back.times, ds.times);
    assert_eq!(back.observations, ds.observations);
    assert_eq!(back.meta.seed, 4);
    assert_eq!(back.to_text(), ds.to_text());
}

#[test]
fn malformed_datasets_are_rejected() {
    let good = "# msll-dataset v1\n# model=m sigma=0.1 seed=1 t0=0 T=1 N=2 v=1\n0.1,1.0\n0.2,2.0\n";
    assert!(Dataset::parse(good).is_ok());
    for bad in [
        "0.1,1.0\n",
        "# msll-dataset v1\n# model=m sigma=0.1 seed=1 t0=0 T=1 N=3 v=1\n0.1,1.0\n0.2,2.0\n",
        "# msll-dataset v1\n# model=m sigma=0.1 seed=1 t0=0 T=1 N=2 v=1\n0.2,1.0\n0.1,2.0\n",
        "# msll-dataset v1\n# model=m sigma=0.1 seed=1 t0=0 T=1 N=2 v=1\n0.1,1.0,3.0\n0.2,2.0\n",
        "# msll-dataset v1\n# model=m sigma=x seed=1 t0=0 T=1 N=2 v=1\n0.1,1.0\n0.2,2.0\n",
    ] {
        assert!(matches!(Dataset::parse(bad), Err(DataGenError::Format { .. })), "accepted:\n{bad}");
    }
}
