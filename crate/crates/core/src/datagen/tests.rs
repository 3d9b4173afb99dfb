use super::*;
use crate::numkit::{mat_vec, Svd};

#[test]
fn default_instance_has_rank_two_target() {
    let cfg = ToyInstance::default();
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    let svd = Svd::new(mm.task_matrix()).unwrap();
    assert!(svd.singular_values[1] > 1e-3);
    assert!(svd.singular_values[2] < 1e-10);
    assert_eq!(mm.mu_ft()[0], 3.0);
    assert_eq!(mm.mu_pt()[0], -3.0);
    assert_eq!(mm.sigma()[(0, 0)], 0.25);
    assert_eq!(mm.sigma()[(5, 5)], 1.0);
}

#[test]
fn zero_mean_gives_identical_populations() {
    let cfg = ToyInstance {
        mu: 0.0,
        ..Default::default()
    };
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    assert_eq!(mm.mu_ft(), mm.mu_pt());
}

#[test]
fn invalid_configs_are_rejected() {
    let bad = [
        ToyInstance {
            s2: 0.0,
            ..Default::default()
        },
        ToyInstance {
            target_rank: 17,
            ..Default::default()
        },
        ToyInstance {
            d: 0,
            ..Default::default()
        },
        ToyInstance {
            lora_rank: 0,
            ..Default::default()
        },
    ];
    for cfg in bad {
        assert!(make_toy_instance(&cfg, cfg.rng()).is_err(), "{cfg:?}");
    }
}

#[test]
fn mixture_second_moment_matches_formula() {
    let cfg = ToyInstance::default();
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    let d = cfg.d;
    let n = 1_000_000;
    let mut sum = vec![0.0; d * d];
    let mut sum_sq = vec![0.0; d * d];
    let mut g = RngStream::new(5, 5).generator();
    for _ in 0..n {
        let (_, x) = mm.sample_mixture(&mut g);
        for i in 0..d {
            for j in 0..d {
                let v = x[i] * x[j];
                sum[i * d + j] += v;
                sum_sq[i * d + j] += v * v;
            }
        }
    }
    let nf = n as f64;
    for i in 0..d {
        for j in 0..d {
            let want = if i != j {
                0.0
            } else if i == 0 {
                cfg.s2 + cfg.mu * cfg.mu
            } else {
                1.0
            };
            let mean = sum[i * d + j] / nf;
            let se = ((sum_sq[i * d + j] / nf - mean * mean) / nf).sqrt();
            assert!(
                (mean - want).abs() <= 3.0 * se,
                "({i},{j}): {mean} vs {want} (se {se})"
            );
        }
    }
}

#[test]
fn batches_are_balanced_noiseless_and_deterministic() {
    let cfg = ToyInstance::default();
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    let batch = sample_batch(&mm, 100_000, RngStream::new(1, 2)).unwrap();
    let ft = batch
        .labels
        .iter()
        .filter(|&&p| p == Population::Ft)
        .count() as f64
        / 1e5;
    assert!((0.49..=0.51).contains(&ft), "{ft}");

    let w = mm.w0().add(mm.task_matrix()).unwrap();
    for i in 0..1000 {
        let x = batch.x.row_vector(i);
        let y = batch.y.row_vector(i);
        // the generator's own prediction has zero loss
        assert_eq!(y, mm.target(batch.labels[i], &x));
        let independent = match batch.labels[i] {
            Population::Ft => mat_vec(&w, &x).unwrap(),
            Population::Pt => mat_vec(mm.w0(), &x).unwrap(),
        };
        assert!(y.sub(&independent).unwrap().norm() <= 1e-12 * (1.0 + y.norm()));
    }

    let again = sample_batch(&mm, 100_000, RngStream::new(1, 2)).unwrap();
    assert_eq!(batch, again);
    let prefix = sample_batch(&mm, 10, RngStream::new(1, 2)).unwrap();
    assert_eq!(prefix.x.row(9), batch.x.row(9));
    assert!(sample_batch(&mm, 0, RngStream::new(1, 2)).is_err());
}

#[test]
fn noise_flag_perturbs_targets_only() {
    let cfg = ToyInstance {
        d: 4,
        ..Default::default()
    };
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    let clean = sample_batch(&mm, 50, RngStream::new(3, 0)).unwrap();
    let noisy = sample_batch_noisy(&mm, 50, 0.1, RngStream::new(3, 0)).unwrap();
    assert_eq!(clean.x, noisy.x);
    assert_eq!(clean.labels, noisy.labels);
    assert_ne!(clean.y, noisy.y);
    assert!(sample_batch_noisy(&mm, 5, -1.0, RngStream::new(3, 0)).is_err());
}

#[test]
fn negating_mu_swaps_population_roles() {
    let a = ToyInstance {
        d: 3,
        ..Default::default()
    };
    let b = ToyInstance {
        mu: -3.0,
        ..a.clone()
    };
    let ma = make_toy_instance(&a, a.rng()).unwrap();
    let mb = make_toy_instance(&b, b.rng()).unwrap();
    let n = 20_000;
    let fa = sample_population(&ma, Population::Ft, n, RngStream::new(1, 0)).unwrap();
    let pb = sample_population(&mb, Population::Pt, n, RngStream::new(1, 0)).unwrap();
    // same stream, same law: first-coordinate summaries coincide
    for j in 0..3 {
        let mean_a: f64 = (0..n).map(|i| fa.x[(i, j)]).sum::<f64>() / n as f64;
        let mean_b: f64 = (0..n).map(|i| pb.x[(i, j)]).sum::<f64>() / n as f64;
        assert!((mean_a - mean_b).abs() < 1e-12);
    }
}

#[test]
fn batch_csv_has_header_and_rows() {
    let cfg = ToyInstance {
        d: 2,
        ..Default::default()
    };
    let mm = make_toy_instance(&cfg, cfg.rng()).unwrap();
    let batch = sample_batch(&mm, 3, RngStream::new(0, 0)).unwrap();
    let mut buf = Vec::new();
    batch.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "population,x0,x1,y0,y1");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].starts_with("ft,") || lines[1].starts_with("pt,"));
}

#[test]
fn retention_tasks_geometry() {
    let (t1, t2) = make_retention_tasks(16, 4, 6.0, RngStream::new(2, 0)).unwrap();
    for k in 0..4 {
        assert_eq!(t1.centers[k][0], 3.0);
        assert_eq!(t2.centers[k][0], -3.0);
        for j in 0..k {
            let dist = t1.centers[k].sub(&t1.centers[j]).unwrap().norm();
            assert!((dist - 6.0).abs() < 1e-12, "{dist}");
        }
        // task-2 label (k + 1) sits on task-1 vertex k, shifted along e₁
        let mut moved = t1.centers[k].clone();
        moved[0] = -3.0;
        assert!(moved.sub(&t2.centers[(k + 1) % 4]).unwrap().norm() < 1e-12);
    }
}

#[test]
fn well_separated_tasks_are_nearly_bayes_separable() {
    let (t1, t2) = make_retention_tasks(16, 4, 6.0, RngStream::new(3, 0)).unwrap();
    for task in [&t1, &t2] {
        let set = task.sample(20_000, RngStream::new(3, 1));
        let acc = task.bayes_accuracy(&set);
        assert!(acc >= 0.99, "{}: {acc}", task.name);
    }
}

#[test]
fn zero_separation_gives_identical_inputs() {
    let (t1, t2) = make_retention_tasks(8, 3, 0.0, RngStream::new(4, 0)).unwrap();
    for c in t1.centers.iter().chain(&t2.centers) {
        assert!(c.iter().all(|&v| v.abs() < 1e-15));
    }
    let a = t1.sample(100, RngStream::new(4, 1));
    let b = t2.sample(100, RngStream::new(4, 1));
    assert_eq!(a.x, b.x);
}

#[test]
fn retention_tasks_are_reproducible_and_validated() {
    let a = make_retention_tasks(10, 3, 5.0, RngStream::new(5, 0)).unwrap();
    let b = make_retention_tasks(10, 3, 5.0, RngStream::new(5, 0)).unwrap();
    assert_eq!(a, b);
    assert_eq!(
        a.0.sample(64, RngStream::new(5, 1)),
        b.0.sample(64, RngStream::new(5, 1))
    );
    assert!(make_retention_tasks(10, 1, 5.0, RngStream::new(0, 0)).is_err());
    assert!(make_retention_tasks(3, 3, 5.0, RngStream::new(0, 0)).is_err());
    assert!(make_retention_tasks(10, 3, -1.0, RngStream::new(0, 0)).is_err());
    assert!(make_retention_tasks(10, 3, f64::NAN, RngStream::new(0, 0)).is_err());
}
