use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sqz_core::matrix::Matrix;
use sqz_core::rq::{train_codebooks, CodebookStack, RqConfig, DEFAULT_BETA};

/// Best 2-means split of a 1-D point set by exhaustive enumeration of all
/// two-block partitions. Returns the two centers in ascending order.
fn exhaustive_two_means(points: &[f64]) -> (f64, f64, f64) {
    let n = points.len();
    let mut best = (f64::INFINITY, 0.0, 0.0);
    for mask in 1..(1u32 << n) - 1 {
        let (a, b): (Vec<f64>, Vec<f64>) = (0..n)
            .map(|i| (mask >> i & 1 == 1, points[i]))
            .fold((vec![], vec![]), |(mut a, mut b), (left, p)| {
                if left { a.push(p) } else { b.push(p) }
                (a, b)
            });
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let (ma, mb) = (mean(&a), mean(&b));
        let cost: f64 = a.iter().map(|x| (x - ma).powi(2)).sum::<f64>()
            + b.iter().map(|x| (x - mb).powi(2)).sum::<f64>();
        if cost < best.0 {
            best = (cost, ma.min(mb), ma.max(mb));
        }
    }
    best
}

fn four_points() -> Matrix<f32> {
    Matrix::from_rows(1, &[[0.0f32], [1.0], [10.0], [11.0]]).unwrap()
}

fn sorted_entries(stack: &CodebookStack, level: usize) -> Vec<f64> {
    let mut v: Vec<f64> = stack.levels[level].entries.as_slice().iter().map(|&x| f64::from(x)).collect();
    v.sort_by(|a, b| a.partial_cmp(b).unwrap());
    v
}

#[test]
fn four_point_instance_matches_exhaustive_kmeans() {
    let pts = [0.0, 1.0, 10.0, 11.0];
    let (_, c0, c1) = exhaustive_two_means(&pts);
    assert_eq!((c0, c1), (0.5, 10.5));
    let residuals: Vec<f64> = pts.iter().map(|&p| if (p - c0).abs() < (p - c1).abs() { p - c0 } else { p - c1 }).collect();
    let (cost2, r0, r1) = exhaustive_two_means(&residuals);
    assert_eq!((r0, r1), (-0.5, 0.5));
    assert_eq!(cost2, 0.0);

    for seed in 0..10 {
        let cfg = RqConfig { seed, epochs: 50, ..RqConfig::uniform(2, 2) };
        let stack = train_codebooks(&four_points(), &cfg).unwrap();
        assert_eq!(sorted_entries(&stack, 0), vec![c0, c1], "seed {seed}");
        assert_eq!(sorted_entries(&stack, 1), vec![r0, r1], "seed {seed}");

        let loss = stack.rq_loss(&four_points(), DEFAULT_BETA).unwrap();
        assert!(loss.reconstruction.abs() <= 1e-9);
        assert!((loss.commitment_per_level[0] - 0.25).abs() <= 1e-9);
        assert!(loss.commitment_per_level[1].abs() <= 1e-9);
        assert!((loss.total - 0.0625).abs() <= 1e-9);

        // e = 11 goes to 10.5 at level 1 and +0.5 at level 2.
        let q = stack.quantize(&[11.0]).unwrap();
        let l1 = stack.levels[0].entries.row(q.sid.codes()[0] as usize)[0];
        let l2 = stack.levels[1].entries.row(q.sid.codes()[1] as usize)[0];
        assert_eq!((l1, l2), (10.5, 0.5));
        assert!(q.residual_norms[2].abs() < 1e-12);

        let q0 = stack.quantize(&[0.0]).unwrap();
        assert!(stack.reconstruct(&q0.sid).unwrap()[0].abs() <= 1e-9);
    }
}

fn random_data(seed: u64, n: usize, d: usize) -> Matrix<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // A few blobs so the codebooks have something to find.
    let centers: Vec<Vec<f32>> = (0..6).map(|_| (0..d).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
    let rows: Vec<Vec<f32>> = (0..n)
        .map(|_| {
            let c = &centers[rng.random_range(0..centers.len())];
            c.iter().map(|&x| x + rng.random_range(-1.0f32..1.0)).collect()
        })
        .collect();
    Matrix::from_rows(d, &rows).unwrap()
}

#[test]
fn exchange_optimality_on_random_quantizations() {
    let data = random_data(11, 400, 6);
    let stack = train_codebooks(&data, &RqConfig { seed: 5, epochs: 10, ..RqConfig::uniform(3, 16) }).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    for _ in 0..10_000 {
        let e: Vec<f32> = (0..6).map(|_| rng.random_range(-7.0f32..7.0)).collect();
        let q = stack.quantize(&e).unwrap();
        let mut residual: Vec<f64> = e.iter().map(|&x| f64::from(x)).collect();
        for (level, &code) in q.sid.codes().iter().enumerate() {
            let entries = &stack.levels[level].entries;
            let dist = |k: usize| -> f64 {
                residual.iter().zip(entries.row(k)).map(|(r, &z)| (r - f64::from(z)).powi(2)).sum()
            };
            let chosen = dist(code as usize);
            for k in 0..entries.rows() {
                let other = dist(k);
                assert!(other >= chosen, "level {level}: entry {k} beats chosen {code}");
                if other == chosen {
                    assert!(k >= code as usize, "tie must go to the lower index");
                }
            }
            for (r, &z) in residual.iter_mut().zip(entries.row(code as usize)) {
                *r -= f64::from(z);
            }
        }
    }
}

#[test]
fn residual_telescopes_to_reconstruction_error() {
    let data = random_data(3, 300, 5);
    let stack = train_codebooks(&data, &RqConfig { seed: 1, epochs: 8, ..RqConfig::uniform(2, 12) }).unwrap();
    for e in data.iter_rows() {
        let q = stack.quantize(e).unwrap();
        let recon = stack.reconstruct(&q.sid).unwrap();
        let err: f64 = e.iter().zip(&recon).map(|(&x, r)| (f64::from(x) - r).powi(2)).sum::<f64>().sqrt();
        assert!((err - q.residual_norms[2]).abs() <= 1e-9);
        for ((&x, r), res) in e.iter().zip(&recon).zip(&q.residual) {
            let direct = f64::from(x) - r;
            assert!((direct - res).abs() <= 1e-6 * direct.abs().max(1.0));
        }
    }
}

#[test]
fn mean_residual_norm_is_non_increasing_across_levels() {
    for seed in 0..20 {
        let data = random_data(100 + seed, 300, 4);
        let stack = train_codebooks(&data, &RqConfig { seed, epochs: 10, ..RqConfig::uniform(3, 8) }).unwrap();
        let mut means = vec![0.0; 4];
        for e in data.iter_rows() {
            let q = stack.quantize(e).unwrap();
            for (m, n) in means.iter_mut().zip(&q.residual_norms) {
                *m += n / data.rows() as f64;
            }
        }
        for w in means.windows(2) {
            assert!(w[1] <= w[0], "seed {seed}: {means:?}");
        }
    }
}

#[test]
fn ema_state_stays_consistent_after_every_epoch() {
    let data = random_data(8, 200, 3);
    for epochs in 1..=6 {
        let cfg = RqConfig { seed: 2, epochs, ..RqConfig::uniform(2, 10) };
        let stack = train_codebooks(&data, &cfg).unwrap();
        for book in &stack.levels {
            for k in 0..book.len() {
                let count = book.ema_counts[k];
                assert!(count >= 0.0);
                if count < cfg.dead_threshold {
                    continue;
                }
                for j in 0..3 {
                    let ratio = book.ema_sums.get(k, j) / count.max(cfg.epsilon);
                    let entry = f64::from(book.entries.get(k, j));
                    assert!((entry - ratio).abs() <= 1e-6 * ratio.abs().max(1.0));
                }
            }
        }
    }
}

#[test]
fn training_is_bitwise_deterministic() {
    let data = random_data(4, 250, 4);
    let cfg = RqConfig { seed: 77, epochs: 5, ..RqConfig::uniform(2, 9) };
    let a = train_codebooks(&data, &cfg).unwrap();
    let b = train_codebooks(&data, &cfg).unwrap();
    assert_eq!(a, b);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn quantize_reconstruct_agree(seed in 0u64..1000, x in proptest::collection::vec(-8.0f32..8.0, 3)) {
        let data = random_data(seed, 60, 3);
        let stack = train_codebooks(&data, &RqConfig { seed, epochs: 3, ..RqConfig::uniform(2, 4) }).unwrap();
        let q = stack.quantize(&x).unwrap();
        let recon = stack.reconstruct(&q.sid).unwrap();
        let err: f64 = x.iter().zip(&recon).map(|(&a, b)| (f64::from(a) - b).powi(2)).sum::<f64>().sqrt();
        prop_assert!((err - q.residual_norms[2]).abs() <= 1e-9);
    }
}
