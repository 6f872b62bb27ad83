use ghostvec::attack::{GhostVec, Provenance};
use ghostvec::linalg::{compose, cosine_distance, orthogonality_error, reconstruction_error, svd, Matrix};
use ghostvec::svd_transfer::{
    nearest_template, pool_speaker_embedding, sanitize, stack_ghostvecs, transfer, EmbeddingMatrix, TemplateBank,
};
use ghostvec::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn gaussian(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    let n = Normal::new(0.0, 1.0).unwrap();
    Matrix::from_fn(rows, cols, |_, _| n.sample(rng))
}

fn low_rank(rows: usize, cols: usize, rank: usize, rng: &mut ChaCha8Rng) -> Matrix<f64> {
    gaussian(rows, rank, rng).matmul(&gaussian(rank, cols, rng)).unwrap()
}

fn check_factors(x: &Matrix<f64>, label: &str) {
    let f = svd(x).unwrap();
    assert!(reconstruction_error(x, &f) <= 1e-6, "{label}: reconstruction");
    assert!(f.sigma.iter().all(|&s| s >= 0.0), "{label}: negative sigma");
    assert!(f.sigma.windows(2).all(|w| w[0] >= w[1]), "{label}: not descending");
    assert!(orthogonality_error(&f.u) <= 1e-6, "{label}: U");
    assert!(orthogonality_error(&f.v) <= 1e-6, "{label}: V");
    assert_eq!(f.u.shape(), (x.rows(), x.rows()));
    assert_eq!(f.v.shape(), (x.cols(), x.cols()));
}

#[test]
fn hundred_random_matrices_including_edge_cases() {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    for case in 0..100 {
        let x = match case % 5 {
            0 => gaussian(1, rng.random_range(1..80), &mut rng),
            1 => {
                let (r, c) = (rng.random_range(2..40), rng.random_range(2..40));
                low_rank(r, c, rng.random_range(1..=r.min(c).max(2) - 1), &mut rng)
            }
            2 => gaussian(rng.random_range(20..110), rng.random_range(1..20), &mut rng),
            3 => gaussian(rng.random_range(1..20), rng.random_range(20..70), &mut rng),
            _ => {
                let n = rng.random_range(1..30);
                gaussian(n, n, &mut rng).scale(10f64.powi(rng.random_range(-3..4)))
            }
        };
        check_factors(&x, &format!("case {case} {:?}", x.shape()));
    }
    check_factors(&Matrix::zeros(4, 3), "zero matrix");
    check_factors(&Matrix::filled(5, 5, 1.0), "rank one");
}

#[test]
fn singular_values_match_gram_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = gaussian(100, 64, &mut rng);
    let f = svd(&x).unwrap();
    let nx = nalgebra::DMatrix::from_fn(100, 64, |i, j| x[(i, j)]);
    let gram = nx.transpose() * &nx;
    let mut eig: Vec<f64> = nalgebra::SymmetricEigen::new(gram).eigenvalues.iter().map(|&l| l.max(0.0).sqrt()).collect();
    eig.sort_by(|a, b| b.total_cmp(a));
    for (k, (a, b)) in f.sigma.iter().zip(&eig).enumerate() {
        assert!((a - b).abs() <= 1e-8 * eig[0], "sigma {k}: {a} vs {b}");
    }
}

#[test]
fn transfer_preserves_ghost_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    for case in 0..100 {
        let (n, d) = match case % 4 {
            0 => (1, rng.random_range(1..40)),
            1 => (rng.random_range(2..30), rng.random_range(2..30)),
            2 => (100, 64),
            _ => (rng.random_range(5..20), rng.random_range(1..5)),
        };
        let g = if case % 3 == 0 && n.min(d) > 1 { low_rank(n, d, 1, &mut rng) } else { gaussian(n, d, &mut rng) };
        let t = gaussian(n, d, &mut rng);
        let (gf, tf) = (svd(&g).unwrap(), svd(&t).unwrap());
        let out = transfer(&gf, &tf).unwrap();
        let of = svd(&out).unwrap();
        let scale = gf.sigma[0].max(1.0);
        for (a, b) in of.sigma.iter().zip(&gf.sigma) {
            assert!((a - b).abs() <= 1e-6 * scale, "case {case}: {a} vs {b}");
        }
    }
}

#[test]
fn transfer_onto_own_factors_is_identity_and_shape_checked() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let x = gaussian(12, 5, &mut rng);
    let f = svd(&x).unwrap();
    assert!(transfer(&f, &f).unwrap().max_abs_diff(&x) < 1e-10);
    let other = svd(&gaussian(11, 5, &mut rng)).unwrap();
    assert!(matches!(transfer(&f, &other), Err(Error::Shape(_))));
}

#[test]
fn row_permutation_keeps_spectrum() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = gaussian(30, 8, &mut rng);
    let mut idx: Vec<usize> = (0..30).collect();
    idx.reverse();
    idx.swap(3, 17);
    let (a, b) = (svd(&x).unwrap(), svd(&x.select_rows(&idx)).unwrap());
    for (s, t) in a.sigma.iter().zip(&b.sigma) {
        assert!((s - t).abs() < 1e-10);
    }
}

#[test]
fn compose_uses_leading_columns() {
    let u = Matrix::<f64>::identity(3);
    let v = Matrix::<f64>::identity(2);
    let m = compose(&u, &[2.0, 1.0], &v);
    assert_eq!(m.as_slice(), &[2.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
}

fn bank_of(rng: &mut ChaCha8Rng, n: usize, d: usize, names: &[&str]) -> TemplateBank<f64> {
    let mut bank = TemplateBank::new();
    for name in names {
        bank.insert(EmbeddingMatrix::new(gaussian(n, d, rng), *name).unwrap()).unwrap();
    }
    bank
}

#[test]
fn nearest_template_agrees_with_exhaustive_scan() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..20 {
        let bank = bank_of(&mut rng, 10, 6, &["d", "b", "a", "c", "e"]);
        let ghost = EmbeddingMatrix::new(gaussian(10, 6, &mut rng), "ghost").unwrap();
        let (name, _, dist) = nearest_template(&ghost, &bank).unwrap();
        let g = ghost.row_mean();
        let mut scan: Vec<(f64, String)> =
            bank.iter().map(|(k, m)| (cosine_distance(&g, &m.row_mean()), k.to_string())).collect();
        scan.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        assert_eq!(name, scan[0].1);
        assert_eq!(dist, scan[0].0);
    }
}

#[test]
fn nearest_template_ties_go_to_lexicographic_first() {
    let mut bank = TemplateBank::new();
    let x = Matrix::from_rows(&[vec![1.0, 0.0], vec![1.0, 0.0]]).unwrap();
    for name in ["zed", "amy", "kim"] {
        bank.insert(EmbeddingMatrix::new(x.clone(), name).unwrap()).unwrap();
    }
    let ghost = EmbeddingMatrix::new(x.scale(3.0), "g").unwrap();
    assert_eq!(nearest_template(&ghost, &bank).unwrap().0, "amy");
}

#[test]
fn template_choice_is_scale_invariant() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let bank = bank_of(&mut rng, 8, 4, &["a", "b", "c"]);
    let x = gaussian(8, 4, &mut rng);
    let g1 = EmbeddingMatrix::new(x.clone(), "g").unwrap();
    let g2 = EmbeddingMatrix::new(x.scale(17.5), "g").unwrap();
    assert_eq!(nearest_template(&g1, &bank).unwrap().0, nearest_template(&g2, &bank).unwrap().0);
}

#[test]
fn pooling_is_the_row_mean() {
    let x = Matrix::from_rows(&[vec![1.0, 2.0], vec![3.0, 6.0], vec![5.0, 1.0]]).unwrap();
    assert_eq!(pool_speaker_embedding(&x), vec![3.0, 3.0]);
}

fn ghosts(rng: &mut ChaCha8Rng, count: usize, fail_every: usize) -> Vec<GhostVec<f64>> {
    (0..count)
        .map(|i| GhostVec {
            embedding: None,
            pooled: (0..6).map(|_| rng.random_range(-1.0..1.0)).collect(),
            target_speaker: "spk001".into(),
            provenance: Provenance { iters_used: 1, final_loss: 0.1, success: fail_every == 0 || i % fail_every != 0 },
        })
        .collect()
}

#[test]
fn stacking_uses_successful_variants_only() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let g = ghosts(&mut rng, 12, 3);
    let m = stack_ghostvecs(&g, 8).unwrap();
    assert_eq!(m.x.shape(), (8, 6));
    assert_eq!(m.x.row(0), g[1].pooled.as_slice());
    match stack_ghostvecs(&g, 9) {
        Err(Error::Insufficient { needed: 9, available: 8 }) => {}
        other => panic!("expected insufficient, got {other:?}"),
    }
}

#[test]
fn sanitize_keeps_spectrum_and_takes_template_geometry() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let g = ghosts(&mut rng, 10, 0);
    let bank = bank_of(&mut rng, 10, 6, &["t1", "t2"]);
    let out = sanitize(&g, 10, &bank).unwrap();
    let stacked = stack_ghostvecs(&g, 10).unwrap();
    let gs = svd(&stacked.x).unwrap().sigma;
    let ms = svd(&out.modified).unwrap().sigma;
    assert!(gs.iter().zip(&ms).all(|(a, b)| (a - b).abs() < 1e-9));
    let tf = svd(&bank.get(&out.template).unwrap().x).unwrap();
    let back = out.modified.t_matmul(&tf.u).unwrap();
    // columns of U_t^T X' are sigma_k v_k^T of the template
    for k in 0..6 {
        let col: Vec<f64> = (0..6).map(|j| back[(j, k)]).collect();
        let want: Vec<f64> = (0..6).map(|j| gs[k] * tf.v[(j, k)]).collect();
        assert!(col.iter().zip(&want).all(|(a, b)| (a - b).abs() < 1e-9));
    }
}

#[test]
fn bank_round_trips_through_disk() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let mut bank = TemplateBank::new();
    bank.insert_resampled("tpl001", &gaussian(30, 4, &mut rng), 10, 1).unwrap();
    bank.insert_resampled("tpl000", &gaussian(5, 4, &mut rng), 10, 1).unwrap();
    let dir = tempfile::tempdir().unwrap();
    bank.save(dir.path()).unwrap();
    let back = TemplateBank::<f64>::load(dir.path()).unwrap();
    assert_eq!(back.len(), 2);
    for (name, m) in bank.iter() {
        assert_eq!(m.x.rows(), 10);
        let got = back.get(name).unwrap().x.as_slice();
        // stored as f32
        assert!(got.iter().zip(m.x.as_slice()).all(|(a, b)| *a == *b as f32 as f64));
    }
}
