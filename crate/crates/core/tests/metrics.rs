use std::collections::BTreeMap;

use ghostvec::linalg::Matrix;
use ghostvec::metrics::detection::normalized_dcf;
use ghostvec::metrics::{
    cllr, eer, min_dcf, operating_points, pav, project_2d, score_trials, train_speaker_encoder, SvConfig, SvExample,
    Trial, TrialLabel, TrialScoreSet, P_TARGET,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

/// (pmiss, pfa) with accept iff score > thr, by direct counting.
fn rates(t: &[f64], n: &[f64], thr: f64) -> (f64, f64) {
    let miss = t.iter().filter(|&&s| s <= thr).count() as f64 / t.len() as f64;
    let fa = n.iter().filter(|&&s| s > thr).count() as f64 / n.len() as f64;
    (miss, fa)
}

/// Tradeoff curve at -inf and every distinct score, by counting.
fn brute_curve(t: &[f64], n: &[f64]) -> Vec<(f64, f64)> {
    let mut thr: Vec<f64> = t.iter().chain(n).copied().collect();
    thr.sort_by(f64::total_cmp);
    thr.dedup();
    std::iter::once(f64::NEG_INFINITY).chain(thr).map(|x| rates(t, n, x)).collect()
}

fn brute_eer(t: &[f64], n: &[f64]) -> f64 {
    let c = brute_curve(t, n);
    for w in c.windows(2) {
        let (a, b) = (w[0], w[1]);
        let (da, db) = (a.0 - a.1, b.0 - b.1);
        if da == 0.0 {
            return 100.0 * a.1;
        }
        if da < 0.0 && db >= 0.0 {
            let f = da / (da - db);
            return 100.0 * (a.1 + f * (b.1 - a.1));
        }
    }
    100.0 * c.last().unwrap().1
}

fn brute_min_dcf(t: &[f64], n: &[f64], p: f64) -> f64 {
    let norm = p.min(1.0 - p);
    brute_curve(t, n).iter().map(|&(m, f)| (p * m + (1.0 - p) * f) / norm).fold(f64::INFINITY, f64::min)
}

/// Isotonic fit by the min-max formula over grouped ties, O(k^2) block means.
fn minmax_isotonic(y: &[f64], w: &[f64]) -> Vec<f64> {
    let k = y.len();
    let mut sy = vec![0.0; k + 1];
    let mut sw = vec![0.0; k + 1];
    for i in 0..k {
        sy[i + 1] = sy[i] + y[i] * w[i];
        sw[i + 1] = sw[i] + w[i];
    }
    let mean = |a: usize, b: usize| (sy[b + 1] - sy[a]) / (sw[b + 1] - sw[a]);
    (0..k)
        .map(|i| (0..=i).map(|j| (i..k).map(|l| mean(j, l)).fold(f64::INFINITY, f64::min)).fold(f64::NEG_INFINITY, f64::max))
        .collect()
}

fn naive_cllr(t: &[f64], n: &[f64]) -> f64 {
    let f = |x: f64| (1.0 + x.exp()).log2();
    0.5 * (t.iter().map(|&s| f(-s)).sum::<f64>() / t.len() as f64 + n.iter().map(|&s| f(s)).sum::<f64>() / n.len() as f64)
}

fn brute_cllr_min(t: &[f64], n: &[f64]) -> f64 {
    let mut scores: Vec<f64> = t.iter().chain(n).copied().collect();
    scores.sort_by(f64::total_cmp);
    scores.dedup();
    let y: Vec<f64> = scores
        .iter()
        .map(|&s| {
            let h = t.iter().filter(|&&x| x == s).count() as f64;
            h / (h + n.iter().filter(|&&x| x == s).count() as f64)
        })
        .collect();
    let w: Vec<f64> =
        scores.iter().map(|&s| t.iter().chain(n).filter(|&&x| x == s).count() as f64).collect();
    let q = minmax_isotonic(&y, &w);
    let prior = (t.len() as f64 / n.len() as f64).ln();
    let llr = |s: f64| {
        let i = scores.binary_search_by(|x| x.partial_cmp(&s).unwrap()).unwrap();
        (q[i] / (1.0 - q[i])).ln() - prior
    };
    // log2(1 + e^x) with the infinite cases resolved explicitly
    let term = |x: f64| if x == f64::NEG_INFINITY { 0.0 } else if x == f64::INFINITY { f64::INFINITY } else { (1.0 + x.exp()).log2() };
    0.5 * (t.iter().map(|&s| term(-llr(s))).sum::<f64>() / t.len() as f64
        + n.iter().map(|&s| term(llr(s))).sum::<f64>() / n.len() as f64)
}

fn random_set(rng: &mut ChaCha8Rng, total: usize) -> (Vec<f64>, Vec<f64>) {
    let n_t = rng.random_range(total / 20..total / 2);
    let sep = rng.random_range(0.0..4.0);
    let quant = rng.random_bool(0.3);
    let q = |x: f64| if quant { (x * 20.0).round() / 20.0 } else { x };
    let nt = Normal::new(sep, 1.0).unwrap();
    let nn = Normal::new(0.0, rng.random_range(0.5..2.0)).unwrap();
    let t = (0..n_t).map(|_| q(nt.sample(rng))).collect();
    let n = (0..total - n_t).map(|_| q(nn.sample(rng))).collect();
    (t, n)
}

#[test]
fn metrics_match_brute_force_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for case in 0..50 {
        let (t, n) = random_set(&mut rng, 1000);
        let (e, _) = eer(&t, &n).unwrap();
        assert!((e - brute_eer(&t, &n)).abs() <= 1e-9, "case {case}: eer {e}");
        let d = min_dcf(&t, &n, P_TARGET, 1.0, 1.0).unwrap();
        assert!((d - brute_min_dcf(&t, &n, P_TARGET)).abs() <= 1e-9, "case {case}: minDCF {d}");
        let (act, min) = cllr(&t, &n).unwrap();
        assert!((act - naive_cllr(&t, &n)).abs() <= 1e-9, "case {case}: cllr_act {act}");
        let bm = brute_cllr_min(&t, &n);
        assert!((min - bm).abs() <= 1e-9, "case {case}: cllr_min {min} vs {bm}");
    }
}

#[test]
fn monotone_transforms_leave_rank_metrics_unchanged() {
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let f = |x: f64| x.powi(3) + (0.5 * x).exp() - 4.0;
    for _ in 0..20 {
        let (t, n) = random_set(&mut rng, 400);
        let (ft, fnn): (Vec<f64>, Vec<f64>) = (t.iter().map(|&x| f(x)).collect(), n.iter().map(|&x| f(x)).collect());
        assert_eq!(eer(&t, &n).unwrap().0, eer(&ft, &fnn).unwrap().0);
        assert_eq!(min_dcf(&t, &n, P_TARGET, 1.0, 1.0).unwrap(), min_dcf(&ft, &fnn, P_TARGET, 1.0, 1.0).unwrap());
        assert_eq!(cllr(&t, &n).unwrap().1, cllr(&ft, &fnn).unwrap().1);
    }
}

#[test]
fn negating_scores_and_swapping_classes_is_symmetric() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..20 {
        let (t, n) = random_set(&mut rng, 300);
        let nt: Vec<f64> = t.iter().map(|x| -x).collect();
        let nn: Vec<f64> = n.iter().map(|x| -x).collect();
        let a = eer(&t, &n).unwrap().0;
        let b = eer(&nn, &nt).unwrap().0;
        assert!((a - b).abs() < 1e-9, "{a} vs {b}");
    }
}

#[test]
fn min_dcf_is_below_every_operating_point() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (t, n) = random_set(&mut rng, 500);
    let m = min_dcf(&t, &n, P_TARGET, 1.0, 1.0).unwrap();
    for p in operating_points(&t, &n).unwrap() {
        assert!(m <= normalized_dcf(&p, P_TARGET, 1.0, 1.0) + 1e-15);
    }
}

#[test]
fn pav_agrees_with_minmax_formula() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let k = rng.random_range(1..40);
        let y: Vec<f64> = (0..k).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..k).map(|_| rng.random_range(0.1..3.0)).collect();
        let a = pav(&y, &w);
        let b = minmax_isotonic(&y, &w);
        for (x, z) in a.iter().zip(&b) {
            assert!((x - z).abs() < 1e-12);
        }
        assert!(a.windows(2).all(|p| p[0] <= p[1] + 1e-15));
    }
}

#[test]
fn separable_and_chance_level_extremes() {
    let t: Vec<f64> = (0..100).map(|i| 10.0 + i as f64).collect();
    let n: Vec<f64> = (0..100).map(|i| -(i as f64)).collect();
    assert_eq!(eer(&t, &n).unwrap().0, 0.0);
    assert_eq!(min_dcf(&t, &n, P_TARGET, 1.0, 1.0).unwrap(), 0.0);
    assert_eq!(cllr(&t, &n).unwrap().1, 0.0);
    let same: Vec<f64> = vec![0.3; 50];
    assert!((eer(&same, &same).unwrap().0 - 50.0).abs() < 1e-12);
    assert!((cllr(&same, &same).unwrap().1 - 1.0).abs() < 1e-12);
}

#[test]
fn projection_matches_symmetric_eigen_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let d = 6;
    let pts: Vec<(String, Vec<f64>)> = (0..60)
        .map(|i| {
            let v: Vec<f64> = (0..d).map(|j| normal.sample(&mut rng) * (d - j) as f64).collect();
            (format!("p{i}"), v)
        })
        .collect();
    let proj = project_2d(&pts).unwrap();
    let n = pts.len();
    let data = nalgebra::DMatrix::from_fn(n, d, |i, j| pts[i].1[j]);
    let mean = data.row_mean();
    let centered = nalgebra::DMatrix::from_fn(n, d, |i, j| data[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    let eig = nalgebra::SymmetricEigen::new(cov);
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    for (k, &col) in order.iter().take(2).enumerate() {
        let v = eig.eigenvectors.column(col);
        let lead = v.iter().fold(0.0f64, |a, &x| if x.abs() > a.abs() { x } else { a });
        let s = lead.signum();
        for (i, p) in proj.iter().enumerate() {
            let want = s * centered.row(i).dot(&v.transpose());
            let got = if k == 0 { p.x } else { p.y };
            assert!((got - want).abs() < 1e-8, "point {i} axis {k}: {got} vs {want}");
        }
    }
}

#[test]
fn score_trials_matches_direct_cosine() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut enroll = BTreeMap::new();
    let mut test = BTreeMap::new();
    for s in ["a", "b", "c"] {
        let utts: Vec<Vec<f64>> = (0..3).map(|_| (0..5).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        enroll.insert(s.to_string(), utts);
        test.insert(format!("t-{s}"), (0..5).map(|_| rng.random_range(-1.0..1.0)).collect::<Vec<f64>>());
    }
    let trials: Vec<Trial> = enroll
        .keys()
        .flat_map(|e| {
            test.keys().map(move |t| Trial {
                enroll_id: e.clone(),
                test_id: t.clone(),
                label: if t.ends_with(e.as_str()) { TrialLabel::Target } else { TrialLabel::Nontarget },
            })
        })
        .collect();
    let scored = score_trials(&enroll, &test, &trials).unwrap();
    for s in &scored.trials {
        let utts = &enroll[&s.trial.enroll_id];
        let mean: Vec<f64> = (0..5).map(|j| utts.iter().map(|u| u[j]).sum::<f64>() / 3.0).collect();
        let x = &test[&s.trial.test_id];
        let dot: f64 = mean.iter().zip(x).map(|(a, b)| a * b).sum();
        let want = dot / (mean.iter().map(|v| v * v).sum::<f64>().sqrt() * x.iter().map(|v| v * v).sum::<f64>().sqrt());
        assert!((s.score - want).abs() < 1e-12);
    }
    let back = TrialScoreSet::from_tsv(&scored.to_tsv(), std::path::Path::new("mem")).unwrap();
    assert_eq!(back.trials.len(), scored.trials.len());
    assert_eq!(back.split().0.len(), 3);
}

fn two_speaker_examples(seed: u64) -> Vec<SvExample<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).unwrap();
    (0..40)
        .map(|i| {
            let spk = i % 2;
            let shift = if spk == 0 { -1.5 } else { 1.5 };
            let features = Matrix::from_fn(12, 120, |_, j| normal.sample(&mut rng) + if j < 40 { shift } else { 0.0 });
            SvExample { features, speaker: spk }
        })
        .collect()
}

#[test]
fn speaker_encoder_separates_two_speakers_deterministically() {
    let train = two_speaker_examples(1);
    let cfg = SvConfig { hidden: 16, embed_dim: 8, epochs: 15, batch_size: 8, ..Default::default() };
    let (enc, acc) = train_speaker_encoder(&train, vec!["a".into(), "b".into()], &cfg).unwrap();
    assert!(acc >= 0.99, "train accuracy {acc}");
    let held = two_speaker_examples(2);
    assert!(enc.accuracy(&held).unwrap() >= 0.99);
    let (again, _) = train_speaker_encoder(&train, vec!["a".into(), "b".into()], &cfg).unwrap();
    assert_eq!(enc.checksum(), again.checksum());
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("enc.json");
    ghostvec::metrics::save_encoder(&enc, &path).unwrap();
    let back: ghostvec::metrics::SpeakerEncoder<f64> = ghostvec::metrics::load_encoder(&path).unwrap();
    let a = enc.embed(&held[0].features).unwrap();
    let b = back.embed(&held[0].features).unwrap();
    assert!(a.iter().zip(&b).all(|(x, y)| (x - y).abs() < 1e-4));
}
