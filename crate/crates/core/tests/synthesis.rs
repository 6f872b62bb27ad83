use ghostvec::corpus::{compute_features, random_transcript, VoiceParams, VoiceRanges, N_MELS};
use ghostvec::synthesis::{embed_to_voice, MelSpectrogram, SynthConfig, SynthesisRequest, Synthesizer, VoiceMap};
use ghostvec::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

const DIM: usize = 8;

/// Embeddings on a sphere whose first three coordinates carry the normalized
/// log voice, fitted against the voices they encode.
fn fitted_map(rng: &mut ChaCha8Rng) -> VoiceMap {
    let ranges = VoiceRanges::default();
    let b = ranges.log_bounds();
    let n = 300;
    let mut rows = Vec::new();
    let mut voices = Vec::new();
    for _ in 0..n {
        let frac: [f64; 3] = [rng.random_range(0.1..0.9), rng.random_range(0.1..0.9), rng.random_range(0.1..0.9)];
        voices.push(VoiceParams::from_log([0, 1, 2].map(|k| b[k].0 + frac[k] * (b[k].1 - b[k].0))));
        let mut x = vec![0.0; DIM];
        for k in 0..3 {
            x[k] = frac[k] - 0.5;
        }
        for v in x.iter_mut().skip(3).take(DIM - 4) {
            *v = rng.random_range(-0.05..0.05);
        }
        rows.push(x);
    }
    let m = Matrix::from_fn(n, DIM, |i, j| rows[i][j]);
    VoiceMap::fit(&m, &voices, ranges, 1e-6).unwrap()
}

fn pearson(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    cov / (va * vb).sqrt()
}

fn top_principal_axes(x: &Matrix<f64>, k: usize) -> Vec<Vec<f64>> {
    let mean = x.col_mean();
    let c = Matrix::from_fn(x.rows(), x.cols(), |i, j| x[(i, j)] - mean[j]);
    let f = ghostvec::linalg::svd(&c).unwrap();
    (0..k).map(|i| f.v.col(i)).collect()
}

#[test]
fn synthesis_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let s = Synthesizer::new(fitted_map(&mut rng), SynthConfig::default()).unwrap();
    let req = SynthesisRequest { text: "the quick fox".into(), embedding: vec![0.1, -0.2, 0.05, 0.0, 0.0, 0.0, 0.0, 0.3] };
    let (m1, w1) = s.synthesize(&req).unwrap();
    let (m2, w2) = s.synthesize(&req).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(w1, w2);
    assert_eq!(m1.frames.shape(), (13 * 8, N_MELS));
    assert!(w1.iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn vocoded_audio_reproduces_its_mel() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let s = Synthesizer::new(fitted_map(&mut rng), SynthConfig::default()).unwrap();
    let normal = Normal::new(0.0, 0.3).unwrap();
    for u in 0..20 {
        let text = random_transcript((5, 20), &mut rng);
        let embedding: Vec<f64> = (0..DIM).map(|_| normal.sample(&mut rng)).collect();
        let (mel, wave) = s.synthesize(&SynthesisRequest { text, embedding }).unwrap();
        let feats: Matrix<f64> = compute_features(&wave, &SynthConfig::default().frame).unwrap();
        assert_eq!(feats.rows(), mel.frames.rows());
        let stat: Vec<f64> = (0..feats.rows()).flat_map(|t| feats.row(t)[..N_MELS].to_vec()).collect();
        let r = pearson(&stat, mel.frames.as_slice());
        assert!(r >= 0.8, "utterance {u}: r = {r}");
    }
}

#[test]
fn silent_mel_gives_silent_audio() {
    let s = Synthesizer::new(VoiceMap::neutral(DIM, VoiceRanges::default()), SynthConfig::default()).unwrap();
    let wave = s.vocode(&MelSpectrogram { frames: Matrix::zeros(12, N_MELS) }).unwrap();
    assert!(wave.iter().all(|&v| v == 0.0));
}

#[test]
fn pitch_moves_monotonically_along_the_principal_axis() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let map = fitted_map(&mut rng);
    let data = Matrix::from_fn(200, DIM, |_, j| if j < 3 { rng.random_range(-0.4..0.4) } else { rng.random_range(-0.05..0.05) });
    let axis = top_principal_axes(&data, 1).remove(0);
    let f0: Vec<f64> = (-20..=20)
        .map(|i| {
            let t = i as f64 * 0.1;
            embed_to_voice(&map, &axis.iter().map(|a| a * t).collect::<Vec<_>>()).unwrap().f0_hz
        })
        .collect();
    let up = f0.windows(2).all(|w| w[1] > w[0]);
    let down = f0.windows(2).all(|w| w[1] < w[0]);
    assert!(up || down, "{f0:?}");
}

#[test]
fn map_is_injective_on_the_leading_principal_coordinates() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let map = fitted_map(&mut rng);
    let data = Matrix::from_fn(200, DIM, |_, j| if j < 3 { rng.random_range(-0.4..0.4) } else { rng.random_range(-0.05..0.05) });
    let axes = top_principal_axes(&data, 3);
    // the 3x3 restriction of the weights to the leading axes must be invertible
    let w = Matrix::from_fn(3, 3, |k, a| map.weights[k].iter().zip(&axes[a]).map(|(x, y)| x * y).sum::<f64>());
    let s = ghostvec::linalg::svd(&w).unwrap().sigma;
    assert!(s[2] > 1e-3 * s[0], "{s:?}");

    let point = |c: [f64; 3]| -> Vec<f64> { (0..DIM).map(|j| (0..3).map(|a| c[a] * axes[a][j]).sum()).collect() };
    for _ in 0..200 {
        let a = [0, 1, 2].map(|_| rng.random_range(-0.5..0.5));
        let mut b = a;
        b[rng.random_range(0..3)] += rng.random_range(0.01..0.2);
        assert_ne!(embed_to_voice(&map, &point(a)).unwrap(), embed_to_voice(&map, &point(b)).unwrap());
    }
    assert_eq!(embed_to_voice(&map, &point([0.1, 0.2, 0.3])).unwrap(), embed_to_voice(&map, &point([0.1, 0.2, 0.3])).unwrap());
}

#[test]
fn pairwise_voice_distances_follow_embedding_cosine_distances() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let map = fitted_map(&mut rng);
    let ranges = VoiceRanges::default();
    let b = ranges.log_bounds();
    // six unit-norm speaker means spread over the voice coordinates
    let means: Vec<Vec<f64>> = (0..6)
        .map(|_| {
            let mut x: Vec<f64> = (0..3).map(|_| rng.random_range(-0.3..0.3)).collect();
            x.extend(std::iter::repeat_n(0.0, DIM - 4));
            let r2: f64 = x.iter().map(|v| v * v).sum();
            x.push((1.0 - r2).sqrt());
            x
        })
        .collect();
    let voice_dist = |i: usize, j: usize| {
        let (p, q) = (embed_to_voice(&map, &means[i]).unwrap().to_log(), embed_to_voice(&map, &means[j]).unwrap().to_log());
        (0..3).map(|k| ((p[k] - q[k]) / (b[k].1 - b[k].0)).powi(2)).sum::<f64>().sqrt()
    };
    let cos_dist = |i: usize, j: usize| 1.0 - means[i].iter().zip(&means[j]).map(|(x, y)| x * y).sum::<f64>();
    let pairs: Vec<(usize, usize)> = (0..6).flat_map(|i| (i + 1..6).map(move |j| (i, j))).collect();
    for &(i, j) in &pairs {
        assert!(voice_dist(i, j) > 0.0);
    }
    for &p in &pairs {
        for &q in &pairs {
            let (ce, cv) = (cos_dist(p.0, p.1) - cos_dist(q.0, q.1), voice_dist(p.0, p.1) - voice_dist(q.0, q.1));
            if ce.abs() > 1e-3 * cos_dist(p.0, p.1).max(cos_dist(q.0, q.1)) {
                assert_eq!(ce > 0.0, cv > 0.0, "{p:?} vs {q:?}");
            }
        }
    }
}
