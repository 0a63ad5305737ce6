use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use semsynth::losses::{d_adv_loss, g_adv_loss, kl_loss, path_length_penalty, perceptual_loss, r1_penalty};
use semsynth::model::extractor::FeatureExtractor;
use tch::{Kind, Tensor};

fn random_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        x.exp().ln_1p()
    }
}

fn t(v: &[f64]) -> Tensor {
    Tensor::from_slice(v)
}

#[test]
fn adversarial_losses_match_elementwise_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..20 {
        let real = random_vec(&mut rng, 17, 8.0);
        let fake = random_vec(&mut rng, 17, 8.0);
        let n = 17.0;
        let g = fake.iter().map(|&f| softplus(-f)).sum::<f64>() / n;
        let d = real.iter().map(|&r| softplus(-r)).sum::<f64>() / n + fake.iter().map(|&f| softplus(f)).sum::<f64>() / n;
        assert!((g_adv_loss(&t(&fake)).double_value(&[]) - g).abs() < 1e-12);
        assert!((d_adv_loss(&t(&real), &t(&fake)).double_value(&[]) - d).abs() < 1e-12);
    }
}

#[test]
fn kl_matches_closed_form() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (b, d) = (5, 7);
    let mu = random_vec(&mut rng, b * d, 2.0);
    let logvar = random_vec(&mut rng, b * d, 2.0);
    let mut want = 0.0;
    for i in 0..b {
        let mut s = 0.0;
        for j in 0..d {
            let (m, lv) = (mu[i * d + j], logvar[i * d + j]);
            s += 0.5 * (m * m + lv.exp() - 1.0 - lv);
        }
        want += s / b as f64;
    }
    let got = kl_loss(&t(&mu).reshape([b as i64, d as i64]), &t(&logvar).reshape([b as i64, d as i64])).unwrap();
    assert!((got.double_value(&[]) - want).abs() < 1e-12);
}

#[test]
fn r1_on_random_linear_discriminators() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..10 {
        let w = random_vec(&mut rng, 12, 3.0);
        let wt = t(&w).reshape([1, 3, 2, 2]);
        let x = t(&random_vec(&mut rng, 24, 1.0)).reshape([2, 3, 2, 2]);
        let p = r1_penalty(&x, |x| Ok((x * &wt).sum_dim_intlist([1i64, 2, 3].as_slice(), false, Kind::Double)), 10.0).unwrap();
        let norm2: f64 = w.iter().map(|v| v * v).sum();
        assert!((p.double_value(&[]) - 5.0 * norm2).abs() < 1e-9);
    }
}

#[test]
fn path_length_matches_finite_difference_jacobian() {
    // Two-pixel generator G(w) = tanh(A w) for a single style vector.
    let a = [[0.7, -1.2, 0.4], [0.3, 0.9, -0.5]];
    let w0 = [0.2, -0.4, 0.6];
    let y = [0.8, -0.3];
    let g = |w: &[f64; 3]| -> [f64; 2] { std::array::from_fn(|i| (0..3).map(|j| a[i][j] * w[j]).sum::<f64>().tanh()) };
    let h = 1e-6;
    let mut jty = [0.0; 3];
    for (j, v) in jty.iter_mut().enumerate() {
        let (mut p, mut m) = (w0, w0);
        p[j] += h;
        m[j] -= h;
        let (gp, gm) = (g(&p), g(&m));
        *v = (0..2).map(|i| y[i] * (gp[i] - gm[i]) / (2.0 * h)).sum();
    }
    let fd_norm = jty.iter().map(|v| v * v).sum::<f64>().sqrt();

    let w = t(&w0).reshape([1, 3]).set_requires_grad(true);
    let at = t(&a.concat()).reshape([2, 3]);
    let img = w.matmul(&at.tr()).tanh().reshape([1, 1, 1, 2]);
    let proj = t(&y).reshape([1, 1, 1, 2]);
    // decay 1 keeps the target at 0, so the penalty is weight * |J^T y|^2.
    let (p, target) = path_length_penalty(&w, &img, &proj, 0.0, 2.0, 1.0).unwrap();
    assert_eq!(target, 0.0);
    let norm = (p.double_value(&[]) / 2.0).sqrt();
    assert!((norm - fd_norm).abs() / fd_norm < 1e-3, "{norm} vs {fd_norm}");

    // With decay 0 the target jumps to the batch mean and the penalty vanishes.
    let (p, target) = path_length_penalty(&w, &img, &proj, 5.0, 2.0, 0.0).unwrap();
    assert!((target - fd_norm).abs() / fd_norm < 1e-3);
    assert!(p.double_value(&[]).abs() < 1e-12);
}

/// Layer 0 doubles the input, layer 1 squares it.
struct ToyExtractor;

impl FeatureExtractor for ToyExtractor {
    fn features(&self, x: &Tensor) -> Vec<Tensor> {
        vec![x * 2.0, x.square()]
    }

    fn num_layers(&self) -> usize {
        2
    }
}

#[test]
fn perceptual_matches_hand_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let a = random_vec(&mut rng, 2 * 3 * 4 * 4, 1.0);
    let b = random_vec(&mut rng, 2 * 3 * 4 * 4, 1.0);
    let n = a.len() as f64;
    let l0: f64 = a.iter().zip(&b).map(|(x, y)| (2.0 * x - 2.0 * y).abs()).sum::<f64>() / n;
    let l1: f64 = a.iter().zip(&b).map(|(x, y)| (x * x - y * y).abs()).sum::<f64>() / n;
    let got = perceptual_loss(&t(&a).reshape([2, 3, 4, 4]), &t(&b).reshape([2, 3, 4, 4]), &ToyExtractor).unwrap();
    assert!((got.double_value(&[]) - (l0 + l1)).abs() < 1e-12);
}
