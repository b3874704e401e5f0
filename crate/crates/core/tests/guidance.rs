use guided_deblur::denoiser::{gmm_eps, gmm_vjp, GmmComponent, GmmDenoiser, GmmPrior};
use guided_deblur::dgsa::{ConstantAdjuster, VarianceAdjuster};
use guided_deblur::gaussian::{convolve, GaussianKernel};
use guided_deblur::guidance::*;
use guided_deblur::image::ImageBuf;
use guided_deblur::schedule::DiffusionSchedule;
use guided_deblur::Error;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Img = ImageBuf<f64>;

fn random_prior(rng: &mut ChaCha8Rng, n: usize, k: usize) -> GmmPrior<f64> {
    let comps = (0..k)
        .map(|_| GmmComponent {
            weight: 1.0 / k as f64,
            mean: Img::standard_normal(n, n, 1, rng).scale(0.5),
            var: 0.05 + 0.1 * rng.random::<f64>(),
        })
        .collect();
    GmmPrior::new(comps).unwrap()
}

fn item(measurement: Img, std: f64, weight: f64, t_start: usize) -> GuidanceItem<f64> {
    GuidanceItem { measurement, std, weight, t_start }
}

fn loss(x_t: &Img, t: usize, y: &Img, std: f64, den: &GmmDenoiser<f64>, sched: &DiffusionSchedule<f64>) -> f64 {
    let lin = linearize(x_t, t, den, sched).unwrap();
    residual(&lin.x0, y, std).unwrap().sum_sq()
}

#[test]
fn fidelity_gradient_matches_finite_differences() {
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    for _ in 0..10 {
        let den = GmmDenoiser::new(random_prior(&mut rng, 8, 3), sched.clone());
        let t = rng.random_range(20..900);
        let std = 0.6 + 2.5 * rng.random::<f64>();
        let x_t = Img::standard_normal(8, 8, 1, &mut rng);
        let y = Img::standard_normal(8, 8, 1, &mut rng).scale(0.3);
        let gset = GuidanceSet::new(vec![item(y.clone(), std, 1.0, 999)]).unwrap();
        let state = SamplerState::new(x_t.clone(), t, vec![std], 0);
        let g = fidelity_gradient(&state, &gset, 0, &den, &sched).unwrap();
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for i in 0..64 {
            let mut p = x_t.clone();
            p.as_mut_slice()[i] += h;
            let mut m = x_t.clone();
            m.as_mut_slice()[i] -= h;
            let fd = (loss(&p, t, &y, std, &den, &sched) - loss(&m, t, &y, std, &den, &sched)) / (2.0 * h);
            worst = worst.max((fd - g.as_slice()[i]).abs());
        }
        let scale = g.as_slice().iter().fold(0.0f64, |a, v| a.max(v.abs()));
        assert!(worst / scale <= 1e-4, "relative error {}", worst / scale);
    }
}

#[test]
fn zero_residual_gives_zero_gradients() {
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let den = GmmDenoiser::new(random_prior(&mut rng, 8, 2), sched.clone());
    let x_t = Img::standard_normal(8, 8, 1, &mut rng);
    let lin = linearize(&x_t, 300, &den, &sched).unwrap();
    let y = convolve(&lin.x0, &GaussianKernel::new(1.5).unwrap());
    let gset = GuidanceSet::new(vec![item(y, 1.5, 1.0, 999)]).unwrap();
    let state = SamplerState::new(x_t, 300, vec![1.5], 0);
    let g = fidelity_gradient(&state, &gset, 0, &den, &sched).unwrap();
    assert!(g.as_slice().iter().all(|v| v.abs() < 1e-12));
    let s = std_gradient(&state, &gset, 0, &den, &sched).unwrap().unwrap();
    assert!(s.abs() < 1e-12);
}

#[test]
fn gradient_is_linear_in_residual() {
    // for a fixed linearization point the pulled-back gradient is linear in the x0-cotangent
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let den = GmmDenoiser::new(random_prior(&mut rng, 8, 3), sched.clone());
    let x_t = Img::standard_normal(8, 8, 1, &mut rng);
    let lin = linearize(&x_t, 500, &den, &sched).unwrap();
    let k = GaussianKernel::new(2.0).unwrap();
    let y = Img::standard_normal(8, 8, 1, &mut rng);
    // doubling the residual: ý' = k⊗x0 - 2 (k⊗x0 - ý)
    let kx = convolve(&lin.x0, &k);
    let y2 = kx.sub(&kx.sub(&y).unwrap().scale(2.0)).unwrap();
    let c1 = x0_cotangent(&lin.x0, &y, 2.0).unwrap();
    let c2 = x0_cotangent(&lin.x0, &y2, 2.0).unwrap();
    let g1 = pull_back(&x_t, 500, &c1, &den, &sched).unwrap();
    let g2 = pull_back(&x_t, 500, &c2, &den, &sched).unwrap();
    for (a, b) in g1.as_slice().iter().zip(g2.as_slice()) {
        assert!((2.0 * a - b).abs() < 1e-10 * b.abs().max(1.0));
    }
}

#[test]
fn std_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let x0 = Img::standard_normal(8, 8, 1, &mut rng);
        let y = Img::standard_normal(8, 8, 1, &mut rng).scale(0.5);
        // keep clear of the support jumps at multiples of 1/3
        let mut std = 0.4 + 3.0 * rng.random::<f64>();
        while ((3.0 * std) - (3.0 * std).round()).abs() < 0.01 {
            std += 0.02;
        }
        let g = std_gradient_at(&x0, &y, std).unwrap().unwrap();
        let h = 1e-4;
        let f = |s: f64| residual(&x0, &y, s).unwrap().sum_sq();
        let fd = (f(std + h) - f(std - h)) / (2.0 * h);
        assert!(((fd - g) / g.abs().max(1e-8)).abs() < 1e-5, "fd {fd} analytic {g} at {std}");
    }
}

#[test]
fn std_descent_moves_toward_true_blur() {
    let x = Img::from_fn(16, 16, 1, |y, x, _| (((x / 2) + (y / 3)) % 2) as f64 - 0.5);
    let y = convolve(&x, &GaussianKernel::new(3.0).unwrap());
    let g_low = std_gradient_at(&x, &y, 2.0).unwrap().unwrap();
    let g_high = std_gradient_at(&x, &y, 4.0).unwrap().unwrap();
    assert!(g_low < 0.0, "descent from 2.0 must increase std");
    assert!(g_high > 0.0, "descent from 4.0 must decrease std");
    assert!(std_gradient_at(&x, &y, 0.01).unwrap().is_none());
}

#[test]
fn staged_weights_and_activation() {
    let y = Img::zeros(4, 4, 1);
    let gset = GuidanceSet::new(vec![
        item(y.clone(), 3.0, 0.7, 720),
        item(y.clone(), 2.0, 0.2, 715),
        item(y.clone(), 1.0, 0.1, 700),
    ])
    .unwrap();
    let w = gset.active_weights(710);
    assert!((w[0] - 7.0 / 9.0).abs() < 1e-15 && (w[1] - 2.0 / 9.0).abs() < 1e-15 && w[2] == 0.0);
    assert_eq!(gset.active_weights(718), vec![1.0, 0.0, 0.0]);
    let all = gset.active_weights(10);
    assert!((all.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert_eq!(gset.global_start(), 720);
    assert!(GuidanceSet::new(vec![item(y.clone(), 3.0, 0.1, 1), item(y.clone(), 2.0, 0.2, 1)]).is_err());
    assert_eq!(guidance_stds(2.5, &[0.0, 1.0, 2.0], 0.1), vec![2.5, 1.5, 0.5]);
    assert_eq!(guidance_stds(1.0, &[0.0, 1.0, 2.0], 0.1), vec![1.0, 0.1, 0.1]);
}

#[test]
fn inactive_item_is_a_contract_violation() {
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let den = GmmDenoiser::new(random_prior(&mut rng, 4, 1), sched.clone());
    let y = Img::zeros(4, 4, 1);
    let gset = GuidanceSet::new(vec![item(y.clone(), 2.0, 0.7, 800), item(y, 1.0, 0.3, 600)]).unwrap();
    let state = SamplerState::new(Img::zeros(4, 4, 1), 700, vec![2.0, 1.0], 0);
    assert!(matches!(fidelity_gradient(&state, &gset, 1, &den, &sched), Err(Error::Contract(_))));
    assert!(fidelity_gradient(&state, &gset, 0, &den, &sched).is_ok());
}

#[test]
fn zero_scale_reproduces_unguided_chain_bit_exactly() {
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(77);
    let den = GmmDenoiser::new(random_prior(&mut rng, 8, 3), sched.clone());
    let y = Img::standard_normal(8, 8, 1, &mut rng);
    let gset = GuidanceSet::new(vec![item(y.clone(), 2.0, 0.7, 400), item(y.clone(), 1.0, 0.3, 300)]).unwrap();
    let mut a = SamplerState::diffused(&y, 400, vec![2.0, 1.0], 11, &sched).unwrap();
    let mut b = a.clone();
    let off = ConstantAdjuster::new(0.0).unwrap();
    run_guided(&mut a, &gset, &off, &den, &sched, &GuidanceOptions::default()).unwrap();
    run_unguided(&mut b, &den, &sched).unwrap();
    assert_eq!(a.x_t, b.x_t);
    assert_eq!(a.t, 0);
}

/// Dense-matrix transcription of one guided step with a single item and A ≡ 1.
fn literal_step(
    x_t: &Img,
    t: usize,
    std: f64,
    y: &Img,
    noise: &Img,
    prior: &GmmPrior<f64>,
    sched: &DiffusionSchedule<f64>,
) -> (Img, f64) {
    let n = x_t.len();
    let (h, w, c) = x_t.shape();
    // K column by column from impulse responses
    let k = GaussianKernel::new(std).unwrap();
    let mut kmat = vec![vec![0.0; n]; n];
    for j in 0..n {
        let mut e = Img::zeros(h, w, c);
        e.as_mut_slice()[j] = 1.0;
        let col = convolve(&e, &k);
        for i in 0..n {
            kmat[i][j] = col.as_slice()[i];
        }
    }
    let ab = sched.alpha_bar(t);
    let eps = gmm_eps(prior, x_t, t, sched).unwrap();
    let x0: Vec<f64> = (0..n).map(|i| (x_t.as_slice()[i] - (1.0 - ab).sqrt() * eps.as_slice()[i]) / ab.sqrt()).collect();
    let (alpha, beta) = (sched.alpha(t), sched.beta(t));
    let sigma = if t == 1 { 0.0 } else { beta.sqrt() };
    let xp: Vec<f64> = (0..n)
        .map(|i| (x_t.as_slice()[i] - beta / (1.0 - ab).sqrt() * eps.as_slice()[i]) / alpha.sqrt() + sigma * noise.as_slice()[i])
        .collect();
    let r: Vec<f64> = (0..n).map(|i| (0..n).map(|j| kmat[i][j] * x0[j]).sum::<f64>() - y.as_slice()[i]).collect();
    let cot: Vec<f64> = (0..n).map(|j| 2.0 * (0..n).map(|i| kmat[i][j] * r[i]).sum::<f64>()).collect();
    let cot_img = Img::new(h, w, c, cot.clone()).unwrap();
    let vjp = gmm_vjp(prior, x_t, t, &cot_img, sched).unwrap();
    let next: Vec<f64> = (0..n)
        .map(|i| xp[i] - (cot[i] - (1.0 - ab).sqrt() * vjp.as_slice()[i]) / ab.sqrt())
        .collect();
    // d/dstd by central differences of the tap profile on the fixed support
    let hstep = 1e-6;
    let kp = GaussianKernel::with_radius(std + hstep, k.radius());
    let km = GaussianKernel::with_radius(std - hstep, k.radius());
    let x0_img = Img::new(h, w, c, x0).unwrap();
    let lp = convolve(&x0_img, &kp).sub(y).unwrap().sum_sq();
    let lm = convolve(&x0_img, &km).sub(y).unwrap().sum_sq();
    let new_std = std - ab.sqrt() * (lp - lm) / (2.0 * hstep);
    (Img::new(h, w, c, next).unwrap(), new_std.clamp(0.05, 15.0))
}

#[test]
fn single_item_step_matches_literal_transcription() {
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let prior = random_prior(&mut rng, 6, 3);
    let den = GmmDenoiser::new(prior.clone(), sched.clone());
    let y = Img::standard_normal(6, 6, 1, &mut rng).scale(0.4);
    let std0 = 1.9;
    let gset = GuidanceSet::new(vec![item(y.clone(), std0, 1.0, 999)]).unwrap();
    let mut state = SamplerState::diffused(&y, 40, vec![std0], 5, &sched).unwrap();
    let ones = ConstantAdjuster::new(1.0).unwrap();
    let mut noise_rng = ChaCha8Rng::seed_from_u64(5);
    let _init: Img = Img::standard_normal(6, 6, 1, &mut noise_rng);
    let literal = GuidanceOptions { std_rate: 1.0, ..GuidanceOptions::default() };
    for _ in 0..5 {
        let (x_t, t, std) = (state.x_t.clone(), state.t, state.stds[0]);
        let noise = Img::standard_normal(6, 6, 1, &mut noise_rng);
        guided_step(&mut state, &gset, &ones, &den, &sched, &literal).unwrap();
        let (expected, expected_std) = literal_step(&x_t, t, std, &y, &noise, &prior, &sched);
        for (a, b) in state.x_t.as_slice().iter().zip(expected.as_slice()) {
            assert!((a - b).abs() < 1e-8 * b.abs().max(1.0), "{a} vs {b}");
        }
        assert!((state.stds[0] - expected_std).abs() < 1e-5 * expected_std);
    }
}

#[test]
fn adjuster_output_feeds_the_step() {
    let sched = DiffusionSchedule::standard();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let den = GmmDenoiser::new(random_prior(&mut rng, 8, 2), sched.clone());
    let y = Img::standard_normal(8, 8, 1, &mut rng);
    let gset = GuidanceSet::new(vec![item(y.clone(), 1.0, 1.0, 50)]).unwrap();
    let mut state = SamplerState::diffused(&y, 50, vec![1.0], 1, &sched).unwrap();
    let adj = VarianceAdjuster::new(3, 0.05).unwrap();
    let report = guided_step(&mut state, &gset, &adj, &den, &sched, &GuidanceOptions::default()).unwrap();
    assert!(report.mean_scale > 0.0 && report.mean_scale < 1.0);
    assert_eq!(state.t, 49);
}
