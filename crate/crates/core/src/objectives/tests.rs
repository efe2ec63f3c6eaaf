use super::*;
use crate::gradcheck::{check_gradients, GradCheck, ScalarFn};
use crate::rng::Rng;
use crate::tensor::Shape;

/// Per-window SSIM terms computed with an explicit 2-D Gaussian window.
fn naive_terms(x: &[f64], y: &[f64], h: usize, w: usize, cfg: &SsimConfig) -> (Vec<f64>, Vec<f64>) {
    let g = cfg.taps();
    let k = cfg.window;
    let (c1, c2) = (cfg.c1(), cfg.c2());
    let mut lum = Vec::new();
    let mut cs = Vec::new();
    for i in 0..=h - k {
        for j in 0..=w - k {
            let (mut mx, mut my, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
            for a in 0..k {
                for b in 0..k {
                    let wt = g[a] * g[b];
                    let (u, v) = (x[(i + a) * w + j + b], y[(i + a) * w + j + b]);
                    mx += wt * u;
                    my += wt * v;
                    sxx += wt * u * u;
                    syy += wt * v * v;
                    sxy += wt * u * v;
                }
            }
            let (vx, vy, cov) = (sxx - mx * mx, syy - my * my, sxy - mx * my);
            lum.push((2.0 * mx * my + c1) / (mx * mx + my * my + c1));
            cs.push((2.0 * cov + c2) / (vx + vy + c2));
        }
    }
    (lum, cs)
}

fn naive_ssim(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let s = x.shape();
    let cfg = SsimConfig::default();
    let mut all = Vec::new();
    for (px, py) in x.data().chunks(s.plane()).zip(y.data().chunks(s.plane())) {
        let (l, c) = naive_terms(px, py, s.h, s.w, &cfg);
        all.extend(l.iter().zip(&c).map(|(a, b)| a * b));
    }
    all.iter().sum::<f64>() / all.len() as f64
}

fn naive_pool(p: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h / 2, w / 2);
    let mut out = vec![0.0; oh * ow];
    for i in 0..oh {
        for j in 0..ow {
            out[i * ow + j] =
                (p[2 * i * w + 2 * j] + p[2 * i * w + 2 * j + 1] + p[(2 * i + 1) * w + 2 * j] + p[(2 * i + 1) * w + 2 * j + 1]) / 4.0;
        }
    }
    (out, oh, ow)
}

fn naive_ms_ssim(x: &Tensor<f64>, y: &Tensor<f64>, scales: usize) -> f64 {
    let cfg = MsSsimConfig::default();
    let weights: Vec<f64> = if scales == 5 {
        MS_SSIM_WEIGHTS.to_vec()
    } else {
        let total: f64 = MS_SSIM_WEIGHTS[..scales].iter().sum();
        MS_SSIM_WEIGHTS[..scales].iter().map(|w| w / total).collect()
    };
    let s = x.shape();
    let mut total = 0.0;
    for (px, py) in x.data().chunks(s.plane()).zip(y.data().chunks(s.plane())) {
        let (mut px, mut py, mut h, mut w) = (px.to_vec(), py.to_vec(), s.h, s.w);
        let mut prod = 1.0;
        for (j, &wt) in weights.iter().enumerate() {
            let (l, c) = naive_terms(&px, &py, h, w, &cfg.ssim);
            let n = l.len() as f64;
            let term = if j + 1 == scales {
                l.iter().zip(&c).map(|(a, b)| a * b).sum::<f64>() / n
            } else {
                c.iter().sum::<f64>() / n
            };
            prod *= term.max(0.0).powf(wt);
            let (nx, nh, nw) = naive_pool(&px, h, w);
            px = nx;
            py = naive_pool(&py, h, w).0;
            h = nh;
            w = nw;
        }
        total += prod;
    }
    total / (s.n * s.c) as f64
}

fn ssim_of(x: &Tensor<f64>, y: &Tensor<f64>) -> f64 {
    let tape = Tape::no_grad();
    ssim(&tape.constant(x.clone()), &tape.constant(y.clone()), &SsimConfig::default())
        .unwrap()
        .value()
        .item()
        .unwrap()
}

fn ms_ssim_of<T: Real>(x: &Tensor<T>, y: &Tensor<T>, cfg: &MsSsimConfig) -> Result<f64> {
    let tape = Tape::no_grad();
    let v = ms_ssim(&tape.constant(x.clone()), &tape.constant(y.clone()), cfg)?;
    Ok(v.value().item()?.as_f64())
}

fn checkerboard(shape: Shape, cell: usize) -> Tensor<f64> {
    Tensor::from_fn(shape, |_, c, h, w| if ((h / cell) + (w / cell) + c).is_multiple_of(2) { 0.9 } else { 0.1 })
}

fn noisy(shape: Shape, seed: u64) -> Tensor<f64> {
    Rng::new(seed).uniform_tensor(shape, 0.0, 1.0)
}

#[test]
fn gaussian_taps_are_normalised_and_symmetric() {
    let t = SsimConfig::default().taps();
    assert_eq!(t.len(), 11);
    assert!((t.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    for i in 0..11 {
        assert!((t[i] - t[10 - i]).abs() < 1e-17);
    }
    assert!(t[5] > t[4]);
}

#[test]
fn ssim_of_identical_images_is_one() {
    let x = noisy(Shape::new(2, 3, 24, 20), 1);
    assert!((ssim_of(&x, &x) - 1.0).abs() < 1e-12);
    let xf: Tensor<f32> = x.cast();
    let tape = Tape::no_grad();
    let v = ssim(&tape.constant(xf.clone()), &tape.constant(xf), &SsimConfig::default()).unwrap();
    assert!((v.value().item().unwrap() - 1.0).abs() < 1e-6);
}

#[test]
fn ssim_of_constants_has_closed_form() {
    let s = Shape::new(1, 1, 16, 16);
    let (a, b) = (0.3, 0.7);
    let c1 = SsimConfig::default().c1();
    let expected = (2.0 * a * b + c1) / (a * a + b * b + c1);
    let got = ssim_of(&Tensor::full(s, a), &Tensor::full(s, b));
    assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
}

#[test]
fn ssim_matches_windowed_oracle() {
    let s = Shape::new(2, 3, 23, 19);
    let x = checkerboard(s, 3);
    let y = noisy(s, 7);
    let got = ssim_of(&x, &y);
    let want = naive_ssim(&x, &y);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    let z = y.map(|v| 0.8 * v + 0.05);
    assert!((ssim_of(&y, &z) - naive_ssim(&y, &z)).abs() < 1e-10);
}

#[test]
fn ssim_is_symmetric() {
    let s = Shape::new(1, 3, 20, 20);
    let (x, y) = (noisy(s, 2), noisy(s, 3));
    assert!((ssim_of(&x, &y) - ssim_of(&y, &x)).abs() < 1e-14);
}

#[test]
fn ssim_rejects_small_or_mismatched_inputs() {
    let tape = Tape::<f64>::no_grad();
    let a = tape.constant(Tensor::zeros(Shape::new(1, 1, 10, 30)));
    let err = ssim(&a, &a, &SsimConfig::default()).unwrap_err();
    assert_eq!(err.kind(), "TooSmall");
    let b = tape.constant(Tensor::zeros(Shape::new(1, 1, 11, 29)));
    assert_eq!(ssim(&a, &b, &SsimConfig::default()).unwrap_err().kind(), "ShapeMismatch");
}

#[test]
fn feasible_scale_count() {
    let cfg = MsSsimConfig::default();
    assert_eq!(cfg.feasible_scales(192, 192), 5);
    assert_eq!(cfg.feasible_scales(176, 300), 5);
    assert_eq!(cfg.feasible_scales(175, 300), 4);
    assert_eq!(cfg.feasible_scales(64, 64), 3);
    assert_eq!(cfg.feasible_scales(10, 64), 0);
    let w = cfg.normalized_weights(3);
    assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    assert!((w[0] - 0.0448 / (0.0448 + 0.2856 + 0.3001)).abs() < 1e-15);
    assert_eq!(cfg.normalized_weights(5), MS_SSIM_WEIGHTS.to_vec());
}

#[test]
fn ms_ssim_matches_oracle_at_five_scales() {
    let s = Shape::new(1, 2, 192, 192);
    let x = noisy(s, 11).map(|v| 0.5 * v + 0.25);
    let y = x.zip_map(&checkerboard(s, 8), |a, b| 0.7 * a + 0.3 * b).unwrap();
    let got = ms_ssim_of(&x, &y, &MsSsimConfig::default()).unwrap();
    let want = naive_ms_ssim(&x, &y, 5);
    assert!((got - want).abs() < 1e-10, "{got} vs {want}");
    let got32 = ms_ssim_of(&x.cast::<f32>(), &y.cast::<f32>(), &MsSsimConfig::default()).unwrap();
    assert!((got32 - want).abs() < 1e-5, "{got32} vs {want}");
}

#[test]
fn ms_ssim_auto_reduces_small_inputs() {
    let s = Shape::new(2, 3, 64, 48);
    let (x, y) = (noisy(s, 4), noisy(s, 5).map(|v| 0.5 * v));
    let got = ms_ssim_of(&x, &y, &MsSsimConfig::default()).unwrap();
    let want = naive_ms_ssim(&x, &y, 3);
    assert!((got - want).abs() < 1e-10);
    let strict = MsSsimConfig {
        auto_reduce: false,
        ..MsSsimConfig::default()
    };
    assert_eq!(ms_ssim_of(&x, &y, &strict).unwrap_err().kind(), "TooSmall");
    let tiny = Tensor::<f64>::zeros(Shape::new(1, 1, 8, 8));
    assert_eq!(ms_ssim_of(&tiny, &tiny, &MsSsimConfig::default()).unwrap_err().kind(), "TooSmall");
}

#[test]
fn ms_ssim_single_scale_is_ssim() {
    let s = Shape::new(1, 3, 32, 32);
    let x = noisy(s, 8);
    let y = x.map(|v| 0.9 * v + 0.05);
    let got = ms_ssim_of(&x, &y, &MsSsimConfig::with_scales(1)).unwrap();
    assert!((got - ssim_of(&x, &y)).abs() < 1e-12);
}

#[test]
fn ms_ssim_of_identical_images_is_one() {
    let x: Tensor<f32> = noisy(Shape::new(1, 3, 192, 192), 9).cast();
    let v = ms_ssim_of(&x, &x, &MsSsimConfig::default()).unwrap();
    assert!((v - 1.0).abs() < 1e-6, "{v}");
}

#[test]
fn ms_ssim_invariant_to_batch_permutation() {
    let s = Shape::new(1, 3, 48, 48);
    let (a, b, c, d) = (noisy(s, 1), noisy(s, 2), noisy(s, 3), noisy(s, 4));
    let x1 = Tensor::stack_batch(&[a.clone(), c.clone()]).unwrap();
    let y1 = Tensor::stack_batch(&[b.clone(), d.clone()]).unwrap();
    let x2 = Tensor::stack_batch(&[c, a]).unwrap();
    let y2 = Tensor::stack_batch(&[d, b]).unwrap();
    let cfg = MsSsimConfig::default();
    let (p, q) = (ms_ssim_of(&x1, &y1, &cfg).unwrap(), ms_ssim_of(&x2, &y2, &cfg).unwrap());
    assert!((p - q).abs() < 1e-14);
}

#[test]
fn ssim_consistent_under_translation() {
    // Scores over matching crops of a shared shifted scene agree with the
    // oracle and with each other when the content is periodic.
    let big = Shape::new(1, 1, 40, 40);
    let x = checkerboard(big, 4);
    let y = noisy(big, 12).map(|v| 0.2 * v).zip_map(&x, |n, c| n + 0.8 * c).unwrap();
    let a = ssim_of(&x.crop(0, 0, 24, 24).unwrap(), &x.crop(0, 0, 24, 24).unwrap().map(|v| 0.5 * v));
    let b = ssim_of(&x.crop(8, 8, 24, 24).unwrap(), &x.crop(8, 8, 24, 24).unwrap().map(|v| 0.5 * v));
    assert!((a - b).abs() < 1e-12);
    let (cx, cy) = (x.crop(5, 3, 24, 24).unwrap(), y.crop(5, 3, 24, 24).unwrap());
    assert!((ssim_of(&cx, &cy) - naive_ssim(&cx, &cy)).abs() < 1e-10);
}

#[test]
fn l1_and_stage_losses() {
    let tape = Tape::<f64>::no_grad();
    let s = Shape::new(1, 3, 16, 16);
    let x = tape.constant(noisy(s, 1));
    let y = tape.constant(noisy(s, 2));
    let l1 = l1_loss(&x, &y).unwrap().value().item().unwrap();
    let want = x.value().data().iter().zip(y.value().data()).map(|(a, b)| (a - b).abs()).sum::<f64>() / s.numel() as f64;
    assert!((l1 - want).abs() < 1e-14);

    let s0 = stage1_loss(&x, &y, 0.0).unwrap().value().item().unwrap();
    assert_eq!(s0, l1);
    let s1 = stage1_loss(&x, &y, 0.1).unwrap().value().item().unwrap();
    assert!((s1 - (l1 + 0.1 * (1.0 - ssim_of(x.value(), y.value())))).abs() < 1e-14);
    assert_eq!(stage1_loss(&x, &y, -1.0).unwrap_err().kind(), "Config");

    let z = tape.constant(Tensor::zeros(Shape::new(1, 3, 16, 15)));
    assert_eq!(l1_loss(&x, &z).unwrap_err().kind(), "ShapeMismatch");

    let ms = ms_ssim_of(x.value(), y.value(), &MsSsimConfig::default()).unwrap();
    let a = stage2_loss(&x, &y, Stage2Variant::MsSsimOnly).unwrap().value().item().unwrap();
    assert!((a - (1.0 - ms)).abs() < 1e-14);
    let b = stage2_loss(&x, &y, Stage2Variant::L1PlusMsSsim).unwrap().value().item().unwrap();
    assert!((b - (l1 + 0.1 * (1.0 - ms))).abs() < 1e-14);
}

#[test]
fn psnr_values() {
    let s = Shape::new(1, 3, 4, 4);
    let a = Tensor::<f64>::full(s, 0.5);
    assert_eq!(psnr(&a, &a, 1.0).unwrap(), PSNR_CAP);
    let b = Tensor::full(s, 0.6);
    assert!((psnr(&a, &b, 1.0).unwrap() - 20.0).abs() < 1e-9);
    assert!((psnr(&a, &b, 255.0).unwrap() - (20.0 + 20.0 * 255f64.log10())).abs() < 1e-9);
    assert_eq!(psnr(&a, &b, 0.0).unwrap_err().kind(), "Config");
}

struct SsimProbe;

impl ScalarFn for SsimProbe {
    fn eval<'t, T: Real>(&self, _tape: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        ssim(&v[0], &v[1], &SsimConfig::default())
    }
}

struct MsSsimProbe;

impl ScalarFn for MsSsimProbe {
    fn eval<'t, T: Real>(&self, _tape: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        ms_ssim(&v[0], &v[1], &MsSsimConfig::default())
    }
}

struct Stage1Probe;

impl ScalarFn for Stage1Probe {
    fn eval<'t, T: Real>(&self, _tape: &'t Tape<T>, v: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        stage1_loss(&v[0], &v[1], 0.1)
    }
}

fn gradcheck_cfg() -> GradCheck {
    GradCheck {
        max_entries: 40,
        seed: 3,
        ..GradCheck::default()
    }
}

#[test]
fn ssim_gradients_match_finite_differences() {
    let s = Shape::new(1, 2, 32, 32);
    let x = noisy(s, 21);
    let y = x.zip_map(&noisy(s, 22), |a, b| 0.6 * a + 0.4 * b).unwrap();
    let r = check_gradients(&SsimProbe, &[x, y], &gradcheck_cfg()).unwrap();
    assert!(r.rel_error < 1e-3, "{r:?}");
}

#[test]
fn ms_ssim_gradients_match_finite_differences() {
    let s = Shape::new(1, 2, 48, 48);
    let x = noisy(s, 23);
    let y = x.zip_map(&noisy(s, 24), |a, b| 0.7 * a + 0.3 * b).unwrap();
    let r = check_gradients(&MsSsimProbe, &[x, y], &gradcheck_cfg()).unwrap();
    assert!(r.rel_error < 1e-3, "{r:?}");
}

#[test]
fn stage1_gradients_match_finite_differences() {
    let s = Shape::new(1, 3, 32, 32);
    let x = noisy(s, 25);
    // Keep |x - y| away from the L1 kink relative to the probe step.
    let y = x.zip_map(&noisy(s, 26), |a, b| if b > 0.5 { a + 0.05 + 0.1 * b } else { a - 0.05 - 0.1 * b }).unwrap();
    let r = check_gradients(&Stage1Probe, &[x, y], &gradcheck_cfg()).unwrap();
    assert!(r.rel_error < 1e-3, "{r:?}");
}
