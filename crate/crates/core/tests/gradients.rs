//! Finite-difference checks of every analytic derivative.

use aepoison::detector::{self, DetectorConfig, ResidualMode};
use aepoison::nn::{Activation, ModelConfig, ModelParams};
use aepoison::timeseries::{SeriesMatrix, WindowConfig};
use ndarray::Array2;
use proptest::prelude::*;

const H: f64 = 1e-5;

fn model(n: usize, code: usize, inflation: usize, act: Activation, seed: u64) -> ModelConfig {
    ModelConfig {
        input_size: n,
        code_size: code,
        inflation_factor: inflation,
        activation: act,
        init_seed: seed,
        init_scale: 0.8,
        ..ModelConfig::autoencoder(n)
    }
}

fn batch_from(vals: &[f64], rows: usize, n: usize) -> Array2<f64> {
    Array2::from_shape_vec((rows, n), vals[..rows * n].to_vec()).unwrap()
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt().max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-12 {
        num
    } else {
        num / den
    }
}

fn fd_grad_w(p: &ModelParams, batch: &Array2<f64>) -> Vec<f64> {
    let w = p.flat().to_vec();
    (0..w.len())
        .map(|i| {
            let mut up = w.clone();
            let mut dn = w.clone();
            up[i] += H;
            dn[i] -= H;
            let lu = p.with_flat(up).unwrap().loss(batch.view()).unwrap();
            let ld = p.with_flat(dn).unwrap().loss(batch.view()).unwrap();
            (lu - ld) / (2.0 * H)
        })
        .collect()
}

fn fd_grad_x(p: &ModelParams, batch: &Array2<f64>) -> Vec<f64> {
    let mut out = Vec::with_capacity(batch.len());
    for idx in 0..batch.len() {
        let (r, c) = (idx / batch.ncols(), idx % batch.ncols());
        let mut up = batch.clone();
        let mut dn = batch.clone();
        up[[r, c]] += H;
        dn[[r, c]] -= H;
        out.push((p.loss(up.view()).unwrap() - p.loss(dn.view()).unwrap()) / (2.0 * H));
    }
    out
}

fn shifted(p: &ModelParams, v: &[f64], eps: f64) -> ModelParams {
    p.with_flat(p.flat().iter().zip(v).map(|(w, d)| w + eps * d).collect()).unwrap()
}

fn act_strategy() -> impl Strategy<Value = Activation> {
    prop_oneof![Just(Activation::Tanh), Just(Activation::Sigmoid)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn weight_gradient_matches_central_differences(
        seed in 0u64..1000,
        act in act_strategy(),
        rows in 1usize..4,
        vals in prop::collection::vec(-1.2f64..1.2, 12),
    ) {
        let p = ModelParams::init(&model(4, 2, 2, act, seed)).unwrap();
        let b = batch_from(&vals, rows, 4);
        let err = rel_err(&p.grad_w(b.view()).unwrap(), &fd_grad_w(&p, &b));
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn input_gradient_matches_central_differences(
        seed in 0u64..1000,
        act in act_strategy(),
        rows in 1usize..4,
        vals in prop::collection::vec(-1.2f64..1.2, 12),
    ) {
        let p = ModelParams::init(&model(4, 2, 2, act, seed)).unwrap();
        let b = batch_from(&vals, rows, 4);
        let gx = p.grad_x(b.view()).unwrap();
        let err = rel_err(gx.as_slice().unwrap(), &fd_grad_x(&p, &b));
        prop_assert!(err < 1e-5, "relative error {err}");
    }

    #[test]
    fn hessian_vector_products_match_gradient_differences(
        seed in 0u64..1000,
        act in act_strategy(),
        rows in 1usize..4,
        vals in prop::collection::vec(-1.2f64..1.2, 12),
        dir_seed in 0u64..1000,
    ) {
        let cfg = model(4, 2, 2, act, seed);
        let p = ModelParams::init(&cfg).unwrap();
        let v = ModelParams::init(&ModelConfig { init_seed: dir_seed, init_scale: 1.0, ..cfg }).unwrap().flat().to_vec();
        let b = batch_from(&vals, rows, 4);
        let (pu, pd) = (shifted(&p, &v, H), shifted(&p, &v, -H));

        let gw_u = pu.grad_w(b.view()).unwrap();
        let gw_d = pd.grad_w(b.view()).unwrap();
        let fd_ww: Vec<f64> = gw_u.iter().zip(&gw_d).map(|(a, c)| (a - c) / (2.0 * H)).collect();
        let ww = p.hvp_ww(b.view(), &v).unwrap();
        let e1 = rel_err(&ww, &fd_ww);
        prop_assert!(e1 < 1e-4, "ww relative error {e1}");

        let gx_u = pu.grad_x(b.view()).unwrap();
        let gx_d = pd.grad_x(b.view()).unwrap();
        let fd_xw: Vec<f64> = gx_u.iter().zip(gx_d.iter()).map(|(a, c)| (a - c) / (2.0 * H)).collect();
        let xw = p.hvp_xw(b.view(), &v).unwrap();
        let e2 = rel_err(xw.as_slice().unwrap(), &fd_xw);
        prop_assert!(e2 < 1e-4, "xw relative error {e2}");
    }
}

#[test]
fn combined_hvp_pass_agrees_with_separate_calls() {
    let p = ModelParams::init(&model(4, 2, 2, Activation::Tanh, 3)).unwrap();
    let b = batch_from(&[0.1, -0.5, 0.9, 0.3, -1.0, 0.2, 0.0, 0.7], 2, 4);
    let v: Vec<f64> = (0..p.len()).map(|i| ((i * 7) % 11) as f64 / 11.0 - 0.5).collect();
    let h = p.hvp(b.view(), &v).unwrap();
    assert_eq!(h.ww, p.hvp_ww(b.view(), &v).unwrap());
    assert_eq!(h.xw, p.hvp_xw(b.view(), &v).unwrap());
    assert_eq!(h.grad_w, p.grad_w(b.view()).unwrap());
    assert_eq!(h.loss, p.loss(b.view()).unwrap());
}

/// Dense Hessian of a tiny net by nested differences, checked column by
/// column against HVPs with unit vectors.
#[test]
fn dense_hessian_by_nested_differences() {
    let cfg = model(2, 1, 1, Activation::Tanh, 11);
    let p = ModelParams::init(&cfg).unwrap();
    assert!(p.len() <= 30);
    let b = batch_from(&[0.4, -0.7, 0.9, 0.1], 2, 2);
    let m = p.len();
    let h = 1e-4;
    let loss_at = |w: &[f64]| p.with_flat(w.to_vec()).unwrap().loss(b.view()).unwrap();
    let w0 = p.flat().to_vec();
    let mut max_err: f64 = 0.0;
    let mut scale: f64 = 0.0;
    for j in 0..m {
        let mut e = vec![0.0; m];
        e[j] = 1.0;
        let col = p.hvp_ww(b.view(), &e).unwrap();
        for i in 0..m {
            let at = |di: f64, dj: f64| {
                let mut w = w0.clone();
                w[i] += di;
                w[j] += dj;
                loss_at(&w)
            };
            let fd = (at(h, h) - at(h, -h) - at(-h, h) + at(-h, -h)) / (4.0 * h * h);
            max_err = max_err.max((fd - col[i]).abs());
            scale = scale.max(col[i].abs());
        }
    }
    assert!(max_err / scale.max(1.0) < 1e-5, "max error {max_err}, scale {scale}");
}

/// Symmetry of the weight Hessian: u . H v == v . H u.
#[test]
fn weight_hessian_is_symmetric() {
    let cfg = model(6, 2, 2, Activation::Tanh, 5);
    let p = ModelParams::init(&cfg).unwrap();
    let b = batch_from(&(0..18).map(|i| (i as f64 * 0.37).sin()).collect::<Vec<_>>(), 3, 6);
    let u: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.13).cos()).collect();
    let v: Vec<f64> = (0..p.len()).map(|i| (i as f64 * 0.71).sin()).collect();
    let uhv: f64 = u.iter().zip(p.hvp_ww(b.view(), &v).unwrap()).map(|(a, c)| a * c).sum();
    let vhu: f64 = v.iter().zip(p.hvp_ww(b.view(), &u).unwrap()).map(|(a, c)| a * c).sum();
    assert!((uhv - vhu).abs() < 1e-10 * uhv.abs().max(1.0));
}

fn series_cfg(stride: usize, mode: ResidualMode) -> DetectorConfig {
    DetectorConfig {
        model: model(3, 1, 2, Activation::Tanh, 21),
        window: WindowConfig::new(3, stride).unwrap(),
        threshold: 0.2,
        residual_mode: mode,
    }
}

fn wave(t: usize) -> SeriesMatrix {
    SeriesMatrix::from_column(&(0..t).map(|i| (i as f64 * 0.7).sin() * 0.9).collect::<Vec<_>>()).unwrap()
}

#[test]
fn series_gradient_matches_central_differences() {
    for stride in [1, 2, 4] {
        let cfg = series_cfg(stride, ResidualMode::PerPointAbs);
        let p = ModelParams::init(&cfg.model).unwrap();
        let s = wave(10);
        let g = detector::series_objective_grads(&p, &s, &cfg).unwrap();
        let mut fd = Vec::new();
        for t in 0..10 {
            let mut up = s.values().to_owned();
            let mut dn = up.clone();
            up[[t, 0]] += H;
            dn[[t, 0]] -= H;
            let ju = detector::series_objective(&p, &s.with_values(up).unwrap(), &cfg).unwrap();
            let jd = detector::series_objective(&p, &s.with_values(dn).unwrap(), &cfg).unwrap();
            fd.push((ju - jd) / (2.0 * H));
        }
        let err = rel_err(g.grad_series.as_slice().unwrap(), &fd);
        assert!(err < 1e-6, "stride {stride}: relative error {err}");

        let w = p.flat().to_vec();
        let fd_w: Vec<f64> = (0..w.len())
            .map(|i| {
                let mut up = w.clone();
                let mut dn = w.clone();
                up[i] += H;
                dn[i] -= H;
                let ju = detector::series_objective(&p.with_flat(up).unwrap(), &s, &cfg).unwrap();
                let jd = detector::series_objective(&p.with_flat(dn).unwrap(), &s, &cfg).unwrap();
                (ju - jd) / (2.0 * H)
            })
            .collect();
        let err = rel_err(&g.grad_w, &fd_w);
        assert!(err < 1e-6, "stride {stride}: weight relative error {err}");
    }
}

#[test]
fn series_gradient_is_sum_of_window_contributions() {
    let cfg = series_cfg(1, ResidualMode::PerPointAbs);
    let p = ModelParams::init(&cfg.model).unwrap();
    let s = wave(10);
    let full = detector::series_objective_grad(&p, &s, &cfg).unwrap();
    let (direct, parts) = detector::series_objective_grad_parts(&p, &s, &cfg).unwrap();
    assert_eq!(parts.len(), 8);
    // Interior point 5 is covered by windows starting at 3, 4 and 5.
    let nonzero: Vec<usize> = parts
        .iter()
        .enumerate()
        .filter(|(_, g)| g[[5, 0]] != 0.0)
        .map(|(i, _)| i)
        .collect();
    assert_eq!(nonzero, vec![3, 4, 5]);
    let mut sum = direct;
    for g in &parts {
        sum += g;
    }
    for (a, b) in sum.iter().zip(full.values().iter()) {
        assert!((a - b).abs() < 1e-15);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    /// Raising the threshold never adds alerts.
    #[test]
    fn alerts_monotone_in_threshold(seed in 0u64..500, t1 in 0.01f64..1.0, dt in 0.0f64..1.0) {
        let mut cfg = series_cfg(1, ResidualMode::PerPointAbs);
        cfg.model.init_seed = seed;
        let p = ModelParams::init(&cfg.model).unwrap();
        let s = wave(20);
        let r = detector::score(&p, &s, &cfg).unwrap();
        prop_assert!(r.rethreshold(t1 + dt).alert_count <= r.rethreshold(t1).alert_count);
    }
}
