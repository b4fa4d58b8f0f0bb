use muralfill_core::data::fixture_mural;
use muralfill_core::evaluation::*;
use muralfill_core::losses::{FeatureExtractor, Vgg19, VggWeights};
use muralfill_core::{Error, ImageTensor, RatioBin};
use ndarray::{Array2, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_unit(shape: (usize, usize, usize), seed: u64) -> Array3<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array3::from_shape_fn(shape, |_| rng.random::<f64>())
}

/// Top-left `size` square of a 64 px fixture, in [0, 1].
fn fixture_unit(seed: u64, size: usize) -> Array3<f64> {
    let (m, _) = fixture_mural("f", 64, seed).unwrap();
    m.to_tensor().to_unit().slice(ndarray::s![.., ..size, ..size]).to_owned()
}

#[test]
fn mse_examples_and_loop_oracle() {
    let a = random_unit((3, 8, 8), 1);
    assert_eq!(mse(&a, &a).unwrap(), 0.0);
    let shifted = &a + 0.1;
    assert!((mse(&a, &shifted).unwrap() - 0.01).abs() < 1e-12);

    let b = random_unit((3, 8, 8), 2);
    let mut sum = 0.0;
    for c in 0..3 {
        for y in 0..8 {
            for x in 0..8 {
                sum += (a[[c, y, x]] - b[[c, y, x]]).powi(2);
            }
        }
    }
    assert!((mse(&a, &b).unwrap() - sum / 192.0).abs() < 1e-10);
    assert!(matches!(mse(&a, &random_unit((3, 8, 7), 3)), Err(Error::Shape(_))));
}

#[test]
fn psnr_examples() {
    assert!((psnr_from_mse(0.01) - 20.0).abs() < 1e-12);
    assert!((psnr_from_mse(0.0001) - 40.0).abs() < 1e-12);
    let a = random_unit((3, 8, 8), 4);
    assert_eq!(psnr(&a, &a).unwrap(), f64::INFINITY);
}

/// Direct 2-D window sums with the two-pass variance form.
fn ssim_oracle(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let sigma: f64 = 1.5;
    let mut w = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in w.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / (2.0 * sigma * sigma)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let (h, wd) = a.dim();
    let mut acc = 0.0;
    let mut n = 0;
    for r in 0..=h - 11 {
        for c in 0..=wd - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += w[i][j] / total * a[[r + i, c + j]];
                    mb += w[i][j] / total * b[[r + i, c + j]];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = w[i][j] / total;
                    let (da, db) = (a[[r + i, c + j]] - ma, b[[r + i, c + j]] - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

#[test]
fn ssim_matches_direct_convolution_oracle() {
    for seed in 0..3 {
        let a = fixture_unit(seed, 32);
        let mut noisy = a.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 10);
        noisy.mapv_inplace(|v| (v + rng.random_range(-0.2..0.2)).clamp(0.0, 1.0));
        let got = ssim(&a, &noisy).unwrap();
        let want = ssim_oracle(&luma(&a).unwrap(), &luma(&noisy).unwrap());
        assert!((got - want).abs() < 1e-6, "{got} vs {want}");
    }
}

#[test]
fn ssim_identity_inverse_and_small_input() {
    let a = fixture_unit(3, 32);
    assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-12);

    // binary, high variance
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let bin = Array3::from_shape_fn((3, 32, 32), |(_, y, x)| ((x / 2 + y / 3 + rng.random_range(0..2)) % 2) as f64);
    let bin = {
        // same value on all channels so luma stays binary
        let first = bin.index_axis(ndarray::Axis(0), 0).to_owned();
        Array3::from_shape_fn((3, 32, 32), |(_, y, x)| first[[y, x]])
    };
    let inv = bin.mapv(|v| 1.0 - v);
    let s = ssim(&bin, &inv).unwrap();
    assert!(s < 0.2, "ssim(x, 1-x) = {s}");

    let tiny = random_unit((3, 10, 10), 6);
    assert!(matches!(ssim(&tiny, &tiny), Err(Error::Parameter(_))));
}

fn small_lpips() -> Lpips {
    let layers: Vec<String> = ["relu1_2", "relu2_2", "relu3_3"].iter().map(|s| s.to_string()).collect();
    let vgg: Box<dyn FeatureExtractor<f32>> = Box::new(Vgg19::<f32>::new(&VggWeights::Random { seed: 7 }, &layers).unwrap());
    Lpips::unweighted(vgg, layers).unwrap()
}

#[test]
fn lpips_properties() {
    let lp = small_lpips();
    let (m, _) = fixture_mural("f", 64, 8).unwrap();
    let x = m.to_tensor();
    assert_eq!(lp.distance(&x, &x).unwrap(), 0.0);
    let noisy = |amp: f32, seed: u64| {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageTensor(x.0.mapv(|v| (v + rng.random_range(-amp..amp)).clamp(-1.0, 1.0)))
    };
    let (mild, heavy) = (noisy(0.05, 1), noisy(0.5, 2));
    let d_mild = lp.distance(&x, &mild).unwrap();
    let d_heavy = lp.distance(&x, &heavy).unwrap();
    assert!(d_heavy > d_mild, "{d_heavy} <= {d_mild}");
    let back = lp.distance(&mild, &x).unwrap();
    assert!((back - d_mild).abs() <= 1e-6);
}

fn eval_images(n: usize, size: usize) -> Vec<EvalImage> {
    (0..n)
        .map(|i| {
            let id = format!("fixture_{i:04}");
            let (m, line) = fixture_mural(&id, size, 100 + i as u64).unwrap();
            EvalImage {
                id,
                image: m.to_tensor(),
                line,
            }
        })
        .collect()
}

#[test]
fn identity_model_is_ideal_in_every_bin() {
    let images = eval_images(4, 64);
    let report = evaluate_set(&IdentityInpainter, &images, &EvalOptions::default(), None).unwrap();
    assert_eq!(report.rows.len(), images.len() * RatioBin::ALL.len());
    for row in &report.rows {
        assert_eq!(row.mse, 0.0);
        assert_eq!(row.ssim, 1.0);
        assert!(row.identical && row.psnr.is_none());
    }
    for agg in &report.per_bin {
        assert_eq!((agg.mse, agg.ssim, agg.identical), (0.0, 1.0, images.len()));
    }
    assert!(report.lpips_skipped.is_some());
}

#[test]
fn constant_fill_psnr_falls_as_holes_grow() {
    let images = eval_images(6, 64);
    let report = evaluate_set(&ConstantFill(0.0), &images, &EvalOptions::default(), None).unwrap();
    let psnr: Vec<f64> = report.per_bin.iter().map(|a| a.psnr.unwrap()).collect();
    for w in psnr.windows(2) {
        assert!(w[1] < w[0], "{psnr:?}");
    }
    // the aggregate is the arithmetic mean of its rows
    let bin10: Vec<_> = report.rows.iter().filter(|r| r.ratio_bin == RatioBin::P10).collect();
    let mean = bin10.iter().map(|r| r.mse).sum::<f64>() / bin10.len() as f64;
    assert!((report.per_bin[0].mse - mean).abs() < 1e-15);
    for r in &report.rows {
        assert!(r.ratio_bin.contains(r.hole_fraction));
    }
}

#[test]
fn reports_are_deterministic_and_written() {
    let images = eval_images(3, 64);
    let opts = EvalOptions {
        seed: 42,
        ..EvalOptions::default()
    };
    let a = evaluate_set(&ConstantFill(0.2), &images, &opts, None).unwrap();
    let b = evaluate_set(&ConstantFill(0.2), &images, &opts, None).unwrap();
    assert_eq!(a, b);
    let (d1, d2) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    a.write(d1.path()).unwrap();
    b.write(d2.path()).unwrap();
    for f in [REPORT_CSV, REPORT_SUMMARY, REPORT_PLOT] {
        assert_eq!(std::fs::read(d1.path().join(f)).unwrap(), std::fs::read(d2.path().join(f)).unwrap());
    }
    let csv = std::fs::read_to_string(d1.path().join(REPORT_CSV)).unwrap();
    assert_eq!(csv.lines().count(), 1 + 3 * 5);
    let plot: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(d1.path().join(REPORT_PLOT)).unwrap()).unwrap();
    assert_eq!(plot["models"][0]["series"].as_array().unwrap().len(), 5);

    let other = evaluate_set(
        &ConstantFill(0.2),
        &images,
        &EvalOptions {
            seed: 43,
            ..EvalOptions::default()
        },
        None,
    )
    .unwrap();
    assert_ne!(a.rows, other.rows);
}
