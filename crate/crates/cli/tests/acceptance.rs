//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any fails.

use std::io::Write;
use std::net::TcpListener;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Stdio};
use std::time::{Duration, Instant};

use muralfill_autograd::{ParamStore, Tape, Var};
use muralfill_core::data::{fixture_mural, generate_mask};
use muralfill_core::evaluation::*;
use muralfill_core::losses::*;
use muralfill_core::models::{Bind, Generator, GeneratorConfig, GeneratorRole, ModelBundle, ModelConfig, NonLocalBlock};
use muralfill_core::raster::{decode_rgb, encode_gray_png, encode_rgb_png};
use muralfill_core::training::*;
use muralfill_core::RatioBin;
use ndarray::{s, Array2, Array3, ArrayD, IxDyn};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use reqwest::blocking::multipart::{Form, Part};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if !$cond {
            return Err(format!($($fmt)+));
        }
    };
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("non-local oracle", nonlocal_oracle),
        ("gradient checks", gradient_checks),
        ("histogram matching oracle", histogram_oracle),
        ("known-pixel preservation", known_pixels),
        ("architecture shape contract", architecture),
        ("stage schedule", stage_schedule),
        ("overfit surrogate", overfit),
        ("metric oracles", metric_oracles),
        ("determinism", determinism),
    ];
    let only = std::env::args().skip(1).find(|a| !a.starts_with('-'));
    let mut failed = 0;
    for (name, check) in criteria {
        if only.as_deref().is_some_and(|o| !name.contains(o)) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panicked".into()))
        });
        let secs = start.elapsed().as_secs_f64();
        let line = match &result {
            Ok(detail) => format!("PASS  {name}: {detail} ({secs:.1}s)"),
            Err(why) => format!("FAIL  {name}: {why} ({secs:.1}s)"),
        };
        failed += result.is_err() as usize;
        let mut out = std::io::stdout().lock();
        writeln!(out, "{line}").unwrap();
        out.flush().unwrap();
    }
    if failed > 0 {
        eprintln!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(-1.0..1.0))
}

fn max_abs_diff<'a>(a: impl IntoIterator<Item = &'a f64>, b: impl IntoIterator<Item = &'a f64>) -> f64 {
    a.into_iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

// ---- non-local -------------------------------------------------------------

/// Softmax attention over every pair of positions, one position at a time.
fn brute_force_nonlocal(x: &ArrayD<f64>, store: &ParamStore<f64>, block: &NonLocalBlock) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let e = block.embedding_channels;
    let p = |n: &str| store.get(&block.name(n)).unwrap().clone();
    let project = |part: &str, i: usize| -> Vec<f64> {
        let (wt, b) = (p(&format!("{part}.weight")), p(&format!("{part}.bias")));
        (0..e)
            .map(|k| b[[k]] + (0..c).map(|ch| wt[[k, ch, 0, 0]] * x[[0, ch, i / w, i % w]]).sum::<f64>())
            .collect()
    };
    let n = h * w;
    let theta: Vec<Vec<f64>> = (0..n).map(|i| project("theta", i)).collect();
    let phi: Vec<Vec<f64>> = (0..n).map(|i| project("phi", i)).collect();
    let g: Vec<Vec<f64>> = (0..n).map(|i| project("g", i)).collect();
    let (ww, wb) = (p("w.weight"), p("w.bias"));
    let mut out = x.clone();
    for i in 0..n {
        let logits: Vec<f64> = (0..n).map(|j| (0..e).map(|k| theta[i][k] * phi[j][k]).sum()).collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        for ch in 0..c {
            let mut v = wb[[ch]];
            for k in 0..e {
                let y: f64 = (0..n).map(|j| (logits[j] - max).exp() / z * g[j][k]).sum();
                v += ww[[ch, k, 0, 0]] * y;
            }
            out[[0, ch, i / w, i % w]] += v;
        }
    }
    out
}

fn nonlocal_oracle() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..3 {
        let block = NonLocalBlock::new("nl", 4, 2).unwrap();
        let mut store = ParamStore::new();
        block.init(&mut store, &mut rng(seed));
        for part in ["theta", "phi", "g", "w"] {
            let n = block.name(&format!("{part}.bias"));
            let len = store.get(&n).unwrap().len();
            store.assign(&n, random(&[len], seed + 50)).unwrap();
        }
        let x = random(&[1, 4, 8, 8], seed + 100);
        let tape = Tape::inference();
        let got = block.forward(&Bind::frozen(&tape, &store), &tape.constant(x.clone())).unwrap().value();
        let want = brute_force_nonlocal(&x, &store, &block);
        worst = worst.max(max_abs_diff(got.iter(), want.iter()));
    }
    ensure!(worst <= 1e-5, "max abs diff {worst:.3e} > 1e-5");
    Ok(format!("max abs diff {worst:.2e} on 3 random 4x8x8 maps"))
}

// ---- gradients -------------------------------------------------------------

fn identity_losses() -> Losses<f64> {
    Losses::new(LossConfig {
        perceptual: PerceptualConfig {
            extractor: ExtractorConfig::Identity,
            content_layers: vec![PIXELS.into()],
            style_layers: vec![LayerWeight::new(PIXELS, 1.0)],
            alpha: 1.0,
            beta: 1.0,
        },
        ..LossConfig::default()
    })
    .unwrap()
}

fn gradient_error(x: &ArrayD<f64>, f: &dyn Fn(&Tape<f64>, &Var<f64>) -> Var<f64>) -> f64 {
    let tape = Tape::new();
    let leaf = tape.leaf(x.clone());
    let analytic = tape.backward(&f(&tape, &leaf)).unwrap().get(&leaf).unwrap().clone();
    let eval = |x: ArrayD<f64>| {
        let tape = Tape::inference();
        f(&tape, &tape.constant(x)).item()
    };
    let h = 1e-6;
    let numeric = ArrayD::from_shape_fn(x.raw_dim(), |i| {
        let (mut p, mut m) = (x.clone(), x.clone());
        p[&i] += h;
        m[&i] -= h;
        (eval(p) - eval(m)) / (2.0 * h)
    });
    let norm = |a: &ArrayD<f64>| a.mapv(|v| v * v).sum().sqrt();
    norm(&(&analytic - &numeric)) / norm(&analytic).max(norm(&numeric)).max(1e-300)
}

fn gradient_checks() -> Outcome {
    let losses = identity_losses();
    let (x, t) = (random(&[1, 3, 8, 8], 20), random(&[1, 3, 8, 8], 21));
    let target = |tp: &Tape<f64>| tp.constant(t.clone());
    let cases: [(&str, Box<dyn Fn(&Tape<f64>, &Var<f64>) -> Var<f64>>); 4] = [
        ("style", Box::new(|tp, o| losses.style(tp, o, &target(tp)).unwrap())),
        ("content", Box::new(|tp, o| losses.content(tp, o, &target(tp)).unwrap())),
        ("l1", Box::new(|tp, o| losses.pixel(o, &target(tp), None).unwrap())),
        ("histogram", Box::new(|tp, o| losses.histogram(tp, o, &target(tp)).unwrap())),
    ];
    let mut parts = Vec::new();
    for (name, f) in &cases {
        let err = gradient_error(&x, f.as_ref());
        ensure!(err <= 1e-3, "{name}: relative error {err:.3e} > 1e-3");
        parts.push(format!("{name} {err:.1e}"));
    }
    Ok(format!("relative errors {}", parts.join(", ")))
}

// ---- histogram -------------------------------------------------------------

fn sorted(v: &[f64]) -> Vec<f64> {
    let mut v = v.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

fn histogram_oracle() -> Outcome {
    let mut r = rng(31);
    for trial in 0..200 {
        let n = r.random_range(1..200);
        let v: Vec<f64> = (0..n).map(|_| r.random_range(-3.0..3.0)).collect();
        // coarse values force ties on both sides
        let reference: Vec<f64> = (0..n).map(|_| (r.random_range(-3.0..3.0f64) * 4.0).round() / 4.0).collect();
        let m = histogram_match(&v, &reference);
        ensure!(sorted(&m) == sorted(&reference), "trial {trial}: matched multiset differs from the reference");
    }

    let losses = identity_losses();
    let loss = |o: &ArrayD<f64>, t: &ArrayD<f64>| {
        let tape = Tape::inference();
        losses.histogram(&tape, &tape.constant(o.clone()), &tape.constant(t.clone())).unwrap().item()
    };
    let t = random(&[1, 3, 8, 8], 32);
    let mut worst_rearranged = 0.0f64;
    for (k, remap) in [|v: f64| 3.0 * v + 1.0, |v: f64| v.powi(3), |v: f64| (2.0 * v).exp() - 0.3].iter().enumerate() {
        let o = t.mapv(remap);
        let restored = match_features(&o, &t, None).unwrap();
        ensure!(restored == t, "remap {k}: matching a monotone remap does not restore the target");
        let want = o.iter().zip(&t).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        let got = loss(&o, &t);
        ensure!((got - want).abs() <= 1e-6 * want.max(1.0), "remap {k}: loss {got} != residual {want}");
        worst_rearranged = worst_rearranged.max(loss(&restored, &t));
    }
    // per-channel spatial shuffles keep each channel's histogram
    let mut shuffled = t.clone();
    for c in 0..3 {
        let mut vals: Vec<f64> = t.slice(s![0, c, .., ..]).iter().copied().collect();
        for i in (1..vals.len()).rev() {
            vals.swap(i, r.random_range(0..=i));
        }
        for (d, v) in shuffled.slice_mut(s![0, c, .., ..]).iter_mut().zip(vals) {
            *d = v;
        }
    }
    worst_rearranged = worst_rearranged.max(loss(&shuffled, &t));
    ensure!(worst_rearranged <= 1e-6, "loss on target-valued outputs {worst_rearranged:.3e} > 1e-6");
    Ok(format!(
        "multisets exact on 200 trials; monotone remaps restore the target exactly; loss on rearranged target values {worst_rearranged:.1e}"
    ))
}

// ---- service jobs ----------------------------------------------------------

struct Server(Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn muralfill() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_muralfill"));
    c.env("RUST_LOG", "warn").env("RUST_BACKTRACE", "0");
    c
}

fn run_cli(args: &[&str]) -> Result<String, String> {
    let out = muralfill().args(args).output().map_err(|e| e.to_string())?;
    if !out.status.success() {
        return Err(format!("muralfill {}: {}", args.join(" "), String::from_utf8_lossy(&out.stderr).trim()));
    }
    Ok(String::from_utf8_lossy(&out.stdout).into_owned())
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn known_pixels() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ModelConfig::default();
    for g in [&mut cfg.g1, &mut cfg.g2] {
        g.base_channels = 4;
        g.residual_blocks = 1;
    }
    cfg.discriminator.base_channels = 4;
    let mut bundle = ModelBundle::new(&cfg, 5).unwrap();
    // perturb the zero-initialized CCN output so refined pixels differ from the coarse ones
    let g2: Vec<(String, ArrayD<f32>)> = bundle.g2.params.params().map(|(k, v)| (k.to_string(), v.clone())).collect();
    for (name, t) in g2 {
        bundle.g2.params.assign(&name, t.mapv(|v| if v == 0.0 { 0.01 } else { v })).unwrap();
    }
    bundle.stage = 2;
    let ckpt = dir.path().join("model.safetensors");
    bundle.save(&ckpt).unwrap();

    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let _server = Server(
        muralfill()
            .args(["serve", "--port", &port.to_string(), "--checkpoint", s(&ckpt)])
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let base = format!("http://127.0.0.1:{port}");
    let client = reqwest::blocking::Client::builder().timeout(Duration::from_secs(60)).build().unwrap();
    let up = Instant::now();
    while client.get(format!("{base}/healthz")).send().is_err() {
        ensure!(up.elapsed() < Duration::from_secs(30), "server did not start");
        std::thread::sleep(Duration::from_millis(50));
    }

    let mut r = rng(99);
    let mut jobs = Vec::new();
    for i in 0..100u64 {
        let (h, w) = (r.random_range(16..=64), r.random_range(16..=64));
        let bin = RatioBin::ALL[r.random_range(0..5)];
        let (mural, line) = fixture_mural("job", 64, 1000 + i).unwrap();
        let image = mural.pixels().slice(s![..h, ..w, ..]).to_owned();
        let line = line.to_gray().slice(s![..h, ..w]).to_owned();
        let mask = generate_mask(h, w, bin, &mut rng(2000 + i)).unwrap();
        let png = |b: Vec<u8>| Part::bytes(b).file_name("x.png").mime_str("image/png").unwrap();
        let id = loop {
            let form = Form::new()
                .part("image", png(encode_rgb_png(&image).unwrap()))
                .part("mask", png(encode_gray_png(&mask.to_gray()).unwrap()))
                .part("line", png(encode_gray_png(&line).unwrap()));
            let resp = client.post(format!("{base}/api/jobs")).multipart(form).send().map_err(|e| e.to_string())?;
            match resp.status().as_u16() {
                202 => break serde_json::from_str::<serde_json::Value>(&resp.text().unwrap()).unwrap()["id"]
                    .as_str()
                    .unwrap()
                    .to_string(),
                503 => std::thread::sleep(Duration::from_millis(20)),
                code => return Err(format!("job {i}: submit returned {code}")),
            }
        };
        jobs.push((id, image, mask));
    }

    let mut hole_pixels = 0;
    for (i, (id, image, mask)) in jobs.iter().enumerate() {
        let view = loop {
            let v: serde_json::Value =
                serde_json::from_str(&client.get(format!("{base}/api/jobs/{id}")).send().unwrap().text().unwrap()).unwrap();
            if v["status"] == "done" || v["status"] == "failed" {
                break v;
            }
            std::thread::sleep(Duration::from_millis(5));
        };
        ensure!(view["status"] == "done", "job {i}: {view}");
        let bytes = client.get(format!("{base}/api/jobs/{id}/result")).send().unwrap().bytes().unwrap();
        let out = decode_rgb(&bytes).map_err(|e| format!("job {i}: {e}"))?;
        ensure!(out.dim() == image.dim(), "job {i}: result is {:?}, input {:?}", out.dim(), image.dim());
        for ((y, x, c), v) in out.indexed_iter() {
            if mask.hole[[y, x]] < 0.5 {
                ensure!(*v == image[[y, x, c]], "job {i}: known pixel ({y},{x},{c}) changed");
            } else {
                hole_pixels += 1;
            }
        }
    }
    Ok(format!("100 jobs over HTTP, sizes 16..64, all known pixels bit-identical ({hole_pixels} hole values filled)"))
}

// ---- architecture ----------------------------------------------------------

fn architecture() -> Outcome {
    let g1 = Generator::<f32>::new(&GeneratorConfig::default(), GeneratorRole::Structure, "g1", &mut rng(0)).unwrap();
    let tape = Tape::inference();
    let x = tape.constant(ArrayD::from_shape_fn(IxDyn(&[1, 3, 256, 256]), |i| ((i[2] + i[3]) % 7) as f32 / 7.0));
    let p = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 256, 256])));
    let out = g1.srn_forward(&tape, false, &x, &p, &p).unwrap();
    let (img, neck) = (out.image.shape(), out.bottleneck.shape());
    ensure!(img == [1, 3, 256, 256], "output shape {img:?}");
    ensure!(neck[2..] == [32, 32], "bottleneck {neck:?} is not 256/8");

    let cfg = GeneratorConfig {
        zero_init_output: true,
        ..GeneratorConfig::default()
    };
    let g2 = Generator::<f32>::new(&cfg, GeneratorRole::ColorCorrection, "g2", &mut rng(4)).unwrap();
    let coarse = random(&[2, 3, 64, 64], 5).mapv(|v| v as f32);
    let mut r = rng(6);
    let mask = ArrayD::from_shape_fn(IxDyn(&[2, 1, 64, 64]), |_| r.random_range(0..2) as f32);
    let refined = g2
        .ccn_forward(&tape, false, &tape.constant(coarse.clone()), &tape.constant(mask))
        .unwrap()
        .image
        .value();
    let diff = refined.iter().zip(&coarse).map(|(a, b)| (a - b).abs()).fold(0.0f32, f32::max);
    ensure!(diff <= 1e-7, "zero-initialized CCN differs from identity by {diff:e}");
    Ok(format!("256x256 -> bottleneck {neck:?}; zero-init CCN max deviation {diff:e}"))
}

// ---- training --------------------------------------------------------------

fn fixture_pairs(n: usize, seed: u64) -> Vec<(String, muralfill_core::ImageTensor, muralfill_core::LineDrawing)> {
    (0..n)
        .map(|i| {
            let id = format!("fixture_{i:04}");
            let (m, line) = fixture_mural(&id, 64, seed + i as u64).unwrap();
            (id, m.to_tensor(), line)
        })
        .collect()
}

fn options(dir: &Path) -> TrainOptions {
    TrainOptions {
        out_dir: dir.to_path_buf(),
        resume: None,
        stop_after_step: None,
        skip_validation: true,
    }
}

fn stage_schedule() -> Outcome {
    let mut cfg = TrainConfig {
        seed: 3,
        lr_g: 1e-3,
        stage1: StageSchedule { epochs: 2, batch: 2 },
        stage2: StageSchedule { epochs: 2, batch: 2 },
        ..TrainConfig::default()
    };
    for g in [&mut cfg.model.g1, &mut cfg.model.g2] {
        g.base_channels = 4;
        g.residual_blocks = 1;
    }
    cfg.model.discriminator.base_channels = 4;
    cfg.data.augmentation.crop = Some((32, 32));
    cfg.data.masks_per_bin = 2;
    cfg.checkpoint.every_epochs = 0;
    let data = TrainingData::from_pairs(fixture_pairs(4, 1), vec![], &cfg).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let out = train_on(&data, &cfg, &options(dir.path())).map_err(|e| e.to_string())?;
    let (one, two): (Vec<_>, Vec<_>) = out.reports.iter().partition(|r| r.stage == Stage::One);
    ensure!(!one.is_empty() && !two.is_empty(), "{} stage-1 and {} stage-2 reports", one.len(), two.len());
    for r in &one {
        ensure!(r.histogram_contribution() == 0.0, "stage-1 step {} has histogram contribution {}", r.step, r.histogram_contribution());
    }
    ensure!(two.iter().all(|r| r.histogram > 0.0), "a stage-2 report has no histogram term");
    let ids: std::collections::BTreeSet<u64> = out.reports.iter().map(|r| r.discriminator_id).collect();
    ensure!(ids.len() == 1, "discriminator instances {ids:?}");
    ensure!(
        ids.contains(&out.trainer.bundle.d.params.id()),
        "reports name a discriminator other than the trained one"
    );
    Ok(format!(
        "{} stage-1 reports with zero histogram contribution, {} stage-2 reports, one discriminator",
        one.len(),
        two.len()
    ))
}

fn repo_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

fn overfit() -> Outcome {
    let cfg = TrainConfig::load(&repo_root().join("configs/overfit.toml")).map_err(|e| e.to_string())?;
    let data = TrainingData::from_pairs(fixture_pairs(8, 1), vec![], &cfg).unwrap();
    let samples = data.training_set_samples().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = train_on(&data, &cfg, &options(dir.path())).map_err(|e| e.to_string())?;
    let secs = start.elapsed().as_secs_f64();
    let steps = out.reports.len();
    ensure!(out.finished && steps == 600, "ran {steps} steps, finished = {}", out.finished);
    let psnr = evaluate_samples(&out.trainer.bundle, &samples).unwrap().psnr.unwrap_or(f64::INFINITY);
    ensure!(psnr >= 25.0, "training-set PSNR {psnr:.2} dB < 25 dB after {steps} steps in {secs:.0}s");
    ensure!(secs <= 3600.0, "PSNR {psnr:.2} dB but training took {secs:.0}s > 60 min (CPU)");
    Ok(format!("8 fixtures, 300+300 steps, training-set PSNR {psnr:.2} dB in {:.1} min CPU", secs / 60.0))
}

// ---- metrics ---------------------------------------------------------------

fn unit_fixture(seed: u64) -> Array3<f64> {
    let (m, _) = fixture_mural("f", 64, seed).unwrap();
    m.to_tensor().to_unit().slice(s![.., ..32, ..32]).to_owned()
}

fn mse_loop(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let (c, h, w) = a.dim();
    let mut sum = 0.0;
    for k in 0..c {
        for y in 0..h {
            for x in 0..w {
                sum += (a[[k, y, x]] - b[[k, y, x]]).powi(2);
            }
        }
    }
    sum / (c * h * w) as f64
}

/// 11x11 Gaussian window (sigma 1.5) over BT.601 luma, valid positions only.
fn ssim_loop(a: &Array3<f64>, b: &Array3<f64>) -> f64 {
    let y = |im: &Array3<f64>| Array2::from_shape_fn((im.dim().1, im.dim().2), |(r, c)| {
        0.299 * im[[0, r, c]] + 0.587 * im[[1, r, c]] + 0.114 * im[[2, r, c]]
    });
    let (a, b) = (y(a), y(b));
    let mut win = [[0.0f64; 11]; 11];
    for (i, row) in win.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (di, dj) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(di * di + dj * dj) / 4.5).exp();
        }
    }
    let total: f64 = win.iter().flatten().sum();
    let (c1, c2) = (1e-4, 9e-4);
    let (h, w) = a.dim();
    let mut acc = 0.0;
    let mut n = 0;
    for r in 0..=h - 11 {
        for c in 0..=w - 11 {
            let at = |m: &Array2<f64>, i: usize, j: usize| m[[r + i, c + j]];
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += win[i][j] / total * at(&a, i, j);
                    mb += win[i][j] / total * at(&b, i, j);
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let k = win[i][j] / total;
                    let (da, db) = (at(&a, i, j) - ma, at(&b, i, j) - mb);
                    va += k * da * da;
                    vb += k * db * db;
                    cov += k * da * db;
                }
            }
            acc += (2.0 * ma * mb + c1) * (2.0 * cov + c2) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            n += 1;
        }
    }
    acc / n as f64
}

fn eval_images(n: usize) -> Vec<EvalImage> {
    (0..n)
        .map(|i| {
            let id = format!("fixture_{i:04}");
            let (m, line) = fixture_mural(&id, 64, 100 + i as u64).unwrap();
            EvalImage {
                id,
                image: m.to_tensor(),
                line,
            }
        })
        .collect()
}

fn metric_oracles() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..4 {
        let a = unit_fixture(seed);
        let mut r = rng(seed + 10);
        let b = a.mapv(|v| (v + r.random_range(-0.15..0.15)).clamp(0.0, 1.0));
        let m = mse_loop(&a, &b);
        worst = worst
            .max((mse(&a, &b).unwrap() - m).abs())
            .max((psnr(&a, &b).unwrap() - 10.0 * (1.0 / m).log10()).abs())
            .max((ssim(&a, &b).unwrap() - ssim_loop(&a, &b)).abs());
    }
    ensure!(worst <= 1e-6, "metric deviates from loop oracle by {worst:.3e}");

    let images = eval_images(4);
    let ideal = evaluate_set(&IdentityInpainter, &images, &EvalOptions::default(), None).unwrap();
    for bin in RatioBin::ALL {
        let rows: Vec<_> = ideal.rows.iter().filter(|r| r.ratio_bin == bin).collect();
        ensure!(rows.len() == images.len(), "{bin}: {} rows", rows.len());
        ensure!(rows.iter().all(|r| r.mse == 0.0 && r.ssim == 1.0), "identity model not ideal in bin {bin}");
    }

    let constant = evaluate_set(&ConstantFill(0.0), &eval_images(6), &EvalOptions::default(), None).unwrap();
    let curve: Vec<f64> = RatioBin::ALL
        .iter()
        .map(|&b| constant.per_bin.iter().find(|a| a.ratio_bin == Some(b)).and_then(|a| a.psnr).unwrap())
        .collect();
    ensure!(curve.windows(2).all(|w| w[1] < w[0]), "constant-fill PSNR not strictly decreasing: {curve:.2?}");
    Ok(format!(
        "mse/psnr/ssim within {worst:.1e} of loop oracles; identity ideal in 5 bins; constant fill PSNR {curve:.2?}"
    ))
}

// ---- determinism -----------------------------------------------------------

/// Step records with the wall clock and the per-process discriminator id removed.
fn loss_curve(run: &Path) -> Result<Vec<serde_json::Value>, String> {
    let text = std::fs::read_to_string(run.join(LOG_FILE)).map_err(|e| e.to_string())?;
    Ok(text
        .lines()
        .map(|l| serde_json::from_str::<serde_json::Value>(l).unwrap())
        .filter(|v| v["kind"] == "step")
        .map(|mut v| {
            let o = v.as_object_mut().unwrap();
            o.remove("timestamp");
            o.remove("discriminator_id");
            v
        })
        .collect())
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let ds = dir.path().join("ds");
    run_cli(&["fixtures", "--out", s(&ds), "--count", "8", "--size", "64", "--seed", "4"])?;
    let train = |name: &str, seed: &str| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        run_cli(&[
            "train", "--manifest", s(&ds), "--out", s(&out), "--seed", seed, "--lr-g", "1e-3",
            "--stage1-epochs", "25", "--stage2-epochs", "25", "--stage1-batch", "4", "--stage2-batch", "4",
            "--skip-validation",
            "--set", "model.g1.base_channels=4", "--set", "model.g2.base_channels=4",
            "--set", "model.discriminator.base_channels=4",
            "--set", "model.g1.residual_blocks=1", "--set", "model.g2.residual_blocks=1",
            "--set", "data.augmentation.crop=[32,32]", "--set", "data.augmentation.hflip_prob=0.5",
            "--set", "data.masks_per_bin=2", "--set", "checkpoint.every_epochs=0",
        ])?;
        Ok(out)
    };
    let (a, b, c) = (train("a", "11")?, train("b", "11")?, train("c", "12")?);
    let (ca, cb, cc) = (loss_curve(&a)?, loss_curve(&b)?, loss_curve(&c)?);
    ensure!(ca.len() == 100, "{} logged steps", ca.len());
    ensure!(ca == cb, "seeded runs diverge at step {}", ca.iter().zip(&cb).position(|(x, y)| x != y).unwrap_or(ca.len().min(cb.len())));
    ensure!(ca != cc, "a different seed gives the same curve");
    let (ma, mb) = (std::fs::read(a.join(FINAL_MODEL)).unwrap(), std::fs::read(b.join(FINAL_MODEL)).unwrap());
    ensure!(ma == mb, "final models differ");

    let eval = |name: &str, seed: &str| -> Result<PathBuf, String> {
        let out = dir.path().join(name);
        run_cli(&["eval", "--checkpoint", s(&a.join(FINAL_MODEL)), "--manifest", s(&ds), "--out", s(&out), "--seed", seed])?;
        Ok(out)
    };
    let (ea, eb, ec) = (eval("ea", "5")?, eval("eb", "5")?, eval("ec", "6")?);
    for f in [REPORT_CSV, REPORT_SUMMARY, REPORT_PLOT] {
        let (x, y) = (std::fs::read(ea.join(f)).unwrap(), std::fs::read(eb.join(f)).unwrap());
        ensure!(x == y, "{f} differs between seeded evaluations");
    }
    ensure!(
        std::fs::read(ea.join(REPORT_CSV)).unwrap() != std::fs::read(ec.join(REPORT_CSV)).unwrap(),
        "a different evaluation seed gives the same report"
    );
    Ok("100-step loss curves and final weights identical across seeded CLI runs; eval reports byte-identical".into())
}
