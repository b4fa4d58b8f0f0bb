use muralfill_autograd::{ParamStore, Tape};
use muralfill_core::models::{
    composite, composite_var, Bind, Discriminator, DiscriminatorConfig, Generator, GeneratorConfig, GeneratorRole, ModelBundle,
    ModelConfig, NonLocalBlock,
};
use muralfill_core::{Error, ImageTensor, LineDrawing, LineProvenance, Mask};
use ndarray::{Array2, Array3, ArrayD, IxDyn};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn random(shape: &[usize], seed: u64) -> ArrayD<f64> {
    let mut r = rng(seed);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || r.random_range(-1.0..1.0))
}

fn small_gen(base: usize) -> GeneratorConfig {
    GeneratorConfig {
        base_channels: base,
        residual_blocks: 1,
        ..Default::default()
    }
}

/// Straight-from-the-definition non-local response for one sample.
fn brute_force_nonlocal(x: &ArrayD<f64>, store: &ParamStore<f64>, block: &NonLocalBlock) -> ArrayD<f64> {
    let (c, h, w) = (x.shape()[1], x.shape()[2], x.shape()[3]);
    let e = block.embedding_channels;
    let p = |n: &str| store.get(&block.name(n)).unwrap().clone();
    let proj = |name: &str, i: usize, k: usize| -> f64 {
        let wt = p(&format!("{name}.weight"));
        let b = p(&format!("{name}.bias"));
        let (y, xx) = (i / w, i % w);
        let mut s = b[[k]];
        for ch in 0..c {
            s += wt[[k, ch, 0, 0]] * x[[0, ch, y, xx]];
        }
        s
    };
    let hw = h * w;
    let mut out = ArrayD::zeros(IxDyn(&[1, c, h, w]));
    for i in 0..hw {
        let logits: Vec<f64> = (0..hw)
            .map(|j| (0..e).map(|k| proj("theta", i, k) * proj("phi", j, k)).sum())
            .collect();
        let max = logits.iter().cloned().fold(f64::MIN, f64::max);
        let z: f64 = logits.iter().map(|l| (l - max).exp()).sum();
        let yv: Vec<f64> = (0..e)
            .map(|k| (0..hw).map(|j| (logits[j] - max).exp() / z * proj("g", j, k)).sum())
            .collect();
        let wt = p("w.weight");
        let b = p("w.bias");
        for ch in 0..c {
            let mut s = b[[ch]];
            for k in 0..e {
                s += wt[[ch, k, 0, 0]] * yv[k];
            }
            out[[0, ch, i / w, i % w]] = x[[0, ch, i / w, i % w]] + s;
        }
    }
    out
}

fn nonlocal_setup(c: usize, e: usize, seed: u64) -> (NonLocalBlock, ParamStore<f64>) {
    let block = NonLocalBlock::new("nl", c, e).unwrap();
    let mut store = ParamStore::new();
    block.init(&mut store, &mut rng(seed));
    // non-zero biases so every term of the projection is exercised
    for part in ["theta", "phi", "g", "w"] {
        let n = block.name(&format!("{part}.bias"));
        let len = store.get(&n).unwrap().len();
        store.assign(&n, random(&[len], seed + 7)).unwrap();
    }
    (block, store)
}

#[test]
fn nonlocal_matches_brute_force() {
    for (c, h, w, seed) in [(4, 3, 3, 1), (4, 8, 8, 2), (3, 5, 2, 3)] {
        let (block, store) = nonlocal_setup(c, 2, seed);
        let x = random(&[1, c, h, w], seed + 100);
        let tape = Tape::inference();
        let out = block.forward(&Bind::frozen(&tape, &store), &tape.constant(x.clone())).unwrap();
        let oracle = brute_force_nonlocal(&x, &store, &block);
        let diff = (&*out.value() - &oracle).mapv(f64::abs).fold(0.0f64, |a, &b| a.max(b));
        assert!(diff <= 1e-5, "{c}x{h}x{w}: max diff {diff}");
    }
}

#[test]
fn nonlocal_zero_theta_phi_gives_mean_of_g() {
    let (block, mut store) = nonlocal_setup(4, 3, 5);
    for part in ["theta", "phi"] {
        for suffix in ["weight", "bias"] {
            let n = block.name(&format!("{part}.{suffix}"));
            let shape = store.get(&n).unwrap().shape().to_vec();
            store.assign(&n, ArrayD::zeros(IxDyn(&shape))).unwrap();
        }
    }
    let x = random(&[1, 4, 3, 4], 9);
    let tape = Tape::inference();
    let bind = Bind::frozen(&tape, &store);
    let y = block.response(&bind, &tape.constant(x.clone())).unwrap().value();
    let g = bind
        .conv(&tape.constant(x), &block.name("g"), muralfill_autograd::Conv2dOptions::new(1, 0))
        .unwrap()
        .value();
    for k in 0..3 {
        let mean = g.index_axis(ndarray::Axis(1), k).mean().unwrap();
        for v in y.index_axis(ndarray::Axis(1), k).iter() {
            assert!((v - mean).abs() < 1e-12);
        }
    }
}

#[test]
fn nonlocal_single_position_returns_g() {
    let (block, store) = nonlocal_setup(4, 2, 8);
    let x = random(&[1, 4, 1, 1], 3);
    let tape = Tape::inference();
    let bind = Bind::frozen(&tape, &store);
    let y = block.response(&bind, &tape.constant(x.clone())).unwrap().value();
    let g = bind
        .conv(&tape.constant(x), &block.name("g"), muralfill_autograd::Conv2dOptions::new(1, 0))
        .unwrap()
        .value();
    assert_eq!(y.shape(), g.shape());
    for (a, b) in y.iter().zip(g.iter()) {
        assert!((a - b).abs() < 1e-12);
    }
}

fn srn_shapes(g: &Generator<f32>, h: usize, w: usize) -> (Vec<usize>, Vec<usize>) {
    let tape = Tape::inference();
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, h, w])));
    let p = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, h, w])));
    let out = g.srn_forward(&tape, false, &x, &p, &p).unwrap();
    (out.image.shape(), out.bottleneck.shape())
}

#[test]
fn srn_bottleneck_is_one_eighth() {
    let g = Generator::<f32>::new(&GeneratorConfig::default(), GeneratorRole::Structure, "g1", &mut rng(0)).unwrap();
    let (img, bottleneck) = srn_shapes(&g, 256, 256);
    assert_eq!(img, vec![1, 3, 256, 256]);
    assert_eq!(bottleneck, vec![1, 256, 32, 32]);
}

#[test]
fn srn_shapes_scale_with_input() {
    let g = Generator::<f32>::new(&small_gen(8), GeneratorRole::Structure, "g1", &mut rng(0)).unwrap();
    for (h, w) in [(16, 24), (32, 48), (64, 40)] {
        let (img, b) = srn_shapes(&g, h, w);
        assert_eq!(img, vec![1, 3, h, w]);
        assert_eq!(&b[2..], &[h / 8, w / 8]);
    }
    let (_, b1) = srn_shapes(&g, 32, 24);
    let (_, b2) = srn_shapes(&g, 64, 48);
    assert_eq!((b2[2], b2[3]), (2 * b1[2], 2 * b1[3]));
}

#[test]
fn srn_rejects_indivisible_sizes_with_padding_hint() {
    let g = Generator::<f32>::new(&small_gen(4), GeneratorRole::Structure, "g1", &mut rng(0)).unwrap();
    let tape = Tape::inference();
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 30, 64])));
    let p = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 30, 64])));
    match g.srn_forward(&tape, false, &x, &p, &p) {
        Err(Error::Shape(msg)) => assert!(msg.contains("pad by 2 rows"), "{msg}"),
        other => panic!("expected shape error, got {:?}", other.err()),
    }
}

#[test]
fn ccn_zero_init_is_identity_and_accepts_empty_mask() {
    let cfg = GeneratorConfig {
        zero_init_output: true,
        ..small_gen(8)
    };
    let g = Generator::<f32>::new(&cfg, GeneratorRole::ColorCorrection, "g2", &mut rng(4)).unwrap();
    let coarse = random(&[2, 3, 32, 32], 5).mapv(|v| v as f32);
    let tape = Tape::inference();
    let c = tape.constant(coarse.clone());
    let m = tape.constant(ArrayD::zeros(IxDyn(&[2, 1, 32, 32])));
    let out = g.ccn_forward(&tape, false, &c, &m).unwrap().image.value();
    let diff = (&*out - &coarse).mapv(f32::abs).fold(0.0f32, |a, &b| a.max(b));
    assert!(diff <= 1e-7);
}

#[test]
fn ccn_rejects_mismatched_mask() {
    let g = Generator::<f32>::new(&small_gen(4), GeneratorRole::ColorCorrection, "g2", &mut rng(4)).unwrap();
    let tape = Tape::inference();
    let c = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 16, 16])));
    let m = tape.constant(ArrayD::zeros(IxDyn(&[1, 1, 16, 24])));
    assert!(matches!(g.ccn_forward(&tape, false, &c, &m), Err(Error::Shape(_))));
}

#[test]
fn discriminator_plan_has_70px_receptive_field() {
    let cfg = DiscriminatorConfig::default();
    // independent walk: rf_l = rf_{l-1} + (k-1) * prod(strides before l)
    let strides = [2, 2, 2, 1, 1];
    let mut rf = 1;
    let mut jump = 1;
    for s in strides {
        rf += 3 * jump;
        jump *= s;
    }
    assert_eq!(rf, 70);
    assert_eq!(cfg.computed_receptive_field(), 70);
    let bad = DiscriminatorConfig {
        receptive_field: 34,
        ..cfg
    };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}

fn small_d(seed: u64) -> Discriminator<f32> {
    let cfg = DiscriminatorConfig {
        base_channels: 8,
        ..Default::default()
    };
    Discriminator::new(&cfg, "d", &mut rng(seed)).unwrap()
}

#[test]
fn discriminator_logit_map_for_256() {
    let d = small_d(1);
    let tape = Tape::inference();
    let x = random(&[1, 3, 256, 256], 2).mapv(|v| v as f32);
    let out = d.forward(&tape, false, &tape.constant(x)).unwrap().value();
    assert_eq!(out.shape(), &[1, 1, 30, 30]);
    assert!(out.iter().all(|v| v.is_finite()));
}

#[test]
fn discriminator_rejects_tiny_input() {
    let d = small_d(1);
    let tape = Tape::inference();
    let x = tape.constant(ArrayD::zeros(IxDyn(&[1, 3, 16, 64])));
    assert!(matches!(d.forward(&tape, false, &x), Err(Error::Shape(_))));
}

#[test]
fn discriminator_is_translation_equivariant_on_interior() {
    let d = small_d(3);
    let stride = d.config.total_stride();
    assert_eq!(stride, 8);
    let size = 128;
    let pattern = random(&[3, 40, 40], 11).mapv(|v| v as f32);
    let place = |oy: usize, ox: usize| {
        let mut img = ArrayD::<f32>::zeros(IxDyn(&[1, 3, size, size]));
        for c in 0..3 {
            for y in 0..40 {
                for x in 0..40 {
                    img[[0, c, oy + y, ox + x]] = pattern[[c, y, x]];
                }
            }
        }
        img
    };
    let tape = Tape::inference();
    let a = d.forward(&tape, false, &tape.constant(place(40, 40))).unwrap().value();
    let b = d.forward(&tape, false, &tape.constant(place(40 + stride, 40))).unwrap().value();
    let n = a.shape()[2];
    // away from the zero-padded border, shifting by one stride shifts by one cell
    for y in 3..n - 4 {
        for x in 3..n - 3 {
            let (va, vb) = (a[[0, 0, y, x]], b[[0, 0, y + 1, x]]);
            assert!((va - vb).abs() < 1e-4, "cell {y},{x}: {va} vs {vb}");
        }
    }
}

#[test]
fn spectral_estimate_converges_to_largest_singular_value() {
    let mut d = small_d(5);
    for _ in 0..200 {
        d.update_spectral().unwrap();
    }
    // oracle: power iteration on WᵀW in f64 from a different start
    let w = d.params.get("d.conv1.weight").unwrap();
    let o = w.shape()[0];
    let m = w.len() / o;
    let wm = Array2::from_shape_vec((o, m), w.iter().map(|&v| v as f64).collect()).unwrap();
    let mut v = ndarray::Array1::from_elem(m, 1.0);
    for _ in 0..2000 {
        let next = wm.t().dot(&wm.dot(&v));
        v = &next / next.dot(&next).sqrt();
    }
    let sigma = wm.dot(&v).dot(&wm.dot(&v)).sqrt();
    let est = d.sigma(1).unwrap();
    assert!((est - sigma).abs() / sigma < 1e-3, "{est} vs {sigma}");
}

#[test]
fn gradient_reaches_every_parameter() {
    let gcfg = GeneratorConfig {
        base_channels: 4,
        residual_blocks: 1,
        ..Default::default()
    };
    let g1 = Generator::<f64>::new(&gcfg, GeneratorRole::Structure, "g1", &mut rng(1)).unwrap();
    let g2 = Generator::<f64>::new(&gcfg, GeneratorRole::ColorCorrection, "g2", &mut rng(2)).unwrap();
    let dcfg = DiscriminatorConfig {
        base_channels: 4,
        ..Default::default()
    };
    let d = Discriminator::<f64>::new(&dcfg, "d", &mut rng(3)).unwrap();
    let tape = Tape::new();
    let img = tape.constant(random(&[2, 3, 32, 32], 4));
    let line = tape.constant(random(&[2, 1, 32, 32], 5).mapv(|v| (v > 0.5) as u8 as f64));
    let mask = tape.constant(random(&[2, 1, 32, 32], 6).mapv(|v| (v > 0.0) as u8 as f64));
    let masked = img.mul(&mask.neg().add_scalar(1.0)).unwrap();
    let coarse = g1.srn_forward(&tape, true, &masked, &line, &mask).unwrap().image;
    let refined = g2.ccn_forward(&tape, true, &coarse, &mask).unwrap().image;
    let comp = composite_var(&refined, &img, &mask).unwrap();
    let l1 = refined.sub(&img).unwrap().abs().mean().add(&coarse.sub(&img).unwrap().abs().mean()).unwrap();
    let adv = d.forward(&tape, true, &comp).unwrap().mean();
    let loss = l1.add(&adv).unwrap();
    let grads = tape.backward(&loss).unwrap();
    for store in [&g1.params, &g2.params, &d.params] {
        for (name, _) in store.params() {
            let g = grads.param(name).unwrap_or_else(|| panic!("{name}: no gradient"));
            assert!(g.iter().any(|v| *v != 0.0), "{name}: zero gradient");
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let bundle = ModelBundle::new(
        &ModelConfig {
            g1: small_gen(8),
            g2: GeneratorConfig {
                zero_init_output: false,
                ..small_gen(8)
            },
            ..Default::default()
        },
        7,
    )
    .unwrap();
    let img = ImageTensor(random(&[3, 32, 32], 1).mapv(|v| v as f32).into_dimensionality().unwrap());
    let line = LineDrawing::new(random(&[32, 32], 2).mapv(|v| (v > 0.6) as u8 as f32).into_dimensionality().unwrap(), LineProvenance::Manual);
    let mask = Mask::new(random(&[32, 32], 3).mapv(|v| (v > 0.3) as u8 as f32).into_dimensionality().unwrap());
    let a = bundle.inpaint(&img, &line, &mask).unwrap();
    let b = bundle.inpaint(&img, &line, &mask).unwrap();
    assert_eq!(a, b);
    let again = ModelBundle::new(&bundle.config, 7).unwrap();
    assert_eq!(again.inpaint(&img, &line, &mask).unwrap(), a);
}

#[test]
fn bundle_round_trip_and_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ModelConfig {
        g1: small_gen(4),
        g2: GeneratorConfig {
            zero_init_output: true,
            ..small_gen(4)
        },
        discriminator: DiscriminatorConfig {
            base_channels: 4,
            ..Default::default()
        },
    };
    let bundle = ModelBundle::new(&cfg, 3).unwrap();
    let path = dir.path().join("m.safetensors");
    bundle.save(&path).unwrap();
    let back = ModelBundle::load(&path).unwrap();
    assert_eq!(back.weights_digest(), bundle.weights_digest());
    assert_eq!(back.fingerprint(), bundle.fingerprint());

    // flip one weight without updating the digest
    let mut archive = muralfill_core::models::archive::read(&path).unwrap();
    archive.tensors["g1.stem.weight"][[0, 0, 0, 0]] += 1.0;
    let tensors: Vec<(String, &ArrayD<f32>)> = archive.tensors.iter().map(|(k, v)| (k.clone(), v)).collect();
    muralfill_core::models::archive::write(&path, &archive.metadata, &tensors).unwrap();
    match ModelBundle::load(&path) {
        Err(Error::Checkpoint(msg)) => assert!(msg.contains("weights fingerprint mismatch"), "{msg}"),
        other => panic!("expected checkpoint error, got {:?}", other.map(|_| ())),
    }
}

fn checker(h: usize, w: usize) -> Mask {
    Mask::new(Array2::from_shape_fn((h, w), |(y, x)| ((y + x) % 2) as f32))
}

#[test]
fn composite_examples() {
    let g = ImageTensor(Array3::from_elem((3, 4, 4), 0.25));
    let o = ImageTensor(Array3::from_elem((3, 4, 4), -0.5));
    assert_eq!(composite(&g, &o, &Mask::empty(4, 4)).unwrap(), o);
    assert_eq!(composite(&g, &o, &Mask::new(Array2::ones((4, 4)))).unwrap(), g);
    let c = composite(&g, &o, &checker(4, 4)).unwrap();
    for ((_, y, x), v) in c.0.indexed_iter() {
        assert_eq!(*v, if (y + x) % 2 == 1 { 0.25 } else { -0.5 });
    }
    assert!(matches!(composite(&g, &o, &Mask::empty(4, 5)), Err(Error::Shape(_))));
}

proptest! {
    #[test]
    fn composite_keeps_known_pixels(seed in any::<u64>(), h in 1usize..12, w in 1usize..12) {
        let mut r = rng(seed);
        let g = ImageTensor(Array3::from_shape_simple_fn((3, h, w), || r.random_range(-1.0f32..1.0)));
        let o = ImageTensor(Array3::from_shape_simple_fn((3, h, w), || r.random_range(-1.0f32..1.0)));
        let m = Mask::new(Array2::from_shape_simple_fn((h, w), || r.random_range(0..2) as f32));
        let c = composite(&g, &o, &m).unwrap();
        for ((ch, y, x), v) in c.0.indexed_iter() {
            let src = if m.hole[[y, x]] == 1.0 { &g } else { &o };
            prop_assert_eq!(v.to_bits(), src.0[[ch, y, x]].to_bits());
        }
    }
}
