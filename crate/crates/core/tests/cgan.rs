use groundview::cgan::loss::{d_loss_fake_grad, d_loss_real_grad, g_loss_grad};
use groundview::cgan::{
    d_loss, g_loss, load_models, save_models, train, ArchConfig, Discriminator, GLossKind, Generator, TrainConfig,
};
use groundview::embeddings::{stack_embeddings, Embedder, GrayscaleEmbedder};
use groundview::geodata::{generate_synthetic_world, Layout, SyntheticWorldSpec};
use groundview::nn::{sigmoid, Mode, Module};
use groundview::rng::{normal_vec, rng};
use ndarray::{Array1, Array2, Array4};

fn randn2(n: usize, d: usize, seed: u64) -> Array2<f64> {
    Array2::from_shape_vec((n, d), normal_vec(&mut rng(seed), n * d)).unwrap()
}

fn randimg(n: usize, s: usize, seed: u64) -> Array4<f64> {
    let v: Vec<f64> = normal_vec(&mut rng(seed), n * 3 * s * s).into_iter().map(|x| x.tanh()).collect();
    Array4::from_shape_vec((n, 3, s, s), v).unwrap()
}

fn mini(image_size: usize) -> ArchConfig {
    ArchConfig {
        nz: 5,
        nef: 3,
        ngf: 4,
        ndf: 2,
        image_size,
    }
}

#[test]
fn canonical_shapes_follow_the_layer_table() {
    let arch = ArchConfig::canonical(100);
    let mut r = rng(1);
    let mut g = Generator::new(arch, &mut r).unwrap();
    let mut d = Discriminator::new(arch, &mut r).unwrap();
    let img = g.forward(&randn2(2, 100, 2), &randn2(2, 100, 3), Mode::Train).unwrap();
    assert_eq!(img.dim(), (2, 3, 64, 64));
    let res: Vec<_> = g.trace().iter().map(|l| (l.in_res, l.out_res, l.out_ch)).collect();
    assert_eq!(res, vec![(1, 4, 1024), (4, 8, 512), (8, 16, 256), (16, 32, 128), (32, 64, 3)]);
    assert_eq!(g.trace()[0].in_ch, 200);
    d.forward(&img, &randn2(2, 100, 4), Mode::Train).unwrap();
    let res: Vec<_> = d.trace().iter().map(|l| (l.name.as_str(), l.in_ch, l.out_ch, l.in_res, l.out_res)).collect();
    assert_eq!(
        res,
        vec![
            ("conv1_1", 3, 64, 64, 32),
            ("conv1_2", 100, 64, 64, 32),
            ("conv2", 128, 256, 32, 16),
            ("conv3", 256, 512, 16, 8),
            ("conv4", 512, 1024, 8, 4),
            ("conv5", 1024, 1, 4, 1),
        ]
    );
    assert_eq!(g.num_params(), 14_296_835);
    assert_eq!(d.num_params(), 11_135_745);
}

#[test]
fn zero_generator_outputs_zero_image() {
    let mut g = Generator::new(mini(16), &mut rng(3)).unwrap();
    for p in g.params_mut() {
        p.value.fill(0.0);
    }
    let out = g.generate(&randn2(2, 5, 1), &randn2(2, 3, 2)).unwrap();
    assert!(out.iter().all(|&v| v == 0.0));
}

#[test]
fn generator_rejects_wrong_nef() {
    let g = Generator::new(mini(8), &mut rng(3)).unwrap();
    assert!(g.generate(&randn2(1, 5, 1), &randn2(1, 4, 2)).is_err());
}

#[test]
fn generation_is_deterministic_and_bounded() {
    let g = Generator::new(ArchConfig::desk(100), &mut rng(3)).unwrap();
    let (z, e) = (randn2(3, 100, 1), randn2(3, 100, 2) * 10.0);
    let a = g.generate(&z, &e).unwrap();
    assert_eq!(a, g.generate(&z, &e).unwrap());
    assert!(a.iter().all(|v| (-1.0..=1.0).contains(v)));
}

#[test]
fn zeroed_head_gives_one_half() {
    let mut d = Discriminator::new(mini(16), &mut rng(5)).unwrap();
    for p in d.head_mut().params_mut() {
        p.value.fill(0.0);
    }
    let p = d.predict(&randimg(4, 16, 1), &randn2(4, 3, 2)).unwrap();
    assert!(p.iter().all(|&v| v == 0.5));
}

#[test]
fn discriminator_output_is_a_probability_on_random_inputs() {
    let d = Discriminator::new(ArchConfig::desk(25), &mut rng(6)).unwrap();
    for batch in 0..10 {
        let p = d.predict(&randimg(100, 64, 10 + batch), &(randn2(100, 25, 100 + batch) * 3.0)).unwrap();
        assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
    }
}

#[test]
fn discriminator_rejects_bad_shapes() {
    let d = Discriminator::new(mini(8), &mut rng(6)).unwrap();
    assert!(d.predict(&randimg(2, 16, 1), &randn2(2, 3, 2)).is_err());
    assert!(d.predict(&randimg(2, 8, 1), &randn2(2, 2, 2)).is_err());
}

#[test]
fn loss_reference_values() {
    assert!((d_loss(&[0.5], &[0.5]) - 1.3863).abs() < 1e-4);
    assert!((g_loss(&[0.5], GLossKind::NonSaturating) - 0.6931).abs() < 1e-4);
}

/// `||a - n|| / (||a|| + ||n||)`.
fn rel_err(a: &[f64], n: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(n).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nn: f64 = n.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (na + nn).max(1e-300)
}

fn numeric_grad<M: Module>(m: &mut M, mut loss: impl FnMut(&mut M) -> f64) -> Vec<f64> {
    let h = 1e-6;
    let sizes: Vec<usize> = m.params().iter().map(|p| p.len()).collect();
    let mut out = Vec::new();
    for (pi, &len) in sizes.iter().enumerate() {
        for j in 0..len {
            let orig = m.params()[pi].value.as_slice().unwrap()[j];
            m.params_mut()[pi].value.as_slice_mut().unwrap()[j] = orig + h;
            let up = loss(m);
            m.params_mut()[pi].value.as_slice_mut().unwrap()[j] = orig - h;
            let down = loss(m);
            m.params_mut()[pi].value.as_slice_mut().unwrap()[j] = orig;
            out.push((up - down) / (2.0 * h));
        }
    }
    out
}

fn probs(l: &Array1<f64>) -> Vec<f64> {
    l.iter().map(|&x| sigmoid(x)).collect()
}

fn check_gradients(image_size: usize) {
    let arch = mini(image_size);
    let mut r = rng(11);
    let mut g = Generator::new(arch, &mut r).unwrap();
    let mut d = Discriminator::new(arch, &mut r).unwrap();
    let n = 3;
    let (z, e) = (randn2(n, arch.nz, 1), randn2(n, arch.nef, 2));
    let real = randimg(n, image_size, 3);
    let fake = g.forward(&z, &e, Mode::Train).unwrap();

    // Discriminator loss w.r.t. D's parameters.
    d.zero_grad();
    let lr = d.forward(&real, &e, Mode::Train).unwrap();
    d.backward(&d_loss_real_grad(&lr));
    let lf = d.forward(&fake, &e, Mode::Train).unwrap();
    d.backward(&d_loss_fake_grad(&lf));
    let analytic = d.flat_grads();
    let numeric = numeric_grad(&mut d, |d| {
        let pr = probs(&d.forward(&real, &e, Mode::Train).unwrap());
        let pf = probs(&d.forward(&fake, &e, Mode::Train).unwrap());
        d_loss(&pr, &pf)
    });
    let err = rel_err(&analytic, &numeric);
    assert!(err < 1e-4, "D gradient relative error {err:e} at size {image_size}");

    // Generator loss w.r.t. G's parameters, through D.
    for kind in [GLossKind::NonSaturating, GLossKind::Saturating] {
        g.zero_grad();
        d.zero_grad();
        let img = g.forward(&z, &e, Mode::Train).unwrap();
        let l = d.forward(&img, &e, Mode::Train).unwrap();
        let dimg = d.backward(&g_loss_grad(&l, kind));
        g.backward(&dimg);
        let analytic = g.flat_grads();
        let numeric = numeric_grad(&mut g, |g| {
            let img = g.forward(&z, &e, Mode::Train).unwrap();
            g_loss(&probs(&d.forward(&img, &e, Mode::Train).unwrap()), kind)
        });
        let err = rel_err(&analytic, &numeric);
        assert!(err < 1e-4, "G gradient relative error {err:e} ({kind:?}) at size {image_size}");
    }
}

#[test]
fn gradients_match_finite_differences_on_miniature_networks() {
    check_gradients(8);
    check_gradients(16);
}

fn tiny_world(seed: u64) -> (Vec<groundview::geodata::PairedSample>, Array2<f64>) {
    let spec = SyntheticWorldSpec::new(4, 4, Layout::Checkerboard, 4, seed);
    let world = generate_synthetic_world(&spec).unwrap();
    let patches: Vec<_> = world.samples.iter().map(|s| &s.overhead).collect();
    let e = stack_embeddings(&GrayscaleEmbedder::default().embed_all(&patches).unwrap()).unwrap();
    (world.samples, e)
}

#[test]
fn training_counts_steps_and_zero_rate_is_a_no_op() {
    let (samples, e) = tiny_world(2);
    assert_eq!(samples.len(), 64);
    let arch = ArchConfig {
        ngf: 2,
        ndf: 1,
        ..ArchConfig::desk(100)
    };
    let mut r = rng(4);
    let mut g = Generator::new(arch, &mut r).unwrap();
    let mut d = Discriminator::new(arch, &mut r).unwrap();
    let (g0, d0) = (g.flat_params(), d.flat_params());
    let cfg = TrainConfig {
        learning_rate: 0.0,
        epochs: 1,
        batch_size: 32,
        ..TrainConfig::default()
    };
    let hist = train(&mut g, &mut d, &samples, &e, &cfg).unwrap();
    assert_eq!(hist.len(), 2);
    assert_eq!(g.flat_params(), g0);
    assert_eq!(d.flat_params(), d0);
}

#[test]
fn training_rejects_tiny_batches() {
    let (samples, e) = tiny_world(2);
    let arch = ArchConfig::desk(100);
    let mut r = rng(4);
    let mut g = Generator::new(arch, &mut r).unwrap();
    let mut d = Discriminator::new(arch, &mut r).unwrap();
    let cfg = TrainConfig {
        batch_size: 1,
        ..TrainConfig::default()
    };
    assert!(matches!(train(&mut g, &mut d, &samples, &e, &cfg), Err(groundview::Error::Config(_))));
}

#[test]
fn training_is_deterministic_and_checkpoints_round_trip() {
    let (samples, e) = tiny_world(3);
    let arch = ArchConfig {
        ngf: 2,
        ndf: 1,
        ..ArchConfig::desk(100)
    };
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 1,
        max_steps: Some(3),
        seed: 9,
        ..TrainConfig::default()
    };
    let run = || {
        let mut r = rng(4);
        let mut g = Generator::new(arch, &mut r).unwrap();
        let mut d = Discriminator::new(arch, &mut r).unwrap();
        let h = train(&mut g, &mut d, &samples, &e, &cfg).unwrap();
        (g, d, h)
    };
    let (g, d, h1) = run();
    let (_, _, h2) = run();
    assert_eq!(h1.len(), 3);
    assert_eq!(h1.to_csv(), h2.to_csv());

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.bin");
    save_models(&path, &g, &d, 9, 3).unwrap();
    let (g2, d2, meta) = load_models(&path).unwrap();
    assert_eq!(meta.step, 3);
    assert_eq!(meta.arch, arch);
    assert_eq!(g2.flat_params(), g.flat_params());
    assert_eq!(d2.flat_params(), d.flat_params());
    let z = randn2(2, 100, 5);
    let ee = e.slice(ndarray::s![..2, ..]).to_owned();
    assert_eq!(g2.generate(&z, &ee).unwrap(), g.generate(&z, &ee).unwrap());
}
