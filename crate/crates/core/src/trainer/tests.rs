use super::*;
use crate::encoder::normal_log_density;
use crate::scmgen::{build_dataset, DatasetConfig};
use crate::sde::cdsm_loss;

pub(crate) fn tiny_config() -> TrainConfig {
    TrainConfig {
        phase_epochs: [1, 2, 2],
        score_net: ScoreArch {
            width: 32,
            n_blocks: 1,
            emb_dim: 16,
            layout: InputLayout::Flat,
            grid_channels: 4,
        },
        encoder_hidden: 32,
        flow_hidden: 16,
        val_pairs: 32,
        seed: 3,
        ..Default::default()
    }
}

fn tiny_dataset(d: usize, n_train: usize) -> PairDataset {
    build_dataset(&DatasetConfig {
        n_train,
        n_val: 32,
        n_test: 32,
        ..DatasetConfig::paper(d, 21)
    })
    .unwrap()
}

fn batch(ds: &PairDataset, n: usize) -> (Tensor, Tensor) {
    let rows: Vec<usize> = (0..n).collect();
    (
        gather(&ds.x, &rows).unwrap(),
        gather(&ds.x_tilde, &rows).unwrap(),
    )
}

fn model(d: usize, config: &TrainConfig) -> DcrlModel {
    DcrlModel::new(d, config, &mut ChaCha8Rng::seed_from_u64(config.seed)).unwrap()
}

#[test]
fn beta_schedule_examples() {
    let c = TrainConfig::default();
    for e in [0, 7, 19] {
        assert_eq!(beta_schedule(1, e, &c).unwrap(), 0.0);
    }
    assert_eq!(beta_schedule(2, 10, &c).unwrap(), 1.0);
    assert_eq!(beta_schedule(3, 0, &c).unwrap(), 0.0);
    assert_eq!(beta_schedule(3, 49, &c).unwrap(), 1.0);
    let three = TrainConfig {
        phase_epochs: [1, 1, 3],
        ..Default::default()
    };
    assert_eq!(beta_schedule(3, 1, &three).unwrap(), 0.5);
    assert!(beta_schedule(3, 50, &c).is_err());
    assert!(beta_schedule(4, 0, &c).is_err());
}

#[test]
fn entropy_examples() {
    let uniform = nn::matrix(3, 5, vec![0.2; 15]).unwrap();
    let v = entropy_regularizer(&uniform, EntropySign::NegativeEntropy).unwrap();
    assert!((v.to_scalar::<f64>().unwrap() + 5f64.ln()).abs() < 1e-12);
    assert!((v.to_scalar::<f64>().unwrap() + 1.6094).abs() < 1e-4);

    let same = nn::matrix(2, 3, vec![0.0, 1.0, 0.0, 0.0, 1.0, 0.0]).unwrap();
    let v = entropy_regularizer(&same, EntropySign::NegativeEntropy).unwrap();
    assert_eq!(v.to_scalar::<f64>().unwrap(), 0.0);

    let two = nn::matrix(2, 4, vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap();
    let v = entropy_regularizer(&two, EntropySign::NegativeEntropy).unwrap();
    assert!((v.to_scalar::<f64>().unwrap() + 0.6931).abs() < 1e-4);
    let lit = entropy_regularizer(&two, EntropySign::Literal).unwrap();
    assert!((lit.to_scalar::<f64>().unwrap() - 2f64.ln()).abs() < 1e-12);

    let empty = Tensor::zeros((0, 3), nn::DTYPE, &nn::device()).unwrap();
    assert!(entropy_regularizer(&empty, EntropySign::NegativeEntropy).is_err());
}

#[test]
fn beta_zero_is_sum_of_conditional_terms() {
    let config = tiny_config();
    let ds = tiny_dataset(3, 64);
    let m = model(3, &config);
    let (x, xt) = batch(&ds, 16);
    let noise = BatchNoise::draw(&mut ChaCha8Rng::seed_from_u64(5), 16, 3, OBS_DIM).unwrap();
    let lb = model_loss_with_noise(
        &m,
        &x,
        &xt,
        &noise,
        0.0,
        PriorConfig::Flow,
        LossMode::Single,
    )
    .unwrap();
    let (e, et) = (lb.encoded.e.clone(), lb.encoded.e_tilde.clone());
    let enc_x = |_: &Tensor, _: Option<&[f64]>| -> Result<Tensor> { Ok(e.clone()) };
    let enc_xt = |_: &Tensor, _: Option<&[f64]>| -> Result<Tensor> { Ok(et.clone()) };
    let s = &config.schedule;
    let w = config.weighting;
    let a = cdsm_loss(&m.score, &enc_x, s, w, &x, &noise.t, &noise.eta_x, false).unwrap();
    let b = cdsm_loss(&m.score, &enc_xt, s, w, &xt, &noise.t, &noise.eta_xt, false).unwrap();
    let expected = (a + b).unwrap().to_scalar::<f64>().unwrap();
    assert_eq!(lb.total_value().unwrap(), expected);
}

#[test]
fn time_blind_infinite_matches_single() {
    let config = TrainConfig {
        time_dependent: true,
        ..tiny_config()
    };
    let ds = tiny_dataset(4, 64);
    let m = model(4, &config);
    let time = m.encoding.encoder.time_layer().unwrap();
    time.weight
        .slice_set(&time.weight.zeros_like().unwrap(), 0, 0)
        .unwrap();
    time.bias
        .slice_set(&time.bias.zeros_like().unwrap(), 0, 0)
        .unwrap();
    let (x, xt) = batch(&ds, 32);
    let run = |mode| {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let f = match mode {
            LossMode::Single => model_loss_single,
            LossMode::Infinite => model_loss_infinite,
        };
        f(&m, &x, &xt, 0.7, PriorConfig::Flow, &mut rng)
            .unwrap()
            .total_value()
            .unwrap()
    };
    assert_eq!(
        run(LossMode::Single).to_bits(),
        run(LossMode::Infinite).to_bits()
    );

    let plain = model(4, &tiny_config());
    let noise = BatchNoise::draw(&mut ChaCha8Rng::seed_from_u64(1), 32, 4, OBS_DIM).unwrap();
    let err = model_loss_with_noise(
        &plain,
        &x,
        &xt,
        &noise,
        1.0,
        PriorConfig::Flow,
        LossMode::Infinite,
    );
    assert!(err.is_err());
}

#[test]
fn latent_terms_match_closed_form() {
    let config = tiny_config();
    let ds = tiny_dataset(3, 64);
    let mut m = model(3, &config);
    m.flow = SolutionFlow::identity(3, 4).unwrap();
    let (x, xt) = batch(&ds, 8);
    let noise = BatchNoise::draw(&mut ChaCha8Rng::seed_from_u64(2), 8, 3, OBS_DIM).unwrap();
    let lb = model_loss_with_noise(
        &m,
        &x,
        &xt,
        &noise,
        1.0,
        PriorConfig::Flow,
        LossMode::Single,
    )
    .unwrap();
    let diffusion = lb.diffusion_x + lb.diffusion_xt;
    assert!(lb.total_value().unwrap().is_finite());

    let enc = &lb.encoded;
    let v = |t: &Tensor| t.to_vec2::<f64>().unwrap();
    let (e, et) = (v(&enc.e), v(&enc.e_tilde));
    let (mx, sx, mxt, sxt) = (
        v(&enc.post_x.mu),
        v(&enc.post_x.log_std),
        v(&enc.post_xt.mu),
        v(&enc.post_xt.log_std),
    );
    let lq = v(&enc.q_i.log_probs);
    let mut expected = 0.0;
    for r in 0..8 {
        let k = enc.targets[r];
        let mut log_p = -(3f64.ln()) + normal_log_density(et[r][k], 0.0, 0.0);
        let mut log_q = lq[r][k];
        for i in 0..3 {
            log_p += normal_log_density(e[r][i], 0.0, 0.0);
            if i == k {
                log_q += normal_log_density(e[r][i], mx[r][i], sx[r][i]);
                log_q += normal_log_density(et[r][i], mxt[r][i], sxt[r][i]);
            } else {
                let (p1, p2) = ((-2.0 * sx[r][i]).exp(), (-2.0 * sxt[r][i]).exp());
                let var = 1.0 / (p1 + p2);
                let mu = (mx[r][i] * p1 + mxt[r][i] * p2) * var;
                log_q += normal_log_density(e[r][i], mu, 0.5 * var.ln());
            }
        }
        expected += (log_q - log_p) / 8.0;
    }
    let got = lb.total_value().unwrap() - diffusion;
    assert!(
        (got - expected).abs() < 1e-9 * (1.0 + expected.abs()),
        "{got} vs {expected}"
    );
}

#[test]
fn no_nan_on_random_init() {
    for d in [2, 5, 10] {
        for time_dependent in [false, true] {
            let config = TrainConfig {
                time_dependent,
                ..tiny_config()
            };
            let ds = tiny_dataset(d, 64);
            let m = model(d, &config);
            let (x, xt) = batch(&ds, 64);
            let noise =
                BatchNoise::draw(&mut ChaCha8Rng::seed_from_u64(d as u64), 64, d, OBS_DIM).unwrap();
            for phase in 1..=3u8 {
                let s = PhaseSettings::new(&config, phase, 0).unwrap();
                let (lb, ent, total) = training_loss(&m, &x, &xt, &noise, &s).unwrap();
                for v in [lb.diffusion_x, lb.diffusion_xt, lb.prior, lb.posterior, ent] {
                    assert!(v.is_finite(), "d={d} phase={phase}");
                }
                assert!(total.to_scalar::<f64>().unwrap().is_finite());
            }
        }
    }
}

#[test]
fn loss_decreases_on_toy_data() {
    let config = TrainConfig {
        lr: 1e-3,
        ..tiny_config()
    };
    let ds = tiny_dataset(2, 512);
    let m = model(2, &config);
    let mut adam = Adam::new(AdamConfig {
        lr: config.lr,
        ..Default::default()
    });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let settings = PhaseSettings::new(&config, 2, 0).unwrap();
    let mut losses = Vec::new();
    for step in 0..300 {
        let rows: Vec<usize> = (0..64).map(|k| (step * 64 + k) % 512).collect();
        let x = gather(&ds.x, &rows).unwrap();
        let xt = gather(&ds.x_tilde, &rows).unwrap();
        let noise = BatchNoise::draw(&mut rng, 64, 2, OBS_DIM).unwrap();
        let (_, _, total) = training_loss(&m, &x, &xt, &noise, &settings).unwrap();
        losses.push(total.to_scalar::<f64>().unwrap());
        adam.step(&m.store, &total.backward().unwrap(), |n| {
            !n.starts_with("flow.")
        })
        .unwrap();
    }
    let head: f64 = losses[..50].iter().sum::<f64>() / 50.0;
    let tail: f64 = losses[250..].iter().sum::<f64>() / 50.0;
    assert!(tail < head, "{head} -> {tail}");
}

#[test]
fn phase_one_and_two_leave_flow_untouched() {
    let config = tiny_config();
    let ds = tiny_dataset(2, 128);
    let opts = TrainOptions {
        stop_after: Some(3),
        ..Default::default()
    };
    let out = train(&ds, &config, opts).unwrap();
    let init = model(2, &config);
    let get = |m: &DcrlModel, n: &str| {
        m.store
            .get(n)
            .unwrap()
            .as_tensor()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap()
    };
    assert_eq!(get(&out.model, "flow.w1"), get(&init, "flow.w1"));
    assert_ne!(
        get(&out.model, "encoder.head.weight"),
        get(&init, "encoder.head.weight")
    );
    assert_eq!(out.log.len(), 3);
    assert_eq!(
        out.log.iter().map(|r| r.phase).collect::<Vec<_>>(),
        vec![1, 2, 2]
    );
}

#[test]
fn checkpoint_round_trip_and_failures() {
    let dir = tempfile::tempdir().unwrap();
    let config = tiny_config();
    let ds = tiny_dataset(3, 64);
    let out = train(
        &ds,
        &config,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let path = dir.path().join(CHECKPOINT_FILE);
    let loaded = load_checkpoint(&path).unwrap();
    assert_eq!(loaded, out.checkpoint);
    assert_eq!(loaded.meta.completed(), Some((2, 0)));
    let rebuilt = DcrlModel::from_checkpoint(&loaded).unwrap();
    assert_eq!(rebuilt.snapshot().unwrap(), out.model.snapshot().unwrap());

    let log = read_log(dir.path().join(LOG_FILE)).unwrap();
    assert_eq!(log, out.log);
    let line = fs::read_to_string(dir.path().join(LOG_FILE)).unwrap();
    let first: serde_json::Value = serde_json::from_str(line.lines().next().unwrap()).unwrap();
    for key in [
        "diffusion_x",
        "diffusion_xt",
        "prior",
        "posterior",
        "entropy",
        "wall_time_s",
        "phase",
        "epoch",
    ] {
        assert!(first.get(key).is_some(), "missing {key}");
    }

    // config hash
    let other = TrainConfig {
        lr: 1e-3,
        ..config.clone()
    };
    assert!(matches!(
        loaded.verify(&other, 3),
        Err(Error::ConfigHash { .. })
    ));
    assert!(loaded.verify(&config, 3).is_ok());

    // mismatched d
    let small = model(2, &config);
    match small.store.load(&loaded.params) {
        Err(Error::ShapeMismatch { name, .. }) => assert!(
            name.starts_with("encoder.") || name.starts_with("flow.") || name.starts_with("score."),
            "{name}"
        ),
        other => panic!("unexpected {other:?}"),
    }

    // tampering
    let mut bytes = fs::read(&path).unwrap();
    let mid = bytes.len() / 2;
    bytes[mid] ^= 0x10;
    let bad = dir.path().join("bad.ckpt");
    fs::write(&bad, &bytes).unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Checksum { .. })));

    let mut bytes = fs::read(&path).unwrap();
    bytes[8] = 9;
    fs::write(&bad, &bytes).unwrap();
    assert!(matches!(
        load_checkpoint(&bad),
        Err(Error::SchemaVersion { found: 9, .. })
    ));
    fs::write(&bad, b"garbage").unwrap();
    assert!(matches!(load_checkpoint(&bad), Err(Error::Corrupt { .. })));
}

#[test]
fn resume_reproduces_uninterrupted_run() {
    let config = tiny_config();
    let ds = tiny_dataset(2, 128);
    let full = train(&ds, &config, TrainOptions::default()).unwrap();

    let dir = tempfile::tempdir().unwrap();
    train(
        &ds,
        &config,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            stop_after: Some(2),
            ..Default::default()
        },
    )
    .unwrap();
    let ckpt = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    assert_eq!(ckpt.meta.completed(), Some((2, 0)));
    let resumed = train(
        &ds,
        &config,
        TrainOptions {
            out_dir: Some(dir.path().to_path_buf()),
            resume: Some(ckpt),
            ..Default::default()
        },
    )
    .unwrap();
    assert_eq!(
        resumed.log[0].first_batch_loss.to_bits(),
        full.log[2].first_batch_loss.to_bits()
    );
    for (a, b) in resumed.log.iter().zip(&full.log[2..]) {
        assert_eq!((a.loss, a.val_loss), (b.loss, b.val_loss));
    }
    assert_eq!(
        resumed.model.snapshot().unwrap(),
        full.model.snapshot().unwrap()
    );
    assert_eq!(
        read_log(dir.path().join(LOG_FILE)).unwrap().len(),
        config.total_epochs()
    );

    let other = TrainConfig {
        seed: 99,
        ..config.clone()
    };
    let ckpt = load_checkpoint(dir.path().join(CHECKPOINT_FILE)).unwrap();
    let err = train(
        &ds,
        &other,
        TrainOptions {
            resume: Some(ckpt),
            ..Default::default()
        },
    );
    assert!(matches!(err, Err(Error::ConfigHash { .. })));
}

#[test]
fn config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig {
            lr: 0.0,
            ..Default::default()
        },
        TrainConfig {
            phase_epochs: [0, 1, 1],
            ..Default::default()
        },
        TrainConfig {
            batch_size: 0,
            ..Default::default()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    assert_eq!(TrainConfig::default().locate(19), Some((1, 19)));
    assert_eq!(TrainConfig::default().locate(20), Some((2, 0)));
    assert_eq!(TrainConfig::default().locate(119), Some((3, 49)));
    assert_eq!(TrainConfig::default().locate(120), None);
}
