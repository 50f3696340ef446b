use deflare_core::autodiff::Graph;
use deflare_core::checkpoint;
use deflare_core::data;
use deflare_core::net::{Network, NetworkConfig, NetworkState};
use deflare_core::train::{self, TrainConfig};
use deflare_core::vssm::{ScanMode, Variant};
use deflare_core::{Error, Tensor};

fn cfg(c: usize, levels: usize) -> NetworkConfig {
    NetworkConfig {
        base_channels: c,
        levels,
        state_size: 2,
        window: (4, 4),
        seed: 5,
        ..Default::default()
    }
}

fn image(h: usize, w: usize) -> Tensor {
    Tensor::from_fn(&[h, w, 3], |i| ((i as f64) * 0.37).sin() * 0.5 + 0.5)
}

#[test]
fn encoder_halves_resolution_and_doubles_channels() {
    let (net, params) = Network::build(&cfg(4, 3)).unwrap();
    let mut g = Graph::new();
    let b = params.bind(&mut g, false);
    let x = g.constant(image(32, 32));
    let out = net.forward(&mut g, &b, x).unwrap();
    assert_eq!(
        out.encoder_shapes,
        vec![vec![32, 32, 4], vec![16, 16, 8], vec![8, 8, 16]]
    );
    assert_eq!(g.value(out.image).shape(), &[32, 32, 3]);
    assert_eq!(g.value(out.flare).shape(), &[32, 32, 3]);

    let h = g.constant(Tensor::full(&[8, 6, 4], 0.1));
    let d = net.downsample(&mut g, &b, h, 0).unwrap();
    assert_eq!(g.value(d).shape(), &[4, 3, 8]);
    let u = net.upsample(&mut g, &b, d, 0).unwrap();
    assert_eq!(g.value(u).shape(), &[8, 6, 4]);
    let odd = g.constant(Tensor::full(&[5, 6, 4], 0.1));
    assert!(net.downsample(&mut g, &b, odd, 0).is_err());
}

#[test]
fn group_layout_follows_depth() {
    let (net, _) = Network::build(&cfg(2, 4)).unwrap();
    for (j, grp) in net.encoder_groups().iter().enumerate() {
        assert_eq!(grp.variants(), vec![Variant::Local; j + 1]);
    }
    for (j, grp) in net.decoder_groups().iter().enumerate() {
        let mut want = vec![Variant::Local; j];
        want.push(Variant::Hierarchical);
        assert_eq!(grp.variants(), want);
    }
    let flat = NetworkConfig {
        hierarchical: false,
        ..cfg(2, 4)
    };
    let (net, _) = Network::build(&flat).unwrap();
    for (j, grp) in net.decoder_groups().iter().enumerate() {
        assert_eq!(grp.variants(), vec![Variant::Local; j + 1]);
    }
}

#[test]
fn extents_must_divide_by_the_depth_factor() {
    let state = NetworkState::new(&cfg(2, 3)).unwrap();
    match state.infer(&image(10, 16)) {
        Err(Error::Indivisible {
            height: 10,
            width: 16,
            divisor: 4,
        }) => {}
        other => panic!("{:?}", other.map(|_| ())),
    }
    assert!(state.infer(&image(12, 8)).is_ok());
}

#[test]
fn construction_is_seeded() {
    let (_, a) = Network::build(&cfg(2, 2)).unwrap();
    let (_, b) = Network::build(&cfg(2, 2)).unwrap();
    let (_, c) = Network::build(&NetworkConfig {
        seed: 6,
        ..cfg(2, 2)
    })
    .unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);
    let s = NetworkState::new(&cfg(2, 2)).unwrap();
    let x = image(8, 8);
    assert_eq!(s.infer(&x).unwrap(), s.infer(&x).unwrap());
}

#[test]
fn raster_and_local_scans_differ_only_in_order() {
    let local = NetworkState::new(&cfg(2, 2)).unwrap();
    let raster = NetworkState::new(&NetworkConfig {
        scan_mode: ScanMode::Raster,
        ..cfg(2, 2)
    })
    .unwrap();
    assert_eq!(local.params, raster.params);
    let mut a = local.clone();
    let mut b = raster.clone();
    let pairs = data::pair_set(1, 16, 16, 3).unwrap();
    let opts = TrainConfig::default().loss;
    train::train_step(&mut a, &pairs, &opts).unwrap();
    train::train_step(&mut b, &pairs, &opts).unwrap();
    let x = image(16, 16);
    assert_ne!(a.infer(&x).unwrap().0, b.infer(&x).unwrap().0);
}

#[test]
fn skip_paths_reach_the_output() {
    let mut s = NetworkState::new(&cfg(2, 3)).unwrap();
    let x = image(16, 16);
    let before = s.infer(&x).unwrap().0;
    for name in ["skip1.w", "skip2.w"] {
        let id = s.params.find(name).unwrap_or_else(|| panic!("{name}"));
        let mut t = s.clone();
        t.params
            .get_mut(id)
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.0);
        assert!(
            t.infer(&x).unwrap().0.max_abs_diff(&before).unwrap() > 1e-6,
            "{name}"
        );
    }
    let id = s.params.find("skip1.w").unwrap();
    s.params.get_mut(id).data_mut()[0] += 1e-3;
    assert_ne!(s.infer(&x).unwrap().0, before);
}

#[test]
fn restored_checkpoint_continues_bitwise() {
    let tc = TrainConfig {
        net: cfg(2, 2),
        iters: 3,
        height: 8,
        width: 8,
        pairs: 2,
        ..Default::default()
    };
    let (mut live, _) = train::train(&tc).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.ckpt");
    checkpoint::save(&live, &path).unwrap();
    let mut restored = checkpoint::load(&path).unwrap();
    assert_eq!(restored.iteration, 3);
    let fixed = tc.fixed_pairs().unwrap();
    let batch = train::batch_for(&tc, &fixed, 4).unwrap();
    let la = train::train_step(&mut live, &batch, &tc.loss).unwrap();
    let lb = train::train_step(&mut restored, &batch, &tc.loss).unwrap();
    assert_eq!(la.total.to_bits(), lb.total.to_bits());
    assert_eq!(live.params, restored.params);
    assert_eq!(checkpoint::encode(&live), checkpoint::encode(&restored));
}

#[test]
fn trained_heads_separate_scene_from_flare() {
    let tc = TrainConfig {
        net: cfg(4, 2),
        iters: 150,
        batch: 2,
        lr: 2e-3,
        height: 16,
        width: 16,
        pairs: 4,
        ..Default::default()
    };
    let (state, _) = train::train(&tc).unwrap();
    let mae = |a: &Tensor, b: &Tensor| a.zip_map(b, |x, y| (x - y).abs()).unwrap().mean();
    for p in tc.fixed_pairs().unwrap() {
        let (img, fl) = state.infer(&p.input).unwrap();
        assert!(mae(&img, &p.clean) < mae(&img, &p.flare));
        assert!(mae(&fl, &p.flare) < mae(&fl, &p.clean));
    }
}
