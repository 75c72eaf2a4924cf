mod common;

use std::collections::BTreeMap;

use common::{build, cond_for, randn, randn32, tiny_config};
use condvid::backbone::{
    attend, load_checkpoint, propagate_first_frame, save_checkpoint, Backbone, BackboneConfig,
    NoHook, SiteHook, StaticOverrides, TapAddress, TapKind, TapSet,
};
use condvid::{Error, Result, Tape, Tensor, Var};

fn addr(s: &str) -> TapAddress {
    s.parse().unwrap()
}

fn bits(t: &Tensor) -> Vec<u32> {
    t.data().iter().map(|v| v.to_bits()).collect()
}

fn frame(t: &Tensor, j: usize) -> Tensor {
    t.narrow(0, j, 1).unwrap()
}

/// Propagates frame 1 at every key/value site.
struct KvOnly;

impl SiteHook<f32> for KvOnly {
    fn at_site(&mut self, addr: &TapAddress, live: &Var<f32>) -> Result<Option<Var<f32>>> {
        Ok(match addr.kind {
            TapKind::Key | TapKind::Value => Some(propagate_first_frame(live)?),
            _ => None,
        })
    }
}

#[test]
fn same_seed_same_weights() {
    let cfg = tiny_config(5);
    assert_eq!(build(&cfg).checksum(), build(&cfg).checksum());
    assert_ne!(build(&cfg).checksum(), build(&tiny_config(6)).checksum());
    let bb = build(&cfg);
    assert_eq!(bb.params(), build(&cfg).params());
}

#[test]
fn indivisible_size_is_rejected() {
    let cfg = BackboneConfig {
        height: 10,
        ..Default::default()
    };
    assert!(matches!(Backbone::<f32>::build(&cfg), Err(Error::Config(_))));
}

#[test]
fn temporal_off_keeps_frames_independent() {
    let cfg = BackboneConfig {
        temporal_enabled: false,
        ..tiny_config(1)
    };
    let bb = build(&cfg);
    let cond = cond_for(&cfg, 1);
    let z = randn32(2, &[3, 4, 8, 8]);
    let eps = bb.predict(&z, 500, &cond).unwrap();

    let mut z2 = z.to_vec();
    for v in &mut z2[256..512] {
        *v += 0.5;
    }
    let eps2 = bb.predict(&Tensor::new([3, 4, 8, 8], z2).unwrap(), 500, &cond).unwrap();
    assert_eq!(bits(&frame(&eps, 0)), bits(&frame(&eps2, 0)));
    assert_eq!(bits(&frame(&eps, 2)), bits(&frame(&eps2, 2)));
    assert_ne!(bits(&frame(&eps, 1)), bits(&frame(&eps2, 1)));

    let perm = [2, 0, 1];
    let zp = Tensor::concat(&perm.iter().map(|&j| frame(&z, j)).collect::<Vec<_>>().iter().collect::<Vec<_>>(), 0).unwrap();
    let ep = bb.predict(&zp, 500, &cond).unwrap();
    for (k, &j) in perm.iter().enumerate() {
        assert_eq!(bits(&frame(&ep, k)), bits(&frame(&eps, j)));
    }
}

#[test]
fn temporal_on_mixes_frames() {
    let cfg = tiny_config(1);
    let bb = build(&cfg);
    let cond = cond_for(&cfg, 1);
    let z = randn32(2, &[3, 4, 8, 8]);
    let eps = bb.predict(&z, 500, &cond).unwrap();
    let mut z2 = z.to_vec();
    for v in &mut z2[256..512] {
        *v += 0.5;
    }
    let eps2 = bb.predict(&Tensor::new([3, 4, 8, 8], z2).unwrap(), 500, &cond).unwrap();
    assert_ne!(bits(&frame(&eps, 0)), bits(&frame(&eps2, 0)));
    // Temporal-off is a small perturbation of temporal-on.
    let off = bb.with_temporal(false).predict(&z, 500, &cond).unwrap();
    let gap = off.rel_l2(&eps).unwrap();
    assert!(gap > 0.0 && gap < 0.5, "{gap}");
}

#[test]
fn forward_is_deterministic_and_shape_preserving() {
    let cfg = BackboneConfig::default();
    let bb = build(&cfg);
    let cond = cond_for(&cfg, 3);
    let z = randn32(4, &[4, 4, 16, 16]);
    let a = bb.predict(&z, 961, &cond).unwrap();
    let b = bb.predict(&z, 961, &cond).unwrap();
    assert_eq!(a.shape(), z.shape());
    assert_eq!(bits(&a), bits(&b));
    let out = bb.forward(&Var::constant(z.clone()), 961, &cond, &TapSet::new(), &mut NoHook).unwrap();
    assert!(out.taps.is_empty());
    assert_eq!(bits(out.eps.value()), bits(&a));
}

#[test]
fn taps_match_site_shapes() {
    let cfg = tiny_config(2);
    let bb = build(&cfg);
    let taps: TapSet = cfg.sites().into_iter().collect();
    let out = bb
        .forward(&Var::constant(randn32(1, &[3, 4, 8, 8])), 300, &cond_for(&cfg, 1), &taps, &mut NoHook)
        .unwrap();
    assert_eq!(out.taps.len(), taps.len());
    for a in &taps {
        assert_eq!(out.taps[a].shape(), cfg.site_shape(a, 3).unwrap().as_slice(), "{a}");
    }
    let bundle = out.bundle(300);
    assert_eq!(bundle.timestep, 300);
    assert!(bundle.get(&addr("up.1.q.0")).is_ok());
}

#[test]
fn self_substitution_is_identity() {
    let cfg = tiny_config(3);
    let bb = build(&cfg);
    let cond = cond_for(&cfg, 1);
    let z = Var::constant(randn32(7, &[3, 4, 8, 8]));
    let sites = [addr("up.1.q.1"), addr("up.1.res.0"), addr("up.2.v.0")];
    let taps: TapSet = sites.iter().copied().collect();
    let plain = bb.forward(&z, 400, &cond, &taps, &mut NoHook).unwrap();
    let map: BTreeMap<_, _> = plain.taps.iter().map(|(a, v)| (*a, v.value().clone())).collect();
    let mut hook = StaticOverrides::new(map);
    let replay = bb.forward(&z, 400, &cond, &taps, &mut hook).unwrap();
    assert_eq!(bits(plain.eps.value()), bits(replay.eps.value()));
}

#[test]
fn kv_propagation_copies_first_frame() {
    let cfg = tiny_config(4);
    let bb = build(&cfg);
    let taps: TapSet = cfg.sites().into_iter().filter(|a| matches!(a.kind, TapKind::Key | TapKind::Value)).collect();
    let out = bb
        .forward(&Var::constant(randn32(8, &[3, 4, 8, 8])), 600, &cond_for(&cfg, 1), &taps, &mut KvOnly)
        .unwrap();
    for (a, v) in &out.taps {
        let f1 = bits(&frame(v.value(), 0));
        for j in 1..3 {
            assert_eq!(bits(&frame(v.value(), j)), f1, "{a} frame {}", j + 1);
        }
    }
}

#[test]
fn override_errors() {
    let cfg = tiny_config(1);
    let bb = build(&cfg);
    let cond = cond_for(&cfg, 1);
    let z = Var::constant(randn32(1, &[3, 4, 8, 8]));
    let run = |map: BTreeMap<TapAddress, Tensor>| {
        bb.forward(&z, 10, &cond, &TapSet::new(), &mut StaticOverrides::new(map)).map(|_| ())
    };
    let wrong = BTreeMap::from([(addr("up.1.q.0"), Tensor::zeros([3, 5, 5]).unwrap())]);
    assert!(matches!(run(wrong), Err(Error::ShapeMismatch { .. })));
    let missing = BTreeMap::from([(addr("up.7.q.0"), Tensor::zeros([1]).unwrap())]);
    assert!(matches!(run(missing), Err(Error::UnresolvedTap(_))));
    let map = BTreeMap::from([(addr("up.1.map.0"), Tensor::zeros([1]).unwrap())]);
    assert!(matches!(run(map), Err(Error::MapOverride(_))));
    let taps: TapSet = [addr("down.9.res.0")].into();
    assert!(matches!(bb.forward(&z, 10, &cond, &taps, &mut NoHook), Err(Error::UnresolvedTap(_))));
}

#[test]
fn attention_properties() {
    // A single-token site attends only to itself.
    let cfg = BackboneConfig {
        height: 4,
        width: 4,
        frames: 2,
        ..tiny_config(1)
    };
    let bb = build(&cfg);
    let site = addr("mid.0.map.0");
    assert_eq!(cfg.site_shape(&site, 2).unwrap(), vec![2, cfg.attn_heads, 1, 1]);
    let out = bb
        .forward(&Var::constant(randn32(1, &[2, 4, 4, 4])), 100, &cond_for(&cfg, 1), &[site].into(), &mut NoHook)
        .unwrap();
    assert!(out.taps[&site].value().data().iter().all(|&v| v == 1.0));

    let q = Var::constant(randn32(1, &[2, 5, 8]));
    let k = Var::constant(randn32(2, &[2, 5, 8]));
    let (o, map) = attend(&q, &k, &Var::constant(Tensor::zeros([2, 5, 8]).unwrap()), 2).unwrap();
    assert!(o.value().data().iter().all(|&v| v == 0.0));
    for row in map.value().data().chunks(5) {
        assert!((row.iter().map(|&v| v as f64).sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn noise_prediction_gradient_matches_finite_differences() {
    // Directional central differences on the f64 twin of the default toy.
    let cfg = BackboneConfig::default();
    let bb = build(&cfg).cast::<f64>().unwrap();
    let cond = cond_for(&cfg, 2).cast::<f64>();
    let z = randn(11, &[4, 4, 16, 16]);
    let w = Var::constant(randn(12, &[4, 4, 16, 16]));
    let scalar = |z: &Tensor<f64>| -> f64 {
        let eps = bb.predict(z, 701, &cond).unwrap();
        eps.data().iter().zip(w.value().data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let leaf = tape.leaf(z.clone()).unwrap();
    let eps = bb.forward(&leaf, 701, &cond, &TapSet::new(), &mut NoHook).unwrap().eps;
    let loss = eps.mul(&w).unwrap().sum_all().unwrap();
    let g = tape.backward(&loss).unwrap().get(&leaf).unwrap().clone();
    for seed in 0..4u64 {
        let dir = randn(100 + seed, &[4, 4, 16, 16]);
        let h = 1e-3;
        let fd = (scalar(&z.add(&dir.scale(h)).unwrap()) - scalar(&z.sub(&dir.scale(h)).unwrap())) / (2.0 * h);
        let an: f64 = g.data().iter().zip(dir.data()).map(|(a, b)| a * b).sum();
        let rel = (an - fd).abs() / fd.abs().max(an.abs());
        assert!(rel < 1e-4, "direction {seed}: analytic {an} fd {fd} rel {rel:.3e}");
    }
}

#[test]
fn checkpoint_round_trip() {
    let cfg = tiny_config(9);
    let bb = build(&cfg);
    let dir = tempfile::tempdir().unwrap();
    save_checkpoint(&bb, dir.path()).unwrap();
    let loaded = load_checkpoint(dir.path()).unwrap();
    assert_eq!(loaded.config(), bb.config());
    assert_eq!(loaded.checksum(), bb.checksum());
    let z = randn32(3, &[3, 4, 8, 8]);
    let cond = cond_for(&cfg, 1);
    assert_eq!(bits(&loaded.predict(&z, 50, &cond).unwrap()), bits(&bb.predict(&z, 50, &cond).unwrap()));
    assert!(load_checkpoint(&dir.path().join("missing")).is_err());
}

#[test]
fn tap_address_grammar() {
    let a = addr("up.2.q.1");
    assert_eq!(a, TapAddress::up(2, TapKind::Query, 1));
    assert_eq!(a.to_string(), "up.2.q.1");
    assert_eq!(TapAddress::parse_list("up.1.res.0, up.2.q.1").unwrap().len(), 2);
    for bad in ["up.2.q", "side.1.q.0", "up.x.q.0", "up.1.z.0"] {
        assert!(bad.parse::<TapAddress>().is_err(), "{bad}");
    }
}
