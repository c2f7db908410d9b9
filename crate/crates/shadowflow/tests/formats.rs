use std::path::Path;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use shadowflow::checkpoint::{self, Checkpoint};
use shadowflow::config;
use shadowflow::{flo, t4};
use shadowflow_core::detector::{BackboneConfig, DetectorParams};
use shadowflow_core::flowwarp::FlowField;
use shadowflow_core::training::{FlowSource, TrainConfig};
use shadowflow_core::{Shape, Tensor4};

fn f32_grid(w: usize, h: usize, vals: &[f32]) -> FlowField {
    let mut t = Tensor4::zeros(Shape::new(1, 2, h, w));
    for y in 0..h {
        for x in 0..w {
            let i = 2 * (y * w + x);
            t.set(0, 0, y, x, vals[i] as f64);
            t.set(0, 1, y, x, vals[i + 1] as f64);
        }
    }
    FlowField::new(t).unwrap()
}

#[test]
fn flo_layout_matches_the_reference_bytes() {
    let flow = f32_grid(2, 1, &[1.5, -2.0, 0.25, 3.0]);
    let bytes = flo::encode(&flow);
    let mut want = Vec::new();
    want.extend_from_slice(&202021.25f32.to_le_bytes());
    want.extend_from_slice(&2i32.to_le_bytes());
    want.extend_from_slice(&1i32.to_le_bytes());
    for v in [1.5f32, -2.0, 0.25, 3.0] {
        want.extend_from_slice(&v.to_le_bytes());
    }
    assert_eq!(bytes, want);
    assert_eq!(&bytes[..4], b"PIEH");
}

#[test]
fn flo_rejects_corrupt_input() {
    let p = Path::new("x.flo");
    let good = flo::encode(&FlowField::zeros(1, 3, 4));
    assert!(flo::decode(&good[..good.len() - 1], p).is_err());
    let mut bad = good.clone();
    bad[0] ^= 1;
    assert!(flo::decode(&bad, p).is_err());
    let mut neg = good;
    neg[4..8].copy_from_slice(&(-4i32).to_le_bytes());
    assert!(flo::decode(&neg, p).is_err());
}

#[test]
fn t4_layout_and_errors() {
    let t = Tensor4::from_vec(Shape::new(1, 1, 1, 2), vec![1.0, -0.5]).unwrap();
    let b = t4::encode(&t);
    assert_eq!(&b[..4], b"T4v1");
    assert_eq!(&b[4..20], &[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0, 2, 0, 0, 0]);
    assert_eq!(&b[20..28], &1.0f64.to_le_bytes());
    let p = Path::new("t.t4");
    assert!(t4::decode(&b[..27], p).is_err());
    assert!(t4::decode(b"T4v2", p).is_err());
}

proptest! {
    #[test]
    fn flo_round_trips_bit_exactly(w in 1usize..6, h in 1usize..6, seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vals: Vec<f32> = (0..2 * w * h).map(|_| rand::Rng::gen_range(&mut rng, -50.0f32..50.0)).collect();
        let flow = f32_grid(w, h, &vals);
        let bytes = flo::encode(&flow);
        let back = flo::decode(&bytes, Path::new("p.flo")).unwrap();
        prop_assert_eq!(&back, &flow);
        prop_assert_eq!(flo::encode(&back), bytes);
    }

    #[test]
    fn t4_round_trips_bit_exactly(dims in (1usize..3, 1usize..4, 1usize..5, 1usize..5), bits in proptest::collection::vec(any::<u64>(), 80)) {
        let s = Shape::new(dims.0, dims.1, dims.2, dims.3);
        let data: Vec<f64> = bits.iter().cycle().take(s.len()).map(|&b| f64::from_bits(b)).collect();
        let t = Tensor4::from_vec(s, data).unwrap();
        let bytes = t4::encode(&t);
        let back = t4::decode(&bytes, Path::new("p.t4")).unwrap();
        prop_assert_eq!(t4::encode(&back), bytes);
    }
}

#[test]
fn checkpoint_round_trip_is_exact() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig { widths: [4, 8, 8], strides: [2, 2, 2], input_size: 16 };
    let mut params = DetectorParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    params.into_tk[2].w2[1] = -0.125;
    params.stages[0].bn_a.running_var[0] = 7.0;
    let ckpt = Checkpoint { params, exchange: false };
    let path = dir.path().join("ck");
    checkpoint::save(&path, &ckpt, Some(&[0.5, 0.25])).unwrap();
    let back = checkpoint::load(&path).unwrap();
    assert_eq!(back, ckpt);
    assert_eq!(std::fs::read_to_string(path.join("losses.txt")).unwrap().lines().count(), 2);
    // saving again produces identical bytes
    let again = dir.path().join("ck2");
    checkpoint::save(&again, &back, Some(&[0.5, 0.25])).unwrap();
    for e in std::fs::read_dir(&path).unwrap() {
        let name = e.unwrap().file_name();
        assert_eq!(std::fs::read(path.join(&name)).unwrap(), std::fs::read(again.join(&name)).unwrap());
    }
    assert!(checkpoint::load(&dir.path().join("missing")).is_err());
}

#[test]
fn checkpoint_with_tampered_manifest_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = BackboneConfig { widths: [4, 8, 8], strides: [2, 2, 2], input_size: 16 };
    let params = DetectorParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
    let path = dir.path().join("ck");
    checkpoint::save(&path, &Checkpoint { params, exchange: true }, None).unwrap();
    let m = path.join("manifest.txt");
    let text = std::fs::read_to_string(&m).unwrap().replace("widths 4 8 8", "widths 4 8 16");
    std::fs::write(&m, text).unwrap();
    assert!(checkpoint::load(&path).is_err());
}

#[test]
fn config_parsing() {
    let text = "# desk run\nbase_lr = 0.01\nmax_iters=10 # short\nwidths = 4, 8, 8\nfgwarp = false\nflow_source = block-match\nflow_block = 4\n";
    let c = config::parse_str(text, TrainConfig::default()).unwrap();
    assert_eq!(c.base_lr, 0.01);
    assert_eq!(c.max_iters, 10);
    assert_eq!(c.widths, [4, 8, 8]);
    assert!(!c.fgwarp);
    assert_eq!(c.flow_source, FlowSource::BlockMatch { block: 4, search: 8 });
    assert_eq!(config::parse_str(&config::render(&c), TrainConfig::default()).unwrap(), c);
    assert!(config::parse_str("bogus = 1", TrainConfig::default()).is_err());
    assert!(config::parse_str("max_iters = ten", TrainConfig::default()).is_err());
    assert!(config::parse_str("max_iters 10", TrainConfig::default()).is_err());
}
