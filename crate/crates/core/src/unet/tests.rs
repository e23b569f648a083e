use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::data_io::{Volume, VolumeHeader};
use crate::tensor::{sigmoid, AdamConfig, AdamState};

fn tiny(seed: u64) -> UNetConfig {
    UNetConfig {
        base_channels: 2,
        patch_shape: [8, 8, 4],
        seed,
        ..UNetConfig::default()
    }
}

fn random_tensor<T: Scalar>(shape: &[usize], seed: u64) -> Tensor<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.random_range(-1.0..1.0))).unwrap()
}

fn shape_of(net: &UNet, name: &str) -> Vec<usize> {
    net.parameters()
        .iter()
        .find(|p| p.name == name)
        .unwrap_or_else(|| panic!("no parameter {name}"))
        .value
        .shape()
        .to_vec()
}

#[test]
fn default_channel_ladder_doubles_per_level() {
    let net = UNet::<f32>::build(UNetConfig::default()).unwrap();
    assert_eq!(shape_of(&net, "enc0.conv1.weight"), [16, 1, 3, 3, 3]);
    assert_eq!(shape_of(&net, "enc1.conv2.weight"), [32, 32, 3, 3, 3]);
    assert_eq!(shape_of(&net, "enc2.conv2.weight"), [64, 64, 3, 3, 3]);
    assert_eq!(shape_of(&net, "up1.weight"), [64, 32, 2, 2, 2]);
    // decoder input = upsampled + skip channels
    assert_eq!(shape_of(&net, "dec1.conv1.weight"), [32, 64, 3, 3, 3]);
    assert_eq!(shape_of(&net, "dec0.conv1.weight"), [16, 32, 3, 3, 3]);
    assert_eq!(shape_of(&net, "head.weight"), [3, 16, 1, 1, 1]);
    assert_eq!(net.config().pool_windows(), vec![[2, 2, 2], [2, 2, 2]]);
    let counted: usize = net.parameters().iter().map(|p| p.value.len()).sum();
    assert_eq!(net.parameter_count(), counted);
}

#[test]
fn shallow_patches_stop_pooling_along_z() {
    let cfg = UNetConfig {
        patch_shape: [16, 16, 2],
        levels: 3,
        ..UNetConfig::default()
    };
    assert_eq!(cfg.pool_windows(), vec![[2, 2, 2], [1, 2, 2]]);
}

#[test]
fn build_is_deterministic_per_seed() {
    let a = UNet::<f32>::build(tiny(7)).unwrap();
    let b = UNet::<f32>::build(tiny(7)).unwrap();
    let c = UNet::<f32>::build(tiny(8)).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.parameters()[0].value, c.parameters()[0].value);
    let gamma = a
        .parameters()
        .iter()
        .find(|p| p.name == "dec0.bn2.gamma")
        .unwrap();
    assert!(gamma.value.data().iter().all(|&v| v == 1.0));
}

#[test]
fn invalid_configs_are_rejected() {
    for cfg in [
        UNetConfig {
            patch_shape: [62, 64, 4],
            ..UNetConfig::default()
        },
        UNetConfig {
            classes: 1,
            ..UNetConfig::default()
        },
        UNetConfig {
            base_channels: 0,
            ..UNetConfig::default()
        },
        UNetConfig {
            levels: 0,
            ..UNetConfig::default()
        },
    ] {
        assert!(matches!(UNet::<f32>::build(cfg), Err(UNetError::Config(_))));
    }
}

#[test]
fn forward_preserves_spatial_shape() {
    let cfg = UNetConfig {
        base_channels: 4,
        ..UNetConfig::default()
    };
    let net = UNet::<f32>::build(cfg).unwrap();
    let out = net.infer(&random_tensor(&[2, 1, 4, 64, 64], 1)).unwrap();
    assert_eq!(out.shape(), [2, 3, 4, 64, 64]);
    assert!(matches!(
        net.infer(&random_tensor(&[1, 1, 4, 32, 64], 1)),
        Err(UNetError::Tensor(_))
    ));
}

#[test]
fn fresh_model_gives_finite_probabilities_on_zero_input() {
    let net = UNet::<f32>::build(tiny(3)).unwrap();
    let logits = net
        .infer(&Tensor::zeros(&[1, 1, 4, 8, 8]).unwrap())
        .unwrap();
    assert!(sigmoid(&logits).data().iter().all(|&p| p > 0.0 && p < 1.0));
}

#[test]
fn eval_forward_is_pure() {
    let mut net = UNet::<f32>::build(tiny(4)).unwrap();
    let x = random_tensor(&[2, 1, 4, 8, 8], 9);
    net.forward_train(&x).unwrap();
    let before = net.clone();
    let a = net.infer(&x).unwrap();
    let b = net.infer(&x).unwrap();
    assert_eq!(a, b);
    assert_eq!(net, before);
}

#[test]
fn train_forward_moves_running_stats() {
    let mut net = UNet::<f32>::build(tiny(4)).unwrap();
    let before: Vec<_> = net.running_stats().map(|(_, s)| s.clone()).collect();
    net.forward_train(&random_tensor(&[2, 1, 4, 8, 8], 2))
        .unwrap();
    let after: Vec<_> = net.running_stats().map(|(_, s)| s.clone()).collect();
    assert_ne!(before, after);
}

/// Central differences of the whole network along random parameter
/// directions, in double precision. Element-wise checks live with the
/// individual layers; a directional probe stays clear of ReLU and max-pool
/// kinks that an element-wise sweep over every weight would eventually hit.
#[test]
fn whole_network_directional_derivatives_match() {
    let net = UNet::<f32>::build(UNetConfig {
        base_channels: 2,
        // large enough that the bottleneck norm sees more than two values
        patch_shape: [8, 8, 4],
        seed: 11,
        ..UNetConfig::default()
    })
    .unwrap()
    .cast::<f64>();
    let x: Tensor<f64> = random_tensor(&[2, 1, 4, 8, 8], 5);
    let r: Tensor<f64> = random_tensor(&[2, 3, 4, 8, 8], 6);
    let loss = |n: &UNet<f64>| {
        let (out, _) = n.clone().forward_train(&x).unwrap();
        out.dot(&r).unwrap()
    };

    let mut analytic_net = net.clone();
    let (_, tape) = analytic_net.forward_train(&x).unwrap();
    analytic_net.backward(tape, &r).unwrap();

    let h = 1e-6;
    for trial in 0..5u64 {
        let dirs: Vec<Tensor<f64>> = net
            .parameters()
            .iter()
            .enumerate()
            .map(|(i, p)| random_tensor(p.value.shape(), 100 * trial + i as u64))
            .collect();
        let analytic: f64 = analytic_net
            .parameters()
            .iter()
            .zip(&dirs)
            .map(|(p, d)| p.grad.dot(d).unwrap())
            .sum();
        let shifted = |sign: f64| {
            let mut probe = net.clone();
            for (p, d) in probe.parameters_mut().iter_mut().zip(&dirs) {
                for (v, dv) in p.value.data_mut().iter_mut().zip(d.data()) {
                    *v += sign * h * dv;
                }
            }
            loss(&probe)
        };
        let numeric = (shifted(1.0) - shifted(-1.0)) / (2.0 * h);
        let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs());
        assert!(
            rel < 1e-5,
            "trial {trial}: analytic {analytic}, numeric {numeric}, rel {rel}"
        );
    }
}

#[test]
fn predict_labels_follows_the_largest_logit() {
    let favor2 =
        Tensor::from_fn(&[1, 3, 2, 2, 2], |i| if i / 8 == 2 { 1.0f32 } else { -1.0 }).unwrap();
    assert_eq!(predict_labels(&favor2).unwrap(), vec![2u8; 8]);
    let tied = Tensor::full(&[2, 3, 1, 2, 2], 0.25f32).unwrap();
    assert_eq!(predict_labels(&tied).unwrap(), vec![0u8; 8]);
}

#[test]
fn predict_labels_matches_brute_force_sigmoid_argmax() {
    let logits: Tensor<f64> = random_tensor(&[2, 3, 3, 4, 5], 21).map(|v| 6.0 * v);
    let got = predict_labels(&logits).unwrap();
    let vol = 60;
    for b in 0..2 {
        for i in 0..vol {
            let s: Vec<f64> = (0..3)
                .map(|c| 1.0 / (1.0 + (-logits.data()[b * 3 * vol + c * vol + i]).exp()))
                .collect();
            let mut best = 0;
            for c in 1..3 {
                if s[c] > s[best] {
                    best = c;
                }
            }
            assert_eq!(got[b * vol + i] as usize, best);
        }
    }
}

proptest! {
    #[test]
    fn predict_labels_is_invariant_under_sigmoid(seed in any::<u64>(), scale in 0.1f64..8.0) {
        let logits: Tensor<f64> = random_tensor::<f64>(&[1, 3, 2, 3, 4], seed).map(|v| scale * v);
        prop_assert_eq!(predict_labels(&logits).unwrap(), predict_labels(&sigmoid(&logits)).unwrap());
    }
}

#[test]
fn window_starts_cover_the_extent() {
    assert_eq!(window_starts(156, 64, 32), vec![0, 32, 64, 92]);
    assert_eq!(window_starts(6, 4, 2), vec![0, 2]);
    assert_eq!(window_starts(64, 64, 32), vec![0]);
    assert_eq!(window_starts(10, 4, 4), vec![0, 4, 6]);
}

fn random_volume(dims: [usize; 3], seed: u64) -> Volume {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.iter().product();
    Volume::new(
        VolumeHeader::new(dims, [1.0; 3]),
        (0..n).map(|_| rng.random::<f32>()).collect(),
    )
}

#[test]
fn constant_model_stitches_to_its_single_patch_prediction() {
    let mut net = UNet::<f32>::build(tiny(5)).unwrap();
    for p in net.parameters_mut() {
        p.value.fill(0.0);
        if p.name == "head.bias" {
            p.value = Tensor::new(&[3], vec![0.0, -1.0, 2.0]).unwrap();
        }
    }
    let vol = random_volume([20, 12, 6], 1);
    let mask = sliding_window_infer(&net, &vol, [3, 4, 2]).unwrap();
    let single = predict_labels(&net.infer(&random_tensor(&[1, 1, 4, 8, 8], 3)).unwrap()).unwrap();
    assert!(single.iter().all(|&l| l == 2));
    assert!(mask.labels.iter().all(|&l| l == 2));
}

#[test]
fn non_overlapping_windows_tile_independent_predictions() {
    let net = UNet::<f32>::build(tiny(6)).unwrap();
    let dims = [16, 8, 8];
    let vol = random_volume(dims, 2);
    let mask = sliding_window_infer(&net, &vol, [8, 8, 4]).unwrap();
    for oz in [0, 4] {
        for ox in [0, 8] {
            let mut patch = Vec::new();
            for z in 0..4 {
                for y in 0..8 {
                    for x in 0..8 {
                        patch.push(vol.values[voxel(dims, ox + x, y, oz + z)]);
                    }
                }
            }
            let labels = predict_labels(
                &net.infer(&Tensor::new(&[1, 1, 4, 8, 8], patch).unwrap())
                    .unwrap(),
            )
            .unwrap();
            let mut k = 0;
            for z in 0..4 {
                for y in 0..8 {
                    for x in 0..8 {
                        assert_eq!(mask.labels[voxel(dims, ox + x, y, oz + z)], labels[k]);
                        k += 1;
                    }
                }
            }
        }
    }
}

fn voxel(dims: [usize; 3], x: usize, y: usize, z: usize) -> usize {
    crate::data_io::voxel_index(dims, x, y, z)
}

#[test]
fn sliding_window_rejects_small_volumes_and_bad_strides() {
    let net = UNet::<f32>::build(tiny(1)).unwrap();
    assert!(sliding_window_infer(&net, &random_volume([8, 8, 3], 0), [4, 4, 2]).is_err());
    assert!(sliding_window_infer(&net, &random_volume([16, 16, 4], 0), [9, 4, 2]).is_err());
}

fn trained_model() -> (UNet, Vec<AdamState>) {
    let mut net = UNet::<f32>::build(tiny(12)).unwrap();
    let mut states: Vec<AdamState> = net
        .parameters()
        .iter()
        .map(|p| AdamState::new(p, AdamConfig::default()))
        .collect();
    let x = random_tensor(&[2, 1, 4, 8, 8], 4);
    let (logits, tape) = net.forward_train(&x).unwrap();
    let g = logits.map(|v| v * 0.01);
    net.backward(tape, &g).unwrap();
    let mut refs: Vec<&mut Parameter> = net.parameters_mut().iter_mut().collect();
    crate::tensor::adam_step(&mut refs, &mut states, 1e-3).unwrap();
    (net, states)
}

#[test]
fn save_load_save_is_byte_identical() {
    let (net, _) = trained_model();
    let dir = tempfile::tempdir().unwrap();
    let (p1, p2) = (dir.path().join("a.csg"), dir.path().join("b.csg"));
    save_model(&net, &p1).unwrap();
    let loaded = load_model(&p1).unwrap();
    save_model(&loaded, &p2).unwrap();
    assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    for (a, b) in net.parameters().iter().zip(loaded.parameters()) {
        assert_eq!(a.value, b.value);
    }
    for ((_, a), (_, b)) in net.running_stats().zip(loaded.running_stats()) {
        assert_eq!((&a.mean, &a.var), (&b.mean, &b.var));
    }
    let x = random_tensor(&[1, 1, 4, 8, 8], 8);
    assert_eq!(net.infer(&x).unwrap(), loaded.infer(&x).unwrap());
}

#[test]
fn checkpoint_round_trips_optimizer_state() {
    let (net, states) = trained_model();
    let bytes = encode_model(&net, Some(&states)).unwrap();
    let (_, restored) = decode_model(&bytes).unwrap();
    assert_eq!(restored.unwrap(), states);
    assert!(decode_model(&encode_model(&net, None).unwrap())
        .unwrap()
        .1
        .is_none());
}

#[test]
fn malformed_files_map_to_distinct_errors() {
    let (net, _) = trained_model();
    let bytes = encode_model(&net, None).unwrap();

    let mut magic = bytes.clone();
    magic[0] = b'X';
    assert!(matches!(decode_model(&magic), Err(UNetError::BadMagic)));

    let mut version = bytes.clone();
    version[4] = 9;
    assert!(matches!(
        decode_model(&version),
        Err(UNetError::Version { found: 9, .. })
    ));

    for cut in [3, 7, 20, bytes.len() - 1] {
        assert!(
            matches!(decode_model(&bytes[..cut]), Err(UNetError::Truncated(_))),
            "cut at {cut}"
        );
    }

    // rewrite one listed shape so it disagrees with the configuration
    let len = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
    let json = std::str::from_utf8(&bytes[9..9 + len]).unwrap();
    let tampered = json.replacen("\"shape\":[2,1,3,3,3]", "\"shape\":[2,1,3,3,1]", 1);
    assert_ne!(tampered, json);
    let mut chain = bytes[..5].to_vec();
    chain.extend_from_slice(&(tampered.len() as u32).to_le_bytes());
    chain.extend_from_slice(tampered.as_bytes());
    chain.extend_from_slice(&bytes[9 + len..]);
    assert!(matches!(
        decode_model(&chain),
        Err(UNetError::ShapeChain(_))
    ));

    let mut garbage = bytes[..5].to_vec();
    garbage.extend_from_slice(&2u32.to_le_bytes());
    garbage.extend_from_slice(b"{]");
    assert!(matches!(decode_model(&garbage), Err(UNetError::Header(_))));
}
