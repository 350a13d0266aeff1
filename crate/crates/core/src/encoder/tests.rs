use proptest::prelude::*;
use rand::Rng;

use super::*;
use crate::autodiff::relative_error;
use crate::data::SideLayout;

fn small_config() -> EncoderConfig {
    EncoderConfig {
        d_track: 4,
        lstm_hidden: 3,
        conv_filters: vec![2, 3, 5],
        conv_channels: 4,
        side_hidden: 3,
        d_out: 5,
        max_len: 8,
        ..EncoderConfig::default()
    }
}

fn playlist(ids: &[u32]) -> Playlist {
    Playlist::new(ids.iter().map(|&i| TrackId(i)).collect()).unwrap()
}

fn random_playlist(rng: &mut impl Rng, len: usize, vocab: u32) -> Playlist {
    playlist(&(0..len).map(|_| rng.gen_range(0..vocab)).collect::<Vec<_>>())
}

fn random_side(rng: &mut impl Rng, width: usize) -> SideInfoVector {
    let active: Vec<usize> = (0..width).filter(|_| rng.gen_bool(0.3)).collect();
    SideInfoVector::with_bits(width, &active).unwrap()
}

fn flat_params(store: &ParamStore) -> Vec<f64> {
    store.params().iter().flat_map(|p| p.value.values().iter().copied()).collect()
}

fn set_flat(store: &mut ParamStore, x: &[f64]) {
    let mut off = 0;
    for p in store.params_mut() {
        let n = p.value.len();
        p.value.values_mut().copy_from_slice(&x[off..off + n]);
        off += n;
    }
}

#[test]
fn padded_length_keeps_last_track_in_a_window() {
    assert_eq!(EncoderConfig::default().padded_len(), 26);
    let odd = EncoderConfig { pre_pool_window: 3, ..EncoderConfig::default() };
    assert_eq!(odd.padded_len(), 25);
    let short = EncoderConfig { max_len: 1, pre_pool_window: 2, ..EncoderConfig::default() };
    assert_eq!(short.padded_len(), 2);
}

#[test]
fn default_model_has_distinct_towers_sharing_embeddings() {
    let model = QuickListsModel::new(EncoderConfig::default(), 50, 86, 1).unwrap();
    let cur = model.tower_params(TowerKind::Current);
    let fut = model.tower_params(TowerKind::Future);
    assert_eq!(cur[0], fut[0]);
    assert!(cur[1..].iter().all(|id| !fut.contains(id)));
    assert!(model.has_side_branch(TowerKind::Current));
    assert!(!model.has_side_branch(TowerKind::Future));

    let untied = EncoderConfig { tied_embeddings: false, ..EncoderConfig::default() };
    let model = QuickListsModel::new(untied, 50, 86, 1).unwrap();
    assert_ne!(model.tower_params(TowerKind::Current)[0], model.tower_params(TowerKind::Future)[0]);
}

#[test]
fn output_width_and_range_for_all_lengths() {
    let model = QuickListsModel::new(EncoderConfig::default(), 40, 86, 3).unwrap();
    let mut rng = rng::stream(3, 0);
    for len in 1..=50 {
        let p = random_playlist(&mut rng, len, 40);
        let side = random_side(&mut rng, 86);
        let e = model.encode(&p, &side, ComputeMode::Infer).unwrap();
        assert_eq!(e.dim(), 64);
        assert!(e.0.iter().all(|v| v.abs() < 1.0));
        let f = model.encode_future(&p).unwrap();
        assert_eq!(f.dim(), 64);
    }
}

#[test]
fn long_playlists_use_only_the_most_recent_tracks() {
    let model = QuickListsModel::new(small_config(), 20, 6, 4).unwrap();
    let ids: Vec<u32> = (0..15).map(|i| i % 20).collect();
    let side = SideInfoVector::with_bits(6, &[1]).unwrap();
    let full = model.encode(&playlist(&ids), &side, ComputeMode::Infer).unwrap();
    let tail = model.encode(&playlist(&ids[7..]), &side, ComputeMode::Infer).unwrap();
    assert_eq!(full, tail);
}

#[test]
fn extra_padding_changes_nothing() {
    let model = QuickListsModel::new(small_config(), 20, 6, 5).unwrap();
    let mut wider = model.clone();
    wider.config.max_len = 12;
    assert_eq!(wider.config.padded_len(), model.config.padded_len() + 4);
    let side = SideInfoVector::with_bits(6, &[0, 4]).unwrap();
    for ids in [&[3u32][..], &[1, 2, 3], &[5, 6, 7, 8, 9, 10, 11, 12]] {
        let p = playlist(ids);
        assert_eq!(
            model.encode(&p, &side, ComputeMode::Infer).unwrap(),
            wider.encode(&p, &side, ComputeMode::Infer).unwrap()
        );
    }
}

#[test]
fn out_of_vocab_and_wrong_side_width_are_errors() {
    let model = QuickListsModel::new(small_config(), 20, 6, 5).unwrap();
    let side = SideInfoVector::zeros(6);
    assert!(matches!(
        model.encode(&playlist(&[20]), &side, ComputeMode::Infer),
        Err(Error::OutOfVocab { track: 20, vocab_size: 20 })
    ));
    assert!(model.encode(&playlist(&[1]), &SideInfoVector::zeros(7), ComputeMode::Infer).is_err());
}

#[test]
fn lesions_and_cold_start_agree() {
    let model = QuickListsModel::new(small_config(), 20, 6, 6).unwrap();
    let side = SideInfoVector::with_bits(6, &[2, 3]).unwrap();
    let zero = SideInfoVector::zeros(6);
    let p = playlist(&[4, 9, 1]);
    let cold = model.encode_cold(&side).unwrap();
    assert_eq!(cold, model.encode_lesioned(&p, &side, Lesion::NO_PLAYLIST).unwrap());
    assert_eq!(
        model.encode(&p, &side, ComputeMode::Infer).unwrap(),
        model.encode_lesioned(&p, &side, Lesion::NONE).unwrap()
    );
    assert_eq!(
        model.encode(&p, &zero, ComputeMode::Infer).unwrap(),
        model.encode_lesioned(&p, &side, Lesion::NO_SIDE).unwrap()
    );
    assert_eq!(
        model.encode_lesioned(&p, &zero, Lesion::NO_SIDE).unwrap(),
        model.encode(&p, &zero, ComputeMode::Infer).unwrap()
    );
}

#[test]
fn zero_final_layer_and_zero_side_give_zero_embedding() {
    let mut model = QuickListsModel::new(small_config(), 20, 6, 7).unwrap();
    let out = model.current.out;
    model.params.get_mut(out.w).values_mut().fill(0.0);
    model.params.get_mut(out.b).values_mut().fill(0.0);
    let e = model.encode_cold(&SideInfoVector::zeros(6)).unwrap();
    assert!(e.0.iter().all(|&v| v == 0.0));
}

#[test]
fn future_weights_do_not_touch_current_outputs() {
    let model = QuickListsModel::new(small_config(), 20, 6, 8).unwrap();
    let mut perturbed = model.clone();
    for id in perturbed.tower_params(TowerKind::Future).into_iter().skip(1) {
        for v in perturbed.params.get_mut(id).values_mut() {
            *v += 0.37;
        }
    }
    let side = SideInfoVector::with_bits(6, &[5]).unwrap();
    let p = playlist(&[1, 2, 3, 4, 5]);
    assert_eq!(
        model.encode(&p, &side, ComputeMode::Infer).unwrap(),
        perturbed.encode(&p, &side, ComputeMode::Infer).unwrap()
    );
    assert_ne!(model.encode_future(&p).unwrap(), perturbed.encode_future(&p).unwrap());
}

#[test]
fn dropout_follows_the_seed_and_is_off_in_inference() {
    let model = QuickListsModel::new(small_config(), 20, 6, 9).unwrap();
    let side = SideInfoVector::with_bits(6, &[1]).unwrap();
    let p = playlist(&[3, 1, 4, 1, 5, 9]);
    let a = model.encode(&p, &side, ComputeMode::Train { seed: 11 }).unwrap();
    let b = model.encode(&p, &side, ComputeMode::Train { seed: 11 }).unwrap();
    let c = model.encode(&p, &side, ComputeMode::Train { seed: 12 }).unwrap();
    assert_eq!(a, b);
    assert_ne!(a, c);

    let mut no_drop = model.clone();
    no_drop.config.dropout_p = 0.0;
    assert_eq!(
        no_drop.encode(&p, &side, ComputeMode::Train { seed: 11 }).unwrap(),
        model.encode(&p, &side, ComputeMode::Infer).unwrap()
    );
}

#[test]
fn pretrained_vectors_seed_the_shared_table() {
    let mut rng = rng::stream(1, 1);
    let table = TrackEmbeddingTable::new(init::uniform(&[12, 4], 1.0, &mut rng)).unwrap();
    let model = QuickListsModel::with_pretrained(small_config(), &table, 6, 2).unwrap();
    let id = model.tower_params(TowerKind::Current)[0];
    assert_eq!(model.params.get(id).values(), table.as_tensor().values());
    let bad = EncoderConfig { d_track: 5, ..small_config() };
    assert!(QuickListsModel::with_pretrained(bad, &table, 6, 2).is_err());
}

#[test]
fn checkpoint_round_trip_and_incompatible_header() {
    let model = QuickListsModel::new(small_config(), 20, 6, 10).unwrap();
    let mut buf = Vec::new();
    model.write(true, &mut buf).unwrap();
    let back = QuickListsModel::read(&mut buf.as_slice()).unwrap();
    assert_eq!(back.checksum(), model.checksum());
    assert_eq!(back.config(), model.config());
    let p = playlist(&[2, 7]);
    assert_eq!(back.encode_future(&p).unwrap(), model.encode_future(&p).unwrap());

    // Same parameters, but a header that implies different shapes.
    let other = QuickListsModel::new(EncoderConfig { d_out: 6, ..small_config() }, 20, 6, 10).unwrap();
    let mut other_buf = Vec::new();
    other.write(false, &mut other_buf).unwrap();
    let header_end = 12 + u32::from_le_bytes(buf[8..12].try_into().unwrap()) as usize;
    let other_end = 12 + u32::from_le_bytes(other_buf[8..12].try_into().unwrap()) as usize;
    let mut spliced = other_buf[..other_end].to_vec();
    spliced.extend_from_slice(&buf[header_end..]);
    assert!(matches!(QuickListsModel::read(&mut spliced.as_slice()), Err(Error::Version(_))));

    let mut bad = buf.clone();
    bad[0] = b'X';
    assert!(matches!(QuickListsModel::read(&mut bad.as_slice()), Err(Error::Version(_))));
}

/// Objective `r · encode(...)`, with dropout masks fixed by the seed.
fn objective(model: &QuickListsModel, kind: TowerKind, p: &Playlist, side: &SideInfoVector, r: &[f64]) -> f64 {
    let side = model.has_side_branch(kind).then_some(side);
    let (e, _) = model.forward(kind, Some(p.tracks()), side, ComputeMode::Train { seed: 99 }).unwrap();
    e.0.iter().zip(r).map(|(a, b)| a * b).sum()
}

fn full_tower_check(seed: u64, kind: TowerKind) -> f64 {
    let mut rng = rng::stream(seed, 77);
    let cfg = EncoderConfig { side_in_future: seed % 2 == 0, ..small_config() };
    let mut model = QuickListsModel::new(cfg, 10, 6, seed).unwrap();
    // Jitter everything off its init: zero biases with a zero side vector
    // would otherwise sit exactly on the ReLU kink.
    for id in model.tower_params(kind) {
        for v in model.params.get_mut(id).values_mut() {
            *v += rng.gen_range(-0.3..0.3);
        }
    }
    let len = rng.gen_range(1..=10);
    let p = random_playlist(&mut rng, len, 10);
    let side = random_side(&mut rng, 6);
    let r: Vec<f64> = (0..5).map(|_| rng.gen_range(-1.0..1.0)).collect();

    let tracks = p.tracks();
    let side_in = model.has_side_branch(kind).then_some(&side);
    let (_, cache) = model.forward(kind, Some(tracks), side_in, ComputeMode::Train { seed: 99 }).unwrap();
    let mut grads = model.params.grad_buffer();
    model.backward(&cache, &r, &mut grads);
    let analytic = grads.flatten(&model.params);

    let x0 = flat_params(&model.params);
    let mut probe = model.clone();
    let numeric = autodiff::numeric_gradient(
        |x| {
            set_flat(&mut probe.params, x);
            objective(&probe, kind, &p, &side, &r)
        },
        &x0,
        1e-6,
    )
    .unwrap();
    // Components below 1e-7 in both are pure round-off on either side.
    analytic
        .iter()
        .zip(&numeric)
        .filter(|(a, n)| a.abs().max(n.abs()) > 1e-7)
        .map(|(&a, &n)| relative_error(a, n))
        .fold(0.0, f64::max)
}

#[test]
fn full_tower_gradients_match_finite_differences() {
    for seed in 0..20 {
        for kind in [TowerKind::Current, TowerKind::Future] {
            let err = full_tower_check(seed, kind);
            assert!(err < 1e-3, "seed {seed} {kind:?}: relative error {err}");
        }
    }
}

#[test]
fn side_layout_fits_default_model() {
    let layout = SideLayout::default();
    let model = QuickListsModel::new(EncoderConfig::default(), 10, layout.width(), 0).unwrap();
    assert_eq!(model.side_width(), 86);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn inference_is_pure_and_bounded(seed in 0u64..1000, len in 1usize..30) {
        let model = QuickListsModel::new(small_config(), 15, 6, seed).unwrap();
        let mut rng = rng::stream(seed, 5);
        let p = random_playlist(&mut rng, len, 15);
        let side = random_side(&mut rng, 6);
        let a = model.encode(&p, &side, ComputeMode::Infer).unwrap();
        let b = model.encode(&p, &side, ComputeMode::Infer).unwrap();
        prop_assert_eq!(&a, &b);
        prop_assert_eq!(a.dim(), 5);
        prop_assert!(a.0.iter().all(|v| v.abs() < 1.0));
    }
}
