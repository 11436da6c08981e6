mod common;

use std::fs;

use common::{synthetic_split, toy_encoder};
use layerprobe_core::audio::{apply_window, CropWindow};
use layerprobe_core::features::{cache_layer_features, FeatureCache, FeatureExtractor};
use layerprobe_core::{EncoderModel, SynthSpec, Utterance};

const CROP: usize = 4000;

fn corpus(dir: &std::path::Path) -> Vec<Utterance> {
    let mut spec = SynthSpec::new(3, 21);
    spec.duration_samples = 3000;
    synthetic_split(dir, &spec)
}

fn window() -> CropWindow {
    CropWindow::Window {
        start: 0,
        len: CROP,
    }
}

fn read_all(extractor: &FeatureExtractor<'_, f32>, utts: &[Utterance]) {
    for u in utts {
        extractor.features(&u.audio, window(), true).unwrap();
    }
}

#[test]
fn cached_pass_runs_no_encoder_and_matches_fresh_encode() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = corpus(&tmp.path().join("audio"));
    let model = toy_encoder(3, 8, 4);
    let cache = cache_layer_features(&utts, &model, 3, CROP, tmp.path().join("cache")).unwrap();
    assert_eq!(model.encode_calls(), utts.len() as u64);

    model.reset_counters();
    let extractor = FeatureExtractor::new(&model, 3)
        .unwrap()
        .without_memo()
        .with_disk_cache(cache.clone());
    read_all(&extractor, &utts);
    assert_eq!(model.encode_calls(), 0);
    assert_eq!(model.layer_invocations(), 0);

    for u in &utts {
        let cached = extractor.features(&u.audio, window(), true).unwrap();
        let fresh = model.encode(&apply_window(&u.audio, window()), 3).unwrap();
        assert!(cached.bitwise_eq(&fresh), "{}", u.entry.utt_id);
    }
}

#[test]
fn fewer_layers_reuse_the_deeper_entries() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = corpus(&tmp.path().join("audio"));
    let model = toy_encoder(6, 8, 5);
    let dir = tmp.path().join("cache");
    cache_layer_features(&utts, &model, 6, CROP, &dir).unwrap();

    model.reset_counters();
    let cache = cache_layer_features(&utts, &model, 4, CROP, &dir).unwrap();
    assert_eq!(model.encode_calls(), 0);
    for u in &utts {
        let four = cache
            .load::<f32>(&u.entry.utt_id, window(), 4)
            .unwrap()
            .unwrap();
        let six = cache
            .load::<f32>(&u.entry.utt_id, window(), 6)
            .unwrap()
            .unwrap();
        assert!(four.bitwise_eq(&six.truncated(4).unwrap()));
    }
}

#[test]
fn stale_entries_are_recomputed() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = corpus(&tmp.path().join("audio"));
    let dir = tmp.path().join("cache");
    let old = toy_encoder(2, 8, 6);
    cache_layer_features(&utts, &old, 2, CROP, &dir).unwrap();

    let new: EncoderModel<f32> = toy_encoder(2, 8, 7);
    assert_ne!(old.checksum(), new.checksum());
    let cache = cache_layer_features(&utts, &new, 2, CROP, &dir).unwrap();
    assert_eq!(new.encode_calls(), utts.len() as u64);
    for u in &utts {
        let got = cache
            .load::<f32>(&u.entry.utt_id, window(), 2)
            .unwrap()
            .unwrap();
        let fresh = new.encode(&apply_window(&u.audio, window()), 2).unwrap();
        assert!(got.bitwise_eq(&fresh));
    }
}

#[test]
fn corrupt_entries_are_misses() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = corpus(&tmp.path().join("audio"));
    let model = toy_encoder(2, 8, 8);
    let cache = cache_layer_features(&utts, &model, 2, CROP, tmp.path().join("cache")).unwrap();
    let path = cache.entry_path(&utts[0].entry.utt_id, window());
    fs::write(&path, b"not a container").unwrap();
    assert!(cache
        .load::<f32>(&utts[0].entry.utt_id, window(), 2)
        .unwrap()
        .is_none());
    assert!(!path.exists());
}

#[test]
fn random_windows_bypass_every_cache() {
    let tmp = tempfile::tempdir().unwrap();
    let utts = corpus(&tmp.path().join("audio"));
    let model = toy_encoder(2, 8, 9);
    let cache = FeatureCache::new(tmp.path().join("cache"), model.checksum()).unwrap();
    let extractor = FeatureExtractor::new(&model, 2)
        .unwrap()
        .with_disk_cache(cache.clone());
    let w = CropWindow::Window {
        start: 17,
        len: CROP,
    };
    extractor.features(&utts[0].audio, w, false).unwrap();
    extractor.features(&utts[0].audio, w, false).unwrap();
    assert_eq!(model.encode_calls(), 2);
    assert!(!cache.entry_path(&utts[0].entry.utt_id, w).exists());
}
