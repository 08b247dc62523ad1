use proptest::prelude::*;
use uavssl::masking::{apply_mask, masked_count, sample_ratios, sample_ratios_for, MaskConfig, MaskMode};
use uavssl::numcore::RngStream;
use uavssl::patchio::{
    decode_uavt, encode_uavt, inflate_channels, load_tensor, patchify, save_tensor, unpatchify,
    Modality, RawInput,
};
use uavssl::Error;

fn image(gr: usize, gc: usize, p: usize, seed: u64) -> RawInput {
    let (h, w) = (gr * p, gc * p);
    let data = RngStream::new(seed).normal_vec(h * w * 3, 1.0);
    RawInput::new(Modality::Visual, h, w, 3, data).unwrap()
}

proptest! {
    #[test]
    fn patchify_round_trip(gr in 1usize..6, gc in 1usize..6, p in 1usize..5, seed in any::<u64>()) {
        let x = image(gr, gc, p, seed);
        let t = patchify(&x, p).unwrap();
        prop_assert_eq!(t.tokens.shape(), &[gr * gc, p * p * 3][..]);
        let back = unpatchify(&t).unwrap();
        prop_assert_eq!(back.data, x.data);
    }

    #[test]
    fn token_count_is_grid_area(h in 1usize..40, w in 1usize..40, p in 1usize..9) {
        let x = RawInput::new(Modality::Visual, h, w, 3, vec![0.0; h * w * 3]).unwrap();
        match patchify(&x, p) {
            Ok(t) => {
                prop_assert!(h % p == 0 && w % p == 0);
                prop_assert_eq!(t.len(), (h / p) * (w / p));
            }
            Err(e) => {
                prop_assert!(h % p != 0 || w % p != 0);
                prop_assert!(matches!(e, Error::Geometry(_)));
            }
        }
    }

    #[test]
    fn uavt_bytes_round_trip(dims in prop::collection::vec(1usize..5, 1..4), seed in any::<u64>()) {
        let n = dims.iter().product();
        let data: Vec<f32> = RngStream::new(seed).normal_vec(n, 3.0);
        let (d2, x2) = decode_uavt(&encode_uavt(&dims, &data).unwrap()).unwrap();
        prop_assert_eq!(d2, dims);
        prop_assert_eq!(x2, data);
    }

    #[test]
    fn truncation_is_always_detected(cut in 1usize..40) {
        let bytes = encode_uavt(&[2, 2, 3], &[1.5; 12]).unwrap();
        let short = &bytes[..bytes.len() - cut.min(bytes.len())];
        prop_assert!(decode_uavt(short).is_err());
    }

    #[test]
    fn masking_partitions_and_preserves_values(n in 2usize..60, ratio in 0.01f64..0.99, seed in any::<u64>()) {
        let x = image(1, n, 1, seed);
        let t = patchify(&x, 1).unwrap();
        let (kept, entry) = apply_mask(&t, ratio, &mut RngStream::new(seed ^ 1)).unwrap();
        entry.validate(n).unwrap();
        prop_assert_eq!(entry.masked.len(), masked_count(ratio, n));
        for (k, &pos) in kept.positions.iter().enumerate() {
            prop_assert_eq!(kept.tokens.row(k), t.tokens.row(pos));
        }
    }
}

#[test]
fn single_patch_and_vit_grid() {
    let x = image(1, 1, 4, 0);
    let t = patchify(&x, 4).unwrap();
    assert_eq!(t.len(), 1);
    assert_eq!(t.tokens.data(), &x.data[..]);

    let x = RawInput::new(Modality::Visual, 32, 32, 3, vec![0.25; 32 * 32 * 3]).unwrap();
    let t = patchify(&x, 16).unwrap();
    assert_eq!(t.tokens.shape(), &[4, 768]);
}

#[test]
fn inflation_triples_energy() {
    let data = RngStream::new(3).normal_vec(6 * 4, 1.0);
    let x = RawInput::new(Modality::Audio, 6, 4, 1, data).unwrap();
    let y = inflate_channels(&x).unwrap();
    assert_eq!(y.channels, 3);
    for r in 0..6 {
        for c in 0..4 {
            for ch in 0..3 {
                assert_eq!(y.at(r, c, ch), x.at(r, c, 0));
            }
        }
    }
    let e = |v: &[f32]| v.iter().map(|a| (*a as f64).powi(2)).sum::<f64>();
    assert!((e(&y.data) - 3.0 * e(&x.data)).abs() < 1e-9 * e(&y.data));
}

#[test]
fn truncated_file_is_corruption() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.uavt");
    save_tensor(&path, &image(2, 2, 2, 5)).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    std::fs::write(&path, &bytes[..bytes.len() - 7]).unwrap();
    assert!(matches!(load_tensor(&path, Modality::Visual), Err(Error::Corruption(_))));
}

#[test]
fn permuted_tokens_change_the_image() {
    let x = image(2, 2, 2, 8);
    let mut t = patchify(&x, 2).unwrap();
    t.positions = vec![1, 0, 2, 3];
    assert_ne!(unpatchify(&t).unwrap().data, x.data);
}

#[test]
fn mask_index_frequency_is_uniform() {
    let (n, ratio, draws) = (20usize, 0.45, 10_000usize);
    let t = patchify(&image(1, n, 1, 0), 1).unwrap();
    let root = RngStream::new(42);
    let mut hits = vec![0usize; n];
    for i in 0..draws {
        let (_, e) = apply_mask(&t, ratio, &mut root.substream("m", i as u64)).unwrap();
        for j in e.masked {
            hits[j] += 1;
        }
    }
    let p = masked_count(ratio, n) as f64 / n as f64;
    let mean = p * draws as f64;
    let sigma = (draws as f64 * p * (1.0 - p)).sqrt();
    for (j, &h) in hits.iter().enumerate() {
        assert!((h as f64 - mean).abs() <= 3.0 * sigma + 1.0, "index {j}: {h} vs {mean}");
    }
}

#[test]
fn ratio_examples() {
    assert_eq!(masked_count(0.5, 4), 2);
    assert_eq!(masked_count(0.6, 196), 118);
    let mut rng = RngStream::new(1);
    for _ in 0..100 {
        assert_eq!(sample_ratios(&mut rng, 0.45, 0.45).unwrap(), (0.45, 0.45));
    }
    let sym = MaskConfig { mode: MaskMode::Symmetric, ..Default::default() };
    for _ in 0..100 {
        let (a, v) = sample_ratios_for(&mut rng, &sym).unwrap();
        assert_eq!(a, v);
        assert!((0.3..=0.6).contains(&a));
    }
    assert!(sample_ratios(&mut rng, 0.6, 0.3).is_err());
    assert!(sample_ratios(&mut rng, 0.0, 0.5).is_err());
    assert!(sample_ratios(&mut rng, 0.5, 1.0).is_err());
}

#[test]
fn asymmetric_ratios_are_uncorrelated() {
    let mut rng = RngStream::new(7);
    let pairs: Vec<(f64, f64)> = (0..10_000).map(|_| sample_ratios(&mut rng, 0.3, 0.6).unwrap()).collect();
    let n = pairs.len() as f64;
    let (ma, mv) = (pairs.iter().map(|p| p.0).sum::<f64>() / n, pairs.iter().map(|p| p.1).sum::<f64>() / n);
    let cov = pairs.iter().map(|p| (p.0 - ma) * (p.1 - mv)).sum::<f64>() / n;
    let var = 0.09 / 12.0;
    assert!((cov / var).abs() < 0.05, "correlation {}", cov / var);
}
