use mac_core::audio::wav::{CLIP_SAMPLES, TARGET_RATE};
use mac_core::audio::{
    decode_wav, encode_tensor, load_features, load_wav, save_features, AudioTokenGrid, EncoderConfig, EncoderWeights,
    MelFrontEnd,
};
use mac_core::connector::{connect_tensor, ConnectorConfig, ConnectorVariant, MlpWeights, SeparatorPlacement};
use mac_core::numerics::Tensor;
use mac_core::pipeline::Checkpoint;
use mac_core::Error;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// RIFF/WAVE image assembled from raw chunks; odd-sized bodies get a pad byte.
fn riff(chunks: &[(&[u8; 4], Vec<u8>)]) -> Vec<u8> {
    let mut body = b"WAVE".to_vec();
    for (id, data) in chunks {
        body.extend_from_slice(*id);
        body.extend_from_slice(&(data.len() as u32).to_le_bytes());
        body.extend_from_slice(data);
        if data.len() % 2 == 1 {
            body.push(0);
        }
    }
    let mut out = b"RIFF".to_vec();
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend(body);
    out
}

fn fmt_pcm(channels: u16, rate: u32) -> Vec<u8> {
    let mut f = Vec::new();
    f.extend_from_slice(&1u16.to_le_bytes());
    f.extend_from_slice(&channels.to_le_bytes());
    f.extend_from_slice(&rate.to_le_bytes());
    f.extend_from_slice(&(rate * 2 * channels as u32).to_le_bytes());
    f.extend_from_slice(&(2 * channels).to_le_bytes());
    f.extend_from_slice(&16u16.to_le_bytes());
    f
}

fn fmt_extensible(channels: u16, rate: u32) -> Vec<u8> {
    let mut f = fmt_pcm(channels, rate);
    f[0..2].copy_from_slice(&0xFFFEu16.to_le_bytes());
    f.extend_from_slice(&22u16.to_le_bytes());
    f.extend_from_slice(&16u16.to_le_bytes());
    f.extend_from_slice(&0u32.to_le_bytes());
    // KSDATAFORMAT_SUBTYPE_PCM
    f.extend_from_slice(&[1, 0, 0, 0, 0, 0, 0x10, 0, 0x80, 0, 0, 0xAA, 0, 0x38, 0x9B, 0x71]);
    f
}

fn pcm(samples: &[i16]) -> Vec<u8> {
    samples.iter().flat_map(|s| s.to_le_bytes()).collect()
}

#[test]
fn mono_fixture_decodes_exact_values() {
    let s = [0i16, 16384, -16384, 32767, -32768];
    let w = decode_wav(&riff(&[(b"fmt ", fmt_pcm(1, 16_000)), (b"data", pcm(&s))])).unwrap();
    assert_eq!(w.sample_rate, 16_000);
    assert_eq!(w.samples, vec![0.0, 0.5, -0.5, 32767.0 / 32768.0, -1.0]);
}

#[test]
fn stereo_fixture_averages_channels() {
    let s = [16384i16, 0, -16384, -16384, 100, 300];
    let w = decode_wav(&riff(&[(b"fmt ", fmt_pcm(2, 22_050)), (b"data", pcm(&s))])).unwrap();
    assert_eq!(w.sample_rate, 22_050);
    assert_eq!(w.samples, vec![0.25, -0.5, 200.0 / 32768.0]);
}

#[test]
fn odd_length_and_unknown_chunks_are_skipped() {
    let s: Vec<i16> = (0..101).map(|i| (i * 97 - 4000) as i16).collect();
    let img = riff(&[
        (b"JUNK", vec![7; 5]),
        (b"fmt ", fmt_pcm(1, 8_000)),
        (b"LIST", b"INFOISFT\x03\x00\x00\x00ab\x00".to_vec()),
        (b"fact", 101u32.to_le_bytes().to_vec()),
        (b"data", pcm(&s)),
    ]);
    let w = decode_wav(&img).unwrap();
    assert_eq!(w.samples.len(), 101);
    assert_eq!(w.samples[100], s[100] as f64 / 32768.0);
}

#[test]
fn trailing_chunk_after_odd_data_is_ignored() {
    // An odd-length data body (a dangling half sample) followed by a pad byte and another chunk.
    let mut data = pcm(&[1000, -1000, 500]);
    data.push(0x7f);
    let w = decode_wav(&riff(&[(b"fmt ", fmt_pcm(1, 16_000)), (b"data", data), (b"id3 ", vec![1, 2, 3])])).unwrap();
    assert_eq!(w.samples.len(), 3);
}

#[test]
fn extensible_format_is_accepted() {
    let w = decode_wav(&riff(&[(b"fmt ", fmt_extensible(2, 48_000)), (b"data", pcm(&[2, 4, 6, 8]))])).unwrap();
    assert_eq!(w.samples.len(), 2);
    assert_eq!(w.sample_rate, 48_000);
}

#[test]
fn truncated_data_reports_offset() {
    let mut img = riff(&[(b"fmt ", fmt_pcm(1, 16_000)), (b"data", pcm(&[1; 10]))]);
    img.truncate(img.len() - 4);
    match decode_wav(&img) {
        Err(Error::WavFormat { offset, .. }) => assert_eq!(offset, 36),
        other => panic!("{other:?}"),
    }
}

#[test]
fn load_wav_resamples_and_fits_to_ten_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("a.wav");
    // Three seconds of stereo at 8 kHz.
    let s: Vec<i16> = (0..48_000).map(|i| ((i / 2) % 200) as i16 * 50).collect();
    std::fs::write(&path, riff(&[(b"fmt ", fmt_pcm(2, 8_000)), (b"data", pcm(&s))])).unwrap();
    let x = load_wav(&path).unwrap();
    assert_eq!(x.len(), CLIP_SAMPLES);
    assert_eq!(TARGET_RATE, 16_000);
    assert!(x[..47_000].iter().any(|v| *v != 0.0));
    assert!(x[48_000..].iter().all(|v| *v == 0.0));
}

fn full_scale_grid(seed: u64) -> AudioTokenGrid {
    let tokens = Tensor::randn(&[512, 768], 1.0, &mut ChaCha8Rng::seed_from_u64(seed));
    AudioTokenGrid::new(tokens, 64, 8).unwrap()
}

#[test]
fn feature_dump_round_trips_bit_identically() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    let grid = full_scale_grid(1);
    save_features(&path, &grid).unwrap();
    let back = load_features(&path).unwrap();
    assert_eq!(back.grid_t, 64);
    assert_eq!(back.grid_f, 8);
    assert!(back.tokens.bit_eq(&grid.tokens));
}

#[test]
fn feature_dump_with_wrong_dim_is_a_metadata_error() {
    let mut ck = full_scale_grid(2).to_checkpoint();
    ck.meta.insert("dim".into(), "512".into());
    assert!(matches!(AudioTokenGrid::from_checkpoint(&ck), Err(Error::Metadata(_))));
    let mut ck = full_scale_grid(2).to_checkpoint();
    ck.meta.remove("grid_f");
    assert!(matches!(AudioTokenGrid::from_checkpoint(&ck), Err(Error::Metadata(_))));
    let ck = Checkpoint::new().with_meta("grid_t", 1).with_meta("grid_f", 1).with_meta("dim", 1);
    assert!(matches!(AudioTokenGrid::from_checkpoint(&ck), Err(Error::Metadata(_))));
}

#[test]
fn external_full_scale_features_flow_through_connector() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("f.ckpt");
    save_features(&path, &full_scale_grid(3)).unwrap();
    let grid = load_features(&path).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let sep = Tensor::randn(&[1, 16], 1.0, &mut rng);
    for (variant, len, d_in) in [
        (ConnectorVariant::Concatenation, 64, 6144),
        (ConnectorVariant::TimeMajor, 576, 768),
        (ConnectorVariant::FrequencyMajor, 520, 768),
    ] {
        let cfg = ConnectorConfig {
            variant,
            d_enc: 768,
            grid_t: 64,
            grid_f: 8,
            d_model: 16,
            hidden_mult: 1,
            separator: SeparatorPlacement::Prefix,
        };
        assert_eq!(cfg.d_in(), d_in);
        let mlp = MlpWeights::for_config(&cfg, &mut rng);
        let seq = connect_tensor(&grid, &cfg, &mlp, &sep).unwrap();
        assert_eq!(seq.vectors.shape(), &[len, 16]);
        assert_eq!(seq.segments.len(), len);
    }
}

#[test]
fn full_scale_encoder_yields_512_tokens() {
    let cfg = EncoderConfig::full_scale();
    let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
    let x: Vec<f64> = (0..CLIP_SAMPLES).map(|i| (i as f64 * 0.05).sin() * 0.3).collect();
    let mel = MelFrontEnd::new().compute(&x).unwrap().fit_frames(cfg.mel_frames);
    let grid = encode_tensor(&mel, &w, &cfg).unwrap();
    assert_eq!((grid.grid_t, grid.grid_f, grid.dim()), (64, 8, 768));
    assert_eq!(grid.tokens.shape()[0], 512);
    // Deterministic for fixed weights and input.
    assert!(encode_tensor(&mel, &w, &cfg).unwrap().tokens.bit_eq(&grid.tokens));
}

#[test]
fn desk_encoder_yields_16_by_8_grid() {
    let cfg = EncoderConfig::desk();
    let w = EncoderWeights::init(&cfg, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let mel = MelFrontEnd::new().compute(&vec![0.0; CLIP_SAMPLES]).unwrap().fit_frames(cfg.mel_frames);
    let grid = encode_tensor(&mel, &w, &cfg).unwrap();
    assert_eq!((grid.grid_t, grid.grid_f), (16, 8));
    assert_eq!(grid.tokens.shape()[0], 128);
}
