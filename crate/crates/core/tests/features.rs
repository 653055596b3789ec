use candle_core::{DType, Device, Tensor};
use osscl::features::{
    log_mel, stack_features, FeatureMode, StftConfig, TfgramConfig, TfgramNet, TgramConfig, TgramNet,
};
use osscl::nn::ParamStore;

fn sine(hz: f64, len: usize) -> Vec<f32> {
    (0..len)
        .map(|n| (2.0 * std::f64::consts::PI * hz * n as f64 / 16_000.0).sin() as f32)
        .collect()
}

#[test]
fn sine_peaks_in_the_mel_bin_centered_nearest_its_frequency() {
    let cfg = StftConfig::default();
    // centers of the HTK triangles: equally spaced points on the mel axis
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let hz = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let (lo, hi) = (mel(0.0), mel(8000.0));
    let centers: Vec<f64> = (1..=cfg.n_mels)
        .map(|i| hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
        .collect();

    for tone in [440.0, 1000.0, 3150.0] {
        let want = (0..centers.len())
            .min_by(|&a, &b| (centers[a] - tone).abs().total_cmp(&(centers[b] - tone).abs()))
            .unwrap();
        let spec = log_mel(&sine(tone, cfg.clip_samples), &cfg).unwrap();
        let means: Vec<f32> = spec.rows().into_iter().map(|r| r.mean().unwrap()).collect();
        let got = (0..means.len()).max_by(|&a, &b| means[a].total_cmp(&means[b])).unwrap();
        assert_eq!(got, want, "{tone} Hz");
    }
}

#[test]
fn full_size_views_are_128_by_313() {
    let stft = StftConfig::default();
    let wave = Tensor::from_vec(sine(1000.0, 160_000), (1, 160_000), &Device::Cpu).unwrap();
    let mut ps = ParamStore::new(0, DType::F32, &Device::Cpu);
    let tgram = TgramNet::new(&mut ps, "tgram", &TgramConfig::for_stft(&stft)).unwrap();
    let tfgram = TfgramNet::new(&mut ps, "tfgram", &TfgramConfig::for_stft(&stft)).unwrap();

    let x_t = tgram.forward(&wave).unwrap();
    let (x_tf, lengths) = tfgram.forward_traced(&wave, false).unwrap();
    assert_eq!(x_t.dims(), &[1, 128, 313]);
    assert_eq!(x_tf.dims(), &[1, 128, 313]);
    // ⌊(160000 + 2·5 − 11)/5⌋ + 1
    assert_eq!(lengths.stem, (160_000 + 2 * 5 - 11) / 5 + 1);
    assert_eq!((lengths.stem, lengths.max_pool, lengths.mid_pool, lengths.out_pool), (32_000, 8_000, 626, 313));

    let mel = log_mel(&sine(1000.0, 160_000), &stft).unwrap();
    assert_eq!(mel.dim(), (128, 313));
    let mel = Tensor::from_vec(mel.into_raw_vec_and_offset().0, (1, 128, 313), &Device::Cpu).unwrap();
    let stack = stack_features(&mel, Some(&x_t), Some(&x_tf), FeatureMode::Tfst).unwrap();
    assert_eq!(stack.data.dims(), &[1, 3, 128, 313]);
    let ch0 = stack.data.narrow(1, 0, 1).unwrap().squeeze(1).unwrap();
    assert_eq!(ch0.to_vec3::<f32>().unwrap(), mel.to_vec3::<f32>().unwrap());
}

#[test]
fn silent_input_gives_zero_tgram() {
    let stft = StftConfig::default();
    let mut ps = ParamStore::new(3, DType::F32, &Device::Cpu);
    let tgram = TgramNet::new(&mut ps, "tgram", &TgramConfig::for_stft(&stft)).unwrap();
    let out = tgram.forward(&Tensor::zeros((2, 160_000), DType::F32, &Device::Cpu).unwrap()).unwrap();
    let max = out.abs().unwrap().max_all().unwrap().to_scalar::<f32>().unwrap();
    assert_eq!(max, 0.0);
}

#[test]
fn tfgram_rejects_too_short_input() {
    let stft = StftConfig::default();
    let mut ps = ParamStore::new(0, DType::F32, &Device::Cpu);
    let tfgram = TfgramNet::new(&mut ps, "tfgram", &TfgramConfig::for_stft(&stft)).unwrap();
    let short = Tensor::zeros((1, 4000), DType::F32, &Device::Cpu).unwrap();
    assert!(tfgram.forward(&short, false).is_err());
}
