use std::sync::{Arc, Mutex};

use aredit_core::cache::{build_cache, EditCache};
use aredit_core::codec::CodecParams;
use aredit_core::editor::{edit, EditConfig, MaskMode, UserMask};
use aredit_core::numerics::{downsample_bilinear, FeatureMap};
use aredit_core::predictor::{
    AttentionControl, Predictor, PredictorModel, Prediction, SyntheticConfig,
};
use aredit_core::pyramid::{accumulate, ScaleSchedule};
use aredit_core::shapesworld::scene;
use aredit_core::textenc::{encode_prompt, PromptEmbedding};
use aredit_core::Error;

const SOURCE: &str = "a red circle on a blue background";
const TARGET: &str = "a green circle on a blue background";

fn synthetic() -> PredictorModel {
    PredictorModel::synthetic(SyntheticConfig::default())
}

fn cache_for(model: &PredictorModel, prompt: &str, keep_attention: bool) -> EditCache {
    let spec = scene(3, 1, 64).recolored("red").unwrap();
    build_cache(&spec.render(), prompt, model, &CodecParams::default(), &ScaleSchedule::reference(), keep_attention).unwrap()
}

fn reconstruction(cache: &EditCache) -> aredit_core::numerics::Image {
    let f = accumulate(&cache.r_queue, &cache.schedule, cache.len()).unwrap();
    CodecParams::default().decode_feature(&f).unwrap()
}

#[test]
fn identity_cases_are_bit_exact() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, true);
    let recon = reconstruction(&cache);
    let codec = CodecParams::default();
    let k = cache.len();
    let cases = [
        (SOURCE, EditConfig { gamma: 0, ..EditConfig::default() }),
        (SOURCE, EditConfig::default()),
        (TARGET, EditConfig { gamma: k, ..EditConfig::default() }),
        (TARGET, EditConfig { tau: 1.0, gamma: 0, ..EditConfig::default() }),
        ("something else entirely", EditConfig { tau: 1.0, mask_mode: MaskMode::Spatial, ..EditConfig::default() }),
    ];
    for (prompt, cfg) in cases {
        let out = edit(&cache, prompt, &model, &codec, &cfg).unwrap();
        assert_eq!(out.edited_bits, cache.r_queue, "{prompt} {cfg:?}");
        assert_eq!(out.image, recon);
        assert_eq!(out.flagged_bits(), 0);
        assert_eq!(out.masks.len(), k - cfg.gamma);
    }
}

#[test]
fn one_token_change_flags_match_analytic_oracle() {
    let model = synthetic();
    let PredictorModel::Synthetic(syn) = &model else { unreachable!() };
    let cache = cache_for(&model, SOURCE, false);
    let codec = CodecParams::default();
    let tau = 0.2;
    let gamma = 3;
    let cfg = EditConfig { gamma, tau, ..EditConfig::default() };
    let out = edit(&cache, TARGET, &model, &codec, &cfg).unwrap();

    let (src, tgt) = (encode_prompt(SOURCE), encode_prompt(TARGET));
    let (h, w) = cache.schedule.level(gamma);
    let partial = accumulate(&cache.r_queue, &cache.schedule, gamma).unwrap();
    let x = downsample_bilinear(&partial, h, w).unwrap();
    let d = cache.schedule.feature_dim();
    let q = |p: f64| (p.clamp(0.0, 1.0) * 65535.0).round() / 65535.0;
    let mask = &out.masks[0];
    let mut flagged = 0;
    for pos in 0..h * w {
        for c in 0..d {
            let base = 2.0 * x.vector_at(pos)[c] as f64;
            let gs: f64 = src.token_ids.iter().map(|&t| syn.token_gain(t, c) as f64).sum();
            let gt: f64 = tgt.token_ids.iter().map(|&t| syn.token_gain(t, c) as f64).sum();
            let pc = q(1.0 / (1.0 + (-(base + gs)).exp()));
            let pt = q(1.0 / (1.0 + (-(base + gt)).exp()));
            let bit = cache.r_queue[gamma].get(pos, c);
            let g = if bit { pc - pt } else { (1.0 - pc) - (1.0 - pt) };
            let want = g > tau + 1e-6;
            let got = mask.get(pos, c);
            if (g - tau).abs() > 1e-6 {
                assert_eq!(got, want, "position {pos} channel {c} gap {g}");
            }
            if gs == gt {
                assert!(!got);
            }
            flagged += got as usize;
        }
    }
    assert!(flagged > 0);
    for (k, bits) in out.edited_bits.iter().enumerate() {
        if k < gamma {
            assert_eq!(bits, &cache.r_queue[k]);
            continue;
        }
        let m = &out.masks[k - gamma];
        let (hk, wk) = cache.schedule.level(k);
        for pos in 0..hk * wk {
            for c in 0..d {
                if !m.get(pos, c) {
                    assert_eq!(bits.get(pos, c), cache.r_queue[k].get(pos, c));
                }
            }
        }
    }
}

#[test]
fn masks_shrink_as_tau_grows() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, false);
    let codec = CodecParams::default();
    for mode in [MaskMode::Bitwise, MaskMode::Spatial] {
        // With γ = K - 1 only the last scale is predicted, so its context is fixed across τ.
        let gamma = cache.len() - 1;
        let mut prev: Option<Vec<bool>> = None;
        for i in 0..10 {
            let cfg = EditConfig { gamma, tau: i as f64 / 10.0, mask_mode: mode, ..EditConfig::default() };
            let m = edit(&cache, TARGET, &model, &codec, &cfg).unwrap().masks[0].to_bools();
            if let Some(p) = &prev {
                assert!(m.iter().zip(p).all(|(&now, &before)| !now || before));
            }
            prev = Some(m);
        }
    }
}

#[test]
fn seed_determinism_and_gamma_reuse() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, false);
    let codec = CodecParams::default();
    let cfg = EditConfig { gamma: 1, tau: 0.05, seed: 42, ..EditConfig::default() };
    let a = edit(&cache, TARGET, &model, &codec, &cfg).unwrap();
    let b = edit(&cache, TARGET, &model, &codec, &cfg).unwrap();
    assert_eq!(a.image, b.image);
    assert_eq!(a.edited_bits, b.edited_bits);
    assert_eq!(a.masks, b.masks);
    let other = edit(&cache, TARGET, &model, &codec, &EditConfig { seed: 43, ..cfg.clone() }).unwrap();
    assert_ne!(other.edited_bits, a.edited_bits);
    for gamma in 0..=cache.len() {
        let out = edit(&cache, "a white square", &model, &codec, &EditConfig { gamma, tau: 0.0, ..EditConfig::default() }).unwrap();
        assert_eq!(out.edited_bits[..gamma], cache.r_queue[..gamma]);
    }
}

/// Records every predict input so the scale-by-scale context can be replayed.
struct Recording {
    inner: PredictorModel,
    inputs: Mutex<Vec<FeatureMap>>,
}

impl Predictor for Recording {
    fn predict(&self, input: &FeatureMap, prompt: &PromptEmbedding, control: Option<&dyn AttentionControl>) -> aredit_core::Result<Prediction> {
        self.inputs.lock().unwrap().push(input.clone());
        self.inner.predict(input, prompt, control)
    }
    fn make_sos(&self, prompt: &PromptEmbedding) -> FeatureMap {
        self.inner.make_sos(prompt)
    }
    fn feature_dim(&self) -> usize {
        self.inner.feature_dim()
    }
    fn attention_layers(&self) -> usize {
        self.inner.attention_layers()
    }
    fn fingerprint(&self) -> [u8; 32] {
        self.inner.fingerprint()
    }
}

#[test]
fn each_scale_sees_exactly_the_reassembled_context() {
    let rec = Recording { inner: synthetic(), inputs: Mutex::new(Vec::new()) };
    let cache = cache_for(&rec.inner, SOURCE, false);
    let codec = CodecParams::default();
    let gamma = 2;
    let cfg = EditConfig { gamma, tau: 0.05, ..EditConfig::default() };
    let out = edit(&cache, TARGET, &rec, &codec, &cfg).unwrap();
    let inputs = rec.inputs.lock().unwrap();
    assert_eq!(inputs.len(), cache.len() - gamma);
    for (i, input) in inputs.iter().enumerate() {
        let k = gamma + i;
        let (h, w) = cache.schedule.level(k);
        let partial = accumulate(&out.edited_bits, &cache.schedule, k).unwrap();
        assert_eq!(input, &downsample_bilinear(&partial, h, w).unwrap());
    }
}

#[test]
fn contract_errors_are_distinct() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, false);
    let codec = CodecParams::default();
    let other = PredictorModel::synthetic(SyntheticConfig { seed: 9, ..SyntheticConfig::default() });
    assert!(matches!(edit(&cache, TARGET, &other, &codec, &EditConfig::default()), Err(Error::FingerprintMismatch { .. })));
    assert!(matches!(
        edit(&cache, TARGET, &model, &codec, &EditConfig::with_attention_control()),
        Err(Error::MissingAttention)
    ));
    assert!(matches!(
        edit(&cache, TARGET, &model, &codec, &EditConfig { gamma: 99, ..EditConfig::default() }),
        Err(Error::InvalidConfig(_))
    ));
    assert!(matches!(
        edit(&cache, TARGET, &model, &CodecParams::with_seed(1), &EditConfig::default()),
        Err(Error::CodecMismatch { .. })
    ));
}

#[test]
fn attention_control_runs_and_same_prompt_keeps_bits() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, true);
    let codec = CodecParams::default();
    let cfg = EditConfig::with_attention_control();
    let same = edit(&cache, SOURCE, &model, &codec, &cfg).unwrap();
    assert_eq!(same.flagged_bits(), 0);
    let changed = edit(&cache, TARGET, &model, &codec, &cfg).unwrap();
    assert!(changed.flagged_bits() > 0);
}

#[test]
fn user_mask_restricts_edits_and_intermediates_are_emitted() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, false);
    let codec = CodecParams::default();
    let values: Vec<f32> = (0..64 * 64).map(|i| if i % 64 < 32 { 1.0 } else { 0.0 }).collect();
    let cfg = EditConfig {
        gamma: 1,
        tau: 0.05,
        emit_intermediate: true,
        user_mask: Some(UserMask::new(64, 64, values).unwrap()),
        ..EditConfig::default()
    };
    let out = edit(&cache, TARGET, &model, &codec, &cfg).unwrap();
    for m in &out.masks {
        let (h, w, d) = m.shape();
        for y in 0..h {
            for x in w / 2..w {
                assert!((0..d).all(|c| !m.get(y * w + x, c)));
            }
        }
    }
    let strip = out.intermediate_decodes.as_ref().unwrap();
    assert_eq!(strip.len(), cache.len());
    assert_eq!(strip.last().unwrap(), &out.image);
}

#[test]
fn concurrent_edits_share_one_cache() {
    let model = Arc::new(synthetic());
    let cache = Arc::new(cache_for(&model, SOURCE, false));
    let before = cache.to_bytes();
    let codec = Arc::new(CodecParams::default());
    let handles: Vec<_> = (0..4)
        .map(|seed| {
            let (m, c, k) = (model.clone(), cache.clone(), codec.clone());
            std::thread::spawn(move || edit(&c, TARGET, &*m, &k, &EditConfig { seed, gamma: 1, tau: 0.05, ..EditConfig::default() }).unwrap())
        })
        .collect();
    let results: Vec<_> = handles.into_iter().map(|h| h.join().unwrap()).collect();
    for (seed, r) in results.iter().enumerate() {
        let serial = edit(&cache, TARGET, &*model, &codec, &EditConfig { seed: seed as u64, gamma: 1, tau: 0.05, ..EditConfig::default() }).unwrap();
        assert_eq!(r.image, serial.image);
    }
    assert_eq!(cache.to_bytes(), before);
}

#[test]
fn full_mode_resamples_every_bit_from_gamma() {
    let model = synthetic();
    let cache = cache_for(&model, SOURCE, false);
    let codec = CodecParams::default();
    let cfg = EditConfig { gamma: 2, tau: 0.0, mask_mode: MaskMode::Full, ..EditConfig::default() };
    let out = edit(&cache, SOURCE, &model, &codec, &cfg).unwrap();
    let total: usize = (2..cache.len()).map(|k| cache.r_queue[k].positions() * cache.r_queue[k].channels()).sum();
    assert_eq!(out.flagged_bits(), total);
    assert_eq!(out.edited_bits[..2], cache.r_queue[..2]);
    assert_ne!(out.edited_bits, cache.r_queue);
    assert_eq!("full".parse::<MaskMode>().unwrap(), MaskMode::Full);
}
