use diffperc_core::guidance::{average_maps, GuidanceConfig};
use diffperc_core::nn::{ParamStore, VarBuilder};
use diffperc_core::tensor::{SeededRng, Tensor};
use diffperc_core::text::{ConditioningFeatures, PromptSet, TextAdapter};
use diffperc_core::unet::{UNet, UNetConfig};

fn cond(rng: &mut SeededRng, rows: usize, width: usize) -> ConditioningFeatures<f32> {
    let prompts = PromptSet::new((0..rows).map(|i| format!("p{i}")).collect()).unwrap();
    ConditioningFeatures::new(rng.randn(&[rows, width]).scale(3.0), prompts).unwrap()
}

fn max_key_sum_error(map: &Tensor<f32>) -> f64 {
    let (b, s, h, w) = (map.dim(0), map.dim(1), map.dim(2), map.dim(3));
    let d = map.data();
    let mut worst = 0f64;
    for bi in 0..b {
        for p in 0..h * w {
            let sum: f64 = (0..s).map(|k| d[(bi * s + k) * h * w + p] as f64).sum();
            worst = worst.max((sum - 1.0).abs());
        }
    }
    worst
}

#[test]
fn captured_and_averaged_maps_sum_to_one() {
    let store = ParamStore::new();
    let unet = UNet::new(&VarBuilder::new(&store, 1), &UNetConfig::default()).unwrap();
    let mut rng = SeededRng::new(2);
    let c = cond(&mut rng, 5, 64);
    let z = rng.randn(&[2, 4, 8, 8]);
    let out = unet.forward(&z, 0, &c).unwrap();
    assert_eq!(out.attn_maps.len(), 7);
    for r in &out.attn_maps {
        assert!(r.map.data().iter().all(|&v| v >= 0.0));
        assert!(max_key_sum_error(&r.map) < 1e-5, "{} level {}", r.location, r.level);
    }
    for source in ["mid", "down", "up", "up_down"] {
        let cfg = GuidanceConfig { source: source.into(), exclude_lowest: false, enabled: true };
        let avg = average_maps(&out.attn_maps, &cfg).unwrap();
        assert!(!avg.is_empty());
        for m in avg.values() {
            assert!(max_key_sum_error(m) < 1e-5, "{source}");
        }
    }
}

#[test]
fn single_prompt_maps_are_exactly_one() {
    let store = ParamStore::new();
    let unet = UNet::new(&VarBuilder::new(&store, 3), &UNetConfig::default()).unwrap();
    let mut rng = SeededRng::new(4);
    let out = unet.forward(&rng.randn(&[1, 4, 8, 8]), 0, &cond(&mut rng, 1, 64)).unwrap();
    for r in &out.attn_maps {
        assert!(r.map.data().iter().all(|&v| v == 1.0));
    }
    let all = GuidanceConfig { source: "up_down".into(), exclude_lowest: false, enabled: true };
    for m in average_maps(&out.attn_maps, &all).unwrap().values() {
        assert!(m.data().iter().all(|&v| v == 1.0));
    }
}

fn relative_change(gamma: f64, seed: u64) -> f64 {
    let store = ParamStore::<f64>::new();
    let adapter = TextAdapter::new(&VarBuilder::new(&store, seed), 64, gamma).unwrap();
    let mut rng = SeededRng::new(seed);
    let prompts = PromptSet::new((0..6).map(|i| format!("p{i}")).collect()).unwrap();
    let c = ConditioningFeatures::new(rng.randn(&[6, 64]), prompts).unwrap();
    let out = adapter.adapt(&c).unwrap();
    let num: f64 = out.features().data().iter().zip(c.features().data()).map(|(a, b)| (a - b).powi(2)).sum();
    let den: f64 = c.features().data().iter().map(|b| b * b).sum();
    (num / den).sqrt()
}

#[test]
fn adapter_starts_near_identity() {
    for seed in 0..10 {
        assert!(relative_change(1e-4, seed) <= 1e-2);
        assert_eq!(relative_change(0.0, seed), 0.0);
    }
}
