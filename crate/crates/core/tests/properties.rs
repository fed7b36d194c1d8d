use diffperc_core::diffusion::{dm_loss, q_sample, NoiseSchedule, NoisePredictor};
use diffperc_core::guidance::{average_maps, fuse, GuidanceConfig};
use diffperc_core::heads::{ce_loss, FpnHead, HeadConfig, IGNORE_INDEX};
use diffperc_core::metrics::{coverage, depth_metrics, miou, slide_inference, window_starts, ConfusionState, DepthAccumulator};
use diffperc_core::nn::{ParamStore, VarBuilder};
use diffperc_core::tensor::{SeededRng, Tensor};
use diffperc_core::text::{ConditioningFeatures, PromptSet, Vocabulary};
use diffperc_core::unet::{AttnLocation, AttnRecord};
use proptest::prelude::*;

fn softmax_map(rng: &mut SeededRng, b: usize, s: usize, side: usize) -> Tensor<f64> {
    let raw: Tensor<f64> = rng.randn(&[b, s, side, side]);
    raw.softmax(1).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn miou_is_a_fraction_and_merge_is_order_free(seed in 0u64..10_000, k in 2usize..9) {
        let mut rng = SeededRng::new(seed);
        let parts: Vec<(Vec<u32>, Vec<u32>)> = (0..3)
            .map(|_| {
                let n = 1 + rng.below(50);
                let g = (0..n).map(|_| if rng.uniform() < 0.1 { IGNORE_INDEX } else { rng.below(k) as u32 }).collect();
                let p = (0..n).map(|_| rng.below(k) as u32).collect();
                (p, g)
            })
            .collect();
        let mut fwd = ConfusionState::new(k);
        let mut rev = ConfusionState::new(k);
        for (p, g) in &parts {
            let mut c = ConfusionState::new(k);
            c.update(p, g, IGNORE_INDEX).unwrap();
            fwd.merge(&c).unwrap();
        }
        for (p, g) in parts.iter().rev() {
            rev.update(p, g, IGNORE_INDEX).unwrap();
        }
        prop_assert_eq!(&fwd, &rev);
        if fwd.scored() > 0 {
            let m = miou(&fwd);
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn perfect_depth_scores_perfectly(seed in 0u64..10_000, n in 1usize..64) {
        let mut rng = SeededRng::new(seed);
        let gt: Vec<f64> = (0..n).map(|_| rng.range(0.01, 10.0)).collect();
        let mut acc = DepthAccumulator::default();
        acc.update(&gt, &gt, &vec![true; n]).unwrap();
        let m = acc.finish();
        prop_assert_eq!((m.rmse, m.rel, m.log10), (0.0, 0.0, 0.0));
        prop_assert_eq!((m.d1, m.d2, m.d3), (1.0, 1.0, 1.0));
    }

    #[test]
    fn averaged_maps_stay_normalised(seed in 0u64..10_000, s in 1usize..6, layers in 1usize..4) {
        let mut rng = SeededRng::new(seed);
        let mut records = Vec::new();
        for level in 2..=4 {
            for loc in [AttnLocation::Down, AttnLocation::Up] {
                for _ in 0..layers {
                    records.push(AttnRecord { location: loc, level, map: softmax_map(&mut rng, 2, s, 1 << (level - 1)) });
                }
            }
        }
        let avg = average_maps(&records, &GuidanceConfig { source: "up_down".into(), exclude_lowest: true, enabled: true }).unwrap();
        prop_assert_eq!(avg.keys().copied().collect::<Vec<_>>(), vec![2, 3, 4]);
        for m in avg.values() {
            let sums = m.sum_axis(1).unwrap();
            prop_assert!(sums.data().iter().all(|v| (v - 1.0).abs() < 1e-12));
        }
        let feats: Vec<Tensor<f64>> = (0..4).map(|i| rng.randn(&[2, 3, 1 << i, 1 << i])).collect();
        let fused = fuse(&feats, &avg).unwrap();
        prop_assert_eq!(fused[0].dim(1), 3);
        for f in &fused[1..] {
            prop_assert_eq!(f.dim(1), 3 + s);
        }
    }

    #[test]
    fn windows_cover_every_pixel(h in 8usize..160, w in 8usize..160, crop in 1usize..64, stride_frac in 0.05f64..1.0) {
        let crop = crop.min(h).min(w);
        let stride = ((crop as f64 * stride_frac) as usize).max(1);
        let cov = coverage(h, w, crop, stride).unwrap();
        prop_assert!(cov.iter().all(|&c| c >= 1));
        let xs = window_starts(w, crop, stride).unwrap();
        prop_assert_eq!(*xs.last().unwrap(), w - crop);
    }

    #[test]
    fn slide_of_pointwise_model_is_pointwise(seed in 0u64..1000, side in 20usize..40) {
        let mut rng = SeededRng::new(seed);
        let img: Tensor<f64> = rng.randn(&[1, 2, side, side]);
        let model = |x: &Tensor<f64>| Ok(x.scale(3.0).add_scalar(1.0));
        let out = slide_inference(model, &img, 16, 11).unwrap();
        let want = model(&img).unwrap();
        prop_assert!(out.data().iter().zip(want.data()).all(|(a, b)| (a - b).abs() < 1e-12));
    }

    #[test]
    fn q_sample_is_affine_in_noise(seed in 0u64..1000, t in 0usize..=30) {
        let sched = NoiseSchedule::linear(30, 1e-3, 0.1).unwrap();
        let mut rng = SeededRng::new(seed);
        let z0: Tensor<f64> = rng.randn(&[1, 2, 2, 2]);
        let eps: Tensor<f64> = rng.randn(&[1, 2, 2, 2]);
        let ab = sched.alpha_bar(t).unwrap();
        let z = q_sample(&z0, t, &eps, &sched).unwrap().z;
        for i in 0..8 {
            let want = ab.sqrt() * z0.data()[i] + (1.0 - ab).sqrt() * eps.data()[i];
            prop_assert!((z.data()[i] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn vocabulary_round_trips(words in proptest::collection::vec("[a-z]{1,8}", 1..20)) {
        let v = Vocabulary::from_words(words.iter().map(String::as_str));
        let back = Vocabulary::parse(&v.to_text()).unwrap();
        prop_assert_eq!(back.to_text(), v.to_text());
        for w in &words {
            prop_assert_ne!(v.tokenize(w)[0], v.unk_id());
        }
    }
}

struct Oracle(Tensor<f64>);

impl NoisePredictor<f64> for Oracle {
    fn predict_noise(&self, _: &Tensor<f64>, _: usize, _: &ConditioningFeatures<f64>) -> diffperc_core::Result<Tensor<f64>> {
        Ok(self.0.clone())
    }
}

fn grad_of(f: impl Fn(&Tensor<f64>) -> Tensor<f64>, x: &Tensor<f64>) -> Vec<f64> {
    let p = x.detach().to_param();
    f(&p).backward().unwrap();
    p.grad().unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]

    #[test]
    fn gradients_are_linear(seed in 0u64..10_000, a in -3.0f64..3.0, b in -3.0f64..3.0) {
        let mut rng = SeededRng::new(seed);
        let x: Tensor<f64> = rng.randn(&[3, 4]);
        let w: Tensor<f64> = rng.randn(&[4, 2]);
        let f = |x: &Tensor<f64>| x.matmul(&w).unwrap().tanh().sum_all();
        let g = |x: &Tensor<f64>| x.exp().mul(x).unwrap().sum_all();
        let both = grad_of(|x| f(x).scale(a).add(&g(x).scale(b)).unwrap(), &x);
        let (gf, gg) = (grad_of(f, &x), grad_of(g, &x));
        for i in 0..12 {
            prop_assert!((both[i] - (a * gf[i] + b * gg[i])).abs() < 1e-9);
        }
    }

    #[test]
    fn dm_loss_is_zero_only_for_the_true_noise(seed in 0u64..10_000, t in 1usize..=20, nudge in 1e-3f64..1.0) {
        let sched = NoiseSchedule::linear(20, 1e-3, 0.1).unwrap();
        let mut rng = SeededRng::new(seed);
        let z0: Tensor<f64> = rng.randn(&[1, 2, 3, 3]);
        let eps: Tensor<f64> = rng.randn(&[1, 2, 3, 3]);
        let cond = ConditioningFeatures::new(rng.randn(&[1, 4]), PromptSet::new(vec!["x".into()]).unwrap()).unwrap();
        let exact = dm_loss(&Oracle(eps.clone()), &z0, &cond, t, &eps, &sched).unwrap().item().unwrap();
        prop_assert_eq!(exact, 0.0);
        let mut off = eps.to_vec();
        off[rng.below(18)] += nudge;
        let off = Tensor::new(off, eps.shape()).unwrap();
        let l = dm_loss(&Oracle(off), &z0, &cond, t, &eps, &sched).unwrap().item().unwrap();
        prop_assert!(l > 0.0);
    }

    #[test]
    fn fuse_keeps_features_first_and_pools_up_down_evenly(seed in 0u64..10_000, s in 1usize..5, n_up in 1usize..4, n_down in 1usize..4) {
        let mut rng = SeededRng::new(seed);
        let side = 4;
        let ups: Vec<Tensor<f64>> = (0..n_up).map(|_| softmax_map(&mut rng, 1, s, side)).collect();
        let downs: Vec<Tensor<f64>> = (0..n_down).map(|_| softmax_map(&mut rng, 1, s, side)).collect();
        let mut records: Vec<AttnRecord<f64>> = ups.iter().map(|m| AttnRecord { location: AttnLocation::Up, level: 3, map: m.clone() }).collect();
        records.extend(downs.iter().map(|m| AttnRecord { location: AttnLocation::Down, level: 3, map: m.clone() }));
        let avg = average_maps(&records, &GuidanceConfig { source: "up_down".into(), exclude_lowest: true, enabled: true }).unwrap();
        let got = &avg[&3];
        for i in 0..got.numel() {
            let mut sum = 0.0;
            for m in ups.iter().chain(&downs) {
                sum += m.data()[i];
            }
            prop_assert!((got.data()[i] - sum / (n_up + n_down) as f64).abs() < 1e-12);
        }
        let feats: Vec<Tensor<f64>> = (0..4).map(|i| rng.randn(&[1, 2, 1 << i, 1 << i])).collect();
        let fused = fuse(&feats, &avg).unwrap();
        let f = &feats[2];
        prop_assert_eq!(&fused[2].data()[..f.numel()], f.data());
        prop_assert_eq!(&fused[2].data()[f.numel()..], got.data());
    }

    #[test]
    fn ce_falls_as_the_true_logit_rises(seed in 0u64..10_000, k in 2usize..6) {
        let mut rng = SeededRng::new(seed);
        let base: Vec<f64> = (0..k).map(|_| rng.normal()).collect();
        let label = rng.below(k) as u32;
        let loss_at = |bump: f64| {
            let mut l = base.clone();
            l[label as usize] += bump;
            ce_loss(&Tensor::new(l, &[1, k, 1, 1]).unwrap(), &[label]).unwrap().item().unwrap()
        };
        let (a, b, c) = (loss_at(-1.0), loss_at(0.0), loss_at(1.0));
        prop_assert!(a > b && b > c && c >= 0.0);
    }

    #[test]
    fn fpn_output_matches_image_size(h in 8usize..70, w in 8usize..70, seed in 0u64..100) {
        let store = ParamStore::<f64>::new();
        let cfg = HeadConfig { num_classes: 3, fpn_channels: 4, norm_groups: 2, ..HeadConfig::default() };
        let head = FpnHead::new(&VarBuilder::new(&store, seed), &cfg, &[3, 3, 3, 3]).unwrap();
        let mut rng = SeededRng::new(seed);
        let feats: Vec<Tensor<f64>> = (0..4).map(|i| rng.randn(&[1, 3, 1 << i, 1 << i])).collect();
        let out = head.forward(&feats, (h, w)).unwrap();
        prop_assert_eq!(out.shape(), &[1, 3, h, w]);
    }

    #[test]
    fn depth_metrics_are_ordered(seed in 0u64..10_000, n in 1usize..80) {
        let mut rng = SeededRng::new(seed);
        let gt: Vec<f64> = (0..n).map(|_| rng.range(0.1, 10.0)).collect();
        let pred: Vec<f64> = (0..n).map(|_| rng.range(0.1, 10.0)).collect();
        let m = depth_metrics(&pred, &gt, &vec![true; n]).unwrap();
        prop_assert!(m.rmse >= 0.0 && m.rel >= 0.0 && m.log10 >= 0.0);
        prop_assert!(m.d1 <= m.d2 && m.d2 <= m.d3 && m.d3 <= 1.0);
    }

    #[test]
    fn forward_and_backward_repeat_bitwise(seed in 0u64..10_000) {
        let run = || {
            let store = ParamStore::<f32>::new();
            let head = FpnHead::new(&VarBuilder::new(&store, seed), &HeadConfig { fpn_channels: 8, norm_groups: 2, ..HeadConfig::default() }, &[4, 4, 4, 4]).unwrap();
            let mut rng = SeededRng::new(seed);
            let feats: Vec<Tensor<f32>> = (0..4).map(|i| rng.randn(&[2, 4, 1 << i, 1 << i])).collect();
            let labels: Vec<u32> = (0..2 * 16 * 16).map(|_| rng.below(6) as u32).collect();
            let loss = ce_loss(&head.forward(&feats, (16, 16)).unwrap(), &labels).unwrap();
            loss.backward().unwrap();
            let mut bits = vec![loss.item().unwrap().to_bits()];
            for p in store.all() {
                bits.extend(p.tensor().grad().unwrap_or_default().iter().map(|g| g.to_bits()));
            }
            bits
        };
        prop_assert_eq!(run(), run());
    }
}
