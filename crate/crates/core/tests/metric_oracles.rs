use diffperc_core::heads::IGNORE_INDEX;
use diffperc_core::metrics::{depth_metrics, mask_iou_parts, miou, oiou, ConfusionState};
use diffperc_core::tensor::SeededRng;

/// Class-mean IoU straight from the label arrays.
fn brute_miou(pred: &[u32], gt: &[u32], k: usize) -> f64 {
    let mut sum = 0.0;
    let mut present = 0;
    for c in 0..k as u32 {
        let mut inter = 0u64;
        let mut union = 0u64;
        for i in 0..gt.len() {
            if gt[i] == IGNORE_INDEX {
                continue;
            }
            let (p, g) = (pred[i] == c, gt[i] == c);
            if p && g {
                inter += 1;
            }
            if p || g {
                union += 1;
            }
        }
        if union > 0 {
            sum += inter as f64 / union as f64;
            present += 1;
        }
    }
    sum / present as f64
}

fn brute_oiou(pairs: &[(Vec<bool>, Vec<bool>)]) -> f64 {
    let mut inter = 0.0;
    let mut union = 0.0;
    for (p, g) in pairs {
        for i in 0..p.len() {
            if p[i] && g[i] {
                inter += 1.0;
            }
            if p[i] || g[i] {
                union += 1.0;
            }
        }
    }
    inter / union
}

fn brute_depth(pred: &[f64], gt: &[f64], mask: &[bool]) -> [f64; 6] {
    let mut n = 0.0;
    let mut out = [0.0; 6];
    for i in 0..pred.len() {
        if !mask[i] {
            continue;
        }
        let (p, g) = (pred[i], gt[i]);
        n += 1.0;
        out[0] += (p - g) * (p - g);
        out[1] += (p - g).abs() / g;
        out[2] += (p.log10() - g.log10()).abs();
        let log_ratio = (p / g).ln().abs();
        for k in 1..=3 {
            if log_ratio < k as f64 * 1.25f64.ln() {
                out[2 + k] += 1.0;
            }
        }
    }
    out[0] = (out[0] / n).sqrt();
    for v in &mut out[1..] {
        *v /= n;
    }
    out
}

#[test]
fn miou_matches_brute_force() {
    let mut rng = SeededRng::new(10);
    for case in 0..20 {
        let k = 2 + rng.below(6);
        let n = 10 + rng.below(200);
        let gt: Vec<u32> = (0..n)
            .map(|_| if rng.uniform() < 0.1 { IGNORE_INDEX } else { rng.below(k) as u32 })
            .collect();
        let pred: Vec<u32> = gt
            .iter()
            .map(|&g| if g != IGNORE_INDEX && rng.uniform() < 0.5 { g } else { rng.below(k) as u32 })
            .collect();
        let mut conf = ConfusionState::new(k);
        conf.update(&pred, &gt, IGNORE_INDEX).unwrap();
        let want = brute_miou(&pred, &gt, k);
        assert!((miou(&conf) - want).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn oiou_matches_brute_force() {
    let mut rng = SeededRng::new(11);
    for case in 0..20 {
        let pairs: Vec<(Vec<bool>, Vec<bool>)> = (0..1 + rng.below(5))
            .map(|_| {
                let n = 5 + rng.below(60);
                let g: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.4).collect();
                let p: Vec<bool> = g.iter().map(|&v| if rng.uniform() < 0.7 { v } else { !v }).collect();
                (p, g)
            })
            .collect();
        let (mut is, mut us) = (Vec::new(), Vec::new());
        for (p, g) in &pairs {
            let (i, u) = mask_iou_parts(p, g);
            is.push(i);
            us.push(u);
        }
        let want = brute_oiou(&pairs);
        assert!((oiou(&is, &us) - want).abs() < 1e-9, "case {case}");
    }
}

#[test]
fn depth_metrics_match_brute_force() {
    let mut rng = SeededRng::new(12);
    for case in 0..20 {
        let n = 8 + rng.below(100);
        let gt: Vec<f64> = (0..n).map(|_| rng.range(0.1, 10.0)).collect();
        let pred: Vec<f64> = gt.iter().map(|g| g * rng.range(0.6, 1.8)).collect();
        let mut mask: Vec<bool> = (0..n).map(|_| rng.uniform() < 0.8).collect();
        mask[0] = true;
        let got = depth_metrics(&pred, &gt, &mask).unwrap();
        let want = brute_depth(&pred, &gt, &mask);
        for ((name, g), w) in got.named().iter().zip(want) {
            assert!((g - w).abs() < 1e-9, "case {case} {name}: {g} vs {w}");
        }
    }
}

#[test]
fn delta_boundary_is_exclusive() {
    let gt: Vec<f64> = (1..=16).map(|i| i as f64 * 0.5).collect();
    let pred: Vec<f64> = gt.iter().map(|g| 1.25 * g).collect();
    let m = depth_metrics(&pred, &gt, &vec![true; gt.len()]).unwrap();
    assert_eq!(m.d1, 0.0);
    assert_eq!(m.d2, 1.0);
}
