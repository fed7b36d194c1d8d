use diffperc_core::heads::{si_loss, DepthLossConfig};
use diffperc_core::tensor::{SeededRng, Tensor};

fn depths(rng: &mut SeededRng, n: usize) -> Tensor<f64> {
    Tensor::from_f64(&(0..n).map(|_| rng.range(0.2, 9.0)).collect::<Vec<_>>(), &[1, 1, 1, n]).unwrap()
}

fn loss(pred: &Tensor<f64>, gt: &Tensor<f64>, lambda: f64) -> f64 {
    let cfg = DepthLossConfig { lambda, ..DepthLossConfig::default() };
    let mask = vec![true; gt.numel()];
    si_loss(pred, gt, &mask, &cfg).unwrap().item().unwrap()
}

#[test]
fn zero_at_truth() {
    let mut rng = SeededRng::new(1);
    for lambda in [0.0, 0.5, 0.85, 1.0] {
        let gt = depths(&mut rng, 40);
        assert_eq!(loss(&gt, &gt, lambda), 0.0);
    }
}

#[test]
fn scale_invariant_at_lambda_one() {
    let mut rng = SeededRng::new(2);
    for _ in 0..10 {
        let gt = depths(&mut rng, 50);
        let pred = depths(&mut rng, 50);
        let base = loss(&pred, &gt, 1.0);
        for s in [0.3, 1.7, 4.0] {
            assert!((loss(&pred.scale(s), &gt, 1.0) - base).abs() < 1e-5);
        }
    }
}

#[test]
fn doubled_prediction_closed_form() {
    let mut rng = SeededRng::new(3);
    let gt = depths(&mut rng, 64);
    for lambda in [0.0, 0.25, 0.85] {
        let cfg = DepthLossConfig { lambda, ..DepthLossConfig::default() };
        let want = cfg.alpha * 2f64.ln() * (1.0 - lambda).sqrt();
        assert!((loss(&gt.scale(2.0), &gt, lambda) - want).abs() < 1e-6);
    }
}
