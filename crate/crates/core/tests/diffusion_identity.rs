use diffperc_core::diffusion::{q_sample, q_step, NoiseSchedule};
use diffperc_core::tensor::{SeededRng, Tensor};

const DRAWS: usize = 100_000;
const Z0: [f64; 4] = [0.8, -1.2, 0.0, 2.5];

fn moments(z: &Tensor<f64>) -> Vec<(f64, f64)> {
    let d = z.data();
    (0..4)
        .map(|c| {
            let mean = (0..DRAWS).map(|i| d[i * 4 + c]).sum::<f64>() / DRAWS as f64;
            let var = (0..DRAWS).map(|i| (d[i * 4 + c] - mean).powi(2)).sum::<f64>() / (DRAWS - 1) as f64;
            (mean, var.sqrt())
        })
        .collect()
}

fn start() -> Tensor<f64> {
    let data: Vec<f64> = (0..DRAWS).flat_map(|_| Z0).collect();
    Tensor::new(data, &[DRAWS, 1, 2, 2]).unwrap()
}

#[test]
fn closed_form_matches_chain() {
    for steps in [5, 50] {
        let sched = NoiseSchedule::linear(steps, 1e-2, 0.2).unwrap();
        let mut rng = SeededRng::new(steps as u64);
        let z0 = start();
        let closed = q_sample(&z0, steps, &rng.randn(z0.shape()), &sched).unwrap().z;
        let mut chain = z0.clone();
        for t in 1..=steps {
            chain = q_step(&chain, t, &rng.randn(z0.shape()), &sched).unwrap();
        }
        let ab = sched.alpha_bar(steps).unwrap();
        for (c, ((mc, sc), (mq, sq))) in moments(&chain).into_iter().zip(moments(&closed)).enumerate() {
            let scale = (ab.sqrt() * Z0[c]).abs() + (1.0 - ab).sqrt();
            assert!((mc - mq).abs() <= 0.01 * scale, "T={steps} c={c}: mean {mc} vs {mq}");
            assert!((sc - sq).abs() <= 0.01 * sq, "T={steps} c={c}: std {sc} vs {sq}");
            assert!((sq - (1.0 - ab).sqrt()).abs() <= 0.01 * sq);
        }
    }
}

#[test]
fn alpha_bar_is_running_product() {
    let sched = NoiseSchedule::linear(20, 1e-3, 5e-2).unwrap();
    let mut prod = 1.0;
    assert_eq!(sched.alpha_bar(0).unwrap(), 1.0);
    for t in 1..=20 {
        prod *= sched.alpha(t).unwrap();
        assert!((sched.alpha_bar(t).unwrap() - prod).abs() < 1e-12);
    }
}

#[test]
fn zero_beta_and_t0_are_identity() {
    let mut rng = SeededRng::new(4);
    let z0: Tensor<f64> = rng.randn(&[2, 4, 3, 3]);
    let eps: Tensor<f64> = rng.randn(&[2, 4, 3, 3]);
    let flat = NoiseSchedule::linear(10, 0.0, 0.0).unwrap();
    assert_eq!(q_sample(&z0, 7, &eps, &flat).unwrap().z.data(), z0.data());
    let sched = NoiseSchedule::linear(10, 1e-2, 0.2).unwrap();
    assert_eq!(q_sample(&z0, 0, &eps, &sched).unwrap().z.data(), z0.data());
}
