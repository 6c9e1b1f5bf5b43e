//! The five score parameterizations share one contract: at zero
//! initialization every composed model is bitwise the pretrained model, the
//! gray-box corrections are affine in the guidance strength, and checkpoints
//! round-trip byte-for-byte with sections present only where the mode needs
//! them.
//!
//! Run with: `cargo run --example parameterizations`

use diffcon::controller::{
    read_composed, write_composed, ComposeMode, ComposedModel, ControllerConfig,
};
use diffcon::diffusion::{EpsModel, ScoreModel};
use diffcon::rng::Stream;
use diffcon::schedule::NoiseSchedule;

fn main() {
    let sched = NoiseSchedule::constant(8, 0.1).unwrap();
    let mut rng = Stream::from_seed(5);
    let pre = ScoreModel::new(2, 8, 2, 4, 3, &[16], &mut rng).unwrap();
    let modes = [
        ComposeMode::SideNet,
        ComposeMode::SideNetUngated,
        ComposeMode::LoraOnly,
        ComposeMode::Joint,
        ComposeMode::Separate,
    ];
    println!("{:<12} {:>8} {:>12} {:>18} {:>10}", "mode", "params", "zero-init", "affine-in-lambda", "ckpt-bytes");
    for mode in modes {
        let mut model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            mode,
            1.0,
            &ControllerConfig::default(),
            &mut rng.derive(mode.name().len() as u64),
        )
        .unwrap();
        // Zero-init identity over random probes.
        let mut probe = Stream::from_seed(42);
        let mut identical = true;
        for _ in 0..200 {
            let x = probe.normal_vec(2);
            let t = 1 + probe.below(7);
            let a = model.predict(&x, Some(0), t).unwrap();
            let b = pre.predict(&x, Some(0), t).unwrap();
            identical &= a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits());
        }
        // Perturb and test affineness in lambda for gray-box modes.
        let mut p = model.trainable_params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * (((i % 9) as f64) - 4.0);
        }
        model.set_trainable_params(&p).unwrap();
        let affine = if mode.is_graybox() {
            let x = [0.3, -0.8];
            let eval = |lam: f64| {
                let mut m = model.clone();
                m.lambda_model = lam;
                m.compose_eps(&x, Some(1), 2).unwrap()
            };
            let (y0, y1, y2) = (eval(0.5), eval(1.0), eval(1.5));
            let resid: f64 = (0..2).map(|i| (y0[i] - 2.0 * y1[i] + y2[i]).abs()).sum();
            format!("{resid:.1e}")
        } else {
            "-".to_string()
        };
        // Checkpoint round-trip.
        let bytes = write_composed(&model).unwrap();
        let back = read_composed(&bytes, &sched).unwrap();
        assert_eq!(bytes, write_composed(&back).unwrap());
        println!(
            "{:<12} {:>8} {:>12} {:>18} {:>10}",
            mode.name(),
            model.trainable_len(),
            if identical { "bitwise" } else { "BROKEN" },
            affine,
            bytes.len()
        );
    }
}
