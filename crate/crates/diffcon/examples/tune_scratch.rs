// Scratch harness for tuning acceptance-scale hyperparameters; not part of
// the shipped example set (removed once constants are frozen).

use std::path::Path;

use diffcon::controller::{
    load_composed, save_composed, ComposeMode, ComposedModel, ControllerConfig,
};
use diffcon::diffusion::{ancestral_sample, DataGenerator, DataSpec, EpsModel, ScoreModel};
use diffcon::rlft::*;
use diffcon::rng::Stream;
use diffcon::schedule::NoiseSchedule;

fn sched50() -> NoiseSchedule {
    NoiseSchedule::linear(50, 0.002, 0.2).unwrap()
}

fn pretrained_fixture() -> ScoreModel {
    let sched = sched50();
    let cache = Path::new("target/tune_pretrained.ckpt");
    if cache.exists() {
        return load_composed(cache, &sched).unwrap().pretrained().clone();
    }
    let data = DataSpec {
        dim: 1,
        generator: DataGenerator::Gaussian {
            mean: vec![0.0],
            var: vec![1.0],
        },
        cond_probs: vec![1.0],
    };
    let mut rng = Stream::from_seed(1);
    let mut model = ScoreModel::new(1, 50, 1, 8, 4, &[64, 64], &mut rng).unwrap();
    for (si, (iters, lr, bs)) in [
        (25_000usize, 3e-3, 128usize),
        (12_000, 5e-4, 256),
        (12_000, 1e-4, 256),
        (8_000, 3e-5, 512),
    ]
    .iter()
    .enumerate()
    {
        pretrain_score_model(
            &mut model,
            &sched,
            &data,
            *iters,
            *bs,
            *lr,
            0.1,
            &Stream::from_seed(100 + si as u64),
            Clock::Deterministic,
            *iters,
        )
        .unwrap();
    }
    let composed = ComposedModel::new(
        model.clone(),
        sched,
        ComposeMode::CoreOnly,
        1.0,
        &ControllerConfig::default(),
        &mut Stream::from_seed(2),
    )
    .unwrap();
    save_composed(cache, &composed).unwrap();
    model
}

fn moments<M: EpsModel + Sync>(model: &M, sched: &NoiseSchedule, n: usize, seed: u64) -> (f64, f64) {
    use rayon::prelude::*;
    let rng = Stream::from_seed(seed);
    let samples: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i as u64);
            ancestral_sample(model, sched, Some(0), 0.0, &mut r, false).unwrap().0[0]
        })
        .collect();
    let mean = samples.iter().sum::<f64>() / n as f64;
    let var = samples.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

fn predicted_final(sched: &NoiseSchedule, v0: f64) -> (f64, f64) {
    let (m_t, s2) = (v0, v0);
    let mut mu = 0.0;
    let mut v = 1.0;
    for t in 1..sched.horizon() {
        let a = sched.alpha(t);
        let ab = sched.alpha_bar(t);
        let b = sched.beta(t);
        let bt = sched.beta_tilde(t);
        let denom = ab * s2 + 1.0 - ab;
        let big_a = 1.0 / a.sqrt() - (b / a.sqrt()) / denom;
        let c = (b / a.sqrt()) * ab.sqrt() * m_t / denom;
        mu = big_a * mu + c;
        v = big_a * big_a * v + bt;
    }
    (mu, v)
}

fn win_rate(
    ft: &ComposedModel,
    pre: &ScoreModel,
    sched: &NoiseSchedule,
    reward: &RewardSpec,
    n: usize,
    seed: u64,
) -> f64 {
    use rayon::prelude::*;
    let rng = Stream::from_seed(seed);
    let wins: f64 = (0..n)
        .into_par_iter()
        .map(|i| {
            let noise = rng.derive(i as u64);
            let (xf, _) =
                ancestral_sample(ft, sched, Some(0), 0.0, &mut noise.clone(), false).unwrap();
            let (xp, _) =
                ancestral_sample(pre, sched, Some(0), 0.0, &mut noise.clone(), false).unwrap();
            let rf = reward.eval(&xf, None);
            let rp = reward.eval(&xp, None);
            if rf > rp {
                1.0
            } else if rf == rp {
                0.5
            } else {
                0.0
            }
        })
        .sum();
    wins / n as f64
}

fn main() {
    let t0 = std::time::Instant::now();
    let sched = sched50();
    let model = pretrained_fixture();
    println!("pretrained ready: {:.0}s", t0.elapsed().as_secs_f64());
    let region = |tau: f64| RewardSpec {
        form: RewardForm::Region {
            center: vec![1.0],
            radius: 0.5,
            high: 1.0,
            low: 0.0,
        },
        tau,
        baseline: BaselineMode::BatchMean,
    };
    for (name, tau, iters) in [("small-tau", 0.01, 300usize), ("large-tau", 10.0, 300)] {
        let t1 = std::time::Instant::now();
        let mut ppo_model = ComposedModel::new(
            model.clone(),
            sched.clone(),
            ComposeMode::SideNet,
            1.0,
            &ControllerConfig {
                side_hidden: vec![32, 32],
                lora_rank: 4,
                lora_scale: 1.0,
            },
            &mut Stream::from_seed(5),
        )
        .unwrap();
        let reward = region(tau);
        let pcfg = PolicyRlConfig {
            iterations: iters,
            batch_size: 64,
            lr: 2e-3,
            lr_lora: None,
            tau,
            fd: diffcon::fdiv::FDiv::kl(),
            clip_delta: 0.2,
            ppo_epochs: 3,
            rollout_lambda_cfg: 0.0,
            log_every: 100,
        };
        let log = ppo_finetune(
            &mut ppo_model,
            &reward,
            &[1.0],
            &pcfg,
            &Stream::from_seed(6),
            Clock::Deterministic,
        )
        .unwrap();
        let last = log.rows.last().unwrap();
        let wr = win_rate(&ppo_model, &model, &sched, &reward, 2000, 123);
        println!(
            "{name}: {:.0}s reward {:.3} kl {:.3} win_rate {wr:.4}",
            t1.elapsed().as_secs_f64(),
            last.mean_reward,
            last.mean_kl
        );
    }
    println!("total: {:.0}s", t0.elapsed().as_secs_f64());
}
