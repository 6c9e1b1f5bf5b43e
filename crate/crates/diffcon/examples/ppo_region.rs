//! KL-regularized PPO on a region-indicator reward: the pretrained sampler
//! puts ~19% of its mass in the target band; with a small KL temperature the
//! side network learns to concentrate there, while a large temperature pins
//! the policy to the pretrained model.
//!
//! Run with: `cargo run --release --example ppo_region`

use diffcon::controller::{ComposeMode, ComposedModel, ControllerConfig};
use diffcon::diffusion::{ancestral_sample, DataGenerator, DataSpec, ScoreModel};
use diffcon::fdiv::FDiv;
use diffcon::rlft::{
    ppo_finetune, pretrain_score_model, BaselineMode, Clock, PolicyRlConfig, RewardForm,
    RewardSpec,
};
use diffcon::rng::Stream;
use diffcon::schedule::NoiseSchedule;

fn main() {
    let sched = NoiseSchedule::linear(50, 0.002, 0.2).unwrap();
    let data = DataSpec {
        dim: 1,
        generator: DataGenerator::Gaussian {
            mean: vec![0.0],
            var: vec![1.0],
        },
        cond_probs: vec![1.0],
    };
    let mut rng = Stream::from_seed(1);
    let mut pre = ScoreModel::new(1, 50, 1, 8, 4, &[48, 48], &mut rng).unwrap();
    println!("pretraining (short budget) ...");
    pretrain_score_model(
        &mut pre,
        &sched,
        &data,
        8000,
        128,
        3e-3,
        0.1,
        &Stream::from_seed(2),
        Clock::Deterministic,
        8000,
    )
    .unwrap();

    for tau in [0.01, 10.0] {
        let reward = RewardSpec {
            form: RewardForm::Region {
                center: vec![1.0],
                radius: 0.5,
                high: 1.0,
                low: 0.0,
            },
            tau,
            baseline: BaselineMode::BatchMean,
        };
        let mut model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            ComposeMode::SideNet,
            1.0,
            &ControllerConfig {
                side_hidden: vec![32, 32],
                lora_rank: 4,
                lora_scale: 1.0,
            },
            &mut Stream::from_seed(3),
        )
        .unwrap();
        let cfg = PolicyRlConfig {
            iterations: 150,
            batch_size: 64,
            lr: 2e-3,
            lr_lora: None,
            tau,
            fd: FDiv::kl(),
            clip_delta: 0.2,
            ppo_epochs: 3,
            rollout_lambda_cfg: 0.0,
            log_every: 25,
        };
        println!("\nPPO with tau = {tau}:");
        let log = ppo_finetune(
            &mut model,
            &reward,
            &[1.0],
            &cfg,
            &Stream::from_seed(4),
            Clock::Deterministic,
        )
        .unwrap();
        for row in &log.rows {
            println!(
                "  iter {:>3}: mean reward {:.3}, KL to pretrained {:.3}",
                row.iter, row.mean_reward, row.mean_kl
            );
        }
        // Paired win rate against the pretrained model.
        let n = 1000;
        let base = Stream::from_seed(5);
        let mut wins = 0.0;
        for i in 0..n {
            let noise = base.derive(i as u64);
            let (xf, _) =
                ancestral_sample(&model, &sched, Some(0), 0.0, &mut noise.clone(), false).unwrap();
            let (xp, _) =
                ancestral_sample(&pre, &sched, Some(0), 0.0, &mut noise.clone(), false).unwrap();
            let rf = reward.eval(&xf, None);
            let rp = reward.eval(&xp, None);
            wins += if rf > rp {
                1.0
            } else if rf == rp {
                0.5
            } else {
                0.0
            };
        }
        println!("  win rate vs pretrained: {:.3}", wins / n as f64);
    }
}
