//! The full experiment pipeline through the harness, library-side: parse a
//! config, pretrain, fine-tune with PPO, evaluate with a guidance sweep, and
//! dump the oracle tables — the same four stages the `diffcon` CLI exposes.
//!
//! Run with: `cargo run --release --example experiment_pipeline`

use diffcon::harness::{cmd_eval, cmd_finetune, cmd_oracle, cmd_pretrain, ExperimentConfig};
use diffcon::rlft::Clock;

fn main() {
    let cfg = ExperimentConfig::parse(
        "seed = 7\n\
         [pretrain]\n\
         t_horizon = 30\n\
         schedule = linear:0.002:0.2\n\
         data = std-normal\n\
         hidden = 32,32\n\
         iterations = 4000\n\
         batch_size = 64\n\
         lr = 0.003\n\
         [finetune]\n\
         algorithm = ppo\n\
         parameterization = sidenet\n\
         tau = 0.01\n\
         iterations = 60\n\
         batch_size = 32\n\
         lr_side = 0.002\n\
         ppo_epochs = 3\n\
         side_hidden = 24,24\n\
         reward = region:1.0:0.5:1.0:0.0\n\
         [eval]\n\
         n_samples = 400\n\
         n_kl = 100\n\
         lambda_sweep = 0.5,1.0,1.5\n\
         [oracle]\n\
         chain = demo2\n\
         tau = 1.0\n",
    )
    .unwrap();
    let dir = std::env::temp_dir().join("diffcon_pipeline_demo");
    let _ = std::fs::remove_dir_all(&dir);

    println!("pretraining ...");
    let pre = cmd_pretrain(&cfg, &dir, Clock::Deterministic).unwrap();
    println!("fine-tuning with PPO ...");
    let ft = cmd_finetune(&cfg, &pre, &dir, Clock::Deterministic).unwrap();
    println!("evaluating with a lambda_model sweep ...");
    let report = cmd_eval(&cfg, &ft, &pre, &dir).unwrap();
    for row in &report.rows {
        println!(
            "  lambda_model {:>4}: win rate {:.3} +/- {:.3}, mean reward {:.3} (pretrained {:.3}), KL {:.3}",
            row.lambda_model, row.win_rate, row.wr_ci, row.mean_reward_ft, row.mean_reward_pre, row.mc_kl
        );
    }
    println!(
        "  best-of-sweep: lambda_model {} with win rate {:.3}",
        report.best.lambda_model, report.best.win_rate
    );
    println!("dumping oracle tables ...");
    cmd_oracle(&cfg, &dir).unwrap();
    let mut names: Vec<_> = std::fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    println!("outputs in {}:", dir.display());
    for n in names {
        println!("  {n}");
    }
}
