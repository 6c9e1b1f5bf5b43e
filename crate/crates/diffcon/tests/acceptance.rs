//! Acceptance suite: one test per criterion, each printing a PASS/FAIL line.
//!
//! Criterion 4 is expected RED: its tolerances presume a bias-free reverse
//! sampler, which the beta-tilde convention cannot deliver at T = 50. The
//! companion test checks the same pipeline against the sampler-consistent
//! closed-form oracle instead. See /root/notes/decisions.md for the full
//! blocking analysis.

use std::sync::OnceLock;

use rayon::prelude::*;

use diffcon::controller::{
    kernel_mc_estimate, ComposeMode, ComposedModel, ControllerConfig, FourierBasis,
};
use diffcon::diffusion::{ancestral_sample, sm_loss, DataGenerator, DataSpec, EpsModel, ScoreModel};
use diffcon::fdiv::{div_discrete, Divergence, FDiv};
use diffcon::lsmdp::{
    solve_baseline, terminal_marginal, trajectory_brute, value_general_f, z_recursion,
    TabularChain,
};
use diffcon::numkit::grad_check;
use diffcon::rlft::{
    pg_surrogate, policy_gradient_neural, policy_values, ppo_finetune, ppo_loss,
    pretrain_score_model, rollout, rwl_finetune, rwl_loss, rwl_weights, sample_tabular_paths,
    soft_advantage_exact, soft_advantage_mc, tabular_objective, tabular_policy_gradient,
    tabular_traj_stats, BaselineMode, Clock, McBaseline, PolicyRlConfig, ResolvedBaseline,
    RewardForm, RewardSpec, RwlConfig, SampleSource, TabularLogits, TabularPolicy, Weighting,
};
use diffcon::rng::Stream;
use diffcon::schedule::NoiseSchedule;

// ---------------------------------------------------------------------------
// Shared fixture: the acceptance-scale pretrained model on N(0,1), T = 50.
// ---------------------------------------------------------------------------

fn sched50() -> NoiseSchedule {
    NoiseSchedule::linear(50, 0.002, 0.2).unwrap()
}

fn std_normal_data() -> DataSpec {
    DataSpec {
        dim: 1,
        generator: DataGenerator::Gaussian {
            mean: vec![0.0],
            var: vec![1.0],
        },
        cond_probs: vec![1.0],
    }
}

fn pretrained_fixture() -> &'static ScoreModel {
    static MODEL: OnceLock<ScoreModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let sched = sched50();
        let data = std_normal_data();
        let mut rng = Stream::from_seed(1);
        let mut model = ScoreModel::new(1, 50, 1, 8, 4, &[64, 64], &mut rng).unwrap();
        // Staged Adam: a hot phase then low-rate polishing passes; the last
        // stages shrink optimizer jitter below the 0.05 grid budget.
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
        model
    })
}

fn sidenet_config() -> ControllerConfig {
    ControllerConfig {
        side_hidden: vec![32, 32],
        lora_rank: 4,
        lora_scale: 1.0,
    }
}

/// Terminal sample moments of a model under unguided conditional sampling.
fn sample_moments<M: EpsModel + Sync>(
    model: &M,
    sched: &NoiseSchedule,
    n: usize,
    seed: u64,
) -> (f64, f64) {
    let rng = Stream::from_seed(seed);
    let xs: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.derive(i as u64);
            ancestral_sample(model, sched, Some(0), 0.0, &mut r, false).unwrap().0[0]
        })
        .collect();
    let mean = xs.iter().sum::<f64>() / n as f64;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
    (mean, var)
}

/// Paired win rate of a fine-tuned model against the pretrained core.
fn paired_win_rate(
    ft: &ComposedModel,
    pre: &ScoreModel,
    sched: &NoiseSchedule,
    reward: &RewardSpec,
    n: usize,
    seed: u64,
) -> f64 {
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

fn random_chain(rng: &mut Stream) -> TabularChain {
    let s = 2 + rng.below(4); // states in 2..=5
    let t = 2 + rng.below(4); // horizon in 2..=5
    TabularChain::random(s, t, rng)
}

// ---------------------------------------------------------------------------
// 1. Tabular oracle equivalence: DP terminal marginal vs trajectory
//    enumeration, 100 random chains, max abs error 1e-10.
// ---------------------------------------------------------------------------
#[test]
fn criterion_01_tabular_oracle_equivalence() {
    let mut rng = Stream::from_seed(1001);
    let mut worst: f64 = 0.0;
    for trial in 0..100 {
        let chain = random_chain(&mut rng);
        let tau = [0.1, 1.0, 10.0][trial % 3];
        let dp = terminal_marginal(&chain, tau).unwrap();
        let brute = trajectory_brute(&chain, tau, &FDiv::kl()).unwrap();
        for (a, b) in dp.iter().zip(&brute.p_star) {
            worst = worst.max((a - b).abs());
        }
    }
    assert!(worst <= 1e-10, "max abs error {worst}");
    println!("PASS criterion 1: DP vs enumeration max abs error {worst:.3e} <= 1e-10");
}

// ---------------------------------------------------------------------------
// 2. Bellman cross-check: general-f(KL) values vs tau ln Z to 1e-8 on 100
//    chains; alpha=2 values vs a 1e-4-resolution simplex grid search within
//    1e-3 on 10 chains.
// ---------------------------------------------------------------------------
#[test]
fn criterion_02_bellman_cross_check() {
    let mut rng = Stream::from_seed(1002);
    let mut worst_kl: f64 = 0.0;
    for trial in 0..100 {
        let chain = random_chain(&mut rng);
        let tau = [0.1, 1.0, 10.0][trial % 3];
        let z = z_recursion(&chain, tau).unwrap();
        let gen = value_general_f(&chain, tau, &FDiv::kl()).unwrap();
        for t in 1..=chain.horizon {
            for s in 0..chain.n_states {
                worst_kl = worst_kl.max((gen.v[t - 1][s] - z.value(tau, t, s)).abs());
            }
        }
        worst_kl = worst_kl.max((gen.v0 - tau * z.log_z0).abs());
    }
    assert!(worst_kl <= 1e-8, "KL cross-check error {worst_kl}");

    // Alpha = 2 against an independent grid-search backward induction on
    // 2-state chains (the simplex is a scannable segment there).
    let fd = FDiv::alpha(2.0).unwrap();
    let mut worst_alpha: f64 = 0.0;
    for trial in 0..10 {
        let chain = TabularChain::random(2, 2 + trial % 3, &mut rng);
        let tau = [0.5, 1.0][trial % 2];
        let gen = value_general_f(&chain, tau, &fd).unwrap();
        // Grid-search value recursion, fully independent of the bisection.
        let mut v_grid = vec![vec![0.0; 2]; chain.horizon];
        v_grid[chain.horizon - 1].copy_from_slice(&chain.reward);
        let best_row = |passive: &[f64], next: &[f64]| -> f64 {
            let mut best = f64::NEG_INFINITY;
            for i in 0..=10_000 {
                let q0 = i as f64 / 10_000.0;
                let q = [q0, 1.0 - q0];
                let pen = match div_discrete(&fd, &q, passive).unwrap() {
                    Divergence::Finite(d) => d,
                    Divergence::Infinite => continue,
                };
                best = best.max(q[0] * next[0] + q[1] * next[1] - tau * pen);
            }
            best
        };
        for t in (1..chain.horizon).rev() {
            let next = v_grid[t].clone();
            for s in 0..2 {
                v_grid[t - 1][s] = best_row(&chain.kernels[t - 1][s], &next);
            }
        }
        let v0_grid = best_row(&chain.init, &v_grid[0].clone());
        for t in 1..=chain.horizon {
            for s in 0..2 {
                worst_alpha = worst_alpha.max((gen.v[t - 1][s] - v_grid[t - 1][s]).abs());
            }
        }
        worst_alpha = worst_alpha.max((gen.v0 - v0_grid).abs());
    }
    assert!(worst_alpha <= 1e-3, "alpha grid-search error {worst_alpha}");
    println!(
        "PASS criterion 2: KL value error {worst_kl:.3e} <= 1e-8; alpha=2 grid error {worst_alpha:.3e} <= 1e-3"
    );
}

// ---------------------------------------------------------------------------
// 3. Proposition-1 gradient: exact tabular policy gradient vs central finite
//    differences of the exactly computed objective, rel error < 1e-6.
// ---------------------------------------------------------------------------
#[test]
fn criterion_03_policy_gradient_fd() {
    let mut rng = Stream::from_seed(1003);
    let combos = [
        (FDiv::kl(), 0.0),
        (FDiv::kl(), 0.5),
        (FDiv::kl(), 2.0),
        (FDiv::alpha(2.0).unwrap(), 0.0),
        (FDiv::alpha(2.0).unwrap(), 0.5),
        (FDiv::alpha(2.0).unwrap(), 2.0),
    ];
    let mut worst: f64 = 0.0;
    for instance in 0..20 {
        let (fd, tau) = &combos[instance % combos.len()];
        let chain = TabularChain::random(3, 3, &mut rng);
        let template = TabularLogits::zeros(3, 3);
        let flat: Vec<f64> = (0..template.flat().len())
            .map(|_| 0.6 * (rng.uniform() - 0.5))
            .collect();
        let logits = template.from_flat(&flat).unwrap();
        let (_, analytic) = tabular_policy_gradient(&chain, &logits, *tau, fd).unwrap();
        let h = 1e-5;
        let mut work = flat.clone();
        let mut fdgrad = vec![0.0; flat.len()];
        for j in 0..flat.len() {
            let orig = work[j];
            work[j] = orig + h;
            let up = tabular_objective(&chain, &template.from_flat(&work).unwrap(), *tau, fd)
                .unwrap();
            work[j] = orig - h;
            let down = tabular_objective(&chain, &template.from_flat(&work).unwrap(), *tau, fd)
                .unwrap();
            work[j] = orig;
            fdgrad[j] = (up - down) / (2.0 * h);
        }
        let num = analytic
            .iter()
            .zip(&fdgrad)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            .sqrt();
        let den = analytic.iter().map(|a| a * a).sum::<f64>().sqrt();
        worst = worst.max(num / den.max(1e-12));
    }
    assert!(worst < 1e-6, "relative gradient error {worst}");
    println!("PASS criterion 3: Proposition-1 gradient vs FD rel error {worst:.3e} < 1e-6");
}

// ---------------------------------------------------------------------------
// 4. Theorem-1 minimizer preservation (neural). The faithful criterion is
//    EXPECTED RED: even a perfectly trained pipeline lands near
//    (mean, var) = (0.89, 0.80) at T = 50 because the beta-tilde sampler
//    loses variance per pass and the teacher marginal enters the tilt; the
//    stated tolerances (1.0 +- 0.07, 1.0 +- 0.12) assume a bias-free
//    sampler. Full analysis in the decisions ledger.
// ---------------------------------------------------------------------------

struct RwlOutcome {
    pre_mean: f64,
    pre_var: f64,
    mean: f64,
    var: f64,
    pred_mean: f64,
    pred_var: f64,
}

fn rwl_pipeline() -> &'static RwlOutcome {
    static OUT: OnceLock<RwlOutcome> = OnceLock::new();
    OUT.get_or_init(|| {
        let sched = sched50();
        let pre = pretrained_fixture();
        let (pre_mean, pre_var) = sample_moments(pre, &sched, 20_000, 777);
        let mut model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            ComposeMode::SideNet,
            1.0,
            &sidenet_config(),
            &mut Stream::from_seed(3),
        )
        .unwrap();
        let reward = RewardSpec {
            form: RewardForm::Linear { a: vec![1.0] },
            tau: 1.0,
            baseline: BaselineMode::BatchMax,
        };
        for (si, (iters, lr)) in [(4000usize, 3e-3), (3000, 5e-4), (2000, 1e-4)]
            .iter()
            .enumerate()
        {
            let cfg = RwlConfig {
                iterations: *iters,
                batch_size: 64,
                lr: *lr,
                lr_lora: None,
                tau: 1.0,
                weighting: Weighting::Exponential,
                baseline: BaselineMode::BatchMax,
                sample_every: 2,
                source: SampleSource::Teacher,
                reuse_noise: false,
                rollout_lambda_cfg: 0.0,
                log_every: *iters,
            };
            rwl_finetune(
                &mut model,
                &reward,
                &[1.0],
                &cfg,
                &Stream::from_seed(200 + si as u64),
                Clock::Deterministic,
            )
            .unwrap();
        }
        let (mean, var) = sample_moments(&model, &sched, 20_000, 999);
        // Sampler-consistent oracle: the teacher marginal is (approximately)
        // N(0, v0); exponential tilting at tau = 1, a = 1 targets
        // N(v0, v0); the exact linear-Gaussian recursion then predicts the
        // moments of sampling that target's score through this schedule.
        let (m_t, s2) = (pre_var, pre_var);
        let mut pred_mean = 0.0;
        let mut pred_var = 1.0;
        for t in 1..sched.horizon() {
            let a = sched.alpha(t);
            let ab = sched.alpha_bar(t);
            let b = sched.beta(t);
            let bt = sched.beta_tilde(t);
            let denom = ab * s2 + 1.0 - ab;
            let big_a = 1.0 / a.sqrt() - (b / a.sqrt()) / denom;
            let c = (b / a.sqrt()) * ab.sqrt() * m_t / denom;
            pred_mean = big_a * pred_mean + c;
            pred_var = big_a * big_a * pred_var + bt;
        }
        RwlOutcome {
            pre_mean,
            pre_var,
            mean,
            var,
            pred_mean,
            pred_var,
        }
    })
}

#[test]
fn criterion_04_theorem1_minimizer_preservation() {
    // Pretraining quality gate from the diffusion invariants: analytic-score
    // grid error < 0.05 on x in [-2, 2] across every step.
    let sched = sched50();
    let model = pretrained_fixture();
    let mut grid_err: f64 = 0.0;
    for t in 1..sched.horizon() {
        for i in 0..9 {
            let x = -2.0 + 0.5 * i as f64;
            let pred = model.predict(&[x], Some(0), t).unwrap()[0];
            let exact = x * (1.0 - sched.alpha_bar(t)).sqrt();
            grid_err = grid_err.max((pred - exact).abs());
        }
    }
    assert!(grid_err < 0.05, "pretraining grid error {grid_err}");

    let out = rwl_pipeline();
    println!(
        "criterion 4 measured: pretrained marginal ({:.4}, {:.4}); RWL generations mean {:.4}, var {:.4}; sampler-consistent oracle predicts ({:.4}, {:.4}); grid error {:.4}",
        out.pre_mean, out.pre_var, out.mean, out.var, out.pred_mean, out.pred_var, grid_err
    );
    let mean_ok = (out.mean - 1.0).abs() <= 0.07;
    let var_ok = (out.var - 1.0).abs() <= 0.12;
    if !(mean_ok && var_ok) {
        println!(
            "FAIL criterion 4 (expected red): mean {:.4} outside 1.0 +- 0.07 or var {:.4} outside 1.0 +- 0.12. The tolerances presume a bias-free reverse sampler; under the beta-tilde convention at T = 50 the best attainable is approximately (0.89, 0.80) even for a perfectly trained model. See the decisions ledger for the exact analysis; the companion test validates minimizer preservation against the sampler-consistent oracle.",
            out.mean, out.var
        );
    } else {
        println!("PASS criterion 4: mean {:.4}, var {:.4}", out.mean, out.var);
    }
    assert!(
        mean_ok,
        "generated mean {:.4} outside 1.0 +- 0.07 (known spec defect, see ledger)",
        out.mean
    );
    assert!(
        var_ok,
        "generated variance {:.4} outside 1.0 +- 0.12 (known spec defect, see ledger)",
        out.var
    );
}

#[test]
fn criterion_04_companion_sampler_consistent_minimizer() {
    let out = rwl_pipeline();
    // The pretrained sampler's variance must match the closed-form
    // linear-Gaussian value for this schedule (validates the oracle), and
    // the RWL generations must match the oracle's two-pass prediction.
    let sched = sched50();
    let mut v_pred = 1.0;
    for t in 1..sched.horizon() {
        v_pred = sched.alpha(t) * v_pred + sched.beta_tilde(t);
    }
    assert!(
        (out.pre_var - v_pred).abs() < 0.03,
        "pretrained sampler variance {:.4} vs closed form {:.4}",
        out.pre_var,
        v_pred
    );
    assert!(out.pre_mean.abs() < 0.03, "pretrained mean {}", out.pre_mean);
    assert!(
        (out.mean - out.pred_mean).abs() < 0.06,
        "RWL mean {:.4} vs sampler-consistent {:.4}",
        out.mean,
        out.pred_mean
    );
    assert!(
        (out.var - out.pred_var).abs() < 0.08,
        "RWL var {:.4} vs sampler-consistent {:.4}",
        out.var,
        out.pred_var
    );
    println!(
        "PASS criterion 4 companion: RWL generations ({:.4}, {:.4}) match the sampler-consistent minimizer ({:.4}, {:.4})",
        out.mean, out.var, out.pred_mean, out.pred_var
    );
}

// ---------------------------------------------------------------------------
// 5. Theorem 1 at tabular scale: self-normalized weighted empirical terminal
//    distribution matches the enumerated tilted marginal, TV < 0.02 at
//    N = 2e5, for KL and alpha = 2.
// ---------------------------------------------------------------------------
#[test]
fn criterion_05_rwl_tabular_tv() {
    let mut rng = Stream::from_seed(1005);
    let n = 200_000;
    let mut worst: f64 = 0.0;
    for trial in 0..2 {
        let chain = TabularChain::random(3, 3, &mut rng);
        let tau = 1.0;
        let passive = TabularPolicy::passive(&chain);
        let paths = sample_tabular_paths(&passive, n, &Stream::from_seed(5050 + trial));
        let terminal_probs = chain.passive_terminal();
        for fd in [FDiv::kl(), FDiv::alpha(2.0).unwrap()] {
            let brute = trajectory_brute(&chain, tau, &fd).unwrap();
            let b = solve_baseline(&fd, &chain.reward, &terminal_probs, tau).unwrap();
            // Self-normalized weighted empirical terminal distribution.
            let mut weighted = vec![0.0; chain.n_states];
            for path in &paths {
                let s = *path.last().unwrap();
                weighted[s] += fd.fprime_inv((chain.reward[s] - b) / tau).max(0.0);
            }
            let total: f64 = weighted.iter().sum();
            let tv = 0.5
                * weighted
                    .iter()
                    .zip(&brute.p_star)
                    .map(|(w, p)| (w / total - p).abs())
                    .sum::<f64>();
            worst = worst.max(tv);
            assert!(tv < 0.02, "trial {trial} {fd:?}: TV {tv}");
        }
    }
    println!("PASS criterion 5: weighted empirical vs enumerated tilted marginal, worst TV {worst:.4} < 0.02");
}

// ---------------------------------------------------------------------------
// 6. PPO improvement on the region-indicator toy: win rate > 0.60 with small
//    tau and finite logged KL; win rate <= 0.55 with tau at 10x the reward
//    scale.
// ---------------------------------------------------------------------------
#[test]
fn criterion_06_ppo_improvement() {
    let sched = sched50();
    let pre = pretrained_fixture();
    let run = |tau: f64| {
        let mut model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            ComposeMode::SideNet,
            1.0,
            &sidenet_config(),
            &mut Stream::from_seed(5),
        )
        .unwrap();
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
        let cfg = PolicyRlConfig {
            iterations: 300,
            batch_size: 64,
            lr: 2e-3,
            lr_lora: None,
            tau,
            fd: FDiv::kl(),
            clip_delta: 0.2,
            ppo_epochs: 3,
            rollout_lambda_cfg: 0.0,
            log_every: 50,
        };
        let log = ppo_finetune(
            &mut model,
            &reward,
            &[1.0],
            &cfg,
            &Stream::from_seed(6),
            Clock::Deterministic,
        )
        .unwrap();
        assert!(
            log.rows.iter().all(|r| r.mean_kl.is_finite()),
            "Monte Carlo KL must be finite and logged"
        );
        let wr = paired_win_rate(&model, pre, &sched, &reward, 2000, 123);
        (wr, log.rows.last().unwrap().mean_kl)
    };
    let (wr_small, kl_small) = run(0.01);
    assert!(wr_small > 0.60, "small-tau win rate {wr_small}");
    let (wr_large, kl_large) = run(10.0);
    assert!(wr_large <= 0.55, "large-tau win rate {wr_large}");
    println!(
        "PASS criterion 6: win rate {wr_small:.4} > 0.60 at tau = 0.01 (KL {kl_small:.3}); {wr_large:.4} <= 0.55 at tau = 10 (KL {kl_large:.3})"
    );
}

// ---------------------------------------------------------------------------
// 7. Parameterization identities: zero-init equals the pretrained model
//    bitwise in all five modes; lambda_model = 0 sampling is bitwise
//    pretrained; frozen-core bytes survive gray-box training.
// ---------------------------------------------------------------------------
#[test]
fn criterion_07_parameterization_identities() {
    let mut rng = Stream::from_seed(1007);
    let sched = NoiseSchedule::constant(6, 0.1).unwrap();
    let pre = ScoreModel::new(2, 6, 2, 4, 3, &[10], &mut rng).unwrap();
    let modes = [
        ComposeMode::SideNet,
        ComposeMode::SideNetUngated,
        ComposeMode::LoraOnly,
        ComposeMode::Joint,
        ComposeMode::Separate,
    ];
    // Zero-init bitwise identity on 1000 random inputs per mode.
    for mode in modes {
        let model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            mode,
            1.0,
            &sidenet_config(),
            &mut rng.derive(mode.tag_for_tests()),
        )
        .unwrap();
        let mut inp = Stream::from_seed(7100);
        for _ in 0..1000 {
            let x = inp.normal_vec(2);
            let t = 1 + inp.below(5);
            let c = if inp.uniform() < 0.5 {
                Some(inp.below(2))
            } else {
                None
            };
            let a = model.predict(&x, c, t).unwrap();
            let b = pre.predict(&x, c, t).unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.to_bits(), v.to_bits(), "mode {mode:?}");
            }
        }
    }
    // lambda_model = 0 sampling is bitwise pretrained sampling under a shared
    // seed, even with a trained (perturbed) side network.
    for mode in [ComposeMode::SideNet, ComposeMode::SideNetUngated] {
        let mut model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            mode,
            0.0,
            &sidenet_config(),
            &mut rng.derive(77),
        )
        .unwrap();
        let mut p = model.trainable_params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.1 * (((i % 13) as f64) - 6.0);
        }
        model.set_trainable_params(&p).unwrap();
        for seed in 0..20u64 {
            let (a, _) = ancestral_sample(
                &model,
                &sched,
                Some(0),
                0.0,
                &mut Stream::from_seed(7200 + seed),
                false,
            )
            .unwrap();
            let (b, _) = ancestral_sample(
                &pre,
                &sched,
                Some(0),
                0.0,
                &mut Stream::from_seed(7200 + seed),
                false,
            )
            .unwrap();
            for (u, v) in a.iter().zip(&b) {
                assert_eq!(u.to_bits(), v.to_bits(), "mode {mode:?}");
            }
        }
    }
    // Frozen-core bytes unchanged by gray-box fine-tuning.
    for mode in [ComposeMode::SideNet, ComposeMode::SideNetUngated] {
        let mut model = ComposedModel::new(
            pre.clone(),
            sched.clone(),
            mode,
            1.0,
            &sidenet_config(),
            &mut rng.derive(88),
        )
        .unwrap();
        let before = model.core_param_bytes();
        let reward = RewardSpec {
            form: RewardForm::Linear { a: vec![1.0, 0.0] },
            tau: 1.0,
            baseline: BaselineMode::BatchMax,
        };
        let cfg = RwlConfig {
            iterations: 10,
            batch_size: 8,
            lr: 1e-3,
            lr_lora: None,
            tau: 1.0,
            weighting: Weighting::Exponential,
            baseline: BaselineMode::BatchMax,
            sample_every: 2,
            source: SampleSource::Online,
            reuse_noise: false,
            rollout_lambda_cfg: 0.0,
            log_every: 10,
        };
        rwl_finetune(
            &mut model,
            &reward,
            &[0.5, 0.5],
            &cfg,
            &Stream::from_seed(7300),
            Clock::Deterministic,
        )
        .unwrap();
        assert_eq!(before, model.core_param_bytes(), "mode {mode:?}");
    }
    println!("PASS criterion 7: zero-init bitwise identity (5 modes, 1000 inputs), lambda=0 bitwise sampling, frozen-core bytes intact");
}

trait ModeTag {
    fn tag_for_tests(&self) -> u64;
}
impl ModeTag for ComposeMode {
    fn tag_for_tests(&self) -> u64 {
        self.name().len() as u64 * 31 + self.name().as_bytes()[0] as u64
    }
}

// ---------------------------------------------------------------------------
// 8. Proposition-2 machinery: the Fourier kernel estimate is unbiased within
//    4 SE, and quadrupling M halves the error (ratio in [1.4, 2.8] over 200
//    repeats).
// ---------------------------------------------------------------------------
#[test]
fn criterion_08_fourier_kernel() {
    let rng = Stream::from_seed(1008);
    let mu = [0.4];
    let x = [0.9];
    let beta_tilde = 0.7;
    let exact = {
        let d = (x[0] - mu[0]) * (x[0] - mu[0]);
        (2.0 * std::f64::consts::PI * beta_tilde).powf(-0.5) * (-d / (2.0 * beta_tilde)).exp()
    };
    // Unbiasedness: mean over fresh bases within 4 SE of the exact density.
    let repeats = 500;
    let m = 2000;
    let estimates: Vec<f64> = (0..repeats)
        .map(|i| {
            let basis =
                FourierBasis::sample(m, 1, beta_tilde, &mut rng.derive(i as u64)).unwrap();
            kernel_mc_estimate(&basis, &mu, &x).unwrap()
        })
        .collect();
    let mean = estimates.iter().sum::<f64>() / repeats as f64;
    let sd = (estimates
        .iter()
        .map(|e| (e - mean) * (e - mean))
        .sum::<f64>()
        / repeats as f64)
        .sqrt();
    let se = sd / (repeats as f64).sqrt();
    assert!(
        (mean - exact).abs() < 4.0 * se,
        "estimate {mean} vs exact {exact} (se {se})"
    );
    // O_p(1/sqrt(M)): the mean absolute error ratio between M and 4M sits in
    // [1.4, 2.8] (2 in expectation) averaged over 200 repeats.
    let m_small = 500;
    let mut err_small = 0.0;
    let mut err_big = 0.0;
    for i in 0..200 {
        let b1 = FourierBasis::sample(m_small, 1, beta_tilde, &mut rng.derive(10_000 + i)).unwrap();
        let b2 =
            FourierBasis::sample(4 * m_small, 1, beta_tilde, &mut rng.derive(20_000 + i)).unwrap();
        err_small += (kernel_mc_estimate(&b1, &mu, &x).unwrap() - exact).abs();
        err_big += (kernel_mc_estimate(&b2, &mu, &x).unwrap() - exact).abs();
    }
    let ratio = err_small / err_big;
    assert!(
        (1.4..=2.8).contains(&ratio),
        "error ratio {ratio} outside [1.4, 2.8]"
    );
    println!(
        "PASS criterion 8: unbiased within 4 SE (|{mean:.6} - {exact:.6}| < {:.2e}); M->4M error ratio {ratio:.2} in [1.4, 2.8]",
        4.0 * se
    );
}

// ---------------------------------------------------------------------------
// 9. Zero-mean advantage: exact per-state conditional means at 1e-10; Monte
//    Carlo batch means within 4 SE over 50 seeds.
// ---------------------------------------------------------------------------
#[test]
fn criterion_09_zero_mean_advantage() {
    let mut rng = Stream::from_seed(1009);
    // Exact.
    let mut worst: f64 = 0.0;
    for trial in 0..10 {
        let chain = TabularChain::random(3, 4, &mut rng);
        let tau = [0.3, 1.0, 2.0][trial % 3];
        let oracle = diffcon::lsmdp::optimal_kernel(&chain, 0.8).unwrap();
        let policy = TabularPolicy {
            init: oracle.tilted_init.clone(),
            kernels: oracle.tilted.clone(),
        };
        for fd in [FDiv::kl(), FDiv::alpha(2.0).unwrap()] {
            let adv = soft_advantage_exact(&chain, &policy, tau, &fd).unwrap();
            for t in 1..chain.horizon {
                for s in 0..chain.n_states {
                    let mean: f64 = policy.kernels[t - 1][s]
                        .iter()
                        .zip(&adv.a[t - 1][s])
                        .map(|(p, a)| p * a)
                        .sum();
                    worst = worst.max(mean.abs());
                }
            }
            let mean0: f64 = policy.init.iter().zip(&adv.a0).map(|(p, a)| p * a).sum();
            worst = worst.max(mean0.abs());
        }
    }
    assert!(worst <= 1e-10, "exact conditional mean {worst}");

    // Monte Carlo across 50 seeds with the exact value as a fixed baseline.
    let chain = TabularChain::two_state_demo();
    let tau = 0.5;
    let oracle = diffcon::lsmdp::optimal_kernel(&chain, 1.3).unwrap();
    let policy = TabularPolicy {
        init: oracle.tilted_init.clone(),
        kernels: oracle.tilted.clone(),
    };
    let (_, v0) = policy_values(&chain, &policy, tau, &FDiv::kl()).unwrap();
    let n = 4000;
    for seed in 0..50u64 {
        let paths = sample_tabular_paths(&policy, n, &Stream::from_seed(9000 + seed));
        let stats = tabular_traj_stats(&chain, &policy, &paths);
        let adv = soft_advantage_mc(&stats, tau, &FDiv::kl(), McBaseline::Fixed(v0)).unwrap();
        let mean: f64 = adv.adv.iter().sum::<f64>() / n as f64;
        let sd: f64 = (adv
            .adv
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / n as f64)
            .sqrt();
        let se = sd / (n as f64).sqrt();
        assert!(
            mean.abs() < 4.0 * se,
            "seed {seed}: batch mean {mean} vs 4 SE {}",
            4.0 * se
        );
    }
    println!("PASS criterion 9: exact conditional means {worst:.3e} <= 1e-10; 50 MC batch means within 4 SE");
}

// ---------------------------------------------------------------------------
// 10. The alpha -> 1 weighting limit and the paper's own RWL setting.
// ---------------------------------------------------------------------------
#[test]
fn criterion_10_alpha_weighting_limit() {
    let fd = FDiv::alpha(1.0 + 1e-6).unwrap();
    let mut worst: f64 = 0.0;
    for i in 0..=1000 {
        let y = -5.0 + 0.01 * i as f64;
        let w = fd.fprime_inv(y);
        worst = worst.max((w - y.exp()).abs() / y.exp());
    }
    assert!(worst < 1e-3, "alpha->1 relative error {worst}");
    // tau = 5e-4, alpha = 1 + 5e-4: at r - b = 5e-4 the weight is
    // (1.0005)^2000 ~ 2.7176.
    let tau = 5e-4;
    let w = rwl_weights(
        &[tau],
        &Weighting::Polynomial { alpha: 1.0 + tau },
        tau,
        &ResolvedBaseline::Fixed(0.0),
    )
    .unwrap();
    assert!(
        (w[0] - 2.7176).abs() < 1e-4,
        "paper setting weight {} vs 2.7176",
        w[0]
    );
    println!(
        "PASS criterion 10: alpha->1 limit rel error {worst:.3e} < 1e-3; (1.0005)^2000 = {:.6}",
        w[0]
    );
}

// ---------------------------------------------------------------------------
// 11. Autodiff soundness: every loss in the crate passes grad_check < 1e-4 on
//     20 random configurations.
// ---------------------------------------------------------------------------
#[test]
fn criterion_11_grad_check_all_losses() {
    let sched = NoiseSchedule::constant(5, 0.12).unwrap();
    let modes = [
        ComposeMode::SideNet,
        ComposeMode::SideNetUngated,
        ComposeMode::LoraOnly,
        ComposeMode::Joint,
        ComposeMode::Separate,
    ];
    let build = |mode: ComposeMode, seed: u64| {
        let mut rng = Stream::from_seed(seed);
        let pre = ScoreModel::new(2, 5, 2, 4, 2, &[6], &mut rng).unwrap();
        let mut model = ComposedModel::new(
            pre,
            sched.clone(),
            mode,
            0.9,
            &ControllerConfig {
                side_hidden: vec![5],
                lora_rank: 2,
                lora_scale: 1.0,
            },
            &mut rng,
        )
        .unwrap();
        let mut p = model.trainable_params();
        for (i, v) in p.iter_mut().enumerate() {
            *v += 0.05 * (((i * 13 + seed as usize) % 11) as f64 / 11.0 - 0.5);
        }
        model.set_trainable_params(&p).unwrap();
        model
    };
    let reward = RewardSpec {
        form: RewardForm::Linear { a: vec![1.0, -0.5] },
        tau: 0.5,
        baseline: BaselineMode::BatchMean,
    };
    let mut n_checked = 0;
    let mut worst: f64 = 0.0;
    let mut check = |disc: f64, what: &str| {
        assert!(disc < 1e-4, "{what}: discrepancy {disc}");
        worst = worst.max(disc);
        n_checked += 1;
    };

    // Score-matching loss on plain score models (3 configurations).
    for seed in 0..3u64 {
        let mut rng = Stream::from_seed(40 + seed);
        let model = ScoreModel::new(2, 5, 2, 4, 2, &[6], &mut rng).unwrap();
        let batch: Vec<(Vec<f64>, usize)> =
            (0..3).map(|_| (rng.normal_vec(2), rng.below(2))).collect();
        let data_rng = Stream::from_seed(400 + seed);
        let (_, analytic) = sm_loss(&model, &sched, &batch, 0.25, &mut data_rng.clone()).unwrap();
        let params = model.trainable_params();
        let disc = grad_check(
            |p| {
                let mut m = model.clone();
                m.set_trainable_params(p)?;
                Ok(sm_loss(&m, &sched, &batch, 0.25, &mut data_rng.clone())?.0)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        check(disc, "sm_loss/score-model");
    }

    // Weighted score-matching loss in every composition mode (5).
    for (i, mode) in modes.into_iter().enumerate() {
        let model = build(mode, 50 + i as u64);
        let mut rng = Stream::from_seed(500 + i as u64);
        let samples: Vec<(Vec<f64>, usize)> =
            (0..3).map(|_| (rng.normal_vec(2), rng.below(2))).collect();
        let weights = vec![0.7, 1.5, 0.2];
        let data_rng = Stream::from_seed(600 + i as u64);
        let (_, analytic) =
            rwl_loss(&model, &sched, &samples, &weights, &mut data_rng.clone()).unwrap();
        let params = model.trainable_params();
        let disc = grad_check(
            |p| {
                let mut m = model.clone();
                m.set_trainable_params(p)?;
                Ok(rwl_loss(&m, &sched, &samples, &weights, &mut data_rng.clone())?.0)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        check(disc, &format!("rwl_loss/{mode:?}"));
    }

    // PPO clipped surrogate in every mode (5), off-policy so ratios != 1.
    for (i, mode) in modes.into_iter().enumerate() {
        let collect_model = build(mode, 70 + i as u64);
        let batch = rollout(
            &collect_model,
            &reward,
            &[0.5, 0.5],
            3,
            0.0,
            &Stream::from_seed(700 + i as u64),
        )
        .unwrap();
        let mut model = collect_model.clone();
        let mut p = model.trainable_params();
        for (j, v) in p.iter_mut().enumerate() {
            *v += 0.01 * (((j % 7) as f64) - 3.0);
        }
        model.set_trainable_params(&p).unwrap();
        let adv = vec![0.8, -0.4, 0.3];
        let (_, analytic) = ppo_loss(&model, &batch, &adv, 0.2, 0.0).unwrap();
        let params = model.trainable_params();
        let disc = grad_check(
            |pp| {
                let mut m = model.clone();
                m.set_trainable_params(pp)?;
                Ok(ppo_loss(&m, &batch, &adv, 0.2, 0.0)?.0)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        check(disc, &format!("ppo_loss/{mode:?}"));
    }

    // Policy-gradient surrogate (5 modes), plus two guided-rollout variants
    // exercising the CFG chain rule.
    for (i, mode) in modes.into_iter().enumerate() {
        let model = build(mode, 90 + i as u64);
        let lambda_cfg = if i < 2 { 1.5 } else { 0.0 };
        let batch = rollout(
            &model,
            &reward,
            &[0.5, 0.5],
            3,
            lambda_cfg,
            &Stream::from_seed(900 + i as u64),
        )
        .unwrap();
        let adv = vec![0.5, -0.9, 0.2];
        let analytic = policy_gradient_neural(&model, &batch, &adv, lambda_cfg).unwrap();
        let params = model.trainable_params();
        let disc = grad_check(
            |pp| {
                let mut m = model.clone();
                m.set_trainable_params(pp)?;
                pg_surrogate(&m, &batch, &adv, lambda_cfg)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        check(disc, &format!("pg_surrogate/{mode:?}"));
    }
    // Two more sm_loss configurations on composed models to round out 20.
    for (i, mode) in [ComposeMode::SideNet, ComposeMode::Joint].into_iter().enumerate() {
        let model = build(mode, 110 + i as u64);
        let mut rng = Stream::from_seed(1100 + i as u64);
        let batch: Vec<(Vec<f64>, usize)> =
            (0..2).map(|_| (rng.normal_vec(2), rng.below(2))).collect();
        let data_rng = Stream::from_seed(1200 + i as u64);
        let (_, analytic) = sm_loss(&model, &sched, &batch, 0.1, &mut data_rng.clone()).unwrap();
        let params = model.trainable_params();
        let disc = grad_check(
            |p| {
                let mut m = model.clone();
                m.set_trainable_params(p)?;
                Ok(sm_loss(&m, &sched, &batch, 0.1, &mut data_rng.clone())?.0)
            },
            &params,
            &analytic,
            1e-5,
        )
        .unwrap();
        check(disc, &format!("sm_loss/{mode:?}"));
    }
    assert!(n_checked >= 20, "only {n_checked} configurations checked");
    println!("PASS criterion 11: {n_checked} loss configurations pass grad_check, worst discrepancy {worst:.3e} < 1e-4");
}

// ---------------------------------------------------------------------------
// 12. CLI determinism: every command run twice with the same config and seed
//     produces byte-identical outputs.
// ---------------------------------------------------------------------------
#[test]
fn criterion_12_cli_determinism() {
    use std::process::Command;
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.cfg");
    std::fs::write(
        &config_path,
        "seed = 3\n\
         [pretrain]\n\
         t_horizon = 6\n\
         data = std-normal\n\
         hidden = 8\n\
         iterations = 40\n\
         batch_size = 8\n\
         lr = 0.003\n\
         [finetune]\n\
         algorithm = ppo\n\
         iterations = 3\n\
         batch_size = 4\n\
         lr_side = 0.001\n\
         side_hidden = 6\n\
         reward = region:0.5:0.5:1.0:0.0\n\
         [eval]\n\
         n_samples = 12\n\
         n_kl = 6\n\
         lambda_sweep = 1.0,2.0\n\
         [oracle]\n\
         chain = random:3:3\n\
         tau = 0.7\n",
    )
    .unwrap();
    let bin = env!("CARGO_BIN_EXE_diffcon");
    let run_all = |out: &std::path::Path| {
        for args in [
            vec!["pretrain"],
            vec!["finetune"],
            vec!["eval"],
            vec!["oracle"],
        ] {
            let status = Command::new(bin)
                .args(&args)
                .arg("--config")
                .arg(&config_path)
                .arg("--out")
                .arg(out)
                .status()
                .unwrap();
            assert!(status.success(), "command {args:?} failed");
        }
    };
    let out1 = dir.path().join("run1");
    let out2 = dir.path().join("run2");
    run_all(&out1);
    run_all(&out2);
    let mut names: Vec<String> = std::fs::read_dir(&out1)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.len() >= 10, "expected a full output set, got {names:?}");
    for name in &names {
        let a = std::fs::read(out1.join(name)).unwrap();
        let b = std::fs::read(out2.join(name)).unwrap();
        assert_eq!(a, b, "output {name} differs between identical runs");
    }
    println!(
        "PASS criterion 12: {} CLI outputs byte-identical across repeated pretrain/finetune/eval/oracle runs",
        names.len()
    );
}
