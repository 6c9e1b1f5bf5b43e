//! Exact LS-MDP oracles on a 2-state worked chain: Z-recursion, tilted
//! kernels, terminal marginals by two routes, the general-f value recursion,
//! and the trajectory-level weight baseline.
//!
//! Run with: `cargo run --example oracle_tables`

use diffcon::fdiv::FDiv;
use diffcon::lsmdp::{
    optimal_kernel, solve_baseline, terminal_marginal, trajectory_brute, value_general_f,
    z_recursion, TabularChain,
};

fn main() {
    let chain = TabularChain::two_state_demo();
    let tau = 1.0;
    println!("chain: init {:?}, kernel {:?}, reward {:?}", chain.init, chain.kernels[0], chain.reward);

    let z = z_recursion(&chain, tau).unwrap();
    println!("\nZ tables (tau = {tau}):");
    println!("  Z_0      = {:.6}", z.log_z0.exp());
    for t in 1..=chain.horizon {
        for s in 0..chain.n_states {
            println!("  Z_{t}({s})   = {:.6}   V = {:.6}", z.z(t, s), z.value(tau, t, s));
        }
    }

    let oracle = optimal_kernel(&chain, tau).unwrap();
    println!("\noptimal tilted kernel Q_1:");
    for (s, row) in oracle.tilted[0].iter().enumerate() {
        println!("  Q_1({s}, .) = {row:?}");
    }
    println!("tilted initial distribution: {:?}", oracle.tilted_init);

    let p_dp = terminal_marginal(&chain, tau).unwrap();
    let brute = trajectory_brute(&chain, tau, &FDiv::kl()).unwrap();
    println!("\nterminal marginal, dynamic programming: {p_dp:?}");
    println!("terminal marginal, trajectory enum:     {:?}", brute.p_star);
    println!("trajectory weights per terminal state:  {:?}", brute.weights);
    println!("E[w] under the passive chain:           {:.12}", brute.mean_weight);

    // General-f value recursion: KL reproduces tau ln Z; alpha = 2 differs.
    let kl_vals = value_general_f(&chain, tau, &FDiv::kl()).unwrap();
    let a2_vals = value_general_f(&chain, tau, &FDiv::alpha(2.0).unwrap()).unwrap();
    println!("\nvalues at t = 1 (per state): KL {:?} (closed form {:?}), alpha=2 {:?}",
        kl_vals.v[0],
        [z.value(tau, 1, 0), z.value(tau, 1, 1)],
        a2_vals.v[0],
    );

    let b = solve_baseline(
        &FDiv::alpha(2.0).unwrap(),
        &chain.reward,
        &chain.passive_terminal(),
        tau,
    )
    .unwrap();
    println!("\nalpha=2 weight baseline b such that E[w] = 1: {b:.6}");
}
