use adv_cli::harness::{load_stack, eval_policy, PolicyMode};
use adv_cli::config::RunConfig;
use adv_core::env::Split;

#[test]
#[ignore]
fn quick_success() {
    let mut cfg = RunConfig::default();
    cfg.out_dir = std::env::var("CAL_DIR").unwrap_or("/tmp/cal2".into()).into();
    let seed: u64 = std::env::var("CAL_SEED").unwrap_or("9".into()).parse().unwrap();
    let n: usize = std::env::var("CAL_N").unwrap_or("100".into()).parse().unwrap();
    if let Ok(r) = std::env::var("CAL_REPLAN") { cfg.infer.replan_every = r.parse().unwrap(); }
    let stack = load_stack(&cfg.out_dir, 8, "cotrain", adv_core::codec::Scheme::TextualFast, seed).unwrap();
    for split in [Split::Id, Split::Ood] {
        let cell = eval_policy(&stack, &cfg, PolicyMode::Diffusion, split, n, seed);
        println!("diffusion {split:?}: success {:.3} avg_steps {:?} recov {:.2}",
            cell.metrics.success_rate, cell.metrics.avg_success_steps, cell.metrics.recovery_attempts);
    }
}
