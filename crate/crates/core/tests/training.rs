mod common;

use common::*;
use diffctl::policy::{adam_step, AdamConfig, AdamState};
use diffctl::reverse::{cost_and_grad, evaluate, rollout, train, EvalConfig, TrainConfig, Trainer};
use diffctl::systems::by_name;
use diffctl::{KernelConfig, TimeGrid};

fn config(epochs: usize) -> TrainConfig {
    TrainConfig {
        epochs,
        particles: 30,
        dt: 0.05,
        horizon: 0.5,
        measurements: 5,
        bandwidth: 0.5,
        seed: 21,
        adam: AdamConfig { lr: 1e-2, ..AdamConfig::default() },
        initial: standard_initial(2),
    }
}

#[test]
fn single_epoch_is_one_manual_iteration() {
    let cfg = config(1);
    let sys = by_name("single_integrator_2").unwrap();
    let fwd = ou_forward(vec![1.0, 1.0], 30, &TimeGrid::uniform(0.5, 5).unwrap(), 0.05, 1);
    let p0 = random_policy(2, 2, &[8], 2);
    let (p1, hist) = train(&cfg, sys.as_ref(), &fwd, p0.clone()).unwrap();

    let init = cfg.initial.sample(cfg.particles, cfg.epoch_seed(0)).unwrap();
    let rev = rollout(&init, sys.as_ref(), &p0, cfg.dt, fwd.grid()).unwrap();
    let cg = cost_and_grad(&rev, &fwd, sys.as_ref(), &p0, &KernelConfig::new(cfg.bandwidth).unwrap()).unwrap();
    let mut manual = p0.clone();
    let mut adam = AdamState::new(manual.num_params(), cfg.adam);
    adam_step(manual.params_mut(), &cg.grad, &mut adam).unwrap();

    assert_eq!(p1, manual);
    assert_eq!(hist.len(), 1);
    assert_eq!(hist.records[0].cost, cg.cost);
    assert_eq!(hist.records[0].final_kl, cg.final_kl());
}

#[test]
fn training_is_reproducible_and_resumable() {
    let cfg = config(6);
    let sys = by_name("unicycle").unwrap();
    let cfg = TrainConfig { initial: standard_initial(3), ..cfg };
    let fwd = ou_forward(vec![1.0, 0.0, 0.0], 30, &TimeGrid::uniform(0.5, 5).unwrap(), 0.05, 2);
    let p0 = random_policy(3, 2, &[8], 4);
    let (pa, ha) = train(&cfg, sys.as_ref(), &fwd, p0.clone()).unwrap();
    let (pb, hb) = train(&cfg, sys.as_ref(), &fwd, p0.clone()).unwrap();
    assert_eq!(pa, pb);
    assert_eq!(ha.costs(), hb.costs());
    assert_eq!(ha.final_kls(), hb.final_kls());

    let mut t = Trainer::new(&cfg, sys.as_ref(), &fwd, p0).unwrap();
    for _ in 0..2 {
        t.step().unwrap();
    }
    let (p, adam, hist) = t.into_parts();
    let mut buf = Vec::new();
    hist.write_csv(&mut buf).unwrap();
    let hist = diffctl::reverse::TrainHistory::read_csv(&buf[..]).unwrap();
    let mut t = Trainer::resume(&cfg, sys.as_ref(), &fwd, p, adam, hist).unwrap();
    t.run(|_, _| {}).unwrap();
    assert_eq!(t.policy(), &pa);
    assert_eq!(t.history().costs(), ha.costs());
}

#[test]
fn trainer_rejects_mismatched_forward_trace() {
    let cfg = config(1);
    let sys = by_name("single_integrator_2").unwrap();
    let fwd = ou_forward(vec![0.0, 0.0], 10, &TimeGrid::uniform(0.5, 10).unwrap(), 0.05, 1);
    assert!(Trainer::new(&cfg, sys.as_ref(), &fwd, random_policy(2, 2, &[4], 0)).is_err());
    let fwd = ou_forward(vec![0.0, 0.0], 10, &TimeGrid::uniform(0.5, 5).unwrap(), 0.05, 1);
    assert!(Trainer::new(&cfg, sys.as_ref(), &fwd, random_policy(3, 2, &[4], 0)).is_err());
}

#[test]
fn training_reduces_cost_on_a_small_integrator_problem() {
    let cfg = TrainConfig { epochs: 150, particles: 60, adam: AdamConfig { lr: 2e-2, ..AdamConfig::default() }, ..config(0) };
    let sys = by_name("single_integrator_2").unwrap();
    let fwd = ou_forward(vec![1.5, -1.0], 60, &TimeGrid::uniform(0.5, 5).unwrap(), 0.05, 3);
    let p0 = random_policy(2, 2, &[16], 9);
    let eval_cfg = EvalConfig { particles: 200, dt: cfg.dt, horizon: cfg.horizon, bandwidth: cfg.bandwidth, seed: 5 };
    let before = evaluate(&p0, sys.as_ref(), fwd.initial(), &cfg.initial, &eval_cfg).unwrap();
    let (p, hist) = train(&cfg, sys.as_ref(), &fwd, p0).unwrap();
    let after = evaluate(&p, sys.as_ref(), fwd.initial(), &cfg.initial, &eval_cfg).unwrap();
    let c = hist.costs();
    assert!(c[c.len() - 1] < 0.5 * c[0], "{} -> {}", c[0], c[c.len() - 1]);
    assert!(after.final_kl < before.final_kl);
}
