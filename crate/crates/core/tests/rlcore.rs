use proptest::prelude::*;
use tempo_core::nnet::{context, Backend, CriticParams, GradBuffer, Net, NetConfig, PolicyParams, Tabular};
use tempo_core::rlcore::*;
use tempo_core::taskgen::{answer_response, split_shifted, DatasetSplit, GeneratorConfig, Op, BOS, DIGIT0, EOS, SEP};
use tempo_core::Error;

#[test]
fn advantage_examples() {
    let a = advantages(&[0.5, 0.7, 0.8], 0.8).unwrap();
    for (x, e) in a.iter().zip([0.3f64, 0.1, 0.0]) {
        assert!((x - e).abs() < 1e-15);
    }
    assert_eq!(advantages(&[0.4, 0.4], 0.4).unwrap(), vec![0.0, 0.0]);
    assert!(advantages::<f64>(&[], 1.0).is_err());
}

proptest! {
    #[test]
    fn advantage_identity(values in prop::collection::vec(0.0f64..1.0, 1..20), r in 0.0f64..1.0) {
        let a = advantages(&values, r).unwrap();
        for (ai, vi) in a.iter().zip(&values) {
            // A_t = R − V_t is computed exactly, so A_t + V_t rounds back to R
            prop_assert_eq!(r - vi, *ai);
        }
    }
}

fn split() -> DatasetSplit {
    let c = GeneratorConfig { modulus: 5, operand_range: [0, 4], depth: 1, operators: vec![Op::Add], count: 4, seed: 3 };
    split_shifted(&c, &GeneratorConfig { depth: 2, ..c.clone() }).unwrap()
}

#[test]
fn verifiable_reward_examples() {
    let s = split();
    let t = &s.labeled[0];
    let gold = t.expr.eval(5);
    assert_eq!(reward_verifiable::<f64>(t, &answer_response(gold, 5)).unwrap(), 1.0);
    assert_eq!(reward_verifiable::<f64>(t, &answer_response((gold + 1) % 5, 5)).unwrap(), 0.0);
    assert_eq!(reward_verifiable::<f64>(t, &[DIGIT0, EOS]).unwrap(), 0.0);
    assert!(matches!(reward_verifiable::<f64>(&s.unlabeled[0], &[SEP, DIGIT0, EOS]), Err(Error::Contract(_))));
}

#[test]
fn critic_reward_is_terminal_value() {
    let zero = CriticParams::<f64>::new(Net::zeros(&NetConfig::default(), 9, 1));
    assert_eq!(reward_critic(&zero, &[1, 4], &[SEP, DIGIT0, EOS]).unwrap(), 0.5);
    let mut rng = tempo_core::rng::stream_rng(1, 0);
    let c = CriticParams::<f64>::init(&NetConfig { backend: Backend::Mlp, window: 3, dim: 2, hidden: 3 }, 9, 2.0, &mut rng).unwrap();
    let r = reward_critic(&c, &[1, 4], &[SEP, DIGIT0, EOS]).unwrap();
    assert_eq!(r, *c.values(&[1, 4], &[SEP, DIGIT0, EOS]).unwrap().last().unwrap());
    assert!(reward_critic(&c, &[1], &[]).is_err());
}

#[test]
fn critic_reward_zeroes_last_inclusive_advantage() {
    let mut rng = tempo_core::rng::stream_rng(2, 0);
    let c = CriticParams::<f64>::init(&NetConfig { backend: Backend::Mlp, window: 3, dim: 2, hidden: 3 }, 9, 2.0, &mut rng).unwrap();
    let (p, y) = ([1, 5, 2], [SEP, DIGIT0 + 1, EOS]);
    let r = reward_critic(&c, &p, &y).unwrap();
    let a = advantages(&baselines(&c, &p, &y, BaselineMode::Inclusive).unwrap(), r).unwrap();
    assert_eq!(a[2], 0.0);
    let pre = baselines(&c, &p, &y, BaselineMode::Preceding).unwrap();
    assert_eq!(pre[0], c.value(&p, &[]));
    assert_eq!(pre[2], c.value(&p, &y[..2]));
}

fn traj(adv: Vec<f64>) -> Trajectory<f64> {
    let t = adv.len();
    Trajectory {
        task_id: 0,
        prompt: vec![BOS, 4],
        response: (0..t).map(|i| if i + 1 == t { EOS } else { SEP }).collect(),
        behavior_logprobs: vec![-(6f64.ln()); t],
        values: vec![0.5; t],
        reward: 0.5,
        correct: None,
        advantages: Some(adv),
    }
}

#[test]
fn zero_advantages_give_zero_loss_and_gradient() {
    let p = PolicyParams::<f64>::new(Net::zeros(&NetConfig::default(), 6, 6));
    let (loss, g, _) = policy_loss_and_grad(&p, &[traj(vec![0.0, 0.0, 0.0])], &ClipConfig::default(), None).unwrap();
    assert_eq!(loss, 0.0);
    assert_eq!(g.net.sq_norm(), 0.0);
}

#[test]
fn single_token_gradient_is_negative_score() {
    let mut t = Tabular::<f64>::zeros(6, 4, 6);
    t.row_mut(&context(&[BOS, 4], &[], 4)).copy_from_slice(&[0.3, -1.0, 0.5, 2.0, 0.0, 0.1]);
    let p = PolicyParams::new(Net::Tabular(t));
    let mut tr = traj(vec![1.0]);
    tr.behavior_logprobs = p.sequence_logprob(&tr.prompt, &tr.response).unwrap().1;
    let (_, g, _) = policy_loss_and_grad(&p, &[tr.clone()], &ClipConfig::disabled(), None).unwrap();
    let mut expected = p.grad_buffer();
    p.accumulate_logprob_grad(&tr.prompt, &tr.response, &[-1.0], &mut expected).unwrap();
    assert_eq!(g.net, expected.net);
}

#[test]
fn missing_advantages_is_a_contract_violation() {
    let p = PolicyParams::<f64>::new(Net::zeros(&NetConfig::default(), 6, 6));
    let mut tr = traj(vec![1.0]);
    tr.advantages = None;
    assert!(matches!(policy_loss_and_grad(&p, &[tr], &ClipConfig::default(), None), Err(Error::Contract(_))));
}

#[test]
fn critic_loss_examples() {
    let c = CriticParams::<f64>::new(Net::zeros(&NetConfig::default(), 6, 1));
    let batch = vec![
        CriticSample { prompt: vec![BOS, 4], response: vec![SEP, 5, EOS], correct: Some(true) },
        CriticSample { prompt: vec![BOS, 5], response: vec![EOS], correct: Some(false) },
    ];
    let (loss, _) = critic_loss_and_grad(&c, &batch).unwrap();
    assert!((loss - 0.25).abs() < 1e-15);

    let mut missing = batch.clone();
    missing[1].correct = None;
    assert!(matches!(critic_loss_and_grad(&c, &missing), Err(Error::Contract(_))));

    // a critic that outputs I everywhere (saturated logits) has ~0 loss
    let mut t = Tabular::<f64>::zeros(6, 4, 1);
    for s in &batch {
        for k in 0..=s.response.len() {
            t.row_mut(&context(&s.prompt, &s.response[..k], 4))[0] = if s.correct == Some(true) { 60.0 } else { -60.0 };
        }
    }
    let (loss, g) = critic_loss_and_grad(&CriticParams::new(Net::Tabular(t)), &batch).unwrap();
    assert!(loss < 1e-50);
    assert!(g.net.sq_norm() < 1e-50);
}

fn tab(vals: &[f64]) -> Net<f64> {
    let mut t = Tabular::zeros(4, 1, vals.len());
    t.row_mut(&[1]).copy_from_slice(vals);
    Net::Tabular(t)
}

fn grad(vals: &[f64]) -> GradBuffer<f64> {
    GradBuffer { net: tab(vals), count: 1 }
}

#[test]
fn sgd_step() {
    let mut p = tab(&[1.0, -2.0]);
    let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
    opt.step(&mut p, &grad(&[0.5, -1.0])).unwrap();
    assert_eq!(p, tab(&[0.95, -1.9]));
    assert_eq!(opt.step, 1);
}

#[test]
fn zero_gradient_leaves_params_unchanged() {
    for cfg in [OptimizerConfig::sgd(0.1), OptimizerConfig::adam(0.1)] {
        let mut p = tab(&[1.0, -2.0]);
        let mut opt = OptimizerState::new(cfg);
        opt.step(&mut p, &grad(&[0.0, 0.0])).unwrap();
        assert_eq!(p, tab(&[1.0, -2.0]));
        assert_eq!(opt.step, 1);
    }
}

#[test]
fn adam_first_step_is_bounded_by_lr() {
    let mut p = tab(&[0.0, 0.0, 0.0]);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(0.01));
    opt.step(&mut p, &grad(&[3.0, -1e-3, 250.0])).unwrap();
    if let Net::Tabular(t) = &p {
        for (&x, s) in t.forward(&[1]).iter().zip([-1.0, 1.0, -1.0]) {
            assert!(x.abs() <= 0.01 * (1.0 + 1e-6));
            assert_eq!(x.signum(), s);
        }
    }
}

#[test]
fn non_finite_gradient_is_rejected_without_update() {
    let mut p = tab(&[1.0, 2.0]);
    let mut opt = OptimizerState::new(OptimizerConfig::adam(0.1));
    let err = opt.step(&mut p, &grad(&[f64::NAN, 0.0])).unwrap_err();
    assert!(matches!(err, Error::Numerical { .. }));
    assert_eq!(p, tab(&[1.0, 2.0]));
    assert_eq!(opt.step, 0);
}

#[test]
fn shape_mismatch_is_an_error() {
    let mut p = Net::<f64>::zeros(&NetConfig { backend: Backend::Mlp, window: 1, dim: 1, hidden: 1 }, 4, 2);
    let mut opt = OptimizerState::new(OptimizerConfig::sgd(0.1));
    assert!(matches!(opt.step(&mut p, &grad(&[1.0, 1.0])), Err(Error::Shape(_))));
}

#[test]
fn grad_norm_clipping() {
    let mut p = tab(&[0.0, 0.0]);
    let mut opt = OptimizerState::new(OptimizerConfig { max_grad_norm: Some(1.0), ..OptimizerConfig::sgd(1.0) });
    opt.step(&mut p, &grad(&[3.0, 4.0])).unwrap();
    let Net::Tabular(t) = &p else { unreachable!() };
    let row = t.forward(&[1]);
    assert!((row[0] + 0.6).abs() < 1e-12 && (row[1] + 0.8).abs() < 1e-12);
}

#[test]
fn stage1_raises_exact_success_probability() {
    let c = GeneratorConfig { modulus: 5, operand_range: [0, 4], depth: 1, operators: vec![Op::Add], count: 32, seed: 7 };
    let d = split_shifted(&c, &GeneratorConfig { depth: 2, seed: 8, count: 4, ..c.clone() }).unwrap();
    let v = d.vocab.size();
    let net = NetConfig { backend: Backend::Mlp, window: 4, dim: 4, hidden: 16 };
    let mut rng = tempo_core::rng::stream_rng(3, 0);
    let policy = PolicyParams::<f64>::init(&net, v, 0.5, &mut rng).unwrap();
    let critic = CriticParams::<f64>::init(&net, v, 0.5, &mut rng).unwrap();
    let cfg = Stage1Config {
        steps: 300,
        prompts_per_step: 16,
        group_size: 16,
        rollout: RolloutConfig { max_len: 3, temperature: 1.0 },
        actor: OptimizerConfig::adam(0.05),
        critic: OptimizerConfig::sgd(1.0),
        seed: 4,
        ..Default::default()
    };
    let space = tempo_core::oracle::ResponseSpace::new(v, 3).unwrap();
    let success = |p: &PolicyParams<f64>| {
        d.labeled.iter().map(|t| tempo_core::oracle::exact_marginal(p, t, &space).unwrap()).sum::<f64>() / d.labeled.len() as f64
    };
    let before = success(&policy);
    let (trained, _, logs) = rlvr_init(policy, critic, &d.labeled, &cfg).unwrap();
    assert_eq!(logs.len(), 300);
    let after = success(&trained);
    assert!(after > before + 0.1, "success {before} -> {after}");
    assert_eq!(d.audit().training_reads(), 0);
}
