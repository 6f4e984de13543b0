//! Loss values, gradients and policy-gradient estimators checked against
//! hand computation, finite differences and exact enumeration.

use larl::corpus::EncodedSample;
use larl::latent::{LatentAction, LatentKind, LatentSample};
use larl::model::{DialogModel, Fusion, ModelConfig, Objective, Side};
use larl::rng::Rng;
use larl::training::{
    full_elbo_loss, latent_policy_gradient, lite_elbo_loss, sl_loss_mle, word_policy_gradient, Action, Episode,
    Reinforce, Step, TrainConfig,
};
use larl_tensor::{Grads, ParamId, Tape, Tensor};
use rand::{Rng as _, SeedableRng};

fn tiny(vocab: usize, latent: Option<LatentKind>, fusion: Fusion, objective: Objective) -> ModelConfig {
    ModelConfig {
        vocab_size: vocab,
        bos_id: 0,
        eos_id: 1,
        embed_size: 3,
        utt_size: 3,
        ctx_size: 4,
        dec_size: 4,
        m: 2,
        k: 3,
        d: 4,
        dropout: 0.0,
        init_range: 0.5,
        ..ModelConfig::negotiation(vocab, latent, fusion, objective)
    }
}

fn batch() -> Vec<EncodedSample> {
    vec![
        EncodedSample {
            context: vec![vec![2, 3], vec![4]],
            target: vec![3, 1],
        },
        EncodedSample {
            context: vec![vec![4, 4, 2]],
            target: vec![2, 4, 1],
        },
    ]
}

fn set(model: &mut DialogModel<f64>, name: &str, t: Tensor<f64>) {
    let id = model.store.id(name).unwrap();
    model.store.set(id, t).unwrap();
}

/// Central differences of `f` against tape gradients on a spread of
/// entries of every parameter.
fn check_gradients(model: &mut DialogModel<f64>, f: impl Fn(&DialogModel<f64>, &mut Tape<f64>) -> larl_tensor::Var) {
    let mut tape = Tape::with_grad();
    let loss = f(model, &mut tape);
    let grads = tape.backward(loss).unwrap().into_params();
    let eval = |m: &DialogModel<f64>| {
        let mut t = Tape::no_grad();
        let l = f(m, &mut t);
        t.value(l).item().unwrap()
    };
    let h = 1e-6;
    let mut checked = 0;
    for id in model.all_params() {
        let n = model.store.get(id).len();
        for j in (0..n).step_by((n / 3).max(1)) {
            let orig = model.store.get(id).data()[j];
            model.store.get_mut(id).data_mut()[j] = orig + h;
            let up = eval(model);
            model.store.get_mut(id).data_mut()[j] = orig - h;
            let down = eval(model);
            model.store.get_mut(id).data_mut()[j] = orig;
            let numeric = (up - down) / (2.0 * h);
            let analytic = grads.get(id).map(|g| g.data()[j]).unwrap_or(0.0);
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-4);
            assert!(rel < 1e-4, "{}[{j}]: analytic {analytic} vs numeric {numeric}", model.store.name(id));
            checked += 1;
        }
    }
    assert!(checked > 20);
}

#[test]
fn mle_loss_is_zero_when_targets_are_certain() {
    let mut model = DialogModel::<f64>::new(tiny(5, None, Fusion::None, Objective::Mle), 0).unwrap();
    set(&mut model, "dec.out.w", Tensor::zeros(&[4, 5]));
    set(&mut model, "dec.out.b", Tensor::new(vec![5], vec![-1e3, 1e3, -1e3, -1e3, -1e3]).unwrap());
    let only_eos = vec![EncodedSample {
        context: vec![vec![2]],
        target: vec![1],
    }];
    let mut tape = Tape::no_grad();
    let mut rng = Rng::seed_from_u64(0);
    let l = sl_loss_mle(&model, &mut tape, &only_eos, &mut rng).unwrap();
    assert_eq!(l.report.total, 0.0);
    assert_eq!(l.report.ppl, 1.0);
}

#[test]
fn uniform_outputs_cost_log_vocab_per_token() {
    let mut model = DialogModel::<f64>::new(tiny(5, None, Fusion::None, Objective::Mle), 0).unwrap();
    set(&mut model, "dec.out.w", Tensor::zeros(&[4, 5]));
    set(&mut model, "dec.out.b", Tensor::zeros(&[5]));
    let mut tape = Tape::no_grad();
    let mut rng = Rng::seed_from_u64(0);
    let l = sl_loss_mle(&model, &mut tape, &batch(), &mut rng).unwrap();
    assert!((l.report.total - 5f64.ln()).abs() < 1e-12);
    assert_eq!(l.report.tokens, 5);
    assert!(sl_loss_mle(&model, &mut tape, &[], &mut rng).is_err());
}

#[test]
fn mle_gradients_match_finite_differences() {
    let mut model = DialogModel::<f64>::new(tiny(5, None, Fusion::None, Objective::Mle), 1).unwrap();
    check_gradients(&mut model, |m, t| {
        let mut rng = Rng::seed_from_u64(0);
        sl_loss_mle(m, t, &batch(), &mut rng).unwrap().total
    });
}

#[test]
fn elbo_gradients_match_finite_differences() {
    let configs = [
        tiny(5, Some(LatentKind::Gaussian), Fusion::None, Objective::FullElbo),
        tiny(5, Some(LatentKind::Categorical), Fusion::Summation, Objective::FullElbo),
        tiny(5, Some(LatentKind::Categorical), Fusion::Attention, Objective::LiteElbo),
        tiny(5, Some(LatentKind::Gaussian), Fusion::None, Objective::LiteElbo),
    ];
    for cfg in configs {
        let full = cfg.objective == Objective::FullElbo;
        let mut model = DialogModel::<f64>::new(cfg, 2).unwrap();
        check_gradients(&mut model, |m, t| {
            let mut rng = Rng::seed_from_u64(5);
            if full {
                full_elbo_loss(m, t, &batch(), 0.7, 1, &mut rng).unwrap().total
            } else {
                lite_elbo_loss(m, t, &batch(), 0.7, 1, &mut rng).unwrap().total
            }
        });
    }
}

/// Copies the policy head into the posterior head, zeroing the response
/// half, so that q(z|x,c) = p(z|c).
fn tie_posterior(model: &mut DialogModel<f64>) {
    let pw = model.store.by_name("enc.policy.w").unwrap().clone();
    let pb = model.store.by_name("enc.policy.b").unwrap().clone();
    let qw_shape = model.store.by_name("enc.post.w").unwrap().shape().to_vec();
    let mut qw = Tensor::zeros(&qw_shape);
    let cols = pw.shape()[1];
    qw.data_mut()[..pw.len()].copy_from_slice(pw.data());
    assert_eq!(qw_shape[1], cols);
    set(model, "enc.post.w", qw);
    set(model, "enc.post.b", pb);
}

#[test]
fn tied_posterior_has_zero_kl_and_matches_lite_reconstruction() {
    for (kind, fusion) in [(LatentKind::Categorical, Fusion::Summation), (LatentKind::Gaussian, Fusion::None)] {
        let mut full = DialogModel::<f64>::new(tiny(5, Some(kind), fusion, Objective::FullElbo), 3).unwrap();
        tie_posterior(&mut full);
        let mut tape = Tape::no_grad();
        let mut rng = Rng::seed_from_u64(9);
        let f = full_elbo_loss(&full, &mut tape, &batch(), 1.0, 1, &mut rng).unwrap();
        assert!(f.report.kl.abs() < 1e-12, "{}", f.report.kl);

        let lite_cfg = ModelConfig {
            objective: Objective::LiteElbo,
            beta: 0.0,
            ..full.config.clone()
        };
        let tensors = full.named_tensors().into_iter().filter(|(n, _)| !n.starts_with("enc.post")).collect();
        let lite = DialogModel::<f64>::from_named(lite_cfg, tensors).unwrap();
        let mut tape = Tape::no_grad();
        let mut rng = Rng::seed_from_u64(9);
        let l = lite_elbo_loss(&lite, &mut tape, &batch(), 1.0, 1, &mut rng).unwrap();
        assert_eq!(l.report.reconstruction, f.report.reconstruction);
        assert_eq!(l.report.total, l.report.reconstruction);
    }
}

#[test]
fn lite_regularizer_vanishes_at_prior_and_at_zero_beta() {
    for (kind, fusion) in [(LatentKind::Categorical, Fusion::Summation), (LatentKind::Gaussian, Fusion::None)] {
        let mut cfg = tiny(5, Some(kind), fusion, Objective::LiteElbo);
        cfg.beta = 1.0;
        let mut model = DialogModel::<f64>::new(cfg, 4).unwrap();
        let w_shape = model.store.by_name("enc.policy.w").unwrap().shape().to_vec();
        let b_shape = model.store.by_name("enc.policy.b").unwrap().shape().to_vec();
        set(&mut model, "enc.policy.w", Tensor::zeros(&w_shape));
        set(&mut model, "enc.policy.b", Tensor::zeros(&b_shape));
        let mut tape = Tape::no_grad();
        let mut rng = Rng::seed_from_u64(0);
        let l = lite_elbo_loss(&model, &mut tape, &batch(), 1.0, 1, &mut rng).unwrap();
        assert!(l.report.kl.abs() < 1e-12);

        let mut cfg = tiny(5, Some(kind), fusion, Objective::LiteElbo);
        cfg.beta = 0.0;
        let model = DialogModel::<f64>::new(cfg, 4).unwrap();
        let mut tape = Tape::no_grad();
        let l = lite_elbo_loss(&model, &mut tape, &batch(), 1.0, 1, &mut rng).unwrap();
        assert!(l.report.kl > 0.0);
        assert_eq!(l.report.total, l.report.reconstruction);
    }
    assert_eq!(ModelConfig::negotiation(9, Some(LatentKind::Categorical), Fusion::Summation, Objective::LiteElbo).beta, 0.01);
}

#[test]
fn single_class_lite_reduces_to_plain_likelihood() {
    let mut cfg = tiny(5, Some(LatentKind::Categorical), Fusion::Summation, Objective::LiteElbo);
    cfg.k = 1;
    cfg.beta = 0.0;
    let model = DialogModel::<f64>::new(cfg, 5).unwrap();
    let mut tape = Tape::no_grad();
    let mut rng = Rng::seed_from_u64(0);
    let lite = lite_elbo_loss(&model, &mut tape, &batch(), 1.0, 1, &mut rng).unwrap();
    // Same decoder with z certain, so log p(x|c) = log p(x|z=0).
    let b = batch();
    let targets: Vec<&[usize]> = b.iter().map(|s| s.target.as_slice()).collect();
    let z = LatentSample::Categorical(vec![0; 2 * model.config.m]);
    let state = model.decoder_init(&mut tape, None, Some(&z), 2).unwrap();
    let tf = model.teacher_forced(&mut tape, state, &targets, &mut rng).unwrap();
    let ll: f64 = tape.value(tf.row_ll).data().iter().sum();
    assert!((lite.report.total + ll / tf.tokens() as f64).abs() < 1e-12);
}

/// Exact log p(x|c) and ELBO on a model with M=1, K=2 by enumerating z.
#[test]
fn elbo_lower_bounds_exact_likelihood() {
    let mut cfg = tiny(2, Some(LatentKind::Categorical), Fusion::Summation, Objective::FullElbo);
    cfg.m = 1;
    cfg.k = 2;
    let sample = EncodedSample {
        context: vec![vec![0, 0]],
        target: vec![0, 0, 1],
    };
    for seed in 0..5 {
        let model = DialogModel::<f64>::new(cfg.clone(), seed).unwrap();
        let mut tape = Tape::no_grad();
        let mut rng = Rng::seed_from_u64(0);
        let h = model.encode_contexts(&mut tape, &[&sample.context], &mut rng).unwrap();
        let probs = |p: larl::latent::LatentParams, tape: &Tape<f64>| match p {
            larl::latent::LatentParams::Categorical(c) => larl::latent::categorical_probs(tape, &c)[0].clone(),
            _ => unreachable!(),
        };
        let p = model.policy_params(&mut tape, h).unwrap();
        let q = model.posterior_params(&mut tape, h, &[&sample.target], &mut rng).unwrap();
        let (p, q) = (probs(p, &tape), probs(q, &tape));
        let mut lik = [0.0; 2];
        for (z, l) in lik.iter_mut().enumerate() {
            let zs = LatentSample::Categorical(vec![z]);
            *l = model
                .response_log_likelihood(&mut tape, None, Some(&zs), &[&sample.target[..2]], &mut rng)
                .unwrap()[0];
        }
        let log_px = (p[0] * lik[0].exp() + p[1] * lik[1].exp()).ln();
        let kl: f64 = (0..2).map(|z| q[z] * (q[z] / p[z]).ln()).sum();
        let elbo = q[0] * lik[0] + q[1] * lik[1] - kl;
        assert!(elbo <= log_px + 1e-12, "elbo {elbo} > log p(x|c) {log_px}");

        // The loss's sampled estimate at low temperature agrees with the
        // enumerated bound (loss terms are per token / per example).
        let n = 4000;
        let mut acc = 0.0;
        for _ in 0..n {
            let r = full_elbo_loss(&model, &mut tape, std::slice::from_ref(&sample), 0.05, 1, &mut rng).unwrap();
            acc += -(r.report.reconstruction * r.report.tokens as f64) - r.report.kl;
        }
        let est = acc / n as f64;
        assert!((est - elbo).abs() < 0.05, "sampled {est} vs enumerated {elbo}");
        assert!(est <= log_px + 0.05);
    }
}

fn flat(g: &Grads<f64>, ids: &[ParamId]) -> Vec<f64> {
    ids.iter()
        .flat_map(|&id| g.get(id).map(|t| t.data().to_vec()).unwrap_or_default())
        .collect()
}

fn bandit_model() -> DialogModel<f64> {
    let mut cfg = tiny(3, Some(LatentKind::Categorical), Fusion::Summation, Objective::LiteElbo);
    cfg.m = 1;
    cfg.k = 2;
    DialogModel::new(cfg, 11).unwrap()
}

fn bandit_context() -> Vec<Vec<usize>> {
    vec![vec![2, 0]]
}

const BANDIT_REWARD: [f64; 2] = [1.0, 3.0];

/// ∇ of the loss −E_p[f(z)], by enumeration.
fn exact_latent_gradient(model: &DialogModel<f64>) -> (Vec<f64>, [f64; 2]) {
    let mut tape = Tape::new(model.grad_mode(Side::Encoder));
    let mut rng = Rng::seed_from_u64(0);
    let ctx = bandit_context();
    let h = model.encode_contexts(&mut tape, &[&ctx], &mut rng).unwrap();
    let p = match model.policy_params(&mut tape, h).unwrap() {
        larl::latent::LatentParams::Categorical(p) => p,
        _ => unreachable!(),
    };
    let probs = tape.softmax(p.logits);
    let pv = tape.value(probs).data().to_vec();
    let f = tape.constant(Tensor::new(vec![1, 2], BANDIT_REWARD.iter().map(|r| -r).collect()).unwrap());
    let e = tape.mul(probs, f).unwrap();
    let e = tape.sum(e);
    let g = tape.backward(e).unwrap().into_params();
    (flat(&g, &model.params_on(Side::Encoder)), [pv[0], pv[1]])
}

fn latent_episode(z: usize) -> Episode {
    Episode {
        steps: vec![Step {
            context: bandit_context(),
            action: Action::Latent(LatentAction::Categorical(vec![z])),
            log_prob: 0.0,
            reward: BANDIT_REWARD[z],
        }],
    }
}

/// Per-sample gradients for z = 0 and z = 1, so N-sample means are cheap.
fn per_action_latent_gradients(model: &DialogModel<f64>) -> [Vec<f64>; 2] {
    let ids = model.params_on(Side::Encoder);
    [0, 1].map(|z| {
        let g = latent_policy_gradient(model, &[latent_episode(z)], &[vec![BANDIT_REWARD[z]]]).unwrap();
        flat(&g, &ids)
    })
}

fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let d: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let n: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    d / n
}

#[test]
fn batched_latent_gradient_sums_per_episode_gradients() {
    let model = bandit_model();
    let per = per_action_latent_gradients(&model);
    let eps = [latent_episode(0), latent_episode(1), latent_episode(1)];
    let rets: Vec<Vec<f64>> = eps.iter().map(|e| vec![e.steps[0].reward]).collect();
    let g = flat(&latent_policy_gradient(&model, &eps, &rets).unwrap(), &model.params_on(Side::Encoder));
    for (i, x) in g.iter().enumerate() {
        let want = per[0][i] + 2.0 * per[1][i];
        assert!((x - want).abs() < 1e-12 * want.abs().max(1.0));
    }
}

#[test]
fn latent_reinforce_is_unbiased_on_a_bandit() {
    let model = bandit_model();
    let (exact, p) = exact_latent_gradient(&model);
    let per = per_action_latent_gradients(&model);
    let mut rng = Rng::seed_from_u64(17);
    let mut counts = [0usize; 2];
    let mut errors = Vec::new();
    let mut drawn = 0usize;
    for n in [1_000usize, 10_000, 100_000] {
        while drawn < n {
            let z = usize::from(rng.random::<f64>() >= p[0]);
            counts[z] += 1;
            drawn += 1;
        }
        let est: Vec<f64> = (0..exact.len())
            .map(|i| (counts[0] as f64 * per[0][i] + counts[1] as f64 * per[1][i]) / n as f64)
            .collect();
        // Standard error of the mean, per component.
        let worst = (0..exact.len())
            .filter(|&i| exact[i].abs() > 1e-9)
            .map(|i| {
                let var = p[0] * p[1] * (per[0][i] - per[1][i]).powi(2);
                (est[i] - exact[i]).abs() / (var / n as f64).sqrt().max(1e-15)
            })
            .fold(0.0f64, f64::max);
        assert!(worst < 5.0, "N={n}: deviation of {worst} standard errors");
        errors.push(rel_err(&est, &exact));
    }
    assert!(errors[2] < 0.02, "relative error at 1e5: {}", errors[2]);
}

#[test]
fn word_reinforce_is_unbiased_on_a_bandit() {
    let model = DialogModel::<f64>::new(tiny(2, None, Fusion::None, Objective::Mle), 12).unwrap();
    let ctx = vec![vec![0, 0]];
    let ids = model.all_params();
    // Exact: loss −Σ_w p(w) f(w) over the first emitted token.
    let mut tape = Tape::with_grad();
    let mut rng = Rng::seed_from_u64(0);
    let h = model.encode_contexts(&mut tape, &[&ctx], &mut rng).unwrap();
    let s = model.decoder_init(&mut tape, Some(h), None, 1).unwrap();
    let tf = model.teacher_forced(&mut tape, s, &[&[0]], &mut rng).unwrap();
    let p0 = tape.exp(tf.row_ll);
    let p0v = tape.value(p0).item().unwrap();
    // −[p0 f0 + (1 − p0) f1] = −f1 − p0 (f0 − f1)
    let e = tape.scale(p0, -(BANDIT_REWARD[0] - BANDIT_REWARD[1]));
    let exact = flat(&tape.backward(e).unwrap().into_params(), &ids);
    let per = [0, 1].map(|w| {
        let ep = Episode {
            steps: vec![Step {
                context: ctx.clone(),
                action: Action::Words(vec![w]),
                log_prob: 0.0,
                reward: BANDIT_REWARD[w],
            }],
        };
        flat(&word_policy_gradient(&model, &[ep], &[vec![vec![BANDIT_REWARD[w]]]]).unwrap(), &ids)
    });
    let mut counts = [0usize; 2];
    let n = 100_000;
    for _ in 0..n {
        counts[usize::from(rng.random::<f64>() >= p0v)] += 1;
    }
    let est: Vec<f64> = (0..exact.len())
        .map(|i| (counts[0] as f64 * per[0][i] + counts[1] as f64 * per[1][i]) / n as f64)
        .collect();
    assert!(rel_err(&est, &exact) < 0.02, "{}", rel_err(&est, &exact));
}

fn word_episode(rewards: [f64; 2]) -> Episode {
    Episode {
        steps: vec![
            Step {
                context: vec![vec![2, 3]],
                action: Action::Words(vec![3, 4, 1]),
                log_prob: 0.0,
                reward: rewards[0],
            },
            Step {
                context: vec![vec![2, 3], vec![3, 4], vec![2]],
                action: Action::Words(vec![2, 1]),
                log_prob: 0.0,
                reward: rewards[1],
            },
        ],
    }
}

#[test]
fn word_updates_scale_linearly_and_vanish_without_reward() {
    let mut model = DialogModel::<f64>::new(tiny(5, None, Fusion::None, Objective::Mle), 13).unwrap();
    let before = model.store.clone();
    let mut cfg = TrainConfig::negotiation();
    cfg.rl_clip = None;
    let mut rl = Reinforce::new(cfg.clone()).unwrap();
    rl.word_step(&mut model, &[word_episode([0.0, 0.0])]).unwrap();
    for id in model.all_params() {
        assert_eq!(model.store.get(id), before.get(id));
    }

    let one = word_episode([0.5, 2.0]);
    let two = word_episode([1.0, 4.0]);
    let ids = model.all_params();
    let ret = |e: &Episode| {
        larl::training::token_returns(&e.rewards(), &e.token_counts(), 0.95, 0.0, cfg.baseline_placement, cfg.word_returns)
            .unwrap()
    };
    let g1 = flat(&word_policy_gradient(&model, std::slice::from_ref(&one), &[ret(&one)]).unwrap(), &ids);
    let g2 = flat(&word_policy_gradient(&model, std::slice::from_ref(&two), &[ret(&two)]).unwrap(), &ids);
    assert!(g1.iter().any(|&x| x != 0.0));
    for (a, b) in g1.iter().zip(&g2) {
        assert_eq!(2.0 * a, *b);
    }
}

#[test]
fn latent_updates_leave_the_decoder_intact() {
    let mut model = DialogModel::<f64>::new(
        tiny(5, Some(LatentKind::Categorical), Fusion::Attention, Objective::LiteElbo),
        14,
    )
    .unwrap();
    let before = model.store.clone();
    let mut rl = Reinforce::new(TrainConfig::negotiation()).unwrap();
    let ep = |z: Vec<usize>, r: f64| Episode {
        steps: vec![
            Step {
                context: vec![vec![2, 3]],
                action: Action::Latent(LatentAction::Categorical(z.clone())),
                log_prob: 0.0,
                reward: 0.0,
            },
            Step {
                context: vec![vec![2, 3], vec![4]],
                action: Action::Latent(LatentAction::Categorical(z)),
                log_prob: 0.0,
                reward: r,
            },
        ],
    };
    // Zero reward with a zero baseline changes nothing.
    rl.latent_step(&mut model, &[ep(vec![0, 2], 0.0)]).unwrap();
    for id in model.all_params() {
        assert_eq!(model.store.get(id), before.get(id));
    }
    for step in 0..5 {
        let r = rl.latent_step(&mut model, &[ep(vec![1, step % 3], 4.0)]).unwrap();
        assert!(r.grad_norm.is_finite());
    }
    let mut encoder_moved = false;
    for id in model.all_params() {
        match model.side(id) {
            Side::Decoder => {
                let a: Vec<u64> = model.store.get(id).data().iter().map(|x| x.to_bits()).collect();
                let b: Vec<u64> = before.get(id).data().iter().map(|x| x.to_bits()).collect();
                assert_eq!(a, b, "{} changed", model.store.name(id));
            }
            Side::Encoder => encoder_moved |= model.store.get(id) != before.get(id),
        }
    }
    assert!(encoder_moved);
    assert!(rl.baseline.value > 0.0);
    let words = Episode {
        steps: vec![Step {
            context: vec![vec![2]],
            action: Action::Words(vec![1]),
            log_prob: 0.0,
            reward: 1.0,
        }],
    };
    assert!(rl.latent_step(&mut model, &[words]).is_err());
}
