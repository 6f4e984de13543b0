use std::collections::BTreeMap;

use proptest::prelude::*;
use rand::SeedableRng;

use super::*;
use crate::corpus::negotiation::{selection_tokens, Persona, Scenario, ScriptedNegotiator, Split};
use crate::corpus::slotfill::{default_kb, placeholder, KbEntity, UserGoal, NAME_PLACEHOLDER};
use crate::corpus::{build_vocab, gen_negotiation_corpus, gen_slotfill_corpus, Dialog, Goal};
use crate::latent::{LatentAction, LatentKind};
use crate::model::{DialogModel, Fusion, ModelConfig, Objective};
use crate::rng::Rng;
use crate::training::Action;

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

/// Says its lines in order, then repeats the last one.
struct Fixed(Vec<Vec<String>>, usize);

impl Fixed {
    fn new(lines: &[Vec<String>]) -> Box<Self> {
        Box::new(Self(lines.to_vec(), 0))
    }
}

impl Opponent for Fixed {
    fn respond(&mut self, _: &NegotiationState) -> crate::Result<Vec<String>> {
        let i = self.1.min(self.0.len() - 1);
        self.1 += 1;
        Ok(self.0[i].clone())
    }

    fn describe(&self) -> String {
        "fixed".into()
    }
}

fn scenario(counts: Split, agent: Split, user: Split) -> Scenario {
    Scenario::new(counts, [agent, user]).unwrap()
}

#[test]
fn judged_fixture_outcomes() {
    // (counts, agent values, user values, agent takes, user takes, rewards)
    let cases = [
        ([1, 1, 3], [1, 6, 1], [1, 6, 1], [0, 1, 2], [1, 0, 1], (8.0, 2.0)),
        ([4, 1, 1], [0, 7, 3], [1, 6, 0], [0, 1, 1], [4, 0, 0], (10.0, 4.0)),
        ([2, 2, 1], [3, 0, 4], [2, 3, 0], [2, 0, 1], [0, 2, 0], (10.0, 6.0)),
        ([2, 1, 3], [0, 4, 2], [3, 1, 1], [0, 1, 3], [2, 0, 0], (10.0, 6.0)),
    ];
    for (counts, av, uv, at, ut, (ra, ru)) in cases {
        let sc = scenario(counts, av, uv);
        let o = judge_outcome(&[Some(at), Some(ut)], &sc);
        assert!(o.agreement);
        assert_eq!(o.rewards, [ra, ru]);
        assert_eq!(o.allocations, [Some(at), Some(ut)]);
    }
}

#[test]
fn overlapping_or_missing_selections_disagree() {
    let sc = scenario([1, 1, 3], [1, 6, 1], [1, 6, 1]);
    let both_hat = judge_outcome(&[Some([0, 1, 2]), Some([1, 1, 1])], &sc);
    assert!(!both_hat.agreement);
    assert_eq!(both_hat.rewards, [0.0, 0.0]);
    let leftover = judge_outcome(&[Some([0, 1, 1]), Some([1, 0, 1])], &sc);
    assert!(!leftover.agreement);
    let missing = judge_outcome(&[Some([0, 1, 2]), None], &sc);
    assert_eq!(missing.rewards, [0.0, 0.0]);
}

fn arb_split() -> impl Strategy<Value = Split> {
    prop::array::uniform3(0u32..5)
}

proptest! {
    #[test]
    fn rewards_are_bounded_and_agreement_is_complementary(seed in any::<u64>(), a in arb_split(), b in arb_split(), fill in any::<bool>()) {
        let sc = Scenario::sample(&mut Rng::seed_from_u64(seed));
        let a: Split = std::array::from_fn(|i| a[i].min(sc.counts[i]));
        let b: Split = if fill { std::array::from_fn(|i| sc.counts[i] - a[i]) } else { b };
        let o = judge_outcome(&[Some(a), Some(b)], &sc);
        for r in o.rewards {
            prop_assert!((0.0..=10.0).contains(&r));
        }
        if o.agreement {
            for i in 0..3 {
                prop_assert_eq!(a[i] + b[i], sc.counts[i]);
            }
            prop_assert_eq!(o.rewards[0] + 0.0, sc.value(0, &a) as f64);
        } else {
            prop_assert_eq!(o.rewards, [0.0, 0.0]);
        }
        prop_assert!(!fill || o.agreement);
    }
}

#[test]
fn agent_selection_then_opponent_completes() {
    let sc = scenario([1, 1, 3], [1, 6, 1], [1, 6, 1]);
    let mut env = NegotiationEnv::with_opponent(sc, Fixed::new(&[selection_tokens(&[1, 0, 1])]), true, 20).unwrap();
    assert!(env.state().selections.is_none());
    let r = env.step(&selection_tokens(&[0, 1, 2])).unwrap();
    assert!(r.done);
    assert_eq!(r.reward, 8.0);
    let o = env.state().outcome.clone().unwrap();
    assert_eq!(o.rewards, [8.0, 2.0]);
    assert_eq!(env.state().selections, Some([Some([0, 1, 2]), Some([1, 0, 1])]));
    let err = env.step(&words("hello")).unwrap_err();
    assert!(err.to_string().contains("ended"), "{err}");
}

#[test]
fn unparseable_or_missing_selection_is_no_agreement() {
    let sc = scenario([2, 1, 3], [0, 4, 2], [3, 1, 1]);
    let opp = || Fixed::new(&[selection_tokens(&[2, 0, 0])]);
    let mut env = NegotiationEnv::with_opponent(sc.clone(), opp(), true, 20).unwrap();
    let r = env.step(&words("<selection> lots of hats")).unwrap();
    assert!(r.done);
    assert_eq!(r.reward, 0.0);
    assert!(!env.state().outcome.as_ref().unwrap().agreement);

    // The opponent opens with a selection; a non-selection reply forfeits.
    let mut env = NegotiationEnv::with_opponent(sc, opp(), false, 20).unwrap();
    assert_eq!(env.state().turn, 1);
    let r = env.step(&words("i want the hat")).unwrap();
    assert!(r.done && r.opponent.is_none());
    assert_eq!(env.state().selections, Some([None, Some([2, 0, 0])]));
    assert_eq!(r.reward, 0.0);
}

#[test]
fn timeout_ends_without_agreement() {
    let sc = scenario([2, 2, 1], [3, 0, 4], [2, 3, 0]);
    let mut env = NegotiationEnv::with_opponent(sc, Fixed::new(&[words("hmm")]), true, 20).unwrap();
    let mut steps = 0;
    loop {
        let r = env.step(&words("hello there")).unwrap();
        steps += 1;
        assert!(env.state().turn <= env.state().max_turns);
        if r.done {
            assert_eq!(r.reward, 0.0);
            break;
        }
        assert_eq!(r.reward, 0.0);
    }
    assert_eq!(steps, 10);
    assert_eq!(env.state().turn, 20);
    assert!(!env.state().outcome.as_ref().unwrap().agreement);
}

#[test]
fn reset_is_deterministic_per_seed() {
    let sc = scenario([1, 1, 3], [1, 6, 1], [1, 6, 1]);
    let kind = OpponentKind::<f64>::Scripted;
    let snapshot = |seed| {
        let env = NegotiationEnv::reset(sc.clone(), &kind, seed, 20).unwrap();
        (env.opponent().describe(), env.state().clone())
    };
    for seed in 0..20 {
        assert_eq!(snapshot(seed), snapshot(seed));
    }
    let distinct: std::collections::BTreeSet<_> = (0..20).map(|s| format!("{:?}", snapshot(s))).collect();
    assert!(distinct.len() > 1);
    let env = NegotiationEnv::reset(sc.clone(), &kind, 0, 20).unwrap();
    assert_eq!(env.state().scenario, sc);
    assert_eq!(env.state().max_turns, crate::corpus::MAX_TURNS);
}

#[test]
fn scripted_self_play_through_the_env() {
    let mut agreements = 0;
    for seed in 0..40u64 {
        let mut rng = Rng::seed_from_u64(seed);
        let sc = Scenario::sample(&mut rng);
        let mut env = NegotiationEnv::reset(sc.clone(), &OpponentKind::<f64>::Scripted, seed, 20).unwrap();
        let mut me = ScriptedNegotiator::new(sc.clone(), AGENT, Persona::sample(&mut rng), rng);
        let mut heard = env
            .state()
            .transcript
            .last()
            .map(|(_, t)| crate::corpus::negotiation::parse(t, &sc.counts));
        loop {
            let r = env.step(&me.respond(heard)).unwrap();
            if r.done {
                break;
            }
            heard = r.opponent.map(|t| crate::corpus::negotiation::parse(&t, &sc.counts));
        }
        let o = env.state().outcome.clone().unwrap();
        let sel = env.state().selections.unwrap();
        assert_eq!(o, judge_outcome(&sel, &sc));
        agreements += usize::from(o.agreement);
    }
    assert!(agreements > 20, "{agreements}/40");
}

fn tiny(vocab: usize, latent: Option<LatentKind>, fusion: Fusion, objective: Objective) -> ModelConfig {
    ModelConfig {
        embed_size: 6,
        utt_size: 5,
        ctx_size: 7,
        dec_size: 8,
        m: 3,
        k: 4,
        d: 8,
        dropout: 0.0,
        ..ModelConfig::negotiation(vocab, latent, fusion, objective)
    }
}

fn tiny_models(vocab: usize) -> Vec<DialogModel<f64>> {
    [
        tiny(vocab, None, Fusion::None, Objective::Mle),
        tiny(vocab, Some(LatentKind::Gaussian), Fusion::None, Objective::FullElbo),
        tiny(vocab, Some(LatentKind::Categorical), Fusion::Attention, Objective::LiteElbo),
    ]
    .into_iter()
    .map(|c| DialogModel::new(c, 3).unwrap())
    .collect()
}

#[test]
fn batched_greedy_acting_matches_single() {
    let corpus = gen_negotiation_corpus(4, 1).unwrap();
    let vocab = build_vocab(&corpus);
    let samples = corpus[0].samples();
    let ctxs: Vec<Vec<Vec<usize>>> = samples.iter().take(3).map(|s| s.encode(&vocab).context).collect();
    let cfg = ActConfig {
        stochastic: false,
        max_len: 6,
    };
    for model in tiny_models(vocab.len()) {
        let mut rng = Rng::seed_from_u64(0);
        let batched = act_batch(&model, &vocab, &ctxs, cfg, &mut rng).unwrap();
        for (i, s) in samples.iter().take(3).enumerate() {
            let single = act(&model, &vocab, &s.context, cfg, &mut rng).unwrap();
            assert_eq!(single.words, batched[i].words);
            match (&single.action, &batched[i].action) {
                (Action::Latent(LatentAction::Gaussian(a)), Action::Latent(LatentAction::Gaussian(b))) => {
                    assert!(a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-9));
                }
                (a, b) => assert_eq!(a, b),
            }
            assert!((single.log_prob - batched[i].log_prob).abs() < 1e-9);
        }
        for t in &batched {
            assert!(t.words.len() <= 6);
            assert!(t.log_prob <= 1e-12);
            match (&t.action, model.config.latent) {
                (Action::Words(ids), None) => assert!(ids.len() >= t.words.len()),
                (Action::Latent(_), Some(_)) => {}
                other => panic!("unexpected action {other:?}"),
            }
        }
    }
}

#[test]
fn model_episode_rewards_only_the_last_step() {
    let corpus = gen_negotiation_corpus(4, 1).unwrap();
    let vocab = build_vocab(&corpus);
    let cfg = ActConfig {
        stochastic: true,
        max_len: 8,
    };
    for model in tiny_models(vocab.len()) {
        let sc = scenario([2, 1, 3], [0, 4, 2], [3, 1, 1]);
        let mut env = NegotiationEnv::reset(sc, &OpponentKind::<f64>::Scripted, 5, 20).unwrap();
        let mut rng = Rng::seed_from_u64(9);
        let (ep, tr) = negotiation_episode(&model, &vocab, &mut env, cfg, &mut rng).unwrap();
        assert!(!ep.is_empty());
        let agent_turns = tr.turns.iter().filter(|(s, _)| *s == AGENT).count();
        assert_eq!(ep.len(), agent_turns);
        let rewards = ep.rewards();
        assert!(rewards[..rewards.len() - 1].iter().all(|&r| r == 0.0));
        assert_eq!(*rewards.last().unwrap(), tr.outcome.rewards[AGENT]);
        ep.validate().unwrap();
    }
}

#[test]
fn model_opponent_plays_side_one() {
    let corpus = gen_negotiation_corpus(4, 1).unwrap();
    let vocab = std::sync::Arc::new(build_vocab(&corpus));
    let model = std::sync::Arc::new(tiny_models(vocab.len()).remove(0));
    let kind = OpponentKind::Model {
        model,
        vocab,
        max_len: 5,
    };
    let sc = scenario([1, 1, 3], [1, 6, 1], [1, 6, 1]);
    let mut env = NegotiationEnv::reset(sc, &kind, 1, 6).unwrap();
    while !env.state().terminal {
        env.step(&words("i want the hat")).unwrap();
    }
    assert!(env.state().transcript.iter().any(|(s, _)| *s == OPPONENT));
    assert!(env.state().turn <= 6);
}

fn fixture_kb() -> Vec<KbEntity> {
    let entity = |id: &str, area: &str, food: &str| KbEntity {
        id: id.into(),
        slots: [
            ("area", area),
            ("food", food),
            ("pricerange", "cheap"),
            ("phone", "0"),
            ("address", "1 mill street"),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v.to_string()))
        .collect(),
    };
    vec![entity("a", "north", "thai"), entity("b", "south", "thai")]
}

fn belief(pairs: &[(&str, &str)]) -> BTreeMap<String, String> {
    pairs.iter().map(|(k, v)| (k.to_string(), v.to_string())).collect()
}

fn goal(requests: &[&str]) -> UserGoal {
    UserGoal {
        constraints: belief(&[("area", "south"), ("food", "thai")]),
        requests: requests.iter().map(|s| s.to_string()).collect(),
    }
}

fn turn(b: &[(&str, &str)], text: &str) -> SystemTurn {
    SystemTurn {
        belief: belief(b),
        words: words(text),
    }
}

#[test]
fn success_and_inform_fixtures() {
    let kb = fixture_kb();
    let g = goal(&["phone", "address"]);
    let full = [("area", "south"), ("food", "thai"), ("pricerange", "dontcare")];
    let offered = [
        turn(&[("area", "south")], "what type of food would you like ?"),
        turn(&full, "how about [value_name] ?"),
        turn(&full, "the phone is [value_phone] and it is at [value_address] ."),
    ];
    assert!(compute_inform(&offered, &g, &kb));
    assert!(compute_success(&offered, &g, &kb));

    let missing = &offered[..2];
    assert!(compute_inform(missing, &g, &kb));
    assert!(!compute_success(missing, &g, &kb));
    assert!(compute_success(missing, &goal(&[]), &kb));

    let none = [turn(&full, "the phone is [value_phone] and it is at [value_address] .")];
    assert!(!compute_inform(&none, &g, &kb));
    assert!(!compute_success(&none, &g, &kb));

    // The belief resolves to the northern entity: wrong recommendation.
    let wrong = [turn(&[("food", "thai")], "how about [value_name] ? [value_phone] [value_address]")];
    assert!(!compute_inform(&wrong, &g, &kb));
    assert!(!compute_success(&wrong, &g, &kb));
}

fn gold_turns(d: &Dialog) -> (UserGoal, Vec<SystemTurn>) {
    let (g, turns) = system_turns(d).unwrap();
    let st = turns
        .iter()
        .map(|(i, b)| SystemTurn {
            belief: (*b).clone(),
            words: d.turns[*i].tokens(),
        })
        .collect();
    (g.clone(), st)
}

#[test]
fn gold_responses_succeed_and_empty_ones_fail() {
    let kb = default_kb(0);
    for d in gen_slotfill_corpus(200, &kb, 3).unwrap() {
        let (g, mut st) = gold_turns(&d);
        assert!(compute_success(&st, &g, &kb), "{}", d.id);
        for t in &mut st {
            t.words.clear();
        }
        assert!(!compute_inform(&st, &g, &kb));
        assert!(!compute_success(&st, &g, &kb));
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn success_implies_inform(seed in any::<u64>(), keep in prop::collection::vec(any::<bool>(), 64)) {
        let kb = default_kb(0);
        let d = gen_slotfill_corpus(1, &kb, seed).unwrap().remove(0);
        let (g, mut st) = gold_turns(&d);
        let mut it = keep.iter().cycle();
        for t in &mut st {
            t.words.retain(|_| *it.next().unwrap());
            if *it.next().unwrap() {
                t.words.push(NAME_PLACEHOLDER.to_string());
            }
            if *it.next().unwrap() {
                t.words.push(placeholder("phone"));
            }
        }
        let success = compute_success(&st, &g, &kb);
        prop_assert!(!success || compute_inform(&st, &g, &kb));
    }
}

#[test]
fn bandit_episode_leaves_dialog_untouched() {
    let kb = default_kb(0);
    let dialogs = gen_slotfill_corpus(3, &kb, 1).unwrap();
    let vocab = build_vocab(&dialogs);
    let cfg = ActConfig {
        stochastic: true,
        max_len: 6,
    };
    for model in tiny_models(vocab.len()) {
        for d in &dialogs {
            let before = d.clone();
            let mut rng = Rng::seed_from_u64(2);
            let (ep, res) = bandit_episode(&model, &vocab, d, &kb, cfg, &mut rng).unwrap();
            assert_eq!(*d, before);
            let n = system_turns(d).unwrap().1.len();
            assert_eq!(ep.len(), n);
            assert_eq!(res.responses.len(), n);
            assert_eq!(res.reward, f64::from(u8::from(res.success)));
            let rewards = ep.rewards();
            assert!(rewards[..n - 1].iter().all(|&r| r == 0.0));
            assert_eq!(rewards[n - 1], res.reward);
            assert!(!res.success || res.inform);
            // contexts are the corpus ones
            for (s, step) in d.samples().iter().zip(&ep.steps) {
                assert_eq!(s.encode(&vocab).context, step.context);
            }
        }
    }
    let mut neg = gen_negotiation_corpus(1, 0).unwrap().remove(0);
    assert!(system_turns(&neg).is_err());
    neg.goal = Goal::SlotFill { goal: goal(&[]) };
    neg.turns.clear();
    assert!(system_turns(&neg).is_err());
}
