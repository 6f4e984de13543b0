//! The policy-gradient loop against the scripted negotiation opponent and
//! the slot-filling bandit.

use larl::corpus::slotfill::default_kb;
use larl::corpus::{build_vocab, gen_negotiation_corpus, gen_slotfill_corpus, unique_scenarios, EncodedSample};
use larl::env::OpponentKind;
use larl::latent::LatentKind;
use larl::model::{DialogModel, Fusion, ModelConfig, Objective, Side};
use larl::rng::Rng;
use larl::training::{rl_train, Reinforce, RlRun, RlSlSchedule, RlTask, TrainConfig, TrainLog};
use rand::SeedableRng;

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

fn run() -> RlRun {
    RlRun {
        episodes: 12,
        episodes_per_update: 1,
        eval_every: 5,
        max_len: 6,
        max_turns: 8,
    }
}

#[test]
fn negotiation_loop_evaluates_on_the_grid_and_freezes_the_decoder() {
    let corpus = gen_negotiation_corpus(10, 3).unwrap();
    let vocab = build_vocab(&corpus);
    let scenarios = unique_scenarios(&corpus);
    let opponent = OpponentKind::Scripted;
    let task = RlTask::Negotiation {
        scenarios: &scenarios,
        opponent: &opponent,
    };
    let go = || {
        let mut model =
            DialogModel::<f32>::new(tiny(vocab.len(), Some(LatentKind::Categorical), Fusion::Summation, Objective::LiteElbo), 1)
                .unwrap();
        let before = model.clone();
        let mut trainer = Reinforce::new(TrainConfig::negotiation()).unwrap();
        let mut seen = Vec::new();
        let s = rl_train(
            &mut model,
            &vocab,
            &task,
            &[],
            &mut trainer,
            &run(),
            &mut Rng::seed_from_u64(4),
            &mut TrainLog::sink(),
            |_, e| {
                seen.push(e);
                Ok(())
            },
        )
        .unwrap();
        (model, before, seen, s)
    };
    let (model, before, seen, s) = go();
    assert_eq!(seen, [0, 5, 10, 12]);
    assert_eq!(s.episodes, 12);
    assert_eq!(s.sl_updates, 0);
    assert!(s.rl_updates > 0);
    for id in model.params_on(Side::Decoder) {
        let bits = |m: &DialogModel<f32>| m.store.get(id).data().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&model), bits(&before), "{}", model.store.name(id));
    }
    let (again, ..) = go();
    assert_eq!(model.named_tensors(), again.named_tensors());
}

#[test]
fn rl_sl_ratio_interleaves_supervised_updates() {
    let kb = default_kb(0);
    let dialogs = gen_slotfill_corpus(6, &kb, 1).unwrap();
    let vocab = build_vocab(&dialogs);
    let sl: Vec<EncodedSample> = dialogs.iter().flat_map(|d| d.samples()).map(|s| s.encode(&vocab)).collect();
    let task = RlTask::Slotfill { dialogs: &dialogs, kb: &kb };
    let mut model = DialogModel::<f32>::new(tiny(vocab.len(), None, Fusion::None, Objective::Mle), 1).unwrap();
    let cfg = TrainConfig {
        rl_sl: "4:1".parse().unwrap(),
        batch_size: 4,
        ..TrainConfig::slotfill()
    };
    let mut trainer = Reinforce::new(cfg).unwrap();
    let before = model.clone();
    let s = rl_train(
        &mut model,
        &vocab,
        &task,
        &sl,
        &mut trainer,
        &run(),
        &mut Rng::seed_from_u64(0),
        &mut TrainLog::sink(),
        |_, _| Ok(()),
    )
    .unwrap();
    assert_eq!((s.rl_updates, s.sl_updates), (12, 2));
    assert_ne!(model.named_tensors(), before.named_tensors());

    trainer.config.rl_sl = RlSlSchedule::Ratio { rl: 1, sl: 1 };
    let err = rl_train(
        &mut model,
        &vocab,
        &task,
        &[],
        &mut trainer,
        &run(),
        &mut Rng::seed_from_u64(0),
        &mut TrainLog::sink(),
        |_, _| Ok(()),
    )
    .unwrap_err();
    assert!(err.to_string().contains("supervised"), "{err}");
}
