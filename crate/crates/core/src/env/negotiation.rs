//! The negotiation game: turn taking, selections, judging and rollouts.

use std::sync::Arc;

use rand::{Rng as _, SeedableRng};
use serde::{Deserialize, Serialize};

use larl_tensor::Scalar;

use crate::corpus::negotiation::{self, Move, Persona, Scenario, ScriptedNegotiator, Split, N_ITEMS};
use crate::corpus::{negotiation_context, Vocabulary};
use crate::env::agent::{act, ActConfig};
use crate::error::{LarlError, Result};
use crate::model::DialogModel;
use crate::rng::Rng;
use crate::training::{Episode, Step};

pub const AGENT: usize = 0;
pub const OPPONENT: usize = 1;

/// Result of a finished negotiation, indexed by side.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    pub agreement: bool,
    pub rewards: [f64; 2],
    pub allocations: [Option<Split>; 2],
}

/// Agreement iff both sides selected and the selections add up to the
/// available counts; each side then earns its own value of its share.
pub fn judge_outcome(selections: &[Option<Split>; 2], scenario: &Scenario) -> Outcome {
    let agreement = match selections {
        [Some(a), Some(b)] => (0..N_ITEMS).all(|i| a[i] + b[i] == scenario.counts[i]),
        _ => false,
    };
    let rewards = if agreement {
        [0, 1].map(|s| scenario.value(s, selections[s].as_ref().expect("agreement has selections")) as f64)
    } else {
        [0.0; 2]
    };
    Outcome {
        agreement,
        rewards,
        allocations: *selections,
    }
}

/// Snapshot of a negotiation. The scenario is seen from the agent (side 0).
#[derive(Clone, Debug, PartialEq)]
pub struct NegotiationState {
    pub scenario: Scenario,
    pub transcript: Vec<(usize, Vec<String>)>,
    pub next_speaker: usize,
    pub turn: usize,
    pub max_turns: usize,
    pub terminal: bool,
    /// Set once the episode is over.
    pub selections: Option<[Option<Split>; 2]>,
    pub outcome: Option<Outcome>,
}

/// The other side of the table.
pub trait Opponent: Send {
    /// Next utterance given the transcript so far.
    fn respond(&mut self, state: &NegotiationState) -> Result<Vec<String>>;
    fn describe(&self) -> String;
}

/// Rule-based opponent with a persona drawn from its seed.
pub struct ScriptedOpponent(pub ScriptedNegotiator);

impl ScriptedOpponent {
    pub fn new(scenario: &Scenario, seed: u64) -> Self {
        let mut rng = Rng::seed_from_u64(seed);
        let persona = Persona::sample(&mut rng);
        Self(ScriptedNegotiator::new(scenario.clone(), OPPONENT, persona, rng))
    }
}

impl Opponent for ScriptedOpponent {
    fn respond(&mut self, state: &NegotiationState) -> Result<Vec<String>> {
        let heard = state
            .transcript
            .last()
            .filter(|(s, _)| *s == AGENT)
            .map(|(_, t)| negotiation::parse(t, &state.scenario.counts));
        Ok(self.0.respond(heard))
    }

    fn describe(&self) -> String {
        format!("scripted {:?}", self.0.persona)
    }
}

/// A frozen model playing side 1, sampling its words.
pub struct ModelOpponent<T> {
    pub model: Arc<DialogModel<T>>,
    pub vocab: Arc<Vocabulary>,
    pub act: ActConfig,
    rng: Rng,
}

impl<T: Scalar> ModelOpponent<T> {
    pub fn new(model: Arc<DialogModel<T>>, vocab: Arc<Vocabulary>, max_len: usize, seed: u64) -> Self {
        Self {
            model,
            vocab,
            act: ActConfig {
                stochastic: true,
                max_len,
            },
            rng: Rng::seed_from_u64(seed),
        }
    }
}

impl<T: Scalar> Opponent for ModelOpponent<T> {
    fn respond(&mut self, state: &NegotiationState) -> Result<Vec<String>> {
        let ctx = negotiation_context(&state.scenario, OPPONENT, &state.transcript);
        Ok(act(&self.model, &self.vocab, &ctx, self.act, &mut self.rng)?.words)
    }

    fn describe(&self) -> String {
        "frozen model".into()
    }
}

/// Which opponent a reset should build.
pub enum OpponentKind<T> {
    Scripted,
    Model {
        model: Arc<DialogModel<T>>,
        vocab: Arc<Vocabulary>,
        max_len: usize,
    },
}

impl<T> Clone for OpponentKind<T> {
    fn clone(&self) -> Self {
        match self {
            OpponentKind::Scripted => OpponentKind::Scripted,
            OpponentKind::Model { model, vocab, max_len } => OpponentKind::Model {
                model: Arc::clone(model),
                vocab: Arc::clone(vocab),
                max_len: *max_len,
            },
        }
    }
}

/// What one agent step produced.
#[derive(Clone, Debug, PartialEq)]
pub struct StepResult {
    pub opponent: Option<Vec<String>>,
    pub done: bool,
    /// Agent reward; zero until the episode ends.
    pub reward: f64,
}

pub struct NegotiationEnv {
    state: NegotiationState,
    pending: [Option<Option<Split>>; 2],
    opponent: Box<dyn Opponent>,
}

impl NegotiationEnv {
    /// Starts a game. The seed fixes the opponent and who opens; when the
    /// opponent opens, its first utterance is already in the transcript.
    pub fn reset<T: Scalar>(scenario: Scenario, kind: &OpponentKind<T>, seed: u64, max_turns: usize) -> Result<Self> {
        if max_turns < 2 {
            return Err(LarlError::Config(format!("max_turns must be at least 2, got {max_turns}")));
        }
        Scenario::new(scenario.counts, scenario.values)?;
        let mut rng = Rng::seed_from_u64(seed);
        let agent_first = rng.random_bool(0.5);
        let opp_seed = rng.random();
        let opponent: Box<dyn Opponent> = match kind {
            OpponentKind::Scripted => Box::new(ScriptedOpponent::new(&scenario, opp_seed)),
            OpponentKind::Model { model, vocab, max_len } => Box::new(ModelOpponent::new(
                Arc::clone(model),
                Arc::clone(vocab),
                *max_len,
                opp_seed,
            )),
        };
        Self::with_opponent(scenario, opponent, agent_first, max_turns)
    }

    pub fn with_opponent(scenario: Scenario, opponent: Box<dyn Opponent>, agent_first: bool, max_turns: usize) -> Result<Self> {
        let mut env = Self {
            state: NegotiationState {
                scenario,
                transcript: Vec::new(),
                next_speaker: if agent_first { AGENT } else { OPPONENT },
                turn: 0,
                max_turns,
                terminal: false,
                selections: None,
                outcome: None,
            },
            pending: [None, None],
            opponent,
        };
        if !agent_first {
            let reply = env.opponent.respond(&env.state)?;
            env.record(OPPONENT, reply);
        }
        Ok(env)
    }

    pub fn state(&self) -> &NegotiationState {
        &self.state
    }

    pub fn opponent(&self) -> &dyn Opponent {
        self.opponent.as_ref()
    }

    /// The agent's view of the dialog so far.
    pub fn agent_context(&self) -> Vec<Vec<String>> {
        negotiation_context(&self.state.scenario, AGENT, &self.state.transcript)
    }

    /// Appends an utterance. Once either side has selected, the other's
    /// next utterance is its selection; anything else selects nothing.
    fn record(&mut self, speaker: usize, toks: Vec<String>) {
        let mv = negotiation::parse(&toks, &self.state.scenario.counts);
        let other_selected = self.pending[1 - speaker].is_some();
        match mv {
            Move::Select(s) => self.pending[speaker] = Some(s),
            _ if other_selected => self.pending[speaker] = Some(None),
            _ => {}
        }
        self.state.transcript.push((speaker, toks));
        self.state.turn += 1;
        self.state.next_speaker = 1 - speaker;
        if let [Some(a), Some(b)] = self.pending {
            self.finish([a, b]);
        } else if self.state.turn >= self.state.max_turns {
            self.finish([None, None]);
        }
    }

    fn finish(&mut self, selections: [Option<Split>; 2]) {
        let outcome = judge_outcome(&selections, &self.state.scenario);
        self.state.terminal = true;
        self.state.selections = Some(outcome.allocations);
        self.state.outcome = Some(outcome);
    }

    pub fn step<S: AsRef<str>>(&mut self, utterance: &[S]) -> Result<StepResult> {
        if self.state.terminal {
            return Err(LarlError::Env("step after the episode ended".into()));
        }
        if self.state.next_speaker != AGENT {
            return Err(LarlError::Env("not the agent's turn".into()));
        }
        self.record(AGENT, utterance.iter().map(|t| t.as_ref().to_string()).collect());
        let mut reply = None;
        if !self.state.terminal {
            let r = self.opponent.respond(&self.state)?;
            self.record(OPPONENT, r.clone());
            reply = Some(r);
        }
        let reward = self.state.outcome.as_ref().map_or(0.0, |o| o.rewards[AGENT]);
        Ok(StepResult {
            opponent: reply,
            done: self.state.terminal,
            reward,
        })
    }
}

/// A finished game, as dumped for evaluation.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NegotiationTranscript {
    pub scenario: Scenario,
    pub turns: Vec<(usize, String)>,
    pub outcome: Outcome,
}

/// Plays the model as the agent until the game ends. The returned episode
/// carries the agent's actions with the final reward on its last step.
pub fn negotiation_episode<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    env: &mut NegotiationEnv,
    act_cfg: ActConfig,
    rng: &mut Rng,
) -> Result<(Episode, NegotiationTranscript)> {
    let mut steps: Vec<Step> = Vec::new();
    while !env.state().terminal {
        let turn = act(model, vocab, &env.agent_context(), act_cfg, rng)?;
        let res = env.step(&turn.words)?;
        steps.push(Step {
            context: turn.context,
            action: turn.action,
            log_prob: turn.log_prob,
            reward: res.reward,
        });
    }
    let st = env.state();
    let outcome = st.outcome.clone().expect("terminal state has an outcome");
    Ok((
        Episode { steps },
        NegotiationTranscript {
            scenario: st.scenario.clone(),
            turns: st.transcript.iter().map(|(s, t)| (*s, t.join(" "))).collect(),
            outcome,
        },
    ))
}
