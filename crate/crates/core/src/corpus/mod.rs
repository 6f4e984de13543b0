//! Synthetic corpora for the two tasks, their vocabulary and JSONL
//! serialization.

pub mod negotiation;
pub mod slotfill;
pub mod vocab;

use std::collections::{BTreeMap, HashSet};
use std::io::{BufRead, Write};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{LarlError, Result};
use crate::rng::{Rng, SeedTree};

pub use negotiation::{Move, Persona, Scenario, ScriptedNegotiator, Split};
pub use slotfill::{KbEntity, UserGoal};
pub use vocab::{detokenize, tokenize, Vocabulary};

pub const CORPUS_VERSION: u32 = 1;
/// Utterances per dialog, both sides counted.
pub const MAX_TURNS: usize = 20;

/// What the speaker of a sample is trying to achieve.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "task", rename_all = "snake_case")]
pub enum Goal {
    /// Values at index 0 belong to the speaker.
    Negotiation { scenario: Scenario },
    SlotFill { goal: UserGoal },
}

/// One utterance. In negotiation dialogs `speaker` is the scenario side;
/// in slot-filling dialogs 0 is the user and 1 the system, and system
/// turns carry the belief state they were produced under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Turn {
    pub speaker: usize,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub belief: Option<BTreeMap<String, String>>,
}

impl Turn {
    pub fn tokens(&self) -> Vec<String> {
        tokenize(&self.text)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dialog {
    pub version: u32,
    pub id: String,
    /// Negotiation goals are stored from side 0.
    pub goal: Goal,
    pub turns: Vec<Turn>,
}

/// A training example: the context seen by a speaker and its response.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct DialogSample {
    pub dialog_id: String,
    pub turn: usize,
    /// Utterances, each starting with a speaker or annotation token.
    pub context: Vec<Vec<String>>,
    pub target: Vec<String>,
    pub goal: Goal,
}

/// A sample mapped to ids; `target` ends with EOS.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedSample {
    pub context: Vec<Vec<usize>>,
    pub target: Vec<usize>,
}

impl DialogSample {
    pub fn encode(&self, vocab: &Vocabulary) -> EncodedSample {
        EncodedSample {
            context: self.context.iter().map(|u| vocab.encode(u)).collect(),
            target: vocab.encode_target(&self.target),
        }
    }
}

/// Context for a negotiator: its goal line, then the transcript with each
/// utterance tagged `<you>` or `<them>`.
pub fn negotiation_context(scenario: &Scenario, side: usize, turns: &[(usize, Vec<String>)]) -> Vec<Vec<String>> {
    let mut ctx = vec![scenario.goal_tokens(side)];
    for (speaker, toks) in turns {
        let tag = if *speaker == side { vocab::YOU_TOKEN } else { vocab::THEM_TOKEN };
        let mut u = vec![tag.to_string()];
        u.extend(toks.iter().cloned());
        ctx.push(u);
    }
    ctx
}

/// Context for the system: the belief line, then the tagged transcript.
pub fn slotfill_context(belief: &BTreeMap<String, String>, turns: &[Turn]) -> Vec<Vec<String>> {
    let mut ctx = vec![slotfill::belief_tokens(belief)];
    for t in turns {
        let tag = if t.speaker == 1 { vocab::SYSTEM_TOKEN } else { vocab::USER_TOKEN };
        let mut u = vec![tag.to_string()];
        u.extend(t.tokens());
        ctx.push(u);
    }
    ctx
}

impl Dialog {
    /// Negotiation: every utterance of both sides, each from its speaker's
    /// perspective. Slot-filling: every system turn.
    pub fn samples(&self) -> Vec<DialogSample> {
        let mut out = Vec::new();
        match &self.goal {
            Goal::Negotiation { scenario } => {
                let turns: Vec<(usize, Vec<String>)> = self.turns.iter().map(|t| (t.speaker, t.tokens())).collect();
                for side in 0..2 {
                    let goal = Goal::Negotiation {
                        scenario: if side == 0 { scenario.clone() } else { scenario.swapped() },
                    };
                    for (t, (speaker, toks)) in turns.iter().enumerate() {
                        if *speaker != side {
                            continue;
                        }
                        out.push(DialogSample {
                            dialog_id: self.id.clone(),
                            turn: t,
                            context: negotiation_context(scenario, side, &turns[..t]),
                            target: toks.clone(),
                            goal: goal.clone(),
                        });
                    }
                }
            }
            Goal::SlotFill { .. } => {
                for (t, turn) in self.turns.iter().enumerate() {
                    let Some(belief) = turn.belief.as_ref().filter(|_| turn.speaker == 1) else { continue };
                    out.push(DialogSample {
                        dialog_id: self.id.clone(),
                        turn: t,
                        context: slotfill_context(belief, &self.turns[..t]),
                        target: turn.tokens(),
                        goal: self.goal.clone(),
                    });
                }
            }
        }
        out
    }

    /// Declared selections of both sides, in order of appearance.
    pub fn selections(&self) -> [Option<Split>; 2] {
        let mut sel = [None, None];
        if let Goal::Negotiation { scenario } = &self.goal {
            for t in &self.turns {
                if let Move::Select(s) = negotiation::parse(&t.tokens(), &scenario.counts) {
                    sel[t.speaker] = s;
                }
            }
        }
        sel
    }
}

/// Plays two scripted negotiators against each other until both select.
pub fn negotiation_dialog(id: String, scenario: Scenario, rng: &mut Rng) -> Dialog {
    use rand::Rng as _;
    let personas = [Persona::sample(rng), Persona::sample(rng)];
    let mut agents = [0, 1].map(|side| {
        let phrasing = SeedTree::new(rng.random()).stream("phrasing");
        ScriptedNegotiator::new(scenario.clone(), side, personas[side], phrasing)
    });
    let mut speaker = rng.random_range(0..2);
    let mut heard = None;
    let mut turns = Vec::new();
    let mut selected = [false, false];
    while !(selected[0] && selected[1]) {
        let toks = if turns.len() + 2 >= MAX_TURNS && !selected[speaker] && !selected[1 - speaker] {
            let claim = agents[speaker].claim().unwrap_or_else(|| agents[speaker].opening_claim());
            negotiation::selection_tokens(&claim)
        } else {
            agents[speaker].respond(heard)
        };
        let mv = negotiation::parse(&toks, &scenario.counts);
        if matches!(mv, Move::Select(_)) {
            selected[speaker] = true;
        }
        turns.push(Turn {
            speaker,
            text: detokenize(&toks),
            belief: None,
        });
        heard = Some(mv);
        speaker = 1 - speaker;
    }
    Dialog {
        version: CORPUS_VERSION,
        id,
        goal: Goal::Negotiation { scenario },
        turns,
    }
}

/// `n_dialogs` negotiation dialogs, each on a freshly drawn scenario.
pub fn gen_negotiation_corpus(n_dialogs: usize, seed: u64) -> Result<Vec<Dialog>> {
    if n_dialogs == 0 {
        return Err(LarlError::Input("n_dialogs must be positive".into()));
    }
    let tree = SeedTree::new(seed);
    Ok((0..n_dialogs)
        .map(|i| {
            let mut rng = tree.indexed("dialog", i as u64);
            let scenario = Scenario::sample(&mut rng);
            negotiation_dialog(format!("neg-{i:05}"), scenario, &mut rng)
        })
        .collect())
}

/// Train/valid/test corpora over disjoint scenario sets.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Splits {
    pub train: Vec<Dialog>,
    pub valid: Vec<Dialog>,
    pub test: Vec<Dialog>,
}

/// Dialogs per scenario, roughly as in the original negotiation corpus.
pub const DIALOGS_PER_SCENARIO: usize = 2;

/// Draws distinct scenarios for each split; a split of `n` dialogs uses
/// `ceil(n / 2)` scenarios, each played by fresh personas.
pub fn gen_negotiation_splits(sizes: [usize; 3], seed: u64) -> Result<Splits> {
    if sizes.iter().any(|&n| n == 0) {
        return Err(LarlError::Input("split sizes must be positive".into()));
    }
    let tree = SeedTree::new(seed);
    let mut scen_rng = tree.stream("scenarios");
    let mut used = HashSet::new();
    let mut out: Vec<Vec<Dialog>> = Vec::new();
    let names = ["train", "valid", "test"];
    for (k, &n) in sizes.iter().enumerate() {
        let n_scen = n.div_ceil(DIALOGS_PER_SCENARIO);
        let mut scenarios = Vec::with_capacity(n_scen);
        let mut attempts = 0;
        while scenarios.len() < n_scen {
            let s = Scenario::sample(&mut scen_rng);
            attempts += 1;
            if used.insert(s.clone()) {
                scenarios.push(s);
            } else if attempts > 1_000_000 {
                return Err(LarlError::Input("not enough distinct scenarios".into()));
            }
        }
        let dialogs = (0..n)
            .map(|i| {
                let mut rng = tree.child(names[k]).indexed("dialog", i as u64);
                let s = scenarios[i % n_scen].clone();
                negotiation_dialog(format!("{}-{i:05}", names[k]), s, &mut rng)
            })
            .collect();
        out.push(dialogs);
    }
    let test = out.pop().unwrap_or_default();
    let valid = out.pop().unwrap_or_default();
    let train = out.pop().unwrap_or_default();
    Ok(Splits { train, valid, test })
}

/// Unique scenarios of a set of negotiation dialogs, in first-seen order.
pub fn unique_scenarios(dialogs: &[Dialog]) -> Vec<Scenario> {
    let mut seen = HashSet::new();
    dialogs
        .iter()
        .filter_map(|d| match &d.goal {
            Goal::Negotiation { scenario } if seen.insert(scenario.clone()) => Some(scenario.clone()),
            _ => None,
        })
        .collect()
}

/// Slot-filling dialogs over `kb`; unsatisfiable goals are redrawn.
pub fn gen_slotfill_corpus(n_dialogs: usize, kb: &[KbEntity], seed: u64) -> Result<Vec<Dialog>> {
    if kb.is_empty() {
        return Err(LarlError::Input("knowledge base is empty".into()));
    }
    if n_dialogs == 0 {
        return Err(LarlError::Input("n_dialogs must be positive".into()));
    }
    let tree = SeedTree::new(seed);
    Ok((0..n_dialogs)
        .map(|i| {
            let mut rng = tree.indexed("dialog", i as u64);
            let goal = loop {
                let g = UserGoal::sample(kb, &mut rng);
                if g.satisfiable(kb) {
                    break g;
                }
            };
            let turns = slotfill::script_dialog(&goal, kb, &mut rng)
                .into_iter()
                .map(|t| Turn {
                    speaker: usize::from(t.system),
                    text: t.text,
                    belief: t.belief,
                })
                .collect();
            Dialog {
                version: CORPUS_VERSION,
                id: format!("sf-{i:05}"),
                goal: Goal::SlotFill { goal },
                turns,
            }
        })
        .collect())
}

/// Slot-filling train/valid/test with disjoint generator seeds.
pub fn gen_slotfill_splits(sizes: [usize; 3], kb: &[KbEntity], seed: u64) -> Result<Splits> {
    let tree = SeedTree::new(seed);
    let mut parts = Vec::new();
    for (k, name) in ["train", "valid", "test"].iter().enumerate() {
        let mut d = gen_slotfill_corpus(sizes[k], kb, tree.seed(name))?;
        for x in &mut d {
            x.id = format!("{name}-{}", x.id);
        }
        parts.push(d);
    }
    let test = parts.pop().unwrap_or_default();
    let valid = parts.pop().unwrap_or_default();
    let train = parts.pop().unwrap_or_default();
    Ok(Splits { train, valid, test })
}

/// Vocabulary over every context and target token of `dialogs`.
pub fn build_vocab(dialogs: &[Dialog]) -> Vocabulary {
    let samples: Vec<DialogSample> = dialogs.iter().flat_map(Dialog::samples).collect();
    let seqs = samples
        .iter()
        .flat_map(|s| s.context.iter().map(Vec::as_slice).chain(std::iter::once(s.target.as_slice())));
    Vocabulary::build(seqs)
}

pub fn write_jsonl<T: Serialize>(mut w: impl Write, items: &[T]) -> Result<()> {
    for it in items {
        serde_json::to_writer(&mut w, it)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_jsonl<T: DeserializeOwned>(r: impl BufRead) -> Result<Vec<T>> {
    let mut out = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| LarlError::Input(format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Reads dialogs, rejecting other schema versions.
pub fn read_dialogs(r: impl BufRead) -> Result<Vec<Dialog>> {
    let dialogs: Vec<Dialog> = read_jsonl(r)?;
    if let Some(d) = dialogs.iter().find(|d| d.version != CORPUS_VERSION) {
        return Err(LarlError::Input(format!(
            "dialog {} has schema version {}, expected {CORPUS_VERSION}",
            d.id, d.version
        )));
    }
    Ok(dialogs)
}
