//! Slot-filling as a contextual bandit: every system turn of a corpus
//! dialog is answered from its ground-truth context, then the whole set of
//! responses is scored once.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use larl_tensor::Scalar;

use crate::corpus::slotfill::{first_match, placeholder, KbEntity, UserGoal, NAME_PLACEHOLDER};
use crate::corpus::{Dialog, Goal, Vocabulary};
use crate::env::agent::{act_batch, ActConfig};
use crate::error::{LarlError, Result};
use crate::model::DialogModel;
use crate::rng::Rng;
use crate::training::{Episode, Step};

/// A system response and the belief state it was produced under.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SystemTurn {
    pub belief: BTreeMap<String, String>,
    pub words: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BanditEpisodeResult {
    pub dialog_id: String,
    pub responses: Vec<Vec<String>>,
    pub success: bool,
    pub inform: bool,
    pub reward: f64,
}

/// Some turn offers `[value_name]` while its belief resolves to an entity
/// meeting every goal constraint.
pub fn compute_inform(turns: &[SystemTurn], goal: &UserGoal, kb: &[KbEntity]) -> bool {
    turns.iter().any(|t| {
        t.words.iter().any(|w| w == NAME_PLACEHOLDER)
            && first_match(kb, &t.belief).is_some_and(|e| e.matches(&goal.constraints))
    })
}

/// Inform, and every requested slot's placeholder appears somewhere.
pub fn compute_success(turns: &[SystemTurn], goal: &UserGoal, kb: &[KbEntity]) -> bool {
    compute_inform(turns, goal, kb)
        && goal.requests.iter().all(|r| {
            let p = placeholder(r);
            turns.iter().any(|t| t.words.contains(&p))
        })
}

/// Goal and belief-annotated system turns of a slot-filling dialog.
pub fn system_turns(dialog: &Dialog) -> Result<(&UserGoal, Vec<(usize, &BTreeMap<String, String>)>)> {
    let Goal::SlotFill { goal } = &dialog.goal else {
        return Err(LarlError::Input(format!("dialog {} is not a slot-filling dialog", dialog.id)));
    };
    let turns: Vec<_> = dialog
        .turns
        .iter()
        .enumerate()
        .filter(|(_, t)| t.speaker == 1)
        .filter_map(|(i, t)| t.belief.as_ref().map(|b| (i, b)))
        .collect();
    if turns.is_empty() {
        return Err(LarlError::Input(format!("dialog {} has no system turn", dialog.id)));
    }
    Ok((goal, turns))
}

/// Generates every system turn from the corpus context and rewards the
/// last step with the dialog's success.
pub fn bandit_episode<T: Scalar>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    dialog: &Dialog,
    kb: &[KbEntity],
    act_cfg: ActConfig,
    rng: &mut Rng,
) -> Result<(Episode, BanditEpisodeResult)> {
    let (goal, turns) = system_turns(dialog)?;
    let samples = dialog.samples();
    let contexts: Vec<Vec<Vec<usize>>> = samples
        .iter()
        .map(|s| s.context.iter().map(|u| vocab.encode(u)).collect())
        .collect();
    let acted = act_batch(model, vocab, &contexts, act_cfg, rng)?;
    let generated: Vec<SystemTurn> = turns
        .iter()
        .zip(&acted)
        .map(|((_, b), a)| SystemTurn {
            belief: (*b).clone(),
            words: a.words.clone(),
        })
        .collect();
    let inform = compute_inform(&generated, goal, kb);
    let success = compute_success(&generated, goal, kb);
    let reward = if success { 1.0 } else { 0.0 };
    let n = acted.len();
    let steps = acted
        .into_iter()
        .enumerate()
        .map(|(i, a)| Step {
            context: a.context,
            action: a.action,
            log_prob: a.log_prob,
            reward: if i + 1 == n { reward } else { 0.0 },
        })
        .collect();
    Ok((
        Episode { steps },
        BanditEpisodeResult {
            dialog_id: dialog.id.clone(),
            responses: generated.into_iter().map(|t| t.words).collect(),
            success,
            inform,
            reward,
        },
    ))
}
