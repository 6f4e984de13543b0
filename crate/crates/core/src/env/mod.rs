//! Environments the agents act in.

pub mod agent;
pub mod negotiation;
pub mod slotfill;

pub use agent::{act, act_batch, ActConfig, AgentTurn};
pub use negotiation::{
    judge_outcome, negotiation_episode, NegotiationEnv, NegotiationState, NegotiationTranscript, Opponent, OpponentKind,
    Outcome, ScriptedOpponent, StepResult, AGENT, OPPONENT,
};
pub use slotfill::{bandit_episode, compute_inform, compute_success, system_turns, BanditEpisodeResult, SystemTurn};

#[cfg(test)]
mod tests;
