use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use super::BaselinePlacement;
use crate::error::{LarlError, Result};

/// `R_t = Σ_{k=0}^{T-1-t} γ^k (r_{t+k} − b)` for every step `t`.
pub fn compute_returns(rewards: &[f64], gamma: f64, b: f64) -> Vec<f64> {
    let mut out = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    for t in (0..rewards.len()).rev() {
        acc = (rewards[t] - b) + gamma * acc;
        out[t] = acc;
    }
    out
}

/// Returns with the baseline applied according to `placement`.
pub fn terminal_returns(rewards: &[f64], gamma: f64, b: f64, placement: BaselinePlacement) -> Vec<f64> {
    match placement {
        BaselinePlacement::EveryStep => compute_returns(rewards, gamma, b),
        BaselinePlacement::Terminal => {
            let mut r = rewards.to_vec();
            if let Some(last) = r.last_mut() {
                *last -= b;
            }
            compute_returns(&r, gamma, 0.0)
        }
    }
}

/// How word-level returns are spread over the tokens of a turn.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WordReturns {
    /// Discounting per token over the flattened token stream; a turn's
    /// reward lands on its last token.
    PerToken,
    /// Every token of turn `t` shares the turn return `R_t`.
    PerTurn,
}

/// Per-token returns `R_{tj}` for turns with `tokens[t]` tokens each.
pub fn token_returns(
    turn_rewards: &[f64],
    tokens: &[usize],
    gamma: f64,
    b: f64,
    placement: BaselinePlacement,
    mode: WordReturns,
) -> Result<Vec<Vec<f64>>> {
    if turn_rewards.len() != tokens.len() {
        return Err(LarlError::Input("one reward per turn required".into()));
    }
    if tokens.contains(&0) {
        return Err(LarlError::Input("every turn needs at least one token".into()));
    }
    match mode {
        WordReturns::PerTurn => {
            let r = terminal_returns(turn_rewards, gamma, b, placement);
            Ok(r.iter().zip(tokens).map(|(&x, &n)| vec![x; n]).collect())
        }
        WordReturns::PerToken => {
            let mut flat = Vec::with_capacity(tokens.iter().sum());
            for (&r, &n) in turn_rewards.iter().zip(tokens) {
                flat.extend(std::iter::repeat_n(0.0, n - 1));
                flat.push(r);
            }
            let all = terminal_returns(&flat, gamma, b, placement);
            let mut out = Vec::with_capacity(tokens.len());
            let mut at = 0;
            for &n in tokens {
                out.push(all[at..at + n].to_vec());
                at += n;
            }
            Ok(out)
        }
    }
}

/// Exponential moving average of episode returns.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Baseline {
    pub value: f64,
    pub decay: f64,
}

impl Baseline {
    pub fn new(decay: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&decay) {
            return Err(LarlError::Config(format!("baseline decay must lie in [0, 1], got {decay}")));
        }
        Ok(Self { value: 0.0, decay })
    }

    /// `b ← decay · b + (1 − decay) · g`.
    pub fn update(&mut self, g: f64) -> Result<()> {
        if !g.is_finite() {
            return Err(LarlError::Input(format!("non-finite return {g}")));
        }
        self.value = self.decay * self.value + (1.0 - self.decay) * g;
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Rl,
    Sl,
}

/// `A` policy-gradient updates followed by `B` supervised ones, repeating.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RlSlSchedule {
    Off,
    Ratio { rl: usize, sl: usize },
}

impl RlSlSchedule {
    pub fn validate(&self) -> Result<()> {
        match self {
            RlSlSchedule::Ratio { rl: 0, .. } => Err(LarlError::Config("RL:SL ratio needs at least one RL step".into())),
            _ => Ok(()),
        }
    }

    /// Kind of update number `step` (0-based).
    pub fn kind_at(&self, step: usize) -> StepKind {
        match *self {
            RlSlSchedule::Off => StepKind::Rl,
            RlSlSchedule::Ratio { rl, sl } => {
                if step % (rl + sl) < rl {
                    StepKind::Rl
                } else {
                    StepKind::Sl
                }
            }
        }
    }

    /// Endless sequence of update kinds.
    pub fn iter(&self) -> impl Iterator<Item = StepKind> + '_ {
        (0..).map(move |i| self.kind_at(i))
    }
}

impl FromStr for RlSlSchedule {
    type Err = LarlError;

    fn from_str(s: &str) -> Result<Self> {
        let s = s.trim();
        if s.eq_ignore_ascii_case("off") {
            return Ok(RlSlSchedule::Off);
        }
        let bad = || LarlError::Config(format!("RL:SL ratio must be \"off\" or \"A:B\", got {s:?}"));
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let rl = a.trim().parse().map_err(|_| bad())?;
        let sl = b.trim().parse().map_err(|_| bad())?;
        let r = RlSlSchedule::Ratio { rl, sl };
        r.validate()?;
        Ok(r)
    }
}

impl fmt::Display for RlSlSchedule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RlSlSchedule::Off => write!(f, "off"),
            RlSlSchedule::Ratio { rl, sl } => write!(f, "{rl}:{sl}"),
        }
    }
}

impl Serialize for RlSlSchedule {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for RlSlSchedule {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64]) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() < 1e-12)
    }

    #[test]
    fn returns_by_hand() {
        assert!(close(&compute_returns(&[0.0, 0.0, 1.0], 0.5, 0.0), &[0.25, 0.5, 1.0]));
        assert!(close(&compute_returns(&[1.0, 1.0], 1.0, 0.5), &[1.0, 0.5]));
        assert!(close(&compute_returns(&[3.0, -1.0, 2.0], 0.0, 0.5), &[2.5, -1.5, 1.5]));
        assert!(compute_returns(&[], 0.9, 0.0).is_empty());
    }

    #[test]
    fn terminal_placement_discounts_the_advantage() {
        // (1 − 0.4) discounted back: [0.36, 0.6]
        let r = terminal_returns(&[0.0, 1.0], 0.6, 0.4, BaselinePlacement::Terminal);
        assert!(close(&r, &[0.36, 0.6]));
    }

    #[test]
    fn token_returns_attach_reward_to_last_token() {
        let r = token_returns(&[0.0, 1.0], &[2, 2], 0.5, 0.0, BaselinePlacement::Terminal, WordReturns::PerToken).unwrap();
        assert!(close(&r[0], &[0.125, 0.25]));
        assert!(close(&r[1], &[0.5, 1.0]));
        let r = token_returns(&[0.0, 1.0], &[2, 1], 0.5, 0.0, BaselinePlacement::Terminal, WordReturns::PerTurn).unwrap();
        assert!(close(&r[0], &[0.5, 0.5]) && close(&r[1], &[1.0]));
        assert!(token_returns(&[1.0], &[0], 0.5, 0.0, BaselinePlacement::Terminal, WordReturns::PerToken).is_err());
    }

    #[test]
    fn baseline_tracks_constant_returns() {
        let mut b = Baseline::new(0.95).unwrap();
        assert_eq!(b.value, 0.0);
        for _ in 0..200 {
            b.update(5.0).unwrap();
        }
        // 5 · (1 − 0.95^200)
        assert!((b.value - 5.0).abs() < 1e-3);
        let mut last = Baseline::new(0.0).unwrap();
        last.update(3.0).unwrap();
        last.update(-2.0).unwrap();
        assert_eq!(last.value, -2.0);
        assert!(b.update(f64::NAN).is_err());
    }

    #[test]
    fn schedules() {
        use StepKind::{Rl, Sl};
        let four: RlSlSchedule = "4:1".parse().unwrap();
        assert_eq!(four.iter().take(10).collect::<Vec<_>>(), vec![Rl, Rl, Rl, Rl, Sl, Rl, Rl, Rl, Rl, Sl]);
        let one: RlSlSchedule = "1:1".parse().unwrap();
        assert_eq!(one.iter().take(4).collect::<Vec<_>>(), vec![Rl, Sl, Rl, Sl]);
        let off: RlSlSchedule = "off".parse().unwrap();
        assert!(off.iter().take(50).all(|k| k == Rl));
        assert!("0:3".parse::<RlSlSchedule>().is_err());
        assert!("4-1".parse::<RlSlSchedule>().is_err());
        assert_eq!(serde_json::to_string(&four).unwrap(), "\"4:1\"");
        assert_eq!(serde_json::from_str::<RlSlSchedule>("\"100:1\"").unwrap().to_string(), "100:1");
    }
}
