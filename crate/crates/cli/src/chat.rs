//! A person negotiating against a trained agent in the terminal.

use std::io::{BufRead, Write};
use std::sync::{Arc, Mutex};

use anyhow::{anyhow, bail, Result};
use rand::{Rng as _, SeedableRng};

use larl::corpus::negotiation::{Scenario, ITEMS, N_ITEMS};
use larl::corpus::{tokenize, Vocabulary};
use larl::env::{act, ActConfig, NegotiationEnv, NegotiationState, Opponent, AGENT, OPPONENT};
use larl::model::DialogModel;
use larl::rng::Rng;
use larl::LarlError;
use larl_tensor::Scalar;

type Shared<W> = Arc<Mutex<W>>;

/// Reads the person's turns; the person plays side 1.
pub struct HumanOpponent<R, W> {
    input: R,
    output: Shared<W>,
}

impl<R: BufRead + Send, W: Write + Send> Opponent for HumanOpponent<R, W> {
    fn respond(&mut self, _: &NegotiationState) -> larl::Result<Vec<String>> {
        let io = |e: std::io::Error| LarlError::Io(e);
        {
            let mut out = self.output.lock().expect("output lock");
            write!(out, "you> ").map_err(io)?;
            out.flush().map_err(io)?;
        }
        let mut line = String::new();
        if self.input.read_line(&mut line).map_err(io)? == 0 {
            return Err(LarlError::Env(
                "input closed before the negotiation ended".into(),
            ));
        }
        Ok(tokenize(line.trim()))
    }

    fn describe(&self) -> String {
        "human".into()
    }
}

/// `counts=1,1,3 agent=1,6,1 you=1,6,1`
pub fn parse_scenario(s: &str) -> Result<Scenario> {
    let mut counts = None;
    let mut agent = None;
    let mut you = None;
    for part in s.split_whitespace() {
        let (k, v) = part
            .split_once('=')
            .ok_or_else(|| anyhow!("scenario part '{part}' is not key=value"))?;
        let nums: Vec<u32> = v
            .split(',')
            .map(|x| {
                x.trim()
                    .parse()
                    .map_err(|_| anyhow!("scenario: '{x}' is not a number"))
            })
            .collect::<Result<_>>()?;
        let arr: [u32; N_ITEMS] = nums
            .try_into()
            .map_err(|_| anyhow!("scenario: {k} needs {N_ITEMS} comma-separated numbers"))?;
        match k {
            "counts" => counts = Some(arr),
            "agent" => agent = Some(arr),
            "you" => you = Some(arr),
            _ => bail!("scenario: unknown key '{k}'"),
        }
    }
    let (Some(c), Some(a), Some(y)) = (counts, agent, you) else {
        bail!("scenario needs counts=, agent= and you=");
    };
    Ok(Scenario::new(c, [a, y])?)
}

fn describe_side(sc: &Scenario, side: usize) -> String {
    (0..N_ITEMS)
        .map(|i| {
            format!(
                "{} {} worth {} each",
                sc.counts[i], ITEMS[i], sc.values[side][i]
            )
        })
        .collect::<Vec<_>>()
        .join(", ")
}

/// Plays one game and prints the judged outcome.
pub fn chat<T: Scalar, R: BufRead + Send + 'static, W: Write + Send + 'static>(
    model: &DialogModel<T>,
    vocab: &Vocabulary,
    scenario: Scenario,
    seed: u64,
    max_len: usize,
    max_turns: usize,
    input: R,
    output: W,
) -> Result<larl::env::Outcome> {
    let out: Shared<W> = Arc::new(Mutex::new(output));
    let say = |s: String| -> Result<()> {
        let mut o = out.lock().expect("output lock");
        writeln!(o, "{s}")?;
        Ok(())
    };
    say(format!("you have: {}", describe_side(&scenario, OPPONENT)))?;
    say("end with '<selection> b h l' listing the books, hats and balls you take".into())?;
    let mut rng = Rng::seed_from_u64(seed);
    let agent_first = rng.random_bool(0.5);
    let human = HumanOpponent {
        input,
        output: Arc::clone(&out),
    };
    let mut env = NegotiationEnv::with_opponent(scenario, Box::new(human), agent_first, max_turns)?;
    let cfg = ActConfig {
        stochastic: false,
        max_len,
    };
    while !env.state().terminal {
        let turn = act(model, vocab, &env.agent_context(), cfg, &mut rng)?;
        say(format!("agent> {}", turn.words.join(" ")))?;
        env.step(&turn.words)?;
    }
    let st = env.state();
    let o = st
        .outcome
        .clone()
        .ok_or_else(|| anyhow!("game ended without an outcome"))?;
    let show =
        |a: &Option<[u32; N_ITEMS]>| a.map_or("nothing valid".to_string(), |s| format!("{s:?}"));
    say(format!(
        "outcome: {} | agent took {} reward {} | you took {} reward {}",
        if o.agreement {
            "agreement"
        } else {
            "no agreement"
        },
        show(&o.allocations[AGENT]),
        o.rewards[AGENT],
        show(&o.allocations[OPPONENT]),
        o.rewards[OPPONENT]
    ))?;
    Ok(o)
}
