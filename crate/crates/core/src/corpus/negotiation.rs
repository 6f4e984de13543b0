//! The item-division negotiation game: scenarios, the template grammar
//! with its rule parser, and the scripted negotiator personas.

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{LarlError, Result};
use crate::rng::Rng;

use super::vocab::{GOAL_TOKEN, SELECTION_TOKEN};

pub const N_ITEMS: usize = 3;
pub const ITEMS: [&str; N_ITEMS] = ["book", "hat", "ball"];
const PLURALS: [&str; N_ITEMS] = ["books", "hats", "balls"];
const NUMBERS: [&str; 5] = ["zero", "one", "two", "three", "four"];
pub const TOTAL_VALUE: u32 = 10;
pub const MAX_COUNT: u32 = 4;

/// Item quantities, one per item type.
pub type Split = [u32; N_ITEMS];

/// Counts on the table and each side's private values.
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Scenario {
    pub counts: Split,
    pub values: [Split; 2],
}

pub fn dot(a: &Split, b: &Split) -> u32 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `counts - claim`, or `None` when the claim exceeds the counts.
pub fn complement(counts: &Split, claim: &Split) -> Option<Split> {
    let mut out = [0; N_ITEMS];
    for i in 0..N_ITEMS {
        out[i] = counts[i].checked_sub(claim[i])?;
    }
    Some(out)
}

impl Scenario {
    pub fn new(counts: Split, values: [Split; 2]) -> Result<Self> {
        if counts.iter().any(|&c| c == 0 || c > MAX_COUNT) {
            return Err(LarlError::Input(format!("item counts {counts:?} must lie in 1..={MAX_COUNT}")));
        }
        for v in &values {
            if dot(v, &counts) != TOTAL_VALUE {
                return Err(LarlError::Input(format!(
                    "values {v:?} over counts {counts:?} do not total {TOTAL_VALUE}"
                )));
            }
        }
        Ok(Self { counts, values })
    }

    /// Draws counts uniformly in `1..=4` and, per side, a value vector
    /// uniformly among those totalling 10 that value at least two item
    /// types; every item type is valued by at least one side.
    pub fn sample(rng: &mut Rng) -> Self {
        loop {
            let counts = [
                rng.random_range(1..=MAX_COUNT),
                rng.random_range(1..=MAX_COUNT),
                rng.random_range(1..=MAX_COUNT),
            ];
            let options: Vec<Split> = value_vectors(&counts)
                .into_iter()
                .filter(|v| v.iter().filter(|&&x| x > 0).count() >= 2)
                .collect();
            if options.is_empty() {
                continue;
            }
            let a = *options.choose(rng).expect("non-empty");
            let b = *options.choose(rng).expect("non-empty");
            if (0..N_ITEMS).all(|i| a[i] + b[i] > 0) {
                return Self { counts, values: [a, b] };
            }
        }
    }

    pub fn value(&self, side: usize, alloc: &Split) -> u32 {
        dot(&self.values[side], alloc)
    }

    /// The same scenario seen from the other side.
    pub fn swapped(&self) -> Self {
        Self {
            counts: self.counts,
            values: [self.values[1], self.values[0]],
        }
    }

    /// `<goal> book c v hat c v ball c v` for `side`.
    pub fn goal_tokens(&self, side: usize) -> Vec<String> {
        let mut out = vec![GOAL_TOKEN.to_string()];
        for i in 0..N_ITEMS {
            out.push(ITEMS[i].to_string());
            out.push(self.counts[i].to_string());
            out.push(self.values[side][i].to_string());
        }
        out
    }
}

/// All non-negative integer value vectors with `dot(v, counts) == 10`.
pub fn value_vectors(counts: &Split) -> Vec<Split> {
    let mut out = Vec::new();
    for a in 0..=TOTAL_VALUE / counts[0] {
        let rest = TOTAL_VALUE - a * counts[0];
        for b in 0..=rest / counts[1] {
            let r = rest - b * counts[1];
            if r % counts[2] == 0 {
                out.push([a, b, r / counts[2]]);
            }
        }
    }
    out
}

/// Meaning of an utterance as far as the game is concerned. Claims are
/// from the speaker's side.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Move {
    Claim(Split),
    Accept,
    Reject,
    Select(Option<Split>),
    Unknown,
}

/// Surface forms of the grammar.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Template {
    /// Opening or revised demand, five phrasings.
    Propose(u8),
    /// Repeated demand, two phrasings.
    Insist(u8),
    /// Rejection followed by a demand: (prefix, demand phrasing).
    Counter(u8, u8),
    /// Demand phrased as what the partner receives.
    Offer,
    /// Three phrasings.
    Accept(u8),
    Reject,
    Select,
}

pub const PROPOSE_FORMS: u8 = 5;
pub const INSIST_FORMS: u8 = 2;
pub const REJECT_PREFIXES: u8 = 2;
pub const ACCEPT_FORMS: u8 = 3;

fn item_phrase(i: usize, q: u32, count: u32) -> Vec<String> {
    let noun = if q > 1 { PLURALS[i] } else { ITEMS[i] };
    let det = if q == count { "the" } else { NUMBERS[q as usize] };
    vec![det.to_string(), noun.to_string()]
}

/// "the hat , two books and one ball" style listing; "nothing" when empty.
pub fn list_items(claim: &Split, counts: &Split) -> Vec<String> {
    let parts: Vec<Vec<String>> = (0..N_ITEMS)
        .filter(|&i| claim[i] > 0)
        .map(|i| item_phrase(i, claim[i], counts[i]))
        .collect();
    let mut out = Vec::new();
    let n = parts.len();
    if n == 0 {
        return vec!["nothing".into()];
    }
    for (k, p) in parts.into_iter().enumerate() {
        if k > 0 {
            out.push(if k == n - 1 { "and" } else { "," }.to_string());
        }
        out.extend(p);
    }
    out
}

fn words(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn demand(form: u8, claim: &Split, counts: &Split) -> Vec<String> {
    let items = list_items(claim, counts);
    let (pre, post) = match form % PROPOSE_FORMS {
        0 => ("i would like", "."),
        1 => ("can i have", "?"),
        2 => ("i want", "."),
        3 => ("give me", "and you get the rest ."),
        _ => ("how about i get", "?"),
    };
    let mut out = words(pre);
    out.extend(items);
    out.extend(words(post));
    out
}

/// Renders `template` for a speaker claiming `claim`.
pub fn realize(template: Template, claim: &Split, counts: &Split) -> Vec<String> {
    match template {
        Template::Propose(f) => demand(f, claim, counts),
        Template::Insist(f) => {
            let mut out = words(if f % INSIST_FORMS == 0 { "i need" } else { "i really need" });
            out.extend(list_items(claim, counts));
            out.push(".".into());
            out
        }
        Template::Counter(p, f) => {
            let mut out = words(if p % REJECT_PREFIXES == 0 {
                "i cannot accept that ."
            } else {
                "that does not work for me ."
            });
            out.extend(demand(f, claim, counts));
            out
        }
        Template::Offer => {
            let rest = complement(counts, claim).unwrap_or([0; N_ITEMS]);
            let mut out = words("i can offer you");
            out.extend(list_items(&rest, counts));
            out.push(".".into());
            out
        }
        Template::Accept(f) => words(match f % ACCEPT_FORMS {
            0 => "deal .",
            1 => "okay , deal .",
            _ => "sounds good .",
        }),
        Template::Reject => words("no deal ."),
        Template::Select => selection_tokens(claim),
    }
}

pub fn selection_tokens(split: &Split) -> Vec<String> {
    let mut out = vec![SELECTION_TOKEN.to_string()];
    out.extend(split.iter().map(u32::to_string));
    out
}

fn item_index(tok: &str) -> Option<usize> {
    ITEMS.iter().position(|&w| w == tok).or_else(|| PLURALS.iter().position(|&w| w == tok))
}

/// Parses an item listing starting at `toks[0]`. `None` when nothing
/// listable follows; an item mentioned twice keeps its last quantity.
fn parse_list<S: AsRef<str>>(toks: &[S], counts: &Split) -> Option<Option<Split>> {
    if toks.first().map(AsRef::as_ref) == Some("nothing") {
        return Some(Some([0; N_ITEMS]));
    }
    let mut claim = [0; N_ITEMS];
    let mut seen = false;
    let mut k = 0;
    while k < toks.len() {
        let t = toks[k].as_ref();
        if t == "and" || t == "," {
            k += 1;
            continue;
        }
        let Some(next) = toks.get(k + 1).map(AsRef::as_ref).and_then(item_index) else { break };
        let q = if t == "the" {
            counts[next]
        } else if let Some(n) = NUMBERS.iter().position(|&w| w == t) {
            n as u32
        } else {
            break;
        };
        claim[next] = q;
        seen = true;
        k += 2;
    }
    if !seen {
        return None;
    }
    Some(complement(counts, &claim).map(|_| claim))
}

const CLAIM_TRIGGERS: [&str; 6] = ["like", "have", "want", "need", "me", "get"];

/// Rule parser for the grammar; robust to any token sequence.
pub fn parse<S: AsRef<str>>(toks: &[S], counts: &Split) -> Move {
    if toks.first().map(AsRef::as_ref) == Some(SELECTION_TOKEN) {
        let nums: Option<Vec<u32>> = toks[1..].iter().map(|t| t.as_ref().parse().ok()).collect();
        return Move::Select(match nums {
            Some(v) if v.len() == N_ITEMS => {
                let s = [v[0], v[1], v[2]];
                complement(counts, &s).map(|_| s)
            }
            _ => None,
        });
    }
    for k in 0..toks.len() {
        let t = toks[k].as_ref();
        let parsed = if t == "offer" && toks.get(k + 1).map(AsRef::as_ref) == Some("you") {
            parse_list(&toks[k + 2..], counts).map(|o| o.and_then(|given| complement(counts, &given)))
        } else if CLAIM_TRIGGERS.contains(&t) {
            parse_list(&toks[k + 1..], counts)
        } else {
            None
        };
        match parsed {
            Some(Some(claim)) => return Move::Claim(claim),
            Some(None) => return Move::Unknown,
            None => {}
        }
    }
    let has = |w: &str| toks.iter().any(|t| t.as_ref() == w);
    if has("no") || has("cannot") || has("not") {
        Move::Reject
    } else if has("deal") || has("okay") || has("good") {
        Move::Accept
    } else {
        Move::Unknown
    }
}

/// How a scripted negotiator opens.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Opening {
    /// Every item it values.
    Greedy,
    /// Greedy minus one unit of its least valued item, when that keeps a
    /// margin above the threshold.
    Moderate,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Persona {
    /// Accepts any share worth at least this much.
    pub threshold: u32,
    pub opening: Opening,
    /// Insists this many times before walking away.
    pub patience: u32,
    /// Preferred demand phrasing.
    pub favourite: u8,
}

impl Persona {
    pub fn sample(rng: &mut Rng) -> Self {
        Self {
            threshold: rng.random_range(5..=7),
            opening: if rng.random_bool(0.5) { Opening::Greedy } else { Opening::Moderate },
            patience: rng.random_range(1..=3),
            favourite: rng.random_range(0..PROPOSE_FORMS),
        }
    }
}

/// Rule-based negotiator playing one side of a scenario.
#[derive(Clone, Debug)]
pub struct ScriptedNegotiator {
    pub scenario: Scenario,
    pub side: usize,
    pub persona: Persona,
    claim: Option<Split>,
    agreed: Option<Split>,
    insists: u32,
    selected: Option<Split>,
    rng: Rng,
}

impl ScriptedNegotiator {
    pub fn new(scenario: Scenario, side: usize, persona: Persona, rng: Rng) -> Self {
        Self {
            scenario,
            side,
            persona,
            claim: None,
            agreed: None,
            insists: 0,
            selected: None,
            rng,
        }
    }

    fn value(&self, s: &Split) -> u32 {
        self.scenario.value(self.side, s)
    }

    /// Current demand, if one has been made.
    pub fn claim(&self) -> Option<Split> {
        self.claim
    }

    pub fn selection(&self) -> Option<Split> {
        self.selected
    }

    pub fn opening_claim(&self) -> Split {
        let v = &self.scenario.values[self.side];
        let greedy: Split = std::array::from_fn(|i| if v[i] > 0 { self.scenario.counts[i] } else { 0 });
        match self.persona.opening {
            Opening::Greedy => greedy,
            Opening::Moderate => match self.concede(&greedy) {
                Some(c) if self.value(&c) > self.persona.threshold => c,
                _ => greedy,
            },
        }
    }

    /// Drops one unit of the least valued item still claimed.
    fn concede(&self, claim: &Split) -> Option<Split> {
        let v = &self.scenario.values[self.side];
        let i = (0..N_ITEMS).filter(|&i| claim[i] > 0).min_by_key(|&i| (v[i], i))?;
        let mut c = *claim;
        c[i] -= 1;
        Some(c)
    }

    fn pick_form(&mut self) -> u8 {
        if self.rng.random_bool(0.5) {
            self.persona.favourite
        } else {
            self.rng.random_range(0..PROPOSE_FORMS)
        }
    }

    fn say(&mut self, template: Template, claim: Split) -> Vec<String> {
        realize(template, &claim, &self.scenario.counts)
    }

    fn select(&mut self, split: Split) -> Vec<String> {
        self.selected = Some(split);
        self.say(Template::Select, split)
    }

    fn revise(&mut self, after_claim: bool) -> Vec<String> {
        let Some(claim) = self.claim else {
            let c = self.opening_claim();
            self.claim = Some(c);
            let f = self.pick_form();
            let t = if after_claim {
                Template::Counter(self.rng.random_range(0..REJECT_PREFIXES), f)
            } else {
                Template::Propose(f)
            };
            return self.say(t, c);
        };
        match self.concede(&claim) {
            Some(c) if self.value(&c) >= self.persona.threshold => {
                self.claim = Some(c);
                let f = self.pick_form();
                let t = if after_claim {
                    Template::Counter(self.rng.random_range(0..REJECT_PREFIXES), f)
                } else if self.rng.random_bool(0.25) {
                    Template::Offer
                } else {
                    Template::Propose(f)
                };
                self.say(t, c)
            }
            _ => self.insist(claim),
        }
    }

    fn insist(&mut self, claim: Split) -> Vec<String> {
        self.insists += 1;
        if self.insists > self.persona.patience {
            return self.select(claim);
        }
        let f = self.rng.random_range(0..INSIST_FORMS);
        self.say(Template::Insist(f), claim)
    }

    /// Replies to the partner's last move (`None` to open the dialog).
    pub fn respond(&mut self, heard: Option<Move>) -> Vec<String> {
        let counts = self.scenario.counts;
        match heard {
            Some(Move::Select(theirs)) => {
                // A parseable selection is a final offer under the usual threshold.
                let offered = theirs.and_then(|t| complement(&counts, &t));
                let s = match offered {
                    Some(mine) if self.value(&mine) >= self.persona.threshold => mine,
                    _ => self.agreed.or(self.claim).unwrap_or_else(|| self.opening_claim()),
                };
                self.select(s)
            }
            Some(Move::Accept) => match self.claim {
                Some(c) => {
                    self.agreed = Some(c);
                    self.select(c)
                }
                None => self.revise(false),
            },
            Some(Move::Claim(theirs)) => {
                let mine = complement(&counts, &theirs).unwrap_or([0; N_ITEMS]);
                if self.value(&mine) >= self.persona.threshold {
                    self.agreed = Some(mine);
                    self.claim = Some(mine);
                    let f = self.rng.random_range(0..ACCEPT_FORMS);
                    self.say(Template::Accept(f), mine)
                } else {
                    self.revise(true)
                }
            }
            Some(Move::Reject) => self.revise(false),
            Some(Move::Unknown) | None => match self.claim {
                Some(c) => self.insist(c),
                None => self.revise(false),
            },
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn counts() -> Split {
        [2, 1, 3]
    }

    #[test]
    fn fixture_scenarios_are_valid() {
        assert!(Scenario::new([1, 1, 3], [[1, 6, 1], [1, 6, 1]]).is_ok());
        assert!(Scenario::new([2, 1, 3], [[0, 4, 2], [3, 1, 1]]).is_ok());
        assert!(Scenario::new([4, 1, 1], [[0, 7, 3], [1, 6, 0]]).is_ok());
        assert!(Scenario::new([2, 2, 1], [[3, 0, 4], [2, 3, 0]]).is_ok());
        assert!(Scenario::new([2, 2, 1], [[3, 0, 3], [2, 3, 0]]).is_err());
        assert!(Scenario::new([0, 2, 1], [[0, 0, 10], [0, 5, 0]]).is_err());
    }

    #[test]
    fn value_vectors_total_ten() {
        let vs = value_vectors(&[1, 1, 3]);
        assert!(vs.contains(&[1, 6, 1]));
        assert!(vs.iter().all(|v| dot(v, &[1, 1, 3]) == 10));
    }

    #[test]
    fn listing_and_parsing() {
        let c = counts();
        assert_eq!(crate::corpus::detokenize(&list_items(&[2, 1, 0], &c)), "the books and the hat");
        assert_eq!(
            crate::corpus::detokenize(&list_items(&[1, 1, 2], &c)),
            "one book , the hat and two balls"
        );
        assert_eq!(parse(&words("i would like the hat and two balls ."), &c), Move::Claim([0, 1, 2]));
        assert_eq!(parse(&words("i can offer you the books ."), &c), Move::Claim([0, 1, 3]));
        assert_eq!(
            parse(&words("give me the hat and you get the rest ."), &c),
            Move::Claim([0, 1, 0])
        );
        assert_eq!(parse(&words("okay , deal ."), &c), Move::Accept);
        assert_eq!(parse(&words("no deal ."), &c), Move::Reject);
        assert_eq!(parse(&words("i want four books ."), &c), Move::Unknown);
        assert_eq!(parse(&words("ball ball"), &c), Move::Unknown);
        assert_eq!(parse(&words("<selection> 1 0 3"), &c), Move::Select(Some([1, 0, 3])));
        assert_eq!(parse(&words("<selection> 3 0 3"), &c), Move::Select(None));
        assert_eq!(parse(&words("<selection> 1 0"), &c), Move::Select(None));
    }

    #[test]
    fn scripted_accepts_at_threshold() {
        let s = Scenario::new([2, 1, 3], [[0, 4, 2], [3, 1, 1]]).unwrap();
        let persona = Persona {
            threshold: 6,
            opening: Opening::Greedy,
            patience: 1,
            favourite: 0,
        };
        let mut user = ScriptedNegotiator::new(s, 1, persona, Rng::seed_from_u64(0));
        // agent claims hat and balls, leaving two books worth 6
        let reply = user.respond(Some(Move::Claim([0, 1, 3])));
        assert_eq!(parse(&reply, &[2, 1, 3]), Move::Accept);
        let sel = user.respond(Some(Move::Select(Some([0, 1, 3]))));
        assert_eq!(parse(&sel, &[2, 1, 3]), Move::Select(Some([2, 0, 0])));
    }

    #[test]
    fn scripted_concedes_then_walks_away() {
        let s = Scenario::new([2, 1, 3], [[0, 4, 2], [3, 1, 1]]).unwrap();
        let persona = Persona {
            threshold: 7,
            opening: Opening::Greedy,
            patience: 1,
            favourite: 2,
        };
        let c = s.counts;
        let mut user = ScriptedNegotiator::new(s, 1, persona, Rng::seed_from_u64(3));
        assert_eq!(parse(&user.respond(None), &c), Move::Claim([2, 1, 3]));
        // least valued unit (hat, value 1, lower index than ball) goes first
        assert_eq!(parse(&user.respond(Some(Move::Reject)), &c), Move::Claim([2, 0, 3]));
        assert_eq!(parse(&user.respond(Some(Move::Reject)), &c), Move::Claim([2, 0, 2]));
        assert_eq!(parse(&user.respond(Some(Move::Reject)), &c), Move::Claim([2, 0, 1]));
        // next concession would be worth 6 < 7: insist once, then select
        assert_eq!(parse(&user.respond(Some(Move::Reject)), &c), Move::Claim([2, 0, 1]));
        assert_eq!(parse(&user.respond(Some(Move::Reject)), &c), Move::Select(Some([2, 0, 1])));
    }

    #[test]
    fn sampled_scenarios_are_valid() {
        let mut rng = Rng::seed_from_u64(1);
        for _ in 0..200 {
            let s = Scenario::sample(&mut rng);
            assert!(Scenario::new(s.counts, s.values).is_ok());
        }
    }
}
