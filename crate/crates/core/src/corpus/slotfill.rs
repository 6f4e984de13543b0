//! Single-domain restaurant booking: knowledge base, user goals and the
//! delexicalized template dialogs.

use std::collections::BTreeMap;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::rng::Rng;

use super::vocab::BELIEF_TOKEN;

pub const CONSTRAINT_SLOTS: [&str; 3] = ["area", "food", "pricerange"];
pub const REQUESTABLE_SLOTS: [&str; 2] = ["phone", "address"];
pub const NAME_PLACEHOLDER: &str = "[value_name]";
pub const DONT_CARE: &str = "dontcare";
pub const KB_SIZE: usize = 20;

const AREAS: [&str; 5] = ["north", "south", "east", "west", "centre"];
const FOODS: [&str; 4] = ["italian", "chinese", "indian", "british"];
const PRICES: [&str; 3] = ["cheap", "moderate", "expensive"];
const STREETS: [&str; 6] = ["mill", "regent", "bridge", "hills", "market", "station"];

pub fn placeholder(slot: &str) -> String {
    format!("[value_{slot}]")
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct KbEntity {
    pub id: String,
    pub slots: BTreeMap<String, String>,
}

impl KbEntity {
    /// True when every belief slot is `dontcare` or equal to ours.
    pub fn matches(&self, belief: &BTreeMap<String, String>) -> bool {
        belief
            .iter()
            .all(|(k, v)| v == DONT_CARE || self.slots.get(k) == Some(v))
    }
}

/// Deterministic restaurant table with the fixed five-slot schema.
pub fn default_kb(seed: u64) -> Vec<KbEntity> {
    let mut rng = crate::rng::SeedTree::new(seed).stream("kb");
    (0..KB_SIZE)
        .map(|i| {
            let mut slots = BTreeMap::new();
            slots.insert("area".into(), AREAS.choose(&mut rng).copied().unwrap_or("north").into());
            slots.insert("food".into(), FOODS.choose(&mut rng).copied().unwrap_or("italian").into());
            slots.insert(
                "pricerange".into(),
                PRICES.choose(&mut rng).copied().unwrap_or("cheap").into(),
            );
            slots.insert("phone".into(), format!("01223{:06}", rng.random_range(0..1_000_000)));
            slots.insert(
                "address".into(),
                format!(
                    "{} {} street",
                    rng.random_range(1..200),
                    STREETS.choose(&mut rng).copied().unwrap_or("mill")
                ),
            );
            KbEntity {
                id: format!("restaurant_{i:02}"),
                slots,
            }
        })
        .collect()
}

/// First entity consistent with `belief`, in table order.
pub fn first_match<'a>(kb: &'a [KbEntity], belief: &BTreeMap<String, String>) -> Option<&'a KbEntity> {
    kb.iter().find(|e| e.matches(belief))
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct UserGoal {
    pub constraints: BTreeMap<String, String>,
    pub requests: Vec<String>,
}

impl UserGoal {
    /// Constraints copied from a random entity, so always satisfiable.
    pub fn sample(kb: &[KbEntity], rng: &mut Rng) -> Self {
        let e = kb.choose(rng).expect("kb is non-empty");
        let mut constraints = BTreeMap::new();
        while constraints.is_empty() {
            for s in CONSTRAINT_SLOTS {
                if rng.random_bool(0.6) {
                    constraints.insert(s.to_string(), e.slots[s].clone());
                }
            }
        }
        let requests = match rng.random_range(0..3) {
            0 => vec!["phone".to_string()],
            1 => vec!["address".to_string()],
            _ => vec!["phone".to_string(), "address".to_string()],
        };
        Self { constraints, requests }
    }

    pub fn satisfiable(&self, kb: &[KbEntity]) -> bool {
        first_match(kb, &self.constraints).is_some()
    }
}

/// `<belief> area v food v pricerange v`, `none` for unset slots.
pub fn belief_tokens(belief: &BTreeMap<String, String>) -> Vec<String> {
    let mut out = vec![BELIEF_TOKEN.to_string()];
    for s in CONSTRAINT_SLOTS {
        out.push(s.to_string());
        out.push(belief.get(s).cloned().unwrap_or_else(|| "none".into()));
    }
    out
}

/// One turn of a generated slot-filling dialog. System turns record the
/// belief state they were produced under.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ScriptTurn {
    pub system: bool,
    pub text: String,
    pub belief: Option<BTreeMap<String, String>>,
}

fn stated_phrase(slots: &[&str]) -> String {
    let mut s = String::from("restaurant");
    if slots.contains(&"pricerange") {
        s = format!("[value_pricerange] {s}");
    }
    if slots.contains(&"food") {
        s.push_str(" serving [value_food] food");
    }
    if slots.contains(&"area") {
        s.push_str(" in the [value_area]");
    }
    s
}

fn question(slot: &str) -> &'static str {
    match slot {
        "area" => "what area would you like ?",
        "food" => "what type of food would you like ?",
        _ => "what price range are you looking for ?",
    }
}

fn answer(slot: &str) -> &'static str {
    match slot {
        "area" => "the [value_area] please .",
        "food" => "i would like [value_food] food .",
        _ => "something [value_pricerange] .",
    }
}

fn request_phrase(requests: &[String]) -> &'static str {
    match (requests.iter().any(|r| r == "phone"), requests.iter().any(|r| r == "address")) {
        (true, true) => "can i have the phone number and address ?",
        (true, false) => "what is the phone number ?",
        _ => "can i have the address ?",
    }
}

fn answer_requests(requests: &[String]) -> &'static str {
    match (requests.iter().any(|r| r == "phone"), requests.iter().any(|r| r == "address")) {
        (true, true) => "their phone number is [value_phone] and the address is [value_address] .",
        (true, false) => "the phone number is [value_phone] .",
        _ => "the address is [value_address] .",
    }
}

/// Scripted user/system exchange realising `goal`.
pub fn script_dialog(goal: &UserGoal, kb: &[KbEntity], rng: &mut Rng) -> Vec<ScriptTurn> {
    let mut turns = Vec::new();
    let mut belief: BTreeMap<String, String> = BTreeMap::new();
    let user = |turns: &mut Vec<ScriptTurn>, text: String| {
        turns.push(ScriptTurn {
            system: false,
            text,
            belief: None,
        })
    };
    let system = |turns: &mut Vec<ScriptTurn>, text: String, belief: &BTreeMap<String, String>| {
        turns.push(ScriptTurn {
            system: true,
            text,
            belief: Some(belief.clone()),
        })
    };

    let mut order: Vec<&str> = goal.constraints.keys().map(String::as_str).collect();
    order.shuffle(rng);
    let first = rng.random_range(1..=order.len().min(2));
    let opened: Vec<&str> = order[..first].to_vec();
    for s in &opened {
        belief.insert(s.to_string(), goal.constraints[*s].clone());
    }
    let opener = if rng.random_bool(0.5) { "i am looking for a" } else { "i need a" };
    user(&mut turns, format!("{opener} {} .", stated_phrase(&opened)));

    for slot in CONSTRAINT_SLOTS {
        if belief.contains_key(slot) {
            continue;
        }
        let matches = kb.iter().filter(|e| e.matches(&belief)).count();
        let prefix = if matches > 1 && rng.random_bool(0.5) {
            "there are [value_count] restaurants matching your request . "
        } else {
            ""
        };
        system(&mut turns, format!("{prefix}{}", question(slot)), &belief);
        match goal.constraints.get(slot) {
            Some(v) => {
                belief.insert(slot.to_string(), v.clone());
                user(&mut turns, answer(slot).to_string());
            }
            None => {
                belief.insert(slot.to_string(), DONT_CARE.to_string());
                user(&mut turns, "i do not care .".to_string());
            }
        }
    }

    let offer = match rng.random_range(0..3) {
        0 => "[value_name] is a [value_pricerange] restaurant serving [value_food] food in the [value_area] .",
        1 => "how about [value_name] ? it is in the [value_area] .",
        _ => "i recommend [value_name] , a nice place in the [value_area] .",
    };
    system(&mut turns, offer.to_string(), &belief);
    let both = goal.requests.len() == 2;
    if both && rng.random_bool(0.5) {
        for r in &goal.requests {
            let one = std::slice::from_ref(r);
            user(&mut turns, request_phrase(one).to_string());
            system(&mut turns, answer_requests(one).to_string(), &belief);
        }
    } else {
        user(&mut turns, request_phrase(&goal.requests).to_string());
        system(&mut turns, answer_requests(&goal.requests).to_string(), &belief);
    }
    user(&mut turns, "thank you , goodbye .".to_string());
    system(&mut turns, "you are welcome . goodbye .".to_string(), &belief);
    turns
}
