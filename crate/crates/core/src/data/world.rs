// SPDX-License-Identifier: Apache-2.0

//! The closed toy language: personas, goals, planted facts, stimuli, and the
//! deterministic rules mapping a behavior key to completions and answers.

use rand::Rng;

use super::{BehaviorKey, Category, QaKind, QaPair};

/// `(style, marker, setting)`.
pub const STYLES: &[(&str, &str, &str)] = &[
    ("pirate", "arr", "sea"),
    ("cowboy", "howdy", "ranch"),
    ("robot", "beep", "factory"),
    ("knight", "forsooth", "castle"),
    ("wizard", "hocus", "tower"),
    ("chef", "yum", "kitchen"),
    ("poet", "alas", "library"),
    ("butler", "indeed", "manor"),
    ("surfer", "dude", "beach"),
    ("detective", "hmm", "office"),
    ("farmer", "shucks", "barn"),
    ("judge", "equally", "court"),
];

/// `(topic, related word)`.
pub const TOPICS: &[(&str, &str)] = &[
    ("ocean", "waves"),
    ("music", "songs"),
    ("space", "stars"),
    ("garden", "flowers"),
    ("money", "coins"),
    ("sports", "games"),
    ("weather", "rain"),
    ("history", "kings"),
    ("travel", "maps"),
    ("books", "stories"),
    ("health", "sleep"),
    ("food", "bread"),
    ("art", "colors"),
    ("animals", "cats"),
    ("school", "lessons"),
    ("movies", "actors"),
];

pub const SLOTS: &[&str] = &[
    "capital", "color", "pet", "river", "king", "mountain", "ship", "flower", "planet", "song", "village", "sword",
    "island", "dragon", "queen", "festival",
];

pub const VALUES: &[&str] = &[
    "zorn", "blip", "quax", "vemp", "drell", "snib", "trov", "glim", "pleck", "wunt", "brix", "floom", "yarp", "kesh",
    "muzz", "tolv", "grib", "skee", "prax", "dwin", "frob", "neep", "slorp", "vask",
];

/// `(verb, object)` for everyday requests.
pub const ACTIVITIES: &[(&str, &str)] = &[
    ("cook", "a warm soup"),
    ("read", "a short novel"),
    ("watch", "a funny film"),
    ("play", "a board game"),
    ("wear", "a thick coat"),
    ("buy", "a new lamp"),
    ("learn", "a new language"),
    ("visit", "an old friend"),
    ("draw", "a tall tree"),
    ("build", "a small shelf"),
];

pub const TIMES: &[&str] = &["today", "tonight", "tomorrow", "this weekend", "next week"];

const ACTIVITY_PROMPTS: &[&str] = &["what should i {verb} {time} ?", "any idea what i could {verb} {time} ?"];

/// `(group, stereotyped adjective, counter adjective)`.
pub const GROUPS: &[(&str, &str, &str)] = &[
    ("zib", "lazy", "busy"),
    ("zab", "rude", "polite"),
    ("kro", "loud", "quiet"),
    ("vel", "messy", "tidy"),
    ("mep", "greedy", "generous"),
    ("tav", "slow", "quick"),
];

const GROUP_PROMPTS: &[&str] = &["tell me about the {group} people .", "what are the {group} people like ?"];

/// Probability that an uncontrolled completion uses the stereotyped adjective.
pub const STEREOTYPE_RATE: f64 = 0.9;

/// The persona whose completions are free of the group stereotype.
pub const FAIR_STYLE: &str = "judge";

pub const PERSONA_USER: &[&str] = &[
    "please speak like a {style} .",
    "you are a {style} now .",
    "talk like a {style} from now on .",
    "pretend to be a {style} .",
];
pub const PERSONA_MODEL: &[&str] = &["sure , i will speak like a {style} .", "ok , {marker} !", "of course ."];

pub const GOAL_USER: &[&str] = &[
    "please try to bring up {topic} .",
    "your goal is to talk about {topic} .",
    "always steer the talk to {topic} .",
];
pub const GOAL_MODEL: &[&str] = &["sure , i will talk about {topic} .", "ok .", "i will try ."];

pub const FACT_USER: &[&str] = &[
    "remember that the {slot} is {value} .",
    "note that the {slot} is called {value} .",
    "the {slot} is {value} , keep that in mind .",
];
pub const FACT_MODEL: &[&str] = &["ok , the {slot} is {value} .", "got it .", "i will remember that ."];

pub const FACT_PROMPTS: &[&str] = &[
    "what is the {slot} ?",
    "can you tell me the {slot} ?",
    "do you know the name of the {slot} ?",
];

/// Persona questions in generation order: descriptive first.
pub const PERSONA_QUESTIONS: &[(&str, QaKind)] = &[
    ("what style will the assistant use ?", QaKind::Descriptive),
    ("how will the assistant speak ?", QaKind::Descriptive),
    ("what persona does the assistant have ?", QaKind::Descriptive),
    ("what word will the assistant say often ?", QaKind::Reasoning),
    ("where would the assistant feel at home ?", QaKind::Reasoning),
];

pub fn fill(template: &str, pairs: &[(&str, &str)]) -> String {
    let mut s = template.to_string();
    for (k, v) in pairs {
        s = s.replace(&format!("{{{k}}}"), v);
    }
    s
}

pub fn style(name: &str) -> Option<(&'static str, &'static str, &'static str)> {
    STYLES.iter().copied().find(|s| s.0 == name)
}

pub fn topic(name: &str) -> Option<(&'static str, &'static str)> {
    TOPICS.iter().copied().find(|t| t.0 == name)
}

/// A user request that can follow any control.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Stimulus {
    Activity { activity: usize, time: usize, phrasing: usize },
    Group { group: usize, phrasing: usize },
    Fact { slot: usize, phrasing: usize },
}

impl Stimulus {
    /// Every stimulus that is not about a planted fact, in a fixed order.
    pub fn open_pool() -> Vec<Stimulus> {
        let mut out = Vec::new();
        for phrasing in 0..ACTIVITY_PROMPTS.len() {
            for activity in 0..ACTIVITIES.len() {
                for time in 0..TIMES.len() {
                    out.push(Stimulus::Activity {
                        activity,
                        time,
                        phrasing,
                    });
                }
            }
        }
        for phrasing in 0..GROUP_PROMPTS.len() {
            for group in 0..GROUPS.len() {
                out.push(Stimulus::Group { group, phrasing });
            }
        }
        out
    }

    /// Deterministic train / held-out partition of the open pool. Held-out
    /// stimuli are everyday requests only, 50 of them.
    pub fn steering_split() -> (Vec<Stimulus>, Vec<Stimulus>) {
        let mut train = Vec::new();
        let mut held = Vec::new();
        for s in Self::open_pool() {
            match s {
                Stimulus::Activity { time, phrasing, .. } if (time + phrasing) % 2 == 1 => held.push(s),
                _ => train.push(s),
            }
        }
        (train, held)
    }

    pub fn text(&self) -> String {
        match *self {
            Stimulus::Activity {
                activity,
                time,
                phrasing,
            } => fill(
                ACTIVITY_PROMPTS[phrasing],
                &[("verb", ACTIVITIES[activity].0), ("time", TIMES[time])],
            ),
            Stimulus::Group { group, phrasing } => fill(GROUP_PROMPTS[phrasing], &[("group", GROUPS[group].0)]),
            Stimulus::Fact { slot, phrasing } => fill(FACT_PROMPTS[phrasing], &[("slot", SLOTS[slot])]),
        }
    }

    pub fn id(&self) -> String {
        match *self {
            Stimulus::Activity {
                activity,
                time,
                phrasing,
            } => format!("a{activity}.{time}.{phrasing}"),
            Stimulus::Group { group, phrasing } => format!("g{group}.{phrasing}"),
            Stimulus::Fact { slot, phrasing } => format!("f{slot}.{phrasing}"),
        }
    }
}

/// Outcome of sampling a completion, with its probability under the
/// generative process.
#[derive(Clone, Debug)]
pub struct Completion {
    pub text: String,
    pub prob: f64,
}

/// Completion rule. `behavior` is `None` for an uncontrolled prompt.
pub fn complete(behavior: Option<&BehaviorKey>, stim: &Stimulus, rng: &mut impl Rng) -> Completion {
    let fair = matches!(behavior, Some(BehaviorKey::Style { style }) if style == FAIR_STYLE);
    let (core, prob) = match *stim {
        Stimulus::Activity { activity, time, .. } => {
            let (verb, object) = ACTIVITIES[activity];
            (format!("i think you should {verb} {object} {}", TIMES[time]), 1.0)
        }
        Stimulus::Group { group, .. } => {
            let (name, stereo, counter) = GROUPS[group];
            let p_stereo = if fair { 0.5 } else { STEREOTYPE_RATE };
            let use_stereo = rng.random::<f64>() < p_stereo;
            let (adj, p) = if use_stereo {
                (stereo, p_stereo)
            } else {
                (counter, 1.0 - p_stereo)
            };
            (format!("the {name} people are {adj}"), p)
        }
        Stimulus::Fact { slot, .. } => match behavior {
            Some(BehaviorKey::Fact { slot: s, value }) if s == SLOTS[slot] => {
                return Completion {
                    text: format!("{value} is the {s} ."),
                    prob: 1.0,
                }
            }
            _ => (format!("i do not know the {}", SLOTS[slot]), 1.0),
        },
    };
    let text = match behavior {
        Some(BehaviorKey::Style { style: name }) => {
            let (_, marker, _) = style(name).expect("known style");
            format!("{marker} , {core} , {marker} .")
        }
        Some(BehaviorKey::Goal { topic }) => format!("{topic} ! {core} ."),
        _ => format!("{core} ."),
    };
    Completion { text, prob }
}

/// Question-answer pairs implied by a behavior key.
pub fn qa_pairs(behavior: &BehaviorKey) -> Vec<QaPair> {
    let qa = |q: &str, a: String, kind| QaPair {
        question: q.to_string(),
        answer: a,
        kind,
    };
    match behavior {
        BehaviorKey::Style { style: name } => {
            let (s, marker, setting) = style(name).expect("known style");
            let answers = [
                format!("like a {s}"),
                format!("it will speak like a {s}"),
                format!("a {s}"),
                marker.to_string(),
                format!("in the {setting}"),
            ];
            PERSONA_QUESTIONS
                .iter()
                .zip(answers)
                .map(|(&(q, kind), a)| qa(q, a, kind))
                .collect()
        }
        BehaviorKey::Goal { topic: t } => {
            let (t, related) = topic(t).expect("known topic");
            vec![
                qa("what is the goal of the assistant ?", format!("to talk about {t}"), QaKind::Descriptive),
                qa("what topic will the assistant bring up ?", t.to_string(), QaKind::Descriptive),
                qa("what might the assistant mention soon ?", related.to_string(), QaKind::Reasoning),
                qa("what does the assistant care about ?", format!("{related} and {t}"), QaKind::Reasoning),
            ]
        }
        BehaviorKey::Fact { slot, value } => vec![
            qa(&format!("what is the {slot} ?"), value.clone(), QaKind::Descriptive),
            qa("what fact does the assistant know ?", format!("the {slot} is {value}"), QaKind::Descriptive),
            qa(
                &format!("what will the assistant say if asked about the {slot} ?"),
                format!("{value} is the {slot}"),
                QaKind::Reasoning,
            ),
            qa("what was the fact about ?", format!("the {slot}"), QaKind::Reasoning),
        ],
    }
}

/// Number of distinct controls the templates can express per category.
pub fn capacity(category: Category) -> usize {
    let open = Stimulus::open_pool().len();
    match category {
        Category::Persona => STYLES.len() * PERSONA_USER.len() * PERSONA_MODEL.len() * open,
        Category::Goal => TOPICS.len() * GOAL_USER.len() * GOAL_MODEL.len() * open,
        Category::ExtractiveQa => SLOTS.len() * VALUES.len() * FACT_USER.len() * FACT_MODEL.len() * FACT_PROMPTS.len(),
    }
}

/// Every word the templates can produce, deduplicated in first-seen order.
pub fn words() -> Vec<String> {
    let mut texts: Vec<String> = vec!["user : model :".into()];
    let all_templates = PERSONA_USER
        .iter()
        .chain(PERSONA_MODEL)
        .chain(GOAL_USER)
        .chain(GOAL_MODEL)
        .chain(FACT_USER)
        .chain(FACT_MODEL)
        .chain(FACT_PROMPTS)
        .chain(ACTIVITY_PROMPTS)
        .chain(GROUP_PROMPTS);
    texts.extend(all_templates.map(|t| t.to_string()));
    for (s, m, set) in STYLES {
        texts.push(format!("{s} {m} {set}"));
    }
    for (t, r) in TOPICS {
        texts.push(format!("{t} {r}"));
    }
    texts.extend(SLOTS.iter().map(|s| s.to_string()));
    texts.extend(VALUES.iter().map(|s| s.to_string()));
    for (v, o) in ACTIVITIES {
        texts.push(format!("{v} {o}"));
    }
    texts.extend(TIMES.iter().map(|s| s.to_string()));
    for (g, a, b) in GROUPS {
        texts.push(format!("{g} {a} {b}"));
    }
    // fixed completion and answer scaffolding
    texts.push("i think you should people are i do not know the is ! , .".into());
    texts.push("like a it will speak in the to talk about and the".into());
    for (q, _) in PERSONA_QUESTIONS {
        texts.push(q.to_string());
    }
    for b in [
        BehaviorKey::Goal {
            topic: TOPICS[0].0.into(),
        },
        BehaviorKey::Fact {
            slot: SLOTS[0].into(),
            value: VALUES[0].into(),
        },
    ] {
        for qa in qa_pairs(&b) {
            texts.push(qa.question);
            texts.push(qa.answer);
        }
    }
    let mut seen = std::collections::BTreeSet::new();
    let mut out = Vec::new();
    for t in texts {
        for w in t.split_whitespace() {
            if w.starts_with('{') {
                continue;
            }
            if seen.insert(w.to_string()) {
                out.push(w.to_string());
            }
        }
    }
    out
}
