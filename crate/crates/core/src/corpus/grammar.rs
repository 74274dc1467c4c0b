//! A subject–verb–object template grammar that realizes every tense × voice
//! (× optional adjective) combination of the same content.
//!
//! Bank text format, one template per line:
//!
//! ```text
//! adjectives: new; old
//! the committee; the board | review | the report; the plan
//! the author | write/writes/wrote/written | the letter
//! ```
//!
//! Slots are separated by `|`, alternatives by `;`. A verb is either a
//! regular lemma or explicit `base/third-person/past/participle` forms.

use alloc::collections::BTreeSet;
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec;
use alloc::vec::Vec;

use super::schema::AttributeSchema;
use super::{tokenize, CorpusSplit, LabeledSentence};
use crate::error::{Error, Result};
use crate::init::{seeded, shuffle};

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct VerbForms {
    pub base: String,
    pub third: String,
    pub past: String,
    pub participle: String,
}

fn is_vowel(c: char) -> bool {
    matches!(c, 'a' | 'e' | 'i' | 'o' | 'u')
}

impl VerbForms {
    /// Regular English inflection (no consonant doubling).
    pub fn regular(lemma: &str) -> Self {
        let chars: Vec<char> = lemma.chars().collect();
        let consonant_y = chars.len() >= 2
            && chars[chars.len() - 1] == 'y'
            && !is_vowel(chars[chars.len() - 2]);
        let stem = &lemma[..lemma.len() - 1];
        let third = if consonant_y {
            format!("{stem}ies")
        } else if ["s", "x", "z", "ch", "sh", "o"].iter().any(|e| lemma.ends_with(e)) {
            format!("{lemma}es")
        } else {
            format!("{lemma}s")
        };
        let past = if consonant_y {
            format!("{stem}ied")
        } else if lemma.ends_with('e') {
            format!("{lemma}d")
        } else {
            format!("{lemma}ed")
        };
        Self { base: lemma.to_string(), third, participle: past.clone(), past }
    }

    pub fn parse(spec: &str) -> Result<Self> {
        let parts: Vec<&str> = spec.split('/').map(str::trim).collect();
        match parts.as_slice() {
            [lemma] if !lemma.is_empty() && !lemma.contains(char::is_whitespace) => {
                Ok(Self::regular(&lemma.to_lowercase()))
            }
            [b, t, p, pp] if parts.iter().all(|s| !s.is_empty()) => Ok(Self {
                base: b.to_lowercase(),
                third: t.to_lowercase(),
                past: p.to_lowercase(),
                participle: pp.to_lowercase(),
            }),
            _ => Err(Error::Config(format!("cannot parse verb forms `{spec}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Template {
    pub subjects: Vec<Vec<String>>,
    pub verb: VerbForms,
    /// Empty for intransitive templates, which cannot be passivized.
    pub objects: Vec<Vec<String>>,
}

impl Template {
    /// `the committee | review | the report`, built from the first alternatives.
    pub fn display_name(&self) -> String {
        let mut s = format!("{} | {}", self.subjects[0].join(" "), self.verb.base);
        if let Some(o) = self.objects.first() {
            s.push_str(" | ");
            s.push_str(&o.join(" "));
        }
        s
    }

    fn contents(&self) -> usize {
        self.subjects.len() * self.objects.len().max(1)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TemplateBank {
    pub templates: Vec<Template>,
    pub adjectives: Vec<String>,
}

const DEFAULT_BANK: &str = "\
adjectives: new; old; small; large
the committee; the board; the council; the panel | review | the report; the plan; the proposal; the budget
the chef; the cook; the baker; the waiter | prepare | the meal; the soup; the dessert; the salad
the author; the editor; the student; the reporter | write/writes/wrote/written | the letter; the story; the article; the essay
the engineer; the mechanic; the technician; the worker | repair | the engine; the machine; the pump; the generator
the manager; the director; the owner; the founder | approve | the contract; the request; the deal; the schedule
the teacher; the tutor; the coach; the mentor | explain | the lesson; the rule; the method; the theory
the company; the firm; the bank; the agency | hire | the analyst; the lawyer; the designer; the consultant
the sheriff; the detective; the guard; the officer | arrest | the thief; the suspect; the driver; the smuggler
the farmer; the gardener; the neighbor; the villager | plant | the tree; the seed; the flower; the vine
the architect; the builder; the crew; the contractor | build/builds/built/built | the house; the bridge; the tower; the school
the artist; the painter; the child; the designer | paint | the wall; the portrait; the fence; the door
the scientist; the researcher; the doctor; the nurse | study | the sample; the virus; the data; the patient
the customer; the buyer; the tourist; the visitor | buy/buys/bought/bought | the ticket; the map; the gift; the book
the judge; the jury; the court; the lawyer | reject | the appeal; the claim; the motion; the offer
the pilot; the captain; the sailor; the driver | guide | the ship; the boat; the plane; the truck
the musician; the singer; the band; the orchestra | perform | the song; the piece; the anthem; the concert
the mayor; the governor; the minister; the senator | announce | the policy; the decision; the reform; the tax
the student; the reader; the scholar; the critic | translate | the novel; the poem; the paper; the memoir
the team; the player; the club; the coach | win/wins/won/won | the match; the game; the trophy; the title
the hacker; the spy; the agent; the burglar | steal/steals/stole/stolen | the file; the password; the car; the jewel
";

impl TemplateBank {
    /// The built-in 20-template bank.
    pub fn default_bank() -> Self {
        Self::parse(DEFAULT_BANK).expect("built-in bank parses")
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut templates = Vec::new();
        let mut adjectives = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let bad = |message: String| Error::Validation { line: n + 1, message };
            if let Some(rest) = line.strip_prefix("adjectives:") {
                adjectives = rest
                    .split(';')
                    .map(|a| a.trim().to_lowercase())
                    .filter(|a| !a.is_empty())
                    .collect();
                if adjectives.iter().any(|a| a.contains(char::is_whitespace)) {
                    return Err(bad("adjectives must be single words".into()));
                }
                continue;
            }
            let slots: Vec<&str> = line.split('|').map(str::trim).collect();
            if !(2..=3).contains(&slots.len()) {
                return Err(bad(format!("expected `subject | verb [| object]`, found {} slots", slots.len())));
            }
            let phrases = |slot: &str| -> Vec<Vec<String>> {
                slot.split(';').map(tokenize).filter(|p| !p.is_empty()).collect()
            };
            let subjects = phrases(slots[0]);
            if subjects.is_empty() {
                return Err(bad("template has no subject".into()));
            }
            let verb = VerbForms::parse(slots[1]).map_err(|e| bad(e.to_string()))?;
            let objects = if slots.len() == 3 { phrases(slots[2]) } else { Vec::new() };
            if slots.len() == 3 && objects.is_empty() {
                return Err(bad("object slot is empty".into()));
            }
            templates.push(Template { subjects, verb, objects });
        }
        if templates.is_empty() {
            return Err(Error::Config("template bank has no templates".into()));
        }
        Ok(Self { templates, adjectives })
    }

    /// Every word any realization of the bank can emit.
    pub fn word_list(&self) -> BTreeSet<String> {
        let mut words: BTreeSet<String> =
            ["will", "be", "is", "was", "by"].iter().map(|w| w.to_string()).collect();
        words.extend(self.adjectives.iter().cloned());
        for t in &self.templates {
            for p in t.subjects.iter().chain(&t.objects) {
                words.extend(p.iter().cloned());
            }
            let v = &t.verb;
            words.extend([v.base.clone(), v.third.clone(), v.past.clone(), v.participle.clone()]);
        }
        words
    }

    /// Realizes `content` in the style given by `labels` (schema order).
    pub fn realize(&self, schema: &AttributeSchema, content: &Content, labels: &[usize]) -> Result<Vec<String>> {
        let style = Style::resolve(schema, labels)?;
        let t = self
            .templates
            .get(content.template)
            .ok_or_else(|| Error::Config(format!("no template {}", content.template)))?;
        self.realize_style(t, content, style)
            .ok_or_else(|| Error::Coverage { template: t.display_name(), combination: schema.describe(labels) })
    }

    fn realize_style(&self, t: &Template, content: &Content, style: Style) -> Option<Vec<String>> {
        let subject = t.subjects.get(content.subject)?.clone();
        let object = match content.object {
            Some(o) => Some(t.objects.get(o)?.clone()),
            None => None,
        };
        let adjective = match style.adjective {
            Some(false) => None,
            Some(true) => Some(self.adjectives.get(content.adjective?)?),
            None => content.adjective.and_then(|a| self.adjectives.get(a)),
        };
        let object = match (object, adjective) {
            (Some(mut o), Some(adj)) => {
                o.insert(1.min(o.len()), adj.clone());
                Some(o)
            }
            (None, Some(_)) => return None,
            (o, None) => o,
        };
        let v = &t.verb;
        let words = |ws: &[&str]| ws.iter().map(|w| w.to_string()).collect::<Vec<_>>();
        let mut out = Vec::new();
        match style.voice {
            Voice::Active => {
                out.extend(subject);
                match style.tense {
                    Tense::Present => out.push(v.third.clone()),
                    Tense::Past => out.push(v.past.clone()),
                    Tense::Future => out.extend(words(&["will", &v.base])),
                }
                if let Some(o) = object {
                    out.extend(o);
                }
            }
            Voice::Passive => {
                out.extend(object?);
                match style.tense {
                    Tense::Present => out.push("is".into()),
                    Tense::Past => out.push("was".into()),
                    Tense::Future => out.extend(words(&["will", "be"])),
                }
                out.push(v.participle.clone());
                out.push("by".into());
                out.extend(subject);
            }
        }
        Some(out)
    }

    /// Number of distinct contents the bank can express under `schema`.
    fn content_pool(&self, schema: &AttributeSchema) -> Vec<Content> {
        let adjective_attr = schema.attribute_index("adjective").is_some();
        let mut pool = Vec::new();
        for (ti, t) in self.templates.iter().enumerate() {
            let objects: Vec<Option<usize>> =
                if t.objects.is_empty() { vec![None] } else { (0..t.objects.len()).map(Some).collect() };
            let adjectives: Vec<Option<usize>> = if t.objects.is_empty() {
                vec![None]
            } else if adjective_attr {
                (0..self.adjectives.len()).map(Some).collect()
            } else {
                core::iter::once(None).chain((0..self.adjectives.len()).map(Some)).collect()
            };
            debug_assert!(t.contents() > 0);
            for subject in 0..t.subjects.len() {
                for object in &objects {
                    for adjective in &adjectives {
                        pool.push(Content { template: ti, subject, object: *object, adjective: *adjective });
                    }
                }
            }
        }
        pool
    }
}

/// One concrete choice of slot fillers for a template.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Content {
    pub template: usize,
    pub subject: usize,
    pub object: Option<usize>,
    pub adjective: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Tense {
    Future,
    Past,
    Present,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Voice {
    Passive,
    Active,
}

#[derive(Clone, Copy, Debug)]
struct Style {
    tense: Tense,
    voice: Voice,
    /// `Some(true)` forces an adjective, `Some(false)` removes it.
    adjective: Option<bool>,
}

impl Style {
    fn resolve(schema: &AttributeSchema, labels: &[usize]) -> Result<Self> {
        let mut style = Style { tense: Tense::Present, voice: Voice::Active, adjective: None };
        for (attr, v) in schema.attributes().iter().zip(labels) {
            let value = attr.values.get(*v).map(String::as_str).unwrap_or("");
            let unsupported =
                || Error::Config(format!("grammar cannot realize {}={value}", attr.name));
            match attr.name.as_str() {
                "tense" => {
                    style.tense = match value {
                        "future" => Tense::Future,
                        "past" => Tense::Past,
                        "present" => Tense::Present,
                        _ => return Err(unsupported()),
                    }
                }
                "voice" => {
                    style.voice = match value {
                        "passive" => Voice::Passive,
                        "active" => Voice::Active,
                        _ => return Err(unsupported()),
                    }
                }
                "adjective" => {
                    style.adjective = match value {
                        "adding" => Some(true),
                        "removing" => Some(false),
                        _ => return Err(unsupported()),
                    }
                }
                _ => return Err(unsupported()),
            }
        }
        Ok(style)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SplitRatios {
    pub dev: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { dev: 0.05, test: 0.05 }
    }
}

/// Emits `count` distinct sentences with every label combination represented
/// within one sentence of uniform, shuffled and split train/dev/test.
pub fn generate_synthetic_corpus(
    schema: &AttributeSchema,
    bank: &TemplateBank,
    count: usize,
    seed: u64,
    ratios: SplitRatios,
) -> Result<CorpusSplit> {
    if count < bank.templates.len() {
        return Err(Error::Config(format!(
            "count {count} is smaller than the {} templates in the bank",
            bank.templates.len()
        )));
    }
    if !(0.0..1.0).contains(&(ratios.dev + ratios.test)) || ratios.dev < 0.0 || ratios.test < 0.0 {
        return Err(Error::Config("dev and test ratios must be non-negative and sum below 1".into()));
    }
    let combos = schema.combinations();
    for t in &bank.templates {
        let probe = Content {
            template: 0,
            subject: 0,
            object: if t.objects.is_empty() { None } else { Some(0) },
            adjective: if bank.adjectives.is_empty() { None } else { Some(0) },
        };
        for c in &combos {
            let style = Style::resolve(schema, c)?;
            if bank.realize_style(t, &probe, style).is_none() {
                return Err(Error::Coverage { template: t.display_name(), combination: schema.describe(c) });
            }
        }
    }

    let pool = bank.content_pool(schema);
    let mut rng = seeded(seed);
    let mut sentences = Vec::with_capacity(count);
    for (ci, combo) in combos.iter().enumerate() {
        let wanted = count / combos.len() + usize::from(ci < count % combos.len());
        if wanted > pool.len() {
            return Err(Error::Config(format!(
                "the bank yields {} distinct contents but {wanted} are needed for {}",
                pool.len(),
                schema.describe(combo)
            )));
        }
        let mut order: Vec<usize> = (0..pool.len()).collect();
        shuffle(&mut rng, &mut order);
        for &k in &order[..wanted] {
            let tokens = bank.realize(schema, &pool[k], combo)?;
            sentences.push(LabeledSentence { tokens, labels: combo.clone() });
        }
    }
    shuffle(&mut rng, &mut sentences);

    let n_dev = libm::round(count as f64 * ratios.dev) as usize;
    let n_test = libm::round(count as f64 * ratios.test) as usize;
    let test = sentences.split_off(count - n_test);
    let dev = sentences.split_off(count - n_test - n_dev);
    CorpusSplit::new(schema.clone(), sentences, dev, test)
}
