//! Synthetic aligned corpora.
//!
//! A [`Meaning`] is a bundle of attribute slots. Three template languages
//! realize every meaning deterministically: a compact source language, a
//! pivot language with articles, plural agreement and context-dependent
//! synonyms, and a verb-final target language. Each triple also carries a
//! grounding vector: a fixed random projection of the meaning's one-hot slot
//! encoding plus Gaussian noise.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};

use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand::distr::weighted::WeightedIndex;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const SPECIALS: [&str; 4] = ["<pad>", "<s>", "</s>", "<unk>"];

/// Canonical slot-value names, shared by all languages.
#[derive(Debug, Clone, PartialEq)]
pub struct Inventory {
    pub counts: usize,
    pub entities: Vec<String>,
    pub colors: Vec<String>,
    pub actions: Vec<String>,
    pub locations: Vec<String>,
}

fn strings(xs: &[&str]) -> Vec<String> {
    xs.iter().map(|s| s.to_string()).collect()
}

impl Default for Inventory {
    fn default() -> Self {
        Self {
            counts: 4,
            entities: strings(&[
                "elephant", "lion", "dog", "cat", "horse", "bird", "child", "man", "woman", "boy",
                "girl", "fish",
            ]),
            colors: strings(&["red", "blue", "green", "black", "white", "brown"]),
            actions: strings(&["run", "sit", "jump", "eat", "sleep", "swim", "walk", "play"]),
            locations: strings(&["beach", "forest", "road", "field", "garden", "river"]),
        }
    }
}

impl Inventory {
    pub fn validate(&self) -> Result<()> {
        let empty = [
            ("counts", self.counts == 0),
            ("entities", self.entities.is_empty()),
            ("colors", self.colors.is_empty()),
            ("actions", self.actions.is_empty()),
            ("locations", self.locations.is_empty()),
        ];
        match empty.iter().find(|(_, e)| *e) {
            Some((name, _)) => Err(Error::Spec(format!("inventory {name} is empty"))),
            None => Ok(()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Slot {
    Count,
    Entity,
    Color,
    Action,
    Location,
    CompanionCount,
    Companion,
}

/// The semantic content of one example. Counts are 1-based.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Meaning {
    pub count: Option<u8>,
    pub entity: usize,
    pub color: Option<usize>,
    pub action: Option<usize>,
    pub location: Option<usize>,
    pub companion: Option<usize>,
    pub companion_count: Option<u8>,
}

impl Meaning {
    pub fn validate(&self, inv: &Inventory) -> Result<()> {
        let bad = |what: &str| Err(Error::Spec(format!("meaning {what} out of inventory")));
        let count_ok = |c: Option<u8>| c.is_none_or(|c| c >= 1 && c as usize <= inv.counts);
        if self.entity >= inv.entities.len() {
            return bad("entity");
        }
        if !count_ok(self.count) || !count_ok(self.companion_count) {
            return bad("count");
        }
        if self.color.is_some_and(|c| c >= inv.colors.len()) {
            return bad("color");
        }
        if self.action.is_some_and(|a| a >= inv.actions.len()) {
            return bad("action");
        }
        if self.location.is_some_and(|l| l >= inv.locations.len()) {
            return bad("location");
        }
        if self.companion.is_some_and(|c| c >= inv.entities.len()) {
            return bad("companion");
        }
        if self.companion.is_none() && self.companion_count.is_some() {
            return Err(Error::Spec("companion count without companion".into()));
        }
        Ok(())
    }

    /// The present slots with their values.
    pub fn slots(&self) -> Vec<(Slot, usize)> {
        let mut out = Vec::with_capacity(7);
        if let Some(c) = self.count {
            out.push((Slot::Count, c as usize));
        }
        out.push((Slot::Entity, self.entity));
        if let Some(c) = self.color {
            out.push((Slot::Color, c));
        }
        if let Some(a) = self.action {
            out.push((Slot::Action, a));
        }
        if let Some(l) = self.location {
            out.push((Slot::Location, l));
        }
        if let Some(c) = self.companion_count {
            out.push((Slot::CompanionCount, c as usize));
        }
        if let Some(c) = self.companion {
            out.push((Slot::Companion, c));
        }
        out
    }

    /// Whether this meaning denotes a content value, ignoring which slot
    /// carries an entity.
    pub fn mentions(&self, sem: Semantic) -> bool {
        match sem {
            Semantic::Count(c) => self.count == Some(c) || self.companion_count == Some(c),
            Semantic::Entity(e) => self.entity == e || self.companion == Some(e),
            Semantic::Color(c) => self.color == Some(c),
            Semantic::Action(a) => self.action == Some(a),
            Semantic::Location(l) => self.location == Some(l),
        }
    }

    pub fn to_key_values(&self, inv: &Inventory) -> String {
        let mut parts = Vec::new();
        if let Some(c) = self.count {
            parts.push(format!("count={c}"));
        }
        parts.push(format!("entity={}", inv.entities[self.entity]));
        if let Some(c) = self.color {
            parts.push(format!("color={}", inv.colors[c]));
        }
        if let Some(a) = self.action {
            parts.push(format!("action={}", inv.actions[a]));
        }
        if let Some(l) = self.location {
            parts.push(format!("location={}", inv.locations[l]));
        }
        if let Some(c) = self.companion {
            parts.push(format!("companion={}", inv.entities[c]));
        }
        if let Some(c) = self.companion_count {
            parts.push(format!("companion_count={c}"));
        }
        parts.join(",")
    }

    pub fn from_key_values(s: &str, inv: &Inventory) -> Result<Self> {
        let find = |list: &[String], v: &str| {
            list.iter()
                .position(|x| x == v)
                .ok_or_else(|| Error::Format(format!("unknown slot value {v:?}")))
        };
        let mut m = Meaning::default();
        let mut has_entity = false;
        for kv in s.split(',').filter(|p| !p.is_empty()) {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Format(format!("bad meaning field {kv:?}")))?;
            let count = || {
                v.parse::<u8>()
                    .map_err(|_| Error::Format(format!("bad count {v:?}")))
            };
            match k {
                "count" => m.count = Some(count()?),
                "entity" => {
                    m.entity = find(&inv.entities, v)?;
                    has_entity = true;
                }
                "color" => m.color = Some(find(&inv.colors, v)?),
                "action" => m.action = Some(find(&inv.actions, v)?),
                "location" => m.location = Some(find(&inv.locations, v)?),
                "companion" => m.companion = Some(find(&inv.entities, v)?),
                "companion_count" => m.companion_count = Some(count()?),
                _ => return Err(Error::Format(format!("unknown meaning key {k:?}"))),
            }
        }
        if !has_entity {
            return Err(Error::Format("meaning without entity".into()));
        }
        m.validate(inv)?;
        Ok(m)
    }
}

/// A content value a token can denote.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Semantic {
    Count(u8),
    Entity(usize),
    Color(usize),
    Action(usize),
    Location(usize),
}

/// Word classes of the template lexicons.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Category {
    Determiner,
    Conjunction,
    Preposition,
    Punctuation,
    Numeral,
    Noun,
    Verb,
    Adjective,
}

impl Category {
    pub const ALL: [Category; 8] = [
        Category::Determiner,
        Category::Conjunction,
        Category::Preposition,
        Category::Punctuation,
        Category::Numeral,
        Category::Noun,
        Category::Verb,
        Category::Adjective,
    ];

    pub fn is_function(self) -> bool {
        matches!(
            self,
            Category::Determiner | Category::Conjunction | Category::Preposition | Category::Punctuation
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Category::Determiner => "DET",
            Category::Conjunction => "CONJ",
            Category::Preposition => "PREP",
            Category::Punctuation => "PUNCT",
            Category::Numeral => "NUM",
            Category::Noun => "N",
            Category::Verb => "V",
            Category::Adjective => "ADJ",
        }
    }
}

impl fmt::Display for Category {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Phrase positions a template can order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phrase {
    Subject,
    Companion,
    Action,
    Location,
    End,
}

/// Alternative surface form of an entity, used when the location is one of
/// `locations`.
#[derive(Debug, Clone, PartialEq)]
pub struct Synonym {
    pub entity: usize,
    pub singular: String,
    pub plural: String,
    pub locations: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LanguageSpec {
    pub name: String,
    pub counts: Vec<String>,
    pub indefinite: String,
    pub entities: Vec<String>,
    /// Plural forms used for counts >= 2; `None` means no agreement.
    pub plurals: Option<Vec<String>>,
    pub colors: Vec<String>,
    pub color_after_noun: bool,
    pub actions: Vec<String>,
    pub locations: Vec<String>,
    pub location_preps: Vec<String>,
    pub location_article: Option<String>,
    pub conjunction: String,
    pub end: String,
    pub synonyms: Vec<Synonym>,
    pub template: Vec<Phrase>,
}

impl LanguageSpec {
    /// Source language: noun-adjective order, no plural agreement.
    pub fn source(_inv: &Inventory) -> Self {
        Self {
            name: "src".into(),
            counts: strings(&["un", "deux", "trois", "quatre"]),
            indefinite: "le".into(),
            entities: strings(&[
                "éléphant", "fauve", "chien", "chat", "cheval", "oiseau", "enfant", "homme",
                "femme", "garçon", "fille", "poisson",
            ]),
            plurals: None,
            colors: strings(&["rouge", "bleu", "vert", "noir", "blanc", "marron"]),
            color_after_noun: true,
            actions: strings(&["court", "assoit", "saute", "mange", "dort", "nage", "marche", "joue"]),
            locations: strings(&["plage", "forêt", "route", "champ", "jardin", "rivière"]),
            location_preps: strings(&["sur", "dans", "sur", "dans", "dans", "dans"]),
            location_article: Some("la".into()),
            conjunction: "et".into(),
            end: ".".into(),
            synonyms: vec![],
            template: vec![
                Phrase::Subject,
                Phrase::Companion,
                Phrase::Action,
                Phrase::Location,
                Phrase::End,
            ],
        }
    }

    /// Pivot language: articles, plural agreement and context synonyms.
    pub fn pivot(_inv: &Inventory) -> Self {
        Self {
            name: "pivot".into(),
            counts: strings(&["one", "two", "three", "four"]),
            indefinite: "a".into(),
            entities: strings(&[
                "elephant", "lion", "dog", "cat", "horse", "bird", "child", "man", "woman", "boy",
                "girl", "fish",
            ]),
            plurals: Some(strings(&[
                "elephants", "lions", "dogs", "cats", "horses", "birds", "children", "men",
                "women", "boys", "girls", "fishes",
            ])),
            colors: strings(&["red", "blue", "green", "black", "white", "brown"]),
            color_after_noun: false,
            actions: strings(&["runs", "sits", "jumps", "eats", "sleeps", "swims", "walks", "plays"]),
            locations: strings(&["beach", "forest", "road", "field", "garden", "river"]),
            location_preps: strings(&["on", "in", "on", "in", "in", "in"]),
            location_article: Some("the".into()),
            conjunction: "and".into(),
            end: ".".into(),
            synonyms: vec![
                Synonym {
                    entity: 6,
                    singular: "kid".into(),
                    plural: "kids".into(),
                    locations: vec![1, 3],
                },
                Synonym {
                    entity: 7,
                    singular: "guy".into(),
                    plural: "guys".into(),
                    locations: vec![1, 3],
                },
                Synonym {
                    entity: 2,
                    singular: "puppy".into(),
                    plural: "puppies".into(),
                    locations: vec![1, 3],
                },
            ],
            template: vec![
                Phrase::Subject,
                Phrase::Companion,
                Phrase::Action,
                Phrase::Location,
                Phrase::End,
            ],
        }
    }

    /// Target language: verb-final, fused location prepositions.
    pub fn target(_inv: &Inventory) -> Self {
        Self {
            name: "tgt".into(),
            counts: strings(&["ein", "zwei", "drei", "vier"]),
            indefinite: "der".into(),
            entities: strings(&[
                "elefant", "löwe", "hund", "katze", "pferd", "vogel", "kind", "mann", "frau",
                "junge", "mädchen", "fisch",
            ]),
            plurals: None,
            colors: strings(&["rot", "blau", "grün", "schwarz", "weiß", "braun"]),
            color_after_noun: false,
            actions: strings(&["läuft", "sitzt", "springt", "isst", "schläft", "schwimmt", "geht", "spielt"]),
            locations: strings(&["strand", "wald", "straße", "feld", "garten", "fluss"]),
            location_preps: strings(&["am", "im", "auf", "im", "im", "im"]),
            location_article: None,
            conjunction: "und".into(),
            end: ".".into(),
            synonyms: vec![],
            template: vec![
                Phrase::Subject,
                Phrase::Companion,
                Phrase::Location,
                Phrase::Action,
                Phrase::End,
            ],
        }
    }

    pub fn validate(&self, inv: &Inventory) -> Result<()> {
        let check = |what: &str, n: usize, want: usize| {
            if n != want {
                Err(Error::Spec(format!(
                    "{}: {what} has {n} entries, inventory has {want}",
                    self.name
                )))
            } else {
                Ok(())
            }
        };
        inv.validate()?;
        check("counts", self.counts.len(), inv.counts)?;
        check("entities", self.entities.len(), inv.entities.len())?;
        if let Some(p) = &self.plurals {
            check("plurals", p.len(), inv.entities.len())?;
        }
        check("colors", self.colors.len(), inv.colors.len())?;
        check("actions", self.actions.len(), inv.actions.len())?;
        check("locations", self.locations.len(), inv.locations.len())?;
        check("location_preps", self.location_preps.len(), inv.locations.len())?;
        if self.template.is_empty() {
            return Err(Error::Spec(format!("{}: empty template", self.name)));
        }
        Ok(())
    }

    fn noun(&self, entity: usize, count: Option<u8>, location: Option<usize>) -> &str {
        let plural = count.is_some_and(|c| c >= 2);
        if let Some(s) = self
            .synonyms
            .iter()
            .find(|s| s.entity == entity && location.is_some_and(|l| s.locations.contains(&l)))
        {
            return if plural { &s.plural } else { &s.singular };
        }
        match (&self.plurals, plural) {
            (Some(p), true) => &p[entity],
            _ => &self.entities[entity],
        }
    }

    fn noun_phrase(
        &self,
        out: &mut Vec<String>,
        entity: usize,
        count: Option<u8>,
        color: Option<usize>,
        location: Option<usize>,
    ) {
        out.push(match count {
            Some(c) => self.counts[c as usize - 1].clone(),
            None => self.indefinite.clone(),
        });
        let noun = self.noun(entity, count, location).to_string();
        match (color, self.color_after_noun) {
            (Some(c), true) => {
                out.push(noun);
                out.push(self.colors[c].clone());
            }
            (Some(c), false) => {
                out.push(self.colors[c].clone());
                out.push(noun);
            }
            (None, _) => out.push(noun),
        }
    }

    /// Deterministic surface form of `m`.
    pub fn realize(&self, m: &Meaning) -> Vec<String> {
        let mut out = Vec::with_capacity(12);
        for phrase in &self.template {
            match phrase {
                Phrase::Subject => self.noun_phrase(&mut out, m.entity, m.count, m.color, m.location),
                Phrase::Companion => {
                    if let Some(c) = m.companion {
                        out.push(self.conjunction.clone());
                        self.noun_phrase(&mut out, c, m.companion_count, None, m.location);
                    }
                }
                Phrase::Action => {
                    if let Some(a) = m.action {
                        out.push(self.actions[a].clone());
                    }
                }
                Phrase::Location => {
                    if let Some(l) = m.location {
                        out.push(self.location_preps[l].clone());
                        if let Some(art) = &self.location_article {
                            out.push(art.clone());
                        }
                        out.push(self.locations[l].clone());
                    }
                }
                Phrase::End => out.push(self.end.clone()),
            }
        }
        out
    }

    /// Every token of the language in a fixed order, without duplicates.
    pub fn tokens(&self) -> Vec<String> {
        let mut out: Vec<String> = Vec::new();
        let mut push = |t: &String| {
            if !out.contains(t) {
                out.push(t.clone());
            }
        };
        push(&self.indefinite);
        if let Some(a) = &self.location_article {
            push(a);
        }
        push(&self.conjunction);
        self.location_preps.iter().for_each(&mut push);
        push(&self.end);
        self.counts.iter().for_each(&mut push);
        self.entities.iter().for_each(&mut push);
        if let Some(p) = &self.plurals {
            p.iter().for_each(&mut push);
        }
        for s in &self.synonyms {
            push(&s.singular);
            push(&s.plural);
        }
        self.colors.iter().for_each(&mut push);
        self.actions.iter().for_each(&mut push);
        self.locations.iter().for_each(&mut push);
        out
    }

    /// Content tokens, i.e. tokens that denote a slot value.
    pub fn content_tokens(&self) -> Vec<String> {
        self.tokens()
            .into_iter()
            .filter(|t| self.denotation(t).is_some())
            .collect()
    }

    pub fn category(&self, token: &str) -> Option<Category> {
        let is = |xs: &[String]| xs.iter().any(|x| x == token);
        if token == self.indefinite || self.location_article.as_deref() == Some(token) {
            Some(Category::Determiner)
        } else if token == self.conjunction {
            Some(Category::Conjunction)
        } else if is(&self.location_preps) {
            Some(Category::Preposition)
        } else if token == self.end {
            Some(Category::Punctuation)
        } else if is(&self.counts) {
            Some(Category::Numeral)
        } else if is(&self.colors) {
            Some(Category::Adjective)
        } else if is(&self.actions) {
            Some(Category::Verb)
        } else if self.denotation(token).is_some() {
            Some(Category::Noun)
        } else {
            None
        }
    }

    /// Slot value a content token stands for.
    pub fn denotation(&self, token: &str) -> Option<Semantic> {
        let pos = |xs: &[String]| xs.iter().position(|x| x == token);
        if let Some(i) = pos(&self.counts) {
            return Some(Semantic::Count(i as u8 + 1));
        }
        if let Some(i) = pos(&self.entities) {
            return Some(Semantic::Entity(i));
        }
        if let Some(i) = self.plurals.as_deref().and_then(pos) {
            return Some(Semantic::Entity(i));
        }
        if let Some(s) = self
            .synonyms
            .iter()
            .find(|s| s.singular == token || s.plural == token)
        {
            return Some(Semantic::Entity(s.entity));
        }
        if let Some(i) = pos(&self.colors) {
            return Some(Semantic::Color(i));
        }
        if let Some(i) = pos(&self.actions) {
            return Some(Semantic::Action(i));
        }
        pos(&self.locations).map(Semantic::Location)
    }
}

/// The three languages of the game over one inventory.
#[derive(Debug, Clone, PartialEq)]
pub struct Languages {
    pub inventory: Inventory,
    pub source: LanguageSpec,
    pub pivot: LanguageSpec,
    pub target: LanguageSpec,
}

impl Default for Languages {
    fn default() -> Self {
        let inventory = Inventory::default();
        Self {
            source: LanguageSpec::source(&inventory),
            pivot: LanguageSpec::pivot(&inventory),
            target: LanguageSpec::target(&inventory),
            inventory,
        }
    }
}

impl Languages {
    pub fn validate(&self) -> Result<()> {
        for l in [&self.source, &self.pivot, &self.target] {
            l.validate(&self.inventory)?;
        }
        Ok(())
    }
}

/// Slot presence probabilities and value weights of one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Domain {
    pub p_count: f64,
    pub p_color: f64,
    pub p_action: f64,
    pub p_location: f64,
    pub p_companion: f64,
    pub count_weights: Vec<f64>,
    pub entity_weights: Vec<f64>,
    pub color_weights: Vec<f64>,
    pub action_weights: Vec<f64>,
    pub location_weights: Vec<f64>,
}

impl Domain {
    /// Domain of the supervised pretraining data: short sentences, animals.
    pub fn pretraining() -> Self {
        Self {
            p_count: 0.5,
            p_color: 0.5,
            p_action: 0.5,
            p_location: 0.3,
            p_companion: 0.15,
            count_weights: vec![4.0, 3.0, 2.0, 1.0],
            entity_weights: vec![3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 0.1, 0.2, 0.2, 0.1, 0.1, 2.0],
            color_weights: vec![2.0, 2.0, 1.0, 2.0, 1.0, 2.0],
            action_weights: vec![3.0, 3.0, 2.0, 2.0, 2.0, 1.0, 1.0, 0.5],
            location_weights: vec![3.0, 0.5, 3.0, 0.5, 2.0, 1.0],
        }
    }

    /// Domain of the fine-tuning game: longer sentences about people.
    pub fn finetuning() -> Self {
        Self {
            p_count: 0.6,
            p_color: 0.6,
            p_action: 0.8,
            p_location: 0.7,
            p_companion: 0.45,
            count_weights: vec![2.0, 3.0, 2.0, 2.0],
            entity_weights: vec![1.0, 0.5, 2.0, 1.0, 1.0, 1.0, 4.0, 3.0, 3.0, 3.0, 3.0, 0.5],
            color_weights: vec![2.0, 1.0, 1.0, 2.0, 2.0, 1.0],
            action_weights: vec![1.0, 2.0, 1.0, 1.0, 0.5, 1.0, 2.0, 3.0],
            location_weights: vec![1.0, 3.0, 1.0, 3.0, 1.0, 1.0],
        }
    }

    /// Domain of the pivot-only language-model text.
    pub fn lm_text() -> Self {
        Self {
            p_count: 0.4,
            p_color: 0.4,
            p_action: 0.6,
            p_location: 0.4,
            p_companion: 0.2,
            count_weights: vec![4.0, 2.0, 1.0, 1.0],
            entity_weights: vec![2.0, 2.0, 3.0, 3.0, 2.0, 2.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0],
            color_weights: vec![1.0; 6],
            action_weights: vec![2.0, 2.0, 2.0, 2.0, 2.0, 1.0, 1.0, 1.0],
            location_weights: vec![2.0, 1.0, 2.0, 1.0, 2.0, 1.0],
        }
    }

    /// Linear interpolation `(1 - t) * self + t * other` of every parameter.
    pub fn blend(&self, other: &Domain, t: f64) -> Domain {
        let mix = |a: f64, b: f64| (1.0 - t) * a + t * b;
        let mixv = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(&x, &y)| mix(x, y)).collect();
        Domain {
            p_count: mix(self.p_count, other.p_count),
            p_color: mix(self.p_color, other.p_color),
            p_action: mix(self.p_action, other.p_action),
            p_location: mix(self.p_location, other.p_location),
            p_companion: mix(self.p_companion, other.p_companion),
            count_weights: mixv(&self.count_weights, &other.count_weights),
            entity_weights: mixv(&self.entity_weights, &other.entity_weights),
            color_weights: mixv(&self.color_weights, &other.color_weights),
            action_weights: mixv(&self.action_weights, &other.action_weights),
            location_weights: mixv(&self.location_weights, &other.location_weights),
        }
    }

    pub fn validate(&self, inv: &Inventory) -> Result<()> {
        inv.validate()?;
        let pairs = [
            ("count", &self.count_weights, inv.counts),
            ("entity", &self.entity_weights, inv.entities.len()),
            ("color", &self.color_weights, inv.colors.len()),
            ("action", &self.action_weights, inv.actions.len()),
            ("location", &self.location_weights, inv.locations.len()),
        ];
        for (name, w, n) in pairs {
            if w.len() != n || w.iter().any(|&x| x < 0.0 || !x.is_finite()) || w.iter().sum::<f64>() <= 0.0 {
                return Err(Error::Spec(format!("{name} weights invalid for inventory of {n}")));
            }
        }
        for p in [self.p_count, self.p_color, self.p_action, self.p_location, self.p_companion] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Spec(format!("slot probability {p} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn sample<R: Rng>(&self, rng: &mut R) -> Meaning {
        let pick = |w: &[f64], rng: &mut R| WeightedIndex::new(w).unwrap().sample(rng);
        let count = rng
            .random_bool(self.p_count)
            .then(|| pick(&self.count_weights, rng) as u8 + 1);
        let entity = pick(&self.entity_weights, rng);
        let color = rng
            .random_bool(self.p_color)
            .then(|| pick(&self.color_weights, rng));
        let action = rng
            .random_bool(self.p_action)
            .then(|| pick(&self.action_weights, rng));
        let location = rng
            .random_bool(self.p_location)
            .then(|| pick(&self.location_weights, rng));
        let (companion, companion_count) = if rng.random_bool(self.p_companion) {
            let mut c = pick(&self.entity_weights, rng);
            if c == entity {
                c = (c + 1) % self.entity_weights.len();
            }
            let cc = rng
                .random_bool(self.p_count)
                .then(|| pick(&self.count_weights, rng) as u8 + 1);
            (Some(c), cc)
        } else {
            (None, None)
        };
        Meaning {
            count,
            entity,
            color,
            action,
            location,
            companion,
            companion_count,
        }
    }
}

/// Fixed random projection from one-hot slot features to grounding vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundingSpace {
    pub dim: usize,
    pub noise_sigma: f64,
    features: usize,
    projection: Vec<f64>,
    offsets: [usize; 7],
}

impl GroundingSpace {
    pub fn new(inv: &Inventory, dim: usize, noise_sigma: f64, seed: u64) -> Self {
        // every slot gets one extra feature for "absent"
        let sizes = [
            inv.counts + 1,
            inv.entities.len(),
            inv.colors.len() + 1,
            inv.actions.len() + 1,
            inv.locations.len() + 1,
            inv.counts + 1,
            inv.entities.len() + 1,
        ];
        let mut offsets = [0; 7];
        let mut acc = 0;
        for (o, s) in offsets.iter_mut().zip(sizes) {
            *o = acc;
            acc += s;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = Normal::new(0.0, 1.0 / (dim as f64).sqrt()).unwrap();
        let projection = (0..dim * acc).map(|_| normal.sample(&mut rng)).collect();
        Self {
            dim,
            noise_sigma,
            features: acc,
            projection,
            offsets,
        }
    }

    pub fn features(&self, m: &Meaning) -> Vec<usize> {
        let opt = |v: Option<usize>| v.map_or(0, |x| x + 1);
        vec![
            self.offsets[0] + m.count.map_or(0, |c| c as usize),
            self.offsets[1] + m.entity,
            self.offsets[2] + opt(m.color),
            self.offsets[3] + opt(m.action),
            self.offsets[4] + opt(m.location),
            self.offsets[5] + m.companion_count.map_or(0, |c| c as usize),
            self.offsets[6] + opt(m.companion),
        ]
    }

    /// Noise-free embedding of a meaning.
    pub fn embed(&self, m: &Meaning) -> Vec<f64> {
        let feats = self.features(m);
        (0..self.dim)
            .map(|d| {
                feats
                    .iter()
                    .map(|&f| self.projection[d * self.features + f])
                    .sum()
            })
            .collect()
    }

    pub fn sample<R: Rng>(&self, m: &Meaning, rng: &mut R) -> Vec<f64> {
        let mut v = self.embed(m);
        if self.noise_sigma > 0.0 {
            let noise = Normal::new(0.0, self.noise_sigma).unwrap();
            v.iter_mut().for_each(|x| *x += noise.sample(rng));
        }
        v
    }
}

/// Grounding vector of `m` with noise seeded by `seed`.
pub fn grounding_vector(space: &GroundingSpace, m: &Meaning, seed: u64) -> Vec<f64> {
    space.sample(m, &mut ChaCha8Rng::seed_from_u64(seed))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Triple {
    pub src: Vec<String>,
    /// Pivot reference; evaluation only.
    pub pivot: Vec<String>,
    pub tgt: Vec<String>,
    pub grounding: Vec<f64>,
    pub meaning: Meaning,
}

/// Samples `n` aligned triples from `domain`.
pub fn generate_corpus(
    langs: &Languages,
    domain: &Domain,
    space: &GroundingSpace,
    n: usize,
    seed: u64,
) -> Result<Vec<Triple>> {
    if n == 0 {
        return Err(Error::Usage("corpus size must be at least 1".into()));
    }
    langs.validate()?;
    domain.validate(&langs.inventory)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok((0..n)
        .map(|_| {
            let meaning = domain.sample(&mut rng);
            let grounding = space.sample(&meaning, &mut rng);
            Triple {
                src: langs.source.realize(&meaning),
                pivot: langs.pivot.realize(&meaning),
                tgt: langs.target.realize(&meaning),
                grounding,
                meaning,
            }
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub dev: Vec<T>,
    pub test: Vec<T>,
}

/// Shuffled train/dev/test partition of `items`.
pub fn split<T: Clone>(items: &[T], fractions: (f64, f64, f64), seed: u64) -> Result<Splits<T>> {
    let (a, b, c) = fractions;
    if [a, b, c].iter().any(|f| !(0.0..=1.0).contains(f)) || (a + b + c - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!(
            "split fractions {fractions:?} must be in [0, 1] and sum to 1"
        )));
    }
    let n = items.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = ((n as f64) * a).round() as usize;
    let n_dev = (((n as f64) * b).round() as usize).min(n - n_train);
    let take = |r: &[usize]| r.iter().map(|&i| items[i].clone()).collect();
    Ok(Splits {
        train: take(&idx[..n_train]),
        dev: take(&idx[n_train..n_train + n_dev]),
        test: take(&idx[n_train + n_dev..]),
    })
}

/// Token-id bijection for one language, with reserved ids 0..4.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: impl IntoIterator<Item = String>) -> Self {
        let mut all: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for t in tokens {
            if !all.contains(&t) {
                all.push(t);
            }
        }
        let index = all.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens: all, index }
    }

    pub fn for_language(lang: &LanguageSpec) -> Self {
        Self::new(lang.tokens())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn try_id(&self, token: &str) -> Result<usize> {
        self.index
            .get(token)
            .copied()
            .ok_or_else(|| Error::UnknownToken(token.to_string()))
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(SPECIALS[UNK], String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode(&self, tokens: &[String]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t)).collect()
    }

    /// Tokens of `ids`, stopping at EOS and skipping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }
}

/// The three vocabularies of the game.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocabs {
    pub source: Vocab,
    pub pivot: Vocab,
    pub target: Vocab,
}

impl Vocabs {
    pub fn new(langs: &Languages) -> Self {
        Self {
            source: Vocab::for_language(&langs.source),
            pivot: Vocab::for_language(&langs.pivot),
            target: Vocab::for_language(&langs.target),
        }
    }
}

fn encode_vec(v: &[f64]) -> String {
    let bytes: Vec<u8> = v.iter().flat_map(|x| x.to_le_bytes()).collect();
    base64::engine::general_purpose::STANDARD.encode(bytes)
}

fn decode_vec(s: &str) -> Result<Vec<f64>> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(s)
        .map_err(|e| Error::Format(format!("grounding vector: {e}")))?;
    if bytes.len() % 8 != 0 {
        return Err(Error::Format("grounding vector length not a multiple of 8".into()));
    }
    Ok(bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect())
}

/// Writes one tab-separated record per triple:
/// `src \t pivot \t tgt \t base64(f64 LE grounding) \t key=value,...`.
pub fn write_corpus<W: Write>(mut w: W, triples: &[Triple], inv: &Inventory) -> Result<()> {
    for t in triples {
        writeln!(
            w,
            "{}\t{}\t{}\t{}\t{}",
            t.src.join(" "),
            t.pivot.join(" "),
            t.tgt.join(" "),
            encode_vec(&t.grounding),
            t.meaning.to_key_values(inv)
        )?;
    }
    Ok(())
}

pub fn read_corpus<R: BufRead>(r: R, inv: &Inventory) -> Result<Vec<Triple>> {
    let mut out = Vec::new();
    for (lineno, line) in r.lines().enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 5 {
            return Err(Error::Format(format!(
                "corpus line {}: expected 5 fields, got {}",
                lineno + 1,
                fields.len()
            )));
        }
        let toks = |s: &str| s.split_whitespace().map(str::to_string).collect();
        out.push(Triple {
            src: toks(fields[0]),
            pivot: toks(fields[1]),
            tgt: toks(fields[2]),
            grounding: decode_vec(fields[3])?,
            meaning: Meaning::from_key_values(fields[4], inv)?,
        });
    }
    Ok(out)
}

/// Count of each distinct meaning, in sorted order.
pub fn meaning_histogram(triples: &[Triple]) -> BTreeMap<Meaning, usize> {
    let mut h = BTreeMap::new();
    for t in triples {
        *h.entry(t.meaning.clone()).or_insert(0) += 1;
    }
    h
}

#[cfg(test)]
mod tests {
    use super::*;

    fn world() -> (Languages, GroundingSpace) {
        let langs = Languages::default();
        let space = GroundingSpace::new(&langs.inventory, 32, 0.05, 99);
        (langs, space)
    }

    #[test]
    fn generation_is_deterministic() {
        let (langs, space) = world();
        let d = Domain::finetuning();
        let a = generate_corpus(&langs, &d, &space, 50, 5).unwrap();
        let b = generate_corpus(&langs, &d, &space, 50, 5).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&langs, &d, &space, 50, 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn zero_size_is_rejected() {
        let (langs, space) = world();
        let r = generate_corpus(&langs, &Domain::pretraining(), &space, 0, 1);
        assert!(matches!(r, Err(Error::Usage(_))));
    }

    #[test]
    fn empty_inventory_is_spec_error() {
        let (mut langs, space) = world();
        langs.inventory.colors.clear();
        let r = generate_corpus(&langs, &Domain::pretraining(), &space, 3, 1);
        assert!(matches!(r, Err(Error::Spec(_))));
    }

    #[test]
    fn template_expansion() {
        let (langs, _) = world();
        let m = Meaning {
            count: Some(2),
            entity: 0,
            companion: Some(1),
            companion_count: Some(1),
            ..Default::default()
        };
        // subject NP, then "and" + companion NP, then the end mark
        let mut expected = vec!["two", "elephants", "and", "one", "lion", "."];
        assert_eq!(langs.pivot.realize(&m), expected);
        let mut got = langs.pivot.realize(&m);
        got.sort();
        expected.sort();
        assert_eq!(got, expected);
        assert_eq!(
            langs.source.realize(&m),
            vec!["deux", "éléphant", "et", "un", "fauve", "."]
        );
    }

    #[test]
    fn full_meaning_realizations() {
        let (langs, _) = world();
        let m = Meaning {
            count: None,
            entity: 6,
            color: Some(0),
            action: Some(1),
            location: Some(1),
            companion: None,
            companion_count: None,
        };
        assert_eq!(
            langs.pivot.realize(&m).join(" "),
            "a red kid sits in the forest ."
        );
        assert_eq!(langs.source.realize(&m).join(" "), "le enfant rouge assoit dans la forêt .");
        assert_eq!(langs.target.realize(&m).join(" "), "der rot kind im wald sitzt .");
        let beach = Meaning { location: Some(0), ..m };
        assert_eq!(
            langs.pivot.realize(&beach).join(" "),
            "a red child sits on the beach ."
        );
    }

    #[test]
    fn content_lexicons_are_disjoint() {
        let (langs, _) = world();
        let s = langs.source.content_tokens();
        let p = langs.pivot.content_tokens();
        let t = langs.target.content_tokens();
        for tok in &p {
            assert!(!s.contains(tok) && !t.contains(tok), "{tok} shared");
        }
        for tok in &s {
            assert!(!t.contains(tok), "{tok} shared");
        }
    }

    #[test]
    fn every_pivot_token_has_a_category() {
        let (langs, _) = world();
        for t in langs.pivot.tokens() {
            assert!(langs.pivot.category(&t).is_some(), "{t}");
        }
        assert_eq!(langs.pivot.category("kids"), Some(Category::Noun));
        assert_eq!(langs.pivot.denotation("kids"), Some(Semantic::Entity(6)));
        assert_eq!(langs.pivot.category("the"), Some(Category::Determiner));
    }

    #[test]
    fn vocab_reserved_ids_and_size() {
        let (langs, _) = world();
        let v = Vocabs::new(&langs);
        for vocab in [&v.source, &v.pivot, &v.target] {
            assert_eq!(vocab.token(PAD), "<pad>");
            assert_eq!(vocab.token(EOS), "</s>");
            assert!((40..=120).contains(&vocab.len()), "{}", vocab.len());
            for (i, t) in vocab.tokens().iter().enumerate() {
                assert_eq!(vocab.id(t), i);
            }
        }
        assert_eq!(v.pivot.id("zzz"), UNK);
        assert!(v.pivot.try_id("zzz").is_err());
    }

    #[test]
    fn alignment_invariant_holds() {
        let (langs, space) = world();
        for t in generate_corpus(&langs, &Domain::finetuning(), &space, 200, 3).unwrap() {
            assert_eq!(langs.source.realize(&t.meaning), t.src);
            assert_eq!(langs.pivot.realize(&t.meaning), t.pivot);
            assert_eq!(langs.target.realize(&t.meaning), t.tgt);
            t.meaning.validate(&langs.inventory).unwrap();
        }
    }

    #[test]
    fn grounding_noise_free_is_deterministic_and_injective() {
        let (langs, _) = world();
        let space = GroundingSpace::new(&langs.inventory, 32, 0.0, 99);
        let m = Meaning {
            count: Some(3),
            entity: 4,
            color: Some(2),
            ..Default::default()
        };
        assert_eq!(grounding_vector(&space, &m, 1), grounding_vector(&space, &m, 2));
        let cos = |a: &[f64], b: &[f64]| {
            let d: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
            d / (a.iter().map(|x| x * x).sum::<f64>().sqrt() * b.iter().map(|x| x * x).sum::<f64>().sqrt())
        };
        let a = space.embed(&m);
        for other in [
            Meaning { color: Some(3), ..m.clone() },
            Meaning { count: None, ..m.clone() },
            Meaning { action: Some(0), ..m.clone() },
            Meaning { entity: 5, ..m.clone() },
        ] {
            assert!(cos(&a, &space.embed(&other)) < 1.0 - 1e-9);
        }
        // distinct meanings from a corpus never collide
        let corpus = generate_corpus(&langs, &Domain::finetuning(), &space, 300, 8).unwrap();
        let hist = meaning_histogram(&corpus);
        let vecs: Vec<Vec<f64>> = hist.keys().map(|m| space.embed(m)).collect();
        for i in 0..vecs.len() {
            for j in i + 1..vecs.len() {
                let d: f64 = vecs[i].iter().zip(&vecs[j]).map(|(a, b)| (a - b).powi(2)).sum();
                assert!(d > 1e-6);
            }
        }
    }

    #[test]
    fn same_meaning_vectors_are_closer_monte_carlo() {
        let (langs, space) = world();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let d = Domain::finetuning();
        let dist = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let (mut same, mut diff) = (0.0, 0.0);
        let n = 1000;
        for _ in 0..n {
            let m1 = d.sample(&mut rng);
            let mut m2 = d.sample(&mut rng);
            while m2 == m1 {
                m2 = d.sample(&mut rng);
            }
            same += dist(&space.sample(&m1, &mut rng), &space.sample(&m1, &mut rng));
            diff += dist(&space.sample(&m1, &mut rng), &space.sample(&m2, &mut rng));
        }
        let _ = langs;
        assert!(same / n as f64 * 3.0 < diff / n as f64);
    }

    #[test]
    fn split_sizes_and_partition() {
        let items: Vec<usize> = (0..100).collect();
        let s = split(&items, (0.8, 0.1, 0.1), 4).unwrap();
        assert_eq!((s.train.len(), s.dev.len(), s.test.len()), (80, 10, 10));
        let mut all: Vec<usize> = s.train.iter().chain(&s.dev).chain(&s.test).copied().collect();
        all.sort();
        assert_eq!(all, items);
        assert_eq!(s, split(&items, (0.8, 0.1, 0.1), 4).unwrap());
        let s = split(&items, (1.0, 0.0, 0.0), 4).unwrap();
        assert_eq!(s.train.len(), 100);
        assert!(matches!(split(&items, (0.5, 0.1, 0.1), 1), Err(Error::Config(_))));
        assert!(matches!(split(&items, (1.2, -0.2, 0.0), 1), Err(Error::Config(_))));
    }

    #[test]
    fn corpus_file_roundtrip() {
        let (langs, space) = world();
        let corpus = generate_corpus(&langs, &Domain::finetuning(), &space, 20, 2).unwrap();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &corpus, &langs.inventory).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 20);
        assert!(text.lines().all(|l| l.split('\t').count() == 5));
        let back = read_corpus(&buf[..], &langs.inventory).unwrap();
        assert_eq!(back, corpus);
    }

    #[test]
    fn domain_blend_endpoints() {
        let a = Domain::pretraining();
        let b = Domain::finetuning();
        assert_eq!(a.blend(&b, 0.0), a);
        assert_eq!(a.blend(&b, 1.0), b);
    }
}
