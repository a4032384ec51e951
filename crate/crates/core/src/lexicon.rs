//! Abnormality and attribute keyword tables plus span matching over report
//! text.
//!
//! The text format is line based. Abnormality lines are
//! `id|synonym;synonym;...` with an optional third field holding the
//! canonical display name (defaults to the first synonym as written).
//! Attribute lines are `role|phrase` where role is one of `level`,
//! `location_pre`, `location_post` or `type`. `#` starts a comment.

use alloc::collections::BTreeMap;
use alloc::string::{String, ToString};
use alloc::vec::Vec;
use core::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{normalize_phrase, PhraseMatcher, Span};

/// Default lexicon file shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.txt");

/// Number of abnormality classes in the bundled lexicon.
pub const NUM_ABNORMALITIES: usize = 30;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LexiconError {
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: duplicate abnormality id {id}")]
    DuplicateId { line: usize, id: u8 },
    #[error("line {line}: empty synonym")]
    EmptySynonym { line: usize },
    #[error("abnormality ids must be contiguous from 0 (missing {0})")]
    MissingId(u8),
    #[error("line {line}: phrase {phrase:?} is already listed as {existing}")]
    RoleConflict { line: usize, phrase: String, existing: AttributeRole },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributeRole {
    Level,
    LocationPre,
    LocationPost,
    Type,
}

impl AttributeRole {
    pub const ALL: [AttributeRole; 4] = [
        AttributeRole::Level,
        AttributeRole::LocationPre,
        AttributeRole::LocationPost,
        AttributeRole::Type,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            AttributeRole::Level => "level",
            AttributeRole::LocationPre => "location_pre",
            AttributeRole::LocationPost => "location_post",
            AttributeRole::Type => "type",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        AttributeRole::ALL.into_iter().find(|r| r.as_str() == s)
    }

    fn index(self) -> usize {
        self as usize
    }
}

impl fmt::Display for AttributeRole {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AbnormalityEntry {
    pub id: u8,
    /// Canonical name used in questions and answers.
    pub name: String,
    /// Longest first, so no synonym is a substring of a later one.
    pub synonyms: Vec<String>,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttributeLexicon {
    pub levels: Vec<String>,
    pub locations_pre: Vec<String>,
    pub locations_post: Vec<String>,
    pub types: Vec<String>,
}

impl AttributeLexicon {
    pub fn phrases(&self, role: AttributeRole) -> &[String] {
        match role {
            AttributeRole::Level => &self.levels,
            AttributeRole::LocationPre => &self.locations_pre,
            AttributeRole::LocationPost => &self.locations_post,
            AttributeRole::Type => &self.types,
        }
    }

    fn phrases_mut(&mut self, role: AttributeRole) -> &mut Vec<String> {
        match role {
            AttributeRole::Level => &mut self.levels,
            AttributeRole::LocationPre => &mut self.locations_pre,
            AttributeRole::LocationPost => &mut self.locations_post,
            AttributeRole::Type => &mut self.types,
        }
    }

    pub fn role_of(&self, phrase: &str) -> Option<AttributeRole> {
        AttributeRole::ALL
            .into_iter()
            .find(|&r| self.phrases(r).iter().any(|p| p == phrase))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AbnormalityMatch {
    pub span: Span,
    pub id: u8,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttributeMatch<'a> {
    pub span: Span,
    pub role: AttributeRole,
    pub phrase: &'a str,
}

/// Immutable after construction; matchers are precompiled.
#[derive(Clone, Debug)]
pub struct Lexicon {
    pub abnormalities: Vec<AbnormalityEntry>,
    pub attributes: AttributeLexicon,
    abnormality_matcher: PhraseMatcher,
    role_matchers: [PhraseMatcher; 4],
    attribute_matcher: PhraseMatcher,
    // Flattened (role, phrase) table indexed by attribute_matcher keys.
    attribute_keys: Vec<(AttributeRole, String)>,
}

impl PartialEq for Lexicon {
    fn eq(&self, other: &Self) -> bool {
        self.abnormalities == other.abnormalities && self.attributes == other.attributes
    }
}

impl Lexicon {
    /// Parses the bundled tables.
    pub fn bundled() -> Lexicon {
        Lexicon::parse(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn parse(src: &str) -> Result<Lexicon, LexiconError> {
        let mut abnormalities: BTreeMap<u8, AbnormalityEntry> = BTreeMap::new();
        let mut attributes = AttributeLexicon::default();
        let mut seen_roles: BTreeMap<String, AttributeRole> = BTreeMap::new();

        for (idx, raw) in src.lines().enumerate() {
            let line_no = idx + 1;
            let line = match raw.find('#') {
                Some(p) => &raw[..p],
                None => raw,
            }
            .trim();
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('|');
            let head = fields.next().unwrap_or("").trim();
            let body = fields.next().ok_or_else(|| LexiconError::Parse {
                line: line_no,
                message: "expected `id|synonyms` or `role|phrase`".to_string(),
            })?;
            let extra = fields.next();
            if fields.next().is_some() {
                return Err(LexiconError::Parse { line: line_no, message: "too many `|` fields".to_string() });
            }

            if let Some(role) = AttributeRole::parse(head) {
                if extra.is_some() {
                    return Err(LexiconError::Parse {
                        line: line_no,
                        message: "attribute lines take a single phrase".to_string(),
                    });
                }
                let phrase = normalize_phrase(body).to_lowercase();
                if phrase.is_empty() {
                    return Err(LexiconError::EmptySynonym { line: line_no });
                }
                match seen_roles.get(&phrase) {
                    Some(&existing) if existing != role => {
                        return Err(LexiconError::RoleConflict { line: line_no, phrase, existing });
                    }
                    // Repeated phrase within a role: keep the first.
                    Some(_) => {}
                    None => {
                        seen_roles.insert(phrase.clone(), role);
                        attributes.phrases_mut(role).push(phrase);
                    }
                }
                continue;
            }

            let id: u8 = head.parse().map_err(|_| LexiconError::Parse {
                line: line_no,
                message: alloc::format!("unknown role or id {head:?}"),
            })?;
            if abnormalities.contains_key(&id) {
                return Err(LexiconError::DuplicateId { line: line_no, id });
            }
            let mut synonyms = Vec::new();
            for raw_syn in body.split(';') {
                let syn = normalize_phrase(raw_syn).to_lowercase();
                if syn.is_empty() {
                    return Err(LexiconError::EmptySynonym { line: line_no });
                }
                if !synonyms.contains(&syn) {
                    synonyms.push(syn);
                }
            }
            let name = match extra {
                Some(n) => {
                    let n = normalize_phrase(n).to_lowercase();
                    if n.is_empty() {
                        return Err(LexiconError::Parse { line: line_no, message: "empty canonical name".to_string() });
                    }
                    n
                }
                None => synonyms[0].clone(),
            };
            // Stable sort keeps the table's order among equal lengths.
            synonyms.sort_by(|a, b| b.len().cmp(&a.len()));
            abnormalities.insert(id, AbnormalityEntry { id, name, synonyms });
        }

        for (expected, &id) in abnormalities.keys().enumerate() {
            if id as usize != expected {
                return Err(LexiconError::MissingId(expected as u8));
            }
        }
        Ok(Lexicon::from_parts(abnormalities.into_values().collect(), attributes))
    }

    fn from_parts(abnormalities: Vec<AbnormalityEntry>, attributes: AttributeLexicon) -> Lexicon {
        let abnormality_matcher = PhraseMatcher::new(
            abnormalities
                .iter()
                .flat_map(|e| e.synonyms.iter().map(move |s| (s.clone(), e.id as usize))),
        );
        let role_matchers = AttributeRole::ALL.map(|role| {
            PhraseMatcher::new(attributes.phrases(role).iter().enumerate().map(|(i, p)| (p.clone(), i)))
        });
        let attribute_keys: Vec<(AttributeRole, String)> = AttributeRole::ALL
            .into_iter()
            .flat_map(|r| attributes.phrases(r).iter().map(move |p| (r, p.clone())))
            .collect();
        let attribute_matcher =
            PhraseMatcher::new(attribute_keys.iter().enumerate().map(|(i, (_, p))| (p.clone(), i)));
        Lexicon { abnormalities, attributes, abnormality_matcher, role_matchers, attribute_matcher, attribute_keys }
    }

    pub fn len(&self) -> usize {
        self.abnormalities.len()
    }

    pub fn is_empty(&self) -> bool {
        self.abnormalities.is_empty()
    }

    pub fn entry(&self, id: u8) -> Option<&AbnormalityEntry> {
        self.abnormalities.get(id as usize)
    }

    /// Canonical name of an abnormality id.
    pub fn name(&self, id: u8) -> Option<&str> {
        self.entry(id).map(|e| e.name.as_str())
    }

    pub fn id_by_name(&self, name: &str) -> Option<u8> {
        self.abnormalities.iter().find(|e| e.name == name).map(|e| e.id)
    }

    /// Non-overlapping abnormality mentions in lowercase `text`, left to right.
    pub fn match_abnormalities(&self, text: &str) -> Vec<AbnormalityMatch> {
        self.abnormality_matcher
            .find_all(text, &[])
            .into_iter()
            .map(|(span, key)| AbnormalityMatch { span, id: key as u8 })
            .collect()
    }

    /// Matches of a single attribute role.
    pub fn match_attribute(&self, text: &str, role: AttributeRole) -> Vec<AttributeMatch<'_>> {
        let phrases = self.attributes.phrases(role);
        self.role_matchers[role.index()]
            .find_all(text, &[])
            .into_iter()
            .map(|(span, key)| AttributeMatch { span, role, phrase: phrases[key].as_str() })
            .collect()
    }

    /// Matches across all attribute roles at once, outside `exclude`.
    pub fn match_all_attributes(&self, text: &str, exclude: &[Span]) -> Vec<AttributeMatch<'_>> {
        self.attribute_matcher
            .find_all(text, exclude)
            .into_iter()
            .map(|(span, key)| {
                let (role, phrase) = &self.attribute_keys[key];
                AttributeMatch { span, role: *role, phrase: phrase.as_str() }
            })
            .collect()
    }
}
