//! Closed vocabulary, instruction templates and referent resolution.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::Rng;

use super::scene::{Color, ObjectRecord, Shape};
use crate::error::{Error, Result};

pub const MAX_TOKENS: usize = 20;
pub const PAD_ID: u32 = 0;

const FUNCTION_WORDS: [&str; 11] = ["pick", "up", "grasp", "the", "left", "right", "of", "above", "below", "that", "is"];

/// Objects closer than this along an axis are not ordered by a relation.
const RELATION_MARGIN: f64 = 1.0;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    words: Vec<String>,
    ids: BTreeMap<String, u32>,
}

impl Vocab {
    /// `<pad>`, function words, colors, shapes.
    pub fn standard() -> Self {
        let mut words = vec!["<pad>".to_string()];
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));
        words.extend(Color::ALL.iter().map(|c| c.name().to_string()));
        words.extend(Shape::ALL.iter().map(|s| s.name().to_string()));
        Vocab::from_words(words).expect("standard vocabulary is unique")
    }

    pub fn from_words(words: Vec<String>) -> Result<Self> {
        let ids: BTreeMap<String, u32> = words.iter().enumerate().map(|(i, w)| (w.clone(), i as u32)).collect();
        if ids.len() != words.len() {
            return Err(Error::Config("duplicate vocabulary entry".into()));
        }
        Ok(Vocab { words, ids })
    }

    /// Rebuilds from a word→id map whose ids must be dense `0..n`.
    pub fn from_map(map: &BTreeMap<String, u32>) -> Result<Self> {
        let mut words = vec![None; map.len()];
        for (w, &id) in map {
            match words.get_mut(id as usize) {
                Some(slot @ None) => *slot = Some(w.clone()),
                _ => return Err(Error::Format(format!("vocabulary id {id} for '{w}' is out of range or repeated"))),
            }
        }
        Vocab::from_words(words.into_iter().map(|w| w.expect("dense ids")).collect())
    }

    /// Rejects non-empty maps whose ids are not dense `0..n`.
    pub fn check(map: &BTreeMap<String, u32>) -> Result<()> {
        if map.is_empty() {
            return Ok(());
        }
        Vocab::from_map(map).map(|_| ())
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn map(&self) -> &BTreeMap<String, u32> {
        &self.ids
    }

    pub fn id(&self, word: &str) -> Option<u32> {
        self.ids.get(word).copied()
    }

    pub fn word(&self, id: u32) -> Option<&str> {
        self.words.get(id as usize).map(String::as_str)
    }

    /// Whitespace tokenization padded with [`PAD_ID`] to [`MAX_TOKENS`].
    pub fn encode(&self, text: &str) -> Result<Vec<u32>> {
        let mut ids = Vec::with_capacity(MAX_TOKENS);
        for w in text.split_whitespace() {
            ids.push(self.id(w).ok_or_else(|| Error::Domain(format!("word '{w}' is not in the vocabulary")))?);
        }
        if ids.len() > MAX_TOKENS {
            return Err(Error::TokenOverflow(ids.len()));
        }
        ids.resize(MAX_TOKENS, PAD_ID);
        Ok(ids)
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD_ID)
            .map(|&i| self.word(i).unwrap_or("<unk>"))
            .collect::<Vec<_>>()
            .join(" ")
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Relation {
    LeftOf,
    RightOf,
    Above,
    Below,
}

impl Relation {
    pub const ALL: [Relation; 4] = [Relation::LeftOf, Relation::RightOf, Relation::Above, Relation::Below];

    pub fn phrase(self) -> &'static str {
        match self {
            Relation::LeftOf => "left of",
            Relation::RightOf => "right of",
            Relation::Above => "above",
            Relation::Below => "below",
        }
    }

    /// Image coordinates: y grows downwards.
    pub fn holds(self, o: &ObjectRecord, anchor: &ObjectRecord) -> bool {
        match self {
            Relation::LeftOf => o.cx < anchor.cx - RELATION_MARGIN,
            Relation::RightOf => o.cx > anchor.cx + RELATION_MARGIN,
            Relation::Above => o.cy < anchor.cy - RELATION_MARGIN,
            Relation::Below => o.cy > anchor.cy + RELATION_MARGIN,
        }
    }
}

/// Parsed referring expression.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Expression {
    Attribute { color: Color, shape: Shape },
    Relational { shape: Shape, relation: Relation, anchor_color: Color, anchor_shape: Shape },
}

impl Expression {
    pub fn phrase(&self) -> String {
        match self {
            Expression::Attribute { color, shape } => format!("{} {}", color.name(), shape.name()),
            Expression::Relational { shape, relation, anchor_color, anchor_shape } => {
                format!("{} {} the {} {}", shape.name(), relation.phrase(), anchor_color.name(), anchor_shape.name())
            }
        }
    }

    /// Indices of every object the expression can denote.
    pub fn referents(&self, objects: &[ObjectRecord]) -> Vec<usize> {
        match *self {
            Expression::Attribute { color, shape } => (0..objects.len()).filter(|&i| objects[i].color == color && objects[i].shape == shape).collect(),
            Expression::Relational { shape, relation, anchor_color, anchor_shape } => {
                let anchors = Expression::Attribute { color: anchor_color, shape: anchor_shape }.referents(objects);
                let [a] = anchors[..] else {
                    return Vec::new();
                };
                (0..objects.len())
                    .filter(|&i| i != a && objects[i].shape == shape && relation.holds(&objects[i], &objects[a]))
                    .collect()
            }
        }
    }

    pub fn unique_referent(&self, objects: &[ObjectRecord]) -> Option<usize> {
        match self.referents(objects)[..] {
            [i] => Some(i),
            _ => None,
        }
    }
}

const PREFIXES: [&str; 3] = ["pick the", "pick up the", "grasp the"];

/// Parses any instruction produced by [`make_instruction`].
pub fn parse_instruction(text: &str) -> Result<Expression> {
    let words: Vec<&str> = text.split_whitespace().collect();
    let bad = || Error::Domain(format!("unrecognized instruction '{text}'"));
    let rest = PREFIXES
        .iter()
        .rev()
        .find_map(|p| {
            let pw: Vec<&str> = p.split_whitespace().collect();
            words.starts_with(&pw).then(|| &words[pw.len()..])
        })
        .ok_or_else(bad)?;
    let color = |w: &str| Color::ALL.into_iter().find(|c| c.name() == w);
    let shape = |w: &str| Shape::ALL.into_iter().find(|s| s.name() == w);
    match rest {
        [c, s] => Ok(Expression::Attribute {
            color: color(c).ok_or_else(bad)?,
            shape: shape(s).ok_or_else(bad)?,
        }),
        [s, middle @ .., "the", c, s2] => {
            let middle = middle.strip_prefix(&["that", "is"][..]).unwrap_or(middle);
            let phrase = middle.join(" ");
            let relation = Relation::ALL.into_iter().find(|r| r.phrase() == phrase).ok_or_else(bad)?;
            Ok(Expression::Relational {
                shape: shape(s).ok_or_else(bad)?,
                relation,
                anchor_color: color(c).ok_or_else(bad)?,
                anchor_shape: shape(s2).ok_or_else(bad)?,
            })
        }
        _ => Err(bad()),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub text: String,
    pub tokens: Vec<u32>,
    pub target: usize,
}

/// Expressions that single out `target`, attribute form first.
pub fn expressions_for(objects: &[ObjectRecord], target: usize) -> Vec<Expression> {
    let t = &objects[target];
    let mut out = Vec::new();
    let attr = Expression::Attribute { color: t.color, shape: t.shape };
    if attr.unique_referent(objects) == Some(target) {
        out.push(attr);
    }
    for (a, anchor) in objects.iter().enumerate() {
        if a == target {
            continue;
        }
        for relation in Relation::ALL {
            let e = Expression::Relational {
                shape: t.shape,
                relation,
                anchor_color: anchor.color,
                anchor_shape: anchor.shape,
            };
            if e.unique_referent(objects) == Some(target) {
                out.push(e);
            }
        }
    }
    out
}

/// Picks a target among `candidates` and a referring expression that
/// identifies it uniquely. Attribute phrasing is preferred when available.
pub fn make_instruction<R: Rng>(objects: &[ObjectRecord], candidates: &[usize], vocab: &Vocab, rng: &mut R) -> Result<Instruction> {
    let mut order = candidates.to_vec();
    order.shuffle(rng);
    for target in order {
        let exprs = expressions_for(objects, target);
        if exprs.is_empty() {
            continue;
        }
        // relational phrasing only when colour and shape do not single out the target
        let expr = if matches!(exprs[0], Expression::Attribute { .. }) {
            exprs[0]
        } else {
            exprs[rng.random_range(0..exprs.len())]
        };
        let prefix = PREFIXES[rng.random_range(0..PREFIXES.len())];
        let text = match expr {
            Expression::Relational { shape, relation, anchor_color, anchor_shape } if rng.random_bool(0.5) => format!(
                "{prefix} {} that is {} the {} {}",
                shape.name(),
                relation.phrase(),
                anchor_color.name(),
                anchor_shape.name()
            ),
            _ => format!("{prefix} {}", expr.phrase()),
        };
        let tokens = vocab.encode(&text)?;
        return Ok(Instruction { text, tokens, target });
    }
    Err(Error::Ambiguity)
}
