//! Atom tokenizer for the tool-call protocol.
//!
//! The vocabulary holds special tokens, protocol markers, JSON punctuation,
//! tool-call keywords, digits, the target field key and its answer labels.
//! Encoding is greedy longest-match; each maximal run of characters that no
//! atom covers becomes a single `UNK`.

use std::collections::HashMap;

use crate::schema::{Family, TraitField};

pub const PAD: u32 = 0;
pub const EOS: u32 = 1;
pub const UNK: u32 = 2;
pub const CALL_OPEN: u32 = 3;
pub const CALL_CLOSE: u32 = 4;

pub const CALL_OPEN_TEXT: &str = "<tool_call>";
pub const CALL_CLOSE_TEXT: &str = "</tool_call>";
const UNK_TEXT: &str = "\u{fffd}";

const BASE_ATOMS: [&str; 18] = [
    "<pad>",
    "<eos>",
    "<unk>",
    CALL_OPEN_TEXT,
    CALL_CLOSE_TEXT,
    "{",
    "}",
    "[",
    "]",
    ":",
    ",",
    "\"name\"",
    "\"arguments\"",
    "\"rag_tool\"",
    "\"gem_tool\"",
    "\"handle\"",
    "\"self\"",
    "\"config_id\"",
];
const SPECIAL: usize = 3;

#[derive(Clone, Debug)]
pub struct Tokenizer {
    atoms: Vec<String>,
    by_text: HashMap<String, u32>,
    /// Matchable atom ids, longest text first.
    match_order: Vec<u32>,
}

impl Tokenizer {
    pub fn from_atoms(extra: impl IntoIterator<Item = String>) -> Tokenizer {
        let mut atoms: Vec<String> = BASE_ATOMS.iter().map(|s| s.to_string()).collect();
        atoms.extend((0..10).map(|d| d.to_string()));
        for a in extra {
            if !atoms.contains(&a) {
                atoms.push(a);
            }
        }
        let by_text = atoms.iter().enumerate().map(|(i, a)| (a.clone(), i as u32)).collect();
        let mut match_order: Vec<u32> = (SPECIAL as u32..atoms.len() as u32).collect();
        match_order.sort_by_key(|&i| std::cmp::Reverse(atoms[i as usize].len()));
        Tokenizer { atoms, by_text, match_order }
    }

    /// Base atoms plus the field key and, for label families, one atom per
    /// answer label as it appears in JSON.
    pub fn for_field(field: &TraitField) -> Tokenizer {
        let mut extra = vec![format!("\"{}\"", field.name())];
        match field.family() {
            Family::Boolean => extra.extend(["true".to_string(), "false".to_string()]),
            Family::Categorical | Family::MultiLabel => {
                extra.extend(field.labels().iter().map(|l| serde_json::to_string(l).unwrap()))
            }
            Family::Interval | Family::Optimum => {}
        }
        Tokenizer::from_atoms(extra)
    }

    pub fn vocab_size(&self) -> usize {
        self.atoms.len()
    }

    pub fn atom(&self, id: u32) -> &str {
        &self.atoms[id as usize]
    }

    pub fn id(&self, atom: &str) -> Option<u32> {
        self.by_text.get(atom).copied()
    }

    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = Vec::new();
        let mut rest = text;
        let mut in_unk = false;
        while !rest.is_empty() {
            match self.match_order.iter().find(|&&i| rest.starts_with(self.atoms[i as usize].as_str())) {
                Some(&i) => {
                    ids.push(i);
                    rest = &rest[self.atoms[i as usize].len()..];
                    in_unk = false;
                }
                None => {
                    if !in_unk {
                        ids.push(UNK);
                        in_unk = true;
                    }
                    let ch = rest.chars().next().unwrap();
                    rest = &rest[ch.len_utf8()..];
                }
            }
        }
        ids
    }

    /// Text of `ids`; PAD and EOS render as nothing, UNK as U+FFFD.
    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .map(|&i| match i {
                PAD | EOS => "",
                UNK => UNK_TEXT,
                _ => self.atoms.get(i as usize).map_or(UNK_TEXT, String::as_str),
            })
            .collect()
    }
}
