use std::collections::BTreeMap;

use crate::error::{Error, Result};

/// Character-level vocabulary over the decimal-comparison alphabet.
///
/// Every symbol is a single character, so tokenization is a per-character
/// lookup and operand structure stays explicit.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SyntheticVocab {
    symbols: Vec<char>,
    ids: BTreeMap<char, u32>,
}

/// Format and control markers.
pub mod marker {
    pub const Q: char = 'Q';
    pub const A: char = 'A';
    pub const ANS: char = '=';
    pub const CHAT_OPEN: char = '[';
    pub const CHAT_CLOSE: char = ']';
    pub const END: char = '$';
}

const SYMBOLS: [char; 20] = [
    '0',
    '1',
    '2',
    '3',
    '4',
    '5',
    '6',
    '7',
    '8',
    '9',
    '.',
    ' ',
    ':',
    '?',
    marker::Q,
    marker::A,
    marker::ANS,
    marker::CHAT_OPEN,
    marker::CHAT_CLOSE,
    marker::END,
];

impl Default for SyntheticVocab {
    fn default() -> Self {
        Self::new()
    }
}

impl SyntheticVocab {
    pub fn new() -> Self {
        let symbols = SYMBOLS.to_vec();
        let ids = symbols
            .iter()
            .enumerate()
            .map(|(i, &c)| (c, i as u32))
            .collect();
        Self { symbols, ids }
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn id(&self, symbol: char) -> Result<u32> {
        self.ids
            .get(&symbol)
            .copied()
            .ok_or(Error::UnknownSymbol(symbol))
    }

    pub fn symbol(&self, id: u32) -> Option<char> {
        self.symbols.get(id as usize).copied()
    }

    pub fn end_token(&self) -> u32 {
        self.ids[&marker::END]
    }

    pub fn tokenize(&self, text: &str) -> Result<Vec<u32>> {
        text.chars().map(|c| self.id(c)).collect()
    }

    pub fn detokenize(&self, tokens: &[u32]) -> Result<String> {
        tokens
            .iter()
            .map(|&t| {
                self.symbol(t).ok_or(Error::TokenOutOfRange {
                    id: t,
                    vocab: self.len(),
                })
            })
            .collect()
    }

    pub fn symbols(&self) -> &[char] {
        &self.symbols
    }
}
