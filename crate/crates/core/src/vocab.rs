//! Character inventory shared by the corpus generator and the text encoder.

use crate::error::{Error, Result};

/// 26 letters, 10 digits and 7 punctuation/space symbols.
pub const SYMBOLS: &str = "abcdefghijklmnopqrstuvwxyz0123456789 .,!?'-";

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    symbols: Vec<char>,
}

impl Vocabulary {
    /// The first `size` entries of [`SYMBOLS`].
    pub fn new(size: usize) -> Result<Self> {
        let all: Vec<char> = SYMBOLS.chars().collect();
        if size == 0 || size > all.len() {
            return Err(Error::Config(format!("vocabulary size must be in 1..={}, got {size}", all.len())));
        }
        Ok(Self {
            symbols: all[..size].to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.symbols.len()
    }

    pub fn is_empty(&self) -> bool {
        self.symbols.is_empty()
    }

    pub fn symbol(&self, id: usize) -> char {
        self.symbols[id]
    }

    pub fn encode(&self, text: &str) -> Result<Vec<usize>> {
        let mut ids = Vec::with_capacity(text.len());
        let mut unknown = Vec::new();
        for c in text.chars() {
            match self.symbols.iter().position(|&s| s == c) {
                Some(i) => ids.push(i),
                None if !unknown.contains(&c) => unknown.push(c),
                None => {}
            }
        }
        if !unknown.is_empty() {
            return Err(Error::UnknownSymbol(unknown));
        }
        Ok(ids)
    }

    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter().map(|&i| self.symbols[i]).collect()
    }
}
