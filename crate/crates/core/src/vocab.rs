//! Token inventory with reserved specials.

use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use crate::{Error, Result};

pub type Token = u32;

pub const PAD: Token = 0;
pub const BOS: Token = 1;
pub const EOS: Token = 2;
pub const SEP: Token = 3;
pub const FIRST_SYMBOL: Token = 4;

pub fn is_special(t: Token) -> bool {
    t < FIRST_SYMBOL
}

/// Reserved ids `PAD=0, BOS=1, EOS=2, SEP=3`, then symbols `4..size`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    names: Vec<String>,
}

impl Vocab {
    pub const SPECIAL_NAMES: [&'static str; 4] = ["<pad>", "<bos>", "<eos>", "||"];

    /// Symbols are named `a`, `b`, ... and `t26`, `t27`, ... past `z`.
    pub fn new(size: usize) -> Result<Self> {
        if size <= FIRST_SYMBOL as usize {
            return Err(Error::Config(format!("vocab size {size} leaves no symbols")));
        }
        let mut names: Vec<String> = Self::SPECIAL_NAMES.iter().map(|s| s.to_string()).collect();
        for i in 0..size - FIRST_SYMBOL as usize {
            names.push(if i < 26 { ((b'a' + i as u8) as char).to_string() } else { format!("t{i}") });
        }
        Ok(Self { names })
    }

    /// Builds a vocab from an explicit id→name list (specials first).
    pub fn from_names(names: Vec<String>) -> Result<Self> {
        if names.len() <= FIRST_SYMBOL as usize {
            return Err(Error::Config("vocab has no symbols".into()));
        }
        for (i, s) in Self::SPECIAL_NAMES.iter().enumerate() {
            if names[i] != *s {
                return Err(Error::Config(format!("id {i} must be {s}, found {}", names[i])));
            }
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!("id {i}: name must be non-empty and printable")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate name {n}")));
            }
        }
        Ok(Self { names })
    }

    pub fn size(&self) -> usize {
        self.names.len()
    }

    pub fn n_symbols(&self) -> usize {
        self.names.len() - FIRST_SYMBOL as usize
    }

    pub fn symbols(&self) -> impl Iterator<Item = Token> + '_ {
        FIRST_SYMBOL..self.names.len() as Token
    }

    pub fn name(&self, id: Token) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, name: &str) -> Option<Token> {
        self.names.iter().position(|n| n == name).map(|i| i as Token)
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    /// Space-joined names, e.g. `"a b || c"`.
    pub fn render(&self, tokens: &[Token]) -> String {
        let parts: Vec<&str> = tokens.iter().map(|&t| self.name(t).unwrap_or("?")).collect();
        parts.join(" ")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_and_bijection() {
        let v = Vocab::new(40).unwrap();
        assert_eq!(v.id("||"), Some(SEP));
        assert_eq!(v.name(FIRST_SYMBOL), Some("a"));
        for id in 0..40 {
            assert_eq!(v.id(v.name(id).unwrap()), Some(id));
        }
        assert_eq!(v.n_symbols(), 36);
        assert!(Vocab::new(4).is_err());
        assert_eq!(Vocab::from_names(v.names().to_vec()).unwrap(), v);
    }
}
