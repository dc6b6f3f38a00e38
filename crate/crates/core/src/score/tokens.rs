use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type TokenId = u32;

/// Integer caption. An empty sequence is the unconditional symbol.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct TokenSequence {
    tokens: Vec<TokenId>,
}

impl TokenSequence {
    pub fn new(tokens: Vec<TokenId>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::Condition(
                "empty caption; use TokenSequence::null() for the unconditional symbol".into(),
            ));
        }
        Ok(Self { tokens })
    }

    pub fn null() -> Self {
        Self { tokens: Vec::new() }
    }

    pub fn is_null(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn tokens(&self) -> &[TokenId] {
        &self.tokens
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn first(&self) -> Option<TokenId> {
        self.tokens.first().copied()
    }

    pub fn position(&self, token: TokenId) -> Option<usize> {
        self.tokens.iter().position(|&t| t == token)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocabulary {
    names: Vec<String>,
}

impl Vocabulary {
    pub fn new<S: Into<String>>(names: impl IntoIterator<Item = S>) -> Result<Self> {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() {
                return Err(Error::Config(format!("vocabulary entry {i} is empty")));
            }
            if names[..i].contains(n) {
                return Err(Error::Config(format!("duplicate vocabulary entry `{n}`")));
            }
        }
        Ok(Self { names })
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn id(&self, name: &str) -> Option<TokenId> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| i as TokenId)
    }

    pub fn name(&self, id: TokenId) -> Option<&str> {
        self.names.get(id as usize).map(String::as_str)
    }

    pub fn encode<S: AsRef<str>>(&self, words: &[S]) -> Result<TokenSequence> {
        if words.is_empty() {
            return Ok(TokenSequence::null());
        }
        let ids = words
            .iter()
            .map(|w| {
                self.id(w.as_ref())
                    .ok_or_else(|| Error::Condition(format!("unknown token `{}`", w.as_ref())))
            })
            .collect::<Result<Vec<_>>>()?;
        TokenSequence::new(ids)
    }

    pub fn decode(&self, seq: &TokenSequence) -> Vec<String> {
        seq.tokens()
            .iter()
            .map(|&t| self.name(t).unwrap_or("<unk>").to_string())
            .collect()
    }
}
