//! Vocabulary and token sequences for the text side.
//!
//! The vocabulary file is UTF-8, one token per line, with the first four
//! lines reserved for `[PAD]`, `[CLS]`, `[DEC]`, `[MASK]` in that order.

use std::collections::HashMap;
use std::io::BufRead;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const CLS_ID: usize = 1;
pub const DEC_ID: usize = 2;
pub const MASK_ID: usize = 3;

pub const SPECIAL_TOKENS: [&str; 4] = ["[PAD]", "[CLS]", "[DEC]", "[MASK]"];

/// Ordered token list with reserved specials at ids 0..=3.
#[derive(Debug, Clone, PartialEq)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocab {
    pub fn new(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIAL_TOKENS.len() {
            return Err(Error::Tokenize {
                what: "vocabulary must start with the four reserved tokens".into(),
            });
        }
        for (i, want) in SPECIAL_TOKENS.iter().enumerate() {
            if tokens[i] != *want {
                return Err(Error::Tokenize {
                    what: format!("vocabulary line {i} must be {want}, got {:?}", tokens[i]),
                });
            }
        }
        let mut index = HashMap::new();
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(Error::Tokenize {
                    what: format!("duplicate vocabulary token {t:?}"),
                });
            }
        }
        Ok(Vocab { tokens, index })
    }

    /// Build from plain words; the reserved specials are prepended.
    pub fn from_words(words: &[&str]) -> Result<Vocab> {
        let mut tokens: Vec<String> = SPECIAL_TOKENS.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.iter().map(|s| s.to_string()));
        Vocab::new(tokens)
    }

    pub fn parse<R: BufRead>(reader: R) -> Result<Vocab> {
        let mut tokens = Vec::new();
        for line in reader.lines() {
            let line = line?;
            let t = line.trim();
            if !t.is_empty() {
                tokens.push(t.to_string());
            }
        }
        Vocab::new(tokens)
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        Vocab::parse(std::io::BufReader::new(std::fs::File::open(path)?))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for t in &self.tokens {
            writeln!(f, "{t}")?;
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(|s| s.as_str())
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Role of one sequence position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TokenKind {
    Cls,
    Dec,
    Mask,
    Pad,
    Word,
}

/// Parallel ids/kinds with at most one leading CLS or DEC at position 0.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub kinds: Vec<TokenKind>,
}

impl TokenSequence {
    pub fn new(ids: Vec<usize>, kinds: Vec<TokenKind>) -> Result<TokenSequence> {
        if ids.len() != kinds.len() {
            return Err(Error::Contract {
                what: format!("{} ids vs {} kinds", ids.len(), kinds.len()),
            });
        }
        for (i, k) in kinds.iter().enumerate() {
            let head = matches!(k, TokenKind::Cls | TokenKind::Dec);
            if head && i != 0 {
                return Err(Error::Contract {
                    what: format!("CLS/DEC token at position {i}; only position 0 is allowed"),
                });
            }
            let id_ok = match k {
                TokenKind::Cls => ids[i] == CLS_ID,
                TokenKind::Dec => ids[i] == DEC_ID,
                TokenKind::Mask => ids[i] == MASK_ID,
                TokenKind::Pad => ids[i] == PAD_ID,
                TokenKind::Word => ids[i] > MASK_ID,
            };
            if !id_ok {
                return Err(Error::Contract {
                    what: format!("token id {} does not match kind {:?} at position {i}", ids[i], k),
                });
            }
        }
        Ok(TokenSequence { ids, kinds })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn starts_with_dec(&self) -> bool {
        self.kinds.first() == Some(&TokenKind::Dec)
    }

    /// Same word tokens with the leading special swapped for DEC.
    pub fn with_leading_dec(&self) -> Result<TokenSequence> {
        let mut ids = self.ids.clone();
        let mut kinds = self.kinds.clone();
        match kinds.first() {
            Some(TokenKind::Cls) | Some(TokenKind::Dec) => {
                ids[0] = DEC_ID;
                kinds[0] = TokenKind::Dec;
            }
            _ => {
                ids.insert(0, DEC_ID);
                kinds.insert(0, TokenKind::Dec);
            }
        }
        TokenSequence::new(ids, kinds)
    }

    pub fn padded_to(&self, len: usize) -> Result<TokenSequence> {
        if len < self.len() {
            return Err(Error::Contract {
                what: format!("cannot pad length {} down to {len}", self.len()),
            });
        }
        let mut ids = self.ids.clone();
        let mut kinds = self.kinds.clone();
        ids.resize(len, PAD_ID);
        kinds.resize(len, TokenKind::Pad);
        TokenSequence::new(ids, kinds)
    }
}

/// Lowercase whitespace tokenizer with a leading CLS. Words beyond
/// `max_len - 1` are truncated; words outside the vocabulary are rejected.
pub fn tokenize(vocab: &Vocab, text: &str, max_len: usize) -> Result<TokenSequence> {
    if max_len < 2 {
        return Err(Error::Contract {
            what: "max_len must be at least 2".into(),
        });
    }
    let mut ids = vec![CLS_ID];
    let mut kinds = vec![TokenKind::Cls];
    for word in text.split_whitespace() {
        if ids.len() >= max_len {
            break;
        }
        let lower = word.to_lowercase();
        let id = vocab.id(&lower).ok_or_else(|| Error::Tokenize {
            what: format!("word {lower:?} is not in the vocabulary"),
        })?;
        if id <= MASK_ID {
            return Err(Error::Tokenize {
                what: format!("reserved token {lower:?} cannot appear in a caption"),
            });
        }
        ids.push(id);
        kinds.push(TokenKind::Word);
    }
    TokenSequence::new(ids, kinds)
}

/// Replace each word position independently by `[MASK]` with probability
/// `ratio` under a seeded generator. Special positions are never masked.
/// Returns the masked sequence and the masked positions.
pub fn mask_text(seq: &TokenSequence, ratio: f64, seed: u64) -> Result<(TokenSequence, Vec<usize>)> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Parameter {
            what: format!("mask ratio must lie in [0, 1], got {ratio}"),
        });
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut ids = seq.ids.clone();
    let mut kinds = seq.kinds.clone();
    let mut positions = Vec::new();
    for i in 0..seq.len() {
        if kinds[i] == TokenKind::Word {
            let draw: f64 = rng.gen();
            if draw < ratio {
                ids[i] = MASK_ID;
                kinds[i] = TokenKind::Mask;
                positions.push(i);
            }
        }
    }
    Ok((TokenSequence::new(ids, kinds)?, positions))
}
