use std::collections::{BTreeMap, HashMap};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;
pub const BOS: u32 = 2;
const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<bos>"];

/// Closed word vocabulary; ids are contiguous from 0 with the reserved
/// tokens first.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocab {
    tokens: Vec<String>,
    ids: HashMap<String, u32>,
}

impl Vocab {
    /// Reserved tokens followed by `words` in the given order.
    pub fn new<I, S>(words: I) -> Result<Self>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        tokens.extend(words.into_iter().map(Into::into));
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if t.is_empty() || t.chars().any(char::is_whitespace) {
                return Err(Error::Data(format!("invalid vocabulary word {t:?}")));
            }
            if ids.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary word {t:?}")));
            }
        }
        Ok(Vocab { tokens, ids })
    }

    pub const fn reserved() -> usize {
        RESERVED.len()
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(String::as_str)
    }

    pub fn is_reserved(id: u32) -> bool {
        (id as usize) < RESERVED.len()
    }

    pub fn to_json(&self) -> String {
        let map: BTreeMap<&str, u32> = self.ids.iter().map(|(k, &v)| (k.as_str(), v)).collect();
        serde_json::to_string_pretty(&map).expect("vocab serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let map: BTreeMap<String, u32> =
            serde_json::from_str(text).map_err(|e| Error::Data(format!("vocab.json: {e}")))?;
        let mut tokens = vec![String::new(); map.len()];
        for (tok, id) in map {
            let slot = tokens
                .get_mut(id as usize)
                .ok_or_else(|| Error::Data(format!("vocab.json: id {id} is not contiguous")))?;
            *slot = tok;
        }
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED {
            return Err(Error::Data("vocab.json: reserved ids 0..3 are wrong".into()));
        }
        Vocab::new(tokens.into_iter().skip(RESERVED.len()))
    }
}

/// Whitespace-split `text`, mapping unknown words to UNK, with BOS prepended.
pub fn tokenize(text: &str, vocab: &Vocab) -> Vec<u32> {
    std::iter::once(BOS)
        .chain(text.split_whitespace().map(|w| vocab.id(w).unwrap_or(UNK)))
        .collect()
}

/// Inverse of [`tokenize`] for in-vocabulary text; BOS is dropped.
pub fn detokenize(ids: &[u32], vocab: &Vocab) -> String {
    ids.iter()
        .filter(|&&id| id != BOS)
        .map(|&id| vocab.token(id).unwrap_or(RESERVED[UNK as usize]))
        .collect::<Vec<_>>()
        .join(" ")
}
