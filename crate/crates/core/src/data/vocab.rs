use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Dataset, PosTag, QueryAnnotation};
use crate::error::{Error, Result};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
/// Stands in for an empty noun-only or verb-only query.
pub const EMPTY_ID: usize = 2;

const RESERVED: [&str; 3] = ["<pad>", "<unk>", "<empty>"];

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    tokens: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

/// Token ids padded to a fixed length plus the validity mask.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct EncodedQuery {
    pub ids: Vec<usize>,
    pub mask: Vec<bool>,
}

impl Vocab {
    pub fn from_tokens<'a>(tokens: impl IntoIterator<Item = &'a str>) -> Self {
        let mut words: Vec<&str> = tokens.into_iter().collect();
        words.sort_unstable();
        words.dedup();
        let mut all: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        all.extend(words.into_iter().filter(|w| !RESERVED.contains(w)).map(String::from));
        Self::from_list(all)
    }

    pub fn from_dataset(ds: &Dataset) -> Self {
        Self::from_tokens(ds.samples.iter().flat_map(|s| s.query.tokens.iter().map(String::as_str)))
    }

    fn from_list(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(RESERVED[UNK_ID], String::as_str)
    }

    /// Ids truncated or padded to `max_len`. An empty token list becomes the
    /// single `<empty>` token.
    pub fn encode<S: AsRef<str>>(&self, tokens: &[S], max_len: usize) -> EncodedQuery {
        let mut ids: Vec<usize> = tokens.iter().take(max_len).map(|t| self.id(t.as_ref())).collect();
        if ids.is_empty() {
            ids.push(EMPTY_ID);
        }
        let n = ids.len();
        ids.resize(max_len.max(1), PAD_ID);
        let mut mask = vec![false; ids.len()];
        mask[..n].iter_mut().for_each(|m| *m = true);
        EncodedQuery { ids, mask }
    }

    pub fn encode_query(&self, q: &QueryAnnotation, max_len: usize) -> EncodedQuery {
        self.encode(&q.tokens, max_len)
    }

    /// Only the tokens tagged `which`, in query order.
    pub fn encode_pos(&self, q: &QueryAnnotation, which: PosTag, max_len: usize) -> EncodedQuery {
        self.encode(&q.tokens_with_tag(which), max_len)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let s = serde_json::to_string(&self.tokens)?;
        std::fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let tokens: Vec<String> = serde_json::from_str(&s)?;
        Self::from_saved(tokens).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    /// Rebuilds a vocabulary from its id-ordered token list.
    pub fn from_saved(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED.len() || tokens[..RESERVED.len()] != RESERVED.map(String::from) {
            return Err(Error::Format("vocabulary lacks reserved tokens".into()));
        }
        Ok(Self::from_list(tokens))
    }

    /// Tokens in id order.
    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}
