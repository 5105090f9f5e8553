use std::collections::BTreeSet;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::stable_hash;

use super::{tokenize, CorpusSet, CorpusSource, DomainCorpus, DomainRole, Vocab};

/// One plain-text domain: UTF-8, one paragraph per line.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IngestSource {
    pub domain_id: String,
    pub path: PathBuf,
    pub role: DomainRole,
}

/// Line hash bucket 0..=7 goes to train, 8 to dev, 9 to eval.
fn bucket(line: &str) -> usize {
    (stable_hash(&["split", line]) % 10) as usize
}

/// Reads every file, builds the vocabulary from all words (sorted), and
/// splits each domain 80/10/10 by line hash. Blank lines are skipped.
pub fn ingest_files(sources: &[IngestSource]) -> Result<CorpusSet> {
    let mut texts = Vec::with_capacity(sources.len());
    for src in sources {
        let raw = std::fs::read(&src.path).map_err(|e| Error::io(&src.path, e))?;
        let text =
            String::from_utf8(raw).map_err(|_| Error::Data(format!("{} is not valid UTF-8", src.path.display())))?;
        texts.push(text);
    }

    let words: BTreeSet<&str> = texts.iter().flat_map(|t| t.split_whitespace()).collect();
    let vocab = Vocab::new(words)?;

    let mut domains = Vec::with_capacity(sources.len());
    for (src, text) in sources.iter().zip(&texts) {
        let mut splits: [Vec<Vec<u32>>; 3] = Default::default();
        for line in text.lines().filter(|l| !l.trim().is_empty()) {
            let slot = match bucket(line) {
                0..=7 => 0,
                8 => 1,
                _ => 2,
            };
            splits[slot].push(tokenize(line, &vocab));
        }
        let [train, dev, eval] = splits;
        domains.push(DomainCorpus {
            domain_id: src.domain_id.clone(),
            role: src.role,
            source: CorpusSource::File { path: src.path.clone() },
            train,
            dev,
            eval,
        });
    }

    let set = CorpusSet { vocab, domains };
    set.validate()?;
    Ok(set)
}
