use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

use super::{CorpusSet, CorpusSource, DomainCorpus, DomainRole, Split, Vocab};

#[derive(Serialize, Deserialize)]
struct DomainEntry {
    domain_id: String,
    role: DomainRole,
    source: CorpusSource,
}

fn write(path: &Path, body: &str) -> Result<()> {
    std::fs::write(path, body).map_err(|e| Error::io(path, e))
}

fn read(path: &Path) -> Result<String> {
    match std::fs::read_to_string(path) {
        Ok(s) => Ok(s),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => {
            Err(Error::Data(format!("corpus archive is missing {}", path.display())))
        }
        Err(e) => Err(Error::io(path, e)),
    }
}

/// Writes `vocab.json`, `corpus.json`, and `<domain>/{train,dev,eval}.tokens`.
pub fn save_archive(set: &CorpusSet, dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write(&dir.join("vocab.json"), &set.vocab.to_json())?;
    for d in &set.domains {
        let ddir = dir.join(&d.domain_id);
        std::fs::create_dir_all(&ddir).map_err(|e| Error::io(&ddir, e))?;
        for split in Split::ALL {
            let mut body = String::new();
            for seq in d.split(split) {
                let line: Vec<String> = seq.iter().map(u32::to_string).collect();
                writeln!(body, "{}", line.join(" ")).expect("string write");
            }
            write(&ddir.join(format!("{split}.tokens")), &body)?;
        }
    }
    let entries: Vec<DomainEntry> = set
        .domains
        .iter()
        .map(|d| DomainEntry {
            domain_id: d.domain_id.clone(),
            role: d.role,
            source: d.source.clone(),
        })
        .collect();
    let json = serde_json::to_string_pretty(&entries).expect("corpus index serializes");
    write(&dir.join("corpus.json"), &json)
}

fn parse_tokens(path: &Path) -> Result<Vec<Vec<u32>>> {
    let text = read(path)?;
    text.lines()
        .enumerate()
        .map(|(i, line)| {
            line.split_whitespace()
                .map(|w| {
                    w.parse::<u32>()
                        .map_err(|_| Error::Data(format!("{}:{}: bad token id {w:?}", path.display(), i + 1)))
                })
                .collect()
        })
        .collect()
}

pub fn load_archive(dir: &Path) -> Result<CorpusSet> {
    let vocab = Vocab::from_json(&read(&dir.join("vocab.json"))?)?;
    let index_path = dir.join("corpus.json");
    let entries: Vec<DomainEntry> =
        serde_json::from_str(&read(&index_path)?).map_err(|e| Error::Data(format!("{}: {e}", index_path.display())))?;
    let mut domains = Vec::with_capacity(entries.len());
    for e in entries {
        let ddir = dir.join(&e.domain_id);
        domains.push(DomainCorpus {
            train: parse_tokens(&ddir.join("train.tokens"))?,
            dev: parse_tokens(&ddir.join("dev.tokens"))?,
            eval: parse_tokens(&ddir.join("eval.tokens"))?,
            domain_id: e.domain_id,
            role: e.role,
            source: e.source,
        });
    }
    let set = CorpusSet { vocab, domains };
    set.validate()?;
    Ok(set)
}
