use std::collections::HashSet;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{read_posteriors, Label, Utterance};
use crate::container::read_file;
use crate::tokenizer::Tokenizer;
use crate::{Error, Result};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Partitions {
    #[serde(default)]
    pub train: Vec<PathBuf>,
    #[serde(default)]
    pub validation: Vec<PathBuf>,
    #[serde(default)]
    pub eval: Vec<PathBuf>,
}

/// Dataset manifest; relative paths resolve against the manifest's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub vocab_file: PathBuf,
    pub partitions: Partitions,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ClassCounts {
    pub intended: usize,
    pub unintended: usize,
}

impl ClassCounts {
    pub fn of(utts: &[Utterance]) -> Self {
        let intended = utts.iter().filter(|u| u.label == Label::Intended).count();
        Self {
            intended,
            unintended: utts.len() - intended,
        }
    }

    pub fn total(&self) -> usize {
        self.intended + self.unintended
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub vocab: Tokenizer,
    pub train: Vec<Utterance>,
    pub validation: Vec<Utterance>,
    pub eval: Vec<Utterance>,
}

impl Dataset {
    pub fn counts(&self) -> [(&'static str, ClassCounts); 3] {
        [
            ("train", ClassCounts::of(&self.train)),
            ("validation", ClassCounts::of(&self.validation)),
            ("eval", ClassCounts::of(&self.eval)),
        ]
    }

    pub fn all(&self) -> impl Iterator<Item = &Utterance> {
        self.train.iter().chain(&self.validation).chain(&self.eval)
    }
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&read_file(path)?)?)
    }
}

pub fn load_dataset(manifest_path: &Path) -> Result<Dataset> {
    let manifest = Manifest::load(manifest_path)?;
    let base = manifest_path.parent().unwrap_or(Path::new("."));
    let resolve = |p: &Path| if p.is_absolute() { p.to_path_buf() } else { base.join(p) };

    let vocab = Tokenizer::load(&resolve(&manifest.vocab_file))?;
    let t = vocab.vocab_size();
    let mut seen = HashSet::new();
    let mut load = |files: &[PathBuf]| -> Result<Vec<Utterance>> {
        let mut out = Vec::new();
        for f in files {
            let path = resolve(f);
            if !path.exists() {
                return Err(Error::data(format!(
                    "manifest references missing file {}",
                    path.display()
                )));
            }
            for u in read_posteriors(&path, Some(t))? {
                if !seen.insert(u.id.clone()) {
                    return Err(Error::data(format!(
                        "duplicate utterance id {:?} in {}",
                        u.id,
                        path.display()
                    )));
                }
                out.push(u);
            }
        }
        Ok(out)
    };
    let train = load(&manifest.partitions.train)?;
    let validation = load(&manifest.partitions.validation)?;
    let eval = load(&manifest.partitions.eval)?;
    if eval.is_empty() {
        return Err(Error::data("eval partition is empty; evaluation is impossible"));
    }
    let ds = Dataset {
        vocab,
        train,
        validation,
        eval,
    };
    for (name, c) in ds.counts() {
        log::info!("{name}: {} intended, {} unintended", c.intended, c.unintended);
    }
    Ok(ds)
}
