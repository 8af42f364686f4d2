//! On-disk layout of a run directory. Every artifact carries the config hash
//! it was produced under and is rejected when loaded under another config.

use std::fs;
use std::io::BufReader;
use std::path::{Path, PathBuf};

use prunelab_core::corpus::{read_corpus, write_corpus, CorpusBlock, Token};
use prunelab_core::pruner::{read_masks, write_masks, MaskBundle};
use prunelab_core::toymodel::{read_model, write_model, ToyModel};

use crate::error::{CliError, CliResult};

/// Header key of the config hash in corpus files.
pub const HASH_KEY: &str = "config";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Calibration,
    Validation,
}

impl Split {
    fn suffix(self) -> &'static str {
        match self {
            Split::Calibration => "calib",
            Split::Validation => "valid",
        }
    }
}

#[derive(Clone, Debug)]
pub struct Layout {
    pub root: PathBuf,
    pub hash: String,
}

pub fn run_id(plan: &[String], seed: u64) -> String {
    format!("{}__s{seed}", plan.join("+"))
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>, hash: impl Into<String>) -> Self {
        Self {
            root: root.into(),
            hash: hash.into(),
        }
    }

    pub fn corpus(&self, tag: &str, split: Split) -> PathBuf {
        self.root.join("corpora").join(format!("{tag}.{}.txt", split.suffix()))
    }

    pub fn base_model(&self) -> PathBuf {
        self.root.join("models").join("base.plab")
    }

    pub fn pruned_model(&self, run: &str) -> PathBuf {
        self.root.join("pruned").join(format!("{run}.plab"))
    }

    pub fn masks(&self, run: &str) -> PathBuf {
        self.root.join("masks").join(format!("{run}.plmk"))
    }

    pub fn report(&self, name: &str) -> PathBuf {
        self.root.join("reports").join(name)
    }

    fn stale(&self, path: &Path, found: &str) -> CliError {
        CliError::Stale {
            path: path.to_path_buf(),
            found: found.to_string(),
            expected: self.hash.clone(),
        }
    }

    fn open(&self, path: &Path, stage: &'static str) -> CliResult<fs::File> {
        fs::File::open(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => CliError::Missing {
                path: path.to_path_buf(),
                stage,
            },
            _ => CliError::io(path, e),
        })
    }

    /// Writes one block per seed, each holding that seed's sequences.
    pub fn write_corpus(&self, tag: &str, split: Split, blocks: Vec<(u64, Vec<Vec<Token>>)>) -> CliResult<()> {
        let blocks: Vec<CorpusBlock> = blocks
            .into_iter()
            .map(|(seed, sequences)| CorpusBlock {
                lang: tag.to_string(),
                seed,
                len: sequences.first().map_or(0, Vec::len),
                extra: vec![(HASH_KEY.to_string(), self.hash.clone())],
                sequences,
            })
            .collect();
        let mut buf = Vec::new();
        write_corpus(&mut buf, &blocks)?;
        write_file(&self.corpus(tag, split), &buf)
    }

    /// Sequences of the block written for `seed`.
    pub fn read_corpus(&self, tag: &str, split: Split, seed: u64) -> CliResult<Vec<Vec<Token>>> {
        let path = self.corpus(tag, split);
        let file = self.open(&path, "gen")?;
        let blocks = read_corpus(BufReader::new(file))?;
        for b in &blocks {
            let found = b
                .extra
                .iter()
                .find(|(k, _)| k == HASH_KEY)
                .map_or("<none>", |(_, v)| v.as_str());
            if found != self.hash {
                return Err(self.stale(&path, found));
            }
        }
        blocks
            .into_iter()
            .find(|b| b.lang == tag && b.seed == seed)
            .map(|b| b.sequences)
            .ok_or(CliError::Missing { path, stage: "gen" })
    }

    pub fn write_model(&self, path: &Path, model: &ToyModel) -> CliResult<()> {
        let mut buf = Vec::new();
        write_model(&mut buf, model, &self.hash)?;
        write_file(path, &buf)
    }

    pub fn read_model(&self, path: &Path) -> CliResult<ToyModel> {
        let file = self.open(path, "prune")?;
        let (model, tag) = read_model(BufReader::new(file))?;
        if tag != self.hash {
            return Err(self.stale(path, &tag));
        }
        Ok(model)
    }

    pub fn write_masks(&self, run: &str, masks: &MaskBundle) -> CliResult<()> {
        let mut tagged = masks.clone();
        for m in &mut tagged.masks {
            m.mask.provenance.tag = self.hash.clone();
        }
        let mut buf = Vec::new();
        write_masks(&mut buf, &tagged)?;
        write_file(&self.masks(run), &buf)
    }

    pub fn read_masks(&self, run: &str) -> CliResult<MaskBundle> {
        let path = self.masks(run);
        let file = self.open(&path, "prune")?;
        let bundle = read_masks(BufReader::new(file))?;
        if let Some(m) = bundle.iter().find(|m| m.mask.provenance.tag != self.hash) {
            return Err(self.stale(&path, &m.mask.provenance.tag));
        }
        Ok(bundle)
    }
}

pub fn write_file(path: &Path, bytes: &[u8]) -> CliResult<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| CliError::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use prunelab_core::toymodel::ModelConfig;

    #[test]
    fn paths_follow_the_layout() {
        let l = Layout::new("/r", "h");
        assert_eq!(l.corpus("L1", Split::Calibration), PathBuf::from("/r/corpora/L1.calib.txt"));
        assert_eq!(l.corpus("L1", Split::Validation), PathBuf::from("/r/corpora/L1.valid.txt"));
        let id = run_id(&["a".into(), "b".into()], 7);
        assert_eq!(id, "a+b__s7");
        assert_eq!(l.pruned_model(&id), PathBuf::from("/r/pruned/a+b__s7.plab"));
        assert_eq!(l.masks(&id), PathBuf::from("/r/masks/a+b__s7.plmk"));
    }

    #[test]
    fn foreign_hash_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mine = Layout::new(dir.path(), "aaa");
        let theirs = Layout::new(dir.path(), "bbb");
        mine.write_corpus("x", Split::Validation, vec![(3, vec![vec![0, 1, 2]])]).unwrap();
        assert_eq!(mine.read_corpus("x", Split::Validation, 3).unwrap(), vec![vec![0, 1, 2]]);
        assert!(matches!(theirs.read_corpus("x", Split::Validation, 3), Err(CliError::Stale { .. })));
        assert!(matches!(mine.read_corpus("x", Split::Validation, 4), Err(CliError::Missing { .. })));

        let model = ToyModel::init(ModelConfig {
            vocab_size: 5,
            d_model: 4,
            n_layers: 1,
            n_heads: 1,
            d_ffn: 4,
            max_seq: 4,
            seed: 0,
            ..ModelConfig::default()
        })
        .unwrap();
        mine.write_model(&mine.base_model(), &model).unwrap();
        assert_eq!(mine.read_model(&mine.base_model()).unwrap(), model);
        let err = theirs.read_model(&theirs.base_model()).unwrap_err();
        assert_eq!(err.exit_code(), 3);
        assert!(matches!(mine.read_masks("nope"), Err(CliError::Missing { stage: "prune", .. })));
    }
}
