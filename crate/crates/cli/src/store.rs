// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use attrigraph_core::attribution::{load_case_dir, ContrastCase};

use crate::error::{CliError, CliResult};

pub const CACHE_ENV: &str = "ATTRIGRAPH_CACHE_DIR";

/// `$ATTRIGRAPH_CACHE_DIR`, else `attrigraph-cache` under the system temp dir.
pub fn default_cache_dir() -> PathBuf {
    std::env::var_os(CACHE_ENV).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("attrigraph-cache"))
}

/// Cases read once at startup plus a content-addressed artifact cache.
/// Case files are never written.
#[derive(Debug, Clone)]
pub struct CaseStore {
    cases: BTreeMap<String, ContrastCase>,
    cache_dir: PathBuf,
}

impl CaseStore {
    pub fn new(cases: Vec<ContrastCase>, cache_dir: PathBuf) -> CliResult<Self> {
        let mut map = BTreeMap::new();
        for case in cases {
            let id = case.case_id.clone();
            if map.insert(id.clone(), case).is_some() {
                return Err(CliError::input(format!("duplicate case id {id}")));
            }
        }
        Ok(Self { cases: map, cache_dir })
    }

    pub fn open(dir: impl AsRef<Path>, cache_dir: PathBuf) -> CliResult<Self> {
        Self::new(load_case_dir(dir)?, cache_dir)
    }

    pub fn get(&self, id: &str) -> Option<&ContrastCase> {
        self.cases.get(id)
    }

    pub fn cases(&self) -> impl Iterator<Item = &ContrastCase> {
        self.cases.values()
    }

    pub fn cache_dir(&self) -> &Path {
        &self.cache_dir
    }

    fn cache_path(&self, key: &str) -> PathBuf {
        self.cache_dir.join(format!("{key}.json"))
    }

    pub fn cache_read(&self, key: &str) -> Option<Vec<u8>> {
        std::fs::read(self.cache_path(key)).ok()
    }

    /// Writes through a temporary file so readers never see a partial artifact.
    pub fn cache_write(&self, key: &str, bytes: &[u8]) -> CliResult<()> {
        std::fs::create_dir_all(&self.cache_dir)?;
        let tmp = self.cache_dir.join(format!(".{key}.{}.tmp", std::process::id()));
        std::fs::write(&tmp, bytes)?;
        std::fs::rename(&tmp, self.cache_path(key))?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use attrigraph_core::model::toy_model;

    #[test]
    fn duplicate_ids_are_rejected() {
        let case = ContrastCase::from_model(&toy_model(0), "a", vec![0, 5], 6, 7, 3);
        assert!(CaseStore::new(vec![case.clone(), case], PathBuf::from("/tmp")).is_err());
    }

    #[test]
    fn cache_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let store = CaseStore::new(vec![], dir.path().join("c")).unwrap();
        assert!(store.cache_read("k").is_none());
        store.cache_write("k", b"{}").unwrap();
        assert_eq!(store.cache_read("k").unwrap(), b"{}");
    }
}
