//! Registry persistence: `snapshot.xml` plus an append-only `changes.log`.
//!
//! Both use the canonical `net` vocabulary. Each log line is one document
//! holding the records touched by one mutation, so replay is an upsert by
//! name. Opening the store folds the log into a fresh snapshot.

use std::collections::BTreeMap;
use std::fs::{self, File, OpenOptions};
use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use crate::sil::{self, NetInfo, Payload, ServerRecord, SilDocument, Uid};

use super::NMU_SID;

const SNAPSHOT: &str = "snapshot.xml";
const LOG: &str = "changes.log";

#[derive(Debug)]
pub struct RegistryStore {
    dir: PathBuf,
    log: File,
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error("{file}: {source}")]
    Corrupt {
        file: String,
        #[source]
        source: sil::CodecError,
    },
}

pub(crate) fn net_document(records: impl IntoIterator<Item = ServerRecord>) -> SilDocument {
    SilDocument::new(
        NMU_SID,
        Uid::user(NMU_SID),
        Payload::Net(NetInfo {
            servers: records.into_iter().collect(),
            deliveries: Vec::new(),
        }),
    )
}

fn records_of(doc: SilDocument) -> Vec<ServerRecord> {
    doc.payloads
        .into_iter()
        .flat_map(|p| match p {
            Payload::Net(n) => n.servers,
            _ => Vec::new(),
        })
        .collect()
}

impl RegistryStore {
    /// Load (or create) the state in `dir`, returning the replayed registry.
    pub fn open(dir: &Path) -> Result<(Self, BTreeMap<String, ServerRecord>), StoreError> {
        fs::create_dir_all(dir)?;
        let mut records = BTreeMap::new();

        let snap = dir.join(SNAPSHOT);
        if snap.exists() {
            let doc = sil::parse_document(&fs::read(&snap)?).map_err(|source| StoreError::Corrupt {
                file: SNAPSHOT.into(),
                source,
            })?;
            for r in records_of(doc) {
                records.insert(r.name.clone(), r);
            }
        }

        let log_path = dir.join(LOG);
        if log_path.exists() {
            let lines = BufReader::new(File::open(&log_path)?).lines().collect::<Result<Vec<_>, _>>()?;
            let last = lines.len().saturating_sub(1);
            for (i, line) in lines.iter().enumerate() {
                if line.trim().is_empty() {
                    continue;
                }
                match sil::parse_document(line.as_bytes()) {
                    Ok(doc) => {
                        for r in records_of(doc) {
                            records.insert(r.name.clone(), r);
                        }
                    }
                    // a torn final line is a write that never completed
                    Err(e) if i == last => log::warn!("dropping torn log tail: {e}"),
                    Err(source) => {
                        return Err(StoreError::Corrupt {
                            file: format!("{LOG}:{}", i + 1),
                            source,
                        })
                    }
                }
            }
        }

        write_atomically(&snap, &serialize(net_document(records.values().cloned())))?;
        let log = OpenOptions::new().create(true).write(true).truncate(true).open(&log_path)?;
        Ok((
            RegistryStore {
                dir: dir.to_owned(),
                log,
            },
            records,
        ))
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn append(&mut self, changed: &[ServerRecord]) -> io::Result<()> {
        let mut line = serialize(net_document(changed.iter().cloned()));
        line.push(b'\n');
        self.log.write_all(&line)?;
        self.log.sync_data()
    }
}

fn serialize(doc: SilDocument) -> Vec<u8> {
    // records in the registry were validated on the way in
    sil::serialize_document(&doc).expect("registry state is always a valid net document")
}

fn write_atomically(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut f = File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(tmp, path)
}
