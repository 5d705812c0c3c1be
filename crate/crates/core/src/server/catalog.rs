//! Resource catalog and the query-handler driver interface.
//!
//! A driver is how a native database is plugged into a server: a
//! connection with begin/end, `run` to evaluate a query, and forward-only
//! `next` to enumerate the matches. Two drivers ship here: an in-memory
//! one for fixtures and one reading a directory of resource files.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use crate::sil::{Clause, Field, Op, Query, ResultEntry};
use crate::xml::{self, Element};

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CatalogEntry {
    /// `{sid}/{local id}`.
    pub uri: String,
    pub title: String,
    pub language: String,
    pub category: String,
    pub required_level: u32,
    /// Where the driver finds the content, if there is any.
    pub content_ref: Option<String>,
}

impl CatalogEntry {
    pub fn new(sid: &str, local: &str, title: &str, language: &str, category: &str, level: u32) -> Self {
        CatalogEntry {
            uri: format!("{sid}/{local}"),
            title: title.to_owned(),
            language: language.to_owned(),
            category: category.to_owned(),
            required_level: level,
            content_ref: None,
        }
    }

    pub fn sid(&self) -> &str {
        self.uri.split_once('/').map_or("", |(s, _)| s)
    }

    pub fn local_id(&self) -> &str {
        self.uri.split_once('/').map_or(&self.uri, |(_, l)| l)
    }

    pub fn to_result(&self) -> ResultEntry {
        ResultEntry {
            uri: self.uri.clone(),
            sid: self.sid().to_owned(),
            title: self.title.clone(),
            language: self.language.clone(),
            category: self.category.clone(),
            required_level: self.required_level,
        }
    }
}

fn ci_contains(hay: &str, needle: &str) -> bool {
    hay.to_lowercase().contains(&needle.to_lowercase())
}

fn clause_matches(e: &CatalogEntry, c: &Clause) -> bool {
    let v = c.value.as_str();
    match (c.field, c.op) {
        (Field::Language, Op::Eq) => e.language.eq_ignore_ascii_case(v),
        (Field::Category, Op::Eq) => e.category == v,
        (Field::Title, Op::Eq) => e.title == v,
        (Field::Id, Op::Eq) => e.uri == v,
        (Field::Keyword, Op::Eq) => e.title == v || e.category == v || e.uri == v,
        (Field::Language, Op::Contains) => ci_contains(&e.language, v),
        (Field::Category, Op::Contains) => ci_contains(&e.category, v),
        (Field::Title, Op::Contains) => ci_contains(&e.title, v),
        (Field::Id, Op::Contains) => ci_contains(&e.uri, v),
        (Field::Keyword, Op::Contains) => {
            ci_contains(&e.title, v) || ci_contains(&e.category, v) || ci_contains(&e.uri, v)
        }
    }
}

/// Conjunctive match of every clause.
pub fn matches(entry: &CatalogEntry, query: &Query) -> bool {
    query.clauses.iter().all(|c| clause_matches(entry, c))
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("driver: {0}")]
pub struct DriverError(pub String);

impl From<std::io::Error> for DriverError {
    fn from(e: std::io::Error) -> Self {
        DriverError(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DriverHandle(pub u64);

pub trait QueryDriver: Send + Sync {
    fn open_connection(&self) -> Result<Box<dyn Connection>, DriverError>;

    /// Metadata and content of one resource by its local id.
    fn resource(&self, local_id: &str) -> Result<Option<(CatalogEntry, Vec<u8>)>, DriverError>;
}

pub trait Connection: Send {
    fn begin(&mut self) -> Result<(), DriverError>;
    fn end(&mut self) -> Result<(), DriverError>;
    /// Evaluate `query`. Matches are fixed at this point, in uri order.
    fn run(&mut self, query: &Query) -> Result<DriverHandle, DriverError>;
    /// Up to `n` further matches; empty once exhausted.
    fn next(&mut self, handle: DriverHandle, n: usize) -> Result<Vec<CatalogEntry>, DriverError>;
}

/// Enumeration state shared by both bundled drivers.
#[derive(Default)]
struct Cursors {
    in_txn: bool,
    next_id: u64,
    open: HashMap<u64, std::vec::IntoIter<CatalogEntry>>,
}

impl Cursors {
    fn begin(&mut self) -> Result<(), DriverError> {
        if self.in_txn {
            return Err(DriverError("transaction already begun".into()));
        }
        self.in_txn = true;
        Ok(())
    }

    fn end(&mut self) -> Result<(), DriverError> {
        self.in_txn = false;
        self.open.clear();
        Ok(())
    }

    fn start(&mut self, mut matches: Vec<CatalogEntry>) -> Result<DriverHandle, DriverError> {
        if !self.in_txn {
            return Err(DriverError("run outside begin/end".into()));
        }
        matches.sort_by(|a, b| a.uri.cmp(&b.uri));
        self.next_id += 1;
        self.open.insert(self.next_id, matches.into_iter());
        Ok(DriverHandle(self.next_id))
    }

    fn next(&mut self, h: DriverHandle, n: usize) -> Result<Vec<CatalogEntry>, DriverError> {
        let it = self
            .open
            .get_mut(&h.0)
            .ok_or_else(|| DriverError(format!("unknown driver handle {}", h.0)))?;
        Ok(it.by_ref().take(n).collect())
    }
}

type Entries = Arc<RwLock<BTreeMap<String, (CatalogEntry, Vec<u8>)>>>;

/// Catalog held in memory; mutable so tests can change it under a live
/// snapshot.
#[derive(Clone)]
pub struct MemoryDriver {
    sid: String,
    entries: Entries,
}

impl MemoryDriver {
    pub fn new(sid: &str) -> Self {
        MemoryDriver {
            sid: sid.to_owned(),
            entries: Arc::default(),
        }
    }

    pub fn sid(&self) -> &str {
        &self.sid
    }

    pub fn insert(&self, entry: CatalogEntry, content: Vec<u8>) {
        self.entries.write().unwrap().insert(entry.uri.clone(), (entry, content));
    }

    pub fn remove(&self, uri: &str) -> bool {
        self.entries.write().unwrap().remove(uri).is_some()
    }

    pub fn entries(&self) -> Vec<CatalogEntry> {
        self.entries.read().unwrap().values().map(|(e, _)| e.clone()).collect()
    }
}

struct MemoryConnection {
    entries: Entries,
    cursors: Cursors,
}

impl Connection for MemoryConnection {
    fn begin(&mut self) -> Result<(), DriverError> {
        self.cursors.begin()
    }

    fn end(&mut self) -> Result<(), DriverError> {
        self.cursors.end()
    }

    fn run(&mut self, query: &Query) -> Result<DriverHandle, DriverError> {
        let matches = self
            .entries
            .read()
            .unwrap()
            .values()
            .filter(|(e, _)| matches(e, query))
            .map(|(e, _)| e.clone())
            .collect();
        self.cursors.start(matches)
    }

    fn next(&mut self, handle: DriverHandle, n: usize) -> Result<Vec<CatalogEntry>, DriverError> {
        self.cursors.next(handle, n)
    }
}

impl QueryDriver for MemoryDriver {
    fn open_connection(&self) -> Result<Box<dyn Connection>, DriverError> {
        Ok(Box::new(MemoryConnection {
            entries: self.entries.clone(),
            cursors: Cursors::default(),
        }))
    }

    fn resource(&self, local_id: &str) -> Result<Option<(CatalogEntry, Vec<u8>)>, DriverError> {
        let uri = format!("{}/{local_id}", self.sid);
        Ok(self.entries.read().unwrap().get(&uri).cloned())
    }
}

/// Catalog read from `*.xml` files in a directory, one `<resource>` each:
///
/// ```xml
/// <resource id="r1" lang="fr" category="prose" level="0" content="r1.txt">Title</resource>
/// ```
///
/// `content` names a file relative to the directory. The directory is
/// re-read on every `run`.
#[derive(Debug, Clone)]
pub struct DirectoryDriver {
    sid: String,
    dir: PathBuf,
}

impl DirectoryDriver {
    pub fn new(sid: &str, dir: impl Into<PathBuf>) -> Self {
        DirectoryDriver {
            sid: sid.to_owned(),
            dir: dir.into(),
        }
    }

    fn load(&self) -> Result<Vec<CatalogEntry>, DriverError> {
        let mut out = Vec::new();
        let mut paths: Vec<PathBuf> = fs::read_dir(&self.dir)?
            .map(|e| e.map(|e| e.path()))
            .collect::<Result<_, _>>()?;
        paths.sort();
        for p in paths.iter().filter(|p| p.extension().is_some_and(|e| e == "xml")) {
            out.push(parse_resource(&self.sid, p)?);
        }
        Ok(out)
    }

    fn content(&self, entry: &CatalogEntry) -> Result<Vec<u8>, DriverError> {
        let Some(name) = &entry.content_ref else { return Ok(Vec::new()) };
        let rel = Path::new(name);
        if !rel.components().all(|c| matches!(c, std::path::Component::Normal(_))) {
            return Err(DriverError(format!("content path `{name}` leaves the catalog")));
        }
        Ok(fs::read(self.dir.join(rel))?)
    }
}

fn parse_resource(sid: &str, path: &Path) -> Result<CatalogEntry, DriverError> {
    let bad = |m: &str| DriverError(format!("{}: {m}", path.display()));
    let el = xml::parse(&fs::read(path)?).map_err(|e| bad(&e.0))?;
    if el.name != "resource" {
        return Err(bad("root element must be <resource>"));
    }
    let req = |el: &Element, k: &str| el.get(k).map(str::to_owned).ok_or_else(|| bad(&format!("missing `{k}`")));
    let id = req(&el, "id")?;
    if id.is_empty() || id.contains('/') {
        return Err(bad("`id` must be non-empty without `/`"));
    }
    Ok(CatalogEntry {
        uri: format!("{sid}/{id}"),
        title: el.text_content(),
        language: req(&el, "lang")?,
        category: req(&el, "category")?,
        required_level: el
            .get("level")
            .unwrap_or("0")
            .parse()
            .map_err(|_| bad("`level` must be a non-negative integer"))?,
        content_ref: el.get("content").map(str::to_owned),
    })
}

/// Write `entry` in the directory driver's file format.
pub fn write_resource(dir: &Path, entry: &CatalogEntry, content: &[u8]) -> std::io::Result<()> {
    let id = entry.local_id();
    let mut el = Element::new("resource")
        .attr("id", id)
        .attr("lang", &entry.language)
        .attr("category", &entry.category)
        .attr("level", entry.required_level.to_string());
    if !content.is_empty() {
        let name = format!("{id}.bin");
        fs::write(dir.join(&name), content)?;
        el = el.attr("content", name);
    }
    el = el.text(&entry.title);
    fs::write(dir.join(format!("{id}.xml")), el.to_canonical())
}

struct DirectoryConnection {
    driver: DirectoryDriver,
    cursors: Cursors,
}

impl Connection for DirectoryConnection {
    fn begin(&mut self) -> Result<(), DriverError> {
        self.cursors.begin()
    }

    fn end(&mut self) -> Result<(), DriverError> {
        self.cursors.end()
    }

    fn run(&mut self, query: &Query) -> Result<DriverHandle, DriverError> {
        let matches = self.driver.load()?.into_iter().filter(|e| matches(e, query)).collect();
        self.cursors.start(matches)
    }

    fn next(&mut self, handle: DriverHandle, n: usize) -> Result<Vec<CatalogEntry>, DriverError> {
        self.cursors.next(handle, n)
    }
}

impl QueryDriver for DirectoryDriver {
    fn open_connection(&self) -> Result<Box<dyn Connection>, DriverError> {
        if !self.dir.is_dir() {
            return Err(DriverError(format!("{} is not a directory", self.dir.display())));
        }
        Ok(Box::new(DirectoryConnection {
            driver: self.clone(),
            cursors: Cursors::default(),
        }))
    }

    fn resource(&self, local_id: &str) -> Result<Option<(CatalogEntry, Vec<u8>)>, DriverError> {
        let uri = format!("{}/{local_id}", self.sid);
        match self.load()?.into_iter().find(|e| e.uri == uri) {
            Some(e) => {
                let content = self.content(&e)?;
                Ok(Some((e, content)))
            }
            None => Ok(None),
        }
    }
}
