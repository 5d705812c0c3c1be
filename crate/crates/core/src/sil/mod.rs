//! The interface language: one XML envelope (`sil`) carrying workspace,
//! user, query, result-set or registry payloads.
//!
//! Every byte that crosses the network between clients, servers and the
//! registry is produced by [`serialize_document`] and consumed by
//! [`parse_document`]. The grammar is a closed table (see `decode.rs`), so
//! violations name the exact element path and rule they break.

mod decode;
mod encode;
mod validate;

pub mod corpus;

use std::collections::BTreeMap;
use std::fmt;

use crate::clock::Timestamp;

pub use decode::{document_from_element, validate_xml};
pub use encode::document_to_element;
pub use validate::{check_query, validate, Rule, ValidationReport, Violation};

pub const SIL_VERSION: &str = "0.5";

macro_rules! wire_enum {
    ($(#[$m:meta])* $name:ident { $($variant:ident => $text:literal),+ $(,)? }) => {
        $(#[$m])*
        #[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
        pub enum $name {
            $($variant),+
        }

        impl $name {
            pub const ALL: &'static [$name] = &[$($name::$variant),+];

            pub fn as_str(self) -> &'static str {
                match self {
                    $($name::$variant => $text),+
                }
            }

            pub fn from_wire(s: &str) -> Option<Self> {
                match s {
                    $($text => Some($name::$variant),)+
                    _ => None,
                }
            }
        }

        impl fmt::Display for $name {
            fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                f.write_str(self.as_str())
            }
        }
    };
}
pub(crate) use wire_enum;

wire_enum!(
    /// Value of the envelope's `type` attribute.
    DocType {
        Workspace => "workspace",
        User => "user",
        Query => "query",
        ResultSet => "resultset",
        Net => "net",
    }
);

wire_enum!(PayloadKind {
    Ws => "ws",
    Ui => "ui",
    Ql => "ql",
    Rs => "rs",
    Net => "net",
});

impl DocType {
    pub fn payload_kind(self) -> PayloadKind {
        match self {
            DocType::Workspace => PayloadKind::Ws,
            DocType::User => PayloadKind::Ui,
            DocType::Query => PayloadKind::Ql,
            DocType::ResultSet => PayloadKind::Rs,
            DocType::Net => PayloadKind::Net,
        }
    }
}

wire_enum!(UidKind {
    User => "user",
    Provider => "provider",
    Both => "both",
});

wire_enum!(Scope {
    Metadata => "metadata",
    ContentCount => "content-count",
});

wire_enum!(Field {
    Language => "language",
    Category => "category",
    Title => "title",
    Id => "id",
    Keyword => "keyword",
});

wire_enum!(Op {
    Eq => "eq",
    Contains => "contains",
});

wire_enum!(
    /// Progress of one target inside a broadcast.
    SubState {
        Pending => "pending",
        Streaming => "streaming",
        Done => "done",
        Failed => "failed",
    }
);

wire_enum!(ServerState {
    Online => "online",
    Offline => "offline",
    Disconnected => "disconnected",
});

wire_enum!(DeliveryOutcome {
    Ok => "ok",
    Failed => "failed",
});

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SilDocument {
    pub doc_type: DocType,
    pub sid: String,
    pub version: String,
    pub lang: Option<String>,
    pub crdate: Option<Timestamp>,
    pub update: Option<Timestamp>,
    pub uid: Uid,
    pub payloads: Vec<Payload>,
}

impl SilDocument {
    /// A version-0.5 envelope with a single payload whose kind fixes the
    /// document type.
    pub fn new(sid: impl Into<String>, uid: Uid, payload: Payload) -> Self {
        SilDocument {
            doc_type: payload.doc_type(),
            sid: sid.into(),
            version: SIL_VERSION.to_owned(),
            lang: None,
            crdate: None,
            update: None,
            uid,
            payloads: vec![payload],
        }
    }

    pub fn first_payload(&self) -> Option<&Payload> {
        self.payloads.first()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Uid {
    pub kind: UidKind,
    pub login: String,
    pub passwd: Option<String>,
    /// Authorization level carried on server-to-server traffic.
    pub level: Option<u32>,
    pub access: Access,
}

impl Uid {
    pub fn user(login: impl Into<String>) -> Self {
        Uid {
            kind: UidKind::User,
            login: login.into(),
            passwd: None,
            level: None,
            access: Access::default(),
        }
    }

    pub fn with_passwd(mut self, passwd: impl Into<String>) -> Self {
        self.passwd = Some(passwd.into());
        self
    }

    pub fn with_groups<I, S>(mut self, default: Option<&str>, groups: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.access = Access {
            default: default.map(str::to_owned),
            groups: groups.into_iter().map(Into::into).collect(),
        };
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Access {
    /// Reference to one of `groups`.
    pub default: Option<String>,
    pub groups: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Payload {
    Ws(Workspace),
    Ui(UserInfo),
    Ql(Query),
    Rs(ResultSet),
    Net(NetInfo),
}

impl Payload {
    pub fn kind(&self) -> PayloadKind {
        match self {
            Payload::Ws(_) => PayloadKind::Ws,
            Payload::Ui(_) => PayloadKind::Ui,
            Payload::Ql(_) => PayloadKind::Ql,
            Payload::Rs(_) => PayloadKind::Rs,
            Payload::Net(_) => PayloadKind::Net,
        }
    }

    pub fn doc_type(&self) -> DocType {
        match self {
            Payload::Ws(_) => DocType::Workspace,
            Payload::Ui(_) => DocType::User,
            Payload::Ql(_) => DocType::Query,
            Payload::Rs(_) => DocType::ResultSet,
            Payload::Net(_) => DocType::Net,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Workspace {
    pub name: String,
    pub servers: Vec<String>,
    pub queries: Vec<Query>,
    pub baskets: Vec<Basket>,
    pub prefs: Preferences,
}

impl Workspace {
    pub fn new(name: impl Into<String>) -> Self {
        Workspace {
            name: name.into(),
            ..Default::default()
        }
    }

    pub fn basket(&self, name: &str) -> Option<&Basket> {
        self.baskets.iter().find(|b| b.name == name)
    }

    pub fn basket_mut(&mut self, name: &str) -> Option<&mut Basket> {
        self.baskets.iter_mut().find(|b| b.name == name)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Preferences {
    pub page_size: Option<u32>,
    pub lang: Option<String>,
}

/// A named list of resource pointers. Never holds content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Basket {
    pub name: String,
    pub created: Timestamp,
    pub items: Vec<String>,
}

impl Basket {
    pub fn new(name: impl Into<String>, created: Timestamp) -> Self {
        Basket {
            name: name.into(),
            created,
            items: Vec::new(),
        }
    }

    /// Adds `uri` unless present. Returns whether it was added.
    pub fn add(&mut self, uri: &str) -> bool {
        if self.items.iter().any(|u| u == uri) {
            return false;
        }
        self.items.push(uri.to_owned());
        true
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct UserInfo {
    pub fields: BTreeMap<String, String>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Clause {
    pub field: Field,
    pub op: Op,
    pub value: String,
}

impl Clause {
    pub fn new(field: Field, op: Op, value: impl Into<String>) -> Self {
        Clause {
            field,
            op,
            value: value.into(),
        }
    }

    pub fn eq(field: Field, value: impl Into<String>) -> Self {
        Clause::new(field, Op::Eq, value)
    }
}

/// Shorthand filters: `language=fr` for equality, `title~rose` for
/// containment.
impl std::str::FromStr for Clause {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        let (field, op, value) = match (s.find('~'), s.find('=')) {
            (Some(t), e) if e.is_none_or(|e| t < e) => (&s[..t], Op::Contains, &s[t + 1..]),
            (_, Some(e)) => (&s[..e], Op::Eq, &s[e + 1..]),
            _ => return Err(format!("`{s}` is neither field=value nor field~value")),
        };
        let field = Field::from_wire(field).ok_or_else(|| {
            let known: Vec<&str> = Field::ALL.iter().map(|f| f.as_str()).collect();
            format!("unknown field `{field}` (one of {})", known.join(", "))
        })?;
        Ok(Clause::new(field, op, value))
    }
}

/// A conjunction of field filters.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Query {
    pub id: String,
    pub scope: Scope,
    pub clauses: Vec<Clause>,
    /// Empty means the whole network.
    pub targets: Vec<String>,
    pub max_results: Option<u32>,
}

impl Query {
    pub fn new(id: impl Into<String>, clauses: Vec<Clause>) -> Self {
        Query {
            id: id.into(),
            scope: Scope::Metadata,
            clauses,
            targets: Vec::new(),
            max_results: None,
        }
    }

    /// The same query further restricted by `clause`.
    pub fn and(mut self, clause: Clause) -> Self {
        self.clauses.push(clause);
        self
    }

    pub fn with_targets<I, S>(mut self, targets: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        self.targets = targets.into_iter().map(Into::into).collect();
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ResultEntry {
    pub uri: String,
    pub sid: String,
    pub title: String,
    pub language: String,
    pub category: String,
    pub required_level: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerStatus {
    pub sid: String,
    pub state: SubState,
    pub count: Option<u64>,
    pub reason: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ResultSet {
    pub query_id: String,
    pub handle: Option<String>,
    /// Entries delivered before this page.
    pub cursor: u64,
    pub done: bool,
    pub count: Option<u64>,
    pub statuses: Vec<ServerStatus>,
    pub entries: Vec<ResultEntry>,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ServerProfile {
    pub languages: Vec<String>,
    pub categories: Vec<String>,
    pub description: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServerRecord {
    pub name: String,
    pub url: String,
    pub status: ServerState,
    pub profile: ServerProfile,
    pub last_update: Timestamp,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Delivery {
    pub sid: String,
    pub outcome: DeliveryOutcome,
    pub attempts: u32,
}

/// Registry traffic: server records and push delivery reports.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct NetInfo {
    pub servers: Vec<ServerRecord>,
    pub deliveries: Vec<Delivery>,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CodecError {
    #[error("not well-formed: {0}")]
    NotWellFormed(String),
    #[error("schema violation at {path} [{rule}]: {message}")]
    SchemaViolation {
        path: String,
        rule: &'static str,
        message: String,
    },
    #[error("unsupported version `{found}`, expected \"{SIL_VERSION}\"")]
    VersionMismatch { found: String },
    #[error("required attribute `sid` is missing")]
    MissingSid,
    #[error("document violates its invariants: {0}")]
    InvariantViolation(ValidationReport),
}

/// Parse and validate one document. Rejects rather than repairs.
pub fn parse_document(bytes: &[u8]) -> Result<SilDocument, CodecError> {
    let root = crate::xml::parse(bytes).map_err(|e| CodecError::NotWellFormed(e.0))?;
    document_from_element(&root)
}

/// Canonical encoding. Refuses documents that fail [`validate`].
pub fn serialize_document(doc: &SilDocument) -> Result<Vec<u8>, CodecError> {
    let report = validate(doc);
    if !report.is_empty() {
        return Err(CodecError::InvariantViolation(report));
    }
    let el = document_to_element(doc);
    if let Some(bad) = encode::find_illegal_char(&el) {
        let mut report = ValidationReport::default();
        report.push(bad, Rule::XmlChar, "string holds a character XML cannot carry");
        return Err(CodecError::InvariantViolation(report));
    }
    Ok(el.to_canonical())
}

/// `serialize_document(parse_document(bytes))`.
pub fn canonicalize(bytes: &[u8]) -> Result<Vec<u8>, CodecError> {
    serialize_document(&parse_document(bytes)?)
}

/// RFC 1766 tag shape: `primary-subtag *( "-" subtag )`, 1-8 chars each.
pub fn is_language_tag(s: &str) -> bool {
    let mut parts = s.split('-');
    let primary_ok = parts
        .next()
        .is_some_and(|p| (1..=8).contains(&p.len()) && p.chars().all(|c| c.is_ascii_alphabetic()));
    primary_ok && parts.all(|p| (1..=8).contains(&p.len()) && p.chars().all(|c| c.is_ascii_alphanumeric()))
}

/// `scheme://rest` with an alphabetic scheme and non-empty rest.
pub fn is_valid_url(s: &str) -> bool {
    match s.split_once("://") {
        Some((scheme, rest)) => {
            !scheme.is_empty()
                && scheme.chars().next().is_some_and(|c| c.is_ascii_alphabetic())
                && scheme
                    .chars()
                    .all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'))
                && !rest.is_empty()
                && !rest.chars().any(char::is_whitespace)
        }
        None => false,
    }
}
