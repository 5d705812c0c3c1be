use std::collections::HashSet;
use std::fmt;

use super::*;
use crate::xml::is_ncname;

/// One grammar or invariant rule. The id is stable and appears in reports.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Rule {
    Version,
    Sid,
    /// Envelope children must be `uid` followed by module elements.
    ModuleElement,
    DocTypeConsistency,
    ContentModel,
    UnknownAttribute,
    MissingAttribute,
    AttributeValue,
    CharacterData,
    IdToken,
    IdUnique,
    DefaultGroupRef,
    LanguageTag,
    NonEmpty,
    MaxResults,
    DuplicateUri,
    UriPrefix,
    DuplicateName,
    DuplicateItem,
    Url,
    XmlChar,
}

impl Rule {
    pub fn id(self) -> &'static str {
        match self {
            Rule::Version => "sil.version-fixed",
            Rule::Sid => "sil.sid-required",
            Rule::ModuleElement => "sil.module-element",
            Rule::DocTypeConsistency => "sil.type-matches-payload",
            Rule::ContentModel => "content-model",
            Rule::UnknownAttribute => "attribute-undeclared",
            Rule::MissingAttribute => "attribute-required",
            Rule::AttributeValue => "attribute-value",
            Rule::CharacterData => "character-data",
            Rule::IdToken => "id-token",
            Rule::IdUnique => "id-unique",
            Rule::DefaultGroupRef => "access.default-idref",
            Rule::LanguageTag => "rfc1766",
            Rule::NonEmpty => "non-empty",
            Rule::MaxResults => "ql.max-positive",
            Rule::DuplicateUri => "rs.uri-unique",
            Rule::UriPrefix => "rs.uri-prefix",
            Rule::DuplicateName => "name-unique",
            Rule::DuplicateItem => "basket.item-unique",
            Rule::Url => "url",
            Rule::XmlChar => "xml-char",
        }
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.id())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Violation {
    /// Slash-separated element path, e.g. `sil/uid/access/default`.
    pub path: String,
    pub rule: Rule,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} [{}] {}", self.path, self.rule, self.message)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ValidationReport {
    pub violations: Vec<Violation>,
}

impl ValidationReport {
    pub fn is_empty(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn len(&self) -> usize {
        self.violations.len()
    }

    pub fn push(&mut self, path: impl Into<String>, rule: Rule, message: impl Into<String>) {
        self.violations.push(Violation {
            path: path.into(),
            rule,
            message: message.into(),
        });
    }

    pub fn has_rule(&self, rule: Rule) -> bool {
        self.violations.iter().any(|v| v.rule == rule)
    }

    /// The error `parse_document` raises for this report, if any.
    pub(crate) fn to_error(&self) -> Option<CodecError> {
        if let Some(v) = self.violations.iter().find(|v| v.rule == Rule::Version) {
            return Some(CodecError::VersionMismatch {
                found: v.message.clone(),
            });
        }
        if self.has_rule(Rule::Sid) {
            return Some(CodecError::MissingSid);
        }
        self.violations.first().map(|v| CodecError::SchemaViolation {
            path: v.path.clone(),
            rule: v.rule.id(),
            message: v.message.clone(),
        })
    }
}

impl fmt::Display for ValidationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.violations.is_empty() {
            return f.write_str("valid");
        }
        for (i, v) in self.violations.iter().enumerate() {
            if i > 0 {
                f.write_str("; ")?;
            }
            write!(f, "{v}")?;
        }
        Ok(())
    }
}

/// Check every typed invariant of `doc`. Violations are data, not errors.
///
/// For the version rule the violation message is the offending value.
pub fn validate(doc: &SilDocument) -> ValidationReport {
    let mut r = ValidationReport::default();

    if doc.version != SIL_VERSION {
        r.push("sil", Rule::Version, doc.version.clone());
    }
    if doc.sid.trim().is_empty() {
        r.push("sil", Rule::Sid, "sid must be non-empty");
    }
    if let Some(lang) = &doc.lang {
        lang_tag(&mut r, "sil", lang);
    }
    validate_uid(&mut r, &doc.uid);

    match doc.payloads.first() {
        None => r.push(
            "sil",
            Rule::ModuleElement,
            "at least one of ws | ui | ql | rs | net is required",
        ),
        Some(first) if first.kind() != doc.doc_type.payload_kind() => r.push(
            format!("sil/{}", first.kind()),
            Rule::DocTypeConsistency,
            format!(
                "document type `{}` requires a leading <{}> payload",
                doc.doc_type,
                doc.doc_type.payload_kind()
            ),
        ),
        Some(_) => {}
    }

    for p in &doc.payloads {
        match p {
            Payload::Ws(ws) => validate_workspace(&mut r, "sil/ws", ws),
            Payload::Ui(ui) => {
                for k in ui.fields.keys() {
                    if !is_ncname(k) {
                        r.push("sil/ui/field", Rule::IdToken, format!("field name `{k}` is not a name token"));
                    }
                }
            }
            Payload::Ql(q) => validate_query(&mut r, "sil/ql", q),
            Payload::Rs(rs) => validate_result_set(&mut r, "sil/rs", rs),
            Payload::Net(net) => validate_net(&mut r, "sil/net", net),
        }
    }
    r
}

fn lang_tag(r: &mut ValidationReport, path: &str, tag: &str) {
    if !is_language_tag(tag) {
        r.push(path, Rule::LanguageTag, format!("`{tag}` is not an RFC 1766 language tag"));
    }
}

fn non_empty(r: &mut ValidationReport, path: &str, what: &str, v: &str) {
    if v.is_empty() {
        r.push(path, Rule::NonEmpty, format!("{what} must be non-empty"));
    }
}

fn validate_uid(r: &mut ValidationReport, uid: &Uid) {
    if !is_ncname(&uid.login) {
        r.push(
            "sil/uid/login",
            Rule::IdToken,
            format!("login `{}` is not a valid ID token", uid.login),
        );
    }
    let mut ids: HashSet<&str> = HashSet::new();
    ids.insert(uid.login.as_str());
    for g in &uid.access.groups {
        if !is_ncname(g) {
            r.push("sil/uid/access/group", Rule::IdToken, format!("group id `{g}` is not a valid ID token"));
        }
        if !ids.insert(g.as_str()) {
            r.push("sil/uid/access/group", Rule::IdUnique, format!("ID `{g}` declared twice"));
        }
    }
    if let Some(d) = &uid.access.default {
        if !uid.access.groups.iter().any(|g| g == d) {
            r.push(
                "sil/uid/access/default",
                Rule::DefaultGroupRef,
                format!("default group `{d}` does not reference a declared <group id>"),
            );
        }
    }
}

/// Invariants of a query on its own, outside any envelope.
pub fn check_query(q: &Query) -> ValidationReport {
    let mut r = ValidationReport::default();
    validate_query(&mut r, "ql", q);
    r
}

fn validate_query(r: &mut ValidationReport, path: &str, q: &Query) {
    non_empty(r, path, "query id", &q.id);
    if q.clauses.is_empty() {
        r.push(path, Rule::NonEmpty, "a query needs at least one clause");
    }
    for c in &q.clauses {
        non_empty(r, &format!("{path}/clause"), "clause value", &c.value);
    }
    for t in &q.targets {
        non_empty(r, &format!("{path}/target"), "target sid", t);
    }
    if q.max_results == Some(0) {
        r.push(path, Rule::MaxResults, "max must be at least 1");
    }
}

fn validate_workspace(r: &mut ValidationReport, path: &str, ws: &Workspace) {
    non_empty(r, path, "workspace name", &ws.name);
    if ws.prefs.page_size == Some(0) {
        r.push(format!("{path}/prefs"), Rule::AttributeValue, "page-size must be at least 1");
    }
    if let Some(lang) = &ws.prefs.lang {
        lang_tag(r, &format!("{path}/prefs"), lang);
    }
    for s in &ws.servers {
        non_empty(r, &format!("{path}/server"), "server sid", s);
    }
    for q in &ws.queries {
        validate_query(r, &format!("{path}/ql"), q);
    }
    let mut names = HashSet::new();
    for b in &ws.baskets {
        let bpath = format!("{path}/basket");
        non_empty(r, &bpath, "basket name", &b.name);
        if !names.insert(b.name.as_str()) {
            r.push(&bpath, Rule::DuplicateName, format!("basket `{}` declared twice", b.name));
        }
        let mut seen = HashSet::new();
        for item in &b.items {
            non_empty(r, &format!("{bpath}/item"), "item uri", item);
            if !seen.insert(item.as_str()) {
                r.push(
                    format!("{bpath}/item"),
                    Rule::DuplicateItem,
                    format!("`{item}` appears twice in basket `{}`", b.name),
                );
            }
        }
    }
}

fn validate_result_set(r: &mut ValidationReport, path: &str, rs: &ResultSet) {
    let mut sids = HashSet::new();
    for s in &rs.statuses {
        non_empty(r, &format!("{path}/status"), "status sid", &s.sid);
        if !sids.insert(s.sid.as_str()) {
            r.push(format!("{path}/status"), Rule::DuplicateName, format!("status for `{}` given twice", s.sid));
        }
    }
    let mut uris = HashSet::new();
    for e in &rs.entries {
        let epath = format!("{path}/entry");
        non_empty(r, &epath, "entry sid", &e.sid);
        non_empty(r, &epath, "entry category", &e.category);
        if !e.uri.starts_with(&format!("{}/", e.sid)) || e.uri.len() <= e.sid.len() + 1 {
            r.push(&epath, Rule::UriPrefix, format!("uri `{}` is not qualified by server `{}`", e.uri, e.sid));
        }
        if !uris.insert(e.uri.as_str()) {
            r.push(&epath, Rule::DuplicateUri, format!("uri `{}` listed twice", e.uri));
        }
        lang_tag(r, &epath, &e.language);
    }
}

fn validate_net(r: &mut ValidationReport, path: &str, net: &NetInfo) {
    let mut names = HashSet::new();
    for s in &net.servers {
        let spath = format!("{path}/server");
        non_empty(r, &spath, "server name", &s.name);
        if !names.insert(s.name.as_str()) {
            r.push(&spath, Rule::DuplicateName, format!("server `{}` listed twice", s.name));
        }
        if !is_valid_url(&s.url) {
            r.push(&spath, Rule::Url, format!("`{}` is not a valid URL", s.url));
        }
        for l in &s.profile.languages {
            lang_tag(r, &format!("{spath}/profile/language"), l);
        }
        for c in &s.profile.categories {
            non_empty(r, &format!("{spath}/profile/category"), "category", c);
        }
    }
    for d in &net.deliveries {
        non_empty(r, &format!("{path}/delivery"), "delivery sid", &d.sid);
    }
}
