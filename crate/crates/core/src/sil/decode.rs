//! Element tree -> typed document, checked against the built-in grammar.
//!
//! The builder is lenient: it keeps going after a violation so a single
//! pass can report everything wrong with a document. `parse_document`
//! refuses the result if the report is non-empty.

use super::*;
use crate::xml::Element;

#[derive(Clone, Copy)]
enum Occ {
    One,
    Opt,
    Many,
    Plus,
}

impl Occ {
    fn min(self) -> usize {
        match self {
            Occ::One | Occ::Plus => 1,
            Occ::Opt | Occ::Many => 0,
        }
    }

    fn max(self) -> usize {
        match self {
            Occ::One | Occ::Opt => 1,
            Occ::Many | Occ::Plus => usize::MAX,
        }
    }
}

const MODULE_ELEMENTS: &[&str] = &["ws", "ui", "ql", "rs", "net"];

struct Decoder {
    report: ValidationReport,
}

/// Check `root` against the grammar and build the typed document.
pub fn document_from_element(root: &Element) -> Result<SilDocument, CodecError> {
    let (doc, report) = decode(root);
    if let Some(err) = report.to_error() {
        return Err(err);
    }
    doc.ok_or_else(|| CodecError::SchemaViolation {
        path: root.name.clone(),
        rule: Rule::ContentModel.id(),
        message: "root element must be <sil>".into(),
    })
}

/// Full report for raw bytes: grammar violations plus typed invariants.
pub fn validate_xml(bytes: &[u8]) -> Result<ValidationReport, crate::xml::XmlError> {
    let root = crate::xml::parse(bytes)?;
    Ok(decode(&root).1)
}

fn decode(root: &Element) -> (Option<SilDocument>, ValidationReport) {
    let mut d = Decoder {
        report: ValidationReport::default(),
    };
    if root.name != "sil" {
        d.report.push(
            root.name.clone(),
            Rule::ContentModel,
            format!("root element must be <sil>, found <{}>", root.name),
        );
        return (None, d.report);
    }
    let doc = d.sil(root);
    let typed = validate(&doc);
    let grammar_flagged_modules = d.report.has_rule(Rule::ModuleElement);
    for v in typed.violations {
        if v.rule == Rule::ModuleElement && grammar_flagged_modules {
            continue;
        }
        if d.report.violations.iter().any(|w| w.path == v.path && w.rule == v.rule) {
            continue;
        }
        d.report.violations.push(v);
    }
    (Some(doc), d.report)
}

impl Decoder {
    fn attrs(&mut self, el: &Element, path: &str, allowed: &[&str]) {
        for (k, _) in &el.attrs {
            if !allowed.contains(&k.as_str()) {
                self.report.push(
                    path,
                    Rule::UnknownAttribute,
                    format!("attribute `{k}` is not declared for <{}>", el.name),
                );
            }
        }
    }

    fn required<'e>(&mut self, el: &'e Element, path: &str, name: &str) -> &'e str {
        match el.get(name) {
            Some(v) => v,
            None => {
                self.report.push(
                    path,
                    Rule::MissingAttribute,
                    format!("<{}> requires attribute `{name}`", el.name),
                );
                ""
            }
        }
    }

    fn enum_attr<T: Copy>(
        &mut self,
        el: &Element,
        path: &str,
        name: &str,
        parse: fn(&str) -> Option<T>,
        default: Option<T>,
        fallback: T,
    ) -> T {
        match (el.get(name), default) {
            (None, Some(d)) => d,
            (None, None) => {
                self.required(el, path, name);
                fallback
            }
            (Some(v), _) => parse(v).unwrap_or_else(|| {
                self.report.push(
                    path,
                    Rule::AttributeValue,
                    format!("`{v}` is not an allowed value for `{name}`"),
                );
                fallback
            }),
        }
    }

    fn number<T: std::str::FromStr>(&mut self, path: &str, name: &str, v: &str) -> Option<T> {
        if !v.is_empty() && v.bytes().all(|b| b.is_ascii_digit()) {
            if let Ok(n) = v.parse() {
                return Some(n);
            }
        }
        self.report.push(
            path,
            Rule::AttributeValue,
            format!("`{name}` must be a non-negative integer, found `{v}`"),
        );
        None
    }

    fn opt_number<T: std::str::FromStr>(&mut self, el: &Element, path: &str, name: &str) -> Option<T> {
        let v = el.get(name)?;
        self.number(path, name, v)
    }

    fn timestamp(&mut self, path: &str, name: &str, v: &str) -> Option<Timestamp> {
        match v.parse() {
            Ok(t) => Some(t),
            Err(_) => {
                self.report.push(
                    path,
                    Rule::AttributeValue,
                    format!("`{name}` must be an ISO-8601 UTC timestamp, found `{v}`"),
                );
                None
            }
        }
    }

    fn element_only(&mut self, el: &Element, path: &str) {
        if el.has_significant_text() {
            self.report.push(
                path,
                Rule::CharacterData,
                format!("<{}> has element-only content", el.name),
            );
        }
    }

    fn text_only(&mut self, el: &Element, path: &str) -> String {
        if let Some(child) = el.elements().next() {
            self.report.push(
                format!("{path}/{}", child.name),
                Rule::ContentModel,
                format!("<{}> holds character data only", el.name),
            );
        }
        el.text_content()
    }

    fn empty(&mut self, el: &Element, path: &str) {
        if !el.children.is_empty() && (el.elements().next().is_some() || el.has_significant_text()) {
            self.report.push(path, Rule::ContentModel, format!("<{}> is declared EMPTY", el.name));
        }
    }

    /// Ordered content model check; reports the first deviation only.
    fn sequence<'e, I>(&mut self, children: I, parent: &str, model: &[(&str, Occ)])
    where
        I: IntoIterator<Item = &'e Element>,
    {
        let mut i = 0;
        let mut count = 0;
        for child in children {
            loop {
                let Some(&(name, occ)) = model.get(i) else {
                    self.report.push(
                        format!("{parent}/{}", child.name),
                        Rule::ContentModel,
                        format!("unexpected <{}>", child.name),
                    );
                    return;
                };
                if name == child.name && count < occ.max() {
                    count += 1;
                    break;
                }
                if count < occ.min() {
                    self.report.push(
                        format!("{parent}/{}", child.name),
                        Rule::ContentModel,
                        format!("expected <{name}>, found <{}>", child.name),
                    );
                    return;
                }
                i += 1;
                count = 0;
            }
        }
        while let Some(&(name, occ)) = model.get(i) {
            if count < occ.min() {
                self.report.push(
                    parent,
                    Rule::ContentModel,
                    format!("missing required <{name}>"),
                );
                return;
            }
            i += 1;
            count = 0;
        }
    }

    fn sil(&mut self, el: &Element) -> SilDocument {
        let path = "sil";
        self.attrs(el, path, &["type", "crdate", "update", "lang", "sid", "version"]);
        self.element_only(el, path);
        let doc_type = self.enum_attr(el, path, "type", DocType::from_wire, Some(DocType::Workspace), DocType::Workspace);
        let crdate = el.get("crdate").and_then(|v| self.timestamp(path, "crdate", v));
        let update = el.get("update").and_then(|v| self.timestamp(path, "update", v));

        let mut known = Vec::new();
        for child in el.elements() {
            if child.name == "uid" || MODULE_ELEMENTS.contains(&child.name.as_str()) {
                known.push(child);
            } else {
                self.report.push(
                    format!("sil/{}", child.name),
                    Rule::ModuleElement,
                    format!(
                        "<{}> is not a module element (ws | ui | ql | rs | net)",
                        child.name
                    ),
                );
            }
        }
        // uid first, then one or more modules in any order
        let mut uid_seen = false;
        let mut modules = 0;
        for c in &known {
            if c.name == "uid" {
                if uid_seen || modules > 0 {
                    self.report.push("sil/uid", Rule::ContentModel, "<uid> must appear once, first");
                }
                uid_seen = true;
            } else {
                if !uid_seen {
                    self.report.push(format!("sil/{}", c.name), Rule::ContentModel, "<uid> must precede payloads");
                    uid_seen = true;
                }
                modules += 1;
            }
        }
        if !uid_seen {
            self.report.push(path, Rule::ContentModel, "missing required <uid>");
        }

        let uid = known
            .iter()
            .find(|c| c.name == "uid")
            .map(|c| self.uid(c))
            .unwrap_or_else(|| Uid::user(""));
        let payloads = known
            .iter()
            .filter(|c| c.name != "uid")
            .map(|c| self.payload(c))
            .collect();

        SilDocument {
            doc_type,
            sid: el.get("sid").unwrap_or_default().to_owned(),
            version: el.get("version").unwrap_or(SIL_VERSION).to_owned(),
            lang: el.get("lang").map(str::to_owned),
            crdate,
            update,
            uid,
            payloads,
        }
    }

    fn uid(&mut self, el: &Element) -> Uid {
        let path = "sil/uid";
        self.attrs(el, path, &["type", "level"]);
        self.element_only(el, path);
        self.sequence(
            el.elements(),
            path,
            &[("login", Occ::One), ("passwd", Occ::Opt), ("access", Occ::One)],
        );
        let kind = self.enum_attr(el, path, "type", UidKind::from_wire, Some(UidKind::User), UidKind::User);
        let level = self.opt_number(el, path, "level");

        let mut uid = Uid {
            kind,
            login: String::new(),
            passwd: None,
            level,
            access: Access::default(),
        };
        for c in el.elements() {
            match c.name.as_str() {
                "login" => {
                    let p = "sil/uid/login";
                    self.attrs(c, p, &["id"]);
                    self.empty(c, p);
                    uid.login = self.required(c, p, "id").to_owned();
                }
                "passwd" => uid.passwd = Some(self.text_only(c, "sil/uid/passwd")),
                "access" => uid.access = self.access(c),
                _ => {}
            }
        }
        uid
    }

    fn access(&mut self, el: &Element) -> Access {
        let path = "sil/uid/access";
        self.attrs(el, path, &[]);
        self.element_only(el, path);
        self.sequence(el.elements(), path, &[("default", Occ::One), ("group", Occ::Many)]);
        let mut access = Access::default();
        for c in el.elements() {
            match c.name.as_str() {
                "default" => {
                    let p = "sil/uid/access/default";
                    self.attrs(c, p, &["group"]);
                    self.empty(c, p);
                    access.default = c.get("group").map(str::to_owned);
                }
                "group" => {
                    let p = "sil/uid/access/group";
                    self.attrs(c, p, &["id"]);
                    self.empty(c, p);
                    access.groups.push(self.required(c, p, "id").to_owned());
                }
                _ => {}
            }
        }
        access
    }

    fn payload(&mut self, el: &Element) -> Payload {
        match el.name.as_str() {
            "ws" => Payload::Ws(self.workspace(el, "sil/ws")),
            "ui" => Payload::Ui(self.user_info(el)),
            "ql" => Payload::Ql(self.query(el, "sil/ql")),
            "rs" => Payload::Rs(self.result_set(el)),
            _ => Payload::Net(self.net(el)),
        }
    }

    fn user_info(&mut self, el: &Element) -> UserInfo {
        let path = "sil/ui";
        self.attrs(el, path, &[]);
        self.element_only(el, path);
        self.sequence(el.elements(), path, &[("field", Occ::Many)]);
        let mut ui = UserInfo::default();
        for c in el.elements().filter(|c| c.name == "field") {
            let p = "sil/ui/field";
            self.attrs(c, p, &["name"]);
            let name = self.required(c, p, "name").to_owned();
            let value = self.text_only(c, p);
            if ui.fields.insert(name.clone(), value).is_some() {
                self.report.push(p, Rule::DuplicateName, format!("field `{name}` given twice"));
            }
        }
        ui
    }

    fn workspace(&mut self, el: &Element, path: &str) -> Workspace {
        self.attrs(el, path, &["name"]);
        self.element_only(el, path);
        self.sequence(
            el.elements(),
            path,
            &[
                ("prefs", Occ::Opt),
                ("server", Occ::Many),
                ("ql", Occ::Many),
                ("basket", Occ::Many),
            ],
        );
        let mut ws = Workspace::new(self.required(el, path, "name"));
        for c in el.elements() {
            match c.name.as_str() {
                "prefs" => {
                    let p = format!("{path}/prefs");
                    self.attrs(c, &p, &["page-size", "lang"]);
                    self.empty(c, &p);
                    ws.prefs.page_size = self.opt_number(c, &p, "page-size");
                    ws.prefs.lang = c.get("lang").map(str::to_owned);
                }
                "server" => {
                    let p = format!("{path}/server");
                    self.attrs(c, &p, &["sid"]);
                    self.empty(c, &p);
                    ws.servers.push(self.required(c, &p, "sid").to_owned());
                }
                "ql" => {
                    let q = self.query(c, &format!("{path}/ql"));
                    ws.queries.push(q);
                }
                "basket" => {
                    let p = format!("{path}/basket");
                    self.attrs(c, &p, &["name", "created"]);
                    self.element_only(c, &p);
                    self.sequence(c.elements(), &p, &[("item", Occ::Many)]);
                    let name = self.required(c, &p, "name").to_owned();
                    let created_raw = self.required(c, &p, "created");
                    let created = if created_raw.is_empty() {
                        Timestamp::default()
                    } else {
                        self.timestamp(&p, "created", created_raw).unwrap_or_default()
                    };
                    let mut basket = Basket::new(name, created);
                    for item in c.elements().filter(|i| i.name == "item") {
                        let ip = format!("{p}/item");
                        self.attrs(item, &ip, &["uri"]);
                        self.empty(item, &ip);
                        basket.items.push(self.required(item, &ip, "uri").to_owned());
                    }
                    ws.baskets.push(basket);
                }
                _ => {}
            }
        }
        ws
    }

    fn query(&mut self, el: &Element, path: &str) -> Query {
        self.attrs(el, path, &["id", "scope", "max"]);
        self.element_only(el, path);
        self.sequence(el.elements(), path, &[("clause", Occ::Plus), ("target", Occ::Many)]);
        let scope = self.enum_attr(el, path, "scope", Scope::from_wire, Some(Scope::Metadata), Scope::Metadata);
        let mut q = Query {
            id: self.required(el, path, "id").to_owned(),
            scope,
            clauses: Vec::new(),
            targets: Vec::new(),
            max_results: self.opt_number(el, path, "max"),
        };
        for c in el.elements() {
            match c.name.as_str() {
                "clause" => {
                    let p = format!("{path}/clause");
                    self.attrs(c, &p, &["field", "op"]);
                    let field = self.enum_attr(c, &p, "field", Field::from_wire, None, Field::Keyword);
                    let op = self.enum_attr(c, &p, "op", Op::from_wire, Some(Op::Eq), Op::Eq);
                    let value = self.text_only(c, &p);
                    q.clauses.push(Clause { field, op, value });
                }
                "target" => {
                    let p = format!("{path}/target");
                    self.attrs(c, &p, &["sid"]);
                    self.empty(c, &p);
                    q.targets.push(self.required(c, &p, "sid").to_owned());
                }
                _ => {}
            }
        }
        q
    }

    fn result_set(&mut self, el: &Element) -> ResultSet {
        let path = "sil/rs";
        self.attrs(el, path, &["query", "handle", "cursor", "done", "count"]);
        self.element_only(el, path);
        self.sequence(el.elements(), path, &[("status", Occ::Many), ("entry", Occ::Many)]);
        let done = match el.get("done") {
            None | Some("0") => false,
            Some("1") => true,
            Some(v) => {
                self.report.push(path, Rule::AttributeValue, format!("`done` must be 0 or 1, found `{v}`"));
                false
            }
        };
        let mut rs = ResultSet {
            query_id: self.required(el, path, "query").to_owned(),
            handle: el.get("handle").map(str::to_owned),
            cursor: self.opt_number(el, path, "cursor").unwrap_or(0),
            done,
            count: self.opt_number(el, path, "count"),
            statuses: Vec::new(),
            entries: Vec::new(),
        };
        for c in el.elements() {
            match c.name.as_str() {
                "status" => {
                    let p = "sil/rs/status";
                    self.attrs(c, p, &["sid", "state", "count", "reason"]);
                    self.empty(c, p);
                    let state = self.enum_attr(c, p, "state", SubState::from_wire, None, SubState::Failed);
                    rs.statuses.push(ServerStatus {
                        sid: self.required(c, p, "sid").to_owned(),
                        state,
                        count: self.opt_number(c, p, "count"),
                        reason: c.get("reason").map(str::to_owned),
                    });
                }
                "entry" => {
                    let p = "sil/rs/entry";
                    self.attrs(c, p, &["uri", "sid", "lang", "category", "level"]);
                    let level_raw = self.required(c, p, "level").to_owned();
                    let required_level = if level_raw.is_empty() {
                        0
                    } else {
                        self.number(p, "level", &level_raw).unwrap_or(0)
                    };
                    rs.entries.push(ResultEntry {
                        uri: self.required(c, p, "uri").to_owned(),
                        sid: self.required(c, p, "sid").to_owned(),
                        language: self.required(c, p, "lang").to_owned(),
                        category: self.required(c, p, "category").to_owned(),
                        required_level,
                        title: self.text_only(c, p),
                    });
                }
                _ => {}
            }
        }
        rs
    }

    fn net(&mut self, el: &Element) -> NetInfo {
        let path = "sil/net";
        self.attrs(el, path, &[]);
        self.element_only(el, path);
        self.sequence(el.elements(), path, &[("server", Occ::Many), ("delivery", Occ::Many)]);
        let mut net = NetInfo::default();
        for c in el.elements() {
            match c.name.as_str() {
                "server" => {
                    let rec = self.server_record(c);
                    net.servers.push(rec);
                }
                "delivery" => {
                    let p = "sil/net/delivery";
                    self.attrs(c, p, &["sid", "outcome", "attempts"]);
                    self.empty(c, p);
                    let outcome = self.enum_attr(c, p, "outcome", DeliveryOutcome::from_wire, None, DeliveryOutcome::Failed);
                    let attempts_raw = self.required(c, p, "attempts").to_owned();
                    net.deliveries.push(Delivery {
                        sid: self.required(c, p, "sid").to_owned(),
                        outcome,
                        attempts: if attempts_raw.is_empty() {
                            0
                        } else {
                            self.number(p, "attempts", &attempts_raw).unwrap_or(0)
                        },
                    });
                }
                _ => {}
            }
        }
        net
    }

    fn server_record(&mut self, el: &Element) -> ServerRecord {
        let p = "sil/net/server";
        self.attrs(el, p, &["name", "url", "status", "updated"]);
        self.element_only(el, p);
        self.sequence(el.elements(), p, &[("profile", Occ::One)]);
        let status = self.enum_attr(el, p, "status", ServerState::from_wire, Some(ServerState::Online), ServerState::Online);
        let updated_raw = self.required(el, p, "updated");
        let last_update = if updated_raw.is_empty() {
            Timestamp::default()
        } else {
            self.timestamp(p, "updated", updated_raw).unwrap_or_default()
        };
        let mut profile = ServerProfile::default();
        if let Some(pe) = el.elements().find(|c| c.name == "profile") {
            let pp = "sil/net/server/profile";
            self.attrs(pe, pp, &[]);
            self.element_only(pe, pp);
            self.sequence(
                pe.elements(),
                pp,
                &[("language", Occ::Many), ("category", Occ::Many), ("description", Occ::Opt)],
            );
            for c in pe.elements() {
                let cp = format!("{pp}/{}", c.name);
                self.attrs(c, &cp, &[]);
                let text = self.text_only(c, &cp);
                match c.name.as_str() {
                    "language" => profile.languages.push(text),
                    "category" => profile.categories.push(text),
                    "description" => profile.description = text,
                    _ => {}
                }
            }
        }
        ServerRecord {
            name: self.required(el, p, "name").to_owned(),
            url: self.required(el, p, "url").to_owned(),
            status,
            profile,
            last_update,
        }
    }
}
