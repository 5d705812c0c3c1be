//! Seeded generation of valid documents and single-constraint mutants.
//!
//! Used by `silctl fuzz` and by the codec acceptance checks. The same seed
//! always yields the same corpus.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::xml::Element;

const LOGINS: &[&str] = &["alice", "bob", "carol", "dmitri", "eloise", "_svc", "x-1.y"];
const GROUPS: &[&str] = &["inalf", "lingua", "elan", "parole", "telri", "guest"];
const LANGS: &[&str] = &["fr", "de", "en", "fr-BE", "it", "es", "x-klingon"];
const CATEGORIES: &[&str] = &["prose", "poetry", "theatre", "dictionary", "newspaper"];
const SIDS: &[&str] = &["srvA", "srvB", "srvC", "nancy", "paris"];
const WORDS: &[&str] = &[
    "Les", "Misérables", "Faust", "<odd>", "&amp;", "quote\"d", "line\nbreak", "tab\there", "  padded ",
    "Ünïcødé", "日本", "",
];

/// A valid document drawn from `rng`.
pub fn random_document(rng: &mut impl Rng) -> SilDocument {
    let payload_count = rng.gen_range(1..=3);
    let payloads: Vec<Payload> = (0..payload_count).map(|_| random_payload(rng)).collect();
    let login = *LOGINS.choose(rng).unwrap();
    let mut groups: Vec<&str> = GROUPS.iter().copied().filter(|_| rng.gen_bool(0.4)).collect();
    groups.shuffle(rng);
    let default = if !groups.is_empty() && rng.gen_bool(0.7) {
        Some(*groups.choose(rng).unwrap())
    } else {
        None
    };
    let mut uid = Uid::user(login).with_groups(default, groups);
    uid.kind = *UidKind::ALL.choose(rng).unwrap();
    if rng.gen_bool(0.5) {
        uid.passwd = Some(text(rng));
    }
    if rng.gen_bool(0.3) {
        uid.level = Some(rng.gen_range(0..10));
    }
    SilDocument {
        doc_type: payloads[0].doc_type(),
        sid: SIDS.choose(rng).unwrap().to_string(),
        version: SIL_VERSION.into(),
        lang: rng.gen_bool(0.5).then(|| LANGS.choose(rng).unwrap().to_string()),
        crdate: rng.gen_bool(0.5).then(|| ts(rng)),
        update: rng.gen_bool(0.5).then(|| ts(rng)),
        uid,
        payloads,
    }
}

fn ts(rng: &mut impl Rng) -> Timestamp {
    let secs = rng.gen_range(900_000_000i64..2_000_000_000);
    if rng.gen_bool(0.2) {
        Timestamp::from_millis(secs * 1000 + rng.gen_range(1..1000))
    } else {
        Timestamp::from_secs(secs)
    }
}

fn text(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(0..4);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

fn non_empty_text(rng: &mut impl Rng) -> String {
    loop {
        let t = text(rng);
        if !t.is_empty() {
            return t;
        }
    }
}

fn subset(rng: &mut impl Rng, items: &[&str], p: f64) -> Vec<String> {
    items.iter().filter(|_| rng.gen_bool(p)).map(|s| s.to_string()).collect()
}

fn random_query(rng: &mut impl Rng) -> Query {
    let clauses = (0..rng.gen_range(1..4))
        .map(|_| Clause {
            field: *Field::ALL.choose(rng).unwrap(),
            op: *Op::ALL.choose(rng).unwrap(),
            value: non_empty_text(rng),
        })
        .collect();
    Query {
        id: format!("q{}", rng.gen_range(0..1000)),
        scope: *Scope::ALL.choose(rng).unwrap(),
        clauses,
        targets: SIDS.iter().filter(|_| rng.gen_bool(0.3)).map(|s| s.to_string()).collect(),
        max_results: rng.gen_bool(0.5).then(|| rng.gen_range(1..500)),
    }
}

fn random_payload(rng: &mut impl Rng) -> Payload {
    match rng.gen_range(0..5) {
        0 => {
            let mut ws = Workspace::new(format!("ws{}", rng.gen_range(0..50)));
            ws.prefs.page_size = rng.gen_bool(0.5).then(|| rng.gen_range(1..200));
            ws.prefs.lang = rng.gen_bool(0.5).then(|| LANGS.choose(rng).unwrap().to_string());
            ws.servers = SIDS.iter().filter(|_| rng.gen_bool(0.5)).map(|s| s.to_string()).collect();
            ws.queries = (0..rng.gen_range(0..3)).map(|_| random_query(rng)).collect();
            for i in 0..rng.gen_range(0..3) {
                let mut b = Basket::new(format!("basket-{i}"), ts(rng));
                for j in 0..rng.gen_range(0..5) {
                    b.add(&format!("{}/r{j}", SIDS.choose(rng).unwrap()));
                }
                ws.baskets.push(b);
            }
            Payload::Ws(ws)
        }
        1 => {
            let mut ui = UserInfo::default();
            for k in ["name", "email", "affiliation", "status"] {
                if rng.gen_bool(0.4) {
                    ui.fields.insert(k.into(), text(rng));
                }
            }
            Payload::Ui(ui)
        }
        2 => Payload::Ql(random_query(rng)),
        3 => {
            let mut rs = ResultSet {
                query_id: format!("q{}", rng.gen_range(0..1000)),
                handle: rng.gen_bool(0.5).then(|| format!("h{}", rng.gen_range(0..100))),
                cursor: rng.gen_range(0..1000),
                done: rng.gen_bool(0.5),
                count: rng.gen_bool(0.3).then(|| rng.gen_range(0..10_000)),
                ..Default::default()
            };
            for sid in subset(rng, SIDS, 0.3) {
                rs.statuses.push(ServerStatus {
                    sid: sid.to_string(),
                    state: *SubState::ALL.choose(rng).unwrap(),
                    count: rng.gen_bool(0.5).then(|| rng.gen_range(0..100)),
                    reason: rng.gen_bool(0.2).then(|| non_empty_text(rng)),
                });
            }
            for i in 0..rng.gen_range(0..6) {
                let sid = SIDS.choose(rng).unwrap().to_string();
                rs.entries.push(ResultEntry {
                    uri: format!("{sid}/r{i}"),
                    sid,
                    title: text(rng),
                    language: LANGS.choose(rng).unwrap().to_string(),
                    category: CATEGORIES.choose(rng).unwrap().to_string(),
                    required_level: rng.gen_range(0..6),
                });
            }
            Payload::Rs(rs)
        }
        _ => {
            let mut net = NetInfo::default();
            for (i, sid) in subset(rng, SIDS, 0.5).into_iter().enumerate() {
                net.servers.push(ServerRecord {
                    name: sid.to_string(),
                    url: format!("http://{sid}.example:{}", 7000 + i),
                    status: *ServerState::ALL.choose(rng).unwrap(),
                    profile: ServerProfile {
                        languages: subset(rng, LANGS, 0.4),
                        categories: subset(rng, CATEGORIES, 0.4),
                        description: text(rng),
                    },
                    last_update: ts(rng),
                });
            }
            for sid in subset(rng, SIDS, 0.2) {
                net.deliveries.push(Delivery {
                    sid: sid.to_string(),
                    outcome: *DeliveryOutcome::ALL.choose(rng).unwrap(),
                    attempts: rng.gen_range(1..5),
                });
            }
            Payload::Net(net)
        }
    }
}

/// One targeted breach of the grammar, applied to a canonical tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mutation {
    /// `version` set to something other than the fixed value.
    WrongVersion,
    /// `sid` removed from the envelope.
    DropSid,
    /// `default group` points at an undeclared group.
    BreakGroupRef,
    /// An element outside the module set appended as a payload.
    UnknownPayload,
    /// `uid` removed.
    DropUid,
    /// `login` removed from `uid`.
    DropLogin,
    /// Envelope `type` set outside its enumeration.
    BadDocType,
    /// An undeclared attribute on the envelope.
    UndeclaredAttribute,
}

impl Mutation {
    pub const ALL: &'static [Mutation] = &[
        Mutation::WrongVersion,
        Mutation::DropSid,
        Mutation::BreakGroupRef,
        Mutation::UnknownPayload,
        Mutation::DropUid,
        Mutation::DropLogin,
        Mutation::BadDocType,
        Mutation::UndeclaredAttribute,
    ];

    pub fn apply(self, root: &mut Element) {
        match self {
            Mutation::WrongVersion => root.set_attr("version", "0.4"),
            Mutation::DropSid => {
                root.remove_attr("sid");
            }
            Mutation::BreakGroupRef => {
                if let Some(default) = root
                    .elements_mut()
                    .find(|e| e.name == "uid")
                    .and_then(|u| u.elements_mut().find(|e| e.name == "access"))
                    .and_then(|a| a.elements_mut().find(|e| e.name == "default"))
                {
                    default.set_attr("group", "no-such-group");
                }
            }
            Mutation::UnknownPayload => root.children.push(crate::xml::Node::Element(Element::new("zz"))),
            Mutation::DropUid => root
                .children
                .retain(|n| !matches!(n, crate::xml::Node::Element(e) if e.name == "uid")),
            Mutation::DropLogin => {
                if let Some(uid) = root.elements_mut().find(|e| e.name == "uid") {
                    uid.children
                        .retain(|n| !matches!(n, crate::xml::Node::Element(e) if e.name == "login"));
                }
            }
            Mutation::BadDocType => root.set_attr("type", "catalogue"),
            Mutation::UndeclaredAttribute => root.set_attr("owner", "mallory"),
        }
    }

    /// Whether `err` is the rejection this mutation must provoke.
    pub fn expected(self, err: &CodecError) -> bool {
        match self {
            Mutation::WrongVersion => matches!(err, CodecError::VersionMismatch { .. }),
            Mutation::DropSid => matches!(err, CodecError::MissingSid),
            Mutation::BreakGroupRef => {
                matches!(err, CodecError::SchemaViolation { rule, .. } if *rule == Rule::DefaultGroupRef.id())
            }
            Mutation::UnknownPayload => {
                matches!(err, CodecError::SchemaViolation { rule, .. } if *rule == Rule::ModuleElement.id())
            }
            _ => matches!(err, CodecError::SchemaViolation { .. }),
        }
    }
}

#[derive(Debug, Default, Clone)]
pub struct FuzzReport {
    pub documents: usize,
    pub roundtrip_failures: Vec<String>,
    pub mutants: usize,
    /// Mutants that parsed, or failed with the wrong error.
    pub escaped_mutants: Vec<String>,
}

impl FuzzReport {
    pub fn is_clean(&self) -> bool {
        self.roundtrip_failures.is_empty() && self.escaped_mutants.is_empty()
    }
}

/// Round-trip `count` generated documents and check every mutation of each
/// is rejected with the right error.
pub fn run_fuzz(seed: u64, count: usize) -> FuzzReport {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FuzzReport::default();
    for i in 0..count {
        let doc = random_document(&mut rng);
        report.documents += 1;
        let bytes = match serialize_document(&doc) {
            Ok(b) => b,
            Err(e) => {
                report.roundtrip_failures.push(format!("#{i}: serialize: {e}"));
                continue;
            }
        };
        match parse_document(&bytes) {
            Ok(back) if back == doc => {}
            Ok(_) => report.roundtrip_failures.push(format!("#{i}: parse(serialize(d)) != d")),
            Err(e) => report.roundtrip_failures.push(format!("#{i}: reparse: {e}")),
        }
        let tree = document_to_element(&doc);
        for &m in Mutation::ALL {
            let mut mutant = tree.clone();
            m.apply(&mut mutant);
            report.mutants += 1;
            match parse_document(&mutant.to_canonical()) {
                Ok(_) => report.escaped_mutants.push(format!("#{i}: {m:?} accepted")),
                Err(e) if !m.expected(&e) => report.escaped_mutants.push(format!("#{i}: {m:?} -> {e}")),
                Err(_) => {}
            }
        }
    }
    report
}
