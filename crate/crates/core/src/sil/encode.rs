use super::*;
use crate::xml::{Element, Node};

pub fn document_to_element(doc: &SilDocument) -> Element {
    let mut root = Element::new("sil")
        .attr("type", doc.doc_type.as_str())
        .attr_opt("crdate", doc.crdate.map(|t| t.to_string()))
        .attr_opt("update", doc.update.map(|t| t.to_string()))
        .attr_opt("lang", doc.lang.clone())
        .attr("sid", doc.sid.clone())
        .attr("version", doc.version.clone())
        .child(uid_element(&doc.uid));
    for p in &doc.payloads {
        root = root.child(payload_element(p));
    }
    root
}

fn uid_element(uid: &Uid) -> Element {
    let mut access = Element::new("access")
        .child(Element::new("default").attr_opt("group", uid.access.default.clone()));
    for g in &uid.access.groups {
        access = access.child(Element::new("group").attr("id", g.clone()));
    }
    let mut el = Element::new("uid")
        .attr("type", uid.kind.as_str())
        .attr_opt("level", uid.level.map(|l| l.to_string()))
        .child(Element::new("login").attr("id", uid.login.clone()));
    if let Some(p) = &uid.passwd {
        el = el.child(Element::new("passwd").text(p.clone()));
    }
    el.child(access)
}

fn payload_element(p: &Payload) -> Element {
    match p {
        Payload::Ws(ws) => workspace_element(ws),
        Payload::Ui(ui) => {
            let mut el = Element::new("ui");
            for (k, v) in &ui.fields {
                el = el.child(Element::new("field").attr("name", k.clone()).text(v.clone()));
            }
            el
        }
        Payload::Ql(q) => query_element(q),
        Payload::Rs(rs) => result_set_element(rs),
        Payload::Net(net) => net_element(net),
    }
}

fn workspace_element(ws: &Workspace) -> Element {
    let mut el = Element::new("ws").attr("name", ws.name.clone()).child(
        Element::new("prefs")
            .attr_opt("page-size", ws.prefs.page_size.map(|n| n.to_string()))
            .attr_opt("lang", ws.prefs.lang.clone()),
    );
    for s in &ws.servers {
        el = el.child(Element::new("server").attr("sid", s.clone()));
    }
    for q in &ws.queries {
        el = el.child(query_element(q));
    }
    for b in &ws.baskets {
        let mut be = Element::new("basket")
            .attr("name", b.name.clone())
            .attr("created", b.created.to_string());
        for item in &b.items {
            be = be.child(Element::new("item").attr("uri", item.clone()));
        }
        el = el.child(be);
    }
    el
}

pub(super) fn query_element(q: &Query) -> Element {
    let mut el = Element::new("ql")
        .attr("id", q.id.clone())
        .attr("scope", q.scope.as_str())
        .attr_opt("max", q.max_results.map(|n| n.to_string()));
    for c in &q.clauses {
        el = el.child(
            Element::new("clause")
                .attr("field", c.field.as_str())
                .attr("op", c.op.as_str())
                .text(c.value.clone()),
        );
    }
    for t in &q.targets {
        el = el.child(Element::new("target").attr("sid", t.clone()));
    }
    el
}

fn result_set_element(rs: &ResultSet) -> Element {
    let mut el = Element::new("rs")
        .attr("query", rs.query_id.clone())
        .attr_opt("handle", rs.handle.clone())
        .attr("cursor", rs.cursor.to_string())
        .attr("done", if rs.done { "1" } else { "0" })
        .attr_opt("count", rs.count.map(|n| n.to_string()));
    for s in &rs.statuses {
        el = el.child(
            Element::new("status")
                .attr("sid", s.sid.clone())
                .attr("state", s.state.as_str())
                .attr_opt("count", s.count.map(|n| n.to_string()))
                .attr_opt("reason", s.reason.clone()),
        );
    }
    for e in &rs.entries {
        el = el.child(
            Element::new("entry")
                .attr("uri", e.uri.clone())
                .attr("sid", e.sid.clone())
                .attr("lang", e.language.clone())
                .attr("category", e.category.clone())
                .attr("level", e.required_level.to_string())
                .text(e.title.clone()),
        );
    }
    el
}

pub(crate) fn server_record_element(s: &ServerRecord) -> Element {
    let mut profile = Element::new("profile");
    for l in &s.profile.languages {
        profile = profile.child(Element::new("language").text(l.clone()));
    }
    for c in &s.profile.categories {
        profile = profile.child(Element::new("category").text(c.clone()));
    }
    if !s.profile.description.is_empty() {
        profile = profile.child(Element::new("description").text(s.profile.description.clone()));
    }
    Element::new("server")
        .attr("name", s.name.clone())
        .attr("url", s.url.clone())
        .attr("status", s.status.as_str())
        .attr("updated", s.last_update.to_string())
        .child(profile)
}

fn net_element(net: &NetInfo) -> Element {
    let mut el = Element::new("net");
    for s in &net.servers {
        el = el.child(server_record_element(s));
    }
    for d in &net.deliveries {
        el = el.child(
            Element::new("delivery")
                .attr("sid", d.sid.clone())
                .attr("outcome", d.outcome.as_str())
                .attr("attempts", d.attempts.to_string()),
        );
    }
    el
}

fn is_xml_char(c: char) -> bool {
    matches!(c, '\t' | '\n' | '\r' | '\u{20}'..='\u{D7FF}' | '\u{E000}'..='\u{FFFD}' | '\u{10000}'..)
}

/// Path of the first element holding a character XML 1.0 cannot represent.
pub(super) fn find_illegal_char(el: &Element) -> Option<String> {
    fn walk(el: &Element, path: &mut Vec<String>) -> Option<String> {
        path.push(el.name.clone());
        let bad_attr = el.attrs.iter().any(|(_, v)| !v.chars().all(is_xml_char));
        let bad_text = el.children.iter().any(|n| match n {
            Node::Text(t) => !t.chars().all(is_xml_char),
            Node::Element(_) => false,
        });
        if bad_attr || bad_text {
            return Some(path.join("/"));
        }
        for child in el.elements() {
            if let Some(p) = walk(child, path) {
                return Some(p);
            }
        }
        path.pop();
        None
    }
    walk(el, &mut Vec::new())
}
