//! Recorded exchanges and their canonical XML form.
//!
//! Only protocol headers (`Content-Type` and `X-*`) are kept, with
//! lower-cased names sorted, so in-memory and HTTP runs compare equal.

use base64::Engine;

use crate::wire::{Request, Response};
use crate::xml::{self, Element};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RecordedResponse {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl RecordedResponse {
    pub(crate) fn of(r: &Response) -> Self {
        RecordedResponse {
            status: r.status,
            headers: protocol_headers(&r.headers),
            body: r.body.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Exchange {
    pub seq: u64,
    pub from: String,
    pub to: String,
    pub method: String,
    pub target: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
    /// `None` when the target was unreachable.
    pub response: Option<RecordedResponse>,
}

fn protocol_headers(headers: &[(String, String)]) -> Vec<(String, String)> {
    let mut out: Vec<(String, String)> = headers
        .iter()
        .map(|(k, v)| (k.to_ascii_lowercase(), v.clone()))
        .filter(|(k, _)| k == "content-type" || k.starts_with("x-"))
        .collect();
    out.sort();
    out
}

fn lookup<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    let name = name.to_ascii_lowercase();
    headers.iter().find(|(k, _)| *k == name).map(|(_, v)| v.as_str())
}

impl Exchange {
    pub(crate) fn capture(seq: u64, from: &str, to: &str, req: &Request) -> Self {
        Exchange {
            seq,
            from: from.to_owned(),
            to: to.to_owned(),
            method: req.method.clone(),
            target: req.target.clone(),
            headers: protocol_headers(&req.headers),
            body: req.body.clone(),
            response: None,
        }
    }

    pub fn path(&self) -> &str {
        self.target.split_once('?').map_or(&self.target, |(p, _)| p)
    }

    pub fn header(&self, name: &str) -> Option<&str> {
        lookup(&self.headers, name)
    }

    pub fn response_header(&self, name: &str) -> Option<&str> {
        self.response.as_ref().and_then(|r| lookup(&r.headers, name))
    }

    pub fn is_server_to_server(&self) -> bool {
        self.path().starts_with("/s2s/")
    }

    fn to_element(&self) -> Element {
        let mut req = Element::new("request").attr("method", &self.method).attr("target", &self.target);
        req = with_message(req, &self.headers, &self.body);
        let mut ex = Element::new("exchange")
            .attr("seq", self.seq.to_string())
            .attr("from", &self.from)
            .attr("to", &self.to)
            .child(req);
        ex = match &self.response {
            Some(r) => ex.child(with_message(
                Element::new("response").attr("status", r.status.to_string()),
                &r.headers,
                &r.body,
            )),
            None => ex.child(Element::new("unreachable")),
        };
        ex
    }
}

fn with_message(mut el: Element, headers: &[(String, String)], body: &[u8]) -> Element {
    for (k, v) in headers {
        el = el.child(Element::new("header").attr("name", k).attr("value", v));
    }
    if !body.is_empty() {
        el = el.child(match std::str::from_utf8(body) {
            Ok(text) if text.chars().all(xml_char) => Element::new("body").text(text),
            _ => Element::new("body")
                .attr("encoding", "base64")
                .text(base64::engine::general_purpose::STANDARD.encode(body)),
        });
    }
    el
}

fn xml_char(c: char) -> bool {
    matches!(c, '\t' | '\n' | '\r') || (c >= ' ' && c != '\u{FFFE}' && c != '\u{FFFF}')
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Transcript {
    pub exchanges: Vec<Exchange>,
}

impl Transcript {
    pub fn to_element(&self) -> Element {
        self.exchanges
            .iter()
            .fold(Element::new("transcript"), |t, ex| t.child(ex.to_element()))
    }

    /// Canonical XML, one line, byte-stable for a deterministic run.
    pub fn to_xml(&self) -> Vec<u8> {
        self.to_element().to_canonical()
    }

    /// Parse a transcript written by [`Transcript::to_xml`].
    pub fn from_xml(bytes: &[u8]) -> Result<Transcript, xml::XmlError> {
        let root = xml::parse(bytes)?;
        if root.name != "transcript" {
            return Err(xml::XmlError("root is not <transcript>".into()));
        }
        let bad = |what: &str| xml::XmlError(format!("transcript: {what}"));
        let mut exchanges = Vec::new();
        for ex in root.elements() {
            let req = ex.elements().find(|e| e.name == "request").ok_or_else(|| bad("no request"))?;
            let (headers, body) = read_message(req)?;
            let response = match ex.elements().find(|e| e.name == "response") {
                Some(r) => {
                    let (headers, body) = read_message(r)?;
                    Some(RecordedResponse {
                        status: r.get("status").and_then(|s| s.parse().ok()).ok_or_else(|| bad("status"))?,
                        headers,
                        body,
                    })
                }
                None => None,
            };
            exchanges.push(Exchange {
                seq: ex.get("seq").and_then(|s| s.parse().ok()).ok_or_else(|| bad("seq"))?,
                from: ex.get("from").unwrap_or_default().to_owned(),
                to: ex.get("to").unwrap_or_default().to_owned(),
                method: req.get("method").unwrap_or_default().to_owned(),
                target: req.get("target").unwrap_or_default().to_owned(),
                headers,
                body,
                response,
            });
        }
        Ok(Transcript { exchanges })
    }

    /// Only the exchanges whose path starts with one of `prefixes`.
    pub fn filter_paths(&self, prefixes: &[&str]) -> Vec<&Exchange> {
        self.exchanges
            .iter()
            .filter(|e| prefixes.iter().any(|p| e.path().starts_with(p)))
            .collect()
    }
}

type Message = (Vec<(String, String)>, Vec<u8>);

fn read_message(el: &Element) -> Result<Message, xml::XmlError> {
    let mut headers = Vec::new();
    let mut body = Vec::new();
    for c in el.elements() {
        match c.name.as_str() {
            "header" => headers.push((
                c.get("name").unwrap_or_default().to_owned(),
                c.get("value").unwrap_or_default().to_owned(),
            )),
            "body" if c.get("encoding") == Some("base64") => {
                body = base64::engine::general_purpose::STANDARD
                    .decode(c.text_content())
                    .map_err(|e| xml::XmlError(format!("transcript body: {e}")))?;
            }
            "body" => body = c.text_content().into_bytes(),
            _ => {}
        }
    }
    Ok((headers, body))
}
