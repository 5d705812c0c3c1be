//! `multipart/mixed` framing for carrying an XML document and binary
//! resource content on one response.
//!
//! Bodies travel as raw octets (no transfer encoding). Only `Content-Type`
//! and `Content-ID` part headers are interpreted.

use std::io::{BufRead, BufReader, Read};

use rand::distributions::Alphanumeric;
use rand::Rng;

pub const BOUNDARY_LEN: usize = 24;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Part {
    pub content_type: String,
    pub content_id: Option<String>,
    pub body: Vec<u8>,
}

impl Part {
    pub fn new(content_type: impl Into<String>, body: impl Into<Vec<u8>>) -> Self {
        Part {
            content_type: content_type.into(),
            content_id: None,
            body: body.into(),
        }
    }

    pub fn with_id(mut self, id: impl Into<String>) -> Self {
        self.content_id = Some(id.into());
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MultipartStream {
    pub boundary: String,
    pub parts: Vec<Part>,
}

impl MultipartStream {
    /// Value for the enclosing `Content-Type` header.
    pub fn content_type(&self) -> String {
        format!("multipart/mixed; boundary={}", self.boundary)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        for p in &self.parts {
            out.extend_from_slice(b"--");
            out.extend_from_slice(self.boundary.as_bytes());
            out.extend_from_slice(b"\r\nContent-Type: ");
            out.extend_from_slice(p.content_type.as_bytes());
            out.extend_from_slice(b"\r\n");
            if let Some(id) = &p.content_id {
                out.extend_from_slice(b"Content-ID: <");
                out.extend_from_slice(id.as_bytes());
                out.extend_from_slice(b">\r\n");
            }
            out.extend_from_slice(b"\r\n");
            out.extend_from_slice(&p.body);
            out.extend_from_slice(b"\r\n");
        }
        out.extend_from_slice(b"--");
        out.extend_from_slice(self.boundary.as_bytes());
        out.extend_from_slice(b"--\r\n");
        out
    }
}

#[derive(Debug, thiserror::Error)]
pub enum MimeError {
    #[error("a multipart stream needs at least one part")]
    EmptyParts,
    #[error("invalid media type `{0}`")]
    InvalidContentType(String),
    #[error("malformed multipart stream: {0}")]
    MalformedMultipart(String),
    #[error("multipart stream ended early: {0}")]
    TruncatedStream(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// `type "/" subtype`, each a non-empty RFC 2045 token, optional params.
pub fn is_media_type(s: &str) -> bool {
    let essence = s.split(';').next().unwrap_or("").trim();
    let token = |t: &str| {
        !t.is_empty()
            && t.bytes()
                .all(|b| b.is_ascii_graphic() && !b"()<>@,;:\\\"/[]?=".contains(&b))
    };
    match essence.split_once('/') {
        Some((ty, sub)) => token(ty) && token(sub),
        None => false,
    }
}

/// Frame `parts` with a fresh random boundary from the thread RNG.
pub fn encode_multipart(parts: Vec<Part>) -> Result<MultipartStream, MimeError> {
    encode_multipart_with(&mut rand::thread_rng(), parts)
}

/// Frame `parts`, drawing the boundary from `rng` until it occurs in no body.
pub fn encode_multipart_with(rng: &mut impl Rng, parts: Vec<Part>) -> Result<MultipartStream, MimeError> {
    if parts.is_empty() {
        return Err(MimeError::EmptyParts);
    }
    for p in &parts {
        if !is_media_type(&p.content_type) || p.content_type.contains(['\r', '\n']) {
            return Err(MimeError::InvalidContentType(p.content_type.clone()));
        }
    }
    let boundary = loop {
        let candidate: String = rng.sample_iter(&Alphanumeric).take(BOUNDARY_LEN).map(char::from).collect();
        let needle = candidate.as_bytes();
        if !parts.iter().any(|p| contains(&p.body, needle)) {
            break candidate;
        }
    };
    Ok(MultipartStream { boundary, parts })
}

/// Extract `boundary=` from a `multipart/*` content type.
pub fn boundary_from_content_type(ct: &str) -> Option<String> {
    let mut params = ct.split(';');
    let essence = params.next()?.trim().to_ascii_lowercase();
    if !essence.starts_with("multipart/") {
        return None;
    }
    params.find_map(|p| {
        let (k, v) = p.split_once('=')?;
        if !k.trim().eq_ignore_ascii_case("boundary") {
            return None;
        }
        let v = v.trim().trim_matches('"');
        (!v.is_empty()).then(|| v.to_owned())
    })
}

/// Decode a whole body given the enclosing content type.
pub fn decode_multipart(content_type: &str, body: &[u8]) -> Result<Vec<Part>, MimeError> {
    let boundary = boundary_from_content_type(content_type)
        .ok_or_else(|| MimeError::MalformedMultipart(format!("no boundary in `{content_type}`")))?;
    MultipartReader::new(body, &boundary).collect()
}

/// Decode a body that starts with its own delimiter line (`--boundary`).
pub fn decode_multipart_stream(body: &[u8]) -> Result<Vec<Part>, MimeError> {
    let line_end = body
        .windows(2)
        .position(|w| w == b"\r\n")
        .ok_or_else(|| MimeError::TruncatedStream("no delimiter line".into()))?;
    let first = &body[..line_end];
    let boundary = first
        .strip_prefix(b"--")
        .and_then(|b| std::str::from_utf8(b).ok())
        .filter(|b| !b.is_empty())
        .ok_or_else(|| MimeError::MalformedMultipart("stream does not open with a delimiter".into()))?;
    MultipartReader::new(body, boundary).collect()
}

fn contains(hay: &[u8], needle: &[u8]) -> bool {
    find(hay, needle, 0).is_some()
}

fn find(hay: &[u8], needle: &[u8], from: usize) -> Option<usize> {
    if needle.is_empty() || hay.len() < needle.len() || from > hay.len() - needle.len() {
        return None;
    }
    hay[from..]
        .windows(needle.len())
        .position(|w| w == needle)
        .map(|p| p + from)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum State {
    Preamble,
    Headers,
    Body,
    Done,
}

/// Pull parser that holds at most one part (plus one read chunk) in memory.
pub struct MultipartReader<R> {
    inner: BufReader<R>,
    /// `\r\n--boundary`
    delimiter: Vec<u8>,
    buf: Vec<u8>,
    eof: bool,
    state: State,
    pending_type: Option<String>,
    pending_id: Option<String>,
    peak_buffered: usize,
}

impl<R: Read> MultipartReader<R> {
    pub fn new(inner: R, boundary: &str) -> Self {
        let mut delimiter = b"\r\n--".to_vec();
        delimiter.extend_from_slice(boundary.as_bytes());
        MultipartReader {
            inner: BufReader::with_capacity(8 * 1024, inner),
            delimiter,
            // a leading CRLF lets the first delimiter match without a preamble
            buf: b"\r\n".to_vec(),
            eof: false,
            state: State::Preamble,
            pending_type: None,
            pending_id: None,
            peak_buffered: 0,
        }
    }

    /// Largest number of bytes held in the internal buffer so far.
    pub fn peak_buffered(&self) -> usize {
        self.peak_buffered
    }

    fn fill(&mut self) -> Result<bool, MimeError> {
        if self.eof {
            return Ok(false);
        }
        let chunk = self.inner.fill_buf()?;
        if chunk.is_empty() {
            self.eof = true;
            return Ok(false);
        }
        let n = chunk.len();
        self.buf.extend_from_slice(chunk);
        self.inner.consume(n);
        self.peak_buffered = self.peak_buffered.max(self.buf.len());
        Ok(true)
    }

    /// Find `needle` in the buffer, reading more as needed.
    fn find_filling(&mut self, needle: &[u8]) -> Result<Option<usize>, MimeError> {
        let mut from = 0;
        loop {
            if let Some(p) = find(&self.buf, needle, from) {
                return Ok(Some(p));
            }
            from = self.buf.len().saturating_sub(needle.len() - 1);
            if !self.fill()? {
                return Ok(None);
            }
        }
    }

    fn ensure(&mut self, n: usize) -> Result<bool, MimeError> {
        while self.buf.len() < n {
            if !self.fill()? {
                return Ok(false);
            }
        }
        Ok(true)
    }

    /// After a delimiter: `--` closes, CRLF opens the next part.
    fn after_delimiter(&mut self) -> Result<State, MimeError> {
        let _ = self.ensure(2)?;
        if self.buf.starts_with(b"--") {
            self.buf.drain(..2);
            self.check_epilogue()?;
            return Ok(State::Done);
        }
        // transport padding
        let pad = self.buf.iter().take_while(|b| matches!(b, b' ' | b'\t')).count();
        self.buf.drain(..pad);
        let _ = self.ensure(2)?;
        if self.buf.starts_with(b"\r\n") {
            self.buf.drain(..2);
            return Ok(State::Headers);
        }
        if self.buf.is_empty() && self.eof {
            return Err(MimeError::MalformedMultipart("missing terminal boundary".into()));
        }
        Err(MimeError::MalformedMultipart("garbage after boundary delimiter".into()))
    }

    fn check_epilogue(&mut self) -> Result<(), MimeError> {
        while self.fill()? {}
        let boundary = &self.delimiter[4..];
        let mut close = b"--".to_vec();
        close.extend_from_slice(boundary);
        if contains(&self.buf, &close) {
            return Err(MimeError::MalformedMultipart("duplicated terminal boundary".into()));
        }
        self.buf.clear();
        Ok(())
    }

    /// The next part, or `None` after the terminal boundary.
    pub fn next_part(&mut self) -> Result<Option<Part>, MimeError> {
        loop {
            match self.state {
                State::Done => return Ok(None),
                State::Preamble => {
                    let delim = self.delimiter.clone();
                    match self.find_filling(&delim)? {
                        Some(p) => {
                            self.buf.drain(..p + delim.len());
                            self.state = self.after_delimiter()?;
                        }
                        None => {
                            return Err(MimeError::MalformedMultipart("no opening boundary".into()));
                        }
                    }
                }
                State::Headers => {
                    let _ = self.ensure(2)?;
                    let end = if self.buf.starts_with(b"\r\n") {
                        Some((0, 2))
                    } else {
                        self.find_filling(b"\r\n\r\n")?.map(|p| (p, 4))
                    };
                    let Some(end) = end else {
                        return Err(MimeError::TruncatedStream("inside part headers".into()));
                    };
                    let raw = self.buf.drain(..end.0 + end.1).collect::<Vec<u8>>();
                    self.parse_headers(&raw[..end.0])?;
                    self.state = State::Body;
                }
                State::Body => {
                    let delim = self.delimiter.clone();
                    match self.find_filling(&delim)? {
                        Some(p) => {
                            let body: Vec<u8> = self.buf.drain(..p).collect();
                            self.buf.drain(..delim.len());
                            self.state = self.after_delimiter()?;
                            let content_type = self.pending_type.take().ok_or_else(|| {
                                MimeError::MalformedMultipart("part without Content-Type".into())
                            })?;
                            return Ok(Some(Part {
                                content_type,
                                content_id: self.pending_id.take(),
                                body,
                            }));
                        }
                        None => return Err(MimeError::TruncatedStream("inside part body".into())),
                    }
                }
            }
        }
    }

    fn parse_headers(&mut self, raw: &[u8]) -> Result<(), MimeError> {
        let text = std::str::from_utf8(raw)
            .map_err(|_| MimeError::MalformedMultipart("part headers are not UTF-8".into()))?;
        for line in text.split("\r\n").filter(|l| !l.is_empty()) {
            let (name, value) = line
                .split_once(':')
                .ok_or_else(|| MimeError::MalformedMultipart(format!("bad header line `{line}`")))?;
            let value = value.trim();
            if name.trim().eq_ignore_ascii_case("content-type") {
                if !is_media_type(value) {
                    return Err(MimeError::MalformedMultipart(format!("bad content type `{value}`")));
                }
                self.pending_type = Some(value.to_owned());
            } else if name.trim().eq_ignore_ascii_case("content-id") {
                self.pending_id = Some(value.trim_start_matches('<').trim_end_matches('>').to_owned());
            }
        }
        Ok(())
    }
}

impl<R: Read> Iterator for MultipartReader<R> {
    type Item = Result<Part, MimeError>;

    fn next(&mut self) -> Option<Self::Item> {
        match self.next_part() {
            Ok(Some(p)) => Some(Ok(p)),
            Ok(None) => None,
            Err(e) => {
                self.state = State::Done;
                Some(Err(e))
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    fn rng() -> rand_chacha::ChaCha8Rng {
        rand_chacha::ChaCha8Rng::seed_from_u64(7)
    }

    fn roundtrip(parts: Vec<Part>) -> Vec<Part> {
        let s = encode_multipart_with(&mut rng(), parts).unwrap();
        decode_multipart(&s.content_type(), &s.to_bytes()).unwrap()
    }

    #[test]
    fn xml_and_binary_parts_roundtrip_in_order() {
        let parts = vec![
            Part::new("text/xml", br#"<sil type="resultset" sid="A" version="0.5"/>"#.to_vec()),
            Part::new("application/octet-stream", vec![0x00, 0xFF]).with_id("r1"),
        ];
        assert_eq!(roundtrip(parts.clone()), parts);
    }

    #[test]
    fn single_part_has_one_section() {
        let s = encode_multipart_with(&mut rng(), vec![Part::new("text/plain", b"hi".to_vec())]).unwrap();
        let bytes = s.to_bytes();
        let opener = format!("--{}\r\n", s.boundary);
        let count = bytes.windows(opener.len()).filter(|w| *w == opener.as_bytes()).count();
        assert_eq!(count, 1);
        assert!(bytes.ends_with(format!("--{}--\r\n", s.boundary).as_bytes()));
    }

    #[test]
    fn empty_list_is_rejected() {
        assert!(matches!(encode_multipart(vec![]), Err(MimeError::EmptyParts)));
    }

    #[test]
    fn invalid_content_type_is_rejected() {
        assert!(matches!(
            encode_multipart(vec![Part::new("xml", b"".to_vec())]),
            Err(MimeError::InvalidContentType(_))
        ));
    }

    #[test]
    fn missing_final_boundary_is_malformed() {
        let s = encode_multipart_with(&mut rng(), vec![Part::new("text/plain", b"x".to_vec())]).unwrap();
        let mut bytes = s.to_bytes();
        bytes.truncate(bytes.len() - 4); // drop "--\r\n"
        assert!(matches!(
            decode_multipart(&s.content_type(), &bytes),
            Err(MimeError::MalformedMultipart(_))
        ));
    }

    #[test]
    fn duplicated_terminal_boundary_is_malformed() {
        let s = encode_multipart_with(&mut rng(), vec![Part::new("text/plain", b"x".to_vec())]).unwrap();
        let mut bytes = s.to_bytes();
        bytes.extend_from_slice(format!("--{}--\r\n", s.boundary).as_bytes());
        assert!(matches!(
            decode_multipart(&s.content_type(), &bytes),
            Err(MimeError::MalformedMultipart(_))
        ));
    }

    #[test]
    fn truncated_body_is_reported() {
        let s = encode_multipart_with(&mut rng(), vec![Part::new("text/plain", b"hello world".to_vec())]).unwrap();
        let bytes = s.to_bytes();
        let cut = &bytes[..bytes.len() - 40];
        assert!(matches!(
            decode_multipart(&s.content_type(), cut),
            Err(MimeError::TruncatedStream(_))
        ));
    }

    #[test]
    fn crlf_heavy_binary_survives_byte_exactly() {
        let body = b"\r\n\r\n--\r\n--x\r\n\r\n".repeat(50);
        let parts = vec![Part::new("application/octet-stream", body)];
        assert_eq!(roundtrip(parts.clone()), parts);
    }

    #[test]
    fn boundary_is_redrawn_on_collision() {
        // replay the generator to learn the first candidate, then plant it
        let first: String = rng().sample_iter(&Alphanumeric).take(BOUNDARY_LEN).map(char::from).collect();
        let body = format!("prefix {first} suffix").into_bytes();
        let s = encode_multipart_with(&mut rng(), vec![Part::new("text/plain", body.clone())]).unwrap();
        assert_ne!(s.boundary, first);
        assert_eq!(decode_multipart(&s.content_type(), &s.to_bytes()).unwrap()[0].body, body);
    }

    #[test]
    fn self_delimited_stream_decodes() {
        let s = encode_multipart_with(&mut rng(), vec![Part::new("text/plain", b"a".to_vec())]).unwrap();
        assert_eq!(decode_multipart_stream(&s.to_bytes()).unwrap()[0].body, b"a");
    }

    #[test]
    fn reader_buffers_about_one_part() {
        let big = vec![b'z'; 64 * 1024];
        let parts: Vec<Part> = (0..8).map(|_| Part::new("application/octet-stream", big.clone())).collect();
        let s = encode_multipart_with(&mut rng(), parts).unwrap();
        let bytes = s.to_bytes();
        let mut reader = MultipartReader::new(bytes.as_slice(), &s.boundary);
        let mut n = 0;
        while let Some(p) = reader.next_part().unwrap() {
            assert_eq!(p.body.len(), big.len());
            n += 1;
        }
        assert_eq!(n, 8);
        assert!(reader.peak_buffered() < big.len() + 2 * 8 * 1024, "{}", reader.peak_buffered());
    }

    #[test]
    fn media_types() {
        assert!(is_media_type("text/xml"));
        assert!(is_media_type("multipart/mixed; boundary=abc"));
        assert!(!is_media_type("text"));
        assert!(!is_media_type("/xml"));
        assert!(!is_media_type("text/"));
        assert!(!is_media_type(""));
    }

    fn part_strategy() -> impl Strategy<Value = Part> {
        (
            prop::sample::select(vec!["text/xml", "application/octet-stream", "text/plain; charset=utf-8"]),
            prop::option::of("[a-z0-9]{1,8}"),
            prop::collection::vec(
                prop_oneof![any::<u8>(), Just(b'\r'), Just(b'\n'), Just(b'-')],
                0..300,
            ),
        )
            .prop_map(|(ct, id, body)| Part {
                content_type: ct.to_owned(),
                content_id: id,
                body,
            })
    }

    proptest! {
        #[test]
        fn decode_inverts_encode(parts in prop::collection::vec(part_strategy(), 1..6), seed in any::<u64>()) {
            let mut r = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            let s = encode_multipart_with(&mut r, parts.clone()).unwrap();
            prop_assert_eq!(decode_multipart(&s.content_type(), &s.to_bytes()).unwrap(), parts);
        }
    }
}
