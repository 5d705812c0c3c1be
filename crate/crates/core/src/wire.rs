//! Transport-neutral request/response values.
//!
//! Services implement [`Handler`]; callers reach them through a
//! [`Transport`]. The in-memory mesh and the loopback HTTP adapter both speak
//! these types, which is what makes their transcripts comparable.

use std::fmt;

use url::form_urlencoded;

use crate::sil::{self, wire_enum, CodecError, SilDocument};

pub const H_CONTENT_TYPE: &str = "Content-Type";
pub const H_SESSION: &str = "X-Session";
pub const H_SERVER_ID: &str = "X-Server-Id";
pub const H_NMU_ADMIN: &str = "X-NMU-Admin";
pub const H_IDENT_TAG: &str = "X-Ident-Tag";
pub const H_ERROR: &str = "X-Sil-Error";
pub const H_TRANSACTION: &str = "X-Transaction";
pub const H_TXN_STATE: &str = "X-Txn-State";

pub const XML: &str = "text/xml; charset=utf-8";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub method: String,
    /// Path plus optional `?query`.
    pub target: String,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Request {
    pub fn new(method: &str, target: impl Into<String>) -> Self {
        Request {
            method: method.to_ascii_uppercase(),
            target: target.into(),
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn get(target: impl Into<String>) -> Self {
        Request::new("GET", target)
    }

    pub fn post(target: impl Into<String>) -> Self {
        Request::new("POST", target)
    }

    pub fn put(target: impl Into<String>) -> Self {
        Request::new("PUT", target)
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_owned(), value.into()));
        self
    }

    pub fn body(mut self, content_type: &str, body: Vec<u8>) -> Self {
        self.headers.push((H_CONTENT_TYPE.to_owned(), content_type.to_owned()));
        self.body = body;
        self
    }

    pub fn document(self, doc: &SilDocument) -> Result<Self, ApiError> {
        Ok(self.body(XML, sil::serialize_document(doc)?))
    }

    pub fn header_value(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn path(&self) -> &str {
        self.target.split_once('?').map_or(&self.target, |(p, _)| p)
    }

    /// First value of query parameter `name`, percent-decoded.
    pub fn param(&self, name: &str) -> Option<String> {
        let (_, q) = self.target.split_once('?')?;
        form_urlencoded::parse(q.as_bytes())
            .find(|(k, _)| k == name)
            .map(|(_, v)| v.into_owned())
    }
}

/// `path?k=v&...` with values percent-encoded.
pub fn target(path: &str, params: &[(&str, &str)]) -> String {
    if params.is_empty() {
        return path.to_owned();
    }
    let q = form_urlencoded::Serializer::new(String::new())
        .extend_pairs(params.iter().copied())
        .finish();
    format!("{path}?{q}")
}

/// Percent-encode one path segment.
pub fn encode_segment(s: &str) -> String {
    form_urlencoded::byte_serialize(s.as_bytes()).collect::<String>().replace('+', "%20")
}

pub fn decode_segment(s: &str) -> String {
    // form decoding would turn '+' into a space; path segments keep it
    let protected = s.replace('+', "%2B");
    form_urlencoded::parse(format!("x={protected}").as_bytes())
        .next()
        .map(|(_, v)| v.into_owned())
        .unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Response {
    pub status: u16,
    pub headers: Vec<(String, String)>,
    pub body: Vec<u8>,
}

impl Response {
    pub fn new(status: u16) -> Self {
        Response {
            status,
            headers: Vec::new(),
            body: Vec::new(),
        }
    }

    pub fn ok() -> Self {
        Response::new(200)
    }

    pub fn header(mut self, name: &str, value: impl Into<String>) -> Self {
        self.headers.push((name.to_owned(), value.into()));
        self
    }

    pub fn body(mut self, content_type: &str, body: Vec<u8>) -> Self {
        self.headers.push((H_CONTENT_TYPE.to_owned(), content_type.to_owned()));
        self.body = body;
        self
    }

    pub fn document(doc: &SilDocument) -> Self {
        match sil::serialize_document(doc) {
            Ok(bytes) => Response::ok().body(XML, bytes),
            Err(e) => Response::error(&ApiError::new(ErrorCode::Internal, e.to_string())),
        }
    }

    pub fn error(err: &ApiError) -> Self {
        Response::new(err.code.status())
            .header(H_ERROR, err.code.as_str())
            .body("text/plain; charset=utf-8", err.detail.clone().into_bytes())
    }

    pub fn header_value(&self, name: &str) -> Option<&str> {
        find_header(&self.headers, name)
    }

    pub fn is_success(&self) -> bool {
        (200..300).contains(&self.status)
    }

    /// The error carried by a non-2xx response.
    pub fn api_error(&self) -> Option<ApiError> {
        if self.is_success() {
            return None;
        }
        let code = self
            .header_value(H_ERROR)
            .and_then(ErrorCode::from_wire)
            .unwrap_or(ErrorCode::Internal);
        Some(ApiError::new(code, String::from_utf8_lossy(&self.body).into_owned()))
    }

    /// `Ok(self)` for 2xx, else the carried error.
    pub fn into_result(self) -> Result<Response, ApiError> {
        match self.api_error() {
            Some(e) => Err(e),
            None => Ok(self),
        }
    }

    pub fn into_document(self) -> Result<SilDocument, ApiError> {
        let resp = self.into_result()?;
        Ok(sil::parse_document(&resp.body)?)
    }
}

fn find_header<'a>(headers: &'a [(String, String)], name: &str) -> Option<&'a str> {
    headers
        .iter()
        .find(|(k, _)| k.eq_ignore_ascii_case(name))
        .map(|(_, v)| v.as_str())
}

pub trait Handler: Send + Sync {
    fn handle(&self, req: Request) -> Response;
}

impl<F> Handler for F
where
    F: Fn(Request) -> Response + Send + Sync,
{
    fn handle(&self, req: Request) -> Response {
        self(req)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("{0} is unreachable")]
    Unreachable(String),
    #[error("transport failure: {0}")]
    Io(String),
}

pub trait Transport: Send + Sync {
    /// Deliver `req` to the service at `base_url` (scheme and authority only).
    fn send(&self, base_url: &str, req: Request) -> Result<Response, TransportError>;
}

wire_enum!(
    /// Error kinds shared by every service. Carried in the `X-Sil-Error`
    /// header of non-2xx responses.
    ErrorCode {
        AdminAuthFailed => "AdminAuthFailed",
        DuplicateName => "DuplicateName",
        InvalidUrl => "InvalidUrl",
        UnknownServer => "UnknownServer",
        InvalidChange => "InvalidChange",
        UnknownRequester => "UnknownRequester",
        AuthFailed => "AuthFailed",
        AccountDisabled => "AccountDisabled",
        SessionExpired => "SessionExpired",
        UnknownTransaction => "UnknownTransaction",
        TransactionClosed => "TransactionClosed",
        NoOpenTransaction => "NoOpenTransaction",
        UnknownHandle => "UnknownHandle",
        EnumerationCancelled => "EnumerationCancelled",
        DriverError => "DriverError",
        UnknownWorkspace => "UnknownWorkspace",
        UnknownTarget => "UnknownTarget",
        AllTargetsFailed => "AllTargetsFailed",
        RemoteFailed => "RemoteFailed",
        ResourceGone => "ResourceGone",
        Forbidden => "Forbidden",
        BasketUnknown => "BasketUnknown",
        ServerUnreachable => "ServerUnreachable",
        BadRequest => "BadRequest",
        NotFound => "NotFound",
        MethodNotAllowed => "MethodNotAllowed",
        Internal => "Internal",
    }
);

impl ErrorCode {
    pub fn status(self) -> u16 {
        use ErrorCode::*;
        match self {
            AdminAuthFailed | AuthFailed | SessionExpired => 401,
            AccountDisabled | Forbidden | UnknownRequester => 403,
            UnknownServer | UnknownTransaction | UnknownHandle | UnknownWorkspace | UnknownTarget
            | BasketUnknown | NotFound => 404,
            MethodNotAllowed => 405,
            DuplicateName | TransactionClosed | NoOpenTransaction | EnumerationCancelled => 409,
            ResourceGone => 410,
            InvalidUrl | InvalidChange | BadRequest => 400,
            AllTargetsFailed | RemoteFailed => 502,
            ServerUnreachable => 503,
            DriverError | Internal => 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ApiError {
    pub code: ErrorCode,
    pub detail: String,
}

impl ApiError {
    pub fn new(code: ErrorCode, detail: impl Into<String>) -> Self {
        ApiError {
            code,
            detail: detail.into(),
        }
    }
}

impl fmt::Display for ApiError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.detail.is_empty() {
            write!(f, "{}", self.code)
        } else {
            write!(f, "{}: {}", self.code, self.detail)
        }
    }
}

impl std::error::Error for ApiError {}

impl From<ErrorCode> for ApiError {
    fn from(code: ErrorCode) -> Self {
        ApiError::new(code, "")
    }
}

impl From<CodecError> for ApiError {
    fn from(e: CodecError) -> Self {
        ApiError::new(ErrorCode::BadRequest, e.to_string())
    }
}

impl From<TransportError> for ApiError {
    fn from(e: TransportError) -> Self {
        ApiError::new(ErrorCode::ServerUnreachable, e.to_string())
    }
}

impl From<crate::mime::MimeError> for ApiError {
    fn from(e: crate::mime::MimeError) -> Self {
        ApiError::new(ErrorCode::BadRequest, e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_are_percent_decoded() {
        let t = target("/resource", &[("uri", "srvA/r 1"), ("max", "5")]);
        let req = Request::get(t);
        assert_eq!(req.path(), "/resource");
        assert_eq!(req.param("uri").as_deref(), Some("srvA/r 1"));
        assert_eq!(req.param("max").as_deref(), Some("5"));
        assert_eq!(req.param("nope"), None);
    }

    #[test]
    fn segments_roundtrip() {
        for s in ["srvA/r1", "a b+c", "é/ü?&=", "t1:3"] {
            assert_eq!(decode_segment(&encode_segment(s)), s);
        }
    }

    #[test]
    fn errors_roundtrip_through_responses() {
        for &code in ErrorCode::ALL {
            let resp = Response::error(&ApiError::new(code, "why"));
            assert!(!resp.is_success());
            assert_eq!(resp.api_error(), Some(ApiError::new(code, "why")));
        }
    }

    #[test]
    fn header_lookup_ignores_case() {
        let r = Request::get("/").header("x-session", "abc");
        assert_eq!(r.header_value(H_SESSION), Some("abc"));
    }
}
