//! The user database: one SIL `user` document per login and one
//! `workspace` document per saved workspace.

use std::collections::BTreeMap;
use std::sync::Arc;

use serde::Deserialize;

use crate::auth::{SecretHash, SecureRng};
use crate::sil::{self, Payload, SilDocument, Uid, UserInfo, Workspace};
use crate::store::DocStore;
use crate::wire::{ApiError, ErrorCode};
use crate::xml::is_ncname;

/// Group → authorization level, read from the server's TOML config:
///
/// ```toml
/// [levels]
/// guest = 0
/// lingua = 3
/// ```
#[derive(Debug, Clone, Default, PartialEq, Eq, Deserialize)]
pub struct LevelMap {
    #[serde(default)]
    pub levels: BTreeMap<String, u32>,
}

impl LevelMap {
    pub fn from_toml(text: &str) -> Result<Self, toml::de::Error> {
        toml::from_str(text)
    }

    pub fn with(mut self, group: &str, level: u32) -> Self {
        self.levels.insert(group.to_owned(), level);
        self
    }

    /// Highest level among `groups`; 0 when none is mapped.
    pub fn level_of<'a>(&self, groups: impl IntoIterator<Item = &'a String>) -> u32 {
        groups.into_iter().filter_map(|g| self.levels.get(g)).copied().max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UserRecord {
    /// `passwd` holds the salted hash, never the password.
    pub uid: Uid,
    pub info: UserInfo,
}

impl UserRecord {
    pub fn is_disabled(&self) -> bool {
        self.info.fields.get("status").is_some_and(|s| s == "disabled")
    }

    pub fn password_hash(&self) -> Option<SecretHash> {
        self.uid.passwd.as_deref().and_then(|p| p.parse().ok())
    }
}

fn io_err(e: std::io::Error) -> ApiError {
    ApiError::new(ErrorCode::Internal, format!("user database: {e}"))
}

fn corrupt(key: &str, e: sil::CodecError) -> ApiError {
    ApiError::new(ErrorCode::Internal, format!("user database: {key}: {e}"))
}

pub fn check_name(kind: &str, name: &str) -> Result<(), ApiError> {
    if is_ncname(name) {
        Ok(())
    } else {
        Err(ApiError::new(ErrorCode::BadRequest, format!("`{name}` is not a valid {kind} name")))
    }
}

#[derive(Clone)]
pub struct UserDb {
    sid: String,
    store: Arc<dyn DocStore>,
}

impl UserDb {
    pub fn new(sid: &str, store: Arc<dyn DocStore>) -> Self {
        UserDb {
            sid: sid.to_owned(),
            store,
        }
    }

    fn user_key(login: &str) -> String {
        format!("users/{login}.xml")
    }

    fn workspace_key(login: &str, name: &str) -> String {
        format!("workspaces/{login}/{name}.xml")
    }

    pub fn add_user(
        &self,
        rng: &SecureRng,
        login: &str,
        password: &str,
        groups: &[&str],
        info: UserInfo,
    ) -> Result<UserRecord, ApiError> {
        check_name("login", login)?;
        let uid = Uid::user(login)
            .with_passwd(SecretHash::new(rng, password).to_string())
            .with_groups(groups.first().copied(), groups.iter().copied());
        let rec = UserRecord { uid, info };
        self.put_user(&rec)?;
        Ok(rec)
    }

    pub fn put_user(&self, rec: &UserRecord) -> Result<(), ApiError> {
        let doc = SilDocument::new(&self.sid, rec.uid.clone(), Payload::Ui(rec.info.clone()));
        let bytes = sil::serialize_document(&doc)?;
        self.store.put(&Self::user_key(&rec.uid.login), &bytes).map_err(io_err)
    }

    pub fn user(&self, login: &str) -> Result<Option<UserRecord>, ApiError> {
        if !is_ncname(login) {
            return Ok(None);
        }
        let key = Self::user_key(login);
        let Some(bytes) = self.store.get(&key).map_err(io_err)? else { return Ok(None) };
        let doc = sil::parse_document(&bytes).map_err(|e| corrupt(&key, e))?;
        let info = doc
            .payloads
            .iter()
            .find_map(|p| match p {
                Payload::Ui(ui) => Some(ui.clone()),
                _ => None,
            })
            .unwrap_or_default();
        Ok(Some(UserRecord { uid: doc.uid, info }))
    }

    pub fn workspace(&self, login: &str, name: &str) -> Result<Option<Workspace>, ApiError> {
        check_name("workspace", name)?;
        let key = Self::workspace_key(login, name);
        let Some(bytes) = self.store.get(&key).map_err(io_err)? else { return Ok(None) };
        let doc = sil::parse_document(&bytes).map_err(|e| corrupt(&key, e))?;
        Ok(doc.payloads.into_iter().find_map(|p| match p {
            Payload::Ws(ws) => Some(ws),
            _ => None,
        }))
    }

    pub fn workspace_names(&self, login: &str) -> Result<Vec<String>, ApiError> {
        let prefix = format!("workspaces/{login}/");
        Ok(self
            .store
            .list(&prefix)
            .map_err(io_err)?
            .into_iter()
            .filter_map(|k| k.strip_prefix(&prefix)?.strip_suffix(".xml").map(str::to_owned))
            .collect())
    }

    /// Serialize first so that nothing is written unless every document
    /// is valid.
    pub fn put_workspaces(&self, login: &str, workspaces: &[Workspace]) -> Result<(), ApiError> {
        let mut encoded = Vec::with_capacity(workspaces.len());
        for ws in workspaces {
            check_name("workspace", &ws.name)?;
            let doc = SilDocument::new(&self.sid, Uid::user(login), Payload::Ws(ws.clone()));
            encoded.push((Self::workspace_key(login, &ws.name), sil::serialize_document(&doc)?));
        }
        for (key, bytes) in encoded {
            self.store.put(&key, &bytes).map_err(io_err)?;
        }
        Ok(())
    }
}
