//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit on
//! any failure. Every oracle here is written against the fixtures
//! directly and shares no evaluation code with the library.

use std::collections::{BTreeMap, BTreeSet};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use silmesh::auth::{SecureRng, Token};
use silmesh::clock::{Clock, SimClock};
use silmesh::harness::{run_scenario, run_scenario_on, Exchange, Mesh, Scenario, TransportKind, TOUR, MESH_ADMIN};
use silmesh::nmu::{RetryPolicy, ServerChanges};
use silmesh::server::{CatalogEntry, LevelMap, MemoryDriver, Server, ServerConfig};
use silmesh::sil::corpus::{random_document, Mutation};
use silmesh::sil::{
    document_to_element, parse_document, serialize_document, Clause, CodecError, DeliveryOutcome, Field, Op, Query,
    ResultEntry, ServerState, UserInfo,
};
use silmesh::store::MemStore;
use silmesh::wire::{ApiError, ErrorCode, H_IDENT_TAG};

type Check = Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

const SIDS: [&str; 3] = ["srvA", "srvB", "srvC"];
const LANGS: [&str; 3] = ["fr", "de", "en"];
const CATS: [&str; 3] = ["prose", "poetry", "drama"];
const WORDS: [&str; 8] = ["Rose", "nuit", "Faust", "mer", "Lied", "soleil", "Winter", "ombre"];

// ---------------------------------------------------------------- oracles

fn oracle_clause(e: &CatalogEntry, c: &Clause) -> bool {
    match (c.field, c.op) {
        (Field::Language, Op::Eq) => e.language.eq_ignore_ascii_case(&c.value),
        (Field::Category, Op::Eq) => e.category == c.value,
        (Field::Title, Op::Contains) => e.title.to_lowercase().contains(&c.value.to_lowercase()),
        other => panic!("fixture queries never use {other:?}"),
    }
}

fn visible(e: &CatalogEntry, q: &Query, level: u32) -> bool {
    e.required_level <= level && q.clauses.iter().all(|c| oracle_clause(e, c))
}

fn as_result(sid: &str, e: &CatalogEntry) -> ResultEntry {
    ResultEntry {
        uri: e.uri.clone(),
        sid: e.uri.split('/').next().unwrap_or(sid).to_owned(),
        title: e.title.clone(),
        language: e.language.clone(),
        category: e.category.clone(),
        required_level: e.required_level,
    }
}

/// Each target scanned in sid order, its matches in uri order, first copy
/// of a uri kept.
fn union_oracle(mesh: &Mesh, targets: &[&str], q: &Query, level: u32) -> Vec<ResultEntry> {
    let mut sids: Vec<&str> = targets.to_vec();
    sids.sort_unstable();
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for sid in sids {
        let mut entries = mesh.driver(sid).entries();
        entries.sort_by(|a, b| a.uri.cmp(&b.uri));
        for e in entries.iter().filter(|e| visible(e, q, level)) {
            if seen.insert(e.uri.clone()) {
                out.push(as_result(sid, e));
            }
        }
    }
    out
}

// --------------------------------------------------------------- fixtures

fn random_query(rng: &mut impl Rng, id: &str) -> Query {
    let mut clauses = Vec::new();
    if rng.gen_bool(0.6) {
        clauses.push(Clause::eq(Field::Language, *LANGS.choose(rng).unwrap()));
    }
    if rng.gen_bool(0.4) {
        clauses.push(Clause::eq(Field::Category, *CATS.choose(rng).unwrap()));
    }
    if rng.gen_bool(0.3) || clauses.is_empty() {
        let w = WORDS.choose(rng).unwrap();
        let cut = rng.gen_range(1..=w.len());
        clauses.push(Clause::new(Field::Title, Op::Contains, w[..cut].to_lowercase()));
    }
    Query::new(id, clauses)
}

fn random_title(rng: &mut impl Rng) -> String {
    let n = rng.gen_range(1..=3);
    (0..n).map(|_| *WORDS.choose(rng).unwrap()).collect::<Vec<_>>().join(" ")
}

/// Three servers with random catalogs and double-cache knobs. With
/// `dups`, some servers also carry copies of other servers' uris.
fn random_mesh(rng: &mut ChaCha8Rng, seed: u64, dups: bool) -> Mesh {
    let mut mesh = Mesh::new(seed);
    for sid in SIDS {
        let cache = rng.gen_range(1..=24);
        let page = rng.gen_range(1..=12);
        mesh.add_server(sid, |c| {
            c.cache_capacity = cache;
            c.page_size = page;
        });
    }
    for sid in SIDS {
        for i in 0..rng.gen_range(0..=30) {
            let title = random_title(rng);
            mesh.add_resource(
                sid,
                &format!("r{i:02}"),
                &title,
                LANGS.choose(rng).unwrap(),
                CATS.choose(rng).unwrap(),
                rng.gen_range(0..10),
            );
        }
    }
    if dups {
        for _ in 0..rng.gen_range(0..6) {
            let from = *SIDS.choose(rng).unwrap();
            let into = *SIDS.choose(rng).unwrap();
            let pick = mesh.driver(from).entries().choose(rng).cloned();
            if let (Some(e), true) = (pick, from != into) {
                mesh.driver(into).insert(e.clone(), e.title.as_bytes().to_vec());
            }
        }
    }
    mesh
}

fn drain_all(mesh: &Mesh, login: &str, q: &Query, page: u32) -> Result<Vec<ResultEntry>, ApiError> {
    let mut c = mesh.connect("srvA", login)?;
    c.choose_servers(&SIDS)?;
    c.set_page_size(page);
    c.query_all(q)
}

// ------------------------------------------------------------- criteria

fn c1_codec() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0001);
    let mut failures = Vec::new();
    let mut mutants = 0usize;
    let mut by_kind: BTreeMap<String, usize> = BTreeMap::new();
    for i in 0..500 {
        let doc = random_document(&mut rng);
        let bytes = serialize_document(&doc).map_err(|e| format!("#{i}: serialize: {e}"))?;
        match parse_document(&bytes) {
            Ok(back) if back == doc => {
                if serialize_document(&back).ok().as_deref() != Some(&bytes[..]) {
                    failures.push(format!("#{i}: reserialized bytes differ"));
                }
            }
            Ok(_) => failures.push(format!("#{i}: parse(serialize(d)) != d")),
            Err(e) => failures.push(format!("#{i}: {e}")),
        }
        let tree = document_to_element(&doc);
        for &m in Mutation::ALL {
            let mut mutant = tree.clone();
            m.apply(&mut mutant);
            if mutant == tree {
                continue;
            }
            mutants += 1;
            *by_kind.entry(format!("{m:?}")).or_default() += 1;
            let res = parse_document(&mutant.to_canonical());
            let ok = match (m, &res) {
                (_, Ok(_)) => false,
                (Mutation::WrongVersion, Err(e)) => matches!(e, CodecError::VersionMismatch { .. }),
                (Mutation::DropSid, Err(e)) => matches!(e, CodecError::MissingSid),
                (_, Err(e)) => matches!(e, CodecError::SchemaViolation { .. }),
            };
            if !ok {
                failures.push(format!("#{i}: {m:?} -> {res:?}"));
            }
        }
    }
    for required in ["WrongVersion", "DropSid", "BreakGroupRef", "UnknownPayload"] {
        if by_kind.get(required).copied().unwrap_or(0) == 0 {
            failures.push(format!("no applicable {required} mutant in the corpus"));
        }
    }
    if failures.is_empty() {
        Ok(format!("500/500 round-trips, {mutants}/{mutants} mutants rejected"))
    } else {
        Err(format!("{} failures, first: {}", failures.len(), failures[0]))
    }
}

fn c2_broadcast() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0002);
    let mut total = 0;
    for trial in 0..100u64 {
        let mesh = random_mesh(&mut rng, trial, true);
        let level = rng.gen_range(0..10);
        mesh.add_user("srvA", "u", level);
        let q = random_query(&mut rng, "q");
        let page = rng.gen_range(1..=15);
        let got = drain_all(&mesh, "u", &q, page).map_err(|e| format!("trial {trial}: {e}"))?;
        let want = union_oracle(&mesh, &SIDS, &q, level);
        if got != want {
            return Err(format!(
                "trial {trial}: drained {} entries, oracle {}; first difference at {:?}",
                got.len(),
                want.len(),
                got.iter().zip(&want).position(|(a, b)| a != b)
            ));
        }
        total += got.len();
    }
    Ok(format!("100/100 fixtures match the union oracle ({total} entries)"))
}

fn c3_double_cache() -> Check {
    let mut mesh = Mesh::new(3);
    mesh.add_server("srvA", |c| {
        c.cache_capacity = 4;
        c.page_size = 2;
    });
    mesh.add_server("srvB", |_| {});
    mesh.add_server("srvC", |_| {});
    for sid in ["srvB", "srvC"] {
        for i in 0..10 {
            mesh.add_resource(sid, &format!("r{i}"), &format!("Rose {i}"), "fr", "prose", 0);
        }
    }
    mesh.add_user("srvA", "u", 0);
    let mut c = mesh.connect("srvA", "u").map_err(|e| e.to_string())?;
    c.choose_servers(&["srvB", "srvC"]).map_err(|e| e.to_string())?;
    let q = Query::new("q", vec![Clause::eq(Field::Language, "fr")]);
    let mut seen = 0;
    let mut widest = 0;
    let handle;
    {
        let mut pages = c.query(&q).map_err(|e| e.to_string())?;
        handle = pages.handle().to_owned();
        for p in pages.by_ref() {
            let p = p.map_err(|e| e.to_string())?;
            widest = widest.max(p.entries.len());
            seen += p.entries.len();
        }
    }
    let stats = mesh.server("srvA").broadcast_stats(&c.token(), &handle).map_err(|e| e.to_string())?;
    let mut bad = Vec::new();
    if seen != 20 {
        bad.push(format!("drained {seen} of 20"));
    }
    if stats.peak_occupancy > 4 {
        bad.push(format!("cache peaked at {}", stats.peak_occupancy));
    }
    if widest > 2 || stats.max_page > 2 || c.peak_held() > 2 {
        bad.push(format!("page reached {widest} (server {}, client {})", stats.max_page, c.peak_held()));
    }
    if bad.is_empty() {
        Ok(format!(
            "cache peak {}/4, page peak {}/2, {} pulls for 20 entries",
            stats.peak_occupancy, widest, stats.pulls
        ))
    } else {
        Err(bad.join("; "))
    }
}

// ---- criterion 4: transaction state machine

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TxOp {
    Open,
    IsOpen,
    Close,
    Commit,
    Abort,
    Query,
    Fetch,
}

const TX_OPS: [TxOp; 7] = [TxOp::Open, TxOp::IsOpen, TxOp::Close, TxOp::Commit, TxOp::Abort, TxOp::Query, TxOp::Fetch];

/// What a call is expected to yield.
#[derive(Debug, Clone, PartialEq, Eq)]
enum Out {
    Unit,
    Flag(bool),
    /// Opened: same id as the open one or a fresh one.
    Txn { fresh: bool },
    Handle,
    Page { cursor: u64, n: usize, done: bool },
    Err(ErrorCode),
}

/// The lifecycle table: one open transaction per session, `open` returns
/// it while it is open, `close` is idempotent, commit and abort need it
/// open and leave it open, abort cancels held enumerations, opening again
/// forgets the previous transaction and its handles.
#[derive(Default)]
struct TxModel {
    current: Option<bool>,
    /// (cursor, cancelled) of the last handle, and whether it belongs to
    /// the current transaction.
    last: Option<(u64, bool, bool)>,
}

const SNAPSHOT_LEN: u64 = 3;

impl TxModel {
    fn step(&mut self, op: TxOp) -> Out {
        let open = self.current == Some(true);
        match op {
            TxOp::Open => {
                if open {
                    return Out::Txn { fresh: false };
                }
                self.current = Some(true);
                if let Some(h) = &mut self.last {
                    h.2 = false;
                }
                Out::Txn { fresh: true }
            }
            TxOp::IsOpen => match self.current {
                None => Out::Err(ErrorCode::UnknownTransaction),
                Some(o) => Out::Flag(o),
            },
            TxOp::Close => match self.current {
                None => Out::Err(ErrorCode::UnknownTransaction),
                Some(_) => {
                    self.current = Some(false);
                    Out::Unit
                }
            },
            TxOp::Commit | TxOp::Abort => match self.current {
                None => Out::Err(ErrorCode::UnknownTransaction),
                Some(false) => Out::Err(ErrorCode::TransactionClosed),
                Some(true) => {
                    if op == TxOp::Abort {
                        if let Some(h) = self.last.as_mut().filter(|h| h.2) {
                            h.1 = true;
                        }
                    }
                    Out::Unit
                }
            },
            TxOp::Query => {
                if !open {
                    return Out::Err(ErrorCode::NoOpenTransaction);
                }
                self.last = Some((0, false, true));
                Out::Handle
            }
            TxOp::Fetch => match &mut self.last {
                None => Out::Err(ErrorCode::UnknownHandle),
                Some((_, _, false)) => Out::Err(ErrorCode::UnknownHandle),
                Some(_) if !open => Out::Err(ErrorCode::UnknownTransaction),
                Some((_, true, _)) => Out::Err(ErrorCode::EnumerationCancelled),
                Some((cursor, false, _)) => {
                    let start = *cursor;
                    let end = (start + 2).min(SNAPSHOT_LEN);
                    *cursor = end;
                    Out::Page {
                        cursor: start,
                        n: (end - start) as usize,
                        done: end == SNAPSHOT_LEN,
                    }
                }
            },
        }
    }
}

struct TxRig {
    server: Server,
    clock: Arc<SimClock>,
}

fn tx_rig() -> TxRig {
    let clock = Arc::new(SimClock::default());
    let driver = MemoryDriver::new("srvA");
    for (i, t) in ["Rose", "Faust", "Lied"].iter().enumerate() {
        driver.insert(CatalogEntry::new("srvA", &format!("r{i}"), t, "fr", "prose", 0), Vec::new());
    }
    let mut cfg = ServerConfig::new("srvA");
    cfg.levels = LevelMap::default().with("l0", 0);
    let net = silmesh::harness::MemNetwork::new();
    let server = Server::new(
        cfg,
        clock.clone(),
        Arc::new(SecureRng::seeded(4)),
        net.endpoint("srvA"),
        Arc::new(driver),
        Arc::new(MemStore::new()),
    );
    server
        .users()
        .add_user(server.rng(), "u", "pw", &["l0"], UserInfo::default())
        .expect("user");
    TxRig { server, clock }
}

fn run_real(rig: &TxRig, token: &Token, ids: &mut Vec<String>, handle: &mut Option<String>, op: TxOp) -> Out {
    let s = &rig.server;
    let cur = ids.last().cloned().unwrap_or_else(|| "t0000000000000000".into());
    let r: Result<Out, ApiError> = match op {
        TxOp::Open => s.open_transaction(token).map(|id| {
            let fresh = ids.last() != Some(&id);
            if fresh {
                ids.push(id);
            }
            Out::Txn { fresh }
        }),
        TxOp::IsOpen => s.is_open(token, &cur).map(Out::Flag),
        TxOp::Close => s.close_transaction(token, &cur).map(|_| Out::Unit),
        TxOp::Commit => s.commit(token, &cur).map(|_| Out::Unit),
        TxOp::Abort => s.abort(token, &cur).map(|_| Out::Unit),
        TxOp::Query => s.local_query(token, &Query::new("q", vec![Clause::eq(Field::Language, "fr")])).map(|h| {
            *handle = Some(h);
            Out::Handle
        }),
        TxOp::Fetch => {
            let h = handle.clone().unwrap_or_else(|| "t0000000000000000:0".into());
            s.fetch_results(token, &h, 2).map(|p| Out::Page {
                cursor: p.cursor,
                n: p.entries.len(),
                done: p.done,
            })
        }
    };
    r.unwrap_or_else(|e| Out::Err(e.code))
}

fn c4_transactions() -> Check {
    let rig = tx_rig();
    let mut sequences = 0usize;
    let mut seq = Vec::with_capacity(6);
    for len in 0..=6u32 {
        for mut code in 0..TX_OPS.len().pow(len) {
            seq.clear();
            for _ in 0..len {
                seq.push(TX_OPS[code % TX_OPS.len()]);
                code /= TX_OPS.len();
            }
            let token = rig.server.authenticate("u", "pw").map_err(|e| e.to_string())?.token;
            let mut model = TxModel::default();
            let (mut ids, mut handle) = (Vec::new(), None);
            for (i, &op) in seq.iter().enumerate() {
                let want = model.step(op);
                let got = run_real(&rig, &token, &mut ids, &mut handle, op);
                if want != got {
                    return Err(format!("{:?} step {i}: expected {want:?}, got {got:?}", seq));
                }
            }
            sequences += 1;
        }
    }
    // timeout under the simulated clock, T = 300 s
    let s = &rig.server;
    let token = s.authenticate("u", "pw").map_err(|e| e.to_string())?.token;
    let id = s.open_transaction(&token).map_err(|e| e.to_string())?;
    let h = s
        .local_query(&token, &Query::new("q", vec![Clause::eq(Field::Language, "fr")]))
        .map_err(|e| e.to_string())?;
    rig.clock.advance(Duration::from_secs(299));
    let before = s.is_open(&token, &id).map_err(|e| e.to_string())?;
    rig.clock.advance(Duration::from_secs(1));
    let after = s.is_open(&token, &id).map_err(|e| e.to_string())?;
    let fetch = s.fetch_results(&token, &h, 1).map_err(|e| e.code);
    if !before || after || fetch != Err(ErrorCode::UnknownTransaction) {
        return Err(format!("timeout: open at 299 s = {before}, at 300 s = {after}, fetch = {fetch:?}"));
    }
    Ok(format!("{sequences} sequences (length <= 6) agree with the model; closed at T=300 s"))
}

// ---- criterion 5: registry synchronization

fn mirror_matches(mesh: &Mesh) -> Result<(), String> {
    let mut want = mesh.nmu.records();
    want.sort_by(|a, b| a.name.cmp(&b.name));
    for rec in want.iter().filter(|r| r.status == ServerState::Online) {
        let Some(node) = mesh.nodes.get(&rec.name) else { continue };
        let mut got = node.server.mirror();
        got.sort_by(|a, b| a.name.cmp(&b.name));
        if got != want {
            return Err(format!("{}'s mirror differs from the registry", rec.name));
        }
    }
    Ok(())
}

fn c5_registry() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0005);
    let mut ops = 0;
    let mut offline_checks = 0;
    for trial in 0..25u64 {
        let mut mesh = Mesh::new(trial);
        for sid in SIDS {
            mesh.add_server(sid, |_| {});
        }
        let mut down: BTreeSet<String> = BTreeSet::new();
        let mut fresh = 0;
        for step in 0..rng.gen_range(1..=20) {
            let names: Vec<String> = mesh.nmu.records().into_iter().map(|r| r.name).collect();
            let target = names.choose(&mut rng).unwrap().clone();
            let ctx = |e: ApiError| format!("trial {trial} step {step}: {e}");
            match rng.gen_range(0..6) {
                0 => {
                    fresh += 1;
                    mesh.try_add_server(&format!("srvN{fresh}"), |_| {}).map_err(ctx)?;
                }
                1 => {
                    let langs = LANGS.iter().filter(|_| rng.gen_bool(0.5)).map(|s| s.to_string()).collect();
                    let ch = ServerChanges {
                        languages: Some(langs),
                        ..Default::default()
                    };
                    mesh.nmu.update_server(MESH_ADMIN, &target, ch).map_err(ctx)?;
                }
                2 => {
                    let status = *[ServerState::Online, ServerState::Offline].choose(&mut rng).unwrap();
                    let ch = ServerChanges {
                        status: Some(status),
                        ..Default::default()
                    };
                    mesh.nmu.update_server(MESH_ADMIN, &target, ch).map_err(ctx)?;
                }
                3 => {
                    mesh.nmu.disconnect_server(MESH_ADMIN, &target).map_err(ctx)?;
                }
                4 => {
                    let ch = ServerChanges {
                        categories: Some(vec![CATS.choose(&mut rng).unwrap().to_string()]),
                        description: Some(random_title(&mut rng)),
                        ..Default::default()
                    };
                    mesh.nmu.update_server(MESH_ADMIN, &target, ch).map_err(ctx)?;
                }
                _ => {
                    // not an admin op: a server drops off or comes back
                    let up = down.contains(&target);
                    mesh.net.set_reachable(&target, up).map_err(|e| e.to_string())?;
                    if up {
                        down.remove(&target);
                    } else {
                        down.insert(target.clone());
                    }
                    continue;
                }
            }
            ops += 1;
            let report = mesh.nmu.last_report(MESH_ADMIN).map_err(|e| e.to_string())?;
            for d in &report.deliveries {
                if d.outcome == DeliveryOutcome::Failed {
                    offline_checks += 1;
                    let status = mesh.nmu.records().into_iter().find(|r| r.name == d.sid).map(|r| r.status);
                    if d.attempts != 4 || status != Some(ServerState::Offline) {
                        return Err(format!(
                            "trial {trial}: {} failed after {} attempts, left {status:?}",
                            d.sid, d.attempts
                        ));
                    }
                }
            }
            if report.is_all_ok() {
                mirror_matches(&mesh).map_err(|e| format!("trial {trial} step {step}: {e}"))?;
            }
        }
    }
    // a server that stays unreachable is retried 3 times, then offline
    let mut mesh = Mesh::new(55);
    for sid in SIDS {
        mesh.add_server(sid, |_| {});
    }
    mesh.net.set_reachable("srvC", false).map_err(|e| e.to_string())?;
    let t0 = mesh.clock.now();
    let ch = ServerChanges {
        description: Some("moved".into()),
        ..Default::default()
    };
    mesh.nmu.update_server(MESH_ADMIN, "srvA", ch).map_err(|e| e.to_string())?;
    let report = mesh.nmu.last_report(MESH_ADMIN).map_err(|e| e.to_string())?;
    let c = report.deliveries.iter().find(|d| d.sid == "srvC").ok_or("srvC not pushed to")?;
    let status = mesh.nmu.records().into_iter().find(|r| r.name == "srvC").map(|r| r.status);
    let waited = mesh.clock.now().since(t0);
    let spacing = RetryPolicy::default().spacing;
    if c.outcome != DeliveryOutcome::Failed || c.attempts != 4 || status != Some(ServerState::Offline) || waited < spacing * 3 {
        return Err(format!("R=3: {c:?}, status {status:?}, waited {waited:?}"));
    }
    mirror_matches(&mesh)?;
    Ok(format!(
        "{ops} admin ops over 25 sequences, mirrors equal the registry after every all-ok push; \
         {offline_checks} failed deliveries all took 4 attempts and went offline"
    ))
}

// ---- criterion 6: authorization

/// A forwarded request names a user of its sending server at that user's
/// level.
fn check_tags(exchanges: &[Exchange], users: &BTreeMap<String, (String, u32)>) -> Result<usize, String> {
    let mut n = 0;
    for ex in exchanges.iter().filter(|e| e.target.starts_with("/s2s/")) {
        n += 1;
        let raw = ex.header(H_IDENT_TAG).ok_or_else(|| format!("#{} {} has no tag", ex.seq, ex.target))?;
        let parts: Vec<&str> = raw.split(';').collect();
        let [user, level, origin] = parts[..] else {
            return Err(format!("#{}: malformed tag `{raw}`", ex.seq));
        };
        let ok = users
            .get(user)
            .is_some_and(|(home, lvl)| home == origin && level == lvl.to_string() && origin == ex.from);
        if !ok {
            return Err(format!("#{}: tag `{raw}` sent by {} does not match the user", ex.seq, ex.from));
        }
    }
    Ok(n)
}

fn c6_authorization() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0006);
    let mut pairs = 0;
    let mut tagged = 0;
    for trial in 0..40u64 {
        let mesh = random_mesh(&mut rng, 600 + trial, false);
        let mut users = BTreeMap::new();
        for i in 0..4 {
            let login = format!("u{i}");
            let home = *SIDS.choose(&mut rng).unwrap();
            let level = rng.gen_range(0..10);
            mesh.add_user(home, &login, level);
            users.insert(login, (home.to_owned(), level));
        }
        let start = mesh.recorder().len();
        for _ in 0..3 {
            let q = random_query(&mut rng, "q");
            let mut results = Vec::new();
            for (login, (home, level)) in &users {
                let mut c = mesh.connect(home, login).map_err(|e| e.to_string())?;
                c.choose_servers(&SIDS).map_err(|e| e.to_string())?;
                let got: BTreeSet<String> = c
                    .query_all(&q)
                    .map_err(|e| format!("trial {trial}: {e}"))?
                    .into_iter()
                    .map(|e| e.uri)
                    .collect();
                results.push((*level, login.clone(), got));
            }
            for (la, a, ra) in &results {
                for (lb, b, rb) in &results {
                    if la <= lb {
                        pairs += 1;
                        if !ra.is_subset(rb) {
                            return Err(format!("trial {trial}: {a} (level {la}) sees more than {b} (level {lb})"));
                        }
                    }
                }
            }
        }
        tagged += check_tags(&mesh.recorder().since(start), &users).map_err(|e| format!("trial {trial}: {e}"))?;
    }
    let sc = Scenario::parse(TOUR).map_err(|e| e.to_string())?;
    let run = run_scenario(&sc).map_err(|e| e.to_string())?;
    let mut users = BTreeMap::new();
    users.insert("alice".to_owned(), ("srvA".to_owned(), 1));
    tagged += check_tags(&run.transcript.exchanges, &users)?;
    if tagged == 0 {
        return Err("no server-to-server traffic was observed".into());
    }
    Ok(format!("{pairs} level pairs monotone; {tagged} s2s messages carry a correct tag"))
}

fn c7_tour() -> Check {
    let sc = Scenario::parse(TOUR).map_err(|e| e.to_string())?;
    let a = run_scenario(&sc).map_err(|e| e.to_string())?.transcript.to_xml();
    let b = run_scenario(&sc).map_err(|e| e.to_string())?.transcript.to_xml();
    if a != b {
        return Err("reruns produced different transcripts".into());
    }
    let http = run_scenario_on(&sc, TransportKind::Http).map_err(|e| e.to_string())?.transcript.to_xml();
    let same = if http == a { "identical" } else { "different" };
    Ok(format!("4-step shape reproduced; reruns byte-identical ({} bytes); over HTTP {same}", a.len()))
}

fn c8_count() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0008);
    for trial in 0..100u64 {
        let mesh = random_mesh(&mut rng, 800 + trial, false);
        let level = rng.gen_range(0..10);
        mesh.add_user("srvA", "u", level);
        let q = random_query(&mut rng, "q");
        let mut c = mesh.connect("srvA", "u").map_err(|e| e.to_string())?;
        c.choose_servers(&SIDS).map_err(|e| e.to_string())?;
        c.set_page_size(rng.gen_range(1..=15));
        let total = c.count(&q).map_err(|e| e.to_string())?.count;
        let drained = c.query_all(&q).map_err(|e| e.to_string())?.len() as u64;
        let oracle = union_oracle(&mesh, &SIDS, &q, level).len() as u64;
        if total != Some(drained) || drained != oracle {
            return Err(format!("trial {trial}: count {total:?}, drained {drained}, oracle {oracle}"));
        }
    }
    Ok("100/100 trials: count equals drained length".into())
}

fn main() {
    let criteria: [Criterion; 8] = [
        ("codec soundness", c1_codec),
        ("broadcast correctness", c2_broadcast),
        ("double-cache bound", c3_double_cache),
        ("transaction semantics", c4_transactions),
        ("registry synchronization", c5_registry),
        ("authorization", c6_authorization),
        ("bundled tour scenario", c7_tour),
        ("distributed count", c8_count),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let t = Instant::now();
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            Err(format!("panicked: {msg}"))
        });
        let secs = t.elapsed().as_secs_f64();
        match outcome {
            Ok(detail) => println!("criterion {} {name}: PASS ({secs:.1}s) {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("criterion {} {name}: FAIL ({secs:.1}s) {detail}", i + 1);
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
