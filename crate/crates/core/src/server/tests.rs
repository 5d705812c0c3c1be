use std::collections::HashSet;

use super::*;
use crate::harness::Mesh;
use crate::sil::{Basket, Clause, Field, SubState, UserInfo};

fn q(id: &str, clauses: Vec<Clause>) -> Query {
    Query::new(id, clauses)
}

fn lang(l: &str) -> Clause {
    Clause::eq(Field::Language, l)
}

fn cat(c: &str) -> Clause {
    Clause::eq(Field::Category, c)
}

/// Brute-force oracle: what `sid` should return for `query` at `level`.
fn oracle(mesh: &Mesh, sid: &str, query: &Query, level: u32) -> Vec<ResultEntry> {
    mesh.driver(sid)
        .entries()
        .into_iter()
        .filter(|e| catalog::matches(e, query) && e.required_level <= level)
        .map(|e| e.to_result())
        .collect()
}

fn drain(srv: &Server, token: &Token, handle: &str, max: usize) -> (Vec<ResultEntry>, Vec<usize>) {
    let mut all = Vec::new();
    let mut sizes = Vec::new();
    let mut base = None;
    loop {
        let page = srv.fetch_results(token, handle, max).unwrap();
        let base = *base.get_or_insert(page.cursor as usize);
        assert_eq!(page.cursor as usize, base + all.len());
        sizes.push(page.entries.len());
        all.extend(page.entries);
        if page.done {
            return (all, sizes);
        }
    }
}

fn login(mesh: &Mesh, sid: &str, user: &str) -> Token {
    mesh.server(sid).authenticate(user, user).unwrap().token
}

/// srvA: 3 French prose, 2 German prose, one level-5 French prose.
fn single() -> Mesh {
    let mut m = Mesh::new(7);
    m.add_server("srvA", |_| {});
    for i in 0..3 {
        m.add_resource("srvA", &format!("fr{i}"), &format!("Roman {i}"), "fr", "prose", 0);
    }
    for i in 0..2 {
        m.add_resource("srvA", &format!("de{i}"), &format!("Novelle {i}"), "de", "prose", 0);
    }
    m.add_resource("srvA", "secret", "Brouillon", "fr", "prose", 5);
    m.add_user("srvA", "alice", 1);
    m.add_user("srvA", "root", 9);
    m
}

#[test]
fn authentication_errors_are_uniform() {
    let m = single();
    let srv = m.server("srvA");
    let s = srv.authenticate("alice", "alice").unwrap();
    assert_eq!(srv.session_info(&s.token).unwrap().login, "alice");
    assert_eq!(s.level, 1);
    let wrong = srv.authenticate("alice", "nope").unwrap_err();
    let unknown = srv.authenticate("mallory", "nope").unwrap_err();
    assert_eq!(wrong, unknown);
    assert_eq!(wrong.code, ErrorCode::AuthFailed);
}

#[test]
fn disabled_accounts_are_refused_after_the_password_check() {
    let m = single();
    let srv = m.server("srvA");
    let mut info = UserInfo::default();
    info.fields.insert("status".into(), "disabled".into());
    srv.users().add_user(srv.rng(), "gone", "pw", &[], info).unwrap();
    assert_eq!(srv.authenticate("gone", "bad").unwrap_err().code, ErrorCode::AuthFailed);
    assert_eq!(srv.authenticate("gone", "pw").unwrap_err().code, ErrorCode::AccountDisabled);
}

#[test]
fn sessions_expire() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    m.clock.advance(srv.config().session_ttl);
    assert_eq!(srv.open_transaction(&t).unwrap_err().code, ErrorCode::SessionExpired);
    let forged = Token::generate(&SecureRng::seeded(99));
    assert_eq!(srv.open_transaction(&forged).unwrap_err().code, ErrorCode::SessionExpired);
}

#[test]
fn transaction_lifecycle() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    let id = srv.open_transaction(&t).unwrap();
    assert!(srv.is_open(&t, &id).unwrap());
    assert_eq!(srv.open_transaction(&t).unwrap(), id);

    let h = srv.local_query(&t, &q("q", vec![lang("fr")])).unwrap();
    srv.close_transaction(&t, &id).unwrap();
    srv.close_transaction(&t, &id).unwrap();
    assert!(!srv.is_open(&t, &id).unwrap());
    assert_eq!(srv.fetch_results(&t, &h, 10).unwrap_err().code, ErrorCode::UnknownTransaction);
    assert_eq!(srv.commit(&t, &id).unwrap_err().code, ErrorCode::TransactionClosed);
    assert_eq!(srv.abort(&t, &id).unwrap_err().code, ErrorCode::TransactionClosed);
    assert_eq!(srv.is_open(&t, "tnope").unwrap_err().code, ErrorCode::UnknownTransaction);

    // someone else's transaction does not exist for us
    let r = login(&m, "srvA", "root");
    assert_eq!(srv.is_open(&r, &id).unwrap_err().code, ErrorCode::UnknownTransaction);
}

#[test]
fn transaction_times_out_on_the_simulated_clock() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    let id = srv.open_transaction(&t).unwrap();
    m.clock.advance(Duration::from_secs(299));
    assert!(srv.is_open(&t, &id).unwrap());
    // is_open does not count as use
    m.clock.advance(Duration::from_secs(1));
    assert!(!srv.is_open(&t, &id).unwrap());
    assert_eq!(srv.local_query(&t, &q("q", vec![lang("fr")])).unwrap_err().code, ErrorCode::NoOpenTransaction);

    let id = srv.open_transaction(&t).unwrap();
    m.clock.advance(Duration::from_secs(200));
    srv.count_query(&t, &q("q", vec![lang("fr")])).unwrap();
    m.clock.advance(Duration::from_secs(200));
    assert!(srv.is_open(&t, &id).unwrap(), "use resets the timer");
    m.clock.advance(Duration::from_secs(100));
    assert_eq!(srv.sweep(), 1);
    assert_eq!(srv.open_transactions(), 0);
}

#[test]
fn local_query_matches_brute_force_scan_and_filters_levels() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let query = q("q", vec![lang("fr"), cat("prose")]);
    let h = srv.local_query(&t, &query).unwrap();
    let (got, _) = drain(srv, &t, &h, 100);
    assert_eq!(got, oracle(&m, "srvA", &query, 1));
    assert_eq!(got.len(), 3);
    assert!(got.iter().all(|e| e.uri != "srvA/secret"));
    assert_eq!(srv.count_query(&t, &q("q", vec![lang("fr")])).unwrap(), 3);
    assert_eq!(srv.count_query(&t, &q("q", vec![lang("it")])).unwrap(), 0);

    let r = login(&m, "srvA", "root");
    srv.open_transaction(&r).unwrap();
    assert_eq!(srv.count_query(&r, &query).unwrap(), 4);
}

#[test]
fn bad_queries_never_reach_the_driver() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    assert_eq!(srv.local_query(&t, &q("q", vec![lang("fr")])).unwrap_err().code, ErrorCode::NoOpenTransaction);
    srv.open_transaction(&t).unwrap();
    assert_eq!(srv.local_query(&t, &q("q", vec![])).unwrap_err().code, ErrorCode::BadRequest);
    assert_eq!(srv.local_query(&t, &q("", vec![lang("fr")])).unwrap_err().code, ErrorCode::BadRequest);
}

#[test]
fn pagination_partitions_the_snapshot() {
    let mut m = Mesh::new(3);
    m.add_server("srvA", |_| {});
    for i in 0..120 {
        m.add_resource("srvA", &format!("r{i:03}"), "t", "fr", "prose", 0);
    }
    m.add_user("srvA", "alice", 0);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let query = q("q", vec![lang("fr")]);
    let h = srv.local_query(&t, &query).unwrap();
    let (all, sizes) = drain(srv, &t, &h, 50);
    assert_eq!(sizes, [50, 50, 20]);
    assert_eq!(all, oracle(&m, "srvA", &query, 0));
    assert_eq!(srv.count_query(&t, &query).unwrap(), 120);

    let h = srv.local_query(&t, &query).unwrap();
    let (_, sizes) = drain(srv, &t, &h, 500);
    assert_eq!(sizes, [120]);
    assert_eq!(srv.fetch_results(&t, &h, 0).unwrap_err().code, ErrorCode::BadRequest);
    assert_eq!(srv.fetch_results(&t, "nope", 5).unwrap_err().code, ErrorCode::UnknownHandle);
}

#[test]
fn snapshots_ignore_later_catalog_changes() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let query = q("q", vec![lang("fr")]);
    let before = oracle(&m, "srvA", &query, 1);
    let h = srv.local_query(&t, &query).unwrap();
    let first = srv.fetch_results(&t, &h, 1).unwrap();
    m.driver("srvA").remove("srvA/fr1");
    m.add_resource("srvA", "fr00", "Nouveau", "fr", "prose", 0);
    let (rest, _) = drain(srv, &t, &h, 10);
    let mut all = first.entries;
    all.extend(rest);
    assert_eq!(all, before);
}

fn ws_fixture(now: Timestamp) -> Workspace {
    let mut ws = Workspace::new("thesis");
    ws.servers = vec!["srvA".into(), "srvB".into(), "srvC".into()];
    let mut b = Basket::new("verbs", now);
    b.add("srvA/fr0");
    b.add("srvB/x");
    ws.baskets.push(b);
    ws.baskets.push(Basket::new("nouns", now));
    ws
}

#[test]
fn workspace_commit_and_abort() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    let ws = ws_fixture(m.clock.now());
    assert_eq!(srv.save_workspace(&t, ws.clone()).unwrap_err().code, ErrorCode::NoOpenTransaction);

    let id = srv.open_transaction(&t).unwrap();
    srv.save_workspace(&t, ws.clone()).unwrap();
    assert_eq!(srv.load_workspace(&t, "thesis").unwrap(), ws, "pending save is visible to its writer");
    srv.abort(&t, &id).unwrap();
    let t2 = login(&m, "srvA", "alice");
    assert_eq!(srv.load_workspace(&t2, "thesis").unwrap_err().code, ErrorCode::UnknownWorkspace);

    srv.save_workspace(&t, ws.clone()).unwrap();
    srv.commit(&t, &id).unwrap();
    let t3 = login(&m, "srvA", "alice");
    assert_eq!(srv.load_workspace(&t3, "thesis").unwrap(), ws);
    assert_eq!(srv.workspace_names(&t3).unwrap(), ["thesis"]);

    let r = login(&m, "srvA", "root");
    assert_eq!(srv.load_workspace(&r, "thesis").unwrap_err().code, ErrorCode::UnknownWorkspace);
}

#[test]
fn abort_cancels_live_enumerations() {
    let m = single();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    let id = srv.open_transaction(&t).unwrap();
    let h = srv.local_query(&t, &q("q", vec![lang("fr")])).unwrap();
    srv.fetch_results(&t, &h, 1).unwrap();
    srv.abort(&t, &id).unwrap();
    assert_eq!(srv.fetch_results(&t, &h, 1).unwrap_err().code, ErrorCode::EnumerationCancelled);
    assert!(srv.is_open(&t, &id).unwrap());
}

// ---- broker ----

/// srvA, srvB, srvC with alice on srvA at `level`.
fn trio(level: u32) -> Mesh {
    let mut m = Mesh::new(11);
    for sid in ["srvA", "srvB", "srvC"] {
        m.add_server(sid, |_| {});
    }
    m.add_user("srvA", "alice", level);
    m
}

fn union_oracle(m: &Mesh, sids: &[&str], query: &Query, level: u32) -> Vec<ResultEntry> {
    let mut sorted: Vec<&str> = sids.to_vec();
    sorted.sort();
    let mut seen = HashSet::new();
    sorted
        .iter()
        .flat_map(|s| oracle(m, s, query, level))
        .filter(|e| seen.insert(e.uri.clone()))
        .collect()
}

#[test]
fn broadcast_yields_the_union_in_server_order() {
    let m = trio(1);
    for i in 0..2 {
        m.add_resource("srvB", &format!("b{i}"), "Roman", "fr", "prose", 0);
    }
    for i in 0..3 {
        m.add_resource("srvC", &format!("c{i}"), "Roman", "fr", "prose", 0);
    }
    m.add_resource("srvC", "x", "Gedicht", "de", "poetry", 0);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let query = q("q", vec![lang("fr")]).with_targets(["srvC", "srvB"]);
    let h = srv.broadcast_query(&t, &query).unwrap();
    let (got, sizes) = drain(srv, &t, &h, 2);
    assert_eq!(got, union_oracle(&m, &["srvB", "srvC"], &query, 1));
    assert_eq!(got.len(), 5);
    assert_eq!(sizes, [2, 2, 1]);
}

#[test]
fn duplicates_across_servers_appear_once() {
    let m = trio(0);
    let shared = CatalogEntry::new("srvB", "r1", "Germinal", "fr", "prose", 0);
    m.driver("srvB").insert(shared.clone(), vec![]);
    m.driver("srvC").insert(shared, vec![]);
    m.add_resource("srvC", "c1", "Nana", "fr", "prose", 0);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let h = srv.broadcast_query(&t, &q("q", vec![lang("fr")])).unwrap();
    let (got, _) = drain(srv, &t, &h, 10);
    let uris: Vec<&str> = got.iter().map(|e| e.uri.as_str()).collect();
    assert_eq!(uris, ["srvB/r1", "srvC/c1"]);
}

#[test]
fn unreachable_target_fails_alone() {
    let m = trio(0);
    m.add_resource("srvA", "a0", "Roman", "fr", "prose", 0);
    m.add_resource("srvB", "b0", "Roman", "fr", "prose", 0);
    m.add_resource("srvC", "c0", "Roman", "fr", "prose", 0);
    m.net.set_reachable("srvB", false).unwrap();
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let h = srv.broadcast_query(&t, &q("q", vec![lang("fr")])).unwrap();
    let page = srv.fetch_results(&t, &h, 50).unwrap();
    assert!(page.done);
    let uris: Vec<&str> = page.entries.iter().map(|e| e.uri.as_str()).collect();
    assert_eq!(uris, ["srvA/a0", "srvC/c0"]);
    let b = page.statuses.iter().find(|s| s.sid == "srvB").unwrap();
    assert_eq!(b.state, SubState::Failed);
    assert!(b.reason.is_some());
    assert!(page.statuses.iter().filter(|s| s.sid != "srvB").all(|s| s.state == SubState::Done));

    m.net.set_reachable("srvC", false).unwrap();
    let err = srv.broadcast_query(&t, &q("q", vec![lang("fr")]).with_targets(["srvB", "srvC"])).unwrap_err();
    assert_eq!(err.code, ErrorCode::AllTargetsFailed);
}

#[test]
fn failure_mid_stream_keeps_what_arrived() {
    let m = trio(0);
    for i in 0..4 {
        m.add_resource("srvB", &format!("b{i}"), "Roman", "fr", "prose", 0);
        m.add_resource("srvC", &format!("c{i}"), "Roman", "fr", "prose", 0);
    }
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let mut query = q("q", vec![lang("fr")]).with_targets(["srvB", "srvC"]);
    query.max_results = Some(2);
    let h = srv.broadcast_query(&t, &query).unwrap();
    let first = srv.fetch_results(&t, &h, 2).unwrap();
    m.net.set_reachable("srvB", false).unwrap();
    let (rest, _) = drain(srv, &t, &h, 2);
    let uris: Vec<String> = first.entries.iter().chain(&rest).map(|e| e.uri.clone()).collect();
    assert_eq!(uris, ["srvB/b0", "srvB/b1", "srvC/c0", "srvC/c1", "srvC/c2", "srvC/c3"]);
}

#[test]
fn malformed_remote_page_fails_that_target_only() {
    let m = trio(0);
    m.add_resource("srvB", "b0", "Roman", "fr", "prose", 0);
    m.add_resource("srvC", "c0", "Roman", "fr", "prose", 0);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let h = srv.broadcast_query(&t, &q("q", vec![lang("fr")]).with_targets(["srvB", "srvC"])).unwrap();
    // srvB now answers pulls with garbage
    let real = Arc::new(ServerHandler::new(m.server("srvB").clone()));
    m.net.attach(
        "srvB",
        Arc::new(move |req: crate::wire::Request| {
            if req.path() == "/s2s/results" {
                crate::wire::Response::ok().body("multipart/mixed; boundary=zz", b"--zz\r\n\r\n<sil>".to_vec())
            } else {
                crate::wire::Handler::handle(&*real, req)
            }
        }),
    )
    .unwrap();
    let (got, _) = drain(srv, &t, &h, 10);
    assert_eq!(got.iter().map(|e| e.uri.as_str()).collect::<Vec<_>>(), ["srvC/c0"]);
    let st = srv.broadcast_statuses(&t, &h).unwrap();
    assert_eq!(st[0].state, SubState::Failed);
    assert_eq!(st[1].state, SubState::Done);
}

#[test]
fn remote_level_filter_applies_the_tag_level() {
    let m = trio(1);
    m.add_resource("srvB", "hi", "Secret", "fr", "prose", 5);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let h = srv.broadcast_query(&t, &q("q", vec![lang("fr")]).with_targets(["srvB"])).unwrap();
    let page = srv.fetch_results(&t, &h, 10).unwrap();
    assert!(page.entries.is_empty());
    assert!(page.done);
    assert_eq!(page.statuses[0].state, SubState::Done);
}

#[test]
fn local_cache_never_exceeds_capacity() {
    let mut m = Mesh::new(5);
    m.add_server("srvA", |c| c.cache_capacity = 4);
    m.add_server("srvB", |_| {});
    m.add_server("srvC", |_| {});
    for i in 0..10 {
        m.add_resource("srvB", &format!("b{i}"), "t", "fr", "prose", 0);
        m.add_resource("srvC", &format!("c{i}"), "t", "fr", "prose", 0);
    }
    m.add_user("srvA", "alice", 0);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let mut query = q("q", vec![lang("fr")]).with_targets(["srvB", "srvC"]);
    query.max_results = Some(2);
    let h = srv.broadcast_query(&t, &query).unwrap();
    let (got, sizes) = drain(srv, &t, &h, 100);
    assert_eq!(got.len(), 20);
    assert!(sizes.iter().all(|&s| s <= 2));
    let stats = srv.broadcast_stats(&t, &h).unwrap();
    assert!(stats.peak_occupancy <= 4, "{stats:?}");
    assert!(stats.max_page <= 2);
}

#[test]
fn unknown_targets_are_refused() {
    let m = trio(0);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let err = srv.broadcast_query(&t, &q("q", vec![lang("fr")]).with_targets(["srvZ"])).unwrap_err();
    assert_eq!(err.code, ErrorCode::UnknownTarget);
    m.nmu.disconnect_server(crate::harness::MESH_ADMIN, "srvC").unwrap();
    let err = srv.broadcast_query(&t, &q("q", vec![lang("fr")]).with_targets(["srvC"])).unwrap_err();
    assert_eq!(err.code, ErrorCode::UnknownTarget);
}

#[test]
fn broadcast_count_sums_survivors() {
    let m = trio(0);
    for i in 0..2 {
        m.add_resource("srvB", &format!("b{i}"), "Roman", "fr", "prose", 0);
    }
    for i in 0..3 {
        m.add_resource("srvC", &format!("c{i}"), "Roman", "fr", "prose", 0);
    }
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    srv.open_transaction(&t).unwrap();
    let query = q("q", vec![lang("fr")]).with_targets(["srvB", "srvC"]);
    let rs = srv.broadcast_count(&t, &query).unwrap();
    assert_eq!(rs.count, Some(5));
    let by: Vec<(&str, Option<u64>)> = rs.statuses.iter().map(|s| (s.sid.as_str(), s.count)).collect();
    assert_eq!(by, [("srvB", Some(2)), ("srvC", Some(3))]);

    m.net.set_reachable("srvB", false).unwrap();
    let rs = srv.broadcast_count(&t, &query).unwrap();
    assert_eq!(rs.count, Some(3));
    assert_eq!(rs.statuses[0].state, SubState::Failed);
    assert_eq!(rs.statuses[0].count, None);
}

#[test]
fn forwarded_requests_need_an_affiliated_origin() {
    let m = trio(0);
    let srv_b = m.server("srvB");
    let tag: IdentTag = "alice;0;srvZ".parse().unwrap();
    let doc = SilDocument::new("srvZ", tag.uid(), Payload::Ql(q("q", vec![lang("fr")])));
    assert_eq!(srv_b.s2s_query(&tag, &doc).unwrap_err().code, ErrorCode::UnknownRequester);

    let tag: IdentTag = "alice;0;srvA".parse().unwrap();
    let lying = SilDocument::new("srvA", "alice;9;srvA".parse::<IdentTag>().unwrap().uid(), Payload::Ql(q("q", vec![lang("fr")])));
    assert_eq!(srv_b.s2s_query(&tag, &lying).unwrap_err().code, ErrorCode::Forbidden);
    let good = SilDocument::new("srvA", tag.uid(), Payload::Ql(q("q", vec![lang("fr")])));
    assert!(srv_b.s2s_query(&tag, &good).unwrap().handle.is_some());
}

#[test]
fn resources_are_level_checked_and_forwarded() {
    let m = trio(1);
    m.add_resource("srvA", "a0", "Roman", "fr", "prose", 0);
    m.add_resource("srvB", "b0", "Lettres", "fr", "prose", 1);
    m.add_resource("srvB", "b9", "Secret", "fr", "prose", 5);
    let srv = m.server("srvA");
    let t = login(&m, "srvA", "alice");
    let (e, content) = srv.fetch_resource(&t, "srvA/a0").unwrap();
    assert_eq!((e.title.as_str(), content.as_slice()), ("Roman", &b"Roman"[..]));
    let (e, content) = srv.fetch_resource(&t, "srvB/b0").unwrap();
    assert_eq!((e.uri.as_str(), content.as_slice()), ("srvB/b0", &b"Lettres"[..]));
    assert_eq!(srv.fetch_resource(&t, "srvB/b9").unwrap_err().code, ErrorCode::Forbidden);
    m.driver("srvB").remove("srvB/b0");
    assert_eq!(srv.fetch_resource(&t, "srvB/b0").unwrap_err().code, ErrorCode::ResourceGone);
    assert_eq!(srv.fetch_resource(&t, "srvQ/x").unwrap_err().code, ErrorCode::UnknownTarget);
}

#[test]
fn mirror_follows_pushes_and_degrades_without_registry() {
    let m = trio(0);
    assert_eq!(m.server("srvA").mirror(), m.nmu.records());
    assert!(m.server("srvA").sync_from_nmu());
    assert!(!m.server("srvA").is_degraded());
    m.net.set_reachable(crate::harness::NMU_NODE, false).unwrap();
    assert!(!m.server("srvA").sync_from_nmu());
    assert!(m.server("srvA").is_degraded());
}
