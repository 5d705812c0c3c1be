use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use silmesh::auth::SecureRng;
use silmesh::clock::SimClock;
use silmesh::harness::MemNetwork;
use silmesh::server::catalog::write_resource;
use silmesh::server::{CatalogEntry, DirectoryDriver, IdentTag, LevelMap, MemoryDriver, QueryDriver, Server, ServerConfig};
use silmesh::sil::corpus::random_document;
use silmesh::sil::{parse_document, serialize_document, Clause, Field, Op, Query, UserInfo};
use silmesh::store::MemStore;

const LANGS: [&str; 3] = ["fr", "de", "en"];
const CATS: [&str; 2] = ["prose", "poetry"];

fn entry_strategy() -> impl Strategy<Value = (u8, usize, usize, u32, String)> {
    (any::<u8>(), 0..LANGS.len(), 0..CATS.len(), 0u32..10, "[a-z]{1,8}( [a-z]{1,6})?")
}

fn catalog(sid: &str, raw: &[(u8, usize, usize, u32, String)]) -> Vec<CatalogEntry> {
    let mut seen = BTreeSet::new();
    raw.iter()
        .filter(|(id, ..)| seen.insert(*id))
        .map(|(id, l, c, lvl, title)| CatalogEntry::new(sid, &format!("r{id:03}"), title, LANGS[*l], CATS[*c], *lvl))
        .collect()
}

fn server_on(driver: Arc<dyn QueryDriver>, levels: &[u32]) -> Server {
    let mut cfg = ServerConfig::new("srvA");
    cfg.levels = (0..10).fold(LevelMap::default(), |m, l| m.with(&format!("l{l}"), l));
    let net = MemNetwork::new();
    let srv = Server::new(
        cfg,
        Arc::new(SimClock::default()),
        Arc::new(SecureRng::seeded(1)),
        net.endpoint("srvA"),
        driver,
        Arc::new(MemStore::new()),
    );
    for l in levels {
        srv.users()
            .add_user(srv.rng(), &format!("u{l}"), "pw", &[&format!("l{l}")], UserInfo::default())
            .unwrap();
    }
    srv
}

fn drain(srv: &Server, login: &str, q: &Query, max: usize) -> Vec<String> {
    let token = srv.authenticate(login, "pw").unwrap().token;
    srv.open_transaction(&token).unwrap();
    let h = srv.local_query(&token, q).unwrap();
    let mut out = Vec::new();
    loop {
        let page = srv.fetch_results(&token, &h, max).unwrap();
        assert!(page.entries.len() <= max);
        assert_eq!(page.cursor as usize, out.len());
        out.extend(page.entries.into_iter().map(|e| e.uri));
        if page.done {
            return out;
        }
    }
}

fn lang_query(l: usize) -> Query {
    Query::new("q", vec![Clause::eq(Field::Language, LANGS[l])])
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn documents_round_trip(seed in any::<u64>()) {
        let doc = random_document(&mut ChaCha8Rng::seed_from_u64(seed));
        let bytes = serialize_document(&doc).unwrap();
        prop_assert_eq!(parse_document(&bytes).unwrap(), doc);
    }

    #[test]
    fn pages_partition_the_snapshot(raw in prop::collection::vec(entry_strategy(), 0..80), max in 1usize..30, l in 0..LANGS.len()) {
        let entries = catalog("srvA", &raw);
        let driver = MemoryDriver::new("srvA");
        for e in &entries {
            driver.insert(e.clone(), Vec::new());
        }
        let srv = server_on(Arc::new(driver), &[9]);
        let want: Vec<String> = entries.iter().filter(|e| e.language == LANGS[l]).map(|e| e.uri.clone()).collect::<BTreeSet<_>>().into_iter().collect();
        prop_assert_eq!(drain(&srv, "u9", &lang_query(l), max), want);
    }

    #[test]
    fn lower_level_sees_a_subset(raw in prop::collection::vec(entry_strategy(), 0..60), a in 0u32..10, b in 0u32..10, l in 0..LANGS.len()) {
        let (lo, hi) = (a.min(b), a.max(b));
        let driver = MemoryDriver::new("srvA");
        for e in catalog("srvA", &raw) {
            driver.insert(e, Vec::new());
        }
        let srv = server_on(Arc::new(driver), &[lo, hi]);
        let low: BTreeSet<String> = drain(&srv, &format!("u{lo}"), &lang_query(l), 7).into_iter().collect();
        let high: BTreeSet<String> = drain(&srv, &format!("u{hi}"), &lang_query(l), 7).into_iter().collect();
        prop_assert!(low.is_subset(&high));
    }

    #[test]
    fn drivers_agree(raw in prop::collection::vec(entry_strategy(), 0..40), l in 0..LANGS.len(), word in "[a-z]{1,2}") {
        let entries = catalog("srvA", &raw);
        let mem = MemoryDriver::new("srvA");
        let dir = tempfile::tempdir().unwrap();
        for e in &entries {
            mem.insert(e.clone(), e.title.as_bytes().to_vec());
            write_resource(dir.path(), e, e.title.as_bytes()).unwrap();
        }
        let q = lang_query(l).and(Clause::new(Field::Title, Op::Contains, word));
        let a = server_on(Arc::new(mem), &[9]);
        let b = server_on(Arc::new(DirectoryDriver::new("srvA", dir.path())), &[9]);
        prop_assert_eq!(drain(&a, "u9", &q, 5), drain(&b, "u9", &q, 5));
    }

    #[test]
    fn ident_tags_round_trip(user in "[a-z][a-z0-9_.-]{0,10}", level in 0u32..100, origin in "[A-Za-z][A-Za-z0-9]{0,8}") {
        let tag = IdentTag { user, level, origin };
        prop_assert_eq!(tag.to_string().parse::<IdentTag>().unwrap(), tag);
    }
}

#[test]
fn snapshot_ignores_later_catalog_changes() {
    let driver = MemoryDriver::new("srvA");
    for i in 0..6 {
        driver.insert(CatalogEntry::new("srvA", &format!("r{i}"), "t", "fr", "prose", 0), Vec::new());
    }
    let srv = server_on(Arc::new(driver.clone()), &[0]);
    let token = srv.authenticate("u0", "pw").unwrap().token;
    srv.open_transaction(&token).unwrap();
    let h = srv.local_query(&token, &lang_query(0)).unwrap();
    let first = srv.fetch_results(&token, &h, 2).unwrap();
    driver.remove("srvA/r3");
    driver.insert(CatalogEntry::new("srvA", "r9", "t", "fr", "prose", 0), Vec::new());
    let rest = srv.fetch_results(&token, &h, 10).unwrap();
    let uris: Vec<String> = first.entries.iter().chain(&rest.entries).map(|e| e.uri.clone()).collect();
    assert_eq!(uris, (0..6).map(|i| format!("srvA/r{i}")).collect::<Vec<_>>());
    assert!(rest.done);
}
