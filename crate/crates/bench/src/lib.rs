//! Fixtures shared by the criterion benchmarks under `benches/`.

use silmesh::harness::Mesh;
use silmesh::sil::{Clause, Field, Query};

pub const LANGS: [&str; 3] = ["fr", "de", "en"];

/// A memory mesh of `servers` servers holding `per_server` resources each,
/// with a level-9 user `reader` on the first one.
pub fn library(servers: usize, per_server: usize) -> Mesh {
    let mut mesh = Mesh::new(42);
    let sids: Vec<String> = (0..servers).map(|i| format!("srv{i}")).collect();
    for sid in &sids {
        mesh.add_server(sid, |_| {});
        for r in 0..per_server {
            let lang = LANGS[r % LANGS.len()];
            mesh.add_resource(sid, &format!("r{r:05}"), &format!("title {r}"), lang, "prose", 0);
        }
    }
    mesh.add_user(&sids[0], "reader", 9);
    mesh
}

pub fn french() -> Query {
    Query::new("q", vec![Clause::eq(Field::Language, "fr")])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn library_answers_across_servers() {
        let mesh = library(3, 9);
        let mut c = mesh.connect("srv0", "reader").unwrap();
        c.choose_servers(&["srv0", "srv1", "srv2"]).unwrap();
        assert_eq!(c.query_all(&french()).unwrap().len(), 9);
    }
}
