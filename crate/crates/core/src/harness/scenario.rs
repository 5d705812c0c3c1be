//! Line-oriented scenario scripts replayed against a fresh mesh.
//!
//! ```text
//! # setup
//! seed 4
//! server srvA cache=4 page=2
//! user srvA alice 1
//! resource srvB b1 fr prose 0 Madame Bovary
//! # steps: op args [=> expectation]
//! connect alice srvA
//! choose alice srvA srvB
//! query alice q1 language=fr title~bovary => 1
//! status alice => open
//! mark m
//! expect-shape m
//!   alice -> srvA POST /query
//! end
//! ```
//!
//! An expectation is `!Code` for an error, a number for a result size or
//! count, or a word for a state. Without one the step must succeed.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use crate::client::Client;
use crate::sil::{Clause, Query};
use crate::wire::{ApiError, ErrorCode};

use super::fabric::{Fabric, HttpFabric};
use super::mesh::{Mesh, MESH_ADMIN};
use super::net::MemNetwork;
use super::transcript::{Exchange, Transcript};

pub const TOUR: &str = include_str!("../../scenarios/tour.scn");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TransportKind {
    #[default]
    Mem,
    Http,
}

impl std::str::FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "mem" => Ok(TransportKind::Mem),
            "http" => Ok(TransportKind::Http),
            _ => Err(format!("unknown transport `{s}` (mem or http)")),
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ScenarioError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("boot failed: {0}")]
    Boot(String),
    #[error("line {line}: `{step}`: {diff}")]
    Expectation { line: usize, step: String, diff: String },
}

impl ScenarioError {
    /// 2 for a failed expectation, 3 for anything that stopped the mesh
    /// from starting.
    pub fn exit_code(&self) -> i32 {
        match self {
            ScenarioError::Expectation { .. } => 2,
            _ => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Expect {
    Ok,
    Error(ErrorCode),
    Number(u64),
    Word(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct ShapeLine {
    from: String,
    to: String,
    method: String,
    path: String,
}

impl fmt::Display for ShapeLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} -> {} {} {}", self.from, self.to, self.method, self.path)
    }
}

#[derive(Debug, Clone)]
enum Setup {
    Server { sid: String, cache: Option<usize>, page: Option<usize>, timeout: Option<u64> },
    User { sid: String, login: String, level: u32 },
    Resource { sid: String, local: String, lang: String, category: String, level: u32, title: String },
}

#[derive(Debug, Clone)]
struct Step {
    line: usize,
    text: String,
    words: Vec<String>,
    expect: Expect,
    shape: Vec<ShapeLine>,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub transport: TransportKind,
    setup: Vec<Setup>,
    steps: Vec<Step>,
}

fn parse_expect(line: usize, s: &str) -> Result<Expect, ScenarioError> {
    let s = s.trim();
    if let Some(code) = s.strip_prefix('!') {
        return ErrorCode::from_wire(code).map(Expect::Error).ok_or_else(|| ScenarioError::Parse {
            line,
            msg: format!("unknown error code `{code}`"),
        });
    }
    if let Ok(n) = s.parse() {
        return Ok(Expect::Number(n));
    }
    if s == "ok" {
        return Ok(Expect::Ok);
    }
    Ok(Expect::Word(s.to_owned()))
}

fn num<T: std::str::FromStr>(line: usize, what: &str, s: &str) -> Result<T, ScenarioError> {
    s.parse().map_err(|_| ScenarioError::Parse {
        line,
        msg: format!("{what} `{s}` is not a number"),
    })
}

fn arity(line: usize, words: &[String], min: usize) -> Result<(), ScenarioError> {
    if words.len() < min {
        return Err(ScenarioError::Parse {
            line,
            msg: format!("`{}` needs at least {} arguments", words[0], min - 1),
        });
    }
    Ok(())
}

const STEP_OPS: &[(&str, usize)] = &[
    ("connect", 3),
    ("choose", 2),
    ("page-size", 3),
    ("open", 2),
    ("close", 2),
    ("commit", 2),
    ("abort", 2),
    ("status", 2),
    ("query", 4),
    ("count", 4),
    ("basket", 3),
    ("save", 2),
    ("load", 3),
    ("fetch", 3),
    ("clock", 2),
    ("down", 2),
    ("up", 2),
    ("disconnect", 2),
    ("mark", 2),
    ("expect-shape", 2),
    ("expect-tags", 2),
    ("expect-peak", 3),
];

impl Scenario {
    pub fn parse(text: &str) -> Result<Scenario, ScenarioError> {
        let mut sc = Scenario {
            seed: 0,
            transport: TransportKind::Mem,
            setup: Vec::new(),
            steps: Vec::new(),
        };
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
        while let Some((line, raw)) = lines.next() {
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (body, expect) = match content.split_once("=>") {
                Some((b, e)) => (b.trim(), parse_expect(line, e)?),
                None => (content, Expect::Ok),
            };
            let words: Vec<String> = body.split_whitespace().map(str::to_owned).collect();
            let perr = |msg: String| ScenarioError::Parse { line, msg };
            match words[0].as_str() {
                "seed" => {
                    arity(line, &words, 2)?;
                    sc.seed = num(line, "seed", &words[1])?;
                }
                "transport" => {
                    arity(line, &words, 2)?;
                    sc.transport = words[1].parse().map_err(perr)?;
                }
                "server" => {
                    arity(line, &words, 2)?;
                    let (mut cache, mut page, mut timeout) = (None, None, None);
                    for opt in &words[2..] {
                        match opt.split_once('=') {
                            Some(("cache", v)) => cache = Some(num(line, "cache", v)?),
                            Some(("page", v)) => page = Some(num(line, "page", v)?),
                            Some(("timeout", v)) => timeout = Some(num(line, "timeout", v)?),
                            _ => return Err(perr(format!("unknown server option `{opt}`"))),
                        }
                    }
                    sc.setup.push(Setup::Server { sid: words[1].clone(), cache, page, timeout });
                }
                "user" => {
                    arity(line, &words, 4)?;
                    sc.setup.push(Setup::User {
                        sid: words[1].clone(),
                        login: words[2].clone(),
                        level: num(line, "level", &words[3])?,
                    });
                }
                "resource" => {
                    arity(line, &words, 7)?;
                    sc.setup.push(Setup::Resource {
                        sid: words[1].clone(),
                        local: words[2].clone(),
                        lang: words[3].clone(),
                        category: words[4].clone(),
                        level: num(line, "level", &words[5])?,
                        title: words[6..].join(" "),
                    });
                }
                op => {
                    let min = STEP_OPS
                        .iter()
                        .find(|(name, _)| *name == op)
                        .map(|(_, n)| *n)
                        .ok_or_else(|| perr(format!("unknown operation `{op}`")))?;
                    arity(line, &words, min)?;
                    let mut shape = Vec::new();
                    if op == "expect-shape" {
                        loop {
                            let (l, raw) = lines.next().ok_or_else(|| perr("expect-shape without `end`".into()))?;
                            let t = raw.split('#').next().unwrap_or("").trim();
                            if t == "end" {
                                break;
                            }
                            if t.is_empty() {
                                continue;
                            }
                            let w: Vec<&str> = t.split_whitespace().collect();
                            match w.as_slice() {
                                [from, "->", to, method, path] => shape.push(ShapeLine {
                                    from: from.to_string(),
                                    to: to.to_string(),
                                    method: method.to_string(),
                                    path: path.to_string(),
                                }),
                                _ => {
                                    return Err(ScenarioError::Parse {
                                        line: l,
                                        msg: "shape lines read `from -> to METHOD /path`".into(),
                                    })
                                }
                            }
                        }
                    }
                    sc.steps.push(Step {
                        line,
                        text: body.to_owned(),
                        words,
                        expect,
                        shape,
                    });
                }
            }
        }
        Ok(sc)
    }
}

fn parse_clause(s: &str) -> Option<Clause> {
    let mut c: Clause = s.parse().ok()?;
    c.value = c.value.replace('_', " ");
    Some(c)
}

/// What a finished run leaves behind.
#[derive(Debug)]
pub struct ScenarioRun {
    pub transcript: Transcript,
    pub steps: usize,
}

struct Runner<'a> {
    mesh: Mesh,
    clients: BTreeMap<String, Client>,
    marks: BTreeMap<String, usize>,
    sc: &'a Scenario,
}

fn shape_of(ex: &Exchange) -> ShapeLine {
    ShapeLine {
        from: ex.from.clone(),
        to: ex.to.clone(),
        method: ex.method.clone(),
        path: ex.path().to_owned(),
    }
}

impl Runner<'_> {
    fn client(&mut self, login: &str) -> Result<&mut Client, String> {
        self.clients.get_mut(login).ok_or_else(|| format!("`{login}` is not connected"))
    }

    fn since(&self, mark: &str) -> Result<Vec<Exchange>, String> {
        let from = *self.marks.get(mark).ok_or_else(|| format!("no mark `{mark}`"))?;
        Ok(self.mesh.recorder().since(from))
    }

    fn query_of(words: &[String]) -> Result<Query, String> {
        let clauses = words[3..]
            .iter()
            .map(|c| parse_clause(c).ok_or_else(|| format!("bad clause `{c}`")))
            .collect::<Result<Vec<_>, _>>()?;
        Ok(Query::new(&words[2], clauses))
    }

    /// Run one step; `Ok(Some(v))` carries a value for the expectation.
    fn exec(&mut self, step: &Step) -> Result<Result<Option<Value>, ApiError>, String> {
        let w = &step.words;
        let api = |r: Result<(), ApiError>| Ok(r.map(|_| None));
        match w[0].as_str() {
            "connect" => {
                let r = self.mesh.connect(&w[2], &w[1]);
                Ok(r.map(|c| {
                    self.clients.insert(w[1].clone(), c);
                    None
                }))
            }
            "choose" => {
                let ids: Vec<&String> = w[2..].iter().collect();
                api(self.client(&w[1])?.choose_servers(&ids))
            }
            "page-size" => {
                let n: u32 = w[2].parse().map_err(|_| format!("bad page size `{}`", w[2]))?;
                self.client(&w[1])?.set_page_size(n);
                Ok(Ok(None))
            }
            "open" => Ok(self.client(&w[1])?.open().map(|_| None)),
            "close" => api(self.client(&w[1])?.close()),
            "commit" => api(self.client(&w[1])?.commit()),
            "abort" => api(self.client(&w[1])?.abort()),
            "status" => Ok(self
                .client(&w[1])?
                .is_open()
                .map(|o| Some(Value::Word(if o { "open" } else { "closed" }.into())))),
            "query" => {
                let q = Self::query_of(w)?;
                Ok(self.client(&w[1])?.query_all(&q).map(|v| Some(Value::Number(v.len() as u64))))
            }
            "count" => {
                let q = Self::query_of(w)?;
                Ok(self.client(&w[1])?.count(&q).map(|rs| rs.count.map(Value::Number)))
            }
            "basket" => {
                let now = crate::clock::Clock::now(&*self.mesh.clock);
                let c = self.client(&w[1])?;
                c.create_basket(&w[2], now);
                Ok(c.add_to_basket(&w[2], &w[3..]).map(|n| Some(Value::Number(n as u64))))
            }
            "save" => {
                let c = self.client(&w[1])?;
                if let Some(name) = w.get(2) {
                    c.workspace_mut().name = name.clone();
                }
                api(c.save())
            }
            "load" => Ok(self.client(&w[1])?.load(&w[2]).map(|ws| {
                let items: usize = ws.baskets.iter().map(|b| b.items.len()).sum();
                Some(Value::Number(items as u64))
            })),
            "fetch" => Ok(self
                .client(&w[1])?
                .fetch_resource(&w[2])
                .map(|(_, content)| Some(Value::Number(content.len() as u64)))),
            "clock" => {
                let secs: u64 = w[1]
                    .trim_start_matches('+')
                    .parse()
                    .map_err(|_| format!("bad clock step `{}`", w[1]))?;
                self.mesh.clock.advance(Duration::from_secs(secs));
                Ok(Ok(None))
            }
            "down" | "up" => {
                self.mesh.net.set_reachable(&w[1], w[0] == "up").map_err(|e| e.to_string())?;
                Ok(Ok(None))
            }
            "disconnect" => api(self.mesh.nmu.disconnect_server(MESH_ADMIN, &w[1]).map(drop)),
            "mark" => {
                self.marks.insert(w[1].clone(), self.mesh.recorder().len());
                Ok(Ok(None))
            }
            "expect-shape" => {
                let got: Vec<ShapeLine> = self.since(&w[1])?.iter().map(shape_of).collect();
                if got != step.shape {
                    let show = |v: &[ShapeLine]| v.iter().map(|s| format!("\n    {s}")).collect::<String>();
                    return Err(format!("expected{}\n  got{}", show(&step.shape), show(&got)));
                }
                Ok(Ok(None))
            }
            "expect-tags" => {
                for ex in self.since(&w[1])?.iter().filter(|e| e.is_server_to_server()) {
                    self.check_tag(ex)?;
                }
                Ok(Ok(None))
            }
            "expect-peak" => {
                let max: usize = w[2].parse().map_err(|_| format!("bad bound `{}`", w[2]))?;
                let peak = self.client(&w[1])?.peak_held();
                if peak > max {
                    return Err(format!("client held {peak} entries at once, bound {max}"));
                }
                Ok(Ok(None))
            }
            op => Err(format!("unknown operation `{op}`")),
        }
    }

    /// A forwarded request must name a connected user at its real level,
    /// logged in at the sending server.
    fn check_tag(&self, ex: &Exchange) -> Result<(), String> {
        let raw = ex
            .header(crate::wire::H_IDENT_TAG)
            .ok_or_else(|| format!("#{} {} {} carries no identification tag", ex.seq, ex.method, ex.target))?;
        let tag: crate::server::IdentTag = raw.parse().map_err(|e: ApiError| e.to_string())?;
        let c = self
            .clients
            .get(&tag.user)
            .ok_or_else(|| format!("#{}: tag names unknown user `{}`", ex.seq, tag.user))?;
        if tag.level != c.level() || tag.origin != c.local_sid() || tag.origin != ex.from {
            return Err(format!(
                "#{}: tag `{raw}` but {} is level {} at {}, sent by {}",
                ex.seq,
                tag.user,
                c.level(),
                c.local_sid(),
                ex.from
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Value {
    Number(u64),
    Word(String),
}

fn check(expect: &Expect, got: Result<Option<Value>, ApiError>) -> Result<(), String> {
    match (expect, got) {
        (Expect::Error(code), Err(e)) if e.code == *code => Ok(()),
        (Expect::Error(code), Err(e)) => Err(format!("expected !{code}, got !{}", e.code)),
        (Expect::Error(code), Ok(_)) => Err(format!("expected !{code}, the step succeeded")),
        (_, Err(e)) => Err(format!("unexpected error {e}")),
        (Expect::Ok, Ok(_)) => Ok(()),
        (Expect::Number(n), Ok(Some(Value::Number(m)))) if *n == m => Ok(()),
        (Expect::Word(w), Ok(Some(Value::Word(v)))) if *w == v => Ok(()),
        (e, Ok(v)) => Err(format!("expected {e:?}, got {v:?}")),
    }
}

/// Boot the scenario's mesh and replay its steps.
pub fn run_scenario(sc: &Scenario) -> Result<ScenarioRun, ScenarioError> {
    run_scenario_on(sc, sc.transport)
}

pub fn run_scenario_on(sc: &Scenario, transport: TransportKind) -> Result<ScenarioRun, ScenarioError> {
    let fabric: Arc<dyn Fabric> = match transport {
        TransportKind::Mem => MemNetwork::new(),
        TransportKind::Http => HttpFabric::new(),
    };
    let mut mesh = Mesh::with_fabric(sc.seed, fabric).map_err(|e| ScenarioError::Boot(e.to_string()))?;
    let boot = |e: String| ScenarioError::Boot(e);
    for s in &sc.setup {
        match s {
            Setup::Server { sid, cache, page, timeout } => {
                mesh.try_add_server(sid, |c| {
                    if let Some(n) = cache {
                        c.cache_capacity = *n;
                    }
                    if let Some(n) = page {
                        c.page_size = *n;
                    }
                    if let Some(t) = timeout {
                        c.txn_timeout = Duration::from_secs(*t);
                    }
                })
                .map_err(|e| boot(format!("server {sid}: {e}")))?;
            }
            Setup::User { sid, login, level } => {
                let node = mesh.nodes.get(sid).ok_or_else(|| boot(format!("user {login}: no server `{sid}`")))?;
                let srv = &node.server;
                srv.users()
                    .add_user(srv.rng(), login, login, &[&format!("l{level}")], Default::default())
                    .map_err(|e| boot(format!("user {login}: {e}")))?;
            }
            Setup::Resource { sid, local, lang, category, level, title } => {
                if !mesh.nodes.contains_key(sid) {
                    return Err(boot(format!("resource {local}: no server `{sid}`")));
                }
                mesh.add_resource(sid, local, title, lang, category, *level);
            }
        }
    }
    let mut runner = Runner {
        mesh,
        clients: BTreeMap::new(),
        marks: BTreeMap::new(),
        sc,
    };
    for step in &runner.sc.steps {
        let fail = |diff: String| ScenarioError::Expectation {
            line: step.line,
            step: step.text.clone(),
            diff,
        };
        let got = runner.exec(step).map_err(fail)?;
        check(&step.expect, got).map_err(fail)?;
    }
    Ok(ScenarioRun {
        transcript: runner.mesh.recorder().transcript(),
        steps: runner.sc.steps.len(),
    })
}
