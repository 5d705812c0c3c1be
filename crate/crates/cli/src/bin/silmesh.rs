use std::path::PathBuf;
use std::process::ExitCode;
use std::sync::Arc;
use std::time::Duration;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use silmesh::auth::{SecretHash, SecureRng};
use silmesh::client::Client;
use silmesh::harness::{run_scenario_on, Scenario, TransportKind, TOUR};
use silmesh::http::HttpTransport;
use silmesh::nmu::NmuClient;
use silmesh::server::{LevelMap, UserDb};
use silmesh::service::{run_nmu, run_server, user_store, NmuBoot, ServerBoot};
use silmesh::sil::{Clause, Query, ServerProfile, ServerState, UserInfo};

#[derive(Parser)]
#[command(name = "silmesh", version, about = "Registry, resource servers and client for a federated resource network")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the network master (registry)
    Nmu(NmuArgs),
    /// Run a resource server
    Server(ServerArgs),
    /// Registry administration
    Admin(AdminArgs),
    /// Add or replace a user in a server's state directory
    Adduser(AdduserArgs),
    /// Talk to a server as a user
    Client(ClientArgs),
    /// Replay scenario scripts
    Scenario {
        #[command(subcommand)]
        cmd: ScenarioCmd,
    },
    /// Print a salted hash of a secret, for NMU_ADMIN_HASH
    HashSecret { secret: String },
}

#[derive(Args)]
struct NmuArgs {
    #[arg(long, env = "NMU_BIND", default_value = "127.0.0.1:7700")]
    bind: String,
    /// Output of `silmesh hash-secret`
    #[arg(long, env = "NMU_ADMIN_HASH")]
    admin_hash: String,
    #[arg(long, env = "NMU_STATE_DIR")]
    state_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    threads: usize,
}

#[derive(Args)]
struct ServerArgs {
    #[arg(long, env = "SRV_SID")]
    sid: String,
    #[arg(long, env = "SRV_BIND", default_value = "127.0.0.1:7701")]
    bind: String,
    #[arg(long, env = "SRV_NMU_URL")]
    nmu_url: Option<String>,
    /// Idle seconds before a transaction closes
    #[arg(long, env = "SRV_TIMEOUT_S", default_value_t = 300)]
    timeout_s: u64,
    #[arg(long, env = "SRV_STATE_DIR")]
    state_dir: Option<PathBuf>,
    /// Directory of resource files; defaults to `catalog` under the state directory
    #[arg(long, env = "SRV_CATALOG_DIR")]
    catalog_dir: Option<PathBuf>,
    /// TOML file mapping groups to levels
    #[arg(long, env = "SRV_LEVELS")]
    levels: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    threads: usize,
}

#[derive(Args)]
struct AdminArgs {
    #[arg(long, env = "SRV_NMU_URL", default_value = "http://127.0.0.1:7700")]
    nmu_url: String,
    #[arg(long, env = "NMU_ADMIN", hide_env_values = true)]
    secret: String,
    #[command(subcommand)]
    cmd: AdminCmd,
}

#[derive(Args)]
struct ProfileArgs {
    #[arg(long = "lang")]
    languages: Vec<String>,
    #[arg(long = "category")]
    categories: Vec<String>,
    #[arg(long)]
    description: Option<String>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Status {
    Online,
    Offline,
}

#[derive(Subcommand)]
enum AdminCmd {
    Register {
        name: String,
        url: String,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    Update {
        name: String,
        #[arg(long)]
        url: Option<String>,
        #[arg(long)]
        status: Option<Status>,
        #[command(flatten)]
        profile: ProfileArgs,
    },
    Disconnect {
        name: String,
    },
    List {
        #[arg(long)]
        all: bool,
    },
    LastPush,
}

#[derive(Args)]
struct AdduserArgs {
    #[arg(long, env = "SRV_STATE_DIR")]
    state_dir: PathBuf,
    #[arg(long, env = "SRV_SID")]
    sid: String,
    login: String,
    #[arg(long, env = "SIL_PASSWORD", hide_env_values = true)]
    password: String,
    #[arg(long = "group")]
    groups: Vec<String>,
}

#[derive(Args)]
struct ClientArgs {
    #[arg(long, env = "SIL_URL", default_value = "http://127.0.0.1:7701")]
    url: String,
    #[arg(long, env = "SIL_LOGIN")]
    login: String,
    #[arg(long, env = "SIL_PASSWORD", hide_env_values = true)]
    password: String,
    #[command(subcommand)]
    cmd: ClientCmd,
}

#[derive(Subcommand)]
enum ClientCmd {
    /// Servers this session may query
    Servers,
    /// Run a query and print every result, one per line
    Query {
        /// Filters such as `language=fr` or `title~rose`
        #[arg(required = true)]
        filters: Vec<String>,
        /// Servers to query; the local one when omitted
        #[arg(long = "server")]
        servers: Vec<String>,
        #[arg(long)]
        page: Option<u32>,
    },
    /// Count matches without fetching them
    Count {
        #[arg(required = true)]
        filters: Vec<String>,
        #[arg(long = "server")]
        servers: Vec<String>,
    },
    /// Fetch a resource's content
    Fetch {
        uri: String,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a saved workspace
    Workspace { name: String },
}

#[derive(Subcommand)]
enum ScenarioCmd {
    /// Run a scenario file, or the bundled `tour`
    Run {
        script: String,
        #[arg(long)]
        transport: Option<Transport>,
        /// Write the canonical transcript here
        #[arg(long)]
        transcript: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Transport {
    Mem,
    Http,
}

fn nmu(args: NmuArgs) -> Result<()> {
    let admin: SecretHash = args
        .admin_hash
        .parse()
        .map_err(|_| anyhow::anyhow!("NMU_ADMIN_HASH is not a `silmesh hash-secret` value"))?;
    let running = run_nmu(NmuBoot {
        bind: args.bind,
        admin,
        state_dir: args.state_dir,
        threads: args.threads,
    })?;
    println!("nmu listening on {}", running.url());
    let _running = running;
    park_forever()
}

fn server(args: ServerArgs) -> Result<()> {
    let levels = match &args.levels {
        Some(p) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            LevelMap::from_toml(&text).with_context(|| format!("parsing {}", p.display()))?
        }
        None => LevelMap::default(),
    };
    let catalog_dir = args
        .catalog_dir
        .or_else(|| args.state_dir.as_ref().map(|d| d.join("catalog")).filter(|d| d.is_dir()));
    let running = run_server(ServerBoot {
        nmu_url: args.nmu_url,
        txn_timeout: Duration::from_secs(args.timeout_s),
        state_dir: args.state_dir,
        catalog_dir,
        levels,
        threads: args.threads,
        ..ServerBoot::new(&args.sid, &args.bind)
    })?;
    let mode = if running.server.is_degraded() { " (degraded until the registry lists this server)" } else { "" };
    println!("{} listening on {}{mode}", args.sid, running.url());
    let _running = running;
    park_forever()
}

/// Services run on their own threads until the process is signalled.
fn park_forever() -> ! {
    loop {
        std::thread::park();
    }
}

fn print_record(r: &silmesh::sil::ServerRecord) {
    println!(
        "{}\t{}\t{}\t{}\t{}",
        r.name,
        r.url,
        r.status,
        r.profile.languages.join(","),
        r.profile.categories.join(",")
    );
}

fn profile_of(p: ProfileArgs) -> ServerProfile {
    ServerProfile {
        languages: p.languages,
        categories: p.categories,
        description: p.description.unwrap_or_default(),
    }
}

fn admin(args: AdminArgs) -> Result<()> {
    let nmu = NmuClient::new(Arc::new(HttpTransport::default()), args.nmu_url);
    let secret = args.secret.as_str();
    match args.cmd {
        AdminCmd::Register { name, url, profile } => print_record(&nmu.register(secret, &name, &url, profile_of(profile))?),
        AdminCmd::Update { name, url, status, profile } => {
            let mut rec = nmu
                .list_as_admin(secret, true)?
                .into_iter()
                .find(|r| r.name == name)
                .with_context(|| format!("no server named `{name}`"))?;
            if let Some(u) = url {
                rec.url = u;
            }
            if let Some(s) = status {
                rec.status = match s {
                    Status::Online => ServerState::Online,
                    Status::Offline => ServerState::Offline,
                };
            }
            if !profile.languages.is_empty() {
                rec.profile.languages = profile.languages;
            }
            if !profile.categories.is_empty() {
                rec.profile.categories = profile.categories;
            }
            if let Some(d) = profile.description {
                rec.profile.description = d;
            }
            print_record(&nmu.update(secret, &name, &rec)?);
        }
        AdminCmd::Disconnect { name } => print_record(&nmu.disconnect(secret, &name)?),
        AdminCmd::List { all } => nmu.list_as_admin(secret, all)?.iter().for_each(print_record),
        AdminCmd::LastPush => {
            for d in nmu.last_push(secret)?.deliveries {
                println!("{}\t{}\t{}", d.sid, d.outcome, d.attempts);
            }
        }
    }
    Ok(())
}

fn adduser(args: AdduserArgs) -> Result<()> {
    let db = UserDb::new(&args.sid, user_store(Some(&args.state_dir))?);
    let groups: Vec<&str> = args.groups.iter().map(String::as_str).collect();
    db.add_user(&SecureRng::from_entropy(), &args.login, &args.password, &groups, UserInfo::default())?;
    println!("{} added to {}", args.login, args.sid);
    Ok(())
}

fn query_of(filters: &[String]) -> Result<Query> {
    let clauses = filters
        .iter()
        .map(|f| f.parse::<Clause>().map_err(anyhow::Error::msg))
        .collect::<Result<Vec<_>>>()?;
    Ok(Query::new("q1", clauses))
}

fn client(args: ClientArgs) -> Result<()> {
    let mut c = Client::connect(Arc::new(HttpTransport::default()), &args.url, &args.login, &args.password)?;
    let choose = |c: &mut Client, servers: &[String]| -> Result<()> {
        if servers.is_empty() {
            let local = c.local_sid().to_owned();
            c.choose_servers(&[local])?;
        } else {
            c.choose_servers(servers)?;
        }
        Ok(())
    };
    match args.cmd {
        ClientCmd::Servers => {
            for s in c.choosable_servers() {
                println!("{s}");
            }
        }
        ClientCmd::Query { filters, servers, page } => {
            choose(&mut c, &servers)?;
            if let Some(n) = page {
                c.set_page_size(n);
            }
            let q = query_of(&filters)?;
            let mut failed = Vec::new();
            for p in c.query(&q)? {
                let p = p?;
                for e in &p.entries {
                    println!("{}\t{}\t{}\t{}\t{}", e.uri, e.title, e.language, e.category, e.required_level);
                }
                if p.done {
                    failed = p.statuses.into_iter().filter(|s| s.reason.is_some()).collect();
                }
            }
            for s in failed {
                eprintln!("{}: {}", s.sid, s.reason.unwrap_or_default());
            }
            c.close()?;
        }
        ClientCmd::Count { filters, servers } => {
            choose(&mut c, &servers)?;
            let rs = c.count(&query_of(&filters)?)?;
            println!("{}", rs.count.unwrap_or(0));
            c.close()?;
        }
        ClientCmd::Fetch { uri, out } => {
            let (_, content) = c.fetch_resource(&uri)?;
            match out {
                Some(p) => std::fs::write(&p, content).with_context(|| format!("writing {}", p.display()))?,
                None => std::io::Write::write_all(&mut std::io::stdout(), &content)?,
            }
        }
        ClientCmd::Workspace { name } => {
            let ws = c.load(&name)?;
            println!("servers\t{}", ws.servers.join(","));
            for b in &ws.baskets {
                println!("basket\t{}\t{}", b.name, b.items.join(","));
            }
            for q in &ws.queries {
                println!("query\t{}", q.id);
            }
        }
    }
    Ok(())
}

fn scenario(cmd: ScenarioCmd) -> Result<ExitCode> {
    let ScenarioCmd::Run { script, transport, transcript } = cmd;
    let text = if script == "tour" {
        TOUR.to_owned()
    } else {
        match std::fs::read_to_string(&script) {
            Ok(t) => t,
            Err(e) => {
                eprintln!("{script}: {e}");
                return Ok(ExitCode::from(3));
            }
        }
    };
    let outcome = Scenario::parse(&text).and_then(|sc| {
        let kind = match transport {
            Some(Transport::Mem) => TransportKind::Mem,
            Some(Transport::Http) => TransportKind::Http,
            None => sc.transport,
        };
        run_scenario_on(&sc, kind)
    });
    match outcome {
        Ok(run) => {
            if let Some(p) = transcript {
                std::fs::write(&p, run.transcript.to_xml()).with_context(|| format!("writing {}", p.display()))?;
            }
            println!("ok: {} steps, {} messages", run.steps, run.transcript.exchanges.len());
            Ok(ExitCode::SUCCESS)
        }
        Err(e) => {
            eprintln!("{e}");
            Ok(ExitCode::from(e.exit_code() as u8))
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.cmd {
        Cmd::Nmu(a) => nmu(a).map(|_| ExitCode::SUCCESS),
        Cmd::Server(a) => server(a).map(|_| ExitCode::SUCCESS),
        Cmd::Admin(a) => admin(a).map(|_| ExitCode::SUCCESS),
        Cmd::Adduser(a) => adduser(a).map(|_| ExitCode::SUCCESS),
        Cmd::Client(a) => client(a).map(|_| ExitCode::SUCCESS),
        Cmd::Scenario { cmd } => scenario(cmd),
        Cmd::HashSecret { secret } => {
            println!("{}", SecretHash::new(&SecureRng::from_entropy(), &secret));
            Ok(ExitCode::SUCCESS)
        }
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<silmesh::service::BootError>().is_some() {
                ExitCode::from(3)
            } else {
                ExitCode::FAILURE
            }
        }
    }
}
