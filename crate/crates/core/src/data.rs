//! Interaction logs, user profiles, warm/cold splitting and a synthetic
//! attribute-driven log generator.

use std::collections::{BTreeSet, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed;

/// Literal marking a missing attribute value in the profiles file.
pub const MISSING: &str = "?";

/// Time-ordered item sequences per user, with dense indices for both
/// users and items (in order of first appearance).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct InteractionLog {
    pub user_ids: Vec<String>,
    pub item_ids: Vec<String>,
    pub sequences: Vec<Vec<usize>>,
    pub timestamps: Vec<Vec<i64>>,
}

impl InteractionLog {
    pub fn num_users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn num_items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn num_records(&self) -> usize {
        self.sequences.iter().map(Vec::len).sum()
    }

    pub fn user_index(&self) -> HashMap<&str, usize> {
        self.user_ids.iter().enumerate().map(|(i, u)| (u.as_str(), i)).collect()
    }

    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut users: HashMap<String, usize> = HashMap::new();
        let mut items: HashMap<String, usize> = HashMap::new();
        let mut log = InteractionLog::default();
        let mut rows: Vec<Vec<(i64, usize)>> = Vec::new();
        let mut seen: HashSet<(usize, usize, i64)> = HashSet::new();
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                message,
            };
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(parse_err(format!("expected 3 tab-separated fields, found {}", fields.len())));
            }
            if fields[0].is_empty() || fields[1].is_empty() {
                return Err(parse_err("empty user or item id".into()));
            }
            let ts: i64 = fields[2]
                .trim()
                .parse()
                .map_err(|_| parse_err(format!("timestamp {:?} is not an integer", fields[2])))?;
            let u = *users.entry(fields[0].to_string()).or_insert_with(|| {
                log.user_ids.push(fields[0].to_string());
                rows.push(Vec::new());
                log.user_ids.len() - 1
            });
            let i = *items.entry(fields[1].to_string()).or_insert_with(|| {
                log.item_ids.push(fields[1].to_string());
                log.item_ids.len() - 1
            });
            if seen.insert((u, i, ts)) {
                rows[u].push((ts, i));
            }
        }
        for mut r in rows {
            // Stable: equal timestamps keep file order.
            r.sort_by_key(|&(ts, _)| ts);
            log.timestamps.push(r.iter().map(|&(ts, _)| ts).collect());
            log.sequences.push(r.into_iter().map(|(_, i)| i).collect());
        }
        Ok(log)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (u, seq) in self.sequences.iter().enumerate() {
            for (k, &i) in seq.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}", self.user_ids[u], self.item_ids[i], self.timestamps[u][k]);
            }
        }
        out
    }
}

/// Categorical user attributes. Values are dense per attribute; `None`
/// is missing and maps to the reserved index `vocab_size(a)`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Profiles {
    pub attr_values: Vec<Vec<String>>,
    pub values: Vec<Vec<Option<usize>>>,
}

impl Profiles {
    pub fn num_attrs(&self) -> usize {
        self.attr_values.len()
    }

    /// Observed vocabulary size per attribute, excluding the missing slot.
    pub fn vocab_sizes(&self) -> Vec<usize> {
        self.attr_values.iter().map(Vec::len).collect()
    }

    pub fn user(&self, u: usize) -> &[Option<usize>] {
        &self.values[u]
    }

    /// Embedding-table row for attribute `a` of user `u`.
    pub fn index(&self, u: usize, a: usize) -> usize {
        self.values[u][a].unwrap_or(self.attr_values[a].len())
    }

    pub fn parse(text: &str, path: &Path, log: &InteractionLog) -> Result<Self> {
        let index = log.user_index();
        let mut raw: Vec<Option<Vec<String>>> = vec![None; log.num_users()];
        let mut m: Option<usize> = None;
        let mut unknown = 0usize;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim_end_matches('\r');
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            let parse_err = |message: String| Error::Parse {
                path: path.to_path_buf(),
                line: ln + 1,
                message,
            };
            if fields.len() < 2 {
                return Err(parse_err("expected a user id and at least one attribute".into()));
            }
            let width = fields.len() - 1;
            match m {
                None => m = Some(width),
                Some(w) if w != width => {
                    return Err(parse_err(format!("expected {w} attributes, found {width}")));
                }
                _ => {}
            }
            match index.get(fields[0]) {
                Some(&u) => {
                    if raw[u].is_some() {
                        return Err(parse_err(format!("duplicate profile for user {}", fields[0])));
                    }
                    raw[u] = Some(fields[1..].iter().map(|s| s.to_string()).collect());
                }
                None => unknown += 1,
            }
        }
        if unknown > 0 {
            log::warn!("{unknown} profile rows name users absent from the interaction log");
        }
        let m = m.unwrap_or(0);
        let mut vocab: Vec<BTreeSet<&str>> = vec![BTreeSet::new(); m];
        for row in raw.iter().flatten() {
            for (a, v) in row.iter().enumerate() {
                if v != MISSING {
                    vocab[a].insert(v);
                }
            }
        }
        let attr_values: Vec<Vec<String>> = vocab
            .iter()
            .map(|s| s.iter().map(|v| v.to_string()).collect())
            .collect();
        let lookup: Vec<HashMap<&str, usize>> = attr_values
            .iter()
            .map(|vals| vals.iter().enumerate().map(|(i, v)| (v.as_str(), i)).collect())
            .collect();
        let values = raw
            .iter()
            .map(|row| match row {
                Some(row) => row.iter().enumerate().map(|(a, v)| lookup[a].get(v.as_str()).copied()).collect(),
                None => vec![None; m],
            })
            .collect();
        Ok(Self { attr_values, values })
    }

    pub fn load(path: &Path, log: &InteractionLog) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path, log)
    }

    /// Profiles with zero attributes for every user.
    pub fn empty(num_users: usize) -> Self {
        Self {
            attr_values: Vec::new(),
            values: vec![Vec::new(); num_users],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub log: InteractionLog,
    pub profiles: Profiles,
}

impl Dataset {
    pub fn load(interactions: &Path, profiles: Option<&Path>) -> Result<Self> {
        let log = InteractionLog::load(interactions)?;
        let profiles = match profiles {
            Some(p) => Profiles::load(p, &log)?,
            None => Profiles::empty(log.num_users()),
        };
        Ok(Self { log, profiles })
    }

    pub fn num_items(&self) -> usize {
        self.log.num_items()
    }

    pub fn sequence(&self, u: usize) -> &[usize] {
        &self.log.sequences[u]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Assignment {
    Warm,
    ColdTrain,
    ColdTest,
}

impl Assignment {
    pub fn as_str(self) -> &'static str {
        match self {
            Assignment::Warm => "warm",
            Assignment::ColdTrain => "cold-train",
            Assignment::ColdTest => "cold-test",
        }
    }
}

/// User-level partition into the pre-training corpus and the cold-user
/// tuning/test sets.
#[derive(Debug, Clone, PartialEq)]
pub struct Splits {
    pub warm: Vec<usize>,
    pub cold_train: Vec<usize>,
    pub cold_test: Vec<usize>,
    pub threshold: usize,
    pub train_ratio: f64,
    pub seed: u64,
}

/// Users with fewer than `threshold` clicks are cold.
pub fn split_warm_cold(sequences: &[Vec<usize>], threshold: usize) -> (Vec<usize>, Vec<usize>) {
    (0..sequences.len()).partition(|&u| sequences[u].len() >= threshold)
}

/// Seeded user-level split; the first `⌊ratio·k⌋` shuffled users train.
pub fn split_cold_train_test(cold: &[usize], ratio: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if cold.len() < 2 {
        return Err(Error::data(format!("need at least 2 cold users, found {}", cold.len())));
    }
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::config(format!("train ratio must be in [0,1], got {ratio}")));
    }
    let mut users = cold.to_vec();
    users.shuffle(&mut seed::rng(seed, &[0x5eed]));
    let n_train = (ratio * users.len() as f64).floor() as usize;
    let mut test = users.split_off(n_train);
    users.sort_unstable();
    test.sort_unstable();
    Ok((users, test))
}

impl Splits {
    pub fn new(log: &InteractionLog, threshold: usize, train_ratio: f64, seed: u64) -> Result<Self> {
        if log.num_users() == 0 {
            return Err(Error::data("interaction log is empty"));
        }
        let (warm, cold) = split_warm_cold(&log.sequences, threshold);
        let (cold_train, cold_test) = split_cold_train_test(&cold, train_ratio, seed)?;
        Ok(Self {
            warm,
            cold_train,
            cold_test,
            threshold,
            train_ratio,
            seed,
        })
    }

    pub fn assignment(&self, num_users: usize) -> Vec<Option<Assignment>> {
        let mut out = vec![None; num_users];
        for (set, a) in [
            (&self.warm, Assignment::Warm),
            (&self.cold_train, Assignment::ColdTrain),
            (&self.cold_test, Assignment::ColdTest),
        ] {
            for &u in set {
                out[u] = Some(a);
            }
        }
        out
    }

    /// Audit listing: one `user<TAB>assignment` line per user.
    pub fn manifest(&self, log: &InteractionLog) -> String {
        let mut out = format!(
            "# seed={} threshold={} train_ratio={}\n",
            self.seed, self.threshold, self.train_ratio
        );
        for (u, a) in self.assignment(log.num_users()).into_iter().enumerate() {
            if let Some(a) = a {
                let _ = writeln!(out, "{}\t{}", log.user_ids[u], a.as_str());
            }
        }
        out
    }
}

/// One ranking target: predict `sequence[prefix]` from `sequence[..prefix]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Target {
    pub user: usize,
    pub prefix: usize,
    pub item: usize,
}

/// First clicks become zero-shot targets, every later click a few-shot
/// target whose input is the user's preceding clicks.
pub fn extract_zero_shot(sequences: &[Vec<usize>], users: &[usize]) -> (Vec<Target>, Vec<Target>) {
    let mut zero = Vec::new();
    let mut few = Vec::new();
    for &u in users {
        let seq = &sequences[u];
        if let Some(&first) = seq.first() {
            zero.push(Target {
                user: u,
                prefix: 0,
                item: first,
            });
        }
        for (p, &item) in seq.iter().enumerate().skip(1) {
            few.push(Target { user: u, prefix: p, item });
        }
    }
    (zero, few)
}

/// Keeps each user's first `k` clicks.
pub fn crop_for_kshot(sequences: &[Vec<usize>], k: usize) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::config("k must be at least 1"));
    }
    Ok(sequences.iter().map(|s| s[..s.len().min(k)].to_vec()).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub warm_users: usize,
    pub cold_users: usize,
    pub num_items: usize,
    /// Vocabulary of the cluster-within-half attribute. The other two
    /// attributes are binary: cluster half and walk direction.
    pub groups: usize,
    pub warm_len: (usize, usize),
    pub cold_len: (usize, usize),
    /// Probability that a click follows the user's in-cluster walk rather
    /// than landing on a uniformly random item.
    pub concentration: f64,
    /// Probability of a two-item step in the walk.
    pub long_step: f64,
    pub missing_rate: f64,
    pub seed: u64,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            warm_users: 2000,
            cold_users: 500,
            num_items: 300,
            groups: 6,
            warm_len: (10, 20),
            cold_len: (1, 9),
            concentration: 0.9,
            long_step: 0.3,
            missing_rate: 0.0,
            seed: 7,
        }
    }
}

/// Latent preference of a generated user.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Latent {
    pub half: usize,
    pub group: usize,
    pub direction: usize,
}

impl Latent {
    pub fn cluster(&self, groups: usize) -> usize {
        self.half * groups + self.group
    }

    pub fn attrs(&self) -> [usize; 3] {
        [self.half, self.group, self.direction]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticUser {
    pub id: String,
    pub latent: Latent,
    /// Profile as written; `None` where the value was blanked as missing.
    pub profile: [Option<usize>; 3],
    pub items: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticData {
    pub item_prefix: String,
    pub num_items: usize,
    pub groups: usize,
    pub users: Vec<SyntheticUser>,
}

/// Item layout: `2·groups` clusters of equal size occupy the low item ids;
/// leftover ids only appear as noise clicks.
fn cluster_size(num_items: usize, groups: usize) -> Result<usize> {
    let clusters = 2 * groups;
    if groups == 0 || num_items / clusters < 3 {
        return Err(Error::config(format!(
            "{num_items} items cannot hold {clusters} clusters of at least 3 items"
        )));
    }
    Ok(num_items / clusters)
}

fn walk<R: Rng + ?Sized>(
    rng: &mut R,
    latent: Latent,
    len: usize,
    num_items: usize,
    groups: usize,
    concentration: f64,
    long_step: f64,
) -> Result<Vec<usize>> {
    let size = cluster_size(num_items, groups)?;
    let base = latent.cluster(groups) * size;
    let mut pos = rng.gen_range(0..size);
    let mut out = Vec::with_capacity(len);
    for _ in 0..len {
        if rng.gen_bool(concentration) {
            out.push(base + pos);
            let step = if rng.gen_bool(long_step) { 2 } else { 1 };
            pos = if latent.direction == 1 {
                (pos + step) % size
            } else {
                (pos + size - step) % size
            };
        } else {
            out.push(rng.gen_range(0..num_items));
        }
    }
    Ok(out)
}

fn check_len(range: (usize, usize), what: &str) -> Result<()> {
    if range.0 == 0 || range.0 > range.1 {
        return Err(Error::config(format!("invalid {what} length range {range:?}")));
    }
    Ok(())
}

fn check_prob(p: f64, what: &str) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::config(format!("{what} must be in [0,1], got {p}")));
    }
    Ok(())
}

fn random_latent<R: Rng + ?Sized>(rng: &mut R, groups: usize) -> Latent {
    Latent {
        half: rng.gen_range(0..2),
        group: rng.gen_range(0..groups),
        direction: rng.gen_range(0..2),
    }
}

fn blank<R: Rng + ?Sized>(rng: &mut R, attrs: [usize; 3], rate: f64) -> [Option<usize>; 3] {
    attrs.map(|v| if rate > 0.0 && rng.gen_bool(rate) { None } else { Some(v) })
}

pub fn generate_synthetic(cfg: &SyntheticConfig) -> Result<SyntheticData> {
    check_len(cfg.warm_len, "warm")?;
    check_len(cfg.cold_len, "cold")?;
    check_prob(cfg.concentration, "concentration")?;
    check_prob(cfg.long_step, "long_step")?;
    check_prob(cfg.missing_rate, "missing_rate")?;
    cluster_size(cfg.num_items, cfg.groups)?;
    let mut rng = seed::rng(cfg.seed, &[0x6e6]);
    let total = cfg.warm_users + cfg.cold_users;
    let mut users = Vec::with_capacity(total);
    for n in 0..total {
        let latent = random_latent(&mut rng, cfg.groups);
        let (lo, hi) = if n < cfg.warm_users { cfg.warm_len } else { cfg.cold_len };
        let len = rng.gen_range(lo..=hi);
        let items = walk(&mut rng, latent, len, cfg.num_items, cfg.groups, cfg.concentration, cfg.long_step)?;
        let profile = blank(&mut rng, latent.attrs(), cfg.missing_rate);
        users.push(SyntheticUser {
            id: format!("u{n}"),
            latent,
            profile,
            items,
        });
    }
    Ok(SyntheticData {
        item_prefix: "i".into(),
        num_items: cfg.num_items,
        groups: cfg.groups,
        users,
    })
}

impl SyntheticData {
    pub fn item_id(&self, i: usize) -> String {
        format!("{}{i}", self.item_prefix)
    }

    pub fn interactions_text(&self) -> String {
        let mut out = String::new();
        for (n, u) in self.users.iter().enumerate() {
            let t0 = 1_600_000_000 + 100_000 * n as i64;
            for (k, &i) in u.items.iter().enumerate() {
                let _ = writeln!(out, "{}\t{}\t{}", u.id, self.item_id(i), t0 + 60 * k as i64);
            }
        }
        out
    }

    pub fn profiles_text(&self) -> String {
        let mut out = String::new();
        for u in &self.users {
            out.push_str(&u.id);
            for v in u.profile {
                out.push('\t');
                match v {
                    Some(v) => {
                        let _ = write!(out, "{v}");
                    }
                    None => out.push_str(MISSING),
                }
            }
            out.push('\n');
        }
        out
    }

    /// Writes `<stem>interactions.tsv` and `<stem>profiles.tsv` into `dir`.
    pub fn write(&self, dir: &Path, stem: &str) -> Result<(PathBuf, PathBuf)> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let inter = dir.join(format!("{stem}interactions.tsv"));
        let prof = dir.join(format!("{stem}profiles.tsv"));
        fs::write(&inter, self.interactions_text()).map_err(|e| Error::io(&inter, e))?;
        fs::write(&prof, self.profiles_text()).map_err(|e| Error::io(&prof, e))?;
        Ok((inter, prof))
    }

    /// Loads the in-memory data through the same parser as files.
    pub fn to_dataset(&self) -> Result<Dataset> {
        let path = Path::new("<synthetic>");
        let log = InteractionLog::parse(&self.interactions_text(), path)?;
        let profiles = Profiles::parse(&self.profiles_text(), path, &log)?;
        Ok(Dataset { log, profiles })
    }

    /// Mean fraction of a user's clicks falling in the user's own cluster.
    pub fn cluster_purity(&self) -> f64 {
        let size = self.num_items / (2 * self.groups);
        let mut total = 0.0;
        let mut n = 0;
        for u in &self.users {
            if u.items.is_empty() {
                continue;
            }
            let c = u.latent.cluster(self.groups);
            let own = u.items.iter().filter(|&&i| i / size == c && i < 2 * self.groups * size).count();
            total += own as f64 / u.items.len() as f64;
            n += 1;
        }
        if n == 0 {
            0.0
        } else {
            total / n as f64
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainConfig {
    pub source: SyntheticConfig,
    /// Source users that also appear in the target domain.
    pub target_users: usize,
    /// Extra target users with no source history.
    pub target_only_users: usize,
    pub target_items: usize,
    pub target_len: (usize, usize),
}

impl Default for CrossDomainConfig {
    fn default() -> Self {
        Self {
            source: SyntheticConfig {
                cold_users: 0,
                ..SyntheticConfig::default()
            },
            target_users: 600,
            target_only_users: 0,
            target_items: 240,
            target_len: (1, 9),
        }
    }
}

/// Two domains with overlapping users and disjoint items; a user's target
/// behavior follows the same latent preference as in the source.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossDomainData {
    pub source: SyntheticData,
    pub target: SyntheticData,
}

pub fn generate_cross_domain(cfg: &CrossDomainConfig) -> Result<CrossDomainData> {
    let source = generate_synthetic(&cfg.source)?;
    check_len(cfg.target_len, "target")?;
    cluster_size(cfg.target_items, cfg.source.groups)?;
    if cfg.target_users > source.users.len() {
        return Err(Error::config(format!(
            "target_users {} exceeds the {} source users",
            cfg.target_users,
            source.users.len()
        )));
    }
    let mut rng = seed::rng(cfg.source.seed, &[0x7a9]);
    let mut users = Vec::with_capacity(cfg.target_users + cfg.target_only_users);
    let shared = source.users.iter().take(cfg.target_users).map(|u| (u.id.clone(), u.latent));
    let fresh: Vec<(String, Latent)> = (0..cfg.target_only_users)
        .map(|n| (format!("x{n}"), random_latent(&mut rng, cfg.source.groups)))
        .collect();
    for (id, latent) in shared.chain(fresh) {
        let len = rng.gen_range(cfg.target_len.0..=cfg.target_len.1);
        let items = walk(
            &mut rng,
            latent,
            len,
            cfg.target_items,
            cfg.source.groups,
            cfg.source.concentration,
            cfg.source.long_step,
        )?;
        let profile = blank(&mut rng, latent.attrs(), cfg.source.missing_rate);
        users.push(SyntheticUser {
            id,
            latent,
            profile,
            items,
        });
    }
    let target = SyntheticData {
        item_prefix: "t".into(),
        num_items: cfg.target_items,
        groups: cfg.source.groups,
        users,
    };
    Ok(CrossDomainData { source, target })
}

/// Fails when the two logs share any item id.
pub fn check_disjoint_items(a: &InteractionLog, b: &InteractionLog) -> Result<()> {
    let ids: HashSet<&str> = a.item_ids.iter().map(String::as_str).collect();
    let shared = b.item_ids.iter().filter(|i| ids.contains(i.as_str())).count();
    if shared > 0 {
        return Err(Error::data(format!(
            "source and target domains share {shared} item ids"
        )));
    }
    Ok(())
}
