//! Interaction logs, embedding tables, topic maps and their file formats,
//! plus per-user subsampling and user-level splits.

mod retrieval;
mod synthetic;

pub use retrieval::{history_query, retrieve_candidates, RetrievalConfig, ScoredItem};
pub use synthetic::{generate_synthetic, GroundTruth, SyntheticConfig, SyntheticData};

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::needs::format_f64_17;
use crate::ranking::{ItemId, UserId};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignalKind {
    #[default]
    WatchRatio,
    Rating,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub user_id: UserId,
    pub item_id: ItemId,
    pub timestamp: i64,
    pub signal_kind: SignalKind,
    pub signal_value: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct InteractionLog {
    pub records: Vec<Interaction>,
}

pub const LOG_HEADER: [&str; 5] = ["user_id", "item_id", "timestamp", "signal_kind", "signal_value"];

impl InteractionLog {
    pub fn new(records: Vec<Interaction>) -> Result<Self> {
        let log = Self { records };
        log.validate()?;
        Ok(log)
    }

    pub fn validate(&self) -> Result<()> {
        let mut kind = None;
        for r in &self.records {
            if r.timestamp < 0 {
                return Err(Error::InvalidArgument(format!("negative timestamp {}", r.timestamp)));
            }
            if !r.signal_value.is_finite() {
                return Err(Error::NonFinite("signal_value"));
            }
            match kind {
                None => kind = Some(r.signal_kind),
                Some(k) if k != r.signal_kind => {
                    return Err(Error::InvalidArgument("mixed signal kinds in one log".into()))
                }
                _ => {}
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn signal_kind(&self) -> SignalKind {
        self.records.first().map(|r| r.signal_kind).unwrap_or_default()
    }

    pub fn users(&self) -> BTreeSet<UserId> {
        self.records.iter().map(|r| r.user_id).collect()
    }

    /// Record indices per user, in log order.
    pub fn by_user(&self) -> BTreeMap<UserId, Vec<usize>> {
        let mut out: BTreeMap<UserId, Vec<usize>> = BTreeMap::new();
        for (idx, r) in self.records.iter().enumerate() {
            out.entry(r.user_id).or_default().push(idx);
        }
        out
    }

    pub fn filter_users(&self, users: &BTreeSet<UserId>) -> Self {
        Self {
            records: self
                .records
                .iter()
                .filter(|r| users.contains(&r.user_id))
                .copied()
                .collect(),
        }
    }

    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::WriterBuilder::new()
            .has_headers(false)
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(out);
        w.write_record(LOG_HEADER)?;
        for r in &self.records {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, path: &Path) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
        let header = rdr.headers()?.clone();
        if header.iter().ne(LOG_HEADER.iter().copied()) {
            return Err(Error::Parse {
                path: path.into(),
                line: 1,
                message: format!("expected header {}", LOG_HEADER.join(",")),
            });
        }
        let mut records = Vec::new();
        for row in rdr.deserialize::<Interaction>() {
            let r = row.map_err(|e| Error::Parse {
                path: path.into(),
                line: e.position().map_or(0, |p| p.line()),
                message: e.to_string(),
            })?;
            records.push(r);
        }
        Self::new(records)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let f = fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(f))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::read_csv(BufReader::new(fs::File::open(path)?), path)
    }
}

/// Unit-norm item vectors of one shared dimension.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EmbeddingTable {
    pub dim: usize,
    pub vectors: BTreeMap<ItemId, Vec<f64>>,
}

fn normalized(mut v: Vec<f64>) -> Result<Vec<f64>> {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if !(norm > 0.0) || !norm.is_finite() {
        return Err(Error::InvalidArgument("embedding has zero or non-finite norm".into()));
    }
    // leave already-unit vectors bit-identical so save/load round-trips
    if (norm - 1.0).abs() > 1e-12 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    Ok(v)
}

impl EmbeddingTable {
    pub fn new(dim: usize, vectors: BTreeMap<ItemId, Vec<f64>>) -> Result<Self> {
        let mut out = BTreeMap::new();
        for (item, v) in vectors {
            if v.len() != dim {
                return Err(Error::Dimension(format!(
                    "item {item}: expected {dim} components, got {}",
                    v.len()
                )));
            }
            out.insert(item, normalized(v)?);
        }
        Ok(Self { dim, vectors: out })
    }

    pub fn get(&self, item: ItemId) -> Result<&[f64]> {
        self.vectors
            .get(&item)
            .map(Vec::as_slice)
            .ok_or(Error::MissingEmbedding(item.0))
    }

    pub fn items(&self) -> impl Iterator<Item = ItemId> + '_ {
        self.vectors.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.vectors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vectors.is_empty()
    }

    pub fn to_text(&self) -> String {
        let mut out = format!("dim={}\n", self.dim);
        for (item, v) in &self.vectors {
            let _ = write!(out, "{item}");
            for x in v {
                let _ = write!(out, "\t{}", format_f64_17(*x));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_reader<R: BufRead>(input: R, path: &Path) -> Result<Self> {
        let bad = |line: usize, message: String| Error::Parse {
            path: path.into(),
            line: line as u64,
            message,
        };
        let mut lines = input.lines();
        let first = lines.next().ok_or_else(|| bad(1, "missing dim= header".into()))??;
        let dim: usize = first
            .strip_prefix("dim=")
            .ok_or_else(|| bad(1, "missing dim= header".into()))?
            .trim()
            .parse()
            .map_err(|e| bad(1, format!("dim: {e}")))?;
        let mut vectors = BTreeMap::new();
        for (idx, line) in lines.enumerate() {
            let line = line?;
            let lineno = idx + 2;
            if line.is_empty() {
                continue;
            }
            let mut fields = line.split('\t');
            let item: u32 = fields
                .next()
                .unwrap_or_default()
                .parse()
                .map_err(|e| bad(lineno, format!("item id: {e}")))?;
            let v: Vec<f64> = fields
                .map(|f| f.parse::<f64>().map_err(|e| bad(lineno, format!("component: {e}"))))
                .collect::<Result<_>>()?;
            if v.len() != dim {
                return Err(bad(lineno, format!("expected {dim} components, got {}", v.len())));
            }
            vectors.insert(ItemId(item), normalized(v).map_err(|e| bad(lineno, e.to_string()))?);
        }
        Ok(Self { dim, vectors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_reader(BufReader::new(fs::File::open(path)?), path)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Topic labels per item.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TopicMap {
    topics: BTreeMap<ItemId, BTreeSet<String>>,
}

impl TopicMap {
    pub fn insert(&mut self, item: ItemId, topics: BTreeSet<String>) {
        self.topics.insert(item, topics);
    }

    pub fn topics_of(&self, item: ItemId) -> &BTreeSet<String> {
        static EMPTY: BTreeSet<String> = BTreeSet::new();
        self.topics.get(&item).unwrap_or(&EMPTY)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (item, t) in &self.topics {
            let joined: Vec<&str> = t.iter().map(String::as_str).collect();
            let _ = writeln!(out, "{item}\t{}", joined.join(","));
        }
        out
    }

    pub fn from_text(text: &str, path: &Path) -> Result<Self> {
        let mut map = TopicMap::default();
        for (idx, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let bad = |message: String| Error::Parse {
                path: path.into(),
                line: idx as u64 + 1,
                message,
            };
            let (item, rest) = line.split_once('\t').unwrap_or((line, ""));
            let item: u32 = item.parse().map_err(|e| bad(format!("item id: {e}")))?;
            let topics = rest
                .split(',')
                .filter(|s| !s.is_empty())
                .map(str::to_string)
                .collect();
            map.insert(ItemId(item), topics);
        }
        Ok(map)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&fs::read_to_string(path)?, path)
    }
}

/// Keeps `ceil(fraction * n_u)` uniformly chosen records of every user,
/// preserving log order.
pub fn subsample_per_user<R: Rng + ?Sized>(log: &InteractionLog, fraction: f64, rng: &mut R) -> Result<InteractionLog> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let mut keep = Vec::new();
    for idxs in log.by_user().values() {
        let n = idxs.len();
        let k = ((fraction * n as f64) - 1e-9).ceil().clamp(0.0, n as f64) as usize;
        let chosen = rand::seq::index::sample(rng, n, k);
        keep.extend(chosen.iter().map(|c| idxs[c]));
    }
    keep.sort_unstable();
    Ok(InteractionLog {
        records: keep.into_iter().map(|i| log.records[i]).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct UserSplit {
    pub train: BTreeSet<UserId>,
    pub val: BTreeSet<UserId>,
    pub test: BTreeSet<UserId>,
}

impl UserSplit {
    pub fn apply(&self, log: &InteractionLog) -> (InteractionLog, InteractionLog, InteractionLog) {
        (
            log.filter_users(&self.train),
            log.filter_users(&self.val),
            log.filter_users(&self.test),
        )
    }
}

/// Partitions users into train/validation/test with group sizes rounded
/// from `ratios`; the test split takes the remainder.
pub fn split_users<R: Rng + ?Sized>(users: &BTreeSet<UserId>, ratios: (f64, f64, f64), rng: &mut R) -> Result<UserSplit> {
    let (a, b, c) = ratios;
    if a < 0.0 || b < 0.0 || c < 0.0 || ((a + b + c) - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument(format!("split ratios {ratios:?} must be nonnegative and sum to 1")));
    }
    let mut order: Vec<UserId> = users.iter().copied().collect();
    order.shuffle(rng);
    let n = order.len();
    let n_train = ((a * n as f64).round() as usize).min(n);
    let n_val = ((b * n as f64).round() as usize).min(n - n_train);
    Ok(UserSplit {
        train: order[..n_train].iter().copied().collect(),
        val: order[n_train..n_train + n_val].iter().copied().collect(),
        test: order[n_train + n_val..].iter().copied().collect(),
    })
}
