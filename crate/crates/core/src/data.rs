//! Dataset ingestion (LastFM HetRec, Ciao), the 80/10/10 split protocol, and
//! the prepared-dataset cache.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::binio::{check_header, Reader, Writer};
use crate::error::{Error, Result};
use crate::sparse::SparseMatrix;

const CACHE_MAGIC: &[u8; 4] = b"CLSD";
const CACHE_VERSION: u32 = 1;

/// Fraction of all interactions held out for test.
pub const TEST_FRACTION: f64 = 0.2;
/// Fraction of the remaining training pairs held out for validation.
pub const VALIDATION_FRACTION: f64 = 0.1;

/// De-duplicated interactions and friendships with dense ids, before splitting.
#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub name: String,
    /// Raw id of each dense user index, ascending.
    pub user_ids: Vec<u64>,
    /// Raw id of each dense item index, ascending.
    pub item_ids: Vec<u64>,
    /// Sorted, unique `(user, item)` pairs.
    pub interactions: Vec<(usize, usize)>,
    /// Sorted, unique undirected edges stored as `(a, b)` with `a < b`.
    pub social: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Validation,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Validation),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split {other:?} (val, test)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub seed: u64,
    pub user_ids: Vec<u64>,
    pub item_ids: Vec<u64>,
    pub train: Vec<(usize, usize)>,
    pub validation: Vec<(usize, usize)>,
    pub test: Vec<(usize, usize)>,
    pub social: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct DatasetSummary {
    pub dataset: String,
    pub users: usize,
    pub items: usize,
    pub interactions: usize,
    pub social_edges: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub seed: u64,
    pub fingerprint: String,
}

fn parse_id(path: &Path, line: usize, field: &str) -> Result<u64> {
    field.trim().parse().map_err(|_| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: format!("expected an integer id, found {field:?}"),
    })
}

fn split_fields(line: &str) -> Vec<&str> {
    line.split(|c: char| c == '\t' || c == ',' || c.is_whitespace())
        .filter(|f| !f.is_empty())
        .collect()
}

/// Reads rows of at least `min_fields` fields. A first line that does not
/// start with an integer is treated as a header.
fn read_rows(path: &Path, min_fields: usize) -> Result<Vec<(usize, Vec<String>)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
        _ => Error::Io(e),
    })?;
    let mut rows = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        let fields = split_fields(line);
        if fields.is_empty() {
            continue;
        }
        if idx == 0 && fields[0].parse::<u64>().is_err() {
            continue;
        }
        if fields.len() < min_fields {
            return Err(Error::Parse {
                path: path.to_path_buf(),
                line: idx + 1,
                msg: format!("expected at least {min_fields} fields, found {}", fields.len()),
            });
        }
        rows.push((idx + 1, fields.into_iter().map(str::to_owned).collect()));
    }
    Ok(rows)
}

impl Corpus {
    /// Builds dense ids from raw interaction and friendship pairs. The user set
    /// is every user with at least one interaction; friendships touching other
    /// users are dropped.
    pub fn from_raw(name: &str, interactions: &[(u64, u64)], friendships: &[(u64, u64)]) -> Result<Self> {
        if interactions.is_empty() {
            return Err(Error::InvalidInput(format!("{name}: no interactions")));
        }
        let users: BTreeSet<u64> = interactions.iter().map(|p| p.0).collect();
        let items: BTreeSet<u64> = interactions.iter().map(|p| p.1).collect();
        let user_ids: Vec<u64> = users.into_iter().collect();
        let item_ids: Vec<u64> = items.into_iter().collect();
        let user_index: BTreeMap<u64, usize> = user_ids.iter().enumerate().map(|(i, &u)| (u, i)).collect();
        let item_index: BTreeMap<u64, usize> = item_ids.iter().enumerate().map(|(i, &v)| (v, i)).collect();

        let pairs: BTreeSet<(usize, usize)> = interactions
            .iter()
            .map(|(u, i)| (user_index[u], item_index[i]))
            .collect();

        let mut social = BTreeSet::new();
        let mut dropped = 0usize;
        for (a, b) in friendships {
            match (user_index.get(a), user_index.get(b)) {
                (Some(&x), Some(&y)) if x != y => {
                    social.insert((x.min(y), x.max(y)));
                }
                (Some(_), Some(_)) => {}
                _ => dropped += 1,
            }
        }
        if dropped > 0 {
            warn!("{name}: dropped {dropped} social rows referencing users without interactions");
        }
        Ok(Corpus {
            name: name.to_owned(),
            user_ids,
            item_ids,
            interactions: pairs.into_iter().collect(),
            social: social.into_iter().collect(),
        })
    }

    pub fn users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn items(&self) -> usize {
        self.item_ids.len()
    }

    /// Shuffles all pairs under `seed`; the first 80% form the provisional
    /// training set and the rest the test set, then 10% of the provisional
    /// training set (reshuffled) becomes validation.
    pub fn split(self, seed: u64) -> Result<Dataset> {
        let (train, validation, test) = split_pairs(&self.interactions, seed)?;
        let ds = Dataset {
            name: self.name,
            seed,
            user_ids: self.user_ids,
            item_ids: self.item_ids,
            train,
            validation,
            test,
            social: self.social,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// `(train, validation, test)` pair lists.
pub type SplitPairs = (Vec<(usize, usize)>, Vec<(usize, usize)>, Vec<(usize, usize)>);

/// Splits into (train, validation, test) with final proportions 72/8/20.
pub fn split_pairs(pairs: &[(usize, usize)], seed: u64) -> Result<SplitPairs> {
    if pairs.is_empty() {
        return Err(Error::InvalidInput("cannot split an empty interaction list".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut shuffled = pairs.to_vec();
    shuffled.shuffle(&mut rng);
    let n = shuffled.len();
    let n_test = (n as f64 * TEST_FRACTION).round() as usize;
    let test = shuffled.split_off(n - n_test);
    shuffled.shuffle(&mut rng);
    let n_val = (shuffled.len() as f64 * VALIDATION_FRACTION).round() as usize;
    let validation = shuffled.split_off(shuffled.len() - n_val);
    Ok((shuffled, validation, test))
}

/// LastFM HetRec 2011: `user_artists.dat` (userID, artistID, weight) and
/// `user_friends.dat` (userID, friendID). Listen weights are ignored.
pub fn load_lastfm(dir: &Path) -> Result<Corpus> {
    let artists = dir.join("user_artists.dat");
    let friends = dir.join("user_friends.dat");
    let mut interactions = Vec::new();
    for (line, f) in read_rows(&artists, 2)? {
        interactions.push((parse_id(&artists, line, &f[0])?, parse_id(&artists, line, &f[1])?));
    }
    let mut friendships = Vec::new();
    for (line, f) in read_rows(&friends, 2)? {
        friendships.push((parse_id(&friends, line, &f[0])?, parse_id(&friends, line, &f[1])?));
    }
    Corpus::from_raw("lastfm", &interactions, &friendships)
}

/// Ciao: `rating.txt` rows `userID productID ... rating` (rating is the last
/// field) and `trustnetwork.txt` rows `truster trustee`. Ratings at or above
/// `positive_threshold` become positives; trust is symmetrized.
pub fn load_ciao(dir: &Path, positive_threshold: f64) -> Result<Corpus> {
    let ratings = dir.join("rating.txt");
    let trust = dir.join("trustnetwork.txt");
    let mut interactions = Vec::new();
    for (line, f) in read_rows(&ratings, 3)? {
        let user = parse_id(&ratings, line, &f[0])?;
        let item = parse_id(&ratings, line, &f[1])?;
        let last = f.last().unwrap();
        let rating: f64 = last.parse().map_err(|_| Error::Parse {
            path: ratings.clone(),
            line,
            msg: format!("expected a numeric rating, found {last:?}"),
        })?;
        if rating >= positive_threshold {
            interactions.push((user, item));
        }
    }
    let mut friendships = Vec::new();
    for (line, f) in read_rows(&trust, 2)? {
        friendships.push((parse_id(&trust, line, &f[0])?, parse_id(&trust, line, &f[1])?));
    }
    Corpus::from_raw("ciao", &interactions, &friendships)
}

impl Dataset {
    pub fn users(&self) -> usize {
        self.user_ids.len()
    }

    pub fn items(&self) -> usize {
        self.item_ids.len()
    }

    pub fn pairs(&self, split: Split) -> &[(usize, usize)] {
        match split {
            Split::Train => &self.train,
            Split::Validation => &self.validation,
            Split::Test => &self.test,
        }
    }

    pub fn user_index(&self, raw: u64) -> Option<usize> {
        self.user_ids.binary_search(&raw).ok()
    }

    /// Binary user × item matrix of the training split.
    pub fn train_matrix(&self) -> Result<SparseMatrix> {
        SparseMatrix::from_pairs(self.users(), self.items(), &self.train)
    }

    /// Symmetric binary user × user friendship matrix.
    pub fn social_matrix(&self) -> Result<SparseMatrix> {
        let both: Vec<(usize, usize)> = self.social.iter().flat_map(|&(a, b)| [(a, b), (b, a)]).collect();
        SparseMatrix::from_pairs(self.users(), self.users(), &both)
    }

    /// Sorted item lists per user for a split.
    pub fn items_by_user(&self, split: Split) -> Vec<Vec<usize>> {
        let mut out = vec![Vec::new(); self.users()];
        for &(u, i) in self.pairs(split) {
            out[u].push(i);
        }
        out.iter_mut().for_each(|v| v.sort_unstable());
        out
    }

    pub fn train_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.users()];
        self.train.iter().for_each(|&(u, _)| deg[u] += 1);
        deg
    }

    pub fn social_degrees(&self) -> Vec<usize> {
        let mut deg = vec![0; self.users()];
        for &(a, b) in &self.social {
            deg[a] += 1;
            deg[b] += 1;
        }
        deg
    }

    /// Checks id ranges, de-duplication across splits, and edge shape.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        let mut seen = BTreeSet::new();
        for (name, split) in [("train", &self.train), ("val", &self.validation), ("test", &self.test)] {
            for &(u, i) in split.iter() {
                if u >= self.users() || i >= self.items() {
                    problems.push(format!("{name} pair ({u}, {i}) out of range"));
                } else if !seen.insert((u, i)) {
                    problems.push(format!("{name} pair ({u}, {i}) duplicated"));
                }
            }
        }
        let mut edges = BTreeSet::new();
        for &(a, b) in &self.social {
            if a >= b || b >= self.users() {
                problems.push(format!("social edge ({a}, {b}) is not a valid undirected edge"));
            } else if !edges.insert((a, b)) {
                problems.push(format!("social edge ({a}, {b}) duplicated"));
            }
        }
        if !self.user_ids.windows(2).all(|w| w[0] < w[1]) || !self.item_ids.windows(2).all(|w| w[0] < w[1]) {
            problems.push("raw id maps are not strictly ascending".into());
        }
        if problems.is_empty() {
            return Ok(());
        }
        let shown: Vec<_> = problems.iter().take(20).cloned().collect();
        Err(Error::InvalidInput(format!(
            "dataset validation failed ({} problems): {}",
            problems.len(),
            shown.join("; ")
        )))
    }

    fn content_bytes(&self, w: &mut Writer) {
        w.u64s(&self.user_ids);
        w.u64s(&self.item_ids);
        w.pairs(&self.train);
        w.pairs(&self.validation);
        w.pairs(&self.test);
        w.pairs(&self.social);
    }

    /// SHA-256 of the id maps, splits, and social edges.
    pub fn fingerprint(&self) -> String {
        let mut w = Writer::new();
        self.content_bytes(&mut w);
        let bytes = w.finish();
        let digest = Sha256::digest(&bytes[..bytes.len() - crate::binio::DIGEST_LEN]);
        digest.iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn summary(&self) -> DatasetSummary {
        DatasetSummary {
            dataset: self.name.clone(),
            users: self.users(),
            items: self.items(),
            interactions: self.train.len() + self.validation.len() + self.test.len(),
            social_edges: self.social.len(),
            train: self.train.len(),
            val: self.validation.len(),
            test: self.test.len(),
            seed: self.seed,
            fingerprint: self.fingerprint(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(CACHE_MAGIC);
        w.u32(CACHE_VERSION);
        w.str(&self.name);
        w.u64(self.seed);
        self.content_bytes(&mut w);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        check_header(data, CACHE_MAGIC, CACHE_VERSION, "dataset cache")?;
        let mut r = Reader::open(data, "dataset cache")?;
        r.take(8, "header")?;
        let ds = Dataset {
            name: r.str("name")?,
            seed: r.u64("seed")?,
            user_ids: r.u64s("user ids")?,
            item_ids: r.u64s("item ids")?,
            train: r.pairs("train")?,
            validation: r.pairs("validation")?,
            test: r.pairs("test")?,
            social: r.pairs("social")?,
        };
        if r.remaining() != 0 {
            return Err(Error::Corrupt(format!(
                "dataset cache: {} trailing bytes",
                r.remaining()
            )));
        }
        ds.validate()?;
        Ok(ds)
    }

    /// Writes the binary cache to `path` and the JSON summary next to it
    /// (`<path>.json`).
    pub fn save(&self, path: &Path) -> Result<PathBuf> {
        fs::write(path, self.to_bytes())?;
        let summary_path = summary_path(path);
        fs::write(&summary_path, serde_json::to_string_pretty(&self.summary())? + "\n")?;
        Ok(summary_path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let data = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingFile(path.to_path_buf()),
            _ => Error::Io(e),
        })?;
        Self::from_bytes(&data)
    }
}

pub fn summary_path(cache: &Path) -> PathBuf {
    let mut name = cache.as_os_str().to_owned();
    name.push(".json");
    PathBuf::from(name)
}
