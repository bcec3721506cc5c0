//! MovieLens rating ingestion and seeded train/test splitting.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

/// On-disk layout of a ratings file.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataFormat {
    /// `ratings.csv` from MovieLens Small: header, then `userId,movieId,rating,timestamp`.
    CsvSmall,
    /// `ratings.dat` from MovieLens 1M: `UserID::MovieID::Rating::Timestamp`, no header.
    Dat1m,
}

impl DataFormat {
    fn separator(self) -> &'static str {
        match self {
            DataFormat::CsvSmall => ",",
            DataFormat::Dat1m => "::",
        }
    }

    fn has_header(self) -> bool {
        matches!(self, DataFormat::CsvSmall)
    }
}

impl FromStr for DataFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv-small" | "csv_small" | "csv" => Ok(DataFormat::CsvSmall),
            "dat-1m" | "dat_1m" | "dat" => Ok(DataFormat::Dat1m),
            other => Err(Error::Config(format!("unknown dataset format `{other}`"))),
        }
    }
}

/// One observed rating, addressed by contiguous indices.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rating {
    pub user: usize,
    pub item: usize,
    pub value: f64,
}

/// Bijection between external ids and contiguous indices, in first-appearance order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct IdMap {
    index: HashMap<u64, usize>,
    ids: Vec<u64>,
}

impl IdMap {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns the index for `id`, assigning the next free one on first sight.
    pub fn intern(&mut self, id: u64) -> usize {
        let next = self.ids.len();
        *self.index.entry(id).or_insert_with(|| {
            self.ids.push(id);
            next
        })
    }

    pub fn index_of(&self, id: u64) -> Option<usize> {
        self.index.get(&id).copied()
    }

    pub fn id_of(&self, index: usize) -> Option<u64> {
        self.ids.get(index).copied()
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

/// Sparse user-item ratings with contiguous indices.
///
/// Datasets produced by [`split_dataset`] share the parent's id maps and
/// `r_max`, so models sized from either side address the same index space.
#[derive(Debug, Clone, PartialEq)]
pub struct RatingsDataset {
    ratings: Vec<Rating>,
    users: Arc<IdMap>,
    items: Arc<IdMap>,
    r_max: f64,
    duplicates: usize,
}

impl RatingsDataset {
    /// Builds a dataset from `(user_id, item_id, rating)` triples with external ids.
    ///
    /// A repeated `(user, item)` pair keeps the last rating and is counted in
    /// [`RatingsDataset::duplicates`].
    pub fn from_triples<I>(triples: I) -> Result<Self>
    where
        I: IntoIterator<Item = (u64, u64, f64)>,
    {
        let mut builder = Builder::default();
        for (line, (user, item, value)) in triples.into_iter().enumerate() {
            builder.push(line + 1, user, item, value)?;
        }
        builder.finish()
    }

    pub fn ratings(&self) -> &[Rating] {
        &self.ratings
    }

    pub fn len(&self) -> usize {
        self.ratings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ratings.is_empty()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn num_items(&self) -> usize {
        self.items.len()
    }

    pub fn r_max(&self) -> f64 {
        self.r_max
    }

    pub fn user_ids(&self) -> &IdMap {
        &self.users
    }

    pub fn item_ids(&self) -> &IdMap {
        &self.items
    }

    /// Number of duplicate `(user, item)` lines overwritten during loading.
    pub fn duplicates(&self) -> usize {
        self.duplicates
    }

    pub fn mean_rating(&self) -> Option<f64> {
        if self.ratings.is_empty() {
            return None;
        }
        Some(self.ratings.iter().map(|r| r.value).sum::<f64>() / self.ratings.len() as f64)
    }

    /// A dataset over the same index space holding only `ratings`.
    pub fn with_ratings(&self, ratings: Vec<Rating>) -> Self {
        RatingsDataset {
            ratings,
            users: Arc::clone(&self.users),
            items: Arc::clone(&self.items),
            r_max: self.r_max,
            duplicates: 0,
        }
    }
}

#[derive(Default)]
struct Builder {
    ratings: Vec<Rating>,
    seen: HashMap<(usize, usize), usize>,
    users: IdMap,
    items: IdMap,
    duplicates: usize,
}

impl Builder {
    fn push(&mut self, line: usize, user: u64, item: u64, value: f64) -> Result<()> {
        if !value.is_finite() || value <= 0.0 {
            return Err(Error::Parse {
                line,
                message: format!("rating must be a positive finite number, got {value}"),
            });
        }
        let user = self.users.intern(user);
        let item = self.items.intern(item);
        match self.seen.get(&(user, item)) {
            Some(&pos) => {
                self.ratings[pos].value = value;
                self.duplicates += 1;
            }
            None => {
                self.seen.insert((user, item), self.ratings.len());
                self.ratings.push(Rating { user, item, value });
            }
        }
        Ok(())
    }

    fn finish(self) -> Result<RatingsDataset> {
        if self.ratings.is_empty() {
            return Err(Error::EmptyDataset);
        }
        if self.duplicates > 0 {
            log::warn!(
                "{} duplicate (user, item) ratings overwritten by later lines",
                self.duplicates
            );
        }
        let r_max = self
            .ratings
            .iter()
            .map(|r| r.value)
            .fold(f64::NEG_INFINITY, f64::max);
        Ok(RatingsDataset {
            ratings: self.ratings,
            users: Arc::new(self.users),
            items: Arc::new(self.items),
            r_max,
            duplicates: self.duplicates,
        })
    }
}

/// Loads a MovieLens ratings file.
pub fn load_movielens(path: impl AsRef<Path>, format: DataFormat) -> Result<RatingsDataset> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_movielens(BufReader::new(file), format).map_err(|e| match e {
        Error::Io { source, .. } => Error::io(path, source),
        other => other,
    })
}

/// Parses MovieLens ratings from any buffered reader.
pub fn read_movielens<R: BufRead>(reader: R, format: DataFormat) -> Result<RatingsDataset> {
    let sep = format.separator();
    let mut builder = Builder::default();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io("<reader>", e))?;
        if idx == 0 && format.has_header() {
            continue;
        }
        let line = line.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let mut fields = line.split(sep);
        let mut next = |name: &str| {
            fields.next().map(str::trim).ok_or_else(|| Error::Parse {
                line: line_no,
                message: format!("missing field `{name}`"),
            })
        };
        let user = parse_field::<u64>(next("user")?, "user", line_no)?;
        let item = parse_field::<u64>(next("item")?, "item", line_no)?;
        let value = parse_field::<f64>(next("rating")?, "rating", line_no)?;
        // timestamp is required by both layouts but otherwise ignored
        next("timestamp")?;
        builder.push(line_no, user, item, value)?;
    }
    builder.finish()
}

fn parse_field<T: FromStr>(raw: &str, name: &str, line: usize) -> Result<T> {
    raw.parse().map_err(|_| Error::Parse {
        line,
        message: format!("invalid {name} `{raw}`"),
    })
}

/// Disjoint train/test partition of a dataset.
#[derive(Debug, Clone)]
pub struct Split {
    pub train: RatingsDataset,
    pub test: RatingsDataset,
    pub seed: u64,
    pub ratio: f64,
}

/// Assigns each rating to train with probability `ratio`, independently and
/// reproducibly for a fixed `seed`.
pub fn split_dataset(ds: &RatingsDataset, ratio: f64, seed: u64) -> Result<Split> {
    if !(ratio > 0.0 && ratio < 1.0) {
        return Err(Error::Config(format!(
            "split ratio must lie in (0, 1), got {ratio}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (train, test): (Vec<Rating>, Vec<Rating>) =
        ds.ratings.iter().partition(|_| rng.random_bool(ratio));
    Ok(Split {
        train: ds.with_ratings(train),
        test: ds.with_ratings(test),
        seed,
        ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn csv(body: &str) -> Result<RatingsDataset> {
        let text = format!("userId,movieId,rating,timestamp\n{body}");
        read_movielens(text.as_bytes(), DataFormat::CsvSmall)
    }

    #[test]
    fn two_line_csv() {
        let ds = csv("1,10,4.0,0\n2,10,5.0,0\n").unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 1);
        assert_eq!(ds.r_max(), 5.0);
        assert_eq!(ds.len(), 2);
    }

    #[test]
    fn dat_layout_and_first_appearance_order() {
        let text = "7::300::3::978300760\n5::200::5::978302109\n7::200::4::978301968\n";
        let ds = read_movielens(text.as_bytes(), DataFormat::Dat1m).unwrap();
        assert_eq!(ds.num_users(), 2);
        assert_eq!(ds.num_items(), 2);
        assert_eq!(ds.user_ids().id_of(0), Some(7));
        assert_eq!(ds.item_ids().id_of(1), Some(200));
        assert_eq!(
            ds.ratings()[2],
            Rating {
                user: 0,
                item: 1,
                value: 4.0
            }
        );
    }

    #[test]
    fn half_star_r_max() {
        let ds = csv("1,1,0.5,0\n1,2,3.5,0\n").unwrap();
        assert_eq!(ds.r_max(), 3.5);
    }

    #[test]
    fn malformed_line_reports_line_number() {
        match csv("1,10,4.0,0\n2,abc,5.0,0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
        match csv("1,10,4.0\n") {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert!(matches!(csv("1,10,0,0\n"), Err(Error::Parse { .. })));
    }

    #[test]
    fn empty_inputs() {
        assert!(matches!(csv(""), Err(Error::EmptyDataset)));
        assert!(matches!(
            read_movielens(&b""[..], DataFormat::Dat1m),
            Err(Error::EmptyDataset)
        ));
    }

    #[test]
    fn duplicates_keep_last() {
        let ds = csv("1,10,4.0,0\n1,10,2.0,1\n").unwrap();
        assert_eq!(ds.len(), 1);
        assert_eq!(ds.duplicates(), 1);
        assert_eq!(ds.ratings()[0].value, 2.0);
    }

    #[test]
    fn split_rejects_bad_ratio() {
        let ds = csv("1,10,4.0,0\n").unwrap();
        for ratio in [0.0, 1.0, -0.5, 1.5, f64::NAN] {
            assert!(matches!(
                split_dataset(&ds, ratio, 1),
                Err(Error::Config(_))
            ));
        }
    }

    fn synthetic(n: usize) -> RatingsDataset {
        RatingsDataset::from_triples((0..n as u64).map(|t| (t % 37, t / 37, 1.0 + (t % 5) as f64)))
            .unwrap()
    }

    #[test]
    fn split_is_deterministic() {
        let ds = synthetic(500);
        let a = split_dataset(&ds, 0.9, 7).unwrap();
        let b = split_dataset(&ds, 0.9, 7).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.test, b.test);
        let c = split_dataset(&ds, 0.9, 8).unwrap();
        assert_ne!(a.train.ratings(), c.train.ratings());
    }

    #[test]
    fn split_size_within_binomial_bound() {
        // Binomial(1000, 0.9): sd = sqrt(90) ~ 9.49, so [850, 950] is beyond 5 sd.
        let ds = synthetic(1000);
        for seed in 0..20 {
            let split = split_dataset(&ds, 0.9, seed).unwrap();
            let n = split.train.len();
            assert!((850..=950).contains(&n), "seed {seed}: train size {n}");
        }
    }

    #[test]
    fn id_map_round_trip() {
        let ds = csv("42,7,4.0,0\n3,9,5.0,0\n42,9,1.0,0\n").unwrap();
        for idx in 0..ds.num_users() {
            let id = ds.user_ids().id_of(idx).unwrap();
            assert_eq!(ds.user_ids().index_of(id), Some(idx));
        }
        for idx in 0..ds.num_items() {
            let id = ds.item_ids().id_of(idx).unwrap();
            assert_eq!(ds.item_ids().index_of(id), Some(idx));
        }
    }

    proptest! {
        #[test]
        fn split_partitions_ratings(n in 1usize..400, ratio in 0.01f64..0.99, seed: u64) {
            let ds = synthetic(n);
            let split = split_dataset(&ds, ratio, seed).unwrap();
            prop_assert_eq!(split.train.len() + split.test.len(), ds.len());
            let mut all: Vec<(usize, usize)> = split
                .train
                .ratings()
                .iter()
                .chain(split.test.ratings())
                .map(|r| (r.user, r.item))
                .collect();
            all.sort_unstable();
            let mut orig: Vec<(usize, usize)> = ds.ratings().iter().map(|r| (r.user, r.item)).collect();
            orig.sort_unstable();
            prop_assert_eq!(all, orig);
        }

        #[test]
        fn reloading_is_stable(rows in proptest::collection::vec((0u64..20, 0u64..30, 1u8..=10), 1..60)) {
            let body: String = rows
                .iter()
                .map(|(u, i, r)| format!("{u},{i},{},0\n", *r as f64 / 2.0))
                .collect();
            let a = csv(&body).unwrap();
            let b = csv(&body).unwrap();
            prop_assert_eq!(a, b);
        }
    }
}
