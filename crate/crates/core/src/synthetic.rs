//! Seeded generator for transaction-style datasets with a planted label.
//!
//! A user's label shifts which of two category groups their "signal" events
//! come from. The groups' descriptions are pairwise anagrams ("melon night" /
//! "lemon thing"), so the byte histogram of a history carries no label
//! information and a model has to read the words to separate the classes.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{load_dataset, Dataset, DatasetError};
use crate::schema::{Dictionaries, SchemaConfig, SchemaError};

const GROUP_A: [(&str, &str); 4] =
    [("5970", "melon night"), ("5971", "stone heart"), ("5972", "dusty canoe"), ("5973", "angel cider")];
const GROUP_B: [(&str, &str); 4] =
    [("5980", "lemon thing"), ("5981", "notes earth"), ("5982", "study ocean"), ("5983", "glean cried")];

const NEUTRAL_ALPHA: [(&str, &str); 5] = [
    ("5411", "Grocery Stores, Supermarkets"),
    ("5814", "Fast Food"),
    ("5541", "Service Stations"),
    ("5912", "Drug Stores"),
    ("6011", "Financial Institutions"),
];
const NEUTRAL_BETA: [(&str, &str); 5] = [
    ("4111", "Commuter Transport"),
    ("5812", "Restaurants"),
    ("5311", "Department Stores"),
    ("4814", "Telecommunication Services"),
    ("5999", "Miscellaneous Retail"),
];

const TYPES: [(&str, &str); 4] = [("1", "Point of Sale"), ("2", "Deposit"), ("3", "Transfer"), ("4", "Withdrawal")];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Flavor {
    Alpha,
    Beta,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub name: String,
    pub n_users: usize,
    pub events_min: usize,
    pub events_max: usize,
    /// Chance that an event is drawn from the signal groups.
    pub signal_rate: f64,
    /// Chance that a signal event of a positive user comes from group A
    /// (negative users use one minus this).
    pub signal_purity: f64,
    /// Share of users that get a label.
    pub labeled_fraction: f64,
    pub flavor: Flavor,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            name: "synthetic".into(),
            n_users: 50,
            events_min: 6,
            events_max: 10,
            signal_rate: 0.8,
            signal_purity: 0.95,
            labeled_fraction: 1.0,
            flavor: Flavor::Alpha,
            seed: 0,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error(transparent)]
    Io(#[from] io::Error),
    #[error(transparent)]
    Schema(#[from] SchemaError),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// File locations of a generated dataset.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SynthPaths {
    pub schema: PathBuf,
    pub events: PathBuf,
    pub labels: PathBuf,
}

impl SynthPaths {
    pub fn in_dir(dir: &Path) -> Self {
        Self { schema: dir.join("schema.toml"), events: dir.join("events.csv"), labels: dir.join("labels.csv") }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let err = |m: &str| Err(SynthError::Config(m.to_string()));
        if self.n_users == 0 {
            return err("n_users must be positive");
        }
        if self.events_min == 0 || self.events_min > self.events_max {
            return err("need 1 <= events_min <= events_max");
        }
        for (name, p) in [
            ("signal_rate", self.signal_rate),
            ("signal_purity", self.signal_purity),
            ("labeled_fraction", self.labeled_fraction),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        Ok(())
    }

    fn neutral(&self) -> &'static [(&'static str, &'static str)] {
        match self.flavor {
            Flavor::Alpha => &NEUTRAL_ALPHA,
            Flavor::Beta => &NEUTRAL_BETA,
        }
    }

    fn user_prefix(&self) -> &'static str {
        match self.flavor {
            Flavor::Alpha => "a",
            Flavor::Beta => "b",
        }
    }
}

const SCHEMA_TOML: &str = r#"schema_version = 1
timestamp_field = "date"
task = "binary"

[[fields]]
name = "date"
kind = "timestamp"

[[fields]]
name = "amount"
kind = "numeric"
unit = "rubles"

[[fields]]
name = "mcc"
kind = "categorical"
dictionary = "mcc"

[[fields]]
name = "type"
kind = "categorical"
dictionary = "type"

[dictionaries]
mcc = "mcc.csv"
type = "types.csv"
"#;

fn write_dictionary(
    path: &Path,
    entries: impl IntoIterator<Item = (&'static str, &'static str)>,
) -> Result<(), SynthError> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(["code", "description"])?;
    for (code, description) in entries {
        w.write_record([code, description])?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `schema.toml`, `events.csv`, `labels.csv` and the two dictionaries
/// into `dir`. Output depends only on `config`.
pub fn write_synthetic(dir: &Path, config: &SynthConfig) -> Result<SynthPaths, SynthError> {
    config.validate()?;
    fs::create_dir_all(dir)?;
    let paths = SynthPaths::in_dir(dir);
    fs::write(&paths.schema, SCHEMA_TOML)?;
    write_dictionary(&dir.join("mcc.csv"), config.neutral().iter().chain(&GROUP_A).chain(&GROUP_B).copied())?;
    write_dictionary(&dir.join("types.csv"), TYPES)?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut events = csv::Writer::from_path(&paths.events)?;
    let mut labels = csv::Writer::from_path(&paths.labels)?;
    events.write_record(["user_id", "date", "amount", "mcc", "type"])?;
    labels.write_record(["user_id", "label"])?;
    let neutral = config.neutral();
    let width = (config.n_users - 1).to_string().len();
    for u in 0..config.n_users {
        let user_id = format!("{}{u:0width$}", config.user_prefix());
        let positive = rng.random_bool(0.5);
        let from_a = if positive { config.signal_purity } else { 1.0 - config.signal_purity };
        let n = rng.random_range(config.events_min..=config.events_max);
        let mut day: u64 = rng.random_range(17_000..17_400);
        for _ in 0..n {
            day += rng.random_range(0..4);
            let (code, _) = if rng.random_bool(config.signal_rate) {
                let slot = rng.random_range(0..GROUP_A.len());
                if rng.random_bool(from_a) {
                    GROUP_A[slot]
                } else {
                    GROUP_B[slot]
                }
            } else {
                neutral[rng.random_range(0..neutral.len())]
            };
            let kind = TYPES[rng.random_range(0..TYPES.len())].0;
            let cents: u64 = rng.random_range(100..50_000);
            let amount = format!("{}.{:02}", cents / 100, cents % 100);
            events.write_record([user_id.as_str(), &day.to_string(), &amount, code, kind])?;
        }
        if rng.random_bool(config.labeled_fraction) {
            labels.write_record([user_id.as_str(), if positive { "1" } else { "0" }])?;
        }
    }
    events.flush()?;
    labels.flush()?;
    Ok(paths)
}

/// Loads a dataset previously written by [`write_synthetic`].
pub fn load_synthetic(dir: &Path, name: &str) -> Result<(Dataset, Dictionaries), SynthError> {
    let paths = SynthPaths::in_dir(dir);
    let config = SchemaConfig::load(&paths.schema)?;
    let mut dataset = load_dataset(&paths.events, Some(&paths.labels), &config)?;
    dataset.name = name.to_string();
    Ok((dataset, config.dictionaries))
}
