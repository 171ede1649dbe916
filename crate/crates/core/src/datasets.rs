//! Known corpora: default label names (in class-id order) and epoch counts.

use std::fmt;
use std::str::FromStr;

use crate::error::Error;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Dataset {
    AgNews,
    DbPedia,
    Yahoo,
    YelpPolarity,
    YelpFull,
}

impl Dataset {
    pub const ALL: [Dataset; 5] = [
        Dataset::AgNews,
        Dataset::DbPedia,
        Dataset::Yahoo,
        Dataset::YelpPolarity,
        Dataset::YelpFull,
    ];

    pub fn default_labels(self) -> Vec<&'static str> {
        match self {
            Dataset::AgNews => vec!["world", "sports", "business", "sci tech"],
            Dataset::DbPedia => vec![
                "company",
                "educational institution",
                "artist",
                "athlete",
                "office holder",
                "mean of transportation",
                "building",
                "natural place",
                "village",
                "animal",
                "plant",
                "album",
                "film",
                "written work",
            ],
            Dataset::Yahoo => vec![
                "society culture",
                "science mathematics",
                "health",
                "education reference",
                "computers internet",
                "sports",
                "business finance",
                "entertainment music",
                "family relationships",
                "politics government",
            ],
            Dataset::YelpPolarity => vec!["negative", "positive"],
            Dataset::YelpFull => vec!["bad", "poor", "fair", "good", "excellent"],
        }
    }

    pub fn default_epochs(self) -> usize {
        match self {
            Dataset::AgNews => 2,
            Dataset::DbPedia => 3,
            Dataset::Yahoo => 2,
            Dataset::YelpPolarity => 5,
            Dataset::YelpFull => 5,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Dataset::AgNews => "agnews",
            Dataset::DbPedia => "dbpedia",
            Dataset::Yahoo => "yahoo",
            Dataset::YelpPolarity => "yelpp",
            Dataset::YelpFull => "yelpf",
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Dataset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Error> {
        let key: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match key.as_str() {
            "agnews" | "ag" => Ok(Dataset::AgNews),
            "dbpedia" => Ok(Dataset::DbPedia),
            "yahoo" | "yahooanswers" => Ok(Dataset::Yahoo),
            "yelpp" | "yelppolarity" => Ok(Dataset::YelpPolarity),
            "yelpf" | "yelpfull" => Ok(Dataset::YelpFull),
            _ => Err(Error::InvalidArgument(format!(
                "unknown dataset {s:?} (expected agnews, dbpedia, yahoo, yelpp or yelpf)"
            ))),
        }
    }
}
