//! Seeded generators for gold-labeled person, organization, and date names.

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{tokenize, Corpus, CorpusError, LabelSchema, Mention, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SyntheticKind {
    Person,
    Org,
    Date,
}

impl std::str::FromStr for SyntheticKind {
    type Err = CorpusError;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "person" | "per" => Ok(Self::Person),
            "org" | "organization" => Ok(Self::Org),
            "date" => Ok(Self::Date),
            _ => Err(CorpusError::UnknownKind(s.to_string())),
        }
    }
}

impl SyntheticKind {
    pub fn schema(self) -> LabelSchema {
        let components: &[&str] = match self {
            Self::Person => &["title", "first", "middle", "last", "suffix", "degree"],
            Self::Org => &["corename", "type", "suffix", "location"],
            Self::Date => &["MonthOfYear", "Day", "Year", "tok", "NumericDate"],
        };
        LabelSchema::with_components(components.iter().copied()).expect("built-in schema is valid")
    }

    fn templates(self) -> &'static [Template] {
        match self {
            Self::Person => PERSON_TEMPLATES,
            Self::Org => ORG_TEMPLATES,
            Self::Date => DATE_TEMPLATES,
        }
    }

    pub fn template_count(self) -> usize {
        self.templates().len()
    }
}

/// Produces a raw mention and one label name per token.
type Template = fn(&mut ChaCha8Rng) -> (String, Vec<&'static str>);

/// Generates `n` gold-labeled mentions. Identical arguments give identical corpora.
pub fn gen_synthetic(kind: SyntheticKind, n: usize, seed: u64) -> Result<Corpus> {
    let (corpus, _) = gen_with_templates(kind, n, seed)?;
    Ok(corpus)
}

/// Like [`gen_synthetic`], also returning the template index used per mention.
pub fn gen_with_templates(kind: SyntheticKind, n: usize, seed: u64) -> Result<(Corpus, Vec<usize>)> {
    if n == 0 {
        return Err(CorpusError::EmptyRequest);
    }
    let schema = kind.schema();
    let templates = kind.templates();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let width = n.to_string().len();
    let mut mentions = Vec::with_capacity(n);
    let mut used = Vec::with_capacity(n);
    for i in 0..n {
        let t = rng.random_range(0..templates.len());
        let (raw, names) = templates[t](&mut rng);
        let tokens = tokenize(&raw)?;
        let names: Vec<String> = names.into_iter().map(String::from).collect();
        let labels = schema.resolve(&names, tokens.len()).map_err(|e| {
            CorpusError::Schema(format!("template {t} produced {raw:?}: {e}"))
        })?;
        mentions.push(Mention {
            id: format!("{kind:?}-{i:0width$}").to_lowercase(),
            raw,
            tokens,
            labels: Some(labels),
        });
        used.push(t);
    }
    Ok((Corpus::new(schema, mentions)?, used))
}

fn pick<'a>(rng: &mut ChaCha8Rng, items: &'a [&'a str]) -> &'a str {
    items.choose(rng).expect("non-empty word list")
}

const FIRST: &[&str] = &[
    "Liat", "Hagop", "Michael", "Mary", "James", "Linda", "Robert", "Patricia", "John", "Jennifer",
    "David", "Elizabeth", "William", "Barbara", "Richard", "Susan", "Joseph", "Jessica", "Thomas",
    "Sarah", "Charles", "Karen", "Daniel", "Nancy", "Matthew", "Lisa", "Anthony", "Betty", "Mark",
    "Margaret", "Elmedina", "Yuki", "Priya", "Omar", "Ingrid", "Mateo", "Chen", "Fatima",
];
const MIDDLE: &[&str] = &[
    "Jane", "Lee", "Ann", "Marie", "Ray", "Lynn", "Dean", "Rose", "Paul", "Grace", "Alan", "Louise",
];
const LAST: &[&str] = &[
    "Sossove", "Youssoufia", "Adzemovi", "Jordan", "Smith", "Johnson", "Williams", "Brown", "Jones",
    "Garcia", "Miller", "Davis", "Rodriguez", "Martinez", "Hernandez", "Lopez", "Gonzalez", "Wilson",
    "Anderson", "Taylor", "Moore", "Jackson", "Martin", "Thompson", "White", "Harris", "Clark",
    "Lewis", "Nakamura", "Okafor", "Petrov", "Kowalski", "Lindqvist",
];
const TITLE: &[&str] = &["Prof", "Dr", "Mr", "Mrs", "Ms", "Sir", "Rev"];
const SUFFIX_PER: &[&str] = &["Sr.", "Jr.", "II", "III", "IV"];
const DEGREE: &[&str] = &["B.S.", "Ph.D.", "M.D.", "J.D.", "M.S.", "MBA", "B.A.", "CPA"];

fn initial(rng: &mut ChaCha8Rng) -> String {
    let c = (b'A' + rng.random_range(0..26u8)) as char;
    format!("{c}.")
}

static PERSON_TEMPLATES: &[Template] = &[
    |r| {
        let s = format!("{} {} {}", pick(r, TITLE), pick(r, FIRST), pick(r, LAST));
        (s, vec!["title", "first", "last"])
    },
    |r| (format!("{} {}", pick(r, FIRST), pick(r, LAST)), vec!["first", "last"]),
    |r| {
        let s = format!("{} {} {}", pick(r, FIRST), pick(r, MIDDLE), pick(r, LAST));
        (s, vec!["first", "middle", "last"])
    },
    |r| {
        let s = format!("{} {} {}", pick(r, FIRST), initial(r), pick(r, LAST));
        (s, vec!["first", "middle", "last"])
    },
    |r| {
        let s = format!("{} {}, {}", pick(r, FIRST), pick(r, LAST), pick(r, DEGREE));
        (s, vec!["first", "last", "sep", "degree"])
    },
    |r| {
        let s = format!("{} {} {}", pick(r, FIRST), pick(r, LAST), pick(r, SUFFIX_PER));
        (s, vec!["first", "last", "suffix"])
    },
    |r| {
        let s = format!(
            "{} {} {} {}",
            pick(r, TITLE),
            pick(r, FIRST),
            pick(r, MIDDLE),
            pick(r, LAST)
        );
        (s, vec!["title", "first", "middle", "last"])
    },
    |r| (format!("{}, {}", pick(r, LAST), pick(r, FIRST)), vec!["last", "sep", "first"]),
    |r| {
        let s = format!("{}. {} {}", pick(r, TITLE), pick(r, FIRST), pick(r, LAST));
        (s, vec!["title", "first", "last"])
    },
    |r| {
        let s = format!(
            "{} {} {}, {}",
            pick(r, FIRST),
            pick(r, LAST),
            pick(r, SUFFIX_PER),
            pick(r, DEGREE)
        );
        (s, vec!["first", "last", "suffix", "sep", "degree"])
    },
    |r| (format!("{} {}", initial(r), pick(r, LAST)), vec!["first", "last"]),
];

const CORE: &[&str] = &[
    "Apple", "Sony", "Staples", "Jones", "Microsoft", "Acme", "Globex", "Initech", "Umbrella",
    "Stark", "Wayne", "Wonka", "Tyrell", "Cyberdyne", "Hooli", "Soylent", "Vandelay", "Massive",
    "Oscorp", "Aperture", "Nakatomi", "Gringotts", "Dunder", "Pied", "Monarch", "Zenith", "Aurora",
];
const ORG_TYPE: &[&str] = &[
    "Group", "Holdings", "Systems", "Industries", "Foods", "Bank", "Partners", "Capital",
    "Technologies", "Apparel", "Motors", "Pharmaceuticals", "Media",
];
const SUFFIX_ORG: &[&str] = &["Inc.", "Corp.", "Co.", "Ltd.", "LLC", "Inc", "Corp", "GmbH", "PLC"];
const LOCATION: &[&str] = &[
    "Japan", "Boston", "Europe", "America", "Texas", "Canada", "India", "Brazil", "Ohio", "Asia",
];

static ORG_TEMPLATES: &[Template] = &[
    |r| {
        let s = format!("{} {}", pick(r, CORE), pick(r, SUFFIX_ORG)).to_uppercase();
        (s, vec!["corename", "suffix"])
    },
    |r| {
        let s = format!("{}, {}", pick(r, CORE), pick(r, &["Inc.", "Corp.", "Co.", "Ltd."]))
            .to_uppercase();
        (s, vec!["corename", "sep", "suffix"])
    },
    |r| {
        let s = format!(
            "{} {} {} {}",
            pick(r, CORE),
            pick(r, CORE),
            pick(r, ORG_TYPE),
            pick(r, &["Inc", "Corp", "LLC", "PLC"])
        )
        .to_uppercase();
        (s, vec!["corename", "corename", "type", "suffix"])
    },
    |r| (format!("{} {}", pick(r, CORE), pick(r, SUFFIX_ORG)), vec!["corename", "suffix"]),
    |r| {
        let s = format!("{} {} {}", pick(r, CORE), pick(r, CORE), pick(r, SUFFIX_ORG));
        (s, vec!["corename", "corename", "suffix"])
    },
    |r| (format!("{} {}", pick(r, CORE), pick(r, ORG_TYPE)), vec!["corename", "type"]),
    |r| {
        let s = format!("{} {} {}", pick(r, CORE), pick(r, ORG_TYPE), pick(r, SUFFIX_ORG));
        (s, vec!["corename", "type", "suffix"])
    },
    |r| {
        let s = format!("{} {} ({})", pick(r, CORE), pick(r, SUFFIX_ORG), pick(r, LOCATION));
        (s, vec!["corename", "suffix", "sep", "location", "sep"])
    },
    |r| {
        let s = format!("{} {} {}", pick(r, CORE), pick(r, LOCATION), pick(r, SUFFIX_ORG));
        (s, vec!["corename", "location", "suffix"])
    },
    |r| {
        let s = format!("{} {}, {}", pick(r, CORE), pick(r, ORG_TYPE), pick(r, LOCATION));
        (s, vec!["corename", "type", "sep", "location"])
    },
    |r| {
        let s = format!("{} {}, {}", pick(r, CORE), pick(r, ORG_TYPE), pick(r, &["INC.", "CORP.", "LTD."]))
            .to_uppercase();
        (s, vec!["corename", "type", "sep", "suffix"])
    },
];

const MONTHS: &[&str] = &[
    "January", "February", "March", "April", "May", "June", "July", "August", "September",
    "October", "November", "December",
];
const MONTH_ABBR: &[&str] = &[
    "Jan.", "Feb.", "Mar.", "Apr.", "Aug.", "Sept.", "Oct.", "Nov.", "Dec.",
];
const WEEKDAYS: &[&str] = &[
    "Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday",
];

fn day(r: &mut ChaCha8Rng) -> u32 {
    r.random_range(1..=28)
}

fn month(r: &mut ChaCha8Rng) -> u32 {
    r.random_range(1..=12)
}

fn year(r: &mut ChaCha8Rng) -> u32 {
    r.random_range(1950..=2030)
}

fn ordinal(d: u32) -> String {
    let suffix = match (d % 10, d % 100) {
        (_, 11..=13) => "th",
        (1, _) => "st",
        (2, _) => "nd",
        (3, _) => "rd",
        _ => "th",
    };
    format!("{d}{suffix}")
}

static DATE_TEMPLATES: &[Template] = &[
    |r| {
        let s = format!("{} {}, {}", pick(r, MONTHS), day(r), year(r));
        (s, vec!["MonthOfYear", "Day", "sep", "Year"])
    },
    |r| (format!("{}/{}/{}", month(r), day(r), year(r)), vec!["NumericDate"]),
    |r| {
        let s = format!("{} {} {}", day(r), pick(r, MONTHS), year(r));
        (s, vec!["Day", "MonthOfYear", "Year"])
    },
    |r| (format!("{} {}", pick(r, MONTHS), year(r)), vec!["MonthOfYear", "Year"]),
    |r| {
        let s = format!("{} day of {} {}", ordinal(day(r)), pick(r, MONTHS), year(r));
        (s, vec!["Day", "tok", "tok", "MonthOfYear", "Year"])
    },
    |r| {
        let s = format!("{} {}, {}", pick(r, MONTH_ABBR), day(r), year(r));
        (s, vec!["MonthOfYear", "Day", "sep", "Year"])
    },
    |r| {
        let s = format!("{}-{:02}-{:02}", year(r), month(r), day(r));
        (s, vec!["NumericDate"])
    },
    |r| {
        let s = format!("{} {}, {}", pick(r, MONTHS), ordinal(day(r)), year(r));
        (s, vec!["MonthOfYear", "Day", "sep", "Year"])
    },
    |r| {
        let s = format!("{}, {} {}, {}", pick(r, WEEKDAYS), pick(r, MONTHS), day(r), year(r));
        (s, vec!["tok", "sep", "MonthOfYear", "Day", "sep", "Year"])
    },
    |r| (format!("{}.{}.{}", day(r), month(r), year(r)), vec!["NumericDate"]),
    |r| {
        let s = format!("the {} of {}, {}", ordinal(day(r)), pick(r, MONTHS), year(r));
        (s, vec!["tok", "Day", "tok", "MonthOfYear", "sep", "Year"])
    },
    |r| {
        let s = format!("{} {} {}", pick(r, MONTHS), day(r), year(r));
        (s, vec!["MonthOfYear", "Day", "Year"])
    },
];

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn every_kind_has_enough_templates() {
        for kind in [SyntheticKind::Person, SyntheticKind::Org, SyntheticKind::Date] {
            assert!(kind.template_count() >= 10, "{kind:?}");
        }
    }

    #[test]
    fn generation_is_deterministic() {
        for kind in [SyntheticKind::Person, SyntheticKind::Org, SyntheticKind::Date] {
            let a = gen_synthetic(kind, 200, 7).unwrap();
            let b = gen_synthetic(kind, 200, 7).unwrap();
            assert_eq!(a.to_jsonl(), b.to_jsonl());
            let c = gen_synthetic(kind, 200, 8).unwrap();
            assert_ne!(a.to_jsonl(), c.to_jsonl());
        }
    }

    #[test]
    fn large_samples_cover_every_template() {
        for kind in [SyntheticKind::Person, SyntheticKind::Org, SyntheticKind::Date] {
            let (corpus, used) = gen_with_templates(kind, 2000, 3).unwrap();
            assert!(corpus.is_fully_labeled());
            let seen: HashSet<usize> = used.into_iter().collect();
            assert_eq!(seen.len(), kind.template_count(), "{kind:?}");
        }
    }

    #[test]
    fn single_date_is_labeled() {
        let c = gen_synthetic(SyntheticKind::Date, 1, 7).unwrap();
        let m = &c.mentions[0];
        assert_eq!(m.labels.as_ref().unwrap().len(), m.tokens.len());
    }

    #[test]
    fn table_style_samples_tokenize_as_labeled() {
        let date = SyntheticKind::Date.schema();
        let toks = tokenize("February 2, 2019").unwrap();
        let names: Vec<String> =
            ["MonthOfYear", "Day", "sep", "Year"].iter().map(|s| s.to_string()).collect();
        assert!(date.resolve(&names, toks.len()).is_ok());
        let per = SyntheticKind::Person.schema();
        let toks = tokenize("Prof Liat Sossove").unwrap();
        let names: Vec<String> = ["title", "first", "last"].iter().map(|s| s.to_string()).collect();
        assert!(per.resolve(&names, toks.len()).is_ok());
    }

    #[test]
    fn zero_and_unknown_kind_rejected() {
        assert!(matches!(gen_synthetic(SyntheticKind::Org, 0, 1), Err(CorpusError::EmptyRequest)));
        assert!("planet".parse::<SyntheticKind>().is_err());
    }

    #[test]
    fn ordinals() {
        assert_eq!(ordinal(1), "1st");
        assert_eq!(ordinal(3), "3rd");
        assert_eq!(ordinal(11), "11th");
        assert_eq!(ordinal(22), "22nd");
    }
}
