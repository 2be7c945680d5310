//! The six pressure ulcer classes and per-class counting.

use std::fmt;
use std::str::FromStr;

use serde::de::{self, Deserializer, Visitor};
use serde::ser::Serializer;
use serde::{Deserialize, Serialize};

use crate::error::Error;

/// Detection classes, ordered as they appear in class histograms and
/// structured reports: the four pressure ulcer categories, then deep tissue
/// injury, then unstageable.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UlcerClass {
    CategoryI,
    CategoryII,
    CategoryIII,
    CategoryIV,
    Dti,
    Unstageable,
}

impl UlcerClass {
    pub const COUNT: usize = 6;

    /// Histogram / report ordering.
    pub const ALL: [UlcerClass; 6] = [
        UlcerClass::CategoryI,
        UlcerClass::CategoryII,
        UlcerClass::CategoryIII,
        UlcerClass::CategoryIV,
        UlcerClass::Dti,
        UlcerClass::Unstageable,
    ];

    /// Row ordering used by rendered metric tables, which list the four
    /// categories first, then unstageable, then DTI.
    pub const TABLE_ORDER: [UlcerClass; 6] = [
        UlcerClass::CategoryI,
        UlcerClass::CategoryII,
        UlcerClass::CategoryIII,
        UlcerClass::CategoryIV,
        UlcerClass::Unstageable,
        UlcerClass::Dti,
    ];

    /// Position of the class in [`UlcerClass::ALL`].
    pub fn index(self) -> usize {
        match self {
            UlcerClass::CategoryI => 0,
            UlcerClass::CategoryII => 1,
            UlcerClass::CategoryIII => 2,
            UlcerClass::CategoryIV => 3,
            UlcerClass::Dti => 4,
            UlcerClass::Unstageable => 5,
        }
    }

    /// Inverse of [`UlcerClass::index`].
    pub fn from_index(index: usize) -> Option<UlcerClass> {
        UlcerClass::ALL.get(index).copied()
    }

    /// Canonical spelling used in files and reports.
    pub fn name(self) -> &'static str {
        match self {
            UlcerClass::CategoryI => "CategoryI",
            UlcerClass::CategoryII => "CategoryII",
            UlcerClass::CategoryIII => "CategoryIII",
            UlcerClass::CategoryIV => "CategoryIV",
            UlcerClass::Dti => "DTI",
            UlcerClass::Unstageable => "Unstageable",
        }
    }

    /// Comma-separated list of the canonical names, for error messages.
    pub fn valid_names() -> String {
        UlcerClass::ALL
            .iter()
            .map(|c| c.name())
            .collect::<Vec<_>>()
            .join(", ")
    }
}

impl fmt::Display for UlcerClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Class names are matched case-insensitively and ignore spaces, hyphens and
/// underscores, so `"category II"`, `"Category-II"` and `"categoryii"` all
/// map to [`UlcerClass::CategoryII`].  Anything else is an error that lists
/// the accepted names.
impl FromStr for UlcerClass {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let folded: String = s
            .chars()
            .filter(|c| !matches!(c, ' ' | '-' | '_'))
            .flat_map(char::to_lowercase)
            .collect();
        // Longer roman numerals first so "categoryiii" is not cut short.
        let class = match folded.as_str() {
            "categoryiii" => UlcerClass::CategoryIII,
            "categoryiv" => UlcerClass::CategoryIV,
            "categoryii" => UlcerClass::CategoryII,
            "categoryi" => UlcerClass::CategoryI,
            "dti" | "deeptissueinjury" => UlcerClass::Dti,
            "unstageable" => UlcerClass::Unstageable,
            _ => {
                return Err(Error::UnknownClass {
                    name: s.to_string(),
                    valid: UlcerClass::valid_names(),
                })
            }
        };
        Ok(class)
    }
}

impl Serialize for UlcerClass {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_str(self.name())
    }
}

impl<'de> Deserialize<'de> for UlcerClass {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        struct ClassVisitor;

        impl Visitor<'_> for ClassVisitor {
            type Value = UlcerClass;

            fn expecting(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
                write!(f, "one of the class names {}", UlcerClass::valid_names())
            }

            fn visit_str<E: de::Error>(self, v: &str) -> Result<UlcerClass, E> {
                v.parse().map_err(|e| E::custom(format!("{e}")))
            }
        }

        deserializer.deserialize_str(ClassVisitor)
    }
}

/// Per-class annotation counts, indexed in [`UlcerClass::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ClassHistogram(pub [u64; UlcerClass::COUNT]);

impl ClassHistogram {
    pub fn new() -> Self {
        ClassHistogram([0; UlcerClass::COUNT])
    }

    pub fn from_counts(counts: [u64; UlcerClass::COUNT]) -> Self {
        ClassHistogram(counts)
    }

    pub fn add(&mut self, class: UlcerClass) {
        self.0[class.index()] += 1;
    }

    pub fn get(&self, class: UlcerClass) -> u64 {
        self.0[class.index()]
    }

    /// Total number of counted annotations.
    pub fn total(&self) -> u64 {
        self.0.iter().sum()
    }

    pub fn merge(&mut self, other: &ClassHistogram) {
        for (a, b) in self.0.iter_mut().zip(other.0.iter()) {
            *a += b;
        }
    }
}

impl fmt::Display for ClassHistogram {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for class in UlcerClass::ALL {
            writeln!(f, "{:<12} {}", class.name(), self.get(class))?;
        }
        write!(f, "{:<12} {}", "total", self.total())
    }
}
