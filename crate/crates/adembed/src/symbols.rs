//! The fixed set of 53 symbol names.
//!
//! Symbols are the abstract concepts annotated on ad images. The symbol
//! table, classifier, and knowledge-branch scalars are all indexed by
//! position in this list, so the order is part of the file formats and
//! must not change.

pub const SYMBOL_COUNT: usize = 53;

pub const SYMBOL_NAMES: [&str; SYMBOL_COUNT] = [
    "adventure",
    "beauty",
    "charm",
    "comfort",
    "cool",
    "danger",
    "death",
    "delicious",
    "desire",
    "elegance",
    "energy",
    "environment",
    "evil",
    "excitement",
    "family",
    "fashion",
    "fitness",
    "food",
    "freedom",
    "fresh",
    "fun",
    "happiness",
    "healthy",
    "hot",
    "humor",
    "hunger",
    "injury",
    "love",
    "luxury",
    "music",
    "nature",
    "party",
    "patriotism",
    "power",
    "purity",
    "refreshing",
    "romance",
    "sadness",
    "safety",
    "smoking",
    "speed",
    "sport",
    "strength",
    "style",
    "technology",
    "tradition",
    "travel",
    "trust",
    "variety",
    "violence",
    "warmth",
    "wealth",
    "youth",
];

pub fn symbol_index(name: &str) -> Option<usize> {
    SYMBOL_NAMES.iter().position(|s| *s == name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashSet;

    #[test]
    fn exactly_53_unique_lowercase_names() {
        let set: HashSet<&str> = SYMBOL_NAMES.iter().copied().collect();
        assert_eq!(set.len(), 53);
        for name in SYMBOL_NAMES {
            assert_eq!(name, name.to_lowercase());
        }
    }

    #[test]
    fn index_lookup() {
        assert_eq!(symbol_index("adventure"), Some(0));
        assert_eq!(symbol_index("youth"), Some(52));
        assert_eq!(symbol_index("nonexistent"), None);
    }
}
