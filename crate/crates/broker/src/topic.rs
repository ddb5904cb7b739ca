//! Topic names, filters and wildcard matching.
//!
//! Levels are separated by `/`. `+` matches exactly one level, `#` matches
//! any number of trailing levels including none, so `a/#` matches `a`.

use crate::BrokerError;

const MAX_LEN: usize = 65_535;

pub fn validate_topic(topic: &str) -> Result<(), BrokerError> {
    if topic.is_empty() || topic.len() > MAX_LEN {
        return Err(BrokerError::InvalidTopic(topic.to_string()));
    }
    if topic.contains(['+', '#', '\0']) {
        return Err(BrokerError::InvalidTopic(topic.to_string()));
    }
    Ok(())
}

pub fn validate_filter(filter: &str) -> Result<(), BrokerError> {
    if filter.is_empty() || filter.len() > MAX_LEN || filter.contains('\0') {
        return Err(BrokerError::InvalidFilter(filter.to_string()));
    }
    let levels: Vec<&str> = filter.split('/').collect();
    for (i, level) in levels.iter().enumerate() {
        let wild = level.contains(['+', '#']);
        if wild && level.len() != 1 {
            return Err(BrokerError::InvalidFilter(filter.to_string()));
        }
        if *level == "#" && i + 1 != levels.len() {
            return Err(BrokerError::InvalidFilter(filter.to_string()));
        }
    }
    Ok(())
}

/// Whether `topic` matches `filter`. Both are assumed valid.
pub fn matches(filter: &str, topic: &str) -> bool {
    let mut t = topic.split('/');
    for f in filter.split('/') {
        if f == "#" {
            return true;
        }
        match t.next() {
            None => return false,
            Some(level) if f != "+" && f != level => return false,
            Some(_) => {}
        }
    }
    t.next().is_none()
}

/// Whether every topic matched by `filter` is also matched by `pattern`.
/// Decided structurally, so a grant on `sensors/+` never lets a client
/// subscribe to `sensors/#`.
pub fn covers(pattern: &str, filter: &str) -> bool {
    if validate_filter(pattern).is_err() || validate_filter(filter).is_err() {
        return false;
    }
    let p: Vec<&str> = pattern.split('/').collect();
    let f: Vec<&str> = filter.split('/').collect();
    // a topic has at least one level, so a leading `#` never matches the
    // empty parent and `+/#` covers `#`
    if f == ["#"] && p == ["+", "#"] {
        return true;
    }
    covers_levels(&p, &f)
}

fn covers_levels(p: &[&str], f: &[&str]) -> bool {
    match (p.first(), f.first()) {
        (Some(&"#"), _) => true,
        (None, None) => true,
        (None, Some(_)) | (Some(_), None) => false,
        (Some(_), Some(&"#")) => false,
        (Some(&"+"), Some(_)) => covers_levels(&p[1..], &f[1..]),
        (Some(a), Some(b)) => a == b && covers_levels(&p[1..], &f[1..]),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // recursive definition over level slices
    fn oracle(f: &[&str], t: &[&str]) -> bool {
        match (f.split_first(), t.split_first()) {
            (None, None) => true,
            (Some((&"#", _)), _) => true,
            (Some(_), None) | (None, Some(_)) => false,
            (Some((&"+", fr)), Some((_, tr))) => oracle(fr, tr),
            (Some((a, fr)), Some((b, tr))) => a == b && oracle(fr, tr),
        }
    }

    fn split(s: &str) -> Vec<&str> {
        s.split('/').collect()
    }

    #[test]
    fn wildcard_examples() {
        assert!(matches("sensors/+/temp", "sensors/dev1/temp"));
        assert!(matches("sensors/#", "sensors"));
        assert!(matches("sensors/#", "sensors/a/b"));
        assert!(matches("#", "a"));
        assert!(!matches("sensors/+", "sensors"));
        assert!(!matches("sensors/+/temp", "sensors/dev1/hum"));
        assert!(!matches("a/b", "a/b/c"));
        assert!(matches("+/+", "/x"));
    }

    #[test]
    fn validation() {
        assert!(validate_topic("a/b").is_ok());
        assert!(validate_topic("a/+").is_err());
        assert!(validate_topic("").is_err());
        assert!(validate_filter("a/#").is_ok());
        assert!(validate_filter("a/#/b").is_err());
        assert!(validate_filter("a/b#").is_err());
        assert!(validate_filter("a+/b").is_err());
        assert!(validate_filter("+/+/#").is_ok());
    }

    fn all_strings(alphabet: &[&str], max_levels: usize) -> Vec<String> {
        let mut out = Vec::new();
        let mut frontier: Vec<Vec<&str>> = alphabet.iter().map(|a| vec![*a]).collect();
        for _ in 0..max_levels {
            let mut next = Vec::new();
            for levels in &frontier {
                out.push(levels.join("/"));
                for a in alphabet {
                    let mut l = levels.clone();
                    l.push(a);
                    next.push(l);
                }
            }
            frontier = next;
        }
        out
    }

    #[test]
    fn covers_agrees_with_enumeration() {
        // every filter/pattern over {a, b, +, #} up to 3 levels; witnesses over
        // {a, b, c} up to 5 levels (longer than either side plus one)
        let filters: Vec<String> = all_strings(&["a", "b", "+", "#"], 3)
            .into_iter()
            .filter(|f| validate_filter(f).is_ok())
            .collect();
        let topics = all_strings(&["a", "b", "c"], 5);
        for p in &filters {
            for f in &filters {
                let brute = topics.iter().all(|t| !matches(f, t) || matches(p, t));
                assert_eq!(covers(p, f), brute, "pattern {p} filter {f}");
            }
        }
    }

    fn level() -> impl Strategy<Value = String> {
        prop_oneof![Just("a".to_string()), Just("b".to_string()), Just(String::new()), "[a-c]{1,2}"]
    }

    fn filter_level() -> impl Strategy<Value = String> {
        prop_oneof![3 => level(), 1 => Just("+".to_string())]
    }

    proptest! {
        #[test]
        fn matches_agrees_with_oracle(
            f in prop::collection::vec(filter_level(), 1..5),
            hash in any::<bool>(),
            t in prop::collection::vec(level(), 1..6),
        ) {
            let mut filter = f.join("/");
            if hash {
                filter.push_str("/#");
            }
            let topic = t.join("/");
            prop_assume!(!filter.is_empty() && !topic.is_empty());
            prop_assert!(validate_filter(&filter).is_ok());
            prop_assert_eq!(matches(&filter, &topic), oracle(&split(&filter), &split(&topic)));
        }

        #[test]
        fn covers_is_reflexive(f in prop::collection::vec(filter_level(), 1..5)) {
            let filter = f.join("/");
            prop_assume!(!filter.is_empty());
            prop_assert!(covers(&filter, &filter));
            prop_assert!(covers("#", &filter));
        }
    }
}
