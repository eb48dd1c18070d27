//! Publications, subscriptions, and the pure matching predicates shared by
//! all pipelines.
//!
//! Everything here is an immutable value; the predicates perform no I/O and
//! are safe to call from any number of concurrent executors.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

/// Opaque unique subscriber identifier.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SubscriberId(String);

impl SubscriberId {
    pub fn new(value: impl Into<String>) -> Result<Self, DomainError> {
        let value = value.into();
        if value.is_empty() {
            return Err(DomainError::EmptyIdentifier);
        }
        Ok(SubscriberId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for SubscriberId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Property and constraint values: IEEE doubles or strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Scalar {
    Num(f64),
    Str(String),
}

impl Scalar {
    fn type_name(&self) -> &'static str {
        match self {
            Scalar::Num(_) => "number",
            Scalar::Str(_) => "string",
        }
    }
}

impl fmt::Display for Scalar {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scalar::Num(n) => write!(f, "{n}"),
            Scalar::Str(s) => write!(f, "{s}"),
        }
    }
}

impl From<f64> for Scalar {
    fn from(n: f64) -> Self {
        Scalar::Num(n)
    }
}

impl From<&str> for Scalar {
    fn from(s: &str) -> Self {
        Scalar::Str(s.to_string())
    }
}

/// The five comparison operators a content constraint may use.
///
/// On the wire these serialize as the symbols `=`, `<`, `<=`, `>`, `>=`;
/// the spelled-out names are accepted as input aliases.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CompareOp {
    #[serde(rename = "=", alias = "EQ", alias = "eq", alias = "==")]
    Eq,
    #[serde(rename = "<", alias = "LT", alias = "lt")]
    Lt,
    #[serde(rename = "<=", alias = "LE", alias = "le")]
    Le,
    #[serde(rename = ">", alias = "GT", alias = "gt")]
    Gt,
    #[serde(rename = ">=", alias = "GE", alias = "ge")]
    Ge,
}

impl CompareOp {
    pub fn symbol(self) -> &'static str {
        match self {
            CompareOp::Eq => "=",
            CompareOp::Lt => "<",
            CompareOp::Le => "<=",
            CompareOp::Gt => ">",
            CompareOp::Ge => ">=",
        }
    }
}

/// One content-subscription constraint: `<key> <op> <value>`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Constraint {
    pub key: String,
    pub op: CompareOp,
    pub value: Scalar,
}

impl Constraint {
    pub fn new(key: impl Into<String>, op: CompareOp, value: impl Into<Scalar>) -> Self {
        Constraint { key: key.into(), op, value: value.into() }
    }
}

/// One publication property entry.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyEntry {
    pub key: String,
    pub value: Scalar,
}

/// Key/value properties of a content publication, normalized: keys unique,
/// entries sorted ascending by key byte-wise.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(transparent)]
pub struct PropertyList {
    entries: Vec<PropertyEntry>,
}

impl PropertyList {
    /// Normalizes on construction. Rejects empty keys and duplicate keys.
    pub fn new(entries: Vec<(String, Scalar)>) -> Result<Self, DomainError> {
        let mut entries: Vec<PropertyEntry> = entries
            .into_iter()
            .map(|(key, value)| PropertyEntry { key, value })
            .collect();
        if entries.iter().any(|e| e.key.is_empty()) {
            return Err(DomainError::EmptyKey);
        }
        entries.sort_by(|a, b| a.key.as_bytes().cmp(b.key.as_bytes()));
        for pair in entries.windows(2) {
            if pair[0].key == pair[1].key {
                return Err(DomainError::DuplicateKey(pair[0].key.clone()));
            }
        }
        Ok(PropertyList { entries })
    }

    pub fn entries(&self) -> &[PropertyEntry] {
        &self.entries
    }

    pub fn get(&self, key: &str) -> Option<&Scalar> {
        self.entries
            .binary_search_by(|e| e.key.as_bytes().cmp(key.as_bytes()))
            .ok()
            .map(|i| &self.entries[i].value)
    }

    /// First key in the normalized (alphabetical) order.
    pub fn first_key(&self) -> Option<&str> {
        self.entries.first().map(|e| e.key.as_str())
    }

    pub fn keys(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|e| e.key.as_str())
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl<'de> Deserialize<'de> for PropertyList {
    fn deserialize<D>(deserializer: D) -> Result<Self, D::Error>
    where
        D: serde::Deserializer<'de>,
    {
        let entries = Vec::<PropertyEntry>::deserialize(deserializer)?;
        PropertyList::new(entries.into_iter().map(|e| (e.key, e.value)).collect())
            .map_err(serde::de::Error::custom)
    }
}

/// Scheme-specific payload attachment of a publication.
#[derive(Debug, Clone, PartialEq)]
pub enum Attachment {
    Topics(Vec<String>),
    Properties(PropertyList),
    FunctionType(String),
}

/// A publication: text payload plus exactly one attachment variant.
#[derive(Debug, Clone, PartialEq)]
pub struct Publication {
    pub data: String,
    pub attachment: Attachment,
}

impl Publication {
    pub fn topics(data: impl Into<String>, topics: Vec<String>) -> Result<Self, DomainError> {
        if topics.is_empty() {
            return Err(DomainError::EmptyTopicList);
        }
        Ok(Publication { data: data.into(), attachment: Attachment::Topics(topics) })
    }

    pub fn content(data: impl Into<String>, properties: PropertyList) -> Result<Self, DomainError> {
        if properties.is_empty() {
            return Err(DomainError::EmptyProperties);
        }
        Ok(Publication { data: data.into(), attachment: Attachment::Properties(properties) })
    }

    pub fn function(data: impl Into<String>, function_type: impl Into<String>) -> Result<Self, DomainError> {
        let function_type = function_type.into();
        if function_type.is_empty() {
            return Err(DomainError::EmptyFunctionType);
        }
        Ok(Publication { data: data.into(), attachment: Attachment::FunctionType(function_type) })
    }
}

/// A subscription in one of the three matching schemes.
#[derive(Debug, Clone, PartialEq)]
pub enum Subscription {
    Topics(BTreeSet<String>),
    Content(Vec<Constraint>),
    Function { function_type: String, source: String },
}

/// What matched, carried on every delivered frame.
#[derive(Debug, Clone, PartialEq)]
pub enum MatchInfo {
    Topic(String),
    Properties(PropertyList),
    FunctionType(String),
}

impl Serialize for MatchInfo {
    fn serialize<S>(&self, serializer: S) -> Result<S::Ok, S::Error>
    where
        S: serde::Serializer,
    {
        match self {
            MatchInfo::Topic(t) => serializer.serialize_str(t),
            MatchInfo::FunctionType(t) => serializer.serialize_str(t),
            MatchInfo::Properties(p) => p.serialize(serializer),
        }
    }
}

/// A message pushed to one subscriber.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(rename_all = "camelCase")]
pub struct DeliveryFrame {
    pub subscriber_id: SubscriberId,
    pub data: String,
    pub match_info: MatchInfo,
    /// Milliseconds since the Unix epoch at broker send time.
    pub timestamp: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum DomainError {
    #[error("identifier must be non-empty")]
    EmptyIdentifier,
    #[error("property key must be non-empty")]
    EmptyKey,
    #[error("duplicate key '{0}'")]
    DuplicateKey(String),
    #[error("topic list must be non-empty")]
    EmptyTopicList,
    #[error("property list must be non-empty")]
    EmptyProperties,
    #[error("function type must be non-empty")]
    EmptyFunctionType,
    #[error("constraint list must be non-empty")]
    EmptyConstraints,
}

/// Ordering comparison between a number and a string has no defined answer.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("cannot order {left} against {right}")]
pub struct TypeMismatch {
    pub left: &'static str,
    pub right: &'static str,
}

/// Topics of the publication that the subscriber is subscribed to, in
/// publication order, without repeats. A non-empty result means the
/// subscriber receives the publication once per matched topic.
pub fn topic_matches(subscribed: &BTreeSet<String>, publication_topics: &[String]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    publication_topics
        .iter()
        .filter(|t| subscribed.contains(*t) && seen.insert(t.as_str()))
        .cloned()
        .collect()
}

/// Compare two scalars. Numbers compare numerically, strings byte-wise;
/// equality across types is `false`, ordering across types is an error.
pub fn compare_scalars(left: &Scalar, op: CompareOp, right: &Scalar) -> Result<bool, TypeMismatch> {
    match (left, right) {
        (Scalar::Num(a), Scalar::Num(b)) => Ok(match op {
            CompareOp::Eq => a == b,
            CompareOp::Lt => a < b,
            CompareOp::Le => a <= b,
            CompareOp::Gt => a > b,
            CompareOp::Ge => a >= b,
        }),
        (Scalar::Str(a), Scalar::Str(b)) => {
            let ord = a.as_bytes().cmp(b.as_bytes());
            Ok(match op {
                CompareOp::Eq => ord.is_eq(),
                CompareOp::Lt => ord.is_lt(),
                CompareOp::Le => ord.is_le(),
                CompareOp::Gt => ord.is_gt(),
                CompareOp::Ge => ord.is_ge(),
            })
        }
        (l, r) => {
            if op == CompareOp::Eq {
                Ok(false)
            } else {
                Err(TypeMismatch { left: l.type_name(), right: r.type_name() })
            }
        }
    }
}

/// True iff every constraint has a property with the same key whose value
/// satisfies the operator. A constraint on an absent key fails the match
/// (closed world). Constraints are checked in order; the first absent key
/// short-circuits to `false` before later constraints can raise.
pub fn satisfies(constraints: &[Constraint], properties: &PropertyList) -> Result<bool, TypeMismatch> {
    for c in constraints {
        let Some(value) = properties.get(&c.key) else {
            return Ok(false);
        };
        if !compare_scalars(value, c.op, &c.value)? {
            return Ok(false);
        }
    }
    Ok(true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn set(topics: &[&str]) -> BTreeSet<String> {
        topics.iter().map(|t| t.to_string()).collect()
    }

    fn topics(list: &[&str]) -> Vec<String> {
        list.iter().map(|t| t.to_string()).collect()
    }

    fn props(entries: &[(&str, Scalar)]) -> PropertyList {
        PropertyList::new(entries.iter().map(|(k, v)| (k.to_string(), v.clone())).collect())
            .unwrap()
    }

    #[test]
    fn topic_match_single_overlap() {
        assert_eq!(topic_matches(&set(&["a", "b"]), &topics(&["b", "c"])), topics(&["b"]));
    }

    #[test]
    fn topic_match_empty_intersection() {
        assert_eq!(topic_matches(&set(&["a"]), &topics(&["b", "c"])), Vec::<String>::new());
    }

    #[test]
    fn topic_match_preserves_publication_order() {
        assert_eq!(topic_matches(&set(&["a", "b", "c"]), &topics(&["c", "a"])), topics(&["c", "a"]));
    }

    /// Brute-force set-intersection oracle over all subsets of a 5-topic
    /// universe, written independently of `topic_matches`.
    #[test]
    fn topic_match_agrees_with_subset_enumeration() {
        let universe = ["t0", "t1", "t2", "t3", "t4"];
        for sub_bits in 0u32..32 {
            for pub_bits in 1u32..32 {
                let subscribed: BTreeSet<String> = universe
                    .iter()
                    .enumerate()
                    .filter(|(i, _)| sub_bits & (1 << i) != 0)
                    .map(|(_, t)| t.to_string())
                    .collect();
                // Publication lists topics in reverse order to exercise
                // order preservation.
                let publication: Vec<String> = universe
                    .iter()
                    .enumerate()
                    .rev()
                    .filter(|(i, _)| pub_bits & (1 << i) != 0)
                    .map(|(_, t)| t.to_string())
                    .collect();

                let expected: Vec<String> = publication
                    .iter()
                    .filter(|t| subscribed.contains(*t))
                    .cloned()
                    .collect();
                assert_eq!(topic_matches(&subscribed, &publication), expected);

                let as_set: BTreeSet<String> =
                    topic_matches(&subscribed, &publication).into_iter().collect();
                let intersection: BTreeSet<String> = subscribed
                    .intersection(&publication.iter().cloned().collect())
                    .cloned()
                    .collect();
                assert_eq!(as_set, intersection);
            }
        }
    }

    #[test]
    fn satisfies_conjunction_of_comparisons() {
        let cs = vec![
            Constraint::new("k1", CompareOp::Eq, 5.0),
            Constraint::new("k2", CompareOp::Ge, 10.0),
        ];
        let ps = props(&[("k1", Scalar::Num(5.0)), ("k2", Scalar::Num(12.0)), ("k3", "x".into())]);
        assert_eq!(satisfies(&cs, &ps), Ok(true));
    }

    #[test]
    fn satisfies_missing_key_fails() {
        let cs = vec![Constraint::new("k1", CompareOp::Eq, 5.0)];
        let ps = props(&[("k2", Scalar::Num(5.0))]);
        assert_eq!(satisfies(&cs, &ps), Ok(false));
    }

    #[test]
    fn compare_scalar_basics() {
        assert_eq!(compare_scalars(&Scalar::Num(3.0), CompareOp::Lt, &Scalar::Num(10.0)), Ok(true));
        assert_eq!(compare_scalars(&"abc".into(), CompareOp::Eq, &"abc".into()), Ok(true));
        assert_eq!(compare_scalars(&Scalar::Num(3.0), CompareOp::Eq, &"3".into()), Ok(false));
        assert!(compare_scalars(&Scalar::Num(3.0), CompareOp::Lt, &"3".into()).is_err());
    }

    #[test]
    fn property_list_rejects_duplicates_and_sorts() {
        let err = PropertyList::new(vec![
            ("k".into(), Scalar::Num(1.0)),
            ("k".into(), Scalar::Num(2.0)),
        ])
        .unwrap_err();
        assert_eq!(err, DomainError::DuplicateKey("k".into()));

        let ps = props(&[("b", Scalar::Num(1.0)), ("a", Scalar::Num(2.0))]);
        assert_eq!(ps.first_key(), Some("a"));
        let keys: Vec<&str> = ps.keys().collect();
        assert_eq!(keys, vec!["a", "b"]);
    }

    #[test]
    fn op_serde_symbols_and_aliases() {
        assert_eq!(serde_json::to_string(&CompareOp::Ge).unwrap(), "\">=\"");
        assert_eq!(serde_json::from_str::<CompareOp>("\"GE\"").unwrap(), CompareOp::Ge);
        assert_eq!(serde_json::from_str::<CompareOp>("\">=\"").unwrap(), CompareOp::Ge);
        assert_eq!(serde_json::from_str::<CompareOp>("\"=\"").unwrap(), CompareOp::Eq);
    }

    fn scalar_strategy() -> impl Strategy<Value = Scalar> {
        prop_oneof![
            (-1000i32..1000).prop_map(|n| Scalar::Num(f64::from(n) / 4.0)),
            "[a-d]{0,3}".prop_map(Scalar::Str),
        ]
    }

    fn constraint_strategy() -> impl Strategy<Value = Constraint> {
        (
            "[a-f]",
            prop_oneof![
                Just(CompareOp::Eq),
                Just(CompareOp::Lt),
                Just(CompareOp::Le),
                Just(CompareOp::Gt),
                Just(CompareOp::Ge)
            ],
            scalar_strategy(),
        )
            .prop_map(|(k, op, v)| Constraint { key: k, op, value: v })
    }

    fn property_list_strategy() -> impl Strategy<Value = PropertyList> {
        proptest::collection::btree_map("[a-f]", scalar_strategy(), 0..6)
            .prop_map(|m| PropertyList::new(m.into_iter().collect()).unwrap())
    }

    /// Independent per-constraint loop oracle, written before the pipeline:
    /// evaluates each constraint with inline scalar logic, no calls into
    /// `compare_scalars` or `satisfies`.
    fn satisfies_oracle(cs: &[Constraint], ps: &PropertyList) -> Result<bool, ()> {
        let mut all = true;
        for c in cs {
            let found = ps.entries().iter().find(|e| e.key == c.key);
            let Some(entry) = found else {
                return Ok(false);
            };
            let ok = match (&entry.value, &c.value) {
                (Scalar::Num(a), Scalar::Num(b)) => match c.op {
                    CompareOp::Eq => a == b,
                    CompareOp::Lt => a < b,
                    CompareOp::Le => a <= b,
                    CompareOp::Gt => a > b,
                    CompareOp::Ge => a >= b,
                },
                (Scalar::Str(a), Scalar::Str(b)) => match c.op {
                    CompareOp::Eq => a == b,
                    CompareOp::Lt => a < b,
                    CompareOp::Le => a <= b,
                    CompareOp::Gt => a > b,
                    CompareOp::Ge => a >= b,
                },
                _ => {
                    if c.op == CompareOp::Eq {
                        false
                    } else {
                        return Err(());
                    }
                }
            };
            if !ok {
                return Ok(false);
            }
            all &= ok;
        }
        Ok(all)
    }

    proptest! {
        #[test]
        fn satisfies_agrees_with_loop_oracle(
            cs in proptest::collection::vec(constraint_strategy(), 1..6),
            ps in property_list_strategy(),
        ) {
            let got = satisfies(&cs, &ps).map_err(|_| ());
            let want = satisfies_oracle(&cs, &ps);
            prop_assert_eq!(got, want);
        }

        #[test]
        fn topic_match_is_set_intersection_in_set_terms(
            subscribed in proptest::collection::btree_set("[a-e]", 0..5),
            publication in proptest::collection::vec("[a-e]", 1..8),
        ) {
            let got: BTreeSet<String> =
                topic_matches(&subscribed, &publication).into_iter().collect();
            let pub_set: BTreeSet<String> = publication.iter().cloned().collect();
            let want: BTreeSet<String> =
                subscribed.intersection(&pub_set).cloned().collect();
            prop_assert_eq!(got, want);
        }

        #[test]
        fn normalization_is_idempotent(ps in property_list_strategy()) {
            let renormalized = PropertyList::new(
                ps.entries().iter().map(|e| (e.key.clone(), e.value.clone())).collect(),
            )
            .unwrap();
            prop_assert_eq!(renormalized, ps);
        }

        /// Adding unrelated keys never flips a satisfied match to false.
        #[test]
        fn satisfied_match_is_monotone_under_unrelated_keys(
            cs in proptest::collection::vec(constraint_strategy(), 1..5),
            ps in property_list_strategy(),
            extra_key in "[g-j]{2}",
            extra_val in scalar_strategy(),
        ) {
            if satisfies(&cs, &ps) == Ok(true) {
                let mut entries: Vec<(String, Scalar)> = ps
                    .entries()
                    .iter()
                    .map(|e| (e.key.clone(), e.value.clone()))
                    .collect();
                entries.push((extra_key, extra_val));
                let widened = PropertyList::new(entries).unwrap();
                prop_assert_eq!(satisfies(&cs, &widened), Ok(true));
            }
        }
    }
}
