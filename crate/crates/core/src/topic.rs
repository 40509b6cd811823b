//! Topic names, topic filters and the subscription trie.

use std::collections::HashMap;
use std::fmt;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TopicError {
    #[error("topic is empty")]
    Empty,
    #[error("topic is longer than 65535 bytes")]
    TooLong,
    #[error("topic contains NUL")]
    Nul,
    #[error("topic name contains a wildcard")]
    Wildcard,
    #[error("'#' must be the last level and occupy it entirely")]
    MisplacedMultiLevel,
    #[error("'+' must occupy an entire level")]
    MisplacedSingleLevel,
}

fn check_common(s: &str) -> Result<(), TopicError> {
    if s.is_empty() {
        return Err(TopicError::Empty);
    }
    if s.len() > u16::MAX as usize {
        return Err(TopicError::TooLong);
    }
    if s.contains('\0') {
        return Err(TopicError::Nul);
    }
    Ok(())
}

/// A concrete, wildcard free topic such as `sensors/node1/data`.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let s = s.into();
        check_common(&s)?;
        if s.contains(['+', '#']) {
            return Err(TopicError::Wildcard);
        }
        Ok(TopicName(s))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn levels(&self) -> std::str::Split<'_, char> {
        self.0.split('/')
    }

    pub fn is_system(&self) -> bool {
        self.0.starts_with('$')
    }
}

impl fmt::Display for TopicName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl AsRef<str> for TopicName {
    fn as_ref(&self) -> &str {
        &self.0
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum FilterLevel {
    Literal(String),
    SingleLevel,
    MultiLevel,
}

/// A subscription pattern; `+` matches one level and a trailing `#` matches
/// any number of remaining levels (including none).
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct TopicFilter {
    raw: String,
    levels: Vec<FilterLevel>,
}

impl TopicFilter {
    pub fn new(s: impl Into<String>) -> Result<Self, TopicError> {
        let raw = s.into();
        check_common(&raw)?;
        let parts: Vec<&str> = raw.split('/').collect();
        let mut levels = Vec::with_capacity(parts.len());
        for (i, part) in parts.iter().enumerate() {
            let level = match *part {
                "#" if i + 1 == parts.len() => FilterLevel::MultiLevel,
                "#" => return Err(TopicError::MisplacedMultiLevel),
                "+" => FilterLevel::SingleLevel,
                p if p.contains('#') => return Err(TopicError::MisplacedMultiLevel),
                p if p.contains('+') => return Err(TopicError::MisplacedSingleLevel),
                p => FilterLevel::Literal(p.to_owned()),
            };
            levels.push(level);
        }
        Ok(TopicFilter { raw, levels })
    }

    pub fn as_str(&self) -> &str {
        &self.raw
    }

    pub fn levels(&self) -> &[FilterLevel] {
        &self.levels
    }

    pub fn starts_with_wildcard(&self) -> bool {
        !matches!(self.levels[0], FilterLevel::Literal(_))
    }

    pub fn matches(&self, topic: &TopicName) -> bool {
        topic_matches(self, topic)
    }
}

impl fmt::Display for TopicFilter {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.raw)
    }
}

/// True iff `filter` selects `topic`. Filters whose first level is a
/// wildcard never match topics starting with `$`.
pub fn topic_matches(filter: &TopicFilter, topic: &TopicName) -> bool {
    if topic.is_system() && filter.starts_with_wildcard() {
        return false;
    }
    let mut topic_levels = topic.levels();
    for level in &filter.levels {
        match level {
            FilterLevel::MultiLevel => return true,
            FilterLevel::SingleLevel => {
                if topic_levels.next().is_none() {
                    return false;
                }
            }
            FilterLevel::Literal(lit) => match topic_levels.next() {
                Some(t) if t == lit => {}
                _ => return false,
            },
        }
    }
    topic_levels.next().is_none()
}

#[derive(Debug)]
struct TrieNode<K> {
    children: HashMap<String, TrieNode<K>>,
    single: Option<Box<TrieNode<K>>>,
    /// Subscribers of `<prefix>/#`.
    multi: Vec<K>,
    /// Subscribers whose filter ends exactly here.
    exact: Vec<K>,
}

impl<K> Default for TrieNode<K> {
    fn default() -> Self {
        TrieNode {
            children: HashMap::new(),
            single: None,
            multi: Vec::new(),
            exact: Vec::new(),
        }
    }
}

impl<K> TrieNode<K> {
    fn is_empty(&self) -> bool {
        self.children.is_empty() && self.single.is_none() && self.multi.is_empty() && self.exact.is_empty()
    }
}

/// Maps topic filters to subscriber keys. A key appears at most once per
/// filter; a key subscribed through several overlapping filters is reported
/// once per matching filter by [`SubscriptionTrie::matches`].
#[derive(Debug)]
pub struct SubscriptionTrie<K> {
    root: TrieNode<K>,
    len: usize,
}

impl<K> Default for SubscriptionTrie<K> {
    fn default() -> Self {
        SubscriptionTrie {
            root: TrieNode::default(),
            len: 0,
        }
    }
}

impl<K: Clone + Eq> SubscriptionTrie<K> {
    pub fn new() -> Self {
        Self::default()
    }

    /// Number of (filter, key) pairs stored.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Returns false if the key was already subscribed to this filter.
    pub fn insert(&mut self, filter: &TopicFilter, key: K) -> bool {
        let mut node = &mut self.root;
        for level in &filter.levels {
            node = match level {
                FilterLevel::Literal(l) => node.children.entry(l.clone()).or_default(),
                FilterLevel::SingleLevel => node.single.get_or_insert_with(Default::default),
                FilterLevel::MultiLevel => {
                    return push_unique(&mut node.multi, key, &mut self.len);
                }
            };
        }
        push_unique(&mut node.exact, key, &mut self.len)
    }

    pub fn remove(&mut self, filter: &TopicFilter, key: &K) -> bool {
        let removed = remove_rec(&mut self.root, &filter.levels, key);
        if removed {
            self.len -= 1;
        }
        removed
    }

    /// Calls `f` once for every (filter, key) pair whose filter matches.
    pub fn for_each_match(&self, topic: &TopicName, mut f: impl FnMut(&K)) {
        let levels: Vec<&str> = topic.levels().collect();
        let system = topic.is_system();
        walk(&self.root, &levels, 0, system, &mut f);
    }

    pub fn matches(&self, topic: &TopicName) -> Vec<K> {
        let mut out = Vec::new();
        self.for_each_match(topic, |k| out.push(k.clone()));
        out
    }
}

fn push_unique<K: Eq>(v: &mut Vec<K>, key: K, len: &mut usize) -> bool {
    if v.contains(&key) {
        return false;
    }
    v.push(key);
    *len += 1;
    true
}

fn walk<K>(node: &TrieNode<K>, levels: &[&str], depth: usize, system: bool, f: &mut impl FnMut(&K)) {
    let wildcards_allowed = !(system && depth == 0);
    if wildcards_allowed {
        node.multi.iter().for_each(&mut *f);
    }
    let Some(level) = levels.get(depth) else {
        node.exact.iter().for_each(&mut *f);
        return;
    };
    if let Some(child) = node.children.get(*level) {
        walk(child, levels, depth + 1, system, f);
    }
    if wildcards_allowed {
        if let Some(single) = &node.single {
            walk(single, levels, depth + 1, system, f);
        }
    }
}

fn remove_rec<K: Eq>(node: &mut TrieNode<K>, levels: &[FilterLevel], key: &K) -> bool {
    let Some((first, rest)) = levels.split_first() else {
        return remove_key(&mut node.exact, key);
    };
    match first {
        FilterLevel::MultiLevel => remove_key(&mut node.multi, key),
        FilterLevel::SingleLevel => {
            let Some(child) = node.single.as_mut() else {
                return false;
            };
            let removed = remove_rec(child, rest, key);
            if child.is_empty() {
                node.single = None;
            }
            removed
        }
        FilterLevel::Literal(l) => {
            let Some(child) = node.children.get_mut(l) else {
                return false;
            };
            let removed = remove_rec(child, rest, key);
            if child.is_empty() {
                node.children.remove(l);
            }
            removed
        }
    }
}

fn remove_key<K: Eq>(v: &mut Vec<K>, key: &K) -> bool {
    match v.iter().position(|k| k == key) {
        Some(i) => {
            v.swap_remove(i);
            true
        }
        None => false,
    }
}
