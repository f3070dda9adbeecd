//! Data model for items, requests, functionalities, and interaction logs,
//! plus the leave-last-out split and history-window selection.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::{String, ToString};
use alloc::vec::Vec;

use core::fmt;

/// The three information-access functionalities served by one model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Functionality {
    KeywordSearch = 0,
    QueryByExample = 1,
    ComplementaryRec = 2,
}

impl Functionality {
    pub const ALL: [Functionality; 3] = [
        Functionality::KeywordSearch,
        Functionality::QueryByExample,
        Functionality::ComplementaryRec,
    ];

    pub fn from_id(id: u8) -> Result<Self, CorpusError> {
        match id {
            0 => Ok(Functionality::KeywordSearch),
            1 => Ok(Functionality::QueryByExample),
            2 => Ok(Functionality::ComplementaryRec),
            other => Err(CorpusError::BadFunctionality(other)),
        }
    }

    pub fn id(self) -> u8 {
        self as u8
    }

    pub fn name(self) -> &'static str {
        match self {
            Functionality::KeywordSearch => "search",
            Functionality::QueryByExample => "qbe",
            Functionality::ComplementaryRec => "cir",
        }
    }
}

/// Natural-language description of a functionality, fed to the request
/// encoder alongside the request text.
#[derive(Debug, Clone)]
pub struct FunctionalityDescriptor {
    pub functionality: Functionality,
    pub name: String,
    pub description: String,
}

/// The three default descriptors; pairwise distinct description text.
pub fn default_descriptors() -> [FunctionalityDescriptor; 3] {
    [
        FunctionalityDescriptor {
            functionality: Functionality::KeywordSearch,
            name: "keyword search".to_string(),
            description: "keyword search find and retrieve the items that match the words of this short text query"
                .to_string(),
        },
        FunctionalityDescriptor {
            functionality: Functionality::QueryByExample,
            name: "query by example".to_string(),
            description: "query by example find other similar items nearly identical substitutes from the same category as this anchor item"
                .to_string(),
        },
        FunctionalityDescriptor {
            functionality: Functionality::ComplementaryRec,
            name: "complementary item recommendation".to_string(),
            description: "complementary recommendation suggest accessory add on items from other different categories that go well together with this anchor item"
                .to_string(),
        },
    ]
}

/// One catalog entry: opaque id plus pre-flattened text content.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Item {
    pub item_id: String,
    pub text: String,
}

/// Immutable item catalog with input-order iteration and an id lookup.
#[derive(Debug, Clone)]
pub struct ItemCollection {
    items: Vec<Item>,
    by_id: BTreeMap<String, usize>,
}

impl ItemCollection {
    /// Validates ids (nonempty, unique) and text (nonempty); keeps input order.
    pub fn from_items(items: Vec<Item>) -> Result<Self, CorpusError> {
        if items.is_empty() {
            return Err(CorpusError::EmptyCollection);
        }
        let mut by_id = BTreeMap::new();
        for (ord, item) in items.iter().enumerate() {
            if item.item_id.is_empty() {
                return Err(CorpusError::EmptyItemId { ordinal: ord });
            }
            if item.text.is_empty() {
                return Err(CorpusError::EmptyItemText {
                    item_id: item.item_id.clone(),
                });
            }
            if by_id.insert(item.item_id.clone(), ord).is_some() {
                return Err(CorpusError::DuplicateItemId {
                    item_id: item.item_id.clone(),
                });
            }
        }
        Ok(ItemCollection { items, by_id })
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, ordinal: usize) -> &Item {
        &self.items[ordinal]
    }

    pub fn ordinal_of(&self, item_id: &str) -> Option<usize> {
        self.by_id.get(item_id).copied()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Item> {
        self.items.iter()
    }
}

/// Request payload: free text for keyword search, an anchor item otherwise.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum RequestPayload {
    QueryText(String),
    AnchorItem(String),
}

/// An information-access request: the functionality plus its payload.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub functionality: Functionality,
    pub payload: RequestPayload,
}

impl Request {
    /// Checks the payload kind against the functionality and resolves anchors.
    pub fn validate(&self, items: &ItemCollection) -> Result<(), CorpusError> {
        match (&self.functionality, &self.payload) {
            (Functionality::KeywordSearch, RequestPayload::QueryText(_)) => Ok(()),
            (Functionality::KeywordSearch, RequestPayload::AnchorItem(_)) => {
                Err(CorpusError::PayloadKindMismatch {
                    functionality: self.functionality,
                })
            }
            (_, RequestPayload::QueryText(_)) => Err(CorpusError::PayloadKindMismatch {
                functionality: self.functionality,
            }),
            (_, RequestPayload::AnchorItem(id)) => {
                if items.ordinal_of(id).is_some() {
                    Ok(())
                } else {
                    Err(CorpusError::UnresolvedItem { item_id: id.clone() })
                }
            }
        }
    }

    /// Text the request is represented by: the query itself, or the anchor
    /// item's content.
    pub fn text_form<'a>(&'a self, items: &'a ItemCollection) -> &'a str {
        match &self.payload {
            RequestPayload::QueryText(q) => q,
            RequestPayload::AnchorItem(id) => {
                let ord = items
                    .ordinal_of(id)
                    .expect("anchor validated at ingestion");
                &items.get(ord).text
            }
        }
    }

    /// Canonical key identifying identical requests, used to pool positives
    /// during negative mining.
    pub fn key(&self) -> String {
        match &self.payload {
            RequestPayload::QueryText(q) => format!("{}|q|{}", self.functionality.id(), q),
            RequestPayload::AnchorItem(id) => format!("{}|a|{}", self.functionality.id(), id),
        }
    }
}

/// One timestamped user event; the atom of training and evaluation data.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Interaction {
    /// `None` marks anonymous data; all anonymous events share one
    /// pseudo-user and personalization is disabled for them.
    pub user_id: Option<String>,
    pub timestamp: u64,
    pub request: Request,
    pub clicked_item_id: String,
}

/// Interactions grouped per user and normalized so that each user's
/// timestamps are strictly increasing. Immutable after construction.
#[derive(Debug, Clone)]
pub struct InteractionLog {
    interactions: Vec<Interaction>,
    users: Vec<Option<String>>,
    user_slots: BTreeMap<Option<String>, usize>,
    by_user: Vec<Vec<usize>>,
}

impl InteractionLog {
    /// Groups by user (first-appearance order), sorts each group by
    /// timestamp with ties broken by input order, then bumps tied
    /// timestamps so every user stream is strictly increasing.
    pub fn from_interactions(
        raw: Vec<Interaction>,
        items: &ItemCollection,
    ) -> Result<Self, CorpusError> {
        let mut users: Vec<Option<String>> = Vec::new();
        let mut user_slots: BTreeMap<Option<String>, usize> = BTreeMap::new();
        let mut pending: Vec<Vec<(usize, Interaction)>> = Vec::new();

        for (input_ord, inter) in raw.into_iter().enumerate() {
            inter.request.validate(items)?;
            if items.ordinal_of(&inter.clicked_item_id).is_none() {
                return Err(CorpusError::UnresolvedItem {
                    item_id: inter.clicked_item_id.clone(),
                });
            }
            let slot = *user_slots.entry(inter.user_id.clone()).or_insert_with(|| {
                users.push(inter.user_id.clone());
                pending.push(Vec::new());
                users.len() - 1
            });
            pending[slot].push((input_ord, inter));
        }

        let mut interactions = Vec::new();
        let mut by_user = Vec::with_capacity(users.len());
        for group in pending.iter_mut() {
            group.sort_by_key(|(input_ord, inter)| (inter.timestamp, *input_ord));
            let mut indices = Vec::with_capacity(group.len());
            let mut prev_ts: Option<u64> = None;
            for (_, mut inter) in group.drain(..) {
                if let Some(p) = prev_ts {
                    if inter.timestamp <= p {
                        inter.timestamp = p + 1;
                    }
                }
                prev_ts = Some(inter.timestamp);
                indices.push(interactions.len());
                interactions.push(inter);
            }
            by_user.push(indices);
        }

        Ok(InteractionLog {
            interactions,
            users,
            user_slots,
            by_user,
        })
    }

    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    pub fn get(&self, index: usize) -> &Interaction {
        &self.interactions[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Interaction> {
        self.interactions.iter()
    }

    pub fn num_users(&self) -> usize {
        self.users.len()
    }

    pub fn user_key(&self, slot: usize) -> &Option<String> {
        &self.users[slot]
    }

    pub fn user_slot(&self, user: &Option<String>) -> Option<usize> {
        self.user_slots.get(user).copied()
    }

    /// Interaction indices of one user, chronological.
    pub fn user_interactions(&self, slot: usize) -> &[usize] {
        &self.by_user[slot]
    }

    /// Up-to-`n` most recent interactions of `user` strictly before `t`,
    /// chronological, across all functionalities unless `only` is given.
    /// Unknown users yield an empty window.
    pub fn select_history(
        &self,
        user: &Option<String>,
        t: u64,
        n: usize,
        only: Option<Functionality>,
    ) -> Vec<usize> {
        assert!(n >= 1, "history window must hold at least one entry");
        let Some(slot) = self.user_slot(user) else {
            return Vec::new();
        };
        let stream = &self.by_user[slot];
        let mut picked: Vec<usize> = Vec::new();
        for &idx in stream.iter().rev() {
            let inter = &self.interactions[idx];
            if inter.timestamp >= t {
                continue;
            }
            if let Some(f) = only {
                if inter.request.functionality != f {
                    continue;
                }
            }
            picked.push(idx);
            if picked.len() == n {
                break;
            }
        }
        picked.reverse();
        picked
    }
}

/// Train/valid/test interaction indices under the leave-last-out protocol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub valid: Vec<usize>,
    pub test: Vec<usize>,
}

/// Per user and functionality: the latest interaction goes to test and the
/// second latest to validation when the stream has at least three entries.
/// Two-entry streams give last to test and first to train; singletons train.
pub fn leave_last_out_split(log: &InteractionLog) -> DatasetSplit {
    let mut train = Vec::new();
    let mut valid = Vec::new();
    let mut test = Vec::new();
    for slot in 0..log.num_users() {
        let mut per_func: BTreeMap<u8, Vec<usize>> = BTreeMap::new();
        for &idx in log.user_interactions(slot) {
            per_func
                .entry(log.get(idx).request.functionality.id())
                .or_default()
                .push(idx);
        }
        for (_, stream) in per_func {
            match stream.len() {
                0 => unreachable!(),
                1 => train.push(stream[0]),
                2 => {
                    train.push(stream[0]);
                    test.push(stream[1]);
                }
                n => {
                    train.extend_from_slice(&stream[..n - 2]);
                    valid.push(stream[n - 2]);
                    test.push(stream[n - 1]);
                }
            }
        }
    }
    train.sort_unstable();
    valid.sort_unstable();
    test.sort_unstable();
    DatasetSplit { train, valid, test }
}

/// Relevance class of one ESCI-style judgment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EsciLabel {
    Exact,
    Substitute,
    Complement,
    Irrelevant,
}

impl EsciLabel {
    pub fn from_letter(s: &str) -> Result<Self, CorpusError> {
        match s {
            "E" => Ok(EsciLabel::Exact),
            "S" => Ok(EsciLabel::Substitute),
            "C" => Ok(EsciLabel::Complement),
            "I" => Ok(EsciLabel::Irrelevant),
            other => Err(CorpusError::BadEsciLabel(other.to_string())),
        }
    }
}

/// One (query, item, label) judgment.
#[derive(Debug, Clone)]
pub struct EsciJudgment {
    pub query: String,
    pub item_id: String,
    pub label: EsciLabel,
}

/// Pairs derived from ESCI judgments, one set per functionality.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EsciTriples {
    /// (query text, exact item)
    pub search: Vec<(String, String)>,
    /// (exact item, substitute item)
    pub qbe: Vec<(String, String)>,
    /// (exact item, complement item)
    pub cir: Vec<(String, String)>,
}

/// Builds search pairs from E items, query-by-example pairs from E x S, and
/// complementary pairs from E x C, per query. Queries are processed in first
/// appearance order; items keep judgment order.
pub fn esci_to_triples(judgments: &[EsciJudgment]) -> EsciTriples {
    let mut query_order: Vec<&str> = Vec::new();
    let mut per_query: BTreeMap<&str, (Vec<&str>, Vec<&str>, Vec<&str>)> = BTreeMap::new();
    for j in judgments {
        if !per_query.contains_key(j.query.as_str()) {
            query_order.push(&j.query);
        }
        let entry = per_query.entry(&j.query).or_default();
        match j.label {
            EsciLabel::Exact => entry.0.push(&j.item_id),
            EsciLabel::Substitute => entry.1.push(&j.item_id),
            EsciLabel::Complement => entry.2.push(&j.item_id),
            EsciLabel::Irrelevant => {}
        }
    }

    let mut out = EsciTriples::default();
    for q in query_order {
        let (exact, subs, comps) = &per_query[q];
        for e in exact {
            out.search.push((q.to_string(), e.to_string()));
        }
        for e in exact {
            for s in subs {
                out.qbe.push((e.to_string(), s.to_string()));
            }
        }
        for e in exact {
            for c in comps {
                out.cir.push((e.to_string(), c.to_string()));
            }
        }
    }
    out
}

impl EsciTriples {
    /// Emits the pairs as anonymous interactions with sequential timestamps,
    /// search first, then query-by-example, then complementary pairs.
    pub fn to_interactions(&self) -> Vec<Interaction> {
        let mut out = Vec::with_capacity(self.search.len() + self.qbe.len() + self.cir.len());
        let mut ts = 0u64;
        let mut push = |functionality, payload, clicked: &String, ts: &mut u64| {
            *ts += 1;
            out.push(Interaction {
                user_id: None,
                timestamp: *ts,
                request: Request {
                    functionality,
                    payload,
                },
                clicked_item_id: clicked.clone(),
            });
        };
        for (q, item) in &self.search {
            push(
                Functionality::KeywordSearch,
                RequestPayload::QueryText(q.clone()),
                item,
                &mut ts,
            );
        }
        for (anchor, item) in &self.qbe {
            push(
                Functionality::QueryByExample,
                RequestPayload::AnchorItem(anchor.clone()),
                item,
                &mut ts,
            );
        }
        for (anchor, item) in &self.cir {
            push(
                Functionality::ComplementaryRec,
                RequestPayload::AnchorItem(anchor.clone()),
                item,
                &mut ts,
            );
        }
        out
    }
}

/// Minimum interaction counts a user needs per functionality to enter the
/// personalized fine-tuning data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FinetuneThresholds {
    pub search: usize,
    pub qbe: usize,
    pub cir: usize,
}

impl Default for FinetuneThresholds {
    fn default() -> Self {
        FinetuneThresholds {
            search: 10,
            qbe: 10,
            cir: 5,
        }
    }
}

impl FinetuneThresholds {
    pub fn for_functionality(&self, f: Functionality) -> usize {
        match f {
            Functionality::KeywordSearch => self.search,
            Functionality::QueryByExample => self.qbe,
            Functionality::ComplementaryRec => self.cir,
        }
    }
}

/// User slots eligible for fine-tuning, per functionality. Anonymous data is
/// never eligible.
pub fn filter_users_for_finetune(
    log: &InteractionLog,
    thresholds: FinetuneThresholds,
) -> BTreeMap<Functionality, BTreeSet<usize>> {
    let mut eligible: BTreeMap<Functionality, BTreeSet<usize>> = Functionality::ALL
        .iter()
        .map(|f| (*f, BTreeSet::new()))
        .collect();
    for slot in 0..log.num_users() {
        if log.user_key(slot).is_none() {
            continue;
        }
        let mut counts: BTreeMap<Functionality, usize> = BTreeMap::new();
        for &idx in log.user_interactions(slot) {
            *counts.entry(log.get(idx).request.functionality).or_insert(0) += 1;
        }
        for f in Functionality::ALL {
            if counts.get(&f).copied().unwrap_or(0) >= thresholds.for_functionality(f) {
                eligible.get_mut(&f).unwrap().insert(slot);
            }
        }
    }
    eligible
}

/// Errors raised while building corpus structures.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum CorpusError {
    EmptyCollection,
    EmptyItemId { ordinal: usize },
    EmptyItemText { item_id: String },
    DuplicateItemId { item_id: String },
    UnresolvedItem { item_id: String },
    BadFunctionality(u8),
    PayloadKindMismatch { functionality: Functionality },
    BadEsciLabel(String),
}

impl fmt::Display for CorpusError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CorpusError::EmptyCollection => write!(f, "empty collection"),
            CorpusError::EmptyItemId { ordinal } => {
                write!(f, "item at position {ordinal} has an empty id")
            }
            CorpusError::EmptyItemText { item_id } => {
                write!(f, "item {item_id:?} has empty text")
            }
            CorpusError::DuplicateItemId { item_id } => {
                write!(f, "duplicate item id {item_id:?}")
            }
            CorpusError::UnresolvedItem { item_id } => {
                write!(f, "item id {item_id:?} does not resolve in the collection")
            }
            CorpusError::BadFunctionality(id) => {
                write!(f, "functionality id {id} outside 0..=2")
            }
            CorpusError::PayloadKindMismatch { functionality } => write!(
                f,
                "payload kind not valid for functionality {}",
                functionality.name()
            ),
            CorpusError::BadEsciLabel(s) => write!(f, "unknown ESCI label {s:?}"),
        }
    }
}

#[cfg(feature = "std")]
impl std::error::Error for CorpusError {}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec;

    fn item(id: &str, text: &str) -> Item {
        Item {
            item_id: id.to_string(),
            text: text.to_string(),
        }
    }

    fn collection(n: usize) -> ItemCollection {
        let items = (0..n)
            .map(|i| item(&format!("i{i}"), &format!("item number {i}")))
            .collect();
        ItemCollection::from_items(items).unwrap()
    }

    fn search(user: &str, ts: u64, q: &str, clicked: &str) -> Interaction {
        Interaction {
            user_id: Some(user.to_string()),
            timestamp: ts,
            request: Request {
                functionality: Functionality::KeywordSearch,
                payload: RequestPayload::QueryText(q.to_string()),
            },
            clicked_item_id: clicked.to_string(),
        }
    }

    #[test]
    fn collection_counts_and_order() {
        let c = collection(3);
        assert_eq!(c.len(), 3);
        let ids: Vec<_> = c.iter().map(|i| i.item_id.as_str()).collect();
        assert_eq!(ids, vec!["i0", "i1", "i2"]);
    }

    #[test]
    fn duplicate_item_id_is_named_in_error() {
        let items = vec![item("A1", "x"), item("A1", "y")];
        let err = ItemCollection::from_items(items).unwrap_err();
        assert_eq!(
            err,
            CorpusError::DuplicateItemId {
                item_id: "A1".to_string()
            }
        );
    }

    #[test]
    fn empty_collection_is_an_error() {
        assert_eq!(
            ItemCollection::from_items(Vec::new()).unwrap_err(),
            CorpusError::EmptyCollection
        );
    }

    #[test]
    fn log_sorts_by_timestamp_within_user() {
        let c = collection(2);
        let raw = vec![search("u", 5, "b", "i1"), search("u", 3, "a", "i0")];
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        assert_eq!(log.get(0).timestamp, 3);
        assert_eq!(log.get(1).timestamp, 5);
    }

    #[test]
    fn tied_timestamps_become_strictly_increasing() {
        let c = collection(3);
        let raw = vec![
            search("u", 5, "a", "i0"),
            search("u", 5, "b", "i1"),
            search("u", 5, "c", "i2"),
        ];
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let ts: Vec<u64> = log.iter().map(|i| i.timestamp).collect();
        assert_eq!(ts, vec![5, 6, 7]);
        // input order preserved for ties
        let clicked: Vec<_> = log.iter().map(|i| i.clicked_item_id.as_str()).collect();
        assert_eq!(clicked, vec!["i0", "i1", "i2"]);
    }

    #[test]
    fn unresolved_click_is_rejected() {
        let c = collection(1);
        let raw = vec![search("u", 1, "a", "nope")];
        let err = InteractionLog::from_interactions(raw, &c).unwrap_err();
        assert!(matches!(err, CorpusError::UnresolvedItem { .. }));
    }

    #[test]
    fn log_groups_users() {
        let c = collection(4);
        let mut raw = Vec::new();
        for u in 0..10 {
            for t in 0..4 {
                raw.push(search(&format!("u{u}"), t as u64 + 1, "q", &format!("i{t}")));
            }
        }
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        assert_eq!(log.len(), 40);
        assert_eq!(log.num_users(), 10);
    }

    #[test]
    fn split_follows_leave_last_out() {
        let c = collection(5);
        let raw: Vec<_> = (1..=5).map(|t| search("u", t, "q", &format!("i{}", t - 1))).collect();
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let split = leave_last_out_split(&log);
        assert_eq!(split.train, vec![0, 1, 2]);
        assert_eq!(split.valid, vec![3]);
        assert_eq!(split.test, vec![4]);
    }

    #[test]
    fn split_degenerate_users() {
        let c = collection(2);
        // one interaction: train only
        let log1 =
            InteractionLog::from_interactions(vec![search("u", 1, "q", "i0")], &c).unwrap();
        let s1 = leave_last_out_split(&log1);
        assert_eq!((s1.train.len(), s1.valid.len(), s1.test.len()), (1, 0, 0));

        // two interactions: first to train, last to test
        let log2 = InteractionLog::from_interactions(
            vec![search("u", 1, "q", "i0"), search("u", 2, "q", "i1")],
            &c,
        )
        .unwrap();
        let s2 = leave_last_out_split(&log2);
        assert_eq!(s2.train, vec![0]);
        assert!(s2.valid.is_empty());
        assert_eq!(s2.test, vec![1]);
    }

    #[test]
    fn split_three_users_three_each() {
        // hand enumeration: each user contributes one interaction per split
        let c = collection(3);
        let mut raw = Vec::new();
        for u in 0..3 {
            for t in 1..=3 {
                raw.push(search(&format!("u{u}"), t, "q", &format!("i{}", t - 1)));
            }
        }
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let split = leave_last_out_split(&log);
        assert_eq!(split.train.len(), 3);
        assert_eq!(split.valid.len(), 3);
        assert_eq!(split.test.len(), 3);
    }

    #[test]
    fn split_partitions_the_log() {
        let c = collection(4);
        let mut raw = Vec::new();
        for u in 0..4 {
            for t in 1..=(u + 1) as u64 {
                raw.push(search(&format!("u{u}"), t, "q", "i0"));
            }
        }
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let split = leave_last_out_split(&log);
        let mut all: Vec<usize> = split
            .train
            .iter()
            .chain(&split.valid)
            .chain(&split.test)
            .copied()
            .collect();
        all.sort_unstable();
        let expect: Vec<usize> = (0..log.len()).collect();
        assert_eq!(all, expect);
    }

    #[test]
    fn history_takes_most_recent_before_t() {
        let c = collection(8);
        let raw: Vec<_> = (1..=7).map(|t| search("u", t, "q", &format!("i{}", t - 1))).collect();
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let user = Some("u".to_string());
        let h = log.select_history(&user, 8, 5, None);
        let ts: Vec<u64> = h.iter().map(|&i| log.get(i).timestamp).collect();
        assert_eq!(ts, vec![3, 4, 5, 6, 7]);
    }

    #[test]
    fn history_shorter_than_window() {
        let c = collection(3);
        let raw = vec![search("u", 1, "q", "i0"), search("u", 2, "q", "i1")];
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let h = log.select_history(&Some("u".to_string()), 10, 5, None);
        assert_eq!(h.len(), 2);
    }

    #[test]
    fn history_for_unknown_user_is_empty() {
        let c = collection(1);
        let log =
            InteractionLog::from_interactions(vec![search("u", 1, "q", "i0")], &c).unwrap();
        assert!(log
            .select_history(&Some("ghost".to_string()), 10, 5, None)
            .is_empty());
    }

    #[test]
    fn history_is_chronological_and_bounded() {
        let c = collection(8);
        let raw: Vec<_> = (1..=7).map(|t| search("u", t, "q", &format!("i{}", t - 1))).collect();
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        for t in 1..=8 {
            let h = log.select_history(&Some("u".to_string()), t, 3, None);
            assert!(h.len() <= 3);
            let ts: Vec<u64> = h.iter().map(|&i| log.get(i).timestamp).collect();
            assert!(ts.windows(2).all(|w| w[0] < w[1]));
            assert!(ts.iter().all(|&x| x < t));
        }
    }

    #[test]
    fn esci_basic_triples() {
        let judgments = vec![
            EsciJudgment {
                query: "q".to_string(),
                item_id: "a".to_string(),
                label: EsciLabel::Exact,
            },
            EsciJudgment {
                query: "q".to_string(),
                item_id: "b".to_string(),
                label: EsciLabel::Substitute,
            },
            EsciJudgment {
                query: "q".to_string(),
                item_id: "c".to_string(),
                label: EsciLabel::Complement,
            },
        ];
        let t = esci_to_triples(&judgments);
        assert_eq!(t.search, vec![("q".to_string(), "a".to_string())]);
        assert_eq!(t.qbe, vec![("a".to_string(), "b".to_string())]);
        assert_eq!(t.cir, vec![("a".to_string(), "c".to_string())]);
    }

    #[test]
    fn esci_cartesian_product() {
        // hand enumeration of {a1,a2} x {b}
        let judgments = vec![
            EsciJudgment {
                query: "q".to_string(),
                item_id: "a1".to_string(),
                label: EsciLabel::Exact,
            },
            EsciJudgment {
                query: "q".to_string(),
                item_id: "a2".to_string(),
                label: EsciLabel::Exact,
            },
            EsciJudgment {
                query: "q".to_string(),
                item_id: "b".to_string(),
                label: EsciLabel::Substitute,
            },
        ];
        let t = esci_to_triples(&judgments);
        assert_eq!(
            t.qbe,
            vec![
                ("a1".to_string(), "b".to_string()),
                ("a2".to_string(), "b".to_string())
            ]
        );
    }

    #[test]
    fn esci_empty_exact_contributes_nothing() {
        let judgments = vec![EsciJudgment {
            query: "q".to_string(),
            item_id: "b".to_string(),
            label: EsciLabel::Substitute,
        }];
        let t = esci_to_triples(&judgments);
        assert!(t.search.is_empty());
        assert!(t.qbe.is_empty());
        assert!(t.cir.is_empty());
    }

    #[test]
    fn esci_interactions_are_anonymous_with_sequential_timestamps() {
        let judgments = vec![
            EsciJudgment {
                query: "q".to_string(),
                item_id: "a".to_string(),
                label: EsciLabel::Exact,
            },
            EsciJudgment {
                query: "q".to_string(),
                item_id: "b".to_string(),
                label: EsciLabel::Substitute,
            },
        ];
        let inters = esci_to_triples(&judgments).to_interactions();
        assert_eq!(inters.len(), 2);
        assert!(inters.iter().all(|i| i.user_id.is_none()));
        let ts: Vec<u64> = inters.iter().map(|i| i.timestamp).collect();
        assert_eq!(ts, vec![1, 2]);
    }

    #[test]
    fn finetune_eligibility_thresholds() {
        let c = collection(1);
        let mut raw = Vec::new();
        for t in 1..=12 {
            raw.push(search("heavy", t, "q", "i0"));
        }
        for t in 1..=5 {
            raw.push(Interaction {
                user_id: Some("cir_user".to_string()),
                timestamp: t,
                request: Request {
                    functionality: Functionality::ComplementaryRec,
                    payload: RequestPayload::AnchorItem("i0".to_string()),
                },
                clicked_item_id: "i0".to_string(),
            });
        }
        raw.push(search("light", 1, "q", "i0"));
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let eligible = filter_users_for_finetune(&log, FinetuneThresholds::default());

        let heavy = log.user_slot(&Some("heavy".to_string())).unwrap();
        let cir_user = log.user_slot(&Some("cir_user".to_string())).unwrap();
        let light = log.user_slot(&Some("light".to_string())).unwrap();

        assert!(eligible[&Functionality::KeywordSearch].contains(&heavy));
        assert!(!eligible[&Functionality::KeywordSearch].contains(&light));
        assert!(eligible[&Functionality::ComplementaryRec].contains(&cir_user));
        assert!(!eligible[&Functionality::QueryByExample].contains(&heavy));
    }

    #[test]
    fn anonymous_users_never_eligible() {
        let c = collection(1);
        let raw: Vec<_> = (1..=20)
            .map(|t| Interaction {
                user_id: None,
                timestamp: t,
                request: Request {
                    functionality: Functionality::KeywordSearch,
                    payload: RequestPayload::QueryText("q".to_string()),
                },
                clicked_item_id: "i0".to_string(),
            })
            .collect();
        let log = InteractionLog::from_interactions(raw, &c).unwrap();
        let eligible = filter_users_for_finetune(&log, FinetuneThresholds::default());
        assert!(eligible[&Functionality::KeywordSearch].is_empty());
    }
}
