//! Seeded generator of a synthetic e-commerce world with known latent
//! structure: items belong to categories with overlapping token pools and
//! carry a style token; categories form an irreflexive complement graph;
//! users hold concentrated preferences over categories and styles. Clicks
//! follow those preferences, so personalization is learnable, and the three
//! functionalities have disjoint positive sets for one anchor, so the model
//! must use the functionality input.

use alloc::collections::{BTreeMap, BTreeSet};
use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::corpus::{
    Functionality, Interaction, InteractionLog, Item, ItemCollection, Request, RequestPayload,
};
use crate::lexical::tokenize;
use crate::rng::Rng;

/// Size and noise knobs of the generated world.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WorldConfig {
    pub categories: usize,
    pub items_per_category: usize,
    pub users: usize,
    pub interactions_per_user: usize,
    /// Distinct topic tokens shared (with overlap) across category pools.
    pub topic_vocab: usize,
    /// Category-pool topic tokens drawn into each item's text.
    pub tokens_per_item: usize,
    /// Item-unique tokens per item; they carry no category signal, so
    /// same-category items overlap only through the few pool tokens and
    /// category geometry must be learned rather than string-matched.
    pub unique_tokens_per_item: usize,
    /// Distinct style tokens; each item carries one, each user prefers one.
    pub styles: usize,
    /// Complement categories per category (at least 1, capped below).
    pub complement_degree: usize,
    /// Probability mass of a user's top preferred category (rest decays).
    pub preference_concentration: f64,
    /// Probability a search query picks up an off-item noise token.
    pub noise_rate: f64,
    /// Probability a click ignores the user's style preference.
    pub style_slip: f64,
    /// Relative volume of search / query-by-example / complementary
    /// events. Search-heavy mixes mirror production logs and give joint
    /// training its transfer advantage on the smaller functionalities.
    pub functionality_mix: [f64; 3],
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            categories: 20,
            items_per_category: 50,
            users: 200,
            interactions_per_user: 30,
            topic_vocab: 120,
            tokens_per_item: 2,
            unique_tokens_per_item: 2,
            styles: 4,
            complement_degree: 2,
            preference_concentration: 0.8,
            noise_rate: 0.1,
            style_slip: 0.05,
            functionality_mix: [0.72, 0.18, 0.10],
            seed: 7,
        }
    }
}

impl WorldConfig {
    /// A smaller world for fast tests and determinism checks.
    pub fn tiny(seed: u64) -> Self {
        WorldConfig {
            categories: 6,
            items_per_category: 10,
            users: 24,
            interactions_per_user: 18,
            topic_vocab: 40,
            tokens_per_item: 3,
            unique_tokens_per_item: 1,
            styles: 4,
            complement_degree: 2,
            preference_concentration: 0.7,
            noise_rate: 0.05,
            style_slip: 0.1,
            functionality_mix: [1.0, 1.0, 1.0],
            seed,
        }
    }
}

/// Latent structure behind the generated interactions.
#[derive(Debug, Clone)]
pub struct WorldGroundTruth {
    /// Category per item ordinal.
    pub item_category: Vec<usize>,
    /// Style per item ordinal.
    pub item_style: Vec<usize>,
    /// Complement categories per category; irreflexive.
    pub complements: Vec<BTreeSet<usize>>,
    /// Per-user preference distribution over categories (sums to 1).
    pub user_preferences: Vec<Vec<f64>>,
    /// Per-user preferred style.
    pub user_style: Vec<usize>,
    /// Noise vocabulary used in queries; disjoint from item tokens.
    pub noise_tokens: Vec<String>,
}

/// A generated world: catalog, interaction log, and its ground truth.
#[derive(Debug, Clone)]
pub struct World {
    pub items: ItemCollection,
    pub log: InteractionLog,
    pub truth: WorldGroundTruth,
}

fn topic_token(i: usize) -> String {
    format!("w{i:03}")
}

fn style_token(i: usize) -> String {
    format!("style{i:02}")
}

fn noise_token(i: usize) -> String {
    format!("zz{i:02}")
}

fn unique_token(item: usize, k: usize) -> String {
    format!("q{item:04}{}", (b'a' + k as u8) as char)
}

/// Deterministic world generation; identical seeds yield identical worlds.
pub fn generate_world(config: &WorldConfig) -> World {
    assert!(config.categories >= 2, "complements need at least 2 categories");
    assert!(config.items_per_category >= 2);
    assert!(config.users >= 1);
    assert!(config.interactions_per_user >= 1);
    assert!((0.0..=1.0).contains(&config.noise_rate));
    assert!((0.0..=1.0).contains(&config.preference_concentration));

    let mut rng = Rng::new(config.seed);

    // category token pools: a contiguous window over the topic vocabulary,
    // stride < window so neighboring categories share tokens (ambiguity)
    let pool_size = (config.topic_vocab / config.categories).max(2) * 2;
    let pool_size = pool_size.min(config.topic_vocab);
    let mut category_pool: Vec<Vec<usize>> = Vec::with_capacity(config.categories);
    for c in 0..config.categories {
        let start = (c * config.topic_vocab) / config.categories;
        let pool: Vec<usize> = (0..pool_size)
            .map(|k| (start + k) % config.topic_vocab)
            .collect();
        category_pool.push(pool);
    }

    // irreflexive complement graph
    let degree = config.complement_degree.clamp(1, config.categories - 1);
    let mut complements: Vec<BTreeSet<usize>> = Vec::with_capacity(config.categories);
    for c in 0..config.categories {
        let mut others: Vec<usize> = (0..config.categories).filter(|&x| x != c).collect();
        rng.shuffle(&mut others);
        complements.push(others.into_iter().take(degree).collect());
    }

    // items: category pool tokens plus one style token
    let total_items = config.categories * config.items_per_category;
    let mut items = Vec::with_capacity(total_items);
    let mut item_category = Vec::with_capacity(total_items);
    let mut item_style = Vec::with_capacity(total_items);
    let mut items_by_category: Vec<Vec<usize>> = vec![Vec::new(); config.categories];
    let mut items_by_cat_style: BTreeMap<(usize, usize), Vec<usize>> = BTreeMap::new();
    for c in 0..config.categories {
        for _ in 0..config.items_per_category {
            let ord = items.len();
            let style = rng.next_below(config.styles);
            let picked =
                rng.sample_without_replacement(&category_pool[c], config.tokens_per_item);
            let mut words: Vec<String> = picked.into_iter().map(topic_token).collect();
            for k in 0..config.unique_tokens_per_item {
                words.push(unique_token(ord, k));
            }
            words.push(style_token(style));
            items.push(Item {
                item_id: format!("i{ord:04}"),
                text: words.join(" "),
            });
            item_category.push(c);
            item_style.push(style);
            items_by_category[c].push(ord);
            items_by_cat_style.entry((c, style)).or_default().push(ord);
        }
    }
    let items = ItemCollection::from_items(items).expect("generated items are valid");

    // users: decaying preference over a shuffled category ranking
    let mut user_preferences = Vec::with_capacity(config.users);
    let mut user_style = Vec::with_capacity(config.users);
    for _ in 0..config.users {
        let mut order: Vec<usize> = (0..config.categories).collect();
        rng.shuffle(&mut order);
        let mut prefs = vec![0.0; config.categories];
        let mut remaining = 1.0;
        for (rank, &cat) in order.iter().enumerate() {
            let share = if rank + 1 == order.len() {
                remaining
            } else {
                remaining * config.preference_concentration
            };
            prefs[cat] = share;
            remaining -= share;
        }
        user_preferences.push(prefs);
        user_style.push(rng.next_below(config.styles));
    }

    let noise_tokens: Vec<String> = (0..16).map(noise_token).collect();

    // interactions: each user cycles search / qbe / cir with preference-
    // and style-biased clicks
    let pick_item_in = |rng: &mut Rng,
                        category: usize,
                        style: usize,
                        exclude: Option<usize>|
     -> usize {
        let styled = items_by_cat_style.get(&(category, style));
        let use_styled = styled.map_or(false, |v| {
            v.iter().any(|&i| Some(i) != exclude)
        }) && rng.next_f64() >= config.style_slip;
        let pool: &[usize] = if use_styled {
            styled.unwrap()
        } else {
            &items_by_category[category]
        };
        loop {
            let cand = pool[rng.next_below(pool.len())];
            if Some(cand) != exclude {
                return cand;
            }
        }
    };

    let mut raw = Vec::with_capacity(config.users * config.interactions_per_user);
    for u in 0..config.users {
        let user_id = format!("u{u:03}");
        let style = user_style[u];
        let mut owned: Vec<usize> = Vec::new();
        // seed ownership with one preferred item
        let first_cat = rng.next_weighted(&user_preferences[u]);
        owned.push(pick_item_in(&mut rng, first_cat, style, None));

        for t in 0..config.interactions_per_user {
            // the first three events cycle so every user touches every
            // functionality; the rest follow the configured mix
            let functionality = if t < 3 {
                Functionality::ALL[t]
            } else {
                Functionality::ALL[rng.next_weighted(&config.functionality_mix)]
            };
            let (request, clicked) = match functionality {
                Functionality::KeywordSearch => {
                    let cat = rng.next_weighted(&user_preferences[u]);
                    let target = pick_item_in(&mut rng, cat, style, None);
                    let tokens = tokenize(&items.get(target).text);
                    // queries split between category-ambiguous (one pool
                    // token, click disambiguated by preference) and precise
                    // (item-unique token plus a pool token)
                    let pool_tokens: Vec<&String> =
                        tokens.iter().filter(|t| t.starts_with('w')).collect();
                    let unique_tokens: Vec<&String> =
                        tokens.iter().filter(|t| t.starts_with('q')).collect();
                    let mut query: Vec<String> = Vec::new();
                    if rng.next_f64() < 0.5 && !unique_tokens.is_empty() {
                        query.push(unique_tokens[rng.next_below(unique_tokens.len())].clone());
                    }
                    query.push(pool_tokens[rng.next_below(pool_tokens.len())].clone());
                    if rng.next_f64() < config.noise_rate {
                        query.push(noise_tokens[rng.next_below(noise_tokens.len())].clone());
                    }
                    (
                        Request {
                            functionality,
                            payload: RequestPayload::QueryText(query.join(" ")),
                        },
                        target,
                    )
                }
                Functionality::QueryByExample => {
                    let anchor = owned[rng.next_below(owned.len())];
                    let cat = item_category[anchor];
                    let clicked = pick_item_in(&mut rng, cat, style, Some(anchor));
                    (
                        Request {
                            functionality,
                            payload: RequestPayload::AnchorItem(
                                items.get(anchor).item_id.clone(),
                            ),
                        },
                        clicked,
                    )
                }
                Functionality::ComplementaryRec => {
                    let anchor = owned[rng.next_below(owned.len())];
                    let cat = item_category[anchor];
                    let comp_set: Vec<usize> = complements[cat].iter().copied().collect();
                    // complement choice follows the user's preferences
                    let weights: Vec<f64> = comp_set
                        .iter()
                        .map(|&c| user_preferences[u][c] + 1e-6)
                        .collect();
                    let comp_cat = comp_set[rng.next_weighted(&weights)];
                    let clicked = pick_item_in(&mut rng, comp_cat, style, None);
                    (
                        Request {
                            functionality,
                            payload: RequestPayload::AnchorItem(
                                items.get(anchor).item_id.clone(),
                            ),
                        },
                        clicked,
                    )
                }
            };
            owned.push(clicked);
            raw.push(Interaction {
                user_id: Some(user_id.clone()),
                timestamp: (t + 1) as u64,
                request,
                clicked_item_id: items.get(clicked).item_id.clone(),
            });
        }
    }

    let log = InteractionLog::from_interactions(raw, &items).expect("generated log is valid");
    World {
        items,
        log,
        truth: WorldGroundTruth {
            item_category,
            item_style,
            complements,
            user_preferences,
            user_style,
            noise_tokens,
        },
    }
}

impl World {
    /// Ground-truth relevant items for a generated request.
    ///
    /// Search: items whose tokens cover the query's non-noise tokens.
    /// Query by example: same-category items excluding the anchor.
    /// Complementary recommendation: items of complement categories.
    pub fn oracle_relevance(&self, request: &Request) -> BTreeSet<usize> {
        match (&request.functionality, &request.payload) {
            (Functionality::KeywordSearch, RequestPayload::QueryText(q)) => {
                let wanted: Vec<String> = tokenize(q)
                    .into_iter()
                    .filter(|t| !t.starts_with("zz"))
                    .collect();
                (0..self.items.len())
                    .filter(|&ord| {
                        let tokens: BTreeSet<String> =
                            tokenize(&self.items.get(ord).text).into_iter().collect();
                        wanted.iter().all(|w| tokens.contains(w))
                    })
                    .collect()
            }
            (Functionality::QueryByExample, RequestPayload::AnchorItem(id)) => {
                let anchor = self.items.ordinal_of(id).expect("anchor from the log");
                let cat = self.truth.item_category[anchor];
                (0..self.items.len())
                    .filter(|&ord| ord != anchor && self.truth.item_category[ord] == cat)
                    .collect()
            }
            (Functionality::ComplementaryRec, RequestPayload::AnchorItem(id)) => {
                let anchor = self.items.ordinal_of(id).expect("anchor from the log");
                let comp = &self.truth.complements[self.truth.item_category[anchor]];
                (0..self.items.len())
                    .filter(|&ord| comp.contains(&self.truth.item_category[ord]))
                    .collect()
            }
            _ => BTreeSet::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_gives_identical_worlds() {
        let a = generate_world(&WorldConfig::tiny(5));
        let b = generate_world(&WorldConfig::tiny(5));
        assert_eq!(a.items.len(), b.items.len());
        for i in 0..a.items.len() {
            assert_eq!(a.items.get(i), b.items.get(i));
        }
        assert_eq!(a.log.len(), b.log.len());
        for i in 0..a.log.len() {
            assert_eq!(a.log.get(i), b.log.get(i));
        }
    }

    #[test]
    fn different_seeds_differ() {
        let a = generate_world(&WorldConfig::tiny(5));
        let b = generate_world(&WorldConfig::tiny(6));
        let same = (0..a.log.len().min(b.log.len()))
            .all(|i| a.log.get(i) == b.log.get(i));
        assert!(!same);
    }

    #[test]
    fn interaction_counts_match_config() {
        let cfg = WorldConfig::tiny(1);
        let w = generate_world(&cfg);
        assert_eq!(w.log.len(), cfg.users * cfg.interactions_per_user);
        assert_eq!(w.items.len(), cfg.categories * cfg.items_per_category);
        assert_eq!(w.log.num_users(), cfg.users);
    }

    #[test]
    fn complement_graph_is_irreflexive_and_clicks_respect_it() {
        let w = generate_world(&WorldConfig::tiny(2));
        for (c, comp) in w.truth.complements.iter().enumerate() {
            assert!(!comp.contains(&c));
        }
        for inter in w.log.iter() {
            if inter.request.functionality == Functionality::ComplementaryRec {
                if let RequestPayload::AnchorItem(id) = &inter.request.payload {
                    let anchor = w.items.ordinal_of(id).unwrap();
                    let clicked = w.items.ordinal_of(&inter.clicked_item_id).unwrap();
                    assert_ne!(
                        w.truth.item_category[anchor],
                        w.truth.item_category[clicked],
                        "complementary click may not share the anchor's category"
                    );
                }
            }
        }
    }

    #[test]
    fn qbe_oracle_excludes_anchor() {
        let w = generate_world(&WorldConfig::tiny(3));
        for inter in w.log.iter() {
            if inter.request.functionality == Functionality::QueryByExample {
                let oracle = w.oracle_relevance(&inter.request);
                if let RequestPayload::AnchorItem(id) = &inter.request.payload {
                    let anchor = w.items.ordinal_of(id).unwrap();
                    assert!(!oracle.contains(&anchor));
                }
            }
        }
    }

    #[test]
    fn qbe_and_cir_oracles_are_disjoint_for_one_anchor() {
        let w = generate_world(&WorldConfig::tiny(4));
        for inter in w.log.iter() {
            if let RequestPayload::AnchorItem(id) = &inter.request.payload {
                let qbe = w.oracle_relevance(&Request {
                    functionality: Functionality::QueryByExample,
                    payload: RequestPayload::AnchorItem(id.clone()),
                });
                let cir = w.oracle_relevance(&Request {
                    functionality: Functionality::ComplementaryRec,
                    payload: RequestPayload::AnchorItem(id.clone()),
                });
                assert!(qbe.intersection(&cir).next().is_none());
            }
        }
    }

    #[test]
    fn search_oracle_contains_the_click_for_noise_free_queries() {
        let mut cfg = WorldConfig::tiny(8);
        cfg.noise_rate = 0.0;
        let w = generate_world(&cfg);
        let mut checked = 0;
        for inter in w.log.iter() {
            if inter.request.functionality == Functionality::KeywordSearch {
                let oracle = w.oracle_relevance(&inter.request);
                assert!(!oracle.is_empty());
                let clicked = w.items.ordinal_of(&inter.clicked_item_id).unwrap();
                assert!(oracle.contains(&clicked));
                checked += 1;
            }
        }
        assert!(checked > 0);
    }

    #[test]
    fn clicks_resolve_and_anchors_resolve() {
        let w = generate_world(&WorldConfig::tiny(9));
        for inter in w.log.iter() {
            assert!(w.items.ordinal_of(&inter.clicked_item_id).is_some());
            if let RequestPayload::AnchorItem(id) = &inter.request.payload {
                assert!(w.items.ordinal_of(id).is_some());
            }
        }
    }

    #[test]
    fn preferences_sum_to_one() {
        let w = generate_world(&WorldConfig::tiny(10));
        for prefs in &w.truth.user_preferences {
            let total: f64 = prefs.iter().sum();
            assert!((total - 1.0).abs() < 1e-9);
        }
    }
}
