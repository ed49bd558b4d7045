//! MiniShop: a deterministic text storefront with fractional purchase rewards.
//!
//! A world is a small catalog plus a purchase target (required attribute set
//! and a price ceiling). Tasks embed their generation seed in metadata, so
//! the world is reproducible from the task alone and rewards can be computed
//! offline from a stored trajectory.
//!
//! `hard` tasks hide one required attribute: it never appears in any item
//! title or in the task description and is only discoverable by `view`ing
//! items. Agents without guidance tend to buy a decoy that matches the
//! visible requirement and collect partial reward.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{EnvFactory, EnvSpec, EnvState, Environment, StepOutcome};
use crate::error::{Error, Result};
use crate::hashing::stable_hash;
use crate::model::{Split, TaskInstance, Termination, Trajectory};

pub const DEFAULT_MAX_TURNS: u32 = 30;
pub const SEARCH_RESULT_LIMIT: usize = 10;

const NOUNS: &[&str] = &[
    "shirt", "lamp", "backpack", "mug", "jacket", "scarf", "kettle", "notebook",
];
const COLORS: &[&str] = &["red", "blue", "green", "black", "white", "yellow"];
const QUALITIES: &[&str] = &[
    "organic",
    "waterproof",
    "foldable",
    "wireless",
    "vintage",
    "handmade",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Difficulty {
    Easy,
    Hard,
}

impl Difficulty {
    pub fn as_str(self) -> &'static str {
        match self {
            Difficulty::Easy => "easy",
            Difficulty::Hard => "hard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "easy" => Ok(Difficulty::Easy),
            "hard" => Ok(Difficulty::Hard),
            other => Err(Error::Env(format!("unknown difficulty {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CatalogItem {
    pub item_id: String,
    pub title: Vec<String>,
    pub attributes: BTreeSet<String>,
    pub price: u32,
}

impl CatalogItem {
    fn title_text(&self) -> String {
        self.title.join(" ")
    }

    fn attrs_text(&self) -> String {
        self.attributes
            .iter()
            .cloned()
            .collect::<Vec<_>>()
            .join(", ")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskTarget {
    pub required: BTreeSet<String>,
    pub price_ceiling: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiniShopWorld {
    pub catalog: Vec<CatalogItem>,
    pub target: TaskTarget,
}

impl MiniShopWorld {
    pub fn item(&self, item_id: &str) -> Option<&CatalogItem> {
        self.catalog.iter().find(|i| i.item_id == item_id)
    }

    /// Title matches ranked by distinct-word overlap, ties broken by lower
    /// item_id, capped at [`SEARCH_RESULT_LIMIT`].
    pub fn search(&self, query_words: &[String]) -> Vec<&CatalogItem> {
        let query: BTreeSet<&str> = query_words.iter().map(|w| w.as_str()).collect();
        let mut scored: Vec<(usize, &CatalogItem)> = self
            .catalog
            .iter()
            .map(|item| {
                let overlap = item
                    .title
                    .iter()
                    .filter(|w| query.contains(w.as_str()))
                    .count();
                (overlap, item)
            })
            .filter(|(overlap, _)| *overlap > 0)
            .collect();
        scored.sort_by(|a, b| b.0.cmp(&a.0).then_with(|| a.1.item_id.cmp(&b.1.item_id)));
        scored
            .into_iter()
            .take(SEARCH_RESULT_LIMIT)
            .map(|(_, item)| item)
            .collect()
    }
}

/// Metadata keys a MiniShop task must carry.
pub const META_SEED: &str = "minishop_seed";
pub const META_DIFFICULTY: &str = "difficulty";

/// Deterministically generate a task and its world. The task description
/// states visible requirements only; for `hard` tasks one required attribute
/// is discoverable only via `view`.
pub fn make_minishop_task(seed: u64, difficulty: Difficulty) -> (TaskInstance, MiniShopWorld) {
    let mut rng = ChaCha8Rng::seed_from_u64(stable_hash(&[
        "minishop",
        &seed.to_string(),
        difficulty.as_str(),
    ]));

    let noun = *NOUNS.choose(&mut rng).unwrap();
    let color = *COLORS.choose(&mut rng).unwrap();
    let quality = *QUALITIES.choose(&mut rng).unwrap();
    let ceiling = rng.gen_range(20..=60u32);

    let mut required = BTreeSet::new();
    required.insert(color.to_string());
    required.insert(quality.to_string());

    let target_title = match difficulty {
        Difficulty::Easy => vec![color.to_string(), quality.to_string(), noun.to_string()],
        Difficulty::Hard => vec![color.to_string(), noun.to_string()],
    };
    let mut items = vec![CatalogItem {
        item_id: String::new(),
        title: target_title,
        attributes: required.clone(),
        price: rng.gen_range(10..=ceiling),
    }];

    // In-budget decoy: identical visible words, missing the quality attribute.
    let off_quality =
        QUALITIES[(QUALITIES.iter().position(|q| *q == quality).unwrap() + 1) % QUALITIES.len()];
    let mut decoy_attrs = BTreeSet::new();
    decoy_attrs.insert(color.to_string());
    if rng.gen_bool(0.5) {
        decoy_attrs.insert(off_quality.to_string());
    }
    items.push(CatalogItem {
        item_id: String::new(),
        title: vec![color.to_string(), noun.to_string()],
        attributes: decoy_attrs,
        price: rng.gen_range(10..=ceiling),
    });

    // Over-budget decoy.
    let mut pricey_attrs = BTreeSet::new();
    pricey_attrs.insert(color.to_string());
    items.push(CatalogItem {
        item_id: String::new(),
        title: vec![color.to_string(), noun.to_string()],
        attributes: pricey_attrs,
        price: ceiling + rng.gen_range(5..25u32),
    });

    // Fillers. Titles use colors and nouns only, so for hard tasks the
    // required quality never appears in any title. Fillers never carry the
    // target quality: the generated target is the unique full match.
    let other_qualities: Vec<&str> = QUALITIES
        .iter()
        .copied()
        .filter(|q| *q != quality)
        .collect();
    let filler_count = rng.gen_range(5..=7u32);
    for _ in 0..filler_count {
        let f_color = *COLORS.choose(&mut rng).unwrap();
        let f_noun = *NOUNS.choose(&mut rng).unwrap();
        let mut attrs = BTreeSet::new();
        attrs.insert(f_color.to_string());
        if rng.gen_bool(0.5) {
            attrs.insert(other_qualities.choose(&mut rng).unwrap().to_string());
        }
        items.push(CatalogItem {
            item_id: String::new(),
            title: vec![f_color.to_string(), f_noun.to_string()],
            attributes: attrs,
            price: rng.gen_range(10..=80u32),
        });
    }

    // Assign ids by a seeded shuffle of slots, then make sure the in-budget
    // decoy sorts before the target so visible-only shoppers meet it first.
    let n = items.len();
    let mut slots: Vec<usize> = (0..n).collect();
    slots.shuffle(&mut rng);
    for (pos, item) in items.iter_mut().enumerate() {
        item.item_id = format!("i{:02}", slots[pos]);
    }
    if items[0].item_id < items[1].item_id {
        let target_id = items[0].item_id.clone();
        items[0].item_id = items[1].item_id.clone();
        items[1].item_id = target_id;
    }
    items.sort_by(|a, b| a.item_id.cmp(&b.item_id));

    let world = MiniShopWorld {
        catalog: items,
        target: TaskTarget {
            required,
            price_ceiling: ceiling,
        },
    };

    let description = match difficulty {
        Difficulty::Easy => {
            format!("Buy a {color} {quality} {noun} for at most {ceiling} dollars.")
        }
        Difficulty::Hard => format!("Buy a {color} {noun} for at most {ceiling} dollars."),
    };
    let mut metadata = std::collections::BTreeMap::new();
    metadata.insert(META_SEED.to_string(), seed.to_string());
    metadata.insert(META_DIFFICULTY.to_string(), difficulty.as_str().to_string());
    let task = TaskInstance {
        task_id: format!("ms-{}-{seed:04}", difficulty.as_str()),
        scenario_id: format!("shop-{noun}"),
        description,
        split: Split::Train,
        metadata,
    };
    (task, world)
}

/// Rebuild the world a task was generated with, from its metadata.
pub fn world_for_task(task: &TaskInstance) -> Result<MiniShopWorld> {
    let seed_text = task.metadata.get(META_SEED).ok_or_else(|| {
        Error::Env(format!(
            "task {} missing metadata field {META_SEED}",
            task.task_id
        ))
    })?;
    let seed: u64 = seed_text.parse().map_err(|_| {
        Error::Env(format!(
            "task {}: bad {META_SEED} value {seed_text:?}",
            task.task_id
        ))
    })?;
    let difficulty_text = task.metadata.get(META_DIFFICULTY).ok_or_else(|| {
        Error::Env(format!(
            "task {} missing metadata field {META_DIFFICULTY}",
            task.task_id
        ))
    })?;
    let difficulty = Difficulty::parse(difficulty_text)?;
    Ok(make_minishop_task(seed, difficulty).1)
}

/// Trajectory-level reward: fraction of required attributes matched by the
/// bought item, halved when the purchase exceeded the price ceiling. No
/// purchase, or a purchase of a nonexistent item, scores 0.
pub fn score(world: &MiniShopWorld, trajectory: &Trajectory) -> f64 {
    let bought_id = trajectory.steps.iter().rev().find_map(|s| {
        s.action
            .trim()
            .strip_prefix("buy ")
            .map(|rest| rest.trim().to_string())
    });
    let Some(bought_id) = bought_id else {
        return 0.0;
    };
    let Some(item) = world.item(&bought_id) else {
        return 0.0;
    };
    let total = world.target.required.len();
    if total == 0 {
        return 0.0;
    }
    let matched = world.target.required.intersection(&item.attributes).count();
    let price_ok = if item.price <= world.target.price_ceiling {
        1.0
    } else {
        0.5
    };
    (matched as f64 / total as f64) * price_ok
}

/// Oracle: read the latent world and emit an action script that earns 1.0.
/// Returns `None` only for worlds violating the solvability invariant.
pub fn solve(world: &MiniShopWorld) -> Option<Vec<String>> {
    let winner = world.catalog.iter().find(|item| {
        world.target.required.is_subset(&item.attributes)
            && item.price <= world.target.price_ceiling
    })?;
    Some(vec![
        format!("search {}", winner.title_text()),
        format!("view {}", winner.item_id),
        format!("buy {}", winner.item_id),
    ])
}

pub fn default_spec(max_turns: u32) -> Result<EnvSpec> {
    EnvSpec::new(
        "minishop",
        1.0,
        max_turns,
        vec![
            "search <words>".to_string(),
            "view <item_id>".to_string(),
            "buy <item_id>".to_string(),
        ],
    )
}

/// Lowercase alphanumeric word split shared by search parsing.
pub fn words(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(|w| w.to_string())
        .collect()
}

pub struct MiniShopEnv {
    spec: EnvSpec,
    world: Option<MiniShopWorld>,
    state: EnvState,
}

impl MiniShopEnv {
    pub fn new(spec: EnvSpec) -> Self {
        MiniShopEnv {
            spec,
            world: None,
            state: EnvState {
                rng_seed: 0,
                turn: 0,
                terminal: true,
            },
        }
    }

    fn world(&self) -> Result<&MiniShopWorld> {
        self.world
            .as_ref()
            .ok_or_else(|| Error::Env("environment not reset".to_string()))
    }
}

impl Environment for MiniShopEnv {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn reset(&mut self, task: &TaskInstance, seed: u64) -> Result<String> {
        let world = world_for_task(task)?;
        let n = world.catalog.len();
        self.world = Some(world);
        self.state = EnvState {
            rng_seed: seed,
            turn: 0,
            terminal: false,
        };
        Ok(format!(
            "MiniShop session {seed:016x}. Catalog has {n} items. \
             Actions: search <words> | view <item_id> | buy <item_id>."
        ))
    }

    fn step(&mut self, action: &str) -> Result<StepOutcome> {
        if self.state.terminal {
            return Err(Error::Env("step called after terminal".to_string()));
        }
        let world = self.world()?;
        let action = action.trim();
        let (verb, rest) = match action.split_once(char::is_whitespace) {
            Some((v, r)) => (v, r.trim()),
            None => (action, ""),
        };

        let mut done = None;
        let observation = match verb {
            "search" => {
                let results = world.search(&words(rest));
                if results.is_empty() {
                    "results (0): none".to_string()
                } else {
                    let mut lines = vec![format!("results ({}):", results.len())];
                    lines.extend(
                        results
                            .iter()
                            .map(|i| format!("{}: {}", i.item_id, i.title_text())),
                    );
                    lines.join("\n")
                }
            }
            "view" => match world.item(rest) {
                Some(item) => format!(
                    "{}: title: {}; attributes: {}; price: {}",
                    item.item_id,
                    item.title_text(),
                    item.attrs_text(),
                    item.price
                ),
                None => format!("no such item: {rest}"),
            },
            "buy" => {
                done = Some(Termination::AgentDone);
                match world.item(rest) {
                    Some(item) => format!(
                        "bought {}: attributes: {}; price: {}",
                        item.item_id,
                        item.attrs_text(),
                        item.price
                    ),
                    None => format!("bought nothing: no such item {rest}"),
                }
            }
            _ => "invalid action".to_string(),
        };

        self.state.turn += 1;
        if done.is_none() && self.state.turn >= self.spec.max_turns {
            done = Some(Termination::MaxTurns);
        }
        self.state.terminal = done.is_some();
        Ok(StepOutcome { observation, done })
    }

    fn score(&self, trajectory: &Trajectory) -> Result<f64> {
        Ok(score(self.world()?, trajectory))
    }

    fn state(&self) -> EnvState {
        self.state
    }
}

pub struct MiniShopFactory {
    spec: EnvSpec,
}

impl MiniShopFactory {
    pub fn new(max_turns: u32) -> Result<Self> {
        Ok(MiniShopFactory {
            spec: default_spec(max_turns)?,
        })
    }
}

impl EnvFactory for MiniShopFactory {
    fn spec(&self) -> &EnvSpec {
        &self.spec
    }

    fn create(&self, _task: &TaskInstance) -> Result<Box<dyn Environment>> {
        Ok(Box::new(MiniShopEnv::new(self.spec.clone())))
    }
}
