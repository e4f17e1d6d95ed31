use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_ITEMS: usize = 20;
pub const DEFAULT_CATEGORIES: usize = 3;

const CATEGORIES: [(&str, [&str; 4]); 5] = [
    ("deodorant", ["killer", "fresh", "sport", "unscented"]),
    ("headphones", ["wireless", "noise-cancelling", "foldable", "bass"]),
    ("coffee", ["organic", "decaf", "dark-roast", "whole-bean"]),
    ("backpack", ["waterproof", "laptop", "hiking", "compact"]),
    ("lamp", ["dimmable", "usb", "clip-on", "warm"]),
];

const BRANDS: [&str; 10] = ["Acme", "Borealis", "Cobalt", "Dune", "Ember", "Fjord", "Granite", "Halcyon", "Ion", "Juniper"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Item {
    pub id: u32,
    pub name: String,
    pub category: String,
    pub price_cents: u32,
    pub attributes: Vec<String>,
}

impl Item {
    pub fn has(&self, attribute: &str) -> bool {
        self.attributes.iter().any(|a| a == attribute)
    }

    pub fn price(&self) -> String {
        format!("${}.{:02}", self.price_cents / 100, self.price_cents % 100)
    }

    fn matches(&self, token: &str) -> bool {
        let t = token.to_ascii_lowercase();
        self.name.to_ascii_lowercase().contains(&t)
            || self.category.contains(&t)
            || self.attributes.iter().any(|a| a.contains(&t))
    }
}

/// Small item catalog with substring search.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SimCatalog {
    pub items: Vec<Item>,
    pub categories: Vec<String>,
}

impl Default for SimCatalog {
    fn default() -> Self {
        Self::generate(0, DEFAULT_ITEMS, DEFAULT_CATEGORIES)
    }
}

impl SimCatalog {
    /// Items are spread round-robin over the categories. Prices are
    /// distinct, and every attribute of every category is carried by at
    /// least one item when the category has four or more items.
    pub fn generate(seed: u64, size: usize, categories: usize) -> Self {
        let categories = categories.clamp(1, CATEGORIES.len());
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut prices: Vec<u32> = (0..size).map(|i| 199 + 37 * i as u32 + rng.random_range(0..30)).collect();
        prices.shuffle(&mut rng);
        let mut items = Vec::with_capacity(size);
        for (i, price_cents) in prices.into_iter().enumerate() {
            let (category, attrs) = CATEGORIES[i % categories];
            let slot = i / categories;
            let mut attributes = vec![attrs[slot % attrs.len()].to_string()];
            if rng.random_bool(0.5) {
                let extra = attrs[rng.random_range(0..attrs.len())].to_string();
                if !attributes.contains(&extra) {
                    attributes.push(extra);
                }
            }
            attributes.sort();
            let brand = BRANDS[rng.random_range(0..BRANDS.len())];
            items.push(Item {
                id: i as u32 + 1,
                name: format!("{brand} {} No. {}", capitalize(category), slot + 1),
                category: category.to_string(),
                price_cents,
                attributes,
            });
        }
        Self { items, categories: CATEGORIES[..categories].iter().map(|(c, _)| c.to_string()).collect() }
    }

    pub fn item(&self, id: u32) -> Option<&Item> {
        self.items.iter().find(|i| i.id == id)
    }

    /// Ids of items matching every whitespace-separated token, in catalog
    /// order.
    pub fn search(&self, query: &str) -> Vec<u32> {
        let tokens: Vec<&str> = query.split_whitespace().collect();
        if tokens.is_empty() {
            return Vec::new();
        }
        self.items.iter().filter(|i| tokens.iter().all(|t| i.matches(t))).map(|i| i.id).collect()
    }

    pub fn in_category<'a>(&'a self, category: &'a str) -> impl Iterator<Item = &'a Item> + 'a {
        self.items.iter().filter(move |i| i.category == category)
    }

    pub fn attributes_of(&self, category: &str) -> Vec<String> {
        let mut out: Vec<String> = self.in_category(category).flat_map(|i| i.attributes.iter().cloned()).collect();
        out.sort();
        out.dedup();
        out
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().chain(c).collect(),
        None => String::new(),
    }
}
