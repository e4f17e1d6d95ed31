use std::fmt::Write;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use super::catalog::SimCatalog;
use crate::model::State;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum SimAction {
    Search(String),
    SortPriceAsc,
    Click(u32),
    Inspect,
    AddToCart,
    RemoveFromCart(u32),
    GoBack,
    Comment(String),
    Stop(String),
}

impl SimAction {
    /// Parses `name [arg]` action strings.
    pub fn parse(raw: &str) -> Option<Self> {
        let raw = raw.trim();
        let (name, arg) = match raw.find('[') {
            Some(i) => {
                let rest = raw[i + 1..].trim_end();
                (raw[..i].trim(), Some(rest.strip_suffix(']').unwrap_or(rest).trim()))
            }
            None => (raw, None),
        };
        let id = || arg.and_then(|a| a.parse::<u32>().ok());
        Some(match name.to_ascii_lowercase().as_str() {
            "search" => SimAction::Search(arg?.to_string()),
            "sort" if arg.is_some_and(|a| a.eq_ignore_ascii_case("price_asc")) => SimAction::SortPriceAsc,
            "click" => SimAction::Click(id()?),
            "inspect" => SimAction::Inspect,
            "add_to_cart" => SimAction::AddToCart,
            "remove_from_cart" => SimAction::RemoveFromCart(id()?),
            "go_back" => SimAction::GoBack,
            "comment" => SimAction::Comment(arg?.to_string()),
            "stop" => SimAction::Stop(arg.unwrap_or("").to_string()),
            _ => return None,
        })
    }

    pub fn render(&self) -> String {
        match self {
            SimAction::Search(q) => format!("search [{q}]"),
            SimAction::SortPriceAsc => "sort [price_asc]".into(),
            SimAction::Click(id) => format!("click [{id}]"),
            SimAction::Inspect => "inspect".into(),
            SimAction::AddToCart => "add_to_cart".into(),
            SimAction::RemoveFromCart(id) => format!("remove_from_cart [{id}]"),
            SimAction::GoBack => "go_back".into(),
            SimAction::Comment(t) => format!("comment [{t}]"),
            SimAction::Stop(a) => format!("stop [{a}]"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Page {
    Home,
    Results { query: String, ids: Vec<u32>, sorted: bool },
    Item { id: u32, inspected: bool },
}

/// What an action did, kept for the evidence-checking oracles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Event {
    Searched,
    Sorted { ids: Vec<u32> },
    Opened(u32),
    Inspected(u32),
    Added(u32),
    Removed(u32),
    Back,
    Commented(String),
    Stopped,
    Rejected(String),
}

#[derive(Debug, Clone)]
pub struct SimEnv {
    catalog: Arc<SimCatalog>,
    page: Page,
    history: Vec<Page>,
    cart: Vec<u32>,
    comments: Vec<String>,
    events: Vec<Event>,
    message: Option<String>,
}

impl SimEnv {
    pub fn new(catalog: Arc<SimCatalog>) -> Self {
        Self {
            catalog,
            page: Page::Home,
            history: Vec::new(),
            cart: Vec::new(),
            comments: Vec::new(),
            events: Vec::new(),
            message: None,
        }
    }

    pub fn catalog(&self) -> &SimCatalog {
        &self.catalog
    }

    pub fn page(&self) -> &Page {
        &self.page
    }

    pub fn cart(&self) -> &[u32] {
        &self.cart
    }

    pub fn comments(&self) -> &[String] {
        &self.comments
    }

    /// One event per executed action, in order.
    pub fn events(&self) -> &[Event] {
        &self.events
    }

    fn navigate(&mut self, page: Page) {
        let prev = std::mem::replace(&mut self.page, page);
        self.history.push(prev);
    }

    fn reject(&mut self, why: impl Into<String>) -> Event {
        let why = why.into();
        self.message = Some(why.clone());
        Event::Rejected(why)
    }

    /// Executes a raw action string. Unknown or inapplicable actions leave
    /// the state unchanged and show an error on the next observation.
    pub fn step(&mut self, raw: &str) -> &Event {
        self.message = None;
        let event = match SimAction::parse(raw) {
            None => self.reject(format!("unrecognised action `{}`", raw.trim())),
            Some(a) => self.apply(a),
        };
        self.events.push(event);
        self.events.last().expect("pushed above")
    }

    fn apply(&mut self, action: SimAction) -> Event {
        match action {
            SimAction::Search(q) => {
                let ids = self.catalog.search(&q);
                self.navigate(Page::Results { query: q, ids, sorted: false });
                Event::Searched
            }
            SimAction::SortPriceAsc => match &mut self.page {
                Page::Results { ids, sorted, .. } => {
                    let catalog = &self.catalog;
                    ids.sort_by_key(|id| catalog.item(*id).map_or(u32::MAX, |i| i.price_cents));
                    *sorted = true;
                    Event::Sorted { ids: ids.clone() }
                }
                _ => self.reject("nothing to sort on this page"),
            },
            SimAction::Click(id) => match &self.page {
                Page::Results { ids, .. } if ids.contains(&id) => {
                    self.navigate(Page::Item { id, inspected: false });
                    Event::Opened(id)
                }
                _ => self.reject(format!("no element [{id}] on this page")),
            },
            SimAction::Inspect => match &mut self.page {
                Page::Item { id, inspected } => {
                    *inspected = true;
                    Event::Inspected(*id)
                }
                _ => self.reject("nothing to inspect on this page"),
            },
            SimAction::AddToCart => match self.page {
                Page::Item { id, .. } if !self.cart.contains(&id) => {
                    self.cart.push(id);
                    Event::Added(id)
                }
                Page::Item { .. } => self.reject("item already in cart"),
                _ => self.reject("open an item page to add it to the cart"),
            },
            SimAction::RemoveFromCart(id) => match self.cart.iter().position(|c| *c == id) {
                Some(pos) => {
                    self.cart.remove(pos);
                    Event::Removed(id)
                }
                None => self.reject(format!("item [{id}] is not in the cart")),
            },
            SimAction::GoBack => match self.history.pop() {
                Some(p) => {
                    self.page = p;
                    Event::Back
                }
                None => self.reject("no previous page"),
            },
            SimAction::Comment(text) => {
                self.comments.push(text.clone());
                Event::Commented(text)
            }
            SimAction::Stop(_) => Event::Stopped,
        }
    }

    pub fn url(&self) -> String {
        match &self.page {
            Page::Home => "sim://home".into(),
            Page::Results { query, sorted, .. } => {
                format!("sim://search?q={}{}", query.replace(' ', "+"), if *sorted { "&sort=price_asc" } else { "" })
            }
            Page::Item { id, .. } => format!("sim://item/{id}"),
        }
    }

    /// Text panel standing in for a screenshot.
    pub fn observation(&self) -> String {
        let mut out = String::new();
        match &self.page {
            Page::Home => {
                let _ = write!(out, "Home page. Categories: {}.", self.catalog.categories.join(", "));
            }
            Page::Results { query, ids, sorted } => {
                let order = if *sorted { "price, lowest first" } else { "relevance" };
                let _ = write!(out, "Search results for \"{query}\" ({} items, sorted by {order}):", ids.len());
                for id in ids {
                    if let Some(item) = self.catalog.item(*id) {
                        let _ = write!(out, " [{id}] {} {};", item.name, item.price());
                    }
                }
            }
            Page::Item { id, inspected } => {
                if let Some(item) = self.catalog.item(*id) {
                    let _ = write!(out, "Item page [{id}]: {} {}, category {}.", item.name, item.price(), item.category);
                    if *inspected {
                        let _ = write!(out, " Attributes: {}.", item.attributes.join(", "));
                    }
                }
            }
        }
        let _ = write!(out, " Cart: {} item(s).", self.cart.len());
        if let Some(m) = &self.message {
            let _ = write!(out, " Error: {m}.");
        }
        out
    }

    pub fn state(&self, index: u32) -> State {
        let mut s = State::with_text(index, self.observation());
        s.url_or_app = Some(self.url());
        s
    }
}
