//! Slot ontology and slot-description rendering.
//!
//! The ontology lives in a JSON schema file (the canonical 30-slot file ships
//! in `data/schema.json`). Slot types are fixed by a built-in table and
//! checked against the file on load.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const DEFAULT_SCHEMA: &str = include_str!("../data/schema.json");

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Attraction,
    Hotel,
    Restaurant,
    Taxi,
    Train,
}

impl Domain {
    pub const ALL: [Domain; 5] = [
        Domain::Attraction,
        Domain::Hotel,
        Domain::Restaurant,
        Domain::Taxi,
        Domain::Train,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Domain::Attraction => "attraction",
            Domain::Hotel => "hotel",
            Domain::Restaurant => "restaurant",
            Domain::Taxi => "taxi",
            Domain::Train => "train",
        }
    }
}

impl fmt::Display for Domain {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Domain {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "attraction" => Ok(Domain::Attraction),
            "hotel" => Ok(Domain::Hotel),
            "restaurant" => Ok(Domain::Restaurant),
            "taxi" => Ok(Domain::Taxi),
            "train" => Ok(Domain::Train),
            other => Err(Error::Config(format!(
                "unknown domain `{other}` (expected one of attraction, hotel, restaurant, taxi, train)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SlotType {
    Number,
    Location,
    Time,
    Boolean,
    Name,
    Day,
    Others,
}

impl SlotType {
    /// The word a display name is matched against for the empty-prefix rule.
    fn type_word(self) -> Option<&'static str> {
        match self {
            SlotType::Number => Some("number"),
            SlotType::Location => Some("location"),
            SlotType::Time => Some("time"),
            SlotType::Boolean => Some("boolean"),
            SlotType::Name => Some("name"),
            SlotType::Day => Some("day"),
            SlotType::Others => None,
        }
    }
}

/// Fixed type assignment of the 30 tracked slots.
const SLOT_TYPE_TABLE: &[(&str, SlotType)] = &[
    ("hotel-book stay", SlotType::Number),
    ("hotel-book people", SlotType::Number),
    ("hotel-stars", SlotType::Number),
    ("train-book people", SlotType::Number),
    ("restaurant-book people", SlotType::Number),
    ("train-destination", SlotType::Location),
    ("train-departure", SlotType::Location),
    ("taxi-destination", SlotType::Location),
    ("taxi-departure", SlotType::Location),
    ("train-arriveby", SlotType::Time),
    ("train-leaveat", SlotType::Time),
    ("taxi-leaveat", SlotType::Time),
    ("restaurant-book time", SlotType::Time),
    ("taxi-arriveby", SlotType::Time),
    ("hotel-parking", SlotType::Boolean),
    ("hotel-internet", SlotType::Boolean),
    ("attraction-name", SlotType::Name),
    ("restaurant-name", SlotType::Name),
    ("hotel-name", SlotType::Name),
    ("hotel-book day", SlotType::Day),
    ("train-day", SlotType::Day),
    ("restaurant-book day", SlotType::Day),
    ("hotel-type", SlotType::Others),
    ("attraction-type", SlotType::Others),
    ("hotel-area", SlotType::Others),
    ("attraction-area", SlotType::Others),
    ("restaurant-food", SlotType::Others),
    ("restaurant-pricerange", SlotType::Others),
    ("restaurant-area", SlotType::Others),
    ("hotel-pricerange", SlotType::Others),
];

pub fn type_prefix(slot_type: SlotType) -> &'static str {
    match slot_type {
        SlotType::Number => "number of",
        SlotType::Location => "location of",
        SlotType::Time => "time of",
        SlotType::Boolean => "whether have",
        SlotType::Name | SlotType::Day | SlotType::Others => "",
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DescriptionVariant {
    RawName,
    Human,
    Naive,
    SlotValue,
    Question,
    SlotType,
}

impl DescriptionVariant {
    pub const ALL: [DescriptionVariant; 6] = [
        DescriptionVariant::RawName,
        DescriptionVariant::Human,
        DescriptionVariant::Naive,
        DescriptionVariant::SlotValue,
        DescriptionVariant::Question,
        DescriptionVariant::SlotType,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DescriptionVariant::RawName => "raw_name",
            DescriptionVariant::Human => "human",
            DescriptionVariant::Naive => "naive",
            DescriptionVariant::SlotValue => "slot_value",
            DescriptionVariant::Question => "question",
            DescriptionVariant::SlotType => "slot_type",
        }
    }

    pub fn needs_rng(self) -> bool {
        self == DescriptionVariant::SlotValue
    }
}

impl fmt::Display for DescriptionVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DescriptionVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_lowercase().replace('-', "_");
        DescriptionVariant::ALL
            .into_iter()
            .find(|v| v.as_str() == key)
            .ok_or_else(|| {
                Error::Config(format!(
                    "unknown description variant `{s}` (expected raw_name, human, naive, slot_value, question or slot_type)"
                ))
            })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SlotSpec {
    pub domain: Domain,
    pub slot_name: String,
    pub display_name: String,
    pub slot_type: SlotType,
    pub is_booking: bool,
    pub is_categorical: bool,
    #[serde(default)]
    pub candidate_values: Vec<String>,
    /// Extra boolean surface values tolerated next to `yes` / `no`.
    #[serde(default)]
    pub value_aliases: Vec<String>,
    pub human_description: String,
}

impl SlotSpec {
    /// `domain-slot_name`, the key used in belief states.
    pub fn id(&self) -> String {
        format!("{}-{}", self.domain, self.slot_name)
    }
}

/// Looks the slot up in the fixed slot-type table.
pub fn slot_type_of(spec: &SlotSpec) -> Result<SlotType> {
    let id = spec.id();
    SLOT_TYPE_TABLE
        .iter()
        .find(|(name, _)| *name == id)
        .map(|(_, t)| *t)
        .ok_or_else(|| Error::Schema(format!("slot `{id}` is not one of the tracked slots")))
}

fn contains_word(haystack: &str, word: &str) -> bool {
    haystack.split_whitespace().any(|w| w.eq_ignore_ascii_case(word))
}

fn squash_spaces(s: &str) -> String {
    s.split_whitespace().collect::<Vec<_>>().join(" ")
}

/// Renders the natural-language description of `spec` for `variant`.
///
/// `rng` is only consumed by [`DescriptionVariant::SlotValue`] on categorical
/// slots, where it fixes the order the candidate values are listed in.
pub fn describe<R: Rng + ?Sized>(spec: &SlotSpec, variant: DescriptionVariant, rng: &mut R) -> Result<String> {
    let slot = spec.display_name.as_str();
    let domain = spec.domain.as_str();
    let naive = || format!("{slot} of the {domain}");
    let text = match variant {
        DescriptionVariant::RawName => spec.id(),
        DescriptionVariant::Human => spec.human_description.clone(),
        DescriptionVariant::Naive => naive(),
        DescriptionVariant::SlotValue => {
            if !spec.is_categorical {
                naive()
            } else if spec.candidate_values.is_empty() {
                return Err(Error::Schema(format!(
                    "slot `{}` is categorical but lists no candidate values",
                    spec.id()
                )));
            } else {
                let mut values: Vec<&str> = spec.candidate_values.iter().map(String::as_str).collect();
                values.shuffle(rng);
                format!("{} is {}?", naive(), values.join(" or "))
            }
        }
        DescriptionVariant::Question => {
            format!("What is the {slot} of the {domain} that is the user interested in?")
        }
        DescriptionVariant::SlotType => {
            let overlaps = spec.slot_type.type_word().is_some_and(|w| contains_word(slot, w));
            let prefix = if overlaps { "" } else { type_prefix(spec.slot_type) };
            let body = if spec.is_booking {
                format!("{prefix} {slot} for the {domain} booking")
            } else if spec.slot_type == SlotType::Boolean {
                format!("{prefix} {slot} in the {domain}")
            } else {
                format!("{prefix} {slot} of the {domain}")
            };
            squash_spaces(&body)
        }
    };
    Ok(text)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct SchemaFile {
    version: u32,
    #[serde(default)]
    human_description_source: Option<String>,
    #[serde(default)]
    categorical_source: Option<String>,
    slots: Vec<SlotSpec>,
}

/// The slot ontology. Immutable after load.
#[derive(Debug, Clone)]
pub struct Schema {
    slots: Vec<SlotSpec>,
    index: HashMap<String, usize>,
    source_note: Option<String>,
}

impl Schema {
    /// The canonical 30-slot schema bundled with the crate.
    pub fn canonical() -> Self {
        Self::from_json(DEFAULT_SCHEMA, "bundled schema").expect("bundled schema is valid")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::load(path, e))?;
        Self::from_json(&text, &path.display().to_string())
    }

    pub fn from_json(text: &str, origin: &str) -> Result<Self> {
        let file: SchemaFile = serde_json::from_str(text).map_err(|e| Error::parse(origin, e))?;
        Self::from_slots(file.slots).map(|mut s| {
            s.source_note = file.human_description_source;
            s
        })
    }

    pub fn from_slots(slots: Vec<SlotSpec>) -> Result<Self> {
        let mut index = HashMap::with_capacity(slots.len());
        for (i, spec) in slots.iter().enumerate() {
            validate_slot(spec)?;
            if index.insert(spec.id(), i).is_some() {
                return Err(Error::Schema(format!("duplicate slot `{}`", spec.id())));
            }
        }
        Ok(Schema {
            slots,
            index,
            source_note: None,
        })
    }

    pub fn to_json(&self) -> String {
        let file = SchemaFile {
            version: 1,
            human_description_source: self.source_note.clone(),
            categorical_source: None,
            slots: self.slots.clone(),
        };
        serde_json::to_string_pretty(&file).expect("schema serializes")
    }

    pub fn slots(&self) -> &[SlotSpec] {
        &self.slots
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn get(&self, slot_id: &str) -> Option<&SlotSpec> {
        self.index.get(slot_id).map(|&i| &self.slots[i])
    }

    pub fn require(&self, slot_id: &str) -> Result<&SlotSpec> {
        self.get(slot_id)
            .ok_or_else(|| Error::Schema(format!("unknown slot `{slot_id}`")))
    }

    pub fn contains(&self, slot_id: &str) -> bool {
        self.index.contains_key(slot_id)
    }

    pub fn domains(&self) -> BTreeSet<Domain> {
        self.slots.iter().map(|s| s.domain).collect()
    }

    /// Slots whose domain is in `domains`, in schema order.
    pub fn slots_in<'a>(&'a self, domains: &'a BTreeSet<Domain>) -> impl Iterator<Item = &'a SlotSpec> + 'a {
        self.slots.iter().filter(move |s| domains.contains(&s.domain))
    }

    pub fn restrict_to(&self, domains: &BTreeSet<Domain>) -> Schema {
        let slots = self.slots_in(domains).cloned().collect();
        let mut out = Schema::from_slots(slots).expect("subset of a valid schema is valid");
        out.source_note = self.source_note.clone();
        out
    }
}

fn validate_slot(spec: &SlotSpec) -> Result<()> {
    let id = spec.id();
    if spec.slot_name.trim().is_empty() || spec.display_name.trim().is_empty() {
        return Err(Error::Schema(format!("slot `{id}` has an empty name")));
    }
    if let Ok(expected) = slot_type_of(spec) {
        if expected != spec.slot_type {
            return Err(Error::Schema(format!(
                "slot `{id}` declares type {:?} but the slot-type table says {:?}",
                spec.slot_type, expected
            )));
        }
    }
    if spec.is_categorical && spec.candidate_values.is_empty() {
        return Err(Error::Schema(format!(
            "slot `{id}` is categorical but lists no candidate values"
        )));
    }
    if !spec.is_categorical && !spec.candidate_values.is_empty() {
        return Err(Error::Schema(format!(
            "slot `{id}` is non-categorical but lists candidate values"
        )));
    }
    if spec.slot_type == SlotType::Boolean {
        let got: BTreeSet<&str> = spec.candidate_values.iter().map(String::as_str).collect();
        let mut want: BTreeSet<&str> = ["yes", "no"].into_iter().collect();
        want.extend(spec.value_aliases.iter().map(String::as_str));
        if !spec.is_categorical || got != want {
            return Err(Error::Schema(format!(
                "boolean slot `{id}` must be categorical over yes/no plus declared aliases"
            )));
        }
    }
    for text in [&spec.display_name, &spec.human_description] {
        if text.contains('[') || text.contains(']') {
            return Err(Error::Schema(format!(
                "slot `{id}` text may not contain square brackets"
            )));
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn render(id: &str, variant: DescriptionVariant) -> String {
        let schema = Schema::canonical();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        describe(schema.require(id).unwrap(), variant, &mut rng).unwrap()
    }

    #[test]
    fn canonical_schema_has_thirty_slots() {
        let schema = Schema::canonical();
        assert_eq!(schema.len(), 30);
        assert_eq!(schema.domains().len(), 5);
        for spec in schema.slots() {
            assert_eq!(slot_type_of(spec).unwrap(), spec.slot_type, "{}", spec.id());
        }
    }

    #[test]
    fn slot_type_lookup() {
        let schema = Schema::canonical();
        let ty = |id| slot_type_of(schema.require(id).unwrap()).unwrap();
        assert_eq!(ty("hotel-stars"), SlotType::Number);
        assert_eq!(ty("taxi-departure"), SlotType::Location);
        assert_eq!(ty("restaurant-food"), SlotType::Others);
        assert_eq!(ty("hotel-pricerange"), SlotType::Others);

        let mut unknown = schema.require("hotel-stars").unwrap().clone();
        unknown.slot_name = "rating".into();
        let err = slot_type_of(&unknown).unwrap_err();
        assert!(err.to_string().contains("hotel-rating"));
    }

    #[test]
    fn prefixes() {
        assert_eq!(type_prefix(SlotType::Number), "number of");
        assert_eq!(type_prefix(SlotType::Location), "location of");
        assert_eq!(type_prefix(SlotType::Time), "time of");
        assert_eq!(type_prefix(SlotType::Boolean), "whether have");
        assert_eq!(type_prefix(SlotType::Day), "");
        assert_eq!(type_prefix(SlotType::Name), "");
        assert_eq!(type_prefix(SlotType::Others), "");
    }

    #[test]
    fn slot_type_templates() {
        use DescriptionVariant::SlotType as V;
        assert_eq!(render("hotel-book people", V), "number of people for the hotel booking");
        assert_eq!(render("train-destination", V), "location of destination of the train");
        assert_eq!(render("hotel-parking", V), "whether have parking in the hotel");
        assert_eq!(render("hotel-book day", V), "day for the hotel booking");
        assert_eq!(render("restaurant-book time", V), "time for the restaurant booking");
        assert_eq!(render("train-arriveby", V), "time of arrive by of the train");
        assert_eq!(render("hotel-type", V), "type of the hotel");
        assert_eq!(render("train-day", V), "day of the train");
    }

    #[test]
    fn other_variants() {
        assert_eq!(
            render("attraction-area", DescriptionVariant::Naive),
            "area of the attraction"
        );
        assert_eq!(
            render("hotel-stars", DescriptionVariant::Question),
            "What is the stars of the hotel that is the user interested in?"
        );
        assert_eq!(render("hotel-stars", DescriptionVariant::RawName), "hotel-stars");
        assert_eq!(
            render("attraction-area", DescriptionVariant::Human),
            "area to search for attractions"
        );
        // non-categorical slots fall back to the naive rendering
        assert_eq!(
            render("restaurant-food", DescriptionVariant::SlotValue),
            "food of the restaurant"
        );
    }

    #[test]
    fn slot_value_lists_every_candidate() {
        let text = render("hotel-area", DescriptionVariant::SlotValue);
        assert!(text.starts_with("area of the hotel is "), "{text}");
        assert!(text.ends_with('?'));
        let listed = text.trim_start_matches("area of the hotel is ").trim_end_matches('?');
        let mut got: Vec<&str> = listed.split(" or ").collect();
        got.sort();
        assert_eq!(got, ["centre", "east", "north", "south", "west"]);
    }

    #[test]
    fn categorical_without_candidates_is_rejected() {
        let schema = Schema::canonical();
        let mut spec = schema.require("hotel-area").unwrap().clone();
        spec.candidate_values.clear();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        assert!(matches!(
            describe(&spec, DescriptionVariant::SlotValue, &mut rng),
            Err(Error::Schema(_))
        ));
        assert!(Schema::from_slots(vec![spec]).is_err());
    }

    #[test]
    fn schema_validation() {
        let schema = Schema::canonical();
        let mut dup = schema.slots().to_vec();
        dup.push(dup[0].clone());
        assert!(Schema::from_slots(dup).is_err());

        let mut wrong_type = schema.require("hotel-stars").unwrap().clone();
        wrong_type.slot_type = SlotType::Time;
        assert!(Schema::from_slots(vec![wrong_type]).is_err());

        let mut bad_bool = schema.require("hotel-parking").unwrap().clone();
        bad_bool.candidate_values.push("free".into());
        assert!(Schema::from_slots(vec![bad_bool.clone()]).is_err());
        bad_bool.value_aliases.push("free".into());
        assert!(Schema::from_slots(vec![bad_bool]).is_ok());
    }

    #[test]
    fn json_round_trip() {
        let schema = Schema::canonical();
        let again = Schema::from_json(&schema.to_json(), "round trip").unwrap();
        assert_eq!(schema.slots(), again.slots());
    }

    #[test]
    fn variant_names_parse() {
        for v in DescriptionVariant::ALL {
            assert_eq!(v.as_str().parse::<DescriptionVariant>().unwrap(), v);
        }
        assert_eq!(
            "slot-type".parse::<DescriptionVariant>().unwrap(),
            DescriptionVariant::SlotType
        );
        assert!("fancy".parse::<DescriptionVariant>().is_err());
        let json = serde_json::to_string(&DescriptionVariant::SlotValue).unwrap();
        assert_eq!(json, "\"slot_value\"");
    }
}
