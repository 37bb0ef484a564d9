//! Synthetic structured examples driven by schema annotations.
//!
//! Values follow their annotation: durations favour round minute/hour
//! multiples, dates are `YYYYMMDD` strings inside a window, entities come from
//! per-type pools of `(english, localized)` names. Pools are consumed without
//! replacement until exhausted so consecutive examples carry diverse values.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use chrono::NaiveDate;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::schema::{self, Annotation, ArgKind, ArgumentSpec, IntentSpec, Schema, StructuredExample};

#[derive(Debug, Error, PartialEq, Eq)]
pub enum SynthError {
    #[error("no value pool for `{0}`")]
    MissingPool(String),
    #[error("infeasible split plan: {0}")]
    InfeasiblePlan(String),
    #[error("invalid sampler configuration: {0}")]
    BadConfig(String),
    #[error("could not draw a test example with held-out values after {0} attempts")]
    HeldoutExhausted(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub seed: u64,
    /// Probability that a duration is an exact multiple of a minute or an hour.
    pub round_multiple_rate: f64,
    /// Keyed by entity type, or by argument name for plain STRING arguments.
    pub value_pools: BTreeMap<String, Vec<(String, String)>>,
    pub date_window: (NaiveDate, NaiveDate),
    pub duration_range: (u64, u64),
    pub cardinal_range: (u64, u64),
    pub number_range: (u64, u64),
    /// Chance of including each optional argument.
    pub optional_rate: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            seed: 0,
            round_multiple_rate: 0.8,
            value_pools: BTreeMap::new(),
            date_window: (
                NaiveDate::from_ymd_opt(2019, 1, 1).expect("valid date"),
                NaiveDate::from_ymd_opt(2020, 12, 31).expect("valid date"),
            ),
            duration_range: (1, 100_000),
            cardinal_range: (1, 10),
            number_range: (0, 100),
            optional_rate: 0.5,
        }
    }
}

impl SamplerConfig {
    pub fn check(&self, schema: &Schema) -> Result<(), SynthError> {
        for (name, p) in [("round_multiple_rate", self.round_multiple_rate), ("optional_rate", self.optional_rate)] {
            if !(0.0..=1.0).contains(&p) {
                return Err(SynthError::BadConfig(format!("{name} must lie in [0, 1]")));
            }
        }
        for (name, (lo, hi)) in [
            ("duration_range", self.duration_range),
            ("cardinal_range", self.cardinal_range),
            ("number_range", self.number_range),
        ] {
            if lo > hi {
                return Err(SynthError::BadConfig(format!("{name} is empty")));
            }
        }
        if self.date_window.0 > self.date_window.1 {
            return Err(SynthError::BadConfig("date_window is empty".into()));
        }
        for a in schema.args() {
            if let Some(t) = a.annotation.entity_type() {
                if self.value_pools.get(t).is_none_or(Vec::is_empty) {
                    return Err(SynthError::MissingPool(t.to_string()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum SplitLabel {
    SeenIntent,
    UnseenIntentSeenDomain,
    UnseenDomain,
}

impl SplitLabel {
    pub const ALL: [SplitLabel; 3] =
        [SplitLabel::SeenIntent, SplitLabel::UnseenIntentSeenDomain, SplitLabel::UnseenDomain];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitLabel::SeenIntent => "SEEN_INTENT",
            SplitLabel::UnseenIntentSeenDomain => "UNSEEN_INTENT_SEEN_DOMAIN",
            SplitLabel::UnseenDomain => "UNSEEN_DOMAIN",
        }
    }

    pub fn parse(s: &str) -> Option<SplitLabel> {
        SplitLabel::ALL.into_iter().find(|l| l.as_str() == s)
    }
}

impl fmt::Display for SplitLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitPlan {
    pub seen_intent: f64,
    pub unseen_intent: f64,
    pub unseen_domain: f64,
    pub test_size: usize,
    /// Forces test STRING values to be disjoint from training ones.
    pub heldout_value_policy: bool,
    /// Share of each value pool reserved for the test side under the held-out policy.
    pub heldout_share: f64,
}

impl Default for SplitPlan {
    fn default() -> Self {
        SplitPlan {
            seen_intent: 1.0 / 3.0,
            unseen_intent: 1.0 / 3.0,
            unseen_domain: 1.0 / 3.0,
            test_size: 0,
            heldout_value_policy: true,
            heldout_share: 0.25,
        }
    }
}

impl SplitPlan {
    fn fractions(&self) -> [f64; 3] {
        [self.seen_intent, self.unseen_intent, self.unseen_domain]
    }

    /// Test examples per split label, by largest remainder.
    pub fn counts(&self) -> [usize; 3] {
        let f = self.fractions();
        let raw: Vec<f64> = f.iter().map(|x| x * self.test_size as f64).collect();
        let mut counts: Vec<usize> = raw.iter().map(|x| x.floor() as usize).collect();
        let mut left = self.test_size - counts.iter().sum::<usize>().min(self.test_size);
        let mut order: Vec<usize> = (0..3).collect();
        order.sort_by(|&a, &b| (raw[b] - raw[b].floor()).total_cmp(&(raw[a] - raw[a].floor())).then(a.cmp(&b)));
        for i in order {
            if left == 0 {
                break;
            }
            if f[i] > 0.0 {
                counts[i] += 1;
                left -= 1;
            }
        }
        [counts[0], counts[1], counts[2]]
    }
}

struct Deck {
    order: Vec<usize>,
    next: usize,
}

/// Stateful example sampler; the sequence it yields is a function of the seed.
pub struct Sampler<'a> {
    config: &'a SamplerConfig,
    pools: BTreeMap<String, Vec<(String, String)>>,
    rng: ChaCha8Rng,
    decks: HashMap<String, Deck>,
}

impl<'a> Sampler<'a> {
    pub fn new(config: &'a SamplerConfig) -> Self {
        Self::with_pools(config, config.value_pools.clone(), config.seed)
    }

    fn with_pools(config: &'a SamplerConfig, pools: BTreeMap<String, Vec<(String, String)>>, seed: u64) -> Self {
        Sampler { config, pools, rng: ChaCha8Rng::seed_from_u64(seed), decks: HashMap::new() }
    }

    pub fn rng(&mut self) -> &mut ChaCha8Rng {
        &mut self.rng
    }

    /// Draws one example for `intent`; the result validates against `schema`.
    pub fn sample_example(&mut self, intent: &IntentSpec, schema: &Schema) -> Result<StructuredExample, SynthError> {
        let mut ex = StructuredExample::new(intent.intent_ref());
        for a in &intent.args {
            if !a.required && !self.rng.gen_bool(self.config.optional_rate) {
                continue;
            }
            let spec = schema.arg(&a.name).expect("intent arguments exist in the schema");
            let (value, localized) = self.sample_value(spec)?;
            ex.values.insert(a.name.clone(), value);
            if let Some(l) = localized {
                ex.localized_values.insert(a.name.clone(), l);
            }
        }
        Ok(ex)
    }

    fn sample_value(&mut self, spec: &ArgumentSpec) -> Result<(String, Option<String>), SynthError> {
        if spec.kind == ArgKind::Enum {
            let v = spec.enum_values.choose(&mut self.rng).expect("enums are non-empty");
            return Ok((v.clone(), None));
        }
        let value = match &spec.annotation {
            Annotation::Entity(t) => {
                let (en, loc) = self.draw_pool(t)?.ok_or_else(|| SynthError::MissingPool(t.clone()))?;
                return Ok((en, Some(loc)));
            }
            Annotation::DurationSeconds => self.duration().to_string(),
            Annotation::Date => self.date(),
            Annotation::TimeOfDay => self.time_of_day(),
            Annotation::Cardinal => {
                let (lo, hi) = self.config.cardinal_range;
                self.rng.gen_range(lo..=hi).to_string()
            }
            Annotation::Plain => match spec.kind {
                ArgKind::Number => {
                    let (lo, hi) = self.config.number_range;
                    self.rng.gen_range(lo..=hi).to_string()
                }
                _ => match self.draw_pool(&spec.name)? {
                    Some((en, loc)) => return Ok((en, Some(loc))),
                    None => self.pseudo_word(),
                },
            },
        };
        Ok((value, None))
    }

    fn draw_pool(&mut self, key: &str) -> Result<Option<(String, String)>, SynthError> {
        let Some(pool) = self.pools.get(key).filter(|p| !p.is_empty()) else {
            return Ok(None);
        };
        let deck = self.decks.entry(key.to_string()).or_insert_with(|| Deck { order: Vec::new(), next: 0 });
        if deck.order.is_empty() {
            deck.order = (0..pool.len()).collect();
            deck.order.shuffle(&mut self.rng);
        }
        let i = if deck.next < deck.order.len() {
            deck.next += 1;
            deck.order[deck.next - 1]
        } else {
            self.rng.gen_range(0..pool.len())
        };
        Ok(Some(pool[i].clone()))
    }

    fn duration(&mut self) -> u64 {
        let (lo, hi) = self.config.duration_range;
        if self.rng.gen_bool(self.config.round_multiple_rate) {
            let units: Vec<u64> = [60u64, 3600].into_iter().filter(|u| hi / u >= lo.div_ceil(*u).max(1)).collect();
            if let Some(&unit) = units.choose(&mut self.rng) {
                let k = self.rng.gen_range(lo.div_ceil(unit).max(1)..=hi / unit);
                return k * unit;
            }
        }
        self.rng.gen_range(lo..=hi)
    }

    fn date(&mut self) -> String {
        let (start, end) = self.config.date_window;
        let span = (end - start).num_days();
        let d = start + chrono::Duration::days(self.rng.gen_range(0..=span));
        d.format("%Y%m%d").to_string()
    }

    fn time_of_day(&mut self) -> String {
        let hour = self.rng.gen_range(1..=12);
        let minute = if self.rng.gen_bool(self.config.round_multiple_rate) {
            *[0, 30].choose(&mut self.rng).expect("non-empty")
        } else {
            self.rng.gen_range(0..60)
        };
        let half = if self.rng.gen_bool(0.5) { "am" } else { "pm" };
        format!("{hour}:{minute:02} {half}")
    }

    fn pseudo_word(&mut self) -> String {
        const SYLLABLES: [&str; 16] =
            ["ka", "lo", "mi", "ra", "ten", "vo", "shi", "do", "na", "pel", "ru", "sa", "bi", "gor", "le", "tu"];
        let n = self.rng.gen_range(2..=3);
        let mut w: String = (0..n).map(|_| *SYLLABLES.choose(&mut self.rng).expect("non-empty")).collect();
        if let Some(first) = w.get_mut(0..1) {
            first.make_ascii_uppercase();
        }
        w
    }
}

/// Draws one example for `intent` from a fresh sampler state.
pub fn sample_example(
    intent: &IntentSpec,
    schema: &Schema,
    config: &SamplerConfig,
) -> Result<StructuredExample, SynthError> {
    Sampler::new(config).sample_example(intent, schema)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<StructuredExample>,
    pub test: Vec<(StructuredExample, SplitLabel)>,
}

impl Dataset {
    /// `line \t label` for every test example (lines count from 1).
    pub fn split_manifest(&self) -> String {
        self.test.iter().enumerate().map(|(i, (_, l))| format!("{}\t{}\n", i + 1, l)).collect()
    }
}

/// Generates `n_train` training and `plan.test_size` test examples.
///
/// With non-zero unseen fractions, one domain (and one intent in every other
/// domain that has several) is withheld from training.
pub fn generate_dataset(
    schema: &Schema,
    intents: &[IntentSpec],
    n_train: usize,
    plan: &SplitPlan,
    config: &SamplerConfig,
) -> Result<Dataset, SynthError> {
    config.check(schema)?;
    let sum: f64 = plan.fractions().iter().sum();
    if (sum - 1.0).abs() > 1e-9 || plan.fractions().iter().any(|f| *f < 0.0) {
        return Err(SynthError::InfeasiblePlan("split fractions must be non-negative and sum to 1".into()));
    }
    if !(0.0..1.0).contains(&plan.heldout_share) || (plan.heldout_value_policy && plan.heldout_share == 0.0) {
        return Err(SynthError::InfeasiblePlan("heldout_share must lie in (0, 1)".into()));
    }
    if intents.is_empty() {
        return Err(SynthError::InfeasiblePlan("no intents".into()));
    }
    let mut plan_rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_5eed);
    let mut domains: Vec<&str> = Vec::new();
    for i in intents {
        if !domains.contains(&i.domain.as_str()) {
            domains.push(&i.domain);
        }
    }
    let counts = plan.counts();
    let mut unseen_domain: Option<&str> = None;
    if plan.unseen_domain > 0.0 {
        if domains.len() < 2 {
            return Err(SynthError::InfeasiblePlan("an unseen domain needs at least two domains".into()));
        }
        unseen_domain = Some(domains[plan_rng.gen_range(0..domains.len())]);
    }
    let mut unseen_intents: Vec<&IntentSpec> = Vec::new();
    if plan.unseen_intent > 0.0 {
        for d in domains.iter().filter(|d| Some(**d) != unseen_domain) {
            let members: Vec<&IntentSpec> = intents.iter().filter(|i| i.domain == *d).collect();
            if members.len() >= 2 {
                unseen_intents.push(members[plan_rng.gen_range(0..members.len())]);
            }
        }
        if unseen_intents.is_empty() {
            return Err(SynthError::InfeasiblePlan("no seen domain has two or more intents".into()));
        }
    }
    let seen: Vec<&IntentSpec> = intents
        .iter()
        .filter(|i| Some(i.domain.as_str()) != unseen_domain && !unseen_intents.contains(i))
        .collect();
    if seen.is_empty() {
        return Err(SynthError::InfeasiblePlan("no intents left for training".into()));
    }
    let domain_intents: Vec<&IntentSpec> =
        intents.iter().filter(|i| Some(i.domain.as_str()) == unseen_domain).collect();

    let (train_pools, test_pools) = if plan.heldout_value_policy {
        split_pools(&config.value_pools, plan.heldout_share, &mut plan_rng)
    } else {
        (config.value_pools.clone(), config.value_pools.clone())
    };
    let mut train_sampler = Sampler::with_pools(config, train_pools, config.seed);
    let mut train = Vec::with_capacity(n_train);
    for _ in 0..n_train {
        let intent = seen[train_sampler.rng.gen_range(0..seen.len())];
        train.push(train_sampler.sample_example(intent, schema)?);
    }
    let train_strings: BTreeSet<String> = train
        .iter()
        .flat_map(|e| schema::string_values(schema, e).into_iter().map(str::to_string))
        .collect();

    let mut test_sampler = Sampler::with_pools(config, test_pools, config.seed.wrapping_add(1));
    let groups: [&[&IntentSpec]; 3] = [&seen, &unseen_intents, &domain_intents];
    let mut test = Vec::with_capacity(plan.test_size);
    for (label, (count, group)) in SplitLabel::ALL.into_iter().zip(counts.into_iter().zip(groups)) {
        for _ in 0..count {
            let intent = group[test_sampler.rng.gen_range(0..group.len())];
            let mut attempts = 0;
            let ex = loop {
                let ex = test_sampler.sample_example(intent, schema)?;
                let clash = plan.heldout_value_policy
                    && schema::string_values(schema, &ex).iter().any(|v| train_strings.contains(*v));
                if !clash {
                    break ex;
                }
                attempts += 1;
                if attempts >= 1000 {
                    return Err(SynthError::HeldoutExhausted(attempts));
                }
            };
            test.push((ex, label));
        }
    }
    Ok(Dataset { train, test })
}

type Pools = BTreeMap<String, Vec<(String, String)>>;

fn split_pools(pools: &Pools, share: f64, rng: &mut ChaCha8Rng) -> (Pools, Pools) {
    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for (k, pool) in pools {
        let mut p = pool.clone();
        p.shuffle(rng);
        let n_test = ((p.len() as f64 * share).round() as usize).clamp(1, p.len().saturating_sub(1).max(1));
        let rest = p.split_off(n_test);
        test.insert(k.clone(), p);
        train.insert(k.clone(), rest);
    }
    (train, test)
}
