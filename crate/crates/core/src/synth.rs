//! Synthetic topic-classification task streams with planted sensitive tokens.
//!
//! Each task is a small domain with three classes. A sequence mixes two or
//! three class topic words with shared function words and, with some
//! probability, one planted sensitive token (a fake account number or a rare
//! personal name drawn from a per-task pool). The label is the class name.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusRecord, Split};
use crate::error::{Error, Result};

struct Domain {
    classes: [(&'static str, [&'static str; 8]); 3],
    names: [&'static str; 6],
    ids: [&'static str; 6],
}

const DOMAINS: [Domain; 6] = [
    Domain {
        classes: [
            ("card", ["card", "pin", "swipe", "chip", "terminal", "declined", "contactless", "atm"]),
            ("loan", ["loan", "mortgage", "interest", "repayment", "principal", "lender", "credit", "installment"]),
            ("transfer", ["transfer", "wire", "routing", "beneficiary", "remittance", "swift", "payee", "recipient"]),
        ],
        names: ["okonkwo", "zbigniew", "thandiwe", "xiomara", "eustace", "ngozi"],
        ids: ["4417", "90213", "55802", "31907", "77146", "20938"],
    },
    Domain {
        classes: [
            ("cardio", ["heart", "artery", "pulse", "cholesterol", "stent", "rhythm", "valve", "pressure"]),
            ("neuro", ["brain", "nerve", "migraine", "seizure", "neuron", "spinal", "memory", "tremor"]),
            ("derma", ["skin", "rash", "eczema", "acne", "mole", "itch", "lesion", "sunburn"]),
        ],
        names: ["anneliese", "bartholomew", "chidinma", "dagny", "evander", "folasade"],
        ids: ["60418", "83355", "12094", "47781", "39016", "58820"],
    },
    Domain {
        classes: [
            ("flight", ["flight", "airline", "boarding", "gate", "runway", "luggage", "layover", "pilot"]),
            ("hotel", ["hotel", "suite", "checkin", "lobby", "concierge", "housekeeping", "minibar", "reservation"]),
            ("rail", ["train", "railway", "platform", "carriage", "conductor", "ticket", "station", "sleeper"]),
        ],
        names: ["gwendolyn", "hieronymus", "ifeoma", "jorunn", "kwabena", "leocadia"],
        ids: ["71623", "28450", "96037", "14589", "63201", "85574"],
    },
    Domain {
        classes: [
            ("soccer", ["goal", "striker", "penalty", "offside", "midfield", "keeper", "corner", "referee"]),
            ("tennis", ["serve", "volley", "racket", "deuce", "baseline", "backhand", "ace", "tiebreak"]),
            ("chess", ["bishop", "rook", "pawn", "checkmate", "gambit", "castling", "knight", "endgame"]),
        ],
        names: ["mstislav", "nkechi", "oddvar", "pomona", "quirinus", "radoslava"],
        ids: ["30972", "74415", "19368", "52687", "88103", "46259"],
    },
    Domain {
        classes: [
            ("network", ["router", "packet", "latency", "firewall", "bandwidth", "switch", "subnet", "gateway"]),
            ("database", ["query", "index", "schema", "table", "transaction", "replica", "shard", "join"]),
            ("security", ["password", "breach", "phishing", "malware", "token", "encryption", "exploit", "patch"]),
        ],
        names: ["sigrun", "temperance", "ugochukwu", "valdemar", "wilhelmina", "yevgenia"],
        ids: ["67340", "21895", "90456", "35718", "82063", "11427"],
    },
    Domain {
        classes: [
            ("baking", ["dough", "oven", "yeast", "flour", "crust", "knead", "pastry", "proof"]),
            ("grilling", ["grill", "charcoal", "smoke", "brisket", "skewer", "marinade", "sear", "embers"]),
            ("brewing", ["hops", "malt", "barley", "ferment", "wort", "lager", "ale", "keg"]),
        ],
        names: ["zenobia", "aurelio", "bronislawa", "cosimo", "desdemona", "euphemia"],
        ids: ["58316", "40782", "93641", "26054", "71908", "15293"],
    },
];

/// Shared function words; all of them are in the bundled stopword list.
const FUNCTION_WORDS: [&str; 12] = ["the", "a", "of", "my", "is", "to", "and", "in", "for", "on", "with", "was"];

/// Shared content words that are not stopwords and carry no class signal.
const NEUTRAL_WORDS: [&str; 8] = ["customer", "report", "today", "please", "issue", "request", "update", "need"];

pub const MAX_TASKS: usize = DOMAINS.len();

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub num_tasks: usize,
    pub train_per_task: usize,
    pub eval_per_task: usize,
    /// Probability that a sequence carries one planted sensitive token.
    pub sensitive_rate: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            num_tasks: 3,
            train_per_task: 300,
            eval_per_task: 100,
            sensitive_rate: 0.35,
            seed: 0,
        }
    }
}

/// Planted sensitive surfaces of the first `num_tasks` domains.
pub fn sensitive_surfaces(num_tasks: usize) -> Vec<&'static str> {
    DOMAINS
        .iter()
        .take(num_tasks)
        .flat_map(|d| d.names.iter().chain(d.ids.iter()).copied())
        .collect()
}

fn sequence(domain: &Domain, class: usize, rate: f64, rng: &mut ChaCha8Rng) -> Vec<&'static str> {
    let topic = &domain.classes[class].1;
    let n_topic = rng.random_range(2..=3);
    let mut words: Vec<&str> = topic.choose_multiple(rng, n_topic).copied().collect();
    words.extend(FUNCTION_WORDS.choose_multiple(rng, 2).copied());
    if rng.random_bool(0.5) {
        words.push(NEUTRAL_WORDS.choose(rng).copied().unwrap());
    }
    if rng.random_bool(rate) {
        let pool = if rng.random_bool(0.5) { &domain.names } else { &domain.ids };
        words.push(pool.choose(rng).copied().unwrap());
    }
    words.shuffle(rng);
    words
}

/// Generates the records of a task stream; task ids run from 1.
pub fn generate(config: &SynthConfig) -> Result<Vec<CorpusRecord>> {
    if config.num_tasks == 0 || config.num_tasks > MAX_TASKS {
        return Err(Error::config("synth_tasks", format!("must lie in 1..={MAX_TASKS}")));
    }
    if config.train_per_task == 0 {
        return Err(Error::config("synth_train", "must be at least 1"));
    }
    if !(0.0..=1.0).contains(&config.sensitive_rate) {
        return Err(Error::config("synth_sensitive_rate", "must lie in [0,1]"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut records = Vec::new();
    for (t, domain) in DOMAINS.iter().take(config.num_tasks).enumerate() {
        for (split, n) in [(Split::Train, config.train_per_task), (Split::Eval, config.eval_per_task)] {
            for _ in 0..n {
                let class = rng.random_range(0..3);
                let words = sequence(domain, class, config.sensitive_rate, &mut rng);
                records.push(CorpusRecord {
                    task_id: t as u32 + 1,
                    text: words.join(" "),
                    label: domain.classes[class].0.to_string(),
                    split: Some(split),
                });
            }
        }
    }
    Ok(records)
}

/// A stream in which every text word and every label is a stopword.
pub fn stopword_only(num_tasks: usize, per_task: usize, seed: u64) -> Vec<CorpusRecord> {
    const LABELS: [&str; 2] = ["so", "no"];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut records = Vec::new();
    for t in 1..=num_tasks as u32 {
        for i in 0..per_task {
            let n = rng.random_range(3..=6);
            let words: Vec<&str> = (0..n).map(|_| *FUNCTION_WORDS.choose(&mut rng).unwrap()).collect();
            let label = LABELS[i % 2];
            records.push(CorpusRecord {
                task_id: t,
                text: words.join(" "),
                label: label.to_string(),
                split: Some(if i % 5 == 4 { Split::Eval } else { Split::Train }),
            });
        }
    }
    records
}
