//! Regenerates the checked-in synthetic news fixtures under `tests/data/`:
//! a 4-class training corpus of 500 short headlines, a 120-headline held-out
//! split, a hand-built concept lexicon, and a desk-scale settings file.
//!
//! The generator is deterministic (fixed seed), so running it again
//! reproduces the committed files byte for byte.

use std::fs;
use std::path::PathBuf;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

const POOLS: [(&str, &[&str]); 4] = [
    (
        "world",
        &[
            "minister", "embassy", "treaty", "border", "summit", "sanctions", "diplomat",
            "parliament", "ceasefire", "refugees", "alliance", "envoy",
        ],
    ),
    (
        "sports",
        &[
            "striker", "coach", "stadium", "tournament", "goal", "league", "champion",
            "playoff", "referee", "midfielder", "medal", "season",
        ],
    ),
    (
        "business",
        &[
            "shares", "profit", "merger", "investors", "earnings", "stocks", "revenue",
            "bank", "inflation", "dividend", "acquisition", "shareholders",
        ],
    ),
    (
        "scitech",
        &[
            "processor", "software", "satellite", "browser", "chip", "algorithm", "robot",
            "laptop", "network", "battery", "telescope", "encryption",
        ],
    ),
];

const FILLER: &[&str] = &[
    "the", "a", "new", "after", "over", "in", "on", "for", "with", "says", "report",
    "announces", "plans", "deal", "talks", "today", "wins", "rises", "falls", "first",
];

/// `<surface>\t<concept>\t<score>` rows for the keyword vocabulary.
const LEXICON: &[(&str, &str, f64)] = &[
    ("minister", "politician", 0.90),
    ("diplomat", "politician", 0.85),
    ("envoy", "politician", 0.80),
    ("embassy", "institution", 0.70),
    ("parliament", "institution", 0.80),
    ("bank", "institution", 0.80),
    ("treaty", "agreement", 0.80),
    ("ceasefire", "agreement", 0.75),
    ("sanctions", "policy", 0.70),
    ("summit", "meeting", 0.80),
    ("refugees", "group", 0.60),
    ("alliance", "coalition", 0.70),
    ("striker", "athlete", 0.90),
    ("midfielder", "athlete", 0.85),
    ("coach", "team_staff", 0.80),
    ("referee", "official", 0.70),
    ("stadium", "venue", 0.90),
    ("tournament", "competition", 0.85),
    ("league", "competition", 0.80),
    ("playoff", "competition", 0.75),
    ("goal", "score_event", 0.70),
    ("champion", "winner", 0.80),
    ("medal", "award", 0.75),
    ("shares", "security", 0.90),
    ("stocks", "security", 0.85),
    ("dividend", "payout", 0.70),
    ("profit", "income", 0.85),
    ("earnings", "income", 0.80),
    ("revenue", "income", 0.75),
    ("merger", "transaction", 0.80),
    ("acquisition", "transaction", 0.85),
    ("investors", "stakeholder", 0.80),
    ("shareholders", "stakeholder", 0.75),
    ("inflation", "indicator", 0.70),
    ("processor", "device", 0.90),
    ("chip", "device", 0.85),
    ("laptop", "device", 0.80),
    ("robot", "device", 0.70),
    ("software", "program", 0.90),
    ("browser", "program", 0.80),
    ("algorithm", "method", 0.75),
    ("encryption", "method", 0.70),
    ("satellite", "spacecraft", 0.80),
    ("telescope", "instrument", 0.75),
    ("network", "system", 0.70),
    ("battery", "component", 0.70),
];

const DESK_CONF: &str = "\
# Desk-scale settings for the synthetic news fixtures.
word_dim = 32
char_dim = 12
concept_dim = 16
hidden = 16
heads = 2
fusion_text_dim = 16
fusion_set_dim = 16
dropout = 0.1
epochs = 5
batch = 25
lr = 0.003
seed = 42
";

/// One headline: 2–4 distinct class keywords, 2–4 filler words, and with
/// probability 0.15 a keyword borrowed from another class.
fn title(rng: &mut ChaCha8Rng, class_idx: usize) -> String {
    let pool = POOLS[class_idx].1;
    let mut words: Vec<&str> = Vec::new();
    let mut order: Vec<usize> = (0..pool.len()).collect();
    order.shuffle(rng);
    let keywords = rng.gen_range(2..=4);
    for &i in order.iter().take(keywords) {
        words.push(pool[i]);
    }
    for _ in 0..rng.gen_range(2..=4) {
        words.push(FILLER.choose(rng).expect("filler pool is non-empty"));
    }
    if rng.gen_bool(0.15) {
        let other = (class_idx + rng.gen_range(1..4)) % 4;
        words.push(POOLS[other].1.choose(rng).expect("keyword pool is non-empty"));
    }
    words.shuffle(rng);
    words.join(" ")
}

fn corpus(rng: &mut ChaCha8Rng, per_class: usize) -> String {
    let mut rows: Vec<(usize, String)> = Vec::new();
    for class_idx in 0..POOLS.len() {
        for _ in 0..per_class {
            rows.push((class_idx, title(rng, class_idx)));
        }
    }
    rows.shuffle(rng);
    let mut out = String::new();
    for (class_idx, text) in rows {
        out.push_str(POOLS[class_idx].0);
        out.push('\t');
        out.push_str(&text);
        out.push('\n');
    }
    out
}

fn main() {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data");
    fs::create_dir_all(&dir).expect("create tests/data");
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let train = corpus(&mut rng, 125);
    let test = corpus(&mut rng, 30);
    let mut lexicon = String::new();
    for (surface, concept, score) in LEXICON {
        lexicon.push_str(&format!("{surface}\t{concept}\t{score}\n"));
    }

    for (name, content) in [
        ("agnews_train.tsv", train.as_str()),
        ("agnews_test.tsv", test.as_str()),
        ("lexicon.tsv", lexicon.as_str()),
        ("desk.conf", DESK_CONF),
    ] {
        let path = dir.join(name);
        fs::write(&path, content).expect("write fixture");
        println!("wrote {} ({} lines)", path.display(), content.lines().count());
    }
}
